//! Sampling of the learned spectrum: eigenvalue fields over a phase-space
//! grid, latent trajectories and the eigenfunction-magnitude energy proxy,
//! exported as plot-ready CSV tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::dataset::{DatasetBundle, EmbeddingLayout};
use crate::dkn::{eigenvalue_spread, pair_magnitudes, DknModel};
use crate::error::{Error, Result};
use crate::model::DynamicsModel;
use crate::sim::{format_sig, Trajectory};

/// One displayed axis of a phase grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    /// Sample channel varied along this axis.
    pub channel: usize,
    pub min: f64,
    pub max: f64,
    pub resolution: usize,
}

impl AxisSpec {
    pub fn value(&self, i: usize) -> f64 {
        self.min + (self.max - self.min) * i as f64 / (self.resolution - 1) as f64
    }
}

/// How a single grid state is turned into a full delay embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryFill {
    /// The cell's sample is repeated over the whole window, control 0.
    #[default]
    TileZeroControl,
}

impl HistoryFill {
    pub fn name(self) -> &'static str {
        match self {
            HistoryFill::TileZeroControl => "tile-zero-control",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseGrid {
    pub x: AxisSpec,
    pub y: AxisSpec,
    /// Values of the remaining channels of one sample (control included).
    pub fixed: Vec<f64>,
    pub fill: HistoryFill,
}

impl PhaseGrid {
    /// `q` in `[-pi, pi]` by `qdot` in `[-2, 2]`, 101 x 101.
    pub fn default_for(sample_dim: usize) -> Self {
        PhaseGrid {
            x: AxisSpec {
                channel: 0,
                min: -std::f64::consts::PI,
                max: std::f64::consts::PI,
                resolution: 101,
            },
            y: AxisSpec {
                channel: 1,
                min: -2.0,
                max: 2.0,
                resolution: 101,
            },
            fixed: vec![0.0; sample_dim],
            fill: HistoryFill::default(),
        }
    }

    /// Parses `xmin:xmax:nx,ymin:ymax:ny` over channels 0 and 1.
    pub fn parse(spec: &str, sample_dim: usize) -> Result<Self> {
        let bad =
            || Error::InvalidConfig(vec![format!("grid `{spec}`: expected min:max:n,min:max:n")]);
        let axes: Vec<&str> = spec.split(',').collect();
        if axes.len() != 2 {
            return Err(bad());
        }
        let mut parsed = Vec::with_capacity(2);
        for (channel, a) in axes.iter().enumerate() {
            let parts: Vec<&str> = a.split(':').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let min: f64 = parts[0].trim().parse().map_err(|_| bad())?;
            let max: f64 = parts[1].trim().parse().map_err(|_| bad())?;
            let resolution: usize = parts[2].trim().parse().map_err(|_| bad())?;
            parsed.push(AxisSpec {
                channel,
                min,
                max,
                resolution,
            });
        }
        let grid = PhaseGrid {
            x: parsed[0],
            y: parsed[1],
            fixed: vec![0.0; sample_dim],
            fill: HistoryFill::default(),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, a) in [("x", &self.x), ("y", &self.y)] {
            if a.resolution < 2 {
                out.push(format!("grid.{name}.resolution must be >= 2"));
            }
            if !(a.min < a.max) {
                out.push(format!("grid.{name} bounds must satisfy min < max"));
            }
            if a.channel >= self.fixed.len() {
                out.push(format!("grid.{name}.channel out of range"));
            }
        }
        if self.x.channel == self.y.channel {
            out.push("grid axes must use different channels".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub fn cell_count(&self) -> usize {
        self.x.resolution * self.y.resolution
    }

    /// Axis values of cell `i`; the x axis varies fastest.
    pub fn cell(&self, i: usize) -> (f64, f64) {
        (
            self.x.value(i % self.x.resolution),
            self.y.value(i / self.x.resolution),
        )
    }

    /// Raw embeddings of every cell, one row each.
    pub fn embeddings(&self, layout: EmbeddingLayout) -> Result<Array2<f64>> {
        self.validate()?;
        if self.fixed.len() != layout.sample_dim {
            return Err(Error::shape(
                "grid sample",
                layout.sample_dim,
                self.fixed.len(),
            ));
        }
        let mut sample = self.fixed.clone();
        sample[layout.sample_dim - 1] = 0.0;
        let mut out = Array2::zeros((self.cell_count(), layout.len()));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (a, b) = self.cell(i);
            sample[self.x.channel] = a;
            sample[self.y.channel] = b;
            for (j, v) in row.iter_mut().enumerate() {
                *v = sample[j % layout.sample_dim];
            }
        }
        Ok(out)
    }
}

/// A per-cell or per-step derived value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Mu(usize),
    Omega(usize),
    Magnitude(usize),
    Real(usize),
    Imag(usize),
    Energy,
}

impl Quantity {
    pub fn name(self) -> String {
        match self {
            Quantity::Mu(k) => format!("mu_{}", k + 1),
            Quantity::Omega(k) => format!("omega_{}", k + 1),
            Quantity::Magnitude(k) => format!("magnitude_{}", k + 1),
            Quantity::Real(k) => format!("real_{}", k + 1),
            Quantity::Imag(k) => format!("imag_{}", k + 1),
            Quantity::Energy => "energy".into(),
        }
    }

    /// Inverse of [`name`](Self::name).
    pub fn parse(s: &str) -> Option<Self> {
        if s == "energy" {
            return Some(Quantity::Energy);
        }
        let (head, idx) = s.rsplit_once('_')?;
        let k: usize = idx.parse().ok()?;
        let k = k.checked_sub(1)?;
        match head {
            "mu" => Some(Quantity::Mu(k)),
            "omega" => Some(Quantity::Omega(k)),
            "magnitude" => Some(Quantity::Magnitude(k)),
            "real" => Some(Quantity::Real(k)),
            "imag" => Some(Quantity::Imag(k)),
            _ => None,
        }
    }

    fn pair(self) -> Option<usize> {
        match self {
            Quantity::Mu(k)
            | Quantity::Omega(k)
            | Quantity::Magnitude(k)
            | Quantity::Real(k)
            | Quantity::Imag(k) => Some(k),
            Quantity::Energy => None,
        }
    }

    /// Every quantity for `n_pairs` pairs, energy last.
    pub fn all(n_pairs: usize) -> Vec<Quantity> {
        let mut out = Vec::with_capacity(5 * n_pairs + 1);
        for k in 0..n_pairs {
            out.extend([
                Quantity::Mu(k),
                Quantity::Omega(k),
                Quantity::Magnitude(k),
                Quantity::Real(k),
                Quantity::Imag(k),
            ]);
        }
        out.push(Quantity::Energy);
        out
    }
}

/// Latents, eigenvalues and magnitudes of a batch of encoded rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSample {
    pub latent: Array2<f64>,
    /// Rows of `(mu_1, omega_1, ...)`.
    pub eigenvalues: Array2<f64>,
    pub magnitudes: Array2<f64>,
}

impl SpectralSample {
    pub fn value(&self, row: usize, q: Quantity) -> f64 {
        match q {
            Quantity::Mu(k) => self.eigenvalues[[row, 2 * k]],
            Quantity::Omega(k) => self.eigenvalues[[row, 2 * k + 1]],
            Quantity::Magnitude(k) => self.magnitudes[[row, k]],
            Quantity::Real(k) => self.latent[[row, 2 * k]],
            Quantity::Imag(k) => self.latent[[row, 2 * k + 1]],
            Quantity::Energy => self.magnitudes.row(row).iter().map(|m| m * m).sum(),
        }
    }

    pub fn energy(&self) -> Vec<f64> {
        (0..self.latent.nrows())
            .map(|r| self.value(r, Quantity::Energy))
            .collect()
    }
}

/// Encodes raw embeddings and evaluates the auxiliary network on them.
pub fn spectral_sample(model: &DknModel, raw: &Array2<f64>) -> Result<SpectralSample> {
    let layout = model.layout;
    if raw.ncols() != layout.len() {
        return Err(Error::shape("embedding", layout.len(), raw.ncols()));
    }
    let latent = model.encode(&model.normalization.apply(raw))?;
    let eigenvalues = model.eigenvalues(&latent)?;
    let magnitudes = pair_magnitudes(&latent);
    Ok(SpectralSample {
        latent,
        eigenvalues,
        magnitudes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    pub grid: PhaseGrid,
    pub quantities: Vec<Quantity>,
    /// `(cells, quantities)`.
    pub values: Array2<f64>,
    /// Cells holding a non-finite value.
    pub non_finite: Vec<usize>,
}

pub fn sample_field(
    model: &DknModel,
    grid: &PhaseGrid,
    quantities: &[Quantity],
) -> Result<SpectralField> {
    let k = model.n_pairs();
    if let Some(q) = quantities.iter().find(|q| q.pair().is_some_and(|p| p >= k)) {
        return Err(Error::InvalidConfig(vec![format!(
            "quantity {} needs pair {} but the model has {k}",
            q.name(),
            q.pair().unwrap() + 1
        )]));
    }
    let raw = grid.embeddings(model.layout)?;
    let sample = spectral_sample(model, &raw)?;
    let values = Array2::from_shape_fn((raw.nrows(), quantities.len()), |(r, c)| {
        sample.value(r, quantities[c])
    });
    let non_finite = values
        .axis_iter(Axis(0))
        .enumerate()
        .filter(|(_, row)| row.iter().any(|v| !v.is_finite()))
        .map(|(i, _)| i)
        .collect();
    Ok(SpectralField {
        grid: grid.clone(),
        quantities: quantities.to_vec(),
        values,
        non_finite,
    })
}

/// Encoded sliding windows of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    /// Time stamp of the newest sample of each window.
    pub times: Vec<f64>,
    pub spectral: SpectralSample,
}

pub fn latent_trajectory(model: &DknModel, traj: &Trajectory) -> Result<LatentTrajectory> {
    let layout = model.layout;
    if traj.sample_dim() != layout.sample_dim {
        return Err(Error::shape(
            "trajectory sample",
            layout.sample_dim,
            traj.sample_dim(),
        ));
    }
    let nt = layout.window;
    if traj.len() < nt {
        return Err(Error::TooShort {
            len: traj.len(),
            needed: nt,
        });
    }
    let n = traj.len() - nt + 1;
    let mut raw = Array2::zeros((n, layout.len()));
    for (i, mut row) in raw.rows_mut().into_iter().enumerate() {
        let window = traj.samples.slice(s![i..i + nt, ..]);
        row.iter_mut().zip(window.iter()).for_each(|(d, v)| *d = *v);
    }
    Ok(LatentTrajectory {
        times: (0..n).map(|i| traj.time(i + nt - 1)).collect(),
        spectral: spectral_sample(model, &raw)?,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    pearson(&ra, &rb)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Coefficient of variation (population std over mean).
pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

fn push_row(out: &mut String, cells: impl IntoIterator<Item = String>) {
    let mut first = true;
    for c in cells {
        if !first {
            out.push(',');
        }
        out.push_str(&c);
        first = false;
    }
    out.push('\n');
}

fn table(schema: &str, header: &[String]) -> String {
    let mut out = format!("# schema: {schema}\n");
    push_row(&mut out, header.iter().cloned());
    out
}

/// Files written by [`export_analysis`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisFiles {
    pub phase_portrait: PathBuf,
    pub latent_portrait: PathBuf,
    pub frequency_time: PathBuf,
    pub field: PathBuf,
    pub pair_summary: PathBuf,
    pub metadata: PathBuf,
}

impl AnalysisFiles {
    pub fn all(&self) -> Vec<&Path> {
        vec![
            &self.phase_portrait,
            &self.latent_portrait,
            &self.frequency_time,
            &self.field,
            &self.pair_summary,
            &self.metadata,
        ]
    }
}

/// Writes the analysis tables for the evaluation split of `bundle`.
pub fn export_analysis(
    model: &DknModel,
    bundle: &DatasetBundle,
    grid: &PhaseGrid,
    out_dir: &Path,
) -> Result<AnalysisFiles> {
    std::fs::create_dir_all(out_dir)?;
    let k = model.n_pairs();
    let layout = model.layout;
    if bundle.layout() != layout {
        return Err(Error::shape(
            "dataset layout",
            format!("{layout:?}"),
            format!("{:?}", bundle.layout()),
        ));
    }
    let channels = bundle.config.scenario.system_kind().channel_names();
    let latent_names: Vec<String> = (1..=k)
        .flat_map(|j| [format!("y{}_re", j), format!("y{}_im", j)])
        .collect();
    let pair_names =
        |prefix: &str| -> Vec<String> { (1..=k).map(|j| format!("{prefix}_{j}")).collect() };

    let mut header = vec!["traj".to_string(), "t".to_string()];
    header.extend(channels.iter().map(|c| c.to_string()));
    let mut phase = table(
        "evaluation trajectories in raw units, one row per sample",
        &header,
    );

    let mut header = vec!["traj".to_string(), "t".to_string()];
    header.extend(latent_names.iter().cloned());
    header.extend(pair_names("magnitude"));
    let mut latent = table(
        "latent coordinates of each sliding window, t is the newest sample",
        &header,
    );

    let mut header = vec!["traj".to_string(), "t".to_string()];
    for j in 1..=k {
        header.push(format!("mu_{j}"));
        header.push(format!("omega_{j}"));
    }
    header.push("energy".into());
    let mut freq = table(
        "auxiliary eigenvalues over time, energy is the sum of squared pair magnitudes",
        &header,
    );

    for (id, traj) in bundle.evaluation_trajectories.iter().enumerate() {
        for (i, row) in traj.samples.rows().into_iter().enumerate() {
            push_row(
                &mut phase,
                [id.to_string(), format_sig(traj.time(i), 9)]
                    .into_iter()
                    .chain(row.iter().map(|v| v.to_string())),
            );
        }
        if traj.len() < layout.window {
            log::warn!("evaluation trajectory {id} is shorter than the window; skipped");
            continue;
        }
        let lt = latent_trajectory(model, traj)?;
        let sp = &lt.spectral;
        for (i, t) in lt.times.iter().enumerate() {
            let t = format_sig(*t, 9);
            push_row(
                &mut latent,
                [id.to_string(), t.clone()]
                    .into_iter()
                    .chain(sp.latent.row(i).iter().map(|v| v.to_string()))
                    .chain(sp.magnitudes.row(i).iter().map(|v| v.to_string())),
            );
            push_row(
                &mut freq,
                [id.to_string(), t]
                    .into_iter()
                    .chain(sp.eigenvalues.row(i).iter().map(|v| v.to_string()))
                    .chain(std::iter::once(sp.value(i, Quantity::Energy).to_string())),
            );
        }
    }

    let quantities = Quantity::all(k);
    let field = sample_field(model, grid, &quantities)?;
    let mut header = vec![
        channels[grid.x.channel].to_string(),
        channels[grid.y.channel].to_string(),
    ];
    header.extend(quantities.iter().map(|q| q.name()));
    let mut field_csv = table(
        &format!(
            "field over the phase grid, x axis fastest, history fill {}",
            grid.fill.name()
        ),
        &header,
    );
    for (i, row) in field.values.rows().into_iter().enumerate() {
        let (a, b) = grid.cell(i);
        push_row(
            &mut field_csv,
            [a.to_string(), b.to_string()]
                .into_iter()
                .chain(row.iter().map(|v| v.to_string())),
        );
    }

    let header: Vec<String> = ["pair", "mu_mean", "mu_std", "omega_mean", "omega_std"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut summary = table(
        "per-pair eigenvalue mean and population std over the evaluation windows",
        &header,
    );
    if !bundle.evaluation.is_empty() {
        let sp = spectral_sample(model, bundle.evaluation.x())?;
        let spread = eigenvalue_spread(&sp.eigenvalues);
        for j in 0..k {
            let (mm, ms) = spread[2 * j];
            let (om, os) = spread[2 * j + 1];
            let mut line = String::new();
            let _ = write!(line, "{},{mm},{ms},{om},{os}", j + 1);
            summary.push_str(&line);
            summary.push('\n');
        }
    }

    let files = AnalysisFiles {
        phase_portrait: out_dir.join("phase_portrait.csv"),
        latent_portrait: out_dir.join("latent_portrait.csv"),
        frequency_time: out_dir.join("frequency_time.csv"),
        field: out_dir.join("field.csv"),
        pair_summary: out_dir.join("pair_summary.csv"),
        metadata: out_dir.join("analysis.json"),
    };
    write_atomic(&files.phase_portrait, phase.as_bytes())?;
    write_atomic(&files.latent_portrait, latent.as_bytes())?;
    write_atomic(&files.frequency_time, freq.as_bytes())?;
    write_atomic(&files.field, field_csv.as_bytes())?;
    write_atomic(&files.pair_summary, summary.as_bytes())?;
    let meta = serde_json::json!({
        "history_fill": grid.fill.name(),
        "grid": grid,
        "n_pairs": k,
        "layout": layout,
        "field_cells": field.grid.cell_count(),
        "non_finite_cells": field.non_finite,
        "evaluation_windows": bundle.evaluation.len(),
        "evaluation_trajectories": bundle.evaluation_trajectories.len(),
    });
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    write_atomic(&files.metadata, text.as_bytes())?;
    Ok(files)
}

/// Data rows of a CSV written by this module (comment and header skipped).
pub fn data_rows(text: &str) -> usize {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .count()
        .saturating_sub(1)
}
