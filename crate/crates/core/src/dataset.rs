//! Delay-embedded snapshot datasets.
//!
//! A snapshot is a window of `nt` consecutive trajectory samples flattened
//! oldest-first; each sample is the measured state followed by its control.
//! Datasets keep the window together with the windows starting `1..=horizon`
//! steps later, so `shift(0)` is the DMD input matrix and `shift(1)` its
//! one-step successor. Matrices hold one snapshot per row.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayViewMut1};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::sim::{
    rollout, Controller, DuffingSurrogateParams, PdController, PdConvention, PdGains,
    RigidPendulumParams, System, SystemKind, Trajectory,
};

pub const DATASET_FORMAT: &str = "koopman-dataset/v1";

/// Shape of a flattened delay embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingLayout {
    /// Number of time steps in the window.
    pub window: usize,
    /// Channels per time step, control last.
    pub sample_dim: usize,
}

impl EmbeddingLayout {
    pub fn new(window: usize, sample_dim: usize) -> Self {
        EmbeddingLayout { window, sample_dim }
    }

    pub fn len(&self) -> usize {
        self.window * self.sample_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_control(&self, index: usize) -> bool {
        index % self.sample_dim == self.sample_dim - 1
    }

    /// Offset of the newest sample inside the flattened vector.
    pub fn newest_offset(&self) -> usize {
        (self.window - 1) * self.sample_dim
    }

    /// 1 on state channels, 0 on control channels.
    pub fn state_mask(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| if self.is_control(i) { 0.0 } else { 1.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayEmbedding {
    pub layout: EmbeddingLayout,
    pub vector: Vec<f64>,
}

/// Flattens samples `start..start + window` of `traj`, oldest first.
pub fn delay_embed(traj: &Trajectory, start: usize, window: usize) -> DelayEmbedding {
    let rows = traj.samples.slice(s![start..start + window, ..]);
    DelayEmbedding {
        layout: EmbeddingLayout::new(window, traj.sample_dim()),
        vector: rows.iter().copied().collect(),
    }
}

/// All overlapping `(X column, X' column)` pairs of a trajectory.
pub fn embed(traj: &Trajectory, nt: usize) -> Vec<(DelayEmbedding, DelayEmbedding)> {
    let starts = window_starts(traj.len(), nt, 1, Segmentation::Overlapping);
    if starts.is_empty() {
        log::warn!(
            "trajectory of {} samples is too short for window {} (needs {})",
            traj.len(),
            nt,
            nt + 1
        );
    }
    starts
        .into_iter()
        .map(|s| (delay_embed(traj, s, nt), delay_embed(traj, s + 1, nt)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Segmentation {
    /// Every start index, stride 1.
    #[default]
    Overlapping,
    /// Non-overlapping windows, stride `nt`.
    Disjoint,
}

/// Start indices of windows that have `horizon` successors inside a
/// trajectory of `len` samples.
pub fn window_starts(len: usize, nt: usize, horizon: usize, seg: Segmentation) -> Vec<usize> {
    if nt == 0 || len < nt + horizon {
        return Vec::new();
    }
    let last = len - nt - horizon;
    let stride = match seg {
        Segmentation::Overlapping => 1,
        Segmentation::Disjoint => nt,
    };
    (0..=last).step_by(stride).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Evaluation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Evaluation];

    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Evaluation => "evaluation",
        }
    }
}

/// Per-channel affine map, shared by every lag of the window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(sample_dim: usize) -> Self {
        Normalization {
            shift: vec![0.0; sample_dim],
            scale: vec![1.0; sample_dim],
        }
    }

    /// Zero mean and unit population variance per channel over the rows of
    /// `x`, pooling all lags. Channels without spread get scale 1.
    pub fn fit(x: &Array2<f64>, layout: EmbeddingLayout) -> Self {
        let d = layout.sample_dim;
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for row in x.rows() {
            for (i, v) in row.iter().enumerate() {
                sum[i % d] += v;
            }
            n += layout.window;
        }
        if n == 0 {
            return Normalization::identity(d);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0; d];
        for row in x.rows() {
            for (i, v) in row.iter().enumerate() {
                let e = v - mean[i % d];
                sq[i % d] += e * e;
            }
        }
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let std = (s / n as f64).sqrt();
                if std > 1e-12 * m.abs().max(1.0) {
                    std
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { shift: mean, scale }
    }

    pub fn apply_row(&self, mut row: ArrayViewMut1<f64>) {
        let d = self.shift.len();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - self.shift[i % d]) / self.scale[i % d];
        }
    }

    pub fn invert_row(&self, mut row: ArrayViewMut1<f64>) {
        let d = self.shift.len();
        for (i, v) in row.iter_mut().enumerate() {
            *v = *v * self.scale[i % d] + self.shift[i % d];
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for row in out.rows_mut() {
            self.apply_row(row);
        }
        out
    }

    pub fn invert(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for row in out.rows_mut() {
            self.invert_row(row);
        }
        out
    }
}

/// Paired snapshot matrices for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset {
    pub layout: EmbeddingLayout,
    pub dt: f64,
    pub split: Split,
    /// `shifts[s]` holds the windows starting `s` steps after those of
    /// `shifts[0]`, row for row.
    pub shifts: Vec<Array2<f64>>,
    /// Source trajectory of each row.
    pub trajectory_ids: Vec<u64>,
    pub normalization: Option<Normalization>,
}

impl SnapshotDataset {
    pub fn empty(layout: EmbeddingLayout, dt: f64, split: Split, horizon: usize) -> Self {
        SnapshotDataset {
            layout,
            dt,
            split,
            shifts: vec![Array2::zeros((0, layout.len())); horizon + 1],
            trajectory_ids: Vec::new(),
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.shifts[0].nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.shifts.len() - 1
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.shifts[0]
    }

    pub fn x_prime(&self) -> &Array2<f64> {
        &self.shifts[1]
    }

    /// Returns a copy mapped through `norm`.
    pub fn normalized(&self, norm: &Normalization) -> SnapshotDataset {
        SnapshotDataset {
            shifts: self.shifts.iter().map(|m| norm.apply(m)).collect(),
            normalization: Some(norm.clone()),
            ..self.clone()
        }
    }

    /// Undo a previous [`normalized`](Self::normalized).
    pub fn denormalized(&self) -> SnapshotDataset {
        match &self.normalization {
            None => self.clone(),
            Some(norm) => SnapshotDataset {
                shifts: self.shifts.iter().map(|m| norm.invert(m)).collect(),
                normalization: None,
                ..self.clone()
            },
        }
    }

    /// Keep only the first `horizon` shifts.
    pub fn truncate_horizon(&self, horizon: usize) -> SnapshotDataset {
        SnapshotDataset {
            shifts: self.shifts[..=horizon.min(self.horizon())].to_vec(),
            ..self.clone()
        }
    }

    /// Append the windows of `traj` at `starts`.
    pub fn push_windows(&mut self, traj: &Trajectory, starts: &[usize], traj_id: u64) {
        let nt = self.layout.window;
        for (s, mat) in self.shifts.iter_mut().enumerate() {
            let mut rows: Vec<f64> = Vec::with_capacity(starts.len() * self.layout.len());
            for &start in starts {
                rows.extend(
                    traj.samples
                        .slice(s![start + s..start + s + nt, ..])
                        .iter()
                        .copied(),
                );
            }
            let block = Array2::from_shape_vec((starts.len(), self.layout.len()), rows)
                .expect("window rows");
            let mut combined = std::mem::replace(mat, Array2::zeros((0, 0)));
            if combined.nrows() == 0 {
                combined = block;
            } else {
                combined
                    .append(ndarray::Axis(0), block.view())
                    .expect("append");
            }
            *mat = combined;
        }
        self.trajectory_ids
            .extend(std::iter::repeat_n(traj_id, starts.len()));
    }

    pub fn to_csv(&self) -> String {
        let d = self.layout.len();
        let mut out = String::from("traj");
        for i in 0..d {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..d {
            out.push_str(&format!(",xp{i}"));
        }
        out.push('\n');
        for r in 0..self.len() {
            out.push_str(&self.trajectory_ids[r].to_string());
            for v in self.x().row(r).iter().chain(self.x_prime().row(r).iter()) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Excitation applied while generating data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Excitation {
    #[default]
    None,
    Pd {
        gains: PdGains,
        #[serde(default)]
        convention: PdConvention,
    },
    /// Trajectories cycle through the entries round-robin.
    Schedule {
        entries: Vec<PdGains>,
        #[serde(default)]
        convention: PdConvention,
    },
}

impl Excitation {
    /// Four PD controllers, each with three targets, used to excite the
    /// soft pendulum.
    pub fn table_one() -> Self {
        let mut entries = Vec::new();
        for (kp, kd, t) in [
            (0.3, 0.1, 0.8),
            (0.3, 0.2, 0.1),
            (0.1, 0.2, 0.8),
            (0.1, 0.3, 0.8),
        ] {
            for target in [0.0, t, -t] {
                entries.push(PdGains::new(kp, kd, target));
            }
        }
        Excitation::Schedule {
            entries,
            convention: PdConvention::Regulator,
        }
    }

    pub fn entry_count(&self) -> usize {
        match self {
            Excitation::None | Excitation::Pd { .. } => 1,
            Excitation::Schedule { entries, .. } => entries.len(),
        }
    }

    /// Controller for the `index`-th generated trajectory.
    pub fn controller(&self, index: u64) -> Controller {
        match self {
            Excitation::None => Controller::Zero,
            Excitation::Pd { gains, convention } => Controller::Pd(PdController {
                gains: *gains,
                convention: *convention,
            }),
            Excitation::Schedule {
                entries,
                convention,
            } => Controller::Pd(PdController {
                gains: entries[(index % entries.len() as u64) as usize],
                convention: *convention,
            }),
        }
    }

    /// Raw samples recorded per schedule entry for `duration_s` seconds at
    /// sampling interval `dt`.
    pub fn raw_steps_per_entry(duration_s: f64, dt: f64) -> usize {
        (duration_s / dt).round() as usize
    }
}

/// Which preset a dataset is generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Rigid,
    RigidPd,
    Soft,
}

impl Scenario {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rigid" => Some(Scenario::Rigid),
            "rigid-pd" => Some(Scenario::RigidPd),
            "soft" => Some(Scenario::Soft),
            _ => None,
        }
    }

    pub fn system_kind(self) -> SystemKind {
        match self {
            Scenario::Rigid | Scenario::RigidPd => SystemKind::Rigid,
            Scenario::Soft => SystemKind::Soft,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGenConfig {
    pub scenario: Scenario,
    pub nt: usize,
    pub dt: f64,
    /// Initial angle range (`q` for the rigid pendulum, `theta` for the
    /// soft one).
    pub q0_range: [f64; 2],
    /// Initial angular velocity range (`qdot` or `thetadot`).
    pub qdot0_range: [f64; 2],
    pub n_train: usize,
    pub n_validation: usize,
    pub n_evaluation: usize,
    /// Control intervals simulated per trajectory.
    pub steps_per_trajectory: usize,
    /// Windows drawn from each trajectory; 0 keeps all of them.
    pub windows_per_trajectory: usize,
    /// Successor windows stored per snapshot (1 gives plain `X, X'`).
    pub horizon: usize,
    pub segmentation: Segmentation,
    pub substeps: usize,
    pub max_retries: usize,
    pub seed: u64,
    pub excitation: Excitation,
    pub rigid: RigidPendulumParams,
    pub soft: DuffingSurrogateParams,
}

impl DataGenConfig {
    /// Full-scale settings for each scenario.
    pub fn preset(scenario: Scenario) -> Self {
        let base = DataGenConfig {
            scenario,
            nt: 50,
            dt: 0.02,
            q0_range: [-3.1, 3.1],
            qdot0_range: [-2.0, 2.0],
            n_train: 15000,
            n_validation: 1000,
            n_evaluation: 3000,
            steps_per_trajectory: 100,
            windows_per_trajectory: 1,
            horizon: 30,
            segmentation: Segmentation::Overlapping,
            substeps: 1,
            max_retries: 100,
            seed: 0,
            excitation: Excitation::None,
            rigid: RigidPendulumParams::default(),
            soft: DuffingSurrogateParams::default(),
        };
        match scenario {
            Scenario::Rigid => base,
            Scenario::RigidPd => DataGenConfig {
                dt: 0.01,
                n_train: 15950,
                n_validation: 1450,
                n_evaluation: 2900,
                steps_per_trajectory: 300,
                windows_per_trajectory: 0,
                segmentation: Segmentation::Disjoint,
                excitation: Excitation::Pd {
                    gains: PdGains::new(10.0, 3.0, PI),
                    convention: PdConvention::Regulator,
                },
                ..base
            },
            Scenario::Soft => DataGenConfig {
                dt: 0.05,
                q0_range: [-1.5, 1.5],
                n_train: 100763,
                n_validation: 28791,
                n_evaluation: 14394,
                steps_per_trajectory: 300,
                windows_per_trajectory: 0,
                horizon: 10,
                excitation: Excitation::table_one(),
                ..base
            },
        }
    }

    pub fn system(&self) -> System {
        match self.scenario.system_kind() {
            SystemKind::Rigid => System::Rigid(self.rigid),
            SystemKind::Soft => System::Soft(self.soft),
        }
    }

    pub fn layout(&self) -> EmbeddingLayout {
        EmbeddingLayout::new(self.nt, self.scenario.system_kind().state_dim() + 1)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Validation => self.n_validation,
            Split::Evaluation => self.n_evaluation,
        }
    }

    /// Every violated constraint, one message per key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.nt < 1 {
            out.push("nt must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            out.push("dt must be > 0".into());
        }
        for (name, r) in [
            ("q0_range", self.q0_range),
            ("qdot0_range", self.qdot0_range),
        ] {
            if !(r[0] < r[1]) {
                out.push(format!("{name} must satisfy min < max"));
            }
        }
        for split in Split::ALL {
            if self.count(split) < 1 {
                out.push(format!("n_{} must be >= 1", split.label()));
            }
        }
        if self.horizon < 1 {
            out.push("horizon must be >= 1".into());
        }
        if self.substeps < 1 {
            out.push("substeps must be >= 1".into());
        }
        if self.steps_per_trajectory + 1 < self.nt + self.horizon {
            out.push(format!(
                "steps_per_trajectory must be >= nt + horizon - 1 = {}",
                self.nt + self.horizon - 1
            ));
        }
        if let Excitation::Schedule { entries, .. } = &self.excitation {
            if entries.is_empty() {
                out.push("excitation.entries must not be empty".into());
            }
        }
        match self.scenario.system_kind() {
            SystemKind::Rigid => out.extend(self.rigid.problems()),
            SystemKind::Soft => out.extend(self.soft.problems()),
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
}

/// Train/validation/evaluation splits plus the normalization fitted on the
/// training split. Matrices are stored in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub config: DataGenConfig,
    pub normalization: Normalization,
    pub train: SnapshotDataset,
    pub validation: SnapshotDataset,
    pub evaluation: SnapshotDataset,
    /// Full trajectories behind the evaluation split, indexed by id.
    pub evaluation_trajectories: Vec<Trajectory>,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &SnapshotDataset {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Evaluation => &self.evaluation,
        }
    }

    pub fn layout(&self) -> EmbeddingLayout {
        self.train.layout
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "config": self.config,
            "normalization": self.normalization,
            "layout": self.layout(),
            "dt": self.config.dt,
            "counts": {
                "train": self.train.len(),
                "validation": self.validation.len(),
                "evaluation": self.evaluation.len(),
            },
            "horizon": self.train.horizon(),
            "evaluation_trajectories": self.evaluation_trajectories.len(),
        });
        let mut c = Container::new(DATASET_FORMAT, meta);
        for split in Split::ALL {
            let ds = self.split(split);
            for (s, m) in ds.shifts.iter().enumerate() {
                c.push(format!("{}/shift{}", split.label(), s), m.clone());
            }
            let ids = Array2::from_shape_fn((ds.len(), 1), |(r, _)| ds.trajectory_ids[r] as f64);
            c.push(format!("{}/ids", split.label()), ids);
        }
        for (i, t) in self.evaluation_trajectories.iter().enumerate() {
            c.push(format!("trajectory/{i}"), t.samples.clone());
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::read(path, DATASET_FORMAT)?;
        let config: DataGenConfig = serde_json::from_value(c.meta["config"].clone())?;
        let normalization: Normalization = serde_json::from_value(c.meta["normalization"].clone())?;
        let horizon = c.meta["horizon"].as_u64().unwrap_or(1) as usize;
        let n_traj = c.meta["evaluation_trajectories"].as_u64().unwrap_or(0) as usize;
        let layout = config.layout();
        let mut take_split = |split: Split| -> Result<SnapshotDataset> {
            let mut shifts = Vec::with_capacity(horizon + 1);
            for s in 0..=horizon {
                shifts.push(c.take(&format!("{}/shift{}", split.label(), s))?);
            }
            let ids = c.take(&format!("{}/ids", split.label()))?;
            Ok(SnapshotDataset {
                layout,
                dt: config.dt,
                split,
                shifts,
                trajectory_ids: ids.iter().map(|v| *v as u64).collect(),
                normalization: None,
            })
        };
        let train = take_split(Split::Train)?;
        let validation = take_split(Split::Validation)?;
        let evaluation = take_split(Split::Evaluation)?;
        let mut evaluation_trajectories = Vec::with_capacity(n_traj);
        for i in 0..n_traj {
            evaluation_trajectories.push(Trajectory {
                kind: config.scenario.system_kind(),
                dt: config.dt,
                samples: c.take(&format!("trajectory/{i}"))?,
            });
        }
        Ok(DatasetBundle {
            config,
            normalization,
            train,
            validation,
            evaluation,
            evaluation_trajectories,
        })
    }

    pub fn write_csv(&self, split: Split, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.split(split).to_csv().as_bytes())?;
        Ok(())
    }
}

fn initial_state(cfg: &DataGenConfig, rng: &mut impl Rng) -> Vec<f64> {
    let q0 = rng.random_range(cfg.q0_range[0]..cfg.q0_range[1]);
    let qdot0 = rng.random_range(cfg.qdot0_range[0]..cfg.qdot0_range[1]);
    match cfg.scenario.system_kind() {
        SystemKind::Rigid => vec![q0, qdot0],
        // the robot joint starts at zero; the velocity range applies to the tip
        SystemKind::Soft => vec![q0, qdot0, 0.0],
    }
}

/// Simulates trajectories until every split holds its configured number of
/// snapshots. Splits never share a trajectory: each split draws its own
/// seeded stream and trajectory ids are globally unique.
pub fn generate_dataset(cfg: &DataGenConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let system = cfg.system();
    let layout = cfg.layout();
    let mut next_id: u64 = 0;
    let mut splits = Vec::with_capacity(3);
    let mut evaluation_trajectories = Vec::new();
    for split in Split::ALL {
        let target = cfg.count(split);
        let mut ds = SnapshotDataset::empty(layout, cfg.dt, split, cfg.horizon);
        let label = format!("data/{}", split.label());
        let mut attempt: u64 = 0;
        let mut produced: u64 = 0;
        let mut failures = 0usize;
        while ds.len() < target {
            let mut rng = rng_for(cfg.seed, &label, attempt);
            attempt += 1;
            let x0 = initial_state(cfg, &mut rng);
            let controller = cfg.excitation.controller(produced);
            let traj = match rollout(
                &system,
                &controller,
                &x0,
                cfg.steps_per_trajectory,
                cfg.dt,
                cfg.substeps,
            ) {
                Ok(t) => t,
                Err(Error::Divergence { step }) => {
                    failures += 1;
                    log::warn!("discarding divergent rollout (step {step}) in {label}");
                    if failures > cfg.max_retries {
                        return Err(Error::RetriesExhausted { attempts: failures });
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            failures = 0;
            produced += 1;
            let mut starts = window_starts(traj.len(), cfg.nt, cfg.horizon, cfg.segmentation);
            if cfg.windows_per_trajectory > 0 && cfg.windows_per_trajectory < starts.len() {
                let mut pick =
                    sample(&mut rng, starts.len(), cfg.windows_per_trajectory).into_vec();
                pick.sort_unstable();
                starts = pick.into_iter().map(|i| starts[i]).collect();
            }
            starts.truncate(target - ds.len());
            let id = next_id;
            next_id += 1;
            ds.push_windows(&traj, &starts, id);
            if split == Split::Evaluation {
                evaluation_trajectories.push(traj);
            }
        }
        splits.push(ds);
    }
    let evaluation = splits.pop().unwrap();
    let validation = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    let normalization = Normalization::fit(train.x(), layout);
    // evaluation ids are renumbered to index `evaluation_trajectories`
    let first_eval = evaluation.trajectory_ids.first().copied().unwrap_or(0);
    let evaluation = SnapshotDataset {
        trajectory_ids: evaluation
            .trajectory_ids
            .iter()
            .map(|id| id - first_eval)
            .collect(),
        ..evaluation
    };
    Ok(DatasetBundle {
        config: cfg.clone(),
        normalization,
        train,
        validation,
        evaluation,
        evaluation_trajectories,
    })
}

/// Row-wise view helper used by the analysis and control code.
pub fn newest_sample(layout: &EmbeddingLayout, row: ArrayView1<f64>) -> Vec<f64> {
    let off = layout.newest_offset();
    row.slice(s![off..off + layout.sample_dim]).to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn traj_from(rows: Array2<f64>) -> Trajectory {
        Trajectory {
            kind: SystemKind::Rigid,
            dt: 0.1,
            samples: rows,
        }
    }

    fn small_cfg(scenario: Scenario) -> DataGenConfig {
        DataGenConfig {
            n_train: 40,
            n_validation: 10,
            n_evaluation: 12,
            nt: 5,
            steps_per_trajectory: 30,
            windows_per_trajectory: 0,
            horizon: 1,
            seed: 3,
            ..DataGenConfig::preset(scenario)
        }
    }

    #[test]
    fn embed_pairs() {
        let t = traj_from(array![[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let pairs = embed(&t, 1);
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0.vector, vec![1.0, 0.0, 0.0]);
        assert_eq!(pairs[0].1.vector, vec![2.0, 0.0, 0.0]);
        assert_eq!(pairs[1].1.vector, vec![3.0, 0.0, 0.0]);

        let long = traj_from(Array2::from_shape_fn((52, 3), |(i, j)| (i * 3 + j) as f64));
        let pairs = embed(&long, 50);
        assert_eq!(pairs.len(), 2);
        // oldest first, neighbours share nt - 1 samples
        assert_eq!(pairs[0].0.vector[..3], [0.0, 1.0, 2.0]);
        assert_eq!(pairs[0].1.vector[..147], pairs[0].0.vector[3..]);

        let short = traj_from(Array2::zeros((50, 3)));
        assert!(embed(&short, 50).is_empty());
    }

    #[test]
    fn disjoint_segments() {
        // 300 control steps give 301 samples
        assert_eq!(window_starts(301, 50, 1, Segmentation::Disjoint).len(), 6);
        assert_eq!(
            window_starts(301, 50, 1, Segmentation::Disjoint),
            vec![0, 50, 100, 150, 200, 250]
        );
        assert_eq!(
            window_starts(301, 50, 1, Segmentation::Overlapping).len(),
            251
        );
    }

    #[test]
    fn normalization_rules() {
        let layout = EmbeddingLayout::new(1, 3);
        let x = array![[-1.0, 5.0, 2.0], [1.0, 5.0, 4.0]];
        let n = Normalization::fit(&x, layout);
        assert_eq!(n.shift, vec![0.0, 5.0, 3.0]);
        assert_eq!(n.scale, vec![1.0, 1.0, 1.0]);
        let y = array![[0.3, -2.0, 7.5], [1e3, 0.1, -4.0]];
        let n = Normalization {
            shift: vec![0.5, -1.0, 2.0],
            scale: vec![3.0, 0.25, 7.0],
        };
        let back = n.invert(&n.apply(&y));
        for (a, b) in back.iter().zip(y.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn generated_counts_and_shapes() {
        let cfg = small_cfg(Scenario::Rigid);
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(b.train.len(), 40);
        assert_eq!(b.validation.len(), 10);
        assert_eq!(b.evaluation.len(), 12);
        assert_eq!(b.train.x().ncols(), 15);
        assert_eq!(b.train.x().shape(), b.train.x_prime().shape());
        // no-control data has a constant control channel
        assert_eq!(b.normalization.shift[2], 0.0);
        assert_eq!(b.normalization.scale[2], 1.0);
    }

    #[test]
    fn single_column_minimal_config() {
        let cfg = DataGenConfig {
            n_train: 1,
            n_validation: 1,
            n_evaluation: 1,
            nt: 1,
            steps_per_trajectory: 5,
            horizon: 1,
            ..DataGenConfig::preset(Scenario::Rigid)
        };
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(b.train.x().shape(), &[1, 3]);
    }

    #[test]
    fn shifted_columns_match_trajectories() {
        let cfg = DataGenConfig {
            horizon: 3,
            steps_per_trajectory: 40,
            ..small_cfg(Scenario::Soft)
        };
        let b = generate_dataset(&cfg).unwrap();
        let ev = &b.evaluation;
        let d = ev.layout.sample_dim;
        let mut start_in_traj: std::collections::HashMap<u64, usize> = Default::default();
        for r in 0..ev.len() {
            let id = ev.trajectory_ids[r];
            let traj = &b.evaluation_trajectories[id as usize];
            let start = *start_in_traj.entry(id).and_modify(|s| *s += 1).or_insert(0);
            for s in 0..=3 {
                let expect = delay_embed(traj, start + s, cfg.nt).vector;
                assert_eq!(ev.shifts[s].row(r).to_vec(), expect);
            }
            assert_eq!(ev.x().row(r).len(), cfg.nt * d);
        }
    }

    #[test]
    fn splits_are_disjoint() {
        let b = generate_dataset(&small_cfg(Scenario::RigidPd)).unwrap();
        // evaluation ids are renumbered, so compare the raw windows instead
        let key = |m: &Array2<f64>, r: usize| format!("{:?}", m.row(r).to_vec());
        let train: std::collections::HashSet<_> =
            (0..b.train.len()).map(|r| key(b.train.x(), r)).collect();
        for ds in [&b.validation, &b.evaluation] {
            for r in 0..ds.len() {
                assert!(!train.contains(&key(ds.x(), r)));
            }
        }
        let tr: std::collections::HashSet<_> = b.train.trajectory_ids.iter().collect();
        assert!(b.validation.trajectory_ids.iter().all(|i| !tr.contains(i)));
    }

    #[test]
    fn seeded_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg(Scenario::Soft);
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        generate_dataset(&cfg).unwrap().save(&a).unwrap();
        generate_dataset(&cfg).unwrap().save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let back = DatasetBundle::load(&a).unwrap();
        assert_eq!(back, generate_dataset(&cfg).unwrap());
    }

    #[test]
    fn table_one_schedule() {
        assert_eq!(Excitation::table_one().entry_count(), 12);
        assert_eq!(
            Excitation::raw_steps_per_entry(30.0 * 60.0, 1.0 / 20.0),
            36_000
        );
    }

    #[test]
    fn invalid_config_lists_every_key() {
        let cfg = DataGenConfig {
            nt: 0,
            dt: -1.0,
            q0_range: [1.0, 1.0],
            n_train: 0,
            ..DataGenConfig::preset(Scenario::Rigid)
        };
        match cfg.validate() {
            Err(Error::InvalidConfig(p)) => {
                for key in ["nt", "dt", "q0_range", "n_train"] {
                    assert!(
                        p.iter().any(|m| m.starts_with(key)),
                        "{key} missing in {p:?}"
                    );
                }
            }
            other => panic!("{other:?}"),
        }
    }
}
