//! Resolved command settings and their execution.
//!
//! Each command first resolves its flags and config file into a spec. The
//! spec is stored in the manifest, and `rerun` executes it again unchanged.

use anyhow::{bail, Context, Result};
use koopman_core::baseline::{fcn_train, FcnModel};
use koopman_core::dataset::{generate_dataset, DataGenConfig, DatasetBundle};
use koopman_core::dkn::{train, DknConfig, DknModel};
use koopman_core::model::LatentModel;
use koopman_core::model::{checkpoint_kind, DynamicsModel, ModelKind, Transition};
use koopman_core::mpc::{run_episode, CemConfig, CostSpec, EpisodeConfig};
use koopman_core::seed::derive_seed;
use koopman_core::sim::{DuffingSurrogateParams, RigidPendulumParams, System};
use koopman_core::spectral::{export_analysis, PhaseGrid};
use koopman_core::training::{dataset_losses, log_csv};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::manifest::{check_against_producer, FileDigest};

pub const DATASET_FILE: &str = "dataset.kds";
pub const MODEL_FILE: &str = "model.kbin";
pub const SUMMARY_FILE: &str = "summary.json";

/// What a command read and wrote.
#[derive(Debug, Default)]
pub struct Execution {
    pub inputs: BTreeMap<String, FileDigest>,
    /// File names inside the output directory.
    pub outputs: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub timing: BTreeMap<String, f64>,
}

fn write(out: &Path, name: &str, bytes: &[u8], exec: &mut Execution) -> Result<()> {
    koopman_core::container::write_atomic(&out.join(name), bytes)?;
    exec.outputs.push(name.into());
    Ok(())
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T, exec: &mut Execution) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(out, name, text.as_bytes(), exec)
}

/// A directory argument stands for the default file inside it.
pub fn resolve_file(path: &Path, default_name: &str) -> Result<PathBuf> {
    let p = if path.is_dir() {
        path.join(default_name)
    } else {
        path.to_path_buf()
    };
    if !p.exists() {
        bail!("{} does not exist", p.display());
    }
    Ok(std::path::absolute(p)?)
}

fn load_dataset(path: &Path, exec: &mut Execution) -> Result<DatasetBundle> {
    exec.inputs
        .insert("dataset".into(), check_against_producer(path)?);
    DatasetBundle::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

// ---------------------------------------------------------------- simulate

pub fn simulate(cfg: &DataGenConfig, out: &Path) -> Result<Execution> {
    cfg.validate()?;
    let mut exec = Execution::default();
    exec.seeds.insert("master".into(), cfg.seed);
    let bundle = generate_dataset(cfg)?;
    bundle.save(&out.join(DATASET_FILE))?;
    exec.outputs.push(DATASET_FILE.into());
    log::info!(
        "dataset: {} train, {} validation, {} evaluation windows of length {}",
        bundle.train.len(),
        bundle.validation.len(),
        bundle.evaluation.len(),
        bundle.layout().len()
    );
    Ok(exec)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub kind: ModelKind,
    pub dataset: PathBuf,
    pub model: DknConfig,
}

/// Model settings matched to a dataset: the scenario preset with the
/// dataset's step and a horizon the dataset can supply.
pub fn model_defaults(bundle: &DatasetBundle) -> DknConfig {
    let mut cfg = DknConfig::preset(bundle.config.scenario);
    cfg.dt = bundle.config.dt;
    cfg.horizon = cfg.horizon.min(bundle.train.horizon());
    cfg
}

fn losses_json<T: Transition>(
    model: &LatentModel<T>,
    bundle: &DatasetBundle,
    cfg: &DknConfig,
) -> Result<serde_json::Value> {
    let eval = bundle.evaluation.normalized(&bundle.normalization);
    let one = dataset_losses(model, &eval, 1, &cfg.loss)?;
    let full = dataset_losses(model, &eval, cfg.horizon.min(eval.horizon()), &cfg.loss)?;
    Ok(serde_json::json!({
        "evaluation_one_step": one,
        "evaluation_horizon": full,
        "horizon": cfg.horizon,
    }))
}

pub fn train_model(spec: &TrainSpec, out: &Path) -> Result<Execution> {
    spec.model.validate()?;
    let mut exec = Execution::default();
    exec.seeds.insert("master".into(), spec.model.seed);
    let bundle = load_dataset(&spec.dataset, &mut exec)?;
    let tr = bundle.train.normalized(&bundle.normalization);
    let va = bundle.validation.normalized(&bundle.normalization);
    let (log, metrics, best, diverged, params) = match spec.kind {
        ModelKind::Dkn => {
            let o = train(&spec.model, &tr, &va)?;
            o.model.save(&out.join(MODEL_FILE))?;
            let m = losses_json(&o.model, &bundle, &spec.model)?;
            (o.log, m, o.best_epoch, o.diverged_at, o.model.param_count())
        }
        ModelKind::Fcn => {
            let o = fcn_train(&spec.model, &tr, &va)?;
            o.model.save(&out.join(MODEL_FILE))?;
            let m = losses_json(&o.model, &bundle, &spec.model)?;
            (o.log, m, o.best_epoch, o.diverged_at, o.model.param_count())
        }
    };
    exec.outputs.push(MODEL_FILE.into());
    write(out, "train_log.csv", log_csv(&log).as_bytes(), &mut exec)?;
    let mut metrics = metrics;
    metrics["kind"] = spec.kind.tag().into();
    metrics["n_pairs"] = spec.model.n_pairs.into();
    metrics["nt"] = bundle.layout().window.into();
    metrics["parameters"] = params.into();
    metrics["best_epoch"] = serde_json::to_value(best)?;
    metrics["diverged_at"] = serde_json::to_value(diverged)?;
    write_json(out, "metrics.json", &metrics, &mut exec)?;
    if let Some(e) = diverged {
        log::warn!("training stopped at epoch {e} on a non-finite loss");
    }
    Ok(exec)
}

// ---------------------------------------------------------------- analyze

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSpec {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub grid: PhaseGrid,
}

pub fn parse_grid(spec: &str, sample_dim: usize) -> Result<PhaseGrid> {
    Ok(match spec {
        "default" => PhaseGrid::default_for(sample_dim),
        s => PhaseGrid::parse(s, sample_dim)?,
    })
}

pub fn analyze(spec: &AnalyzeSpec, out: &Path) -> Result<Execution> {
    let mut exec = Execution::default();
    exec.inputs
        .insert("model".into(), check_against_producer(&spec.model)?);
    let kind = checkpoint_kind(&spec.model)?;
    if kind != ModelKind::Dkn.tag() {
        bail!(
            "analyze needs a Koopman checkpoint; {} holds `{kind}`",
            spec.model.display()
        );
    }
    let model = DknModel::load(&spec.model)?;
    let bundle = load_dataset(&spec.dataset, &mut exec)?;
    spec.grid.validate()?;
    let files = export_analysis(&model, &bundle, &spec.grid, out)?;
    for f in files.all() {
        exec.outputs
            .push(f.file_name().map(PathBuf::from).unwrap_or_default());
    }
    Ok(exec)
}

// ---------------------------------------------------------------- control

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    Soft,
    Rigid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSettings {
    pub episodes: usize,
    pub cem: CemConfig,
    pub cost: CostSpec,
    pub episode: EpisodeConfig,
    pub soft: DuffingSurrogateParams,
    pub rigid: RigidPendulumParams,
}

impl Default for ControlSettings {
    fn default() -> Self {
        ControlSettings {
            episodes: 5,
            cem: CemConfig::default(),
            cost: CostSpec::default(),
            episode: EpisodeConfig::default(),
            soft: DuffingSurrogateParams::default(),
            rigid: RigidPendulumParams::default(),
        }
    }
}

impl ControlSettings {
    /// Episode `e` plans with its own stream derived from the master CEM
    /// seed.
    pub fn episode_cem(&self, e: usize) -> CemConfig {
        CemConfig {
            seed: derive_seed(self.cem.seed, "episode", e as u64),
            ..self.cem.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = self.cem.problems();
        problems.extend(self.cost.problems());
        if self.episodes < 1 {
            problems.push("episodes must be >= 1".into());
        }
        if !problems.is_empty() {
            bail!("invalid control settings: {}", problems.join("; "));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSpec {
    pub model: PathBuf,
    pub plant: PlantKind,
    pub settings: ControlSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSummary {
    pub kind: String,
    pub nt: usize,
    pub n_pairs: usize,
    pub plant: PlantKind,
    pub episodes: usize,
    pub error_sums: Vec<f64>,
    pub mean_error_sum: f64,
    /// Sample standard deviation across episodes.
    pub std_error_sum: f64,
    /// Mean `|theta|` over the final ten seconds of each episode.
    pub tail_mean_abs_angle: Vec<f64>,
    pub diverged_at: Vec<Option<usize>>,
    pub infinite_plans: Vec<usize>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

pub enum LoadedModel {
    Dkn(DknModel),
    Fcn(FcnModel),
}

impl LoadedModel {
    pub fn load(path: &Path) -> Result<Self> {
        let kind = checkpoint_kind(path)?;
        Ok(match ModelKind::parse(&kind) {
            Some(ModelKind::Dkn) => LoadedModel::Dkn(DknModel::load(path)?),
            Some(ModelKind::Fcn) => LoadedModel::Fcn(FcnModel::load(path)?),
            None => bail!("{}: unknown model kind `{kind}`", path.display()),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadedModel::Dkn(m) => m.kind(),
            LoadedModel::Fcn(m) => m.kind(),
        }
    }

    pub fn as_dyn(&self) -> &dyn DynamicsModel {
        match self {
            LoadedModel::Dkn(m) => m,
            LoadedModel::Fcn(m) => m,
        }
    }
}

pub fn control(spec: &ControlSpec, out: &Path) -> Result<Execution> {
    let s = &spec.settings;
    s.validate()?;
    let mut exec = Execution::default();
    exec.inputs
        .insert("model".into(), check_against_producer(&spec.model)?);
    let model = LoadedModel::load(&spec.model)?;
    let dm = model.as_dyn();
    let plant = match spec.plant {
        PlantKind::Soft => System::Soft(s.soft),
        PlantKind::Rigid => System::Rigid(s.rigid),
    };
    exec.seeds.insert("master".into(), s.cem.seed);
    let tail_ticks = ((10.0 * s.episode.control_hz).round() as usize).max(1);
    let mut sums = Vec::new();
    let mut tails = Vec::new();
    let mut diverged = Vec::new();
    let mut infinite = Vec::new();
    for e in 0..s.episodes {
        let cem = s.episode_cem(e);
        exec.seeds.insert(format!("episode_{e}"), cem.seed);
        let r = run_episode(&plant, dm, &cem, &s.cost, &s.episode)?;
        log::info!("episode {e}: error sum {:.3}", r.error_sum);
        write(
            out,
            &format!("episode_{e:02}.csv"),
            r.to_csv().as_bytes(),
            &mut exec,
        )?;
        let n = r.times.len();
        let from = n.saturating_sub(tail_ticks);
        let tail = &r.states.column(0).to_vec()[from..];
        tails.push(tail.iter().map(|v| v.abs()).sum::<f64>() / tail.len().max(1) as f64);
        sums.push(r.error_sum);
        diverged.push(r.diverged_at);
        infinite.push(r.infinite_plans);
        exec.timing.insert(
            format!("episode_{e}_seconds_per_decision"),
            r.seconds_per_decision,
        );
    }
    let (mean, std) = mean_std(&sums);
    let summary = ControlSummary {
        kind: model.kind().into(),
        nt: dm.layout().window,
        n_pairs: dm.latent_dim() / 2,
        plant: spec.plant,
        episodes: s.episodes,
        error_sums: sums,
        mean_error_sum: mean,
        std_error_sum: std,
        tail_mean_abs_angle: tails,
        diverged_at: diverged,
        infinite_plans: infinite,
    };
    write_json(out, SUMMARY_FILE, &summary, &mut exec)?;
    Ok(exec)
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSpec {
    pub summaries: Vec<PathBuf>,
}

pub fn compare(spec: &CompareSpec, out: &Path) -> Result<Execution> {
    let mut exec = Execution::default();
    let mut rows = Vec::new();
    for (i, p) in spec.summaries.iter().enumerate() {
        exec.inputs
            .insert(format!("summary_{i}"), check_against_producer(p)?);
        let text = std::fs::read_to_string(p)?;
        let s: ControlSummary =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        rows.push(s);
    }
    rows.sort_by(|a, b| {
        a.kind
            .cmp(&b.kind)
            .then(a.nt.cmp(&b.nt))
            .then(a.n_pairs.cmp(&b.n_pairs))
    });
    let mut csv = String::from("method,Nt,mean_error_sum,std,episodes,pairs\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.kind.to_uppercase(),
            r.nt,
            r.mean_error_sum,
            r.std_error_sum,
            r.episodes,
            r.n_pairs
        );
    }
    write(out, "comparison.csv", csv.as_bytes(), &mut exec)?;
    print!("{csv}");
    Ok(exec)
}

// ---------------------------------------------------------------- dispatch

/// Runs a resolved command, as recorded in a manifest.
pub fn execute(command: &str, config: &serde_json::Value, out: &Path) -> Result<Execution> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let c = config.clone();
    match command {
        "simulate" => simulate(&serde_json::from_value(c)?, out),
        "train" => train_model(&serde_json::from_value(c)?, out),
        "analyze" => analyze(&serde_json::from_value(c)?, out),
        "control" => control(&serde_json::from_value(c)?, out),
        "compare" => compare(&serde_json::from_value(c)?, out),
        other => bail!("unknown command `{other}` in manifest"),
    }
}
