//! `koopctl`: simulate, train, analyze, control and compare deep Koopman
//! models, recording a manifest next to every output.

mod commands;
mod config;
mod manifest;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use koopman_core::dataset::{DataGenConfig, DatasetBundle, Scenario};
use koopman_core::model::ModelKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use commands::{
    execute, model_defaults, parse_grid, resolve_file, AnalyzeSpec, CompareSpec, ControlSettings,
    ControlSpec, Execution, PlantKind, TrainSpec, DATASET_FILE, MODEL_FILE, SUMMARY_FILE,
};
use manifest::{Manifest, MANIFEST_FORMAT};

#[derive(Parser)]
#[command(name = "koopctl", version, about = "Deep Koopman network pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SystemArg {
    Rigid,
    RigidPd,
    Soft,
}

impl From<SystemArg> for Scenario {
    fn from(s: SystemArg) -> Self {
        match s {
            SystemArg::Rigid => Scenario::Rigid,
            SystemArg::RigidPd => Scenario::RigidPd,
            SystemArg::Soft => Scenario::Soft,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Dkn,
    Fcn,
}

#[derive(Clone, Copy, ValueEnum)]
enum DefaultsOf {
    Simulate,
    Train,
    Control,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a delay-embedded dataset.
    Simulate {
        #[arg(long, value_enum)]
        system: SystemArg,
        /// TOML file merged over the system preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Delay-embedding window.
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Koopman network or the fully connected baseline.
    Train {
        /// Dataset file or a `simulate` output directory.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "dkn")]
        kind: KindArg,
        /// Number of complex-conjugate eigenvalue pairs.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export spectral fields, latent trajectories and per-pair summaries.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// `default` or `xmin:xmax:nx,ymin:ymax:ny`.
        #[arg(long, default_value = "default", allow_hyphen_values = true)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run closed-loop CEM control episodes on a simulated plant.
    Control {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "soft")]
        plant: PlantKind,
        /// TOML file with `episodes`, `[cem]`, `[cost]`, `[episode]`.
        #[arg(long, alias = "cem")]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate mean error sums of several control runs.
    Compare {
        /// Control output directories or summary files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a command from its manifest and check the outputs match.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default settings of a command as TOML.
    Defaults {
        #[arg(value_enum)]
        of: DefaultsOf,
        #[arg(long, value_enum, default_value = "rigid")]
        system: SystemArg,
    },
}

/// Resolved settings of a command, as stored in its manifest.
fn resolve(cmd: &Command) -> Result<(&'static str, serde_json::Value)> {
    Ok(match cmd {
        Command::Simulate {
            system,
            config,
            seed,
            nt,
            ..
        } => {
            let scenario = Scenario::from(*system);
            let mut cfg: DataGenConfig =
                config::merge_file(&DataGenConfig::preset(scenario), config.as_deref())?;
            if cfg.scenario != scenario {
                bail!("config scenario {:?} conflicts with --system", cfg.scenario);
            }
            if let Some(s) = seed {
                cfg.seed = *s;
            }
            if let Some(n) = nt {
                cfg.nt = *n;
            }
            cfg.validate()?;
            ("simulate", serde_json::to_value(cfg)?)
        }
        Command::Train {
            dataset,
            kind,
            pairs,
            config,
            seed,
            ..
        } => {
            let path = resolve_file(dataset, DATASET_FILE)?;
            let bundle = DatasetBundle::load(&path)
                .with_context(|| format!("loading {}", path.display()))?;
            let mut model = config::merge_file(&model_defaults(&bundle), config.as_deref())?;
            if let Some(p) = pairs {
                model.n_pairs = *p;
            }
            if let Some(s) = seed {
                model.seed = *s;
            }
            model.validate()?;
            let kind = match kind {
                KindArg::Dkn => ModelKind::Dkn,
                KindArg::Fcn => ModelKind::Fcn,
            };
            let spec = TrainSpec {
                kind,
                dataset: path,
                model,
            };
            ("train", serde_json::to_value(spec)?)
        }
        Command::Analyze {
            model,
            dataset,
            grid,
            ..
        } => {
            let model = resolve_file(model, MODEL_FILE)?;
            let dataset = resolve_file(dataset, DATASET_FILE)?;
            let bundle = DatasetBundle::load(&dataset)?;
            let grid = parse_grid(grid, bundle.layout().sample_dim)?;
            let spec = AnalyzeSpec {
                model,
                dataset,
                grid,
            };
            ("analyze", serde_json::to_value(spec)?)
        }
        Command::Control {
            model,
            plant,
            config,
            episodes,
            seed,
            ..
        } => {
            let model = resolve_file(model, MODEL_FILE)?;
            let mut settings = ControlSettings::default();
            if *plant == PlantKind::Rigid {
                settings.episode.initial_state = vec![0.8, 0.0];
            }
            let mut settings: ControlSettings = config::merge_file(&settings, config.as_deref())?;
            if let Some(e) = episodes {
                settings.episodes = *e;
            }
            if let Some(s) = seed {
                settings.cem.seed = *s;
            }
            settings.validate()?;
            let spec = ControlSpec {
                model,
                plant: *plant,
                settings,
            };
            ("control", serde_json::to_value(spec)?)
        }
        Command::Compare { runs, .. } => {
            let summaries = runs
                .iter()
                .map(|r| resolve_file(r, SUMMARY_FILE))
                .collect::<Result<Vec<_>>>()?;
            ("compare", serde_json::to_value(CompareSpec { summaries })?)
        }
        Command::Rerun { .. } | Command::Defaults { .. } => unreachable!("not a pipeline command"),
    })
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Simulate { out, .. }
        | Command::Train { out, .. }
        | Command::Analyze { out, .. }
        | Command::Control { out, .. }
        | Command::Compare { out, .. }
        | Command::Rerun { out, .. } => out,
        Command::Defaults { .. } => Path::new("."),
    }
}

fn run_and_record(command: &str, config: serde_json::Value, out: &Path) -> Result<Manifest> {
    let started = Instant::now();
    let exec: Execution = execute(command, &config, out)?;
    let mut outputs = Vec::with_capacity(exec.outputs.len());
    for name in &exec.outputs {
        outputs.push(manifest::FileDigest {
            sha256: manifest::sha256_file(&out.join(name))?,
            path: name.clone(),
        });
    }
    let m = Manifest {
        format: MANIFEST_FORMAT.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        argv: std::env::args().collect(),
        config,
        seeds: exec.seeds,
        inputs: exec.inputs,
        outputs,
        wall_clock_s: started.elapsed().as_secs_f64(),
        timing: exec.timing,
    };
    let path = m.write(out)?;
    log::info!("wrote {}", path.display());
    Ok(m)
}

fn rerun(manifest_path: &Path, out: &Path) -> Result<()> {
    let path = resolve_file(manifest_path, manifest::MANIFEST_FILE)?;
    let original = Manifest::load(&path)?;
    original.verify_inputs()?;
    let fresh = run_and_record(&original.command, original.config.clone(), out)?;
    let mut differing = Vec::new();
    for o in &original.outputs {
        match fresh.outputs.iter().find(|f| f.path == o.path) {
            Some(f) if f.sha256 == o.sha256 => {}
            Some(_) => differing.push(format!("{} differs", o.path.display())),
            None => differing.push(format!("{} was not produced", o.path.display())),
        }
    }
    if !differing.is_empty() {
        bail!("rerun is not reproducible: {}", differing.join("; "));
    }
    println!(
        "reproduced {} outputs of `{}` byte-identically",
        original.outputs.len(),
        original.command
    );
    Ok(())
}

fn defaults(of: DefaultsOf, system: SystemArg) -> Result<String> {
    let scenario = Scenario::from(system);
    match of {
        DefaultsOf::Simulate => config::render(&DataGenConfig::preset(scenario)),
        DefaultsOf::Train => config::render(&koopman_core::dkn::DknConfig::preset(scenario)),
        DefaultsOf::Control => config::render(&ControlSettings::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Rerun { manifest, out } => rerun(manifest, out),
        Command::Defaults { of, system } => {
            print!("{}", defaults(*of, *system)?);
            Ok(())
        }
        cmd => {
            let (command, config) = resolve(cmd)?;
            run_and_record(command, config, out_dir(cmd))?;
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
