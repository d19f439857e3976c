//! `deconfound` command-line pipeline.
//!
//! Exit status: 0 on success, 1 on a runtime failure, 2 on a usage error
//! (bad flags, unreadable or invalid configuration).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use deconfound::analysis::{layer_profile, profiles_csv, ProfileExport};
use deconfound::dictionary::build_dictionary_set;
use deconfound::evalkit::{ablation_grid, evaluate};
use deconfound::io::{self, Manifest};
use deconfound::model::{ModelBundle, ModelConfig};
use deconfound::par::Exec;
use deconfound::trainer::{
    dictionary_scenes, eval_scenes, eval_settings, reference_cooccurrence, run_experiment, train_stage, write_loss_csv,
    Arm, EvalConfig, ExperimentConfig, Schedule, Stage, TrainConfig,
};
use deconfound::world::{build_world, read_scenes_jsonl, write_scenes_jsonl, World, WorldConfig};

#[derive(Parser, Debug)]
#[command(name = "deconfound", version, about = "Toy multimodal hallucination pipeline with causal intervention modules")]
struct Cli {
    /// JSON configuration document; omitted fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed. For gen-world it also selects the world.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Override one configuration field, e.g. `--set schedule.finetune.steps=50`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,

    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the world definition and a scene sample.
    GenWorld {
        #[arg(long, default_value_t = 1000)]
        scenes: usize,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum, default_value_t = StageArg::Pretrain)]
        stage: StageArg,
        /// Arm used when starting from scratch: `baseline`, `causal` or `placement/variant`.
        #[arg(long, default_value = "baseline")]
        arm: String,
        /// Checkpoint to continue from.
        #[arg(long, value_name = "PATH")]
        init: Option<PathBuf>,
        /// Directory holding dictionaries for a causal arm.
        #[arg(long, value_name = "DIR")]
        dicts: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        world: Option<PathBuf>,
    },
    /// Build confounder dictionaries from an estimation checkpoint.
    BuildDict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        world: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write its hallucination report.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Scenes as JSON lines; defaults to the seed's evaluation sample.
        #[arg(long, value_name = "PATH")]
        scenes: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        world: Option<PathBuf>,
    },
    /// Write per-tap entanglement profiles of one or more checkpoints.
    Analyze {
        #[arg(long = "checkpoint", value_name = "PATH", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        center: usize,
        /// Number of co-occurrence partners of the center.
        #[arg(long, default_value_t = 3)]
        partners: usize,
        #[arg(long, value_name = "PATH")]
        world: Option<PathBuf>,
    },
    /// Train and evaluate every placement × variant arm.
    Ablate {
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Paired baseline-versus-causal experiment with a summary table.
    Repro {
        /// Number of consecutive seeds, starting at --seed (default 0).
        #[arg(long)]
        seeds: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Pretrain,
    Finetune,
}

/// The configuration document: experiment fields plus a single-stage
/// training section used by `train`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    world: WorldConfig,
    model: ModelConfig,
    schedule: Schedule,
    eval: EvalConfig,
    seeds: Vec<u64>,
    arms: Vec<Arm>,
    train: TrainConfig,
}

impl PipelineConfig {
    fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            world: self.world.clone(),
            model: self.model.clone(),
            schedule: self.schedule.clone(),
            eval: self.eval.clone(),
            seeds: self.seeds.clone(),
            arms: self.arms.clone(),
        }
    }
}

fn default_document() -> Value {
    let e = ExperimentConfig::default();
    let cfg = PipelineConfig {
        world: e.world,
        model: e.model,
        schedule: e.schedule,
        eval: e.eval,
        seeds: e.seeds,
        arms: e.arms,
        train: TrainConfig::default(),
    };
    serde_json::to_value(cfg).expect("config serializes")
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<deconfound::Error> for CliError {
    fn from(e: deconfound::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Copies `patch` into `base`. Object keys must already exist in `base`;
/// any other value replaces the target wholesale.
fn merge(base: &mut Value, patch: Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let child = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| CliError::Usage(format!("unknown configuration field `{child}`")))?;
                merge(slot, v, &child)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

fn apply_override(doc: &mut Value, arg: &str) -> CliResult<()> {
    let (path, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects PATH=VALUE, got `{arg}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for key in path.rsplit('.') {
        if key.is_empty() {
            return Err(CliError::Usage(format!("empty segment in `{path}`")));
        }
        let mut m = serde_json::Map::new();
        m.insert(key.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(doc, patch, "")
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
fn resolve_config(cli: &Cli) -> CliResult<(PipelineConfig, Value)> {
    let mut doc = default_document();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        merge(&mut doc, file, "")?;
    }
    for arg in &cli.overrides {
        apply_override(&mut doc, arg)?;
    }
    if let Some(seed) = cli.seed {
        doc["train"]["seed"] = seed.into();
        if matches!(cli.command, Command::GenWorld { .. }) {
            doc["world"]["seed"] = seed.into();
        }
    }
    let cfg: PipelineConfig =
        serde_json::from_value(doc.clone()).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    cfg.world.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((cfg, doc))
}

fn load_world(path: Option<&Path>, cfg: &PipelineConfig, manifest: &mut Manifest) -> CliResult<World> {
    match path {
        Some(p) => {
            manifest.add_input(p)?;
            Ok(World::load_json(p)?)
        }
        None => Ok(build_world(&cfg.world)?),
    }
}

fn finish(manifest: &mut Manifest, out: &Path) -> CliResult<()> {
    manifest.record_outputs(out)?;
    manifest.write(out)?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let (cfg, doc) = resolve_config(&cli)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let out = cli.out.as_path();
    let seed = cfg.train.seed;
    let command_name = match &cli.command {
        Command::GenWorld { .. } => "gen-world",
        Command::Train { .. } => "train",
        Command::BuildDict { .. } => "build-dict",
        Command::Eval { .. } => "eval",
        Command::Analyze { .. } => "analyze",
        Command::Ablate { .. } => "ablate",
        Command::Repro { .. } => "repro",
    };
    let mut manifest = Manifest::new(command_name, doc)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out.display())))?;

    match cli.command {
        Command::GenWorld { scenes } => {
            let world = build_world(&cfg.world)?;
            world.save_json(&out.join("world.json"))?;
            let sample = world.sample_scenes(scenes, cfg.world.seed);
            write_scenes_jsonl(&out.join("scenes.jsonl"), &sample)?;
            manifest.notes.insert("scenes".into(), scenes.to_string());
        }
        Command::Train {
            stage,
            arm,
            init,
            dicts,
            world,
        } => {
            let world = load_world(world.as_deref(), &cfg, &mut manifest)?;
            let mut bundle = match &init {
                Some(p) => {
                    manifest.add_input(p)?;
                    io::load_checkpoint(p)?
                }
                None => {
                    let arm = Arm::parse(&arm).map_err(|e| CliError::Usage(e.to_string()))?;
                    manifest.notes.insert("arm".into(), arm.name());
                    ModelBundle::init(&arm.model_config(&cfg.model), &world, seed)?
                }
            };
            if let Some(dir) = &dicts {
                let set = io::load_dictionary_set(dir)?;
                for f in io::DICTIONARY_FILES {
                    let p = dir.join(f);
                    if p.exists() {
                        manifest.add_input(&p)?;
                    }
                }
                bundle.attach_dictionaries(&set)?;
            }
            let mut tc = cfg.train.clone();
            tc.stage = match stage {
                StageArg::Pretrain => Stage::Pretrain,
                StageArg::Finetune => Stage::Finetune,
            };
            let outcome = train_stage(bundle, &world, &tc)?;
            io::save_checkpoint(&out.join("model.ckpt"), &outcome.bundle)?;
            write_loss_csv(&out.join("loss.csv"), &outcome.losses)?;
            if let Some(last) = outcome.losses.last() {
                log::info!("step {} loss {:.4}", last.step, last.loss);
            }
        }
        Command::BuildDict { checkpoint, world } => {
            let world = load_world(world.as_deref(), &cfg, &mut manifest)?;
            manifest.add_input(&checkpoint)?;
            let bundle = io::load_checkpoint(&checkpoint)?;
            let scenes = dictionary_scenes(&world, &cfg.experiment(), seed);
            let set = build_dictionary_set(&bundle, &world, &scenes, exec)?;
            io::save_dictionary_set(out, &set)?;
        }
        Command::Eval {
            checkpoint,
            scenes,
            world,
        } => {
            let world = load_world(world.as_deref(), &cfg, &mut manifest)?;
            manifest.add_input(&checkpoint)?;
            let bundle = io::load_checkpoint(&checkpoint)?;
            let exp = cfg.experiment();
            let scenes = match &scenes {
                Some(p) => {
                    manifest.add_input(p)?;
                    read_scenes_jsonl(p)?
                }
                None => eval_scenes(&world, &exp, seed),
            };
            let cooc = reference_cooccurrence(&world, &exp)?;
            let report = evaluate(&bundle, &world, &scenes, &cooc, &eval_settings(&exp, seed), exec)?;
            report.write_json(&out.join("report.json"))?;
            report.write_csv(&out.join("report.csv"))?;
        }
        Command::Analyze {
            checkpoints,
            center,
            partners,
            world,
        } => {
            let world = load_world(world.as_deref(), &cfg, &mut manifest)?;
            let exp = cfg.experiment();
            let scenes = eval_scenes(&world, &exp, seed);
            let cooc = reference_cooccurrence(&world, &exp)?;
            let mut profiles = Vec::new();
            for (i, p) in checkpoints.iter().enumerate() {
                manifest.add_input(p)?;
                let bundle = io::load_checkpoint(p)?;
                let reports = layer_profile(&bundle, &scenes, &cooc, center, partners, exec)?;
                profiles.push(ProfileExport {
                    label: format!("{i}:{}", p.display()),
                    reports,
                });
            }
            io::write_json(&out.join("profiles.json"), &profiles)?;
            io::write_bytes(&out.join("profiles.csv"), profiles_csv(&profiles).as_bytes())?;
        }
        Command::Ablate { seeds } => {
            let start = cli.seed.unwrap_or(0);
            let seeds: Vec<u64> = (start..start + seeds as u64).collect();
            let (rows, _) = ablation_grid(&cfg.experiment(), &seeds, Some(out), exec)?;
            log::info!("ablation grid: {} rows", rows.len());
        }
        Command::Repro { seeds } => {
            let mut exp = cfg.experiment();
            if let Some(n) = seeds {
                let start = cli.seed.unwrap_or(0);
                exp.seeds = (start..start + n as u64).collect();
            } else if let Some(s) = cli.seed {
                exp.seeds = vec![s];
            }
            let manifest_runs = run_experiment(&exp, Some(out), exec)?;
            let failed = manifest_runs.runs.iter().filter(|r| r.report().is_none()).count();
            if failed > 0 {
                log::warn!("{failed} arm runs failed; see run_manifest.json");
            }
        }
    }
    finish(&mut manifest, out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `deconfound --help` for usage");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
