//! Seed × arm orchestration.
//!
//! Per seed: the baseline runs first and doubles as the non-causal
//! estimation run; its early-finetune snapshot yields the dictionaries that
//! every causal arm of that seed consumes. All arms of a seed share their
//! initial shared parameters, their training streams and their evaluation
//! scenes.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{train_stage, write_loss_csv, LossRecord, Stage, TrainConfig, TrainState};
use crate::dictionary::{build_dictionary_set, estimation_checkpoint, estimation_step};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalSettings, HallucinationReport};
use crate::io::{self, config_hash};
use crate::model::{AttnVariant, DictionarySet, ModelBundle, ModelConfig, Placement};
use crate::par::{self, Exec};
use crate::world::{build_world, cooccurrence_counts, CooccurrenceMatrix, SceneInstance, World, WorldConfig};

/// A placement plus, for causal placements, an attention variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Arm {
    pub placement: Placement,
    pub variant: AttnVariant,
}

impl Arm {
    pub fn baseline() -> Self {
        Self {
            placement: Placement::Baseline,
            variant: AttnVariant::SharedKv,
        }
    }

    /// Both causal modules with the default variant.
    pub fn causal() -> Self {
        Self {
            placement: Placement::Both,
            variant: AttnVariant::SharedKv,
        }
    }

    pub fn new(placement: Placement, variant: AttnVariant) -> Self {
        let variant = if placement == Placement::Baseline {
            AttnVariant::SharedKv
        } else {
            variant
        };
        Self { placement, variant }
    }

    /// The baseline plus every causal placement × variant.
    pub fn grid() -> Vec<Arm> {
        let mut out = vec![Arm::baseline()];
        for p in [Placement::OnlyTransformer, Placement::OnlyProjection, Placement::Both] {
            for v in AttnVariant::ALL {
                out.push(Arm::new(p, v));
            }
        }
        out
    }

    pub fn name(&self) -> String {
        match self.placement {
            Placement::Baseline => "baseline".into(),
            p => format!("{}/{}", p.name(), self.variant.name()),
        }
    }

    /// Accepts `baseline`, `causal`, `<placement>` or `<placement>/<variant>`.
    pub fn parse(s: &str) -> Result<Self> {
        if s == "causal" {
            return Ok(Arm::causal());
        }
        match s.split_once('/') {
            Some((p, v)) => Ok(Arm::new(Placement::parse(p)?, AttnVariant::parse(v)?)),
            None => Ok(Arm::new(Placement::parse(s)?, AttnVariant::SharedKv)),
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.placement == Placement::Baseline
    }

    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            attn_variant: self.variant,
            ..base.clone()
        }
        .with_placement(self.placement)
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl TryFrom<String> for Arm {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Arm::parse(&s)
    }
}

impl From<Arm> for String {
    fn from(a: Arm) -> String {
        a.name()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub pretrain: StageSchedule,
    pub finetune: StageSchedule,
    /// Finetune steps per nominal epoch.
    pub steps_per_epoch: usize,
    /// Fraction of a finetune epoch after which the estimation snapshot is taken.
    pub estimation_fraction: f64,
    pub dictionary_scenes: usize,
    /// Causal-arm pretraining multiplies the batch by this factor and
    /// divides the step count by it, so it sees the same scenes.
    pub causal_pretrain_batch_factor: usize,
    pub causal_pretrain_lr_factor: f64,
    pub clip_grad_norm: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            pretrain: StageSchedule {
                batch_size: 8,
                learning_rate: 0.1,
                steps: 100,
            },
            finetune: StageSchedule {
                batch_size: 16,
                learning_rate: 0.2,
                steps: 1500,
            },
            steps_per_epoch: 1500,
            estimation_fraction: 0.1,
            dictionary_scenes: 1000,
            causal_pretrain_batch_factor: 2,
            causal_pretrain_lr_factor: 0.5,
            clip_grad_norm: 1.0,
        }
    }
}

impl Schedule {
    /// Stage configurations for a run of `arm` with `seed`.
    pub fn stage_configs(&self, arm: &Arm, seed: u64) -> (TrainConfig, TrainConfig) {
        let mut pre = TrainConfig {
            stage: Stage::Pretrain,
            batch_size: self.pretrain.batch_size,
            learning_rate: self.pretrain.learning_rate,
            steps: self.pretrain.steps,
            seed,
            steps_per_epoch: self.pretrain.steps.max(1),
            checkpoint_every: 0,
            snapshot_steps: Vec::new(),
            clip_grad_norm: self.clip_grad_norm,
        };
        if !arm.is_baseline() {
            let f = self.causal_pretrain_batch_factor.max(1);
            pre.batch_size *= f;
            pre.steps = pre.steps.div_ceil(f);
            pre.learning_rate *= self.causal_pretrain_lr_factor;
        }
        let fine = TrainConfig {
            stage: Stage::Finetune,
            batch_size: self.finetune.batch_size,
            learning_rate: self.finetune.learning_rate,
            steps: self.finetune.steps,
            seed,
            steps_per_epoch: self.steps_per_epoch,
            checkpoint_every: 0,
            snapshot_steps: Vec::new(),
            clip_grad_norm: self.clip_grad_norm,
        };
        (pre, fine)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_scenes: usize,
    pub pope_per_scene: usize,
    pub caption_max_len: usize,
    /// Scenes drawn to rank popular and adversarial POPE negatives.
    pub cooccurrence_scenes: usize,
    /// Scenes of the dedicated partner-probe sample.
    pub partner_scenes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_scenes: 1000,
            pope_per_scene: 2,
            caption_max_len: 12,
            cooccurrence_scenes: 5000,
            partner_scenes: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            schedule: Schedule::default(),
            eval: EvalConfig::default(),
            seeds: vec![0],
            arms: vec![Arm::baseline(), Arm::causal()],
        }
    }
}

// Stream offsets that keep evaluation, dictionary and co-occurrence
// scenes disjoint from the training streams of the same seed.
const EVAL_STREAM: u64 = 0x5eed_e7a1;
const DICT_STREAM: u64 = 0x5eed_d1c7;
const COOC_STREAM: u64 = 0x5eed_c00c;

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream
}

pub fn eval_scenes(world: &World, cfg: &ExperimentConfig, seed: u64) -> Vec<SceneInstance> {
    world.sample_scenes(cfg.eval.n_scenes, derive_seed(seed, EVAL_STREAM))
}

/// Evaluation settings of `seed`, paired with [`eval_scenes`].
pub fn eval_settings(cfg: &ExperimentConfig, seed: u64) -> EvalSettings {
    EvalSettings {
        n_scenes: cfg.eval.n_scenes,
        seed: derive_seed(seed, EVAL_STREAM),
        pope_per_scene: cfg.eval.pope_per_scene,
        caption_max_len: cfg.eval.caption_max_len,
        partner_scenes: cfg.eval.partner_scenes,
    }
}

pub fn dictionary_scenes(world: &World, cfg: &ExperimentConfig, seed: u64) -> Vec<SceneInstance> {
    world.sample_scenes(cfg.schedule.dictionary_scenes, derive_seed(seed, DICT_STREAM))
}

pub fn reference_cooccurrence(world: &World, cfg: &ExperimentConfig) -> Result<CooccurrenceMatrix> {
    let scenes = world.sample_scenes(cfg.eval.cooccurrence_scenes.max(1), derive_seed(world.config.seed, COOC_STREAM));
    cooccurrence_counts(world.k(), &scenes)
}

/// Identity of one run: everything that determines its result.
pub fn arm_config_hash(cfg: &ExperimentConfig, arm: &Arm, seed: u64) -> Result<String> {
    let (pre, fine) = cfg.schedule.stage_configs(arm, seed);
    #[derive(Serialize)]
    struct Key<'a> {
        world: &'a WorldConfig,
        model: ModelConfig,
        pretrain: TrainConfig,
        finetune: TrainConfig,
        eval: &'a EvalConfig,
        uses_dictionaries: bool,
        estimation: Option<(f64, usize)>,
        seed: u64,
    }
    config_hash(&Key {
        world: &cfg.world,
        model: arm.model_config(&cfg.model),
        pretrain: pre,
        finetune: fine,
        eval: &cfg.eval,
        uses_dictionaries: !arm.is_baseline(),
        estimation: (!arm.is_baseline()).then_some((cfg.schedule.estimation_fraction, cfg.schedule.dictionary_scenes)),
        seed,
    })
}

/// A fully trained and evaluated arm.
#[derive(Clone, Debug)]
pub struct TrainedArm {
    pub arm: Arm,
    pub bundle: ModelBundle,
    pub pretrain_losses: Vec<LossRecord>,
    pub finetune_losses: Vec<LossRecord>,
    pub report: HallucinationReport,
}

/// Everything produced for one seed.
#[derive(Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub estimation: Option<ModelBundle>,
    pub dictionaries: Option<DictionarySet>,
    pub arms: Vec<(Arm, Result<TrainedArm>)>,
}

fn train_arm(
    world: &World,
    cfg: &ExperimentConfig,
    arm: Arm,
    seed: u64,
    dicts: Option<&DictionarySet>,
    snapshot_at: Option<usize>,
) -> Result<(ModelBundle, Vec<LossRecord>, Vec<LossRecord>, Option<ModelBundle>)> {
    let mc = arm.model_config(&cfg.model);
    let mut bundle = ModelBundle::init(&mc, world, seed)?;
    if let Some(d) = dicts {
        bundle.attach_dictionaries(d)?;
    }
    let (pre, mut fine) = cfg.schedule.stage_configs(&arm, seed);
    let pre_out = train_stage(bundle, world, &pre)?;
    if let Some(s) = snapshot_at {
        fine.snapshot_steps.push(s);
    }
    let mut st = TrainState::new(pre_out.bundle, world, fine)?;
    st.run()?;
    let snapshot = match snapshot_at {
        Some(_) => Some(estimation_checkpoint(&st, cfg.schedule.estimation_fraction)?),
        None => None,
    };
    let out = st.finish();
    Ok((out.bundle, pre_out.losses, out.losses, snapshot))
}

/// Trains and evaluates every arm of one seed. The baseline is trained
/// even when not requested, since it provides the estimation checkpoint.
pub fn run_seed(world: &World, cfg: &ExperimentConfig, seed: u64, exec: Exec) -> Result<SeedRun> {
    let scenes = eval_scenes(world, cfg, seed);
    let cooc = reference_cooccurrence(world, cfg)?;
    let settings = eval_settings(cfg, seed);
    let eval = |arm: Arm, b: ModelBundle, pl: Vec<LossRecord>, fl: Vec<LossRecord>| -> Result<TrainedArm> {
        let report = evaluate(&b, world, &scenes, &cooc, &settings, exec)?;
        Ok(TrainedArm {
            arm,
            bundle: b,
            pretrain_losses: pl,
            finetune_losses: fl,
            report,
        })
    };

    let needs_dicts = cfg.arms.iter().any(|a| !a.is_baseline());
    let est_step = estimation_step(cfg.schedule.estimation_fraction, cfg.schedule.steps_per_epoch)?;
    if needs_dicts && est_step > cfg.schedule.finetune.steps {
        return Err(Error::Config(format!(
            "estimation step {est_step} lies beyond the {} finetune steps",
            cfg.schedule.finetune.steps
        )));
    }

    let base = train_arm(world, cfg, Arm::baseline(), seed, None, needs_dicts.then_some(est_step));
    let (base_result, estimation) = match base {
        Ok((b, pl, fl, snap)) => (eval(Arm::baseline(), b, pl, fl), snap),
        Err(e) => (Err(e), None),
    };

    let dictionaries = match &estimation {
        Some(est) => Some(build_dictionary_set(est, world, &dictionary_scenes(world, cfg, seed), exec)),
        None => None,
    }
    .transpose();

    let causal_arms: Vec<Arm> = cfg.arms.iter().copied().filter(|a| !a.is_baseline()).collect();
    let causal_results: Vec<Result<TrainedArm>> = match (&dictionaries, &base_result) {
        (Ok(Some(d)), _) => par::map(exec, &causal_arms, |&arm| {
            let (b, pl, fl, _) = train_arm(world, cfg, arm, seed, Some(d), None)?;
            eval(arm, b, pl, fl)
        }),
        (Err(e), _) => causal_arms
            .iter()
            .map(|_| Err(Error::State(format!("dictionary estimation failed: {e}"))))
            .collect(),
        (Ok(None), Err(e)) => causal_arms
            .iter()
            .map(|_| Err(Error::State(format!("estimation run failed: {e}"))))
            .collect(),
        (Ok(None), Ok(_)) => causal_arms
            .iter()
            .map(|_| Err(Error::State("no estimation snapshot".into())))
            .collect(),
    };

    let mut arms = Vec::new();
    let mut base_result = Some(base_result);
    let mut causal_iter = causal_results.into_iter();
    for a in &cfg.arms {
        if a.is_baseline() {
            let r = base_result
                .take()
                .unwrap_or_else(|| Err(Error::Config("baseline listed twice".into())));
            arms.push((*a, r));
        } else {
            arms.push((*a, causal_iter.next().expect("one result per causal arm")));
        }
    }
    Ok(SeedRun {
        seed,
        estimation,
        dictionaries: dictionaries.ok().flatten(),
        arms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ArmOutcome {
    Ok {
        report: HallucinationReport,
        /// Artifact name → path relative to the output directory.
        artifacts: BTreeMap<String, String>,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub seed: u64,
    pub arm: String,
    pub config_hash: String,
    pub outcome: ArmOutcome,
}

impl ArmRun {
    pub fn report(&self) -> Option<&HallucinationReport> {
        match &self.outcome {
            ArmOutcome::Ok { report, .. } => Some(report),
            ArmOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub runs: Vec<ArmRun>,
}

impl RunManifest {
    pub fn paired(&self, seed: u64, arm: &str) -> Option<&ArmRun> {
        self.runs.iter().find(|r| r.seed == seed && r.arm == arm)
    }

    /// Flat table of every run: seed, arm, status and report columns.
    pub fn summary_csv(&self) -> String {
        let mut s = format!("seed,arm,status,{}\n", HallucinationReport::CSV_HEADER);
        for r in &self.runs {
            match &r.outcome {
                ArmOutcome::Ok { report, .. } => {
                    s.push_str(&format!("{},{},ok,{}\n", r.seed, r.arm, report.csv_row()));
                }
                ArmOutcome::Failed { .. } => {
                    let blanks = ",".repeat(HallucinationReport::CSV_HEADER.split(',').count());
                    s.push_str(&format!("{},{},failed{blanks}\n", r.seed, r.arm));
                }
            }
        }
        s
    }
}

fn arm_dir(arm: &Arm) -> String {
    arm.name().replace('/', "__")
}

fn write_seed_artifacts(dir: &Path, run: &SeedRun) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let seed_dir = format!("seed{}", run.seed);
    if let Some(est) = &run.estimation {
        io::save_checkpoint(&dir.join(&seed_dir).join("estimation.ckpt"), est)?;
    }
    if let Some(d) = &run.dictionaries {
        io::save_dictionary_set(&dir.join(&seed_dir).join("dict"), d)?;
    }
    let mut out = BTreeMap::new();
    for (arm, res) in &run.arms {
        let Ok(t) = res else { continue };
        let rel = format!("{seed_dir}/{}", arm_dir(arm));
        let base = dir.join(&rel);
        let mut files = BTreeMap::new();
        let mut put = |k: &str, f: &str| {
            files.insert(k.to_string(), format!("{rel}/{f}"));
        };
        io::save_checkpoint(&base.join("model.ckpt"), &t.bundle)?;
        put("checkpoint", "model.ckpt");
        write_loss_csv(&base.join("loss_pretrain.csv"), &t.pretrain_losses)?;
        put("loss_pretrain", "loss_pretrain.csv");
        write_loss_csv(&base.join("loss_finetune.csv"), &t.finetune_losses)?;
        put("loss_finetune", "loss_finetune.csv");
        t.report.write_json(&base.join("report.json"))?;
        put("report", "report.json");
        out.insert(arm.name(), files);
    }
    Ok(out)
}

/// Runs every seed × arm. Per-arm failures are recorded and do not stop
/// the remaining arms. Artifacts are written under `out` when given.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, exec: Exec) -> Result<RunManifest> {
    let (manifest, _) = run_experiment_keep(cfg, out, exec)?;
    Ok(manifest)
}

/// As [`run_experiment`], also returning the in-memory seed runs.
pub fn run_experiment_keep(cfg: &ExperimentConfig, out: Option<&Path>, exec: Exec) -> Result<(RunManifest, Vec<SeedRun>)> {
    if cfg.seeds.is_empty() {
        return Err(Error::Argument("at least one seed is required".into()));
    }
    if cfg.arms.is_empty() {
        return Err(Error::Argument("at least one arm is required".into()));
    }
    let world = build_world(&cfg.world)?;
    let seed_runs: Vec<Result<SeedRun>> = par::map(exec, &cfg.seeds, |&s| run_seed(&world, cfg, s, exec));

    let mut runs = Vec::new();
    let mut kept = Vec::new();
    for (&seed, sr) in cfg.seeds.iter().zip(seed_runs) {
        match sr {
            Ok(sr) => {
                let artifacts = match out {
                    Some(dir) => write_seed_artifacts(dir, &sr)?,
                    None => BTreeMap::new(),
                };
                for (arm, res) in &sr.arms {
                    let outcome = match res {
                        Ok(t) => ArmOutcome::Ok {
                            report: t.report.clone(),
                            artifacts: artifacts.get(&arm.name()).cloned().unwrap_or_default(),
                        },
                        Err(e) => {
                            log::error!("seed {seed} arm {arm} failed: {e}");
                            ArmOutcome::Failed { error: e.to_string() }
                        }
                    };
                    runs.push(ArmRun {
                        seed,
                        arm: arm.name(),
                        config_hash: arm_config_hash(cfg, arm, seed)?,
                        outcome,
                    });
                }
                kept.push(sr);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                for arm in &cfg.arms {
                    runs.push(ArmRun {
                        seed,
                        arm: arm.name(),
                        config_hash: arm_config_hash(cfg, arm, seed)?,
                        outcome: ArmOutcome::Failed { error: e.to_string() },
                    });
                }
            }
        }
    }
    let manifest = RunManifest {
        config: cfg.clone(),
        config_hash: config_hash(cfg)?,
        runs,
    };
    if let Some(dir) = out {
        io::write_json(&dir.join("run_manifest.json"), &manifest)?;
        io::write_bytes(&dir.join("summary.csv"), manifest.summary_csv().as_bytes())?;
    }
    Ok((manifest, kept))
}
