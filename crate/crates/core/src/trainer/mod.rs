//! Two-stage training with plain SGD plus momentum.
//!
//! Each step draws a batch of scenes from a stream seeded by the run seed
//! and the stage, so arms that share a seed consume identical scene
//! sequences. A scene contributes its caption loss plus the mean loss of one
//! positive and one negative presence probe.

mod experiment;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ParamGroup, ProbeQuery, TrainExample};
use crate::numkit::{Graph, Tensor};
use crate::world::{SceneInstance, World};

pub use experiment::{
    arm_config_hash, dictionary_scenes, eval_scenes, eval_settings, reference_cooccurrence, run_experiment, run_experiment_keep,
    run_seed, Arm, ArmOutcome, ArmRun, EvalConfig, ExperimentConfig, RunManifest, Schedule, SeedRun, StageSchedule,
    TrainedArm,
};

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Trains the projector MLP only. The decoder is untrained and frozen
    /// here, so intervention branches trained against it learn codes for a
    /// random decoder: final-layer branches stand in for the LM, and the
    /// projector branch grows into a dominant lookup unrelated to the
    /// object category. All branches start training in finetune, from
    /// their zero output maps.
    Pretrain,
    /// Trains everything except the frozen encoder and dictionaries.
    Finetune,
}

impl Stage {
    pub fn trains(self, group: ParamGroup) -> bool {
        if group.is_frozen() {
            return false;
        }
        match self {
            Stage::Pretrain => group == ParamGroup::Projector,
            Stage::Finetune => true,
        }
    }

    fn stream(self) -> u64 {
        match self {
            Stage::Pretrain => 1,
            Stage::Finetune => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    /// Steps per nominal epoch over the streamed data.
    pub steps_per_epoch: usize,
    /// Keep a snapshot every this many steps; 0 keeps only explicit ones.
    pub checkpoint_every: usize,
    /// Extra steps after which a snapshot is kept.
    pub snapshot_steps: Vec<usize>,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Finetune,
            batch_size: 16,
            learning_rate: 0.05,
            steps: 400,
            seed: 0,
            steps_per_epoch: 400,
            checkpoint_every: 0,
            snapshot_steps: Vec::new(),
            clip_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if !(self.clip_grad_norm >= 0.0) {
            return Err(Error::Config("clip_grad_norm must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

enum Source {
    Stream { world: World, rng: ChaCha8Rng },
    Fixed { examples: Vec<TrainExample>, next: usize },
}

/// One positive probe on a present category and one negative on a
/// uniformly chosen absent category (when one exists).
pub fn sample_probes<R: Rng + ?Sized>(scene: &SceneInstance, k: usize, rng: &mut R) -> Vec<ProbeQuery> {
    let mut probes = Vec::with_capacity(2);
    let pos = scene.present[rng.random_range(0..scene.present.len())];
    probes.push(ProbeQuery {
        category: pos,
        expect_yes: true,
    });
    let absent: Vec<usize> = (0..k).filter(|c| scene.present.binary_search(c).is_err()).collect();
    if !absent.is_empty() {
        probes.push(ProbeQuery {
            category: absent[rng.random_range(0..absent.len())],
            expect_yes: false,
        });
    }
    probes
}

/// The training examples a stage with `cfg` would draw, in order.
pub fn stream_examples(world: &World, cfg: &TrainConfig, n: usize) -> Vec<TrainExample> {
    let mut rng = stage_rng(cfg);
    (0..n).map(|_| draw_example(world, &mut rng)).collect()
}

fn stage_rng(cfg: &TrainConfig) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stage.stream());
    rng
}

fn draw_example(world: &World, rng: &mut ChaCha8Rng) -> TrainExample {
    let scene = world.sample_scene(rng);
    let probes = sample_probes(&scene, world.k(), rng);
    TrainExample { scene, probes }
}

/// A stage in progress.
pub struct TrainState {
    bundle: ModelBundle,
    cfg: TrainConfig,
    source: Source,
    velocity: Vec<Option<Vec<f64>>>,
    step: usize,
    losses: Vec<LossRecord>,
    snapshots: BTreeMap<usize, ModelBundle>,
    max_grad_norm: f64,
}

impl TrainState {
    /// Streams fresh scenes from `world`.
    pub fn new(bundle: ModelBundle, world: &World, cfg: TrainConfig) -> Result<Self> {
        let rng = stage_rng(&cfg);
        Self::build(bundle, cfg, Source::Stream { world: world.clone(), rng })
    }

    /// Cycles through a fixed example list in order.
    pub fn with_examples(bundle: ModelBundle, cfg: TrainConfig, examples: Vec<TrainExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Argument("empty example list".into()));
        }
        Self::build(bundle, cfg, Source::Fixed { examples, next: 0 })
    }

    fn build(bundle: ModelBundle, cfg: TrainConfig, source: Source) -> Result<Self> {
        cfg.validate()?;
        let mc = bundle.config();
        let ids = bundle.ids();
        if mc.causal_projector && ids.dict_projector_visual.is_none() {
            return Err(Error::Config("causal projector needs its visual dictionary".into()));
        }
        if mc.causal_final_layer && (ids.dict_final_visual.is_none() || ids.dict_final_textual.is_none()) {
            return Err(Error::Config("intervention module needs visual and textual dictionaries".into()));
        }
        let velocity = vec![None; bundle.params().len()];
        Ok(Self {
            bundle,
            cfg,
            source,
            velocity,
            step: 0,
            losses: Vec::new(),
            snapshots: BTreeMap::new(),
            max_grad_norm: 0.0,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn losses(&self) -> &[LossRecord] {
        &self.losses
    }

    pub fn snapshot(&self, step: usize) -> Option<&ModelBundle> {
        self.snapshots.get(&step)
    }

    pub fn snapshots(&self) -> &BTreeMap<usize, ModelBundle> {
        &self.snapshots
    }

    fn next_batch(&mut self) -> Vec<TrainExample> {
        let n = self.cfg.batch_size;
        match &mut self.source {
            Source::Stream { world, rng } => (0..n).map(|_| draw_example(world, rng)).collect(),
            Source::Fixed { examples, next } => (0..n)
                .map(|_| {
                    let e = examples[*next % examples.len()].clone();
                    *next += 1;
                    e
                })
                .collect(),
        }
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Diverged {
            step: self.step + 1,
            lr: self.cfg.learning_rate,
            max_grad_norm: self.max_grad_norm,
            detail,
        }
    }

    /// One optimizer step. Returns the loss before the update.
    pub fn step_once(&mut self) -> Result<LossRecord> {
        let batch = self.next_batch();
        let stage = self.cfg.stage;
        let mut g = Graph::new();
        let bound = self.bundle.bind(&mut g, |grp| stage.trains(grp))?;
        let loss_var = match self.bundle.batch_loss(&mut g, &bound, &batch) {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => return Err(self.diverged(format!("non-finite value in {op}"))),
            Err(e) => return Err(e),
        };
        let loss = g.value(loss_var).data()[0];
        let mut grads = g.backward(loss_var)?;

        let entries = self.bundle.params().entries();
        let mut updates: Vec<(usize, Tensor)> = Vec::new();
        let mut sq = 0.0;
        for (i, e) in entries.iter().enumerate() {
            if !stage.trains(e.group) {
                continue;
            }
            if let Some(gt) = grads.take(bound.var(i)) {
                sq += gt.data().iter().map(|v| v * v).sum::<f64>();
                updates.push((i, gt));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(self.diverged("non-finite gradient norm".into()));
        }
        self.max_grad_norm = self.max_grad_norm.max(norm);
        let clip = if self.cfg.clip_grad_norm > 0.0 && norm > self.cfg.clip_grad_norm {
            self.cfg.clip_grad_norm / norm
        } else {
            1.0
        };
        let lr = self.cfg.learning_rate;
        let entries = self.bundle.param_entries_mut();
        for (i, gt) in updates {
            let v = self.velocity[i].get_or_insert_with(|| vec![0.0; gt.len()]);
            let p = entries[i].tensor.data_mut();
            for ((pv, vv), gv) in p.iter_mut().zip(v.iter_mut()).zip(gt.data()) {
                *vv = MOMENTUM * *vv + clip * gv;
                *pv -= lr * *vv;
            }
        }
        self.step += 1;
        let rec = LossRecord {
            step: self.step,
            loss,
            grad_norm: norm,
        };
        self.losses.push(rec);
        let every = self.cfg.checkpoint_every;
        if (every > 0 && self.step % every == 0) || self.cfg.snapshot_steps.contains(&self.step) {
            self.snapshots.insert(self.step, self.bundle.clone());
        }
        Ok(rec)
    }

    /// Runs the remaining configured steps.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.cfg.steps {
            self.step_once()?;
            if self.step % 100 == 0 {
                log::debug!(
                    "{:?} step {} loss {:.4}",
                    self.cfg.stage,
                    self.step,
                    self.losses.last().map_or(f64::NAN, |r| r.loss)
                );
            }
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            bundle: self.bundle,
            losses: self.losses,
            snapshots: self.snapshots,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub losses: Vec<LossRecord>,
    /// Step → snapshot; always includes the final step.
    pub snapshots: BTreeMap<usize, ModelBundle>,
}

/// Trains `bundle` for `cfg.steps` steps on streamed scenes.
pub fn train_stage(bundle: ModelBundle, world: &World, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut st = TrainState::new(bundle, world, cfg.clone())?;
    st.run()?;
    let mut out = st.finish();
    out.snapshots.insert(cfg.steps, out.bundle.clone());
    Ok(out)
}

pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "step,loss,grad_norm")?;
    for r in losses {
        writeln!(buf, "{},{:e},{:e}", r.step, r.loss, r.grad_norm)?;
    }
    crate::io::write_bytes(path, &buf)
}
