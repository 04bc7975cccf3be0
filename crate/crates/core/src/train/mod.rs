//! The three-stage curriculum: independent component pretraining, joint
//! supervised training, and semi-supervised refinement.
//!
//! Every source of randomness (shuffles, augmentation, reparameterization
//! noise) is derived functionally from `(seed, stage, epoch, step, slot)`,
//! and per-sample tape evaluations are reduced in batch order, so equal
//! seeds give bit-identical parameter trajectories and metric logs no matter
//! how many worker threads run.

mod adam;
mod checkpoint;
mod log;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::{load_state, net_param_bytes, save_state, StateManifest};
pub use log::MetricsLog;

use crate::data::{apply_augment, draw_augment_params, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::heatmap::{decode_pose, PoseHeatmaps, NUM_JOINTS};
use crate::masking::REDUCE_FACTOR;
use crate::metrics::{aggregate, pck, pckh, EvalResult, JointOutcomes, DEFAULT_GROUPS};
use crate::nets::{Model, NetConfig};
use crate::objectives::{evaluate_objective, ElboBreakdown, ObjectiveKind, SampleNoise};
use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Epoch budgets and optimizer settings. The published budgets are the
/// defaults; `desk_scale` shrinks every budget uniformly so the curriculum's
/// proportions survive desk-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumConfig {
    pub epochs_recognizer: usize,
    /// Extra recognizer-only epochs producing the baseline comparison point.
    pub epochs_recognizer_baseline_extra: usize,
    pub epochs_image_vae: usize,
    pub epochs_pose_vae: usize,
    pub epochs_mask: usize,
    pub epochs_supervised: usize,
    /// Extra joint epochs producing the supervised comparison point; the
    /// semi-supervised stage continues from the pre-fork checkpoint.
    pub epochs_supervised_extra: usize,
    pub epochs_semisupervised: usize,
    /// Uniform multiplier on all epoch budgets (1.0 = published scale).
    pub desk_scale: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub semi_batch_annotated: usize,
    pub semi_batch_unannotated: usize,
    /// Per-epoch evaluations averaged into the reported score.
    pub eval_window: usize,
    pub lambda: f64,
    pub grad_clip: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            epochs_recognizer: 100,
            epochs_recognizer_baseline_extra: 100,
            epochs_image_vae: 200,
            epochs_pose_vae: 200,
            epochs_mask: 100,
            epochs_supervised: 50,
            epochs_supervised_extra: 50,
            epochs_semisupervised: 50,
            desk_scale: 0.1,
            learning_rate: 1e-3,
            batch_size: 16,
            semi_batch_annotated: 12,
            semi_batch_unannotated: 4,
            eval_window: 10,
            lambda: crate::objectives::DEFAULT_LAMBDA,
            grad_clip: 5.0,
            augment: true,
            seed: 0,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.semi_batch_annotated + self.semi_batch_unannotated != self.batch_size {
            return Err(Error::config(
                "semi-supervised batch composition must sum to batch_size",
            ));
        }
        if self.eval_window == 0 {
            return Err(Error::config("eval_window must be at least 1"));
        }
        if self.lambda < 0.0 {
            return Err(Error::config("lambda must be nonnegative"));
        }
        if !(self.desk_scale > 0.0) {
            return Err(Error::config("desk_scale must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }

    /// An epoch budget after desk scaling (may be zero).
    pub fn effective(&self, raw: usize) -> usize {
        (raw as f64 * self.desk_scale).round() as usize
    }

    /// Evaluation window clamped to the stage budget.
    pub fn effective_window(&self, stage_epochs: usize) -> usize {
        self.eval_window.min(stage_epochs).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    PretrainMask,
    PretrainRecognizer,
    PretrainPoseVae,
    PretrainImageVae,
    BaselineExtra,
    Supervised,
    SupervisedExtra,
    Semisupervised,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainMask => "pretrain-mask",
            Stage::PretrainRecognizer => "pretrain-recognizer",
            Stage::PretrainPoseVae => "pretrain-pose-vae",
            Stage::PretrainImageVae => "pretrain-image-vae",
            Stage::BaselineExtra => "baseline-extra",
            Stage::Supervised => "supervised",
            Stage::SupervisedExtra => "supervised-extra",
            Stage::Semisupervised => "semisupervised",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::PretrainMask => 1,
            Stage::PretrainRecognizer => 2,
            Stage::PretrainPoseVae => 3,
            Stage::PretrainImageVae => 4,
            Stage::BaselineExtra => 5,
            Stage::Supervised => 6,
            Stage::SupervisedExtra => 7,
            Stage::Semisupervised => 8,
        }
    }

    /// Networks updated during this stage (store order: recognizer,
    /// appearance, scene, primitive, image generator, pose generator, mask
    /// estimator). The mask estimator only ever trains in its own
    /// pretraining; its parameters and all frozen variances stay
    /// bit-identical afterwards.
    fn trainable(self) -> [bool; 7] {
        match self {
            Stage::PretrainMask => [false, false, false, false, false, false, true],
            Stage::PretrainRecognizer | Stage::BaselineExtra => {
                [true, false, false, false, false, false, false]
            }
            Stage::PretrainPoseVae => [false, false, false, true, false, true, false],
            Stage::PretrainImageVae => [false, true, true, false, true, false, false],
            Stage::Supervised | Stage::SupervisedExtra | Stage::Semisupervised => {
                [true, true, true, true, true, true, false]
            }
        }
    }

    fn evaluates_per_epoch(self) -> bool {
        matches!(
            self,
            Stage::BaselineExtra
                | Stage::Supervised
                | Stage::SupervisedExtra
                | Stage::Semisupervised
        )
    }
}

/// Per-epoch evaluation snapshot kept in the state and the checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochEval {
    pub stage: String,
    pub epoch: usize,
    pub metric: String,
    pub result: EvalResult,
}

/// First/last epoch mean loss of one training stage (the weak
/// monotone-trend check: last < first).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubnetProgress {
    pub stage: String,
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

/// Full training state: model, optimizer moments, seed, completed epochs per
/// stage, evaluation history, and pretraining progress statistics.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model<f32>,
    pub adam: Vec<AdamState>,
    pub seed: u64,
    pub completed: BTreeMap<String, usize>,
    pub history: Vec<EpochEval>,
    pub progress: Vec<SubnetProgress>,
}

impl TrainState {
    pub fn init(net_config: &NetConfig, seed: u64) -> Result<Self> {
        let model = Model::init(net_config, seed)?;
        let adam = model.stores().iter().map(|s| AdamState::new(s)).collect();
        Ok(TrainState {
            model,
            adam,
            seed,
            completed: BTreeMap::new(),
            history: Vec::new(),
            progress: Vec::new(),
        })
    }

    /// Last-window mean of the per-epoch evaluations of one stage.
    pub fn evaluate_last_epochs(&self, stage: Stage, window: usize) -> Result<EvalResult> {
        let entries: Vec<&EpochEval> = self
            .history
            .iter()
            .filter(|e| e.stage == stage.name())
            .collect();
        if entries.len() < window || window == 0 {
            return Err(Error::contract(format!(
                "stage `{}` has {} evaluation epochs, window {window} requested",
                stage.name(),
                entries.len()
            )));
        }
        let tail: Vec<EvalResult> = entries[entries.len() - window..]
            .iter()
            .map(|e| e.result.clone())
            .collect();
        EvalResult::mean_of(&tail)
    }
}

/// Pose-accuracy metric used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "metric", content = "tau")]
pub enum MetricKind {
    Pck(f32),
    Pckh(f32),
}

impl MetricKind {
    pub fn label(&self) -> String {
        match self {
            MetricKind::Pck(tau) => format!("pck@{tau}"),
            MetricKind::Pckh(tau) => format!("pckh@{tau}"),
        }
    }
}

/// Training data resolved into memory.
pub struct TrainData {
    pub train: Vec<Sample>,
    pub annotated: Vec<usize>,
    pub unannotated: Vec<usize>,
    pub test: Vec<Sample>,
}

impl TrainData {
    pub fn from_dataset(dataset: &Dataset) -> Result<Self> {
        let train = dataset.load_split(Split::Train)?;
        let test = dataset.load_split(Split::Test)?;
        let train_indices = dataset.indices(Split::Train);
        let mut annotated = Vec::new();
        let mut unannotated = Vec::new();
        for (local, &global) in train_indices.iter().enumerate() {
            if dataset.manifest.records[global].annotated {
                annotated.push(local);
            } else {
                unannotated.push(local);
            }
        }
        Ok(TrainData {
            train,
            annotated,
            unannotated,
            test,
        })
    }
}

fn mix(h: u64, t: u64) -> u64 {
    let mut z = h ^ t.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn rng_for(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0xA076_1D64_78BD_642F;
    for &t in tags {
        h = mix(h, t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// One prepared sample for one optimizer step.
struct StepItem {
    image: ArrayD<f32>,
    pose: Option<PoseHeatmaps>,
    mask_gt: Option<ArrayD<f32>>,
    kind: ObjectiveKind,
    noise: SampleNoise<f32>,
}

/// Evaluates the recognizer on a sample set: decode the mean heatmaps, map
/// the argmax cells back to image pixels, score against the annotations.
pub fn evaluate_model(
    model: &Model<f32>,
    samples: &[Sample],
    metric: MetricKind,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate_model: empty sample set"));
    }
    let factor = REDUCE_FACTOR as f32;
    let outcomes: Vec<Result<JointOutcomes>> = samples
        .par_iter()
        .map(|sample| -> Result<JointOutcomes> {
            let gt = sample
                .pose
                .as_ref()
                .ok_or_else(|| Error::contract("evaluation sample lacks a pose"))?;
            let q = model
                .pose_recognizer
                .recognize(&sample.image.clone().into_dyn(), &model.config)?;
            let (hs, ws) = model.config.heatmap_size();
            let grid = q
                .mean()
                .clone()
                .into_shape_with_order((NUM_JOINTS, hs, ws))
                .map_err(|e| Error::contract(format!("bad recognizer output shape: {e}")))?;
            let heatmaps = PoseHeatmaps {
                grid,
                visibility: [true; NUM_JOINTS],
            };
            let pred = decode_pose(&heatmaps).rescale(factor);
            match metric {
                MetricKind::Pck(tau) => pck(&pred, gt, sample.person_bbox, tau),
                MetricKind::Pckh(tau) => {
                    let head = sample
                        .head_bbox
                        .ok_or_else(|| Error::contract("sample lacks a head bbox for PCKh"))?;
                    pckh(&pred, gt, head, tau)
                }
            }
        })
        .collect();
    let outcomes: Vec<JointOutcomes> = outcomes.into_iter().collect::<Result<_>>()?;
    aggregate(outcomes, &DEFAULT_GROUPS)
}

/// Drives the curriculum over one dataset and writes checkpoints and logs
/// under an output directory.
pub struct Trainer<'a> {
    pub net_config: NetConfig,
    pub curriculum: CurriculumConfig,
    pub data: &'a TrainData,
    pub out_dir: PathBuf,
    pub metric: MetricKind,
    pub config_hash: String,
}

/// Result of one curriculum command: the state to carry forward plus the
/// last-window evaluation of the comparison fork, when one ran.
pub struct StageOutcome {
    pub state: TrainState,
    pub window_eval: Option<EvalResult>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        net_config: NetConfig,
        curriculum: CurriculumConfig,
        data: &'a TrainData,
        out_dir: impl Into<PathBuf>,
        config_hash: String,
    ) -> Result<Self> {
        net_config.validate()?;
        curriculum.validate()?;
        Ok(Trainer {
            net_config,
            curriculum,
            data,
            out_dir: out_dir.into(),
            metric: MetricKind::Pck(0.2),
            config_hash,
        })
    }

    pub fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.out_dir.join("checkpoints").join(name)
    }

    fn open_log(&self) -> Result<MetricsLog> {
        MetricsLog::create(&self.out_dir.join("logs").join("train.jsonl"))
    }

    fn save(&self, state: &TrainState, dir_name: &str, stage: &str) -> Result<()> {
        save_state(
            &self.checkpoint_dir(dir_name),
            state,
            stage,
            &self.config_hash,
        )
    }

    /// Curriculum step 1: independent pretraining of every component, then
    /// the recognizer-only baseline fork.
    pub fn pretrain(&self) -> Result<StageOutcome> {
        if self.data.annotated.is_empty() {
            return Err(Error::contract("pretraining needs annotated samples"));
        }
        let mut log = self.open_log()?;
        let mut state = TrainState::init(&self.net_config, self.curriculum.seed)?;
        let c = self.curriculum.clone();
        for (stage, epochs) in [
            (Stage::PretrainMask, c.effective(c.epochs_mask)),
            (Stage::PretrainRecognizer, c.effective(c.epochs_recognizer)),
            (Stage::PretrainPoseVae, c.effective(c.epochs_pose_vae)),
            (Stage::PretrainImageVae, c.effective(c.epochs_image_vae)),
        ] {
            self.run_stage(&mut state, stage, epochs, &mut log)?;
            // Per-subnet checkpoint after each component finishes.
            self.save(&state, stage.name(), stage.name())?;
        }
        self.save(&state, "pretrain", "pretrain")?;

        // Step 1(b): the baseline comparison fork. Stage 2 starts from the
        // pre-fork checkpoint.
        let extra = c.effective(c.epochs_recognizer_baseline_extra);
        let mut window_eval = None;
        if extra > 0 {
            let mut fork = state.clone();
            self.run_stage(&mut fork, Stage::BaselineExtra, extra, &mut log)?;
            let window = c.effective_window(extra);
            window_eval = Some(fork.evaluate_last_epochs(Stage::BaselineExtra, window)?);
            self.save(&fork, "baseline", Stage::BaselineExtra.name())?;
        }
        log.flush()?;
        Ok(StageOutcome { state, window_eval })
    }

    /// Curriculum step 2: joint supervised training (mask estimator frozen),
    /// then the supervised comparison fork.
    pub fn supervised(&self, mut state: TrainState) -> Result<StageOutcome> {
        let mut log = self.open_log()?;
        let c = self.curriculum.clone();
        let epochs = c.effective(c.epochs_supervised);
        self.run_stage(&mut state, Stage::Supervised, epochs, &mut log)?;
        // Step 2(a): preserved for stage 3.
        self.save(&state, "supervised", Stage::Supervised.name())?;

        let extra = c.effective(c.epochs_supervised_extra);
        let mut window_eval = None;
        if extra > 0 {
            let mut fork = state.clone();
            self.run_stage(&mut fork, Stage::SupervisedExtra, extra, &mut log)?;
            let window = c.effective_window(extra);
            window_eval = Some(fork.evaluate_last_epochs(Stage::SupervisedExtra, window)?);
            self.save(&fork, "supervised-extra", Stage::SupervisedExtra.name())?;
        }
        log.flush()?;
        Ok(StageOutcome { state, window_eval })
    }

    /// Curriculum step 3: semi-supervised training with the configured batch
    /// composition, starting from the step 2(a) checkpoint.
    pub fn semisupervised(&self, mut state: TrainState) -> Result<StageOutcome> {
        let mut log = self.open_log()?;
        let c = self.curriculum.clone();
        let epochs = c.effective(c.epochs_semisupervised);
        self.run_stage(&mut state, Stage::Semisupervised, epochs, &mut log)?;
        let window_eval = if epochs > 0 {
            let window = c.effective_window(epochs);
            Some(state.evaluate_last_epochs(Stage::Semisupervised, window)?)
        } else {
            None
        };
        self.save(&state, "semi", Stage::Semisupervised.name())?;
        log.flush()?;
        Ok(StageOutcome { state, window_eval })
    }

    /// Batch-composition sweep: re-runs the semi-supervised stage from the
    /// same starting state once per composition.
    pub fn sweep_compositions(
        &self,
        base: &TrainState,
        compositions: &[(usize, usize)],
    ) -> Result<Vec<((usize, usize), EvalResult)>> {
        let mut rows = Vec::new();
        for &(annotated, unannotated) in compositions {
            let mut sub = Trainer {
                net_config: self.net_config.clone(),
                curriculum: self.curriculum.clone(),
                data: self.data,
                out_dir: self.out_dir.clone(),
                metric: self.metric,
                config_hash: self.config_hash.clone(),
            };
            sub.curriculum.semi_batch_annotated = annotated;
            sub.curriculum.semi_batch_unannotated = unannotated;
            sub.curriculum.batch_size = annotated + unannotated;
            sub.curriculum.validate()?;
            let outcome = sub.semisupervised(base.clone())?;
            let eval = outcome.window_eval.ok_or_else(|| {
                Error::contract("composition sweep needs at least one semi-supervised epoch")
            })?;
            let dir_name = format!("sweep-{annotated}+{unannotated}");
            self.save(&outcome.state, &dir_name, "sweep")?;
            rows.push(((annotated, unannotated), eval));
        }
        Ok(rows)
    }

    pub fn run_stage(
        &self,
        state: &mut TrainState,
        stage: Stage,
        epochs: usize,
        log: &mut MetricsLog,
    ) -> Result<()> {
        let start = *state.completed.get(stage.name()).unwrap_or(&0);
        if stage == Stage::Semisupervised && self.data.unannotated.is_empty() && epochs > start {
            eprintln!(
                "warning: unannotated pool is empty; the semi-supervised stage falls back to supervised batches"
            );
        }
        let mut first_epoch_loss = None;
        let mut last_epoch_loss = None;
        for epoch in start..epochs {
            let mut epoch_loss = 0.0;
            let mut steps = 0usize;
            for (step, items) in self.stage_batches(stage, epoch)?.into_iter().enumerate() {
                let (mean_objective, _norm) =
                    self.run_step(state, stage, epoch, step, items, log)?;
                epoch_loss += -mean_objective;
                steps += 1;
            }
            if steps > 0 {
                let mean_loss = epoch_loss / steps as f64;
                if epoch == 0 {
                    first_epoch_loss = Some(mean_loss);
                }
                last_epoch_loss = Some(mean_loss);
            }
            if stage.evaluates_per_epoch() && !self.data.test.is_empty() {
                let result = evaluate_model(&state.model, &self.data.test, self.metric)?;
                log.eval(stage.name(), epoch, &self.metric.label(), &result)?;
                state.history.push(EpochEval {
                    stage: stage.name().to_string(),
                    epoch,
                    metric: self.metric.label(),
                    result,
                });
            }
            state.completed.insert(stage.name().to_string(), epoch + 1);
        }
        if let (Some(first), Some(last)) = (first_epoch_loss, last_epoch_loss) {
            state.progress.push(SubnetProgress {
                stage: stage.name().to_string(),
                first_epoch_loss: first,
                last_epoch_loss: last,
            });
        }
        Ok(())
    }

    /// Assembles the deterministic batch plan for one epoch of a stage.
    fn stage_batches(&self, stage: Stage, epoch: usize) -> Result<Vec<Vec<StepItem>>> {
        let c = &self.curriculum;
        let seed = c.seed;
        let (hs, ws) = self.net_config.heatmap_size();

        let prepare = |local_idx: usize,
                       step: usize,
                       slot: usize,
                       kind: ObjectiveKind,
                       want_mask: bool|
         -> Result<StepItem> {
            let sample = &self.data.train[local_idx];
            let sample = if c.augment {
                let mut rng = rng_for(
                    seed,
                    &[stage.tag(), epoch as u64, step as u64, slot as u64, 11],
                );
                apply_augment(sample, &draw_augment_params(&mut rng))
            } else {
                sample.clone()
            };
            let pose = match kind {
                ObjectiveKind::Unsupervised => None,
                _ => Some(sample.heatmaps(hs, ws)?),
            };
            let mask_gt = if want_mask {
                let mask = sample
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::contract("mask pretraining needs ground-truth masks"))?;
                let full = mask.clone().into_dyn().insert_axis(ndarray::Axis(0));
                let reduced = crate::masking::reduce_image(&full)?;
                Some(reduced.index_axis(ndarray::Axis(0), 0).to_owned().into_dyn())
            } else {
                None
            };
            let mut noise_rng = rng_for(
                seed,
                &[stage.tag(), epoch as u64, step as u64, slot as u64, 13],
            );
            Ok(StepItem {
                image: sample.image.clone().into_dyn(),
                pose,
                mask_gt,
                kind,
                noise: SampleNoise::draw(&self.net_config, &mut noise_rng),
            })
        };

        let mut batches = Vec::new();
        match stage {
            Stage::Semisupervised if !self.data.unannotated.is_empty() => {
                let mut ann = self.data.annotated.clone();
                let mut unann = self.data.unannotated.clone();
                ann.shuffle(&mut rng_for(seed, &[stage.tag(), epoch as u64, 17]));
                unann.shuffle(&mut rng_for(seed, &[stage.tag(), epoch as u64, 19]));
                let total = self.data.train.len();
                let steps = total.div_ceil(c.batch_size);
                let (mut ai, mut ui) = (0usize, 0usize);
                for step in 0..steps {
                    let mut items = Vec::with_capacity(c.batch_size);
                    let ann_take = c.semi_batch_annotated.min(ann.len());
                    for slot in 0..ann_take {
                        let idx = ann[ai % ann.len()];
                        ai += 1;
                        items.push(prepare(
                            idx,
                            step,
                            slot,
                            ObjectiveKind::SupervisedLambda(c.lambda),
                            false,
                        )?);
                    }
                    for slot in 0..c.semi_batch_unannotated {
                        let idx = unann[ui % unann.len()];
                        ui += 1;
                        items.push(prepare(
                            idx,
                            step,
                            ann_take + slot,
                            ObjectiveKind::Unsupervised,
                            false,
                        )?);
                    }
                    batches.push(items);
                }
            }
            _ => {
                let kind = match stage {
                    Stage::PretrainMask => None,
                    Stage::PretrainRecognizer | Stage::BaselineExtra => {
                        Some(ObjectiveKind::RecognizerLoss)
                    }
                    Stage::PretrainPoseVae => Some(ObjectiveKind::PoseVae),
                    Stage::PretrainImageVae => Some(ObjectiveKind::ImageVae),
                    Stage::Supervised | Stage::SupervisedExtra | Stage::Semisupervised => {
                        Some(ObjectiveKind::SupervisedLambda(c.lambda))
                    }
                };
                let mut pool = self.data.annotated.clone();
                pool.shuffle(&mut rng_for(seed, &[stage.tag(), epoch as u64, 17]));
                for (step, chunk) in pool.chunks(c.batch_size).enumerate() {
                    let mut items = Vec::with_capacity(chunk.len());
                    for (slot, &idx) in chunk.iter().enumerate() {
                        match kind {
                            // Mask items carry a placeholder kind; run_step
                            // dispatches on the stage, not the kind.
                            None => items.push(prepare(idx, step, slot, ObjectiveKind::PoseVae, true)?),
                            Some(kind) => items.push(prepare(idx, step, slot, kind, false)?),
                        }
                    }
                    batches.push(items);
                }
            }
        }
        Ok(batches)
    }

    /// One optimizer step: parallel per-sample evaluation, fixed-order
    /// reduction, global-norm clipping, Adam update. Returns the mean
    /// objective value (maximization orientation) and the pre-clip norm.
    fn run_step(
        &self,
        state: &mut TrainState,
        stage: Stage,
        epoch: usize,
        step: usize,
        items: Vec<StepItem>,
        log: &mut MetricsLog,
    ) -> Result<(f64, f32)> {
        let c = &self.curriculum;
        let trainable = stage.trainable();
        let batch = items.len();
        if batch == 0 {
            return Err(Error::contract("empty training batch"));
        }
        let model = &state.model;

        if stage == Stage::PretrainMask {
            let evals: Vec<Result<(f64, Option<Vec<ArrayD<f32>>>)>> = items
                .par_iter()
                .map(|item| {
                    crate::objectives::mask_mse(
                        model,
                        &item.image,
                        item.pose.as_ref().unwrap(),
                        item.mask_gt.as_ref().unwrap(),
                        true,
                    )
                })
                .collect();
            let mut mse_sum = 0.0;
            let mut grad_acc: Option<Vec<ArrayD<f32>>> = None;
            for eval in evals {
                let (mse, grads) = eval?;
                if !mse.is_finite() {
                    return Err(Error::Diverged {
                        stage: stage.name().to_string(),
                        step: step as u64,
                        term: "mask_mse".to_string(),
                    });
                }
                mse_sum += mse;
                let grads = grads.unwrap();
                match &mut grad_acc {
                    None => grad_acc = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            *a += &g;
                        }
                    }
                }
            }
            let scale = 1.0 / batch as f32;
            let mut grads = grad_acc.unwrap();
            for g in grads.iter_mut() {
                g.mapv_inplace(|x| x * scale);
            }
            let mut wrapped = vec![grads];
            let norm = clip_global_norm(&mut wrapped, c.grad_clip as f32);
            state.adam[6].step(
                state.model.stores_mut()[6],
                &wrapped[0],
                c.learning_rate as f32,
            );
            let mean_mse = mse_sum / batch as f64;
            log.mask_step(stage.name(), epoch, step, batch, mean_mse, norm)?;
            // The stage loop expects a maximization-oriented value.
            return Ok((-mean_mse, norm));
        }

        let evals: Vec<Result<crate::objectives::Evaluated<f32>>> = items
            .par_iter()
            .map(|item| {
                evaluate_objective(
                    model,
                    item.kind,
                    Some(&item.image),
                    item.pose.as_ref(),
                    &item.noise,
                    trainable,
                    true,
                    false,
                )
            })
            .collect();

        let mut mean = ElboBreakdown::zero();
        let mut grad_acc: Option<Vec<Vec<ArrayD<f32>>>> = None;
        for eval in evals {
            let eval = eval?;
            if let Some(term) = eval.breakdown.nonfinite_term() {
                return Err(Error::Diverged {
                    stage: stage.name().to_string(),
                    step: step as u64,
                    term: term.to_string(),
                });
            }
            mean.recon_image += eval.breakdown.recon_image;
            mean.pose_likelihood += eval.breakdown.pose_likelihood;
            mean.recognizer_entropy += eval.breakdown.recognizer_entropy;
            mean.kl_appearance += eval.breakdown.kl_appearance;
            mean.kl_scene += eval.breakdown.kl_scene;
            mean.kl_primitive += eval.breakdown.kl_primitive;
            mean.lambda_term += eval.breakdown.lambda_term;
            mean.total += eval.breakdown.total;
            let grads = eval.grads.unwrap();
            match &mut grad_acc {
                None => grad_acc = Some(grads),
                Some(acc) => {
                    for (net_acc, net_g) in acc.iter_mut().zip(grads) {
                        for (a, g) in net_acc.iter_mut().zip(net_g) {
                            *a += &g;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / batch as f64;
        mean.recon_image *= inv;
        mean.pose_likelihood *= inv;
        mean.recognizer_entropy *= inv;
        mean.kl_appearance *= inv;
        mean.kl_scene *= inv;
        mean.kl_primitive *= inv;
        mean.lambda_term *= inv;
        mean.total *= inv;

        // Maximization objective -> descent gradients are the negated means.
        let mut grads = grad_acc.unwrap();
        let scale = -1.0 / batch as f32;
        for net in grads.iter_mut() {
            for g in net.iter_mut() {
                g.mapv_inplace(|x| x * scale);
            }
        }
        let norm = clip_global_norm(&mut grads, c.grad_clip as f32);
        let lr = c.learning_rate as f32;
        {
            let stores = state.model.stores_mut();
            for ((store, adam), (net_grads, &is_trainable)) in stores
                .into_iter()
                .zip(state.adam.iter_mut())
                .zip(grads.iter().zip(trainable.iter()))
            {
                if is_trainable {
                    adam.step(store, net_grads, lr);
                }
            }
        }
        log.step(stage.name(), epoch, step, batch, &mean, norm)?;
        Ok((mean.total, norm))
    }
}

pub const SWEEP_DEFAULT_COMPOSITIONS: [(usize, usize); 5] =
    [(32, 96), (48, 80), (64, 64), (80, 48), (96, 32)];

/// Scales a published batch composition down to a desk-scale batch size,
/// preserving the annotated fraction.
pub fn scale_composition(composition: (usize, usize), batch_size: usize) -> (usize, usize) {
    let total = (composition.0 + composition.1) as f64;
    let annotated = ((composition.0 as f64 / total) * batch_size as f64).round() as usize;
    let annotated = annotated.min(batch_size);
    (annotated, batch_size - annotated)
}

/// SHA-256 hex digest of a canonical config serialization; recorded in every
/// checkpoint manifest.
pub fn config_hash(net: &NetConfig, curriculum: &CurriculumConfig) -> String {
    use sha2::{Digest, Sha256};
    let blob = serde_json::to_string(&(net, curriculum)).unwrap_or_default();
    let digest = Sha256::digest(blob.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[allow(unused)]
fn _path_is_used(_: &Path) {}
