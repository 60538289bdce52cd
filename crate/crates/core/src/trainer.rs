//! Curriculum GRPO training loop for the toy refocus policy.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Scene;
use crate::error::{Error, Result};
use crate::grpo::{group_advantages, group_objective, ClipConfig, Group};
use crate::metrics::{classification_report, detection_report, ClassificationReport, DetectionReport, EvalRecord};
use crate::policy::{
    accumulate_kl_grad, accumulate_logp_grad, rollout_logp, sample_rollout, step_distributions, PolicyConfig,
    PolicyParams, RefocusState, Rollout,
};
use crate::rewards::{score_output, NegativeScoring, RewardBreakdown, RewardWeights, StageId};
use crate::transcript::serialize_transcript;

/// Slack on the plateau comparison so a gain of exactly `τ` (up to rounding) counts as flat.
const PLATEAU_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Minimum moving-average gain, in normalized reward units, that counts as progress.
    pub plateau_tolerance: f64,
    pub patience: usize,
    pub window: usize,
    pub max_epochs_per_stage: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            plateau_tolerance: 0.01,
            patience: 2,
            window: 2,
            max_epochs_per_stage: 6,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_tolerance >= 0.0 && self.plateau_tolerance.is_finite()) {
            return Err(Error::Config("plateau tolerance must be finite and >= 0".into()));
        }
        if self.patience == 0 || self.window == 0 || self.max_epochs_per_stage == 0 {
            return Err(Error::Config(
                "patience, window and max epochs per stage must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// True once the moving average has gained at most `τ` for `patience` consecutive
/// epochs, or the stage has lasted `max_epochs_per_stage` epochs.
pub fn plateau_detect(history: &[f64], cfg: &CurriculumConfig) -> bool {
    if history.len() >= cfg.max_epochs_per_stage {
        return true;
    }
    if history.len() < cfg.window {
        return false;
    }
    let averages: Vec<f64> = history
        .windows(cfg.window)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    let gains: Vec<f64> = averages.windows(2).map(|w| w[1] - w[0]).collect();
    gains.len() >= cfg.patience
        && gains[gains.len() - cfg.patience..]
            .iter()
            .all(|&g| g <= cfg.plateau_tolerance + PLATEAU_EPS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    /// Linear decay of the learning rate to zero over the run.
    pub lr_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    /// Gradient steps per sampled batch, all against the batch-start snapshot.
    pub inner_steps: usize,
    pub optimizer: Optimizer,
    pub clip: ClipConfig,
    pub seed: u64,
    pub no_curriculum: bool,
    pub weights: RewardWeights,
    pub negatives: NegativeScoring,
    pub policy: PolicyConfig,
    /// Half-width of the uniform initialization.
    pub init_scale: f64,
    /// Evaluate on the held-out set every this many epochs (0 disables).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 4,
            temperature: 1.0,
            learning_rate: 0.2,
            lr_decay: true,
            epochs: 30,
            batch_size: 8,
            inner_steps: 1,
            optimizer: Optimizer::Sgd,
            clip: ClipConfig::default(),
            seed: 0,
            no_curriculum: false,
            weights: RewardWeights::default(),
            negatives: NegativeScoring::default(),
            policy: PolicyConfig::default(),
            init_scale: 0.01,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group size {} < 2", self.group_size)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("training temperature must be > 0".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.inner_steps == 0 {
            return Err(Error::Config("batch size and inner steps must be >= 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init scale must be finite and >= 0".into()));
        }
        self.clip.validate()?;
        self.weights.validate()?;
        self.policy.validate()
    }

    /// Initial parameters for this configuration's seed.
    pub fn initial_params(&self) -> PolicyParams {
        let mut p = PolicyParams::random(self.policy, derive_seed(&[self.seed, 0x1417]), self.init_scale);
        p.temperature = self.temperature;
        p
    }
}

/// splitmix64 over the parts, for independent per-scene streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: StageId,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub loss: f64,
    pub frac_clipped: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: StageId,
    /// Mean total under the active stage.
    pub mean_reward: f64,
    pub mean_fmt: f64,
    pub mean_acc: f64,
    pub mean_cat: f64,
    pub mean_iou: f64,
    /// Mean total as if Stage 3 were active, logged from the first epoch.
    pub mean_reward_stage3: f64,
    pub mean_loss: f64,
    pub frac_clipped: f64,
    pub learning_rate: f64,
    pub plateau: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub epoch: usize,
    pub binary_acc: f64,
    pub category_acc: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: usize,
    pub no_curriculum: bool,
    pub final_stage: StageId,
    /// `(epoch, stage)` for the first epoch trained under each stage.
    pub stage_starts: Vec<(usize, StageId)>,
    pub final_mean_reward: f64,
    pub final_mean_reward_stage3: f64,
}

impl TrainLog {
    /// Stage per epoch.
    pub fn stage_timeline(&self) -> Vec<StageId> {
        self.epochs.iter().map(|e| e.stage).collect()
    }

    pub fn summary(&self, no_curriculum: bool) -> TrainSummary {
        let mut stage_starts: Vec<(usize, StageId)> = Vec::new();
        for e in &self.epochs {
            if stage_starts.last().is_none_or(|(_, s)| *s != e.stage) {
                stage_starts.push((e.epoch, e.stage));
            }
        }
        let last = self.epochs.last();
        TrainSummary {
            epochs: self.epochs.len(),
            steps: self.steps.len(),
            no_curriculum,
            final_stage: last.map_or(StageId::Stage1, |e| e.stage),
            stage_starts,
            final_mean_reward: last.map_or(0.0, |e| e.mean_reward),
            final_mean_reward_stage3: last.map_or(0.0, |e| e.mean_reward_stage3),
        }
    }

    /// Writes `train_log.jsonl` (per epoch), `trace.jsonl` (per step) and `summary.json`.
    pub fn write(&self, dir: &Path, no_curriculum: bool) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("train_log.jsonl"), &self.epochs)?;
        write_jsonl(&dir.join("trace.jsonl"), &self.steps)?;
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&self.summary(no_curriculum)).expect("summary serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Rollouts and scores for one scene in a batch.
struct SceneGroup {
    scene: usize,
    rollouts: Vec<Rollout>,
    scores: Vec<RewardBreakdown>,
    stage3: Vec<f64>,
}

fn sample_group(
    snapshot: &PolicyParams,
    scene: &Scene,
    state: &RefocusState,
    stage: StageId,
    cfg: &TrainConfig,
    seed: u64,
) -> (Vec<Rollout>, Vec<RewardBreakdown>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    let mut scores = Vec::with_capacity(cfg.group_size);
    let mut stage3 = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let r = sample_rollout(snapshot, state, &mut rng);
        let b = score_output(
            &serialize_transcript(&r.transcript),
            &scene.gt,
            stage,
            &cfg.weights,
            cfg.negatives,
        );
        stage3.push(b.total_at(StageId::Stage3, &cfg.weights));
        scores.push(b);
        rollouts.push(r);
    }
    (rollouts, scores, stage3)
}

struct GroupUpdate {
    grad: PolicyParams,
    loss: f64,
    frac_clipped: f64,
}

/// Gradient of the group loss with respect to the current parameters.
fn group_update(
    params: &PolicyParams,
    reference: &PolicyParams,
    group: &SceneGroup,
    state: &RefocusState,
    cfg: &TrainConfig,
) -> Result<GroupUpdate> {
    let rewards: Vec<f64> = group.scores.iter().map(|s| s.total).collect();
    let adv = group_advantages(&rewards, cfg.clip.std_floor)?;
    let mut logp_new = Vec::with_capacity(rewards.len());
    for r in &group.rollouts {
        logp_new.push(rollout_logp(params, &r.choices, state)?);
    }
    let use_kl = cfg.clip.kl_weight() > 0.0;
    let ref_dists = if use_kl {
        let mut d = Vec::with_capacity(rewards.len());
        for r in &group.rollouts {
            d.push((
                step_distributions(params, &r.choices, state)?,
                step_distributions(reference, &r.choices, state)?,
            ));
        }
        Some(d)
    } else {
        None
    };
    let g = Group {
        rewards,
        logp_new,
        logp_old: group.rollouts.iter().map(|r| r.logp).collect(),
        ref_dists,
    };
    let obj = group_objective(&g, &adv, &cfg.clip)?;
    let n = g.size() as f64;
    let mut grad = params.zeros_like();
    for (r, &c) in group.rollouts.iter().zip(&obj.grad_coeff) {
        if c != 0.0 {
            accumulate_logp_grad(params, &r.choices, state, c / n, &mut grad)?;
        }
        if use_kl {
            accumulate_kl_grad(params, reference, &r.choices, state, cfg.clip.kl_weight() / n, &mut grad)?;
        }
    }
    Ok(GroupUpdate {
        grad,
        loss: obj.loss,
        frac_clipped: obj.frac_clipped,
    })
}

struct Adam {
    m: PolicyParams,
    v: PolicyParams,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let heads = params.heads_mut().into_iter().zip(grad.heads());
        for ((p, g), (m, v)) in heads.zip(self.m.heads_mut().into_iter().zip(self.v.heads_mut())) {
            for i in 0..p.weights.len() {
                let gi = g.weights[i];
                m.weights[i] = Self::B1 * m.weights[i] + (1.0 - Self::B1) * gi;
                v.weights[i] = Self::B2 * v.weights[i] + (1.0 - Self::B2) * gi * gi;
                let mh = m.weights[i] / c1;
                let vh = v.weights[i] / c2;
                p.weights[i] -= lr * mh / (vh.sqrt() + Self::EPS);
            }
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    mean(&v.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>()).sqrt()
}

/// Runs curriculum GRPO from `params`. Deterministic in the configuration seed,
/// independent of the worker count.
pub fn train(
    params: &PolicyParams,
    dataset: &[Scene],
    heldout: Option<&[Scene]>,
    cfg: &TrainConfig,
    curriculum: &CurriculumConfig,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    curriculum.validate()?;
    params.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if params.config != cfg.policy {
        return Err(Error::Config("policy shape differs from the training configuration".into()));
    }
    let mut params = params.clone();
    params.temperature = cfg.temperature;
    let reference = params.clone();
    let states: Vec<RefocusState> = dataset
        .par_iter()
        .map(|s| RefocusState::initial(s, &params.config))
        .collect();

    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch).max(1);
    let mut adam = Adam {
        m: params.zeros_like(),
        v: params.zeros_like(),
        t: 0,
    };
    let mut stage = if cfg.no_curriculum { StageId::Stage3 } else { StageId::Stage1 };
    let mut stage_history: Vec<f64> = Vec::new();
    let mut log = TrainLog::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, 0x5EED])));
        let mut all_scores: Vec<RewardBreakdown> = Vec::new();
        let mut all_stage3: Vec<f64> = Vec::new();
        let (mut losses, mut clips) = (Vec::new(), Vec::new());
        let mut lr = cfg.learning_rate;

        for batch in order.chunks(cfg.batch_size) {
            lr = if cfg.lr_decay {
                cfg.learning_rate * (1.0 - step as f64 / total_steps as f64)
            } else {
                cfg.learning_rate
            };
            let snapshot = params.clone();
            let groups: Vec<SceneGroup> = batch
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(&[cfg.seed, epoch as u64, i as u64]);
                    let (rollouts, scores, stage3) = sample_group(&snapshot, &dataset[i], &states[i], stage, cfg, seed);
                    SceneGroup {
                        scene: i,
                        rollouts,
                        scores,
                        stage3,
                    }
                })
                .collect();

            let mut batch_loss = 0.0;
            let mut batch_clip = 0.0;
            for inner in 0..cfg.inner_steps {
                let updates: Vec<Result<GroupUpdate>> = groups
                    .par_iter()
                    .map(|g| group_update(&params, &reference, g, &states[g.scene], cfg))
                    .collect();
                let mut grad = params.zeros_like();
                let (mut loss, mut clip) = (0.0, 0.0);
                for u in updates {
                    let u = u?;
                    grad.axpy(1.0, &u.grad);
                    loss += u.loss;
                    clip += u.frac_clipped;
                }
                let n = groups.len() as f64;
                grad.scale(1.0 / n);
                loss /= n;
                clip /= n;
                if !loss.is_finite() || !grad.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch} step {step} inner {inner}: loss {loss}"
                    )));
                }
                if inner == 0 {
                    batch_loss = loss;
                    batch_clip = clip;
                }
                if lr > 0.0 {
                    match cfg.optimizer {
                        Optimizer::Sgd => params.axpy(-lr, &grad),
                        Optimizer::Adam => adam.step(&mut params, &grad, lr),
                    }
                }
            }

            let rewards: Vec<f64> = groups.iter().flat_map(|g| g.scores.iter().map(|s| s.total)).collect();
            log.steps.push(StepRecord {
                step,
                stage,
                mean_reward: mean(&rewards),
                std_reward: population_std(&rewards),
                loss: batch_loss,
                frac_clipped: batch_clip,
            });
            losses.push(batch_loss);
            clips.push(batch_clip);
            for g in groups {
                all_scores.extend(g.scores);
                all_stage3.extend(g.stage3);
            }
            step += 1;
        }

        let pick = |f: fn(&RewardBreakdown) -> f64| mean(&all_scores.iter().map(f).collect::<Vec<_>>());
        let mean_reward = pick(|s| s.total);
        let mut plateau = false;
        if !cfg.no_curriculum {
            stage_history.push(mean_reward / cfg.weights.stage_max(stage));
            plateau = plateau_detect(&stage_history, curriculum);
        }
        log.epochs.push(EpochRecord {
            epoch,
            stage,
            mean_reward,
            mean_fmt: pick(|s| s.fmt),
            mean_acc: pick(|s| s.acc),
            mean_cat: pick(|s| s.cat),
            mean_iou: pick(|s| s.iou),
            mean_reward_stage3: mean(&all_stage3),
            mean_loss: mean(&losses),
            frac_clipped: mean(&clips),
            learning_rate: lr,
            plateau,
        });
        log::info!(
            "epoch {epoch} stage {stage} reward {mean_reward:.4} stage3 {:.4}",
            mean(&all_stage3)
        );
        if plateau && stage != StageId::Stage3 {
            stage = stage.next();
            stage_history.clear();
        }
        if let Some(h) = heldout {
            if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
                let (c, d) = evaluate_checkpoint(&params, h)?;
                log.evals.push(EvalSnapshot {
                    epoch,
                    binary_acc: c.binary_acc,
                    category_acc: c.category_acc,
                    miou: d.miou,
                });
            }
        }
    }
    Ok((params, log))
}

/// Greedy (argmax) predictions for every scene.
pub fn greedy_records(params: &PolicyParams, scenes: &[Scene]) -> Vec<EvalRecord> {
    let mut greedy = params.clone();
    greedy.temperature = 0.0;
    scenes
        .par_iter()
        .map(|s| {
            let state = RefocusState::initial(s, &greedy.config);
            let r = sample_rollout(&greedy, &state, &mut ChaCha8Rng::seed_from_u64(0));
            EvalRecord {
                id: s.id.clone(),
                prediction: r.transcript,
                gt: s.gt.clone(),
            }
        })
        .collect()
}

/// Greedy-decoding classification and detection reports.
pub fn evaluate_checkpoint(params: &PolicyParams, scenes: &[Scene]) -> Result<(ClassificationReport, DetectionReport)> {
    params.validate()?;
    let records = greedy_records(params, scenes);
    Ok((classification_report(&records)?, detection_report(&records)?))
}
