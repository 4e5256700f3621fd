//! Group-relative policy optimization.
//!
//! Advantages standardize rewards within each group of `G` responses:
//! `A_i = (R_i − mean) / (std + ε)` with the population standard deviation.
//! The objective is the clipped surrogate minus a KL penalty,
//!
//! ```text
//! J(θ) = mean_groups [ Σ_i w_i · ( min(ρ_i A_i, clip(ρ_i, 1−ε, 1+ε) A_i) − β · KL_i ) ]
//! ```
//!
//! with `ρ_i = π_θ(y_i) / π_old(y_i)` and `w_i = 1/G` (sequence mean) or
//! `|y_i| / Σ|y|` (token mean). Gradients are assembled from
//! [`policy::grad_logprob`](crate::policy::grad_logprob) with old and reference
//! log-probabilities held fixed.

use serde::{Deserialize, Serialize};

use crate::env::{SceneTask, TokenTable};
use crate::exec::Execution;
use crate::policy::{self, apply_update, GradBlocks, PolicyError, PolicyParams};
use crate::types::{RewardBreakdown, Rollout};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group of size {0} is too small; need at least 2")]
    GroupTooSmall(usize),
    #[error("group for sample {sample} has {got} entries, expected {expected}")]
    GroupShape {
        sample: String,
        got: usize,
        expected: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("oracle trajectory for {0} does not end in the gold answer")]
    NotOracle(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("non-finite {what} (objective {objective}, grad norm {grad_norm})")]
    NonFinite {
        what: String,
        objective: f64,
        grad_norm: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Per-trajectory estimator `r − log r − 1`, `r = π_ref/π_θ`.
    K3,
    /// Exact KL between per-state distributions, summed along the trajectory.
    Stepwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    SequenceMean,
    TokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_eps: f64,
    pub lr: f64,
    pub max_response_len: usize,
    /// Optimization passes over each sampled batch; the first pass is on-policy.
    pub epochs_per_batch: usize,
    /// Step-size multiplier for the halting head relative to `lr`.
    pub halt_lr_scale: f64,
    pub kl_mode: KlMode,
    pub aggregation: LossAggregation,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 5,
            clip_eps: 0.2,
            kl_beta: 0.01,
            adv_eps: 1e-6,
            lr: 0.5,
            max_response_len: 2048,
            epochs_per_batch: 1,
            halt_lr_scale: 1.0,
            kl_mode: KlMode::K3,
            aggregation: LossAggregation::SequenceMean,
            execution: Execution::default(),
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(GrpoError::InvalidConfig(format!("{name} = {v} must be > 0")))
            }
        };
        positive("clip_eps", self.clip_eps)?;
        positive("adv_eps", self.adv_eps)?;
        positive("lr", self.lr)?;
        positive("halt_lr_scale", self.halt_lr_scale)?;
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(GrpoError::InvalidConfig(format!("kl_beta = {} must be >= 0", self.kl_beta)));
        }
        if self.max_response_len == 0 || self.epochs_per_batch == 0 {
            return Err(GrpoError::InvalidConfig(
                "max_response_len and epochs_per_batch must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The `G` responses for one prompt, scored and with frozen log-probabilities.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub task: SceneTask,
    pub rollouts: Vec<Rollout>,
    pub rewards: Vec<RewardBreakdown>,
    /// Scalar each response is ranked by; the reward total unless shaped.
    pub scores: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
}

impl GroupBatch {
    /// Scores every rollout with `scores = total − length_cost · length` and freezes
    /// old (sampling) and reference log-probabilities.
    pub fn build(
        task: SceneTask,
        rollouts: Vec<Rollout>,
        rewards: Vec<RewardBreakdown>,
        length_cost: f64,
        reference: &PolicyParams,
    ) -> Result<Self, GrpoError> {
        let scores = rewards
            .iter()
            .zip(&rollouts)
            .map(|(r, y)| r.total - length_cost * y.length as f64)
            .collect();
        let old_logprobs = rollouts.iter().map(Rollout::total_logprob).collect();
        let ref_logprobs = rollouts
            .iter()
            .map(|y| policy::logprob(reference, &task, y))
            .collect::<Result<_, _>>()?;
        Ok(GroupBatch {
            task,
            rollouts,
            rewards,
            scores,
            old_logprobs,
            ref_logprobs,
        })
    }

    fn check(&self, g: usize) -> Result<(), GrpoError> {
        for len in [
            self.rollouts.len(),
            self.rewards.len(),
            self.scores.len(),
            self.old_logprobs.len(),
            self.ref_logprobs.len(),
        ] {
            if len != g {
                return Err(GrpoError::GroupShape {
                    sample: self.task.sample.id.clone(),
                    got: len,
                    expected: g,
                });
            }
        }
        Ok(())
    }
}

/// Standardizes rewards within one group.
pub fn compute_advantages(rewards: &[f64], adv_eps: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let first = rewards[0];
    if rewards.iter().all(|r| *r == first) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + adv_eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

/// Which branch of the clipped surrogate is active, and its value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Surrogate {
    pub value: f64,
    pub ratio: f64,
    /// The clipped branch is strictly smaller, so the term has no gradient.
    pub clipped: bool,
}

pub fn surrogate(new_logprob: f64, old_logprob: f64, advantage: f64, clip_eps: f64) -> Surrogate {
    let ratio = (new_logprob - old_logprob).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if clipped < unclipped {
        Surrogate {
            value: clipped,
            ratio,
            clipped: true,
        }
    } else {
        Surrogate {
            value: unclipped,
            ratio,
            clipped: false,
        }
    }
}

/// `min(ρA, clip(ρ, 1−ε, 1+ε)A)` with `ρ = exp(new − old)`.
pub fn surrogate_term(new_logprob: f64, old_logprob: f64, advantage: f64, clip_eps: f64) -> f64 {
    surrogate(new_logprob, old_logprob, advantage, clip_eps).value
}

/// Nonnegative k3 estimator of KL(π_θ ‖ π_ref) for one trajectory.
pub fn kl_term(new_logprob: f64, ref_logprob: f64) -> f64 {
    let x = ref_logprob - new_logprob;
    // r − log r − 1 with r = e^x, written to stay accurate near x = 0
    x.exp_m1() - x
}

/// d k3 / d new_logprob.
fn kl_term_slope(new_logprob: f64, ref_logprob: f64) -> f64 {
    -(ref_logprob - new_logprob).exp_m1()
}

/// Exact KL(p ‖ q) between categorical distributions.
pub fn exact_kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub mean_reward: f64,
    pub mean_accuracy: f64,
    pub mean_score: f64,
    pub mean_advantage: f64,
    pub mean_len: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

/// Objective value, its gradient, and diagnostics at `params`.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: GradBlocks,
    pub clip_fraction: f64,
    pub mean_kl: f64,
}

struct TermEval {
    value: f64,
    grad: GradBlocks,
    clipped: bool,
    kl: f64,
}

/// Evaluates the GRPO objective on frozen groups with precomputed advantages.
pub fn grpo_objective(
    params: &PolicyParams,
    batch: &[GroupBatch],
    advantages: &[Vec<f64>],
    cfg: &GrpoConfig,
    reference: &PolicyParams,
) -> Result<ObjectiveEval, GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let mut jobs = Vec::new();
    for (gi, group) in batch.iter().enumerate() {
        for i in 0..group.rollouts.len() {
            jobs.push((gi, i));
        }
    }
    let terms: Vec<Result<TermEval, GrpoError>> = cfg.execution.map(&jobs, |_, &(gi, i)| {
        let group = &batch[gi];
        let rollout = &group.rollouts[i];
        let tg = policy::grad_logprob(params, &group.task, rollout)?;
        let s = surrogate(tg.logprob, group.old_logprobs[i], advantages[gi][i], cfg.clip_eps);
        let surrogate_coef = if s.clipped { 0.0 } else { s.ratio * advantages[gi][i] };
        let mut grad = tg.grad;
        let kl = match cfg.kl_mode {
            KlMode::K3 => {
                let ref_lp = group.ref_logprobs[i];
                let coef = surrogate_coef - cfg.kl_beta * kl_term_slope(tg.logprob, ref_lp);
                grad.scale(coef);
                kl_term(tg.logprob, ref_lp)
            }
            KlMode::Stepwise => {
                grad.scale(surrogate_coef);
                let (kl, kl_grad) = policy::stepwise_kl(params, reference, &group.task, rollout)?;
                grad.add_scaled(&kl_grad, -cfg.kl_beta);
                kl
            }
        };
        Ok(TermEval {
            value: s.value - cfg.kl_beta * kl,
            grad,
            clipped: s.clipped,
            kl,
        })
    });

    // Fixed sequential reduction order keeps results bit-stable across executors.
    let mut total = params.zero_grad();
    let mut value = 0.0;
    let mut clipped = 0usize;
    let mut kl_sum = 0.0;
    let mut count = 0usize;
    let n_groups = batch.len() as f64;
    let mut it = terms.into_iter();
    for group in batch {
        let weights = term_weights(group, cfg.aggregation);
        for w in weights {
            let t = it.next().expect("one term per rollout")?;
            let c = w / n_groups;
            total.add_scaled(&t.grad, c);
            value += c * t.value;
            clipped += t.clipped as usize;
            kl_sum += t.kl;
            count += 1;
        }
    }
    Ok(ObjectiveEval {
        value,
        grad: total,
        clip_fraction: clipped as f64 / count as f64,
        mean_kl: kl_sum / count as f64,
    })
}

fn term_weights(group: &GroupBatch, aggregation: LossAggregation) -> Vec<f64> {
    let g = group.rollouts.len() as f64;
    match aggregation {
        LossAggregation::SequenceMean => vec![1.0 / g; group.rollouts.len()],
        LossAggregation::TokenMean => {
            let total: usize = group.rollouts.iter().map(|r| r.length).sum();
            group
                .rollouts
                .iter()
                .map(|r| r.length as f64 / total as f64)
                .collect()
        }
    }
}

/// Advantages for every group in the batch, validating group shapes.
pub fn batch_advantages(batch: &[GroupBatch], cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>, GrpoError> {
    batch
        .iter()
        .map(|g| {
            g.check(cfg.group_size)?;
            compute_advantages(&g.scores, cfg.adv_eps)
        })
        .collect()
}

/// One (or `epochs_per_batch`) gradient-ascent update on the GRPO objective.
pub fn grpo_step(
    params: &PolicyParams,
    batch: &[GroupBatch],
    cfg: &GrpoConfig,
    reference: &PolicyParams,
) -> Result<(PolicyParams, StepStats), GrpoError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(GrpoError::EmptyBatch);
    }
    let advantages = batch_advantages(batch, cfg)?;
    let mut current = params.clone();
    let mut first: Option<ObjectiveEval> = None;
    let mut last_clip = 0.0;
    for _ in 0..cfg.epochs_per_batch {
        let eval = grpo_objective(&current, batch, &advantages, cfg, reference)?;
        let grad_norm = eval.grad.norm();
        if !eval.value.is_finite() || !grad_norm.is_finite() {
            return Err(GrpoError::NonFinite {
                what: format!("GRPO objective at version {}", current.version),
                objective: eval.value,
                grad_norm,
            });
        }
        let mut step = eval.grad.clone();
        if cfg.halt_lr_scale != 1.0 {
            step.halt.iter_mut().for_each(|g| *g *= cfg.halt_lr_scale);
        }
        current = apply_update(&current, &step, cfg.lr)?;
        current.version = params.version;
        last_clip = eval.clip_fraction;
        first.get_or_insert(eval);
    }
    current.version = params.version + 1;
    let first = first.expect("at least one epoch");

    let n: usize = batch.iter().map(|g| g.rollouts.len()).sum();
    let nf = n as f64;
    let sum = |f: &dyn Fn(&GroupBatch, usize) -> f64| -> f64 {
        batch
            .iter()
            .flat_map(|g| (0..g.rollouts.len()).map(move |i| (g, i)))
            .map(|(g, i)| f(g, i))
            .sum()
    };
    let stats = StepStats {
        mean_reward: sum(&|g, i| g.rewards[i].total) / nf,
        mean_accuracy: sum(&|g, i| g.rewards[i].r_acc) / nf,
        mean_score: sum(&|g, i| g.scores[i]) / nf,
        mean_advantage: advantages.iter().flatten().sum::<f64>() / nf,
        mean_len: sum(&|g, i| g.rollouts[i].length as f64) / nf,
        clip_fraction: last_clip,
        mean_kl: first.mean_kl,
        objective: first.value,
        grad_norm: first.grad.norm(),
    };
    Ok((current, stats))
}

/// Mean negative log-likelihood of oracle trajectories.
pub fn sft_loss(
    params: &PolicyParams,
    tasks: &[SceneTask],
    oracle: &[Rollout],
    exec: Execution,
) -> Result<(f64, GradBlocks), GrpoError> {
    if tasks.is_empty() || tasks.len() != oracle.len() {
        return Err(GrpoError::EmptyBatch);
    }
    let table = TokenTable::new(params.vocab);
    for (t, r) in tasks.iter().zip(oracle) {
        if r.tokens.last() != Some(&table.answer(t.gold())) {
            return Err(GrpoError::NotOracle(t.sample.id.clone()));
        }
    }
    let pairs: Vec<(&SceneTask, &Rollout)> = tasks.iter().zip(oracle).collect();
    let grads = exec.map(&pairs, |_, (t, r)| policy::grad_logprob(params, t, r));
    let n = tasks.len() as f64;
    let mut g = params.zero_grad();
    let mut loss = 0.0;
    for tg in grads {
        let tg = tg?;
        g.add_scaled(&tg.grad, -1.0 / n);
        loss -= tg.logprob / n;
    }
    Ok((loss, g))
}

/// One gradient-descent step on the oracle NLL; returns the post-step loss.
pub fn sft_step(
    params: &PolicyParams,
    tasks: &[SceneTask],
    oracle: &[Rollout],
    lr: f64,
    exec: Execution,
) -> Result<(PolicyParams, f64), GrpoError> {
    let (loss, mut g) = sft_loss(params, tasks, oracle, exec)?;
    if !loss.is_finite() || !g.is_finite() {
        return Err(GrpoError::NonFinite {
            what: "SFT loss".into(),
            objective: loss,
            grad_norm: g.norm(),
        });
    }
    g.scale(-1.0);
    let next = apply_update(params, &g, lr)?;
    let (after, _) = sft_loss(&next, tasks, oracle, exec)?;
    Ok((next, after))
}
