//! Group-relative policy optimization: the gradient-based baseline.
//!
//! Each step samples a group of rollouts per prompt from the frozen old
//! policy, z-scores the group rewards into advantages, and ascends the
//! clipped-ratio surrogate minus a k3 KL penalty toward a frozen
//! reference policy, using exact hand-derived gradients. Plain constant
//! learning-rate ascent; no adaptive optimizer state.

use std::ops::ControlFlow;

use crate::es::{zscores, EsError};
use crate::noise::{derive_seed, NoiseSeed, NoiseStream};
use crate::params::{ParamError, ParamSet};
use crate::policy::{Evaluator, GradAccum, PolicyArch, PolicyError, TokenId};
use crate::tasks::{train_pool, TaskId, TrainExample, TRAIN_POOL_SIZE};

/// Seed domains for the trainer's private randomness.
mod domains {
    /// Per-iteration namespace.
    pub const ITERATION: u64 = 0x4750_4954_4552;
    /// Per-gradient-step namespace within an iteration.
    pub const STEP: u64 = 0x4750_5354_4550;
    /// Per-prompt group namespace within a step.
    pub const GROUP: u64 = 0x4750_4752_5550;
    /// Per-rollout sampling streams.
    pub const ROLLOUT: u64 = 0x4750_524f_4c4c;
    /// Pool shuffling.
    pub const SHUFFLE: u64 = 0x4750_5348_5546;
}

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("clip_eps must lie in (0,1), got {0}")]
    BadClipEps(f64),
    #[error("kl_beta must be finite and non-negative, got {0}")]
    BadBeta(f64),
    #[error("learning_rate must be finite and non-negative, got {0}")]
    BadLearningRate(f64),
    #[error("sample_temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("minibatch must be at least 1")]
    BadMinibatch,
    #[error("probability ratio must be positive and finite, got {0}")]
    BadRatio(f64),
    #[error("training pool is empty")]
    EmptyPool,
    #[error(
        "non-finite weight {value} at iteration {iteration}, step {step}, prompt {prompt}, rollout {rollout}"
    )]
    NonFiniteWeight { iteration: usize, step: usize, prompt: usize, rollout: usize, value: f64 },
    #[error("non-finite gradient at iteration {iteration}, step {step}")]
    NonFiniteGradient { iteration: usize, step: usize },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl From<EsError> for GrpoError {
    fn from(e: EsError) -> Self {
        match e {
            EsError::TooFewRewards(n) => GrpoError::GroupTooSmall(n),
            EsError::Param(p) => GrpoError::Param(p),
            EsError::Policy(p) => GrpoError::Policy(p),
            other => panic!("unexpected score error: {other}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GrpoConfig {
    /// Rollouts sampled per prompt.
    pub group_size: usize,
    /// Ratio clip half-width.
    pub clip_eps: f64,
    /// KL penalty coefficient toward the reference policy.
    pub kl_beta: f64,
    /// Plain gradient-ascent step size.
    pub learning_rate: f64,
    /// Sampling temperature for rollouts.
    pub sample_temperature: f64,
    /// Prompts per gradient step.
    pub minibatch: usize,
    /// Seed namespace for sampling, shuffling, and the pool.
    pub run_seed: NoiseSeed,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 30,
            clip_eps: 0.2,
            kl_beta: 1e-3,
            learning_rate: 0.05,
            sample_temperature: 1.0,
            minibatch: 32,
            run_seed: NoiseSeed(0),
        }
    }
}

impl GrpoConfig {
    /// `learning_rate == 0` is allowed (a zero step is a useful control).
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::BadClipEps(self.clip_eps));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(GrpoError::BadBeta(self.kl_beta));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(GrpoError::BadLearningRate(self.learning_rate));
        }
        if !(self.sample_temperature.is_finite() && self.sample_temperature > 0.0) {
            return Err(GrpoError::BadTemperature(self.sample_temperature));
        }
        if self.minibatch == 0 {
            return Err(GrpoError::BadMinibatch);
        }
        Ok(())
    }
}

/// Group z-score advantages; shares the z-score contract with the
/// evolution-strategies trainer.
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    Ok(zscores(rewards)?)
}

/// k3 KL estimate `r - ln r - 1` for `r = p_ref / p_cur`.
///
/// Mathematically non-negative; computed via log1p and clamped at zero so
/// floating-point cancellation near r = 1 cannot produce -1e-29 noise.
pub fn kl_k3(ratio_ref_over_cur: f64) -> Result<f64, GrpoError> {
    let r = ratio_ref_over_cur;
    if !(r.is_finite() && r > 0.0) {
        return Err(GrpoError::BadRatio(r));
    }
    let d = r - 1.0;
    Ok((d - libm::log1p(d)).max(0.0))
}

/// The clipped surrogate `min(rho * A, clamp(rho, 1-eps, 1+eps) * A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// True when the unclipped branch attains the surrogate minimum, i.e.
/// gradient flows through the ratio. Ties (ratio inside the clip band)
/// count as unclipped.
fn unclipped_active(ratio: f64, advantage: f64, clip_eps: f64) -> bool {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    ratio * advantage <= clipped * advantage
}

/// One prompt's sampled group, frozen for the duration of a step.
#[derive(Debug, Clone)]
pub struct GroupRollouts {
    /// Position of the prompt in the training pool (diagnostics only).
    pub example_index: usize,
    pub prompt: Vec<TokenId>,
    pub outputs: Vec<Vec<TokenId>>,
    pub rewards: Vec<f64>,
    /// Group z-scores of the rewards.
    pub advantages: Vec<f64>,
    /// Sequence log-probabilities under the policy that sampled them.
    pub logp_old: Vec<f64>,
}

/// Samples `group_size` rollouts for one prompt from `old` and grades
/// them. Each rollout draws from its own derived stream, so results do
/// not depend on evaluation order.
pub fn sample_group(
    arch: &PolicyArch,
    old: &ParamSet,
    example: &TrainExample,
    example_index: usize,
    cfg: &GrpoConfig,
    group_seed: NoiseSeed,
) -> Result<GroupRollouts, GrpoError> {
    let mut eval = Evaluator::new(arch, old)?;
    sample_group_with(&mut eval, example, example_index, cfg, group_seed)
}

/// [`sample_group`] against a prebuilt evaluator, so one step's worth of
/// groups shares the cache of the frozen old policy.
fn sample_group_with(
    old: &mut Evaluator,
    example: &TrainExample,
    example_index: usize,
    cfg: &GrpoConfig,
    group_seed: NoiseSeed,
) -> Result<GroupRollouts, GrpoError> {
    let g = cfg.group_size;
    let mut outputs = Vec::with_capacity(g);
    let mut rewards = Vec::with_capacity(g);
    let mut logp_old = Vec::with_capacity(g);
    for i in 0..g as u64 {
        let mut rng = NoiseStream::new(derive_seed(group_seed, domains::ROLLOUT, i));
        let rollout = old.generate(
            &example.prompt,
            cfg.sample_temperature,
            example.max_output_tokens(),
            Some(&mut rng),
            false,
        )?;
        rewards.push(example.grade(&rollout.generated));
        logp_old.push(rollout.logprobs.iter().sum());
        outputs.push(rollout.generated);
    }
    let advantages = advantages(&rewards)?;
    Ok(GroupRollouts {
        example_index,
        prompt: example.prompt.clone(),
        outputs,
        rewards,
        advantages,
        logp_old,
    })
}

/// The objective value for fixed groups as a pure function of `current`,
/// exactly the function whose gradient the update ascends: mean over
/// groups of (1/G) sum surrogate - kl_beta * mean k3.
pub fn objective(
    arch: &PolicyArch,
    current: &ParamSet,
    reference: &ParamSet,
    groups: &[GroupRollouts],
    cfg: &GrpoConfig,
) -> Result<f64, GrpoError> {
    let scale = 1.0 / (groups.len().max(1) as f64 * cfg.group_size as f64);
    let mut cur = Evaluator::new(arch, current)?;
    let mut refer = if cfg.kl_beta > 0.0 { Some(Evaluator::new(arch, reference)?) } else { None };
    let mut j = 0.0;
    for group in groups {
        for (i, output) in group.outputs.iter().enumerate() {
            let logp_cur = cur.logprob(&group.prompt, output)?;
            let ratio = libm::exp(logp_cur - group.logp_old[i]);
            j += scale * surrogate_term(ratio, group.advantages[i], cfg.clip_eps);
            if let Some(refer) = refer.as_mut() {
                let logp_ref = refer.logprob(&group.prompt, output)?;
                j -= cfg.kl_beta * scale * kl_k3(libm::exp(logp_ref - logp_cur))?;
            }
        }
    }
    Ok(j)
}

/// Objective value, exact gradient, and step diagnostics for a minibatch.
#[derive(Debug)]
pub struct StepEvaluation {
    pub objective: f64,
    pub gradient: GradAccum,
    pub mean_reward: f64,
    pub mean_ratio: f64,
    /// Fraction of rollouts whose surrogate gradient was cut by the clip.
    pub clipped_fraction: f64,
    pub mean_k3: f64,
    pub rollouts: usize,
}

/// Builds the exact objective gradient over fixed groups.
///
/// Per rollout i the weight on grad log pi(o_i) is
/// (m_i * A_i * rho_i - kl_beta * (1 - r_i)) / (P * G), where m_i marks
/// the unclipped branch active, rho_i the current/old ratio, and r_i the
/// reference/current ratio. `diag` labels errors with (iteration, step).
pub fn objective_and_gradient(
    arch: &PolicyArch,
    current: &ParamSet,
    reference: &ParamSet,
    groups: &[GroupRollouts],
    cfg: &GrpoConfig,
    diag: (usize, usize),
) -> Result<StepEvaluation, GrpoError> {
    let (iteration, step) = diag;
    let rollouts: usize = groups.iter().map(|g| g.outputs.len()).sum();
    let scale = 1.0 / (groups.len().max(1) as f64 * cfg.group_size as f64);
    let mut cur = Evaluator::new(arch, current)?;
    let mut refer = if cfg.kl_beta > 0.0 { Some(Evaluator::new(arch, reference)?) } else { None };
    let mut acc = GradAccum::zeros_like(current);
    let mut scratch = GradAccum::zeros_like(current);
    let mut j = 0.0;
    let (mut reward_sum, mut ratio_sum, mut k3_sum) = (0.0, 0.0, 0.0);
    let mut clipped = 0usize;
    for (p, group) in groups.iter().enumerate() {
        for (i, output) in group.outputs.iter().enumerate() {
            scratch.reset();
            let logp_cur = cur.accumulate_logprob_grad(&group.prompt, output, 1.0, &mut scratch)?;
            let adv = group.advantages[i];
            let ratio = libm::exp(logp_cur - group.logp_old[i]);
            let active = unclipped_active(ratio, adv, cfg.clip_eps);
            let term = scale * surrogate_term(ratio, adv, cfg.clip_eps);
            j += term;
            let mut weight = if active { scale * adv * ratio } else { 0.0 };
            if !active {
                clipped += 1;
            }
            if let Some(refer) = refer.as_mut() {
                let logp_ref = refer.logprob(&group.prompt, output)?;
                let r = libm::exp(logp_ref - logp_cur);
                let k3 = kl_k3(r)?;
                j -= cfg.kl_beta * scale * k3;
                weight -= cfg.kl_beta * scale * (1.0 - r);
                k3_sum += k3;
            }
            if !(weight.is_finite() && term.is_finite()) {
                return Err(GrpoError::NonFiniteWeight {
                    iteration,
                    step,
                    prompt: p,
                    rollout: i,
                    value: if weight.is_finite() { term } else { weight },
                });
            }
            acc.add_scaled(&scratch, weight);
            reward_sum += group.rewards[i];
            ratio_sum += ratio;
        }
    }
    let denom = rollouts.max(1) as f64;
    Ok(StepEvaluation {
        objective: j,
        gradient: acc,
        mean_reward: reward_sum / denom,
        mean_ratio: ratio_sum / denom,
        clipped_fraction: clipped as f64 / denom,
        mean_k3: k3_sum / denom,
        rollouts,
    })
}

/// Step diagnostics returned by [`grpo_step`].
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_ratio: f64,
    pub clipped_fraction: f64,
    pub mean_k3: f64,
    pub rollouts: usize,
}

/// One gradient step: sample groups from `old` for every prompt in the
/// minibatch, build the exact objective gradient at `current`, and ascend
/// in place. The caller freezes `old` (normally a copy of `current` taken
/// at the step boundary) and `reference` (the pre-fine-tuning base).
#[allow(clippy::too_many_arguments)]
pub fn grpo_step(
    arch: &PolicyArch,
    current: &mut ParamSet,
    old: &ParamSet,
    reference: &ParamSet,
    minibatch: &[(usize, &TrainExample)],
    cfg: &GrpoConfig,
    iteration: usize,
    step_index: usize,
) -> Result<StepMetrics, GrpoError> {
    cfg.validate()?;
    if minibatch.is_empty() {
        return Err(GrpoError::EmptyPool);
    }
    let step_seed = derive_seed(
        derive_seed(cfg.run_seed, domains::ITERATION, iteration as u64),
        domains::STEP,
        step_index as u64,
    );
    let mut old_eval = Evaluator::new(arch, old)?;
    let mut groups = Vec::with_capacity(minibatch.len());
    for (local, (example_index, example)) in minibatch.iter().enumerate() {
        let group_seed = derive_seed(step_seed, domains::GROUP, local as u64);
        groups.push(sample_group_with(&mut old_eval, example, *example_index, cfg, group_seed)?);
    }
    drop(old_eval);
    let eval =
        objective_and_gradient(arch, current, reference, &groups, cfg, (iteration, step_index))?;
    if !eval.gradient.is_finite() {
        return Err(GrpoError::NonFiniteGradient { iteration, step: step_index });
    }
    eval.gradient.apply_ascent(current, cfg.learning_rate)?;
    Ok(StepMetrics {
        objective: eval.objective,
        mean_reward: eval.mean_reward,
        mean_ratio: eval.mean_ratio,
        clipped_fraction: eval.clipped_fraction,
        mean_k3: eval.mean_k3,
        rollouts: eval.rollouts,
    })
}

/// What one outer iteration (a full pass over the pool) produced.
#[derive(Debug, Clone)]
pub struct GrpoIteration {
    /// Zero-based iteration index.
    pub iteration: usize,
    /// Rollout-weighted mean reward across the iteration's steps.
    pub mean_reward: f64,
    /// Rollout-weighted mean objective.
    pub objective: f64,
    pub mean_ratio: f64,
    pub clipped_fraction: f64,
    pub mean_k3: f64,
    pub steps: usize,
}

/// Fine-tunes `params` on the task's fixed training pool.
///
/// One outer iteration shuffles the pool deterministically, splits it
/// into minibatches, and takes one gradient step per minibatch with the
/// old policy refreshed at each step boundary. `reference` stays frozen
/// throughout. `on_iteration` fires after each full pass; returning
/// `ControlFlow::Break` stops training early.
pub fn grpo_train<F>(
    arch: &PolicyArch,
    params: &mut ParamSet,
    reference: &ParamSet,
    cfg: &GrpoConfig,
    task: TaskId,
    iterations: usize,
    on_iteration: F,
) -> Result<(), GrpoError>
where
    F: FnMut(&ParamSet, &GrpoIteration) -> Result<ControlFlow<()>, GrpoError>,
{
    let pool = train_pool(task, cfg.run_seed, TRAIN_POOL_SIZE);
    grpo_train_pool(arch, params, reference, cfg, &pool, iterations, on_iteration)
}

/// [`grpo_train`] against an explicit example pool (pretraining mixes
/// pools).
pub fn grpo_train_pool<F>(
    arch: &PolicyArch,
    params: &mut ParamSet,
    reference: &ParamSet,
    cfg: &GrpoConfig,
    pool: &[TrainExample],
    iterations: usize,
    mut on_iteration: F,
) -> Result<(), GrpoError>
where
    F: FnMut(&ParamSet, &GrpoIteration) -> Result<ControlFlow<()>, GrpoError>,
{
    cfg.validate()?;
    if pool.is_empty() {
        return Err(GrpoError::EmptyPool);
    }
    for iter in 0..iterations {
        let order = shuffled_indices(pool.len(), cfg.run_seed, iter as u64);
        let (mut reward_sum, mut objective_sum, mut ratio_sum) = (0.0, 0.0, 0.0);
        let (mut clipped_sum, mut k3_sum) = (0.0, 0.0);
        let (mut total_rollouts, mut steps) = (0usize, 0usize);
        for (step_index, chunk) in order.chunks(cfg.minibatch).enumerate() {
            let minibatch: Vec<(usize, &TrainExample)> =
                chunk.iter().map(|&i| (i, &pool[i])).collect();
            let old = params.deep_copy();
            let m = grpo_step(arch, params, &old, reference, &minibatch, cfg, iter, step_index)?;
            let w = m.rollouts as f64;
            reward_sum += m.mean_reward * w;
            objective_sum += m.objective * w;
            ratio_sum += m.mean_ratio * w;
            clipped_sum += m.clipped_fraction * w;
            k3_sum += m.mean_k3 * w;
            total_rollouts += m.rollouts;
            steps += 1;
        }
        let denom = total_rollouts.max(1) as f64;
        let record = GrpoIteration {
            iteration: iter,
            mean_reward: reward_sum / denom,
            objective: objective_sum / denom,
            mean_ratio: ratio_sum / denom,
            clipped_fraction: clipped_sum / denom,
            mean_k3: k3_sum / denom,
            steps,
        };
        if on_iteration(params, &record)?.is_break() {
            break;
        }
    }
    Ok(())
}

/// Deterministic Fisher-Yates permutation of 0..len for one iteration.
fn shuffled_indices(len: usize, run_seed: NoiseSeed, iteration: u64) -> Vec<usize> {
    let mut stream = NoiseStream::new(derive_seed(run_seed, domains::SHUFFLE, iteration));
    let mut indices: Vec<usize> = (0..len).collect();
    for i in 0..len.saturating_sub(1) {
        let j = i + stream.next_index(len - i);
        indices.swap(i, j);
    }
    indices
}
