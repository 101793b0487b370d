//! Evolution-strategies trainer with seed-replay perturbations.
//!
//! Each population member is identified by a derived seed. Perturbation,
//! restoration, and the final update all regenerate the member's noise
//! from that seed, so no noise tensor is ever stored: evaluation works on
//! a single scratch copy per worker (perturb in place, score, subtract
//! the same noise back out), and the update replays every member's
//! stream once against the master parameters.

use std::ops::ControlFlow;

use crate::noise::{derive_seed, NoiseSeed, NoiseStream};
use crate::params::{ParamError, ParamSet};
use crate::policy::{Evaluator, PolicyArch, PolicyError};
use crate::tasks::{train_pool, TaskId, TrainExample, TRAIN_POOL_SIZE};

/// Seed domains for the trainer's private randomness.
mod domains {
    /// Per-iteration namespace for member seeds.
    pub const ITERATION: u64 = 0x4553_4954_4552;
    /// Per-member perturbation streams.
    pub const MEMBER: u64 = 0x4553_4d45_4d42;
    /// Batch subsampling.
    pub const BATCH: u64 = 0x4553_4241_5443;
}

#[derive(Debug, thiserror::Error)]
pub enum EsError {
    #[error("population must have at least 2 members, got {0}")]
    PopulationTooSmall(usize),
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("alpha must be finite and non-negative, got {0}")]
    BadAlpha(f64),
    #[error("training pool is empty")]
    EmptyPool,
    #[error("member {member} produced non-finite reward {reward}")]
    NonFiniteReward { member: usize, reward: f64 },
    #[error("member results must cover 0..{expected} exactly once: {detail}")]
    MemberIntegrity { expected: usize, detail: String },
    #[error("z-scores need at least 2 values, got {0}")]
    TooFewRewards(usize),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How the learning rate is divided when turning scores into replay
/// coefficients.
///
/// `AsWritten` uses `alpha * score / population`; `Canonical` additionally
/// divides by sigma, recovering the classical estimator scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaDivisorMode {
    #[default]
    AsWritten,
    Canonical,
}

impl SigmaDivisorMode {
    pub fn parse(s: &str) -> Option<SigmaDivisorMode> {
        match s {
            "as_written" => Some(SigmaDivisorMode::AsWritten),
            "canonical" => Some(SigmaDivisorMode::Canonical),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SigmaDivisorMode::AsWritten => "as_written",
            SigmaDivisorMode::Canonical => "canonical",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EsConfig {
    /// Number of perturbed members scored per iteration.
    pub population_size: usize,
    /// Perturbation scale.
    pub sigma: f64,
    /// Learning rate.
    pub alpha: f64,
    /// Generation cap per rollout (the task may impose a smaller one).
    pub max_tokens: usize,
    /// Seed namespace for member noise, batch choice, and the pool.
    pub run_seed: NoiseSeed,
    /// Divisor convention for update coefficients.
    pub sigma_divisor_mode: SigmaDivisorMode,
    /// Score members by centered ranks instead of z-scores.
    pub rank_transform: bool,
    /// Score members on this many pool examples per iteration instead of
    /// the whole pool.
    pub batch_subsample: Option<usize>,
    /// Worker threads for population evaluation. Rewards are discrete, so
    /// any thread count produces identical results.
    pub threads: usize,
}

impl Default for EsConfig {
    fn default() -> Self {
        EsConfig {
            population_size: 30,
            sigma: 1e-3,
            alpha: 5e-4,
            max_tokens: 16,
            run_seed: NoiseSeed(0),
            sigma_divisor_mode: SigmaDivisorMode::default(),
            rank_transform: false,
            batch_subsample: None,
            threads: 1,
        }
    }
}

impl EsConfig {
    /// `alpha == 0` is allowed (a zero step is a useful control).
    pub fn validate(&self) -> Result<(), EsError> {
        if self.population_size < 2 {
            return Err(EsError::PopulationTooSmall(self.population_size));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(EsError::BadSigma(self.sigma));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(EsError::BadAlpha(self.alpha));
        }
        Ok(())
    }
}

/// One member's seed and score for an iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberResult {
    pub member_index: usize,
    pub seed: NoiseSeed,
    pub reward: f64,
}

/// Perturbation seed for one member of one iteration.
pub fn member_seed(run_seed: NoiseSeed, iteration: u64, member: u64) -> NoiseSeed {
    derive_seed(derive_seed(run_seed, domains::ITERATION, iteration), domains::MEMBER, member)
}

/// Population z-scores with the population (not sample) deviation.
/// A spread below 1e-12 yields all zeros, freezing the update.
pub fn zscores(rewards: &[f64]) -> Result<Vec<f64>, EsError> {
    if rewards.len() < 2 {
        return Err(EsError::TooFewRewards(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var);
    if std < 1e-12 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Centered-rank scores in [-0.5, 0.5]; ties share their average rank, so
/// a constant reward vector maps to all zeros.
pub fn centered_ranks(rewards: &[f64]) -> Result<Vec<f64>, EsError> {
    let n = rewards.len();
    if n < 2 {
        return Err(EsError::TooFewRewards(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| rewards[a].total_cmp(&rewards[b]));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && rewards[order[j + 1]] == rewards[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let scale = (n - 1) as f64;
    Ok(ranks.iter().map(|r| r / scale - 0.5).collect())
}

fn scores(cfg: &EsConfig, rewards: &[f64]) -> Result<Vec<f64>, EsError> {
    if cfg.rank_transform {
        centered_ranks(rewards)
    } else {
        zscores(rewards)
    }
}

fn update_coefficients(cfg: &EsConfig, scores: &[f64]) -> Vec<f64> {
    let divisor = match cfg.sigma_divisor_mode {
        SigmaDivisorMode::AsWritten => cfg.population_size as f64,
        SigmaDivisorMode::Canonical => cfg.population_size as f64 * cfg.sigma,
    };
    scores.iter().map(|z| cfg.alpha * z / divisor).collect()
}

/// Scores members `first_member..first_member + count` with a
/// caller-supplied reward function.
///
/// The master set is never touched: each member is applied to one scratch
/// copy (`+sigma * noise`), scored, and removed again (`-sigma * noise`
/// replayed from a fresh stream of the same seed). Exposed so oracle
/// tests can inject exact reward functions.
pub fn eval_members_with<F>(
    params: &ParamSet,
    cfg: &EsConfig,
    iteration: u64,
    first_member: usize,
    count: usize,
    mut reward: F,
) -> Result<Vec<MemberResult>, EsError>
where
    F: FnMut(&ParamSet) -> Result<f64, EsError>,
{
    let mut scratch = params.deep_copy();
    let mut results = Vec::with_capacity(count);
    for member_index in first_member..first_member + count {
        let seed = member_seed(cfg.run_seed, iteration, member_index as u64);
        scratch.axpy_noise_inplace(cfg.sigma, &mut NoiseStream::new(seed))?;
        let r = reward(&scratch)?;
        scratch.axpy_noise_inplace(-cfg.sigma, &mut NoiseStream::new(seed))?;
        if !r.is_finite() {
            return Err(EsError::NonFiniteReward { member: member_index, reward: r });
        }
        results.push(MemberResult { member_index, seed, reward: r });
    }
    Ok(results)
}

fn batch_reward(
    arch: &PolicyArch,
    params: &ParamSet,
    batch: &[&TrainExample],
    max_tokens: usize,
) -> Result<f64, EsError> {
    let mut eval = Evaluator::new(arch, params)?;
    let mut total = 0.0;
    for ex in batch {
        let cap = max_tokens.min(ex.max_output_tokens()).max(1);
        let rollout = eval.generate(&ex.prompt, 0.0, cap, None, false)?;
        total += ex.grade(&rollout.generated);
    }
    Ok(total / batch.len().max(1) as f64)
}

/// Mean greedy-decode reward of every perturbed member on `batch`.
pub fn eval_population(
    arch: &PolicyArch,
    params: &ParamSet,
    cfg: &EsConfig,
    iteration: u64,
    batch: &[&TrainExample],
) -> Result<Vec<MemberResult>, EsError> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(EsError::EmptyPool);
    }
    let n = cfg.population_size;
    let threads = cfg.threads.clamp(1, n);
    if threads <= 1 {
        return eval_members_with(params, cfg, iteration, 0, n, |p| {
            batch_reward(arch, p, batch, cfg.max_tokens)
        });
    }
    // Contiguous member chunks, one scratch copy per worker. Rewards are
    // discrete, so chunking does not change them and any thread count
    // produces identical output.
    let chunk_len = n.div_ceil(threads);
    let ranges: Vec<(usize, usize)> =
        (0..n).step_by(chunk_len).map(|s| (s, chunk_len.min(n - s))).collect();
    let results: Vec<Result<Vec<MemberResult>, EsError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|(first, count)| {
                scope.spawn(move || {
                    eval_members_with(params, cfg, iteration, first, count, |p| {
                        batch_reward(arch, p, batch, cfg.max_tokens)
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut members = Vec::with_capacity(n);
    for r in results {
        members.extend(r?);
    }
    Ok(members)
}

/// Applies the scored update by replaying each member's noise stream once,
/// in ascending member order. Members whose coefficient is exactly zero
/// are skipped, leaving the parameters bit-identical for that member.
///
/// Returns the per-member coefficients in member order.
pub fn apply_update(
    params: &mut ParamSet,
    results: &[MemberResult],
    cfg: &EsConfig,
) -> Result<Vec<f64>, EsError> {
    cfg.validate()?;
    let n = cfg.population_size;
    let mut ordered: Vec<&MemberResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.member_index);
    let indices: Vec<usize> = ordered.iter().map(|r| r.member_index).collect();
    if indices != (0..n).collect::<Vec<_>>() {
        return Err(EsError::MemberIntegrity { expected: n, detail: format!("got {indices:?}") });
    }
    let rewards: Vec<f64> = ordered.iter().map(|r| r.reward).collect();
    let coeffs = update_coefficients(cfg, &scores(cfg, &rewards)?);
    for (member, &coeff) in ordered.iter().zip(&coeffs) {
        if coeff == 0.0 {
            continue;
        }
        params.axpy_noise_inplace(coeff, &mut NoiseStream::new(member.seed))?;
    }
    Ok(coeffs)
}

/// What one training iteration produced, handed to the progress callback.
#[derive(Debug, Clone)]
pub struct EsIteration {
    /// Zero-based iteration index.
    pub iteration: usize,
    /// Per-member batch rewards in member order.
    pub rewards: Vec<f64>,
    /// Population mean reward.
    pub mean_reward: f64,
    /// Coefficients replayed into the update (zeros were skipped).
    pub coefficients: Vec<f64>,
}

/// Runs `iterations` of population evaluation plus update on `params`,
/// scoring against the task's fixed training pool.
///
/// `on_iteration` fires after each update with the fresh parameters;
/// checkpointing and metric logging hang off it, and returning
/// `ControlFlow::Break` stops training early (e.g. a target accuracy was
/// reached).
pub fn es_train<F>(
    arch: &PolicyArch,
    params: &mut ParamSet,
    cfg: &EsConfig,
    task: TaskId,
    iterations: usize,
    on_iteration: F,
) -> Result<(), EsError>
where
    F: FnMut(&ParamSet, &EsIteration) -> Result<ControlFlow<()>, EsError>,
{
    let pool = train_pool(task, cfg.run_seed, TRAIN_POOL_SIZE);
    es_train_pool(arch, params, cfg, &pool, iterations, on_iteration)
}

/// [`es_train`] against an explicit example pool (pretraining mixes pools).
pub fn es_train_pool<F>(
    arch: &PolicyArch,
    params: &mut ParamSet,
    cfg: &EsConfig,
    pool: &[TrainExample],
    iterations: usize,
    mut on_iteration: F,
) -> Result<(), EsError>
where
    F: FnMut(&ParamSet, &EsIteration) -> Result<ControlFlow<()>, EsError>,
{
    cfg.validate()?;
    if pool.is_empty() {
        return Err(EsError::EmptyPool);
    }
    for iter in 0..iterations {
        let batch = select_batch(pool, cfg, iter as u64);
        let members = eval_population(arch, params, cfg, iter as u64, &batch)?;
        let coefficients = apply_update(params, &members, cfg)?;
        let rewards: Vec<f64> = members.iter().map(|m| m.reward).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let record = EsIteration { iteration: iter, rewards, mean_reward, coefficients };
        if on_iteration(params, &record)?.is_break() {
            break;
        }
    }
    Ok(())
}

/// The whole pool in order, or a deterministic without-replacement
/// subsample when `batch_subsample` is set.
fn select_batch<'p>(pool: &'p [TrainExample], cfg: &EsConfig, iteration: u64) -> Vec<&'p TrainExample> {
    let take = match cfg.batch_subsample {
        Some(k) if k < pool.len() => k,
        _ => return pool.iter().collect(),
    };
    let mut stream = NoiseStream::new(derive_seed(cfg.run_seed, domains::BATCH, iteration));
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    for i in 0..take {
        let j = i + stream.next_index(pool.len() - i);
        indices.swap(i, j);
    }
    indices[..take].iter().map(|&i| &pool[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{gauge, GroupKind, ParamGroup, ParamTensor};
    use crate::policy::generate;

    fn test_params(seed: u64, sizes: &[usize], low: f32, high: f32) -> ParamSet {
        let mut stream = NoiseStream::new(NoiseSeed(seed));
        let mut set = ParamSet::new();
        for (i, &len) in sizes.iter().enumerate() {
            let data: Vec<f32> =
                (0..len).map(|_| low + (high - low) * stream.next_uniform() as f32).collect();
            set.insert(
                ParamTensor::new(
                    format!("t{i}.w"),
                    ParamGroup { kind: GroupKind::HiddenWeight, layer_index: i as u32 },
                    vec![len],
                    data,
                )
                .unwrap(),
            )
            .unwrap();
        }
        set
    }

    fn flat_f64(set: &ParamSet) -> Vec<f64> {
        set.iter().flat_map(|t| t.data.iter().map(|&v| f64::from(v))).collect()
    }

    fn results_for(cfg: &EsConfig, iteration: u64, rewards: &[f64]) -> Vec<MemberResult> {
        rewards
            .iter()
            .enumerate()
            .map(|(m, &reward)| MemberResult {
                member_index: m,
                seed: member_seed(cfg.run_seed, iteration, m as u64),
                reward,
            })
            .collect()
    }

    #[test]
    fn zscores_match_hand_computation() {
        let z = zscores(&[1.0, 2.0, 3.0]).unwrap();
        let expected = 1.224_744_871_391_589_1;
        assert!((z[0] + expected).abs() < 1e-15);
        assert!(z[1].abs() < 1e-15);
        assert!((z[2] - expected).abs() < 1e-15);
        assert!(z.iter().sum::<f64>().abs() < 1e-12);
        assert_eq!(zscores(&[0.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn zscores_freeze_on_degenerate_spread_and_reject_tiny_input() {
        assert_eq!(zscores(&[5.0; 3]).unwrap(), vec![0.0; 3]);
        assert_eq!(zscores(&[0.1, 0.1 + 1e-13]).unwrap(), vec![0.0; 2]);
        assert!(matches!(zscores(&[]), Err(EsError::TooFewRewards(0))));
        assert!(matches!(zscores(&[5.0]), Err(EsError::TooFewRewards(1))));
    }

    #[test]
    fn centered_ranks_handle_order_and_ties() {
        let r = centered_ranks(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!(r, vec![0.5, -0.5, 0.0]);
        let tied = centered_ranks(&[1.0, 1.0, 2.0, 2.0]).unwrap();
        let third = 1.0 / 3.0;
        for (got, want) in tied.iter().zip([-third, -third, third, third]) {
            assert!((got - want).abs() < 1e-15, "{tied:?}");
        }
        assert_eq!(centered_ranks(&[4.0; 6]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn update_coefficients_follow_both_divisor_modes() {
        let mut cfg =
            EsConfig { population_size: 30, sigma: 1e-3, alpha: 5e-4, ..EsConfig::default() };
        let c = update_coefficients(&cfg, &[1.5]);
        assert!((c[0] - 2.5e-5).abs() < 1e-18);
        cfg.sigma_divisor_mode = SigmaDivisorMode::Canonical;
        let c = update_coefficients(&cfg, &[1.5]);
        assert!((c[0] - 0.025).abs() < 1e-15);
    }

    /// Independent oracle: materialize each member's noise into a plain
    /// f64 vector and form base + sum(coeff * noise) without any f32
    /// rounding, then compare against the replay-based update.
    fn oracle_check(population: usize, rewards: &[f64]) {
        let cfg =
            EsConfig { population_size: population, run_seed: NoiseSeed(9), ..EsConfig::default() };
        let mut params = test_params(77, &[40, 25], 0.75, 1.25);
        let base = flat_f64(&params);
        let results = results_for(&cfg, 4, rewards);

        let mut expected = base.clone();
        let z = zscores(rewards).unwrap();
        for (m, result) in results.iter().enumerate() {
            let coeff = cfg.alpha * z[m] / population as f64;
            let mut noise = NoiseStream::new(result.seed);
            for x in expected.iter_mut() {
                *x += coeff * noise.next_gaussian();
            }
        }

        apply_update(&mut params, &results, &cfg).unwrap();
        let got = flat_f64(&params);
        for (i, (g, e)) in got.iter().zip(&expected).enumerate() {
            let rel = (g - e).abs() / e.abs();
            assert!(rel <= 1e-6, "coord {i}: got {g}, want {e}, rel {rel}");
        }
    }

    #[test]
    fn update_matches_f64_oracle_for_small_and_full_populations() {
        // N=2 with rewards [0,1] doubles as the direction check: z-scores
        // are [-1,+1], so the update is alpha/2 * (noise_1 - noise_0).
        oracle_check(2, &[0.0, 1.0]);
        let mut stream = NoiseStream::new(NoiseSeed(100));
        let r3: Vec<f64> = (0..3).map(|_| stream.next_uniform()).collect();
        let r30: Vec<f64> = (0..30).map(|_| stream.next_uniform()).collect();
        oracle_check(3, &r3);
        oracle_check(30, &r30);
    }

    #[test]
    fn doubling_alpha_exactly_doubles_the_update_from_zero() {
        // From zero parameters every intermediate value scales by the
        // power-of-two factor exactly, so the comparison is bitwise.
        let rewards = [0.0, 0.1, 1.0, 0.1, 0.0, 1.0];
        let cfg1 = EsConfig {
            population_size: 6,
            alpha: 5e-4,
            run_seed: NoiseSeed(3),
            ..EsConfig::default()
        };
        let cfg2 = EsConfig { alpha: 1e-3, ..cfg1.clone() };
        let results = results_for(&cfg1, 0, &rewards);
        let mut p1 = test_params(0, &[64], 0.0, 0.0);
        let mut p2 = test_params(0, &[64], 0.0, 0.0);
        apply_update(&mut p1, &results, &cfg1).unwrap();
        apply_update(&mut p2, &results, &cfg2).unwrap();
        let (a, b) = (flat_f64(&p1), flat_f64(&p2));
        assert!(a.iter().any(|v| *v != 0.0));
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn canonical_mode_rescales_by_sigma_exactly_for_power_of_two_sigma() {
        let cfg1 = EsConfig {
            population_size: 4,
            sigma: 0.5,
            run_seed: NoiseSeed(8),
            ..EsConfig::default()
        };
        let cfg2 =
            EsConfig { sigma_divisor_mode: SigmaDivisorMode::Canonical, ..cfg1.clone() };
        let results = results_for(&cfg1, 1, &[0.3, 0.9, 0.1, 0.5]);
        let mut p1 = test_params(0, &[32], 0.0, 0.0);
        let mut p2 = test_params(0, &[32], 0.0, 0.0);
        apply_update(&mut p1, &results, &cfg1).unwrap();
        apply_update(&mut p2, &results, &cfg2).unwrap();
        for (x, y) in flat_f64(&p1).iter().zip(flat_f64(&p2)) {
            assert_eq!(2.0 * x, y);
        }
    }

    #[test]
    fn equal_rewards_and_zero_alpha_leave_parameters_bit_identical() {
        let cfg = EsConfig { population_size: 5, run_seed: NoiseSeed(2), ..EsConfig::default() };
        let mut params = test_params(11, &[50], -1.0, 1.0);
        let before = params.deep_copy();
        let coeffs = apply_update(&mut params, &results_for(&cfg, 0, &[0.1; 5]), &cfg).unwrap();
        assert_eq!(coeffs, vec![0.0; 5]);
        assert!(params == before);

        let zero_alpha = EsConfig { alpha: 0.0, ..cfg };
        let varied = results_for(&zero_alpha, 0, &[0.0, 0.25, 0.5, 0.75, 1.0]);
        apply_update(&mut params, &varied, &zero_alpha).unwrap();
        assert!(params == before);
    }

    #[test]
    fn apply_update_rejects_duplicate_or_missing_members() {
        let cfg = EsConfig { population_size: 3, ..EsConfig::default() };
        let mut params = test_params(1, &[8], 0.0, 1.0);
        let mut results = results_for(&cfg, 0, &[0.1, 0.2, 0.3]);
        results[2].member_index = 1;
        assert!(matches!(
            apply_update(&mut params, &results, &cfg),
            Err(EsError::MemberIntegrity { expected: 3, .. })
        ));
        let short = &results_for(&cfg, 0, &[0.1, 0.2])[..];
        assert!(matches!(
            apply_update(&mut params, short, &cfg),
            Err(EsError::MemberIntegrity { .. })
        ));
    }

    #[test]
    fn member_eval_restores_master_and_sees_distinct_noise() {
        let params = test_params(21, &[30, 12], -0.5, 0.5);
        let before = params.deep_copy();
        let cfg = EsConfig { population_size: 4, run_seed: NoiseSeed(6), ..EsConfig::default() };
        // Reward echoes the first parameter so each member sees its own
        // perturbation.
        let echo = |p: &ParamSet| Ok(f64::from(p.iter().next().unwrap().data[0]));
        let r1 = eval_members_with(&params, &cfg, 2, 0, 4, echo).unwrap();
        assert!(params == before, "master must be untouched");
        let r2 = eval_members_with(&params, &cfg, 2, 0, 4, echo).unwrap();
        assert_eq!(r1, r2);
        let distinct: std::collections::BTreeSet<u64> =
            r1.iter().map(|r| r.reward.to_bits()).collect();
        assert_eq!(distinct.len(), 4, "each member sees distinct noise");
        assert_eq!(r1[3].member_index, 3);
        assert_eq!(r1[3].seed, member_seed(cfg.run_seed, 2, 3));
    }

    #[test]
    fn member_eval_reports_non_finite_rewards_with_the_member_index() {
        let params = test_params(3, &[4], 0.0, 1.0);
        let cfg = EsConfig { population_size: 3, ..EsConfig::default() };
        let err = eval_members_with(&params, &cfg, 0, 0, 3, |_| Ok(f64::NAN)).unwrap_err();
        assert!(matches!(err, EsError::NonFiniteReward { member: 0, .. }));
    }

    /// Copy-based oracle: perturb an explicit deep copy per member and
    /// score it with a token-counting reward; the in-place path must give
    /// the same rewards.
    #[test]
    fn population_eval_matches_copy_based_oracle() {
        let arch = PolicyArch::toy_default();
        let params = arch.init_params(&mut NoiseStream::new(NoiseSeed(14)));
        let pool = train_pool(TaskId::CountdownMini, NoiseSeed(4), 3);
        let cfg = EsConfig {
            population_size: 2,
            sigma: 1e-2,
            run_seed: NoiseSeed(31),
            ..EsConfig::default()
        };
        let count_tokens = |p: &ParamSet| -> Result<f64, EsError> {
            let mut total = 0usize;
            for ex in &pool {
                total +=
                    generate(&arch, p, &ex.prompt, 0.0, 8, None, false)?.generated.len();
            }
            Ok(total as f64)
        };
        let fast = eval_members_with(&params, &cfg, 0, 0, 2, count_tokens).unwrap();
        for member in 0..2u64 {
            let mut copy = params.deep_copy();
            copy.axpy_noise_inplace(
                cfg.sigma,
                &mut NoiseStream::new(member_seed(cfg.run_seed, 0, member)),
            )
            .unwrap();
            let mut total = 0usize;
            for ex in &pool {
                total += generate(&arch, &copy, &ex.prompt, 0.0, 8, None, false)
                    .unwrap()
                    .generated
                    .len();
            }
            assert_eq!(fast[member as usize].reward, total as f64, "member {member}");
        }
    }

    #[test]
    fn vanishing_sigma_reproduces_the_unperturbed_reward() {
        let arch = PolicyArch::toy_default();
        let params = arch.init_params(&mut NoiseStream::new(NoiseSeed(25)));
        let pool = train_pool(TaskId::Parity8, NoiseSeed(12), 6);
        let batch: Vec<&TrainExample> = pool.iter().collect();
        let cfg = EsConfig {
            population_size: 3,
            sigma: 1e-20,
            run_seed: NoiseSeed(77),
            ..EsConfig::default()
        };
        let baseline = batch_reward(&arch, &params, &batch, cfg.max_tokens).unwrap();
        let members = eval_population(&arch, &params, &cfg, 0, &batch).unwrap();
        for m in &members {
            assert_eq!(m.reward, baseline);
        }
    }

    #[test]
    fn eval_population_is_thread_count_invariant() {
        let arch = PolicyArch::toy_default();
        let params = arch.init_params(&mut NoiseStream::new(NoiseSeed(14)));
        let pool = train_pool(TaskId::Parity8, NoiseSeed(4), 8);
        let batch: Vec<&TrainExample> = pool.iter().collect();
        let serial =
            EsConfig { population_size: 6, run_seed: NoiseSeed(5), ..EsConfig::default() };
        let threaded = EsConfig { threads: 3, ..serial.clone() };
        let r1 = eval_population(&arch, &params, &serial, 0, &batch).unwrap();
        let r2 = eval_population(&arch, &params, &threaded, 0, &batch).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn population_eval_keeps_at_most_one_scratch_copy_alive() {
        let params = test_params(31, &[128], -0.2, 0.2);
        let cfg = EsConfig { population_size: 8, run_seed: NoiseSeed(7), ..EsConfig::default() };
        let live0 = gauge::live();
        let mut max_seen = 0usize;
        eval_members_with(&params, &cfg, 0, 0, 8, |_| {
            max_seen = max_seen.max(gauge::live());
            Ok(0.0)
        })
        .unwrap();
        // Master plus a single scratch copy, regardless of population size.
        assert!(max_seen <= live0 + 1, "live sets grew to {max_seen} from {live0}");
    }

    #[test]
    fn one_training_iteration_equals_manual_replay_of_the_sub_operations() {
        let arch = PolicyArch::toy_default();
        let cfg = EsConfig {
            population_size: 4,
            run_seed: NoiseSeed(55),
            batch_subsample: Some(6),
            ..EsConfig::default()
        };
        let pool = train_pool(TaskId::Parity8, cfg.run_seed, 12);

        let mut trained = arch.init_params(&mut NoiseStream::new(NoiseSeed(19)));
        es_train_pool(&arch, &mut trained, &cfg, &pool, 1, |_, _| Ok(ControlFlow::Continue(()))).unwrap();

        let mut manual = arch.init_params(&mut NoiseStream::new(NoiseSeed(19)));
        let batch = select_batch(&pool, &cfg, 0);
        let members = eval_population(&arch, &manual, &cfg, 0, &batch).unwrap();
        apply_update(&mut manual, &members, &cfg).unwrap();

        assert!(trained == manual);
    }

    #[test]
    fn training_loop_runs_and_reports_iterations() {
        let arch = PolicyArch::toy_default();
        let mut params = arch.init_params(&mut NoiseStream::new(NoiseSeed(19)));
        let pool = train_pool(TaskId::Parity8, NoiseSeed(23), 12);
        let cfg = EsConfig {
            population_size: 4,
            batch_subsample: Some(6),
            run_seed: NoiseSeed(99),
            ..EsConfig::default()
        };
        let mut seen = Vec::new();
        es_train_pool(&arch, &mut params, &cfg, &pool, 3, |_, rec| {
            assert_eq!(rec.rewards.len(), 4);
            assert_eq!(rec.coefficients.len(), 4);
            assert!(rec.mean_reward.is_finite());
            seen.push(rec.iteration);
            Ok(ControlFlow::Continue(()))
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn hook_break_stops_training_after_the_current_iteration() {
        let arch = PolicyArch::toy_default();
        let pool = train_pool(TaskId::Parity8, NoiseSeed(23), 12);
        let cfg = EsConfig {
            population_size: 4,
            batch_subsample: Some(6),
            run_seed: NoiseSeed(99),
            ..EsConfig::default()
        };
        let mut stopped = arch.init_params(&mut NoiseStream::new(NoiseSeed(19)));
        let mut seen = Vec::new();
        es_train_pool(&arch, &mut stopped, &cfg, &pool, 5, |_, rec| {
            seen.push(rec.iteration);
            Ok(if rec.iteration == 1 { ControlFlow::Break(()) } else { ControlFlow::Continue(()) })
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1]);

        let mut straight = arch.init_params(&mut NoiseStream::new(NoiseSeed(19)));
        es_train_pool(&arch, &mut straight, &cfg, &pool, 2, |_, _| Ok(ControlFlow::Continue(())))
            .unwrap();
        assert_eq!(flat_f64(&stopped), flat_f64(&straight));
    }

    #[test]
    fn training_is_deterministic() {
        let arch = PolicyArch::toy_default();
        let pool = train_pool(TaskId::Parity8, NoiseSeed(23), 12);
        let cfg = EsConfig {
            population_size: 4,
            batch_subsample: Some(6),
            run_seed: NoiseSeed(99),
            ..EsConfig::default()
        };
        let run = || {
            let mut params = arch.init_params(&mut NoiseStream::new(NoiseSeed(19)));
            let mut rewards = Vec::new();
            es_train_pool(&arch, &mut params, &cfg, &pool, 2, |_, rec| {
                rewards.extend(rec.rewards.iter().map(|r| r.to_bits()));
                Ok(ControlFlow::Continue(()))
            })
            .unwrap();
            (flat_f64(&params), rewards)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batch_selection_subsamples_without_replacement() {
        let pool = train_pool(TaskId::CountdownMini, NoiseSeed(1), 20);
        let cfg = EsConfig {
            batch_subsample: Some(8),
            run_seed: NoiseSeed(5),
            ..EsConfig::default()
        };
        let batch = select_batch(&pool, &cfg, 3);
        assert_eq!(batch.len(), 8);
        let unique: std::collections::BTreeSet<*const TrainExample> =
            batch.iter().map(|e| *e as *const TrainExample).collect();
        assert_eq!(unique.len(), 8);
        let again = select_batch(&pool, &cfg, 3);
        assert_eq!(
            batch.iter().map(|e| e.prompt.clone()).collect::<Vec<_>>(),
            again.iter().map(|e| e.prompt.clone()).collect::<Vec<_>>()
        );
        let full = select_batch(&pool, &EsConfig::default(), 3);
        assert_eq!(full.len(), 20);
        assert_eq!(full[0].prompt, pool[0].prompt);
    }

    #[test]
    fn member_seeds_are_distinct_across_iterations_and_members() {
        let mut seen = std::collections::BTreeSet::new();
        for iter in 0..50u64 {
            for m in 0..30u64 {
                assert!(seen.insert(member_seed(NoiseSeed(42), iter, m).0));
            }
        }
    }

    #[test]
    fn rank_transform_updates_follow_centered_ranks() {
        let cfg = EsConfig {
            population_size: 3,
            rank_transform: true,
            run_seed: NoiseSeed(13),
            ..EsConfig::default()
        };
        let results = results_for(&cfg, 0, &[0.3, 0.1, 0.9]);
        let mut params = test_params(0, &[16], 0.0, 0.0);
        let coeffs = apply_update(&mut params, &results, &cfg).unwrap();
        let want: Vec<f64> =
            centered_ranks(&[0.3, 0.1, 0.9]).unwrap().iter().map(|s| cfg.alpha * s / 3.0).collect();
        assert_eq!(coeffs, want);
    }

    #[test]
    fn config_validation_rejects_bad_settings() {
        let ok = EsConfig::default();
        assert!(ok.validate().is_ok());
        assert!(matches!(
            EsConfig { population_size: 1, ..ok.clone() }.validate(),
            Err(EsError::PopulationTooSmall(1))
        ));
        assert!(matches!(
            EsConfig { sigma: 0.0, ..ok.clone() }.validate(),
            Err(EsError::BadSigma(_))
        ));
        assert!(matches!(
            EsConfig { sigma: f64::NAN, ..ok.clone() }.validate(),
            Err(EsError::BadSigma(_))
        ));
        assert!(matches!(
            EsConfig { alpha: -1.0, ..ok }.validate(),
            Err(EsError::BadAlpha(_))
        ));
    }

    #[test]
    fn parity_tokens_are_graded_from_single_token_rollouts() {
        // Keeping parity rollouts to one token must not change grades:
        // only the first token is ever scored.
        let arch = PolicyArch::toy_default();
        let params = arch.init_params(&mut NoiseStream::new(NoiseSeed(40)));
        let pool = train_pool(TaskId::Parity8, NoiseSeed(4), 6);
        let batch: Vec<&TrainExample> = pool.iter().collect();
        let capped = batch_reward(&arch, &params, &batch, 1).unwrap();
        let generous = batch_reward(&arch, &params, &batch, 16).unwrap();
        assert_eq!(capped, generous);
    }
}
