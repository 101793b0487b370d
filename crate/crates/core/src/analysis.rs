//! Run diagnostics: parameter drift curves, layerwise update sparsity,
//! exact policy-to-policy KL divergence, and accuracy trade-off tables.
//!
//! Everything here is a pure function over parameter snapshots and run
//! records; the experiment driver calls these and serializes the results.

use std::path::PathBuf;

use crate::params::{diff_frobenius, diff_sparsity, GroupSparsity, ParamError, ParamSet};
use crate::policy::{Evaluator, PolicyArch, PolicyError, TokenId};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("row iteration {iteration} does not increase past {previous}")]
    NonIncreasingIteration { previous: usize, iteration: usize },
    #[error("{field} = {value} lies outside [0, 1]")]
    AccuracyOutOfRange { field: &'static str, value: f64 },
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// One evaluated checkpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRow {
    pub iteration: usize,
    pub new_task_acc: f64,
    pub prior_task_acc: f64,
    pub mean_reward: f64,
    pub frobenius_vs_base: f64,
    pub kl_vs_base: f64,
}

/// Evaluated history of one fine-tuning run, in iteration order.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    rows: Vec<RunRow>,
    checkpoints: Vec<(usize, PathBuf)>,
}

impl RunLog {
    pub fn new() -> RunLog {
        RunLog::default()
    }

    /// Appends a row, enforcing strictly increasing iterations and
    /// accuracies in [0, 1].
    pub fn push_row(&mut self, row: RunRow) -> Result<(), AnalysisError> {
        if let Some(last) = self.rows.last() {
            if row.iteration <= last.iteration {
                return Err(AnalysisError::NonIncreasingIteration {
                    previous: last.iteration,
                    iteration: row.iteration,
                });
            }
        }
        for (field, value) in [
            ("new_task_acc", row.new_task_acc),
            ("prior_task_acc", row.prior_task_acc),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(AnalysisError::AccuracyOutOfRange { field, value });
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn add_checkpoint(&mut self, iteration: usize, path: PathBuf) {
        self.checkpoints.push((iteration, path));
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn checkpoints(&self) -> &[(usize, PathBuf)] {
        &self.checkpoints
    }
}

/// Frobenius distance of each checkpoint from the base snapshot.
pub fn drift_curve(
    base: &ParamSet,
    checkpoints: &[(usize, ParamSet)],
) -> Result<Vec<(usize, f64)>, AnalysisError> {
    checkpoints
        .iter()
        .map(|(iter, ckpt)| Ok((*iter, diff_frobenius(base, ckpt)?)))
        .collect()
}

/// Per-(layer, kind) sparsity of `checkpoint - base` at threshold `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityProfile {
    pub tau: f64,
    /// Buckets sorted by (layer_index, kind code); counts reported so
    /// tiny buckets (biases, norms) are not over-read.
    pub rows: Vec<GroupSparsity>,
}

impl SparsityProfile {
    pub fn total_count(&self) -> usize {
        self.rows.iter().map(|g| g.count).sum()
    }

    /// Count-weighted mean sparsity, equal to the whole-model fraction.
    pub fn overall(&self) -> f64 {
        let total = self.total_count();
        if total == 0 {
            return 0.0;
        }
        let below: f64 = self.rows.iter().map(|g| g.sparsity * g.count as f64).sum();
        below / total as f64
    }
}

pub fn sparsity_profile(
    base: &ParamSet,
    checkpoint: &ParamSet,
    tau: f64,
) -> Result<SparsityProfile, AnalysisError> {
    let stats = diff_sparsity(base, checkpoint, tau)?;
    Ok(SparsityProfile { tau: stats.tau, rows: stats.groups })
}

/// Pointwise KL divergence `sum_v p(v) * ln(p(v) / q(v))` of two
/// distributions over the same vocabulary.
pub fn kl_pointwise(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut sum = 0.0;
    for (pv, qv) in p.iter().zip(q) {
        if *pv > 0.0 {
            sum += pv * libm::log(pv / qv);
        }
    }
    sum
}

/// Exact KL between two policies, pooled over prompts and positions.
///
/// Rollouts are greedy under `p_params`; at every generated position the
/// full next-token distributions of both policies are compared, and the
/// result is the mean over all (prompt, position) pairs. Exact because
/// the toy vocabulary makes full distributions cheap; softmax keeps both
/// sides strictly positive.
pub fn kl_exact(
    arch: &PolicyArch,
    p_params: &ParamSet,
    q_params: &ParamSet,
    prompts: &[Vec<TokenId>],
    max_tokens: usize,
) -> Result<f64, AnalysisError> {
    let mut pe = Evaluator::new(arch, p_params)?;
    let mut qe = Evaluator::new(arch, q_params)?;
    let mut sum = 0.0;
    let mut positions = 0usize;
    for prompt in prompts {
        let rollout = pe.generate(prompt, 0.0, max_tokens, None, true)?;
        let dists = rollout.dists.expect("distributions requested");
        let mut context = prompt.clone();
        for (pdist, tok) in dists.iter().zip(&rollout.generated) {
            let qdist = qe.dist(&context)?;
            sum += kl_pointwise(pdist, &qdist);
            positions += 1;
            context.push(*tok);
        }
    }
    Ok(if positions == 0 { 0.0 } else { sum / positions as f64 })
}

/// (new-task accuracy, prior-task accuracy, iteration) per checkpoint,
/// in iteration order and unfiltered.
pub fn pareto_table(run: &RunLog) -> Vec<(f64, f64, usize)> {
    run.rows()
        .iter()
        .map(|r| (r.new_task_acc, r.prior_task_acc, r.iteration))
        .collect()
}
