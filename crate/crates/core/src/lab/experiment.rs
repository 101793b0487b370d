//! Three-phase experiment driver: pretrain a base policy, fine-tune it
//! with the configured method while checkpointing, then evaluate every
//! checkpoint against the frozen base and write the run's artifacts.

use std::fs;
use std::ops::ControlFlow;
use std::path::PathBuf;

use crate::analysis::{kl_exact, pareto_table, sparsity_profile, RunLog, RunRow, SparsityProfile};
use crate::es::{es_train, EsConfig};
use crate::grpo::{grpo_train, grpo_train_pool, GrpoConfig};
use crate::noise::{derive_seed, NoiseStream};
use crate::params::{diff_frobenius, ParamSet, DEFAULT_TAU};
use crate::policy::{Evaluator, PolicyArch, TokenId};
use crate::tasks::{evaluate, eval_pool, format_pool, train_pool, TrainExample, TRAIN_POOL_SIZE};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{ExperimentConfig, TrainMethod};
use super::{io_at, report, thread_cap, LabError};

/// Seed-domain tags separating the lab's derived streams.
mod domains {
    /// Base-policy weight initialization.
    pub const INIT: u64 = 0x4C41_4249_4E49;
    /// Pretraining trainer seed.
    pub const PRETRAIN: u64 = 0x4C41_4250_5245;
    /// Per-epoch seeds for pretraining's prior-task passes.
    pub const PRIOR_EPOCH: u64 = 0x4C41_4250_5250;
    /// Per-epoch seeds for pretraining's format passes.
    pub const FORMAT_EPOCH: u64 = 0x4C41_4250_5246;
}

/// Paths to everything a finished run left on disk, plus the evaluated
/// history backing the CSVs.
#[derive(Debug)]
pub struct ExperimentArtifacts {
    pub run_log: RunLog,
    pub base_checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
    pub sparsity_csv: PathBuf,
    pub pareto_csv: PathBuf,
    pub report_svg: PathBuf,
}

/// Mean greedy reward over a pool, as training would score it.
fn greedy_pool_reward(
    arch: &PolicyArch,
    params: &ParamSet,
    pool: &[TrainExample],
) -> Result<f64, LabError> {
    let mut eval = Evaluator::new(arch, params)?;
    let mut total = 0.0;
    for ex in pool {
        let rollout = eval.generate(&ex.prompt, 0.0, ex.max_output_tokens(), None, false)?;
        total += ex.grade(&rollout.generated);
    }
    Ok(total / pool.len().max(1) as f64)
}

/// Trains `params` with the gradient method until the base is competent
/// on both fronts: held-out prior-task accuracy at `target_accuracy`, and
/// greedy format score on the new task at `format_target` (so fine-tuning
/// starts with nonzero reward signal). Errors if the epoch cap runs out
/// with either target unmet.
///
/// Prior-task epochs and format epochs interleave, each one full pass
/// over its own pool. Prior-task epochs carry a KL penalty toward the
/// random initialization, which keeps sampling stochastic enough that
/// group rewards stay varied; without it the policy turns deterministic
/// within a few epochs, every group ties, and the zero-variance guard
/// freezes learning for good. Format epochs drop the penalty: its
/// gradient weight scales with the sequence-level probability ratio,
/// which is explosive for multi-token outputs once the policy has moved
/// away from the reference.
fn pretrain(
    arch: &PolicyArch,
    params: &mut ParamSet,
    cfg: &ExperimentConfig,
) -> Result<(), LabError> {
    let n_format = (cfg.pretrain.format_mix * TRAIN_POOL_SIZE as f64).round() as usize;
    let prior_pool = train_pool(cfg.task_prior, cfg.run_seed, TRAIN_POOL_SIZE);
    let fmt_pool = format_pool(cfg.run_seed, n_format);
    let reference = params.deep_copy();
    let pre_seed = derive_seed(cfg.run_seed, domains::PRETRAIN, 0);
    let epoch_cfg = GrpoConfig {
        kl_beta: cfg.pretrain.kl_beta,
        learning_rate: cfg.pretrain.learning_rate,
        group_size: cfg.pretrain.group_size,
        ..cfg.grpo.clone()
    };
    let keep_going = |_: &ParamSet, _: &crate::grpo::GrpoIteration| Ok(ControlFlow::Continue(()));

    let target = cfg.pretrain.target_accuracy;
    let fmt_target = cfg.pretrain.format_target;
    let mut prior_acc = 0.0f64;
    let mut fmt_score = 0.0f64;
    for epoch in 0..cfg.pretrain.iterations {
        let prior_cfg = GrpoConfig {
            run_seed: derive_seed(pre_seed, domains::PRIOR_EPOCH, epoch as u64),
            ..epoch_cfg.clone()
        };
        grpo_train_pool(arch, params, &reference, &prior_cfg, &prior_pool, 1, keep_going)?;
        if !fmt_pool.is_empty() {
            let fmt_cfg = GrpoConfig {
                kl_beta: 0.0,
                run_seed: derive_seed(pre_seed, domains::FORMAT_EPOCH, epoch as u64),
                ..epoch_cfg.clone()
            };
            grpo_train_pool(arch, params, &reference, &fmt_cfg, &fmt_pool, 1, keep_going)?;
        }
        prior_acc = evaluate(arch, params, cfg.task_prior, cfg.eval_n, cfg.run_seed)?;
        fmt_score = if fmt_pool.is_empty() {
            fmt_target
        } else {
            greedy_pool_reward(arch, params, &fmt_pool)?
        };
        if prior_acc >= target && fmt_score >= fmt_target {
            return Ok(());
        }
    }
    let (unmet_target, reached) =
        if prior_acc < target { (target, prior_acc) } else { (fmt_target, fmt_score) };
    Err(LabError::PretrainTargetMissed {
        target: unmet_target,
        reached,
        iterations: cfg.pretrain.iterations,
    })
}

/// Runs the full experiment described by `cfg` and writes its artifacts
/// under `cfg.output_dir`.
///
/// Phase 1 pretrains a base policy and saves it as `base.esck`. Phase 2
/// fine-tunes a copy on the new task, saving `ckpt-NNNN.esck` every
/// `checkpoint_every` iterations and always at the end. Phase 3 reloads
/// each checkpoint from disk and scores it: held-out accuracy on both
/// tasks, parameter distance and divergence from the base, and training
/// reward (the base row reports the pool's greedy reward before any
/// update). Results land in `metrics.csv`, `sparsity.csv`, `pareto.csv`,
/// and `report.svg`, all byte-deterministic for a given configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentArtifacts, LabError> {
    cfg.validate()?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| io_at(dir, e))?;

    let arch = PolicyArch::toy_default();
    let mut stream = NoiseStream::new(derive_seed(cfg.run_seed, domains::INIT, 0));
    let mut params = arch.init_params(&mut stream);

    pretrain(&arch, &mut params, cfg)?;
    let base_checkpoint = dir.join("base.esck");
    save_checkpoint(&params, &base_checkpoint)?;
    let base = params.deep_copy();

    // Phase 2: fine-tune, recording training rewards and checkpoints.
    let iterations = cfg.finetune.iterations;
    let every = cfg.finetune.checkpoint_every;
    let mut training_rewards: Vec<f64> = Vec::with_capacity(iterations);
    let mut saved: Vec<(usize, PathBuf)> = Vec::new();
    let mut hook_err: Option<LabError> = None;
    macro_rules! record_iteration {
        ($p:expr, $rec:expr) => {{
            training_rewards.push($rec.mean_reward);
            let completed = $rec.iteration + 1;
            if completed % every == 0 || completed == iterations {
                let path = dir.join(format!("ckpt-{completed:04}.esck"));
                match save_checkpoint($p, &path) {
                    Ok(()) => saved.push((completed, path)),
                    Err(e) => {
                        hook_err = Some(e.into());
                        return Ok(ControlFlow::Break(()));
                    }
                }
            }
            Ok(ControlFlow::Continue(()))
        }};
    }
    match cfg.finetune.method {
        TrainMethod::Es => {
            let es_cfg = EsConfig { threads: thread_cap()?, ..cfg.es.clone() };
            es_train(&arch, &mut params, &es_cfg, cfg.task_new, iterations, |p, rec| {
                record_iteration!(p, rec)
            })?;
        }
        TrainMethod::Grpo => {
            grpo_train(&arch, &mut params, &base, &cfg.grpo, cfg.task_new, iterations, |p, rec| {
                record_iteration!(p, rec)
            })?;
        }
    }
    if let Some(e) = hook_err {
        return Err(e);
    }

    // Phase 3: reload every checkpoint (round-tripping through disk) and
    // evaluate it against the frozen base.
    let kl_prompts: Vec<Vec<TokenId>> = eval_pool(cfg.task_new, cfg.run_seed, cfg.eval_n)
        .into_iter()
        .map(|ex| ex.prompt)
        .collect();
    let kl_tokens = cfg.task_new.max_output_tokens();
    let finetune_pool = train_pool(cfg.task_new, cfg.run_seed, TRAIN_POOL_SIZE);
    let base_train_reward = greedy_pool_reward(&arch, &base, &finetune_pool)?;

    let mut checkpoint_list: Vec<(usize, PathBuf)> = vec![(0, base_checkpoint.clone())];
    checkpoint_list.extend(saved);

    let mut run_log = RunLog::new();
    let mut sparsity_rows: Vec<(usize, SparsityProfile)> = Vec::new();
    for (iteration, path) in &checkpoint_list {
        let loaded = load_checkpoint(path)?;
        let row = RunRow {
            iteration: *iteration,
            new_task_acc: evaluate(&arch, &loaded, cfg.task_new, cfg.eval_n, cfg.run_seed)?,
            prior_task_acc: evaluate(&arch, &loaded, cfg.task_prior, cfg.eval_n, cfg.run_seed)?,
            mean_reward: match iteration {
                0 => base_train_reward,
                k => training_rewards[k - 1],
            },
            frobenius_vs_base: diff_frobenius(&base, &loaded)?,
            kl_vs_base: kl_exact(&arch, &loaded, &base, &kl_prompts, kl_tokens)?,
        };
        run_log.push_row(row)?;
        run_log.add_checkpoint(*iteration, path.clone());
        sparsity_rows.push((*iteration, sparsity_profile(&base, &loaded, DEFAULT_TAU)?));
    }

    let metrics_csv = dir.join("metrics.csv");
    let sparsity_csv = dir.join("sparsity.csv");
    let pareto_csv = dir.join("pareto.csv");
    report::write_metrics_csv(&metrics_csv, cfg.finetune.method.name(), run_log.rows())?;
    report::write_sparsity_csv(&sparsity_csv, &sparsity_rows)?;
    report::write_pareto_csv(&pareto_csv, &pareto_table(&run_log))?;
    let report_svg = report::write_report(dir)?;

    Ok(ExperimentArtifacts {
        run_log,
        base_checkpoint,
        metrics_csv,
        sparsity_csv,
        pareto_csv,
        report_svg,
    })
}
