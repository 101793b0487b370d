//! Experiment configuration: a flat `key = value` format with `#`
//! comments and dotted keys, parsed strictly — unknown or duplicate keys
//! fail with their line number, and every omitted key falls back to a
//! default that is logged so runs are auditable from their output alone.

use std::path::PathBuf;

use crate::es::{EsConfig, SigmaDivisorMode};
use crate::grpo::GrpoConfig;
use crate::noise::NoiseSeed;
use crate::tasks::{TaskId, EVAL_SET_SIZE};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {detail}")]
    BadValue { line: usize, key: String, detail: String },
    #[error("invalid configuration: {detail}")]
    Invalid { detail: String },
}

/// Which trainer drives the fine-tuning phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethod {
    Es,
    Grpo,
}

impl TrainMethod {
    pub fn parse(s: &str) -> Option<TrainMethod> {
        match s {
            "es" => Some(TrainMethod::Es),
            "grpo" => Some(TrainMethod::Grpo),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMethod::Es => "es",
            TrainMethod::Grpo => "grpo",
        }
    }
}

/// Phase-1 settings: manufacture a competent base policy with the
/// gradient method.
///
/// Pretraining interleaves prior-task epochs with new-task format
/// epochs. Prior-task epochs carry a KL penalty toward the random
/// initialization: without it the policy goes deterministic within a few
/// epochs, every group's rewards tie, and the zero-variance guard stops
/// all learning. Format epochs drop the penalty because its gradient
/// weight grows with the sequence-level probability ratio, which is
/// explosive for multi-token outputs far from the reference.
#[derive(Debug, Clone)]
pub struct PretrainSpec {
    /// Epoch cap; training stops early once both targets are reached.
    pub iterations: usize,
    /// Required held-out prior-task accuracy of the finished base.
    pub target_accuracy: f64,
    /// Size of the format epoch pool as a fraction of the training pool;
    /// zero disables format epochs.
    pub format_mix: f64,
    /// Required greedy format score of the finished base (vacuous when
    /// format epochs are disabled).
    pub format_target: f64,
    /// Step size for the pretraining phase only.
    pub learning_rate: f64,
    /// Rollouts per prompt; larger groups damp the advantage spike a lone
    /// failure gets once a prompt is nearly solved.
    pub group_size: usize,
    /// KL weight toward the random initialization for prior-task epochs.
    pub kl_beta: f64,
}

/// Phase-2 settings: the fine-tuning run under study.
#[derive(Debug, Clone)]
pub struct FinetuneSpec {
    pub method: TrainMethod,
    pub iterations: usize,
    /// Checkpoint cadence; the final iteration is always checkpointed.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub run_seed: NoiseSeed,
    pub task_new: TaskId,
    pub task_prior: TaskId,
    pub pretrain: PretrainSpec,
    pub finetune: FinetuneSpec,
    pub es: EsConfig,
    pub grpo: GrpoConfig,
    /// Held-out instances per task per evaluation.
    pub eval_n: usize,
    pub output_dir: PathBuf,
    /// One "`key` defaulting to `value`" note per omitted key.
    pub defaults_applied: Vec<String>,
}

/// (key, value, line number) triples in file order.
fn parse_raw(text: &str) -> Result<Vec<(String, String, usize)>, ConfigError> {
    let mut entries: Vec<(String, String, usize)> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let uncommented = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let trimmed = uncommented.trim();
        if trimmed.is_empty() {
            continue;
        }
        let Some((lhs, rhs)) = trimmed.split_once('=') else {
            return Err(ConfigError::Malformed { line, text: trimmed.to_string() });
        };
        let key = lhs.trim();
        let value = rhs.trim();
        if key.is_empty() || value.is_empty() {
            return Err(ConfigError::Malformed { line, text: trimmed.to_string() });
        }
        if entries.iter().any(|(k, _, _)| k == key) {
            return Err(ConfigError::DuplicateKey { line, key: key.to_string() });
        }
        entries.push((key.to_string(), value.to_string(), line));
    }
    Ok(entries)
}

/// Pulls typed values out of the raw entries, tracking which keys were
/// consumed and which defaults had to be applied.
struct Fetcher {
    entries: Vec<(String, String, usize)>,
    used: Vec<bool>,
    defaults: Vec<String>,
}

impl Fetcher {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        for (i, (k, v, line)) in self.entries.iter().enumerate() {
            if k == key && !self.used[i] {
                self.used[i] = true;
                return Some((v.clone(), *line));
            }
        }
        None
    }

    fn parse_with<T>(
        &mut self,
        key: &str,
        default: T,
        shown_default: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ConfigError> {
        match self.take(key) {
            Some((value, line)) => parse(&value).map_err(|detail| ConfigError::BadValue {
                line,
                key: key.to_string(),
                detail,
            }),
            None => {
                self.defaults.push(format!("{key} defaulting to {shown_default}"));
                Ok(default)
            }
        }
    }

    fn u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parse_with(key, default, &default.to_string(), |v| {
            v.parse::<u64>().map_err(|e| e.to_string())
        })
    }

    fn usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parse_with(key, default, &default.to_string(), |v| {
            v.parse::<usize>().map_err(|e| e.to_string())
        })
    }

    fn f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parse_with(key, default, &default.to_string(), |v| {
            v.parse::<f64>().map_err(|e| e.to_string())
        })
    }

    fn bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        self.parse_with(key, default, &default.to_string(), |v| match v {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(format!("expected true or false, got `{other}`")),
        })
    }

    fn task(&mut self, key: &str, default: TaskId) -> Result<TaskId, ConfigError> {
        self.parse_with(key, default, default.name(), |v| {
            TaskId::parse(v).map_err(|e| e.to_string())
        })
    }

    fn method(&mut self, key: &str, default: TrainMethod) -> Result<TrainMethod, ConfigError> {
        self.parse_with(key, default, default.name(), |v| {
            TrainMethod::parse(v).ok_or_else(|| format!("expected es or grpo, got `{v}`"))
        })
    }

    fn unused(&self) -> Option<(String, usize)> {
        self.entries
            .iter()
            .zip(&self.used)
            .find(|(_, used)| !**used)
            .map(|((k, _, line), _)| (k.clone(), *line))
    }
}

impl ExperimentConfig {
    /// Parses config text; omitted keys take defaults and are recorded in
    /// `defaults_applied` for the caller to log.
    pub fn from_text(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let entries = parse_raw(text)?;
        let used = vec![false; entries.len()];
        let mut f = Fetcher { entries, used, defaults: Vec::new() };

        let run_seed = NoiseSeed(f.u64("run_seed", 0)?);
        let task_new = f.task("task.new", TaskId::CountdownMini)?;
        let task_prior = f.task("task.prior", TaskId::Parity8)?;

        let pretrain = PretrainSpec {
            iterations: f.usize("pretrain.iterations", 600)?,
            target_accuracy: f.f64("pretrain.target_accuracy", 0.95)?,
            format_mix: f.f64("pretrain.format_mix", 0.5)?,
            format_target: f.f64("pretrain.format_target", 0.9)?,
            learning_rate: f.f64("pretrain.learning_rate", 0.7)?,
            group_size: f.usize("pretrain.group_size", 64)?,
            kl_beta: f.f64("pretrain.kl_beta", 0.03)?,
        };
        let finetune = FinetuneSpec {
            method: f.method("finetune.method", TrainMethod::Es)?,
            iterations: f.usize("finetune.iterations", 300)?,
            checkpoint_every: f.usize("finetune.checkpoint_every", 25)?,
        };

        let es_defaults = EsConfig::default();
        let es = EsConfig {
            population_size: f.usize("es.population_size", es_defaults.population_size)?,
            sigma: f.f64("es.sigma", es_defaults.sigma)?,
            alpha: f.f64("es.alpha", es_defaults.alpha)?,
            max_tokens: f.usize("es.max_tokens", es_defaults.max_tokens)?,
            sigma_divisor_mode: f.parse_with(
                "es.sigma_divisor_mode",
                es_defaults.sigma_divisor_mode,
                es_defaults.sigma_divisor_mode.name(),
                |v| {
                    SigmaDivisorMode::parse(v)
                        .ok_or_else(|| format!("expected as_written or canonical, got `{v}`"))
                },
            )?,
            rank_transform: f.bool("es.rank_transform", es_defaults.rank_transform)?,
            batch_subsample: f.parse_with("es.batch_subsample", None, "none", |v| {
                if v == "none" {
                    Ok(None)
                } else {
                    v.parse::<usize>().map(Some).map_err(|e| e.to_string())
                }
            })?,
            run_seed,
            threads: es_defaults.threads,
        };

        let grpo_defaults = GrpoConfig::default();
        let grpo = GrpoConfig {
            group_size: f.usize("grpo.group_size", grpo_defaults.group_size)?,
            clip_eps: f.f64("grpo.clip_eps", grpo_defaults.clip_eps)?,
            kl_beta: f.f64("grpo.kl_beta", grpo_defaults.kl_beta)?,
            learning_rate: f.f64("grpo.learning_rate", grpo_defaults.learning_rate)?,
            sample_temperature: f.f64("grpo.sample_temperature", grpo_defaults.sample_temperature)?,
            minibatch: f.usize("grpo.minibatch", grpo_defaults.minibatch)?,
            run_seed,
        };

        let eval_n = f.usize("eval.n", EVAL_SET_SIZE)?;
        let output_dir = PathBuf::from(f.parse_with(
            "output.dir",
            "runs/default".to_string(),
            "runs/default",
            |v| Ok(v.to_string()),
        )?);

        if let Some((key, line)) = f.unused() {
            return Err(ConfigError::UnknownKey { line, key });
        }

        let cfg = ExperimentConfig {
            run_seed,
            task_new,
            task_prior,
            pretrain,
            finetune,
            es,
            grpo,
            eval_n,
            output_dir,
            defaults_applied: f.defaults,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |detail: String| Err(ConfigError::Invalid { detail });
        if self.task_new == self.task_prior {
            return invalid("task.new and task.prior must differ".into());
        }
        if self.pretrain.iterations == 0 {
            return invalid("pretrain.iterations must be at least 1".into());
        }
        let t = self.pretrain.target_accuracy;
        if !(t.is_finite() && 0.0 < t && t <= 1.0) {
            return invalid(format!("pretrain.target_accuracy {t} must lie in (0, 1]"));
        }
        let m = self.pretrain.format_mix;
        if !(m.is_finite() && (0.0..1.0).contains(&m)) {
            return invalid(format!("pretrain.format_mix {m} must lie in [0, 1)"));
        }
        let ft = self.pretrain.format_target;
        if !(ft.is_finite() && 0.0 < ft && ft <= 1.0) {
            return invalid(format!("pretrain.format_target {ft} must lie in (0, 1]"));
        }
        if !(self.pretrain.learning_rate.is_finite() && self.pretrain.learning_rate > 0.0) {
            return invalid(format!(
                "pretrain.learning_rate {} must be positive",
                self.pretrain.learning_rate
            ));
        }
        if self.pretrain.group_size < 2 {
            return invalid(format!(
                "pretrain.group_size {} must be at least 2",
                self.pretrain.group_size
            ));
        }
        if !(self.pretrain.kl_beta.is_finite() && self.pretrain.kl_beta >= 0.0) {
            return invalid(format!(
                "pretrain.kl_beta {} must be finite and non-negative",
                self.pretrain.kl_beta
            ));
        }
        if self.finetune.iterations == 0 {
            return invalid("finetune.iterations must be at least 1".into());
        }
        if self.finetune.checkpoint_every == 0 {
            return invalid("finetune.checkpoint_every must be at least 1".into());
        }
        if self.eval_n == 0 {
            return invalid("eval.n must be at least 1".into());
        }
        self.es.validate().map_err(|e| ConfigError::Invalid { detail: e.to_string() })?;
        self.grpo.validate().map_err(|e| ConfigError::Invalid { detail: e.to_string() })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_all_defaults_and_logs_them() {
        let cfg = ExperimentConfig::from_text("").unwrap();
        assert_eq!(cfg.run_seed, NoiseSeed(0));
        assert_eq!(cfg.task_new, TaskId::CountdownMini);
        assert_eq!(cfg.task_prior, TaskId::Parity8);
        assert_eq!(cfg.finetune.method, TrainMethod::Es);
        assert_eq!(cfg.finetune.iterations, 300);
        assert_eq!(cfg.finetune.checkpoint_every, 25);
        assert_eq!(cfg.es.sigma, 1e-3);
        assert_eq!(cfg.es.alpha, 5e-4);
        assert_eq!(cfg.es.population_size, 30);
        assert_eq!(cfg.grpo.group_size, 30);
        assert_eq!(cfg.grpo.kl_beta, 1e-3);
        assert_eq!(cfg.eval_n, EVAL_SET_SIZE);
        assert!(cfg
            .defaults_applied
            .iter()
            .any(|d| d == "es.sigma defaulting to 0.001"));
        assert!(cfg
            .defaults_applied
            .iter()
            .any(|d| d == "finetune.method defaulting to es"));
    }

    #[test]
    fn explicit_keys_override_defaults_and_are_not_logged() {
        let text = "\
# fine-tune settings
run_seed = 42
finetune.method = grpo   # gradient baseline
finetune.iterations = 50
es.sigma = 0.01
es.batch_subsample = 64
grpo.learning_rate = 0.125
output.dir = out/run1
";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.run_seed, NoiseSeed(42));
        assert_eq!(cfg.finetune.method, TrainMethod::Grpo);
        assert_eq!(cfg.finetune.iterations, 50);
        assert_eq!(cfg.es.sigma, 0.01);
        assert_eq!(cfg.es.batch_subsample, Some(64));
        assert_eq!(cfg.grpo.learning_rate, 0.125);
        assert_eq!(cfg.output_dir, PathBuf::from("out/run1"));
        assert_eq!(cfg.es.run_seed, NoiseSeed(42));
        assert_eq!(cfg.grpo.run_seed, NoiseSeed(42));
        assert!(!cfg.defaults_applied.iter().any(|d| d.starts_with("es.sigma ")));
        assert!(cfg.defaults_applied.iter().any(|d| d.starts_with("es.alpha ")));
    }

    #[test]
    fn unknown_key_reports_its_line_number() {
        let text = "run_seed = 1\n\n# comment\nes.sigmaa = 0.1\n";
        match ExperimentConfig::from_text(text).unwrap_err() {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 4);
                assert_eq!(key, "es.sigmaa");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_lines_and_bad_values_report_line_numbers() {
        match ExperimentConfig::from_text("run_seed 1\n").unwrap_err() {
            ConfigError::Malformed { line: 1, .. } => {}
            other => panic!("unexpected {other:?}"),
        }
        match ExperimentConfig::from_text("\nes.sigma = banana\n").unwrap_err() {
            ConfigError::BadValue { line, key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "es.sigma");
            }
            other => panic!("unexpected {other:?}"),
        }
        match ExperimentConfig::from_text("run_seed = 1\nrun_seed = 2\n").unwrap_err() {
            ConfigError::DuplicateKey { line: 2, .. } => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cross_field_validation_rejects_bad_ranges() {
        assert!(matches!(
            ExperimentConfig::from_text("pretrain.target_accuracy = 0\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_text("pretrain.format_mix = 1.0\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_text("pretrain.group_size = 1\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_text("pretrain.format_target = 1.25\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_text("task.prior = countdown-mini\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_text("grpo.clip_eps = 1.5\n"),
            Err(ConfigError::Invalid { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_text("finetune.checkpoint_every = 0\n"),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# full line\n\n   \nrun_seed = 7 # trailing\n#es.sigma = 9\n";
        let cfg = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(cfg.run_seed, NoiseSeed(7));
        assert_eq!(cfg.es.sigma, 1e-3);
    }
}
