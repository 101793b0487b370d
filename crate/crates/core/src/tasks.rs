//! Toy task definitions: instance generation, prompts, and rewards.
//!
//! Two tasks share one vocabulary. `countdown-mini` shows three digits and
//! a reachable target; the policy must emit `num op num op num <eos>`
//! using each digit exactly once, evaluated strictly left to right.
//! `parity8` shows eight bits; the first output token must be the XOR
//! label. Instances are pure functions of a seed, and training, held-out
//! evaluation, and pretraining draws come from disjoint seed domains.

use crate::noise::{derive_seed, NoiseSeed, NoiseStream};
use crate::params::ParamSet;
use crate::policy::{tokens, Evaluator, PolicyArch, PolicyError, TokenId};

/// Seed domains separating instance families.
pub mod seed_domains {
    /// Fine-tuning / pretraining training pools.
    pub const TRAIN: u64 = 0x7452_4149_4e01;
    /// Held-out evaluation sets.
    pub const EVAL: u64 = 0x4556_414c_0002;
    /// Format-shaping examples mixed into pretraining.
    pub const PRETRAIN_FORMAT: u64 = 0x464f_524d_0003;
}

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("unknown task id {0:?}; expected countdown-mini or parity8")]
    UnknownTask(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// The two built-in tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskId {
    CountdownMini,
    Parity8,
}

impl TaskId {
    pub fn parse(s: &str) -> Result<TaskId, TaskError> {
        match s {
            "countdown-mini" => Ok(TaskId::CountdownMini),
            "parity8" => Ok(TaskId::Parity8),
            other => Err(TaskError::UnknownTask(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::CountdownMini => "countdown-mini",
            TaskId::Parity8 => "parity8",
        }
    }

    /// Generation cap that comfortably covers a well-formed answer.
    pub fn max_output_tokens(self) -> usize {
        match self {
            // num op num op num <eos> is six tokens; allow a little slack.
            TaskId::CountdownMini => 8,
            // Only the first token is graded.
            TaskId::Parity8 => 1,
        }
    }

    fn domain_tag(self) -> u64 {
        match self {
            TaskId::CountdownMini => 1,
            TaskId::Parity8 => 2,
        }
    }

    /// The `index`-th instance of a seed family as a gradable example.
    pub fn example(self, base: NoiseSeed, domain: u64, index: u64) -> TrainExample {
        let seed = derive_seed(base, domain ^ self.domain_tag(), index);
        match self {
            TaskId::CountdownMini => {
                let inst = gen_countdown(seed);
                TrainExample {
                    prompt: countdown_prompt(&inst),
                    grade: GradeSpec::Countdown { numbers: inst.numbers, target: inst.target },
                }
            }
            TaskId::Parity8 => {
                let inst = gen_parity(seed);
                TrainExample {
                    prompt: parity_prompt(&inst),
                    grade: GradeSpec::Parity { label: inst.label },
                }
            }
        }
    }
}

/// One countdown-mini problem: three digits and a reachable target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountdownInstance {
    pub numbers: [u8; 3],
    pub target: i32,
}

/// One parity8 problem: eight bits and their XOR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityInstance {
    pub bits: [bool; 8],
    pub label: bool,
}

/// Format and answer components of a countdown grade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardBreakdown {
    pub format: f64,
    pub answer: f64,
    pub total: f64,
}

/// Weight of the format component in the total countdown reward.
pub const FORMAT_WEIGHT: f64 = 0.1;
/// Weight of the answer component in the total countdown reward.
pub const ANSWER_WEIGHT: f64 = 0.9;
/// Fixed training-pool size per task.
pub const TRAIN_POOL_SIZE: usize = 200;
/// Fixed held-out evaluation-set size per task.
pub const EVAL_SET_SIZE: usize = 500;

/// Draws numbers in 1..=9 and two operators, then computes the target by
/// strict left-to-right evaluation, so every target is reachable.
pub fn gen_countdown(seed: NoiseSeed) -> CountdownInstance {
    let mut s = NoiseStream::new(seed);
    let numbers = [
        s.next_index(9) as u8 + 1,
        s.next_index(9) as u8 + 1,
        s.next_index(9) as u8 + 1,
    ];
    let ops = [s.next_index(3), s.next_index(3)];
    let mut acc = i32::from(numbers[0]);
    for (op, n) in ops.iter().zip(&numbers[1..]) {
        let n = i32::from(*n);
        acc = match op {
            0 => acc + n,
            1 => acc - n,
            _ => acc * n,
        };
    }
    CountdownInstance { numbers, target: acc }
}

/// `<bos> n1 n2 n3 <sep> target <sep>`, target in decimal digits with a
/// leading minus token when negative.
pub fn countdown_prompt(inst: &CountdownInstance) -> Vec<TokenId> {
    let mut prompt = vec![tokens::BOS];
    for n in inst.numbers {
        prompt.push(tokens::digit(u32::from(n)));
    }
    prompt.push(tokens::SEP);
    if inst.target < 0 {
        prompt.push(tokens::MINUS);
    }
    let digits: Vec<u32> = {
        let mut v = Vec::new();
        let mut t = inst.target.unsigned_abs();
        loop {
            v.push(t % 10);
            t /= 10;
            if t == 0 {
                break;
            }
        }
        v.reverse();
        v
    };
    prompt.extend(digits.into_iter().map(tokens::digit));
    prompt.push(tokens::SEP);
    prompt
}

fn digit_value(tok: TokenId) -> Option<u8> {
    if (tokens::DIGIT_BASE..tokens::DIGIT_BASE + 10).contains(&tok) {
        Some((tok - tokens::DIGIT_BASE) as u8)
    } else {
        None
    }
}

fn op_of(tok: TokenId) -> Option<fn(i32, i32) -> i32> {
    match tok {
        tokens::PLUS => Some(|a, b| a.wrapping_add(b)),
        tokens::MINUS => Some(|a, b| a.wrapping_sub(b)),
        tokens::STAR => Some(|a, b| a.wrapping_mul(b)),
        _ => None,
    }
}

/// Grades a countdown output.
///
/// Format requires exactly `num op num op num <eos>` with the instance's
/// three numbers used once each in any order; the answer additionally
/// requires the left-to-right value to hit the target. Totals are always
/// exactly 0.0, 0.1, or 1.0.
pub fn reward_countdown(inst: &CountdownInstance, output: &[TokenId]) -> RewardBreakdown {
    let parsed = parse_expression(output);
    let format_ok = parsed
        .map(|(nums, _)| {
            let mut want = inst.numbers;
            let mut got = nums;
            want.sort_unstable();
            got.sort_unstable();
            want == got
        })
        .unwrap_or(false);
    let answer_ok = format_ok && {
        let (nums, ops) = parsed.expect("format_ok implies parse");
        let mut acc = i32::from(nums[0]);
        acc = ops[0](acc, i32::from(nums[1]));
        acc = ops[1](acc, i32::from(nums[2]));
        acc == inst.target
    };
    let format = if format_ok { 1.0 } else { 0.0 };
    let answer = if answer_ok { 1.0 } else { 0.0 };
    RewardBreakdown { format, answer, total: FORMAT_WEIGHT * format + ANSWER_WEIGHT * answer }
}

type ParsedExpr = ([u8; 3], [fn(i32, i32) -> i32; 2]);

fn parse_expression(output: &[TokenId]) -> Option<ParsedExpr> {
    if output.len() != 6 || output[5] != tokens::EOS {
        return None;
    }
    let nums = [digit_value(output[0])?, digit_value(output[2])?, digit_value(output[4])?];
    if nums.contains(&0) {
        return None;
    }
    let ops = [op_of(output[1])?, op_of(output[3])?];
    Some((nums, ops))
}

pub fn gen_parity(seed: NoiseSeed) -> ParityInstance {
    let mut s = NoiseStream::new(seed);
    let mut bits = [false; 8];
    let mut label = false;
    for b in &mut bits {
        *b = s.next_index(2) == 1;
        label ^= *b;
    }
    ParityInstance { bits, label }
}

/// Fixed width of parity prompts. Matches the default policy window so the
/// bits land in early window slots that countdown prompts and sampled
/// expression tokens never reach; the two tasks then claim disjoint columns
/// of the shared first layer instead of overwriting each other.
pub const PARITY_PROMPT_LEN: usize = 24;

/// `<bos> b1 .. b8 <sep> ... <sep>`, right-padded with separators to
/// [`PARITY_PROMPT_LEN`] tokens.
pub fn parity_prompt(inst: &ParityInstance) -> Vec<TokenId> {
    let mut prompt = vec![tokens::BOS];
    prompt.extend(inst.bits.iter().map(|b| tokens::bit(*b)));
    prompt.resize(PARITY_PROMPT_LEN, tokens::SEP);
    prompt
}

/// 1.0 when the first output token is the XOR label, else 0.0.
pub fn reward_parity(inst: &ParityInstance, output: &[TokenId]) -> f64 {
    match output.first() {
        Some(tok) if *tok == tokens::bit(inst.label) => 1.0,
        _ => 0.0,
    }
}

/// How a training example is graded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradeSpec {
    /// Full countdown reward: 0.1 * format + 0.9 * answer.
    Countdown { numbers: [u8; 3], target: i32 },
    /// Dense format shaping; used to give pretrained bases basic output
    /// fluency on the new task without teaching answers.
    CountdownFormat { numbers: [u8; 3] },
    /// First token must match the XOR label.
    Parity { label: bool },
}

/// Fraction of the leading output tokens that continue a well-formed
/// expression over `numbers`: an unspent number at positions 0/2/4, an
/// operator at 1/3, the terminator at 5.
///
/// Dense shaping for pretraining: random exploration reaches 1/6 many
/// orders of magnitude more often than a complete expression (which
/// needs the exact number multiset), so group-relative training gets a
/// learning signal from the first iteration. A score of 1.0 coincides
/// exactly with the strict format bit of the real task reward.
fn format_prefix_score(numbers: [u8; 3], output: &[TokenId]) -> f64 {
    let mut remaining = numbers.to_vec();
    let mut matched = 0;
    for (pos, tok) in output.iter().take(6).enumerate() {
        let ok = match pos {
            0 | 2 | 4 => match digit_value(*tok) {
                Some(d) if remaining.contains(&d) => {
                    let at = remaining.iter().position(|&n| n == d).expect("contains");
                    remaining.swap_remove(at);
                    true
                }
                _ => false,
            },
            1 | 3 => op_of(*tok).is_some(),
            _ => *tok == tokens::EOS,
        };
        if !ok {
            break;
        }
        matched += 1;
    }
    f64::from(matched) / 6.0
}

/// A prompt plus its grading rule; the unit the trainers consume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub prompt: Vec<TokenId>,
    pub grade: GradeSpec,
}

impl TrainExample {
    /// Training reward for an output.
    pub fn grade(&self, output: &[TokenId]) -> f64 {
        match &self.grade {
            GradeSpec::Countdown { numbers, target } => {
                reward_countdown(&CountdownInstance { numbers: *numbers, target: *target }, output)
                    .total
            }
            GradeSpec::CountdownFormat { numbers } => format_prefix_score(*numbers, output),
            GradeSpec::Parity { label } => {
                let inst = ParityInstance { bits: [false; 8], label: *label };
                reward_parity(&inst, output)
            }
        }
    }

    /// Held-out metric: answer correctness only.
    pub fn answer_metric(&self, output: &[TokenId]) -> f64 {
        match &self.grade {
            GradeSpec::Countdown { numbers, target } => {
                reward_countdown(&CountdownInstance { numbers: *numbers, target: *target }, output)
                    .answer
            }
            _ => self.grade(output),
        }
    }

    /// Longest useful generation for this example.
    pub fn max_output_tokens(&self) -> usize {
        match self.grade {
            GradeSpec::Parity { .. } => TaskId::Parity8.max_output_tokens(),
            _ => TaskId::CountdownMini.max_output_tokens(),
        }
    }
}

/// Deterministic training pool of `size` examples.
pub fn train_pool(task: TaskId, run_seed: NoiseSeed, size: usize) -> Vec<TrainExample> {
    (0..size as u64)
        .map(|i| task.example(run_seed, seed_domains::TRAIN, i))
        .collect()
}

/// Deterministic held-out set of `size` examples.
pub fn eval_pool(task: TaskId, eval_seed: NoiseSeed, size: usize) -> Vec<TrainExample> {
    (0..size as u64)
        .map(|i| task.example(eval_seed, seed_domains::EVAL, i))
        .collect()
}

/// Countdown examples graded on expression structure only, with dense
/// prefix credit.
///
/// Pretraining mixes these with the prior task so the base policy learns
/// to emit well-formed expressions before answer rewards exist; a base
/// that babbles on the new task earns uniformly zero reward there, which
/// starves update signal regardless of method.
pub fn format_pool(base: NoiseSeed, size: usize) -> Vec<TrainExample> {
    (0..size as u64)
        .map(|i| {
            let ex = TaskId::CountdownMini.example(base, seed_domains::PRETRAIN_FORMAT, i);
            let numbers = match ex.grade {
                GradeSpec::Countdown { numbers, .. } => numbers,
                _ => unreachable!("countdown examples carry countdown grades"),
            };
            TrainExample { prompt: ex.prompt, grade: GradeSpec::CountdownFormat { numbers } }
        })
        .collect()
}

/// Mean answer metric of greedy decodes over the task's held-out set.
pub fn evaluate(
    arch: &PolicyArch,
    params: &ParamSet,
    task: TaskId,
    n: usize,
    eval_seed: NoiseSeed,
) -> Result<f64, TaskError> {
    if n == 0 {
        return Ok(0.0);
    }
    let examples = eval_pool(task, eval_seed, n);
    let cap = task.max_output_tokens();
    let mut eval = Evaluator::new(arch, params)?;
    let mut total = 0.0;
    for ex in &examples {
        let rollout = eval.generate(&ex.prompt, 0.0, cap, None, false)?;
        total += ex.answer_metric(&rollout.generated);
    }
    Ok(total / n as f64)
}
