//! Toy autoregressive policy with exact gradients.
//!
//! The network reads the last `context_window` tokens as concatenated
//! embeddings (left-padded with BOS), applies one or two tanh layers, and
//! emits a softmax over a tiny symbol vocabulary. Parameters live in a
//! [`ParamSet`] in f32; every forward and backward pass runs in f64 so
//! log-probabilities and gradients are stable enough for tight
//! finite-difference checks. Transcendentals come from `libm` for
//! platform-stable output.

use crate::noise::NoiseStream;
use crate::params::{GroupKind, ParamError, ParamGroup, ParamSet, ParamTensor};

pub type TokenId = u16;

/// Fixed token ids for the core vocabulary.
pub mod tokens {
    use super::TokenId;

    pub const BOS: TokenId = 0;
    pub const EOS: TokenId = 1;
    pub const SEP: TokenId = 2;
    /// Digit `d` is token `DIGIT_BASE + d`.
    pub const DIGIT_BASE: TokenId = 3;
    pub const PLUS: TokenId = 13;
    pub const MINUS: TokenId = 14;
    pub const STAR: TokenId = 15;
    pub const BIT0: TokenId = 16;
    pub const BIT1: TokenId = 17;

    pub fn digit(d: u32) -> TokenId {
        debug_assert!(d < 10);
        DIGIT_BASE + d as TokenId
    }

    pub fn bit(b: bool) -> TokenId {
        if b {
            BIT1
        } else {
            BIT0
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("token {token} out of range for vocabulary of {vocab} symbols")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sampling at temperature {temperature} requires a noise stream")]
    MissingRng { temperature: f64 },
    #[error("temperature must be finite and non-negative, got {temperature}")]
    BadTemperature { temperature: f64 },
    #[error("invalid vocabulary: {detail}")]
    BadVocab { detail: String },
    #[error("parameters do not match architecture: {detail}")]
    BadParams { detail: String },
}

/// Symbol table with dense token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    eos: TokenId,
}

impl Vocab {
    pub const MAX_SIZE: usize = 24;

    pub fn new(symbols: Vec<String>, eos: TokenId) -> Result<Self, PolicyError> {
        if symbols.is_empty() || symbols.len() > Self::MAX_SIZE {
            return Err(PolicyError::BadVocab {
                detail: format!("size {} outside 1..={}", symbols.len(), Self::MAX_SIZE),
            });
        }
        if (eos as usize) >= symbols.len() {
            return Err(PolicyError::BadVocab { detail: format!("EOS id {eos} out of range") });
        }
        for (i, a) in symbols.iter().enumerate() {
            if symbols[..i].contains(a) {
                return Err(PolicyError::BadVocab { detail: format!("duplicate symbol {a:?}") });
            }
        }
        Ok(Vocab { symbols, eos })
    }

    /// The 18-symbol vocabulary shared by all built-in tasks: markers,
    /// digits, arithmetic operators, and two binary symbols.
    pub fn core() -> Vocab {
        let symbols = [
            "<bos>", "<eos>", "<sep>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+",
            "-", "*", "b0", "b1",
        ];
        Vocab {
            symbols: symbols.iter().map(|s| s.to_string()).collect(),
            eos: tokens::EOS,
        }
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.symbols.iter().position(|s| s == symbol).map(|i| i as TokenId)
    }

    /// Human-readable rendering of a token sequence.
    pub fn render(&self, toks: &[TokenId]) -> String {
        toks.iter()
            .map(|t| self.symbol(*t).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Shape of the policy network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyArch {
    pub vocab: Vocab,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
}

impl PolicyArch {
    /// Desk-scale default: 24-token window, 16-dim embeddings, one
    /// 32-unit tanh layer.
    pub fn toy_default() -> PolicyArch {
        PolicyArch {
            vocab: Vocab::core(),
            context_window: 24,
            embed_dim: 16,
            hidden_dim: 32,
            layers: 1,
        }
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.context_window * self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Analytic parameter count.
    pub fn param_count(&self) -> usize {
        let v = self.vocab.size();
        let mut n = v * self.embed_dim;
        for l in 0..self.layers {
            n += self.hidden_dim * self.layer_input(l) + self.hidden_dim;
        }
        n + v * self.hidden_dim + v
    }

    /// Fresh parameters: weights and embeddings drawn N(0, 0.02^2) from the
    /// stream in canonical tensor order, biases zero (consuming nothing).
    pub fn init_params(&self, stream: &mut NoiseStream) -> ParamSet {
        let v = self.vocab.size();
        let mut set = ParamSet::new();
        let mut gaussian_tensor = |shape: Vec<usize>| -> Vec<f32> {
            let len = shape.iter().product();
            (0..len).map(|_| (0.02 * stream.next_gaussian()) as f32).collect()
        };
        // Canonical (name) order: embedding, hidden{l}.bias/weight, output.
        let emb_shape = vec![v, self.embed_dim];
        let emb = gaussian_tensor(emb_shape.clone());
        set.insert(
            ParamTensor::new(
                "embedding",
                ParamGroup { kind: GroupKind::Embedding, layer_index: 0 },
                emb_shape,
                emb,
            )
            .expect("shape matches data"),
        )
        .expect("fresh set");
        for l in 0..self.layers {
            set.insert(ParamTensor::zeros(
                format!("hidden{l}.bias"),
                ParamGroup { kind: GroupKind::HiddenBias, layer_index: l as u32 },
                vec![self.hidden_dim],
            ))
            .expect("fresh set");
            let shape = vec![self.hidden_dim, self.layer_input(l)];
            let data = gaussian_tensor(shape.clone());
            set.insert(
                ParamTensor::new(
                    format!("hidden{l}.weight"),
                    ParamGroup { kind: GroupKind::HiddenWeight, layer_index: l as u32 },
                    shape,
                    data,
                )
                .expect("shape matches data"),
            )
            .expect("fresh set");
        }
        set.insert(ParamTensor::zeros(
            "output.bias",
            ParamGroup { kind: GroupKind::OutputBias, layer_index: self.layers as u32 },
            vec![v],
        ))
        .expect("fresh set");
        let out_shape = vec![v, self.hidden_dim];
        let out = gaussian_tensor(out_shape.clone());
        set.insert(
            ParamTensor::new(
                "output.weight",
                ParamGroup { kind: GroupKind::OutputWeight, layer_index: self.layers as u32 },
                out_shape,
                out,
            )
            .expect("shape matches data"),
        )
        .expect("fresh set");
        debug_assert_eq!(set.total_len(), self.param_count());
        set
    }

    /// Checks that `params` has exactly the tensors this shape implies.
    pub fn validate(&self, params: &ParamSet) -> Result<(), PolicyError> {
        let v = self.vocab.size();
        let mut expected: Vec<(String, Vec<usize>)> =
            vec![("embedding".into(), vec![v, self.embed_dim])];
        for l in 0..self.layers {
            expected.push((format!("hidden{l}.bias"), vec![self.hidden_dim]));
            expected.push((format!("hidden{l}.weight"), vec![self.hidden_dim, self.layer_input(l)]));
        }
        expected.push(("output.bias".into(), vec![v]));
        expected.push(("output.weight".into(), vec![v, self.hidden_dim]));
        expected.sort();
        let got: Vec<(String, Vec<usize>)> =
            params.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if got != expected {
            return Err(PolicyError::BadParams {
                detail: format!("expected tensors {expected:?}, got {got:?}"),
            });
        }
        Ok(())
    }

    /// Reconstructs the architecture from checkpoint tensors.
    pub fn infer(params: &ParamSet, vocab: Vocab) -> Result<PolicyArch, PolicyError> {
        let emb = params
            .get("embedding")
            .ok_or_else(|| PolicyError::BadParams { detail: "missing embedding".into() })?;
        if emb.shape.len() != 2 || emb.shape[0] != vocab.size() {
            return Err(PolicyError::BadParams {
                detail: format!("embedding shape {:?} does not match vocab {}", emb.shape, vocab.size()),
            });
        }
        let embed_dim = emb.shape[1];
        let h0 = params
            .get("hidden0.weight")
            .ok_or_else(|| PolicyError::BadParams { detail: "missing hidden0.weight".into() })?;
        if h0.shape.len() != 2 {
            return Err(PolicyError::BadParams { detail: "hidden0.weight must be rank 2".into() });
        }
        let hidden_dim = h0.shape[0];
        let input = h0.shape[1];
        if embed_dim == 0 || input % embed_dim != 0 {
            return Err(PolicyError::BadParams {
                detail: format!("input width {input} not a multiple of embed dim {embed_dim}"),
            });
        }
        let layers = if params.get("hidden1.weight").is_some() { 2 } else { 1 };
        let arch = PolicyArch {
            vocab,
            context_window: input / embed_dim,
            embed_dim,
            hidden_dim,
            layers,
        };
        arch.validate(params)?;
        Ok(arch)
    }
}

/// One sampled or greedy continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub prompt: Vec<TokenId>,
    pub generated: Vec<TokenId>,
    /// Log-probability of each generated token under the policy (unit
    /// temperature), in generation order.
    pub logprobs: Vec<f64>,
    /// Full next-token distribution at each step, when requested.
    pub dists: Option<Vec<Vec<f64>>>,
}

impl Rollout {
    pub fn total_logprob(&self) -> f64 {
        self.logprobs.iter().sum()
    }
}

/// Borrowed views of the policy tensors, resolved once per call.
struct Net<'a> {
    emb: &'a [f32],
    hidden: Vec<(&'a [f32], &'a [f32])>, // (weight, bias) per layer
    out_w: &'a [f32],
    out_b: &'a [f32],
}

impl<'a> Net<'a> {
    fn resolve(arch: &PolicyArch, params: &'a ParamSet) -> Result<Net<'a>, PolicyError> {
        arch.validate(params)?;
        let tensor = |name: &str| -> &'a [f32] {
            params.get(name).expect("validated above").data.as_slice()
        };
        let hidden = (0..arch.layers)
            .map(|l| (tensor(&format!("hidden{l}.weight")), tensor(&format!("hidden{l}.bias"))))
            .collect();
        Ok(Net { emb: tensor("embedding"), hidden, out_w: tensor("output.weight"), out_b: tensor("output.bias") })
    }
}

/// Precomputed first-layer contributions, one per (window slot, token).
///
/// The first hidden layer sees the concatenated window embeddings, so its
/// pre-activation decomposes into a sum of per-slot terms that depend only
/// on which token sits in the slot. Tabulating those terms (plus prefix
/// sums of the BOS padding runs) turns each forward position into
/// window-many vector adds instead of a full matvec. Building the table
/// costs about one position's worth of naive matvecs, so it pays for
/// itself immediately when a parameter snapshot is reused across rollouts.
struct SlotCache {
    /// `[slot][token] -> [hidden]`, flattened.
    table: Vec<f64>,
    /// `[k] -> [hidden]` sum of slots `0..k` holding BOS, flattened.
    bos_prefix: Vec<f64>,
    vocab: usize,
    hidden: usize,
}

impl SlotCache {
    fn build(arch: &PolicyArch, net: &Net) -> SlotCache {
        let (w, v) = (arch.context_window, arch.vocab.size());
        let (h, e) = (arch.hidden_dim, arch.embed_dim);
        let w1 = net.hidden[0].0;
        let mut table = vec![0.0f64; w * v * h];
        for slot in 0..w {
            for tok in 0..v {
                let emb = &net.emb[tok * e..(tok + 1) * e];
                let dst = &mut table[(slot * v + tok) * h..][..h];
                for (i, d) in dst.iter_mut().enumerate() {
                    let row = &w1[i * (w * e) + slot * e..][..e];
                    let mut acc = 0.0;
                    for (wv, xv) in row.iter().zip(emb) {
                        acc += f64::from(*wv) * f64::from(*xv);
                    }
                    *d = acc;
                }
            }
        }
        let mut bos_prefix = vec![0.0f64; (w + 1) * h];
        for k in 0..w {
            let bos_row_start = (k * v + tokens::BOS as usize) * h;
            for i in 0..h {
                bos_prefix[(k + 1) * h + i] =
                    bos_prefix[k * h + i] + table[bos_row_start + i];
            }
        }
        SlotCache { table, bos_prefix, vocab: v, hidden: h }
    }

    #[inline]
    fn row(&self, slot: usize, token: usize) -> &[f64] {
        &self.table[(slot * self.vocab + token) * self.hidden..][..self.hidden]
    }

    #[inline]
    fn bos_run(&self, len: usize) -> &[f64] {
        &self.bos_prefix[len * self.hidden..][..self.hidden]
    }
}

/// Reusable f64 scratch for forward/backward passes.
#[derive(Debug, Default)]
struct Scratch {
    x: Vec<f64>,
    acts: Vec<Vec<f64>>,
    logits: Vec<f64>,
    dlogits: Vec<f64>,
    da: Vec<f64>,
    dpre: Vec<f64>,
}

fn matvec_into(out: &mut [f64], w: &[f32], x: &[f64], bias: Option<&[f32]>) {
    let input = x.len();
    for (i, row) in w.chunks_exact(input).enumerate() {
        let mut acc = match bias {
            Some(b) => f64::from(b[i]),
            None => 0.0,
        };
        for (wv, xv) in row.iter().zip(x) {
            acc += f64::from(*wv) * xv;
        }
        out[i] = acc;
    }
}

/// `out[j] += w^T dy` for row-major `w`.
fn matvec_transpose_into(out: &mut [f64], w: &[f32], dy: &[f64]) {
    let input = out.len();
    out.iter_mut().for_each(|o| *o = 0.0);
    for (i, row) in w.chunks_exact(input).enumerate() {
        let d = dy[i];
        if d != 0.0 {
            for (o, wv) in out.iter_mut().zip(row) {
                *o += f64::from(*wv) * d;
            }
        }
    }
}

fn fill_context(arch: &PolicyArch, net: &Net, context: &[TokenId], x: &mut Vec<f64>) {
    let w = arch.context_window;
    let e = arch.embed_dim;
    x.resize(w * e, 0.0);
    let start = context.len().saturating_sub(w);
    let visible = &context[start..];
    let pad = w - visible.len();
    let bos_row = &net.emb[tokens::BOS as usize * e..][..e];
    for slot in 0..pad {
        for (dst, src) in x[slot * e..(slot + 1) * e].iter_mut().zip(bos_row) {
            *dst = f64::from(*src);
        }
    }
    for (k, tok) in visible.iter().enumerate() {
        let row = &net.emb[*tok as usize * e..][..e];
        let slot = pad + k;
        for (dst, src) in x[slot * e..(slot + 1) * e].iter_mut().zip(row) {
            *dst = f64::from(*src);
        }
    }
}

fn check_tokens(arch: &PolicyArch, toks: &[TokenId]) -> Result<(), PolicyError> {
    let v = arch.vocab.size();
    for t in toks {
        if *t as usize >= v {
            return Err(PolicyError::TokenOutOfRange { token: *t, vocab: v });
        }
    }
    Ok(())
}

fn softmax_into(logits: &[f64], probs: &mut Vec<f64>) {
    probs.resize(logits.len(), 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, l) in probs.iter_mut().zip(logits) {
        let e = libm::exp(l - max);
        *p = e;
        z += e;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
}

/// Next-token probability distribution for `context` (unit temperature).
pub fn forward_dist(
    arch: &PolicyArch,
    params: &ParamSet,
    context: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    Evaluator::new(arch, params)?.dist(context)
}

fn forward_pass(arch: &PolicyArch, net: &Net, cache: &SlotCache, context: &[TokenId], scratch: &mut Scratch) {
    if scratch.acts.len() != arch.layers {
        scratch.acts = vec![Vec::new(); arch.layers];
    }
    let w = arch.context_window;
    let start = context.len().saturating_sub(w);
    let visible = &context[start..];
    let pad = w - visible.len();
    {
        let act = &mut scratch.acts[0];
        act.resize(arch.hidden_dim, 0.0);
        let bias = net.hidden[0].1;
        for ((a, b), base) in act.iter_mut().zip(bias).zip(cache.bos_run(pad)) {
            *a = f64::from(*b) + base;
        }
        for (k, tok) in visible.iter().enumerate() {
            for (a, c) in act.iter_mut().zip(cache.row(pad + k, *tok as usize)) {
                *a += c;
            }
        }
        for a in act.iter_mut() {
            *a = libm::tanh(*a);
        }
    }
    for l in 1..arch.layers {
        let (wm, b) = net.hidden[l];
        let (prev, rest) = scratch.acts.split_at_mut(l);
        rest[0].resize(arch.hidden_dim, 0.0);
        matvec_into(&mut rest[0], wm, &prev[l - 1], Some(b));
        for a in rest[0].iter_mut() {
            *a = libm::tanh(*a);
        }
    }
    scratch.logits.resize(arch.vocab.size(), 0.0);
    let top = &scratch.acts[arch.layers - 1];
    matvec_into(&mut scratch.logits, net.out_w, top, Some(net.out_b));
}

/// Greedy argmax over logits with ties broken by lowest token id.
fn argmax_token(logits: &[f64]) -> TokenId {
    let mut best = 0usize;
    for (i, l) in logits.iter().enumerate().skip(1) {
        if *l > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Inverse-CDF draw over `probs` in ascending token-id order.
fn sample_token(probs: &[f64], u: f64) -> TokenId {
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i as TokenId;
        }
    }
    (probs.len() - 1) as TokenId
}

/// Autoregressive decode.
///
/// Temperature zero is deterministic argmax (lowest id wins ties) and
/// needs no noise stream; positive temperatures sample by inverse CDF,
/// consuming exactly one uniform per generated token. Generation stops
/// after EOS or `max_tokens`. Recorded log-probabilities are always the
/// unit-temperature policy values.
pub fn generate(
    arch: &PolicyArch,
    params: &ParamSet,
    prompt: &[TokenId],
    temperature: f64,
    max_tokens: usize,
    rng: Option<&mut NoiseStream>,
    want_dists: bool,
) -> Result<Rollout, PolicyError> {
    Evaluator::new(arch, params)?.generate(prompt, temperature, max_tokens, rng, want_dists)
}

/// A policy bound to one parameter snapshot, with the slot cache and
/// scratch buffers built once.
///
/// Construction validates the tensors and tabulates the first-layer
/// contributions, so rollouts and log-prob queries against the same
/// parameters amortize that work. Build a fresh evaluator after any
/// parameter change; the free functions in this module wrap one call each.
pub struct Evaluator<'a> {
    arch: &'a PolicyArch,
    net: Net<'a>,
    cache: SlotCache,
    scratch: Scratch,
    probs: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(arch: &'a PolicyArch, params: &'a ParamSet) -> Result<Evaluator<'a>, PolicyError> {
        let net = Net::resolve(arch, params)?;
        let cache = SlotCache::build(arch, &net);
        Ok(Evaluator { arch, net, cache, scratch: Scratch::default(), probs: Vec::new() })
    }

    /// Next-token probability distribution for `context` (unit temperature).
    pub fn dist(&mut self, context: &[TokenId]) -> Result<Vec<f64>, PolicyError> {
        check_tokens(self.arch, context)?;
        forward_pass(self.arch, &self.net, &self.cache, context, &mut self.scratch);
        let mut probs = Vec::new();
        softmax_into(&self.scratch.logits, &mut probs);
        Ok(probs)
    }

    /// See [`generate`].
    pub fn generate(
        &mut self,
        prompt: &[TokenId],
        temperature: f64,
        max_tokens: usize,
        mut rng: Option<&mut NoiseStream>,
        want_dists: bool,
    ) -> Result<Rollout, PolicyError> {
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(PolicyError::BadTemperature { temperature });
        }
        if temperature > 0.0 && rng.is_none() {
            return Err(PolicyError::MissingRng { temperature });
        }
        check_tokens(self.arch, prompt)?;
        let mut context: Vec<TokenId> = prompt.to_vec();
        let mut generated = Vec::new();
        let mut logprobs = Vec::new();
        let mut dists = want_dists.then(Vec::new);
        let mut tempered = Vec::new();
        for _ in 0..max_tokens {
            forward_pass(self.arch, &self.net, &self.cache, &context, &mut self.scratch);
            softmax_into(&self.scratch.logits, &mut self.probs);
            let tok = if temperature == 0.0 {
                argmax_token(&self.scratch.logits)
            } else {
                let u = rng.as_mut().expect("checked above").next_uniform();
                if temperature == 1.0 {
                    sample_token(&self.probs, u)
                } else {
                    tempered.resize(self.scratch.logits.len(), 0.0);
                    for (t, l) in tempered.iter_mut().zip(&self.scratch.logits) {
                        *t = l / temperature;
                    }
                    let mut tprobs = Vec::new();
                    softmax_into(&tempered, &mut tprobs);
                    sample_token(&tprobs, u)
                }
            };
            logprobs.push(libm::log(self.probs[tok as usize]));
            if let Some(d) = dists.as_mut() {
                d.push(self.probs.clone());
            }
            generated.push(tok);
            context.push(tok);
            if tok == self.arch.vocab.eos() {
                break;
            }
        }
        Ok(Rollout { prompt: prompt.to_vec(), generated, logprobs, dists })
    }
}

/// f64 gradient accumulator shaped like a [`ParamSet`].
///
/// Training loops add many weighted log-prob gradients into one buffer in
/// a deterministic order and apply it once, so no per-rollout parameter
/// copies ever exist.
#[derive(Debug, Clone)]
pub struct GradAccum {
    /// (name, group, shape, values) in canonical name order.
    tensors: Vec<(String, ParamGroup, Vec<usize>, Vec<f64>)>,
}

impl GradAccum {
    pub fn zeros_like(params: &ParamSet) -> GradAccum {
        GradAccum {
            tensors: params
                .iter()
                .map(|t| (t.name.clone(), t.group, t.shape.clone(), vec![0.0; t.len()]))
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for (_, _, _, v) in &mut self.tensors {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, _, _, v) in &mut self.tensors {
            v.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Adds `other * factor` into self (shapes must match).
    pub fn add_scaled(&mut self, other: &GradAccum, factor: f64) {
        debug_assert_eq!(self.tensors.len(), other.tensors.len());
        for ((_, _, _, a), (_, _, _, b)) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += factor * y;
            }
        }
    }

    fn values_mut(&mut self, name: &str) -> &mut Vec<f64> {
        let idx = self
            .tensors
            .binary_search_by(|(n, _, _, _)| n.as_str().cmp(name))
            .expect("gradient tensor exists");
        &mut self.tensors[idx].3
    }

    /// Largest absolute entry, for divergence checks.
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|(_, _, _, v)| v.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, _, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Rounds the accumulated values into an f32 [`ParamSet`].
    pub fn to_param_set(&self) -> ParamSet {
        let mut set = ParamSet::new();
        for (name, group, shape, values) in &self.tensors {
            let data: Vec<f32> = values.iter().map(|v| *v as f32).collect();
            set.insert(
                ParamTensor::new(name.clone(), *group, shape.clone(), data)
                    .expect("shape matches data"),
            )
            .expect("fresh set");
        }
        set
    }

    /// Gradient-ascent step: `params += lr * grad`, f64 arithmetic rounded
    /// to f32 storage. `lr == 0` leaves the set bit-identical.
    pub fn apply_ascent(&self, params: &mut ParamSet, lr: f64) -> Result<(), ParamError> {
        if lr == 0.0 {
            return Ok(());
        }
        for ((name, _, _, values), tensor) in self.tensors.iter().zip(params.iter_mut()) {
            debug_assert_eq!(*name, tensor.name);
            for (index, (x, g)) in tensor.data.iter_mut().zip(values).enumerate() {
                let updated = (f64::from(*x) + lr * g) as f32;
                if !updated.is_finite() {
                    return Err(ParamError::NonFinite { tensor: tensor.name.clone(), index });
                }
                *x = updated;
            }
        }
        Ok(())
    }
}

/// Teacher-forced sequence log-probability without gradients.
pub fn logprob(
    arch: &PolicyArch,
    params: &ParamSet,
    prompt: &[TokenId],
    output: &[TokenId],
) -> Result<f64, PolicyError> {
    Evaluator::new(arch, params)?.logprob(prompt, output)
}

/// Teacher-forced log-probability with its exact parameter gradient.
///
/// Returns the f32-rounded gradient as a [`ParamSet`] with the same tensor
/// structure as `params`. An empty output yields zero and a zero gradient.
pub fn logprob_and_grad(
    arch: &PolicyArch,
    params: &ParamSet,
    prompt: &[TokenId],
    output: &[TokenId],
) -> Result<(f64, ParamSet), PolicyError> {
    let mut acc = GradAccum::zeros_like(params);
    let lp = accumulate_logprob_grad(arch, params, prompt, output, 1.0, &mut acc)?;
    Ok((lp, acc.to_param_set()))
}

/// Adds `weight * grad(log pi(output | prompt))` into `acc` and returns the
/// sequence log-probability. This is the shared exact-gradient kernel.
pub fn accumulate_logprob_grad(
    arch: &PolicyArch,
    params: &ParamSet,
    prompt: &[TokenId],
    output: &[TokenId],
    weight: f64,
    acc: &mut GradAccum,
) -> Result<f64, PolicyError> {
    Evaluator::new(arch, params)?.accumulate_logprob_grad(prompt, output, weight, acc)
}

impl<'a> Evaluator<'a> {
    /// See [`logprob`].
    pub fn logprob(&mut self, prompt: &[TokenId], output: &[TokenId]) -> Result<f64, PolicyError> {
        check_tokens(self.arch, prompt)?;
        check_tokens(self.arch, output)?;
        let mut context: Vec<TokenId> = prompt.to_vec();
        let mut total = 0.0;
        for tok in output {
            forward_pass(self.arch, &self.net, &self.cache, &context, &mut self.scratch);
            softmax_into(&self.scratch.logits, &mut self.probs);
            total += libm::log(self.probs[*tok as usize]);
            context.push(*tok);
        }
        Ok(total)
    }

    /// See [`accumulate_logprob_grad`].
    pub fn accumulate_logprob_grad(
        &mut self,
        prompt: &[TokenId],
        output: &[TokenId],
        weight: f64,
        acc: &mut GradAccum,
    ) -> Result<f64, PolicyError> {
        let arch = self.arch;
        check_tokens(arch, prompt)?;
        check_tokens(arch, output)?;
        let mut context: Vec<TokenId> = prompt.to_vec();
        let mut total = 0.0;
        let v = arch.vocab.size();
        let e = arch.embed_dim;
        let w = arch.context_window;
        for tok in output {
            let scratch = &mut self.scratch;
            forward_pass(arch, &self.net, &self.cache, &context, scratch);
            softmax_into(&scratch.logits, &mut self.probs);
            total += libm::log(self.probs[*tok as usize]);
            // The backward pass needs the raw window embeddings, which the
            // cached forward no longer materializes.
            fill_context(arch, &self.net, &context, &mut scratch.x);

            // d log p[tok] / d logits = onehot(tok) - p
            scratch.dlogits.resize(v, 0.0);
            for (d, p) in scratch.dlogits.iter_mut().zip(&self.probs) {
                *d = -p;
            }
            scratch.dlogits[*tok as usize] += 1.0;

            let top = arch.layers - 1;
            {
                let out_w = acc.values_mut("output.weight");
                for (i, d) in scratch.dlogits.iter().enumerate() {
                    let row = &mut out_w[i * arch.hidden_dim..(i + 1) * arch.hidden_dim];
                    let wd = weight * d;
                    for (g, a) in row.iter_mut().zip(&scratch.acts[top]) {
                        *g += wd * a;
                    }
                }
            }
            {
                let out_b = acc.values_mut("output.bias");
                for (g, d) in out_b.iter_mut().zip(&scratch.dlogits) {
                    *g += weight * d;
                }
            }
            scratch.da.resize(arch.hidden_dim, 0.0);
            matvec_transpose_into(&mut scratch.da, self.net.out_w, &scratch.dlogits);

            for l in (0..arch.layers).rev() {
                scratch.dpre.resize(arch.hidden_dim, 0.0);
                for ((dp, a), da) in
                    scratch.dpre.iter_mut().zip(&scratch.acts[l]).zip(&scratch.da)
                {
                    *dp = da * (1.0 - a * a);
                }
                let input_len = arch.layer_input(l);
                {
                    let gw = acc.values_mut(&format!("hidden{l}.weight"));
                    if l == 0 {
                        for (i, dp) in scratch.dpre.iter().enumerate() {
                            let wd = weight * dp;
                            if wd != 0.0 {
                                let row = &mut gw[i * input_len..(i + 1) * input_len];
                                for (g, xv) in row.iter_mut().zip(&scratch.x) {
                                    *g += wd * xv;
                                }
                            }
                        }
                    } else {
                        for (i, dp) in scratch.dpre.iter().enumerate() {
                            let wd = weight * dp;
                            if wd != 0.0 {
                                let row = &mut gw[i * input_len..(i + 1) * input_len];
                                for (g, av) in row.iter_mut().zip(&scratch.acts[l - 1]) {
                                    *g += wd * av;
                                }
                            }
                        }
                    }
                }
                {
                    let gb = acc.values_mut(&format!("hidden{l}.bias"));
                    for (g, dp) in gb.iter_mut().zip(&scratch.dpre) {
                        *g += weight * dp;
                    }
                }
                let (wmat, _) = self.net.hidden[l];
                if l == 0 {
                    let mut dx = vec![0.0; input_len];
                    matvec_transpose_into(&mut dx, wmat, &scratch.dpre);
                    // Scatter into embedding rows for every window slot,
                    // including BOS padding.
                    let gemb = acc.values_mut("embedding");
                    let start = context.len().saturating_sub(w);
                    let visible = &context[start..];
                    let pad = w - visible.len();
                    for slot in 0..w {
                        let tok_id = if slot < pad {
                            tokens::BOS as usize
                        } else {
                            visible[slot - pad] as usize
                        };
                        let row = &mut gemb[tok_id * e..(tok_id + 1) * e];
                        for (g, d) in row.iter_mut().zip(&dx[slot * e..(slot + 1) * e]) {
                            *g += weight * d;
                        }
                    }
                } else {
                    let mut da_prev = vec![0.0; arch.hidden_dim];
                    matvec_transpose_into(&mut da_prev, wmat, &scratch.dpre);
                    scratch.da = da_prev;
                }
            }
            context.push(*tok);
        }
        Ok(total)
    }
}
