//! Named parameter tensors and elementwise diagnostics.
//!
//! A [`ParamSet`] is an ordered collection of named f32 tensors. Order is
//! always ascending by tensor name with row-major element order inside a
//! tensor; every operation that walks a set (noise injection, diffs,
//! serialization) uses that single canonical order, which is what makes
//! seed-replay updates and checkpoints reproducible.
//!
//! Storage is 32-bit; all accumulation (norms, counts, noise addition)
//! happens in 64-bit.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::noise::NoiseStream;

/// Role a tensor plays in the policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupKind {
    Embedding,
    HiddenWeight,
    HiddenBias,
    OutputWeight,
    OutputBias,
    Norm,
}

impl GroupKind {
    pub const ALL: [GroupKind; 6] = [
        GroupKind::Embedding,
        GroupKind::HiddenWeight,
        GroupKind::HiddenBias,
        GroupKind::OutputWeight,
        GroupKind::OutputBias,
        GroupKind::Norm,
    ];

    /// Stable one-byte code used by the checkpoint format.
    pub fn code(self) -> u8 {
        match self {
            GroupKind::Embedding => 0,
            GroupKind::HiddenWeight => 1,
            GroupKind::HiddenBias => 2,
            GroupKind::OutputWeight => 3,
            GroupKind::OutputBias => 4,
            GroupKind::Norm => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<GroupKind> {
        GroupKind::ALL.get(code as usize).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            GroupKind::Embedding => "embedding",
            GroupKind::HiddenWeight => "hidden_weight",
            GroupKind::HiddenBias => "hidden_bias",
            GroupKind::OutputWeight => "output_weight",
            GroupKind::OutputBias => "output_bias",
            GroupKind::Norm => "norm",
        }
    }
}

/// (kind, layer) bucket used when reporting per-group statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamGroup {
    pub kind: GroupKind,
    pub layer_index: u32,
}

/// One named row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn new(
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, ParamError> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ParamError::ShapeMismatch { name, expected, got: data.len() });
        }
        Ok(ParamTensor { name, group, shape, data })
    }

    pub fn zeros(name: impl Into<String>, group: ParamGroup, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        ParamTensor { name: name.into(), group, shape, data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("tensor {name:?}: shape implies {expected} elements, data has {got}")]
    ShapeMismatch { name: String, expected: usize, got: usize },
    #[error("tensor {name:?} already present")]
    DuplicateTensor { name: String },
    #[error("parameter sets are not comparable: {detail}")]
    StructureMismatch { detail: String },
    #[error("non-finite value produced in tensor {tensor:?} at element {index}")]
    NonFinite { tensor: String, index: usize },
    #[error("sparsity threshold must be a finite positive real, got {tau}")]
    BadTau { tau: f64 },
}

/// Ordered set of named parameter tensors.
///
/// Iteration is always ascending by name. Construction and cloning are
/// tracked by [`gauge`] so tests can assert how many sets a training loop
/// keeps alive.
#[derive(Debug)]
pub struct ParamSet {
    tensors: BTreeMap<String, ParamTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        gauge::on_create();
        ParamSet { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, tensor: ParamTensor) -> Result<(), ParamError> {
        let expected: usize = tensor.shape.iter().product();
        if expected != tensor.data.len() {
            let got = tensor.data.len();
            return Err(ParamError::ShapeMismatch { name: tensor.name, expected, got });
        }
        if self.tensors.contains_key(&tensor.name) {
            return Err(ParamError::DuplicateTensor { name: tensor.name });
        }
        self.tensors.insert(tensor.name.clone(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.tensors.get_mut(name)
    }

    /// Tensors in ascending name order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.tensors.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.tensors.values_mut()
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.values().map(ParamTensor::len).sum()
    }

    /// Explicit deep copy; the only way to duplicate a set.
    pub fn deep_copy(&self) -> ParamSet {
        gauge::on_create();
        ParamSet { tensors: self.tensors.clone() }
    }

    /// Adds `scale * noise` elementwise across the whole set in canonical
    /// order, consuming exactly `total_len` stream elements.
    ///
    /// With `scale == 0` the data is left bit-identical (the stream still
    /// advances). A non-finite result aborts with the set partially
    /// updated, so callers must treat the set as poisoned on error.
    pub fn axpy_noise_inplace(
        &mut self,
        scale: f64,
        stream: &mut NoiseStream,
    ) -> Result<(), ParamError> {
        if scale == 0.0 {
            let n = self.total_len() as u64;
            stream.skip(n);
            return Ok(());
        }
        for tensor in self.tensors.values_mut() {
            for (index, x) in tensor.data.iter_mut().enumerate() {
                let updated = (f64::from(*x) + scale * stream.next_gaussian()) as f32;
                if !updated.is_finite() {
                    return Err(ParamError::NonFinite { tensor: tensor.name.clone(), index });
                }
                *x = updated;
            }
        }
        Ok(())
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        self.deep_copy()
    }
}

impl Drop for ParamSet {
    fn drop(&mut self) {
        gauge::on_drop();
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors
    }
}

/// Process-wide accounting of live [`ParamSet`] instances.
///
/// Exists so tests can verify the evolution-strategies loop really works
/// in place instead of materializing per-member parameter copies.
pub mod gauge {
    use super::{AtomicUsize, Ordering};

    static LIVE: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub(super) fn on_create() {
        let now = LIVE.fetch_add(1, Ordering::SeqCst) + 1;
        PEAK.fetch_max(now, Ordering::SeqCst);
    }

    pub(super) fn on_drop() {
        LIVE.fetch_sub(1, Ordering::SeqCst);
    }

    /// Number of currently live parameter sets.
    pub fn live() -> usize {
        LIVE.load(Ordering::SeqCst)
    }

    /// High-water mark since the last [`reset_peak`].
    pub fn peak() -> usize {
        PEAK.load(Ordering::SeqCst)
    }

    /// Resets the high-water mark to the current live count.
    pub fn reset_peak() {
        PEAK.store(LIVE.load(Ordering::SeqCst), Ordering::SeqCst);
    }
}

fn check_comparable(base: &ParamSet, new: &ParamSet) -> Result<(), ParamError> {
    if base.tensor_count() != new.tensor_count() {
        return Err(ParamError::StructureMismatch {
            detail: format!("{} tensors vs {}", base.tensor_count(), new.tensor_count()),
        });
    }
    for (a, b) in base.iter().zip(new.iter()) {
        if a.name != b.name {
            return Err(ParamError::StructureMismatch {
                detail: format!("tensor {:?} vs {:?}", a.name, b.name),
            });
        }
        if a.shape != b.shape {
            return Err(ParamError::StructureMismatch {
                detail: format!("tensor {:?}: shape {:?} vs {:?}", a.name, a.shape, b.shape),
            });
        }
        if a.group != b.group {
            return Err(ParamError::StructureMismatch {
                detail: format!("tensor {:?}: group differs", a.name),
            });
        }
    }
    Ok(())
}

/// Frobenius norm of `new - base`, accumulated in f64.
pub fn diff_frobenius(base: &ParamSet, new: &ParamSet) -> Result<f64, ParamError> {
    check_comparable(base, new)?;
    let mut sum_sq = 0.0f64;
    for (a, b) in base.iter().zip(new.iter()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            let d = f64::from(*y) - f64::from(*x);
            sum_sq += d * d;
        }
    }
    Ok(sum_sq.sqrt())
}

/// Sparsity of one (kind, layer) bucket of a parameter diff.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSparsity {
    pub group: ParamGroup,
    /// Fraction of elements with `|new - base| < tau` (strict).
    pub sparsity: f64,
    /// Number of elements in the bucket.
    pub count: usize,
}

/// Per-group sparsity report for a parameter diff.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffStats {
    pub tau: f64,
    pub frobenius: f64,
    /// Buckets sorted by (layer_index, kind code).
    pub groups: Vec<GroupSparsity>,
}

impl DiffStats {
    pub fn total_count(&self) -> usize {
        self.groups.iter().map(|g| g.count).sum()
    }

    /// Count-weighted mean sparsity across all buckets.
    pub fn overall_sparsity(&self) -> f64 {
        let total = self.total_count();
        if total == 0 {
            return 0.0;
        }
        let below: f64 = self.groups.iter().map(|g| g.sparsity * g.count as f64).sum();
        below / total as f64
    }
}

/// Default threshold below which a parameter is considered untouched.
pub const DEFAULT_TAU: f64 = 1e-6;

/// Fraction of near-zero diff elements per (kind, layer) bucket.
pub fn diff_sparsity(base: &ParamSet, new: &ParamSet, tau: f64) -> Result<DiffStats, ParamError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(ParamError::BadTau { tau });
    }
    check_comparable(base, new)?;
    let mut buckets: BTreeMap<(u32, u8), (usize, usize)> = BTreeMap::new();
    let mut sum_sq = 0.0f64;
    for (a, b) in base.iter().zip(new.iter()) {
        let key = (a.group.layer_index, a.group.kind.code());
        let entry = buckets.entry(key).or_insert((0, 0));
        for (x, y) in a.data.iter().zip(&b.data) {
            let d = f64::from(*y) - f64::from(*x);
            sum_sq += d * d;
            entry.1 += 1;
            if d.abs() < tau {
                entry.0 += 1;
            }
        }
    }
    let groups = buckets
        .into_iter()
        .map(|((layer_index, code), (below, count))| GroupSparsity {
            group: ParamGroup {
                kind: GroupKind::from_code(code).expect("bucket key came from a valid kind"),
                layer_index,
            },
            sparsity: below as f64 / count.max(1) as f64,
            count,
        })
        .collect();
    Ok(DiffStats { tau, frobenius: sum_sq.sqrt(), groups })
}
