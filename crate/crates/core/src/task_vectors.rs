//! Task vectors and the sparsification kernels applied to them.
//!
//! A task vector is the element-wise difference `expert - base`. It is held
//! in `f64`: the difference of two `f32` values of comparable magnitude is
//! exact in `f64`, so `base + (expert - base)` rounds back to `expert`
//! bit-for-bit.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, ElementStream, MASK_DOMAIN};
use crate::tensor_store::{Element, ParameterSet, Tensor, TensorMap};

/// Per-element deltas `θ_t − θ_0`, same keyspace as the base.
pub type TaskVector = TensorMap<f64>;

/// Seed used for expert `index` when a single run seed drives several
/// experts' masks.
pub fn expert_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "expert", index as u64)
}

pub fn make_task_vector(expert: &ParameterSet, base: &ParameterSet) -> Result<TaskVector> {
    expert.zip_map(base, |e, b| e as f64 - b as f64)
}

/// `base + scale * delta`, rounded once to `f32`.
pub fn apply_delta(base: &ParameterSet, delta: &TaskVector, scale: f64) -> Result<ParameterSet> {
    let mut out = base.zip_map(delta, |b, d| (b as f64 + scale * d) as f32)?;
    out.set_metadata(base.metadata().cloned());
    Ok(out)
}

/// Element-wise `Σ_t weights[t] * tvs[t]`, accumulated in order.
pub fn weighted_sum(tvs: &[TaskVector], weights: &[f64]) -> Result<TaskVector> {
    let first = tvs
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one task vector is required".into()))?;
    if weights.len() != tvs.len() {
        return Err(Error::InvalidParameter(format!(
            "{} weights for {} task vectors",
            weights.len(),
            tvs.len()
        )));
    }
    let mut acc = first.map(|v| weights[0] * v);
    for (tv, &w) in tvs.iter().zip(weights).skip(1) {
        acc = acc.zip_map(tv, |a, v| a + w * v)?;
    }
    Ok(acc)
}

fn check_drop_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "drop rate must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Bernoulli drop mask; `true` marks a dropped element.
#[derive(Clone, Debug, PartialEq)]
pub struct DropMask {
    bits: BTreeMap<String, Vec<bool>>,
    drop_rate: f64,
}

impl DropMask {
    /// Samples `m_i ~ Bernoulli(p)` for every element of `keyspace`, keyed by
    /// `(seed, tensor name, element index)`.
    pub fn sample<T: Element>(keyspace: &TensorMap<T>, p: f64, seed: u64) -> Result<Self> {
        check_drop_rate(p)?;
        let bits = keyspace
            .iter()
            .map(|(name, t)| {
                let mut stream = ElementStream::new(MASK_DOMAIN, seed, name);
                let mask = (0..t.numel()).map(|_| stream.next_uniform() < p).collect();
                (name.to_string(), mask)
            })
            .collect();
        Ok(Self { bits, drop_rate: p })
    }

    pub fn drop_rate(&self) -> f64 {
        self.drop_rate
    }

    pub fn bits(&self, tensor: &str) -> Option<&[bool]> {
        self.bits.get(tensor).map(Vec::as_slice)
    }

    pub fn dropped(&self) -> usize {
        self.bits.values().flatten().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(1 − m) ⊙ tv / (1 − p)`.
    pub fn apply(&self, tv: &TaskVector) -> Result<TaskVector> {
        let keep_scale = 1.0 - self.drop_rate;
        let mut out = TaskVector::new();
        for (name, t) in tv.iter() {
            let mask = self
                .bits
                .get(name)
                .filter(|m| m.len() == t.numel())
                .ok_or_else(|| Error::Keyspace(format!("mask does not cover tensor `{name}`")))?;
            let data = t
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &dropped)| if dropped { 0.0 } else { v / keep_scale })
                .collect();
            out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
        }
        if out.len() != self.bits.len() {
            return Err(Error::Keyspace(
                "mask covers tensors absent from the task vector".into(),
            ));
        }
        Ok(out)
    }
}

/// DARE: drop each element with probability `p` and rescale survivors by `1/(1−p)`.
pub fn dare_sparsify(tv: &TaskVector, p: f64, seed: u64) -> Result<TaskVector> {
    DropMask::sample(tv, p, seed)?.apply(tv)
}

/// Result of TIES trimming and sign election.
#[derive(Clone, Debug)]
pub struct TiesOutcome {
    /// Each input with all but its top-k magnitudes zeroed.
    pub trimmed: Vec<TaskVector>,
    /// Elected sign per coordinate: `1` or `-1`.
    pub elected_signs: BTreeMap<String, Vec<i8>>,
    /// Mean of the trimmed values agreeing with the elected sign.
    pub merged: TaskVector,
}

/// Keeps the `⌈keep_fraction · d⌉` largest-magnitude elements of `tv`,
/// ranked globally across tensors. Equal magnitudes keep the earlier element
/// in (tensor name, index) order.
pub fn trim_top_k(tv: &TaskVector, keep_fraction: f64) -> Result<TaskVector> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "keep fraction must lie in (0, 1], got {keep_fraction}"
        )));
    }
    let d = tv.total_elements();
    let k = ((keep_fraction * d as f64).ceil() as usize).min(d);
    if k == d {
        return Ok(tv.clone());
    }
    let flat: Vec<f64> = tv.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.abs())).collect();
    let mut order: Vec<usize> = (0..d).collect();
    let by_magnitude = |a: &usize, b: &usize| flat[*b].total_cmp(&flat[*a]).then(a.cmp(b));
    if k > 0 {
        order.select_nth_unstable_by(k - 1, by_magnitude);
    }
    let mut keep = vec![false; d];
    for &i in &order[..k] {
        keep[i] = true;
    }
    let mut offset = 0;
    let mut out = TaskVector::new();
    for (name, t) in tv.iter() {
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[offset + i] { v } else { 0.0 })
            .collect();
        offset += t.numel();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Sign election and disjoint mean over already-trimmed task vectors.
///
/// The elected sign is positive when the summed positive mass is at least the
/// summed negative mass. Coordinates without an agreeing nonzero value stay 0.
pub fn elect_and_merge(trimmed: &[TaskVector]) -> Result<(BTreeMap<String, Vec<i8>>, TaskVector)> {
    let first = trimmed
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one task vector is required".into()))?;
    for tv in &trimmed[1..] {
        first.keyspace_check(tv)?;
    }
    let mut signs = BTreeMap::new();
    let mut merged = TaskVector::new();
    for (name, t) in first.iter() {
        let columns: Vec<&[f64]> = trimmed
            .iter()
            .map(|tv| tv.get(name).expect("keyspace checked").data())
            .collect();
        let mut sign_row = Vec::with_capacity(t.numel());
        let mut data = Vec::with_capacity(t.numel());
        for i in 0..t.numel() {
            let (mut pos, mut neg) = (0.0f64, 0.0f64);
            for col in &columns {
                let v = col[i];
                if v > 0.0 {
                    pos += v;
                } else if v < 0.0 {
                    neg -= v;
                }
            }
            let positive = pos >= neg;
            let (mut sum, mut count) = (0.0f64, 0usize);
            for col in &columns {
                let v = col[i];
                if (positive && v > 0.0) || (!positive && v < 0.0) {
                    sum += v;
                    count += 1;
                }
            }
            sign_row.push(if positive { 1 } else { -1 });
            data.push(if count == 0 { 0.0 } else { sum / count as f64 });
        }
        signs.insert(name.to_string(), sign_row);
        merged.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok((signs, merged))
}

/// TIES: global top-k trim per input, then sign election and disjoint mean.
pub fn ties_trim_elect(tvs: &[TaskVector], keep_fraction: f64) -> Result<TiesOutcome> {
    if tvs.is_empty() {
        return Err(Error::InvalidParameter("at least one task vector is required".into()));
    }
    let trimmed = tvs
        .iter()
        .map(|tv| trim_top_k(tv, keep_fraction))
        .collect::<Result<Vec<_>>>()?;
    let (elected_signs, merged) = elect_and_merge(&trimmed)?;
    Ok(TiesOutcome {
        trimmed,
        elected_signs,
        merged,
    })
}

/// Linear ramp offset for rank `r` of `count` elements: `+1` for the
/// smallest magnitude down to `-1` for the largest.
fn ramp(rank: usize, count: usize) -> f64 {
    if count <= 1 {
        0.0
    } else {
        (count as f64 - 1.0 - 2.0 * rank as f64) / (count as f64 - 1.0)
    }
}

/// DELLA magnitude-ranked pruning.
///
/// Within each tensor, elements are ranked by `|value|` ascending (ties by
/// index). Rank `r` of `R` is dropped with probability
/// `p + epsilon * (R − 1 − 2r)/(R − 1)` and survivors are rescaled by
/// `1/(1 − p_r)`. Uniform draws are indexed by element, not rank, so
/// `epsilon = 0` reproduces [`dare_sparsify`] exactly.
pub fn della_prune(tv: &TaskVector, p: f64, epsilon: f64, seed: u64) -> Result<TaskVector> {
    check_drop_rate(p)?;
    if !epsilon.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be finite, got {epsilon}"
        )));
    }
    let mut out = TaskVector::new();
    for (name, t) in tv.iter() {
        let n = t.numel();
        if n > 1 && !(p - epsilon.abs() >= 0.0 && p + epsilon.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon {epsilon} moves drop probabilities outside [0, 1) around p = {p}"
            )));
        }
        let values = t.data();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)));
        let mut rank = vec![0usize; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }
        let mut stream = ElementStream::new(MASK_DOMAIN, seed, name);
        let data = values
            .iter()
            .zip(&rank)
            .map(|(&v, &r)| {
                let pr = p + epsilon * ramp(r, n);
                if stream.next_uniform() < pr {
                    0.0
                } else {
                    v / (1.0 - pr)
                }
            })
            .collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Per-tensor RankMean weights.
///
/// Experts are ranked by mean `|Δ|` over the tensor, ascending, with ties
/// broken by expert index. Expert weight is `rank / Σ ranks`.
pub fn rankmean_weights(tvs: &[TaskVector]) -> Result<BTreeMap<String, Vec<f64>>> {
    let first = tvs
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one task vector is required".into()))?;
    for tv in &tvs[1..] {
        first.keyspace_check(tv)?;
    }
    let n = tvs.len();
    let rank_sum = (n * (n + 1) / 2) as f64;
    let mut weights = BTreeMap::new();
    for name in first.names() {
        let means: Vec<f64> = tvs
            .iter()
            .map(|tv| {
                let data = tv.get(name).expect("keyspace checked").data();
                data.iter().map(|v| v.abs()).sum::<f64>() / data.len().max(1) as f64
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
        let mut w = vec![0.0; n];
        for (r, &e) in order.iter().enumerate() {
            w[e] = (r + 1) as f64 / rank_sum;
        }
        weights.insert(name.to_string(), w);
    }
    Ok(weights)
}
