//! Named-tensor parameter sets and their element-wise algebra.
//!
//! A [`TensorMap`] is an ordered map from tensor name to a flat buffer plus
//! shape. Checkpoint parameters are stored as `f32` ([`ParameterSet`]);
//! deltas between parameter sets are kept in `f64` (see
//! [`crate::task_vectors::TaskVector`]) so that composing a delta back onto
//! its base reproduces the original parameters bit-exactly.
//!
//! Algebra is always done tensor by tensor; the flat concatenated parameter
//! vector is never materialized.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, save_checkpoint_as, Dtype,
};

/// Scalar types a [`Tensor`] can hold.
pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(value: f64) -> Self;
    fn extend_le_bytes(self, out: &mut Vec<u8>);
    fn bits(self) -> u64;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(value: f64) -> Self {
        value as f32
    }
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(value: f64) -> Self {
        value
    }
    fn extend_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// A dense tensor stored as a flat row-major buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The `f32` tensor type used for checkpoint parameters.
pub type TensorBuffer = Tensor<f32>;

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::default(); len],
        }
    }

    /// One-dimensional tensor holding `data`.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Ordered map of tensor name to tensor.
///
/// Iteration is lexicographic by name. An optional string map of checkpoint
/// metadata travels with the tensors and is written back on save.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorMap<T> {
    tensors: BTreeMap<String, Tensor<T>>,
    metadata: Option<BTreeMap<String, String>>,
}

/// Model parameters (θ), stored in `f32`.
pub type ParameterSet = TensorMap<f32>;

impl<T> Default for TensorMap<T> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata: None,
        }
    }
}

impl<T: Element> TensorMap<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors<I, S>(tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor<T>)>,
        S: Into<String>,
    {
        let mut map = Self::new();
        for (name, tensor) in tensors {
            map.insert(name, tensor)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters `d`.
    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn with_metadata(mut self, metadata: Option<BTreeMap<String, String>>) -> Self {
        self.metadata = metadata;
        self
    }

    /// Succeeds iff both maps have identical tensor names and shapes.
    pub fn keyspace_check<U: Element>(&self, other: &TensorMap<U>) -> Result<()> {
        let mut ours = self.tensors.iter();
        let mut theirs = other.tensors.iter();
        loop {
            match (ours.next(), theirs.next()) {
                (None, None) => return Ok(()),
                (Some((name, _)), None) => {
                    return Err(Error::Keyspace(format!("tensor `{name}` missing from right operand")))
                }
                (None, Some((name, _))) => {
                    return Err(Error::Keyspace(format!("tensor `{name}` missing from left operand")))
                }
                (Some((a, ta)), Some((b, tb))) => {
                    if a != b {
                        let missing = a.min(b);
                        let side = if missing == a { "right" } else { "left" };
                        return Err(Error::Keyspace(format!(
                            "tensor `{missing}` missing from {side} operand"
                        )));
                    }
                    if ta.shape != tb.shape {
                        return Err(Error::Keyspace(format!(
                            "tensor `{a}` has shape {:?} vs {:?}",
                            ta.shape, tb.shape
                        )));
                    }
                }
            }
        }
    }

    /// Element-wise map producing a new tensor map with the same keyspace.
    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> TensorMap<U> {
        TensorMap {
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.map(&f))).collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Element-wise combination of two maps after a keyspace check.
    pub fn zip_map<U: Element, V: Element>(&self, other: &TensorMap<U>, f: impl Fn(T, U) -> V) -> Result<TensorMap<V>> {
        self.keyspace_check(other)?;
        let tensors = self
            .tensors
            .iter()
            .zip(other.tensors.values())
            .map(|((name, a), b)| {
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(TensorMap {
            tensors,
            metadata: self.metadata.clone(),
        })
    }

    /// `alpha * x + y`, element-wise. The product and sum are formed in `f64`
    /// and rounded once to the element type.
    pub fn axpy(alpha: f64, x: &Self, y: &Self) -> Result<Self> {
        let mut out = y.zip_map(x, |yv, xv| T::from_f64(alpha * xv.to_f64() + yv.to_f64()))?;
        out.metadata = y.metadata.clone();
        Ok(out)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| T::from_f64(alpha * v.to_f64()))
    }

    /// Location of the first NaN or infinite element, if any.
    pub fn first_non_finite(&self) -> Option<(&str, usize)> {
        self.tensors.iter().find_map(|(name, t)| {
            t.data
                .iter()
                .position(|v| !v.to_f64().is_finite())
                .map(|i| (name.as_str(), i))
        })
    }

    /// SHA-256 over names, shapes and raw element bits. Metadata is excluded.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.shape.len() as u64).to_le_bytes());
            for &dim in &t.shape {
                hasher.update((dim as u64).to_le_bytes());
            }
            buf.clear();
            for &v in &t.data {
                v.extend_le_bytes(&mut buf);
            }
            hasher.update(&buf);
        }
        hasher.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Bitwise equality of names, shapes and element bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.keyspace_check(other).is_ok()
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| a.data.iter().zip(&b.data).all(|(x, y)| x.bits() == y.bits()))
    }

    /// Sum of squares, accumulated in `f64`.
    pub fn squared_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum()
    }
}

/// Free-function form of [`TensorMap::keyspace_check`].
pub fn keyspace_check<T: Element, U: Element>(a: &TensorMap<T>, b: &TensorMap<U>) -> Result<()> {
    a.keyspace_check(b)
}

/// Free-function form of [`TensorMap::axpy`].
pub fn axpy<T: Element>(alpha: f64, x: &TensorMap<T>, y: &TensorMap<T>) -> Result<TensorMap<T>> {
    TensorMap::axpy(alpha, x, y)
}
