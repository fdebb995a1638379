//! Named flat views over model parameters.
//!
//! Every parameter container exposes its tensors in a fixed order with stable
//! names. The optimizer, gradient checker, checksums and the artifact format
//! all work through these views.

use sha2::{Digest, Sha256};

/// A read-only view of one parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub trait Parameters {
    /// Tensors in a fixed, documented order. Names are prefixed with `prefix`.
    fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>>;

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>>;

    fn num_parameters(&self) -> usize {
        self.tensors("").iter().map(|t| t.data.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for t in self.tensors_mut("") {
            t.data.fill(value);
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for t in self.tensors("") {
            hasher.update(t.name.as_bytes());
            for d in &t.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.data {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! view {
    ($prefix:expr, $name:expr, $arr:expr) => {
        $crate::params::TensorView {
            name: $crate::params::join($prefix, $name),
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice().expect("parameters are contiguous"),
        }
    };
}

macro_rules! view_mut {
    ($prefix:expr, $name:expr, $arr:expr) => {
        $crate::params::TensorViewMut {
            name: $crate::params::join($prefix, $name),
            shape: $arr.shape().to_vec(),
            data: $arr.as_slice_mut().expect("parameters are contiguous"),
        }
    };
}

pub(crate) use {view, view_mut};

/// Euclidean norm over every tensor of `grads`.
pub fn global_norm(views: &[TensorView<'_>]) -> f64 {
    views
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}
