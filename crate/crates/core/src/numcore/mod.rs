//! Numeric engine: rank-2 tensors, a reverse-mode autodiff tape, and
//! finite-difference gradient verification.

pub mod gradcheck;
pub mod graph;
pub mod tensor;

use std::collections::BTreeMap;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, ParamMap};
pub use graph::{Graph, GraphOf, NodeId, Targets};
pub use tensor::{Elem, Tensor, TensorOf};

/// Named model parameters. BTreeMap keeps iteration (and thus binding,
/// serialization and checksum) order deterministic.
pub type ParamStoreOf<E> = BTreeMap<String, TensorOf<E>>;
pub type ParamStore = ParamStoreOf<f32>;

/// Total scalar count across a store.
pub fn param_count<E: Elem>(store: &ParamStoreOf<E>) -> usize {
    store.values().map(|t| t.len()).sum()
}

/// f32 -> f64 widening of a whole store, for gradient checking.
pub fn store_to_f64(store: &ParamStore) -> ParamStoreOf<f64> {
    store.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

/// Numerically stable in-place softmax over a plain slice; used by inference
/// paths that never touch the graph.
pub fn softmax_in_place(xs: &mut [f32]) {
    let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in xs.iter_mut() {
        let e = ((*x - max) as f64).exp();
        sum += e;
        *x = e as f32;
    }
    let inv = (1.0 / sum) as f32;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}
