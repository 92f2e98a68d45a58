//! Finite-difference verification of the backward pass.
//!
//! Checks run in f64: central differences at eps around 1e-3 leave ~1e-6
//! relative truncation error there, far inside the tolerance, whereas f32
//! rounding noise would drown the comparison.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{GraphOf, NodeId};
use super::tensor::TensorOf;

/// Named f64 parameter set handed to the build closure.
pub type ParamMap = BTreeMap<String, TensorOf<f64>>;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all, if the tensor is smaller).
    pub coords_per_param: usize,
    /// Seeds both coordinate sampling and, when `dropout_seed` is set, the
    /// rebuilt graphs' dropout streams so masks agree across evaluations.
    pub seed: u64,
    /// `Some(s)`: build training-mode graphs seeded with `s`. `None`: eval mode.
    pub dropout_seed: Option<u64>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            coords_per_param: 8,
            seed: 0,
            dropout_seed: None,
        }
    }
}

/// One verified coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

/// `|a - n| / (max(|a|, |n|) + 1e-8)`; the additive guard keeps dead
/// coordinates (both sides ~0) from registering as failures.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + 1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `build` must bind every tensor in the given map as a trainable node
/// (returning the bindings by name) and return a scalar loss; it is invoked
/// on fresh graphs, twice per sampled coordinate plus once for the analytic
/// pass, and must be deterministic given the graph and the parameter values.
pub fn grad_check<F>(params: &ParamMap, build: F, cfg: &GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut GraphOf<f64>, &ParamMap) -> (NodeId, BTreeMap<String, NodeId>),
{
    let make_graph = || match cfg.dropout_seed {
        Some(s) => GraphOf::<f64>::train(s),
        None => GraphOf::<f64>::eval(),
    };

    let mut g = make_graph();
    let (loss, bound) = build(&mut g, params);
    g.backward(loss);
    let mut analytic: BTreeMap<String, TensorOf<f64>> = BTreeMap::new();
    for (name, id) in &bound {
        let t = params
            .get(name)
            .unwrap_or_else(|| panic!("build bound unknown param {name:?}"));
        let grad = g
            .grad(*id)
            .cloned()
            .unwrap_or_else(|| TensorOf::zeros(t.rows(), t.cols()));
        analytic.insert(name.clone(), grad);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst: Option<CoordCheck> = None;
    for (name, tensor) in params {
        let n = tensor.len();
        let picks: Vec<usize> = if n <= cfg.coords_per_param {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, cfg.coords_per_param).into_vec()
        };
        for idx in picks {
            let numeric = {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data_mut()[idx] += cfg.eps;
                let mut gp = make_graph();
                let (lp, _) = build(&mut gp, &plus);
                let fp = gp.value(lp).item();

                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data_mut()[idx] -= cfg.eps;
                let mut gm = make_graph();
                let (lm, _) = build(&mut gm, &minus);
                let fm = gm.value(lm).item();
                (fp - fm) / (2.0 * cfg.eps)
            };
            let a = analytic[name].data()[idx];
            let rel = relative_error(a, numeric);
            checked += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some(CoordCheck {
                    param: name.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    GradCheckReport {
        checked,
        max_rel_err,
        worst,
    }
}
