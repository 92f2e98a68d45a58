//! Query intent detection: a linear head over the pooled encoder output,
//! single-label cross-entropy for substring-classification pre-training,
//! temperature-scaled multi-label cross-entropy for fine-tuning, and label
//! prediction.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, BoundParams, EncoderConfig, TokenBatch};
use crate::numcore::{Elem, GraphOf, NodeId, ParamStoreOf, Targets, TensorOf};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum PredictionMode {
    /// Fixed number of labels, by descending probability.
    TopK(usize),
    /// Every label with probability >= the threshold (dynamic count).
    Threshold(f32),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntentFinetuneConfig {
    pub temperature: f32,
    pub prediction: PredictionMode,
}

impl Default for IntentFinetuneConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0 / 3.0,
            prediction: PredictionMode::TopK(1),
        }
    }
}

impl IntentFinetuneConfig {
    pub fn validate(&self) {
        assert!(self.temperature > 0.0, "temperature must be positive");
        match self.prediction {
            PredictionMode::TopK(k) => assert!(k >= 1, "top-k needs k >= 1"),
            PredictionMode::Threshold(t) => {
                assert!(t > 0.0 && t < 1.0, "threshold must lie in (0, 1)")
            }
        }
    }
}

/// Probabilities over the label space; rows of `softmax(logits)`.
#[derive(Debug, Clone)]
pub struct CategoryDistribution {
    pub probs: Vec<f32>,
}

impl CategoryDistribution {
    pub fn validate(&self) {
        let sum: f64 = self.probs.iter().map(|&p| p as f64).sum();
        assert!(
            self.probs.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() < 1e-6,
            "not a distribution (sum {sum})"
        );
    }
}

/// Adds the classification head (`head_w` [dim, labels], `head_b`) under
/// `prefix` to an existing parameter store.
pub fn init_intent_head<E: Elem>(
    store: &mut ParamStoreOf<E>,
    dim: usize,
    num_labels: usize,
    seed: u64,
    prefix: &str,
) {
    assert!(num_labels >= 1, "label space must be non-empty");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 0.02).unwrap();
    let data = (0..dim * num_labels)
        .map(|_| E::from_f64(normal.sample(&mut rng)))
        .collect();
    store.insert(
        format!("{prefix}head_w"),
        TensorOf::from_vec(dim, num_labels, data),
    );
    store.insert(
        format!("{prefix}head_b"),
        TensorOf::zeros(1, num_labels),
    );
}

/// Raw category scores for a batch: `[batch, labels]`.
pub fn intent_logits<E: Elem>(
    g: &mut GraphOf<E>,
    cfg: &EncoderConfig,
    params: &BoundParams,
    prefix: &str,
    batch: &TokenBatch,
) -> NodeId {
    let hidden = encoder::encode_batch(g, cfg, params, prefix, batch);
    let pooled = encoder::pool_first(g, hidden, batch);
    let z = g.matmul(pooled, encoder::bound(params, prefix, "head_w"));
    g.add_row(z, encoder::bound(params, prefix, "head_b"))
}

/// Single-label softmax cross-entropy, mean over the batch.
pub fn rsc_loss<E: Elem>(
    g: &mut GraphOf<E>,
    logits: NodeId,
    category_ids: &[usize],
) -> NodeId {
    g.softmax_cross_entropy(logits, Targets::Classes(Arc::new(category_ids.to_vec())))
}

/// Temperature-scaled multi-label cross-entropy, mean over the batch:
/// `-sum_c t_c * log softmax(z / T)_c` with `t` the per-example click
/// weights renormalized to sum 1.
pub fn multilabel_loss<E: Elem>(
    g: &mut GraphOf<E>,
    logits: NodeId,
    labels: &[Vec<(usize, f32)>],
    temperature: f32,
) -> NodeId {
    assert!(temperature > 0.0, "temperature must be positive");
    let [rows, cols] = g.value(logits).shape();
    assert_eq!(rows, labels.len(), "one label set per logits row");
    let mut targets = TensorOf::zeros(rows, cols);
    for (r, row_labels) in labels.iter().enumerate() {
        assert!(!row_labels.is_empty(), "example {r} has no labels");
        let total: f64 = row_labels.iter().map(|&(_, w)| w as f64).sum();
        assert!(total > 0.0, "example {r} has zero label mass");
        for &(c, w) in row_labels {
            assert!(c < cols, "label {c} out of range ({cols} classes)");
            targets.set(r, c, E::from_f64(w as f64 / total));
        }
    }
    let scaled = g.scale(logits, E::from_f64(1.0 / temperature as f64));
    g.softmax_cross_entropy(scaled, Targets::Dist(targets))
}

/// Softmax over one logits row, outside the graph.
pub fn distribution_from_logits(logits: &[f32]) -> CategoryDistribution {
    let mut probs = logits.to_vec();
    crate::numcore::softmax_in_place(&mut probs);
    CategoryDistribution { probs }
}

/// Ordered label prediction. Descending probability; equal probabilities
/// order by lower id, making the output a total order.
pub fn predict_categories(
    dist: &CategoryDistribution,
    cfg: &IntentFinetuneConfig,
) -> Vec<usize> {
    cfg.validate();
    let mut order: Vec<usize> = (0..dist.probs.len()).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b]
            .partial_cmp(&dist.probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    match cfg.prediction {
        PredictionMode::TopK(k) => {
            order.truncate(k);
            order
        }
        PredictionMode::Threshold(t) => order
            .into_iter()
            .filter(|&c| dist.probs[c] >= t)
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_node(g: &mut GraphOf<f64>, rows: usize, cols: usize, data: &[f64]) -> NodeId {
        g.param(TensorOf::from_vec(rows, cols, data.to_vec()))
    }

    #[test]
    fn uniform_logits_give_ln_l() {
        let mut g = GraphOf::<f64>::eval();
        let z = logits_node(&mut g, 1, 112, &[0.0; 112]);
        let loss = rsc_loss(&mut g, z, &[17]);
        assert!((g.value(loss).item() - (112f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn confident_logits_drive_loss_to_zero() {
        let mut g = GraphOf::<f64>::eval();
        let mut data = vec![0.0; 10];
        data[3] = 60.0;
        let z = logits_node(&mut g, 1, 10, &data);
        let loss = rsc_loss(&mut g, z, &[3]);
        assert!(g.value(loss).item() < 1e-9);
    }

    #[test]
    fn single_label_t1_reduces_to_rsc() {
        let data = [0.3, -1.2, 2.0, 0.7, -0.4];
        let mut g = GraphOf::<f64>::eval();
        let z1 = logits_node(&mut g, 1, 5, &data);
        let a = rsc_loss(&mut g, z1, &[2]);
        let z2 = logits_node(&mut g, 1, 5, &data);
        let b = multilabel_loss(&mut g, z2, &[vec![(2, 0.37)]], 1.0);
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn temperature_third_matches_hand_computation() {
        // softmax([2,1,0]/ (1/3)) = softmax([6,3,0]) ~ [0.9503, 0.0473, 0.0024]
        let mut g = GraphOf::<f64>::eval();
        let z = logits_node(&mut g, 1, 3, &[2.0, 1.0, 0.0]);
        let loss = multilabel_loss(&mut g, z, &[vec![(0, 1.0)]], 1.0 / 3.0);
        let expected = -(403.428_793_492_735_12f64
            / (403.428_793_492_735_12 + 20.085_536_923_187_668 + 1.0))
            .ln();
        // temperature is carried as f32, hence the 1e-6 slack
        assert!((g.value(loss).item() - expected).abs() < 1e-6);
        assert!((expected - 0.0510).abs() < 1e-4);
    }

    #[test]
    fn loss_is_shift_invariant() {
        let data = [1.0, -0.5, 0.25, 3.0];
        let shifted: Vec<f64> = data.iter().map(|v| v + 3.7).collect();
        let labels = vec![vec![(0, 0.6f32), (3, 0.3)]];
        let mut g = GraphOf::<f64>::eval();
        let z1 = logits_node(&mut g, 1, 4, &data);
        let a = multilabel_loss(&mut g, z1, &labels, 1.0 / 3.0);
        let z2 = logits_node(&mut g, 1, 4, &shifted);
        let b = multilabel_loss(&mut g, z2, &labels, 1.0 / 3.0);
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-5);
    }

    #[test]
    fn lower_temperature_sharpens_argmax() {
        let z = [2.0f32, 1.0, 0.0];
        let prob_at = |t: f32| {
            let scaled: Vec<f32> = z.iter().map(|v| v / t).collect();
            distribution_from_logits(&scaled).probs[0]
        };
        let (p1, p3) = (prob_at(1.0), prob_at(1.0 / 3.0));
        assert!(p3 > p1, "T=1/3 should sharpen: {p3} <= {p1}");
    }

    #[test]
    fn weights_renormalize_to_sum_one() {
        // 0.6/0.3 mass renormalizes to 2/3, 1/3; loss computed against that.
        let mut g = GraphOf::<f64>::eval();
        let z = logits_node(&mut g, 1, 2, &[0.0, 0.0]);
        let loss = multilabel_loss(&mut g, z, &[vec![(0, 0.6), (1, 0.3)]], 1.0);
        // uniform logits: -sum t_c ln(1/2) = ln 2 regardless of t
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn predict_top_k_and_threshold() {
        let d = CategoryDistribution {
            probs: vec![0.5, 0.3, 0.2],
        };
        d.validate();
        let cfg = IntentFinetuneConfig {
            temperature: 1.0,
            prediction: PredictionMode::Threshold(0.25),
        };
        assert_eq!(predict_categories(&d, &cfg), vec![0, 1]);

        let tie = CategoryDistribution {
            probs: vec![0.4, 0.4, 0.2],
        };
        let cfg = IntentFinetuneConfig {
            temperature: 1.0,
            prediction: PredictionMode::TopK(1),
        };
        assert_eq!(predict_categories(&tie, &cfg), vec![0]);

        let near_uniform = CategoryDistribution {
            probs: vec![0.34, 0.33, 0.33],
        };
        let cfg = IntentFinetuneConfig {
            temperature: 1.0,
            prediction: PredictionMode::Threshold(0.9),
        };
        assert!(predict_categories(&near_uniform, &cfg).is_empty());
    }
}
