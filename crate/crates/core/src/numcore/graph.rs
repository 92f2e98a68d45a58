//! Define-by-run reverse-mode autodiff over 2-D tensors.
//!
//! A [`GraphOf`] is a tape: every operation evaluates eagerly and records a
//! node, so construction order is already a topological order. `backward`
//! walks the tape in reverse once, accumulating gradients into every node;
//! trainable leaves keep theirs for the optimizer to read.
//!
//! Shape mismatches are programming errors and panic with the offending op
//! and shapes. Data-dependent failures (bad ids, malformed files) are not
//! the engine's concern and are handled by callers.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Elem, TensorOf};

/// Handle to a node in a [`GraphOf`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Cross-entropy targets: one class per row, or a dense distribution per row.
pub enum Targets<E> {
    Classes(Arc<Vec<usize>>),
    Dist(TensorOf<E>),
}

enum Op<E: Elem> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// `x + bias` with `bias: [1, n]` broadcast over rows.
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    MulElem {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: E,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: TensorOf<E>,
        rstd: Vec<E>,
    },
    SoftmaxRows {
        x: NodeId,
        probs: TensorOf<E>,
    },
    /// Multi-head scaled-dot attention over `batch` sequences of `seq` rows.
    /// Inputs are projected q/k/v of shape `[batch*seq, dim]`; positions with
    /// `key_mask == false` are excluded as keys.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        attn: TensorOf<E>,
    },
    GatherRows {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    Dropout {
        x: NodeId,
        scale_mask: Vec<E>,
    },
    L2NormRows {
        x: NodeId,
        norms: Vec<E>,
    },
    /// Fused softmax + cross-entropy, mean over rows; output is scalar.
    SoftmaxXent {
        logits: NodeId,
        targets: Targets<E>,
        probs: TensorOf<E>,
    },
    /// In-batch triplet hinge over a `[B, B]` score matrix where the diagonal
    /// holds positive scores; output is the mean hinge over all B(B-1)
    /// (query, negative) pairs.
    TripletHinge {
        scores: NodeId,
        margin: E,
    },
    MeanAll {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
}

struct Node<E: Elem> {
    value: TensorOf<E>,
    grad: Option<TensorOf<E>>,
    trainable: bool,
    op: Op<E>,
}

/// Autodiff tape. `E` is `f32` in production; `f64` for gradient checking.
pub struct GraphOf<E: Elem> {
    nodes: Vec<Node<E>>,
    dropout_rng: Option<ChaCha8Rng>,
}

/// The production graph type.
pub type Graph = GraphOf<f32>;

impl<E: Elem> GraphOf<E> {
    /// Training-mode graph; `dropout_seed` drives the dropout mask stream.
    pub fn train(dropout_seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
        }
    }

    /// Inference-mode graph: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    pub fn is_train(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorOf<E> {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated at `id`, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&TensorOf<E>> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: TensorOf<E>, op: Op<E>, trainable: bool) -> NodeId {
        debug_assert!(
            value.all_finite(),
            "non-finite values produced at node {} ({})",
            self.nodes.len(),
            op_name(&op),
        );
        self.nodes.push(Node {
            value,
            grad: None,
            trainable,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (an input binding or constant).
    pub fn input(&mut self, value: TensorOf<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is retained for the optimizer.
    pub fn param(&mut self, value: TensorOf<E>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(false, self.value(b), false);
        self.push(v, Op::MatMul { a, b, trans_b: false }, false)
    }

    /// `a * b^T`; used for attention-style score matrices and weight tying.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(false, self.value(b), true);
        self.push(v, Op::MatMul { a, b, trans_b: true }, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut v = va.clone();
        v.add_assign(vb);
        self.push(v, Op::Add { a, b }, false)
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (vx, vb) = (self.value(x), self.value(bias));
        assert_eq!(vb.rows(), 1, "add_row bias must be [1, n]");
        assert_eq!(vx.cols(), vb.cols(), "add_row width mismatch");
        let mut v = vx.clone();
        for r in 0..v.rows() {
            for (out, b) in v.row_mut(r).iter_mut().zip(vb.row(0)) {
                *out += *b;
            }
        }
        self.push(v, Op::AddRow { x, bias }, false)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let v = TensorOf::from_vec(va.rows(), va.cols(), data);
        self.push(v, Op::MulElem { a, b }, false)
    }

    pub fn scale(&mut self, x: NodeId, c: E) -> NodeId {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::Scale { x, c }, false)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu_val);
        self.push(v, Op::Gelu { x }, false)
    }

    /// Row-wise layer normalization with affine parameters
    /// (`gamma`, `beta`: `[1, n]`). Mean/variance accumulate in f64.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        assert_eq!(self.value(gamma).shape(), [1, cols], "layer_norm gamma shape");
        assert_eq!(self.value(beta).shape(), [1, cols], "layer_norm beta shape");
        let eps = 1e-5f64;
        let mut xhat = TensorOf::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(E::from_f64(rs));
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = E::from_f64((v.to_f64() - mean) * rs);
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut out = TensorOf::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, xhat.at(r, c) * g[c] + b[c]);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            false,
        )
    }

    /// Row-wise softmax with max-subtraction; stable for logits up to ±80
    /// and far beyond.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut probs = TensorOf::zeros(vx.rows(), vx.cols());
        for r in 0..vx.rows() {
            softmax_row_into(vx.row(r), probs.row_mut(r));
        }
        let v = probs.clone();
        self.push(v, Op::SoftmaxRows { x, probs }, false)
    }

    /// Multi-head attention. `q`/`k`/`v` are `[batch*seq, dim]` projections;
    /// `key_mask[p]` is false at padded positions, which are excluded as
    /// attention keys (their rows still produce outputs, callers must not
    /// consume them).
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        seq: usize,
        key_mask: Arc<Vec<bool>>,
    ) -> NodeId {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = vq.cols();
        assert_eq!(vq.shape(), vk.shape(), "attention q/k shape mismatch");
        assert_eq!(vq.shape(), vv.shape(), "attention q/v shape mismatch");
        assert_eq!(dim % heads, 0, "attention dim {dim} not divisible by {heads} heads");
        let rows = vq.rows();
        assert_eq!(rows % seq, 0, "attention rows {rows} not a multiple of seq {seq}");
        assert_eq!(key_mask.len(), rows, "attention key_mask length mismatch");
        let batch = rows / seq;
        let dh = dim / heads;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());

        let mut out = TensorOf::zeros(rows, dim);
        let mut attn = TensorOf::zeros(batch * heads * seq, seq);
        let mut qh = TensorOf::zeros(seq, dh);
        let mut kh = TensorOf::zeros(seq, dh);
        let mut vh = TensorOf::zeros(seq, dh);
        for b in 0..batch {
            for h in 0..heads {
                copy_head(vq, b, h, seq, dh, &mut qh);
                copy_head(vk, b, h, seq, dh, &mut kh);
                copy_head(vv, b, h, seq, dh, &mut vh);
                let mut scores = qh.matmul(false, &kh, true);
                scores.scale_assign(scale);
                let mask = &key_mask[b * seq..(b + 1) * seq];
                let block = (b * heads + h) * seq;
                for i in 0..seq {
                    masked_softmax_row_into(scores.row(i), mask, attn.row_mut(block + i));
                }
                // ctx = attn_block * vh
                let mut ctx = TensorOf::zeros(seq, dh);
                gemm_block(&attn, block, seq, false, &vh, &mut ctx);
                for i in 0..seq {
                    let dst = out.row_mut(b * seq + i);
                    dst[h * dh..(h + 1) * dh].copy_from_slice(ctx.row(i));
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                attn,
            },
            false,
        )
    }

    /// `out[r, :] = x[idx[r], :]`. Serves as embedding lookup (x = table),
    /// sequence pooling and masked-position gathering.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let vx = self.value(x);
        let mut out = TensorOf::zeros(idx.len(), vx.cols());
        for (r, &i) in idx.iter().enumerate() {
            assert!(
                i < vx.rows(),
                "gather_rows index {i} out of range for {} rows",
                vx.rows()
            );
            out.row_mut(r).copy_from_slice(vx.row(i));
        }
        self.push(out, Op::GatherRows { x, idx }, false)
    }

    /// Inverted dropout: in training mode keeps each element with
    /// probability `1 - p` and rescales by `1/(1-p)`; identity in eval mode
    /// or at `p <= 0`.
    pub fn dropout(&mut self, x: NodeId, p: f32) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1");
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let keep = 1.0 / (1.0 - p as f64);
        let n = self.nodes[x.0].value.len();
        let mask: Vec<E> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < p as f64 {
                    E::ZERO
                } else {
                    E::from_f64(keep)
                }
            })
            .collect();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let v = TensorOf::from_vec(vx.rows(), vx.cols(), data);
        self.push(v, Op::Dropout { x, scale_mask: mask }, false)
    }

    /// Row-wise L2 normalization.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut out = TensorOf::zeros(vx.rows(), vx.cols());
        let mut norms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let n = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            let n = n.max(1e-12);
            norms.push(E::from_f64(n));
            let inv = E::from_f64(1.0 / n);
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = *v * inv;
            }
        }
        self.push(out, Op::L2NormRows { x, norms }, false)
    }

    /// Fused softmax cross-entropy, mean over rows. For `Targets::Dist` the
    /// rows of the target tensor must each sum to 1.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Targets<E>) -> NodeId {
        let z = self.value(logits);
        let (rows, cols) = (z.rows(), z.cols());
        assert!(rows > 0, "softmax_cross_entropy on empty logits");
        match &targets {
            Targets::Classes(ys) => {
                assert_eq!(ys.len(), rows, "one target class per logits row");
                for &y in ys.iter() {
                    assert!(y < cols, "target class {y} out of range ({cols} classes)");
                }
            }
            Targets::Dist(t) => {
                assert_eq!(t.shape(), z.shape(), "target distribution shape mismatch");
            }
        }
        let mut probs = TensorOf::zeros(rows, cols);
        let mut loss = 0.0f64;
        for r in 0..rows {
            let row = z.row(r);
            let max = row
                .iter()
                .map(|v| v.to_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0f64;
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                let e = (v.to_f64() - max).exp();
                sum += e;
                *p = E::from_f64(e);
            }
            let lse = max + sum.ln();
            let inv = E::from_f64(1.0 / sum);
            for p in probs.row_mut(r) {
                *p = *p * inv;
            }
            match &targets {
                Targets::Classes(ys) => {
                    loss += lse - row[ys[r]].to_f64();
                }
                Targets::Dist(t) => {
                    for (tv, zv) in t.row(r).iter().zip(row) {
                        let tv = tv.to_f64();
                        if tv != 0.0 {
                            loss += tv * (lse - zv.to_f64());
                        }
                    }
                }
            }
        }
        let v = TensorOf::scalar(E::from_f64(loss / rows as f64));
        self.push(
            v,
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
            false,
        )
    }

    /// Mean hinge over all in-batch triplets of a `[B, B]` score matrix:
    /// `1/(B(B-1)) * sum_{i != j} max(0, margin - S[i,i] + S[i,j])`.
    pub fn triplet_hinge(&mut self, scores: NodeId, margin: E) -> NodeId {
        let s = self.value(scores);
        let b = s.rows();
        assert_eq!(s.rows(), s.cols(), "triplet scores must be square");
        assert!(b >= 2, "in-batch triplet loss needs batch size >= 2");
        let mut total = 0.0f64;
        for i in 0..b {
            let pos = s.at(i, i).to_f64();
            for j in 0..b {
                if j != i {
                    total += (margin.to_f64() - pos + s.at(i, j).to_f64()).max(0.0);
                }
            }
        }
        let v = TensorOf::scalar(E::from_f64(total / (b * (b - 1)) as f64));
        self.push(v, Op::TripletHinge { scores, margin }, false)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let m = vx.data().iter().map(|v| v.to_f64()).sum::<f64>() / vx.len() as f64;
        self.push(TensorOf::scalar(E::from_f64(m)), Op::MeanAll { x }, false)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().map(|v| v.to_f64()).sum::<f64>();
        self.push(TensorOf::scalar(E::from_f64(s)), Op::SumAll { x }, false)
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate into every
    /// ancestor node and remain readable afterwards; saved forward context
    /// is consumed, so each graph supports a single backward pass.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(
            self.value(loss).is_scalar(),
            "backward requires a scalar loss, got {:?}",
            self.value(loss).shape()
        );
        self.nodes[loss.0].grad = Some(TensorOf::scalar(E::ONE));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b, trans_b } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let mut ga = self.take_grad_like(a);
                    if trans_b {
                        ga.gemm_accum(&gout, false, self.value(b), false, E::ONE, E::ONE);
                    } else {
                        ga.gemm_accum(&gout, false, self.value(b), true, E::ONE, E::ONE);
                    }
                    self.put_grad(a, ga);
                    let mut gb = self.take_grad_like(b);
                    if trans_b {
                        gb.gemm_accum(&gout, true, self.value(a), false, E::ONE, E::ONE);
                    } else {
                        gb.gemm_accum(self.value(a), true, &gout, false, E::ONE, E::ONE);
                    }
                    self.put_grad(b, gb);
                    self.nodes[i].grad = Some(gout);
                }
                Op::Add { a, b } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    self.acc_grad(a, &gout);
                    self.acc_grad(b, &gout);
                    self.nodes[i].grad = Some(gout);
                }
                Op::AddRow { x, bias } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    self.acc_grad(x, &gout);
                    let mut gb = self.take_grad_like(bias);
                    for c in 0..gout.cols() {
                        let mut s = 0.0f64;
                        for r in 0..gout.rows() {
                            s += gout.at(r, c).to_f64();
                        }
                        let v = gb.at(0, c) + E::from_f64(s);
                        gb.set(0, c, v);
                    }
                    self.put_grad(bias, gb);
                    self.nodes[i].grad = Some(gout);
                }
                Op::MulElem { a, b } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let da = elementwise_product(&gout, self.value(b));
                    self.acc_grad(a, &da);
                    let db = elementwise_product(&gout, self.value(a));
                    self.acc_grad(b, &db);
                    self.nodes[i].grad = Some(gout);
                }
                Op::Scale { x, c } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let dx = gout.map(|g| g * c);
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::Gelu { x } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let vx = self.value(x);
                    let data = gout
                        .data()
                        .iter()
                        .zip(vx.data())
                        .map(|(&g, &v)| g * gelu_grad(v))
                        .collect();
                    let dx = TensorOf::from_vec(gout.rows(), gout.cols(), data);
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let (rows, cols) = (gout.rows(), gout.cols());
                    let gvec = self.value(gamma).row(0).to_vec();
                    let mut dgamma = self.take_grad_like(gamma);
                    let mut dbeta = self.take_grad_like(beta);
                    for c in 0..cols {
                        let mut sg = 0.0f64;
                        let mut sb = 0.0f64;
                        for r in 0..rows {
                            let g = gout.at(r, c).to_f64();
                            sg += g * xhat.at(r, c).to_f64();
                            sb += g;
                        }
                        let ng = dgamma.at(0, c) + E::from_f64(sg);
                        dgamma.set(0, c, ng);
                        let nb = dbeta.at(0, c) + E::from_f64(sb);
                        dbeta.set(0, c, nb);
                    }
                    self.put_grad(gamma, dgamma);
                    self.put_grad(beta, dbeta);
                    let mut dx = TensorOf::zeros(rows, cols);
                    for r in 0..rows {
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for c in 0..cols {
                            let dxh = gout.at(r, c).to_f64() * gvec[c].to_f64();
                            m1 += dxh;
                            m2 += dxh * xhat.at(r, c).to_f64();
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        let rs = rstd[r].to_f64();
                        for c in 0..cols {
                            let dxh = gout.at(r, c).to_f64() * gvec[c].to_f64();
                            let v = rs * (dxh - m1 - xhat.at(r, c).to_f64() * m2);
                            dx.set(r, c, E::from_f64(v));
                        }
                    }
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::SoftmaxRows { x, probs } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let dx = softmax_backward(&probs, &gout);
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    seq,
                    attn,
                } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let dim = gout.cols();
                    let batch = gout.rows() / seq;
                    let dh = dim / heads;
                    let scale = E::from_f64(1.0 / (dh as f64).sqrt());
                    let mut dq = self.take_grad_like(q);
                    let mut dk = self.take_grad_like(k);
                    let mut dv = self.take_grad_like(v);
                    let mut qh = TensorOf::zeros(seq, dh);
                    let mut kh = TensorOf::zeros(seq, dh);
                    let mut vh = TensorOf::zeros(seq, dh);
                    let mut dctx = TensorOf::zeros(seq, dh);
                    for b in 0..batch {
                        for h in 0..heads {
                            copy_head(self.value(q), b, h, seq, dh, &mut qh);
                            copy_head(self.value(k), b, h, seq, dh, &mut kh);
                            copy_head(self.value(v), b, h, seq, dh, &mut vh);
                            for i2 in 0..seq {
                                let src = gout.row(b * seq + i2);
                                dctx.row_mut(i2).copy_from_slice(&src[h * dh..(h + 1) * dh]);
                            }
                            let block = (b * heads + h) * seq;
                            // dV_h += A^T * dctx
                            let mut dvh = TensorOf::zeros(seq, dh);
                            gemm_block(&attn, block, seq, true, &dctx, &mut dvh);
                            // dA = dctx * V_h^T, then softmax backward
                            let da = dctx.matmul(false, &vh, true);
                            let mut a_block = TensorOf::zeros(seq, seq);
                            for i2 in 0..seq {
                                a_block.row_mut(i2).copy_from_slice(attn.row(block + i2));
                            }
                            let mut ds = softmax_backward(&a_block, &da);
                            ds.scale_assign(scale);
                            let dqh = ds.matmul(false, &kh, false);
                            let dkh = ds.matmul(true, &qh, false);
                            add_head(&mut dq, b, h, seq, dh, &dqh);
                            add_head(&mut dk, b, h, seq, dh, &dkh);
                            add_head(&mut dv, b, h, seq, dh, &dvh);
                        }
                    }
                    self.put_grad(q, dq);
                    self.put_grad(k, dk);
                    self.put_grad(v, dv);
                    self.nodes[i].grad = Some(gout);
                }
                Op::GatherRows { x, idx } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let mut gx = self.take_grad_like(x);
                    for (r, &src) in idx.iter().enumerate() {
                        for (g, d) in gx.row_mut(src).iter_mut().zip(gout.row(r)) {
                            *g += *d;
                        }
                    }
                    self.put_grad(x, gx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::Dropout { x, scale_mask } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let data = gout
                        .data()
                        .iter()
                        .zip(&scale_mask)
                        .map(|(&g, &m)| g * m)
                        .collect();
                    let dx = TensorOf::from_vec(gout.rows(), gout.cols(), data);
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::L2NormRows { x, norms } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let vx = self.value(x);
                    let mut dx = TensorOf::zeros(gout.rows(), gout.cols());
                    for r in 0..gout.rows() {
                        let n = norms[r].to_f64();
                        let inv = 1.0 / n;
                        let mut dot = 0.0f64;
                        for (g, v) in gout.row(r).iter().zip(vx.row(r)) {
                            dot += g.to_f64() * v.to_f64() * inv;
                        }
                        for c in 0..gout.cols() {
                            let y = vx.at(r, c).to_f64() * inv;
                            let v = (gout.at(r, c).to_f64() - dot * y) * inv;
                            dx.set(r, c, E::from_f64(v));
                        }
                    }
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let g = gout.item().to_f64();
                    let rows = probs.rows();
                    let c = E::from_f64(g / rows as f64);
                    let mut dz = probs.map(|p| p * c);
                    match &targets {
                        Targets::Classes(ys) => {
                            for (r, &y) in ys.iter().enumerate() {
                                let v = dz.at(r, y) - c;
                                dz.set(r, y, v);
                            }
                        }
                        Targets::Dist(t) => {
                            for (d, tv) in dz.data_mut().iter_mut().zip(t.data()) {
                                *d -= *tv * c;
                            }
                        }
                    }
                    self.acc_grad(logits, &dz);
                    self.nodes[i].grad = Some(gout);
                }
                Op::TripletHinge { scores, margin } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let s = self.value(scores);
                    let b = s.rows();
                    let c = E::from_f64(gout.item().to_f64() / (b * (b - 1)) as f64);
                    let mut ds = TensorOf::zeros(b, b);
                    for r in 0..b {
                        let pos = s.at(r, r).to_f64();
                        for j in 0..b {
                            if j != r && margin.to_f64() - pos + s.at(r, j).to_f64() > 0.0 {
                                ds.set(r, j, c);
                                let v = ds.at(r, r) - c;
                                ds.set(r, r, v);
                            }
                        }
                    }
                    self.acc_grad(scores, &ds);
                    self.nodes[i].grad = Some(gout);
                }
                Op::MeanAll { x } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let vx = self.value(x);
                    let c = E::from_f64(gout.item().to_f64() / vx.len() as f64);
                    let dx = TensorOf::filled(vx.rows(), vx.cols(), c);
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
                Op::SumAll { x } => {
                    let gout = self.nodes[i].grad.take().unwrap();
                    let vx = self.value(x);
                    let dx = TensorOf::filled(vx.rows(), vx.cols(), gout.item());
                    self.acc_grad(x, &dx);
                    self.nodes[i].grad = Some(gout);
                }
            }
        }
    }

    fn take_grad_like(&mut self, id: NodeId) -> TensorOf<E> {
        let shape = self.nodes[id.0].value.shape();
        self.nodes[id.0]
            .grad
            .take()
            .unwrap_or_else(|| TensorOf::zeros(shape[0], shape[1]))
    }

    fn put_grad(&mut self, id: NodeId, g: TensorOf<E>) {
        self.nodes[id.0].grad = Some(g);
    }

    fn acc_grad(&mut self, id: NodeId, delta: &TensorOf<E>) {
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_assign(delta),
            slot => *slot = Some(delta.clone()),
        }
    }

    /// True when the node was created with [`GraphOf::param`].
    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }
}

fn op_name<E: Elem>(op: &Op<E>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::AddRow { .. } => "add_row",
        Op::MulElem { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Gelu { .. } => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::Attention { .. } => "attention",
        Op::GatherRows { .. } => "gather_rows",
        Op::Dropout { .. } => "dropout",
        Op::L2NormRows { .. } => "l2_normalize_rows",
        Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        Op::TripletHinge { .. } => "triplet_hinge",
        Op::MeanAll { .. } => "mean_all",
        Op::SumAll { .. } => "sum_all",
    }
}

fn elementwise_product<E: Elem>(a: &TensorOf<E>, b: &TensorOf<E>) -> TensorOf<E> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    TensorOf::from_vec(a.rows(), a.cols(), data)
}

/// `dx = y * (dy - rowwise_dot(dy, y))` for softmax outputs `y`.
fn softmax_backward<E: Elem>(y: &TensorOf<E>, dy: &TensorOf<E>) -> TensorOf<E> {
    let mut dx = TensorOf::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let mut dot = 0.0f64;
        for (g, p) in dy.row(r).iter().zip(y.row(r)) {
            dot += g.to_f64() * p.to_f64();
        }
        let dot = E::from_f64(dot);
        for c in 0..y.cols() {
            dx.set(r, c, y.at(r, c) * (dy.at(r, c) - dot));
        }
    }
    dx
}

fn softmax_row_into<E: Elem>(row: &[E], out: &mut [E]) {
    let max = row
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0f64;
    for (o, v) in out.iter_mut().zip(row) {
        let e = (v.to_f64() - max).exp();
        sum += e;
        *o = E::from_f64(e);
    }
    let inv = E::from_f64(1.0 / sum);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// Softmax over permitted keys only; masked columns come out exactly zero.
fn masked_softmax_row_into<E: Elem>(row: &[E], mask: &[bool], out: &mut [E]) {
    let mut max = f64::NEG_INFINITY;
    for (v, &ok) in row.iter().zip(mask) {
        if ok {
            max = max.max(v.to_f64());
        }
    }
    debug_assert!(max.is_finite(), "attention row with no unmasked keys");
    let mut sum = 0.0f64;
    for ((o, v), &ok) in out.iter_mut().zip(row).zip(mask) {
        if ok {
            let e = (v.to_f64() - max).exp();
            sum += e;
            *o = E::from_f64(e);
        } else {
            *o = E::ZERO;
        }
    }
    let inv = E::from_f64(1.0 / sum);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn copy_head<E: Elem>(
    src: &TensorOf<E>,
    b: usize,
    h: usize,
    seq: usize,
    dh: usize,
    dst: &mut TensorOf<E>,
) {
    for i in 0..seq {
        let row = src.row(b * seq + i);
        dst.row_mut(i).copy_from_slice(&row[h * dh..(h + 1) * dh]);
    }
}

fn add_head<E: Elem>(
    dst: &mut TensorOf<E>,
    b: usize,
    h: usize,
    seq: usize,
    dh: usize,
    src: &TensorOf<E>,
) {
    for i in 0..seq {
        let row = dst.row_mut(b * seq + i);
        for (d, s) in row[h * dh..(h + 1) * dh].iter_mut().zip(src.row(i)) {
            *d += *s;
        }
    }
}

/// `out (+)= op(block) * rhs` where `block` is the `seq` rows of `a`
/// starting at `row0`, optionally transposed.
fn gemm_block<E: Elem>(
    a: &TensorOf<E>,
    row0: usize,
    seq: usize,
    trans: bool,
    rhs: &TensorOf<E>,
    out: &mut TensorOf<E>,
) {
    let cols = a.cols();
    debug_assert_eq!(cols, seq);
    let base = row0 * cols;
    let block = &a.data()[base..base + seq * cols];
    let tmp = TensorOf::from_vec(seq, cols, block.to_vec());
    out.gemm_accum(&tmp, trans, rhs, false, E::ONE, E::ONE);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
fn gelu_val<E: Elem>(x: E) -> E {
    let x = x.to_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    E::from_f64(0.5 * x * (1.0 + u.tanh()))
}

fn gelu_grad<E: Elem>(x: E) -> E {
    let x = x.to_f64();
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    E::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}
