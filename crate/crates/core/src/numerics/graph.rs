//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Ops evaluate eagerly when recorded; `backward` walks the tape in reverse
//! creation order. The op set is exactly what the unified transformer and
//! its four training objectives need, with attention, layer norm and the
//! losses fused into single nodes to keep tapes short. Gradients accumulate
//! only into nodes that can reach a parameter leaf.

use alloc::vec;
use alloc::vec::Vec;

use super::gumbel::gumbel_weights;
use super::real::Real;
use super::tensor::TensorValue;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-segment attention layout inside a packed batch: rows
/// `start..start+len` attend among themselves under `allowed`, a row-major
/// `len x len` boolean matrix (entry `i*len + j` true iff local row `i` may
/// attend to local row `j`).
#[derive(Debug, Clone)]
pub struct SegmentAttention {
    pub start: usize,
    pub len: usize,
    pub allowed: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct AttentionPlan {
    pub heads: usize,
    pub segments: Vec<SegmentAttention>,
}

/// Row assembly recipe for embedding lookup: each output row is the sum of
/// a token embedding (skipped for latent slots, marked by `LATENT_SLOT`),
/// a position embedding and a role embedding; latent slot rows additionally
/// receive a row of the `latent` input in `latent_dest` order.
#[derive(Debug, Clone)]
pub struct AssembleSpec {
    pub tok_ids: Vec<u32>,
    pub pos_ids: Vec<u32>,
    pub role_ids: Vec<u32>,
    pub latent_dest: Vec<usize>,
}

/// Sentinel token id marking a latent slot row in [`AssembleSpec::tok_ids`].
pub const LATENT_SLOT: u32 = u32::MAX;

enum Op<T: Real> {
    Param,
    Constant,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Assemble {
        tok: Var,
        pos: Var,
        role: Var,
        latent: Option<Var>,
        spec: AssembleSpec,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        plan: AttentionPlan,
        // softmax probabilities per segment, heads stacked: [heads*len, len]
        probs: Vec<TensorValue<T>>,
    },
    SoftmaxRows {
        x: Var,
    },
    LogSoftmaxRows {
        x: Var,
    },
    GumbelSoftmax {
        x: Var,
        noise: TensorValue<T>,
        tau: T,
    },
    Sigmoid {
        x: Var,
    },
    NllMean {
        logits: Var,
        targets: Vec<u32>,
        weights: Vec<T>,
    },
    BagNllMean {
        logits: Var,
        bags: Vec<Vec<u32>>,
        weights: Vec<T>,
    },
    RceLoss {
        p_pos: Var,
        p_neg: Var,
        clamped: bool,
    },
}

struct Node<T: Real> {
    value: TensorValue<T>,
    grad: Option<TensorValue<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &TensorValue<T> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&TensorValue<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: TensorValue<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: TensorValue<T>) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: TensorValue<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where the flags transpose the row-major storage.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (m, ka) = if ta {
            (av.cols(), av.rows())
        } else {
            (av.rows(), av.cols())
        };
        let (kb, n) = if tb {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        assert_eq!(ka, kb, "matmul inner dimension mismatch");
        let mut out = TensorValue::zeros(&[m, n]);
        T::gemm(
            m,
            ka,
            n,
            T::ONE,
            av.data(),
            ta,
            bv.data(),
            tb,
            T::ZERO,
            out.data_mut(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "add shape mismatch"
        );
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    /// Adds a length-`cols` bias vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.shape().len(), 1, "bias must be rank 1");
        assert_eq!(xv.cols(), bv.len(), "bias length mismatch");
        let cols = xv.cols();
        let mut out = xv.clone();
        for row in 0..out.rows() {
            for (o, b) in out.row_mut(row).iter_mut().zip(&bv.data()[..cols]) {
                *o += *b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias { x, bias }, needs)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, factor }, needs)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let out = TensorValue::matrix(idx.len(), cols, data);
        let needs = self.needs(x);
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Embedding assembly; see [`AssembleSpec`].
    pub fn assemble(
        &mut self,
        tok: Var,
        pos: Var,
        role: Var,
        latent: Option<Var>,
        spec: AssembleSpec,
    ) -> Var {
        let dim = self.value(tok).cols();
        assert_eq!(self.value(pos).cols(), dim);
        assert_eq!(self.value(role).cols(), dim);
        let rows = spec.tok_ids.len();
        assert_eq!(spec.pos_ids.len(), rows);
        assert_eq!(spec.role_ids.len(), rows);
        let n_slots = spec.tok_ids.iter().filter(|&&t| t == LATENT_SLOT).count();
        assert_eq!(spec.latent_dest.len(), n_slots, "latent slot count mismatch");
        if n_slots > 0 {
            let lv = latent.expect("latent rows required for latent slots");
            assert_eq!(self.value(lv).rows(), n_slots);
            assert_eq!(self.value(lv).cols(), dim);
        }

        let mut out = TensorValue::zeros(&[rows, dim]);
        for r in 0..rows {
            let dst = out.row_mut(r);
            if spec.tok_ids[r] != LATENT_SLOT {
                let src = self.nodes[tok.0].value.row(spec.tok_ids[r] as usize);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += *s;
                }
            }
            let src = self.nodes[pos.0].value.row(spec.pos_ids[r] as usize);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
            let src = self.nodes[role.0].value.row(spec.role_ids[r] as usize);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s;
            }
        }
        for (slot, &dest_row) in spec.latent_dest.iter().enumerate() {
            assert_eq!(spec.tok_ids[dest_row], LATENT_SLOT);
            let lv = latent.unwrap();
            let src: Vec<T> = self.nodes[lv.0].value.row(slot).to_vec();
            for (d, s) in out.row_mut(dest_row).iter_mut().zip(&src) {
                *d += *s;
            }
        }
        let needs = self.needs(tok)
            || self.needs(pos)
            || self.needs(role)
            || latent.map(|l| self.needs(l)).unwrap_or(false);
        self.push(
            out,
            Op::Assemble {
                tok,
                pos,
                role,
                latent,
                spec,
            },
            needs,
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let rows = xv.rows();
        let cols = xv.cols();
        assert_eq!(self.value(gain).len(), cols);
        assert_eq!(self.value(bias).len(), cols);
        let mut out = TensorValue::zeros(&[rows, cols]);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let inv_n = T::ONE / T::from_usize(cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rstd = T::ONE / (var + eps).sqrt();
            means.push(mean);
            rstds.push(rstd);
            let g = self.nodes[gain.0].value.data();
            let b = self.nodes[bias.0].value.data();
            for c in 0..cols {
                out.row_mut(r)[c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            needs,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_fwd);
        let needs = self.needs(x);
        self.push(out, Op::Gelu { x }, needs)
    }

    /// Multi-head scaled dot-product attention over packed segments.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, plan: AttentionPlan) -> Var {
        let qv = self.value(q);
        let dim = qv.cols();
        assert_eq!(self.value(k).cols(), dim);
        assert_eq!(self.value(v).cols(), dim);
        assert_eq!(dim % plan.heads, 0, "dim must divide by heads");
        let hd = dim / plan.heads;
        let scale = T::ONE / T::from_usize(hd).sqrt();
        let total_rows = qv.rows();
        let mut out = TensorValue::zeros(&[total_rows, dim]);
        let mut all_probs = Vec::with_capacity(plan.segments.len());

        for seg in &plan.segments {
            let s = seg.len;
            assert_eq!(seg.allowed.len(), s * s, "mask size mismatch");
            let mut probs = TensorValue::zeros(&[plan.heads * s, s]);
            for h in 0..plan.heads {
                let hoff = h * hd;
                for i in 0..s {
                    let qrow = &self.nodes[q.0].value.row(seg.start + i)[hoff..hoff + hd];
                    // scores over allowed keys only; diagonal is always allowed
                    let mut max_score = None::<T>;
                    let mut scores = vec![T::ZERO; s];
                    for j in 0..s {
                        if !seg.allowed[i * s + j] {
                            continue;
                        }
                        let krow = &self.nodes[k.0].value.row(seg.start + j)[hoff..hoff + hd];
                        let dot: T = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum();
                        let sc = dot * scale;
                        scores[j] = sc;
                        max_score = Some(match max_score {
                            Some(m) => m.max(sc),
                            None => sc,
                        });
                    }
                    let m = max_score.expect("attention row with empty mask");
                    let mut denom = T::ZERO;
                    for j in 0..s {
                        if seg.allowed[i * s + j] {
                            let e = (scores[j] - m).exp();
                            probs.row_mut(h * s + i)[j] = e;
                            denom += e;
                        }
                    }
                    let inv = T::ONE / denom;
                    for j in 0..s {
                        probs.row_mut(h * s + i)[j] *= inv;
                    }
                    // context = probs . V
                    let orow = &mut out.row_mut(seg.start + i)[hoff..hoff + hd];
                    for j in 0..s {
                        let p = probs.row(h * s + i)[j];
                        if p == T::ZERO {
                            continue;
                        }
                        let vrow = &self.nodes[v.0].value.row(seg.start + j)[hoff..hoff + hd];
                        for (o, &val) in orow.iter_mut().zip(vrow) {
                            *o += p * val;
                        }
                    }
                }
            }
            all_probs.push(probs);
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                plan,
                probs: all_probs,
            },
            needs,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let needs = self.needs(x);
        self.push(out, Op::SoftmaxRows { x }, needs)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::LogSoftmaxRows { x }, needs)
    }

    /// Row-wise `softmax((x + noise) / tau)`; the relaxed categorical sample.
    /// `noise` carries pre-drawn Gumbel variates and is treated as constant.
    pub fn gumbel_softmax(&mut self, x: Var, noise: TensorValue<T>, tau: T) -> Var {
        let xv = self.value(x);
        assert!(xv.same_shape(&noise), "gumbel noise shape mismatch");
        assert!(tau > T::ZERO, "temperature must be positive");
        let mut out = TensorValue::zeros(xv.shape());
        for r in 0..xv.rows() {
            let w = gumbel_weights(xv.row(r), noise.row(r), tau);
            out.row_mut(r).copy_from_slice(&w);
        }
        let needs = self.needs(x);
        self.push(out, Op::GumbelSoftmax { x, noise, tau }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::ONE / (T::ONE + (-v).exp()));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Weighted mean token-level negative log-likelihood:
    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    pub fn nll_mean(&mut self, logits: Var, targets: Vec<u32>, weights: Vec<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        assert_eq!(lv.rows(), weights.len());
        let mut total = T::ZERO;
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            total += w * (lse - row[t as usize]);
        }
        let needs = self.needs(logits);
        self.push(
            TensorValue::scalar(total),
            Op::NllMean {
                logits,
                targets,
                weights,
            },
            needs,
        )
    }

    /// Order-free variant: each row is scored against a bag of target ids,
    /// `sum_i weights[i] * sum_{t in bag_i} -log softmax(logits[i])[t]`.
    pub fn bag_nll_mean(&mut self, logits: Var, bags: Vec<Vec<u32>>, weights: Vec<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), bags.len());
        assert_eq!(lv.rows(), weights.len());
        let mut total = T::ZERO;
        for (r, (bag, &w)) in bags.iter().zip(&weights).enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            for &t in bag {
                total += w * (lse - row[t as usize]);
            }
        }
        let needs = self.needs(logits);
        self.push(
            TensorValue::scalar(total),
            Op::BagNllMean {
                logits,
                bags,
                weights,
            },
            needs,
        )
    }

    /// Coherence-pair loss `mean_i [-ln p_pos[i] - ln(1 - p_neg[i])]`.
    ///
    /// Probabilities at exactly 0 or 1 are clamped to 1e-7 away from the
    /// boundary; the second return flags whether any clamp fired.
    pub fn rce_loss(&mut self, p_pos: Var, p_neg: Var) -> (Var, bool) {
        let pp = self.value(p_pos);
        let pn = self.value(p_neg);
        assert_eq!(pp.len(), pn.len(), "positive/negative batch mismatch");
        assert!(!pp.is_empty());
        let eps = T::from_f64(1e-7);
        let hi = T::ONE - eps;
        let mut clamped = false;
        let mut total = T::ZERO;
        for (&p, &q) in pp.data().iter().zip(pn.data()) {
            let pc = if p < eps || p > hi {
                clamped = true;
                p.max(eps).min(hi)
            } else {
                p
            };
            let qc = if q < eps || q > hi {
                clamped = true;
                q.max(eps).min(hi)
            } else {
                q
            };
            total += -pc.ln() - (T::ONE - qc).ln();
        }
        total /= T::from_usize(pp.len());
        let needs = self.needs(p_pos) || self.needs(p_neg);
        let var = self.push(
            TensorValue::scalar(total),
            Op::RceLoss {
                p_pos,
                p_neg,
                clamped,
            },
            needs,
        );
        (var, clamped)
    }

    /// Runs reverse accumulation from a scalar output.
    pub fn backward(&mut self, output: Var) {
        assert_eq!(
            self.nodes[output.0].value.len(),
            1,
            "backward requires a scalar output"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        let seed = TensorValue::new(
            self.nodes[output.0].value.shape().to_vec(),
            vec![T::ONE],
        );
        self.nodes[output.0].grad = Some(seed);

        for i in (0..=output.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i);
        }
    }

    fn ensure_grad(&mut self, v: Var) -> &mut TensorValue<T> {
        if self.nodes[v.0].grad.is_none() {
            let shape = self.nodes[v.0].value.shape().to_vec();
            self.nodes[v.0].grad = Some(TensorValue::zeros(&shape));
        }
        self.nodes[v.0].grad.as_mut().unwrap()
    }

    fn propagate(&mut self, i: usize) {
        // Take the node's grad out so we can borrow inputs mutably.
        let dy = self.nodes[i].grad.take().unwrap();
        match &self.nodes[i].op {
            Op::Param | Op::Constant => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (m, k) = {
                    let av = &self.nodes[a.0].value;
                    if ta {
                        (av.cols(), av.rows())
                    } else {
                        (av.rows(), av.cols())
                    }
                };
                let n = dy.cols();
                if self.needs(a) {
                    let bd: Vec<T> = self.nodes[b.0].value.data().to_vec();
                    let ga = self.ensure_grad(a);
                    if !ta {
                        // dA = dY . op(B)^T
                        T::gemm(m, n, k, T::ONE, dy.data(), false, &bd, !tb, T::ONE, ga.data_mut());
                    } else {
                        // dA = op(B) . dY^T (A stored k x m)
                        T::gemm(k, n, m, T::ONE, &bd, tb, dy.data(), true, T::ONE, ga.data_mut());
                    }
                }
                if self.needs(b) {
                    let ad: Vec<T> = self.nodes[a.0].value.data().to_vec();
                    let gb = self.ensure_grad(b);
                    if !tb {
                        // dB = op(A)^T . dY
                        T::gemm(k, m, n, T::ONE, &ad, !ta, dy.data(), false, T::ONE, gb.data_mut());
                    } else {
                        // dB = dY^T . op(A) (B stored n x k)
                        T::gemm(n, m, k, T::ONE, dy.data(), true, &ad, ta, T::ONE, gb.data_mut());
                    }
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    self.ensure_grad(a).add_assign(&dy);
                }
                if self.needs(b) {
                    self.ensure_grad(b).add_assign(&dy);
                }
            }
            &Op::AddBias { x, bias } => {
                if self.needs(x) {
                    self.ensure_grad(x).add_assign(&dy);
                }
                if self.needs(bias) {
                    let cols = dy.cols();
                    let g = self.ensure_grad(bias);
                    for r in 0..dy.rows() {
                        for (gv, dv) in g.data_mut().iter_mut().zip(dy.row(r).iter()) {
                            *gv += *dv;
                        }
                    }
                    let _ = cols;
                }
            }
            &Op::Scale { x, factor } => {
                if self.needs(x) {
                    let g = self.ensure_grad(x);
                    for (gv, dv) in g.data_mut().iter_mut().zip(dy.data()) {
                        *gv += *dv * factor;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                if self.needs(x) {
                    let g = self.ensure_grad(x);
                    for (r, &src) in idx.iter().enumerate() {
                        for (gv, dv) in g.row_mut(src).iter_mut().zip(dy.row(r)) {
                            *gv += *dv;
                        }
                    }
                }
            }
            Op::Assemble {
                tok,
                pos,
                role,
                latent,
                spec,
            } => {
                let (tok, pos, role, latent) = (*tok, *pos, *role, *latent);
                let spec = AssembleSpec {
                    tok_ids: spec.tok_ids.clone(),
                    pos_ids: spec.pos_ids.clone(),
                    role_ids: spec.role_ids.clone(),
                    latent_dest: spec.latent_dest.clone(),
                };
                if self.needs(tok) {
                    let g = self.ensure_grad(tok);
                    for (r, &t) in spec.tok_ids.iter().enumerate() {
                        if t == LATENT_SLOT {
                            continue;
                        }
                        for (gv, dv) in g.row_mut(t as usize).iter_mut().zip(dy.row(r)) {
                            *gv += *dv;
                        }
                    }
                }
                if self.needs(pos) {
                    let g = self.ensure_grad(pos);
                    for (r, &p) in spec.pos_ids.iter().enumerate() {
                        for (gv, dv) in g.row_mut(p as usize).iter_mut().zip(dy.row(r)) {
                            *gv += *dv;
                        }
                    }
                }
                if self.needs(role) {
                    let g = self.ensure_grad(role);
                    for (r, &ro) in spec.role_ids.iter().enumerate() {
                        for (gv, dv) in g.row_mut(ro as usize).iter_mut().zip(dy.row(r)) {
                            *gv += *dv;
                        }
                    }
                }
                if let Some(l) = latent {
                    if self.needs(l) {
                        let g = self.ensure_grad(l);
                        for (slot, &dest) in spec.latent_dest.iter().enumerate() {
                            for (gv, dv) in g.row_mut(slot).iter_mut().zip(dy.row(dest)) {
                                *gv += *dv;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let mean = mean.clone();
                let rstd = rstd.clone();
                let rows = dy.rows();
                let cols = dy.cols();
                let inv_n = T::ONE / T::from_usize(cols);
                let xval: Vec<T> = self.nodes[x.0].value.data().to_vec();
                let gval: Vec<T> = self.nodes[gain.0].value.data().to_vec();
                if self.needs(gain) {
                    let g = self.ensure_grad(gain);
                    for r in 0..rows {
                        for c in 0..cols {
                            let xh = (xval[r * cols + c] - mean[r]) * rstd[r];
                            g.data_mut()[c] += dy.row(r)[c] * xh;
                        }
                    }
                }
                if self.needs(bias) {
                    let g = self.ensure_grad(bias);
                    for r in 0..rows {
                        for c in 0..cols {
                            g.data_mut()[c] += dy.row(r)[c];
                        }
                    }
                }
                if self.needs(x) {
                    let g = self.ensure_grad(x);
                    for r in 0..rows {
                        // dxhat = dy * gain; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut sum_dxh = T::ZERO;
                        let mut sum_dxh_xh = T::ZERO;
                        for c in 0..cols {
                            let dxh = dy.row(r)[c] * gval[c];
                            let xh = (xval[r * cols + c] - mean[r]) * rstd[r];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh;
                        }
                        let m1 = sum_dxh * inv_n;
                        let m2 = sum_dxh_xh * inv_n;
                        for c in 0..cols {
                            let dxh = dy.row(r)[c] * gval[c];
                            let xh = (xval[r * cols + c] - mean[r]) * rstd[r];
                            g.row_mut(r)[c] += rstd[r] * (dxh - m1 - xh * m2);
                        }
                    }
                }
            }
            &Op::Gelu { x } => {
                if self.needs(x) {
                    let xval: Vec<T> = self.nodes[x.0].value.data().to_vec();
                    let g = self.ensure_grad(x);
                    for ((gv, dv), xv) in g.data_mut().iter_mut().zip(dy.data()).zip(&xval) {
                        *gv += *dv * gelu_bwd(*xv);
                    }
                }
            }
            Op::Attention { q, k, v, plan, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let heads = plan.heads;
                let segments = plan.segments.clone();
                let probs: Vec<TensorValue<T>> = probs.clone();
                let dim = dy.cols();
                let hd = dim / heads;
                let scale = T::ONE / T::from_usize(hd).sqrt();
                let qval: Vec<T> = self.nodes[q.0].value.data().to_vec();
                let kval: Vec<T> = self.nodes[k.0].value.data().to_vec();
                let vval: Vec<T> = self.nodes[v.0].value.data().to_vec();
                let rows = dy.rows();
                let mut dq = vec![T::ZERO; rows * dim];
                let mut dk = vec![T::ZERO; rows * dim];
                let mut dv = vec![T::ZERO; rows * dim];
                for (seg, p) in segments.iter().zip(&probs) {
                    let s = seg.len;
                    for h in 0..heads {
                        let hoff = h * hd;
                        for i in 0..s {
                            let gi = seg.start + i;
                            let dout = &dy.row(gi)[hoff..hoff + hd];
                            // dP[j] = dout . V_j ; dV_j += P[i,j] * dout
                            let mut dprob = vec![T::ZERO; s];
                            let prow = p.row(h * s + i);
                            for j in 0..s {
                                let pij = prow[j];
                                let gj = seg.start + j;
                                if pij != T::ZERO {
                                    let vrow = &vval[gj * dim + hoff..gj * dim + hoff + hd];
                                    let mut acc = T::ZERO;
                                    for (a, b) in dout.iter().zip(vrow) {
                                        acc += *a * *b;
                                        // accumulate dV alongside
                                    }
                                    dprob[j] = acc;
                                    for (dvv, a) in dv[gj * dim + hoff..gj * dim + hoff + hd]
                                        .iter_mut()
                                        .zip(dout)
                                    {
                                        *dvv += pij * *a;
                                    }
                                }
                            }
                            // softmax backward within the allowed set
                            let dot: T = prow.iter().zip(&dprob).map(|(&a, &b)| a * b).sum();
                            for j in 0..s {
                                let pij = prow[j];
                                if pij == T::ZERO {
                                    continue;
                                }
                                let dscore = pij * (dprob[j] - dot) * scale;
                                let gj = seg.start + j;
                                let krow = &kval[gj * dim + hoff..gj * dim + hoff + hd];
                                let qrow = &qval[gi * dim + hoff..gi * dim + hoff + hd];
                                for c in 0..hd {
                                    dq[gi * dim + hoff + c] += dscore * krow[c];
                                    dk[gj * dim + hoff + c] += dscore * qrow[c];
                                }
                            }
                        }
                    }
                }
                if self.needs(q) {
                    let g = self.ensure_grad(q);
                    for (gv, dv_) in g.data_mut().iter_mut().zip(&dq) {
                        *gv += *dv_;
                    }
                }
                if self.needs(k) {
                    let g = self.ensure_grad(k);
                    for (gv, dv_) in g.data_mut().iter_mut().zip(&dk) {
                        *gv += *dv_;
                    }
                }
                if self.needs(v) {
                    let g = self.ensure_grad(v);
                    for (gv, dv_) in g.data_mut().iter_mut().zip(&dv) {
                        *gv += *dv_;
                    }
                }
            }
            &Op::SoftmaxRows { x } => {
                if self.needs(x) {
                    let yval: Vec<T> = self.nodes[i].value.data().to_vec();
                    let cols = dy.cols();
                    let g = self.ensure_grad(x);
                    for r in 0..dy.rows() {
                        let yrow = &yval[r * cols..(r + 1) * cols];
                        let dot: T = yrow.iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            g.row_mut(r)[c] += yrow[c] * (dy.row(r)[c] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows { x } => {
                if self.needs(x) {
                    let yval: Vec<T> = self.nodes[i].value.data().to_vec();
                    let cols = dy.cols();
                    let g = self.ensure_grad(x);
                    for r in 0..dy.rows() {
                        let sum_dy: T = dy.row(r).iter().copied().sum();
                        let yrow = &yval[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            g.row_mut(r)[c] += dy.row(r)[c] - yrow[c].exp() * sum_dy;
                        }
                    }
                }
            }
            Op::GumbelSoftmax { x, tau, .. } => {
                let x = *x;
                let tau = *tau;
                if self.needs(x) {
                    let yval: Vec<T> = self.nodes[i].value.data().to_vec();
                    let cols = dy.cols();
                    let inv_tau = T::ONE / tau;
                    let g = self.ensure_grad(x);
                    for r in 0..dy.rows() {
                        let yrow = &yval[r * cols..(r + 1) * cols];
                        let dot: T = yrow.iter().zip(dy.row(r)).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            g.row_mut(r)[c] += inv_tau * yrow[c] * (dy.row(r)[c] - dot);
                        }
                    }
                }
            }
            &Op::Sigmoid { x } => {
                if self.needs(x) {
                    let yval: Vec<T> = self.nodes[i].value.data().to_vec();
                    let g = self.ensure_grad(x);
                    for ((gv, dv), &y) in g.data_mut().iter_mut().zip(dy.data()).zip(&yval) {
                        *gv += *dv * y * (T::ONE - y);
                    }
                }
            }
            Op::NllMean {
                logits,
                targets,
                weights,
            } => {
                let logits = *logits;
                let targets = targets.clone();
                let weights = weights.clone();
                if self.needs(logits) {
                    let scale = dy.item();
                    let lval = self.nodes[logits.0].value.clone();
                    let g = self.ensure_grad(logits);
                    for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
                        let row = lval.row(r);
                        let lse = log_sum_exp(row);
                        for c in 0..row.len() {
                            let p = (row[c] - lse).exp();
                            let delta = if c == t as usize { T::ONE } else { T::ZERO };
                            g.row_mut(r)[c] += scale * w * (p - delta);
                        }
                    }
                }
            }
            Op::BagNllMean {
                logits,
                bags,
                weights,
            } => {
                let logits = *logits;
                let bags = bags.clone();
                let weights = weights.clone();
                if self.needs(logits) {
                    let scale = dy.item();
                    let lval = self.nodes[logits.0].value.clone();
                    let g = self.ensure_grad(logits);
                    for (r, (bag, &w)) in bags.iter().zip(&weights).enumerate() {
                        let row = lval.row(r);
                        let lse = log_sum_exp(row);
                        let bag_n = T::from_usize(bag.len());
                        for c in 0..row.len() {
                            let p = (row[c] - lse).exp();
                            let count =
                                T::from_usize(bag.iter().filter(|&&t| t as usize == c).count());
                            g.row_mut(r)[c] += scale * w * (bag_n * p - count);
                        }
                    }
                }
            }
            &Op::RceLoss { p_pos, p_neg, .. } => {
                let scale = dy.item();
                let eps = T::from_f64(1e-7);
                let hi = T::ONE - eps;
                let n = T::from_usize(self.nodes[p_pos.0].value.len());
                if self.needs(p_pos) {
                    let pval: Vec<T> = self.nodes[p_pos.0].value.data().to_vec();
                    let g = self.ensure_grad(p_pos);
                    for (gv, &p) in g.data_mut().iter_mut().zip(&pval) {
                        if p >= eps && p <= hi {
                            *gv += scale * (-(T::ONE / p)) / n;
                        }
                    }
                }
                if self.needs(p_neg) {
                    let qval: Vec<T> = self.nodes[p_neg.0].value.data().to_vec();
                    let g = self.ensure_grad(p_neg);
                    for (gv, &q) in g.data_mut().iter_mut().zip(&qval) {
                        if q >= eps && q <= hi {
                            *gv += scale * (T::ONE / (T::ONE - q)) / n;
                        }
                    }
                }
            }
        }
        // Restore the node's grad (callers may inspect interior grads).
        self.nodes[i].grad = Some(dy);
    }
}

fn gelu_fwd<T: Real>(x: T) -> T {
    // tanh approximation, as in GPT-style blocks
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

fn gelu_bwd<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * k * x * x)
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mut m = row[0];
    for &v in &row[1..] {
        m = m.max(v);
    }
    let mut s = T::ZERO;
    for &v in row {
        s += (v - m).exp();
    }
    m + s.ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mut m = row[0];
    for &v in &row[1..] {
        m = m.max(v);
    }
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::ONE / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn randn(shape: &[usize], rng: &mut RngStream) -> TensorValue<f64> {
        TensorValue::randn(shape, 0.5, rng)
    }

    /// Central-difference check used to pin every op's backward rule.
    fn check_op(
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        leaves: &[TensorValue<f64>],
        tol: f64,
    ) {
        let eval = |values: &[TensorValue<f64>]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.backward(out);
        let eps = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = g
                .grad(vars[li])
                .cloned()
                .unwrap_or_else(|| TensorValue::zeros(leaf.shape()));
            for ci in 0..leaf.len() {
                let mut plus = leaves.to_vec();
                plus[li].data_mut()[ci] += eps;
                let mut minus = leaves.to_vec();
                minus[li].data_mut()[ci] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[ci];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "leaf {li} coord {ci}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_all_transpose_combos_gradients() {
        let mut rng = RngStream::new(5);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta {
                randn(&[4, 3], &mut rng)
            } else {
                randn(&[3, 4], &mut rng)
            };
            let b = if tb {
                randn(&[2, 4], &mut rng)
            } else {
                randn(&[4, 2], &mut rng)
            };
            check_op(
                |g, vars| {
                    let y = g.matmul_t(vars[0], vars[1], ta, tb);
                    let t = vec![0u32, 1, 0];
                    let w = vec![1.0 / 3.0; 3];
                    g.nll_mean(y, t, w)
                },
                &[a, b],
                1e-6,
            );
        }
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        let mut rng = RngStream::new(6);
        let x = randn(&[3, 5], &mut rng);
        let gain = randn(&[5], &mut rng);
        let bias = randn(&[5], &mut rng);
        check_op(
            |g, vars| {
                let y = g.layer_norm(vars[0], vars[1], vars[2], 1e-5);
                let y = g.gelu(y);
                let t = vec![0u32, 2, 4];
                g.nll_mean(y, t, vec![0.4, 0.3, 0.3])
            },
            &[x, gain, bias],
            1e-5,
        );
    }

    #[test]
    fn attention_respects_mask_and_gradients() {
        let mut rng = RngStream::new(7);
        let s = 4;
        let dim = 6;
        // causal over the last two rows, bidirectional over the first two
        let mut allowed = vec![false; s * s];
        for i in 0..s {
            for j in 0..s {
                allowed[i * s + j] = if i < 2 { j < 2 } else { j <= i };
            }
        }
        let plan = AttentionPlan {
            heads: 2,
            segments: vec![SegmentAttention {
                start: 0,
                len: s,
                allowed,
            }],
        };
        let q = randn(&[s, dim], &mut rng);
        let k = randn(&[s, dim], &mut rng);
        let v = randn(&[s, dim], &mut rng);
        check_op(
            |g, vars| {
                let y = g.attention(vars[0], vars[1], vars[2], plan.clone());
                g.nll_mean(y, vec![0, 1, 2, 3], vec![0.25; 4])
            },
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn masked_attention_has_exactly_zero_grad_to_future_values() {
        let mut rng = RngStream::new(8);
        let s = 3;
        let dim = 4;
        let mut allowed = vec![false; s * s];
        for i in 0..s {
            for j in 0..=i {
                allowed[i * s + j] = true;
            }
        }
        let plan = AttentionPlan {
            heads: 1,
            segments: vec![SegmentAttention {
                start: 0,
                len: s,
                allowed,
            }],
        };
        let q = randn(&[s, dim], &mut rng);
        let k = randn(&[s, dim], &mut rng);
        let v = randn(&[s, dim], &mut rng);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
        let y = g.attention(qv, kv, vv, plan);
        // loss reads only row 0; rows 1,2 of V must get exactly zero grad
        let first = g.gather_rows(y, &[0]);
        let loss = g.nll_mean(first, vec![1], vec![1.0]);
        g.backward(loss);
        let gv = g.grad(vv).unwrap();
        assert!(gv.row(0).iter().any(|&x| x != 0.0));
        assert!(gv.row(1).iter().all(|&x| x == 0.0));
        assert!(gv.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fused_losses_and_softmax_gradients() {
        let mut rng = RngStream::new(9);
        let logits = randn(&[3, 5], &mut rng);
        check_op(
            |g, vars| {
                let bags = vec![vec![0u32, 1, 1], vec![4], vec![2, 3]];
                g.bag_nll_mean(vars[0], bags, vec![1.0 / 3.0; 3])
            },
            &[logits.clone()],
            1e-6,
        );
        check_op(
            |g, vars| {
                let s = g.log_softmax_rows(vars[0]);
                let picked = g.gather_rows(s, &[0, 1, 2]);
                g.nll_mean(picked, vec![1, 2, 3], vec![0.2, 0.5, 0.3])
            },
            &[logits],
            1e-6,
        );
        let p_logit = randn(&[1, 4], &mut rng);
        let q_logit = randn(&[1, 4], &mut rng);
        check_op(
            |g, vars| {
                let p = g.sigmoid(vars[0]);
                let q = g.sigmoid(vars[1]);
                let (loss, _) = g.rce_loss(p, q);
                loss
            },
            &[p_logit, q_logit],
            1e-6,
        );
    }

    #[test]
    fn gumbel_softmax_gradient_and_simplex() {
        let mut rng = RngStream::new(10);
        let logits = randn(&[2, 4], &mut rng);
        let noise = randn(&[2, 4], &mut rng);
        let noise2 = noise.clone();
        check_op(
            move |g, vars| {
                let y = g.gumbel_softmax(vars[0], noise.clone(), 0.7);
                g.nll_mean(y, vec![2, 0], vec![0.5, 0.5])
            },
            &[logits.clone()],
            1e-6,
        );
        let mut g = Graph::new();
        let l = g.param(logits);
        let y = g.gumbel_softmax(l, noise2, 0.7);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_scatters_gradients_to_tables() {
        let mut rng = RngStream::new(11);
        let tok = randn(&[5, 3], &mut rng);
        let pos = randn(&[4, 3], &mut rng);
        let role = randn(&[3, 3], &mut rng);
        let latent = randn(&[1, 3], &mut rng);
        let spec = AssembleSpec {
            tok_ids: vec![LATENT_SLOT, 2, 2, 4],
            pos_ids: vec![0, 1, 2, 3],
            role_ids: vec![2, 0, 0, 1],
            latent_dest: vec![0],
        };
        check_op(
            |g, vars| {
                let y = g.assemble(vars[0], vars[1], vars[2], Some(vars[3]), spec.clone());
                g.nll_mean(y, vec![0, 1, 2, 0], vec![0.25; 4])
            },
            &[tok, pos, role, latent],
            1e-5,
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(TensorValue::matrix(1, 2, vec![0.3, -0.2]));
        let c = g.constant(TensorValue::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(a, c);
        let loss = g.nll_mean(y, vec![0], vec![1.0]);
        g.backward(loss);
        assert!(g.grad(a).is_some());
        assert!(g.grad(c).is_none());
    }
}
