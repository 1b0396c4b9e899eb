//! The unified pre-normalization transformer with four heads.
//!
//! One parameter set serves every task; the attention mask decides which
//! parts of a sequence see each other. The LM head is weight-tied to the
//! token embedding table. Batches are packed: all sequences concatenate
//! into one row matrix and attention runs per segment, so the expensive
//! matmuls see the whole batch at once.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::config::{ModelConfig, NUM_ROLES};
use crate::model::input::AssembledInput;
use crate::numerics::{
    AssembleSpec, AttentionPlan, Graph, Real, RngStream, TensorValue, Var, LATENT_SLOT,
};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: TensorValue<T>,
    pub ln1_bias: TensorValue<T>,
    pub wq: TensorValue<T>,
    pub bq: TensorValue<T>,
    pub wk: TensorValue<T>,
    pub bk: TensorValue<T>,
    pub wv: TensorValue<T>,
    pub bv: TensorValue<T>,
    pub wo: TensorValue<T>,
    pub bo: TensorValue<T>,
    pub ln2_gain: TensorValue<T>,
    pub ln2_bias: TensorValue<T>,
    pub mlp_w1: TensorValue<T>,
    pub mlp_b1: TensorValue<T>,
    pub mlp_w2: TensorValue<T>,
    pub mlp_b2: TensorValue<T>,
}

/// Shared-parameter network: embeddings, pre-norm blocks, and the LM /
/// recognition / bag-of-words / coherence heads.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedTransformer<T> {
    pub config: ModelConfig,
    pub tok_emb: TensorValue<T>,
    pub pos_emb: TensorValue<T>,
    pub role_emb: TensorValue<T>,
    pub latent_emb: TensorValue<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f_gain: TensorValue<T>,
    pub ln_f_bias: TensorValue<T>,
    /// Recognition head, stored K x D as in `softmax(W1 h + b1)`.
    pub recog_w: TensorValue<T>,
    pub recog_b: TensorValue<T>,
    /// Bag-of-words head, stored |V| x D.
    pub bow_w: TensorValue<T>,
    pub bow_b: TensorValue<T>,
    /// Coherence head: D -> 1 affine map with logistic output.
    pub coh_w: TensorValue<T>,
    pub coh_b: TensorValue<T>,
}

/// Canonical parameter order; checkpoints, the optimizer and gradient
/// harvesting all follow it.
pub fn backbone_names(layers: usize) -> Vec<String> {
    let mut names = alloc::vec![
        String::from("tok_emb"),
        String::from("pos_emb"),
        String::from("role_emb"),
    ];
    for l in 0..layers {
        for part in [
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain",
            "ln2_bias", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
        ] {
            names.push(alloc::format!("block{l}.{part}"));
        }
    }
    names.push(String::from("ln_f_gain"));
    names.push(String::from("ln_f_bias"));
    names
}

pub fn head_names() -> Vec<String> {
    ["latent_emb", "recog_w", "recog_b", "bow_w", "bow_b", "coh_w", "coh_b"]
        .iter()
        .map(|s| String::from(*s))
        .collect()
}

impl<T: Real> UnifiedTransformer<T> {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let std = T::from_f64(INIT_STD);
        let randn = |shape: &[usize], rng: &mut RngStream| TensorValue::randn(shape, std, rng);
        let ones = |n: usize| TensorValue::vector(alloc::vec![T::ONE; n]);

        let tok_emb = randn(&[config.vocab_size, d], rng);
        let pos_emb = randn(&[config.max_seq_len(), d], rng);
        let role_emb = randn(&[NUM_ROLES, d], rng);
        let blocks = (0..config.layers)
            .map(|_| Block {
                ln1_gain: ones(d),
                ln1_bias: TensorValue::zeros(&[d]),
                wq: randn(&[d, d], rng),
                bq: TensorValue::zeros(&[d]),
                wk: randn(&[d, d], rng),
                bk: TensorValue::zeros(&[d]),
                wv: randn(&[d, d], rng),
                bv: TensorValue::zeros(&[d]),
                wo: randn(&[d, d], rng),
                bo: TensorValue::zeros(&[d]),
                ln2_gain: ones(d),
                ln2_bias: TensorValue::zeros(&[d]),
                mlp_w1: randn(&[d, 4 * d], rng),
                mlp_b1: TensorValue::zeros(&[4 * d]),
                mlp_w2: randn(&[4 * d, d], rng),
                mlp_b2: TensorValue::zeros(&[d]),
            })
            .collect();
        let mut model = Self {
            tok_emb,
            pos_emb,
            role_emb,
            latent_emb: TensorValue::zeros(&[1, 1]), // replaced below
            blocks,
            ln_f_gain: ones(d),
            ln_f_bias: TensorValue::zeros(&[d]),
            recog_w: TensorValue::zeros(&[1, 1]),
            recog_b: TensorValue::zeros(&[1]),
            bow_w: TensorValue::zeros(&[1, 1]),
            bow_b: TensorValue::zeros(&[1]),
            coh_w: TensorValue::zeros(&[1, 1]),
            coh_b: TensorValue::zeros(&[1]),
            config,
        };
        model.reinit_heads(rng);
        Ok(model)
    }

    /// Fresh normal(0, 0.02) init for the stage-2 heads and latent table;
    /// backbone untouched. Used at construction and by warm starts.
    pub fn reinit_heads(&mut self, rng: &mut RngStream) {
        let d = self.config.dim;
        let k = self.config.latent_k;
        let v = self.config.vocab_size;
        let std = T::from_f64(INIT_STD);
        self.latent_emb = TensorValue::randn(&[k, d], std, rng);
        self.recog_w = TensorValue::randn(&[k, d], std, rng);
        self.recog_b = TensorValue::zeros(&[k]);
        self.bow_w = TensorValue::randn(&[v, d], std, rng);
        self.bow_b = TensorValue::zeros(&[v]);
        self.coh_w = TensorValue::randn(&[d, 1], std, rng);
        self.coh_b = TensorValue::zeros(&[1]);
    }

    /// Tensors in canonical order: backbone first, then the stage-2 heads.
    pub fn named_tensors(&self) -> Vec<(String, &TensorValue<T>)> {
        let mut out: Vec<(String, &TensorValue<T>)> = Vec::new();
        out.push((String::from("tok_emb"), &self.tok_emb));
        out.push((String::from("pos_emb"), &self.pos_emb));
        out.push((String::from("role_emb"), &self.role_emb));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = |part: &str| alloc::format!("block{l}.{part}");
            out.push((p("ln1_gain"), &b.ln1_gain));
            out.push((p("ln1_bias"), &b.ln1_bias));
            out.push((p("wq"), &b.wq));
            out.push((p("bq"), &b.bq));
            out.push((p("wk"), &b.wk));
            out.push((p("bk"), &b.bk));
            out.push((p("wv"), &b.wv));
            out.push((p("bv"), &b.bv));
            out.push((p("wo"), &b.wo));
            out.push((p("bo"), &b.bo));
            out.push((p("ln2_gain"), &b.ln2_gain));
            out.push((p("ln2_bias"), &b.ln2_bias));
            out.push((p("mlp_w1"), &b.mlp_w1));
            out.push((p("mlp_b1"), &b.mlp_b1));
            out.push((p("mlp_w2"), &b.mlp_w2));
            out.push((p("mlp_b2"), &b.mlp_b2));
        }
        out.push((String::from("ln_f_gain"), &self.ln_f_gain));
        out.push((String::from("ln_f_bias"), &self.ln_f_bias));
        out.push((String::from("latent_emb"), &self.latent_emb));
        out.push((String::from("recog_w"), &self.recog_w));
        out.push((String::from("recog_b"), &self.recog_b));
        out.push((String::from("bow_w"), &self.bow_w));
        out.push((String::from("bow_b"), &self.bow_b));
        out.push((String::from("coh_w"), &self.coh_w));
        out.push((String::from("coh_b"), &self.coh_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut TensorValue<T>)> {
        let mut out: Vec<(String, &mut TensorValue<T>)> = Vec::new();
        out.push((String::from("tok_emb"), &mut self.tok_emb));
        out.push((String::from("pos_emb"), &mut self.pos_emb));
        out.push((String::from("role_emb"), &mut self.role_emb));
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let p = |part: &str| alloc::format!("block{l}.{part}");
            out.push((p("ln1_gain"), &mut b.ln1_gain));
            out.push((p("ln1_bias"), &mut b.ln1_bias));
            out.push((p("wq"), &mut b.wq));
            out.push((p("bq"), &mut b.bq));
            out.push((p("wk"), &mut b.wk));
            out.push((p("bk"), &mut b.bk));
            out.push((p("wv"), &mut b.wv));
            out.push((p("bv"), &mut b.bv));
            out.push((p("wo"), &mut b.wo));
            out.push((p("bo"), &mut b.bo));
            out.push((p("ln2_gain"), &mut b.ln2_gain));
            out.push((p("ln2_bias"), &mut b.ln2_bias));
            out.push((p("mlp_w1"), &mut b.mlp_w1));
            out.push((p("mlp_b1"), &mut b.mlp_b1));
            out.push((p("mlp_w2"), &mut b.mlp_w2));
            out.push((p("mlp_b2"), &mut b.mlp_b2));
        }
        out.push((String::from("ln_f_gain"), &mut self.ln_f_gain));
        out.push((String::from("ln_f_bias"), &mut self.ln_f_bias));
        out.push((String::from("latent_emb"), &mut self.latent_emb));
        out.push((String::from("recog_w"), &mut self.recog_w));
        out.push((String::from("recog_b"), &mut self.recog_b));
        out.push((String::from("bow_w"), &mut self.bow_w));
        out.push((String::from("bow_b"), &mut self.bow_b));
        out.push((String::from("coh_w"), &mut self.coh_w));
        out.push((String::from("coh_b"), &mut self.coh_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn to_f64(&self) -> UnifiedTransformer<f64> {
        UnifiedTransformer {
            config: self.config.clone(),
            tok_emb: self.tok_emb.map(|v| v.to_f64()),
            pos_emb: self.pos_emb.map(|v| v.to_f64()),
            role_emb: self.role_emb.map(|v| v.to_f64()),
            latent_emb: self.latent_emb.map(|v| v.to_f64()),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_gain: b.ln1_gain.map(|v| v.to_f64()),
                    ln1_bias: b.ln1_bias.map(|v| v.to_f64()),
                    wq: b.wq.map(|v| v.to_f64()),
                    bq: b.bq.map(|v| v.to_f64()),
                    wk: b.wk.map(|v| v.to_f64()),
                    bk: b.bk.map(|v| v.to_f64()),
                    wv: b.wv.map(|v| v.to_f64()),
                    bv: b.bv.map(|v| v.to_f64()),
                    wo: b.wo.map(|v| v.to_f64()),
                    bo: b.bo.map(|v| v.to_f64()),
                    ln2_gain: b.ln2_gain.map(|v| v.to_f64()),
                    ln2_bias: b.ln2_bias.map(|v| v.to_f64()),
                    mlp_w1: b.mlp_w1.map(|v| v.to_f64()),
                    mlp_b1: b.mlp_b1.map(|v| v.to_f64()),
                    mlp_w2: b.mlp_w2.map(|v| v.to_f64()),
                    mlp_b2: b.mlp_b2.map(|v| v.to_f64()),
                })
                .collect(),
            ln_f_gain: self.ln_f_gain.map(|v| v.to_f64()),
            ln_f_bias: self.ln_f_bias.map(|v| v.to_f64()),
            recog_w: self.recog_w.map(|v| v.to_f64()),
            recog_b: self.recog_b.map(|v| v.to_f64()),
            bow_w: self.bow_w.map(|v| v.to_f64()),
            bow_b: self.bow_b.map(|v| v.to_f64()),
            coh_w: self.coh_w.map(|v| v.to_f64()),
            coh_b: self.coh_b.map(|v| v.to_f64()),
        }
    }

    /// Registers every tensor on a graph, trainable or frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let mut reg = |t: &TensorValue<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundModel {
            config: self.config.clone(),
            tok: reg(&self.tok_emb),
            pos: reg(&self.pos_emb),
            role: reg(&self.role_emb),
            latent: reg(&self.latent_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    ln1_gain: reg(&b.ln1_gain),
                    ln1_bias: reg(&b.ln1_bias),
                    wq: reg(&b.wq),
                    bq: reg(&b.bq),
                    wk: reg(&b.wk),
                    bk: reg(&b.bk),
                    wv: reg(&b.wv),
                    bv: reg(&b.bv),
                    wo: reg(&b.wo),
                    bo: reg(&b.bo),
                    ln2_gain: reg(&b.ln2_gain),
                    ln2_bias: reg(&b.ln2_bias),
                    mlp_w1: reg(&b.mlp_w1),
                    mlp_b1: reg(&b.mlp_b1),
                    mlp_w2: reg(&b.mlp_w2),
                    mlp_b2: reg(&b.mlp_b2),
                })
                .collect(),
            ln_f_gain: reg(&self.ln_f_gain),
            ln_f_bias: reg(&self.ln_f_bias),
            recog_w: reg(&self.recog_w),
            recog_b: reg(&self.recog_b),
            bow_w: reg(&self.bow_w),
            bow_b: reg(&self.bow_b),
            coh_w: reg(&self.coh_w),
            coh_b: reg(&self.coh_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

/// Graph-registered parameters plus the forward machinery.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub tok: Var,
    pub pos: Var,
    pub role: Var,
    pub latent: Var,
    pub blocks: Vec<BoundBlock>,
    pub ln_f_gain: Var,
    pub ln_f_bias: Var,
    pub recog_w: Var,
    pub recog_b: Var,
    pub bow_w: Var,
    pub bow_b: Var,
    pub coh_w: Var,
    pub coh_b: Var,
}

/// Output of a packed forward pass.
pub struct PackedForward {
    /// Final hidden states, all sequences stacked: [sum lengths, D].
    pub hidden: Var,
    /// Row offset of each input sequence.
    pub offsets: Vec<usize>,
}

impl PackedForward {
    pub fn slot_rows(&self, inputs: &[AssembledInput]) -> Vec<usize> {
        inputs
            .iter()
            .zip(&self.offsets)
            .filter_map(|(inp, &off)| inp.slot_row.map(|r| off + r))
            .collect()
    }

    pub fn logit_rows(&self, inputs: &[AssembledInput]) -> Vec<usize> {
        let mut rows = Vec::new();
        for (inp, &off) in inputs.iter().zip(&self.offsets) {
            rows.extend(inp.logit_rows.iter().map(|r| off + r));
        }
        rows
    }
}

impl BoundModel {
    pub fn gradients<T: Real>(&self, g: &Graph<T>) -> Vec<TensorValue<T>> {
        self.param_vars()
            .into_iter()
            .map(|v| {
                g.grad(v)
                    .cloned()
                    .unwrap_or_else(|| TensorValue::zeros(g.value(v).shape()))
            })
            .collect()
    }

    /// Vars in the same canonical order as `named_tensors`.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut vars = alloc::vec![self.tok, self.pos, self.role];
        for b in &self.blocks {
            vars.extend_from_slice(&[
                b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                b.ln2_gain, b.ln2_bias, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2,
            ]);
        }
        vars.extend_from_slice(&[
            self.ln_f_gain,
            self.ln_f_bias,
            self.latent_emb_var(),
            self.recog_w,
            self.recog_b,
            self.bow_w,
            self.bow_b,
            self.coh_w,
            self.coh_b,
        ]);
        vars
    }

    fn latent_emb_var(&self) -> Var {
        self.latent
    }

    /// Runs the backbone over a packed batch. `latent_rows`, when present,
    /// is a [n_slots, D] matrix supplying the latent-slot embeddings in
    /// input order (only latent-gen inputs consume rows).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        inputs: &[AssembledInput],
        latent_rows: Option<Var>,
    ) -> Result<PackedForward> {
        if inputs.is_empty() {
            return Err(CoreError::contract("empty batch"));
        }
        let needs_latent = inputs.iter().any(|i| i.needs_latent());
        if needs_latent != latent_rows.is_some() {
            return Err(CoreError::contract(
                "latent rows must be supplied exactly when a latent-gen input is present",
            ));
        }

        let mut offsets = Vec::with_capacity(inputs.len());
        let mut tok_ids = Vec::new();
        let mut pos_ids = Vec::new();
        let mut role_ids = Vec::new();
        let mut latent_dest = Vec::new();
        let mut segments = Vec::new();
        for inp in inputs {
            let off = tok_ids.len();
            offsets.push(off);
            if inp.len() > self.config.max_seq_len() {
                return Err(CoreError::contract("sequence exceeds configured maximum"));
            }
            tok_ids.extend_from_slice(&inp.tok_ids);
            pos_ids.extend_from_slice(&inp.pos_ids);
            role_ids.extend_from_slice(&inp.role_ids);
            if inp.needs_latent() {
                let slot = inp.slot_row.expect("latent task always has a slot");
                latent_dest.push(off + slot);
            }
            segments.push(inp.mask.to_segment(off));
        }

        let spec = AssembleSpec {
            tok_ids,
            pos_ids,
            role_ids,
            latent_dest,
        };
        let mut x = g.assemble(self.tok, self.pos, self.role, latent_rows, spec);
        let plan = AttentionPlan {
            heads: self.config.heads,
            segments,
        };
        let eps = T::from_f64(LN_EPS);
        for b in &self.blocks {
            let xn = g.layer_norm(x, b.ln1_gain, b.ln1_bias, eps);
            let q = g.matmul(xn, b.wq);
            let q = g.add_bias(q, b.bq);
            let k = g.matmul(xn, b.wk);
            let k = g.add_bias(k, b.bk);
            let v = g.matmul(xn, b.wv);
            let v = g.add_bias(v, b.bv);
            let att = g.attention(q, k, v, plan.clone());
            let att = g.matmul(att, b.wo);
            let att = g.add_bias(att, b.bo);
            x = g.add(x, att);
            let xn = g.layer_norm(x, b.ln2_gain, b.ln2_bias, eps);
            let h = g.matmul(xn, b.mlp_w1);
            let h = g.add_bias(h, b.mlp_b1);
            let h = g.gelu(h);
            let y = g.matmul(h, b.mlp_w2);
            let y = g.add_bias(y, b.mlp_b2);
            x = g.add(x, y);
        }
        let hidden = g.layer_norm(x, self.ln_f_gain, self.ln_f_bias, eps);
        Ok(PackedForward { hidden, offsets })
    }

    /// Convex combination of latent embeddings: [B, K] weights times the
    /// latent table. One-hot weights reduce to single table rows exactly.
    pub fn latent_rows<T: Real>(&self, g: &mut Graph<T>, weights: Var) -> Var {
        g.matmul(weights, self.latent)
    }

    /// Next-token logits for the given hidden rows (weight-tied LM head).
    pub fn lm_logits<T: Real>(&self, g: &mut Graph<T>, hidden: Var, rows: &[usize]) -> Var {
        let picked = g.gather_rows(hidden, rows);
        g.matmul_t(picked, self.tok, false, true)
    }

    /// Recognition logits (pre-softmax) over the latent values for the
    /// given slot rows.
    pub fn recognition_logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        hidden: Var,
        slot_rows: &[usize],
    ) -> Var {
        let h = g.gather_rows(hidden, slot_rows);
        let logits = g.matmul_t(h, self.recog_w, false, true);
        g.add_bias(logits, self.recog_b)
    }

    /// Bag-of-words logits over the vocabulary from latent-slot states.
    pub fn bow_logits<T: Real>(&self, g: &mut Graph<T>, hidden: Var, slot_rows: &[usize]) -> Var {
        let h = g.gather_rows(hidden, slot_rows);
        let logits = g.matmul_t(h, self.bow_w, false, true);
        g.add_bias(logits, self.bow_b)
    }

    /// Coherence probabilities in (0,1), one per slot row.
    pub fn coherence_probs<T: Real>(
        &self,
        g: &mut Graph<T>,
        hidden: Var,
        slot_rows: &[usize],
    ) -> Var {
        let h = g.gather_rows(hidden, slot_rows);
        let logit = g.matmul(h, self.coh_w);
        let logit = g.add_bias(logit, self.coh_b);
        g.sigmoid(logit)
    }
}

/// Token ids of the latent-slot sentinel never index the embedding table.
pub fn check_input_ids(input: &AssembledInput, config: &ModelConfig) -> Result<()> {
    for &t in &input.tok_ids {
        if t != LATENT_SLOT && t as usize >= config.vocab_size {
            return Err(CoreError::contract("token id out of vocab range"));
        }
    }
    Ok(())
}
