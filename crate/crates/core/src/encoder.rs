//! A small pre-norm transformer encoder plus the layers the retriever and
//! reader stack on top of it.
//!
//! Layers hold [`ParamId`]s only; values live in a [`ParamStore`] and are
//! pulled onto a [`Tape`] on use.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::AttentionMask;
use crate::numerics::{ParamId, ParamStore, Tape, Var};
use crate::textproc::{TokenSequence, MAX_LEN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { vocab_size: 0, d_model: 64, n_heads: 4, n_layers: 2, d_ff: 256, max_len: MAX_LEN, dropout: 0.1 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::Validation(format!("encoder config: {r}")));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size < crate::textproc::SPECIALS.len() {
            return bad("vocab_size smaller than the special tokens");
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return bad("d_ff and max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

/// Weight std 1/sqrt(d_in) keeps activations at unit scale.
fn linear_weight(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> ParamId {
    store.add_normal_std(format!("{name}.w"), &[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: linear_weight(store, name, d_in, d_out, rng),
            b: Some(store.add_const(format!("{name}.b"), &[d_out], 0.0)),
        }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self { w: linear_weight(store, name, d_in, d_out, rng), b: None }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.w)?;
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(b)?;
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_const(format!("{name}.beta"), &[d], 0.0),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let (g, b) = (t.param(self.gamma)?, t.param(self.beta)?);
        t.layer_norm(x, g, b)
    }
}

/// Linear, GELU, linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_in, d_hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), d_hidden, d_out, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(t, x)?;
        let h = t.gelu(h)?;
        self.out.forward(t, h)
    }
}

pub type FeedForward = Mlp;

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut impl Rng) -> Self {
        let query = Linear::new(store, &format!("{name}.query"), d, d, rng);
        // a key bias only shifts each softmax row, so it is left out
        let key = Linear::without_bias(store, &format!("{name}.key"), d, d, rng);
        Self {
            query,
            key,
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            out: Linear::new(store, &format!("{name}.out"), d, d, rng),
            n_heads,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        self.forward_with_weights(t, x, mask).map(|(y, _)| y)
    }

    /// Also returns the attention weights of each head.
    pub fn forward_with_weights(&self, t: &mut Tape, x: Var, mask: Option<&AttentionMask>) -> Result<(Var, Vec<Var>)> {
        let (n, d) = t.value(x).dims2();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![n, n],
                    rhs: vec![m.len(), m.len()],
                });
            }
        }
        let q = self.query.forward(t, x)?;
        let k = self.key.forward(t, x)?;
        let v = self.value.forward(t, x)?;
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let qh = t.slice_cols(q, a, b)?;
            let kh = t.slice_cols(k, a, b)?;
            let vh = t.slice_cols(v, a, b)?;
            let s = t.matmul_nt(qh, kh)?;
            let s = t.scale(s, scale)?;
            let p = t.masked_softmax(s, mask.map(AttentionMask::as_tensor))?;
            heads.push(t.matmul(p, vh)?);
            weights.push(p);
        }
        let cat = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads)? };
        Ok((self.out.forward(t, cat)?, weights))
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `h + ffn(ln(h))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        n_heads: usize,
        d_ff: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, n_heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), d, d_ff, d, rng),
            dropout,
        }
    }

    pub fn forward(&self, t: &mut Tape, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let h = self.ln_attn.forward(t, x)?;
        let h = self.attn.forward(t, h, mask)?;
        let h = t.dropout(h, self.dropout)?;
        let x = t.add(x, h)?;
        let h = self.ln_ffn.forward(t, x)?;
        let h = self.ffn.forward(t, h)?;
        let h = t.dropout(h, self.dropout)?;
        t.add(x, h)
    }
}

/// Blocks sharing one mask, closed by a layer norm.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub blocks: Vec<TransformerBlock>,
    pub ln: LayerNorm,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &EncoderConfig, layers: usize, rng: &mut impl Rng) -> Self {
        let blocks = (0..layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("{name}.{i}"),
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.d_ff,
                    cfg.dropout,
                    rng,
                )
            })
            .collect();
        Self { blocks, ln: LayerNorm::new(store, &format!("{name}.ln"), cfg.d_model) }
    }

    pub fn forward(&self, t: &mut Tape, mut x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(t, x, mask)?;
        }
        self.ln.forward(t, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// `[seq_len, d_model]`
    pub hidden: Var,
    /// `[d_model]`, the representation of the first token
    pub pooled: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub overlap_emb: ParamId,
    pub stack: TransformerStack,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            // unit-scale embeddings, comparable to the residual branches
            tok_emb: store.add_normal_std(format!("{name}.tok_emb"), &[config.vocab_size, config.d_model], 1.0, rng),
            pos_emb: store.add_normal_std(format!("{name}.pos_emb"), &[config.max_len, config.d_model], 0.5, rng),
            overlap_emb: store.add_normal_std(format!("{name}.overlap_emb"), &[2, config.d_model], 1.0, rng),
            stack: TransformerStack::new(store, &format!("{name}.layers"), config, config.n_layers, rng),
        })
    }

    /// Token, position and overlap embeddings, `[seq.len(), d_model]`. The
    /// overlap row says whether the word also occurs in another segment.
    pub fn embed(&self, t: &mut Tape, seq: &TokenSequence) -> Result<Var> {
        let ids = &seq.ids;
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(Error::InvalidShape {
                shape: vec![ids.len()],
                reason: format!("sequence length must be in 1..={}", self.config.max_len),
            });
        }
        let table = t.param(self.tok_emb)?;
        let tok = t.gather_rows(table, ids)?;
        let pos_table = t.param(self.pos_emb)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = t.gather_rows(pos_table, &positions)?;
        let x = t.add(tok, pos)?;
        let flags: Vec<usize> = seq.overlap_flags().into_iter().map(usize::from).collect();
        let ov_table = t.param(self.overlap_emb)?;
        let ov = t.gather_rows(ov_table, &flags)?;
        let x = t.add(x, ov)?;
        t.dropout(x, self.config.dropout)
    }

    pub fn encode(&self, t: &mut Tape, seq: &TokenSequence, mask: &AttentionMask) -> Result<EncoderOutput> {
        let x = self.embed(t, seq)?;
        self.encode_embedded(t, x, mask)
    }

    /// Runs the blocks on precomputed embeddings.
    pub fn encode_embedded(&self, t: &mut Tape, x: Var, mask: &AttentionMask) -> Result<EncoderOutput> {
        let n = t.value(x).rows();
        if mask.len() != n {
            return Err(Error::ShapeMismatch { op: "encode", lhs: vec![n, n], rhs: vec![mask.len(), mask.len()] });
        }
        // a full mask adds nothing; skip the additions
        let m = if mask.is_full() { None } else { Some(mask) };
        let hidden = self.stack.forward(t, x, m)?;
        let first = t.gather_rows(hidden, &[0])?;
        let pooled = t.reshape(first, &[self.config.d_model])?;
        Ok(EncoderOutput { hidden, pooled })
    }
}

/// Two-way attention between a context and a query sequence.
///
/// Similarity `S = C diag(w_cq) Q^T + C w_c 1^T + 1 (Q w_q)^T`. Each context
/// row attends over the query rows; the query side summarizes the context
/// through a softmax over the row maxima of `S`. The four-way feature
/// `[C; c~; C*c~; C*q~]` is projected back to `d`.
#[derive(Debug, Clone)]
pub struct BiAttention {
    pub w_c: ParamId,
    pub w_q: ParamId,
    pub w_cq: ParamId,
    pub proj: Linear,
}

impl BiAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_c: store.add_normal(format!("{name}.w_c"), &[d, 1], rng),
            w_q: store.add_normal(format!("{name}.w_q"), &[d, 1], rng),
            // starts as a sharpened dot-product similarity
            w_cq: store.add_const(format!("{name}.w_cq"), &[d], 4.0 / (d as f64).sqrt()),
            proj: Linear::new(store, &format!("{name}.proj"), 4 * d, d, rng),
        }
    }

    pub fn similarity(&self, t: &mut Tape, c: Var, q: Var) -> Result<Var> {
        for v in [c, q] {
            if t.value(v).numel() == 0 {
                return Err(Error::InvalidInput("bi-attention on an empty sequence".into()));
            }
        }
        let n = t.value(q).rows();
        let (w_c, w_q, w_cq) = (t.param(self.w_c)?, t.param(self.w_q)?, t.param(self.w_cq)?);
        let cw = t.mul_row(c, w_cq)?;
        let s = t.matmul_nt(cw, q)?;
        let sc = t.matmul(c, w_c)?;
        let s = t.add_col(s, sc)?;
        let sq = t.matmul(q, w_q)?;
        let sq = t.reshape(sq, &[n])?;
        t.add_row(s, sq)
    }

    pub fn forward(&self, t: &mut Tape, c: Var, q: Var) -> Result<Var> {
        let s = self.similarity(t, c, q)?;
        let m = t.value(c).rows();
        let d = t.value(c).cols();
        let a = t.softmax(s)?;
        let c2q = t.matmul(a, q)?;
        let peaks = t.row_max(s)?;
        let peaks = t.reshape(peaks, &[1, m])?;
        let b = t.softmax(peaks)?;
        let q2c = t.matmul(b, c)?;
        let q2c = t.reshape(q2c, &[d])?;
        let cc = t.mul(c, c2q)?;
        let cq = t.mul_row(c, q2c)?;
        let g = t.concat_cols(&[c, c2q, cc, cq])?;
        self.proj.forward(t, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::build_full_mask;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EncoderConfig {
        EncoderConfig { vocab_size: 20, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, max_len: 16, dropout: 0.0 }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg(), &mut rng).unwrap();
        let mut t = Tape::with_params(&store);
        let out = enc.encode(&mut t, &TokenSequence::from_ids(vec![2, 7, 9, 3]), &build_full_mask(4).unwrap()).unwrap();
        assert_eq!(t.shape(out.hidden), &[4, 8]);
        assert_eq!(t.shape(out.pooled), &[8]);
        assert!(t.value(out.hidden).is_finite());
        assert!(enc.encode(&mut t, &TokenSequence::from_ids(vec![2, 7]), &build_full_mask(4).unwrap()).is_err());
    }

    #[test]
    fn identical_tokens_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 8, 2, &mut rng);
        let row = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let x = Tensor::from_rows(&[row.row(0).to_vec(), row.row(0).to_vec(), row.row(0).to_vec()]).unwrap();
        let mut t = Tape::with_params(&store);
        let xv = t.constant(x);
        let (y, w) = attn.forward_with_weights(&mut t, xv, None).unwrap();
        let y = t.value(y);
        for i in 1..3 {
            assert!(y.row(i).iter().zip(y.row(0)).all(|(a, b)| a == b));
        }
        for p in w {
            for i in 0..3 {
                let s: f64 = t.value(p).row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bi_attention_single_query_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bi = BiAttention::new(&mut store, "bi", 4, &mut rng);
        let mut t = Tape::with_params(&store);
        let c = t.constant(Tensor::randn(&[5, 4], 1.0, &mut rng));
        let q = t.constant(Tensor::randn(&[1, 4], 1.0, &mut rng));
        let s = bi.similarity(&mut t, c, q).unwrap();
        let a = t.softmax(s).unwrap();
        assert!(t.value(a).data().iter().all(|&v| v == 1.0));
        let out = bi.forward(&mut t, c, q).unwrap();
        assert_eq!(t.shape(out), &[5, 4]);
    }
}
