//! Three-stage evidence paragraph retrieval.
//!
//! 1. Each (question, paragraph) pair is encoded on its own; the pooled
//!    vectors interact through one attention layer and a linear head scores
//!    them.
//! 2. The best paragraph of stage 1 becomes a second query: every paragraph
//!    is bi-attended against it, pooled, mixed by two attention layers and
//!    rescored.
//! 3. The top three paragraphs are encoded together, each behind a `<p>`
//!    marker, and an MLP on the markers gives the final ranking.
//!
//! Every stage is trained against the softmax of heuristic paragraph scores
//! (answer 2, relevant 1, other 0) with a KL objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Paragraph, ParagraphLabel};
use crate::encoder::{BiAttention, Encoder, EncoderConfig, Linear, Mlp, TransformerStack};
use crate::error::{Error, Result};
use crate::masks::build_full_mask;
use crate::numerics::{softmax, ParamId, ParamStore, Tape, Tensor, Var};
use crate::textproc::{assemble_cascade_input, assemble_retriever_input, Vocab};

pub const MAX_PARAGRAPHS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RetrieverVariant {
    /// All three stages, KL to the score target.
    #[default]
    Full,
    /// Skips the refinement stage; the cascade reranks the initial top-k.
    NoRefine,
    /// As `NoRefine`, with per-paragraph binary cross-entropy on relevance
    /// instead of the score target.
    NoRefineNoReformulation,
}

impl RetrieverVariant {
    pub fn refines(self) -> bool {
        self == Self::Full
    }

    pub fn uses_score_target(self) -> bool {
        self != Self::NoRefineNoReformulation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverConfig {
    pub top_k_cascade: usize,
    pub score_answer: f64,
    pub score_relevant: f64,
    pub score_irrelevant: f64,
    pub variant: RetrieverVariant,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            top_k_cascade: 3,
            score_answer: 2.0,
            score_relevant: 1.0,
            score_irrelevant: 0.0,
            variant: RetrieverVariant::Full,
        }
    }
}

impl RetrieverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k_cascade < 2 {
            return Err(Error::Validation("top_k_cascade must be at least 2".into()));
        }
        Ok(())
    }
}

/// Heuristic score per paragraph: answer-bearing, relevant, or neither.
pub fn assign_target_scores(labels: &[ParagraphLabel], cfg: &RetrieverConfig) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("no paragraph labels".into()));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| match (l.has_answer, l.is_relevant) {
            (true, true) => Ok(cfg.score_answer),
            (false, true) => Ok(cfg.score_relevant),
            (false, false) => Ok(cfg.score_irrelevant),
            (true, false) => Err(Error::InvalidInput(format!("paragraph {i} has the answer but is not relevant"))),
        })
        .collect()
}

/// Softmax of the scores.
pub fn target_distribution(scores: &[f64]) -> Result<Tensor> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("target distribution of no scores".into()));
    }
    Tensor::vector(softmax(scores))
}

/// `KL(softmax(logits) || softmax(scores))`.
pub fn retriever_loss(t: &mut Tape, logits: Var, scores: &[f64]) -> Result<Var> {
    if t.value(logits).numel() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "retriever_loss",
            lhs: t.shape(logits).to_vec(),
            rhs: vec![scores.len()],
        });
    }
    let target = target_distribution(scores)?;
    let p = t.softmax(logits)?;
    t.kl_divergence(p, &target)
}

/// Indices of the `k` largest values, largest first, lower index on ties.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-question scores of every stage that ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalState {
    pub initial_logits: Vec<f64>,
    pub refined_logits: Option<Vec<f64>>,
    /// Logits over `cascade_indices`.
    pub cascaded_logits: Option<Vec<f64>>,
    pub cascade_indices: Vec<usize>,
    pub first_hop_index: Option<usize>,
    pub selected: Option<(usize, usize)>,
}

/// The two best paragraphs of the last stage that ran, best first. Ties go to
/// the lower original index.
pub fn select_evidence_paragraphs(state: &RetrievalState) -> Result<(usize, usize)> {
    let (indices, logits): (Vec<usize>, &[f64]) = match &state.cascaded_logits {
        Some(c) => (state.cascade_indices.clone(), c),
        None => {
            let l = state.refined_logits.as_deref().unwrap_or(&state.initial_logits);
            ((0..l.len()).collect(), l)
        }
    };
    if logits.len() < 2 || indices.len() != logits.len() {
        return Err(Error::InvalidInput("need at least two scored paragraphs".into()));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(indices[a].cmp(&indices[b])));
    Ok((indices[order[0]], indices[order[1]]))
}

/// Token-level encodings of every (question, paragraph) pair.
#[derive(Debug, Clone)]
pub struct EncodedParagraphs {
    pub hidden: Vec<Var>,
    /// `[n_para, d_model]`
    pub pooled: Var,
}

/// Tape handles of one forward pass through all stages.
#[derive(Debug, Clone)]
pub struct RetrievalPass {
    pub initial: Var,
    pub refined: Option<Var>,
    pub cascaded: Option<Var>,
    pub first_hop: Option<usize>,
    pub cascade_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Retriever {
    pub config: RetrieverConfig,
    pub encoder: Encoder,
    pub initial_layer: TransformerStack,
    pub initial_head: Linear,
    pub bi_attention: BiAttention,
    pub refine_in: Linear,
    pub refine_layers: TransformerStack,
    pub refine_head: Linear,
    pub cascade_head: Mlp,
    /// Shared logit offset, used only by the binary objective.
    pub bce_bias: ParamId,
}

impl Retriever {
    pub fn new(
        store: &mut ParamStore,
        enc: &EncoderConfig,
        config: &RetrieverConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = enc.d_model;
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(store, "retriever.encoder", enc, rng)?,
            initial_layer: TransformerStack::new(store, "retriever.initial", enc, 1, rng),
            // softmax over paragraphs ignores a shared offset, so score heads carry no bias
            initial_head: Linear::without_bias(store, "retriever.initial_head", d, 1, rng),
            bi_attention: BiAttention::new(store, "retriever.bi", d, rng),
            refine_in: Linear::new(store, "retriever.refine_in", 2 * d, d, rng),
            refine_layers: TransformerStack::new(store, "retriever.refine", enc, 2, rng),
            refine_head: Linear::without_bias(store, "retriever.refine_head", d, 1, rng),
            cascade_head: Mlp {
                hidden: Linear::new(store, "retriever.cascade.hidden", d, d, rng),
                out: Linear::without_bias(store, "retriever.cascade.out", d, 1, rng),
            },
            bce_bias: store.add_const("retriever.bce_bias", &[1, 1], 0.0),
        })
    }

    fn check_count(n: usize) -> Result<()> {
        if !(2..=MAX_PARAGRAPHS).contains(&n) {
            return Err(Error::InvalidInput(format!("{n} candidate paragraphs, expected 2..={MAX_PARAGRAPHS}")));
        }
        Ok(())
    }

    pub fn encode_paragraphs(
        &self,
        t: &mut Tape,
        question: &str,
        paragraphs: &[Paragraph],
        vocab: &Vocab,
    ) -> Result<EncodedParagraphs> {
        Self::check_count(paragraphs.len())?;
        let mut hidden = Vec::with_capacity(paragraphs.len());
        let mut pooled = Vec::with_capacity(paragraphs.len());
        for p in paragraphs {
            let seq = assemble_retriever_input(question, &p.text(), vocab, self.encoder.config.max_len)?;
            let out = self.encoder.encode(t, &seq, &build_full_mask(seq.len())?)?;
            hidden.push(out.hidden);
            pooled.push(out.pooled);
        }
        let pooled = t.concat_rows(&pooled)?;
        Ok(EncodedParagraphs { hidden, pooled })
    }

    fn head(t: &mut Tape, head: &Linear, x: Var) -> Result<Var> {
        let n = t.value(x).rows();
        let y = head.forward(t, x)?;
        t.reshape(y, &[n])
    }

    /// Stage 1 logits, `[n_para]`.
    pub fn score_paragraphs_initial(&self, t: &mut Tape, enc: &EncodedParagraphs) -> Result<Var> {
        let h = self.initial_layer.forward(t, enc.pooled, None)?;
        Self::head(t, &self.initial_head, h)
    }

    /// Stage 2 logits, `[n_para]`, conditioned on paragraph `first_hop`.
    pub fn refine_scores(&self, t: &mut Tape, enc: &EncodedParagraphs, first_hop: usize) -> Result<Var> {
        let query =
            *enc.hidden.get(first_hop).ok_or(Error::IndexOutOfRange { index: first_hop, len: enc.hidden.len() })?;
        let d = self.encoder.config.d_model;
        let mut rows = Vec::with_capacity(enc.hidden.len());
        for &h in &enc.hidden {
            let g = self.bi_attention.forward(t, h, query)?;
            let g = t.col_max(g)?;
            rows.push(t.reshape(g, &[1, d])?);
        }
        let attended = t.concat_rows(&rows)?;
        let x = t.concat_cols(&[enc.pooled, attended])?;
        let x = self.refine_in.forward(t, x)?;
        let h = self.refine_layers.forward(t, x, None)?;
        Self::head(t, &self.refine_head, h)
    }

    /// Stage 3 logits over `order` (paragraph indices, best first).
    pub fn cascaded_rerank(
        &self,
        t: &mut Tape,
        question: &str,
        paragraphs: &[Paragraph],
        order: &[usize],
        vocab: &Vocab,
    ) -> Result<Var> {
        let chosen: Vec<&[String]> = order
            .iter()
            .map(|&i| {
                paragraphs
                    .get(i)
                    .map(|p| p.sentences.as_slice())
                    .ok_or(Error::IndexOutOfRange { index: i, len: paragraphs.len() })
            })
            .collect::<Result<_>>()?;
        let input = assemble_cascade_input(question, &chosen, vocab, self.encoder.config.max_len)?;
        let out = self.encoder.encode(t, &input.seq, &build_full_mask(input.seq.len())?)?;
        let markers = t.gather_rows(out.hidden, &input.markers)?;
        let y = self.cascade_head.forward(t, markers)?;
        t.reshape(y, &[order.len()])
    }

    /// Runs every stage enabled by the variant. The first hop is the best
    /// paragraph of stage 1 and the cascade takes the best `top_k_cascade`
    /// of the stage before it, during training as at inference.
    pub fn forward(
        &self,
        t: &mut Tape,
        question: &str,
        paragraphs: &[Paragraph],
        vocab: &Vocab,
    ) -> Result<RetrievalPass> {
        let enc = self.encode_paragraphs(t, question, paragraphs, vocab)?;
        let initial = self.score_paragraphs_initial(t, &enc)?;
        let (refined, first_hop) = if self.config.variant.refines() {
            let first = top_k(t.value(initial).data(), 1)[0];
            (Some(self.refine_scores(t, &enc, first)?), Some(first))
        } else {
            (None, None)
        };
        let ranking = t.value(refined.unwrap_or(initial)).data().to_vec();
        let k = self.config.top_k_cascade.min(paragraphs.len());
        let cascade_indices = top_k(&ranking, k);
        let cascaded = self.cascaded_rerank(t, question, paragraphs, &cascade_indices, vocab)?;
        Ok(RetrievalPass { initial, refined, cascaded: Some(cascaded), first_hop, cascade_indices })
    }

    /// Sum of the stage losses.
    pub fn loss(&self, t: &mut Tape, pass: &RetrievalPass, labels: &[ParagraphLabel]) -> Result<Var> {
        let n = t.value(pass.initial).numel();
        if labels.len() != n {
            return Err(Error::InvalidInput(format!("{} labels for {n} paragraphs", labels.len())));
        }
        let mut terms = Vec::new();
        if self.config.variant.uses_score_target() {
            let scores = assign_target_scores(labels, &self.config)?;
            terms.push(retriever_loss(t, pass.initial, &scores)?);
            if let Some(r) = pass.refined {
                terms.push(retriever_loss(t, r, &scores)?);
            }
            if let Some(c) = pass.cascaded {
                let sub: Vec<f64> = pass.cascade_indices.iter().map(|&i| scores[i]).collect();
                terms.push(retriever_loss(t, c, &sub)?);
            }
        } else {
            let flags: Vec<f64> = labels.iter().map(|l| f64::from(u8::from(l.is_relevant))).collect();
            let bias = t.param(self.bce_bias)?;
            let bce = |t: &mut Tape, logits: Var, targets: &[f64]| -> Result<Var> {
                let k = t.value(logits).numel();
                let ones = t.constant(Tensor::full(&[k, 1], 1.0));
                let shift = t.matmul(ones, bias)?;
                let shift = t.reshape(shift, &[k])?;
                let z = t.add(logits, shift)?;
                t.bce_with_logits(z, targets)
            };
            terms.push(bce(t, pass.initial, &flags)?);
            if let Some(c) = pass.cascaded {
                let sub: Vec<f64> = pass.cascade_indices.iter().map(|&i| flags[i]).collect();
                terms.push(bce(t, c, &sub)?);
            }
        }
        let mut total = terms[0];
        for &x in &terms[1..] {
            total = t.add(total, x)?;
        }
        Ok(total)
    }

    /// Inference: all stages plus the selected pair.
    pub fn retrieve(
        &self,
        store: &ParamStore,
        question: &str,
        paragraphs: &[Paragraph],
        vocab: &Vocab,
    ) -> Result<RetrievalState> {
        let mut t = Tape::with_params(store);
        let pass = self.forward(&mut t, question, paragraphs, vocab)?;
        let values = |v: Option<Var>| v.map(|v| t.value(v).data().to_vec());
        let mut state = RetrievalState {
            initial_logits: t.value(pass.initial).data().to_vec(),
            refined_logits: values(pass.refined),
            cascaded_logits: values(pass.cascaded),
            cascade_indices: pass.cascade_indices,
            first_hop_index: pass.first_hop,
            selected: None,
        };
        state.selected = Some(select_evidence_paragraphs(&state)?);
        Ok(state)
    }
}
