//! Multi-task reader over the selected paragraphs: supporting sentences
//! from the `<e>` placeholders, then answer span and type under an
//! evidence-guided mask.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerType, MhrcExample, Paragraph};
use crate::encoder::{Encoder, EncoderConfig, Linear, Mlp, TransformerStack};
use crate::error::{Error, Result};
use crate::masks::{build_ega_mask, build_full_mask, build_sasa_mask, EvidenceSelection};
use crate::numerics::{sigmoid, ParamStore, Tape, Tensor, Var};
use crate::textproc::{assemble_reader_input_capped, split_words, ReaderInput, SentenceMap, Vocab, K_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReaderConfig {
    /// Self-attention layers in each of the sentence and answer stacks.
    pub t: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub max_answer_len: usize,
    pub k_max: usize,
    /// A sentence is evidence when its sigmoid score exceeds this.
    pub threshold: f64,
    pub use_sentence_transformer: bool,
    pub use_answer_transformer: bool,
    pub use_sasa: bool,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            t: 2,
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 1.0,
            max_answer_len: 30,
            k_max: K_MAX,
            threshold: 0.5,
            use_sentence_transformer: true,
            use_answer_transformer: true,
            use_sasa: true,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Validation("reader t must be at least 1".into()));
        }
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Validation("loss weights must be positive".into()));
        }
        if self.max_answer_len == 0 {
            return Err(Error::Validation("max_answer_len must be positive".into()));
        }
        if !(1..=K_MAX).contains(&self.k_max) {
            return Err(Error::Validation(format!("k_max must lie in 1..={K_MAX}")));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Validation("threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Training labels of one reader input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderGold {
    /// Per mapped sentence: is it a supporting fact.
    pub sentences: Vec<bool>,
    /// Token positions of the answer, when it is a span found in the input.
    pub span: Option<(usize, usize)>,
    pub answer_type: AnswerType,
}

/// Logits of one input, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct ReaderOutput {
    pub o_sent: Tensor,
    pub o_start: Tensor,
    pub o_end: Tensor,
    pub o_type: Tensor,
    pub z: EvidenceSelection,
}

/// Logits of one input on a tape.
#[derive(Debug, Clone)]
pub struct ReaderPass {
    pub o_sent: Var,
    pub o_start: Var,
    pub o_end: Var,
    pub o_type: Var,
    pub z: EvidenceSelection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer_text: String,
    pub supporting_facts: BTreeSet<(String, usize)>,
}

fn sentences_of<'a>(paragraphs: &[&'a Paragraph]) -> Vec<&'a [String]> {
    paragraphs.iter().map(|p| p.sentences.as_slice()).collect()
}

/// Mapped sentence `s` as (paragraph index, local index).
fn origin(input: &ReaderInput, s: usize) -> Result<(usize, usize)> {
    input.origins.get(s).copied().ok_or(Error::IndexOutOfRange { index: s, len: input.origins.len() })
}

/// Positions that may start or end an answer: words of mapped sentences.
pub fn answer_positions(map: &SentenceMap) -> Vec<bool> {
    (0..map.seq_len()).map(|p| map.sigma_slice()[p].is_some() && !map.is_placeholder(p)).collect()
}

/// First occurrence of `answer` as a word sequence inside one mapped
/// sentence, trying the `preferred` sentences before the rest.
pub fn locate_answer(
    input: &ReaderInput,
    paragraphs: &[&Paragraph],
    answer: &str,
    preferred: &[bool],
) -> Option<(usize, usize)> {
    let want: Vec<String> = split_words(answer).into_iter().map(|w| w.text).collect();
    if want.is_empty() {
        return None;
    }
    let sents = sentences_of(paragraphs);
    let k = input.map.num_sentences();
    let mut order: Vec<usize> = (0..k).filter(|&s| preferred.get(s).copied().unwrap_or(false)).collect();
    order.extend((0..k).filter(|&s| !preferred.get(s).copied().unwrap_or(false)));
    for s in order {
        let (a, b) = input.map.spans()[s];
        let m = want.len();
        for i in a + 1..b {
            let j = i + m - 1;
            if j >= b {
                break;
            }
            let words: Option<Vec<String>> =
                (i..=j).map(|p| input.span_text(&sents, p, p).map(|w| w.to_lowercase())).collect();
            if words.as_deref() == Some(want.as_slice()) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Gold labels of `ex` for an input built from `paragraphs` (indices into
/// the example's context).
pub fn reader_gold(input: &ReaderInput, ex: &MhrcExample, paragraphs: &[usize]) -> Result<ReaderGold> {
    let paras: Vec<&Paragraph> = paragraphs
        .iter()
        .map(|&i| ex.context.get(i).ok_or(Error::IndexOutOfRange { index: i, len: ex.context.len() }))
        .collect::<Result<_>>()?;
    let sentences = (0..input.map.num_sentences())
        .map(|s| {
            let (p, l) = origin(input, s)?;
            Ok(ex.supporting_facts.contains(&(paras[p].title.clone(), l)))
        })
        .collect::<Result<Vec<bool>>>()?;
    let span = match ex.answer_type {
        AnswerType::Span => locate_answer(input, &paras, &ex.answer, &sentences),
        _ => None,
    };
    Ok(ReaderGold { sentences, span, answer_type: ex.answer_type })
}

/// Weighted sum of the sentence, span and type losses. The span term is
/// dropped when there is no gold span.
pub fn joint_loss(t: &mut Tape, pass: &ReaderPass, gold: &ReaderGold, cfg: &ReaderConfig) -> Result<Var> {
    let flags: Vec<f64> = gold.sentences.iter().map(|&b| f64::from(u8::from(b))).collect();
    let sent = t.bce_with_logits(pass.o_sent, &flags)?;
    let mut total = t.scale(sent, cfg.lambda1)?;
    if let (AnswerType::Span, Some((i, j))) = (gold.answer_type, gold.span) {
        let ls = t.cross_entropy(pass.o_start, i)?;
        let le = t.cross_entropy(pass.o_end, j)?;
        let span = t.add(ls, le)?;
        let span = t.scale(span, cfg.lambda2)?;
        total = t.add(total, span)?;
    }
    let ty = t.cross_entropy(pass.o_type, gold.answer_type.index())?;
    let ty = t.scale(ty, cfg.lambda3)?;
    t.add(total, ty)
}

/// Best `(i, j)` by `start[i] + end[j]` with `i ≤ j`, `j − i < max_len` and
/// both in one sentence. Ties go to the smaller `i`, then smaller `j`.
pub fn best_span(start: &[f64], end: &[f64], map: &SentenceMap, max_len: usize) -> Option<(usize, usize)> {
    let sigma = map.sigma_slice();
    let mut best: Option<(f64, usize, usize)> = None;
    for i in 0..start.len().min(end.len()) {
        if !start[i].is_finite() || sigma[i].is_none() {
            continue;
        }
        for j in i..(i + max_len).min(end.len()) {
            if sigma[j] != sigma[i] {
                break;
            }
            if !end[j].is_finite() {
                continue;
            }
            let s = start[i] + end[j];
            if best.is_none_or(|(b, _, _)| s > b) {
                best = Some((s, i, j));
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
}

/// Answer text and supporting facts from the reader's logits.
pub fn decode_prediction(
    out: &ReaderOutput,
    input: &ReaderInput,
    paragraphs: &[&Paragraph],
    cfg: &ReaderConfig,
) -> Result<Prediction> {
    let mut supporting_facts = BTreeSet::new();
    for (s, &z) in out.z.z.iter().enumerate() {
        if z {
            let (p, l) = origin(input, s)?;
            supporting_facts.insert((paragraphs[p].title.clone(), l));
        }
    }
    let types = out.o_type.data();
    let yes_no = if types[AnswerType::No.index()] > types[AnswerType::Yes.index()] { "no" } else { "yes" };
    let answer_text = match AnswerType::from_index(out.o_type.argmax()) {
        AnswerType::Yes => "yes".to_string(),
        AnswerType::No => "no".to_string(),
        AnswerType::Span => {
            let sents = sentences_of(paragraphs);
            best_span(out.o_start.data(), out.o_end.data(), &input.map, cfg.max_answer_len)
                .and_then(|(i, j)| input.span_text(&sents, i, j))
                .filter(|s| !s.trim().is_empty())
                .map_or_else(|| yes_no.to_string(), str::to_string)
        }
    };
    Ok(Prediction { answer_text, supporting_facts })
}

#[derive(Debug, Clone)]
pub struct Reader {
    pub config: ReaderConfig,
    pub encoder: Encoder,
    pub sentence_layers: TransformerStack,
    pub sentence_head: Linear,
    pub answer_layers: TransformerStack,
    pub start_head: Mlp,
    pub end_head: Mlp,
    pub type_head: Mlp,
}

impl Reader {
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, config: &ReaderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = enc.d_model;
        // start/end logits go through a softmax over positions, so their
        // output layers have no bias
        let span_head = |store: &mut ParamStore, name: &str, rng: &mut _| Mlp {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, d, rng),
            out: Linear::without_bias(store, &format!("{name}.out"), d, 1, rng),
        };
        Ok(Self {
            config: config.clone(),
            encoder: Encoder::new(store, "reader.encoder", enc, rng)?,
            sentence_layers: TransformerStack::new(store, "reader.sentence", enc, config.t, rng),
            sentence_head: Linear::new(store, "reader.sentence_head", d, 1, rng),
            answer_layers: TransformerStack::new(store, "reader.answer", enc, config.t, rng),
            start_head: span_head(store, "reader.start", rng),
            end_head: span_head(store, "reader.end", rng),
            type_head: Mlp::new(store, "reader.type", d, d, 3, rng),
        })
    }

    pub fn assemble(&self, question: &str, paragraphs: &[&Paragraph], vocab: &Vocab) -> Result<ReaderInput> {
        assemble_reader_input_capped(
            question,
            &sentences_of(paragraphs),
            vocab,
            self.encoder.config.max_len,
            self.config.k_max,
        )
    }

    /// Shared encoder under the sentence-aware mask.
    pub fn encode(&self, t: &mut Tape, input: &ReaderInput) -> Result<Var> {
        let n = input.seq.len();
        let mask = if self.config.use_sasa { build_sasa_mask(&input.map, n)? } else { build_full_mask(n)? };
        Ok(self.encoder.encode(t, &input.seq, &mask)?.hidden)
    }

    /// `o_sent`, one logit per mapped sentence.
    pub fn predict_sentences(&self, t: &mut Tape, hidden: Var, map: &SentenceMap) -> Result<Var> {
        let k = map.num_sentences();
        if k == 0 {
            return Err(Error::InvalidInput("no sentences to score".into()));
        }
        let x = if self.config.use_sentence_transformer {
            let mut rows = map.placeholder_positions();
            rows.push(0);
            let e = t.gather_rows(hidden, &rows)?;
            let h = self.sentence_layers.forward(t, e, None)?;
            let idx: Vec<usize> = (0..k).collect();
            t.gather_rows(h, &idx)?
        } else {
            t.gather_rows(hidden, &map.placeholder_positions())?
        };
        let y = self.sentence_head.forward(t, x)?;
        t.reshape(y, &[k])
    }

    /// `(o_start, o_end, o_type)` with evidence selection `z`.
    pub fn predict_answer(
        &self,
        t: &mut Tape,
        hidden: Var,
        map: &SentenceMap,
        z: &EvidenceSelection,
    ) -> Result<(Var, Var, Var)> {
        let n = map.seq_len();
        let h = if self.config.use_answer_transformer {
            let mask = build_ega_mask(map, z, n)?;
            let m = if mask.is_full() { None } else { Some(&mask) };
            self.answer_layers.forward(t, hidden, m)?
        } else {
            hidden
        };
        let ninf = Tensor::vector(
            answer_positions(map).into_iter().map(|ok| if ok { 0.0 } else { f64::NEG_INFINITY }).collect(),
        )?;
        let mut span = |head: &Mlp| -> Result<Var> {
            let y = head.forward(t, h)?;
            let y = t.reshape(y, &[n])?;
            let m = t.constant(ninf.clone());
            t.add(y, m)
        };
        let start = span(&self.start_head)?;
        let end = span(&self.end_head)?;
        let first = t.gather_rows(h, &[0])?;
        let ty = self.type_head.forward(t, first)?;
        let ty = t.reshape(ty, &[3])?;
        Ok((start, end, ty))
    }

    fn select(&self, t: &Tape, o_sent: Var) -> EvidenceSelection {
        EvidenceSelection::new(t.value(o_sent).data().iter().map(|&x| sigmoid(x) > self.config.threshold).collect())
    }

    /// Full reader. `gold_z` replaces the predicted evidence in the answer
    /// stage (teacher forcing during training).
    pub fn forward(&self, t: &mut Tape, input: &ReaderInput, gold_z: Option<&EvidenceSelection>) -> Result<ReaderPass> {
        let hidden = self.encode(t, input)?;
        let o_sent = self.predict_sentences(t, hidden, &input.map)?;
        let z = match gold_z {
            Some(z) => z.clone(),
            None => self.select(t, o_sent),
        };
        let (o_start, o_end, o_type) = self.predict_answer(t, hidden, &input.map, &z)?;
        Ok(ReaderPass { o_sent, o_start, o_end, o_type, z })
    }

    /// Training loss of one example on the given context paragraphs.
    pub fn example_loss(&self, t: &mut Tape, ex: &MhrcExample, paragraphs: &[usize], vocab: &Vocab) -> Result<Var> {
        let paras: Vec<&Paragraph> = paragraphs.iter().map(|&i| &ex.context[i]).collect();
        let input = self.assemble(&ex.question, &paras, vocab)?;
        let gold = reader_gold(&input, ex, paragraphs)?;
        let z = EvidenceSelection::new(gold.sentences.clone());
        let pass = self.forward(t, &input, Some(&z))?;
        joint_loss(t, &pass, &gold, &self.config)
    }

    /// Inference with predicted evidence.
    pub fn infer(&self, store: &ParamStore, input: &ReaderInput) -> Result<ReaderOutput> {
        let mut t = Tape::with_params(store);
        let pass = self.forward(&mut t, input, None)?;
        Ok(ReaderOutput {
            o_sent: t.value(pass.o_sent).clone(),
            o_start: t.value(pass.o_start).clone(),
            o_end: t.value(pass.o_end).clone(),
            o_type: t.value(pass.o_type).clone(),
            z: pass.z,
        })
    }

    /// Answer and supporting facts for `question` over `paragraphs`.
    pub fn predict(
        &self,
        store: &ParamStore,
        question: &str,
        paragraphs: &[&Paragraph],
        vocab: &Vocab,
    ) -> Result<Prediction> {
        let input = self.assemble(question, paragraphs, vocab)?;
        let out = self.infer(store, &input)?;
        decode_prediction(&out, &input, paragraphs, &self.config)
    }
}
