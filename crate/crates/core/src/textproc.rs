//! Tokenization, vocabulary and assembly of model inputs.
//!
//! Every assembled sequence starts with `<s>`. Reader inputs also carry a
//! [`SentenceMap`] that records which token belongs to which context sentence.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const PARA: usize = 4;
pub const SENT: usize = 5;

/// Special tokens in id order.
pub const SPECIALS: [&str; 6] = ["<pad>", "<unk>", "<s>", "</s>", "<p>", "<e>"];

pub const MAX_LEN: usize = 512;
/// Sentences past this count get no `<e>` placeholder.
pub const K_MAX: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary holding only the special tokens.
    pub fn specials_only() -> Self {
        Self::from_tokens(Vec::new()).expect("specials are distinct")
    }

    /// Builds a vocabulary from regular tokens; specials are prepended.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    /// Counts words over `texts` and keeps those seen at least `min_count`
    /// times, most frequent first, ties broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w.text).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(&w.as_str())).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(words.into_iter().map(|(w, _)| w).collect()).expect("counted words are distinct")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of a normalized word, or `UNK`.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIALS.len() || lines[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidInput("vocabulary must start with the special tokens".into()));
        }
        Self::from_tokens(lines[SPECIALS.len()..].iter().map(|s| s.to_string()).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_text(&text)
    }
}

/// A normalized word with its byte range in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Lowercases and splits on whitespace; every punctuation character is a
/// word of its own.
pub fn split_words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut cur: Option<usize> = None;
    let flush = |out: &mut Vec<Word>, start: usize, end: usize| {
        out.push(Word { text: text[start..end].to_lowercase(), start, end });
    };
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            cur.get_or_insert(i);
            continue;
        }
        if let Some(s) = cur.take() {
            flush(&mut out, s, i);
        }
        if !c.is_whitespace() {
            flush(&mut out, i, i + c.len_utf8());
        }
    }
    if let Some(s) = cur {
        flush(&mut out, s, text.len());
    }
    out
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    split_words(text).iter().map(|w| vocab.id(&w.text)).collect()
}

/// Token ids with a segment number per token: 0 for special tokens, 1 for
/// the question, 2.. for the passages in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
}

impl TokenSequence {
    /// A sequence without segment structure; no token is marked as shared.
    pub fn from_ids(ids: Vec<usize>) -> Self {
        let segments = vec![0; ids.len()];
        Self { ids, segments }
    }

    fn push(&mut self, id: usize, segment: usize) {
        self.ids.push(id);
        self.segments.push(segment);
    }

    /// Marks each word whose id also occurs in another segment. Special
    /// tokens and unknown words are never marked.
    pub fn overlap_flags(&self) -> Vec<bool> {
        let mut seen: HashMap<usize, (usize, bool)> = HashMap::new();
        for (&id, &seg) in self.ids.iter().zip(&self.segments) {
            if seg == 0 || id < SPECIALS.len() {
                continue;
            }
            let e = seen.entry(id).or_insert((seg, false));
            if e.0 != seg {
                e.1 = true;
            }
        }
        self.ids.iter().zip(&self.segments).map(|(id, &seg)| seg != 0 && seen.get(id).is_some_and(|e| e.1)).collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token to sentence assignment of a reader input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceMap {
    spans: Vec<(usize, usize)>,
    sigma: Vec<Option<usize>>,
}

impl SentenceMap {
    /// Builds a map over a sequence of `len` tokens. Each span starts at its
    /// sentence's `<e>` placeholder.
    pub fn new(spans: Vec<(usize, usize)>, len: usize) -> Result<Self> {
        if spans.len() > K_MAX {
            return Err(Error::InconsistentMap(format!("{} sentences exceed the cap of {K_MAX}", spans.len())));
        }
        let mut sigma = vec![None; len];
        let mut prev_end = 0;
        for (i, &(s, e)) in spans.iter().enumerate() {
            if s >= e || e > len || s < prev_end {
                return Err(Error::InconsistentMap(format!("span {i} ({s}, {e}) in a sequence of {len}")));
            }
            for slot in &mut sigma[s..e] {
                *slot = Some(i);
            }
            prev_end = e;
        }
        Ok(Self { spans, sigma })
    }

    pub fn num_sentences(&self) -> usize {
        self.spans.len()
    }

    pub fn seq_len(&self) -> usize {
        self.sigma.len()
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn placeholder_positions(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.0).collect()
    }

    pub fn is_placeholder(&self, pos: usize) -> bool {
        self.sigma.get(pos).copied().flatten().is_some_and(|i| self.spans[i].0 == pos)
    }

    /// Sentence of `pos`, `None` for question and special tokens.
    pub fn sigma(&self, pos: usize) -> Result<Option<usize>> {
        self.sigma.get(pos).copied().ok_or(Error::IndexOutOfRange { index: pos, len: self.sigma.len() })
    }

    pub fn sigma_slice(&self) -> &[Option<usize>] {
        &self.sigma
    }
}

pub fn sigma(map: &SentenceMap, position: usize) -> Result<Option<usize>> {
    map.sigma(position)
}

fn question_prefix(question: &str, vocab: &Vocab, reserve: usize, max_len: usize) -> Result<TokenSequence> {
    let q = tokenize(question, vocab);
    let needed = q.len() + 2 + reserve;
    if needed > max_len {
        return Err(Error::QuestionTooLong { needed, max_len });
    }
    let mut seq = TokenSequence { ids: Vec::with_capacity(128), segments: Vec::with_capacity(128) };
    seq.push(BOS, 0);
    for id in q {
        seq.push(id, 1);
    }
    seq.push(EOS, 0);
    Ok(seq)
}

/// `<s> question </s> paragraph </s>`, cutting the paragraph tail to fit.
pub fn assemble_retriever_input(
    question: &str,
    paragraph: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSequence> {
    let mut seq = question_prefix(question, vocab, 1, max_len)?;
    let room = max_len - seq.len() - 1;
    for id in tokenize(paragraph, vocab).into_iter().take(room) {
        seq.push(id, 2);
    }
    seq.push(EOS, 0);
    Ok(seq)
}

/// A cascade input together with the positions of its `<p>` markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CascadeInput {
    pub seq: TokenSequence,
    pub markers: Vec<usize>,
}

/// `<s> question </s> <p> P_a <p> P_b ... </s>`. Sentences that do not fit
/// are dropped whole from the end; every `<p>` is kept.
pub fn assemble_cascade_input(
    question: &str,
    paragraphs: &[&[String]],
    vocab: &Vocab,
    max_len: usize,
) -> Result<CascadeInput> {
    let mut seq = question_prefix(question, vocab, paragraphs.len() + 1, max_len)?;
    let mut room = max_len - seq.len() - paragraphs.len() - 1;
    let mut markers = Vec::with_capacity(paragraphs.len());
    let mut full = false;
    for (pi, para) in paragraphs.iter().enumerate() {
        markers.push(seq.len());
        seq.push(PARA, 0);
        for sent in para.iter() {
            let toks = tokenize(sent, vocab);
            if full || toks.len() > room {
                full = true;
                break;
            }
            room -= toks.len();
            for id in toks {
                seq.push(id, pi + 2);
            }
        }
    }
    seq.push(EOS, 0);
    Ok(CascadeInput { seq, markers })
}

/// Where a token of a reader input came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSource {
    /// Index into the flattened sentence list of the input paragraphs.
    pub sentence: usize,
    /// Byte range inside that sentence.
    pub start: usize,
    pub end: usize,
}

/// Assembled reader input with everything needed to map predictions back to
/// the text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderInput {
    pub seq: TokenSequence,
    pub map: SentenceMap,
    /// `(paragraph, local sentence index)` per mapped sentence.
    pub origins: Vec<(usize, usize)>,
    /// Source of each token, `None` for question and special tokens.
    pub sources: Vec<Option<TokenSource>>,
}

impl ReaderInput {
    /// Original text covered by tokens `i..=j`, when both come from the same
    /// sentence.
    pub fn span_text<'a>(&self, paragraphs: &[&'a [String]], i: usize, j: usize) -> Option<&'a str> {
        let a = self.sources.get(i).copied().flatten()?;
        let b = self.sources.get(j).copied().flatten()?;
        if a.sentence != b.sentence || a.start > b.end {
            return None;
        }
        let mut k = a.sentence;
        for p in paragraphs {
            if k < p.len() {
                return p[k].get(a.start..b.end);
            }
            k -= p.len();
        }
        None
    }
}

/// `<s> question </s> <e> s1 <e> s2 ... </s>` over the sentences of the
/// given paragraphs in order. At most [`K_MAX`] sentences get a placeholder;
/// later ones are appended unmapped while they fit. Sentences that do not fit
/// are dropped whole.
pub fn assemble_reader_input(
    question: &str,
    paragraphs: &[&[String]],
    vocab: &Vocab,
    max_len: usize,
) -> Result<ReaderInput> {
    assemble_reader_input_capped(question, paragraphs, vocab, max_len, K_MAX)
}

/// As [`assemble_reader_input`] with at most `k_max` (≤ [`K_MAX`]) mapped
/// sentences.
pub fn assemble_reader_input_capped(
    question: &str,
    paragraphs: &[&[String]],
    vocab: &Vocab,
    max_len: usize,
    k_max: usize,
) -> Result<ReaderInput> {
    if !(1..=K_MAX).contains(&k_max) {
        return Err(Error::InvalidInput(format!("k_max {k_max} outside 1..={K_MAX}")));
    }
    let total: usize = paragraphs.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Err(Error::InvalidInput("reader input needs at least one sentence".into()));
    }
    let mut seq = question_prefix(question, vocab, 1, max_len)?;
    let mut sources = vec![None; seq.len()];
    let mut spans = Vec::new();
    let mut origins = Vec::new();
    let mut flat = 0;
    'outer: for (pi, para) in paragraphs.iter().enumerate() {
        for (si, sent) in para.iter().enumerate() {
            let words = split_words(sent);
            let mapped = spans.len() < k_max;
            let need = words.len() + usize::from(mapped);
            if seq.len() + need + 1 > max_len {
                break 'outer;
            }
            let start = seq.len();
            if mapped {
                seq.push(SENT, 0);
                sources.push(None);
            }
            for w in &words {
                seq.push(vocab.id(&w.text), pi + 2);
                sources.push(Some(TokenSource { sentence: flat, start: w.start, end: w.end }));
            }
            if mapped {
                spans.push((start, seq.len()));
                origins.push((pi, si));
            }
            flat += 1;
        }
    }
    if spans.is_empty() {
        return Err(Error::QuestionTooLong { needed: max_len + 1, max_len });
    }
    seq.push(EOS, 0);
    sources.push(None);
    let map = SentenceMap::new(spans, seq.len())?;
    Ok(ReaderInput { seq, map, origins, sources })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn vocab() -> Vocab {
        Vocab::build(["the a b c d q p . ?"], 1)
    }

    #[test]
    fn tokenize_basics() {
        let v = Vocab::build(["the cat"], 1);
        assert!(tokenize("", &v).is_empty());
        assert_eq!(tokenize("the the", &v), vec![v.id("the"), v.id("the")]);
        assert_eq!(tokenize("zzqx", &v), vec![UNK]);
        assert_eq!(tokenize("The CAT", &v), vec![v.id("the"), v.id("cat")]);
    }

    #[test]
    fn punctuation_splits() {
        let w = split_words("Port Moresby, Papua.");
        let texts: Vec<&str> = w.iter().map(|w| w.text.as_str()).collect();
        assert_eq!(texts, ["port", "moresby", ",", "papua", "."]);
        assert_eq!((w[1].start, w[1].end), (5, 12));
    }

    #[test]
    fn specials_fixed() {
        let v = vocab();
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), i);
        }
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocab::from_text("a\nb\n").is_err());
    }

    #[test]
    fn retriever_layout() {
        let v = vocab();
        let s = assemble_retriever_input("q?", "p.", &v, MAX_LEN).unwrap();
        assert_eq!(s.ids, vec![BOS, v.id("q"), v.id("?"), EOS, v.id("p"), v.id("."), EOS]);
        let e = assemble_retriever_input("q", "", &v, MAX_LEN).unwrap();
        assert_eq!(e.ids, vec![BOS, v.id("q"), EOS, EOS]);
        let t = assemble_retriever_input("q", "a b c d", &v, 6).unwrap();
        assert_eq!(t.ids, vec![BOS, v.id("q"), EOS, v.id("a"), v.id("b"), EOS]);
        assert!(matches!(assemble_retriever_input("a b c d", "p", &v, 6), Err(Error::QuestionTooLong { .. })));
    }

    #[test]
    fn reader_layout() {
        let v = vocab();
        let p = sents(&["A b.", "C d."]);
        let r = assemble_reader_input("q", &[&p], &v, MAX_LEN).unwrap();
        // <s> q </s> <e> a b . <e> c d . </s>
        assert_eq!(r.map.placeholder_positions(), vec![3, 7]);
        assert_eq!(r.seq.ids[3], SENT);
        assert_eq!(r.map.sigma(0).unwrap(), None);
        assert_eq!(r.map.sigma(1).unwrap(), None);
        assert_eq!(r.map.sigma(3).unwrap(), Some(0));
        assert_eq!(r.map.sigma(10).unwrap(), Some(1));
        assert_eq!(r.map.sigma(11).unwrap(), None);
        assert!(r.map.sigma(12).is_err());
        assert_eq!(r.span_text(&[&p], 4, 5), Some("A b"));
        assert_eq!(r.span_text(&[&p], 5, 8), None);
    }

    #[test]
    fn reader_two_paragraphs() {
        let v = vocab();
        let a = sents(&["a.", "b."]);
        let b = sents(&["c.", "d.", "a b."]);
        let r = assemble_reader_input("q", &[&a, &b], &v, MAX_LEN).unwrap();
        assert_eq!(r.map.num_sentences(), 5);
        assert_eq!(r.origins, vec![(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)]);
    }

    #[test]
    fn reader_caps_placeholders() {
        let v = vocab();
        let p: Vec<String> = (0..16).map(|_| "a b.".to_string()).collect();
        let r = assemble_reader_input("q", &[&p], &v, MAX_LEN).unwrap();
        assert_eq!(r.seq.ids.iter().filter(|&&t| t == SENT).count(), 14);
        assert_eq!(r.map.num_sentences(), 14);
        // the two unmapped sentences are still present
        assert_eq!(r.seq.len(), 3 + 14 * 4 + 2 * 3 + 1);
    }

    #[test]
    fn reader_truncates_whole_sentences() {
        let v = vocab();
        let p = sents(&["a b c.", "d d d d d."]);
        let r = assemble_reader_input("q", &[&p], &v, 12).unwrap();
        assert_eq!(r.map.num_sentences(), 1);
        assert_eq!(*r.seq.ids.last().unwrap(), EOS);
        assert!(r.seq.len() <= 12);
    }

    #[test]
    fn cascade_keeps_markers() {
        let v = vocab();
        let a = sents(&["a b c d.", "a."]);
        let b = sents(&["b c."]);
        let c = sents(&["d."]);
        let r = assemble_cascade_input("q", &[&a, &b, &c], &v, MAX_LEN).unwrap();
        assert_eq!(r.markers.len(), 3);
        assert!(r.markers.iter().all(|&m| r.seq.ids[m] == PARA));
        let t = assemble_cascade_input("q", &[&a, &b, &c], &v, 12).unwrap();
        assert_eq!(t.markers.len(), 3);
        assert!(t.seq.len() <= 12);
        assert!(t.markers.iter().all(|&m| t.seq.ids[m] == PARA));
    }

    #[test]
    fn sentence_map_rejects_overlap() {
        assert!(SentenceMap::new(vec![(0, 3), (2, 4)], 5).is_err());
        assert!(SentenceMap::new(vec![(0, 6)], 5).is_err());
        assert!(SentenceMap::new(vec![(1, 3), (3, 5)], 5).is_ok());
    }

    #[test]
    fn overlap_marks_words_shared_across_segments() {
        let v = Vocab::build(["who made Foo ? Foo was made by Bar . Bar was born in Baz ."], 1);
        let paras: [&[String]; 2] = [&["Foo was made by Bar .".into()], &["Bar was born in Baz .".into()]];
        let r = assemble_reader_input("who made Foo ?", &paras, &v, 64).unwrap();
        let marked: Vec<String> = r
            .seq
            .ids
            .iter()
            .zip(r.seq.overlap_flags())
            .filter(|(_, f)| *f)
            .map(|(&id, _)| v.token(id).unwrap().to_string())
            .collect();
        // "made" and "foo" link the question to the first passage; "bar",
        // "was" and "." link the passages
        assert_eq!(marked, ["made", "foo", "foo", "was", "made", "bar", ".", "bar", "was", "."]);
        assert!(TokenSequence::from_ids(vec![7, 7, 7]).overlap_flags().iter().all(|f| !f));
    }
}
