//! Additive attention masks: full, sentence-aware (SaSA) and evidence-guided
//! (EGA). Entries are `0` (visible) or `-inf` (hidden).

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::textproc::SentenceMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    data: Tensor,
}

impl AttentionMask {
    fn from_fn(n: usize, visible: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(if visible(i, j) { 0.0 } else { f64::NEG_INFINITY });
            }
        }
        Self { n, data: Tensor::matrix(n, n, data).expect("n >= 1") }
    }

    /// Wraps a hand-built square matrix of 0 / −∞ entries.
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        let (m, n) = data.dims2();
        let bad = |reason: &str| Err(Error::InvalidShape { shape: data.shape().to_vec(), reason: reason.into() });
        if m != n || data.shape().len() != 2 {
            return bad("mask must be square");
        }
        if data.data().iter().any(|&v| v != 0.0 && v != f64::NEG_INFINITY) {
            return bad("mask entries must be 0 or -inf");
        }
        if (0..n).any(|i| data.row(i).iter().all(|&v| v != 0.0)) {
            return bad("every mask row needs a visible entry");
        }
        Ok(Self { n, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_visible(&self, i: usize, j: usize) -> bool {
        self.data.get(i, j) == 0.0
    }

    pub fn is_full(&self) -> bool {
        self.data.data().iter().all(|&v| v == 0.0)
    }

    /// The mask as an `n x n` tensor to add to attention logits.
    pub fn as_tensor(&self) -> &Tensor {
        &self.data
    }

    /// Grid of `.` (visible) and `#` (hidden), one line per row.
    pub fn render(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.is_visible(i, j) { '.' } else { '#' });
            }
            s.push('\n');
        }
        s
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Per-sentence evidence flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceSelection {
    pub z: Vec<bool>,
}

impl EvidenceSelection {
    pub fn new(z: Vec<bool>) -> Self {
        Self { z }
    }

    pub fn all(k: usize) -> Self {
        Self { z: vec![true; k] }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

pub fn build_full_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::InvalidShape { shape: vec![0, 0], reason: "mask needs n >= 1".into() });
    }
    Ok(AttentionMask::from_fn(n, |_, _| true))
}

fn check_len(map: &SentenceMap, n: usize) -> Result<()> {
    if n == 0 || map.seq_len() != n {
        return Err(Error::InconsistentMap(format!("map covers {} tokens, mask requested for {n}", map.seq_len())));
    }
    Ok(())
}

/// Placeholders see their own sentence and all placeholders. Other tokens see
/// each other, plus the placeholder of their own sentence.
pub fn build_sasa_mask(map: &SentenceMap, n: usize) -> Result<AttentionMask> {
    check_len(map, n)?;
    let sigma = map.sigma_slice();
    let is_e: Vec<bool> = (0..n).map(|i| map.is_placeholder(i)).collect();
    Ok(AttentionMask::from_fn(n, |i, j| is_e[i] == is_e[j] || (sigma[i].is_some() && sigma[i] == sigma[j])))
}

/// Tokens of unselected sentences are hidden from every other token. Tokens
/// outside any sentence count as selected and the diagonal always stays
/// visible.
pub fn build_ega_mask(map: &SentenceMap, selection: &EvidenceSelection, n: usize) -> Result<AttentionMask> {
    check_len(map, n)?;
    if selection.len() != map.num_sentences() {
        return Err(Error::ShapeMismatch {
            op: "build_ega_mask",
            lhs: vec![selection.len()],
            rhs: vec![map.num_sentences()],
        });
    }
    let selected: Vec<bool> = map.sigma_slice().iter().map(|s| s.is_none_or(|k| selection.z[k])).collect();
    Ok(AttentionMask::from_fn(n, |i, j| i == j || (selected[i] && selected[j])))
}
