//! Exact match and F1 for answers, supporting facts, their joint and
//! paragraph retrieval.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Exact match, F1, precision and recall of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct.split_whitespace().filter(|w| !matches!(*w, "a" | "an" | "the")).collect::<Vec<_>>().join(" ")
}

pub fn answer_scores(prediction: &str, gold: &str) -> Prf {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let em = f64::from(u8::from(p == g));
    let special = ["yes", "no", "noanswer"];
    if (special.contains(&p.as_str()) || special.contains(&g.as_str())) && p != g {
        return Prf::default();
    }
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() && gt.is_empty() {
        return Prf { em: 1.0, f1: 1.0, precision: 1.0, recall: 1.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut same = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                same += 1;
            }
        }
    }
    if same == 0 {
        return Prf { em, ..Prf::default() };
    }
    let precision = same as f64 / pt.len() as f64;
    let recall = same as f64 / gt.len() as f64;
    Prf { em, f1: harmonic(precision, recall), precision, recall }
}

pub fn answer_em_f1(prediction: &str, gold: &str) -> (f64, f64) {
    let s = answer_scores(prediction, gold);
    (s.em, s.f1)
}

pub fn sup_scores<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Prf {
    if pred.is_empty() && gold.is_empty() {
        return Prf { em: 1.0, f1: 1.0, precision: 1.0, recall: 1.0 };
    }
    let tp = pred.intersection(gold).count() as f64;
    let precision = if pred.is_empty() { 0.0 } else { tp / pred.len() as f64 };
    let recall = if gold.is_empty() { 0.0 } else { tp / gold.len() as f64 };
    let em = f64::from(u8::from(pred == gold));
    Prf { em, f1: harmonic(precision, recall), precision, recall }
}

pub fn sup_em_f1<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> (f64, f64) {
    let s = sup_scores(pred, gold);
    (s.em, s.f1)
}

/// Joint EM is the product of the two EMs; joint precision and recall are
/// products too, and joint F1 is their harmonic mean.
pub fn joint_metrics(ans: &Prf, sup: &Prf) -> (f64, f64) {
    let p = ans.precision * sup.precision;
    let r = ans.recall * sup.recall;
    (ans.em * sup.em, harmonic(p, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub em: f64,
    pub f1: f64,
    pub gold: f64,
}

/// Scores a selected paragraph pair against the gold pair. `gold` is 1 when
/// any answer-bearing paragraph was selected.
pub fn retrieval_metrics(selected: &[usize], gold: &[usize], answer_paragraphs: &[usize]) -> RetrievalScore {
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let g: BTreeSet<usize> = gold.iter().copied().collect();
    let s = sup_scores(&sel, &g);
    let hit = answer_paragraphs.iter().any(|a| sel.contains(a));
    RetrievalScore { em: s.em, f1: s.f1, gold: f64::from(u8::from(hit)) }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub ans_em: f64,
    pub ans_f1: f64,
    pub sup_em: f64,
    pub sup_f1: f64,
    pub joint_em: f64,
    pub joint_f1: f64,
    pub retrieval_em: Option<f64>,
    pub retrieval_f1: Option<f64>,
    pub retrieval_gold: Option<f64>,
}

impl MetricReport {
    pub fn rows(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("ans_em", Some(self.ans_em)),
            ("ans_f1", Some(self.ans_f1)),
            ("sup_em", Some(self.sup_em)),
            ("sup_f1", Some(self.sup_f1)),
            ("joint_em", Some(self.joint_em)),
            ("joint_f1", Some(self.joint_f1)),
            ("retrieval_em", self.retrieval_em),
            ("retrieval_f1", self.retrieval_f1),
            ("retrieval_gold", self.retrieval_gold),
        ]
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>8}", "metric", "value")?;
        for (name, v) in self.rows() {
            match v {
                Some(v) => writeln!(f, "{name:<16} {v:>8.4}")?,
                None => writeln!(f, "{name:<16} {:>8}", "-")?,
            }
        }
        write!(f, "{:<16} {:>8}", "examples", self.count)
    }
}

/// Running sums over examples.
#[derive(Debug, Clone, Default)]
pub struct MetricAccumulator {
    n: usize,
    sums: [f64; 6],
    retrieval: Option<(usize, [f64; 3])>,
}

impl MetricAccumulator {
    pub fn add(&mut self, ans: &Prf, sup: &Prf) {
        let (jem, jf1) = joint_metrics(ans, sup);
        let vals = [ans.em, ans.f1, sup.em, sup.f1, jem, jf1];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.n += 1;
    }

    pub fn add_retrieval(&mut self, r: &RetrievalScore) {
        let (n, sums) = self.retrieval.get_or_insert((0, [0.0; 3]));
        *n += 1;
        sums[0] += r.em;
        sums[1] += r.f1;
        sums[2] += r.gold;
    }

    pub fn report(&self) -> MetricReport {
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        let m = |i: usize| mean(self.sums[i], self.n);
        let r = |i: usize| self.retrieval.map(|(n, s)| mean(s[i], n));
        MetricReport {
            count: self.n,
            ans_em: m(0),
            ans_f1: m(1),
            sup_em: m(2),
            sup_f1: m(3),
            joint_em: m(4),
            joint_f1: m(5),
            retrieval_em: r(0),
            retrieval_f1: r(1),
            retrieval_gold: r(2),
        }
    }
}
