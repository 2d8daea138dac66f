//! Seeded generator of two-hop questions in the distractor layout.
//!
//! Bridge questions chain a creation fact and a birthplace fact:
//! `E1 was created by E2 .` and `E2 was born in E3 .` answer
//! `Where was the creator of E1 born ?` with `E3`. Comparison questions ask
//! whether two works share a creator. Distractors reuse the question's
//! entities without ever completing the chain.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AnswerType, MhrcExample, Paragraph};
use crate::error::{Error, Result};
use crate::textproc::split_words;

/// Smallest entity pool: the named entities of one example plus as many
/// again for filler objects.
pub const MIN_ENTITIES: usize = 40;

/// Named entities of one example (chain plus distractors).
const EXAMPLE_ENTITIES: usize = 20;

const POOL_SEED: u64 = 0x5eed_e171;
const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_examples: usize,
    pub n_paragraphs: usize,
    pub entity_vocab_size: usize,
    pub fraction_comparison: f64,
    /// Paragraphs of 6 to 10 sentences instead of 1 to 4.
    pub long_paragraphs: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 42,
            n_examples: 100,
            n_paragraphs: 10,
            entity_vocab_size: 300,
            fraction_comparison: 0.1,
            long_paragraphs: false,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entity_vocab_size < MIN_ENTITIES {
            return Err(Error::Validation(format!(
                "entity_vocab_size {} is below the {MIN_ENTITIES} entities an example needs",
                self.entity_vocab_size
            )));
        }
        if !(4..=10).contains(&self.n_paragraphs) {
            return Err(Error::Validation("n_paragraphs must lie in 4..=10".into()));
        }
        if !(0.0..=1.0).contains(&self.fraction_comparison) {
            return Err(Error::Validation("fraction_comparison must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Exact number of comparison questions.
    pub fn n_comparison(&self) -> usize {
        (self.fraction_comparison * self.n_examples as f64).round() as usize
    }
}

/// Capitalized six-letter names. The pool depends on its size only, so
/// corpora drawn with different seeds share their entities.
pub fn entity_pool(size: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(POOL_SEED);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let mut name = String::with_capacity(6);
        for k in 0..3 {
            let c = CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char;
            let v = VOWELS[rng.gen_range(0..VOWELS.len())] as char;
            name.push(if k == 0 { c.to_ascii_uppercase() } else { c });
            name.push(v);
        }
        if seen.insert(name.clone()) {
            out.push(name);
        }
    }
    out
}

const FILLERS: [&str; 4] = ["is known for", "lives near", "visited", "works with"];

struct Builder<'a> {
    rng: ChaCha8Rng,
    pool: &'a [String],
    long: bool,
}

impl Builder<'_> {
    /// `k` distinct entities.
    fn entities(&mut self, k: usize) -> Vec<String> {
        self.pool.choose_multiple(&mut self.rng, k).cloned().collect()
    }

    /// Filler objects are drawn from the whole pool, avoiding `reserved`, so
    /// two paragraphs rarely share one by chance.
    fn filler(&mut self, subject: &str, reserved: &[String]) -> String {
        let rel = FILLERS[self.rng.gen_range(0..FILLERS.len())];
        let obj = loop {
            let o = self.pool.choose(&mut self.rng).expect("non-empty pool");
            if !reserved.contains(o) {
                break o;
            }
        };
        format!("{subject} {rel} {obj} .")
    }

    /// A paragraph holding `key` at a random position among fillers about
    /// `title`. Returns the paragraph and the key sentence index.
    fn paragraph(&mut self, title: &str, key: String, reserved: &[String]) -> (Paragraph, usize) {
        let n = if self.long { self.rng.gen_range(6..=10) } else { self.rng.gen_range(1..=4) };
        let at = self.rng.gen_range(0..n);
        let sentences = (0..n).map(|i| if i == at { key.clone() } else { self.filler(title, reserved) }).collect();
        (Paragraph { title: title.to_string(), sentences }, at)
    }
}

fn created(a: &str, b: &str) -> String {
    format!("{a} was created by {b} .")
}

fn born(a: &str, b: &str) -> String {
    format!("{a} was born in {b} .")
}

fn example(b: &mut Builder, id: String, comparison: bool, n_paragraphs: usize) -> MhrcExample {
    // e[0..3] chain, the rest distractor subjects and objects
    let e = b.entities(EXAMPLE_ENTITIES);
    let fill = e.clone();
    let mut paras: Vec<(Paragraph, Option<usize>)> = Vec::new();
    let (question, answer, answer_type);

    if comparison {
        let (w1, c1, w2) = (&e[0], &e[1], &e[2]);
        let same = b.rng.gen_bool(0.5);
        let c2 = if same { c1.clone() } else { e[3].clone() };
        question = format!("Were {w1} and {w2} created by the same person ?");
        answer = if same { "yes" } else { "no" }.to_string();
        answer_type = if same { AnswerType::Yes } else { AnswerType::No };
        let (p, i) = b.paragraph(w1, created(w1, c1), &fill);
        paras.push((p, Some(i)));
        let (p, i) = b.paragraph(w2, created(w2, &c2), &fill);
        paras.push((p, Some(i)));
        // works by the same creators, and the works in object position
        let keys = [
            created(&e[4], c1),
            created(&e[5], &e[6]),
            born(&e[7], &e[8]),
            format!("{} lives near {w1} .", e[9]),
            format!("{} visited {w2} .", e[10]),
            born(&e[11], &e[12]),
            created(&e[13], &e[14]),
            born(&e[15], &e[16]),
        ];
        let subjects = [&e[4], &e[5], &e[7], &e[9], &e[10], &e[11], &e[13], &e[15]];
        for (s, k) in subjects.iter().zip(keys).take(n_paragraphs - 2) {
            let (p, _) = b.paragraph(s, k, &fill);
            paras.push((p, None));
        }
    } else {
        let (e1, e2, e3) = (&e[0], &e[1], &e[2]);
        question = format!("Where was the creator of {e1} born ?");
        answer = e3.clone();
        answer_type = AnswerType::Span;
        let (p, i) = b.paragraph(e1, created(e1, e2), &fill);
        paras.push((p, Some(i)));
        let (p, i) = b.paragraph(e2, born(e2, e3), &fill);
        paras.push((p, Some(i)));
        let mut keys = vec![
            (e[3].clone(), created(&e[3], &e[4])),
            (e[5].clone(), born(&e[5], &e[6])),
            (e[7].clone(), created(&e[7], e1)),
        ];
        if b.rng.gen_bool(0.5) {
            keys.push((e[8].clone(), format!("{} works with {e2} .", e[8])));
        } else {
            keys.push((e[8].clone(), born(&e[8], &e[9])));
        }
        keys.extend([
            (e[10].clone(), born(&e[10], &e[11])),
            (e[12].clone(), created(&e[12], &e[13])),
            (e[14].clone(), format!("{} visited {e1} .", e[14])),
            (e[16].clone(), born(&e[16], &e[17])),
        ]);
        for (s, k) in keys.into_iter().take(n_paragraphs - 2) {
            let (p, _) = b.paragraph(&s, k, &fill);
            paras.push((p, None));
        }
    }

    paras.shuffle(&mut b.rng);
    let mut supporting_facts = BTreeSet::new();
    for (p, key) in &paras {
        if let Some(i) = key {
            supporting_facts.insert((p.title.clone(), *i));
        }
    }
    MhrcExample {
        id,
        question,
        answer,
        context: paras.into_iter().map(|(p, _)| p).collect(),
        supporting_facts,
        answer_type,
    }
}

/// Deterministic in `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<MhrcExample>> {
    spec.validate()?;
    let pool = entity_pool(spec.entity_vocab_size);
    let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(spec.seed), pool: &pool, long: spec.long_paragraphs };
    let comparisons: BTreeSet<usize> =
        rand::seq::index::sample(&mut b.rng, spec.n_examples, spec.n_comparison()).into_iter().collect();
    Ok((0..spec.n_examples)
        .map(|i| {
            let id = format!("syn{}-{i:05}", spec.seed);
            example(&mut b, id, comparisons.contains(&i), spec.n_paragraphs)
        })
        .collect())
}

/// Question-word overlap baseline: the two paragraphs sharing the most
/// distinct words with the question, lower index first on ties.
pub fn lexical_top2(ex: &MhrcExample) -> [usize; 2] {
    let q: BTreeSet<String> = split_words(&ex.question).into_iter().map(|w| w.text).collect();
    let mut scored: Vec<(usize, usize)> = ex
        .context
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let words: BTreeSet<String> = split_words(&p.text()).into_iter().map(|w| w.text).collect();
            (q.intersection(&words).count(), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    [scored[0].1, scored[1].1]
}
