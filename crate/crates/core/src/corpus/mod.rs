//! Distractor-format datasets, a synthetic multi-hop generator and the
//! evaluation metrics.

mod metrics;
mod synthetic;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use metrics::{
    answer_em_f1, answer_scores, joint_metrics, normalize_answer, retrieval_metrics, sup_em_f1, sup_scores,
    MetricAccumulator, MetricReport, Prf, RetrievalScore,
};
pub use synthetic::{entity_pool, generate_synthetic, lexical_top2, SyntheticSpec, MIN_ENTITIES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerType {
    Span,
    Yes,
    No,
}

impl AnswerType {
    pub fn of_answer(answer: &str) -> Self {
        match answer.trim().to_lowercase().as_str() {
            "yes" => Self::Yes,
            "no" => Self::No,
            _ => Self::Span,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Self::Span => 0,
            Self::Yes => 1,
            Self::No => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            1 => Self::Yes,
            2 => Self::No,
            _ => Self::Span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub title: String,
    pub sentences: Vec<String>,
}

impl Paragraph {
    pub fn text(&self) -> String {
        self.sentences.join(" ")
    }
}

/// Retriever labels of one candidate paragraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParagraphLabel {
    pub is_relevant: bool,
    pub has_answer: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MhrcExample {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub context: Vec<Paragraph>,
    pub supporting_facts: BTreeSet<(String, usize)>,
    pub answer_type: AnswerType,
}

impl MhrcExample {
    pub fn validate(&self) -> Result<()> {
        let fail = |why: String| Err(Error::Validation(format!("example {}: {why}", self.id)));
        if self.context.is_empty() {
            return fail("empty context".into());
        }
        for (title, idx) in &self.supporting_facts {
            match self.context.iter().find(|p| &p.title == title) {
                None => return fail(format!("supporting fact cites missing title {title:?}")),
                Some(p) if *idx >= p.sentences.len() => {
                    return fail(format!("supporting fact ({title:?}, {idx}) is past the paragraph end"))
                }
                _ => {}
            }
        }
        if self.answer_type == AnswerType::Span {
            if self.answer.trim().is_empty() {
                return fail("empty answer".into());
            }
            let found = self.supporting_facts.iter().any(|(t, i)| {
                self.context.iter().any(|p| &p.title == t && p.sentences[*i].contains(self.answer.as_str()))
            });
            if !found {
                return fail(format!("answer {:?} not found in any supporting sentence", self.answer));
            }
        }
        Ok(())
    }

    pub fn paragraph_index(&self, title: &str) -> Option<usize> {
        self.context.iter().position(|p| p.title == title)
    }

    /// Indices of paragraphs cited by a supporting fact, in context order.
    pub fn gold_paragraphs(&self) -> Vec<usize> {
        (0..self.context.len())
            .filter(|&i| self.supporting_facts.iter().any(|(t, _)| *t == self.context[i].title))
            .collect()
    }

    /// Relevant paragraphs are those with a supporting fact. A span answer
    /// marks the relevant paragraphs whose text contains it; yes/no answers
    /// mark every relevant paragraph.
    pub fn paragraph_labels(&self) -> Vec<ParagraphLabel> {
        let gold = self.gold_paragraphs();
        (0..self.context.len())
            .map(|i| {
                let is_relevant = gold.contains(&i);
                let has_answer = is_relevant
                    && match self.answer_type {
                        AnswerType::Span => self.context[i].sentences.iter().any(|s| s.contains(self.answer.as_str())),
                        _ => true,
                    };
                ParagraphLabel { is_relevant, has_answer }
            })
            .collect()
    }

    /// Paragraphs labelled as holding the answer.
    pub fn answer_paragraphs(&self) -> Vec<usize> {
        self.paragraph_labels().iter().enumerate().filter(|(_, l)| l.has_answer).map(|(i, _)| i).collect()
    }
}

/// One record of the public distractor schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(rename = "_id")]
    pub id: String,
    pub question: String,
    pub answer: String,
    pub supporting_facts: Vec<(String, usize)>,
    pub context: Vec<(String, Vec<String>)>,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<String>,
}

impl From<RawRecord> for MhrcExample {
    fn from(r: RawRecord) -> Self {
        Self {
            answer_type: AnswerType::of_answer(&r.answer),
            id: r.id,
            question: r.question,
            answer: r.answer,
            context: r.context.into_iter().map(|(title, sentences)| Paragraph { title, sentences }).collect(),
            supporting_facts: r.supporting_facts.into_iter().collect(),
        }
    }
}

impl MhrcExample {
    pub fn to_raw(&self, kind: Option<&str>) -> RawRecord {
        RawRecord {
            id: self.id.clone(),
            question: self.question.clone(),
            answer: self.answer.clone(),
            supporting_facts: self.supporting_facts.iter().cloned().collect(),
            context: self.context.iter().map(|p| (p.title.clone(), p.sentences.clone())).collect(),
            kind: kind.map(str::to_string),
            level: None,
        }
    }
}

/// Parses and validates a JSON array in the distractor schema.
pub fn parse_distractor_dataset(text: &str) -> Result<Vec<MhrcExample>> {
    let values: Vec<serde_json::Value> = serde_json::from_str(text)?;
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let raw: RawRecord = serde_json::from_value(v)
                .map_err(|e| Error::Validation(format!("record {i}: schema violation: {e}")))?;
            let ex = MhrcExample::from(raw);
            ex.validate().map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
            Ok(ex)
        })
        .collect()
}

pub fn load_distractor_dataset(path: impl AsRef<Path>) -> Result<Vec<MhrcExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_distractor_dataset(&text)
}

/// Compact JSON array, one record per line.
pub fn to_distractor_json(examples: &[MhrcExample]) -> Result<String> {
    let mut out = String::from("[");
    for (i, ex) in examples.iter().enumerate() {
        let kind = match ex.answer_type {
            AnswerType::Span => "bridge",
            _ => "comparison",
        };
        out.push_str(if i == 0 { "\n" } else { ",\n" });
        out.push_str(&serde_json::to_string(&ex.to_raw(Some(kind)))?);
    }
    out.push_str("\n]\n");
    Ok(out)
}

pub fn save_distractor_dataset(path: impl AsRef<Path>, examples: &[MhrcExample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_distractor_json(examples)?).map_err(|e| Error::file(path, e))
}
