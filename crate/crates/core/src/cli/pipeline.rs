//! Training, prediction and evaluation over whole datasets.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, Task};
use super::config::RunConfig;
use crate::corpus::{
    answer_scores, retrieval_metrics, sup_scores, MetricAccumulator, MetricReport, MhrcExample, Paragraph,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tape, Var};
use crate::reader::Reader;
use crate::retriever::Retriever;
use crate::textproc::Vocab;
use crate::trainer::Trainer;

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

/// Every word of the questions and sentences.
pub fn build_vocab(examples: &[MhrcExample]) -> Vocab {
    let texts = examples
        .iter()
        .flat_map(|e| std::iter::once(&e.question).chain(e.context.iter().flat_map(|p| p.sentences.iter())));
    Vocab::build(texts.map(String::as_str), 1)
}

/// A model component with its parameters and vocabulary.
pub trait Component: Sized + Sync {
    const TASK: Task;

    fn build(store: &mut ParamStore, enc: &EncoderConfig, config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self>;

    fn example_loss(&self, t: &mut Tape, ex: &MhrcExample, vocab: &Vocab) -> Result<Var>;

    /// Named dev scores, reported after every epoch.
    fn dev_metrics(
        &self,
        store: &ParamStore,
        vocab: &Vocab,
        dev: &[MhrcExample],
        pool: &rayon::ThreadPool,
    ) -> Result<BTreeMap<String, f64>>;
}

impl Component for Retriever {
    const TASK: Task = Task::Retriever;

    fn build(store: &mut ParamStore, enc: &EncoderConfig, config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Retriever::new(store, enc, &config.retriever, rng)
    }

    fn example_loss(&self, t: &mut Tape, ex: &MhrcExample, vocab: &Vocab) -> Result<Var> {
        let pass = self.forward(t, &ex.question, &ex.context, vocab)?;
        self.loss(t, &pass, &ex.paragraph_labels())
    }

    fn dev_metrics(
        &self,
        store: &ParamStore,
        vocab: &Vocab,
        dev: &[MhrcExample],
        pool: &rayon::ThreadPool,
    ) -> Result<BTreeMap<String, f64>> {
        let pairs =
            pool.install(|| dev.par_iter().map(|ex| select_pair(self, store, vocab, ex)).collect::<Result<Vec<_>>>())?;
        let mut acc = MetricAccumulator::default();
        for (ex, (pair, _)) in dev.iter().zip(&pairs) {
            acc.add_retrieval(&retrieval_metrics(pair, &ex.gold_paragraphs(), &ex.answer_paragraphs()));
        }
        let r = acc.report();
        Ok(BTreeMap::from([
            ("retrieval_em".to_string(), r.retrieval_em.unwrap_or(0.0)),
            ("retrieval_f1".to_string(), r.retrieval_f1.unwrap_or(0.0)),
            ("retrieval_gold".to_string(), r.retrieval_gold.unwrap_or(0.0)),
        ]))
    }
}

impl Component for Reader {
    const TASK: Task = Task::Reader;

    fn build(store: &mut ParamStore, enc: &EncoderConfig, config: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Reader::new(store, enc, &config.reader, rng)
    }

    /// The reader learns from the gold paragraph pair.
    fn example_loss(&self, t: &mut Tape, ex: &MhrcExample, vocab: &Vocab) -> Result<Var> {
        Reader::example_loss(self, t, ex, &ex.gold_paragraphs(), vocab)
    }

    fn dev_metrics(
        &self,
        store: &ParamStore,
        vocab: &Vocab,
        dev: &[MhrcExample],
        pool: &rayon::ThreadPool,
    ) -> Result<BTreeMap<String, f64>> {
        let preds = pool.install(|| {
            dev.par_iter()
                .map(|ex| {
                    let paras: Vec<&Paragraph> = ex.gold_paragraphs().into_iter().map(|i| &ex.context[i]).collect();
                    self.predict(store, &ex.question, &paras, vocab)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut acc = MetricAccumulator::default();
        for (ex, p) in dev.iter().zip(&preds) {
            acc.add(&answer_scores(&p.answer_text, &ex.answer), &sup_scores(&p.supporting_facts, &ex.supporting_facts));
        }
        let r = acc.report();
        Ok(r.rows().into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))).collect())
    }
}

pub struct Loaded<M> {
    pub model: M,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub config: RunConfig,
}

impl<M: Component> Loaded<M> {
    /// Fresh parameters drawn from the training seed.
    pub fn init(config: &RunConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let enc = EncoderConfig { vocab_size: vocab.len(), ..config.encoder.clone() };
        let mut config = config.clone();
        config.encoder.vocab_size = enc.vocab_size;
        let mut store = ParamStore::new();
        let model = M::build(&mut store, &enc, &config, &mut ChaCha8Rng::seed_from_u64(config.train.seed))?;
        Ok(Self { model, store, vocab, config })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(M::TASK, &self.config, self.vocab.tokens().to_vec(), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.task != M::TASK {
            return Err(Error::Checkpoint(format!(
                "expected a {} checkpoint, found a {} checkpoint",
                M::TASK,
                ckpt.task
            )));
        }
        let vocab = Vocab::from_text(&ckpt.vocab.join("\n"))?;
        if vocab.len() != ckpt.config.encoder.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary of {} words does not match configured vocab_size {}",
                vocab.len(),
                ckpt.config.encoder.vocab_size
            )));
        }
        let mut loaded = Self::init(&ckpt.config, vocab)?;
        ckpt.restore_into(&mut loaded.store)?;
        Ok(loaded)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: Task,
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    pub dev: Option<BTreeMap<String, f64>>,
    pub seconds: f64,
}

/// Trains a component from scratch for `config.train.epochs` epochs.
pub fn train<M: Component>(
    config: &RunConfig,
    train: &[MhrcExample],
    dev: Option<&[MhrcExample]>,
    threads: usize,
    mut log: impl FnMut(&EpochLog),
) -> Result<Loaded<M>> {
    let mut loaded = Loaded::<M>::init(config, build_vocab(train))?;
    let mut trainer = Trainer::new(config.train.clone(), threads)?;
    let pool = thread_pool(threads)?;
    let Loaded { model, store, vocab, .. } = &mut loaded;
    let loss = |t: &mut Tape, ex: &MhrcExample, _seed: u64| model.example_loss(t, ex, vocab);
    for epoch in 0..config.train.epochs {
        let start = Instant::now();
        let stats = trainer.run_epoch(store, train, epoch, &loss)?;
        let dev = dev.map(|d| model.dev_metrics(store, vocab, d, &pool)).transpose()?;
        log(&EpochLog {
            task: M::TASK,
            epoch,
            loss: stats.mean_loss,
            steps: stats.steps,
            dev,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(loaded)
}

/// The selected pair in document order, with the retriever's state when it
/// ran. Questions with fewer than two paragraphs keep all of them.
pub fn select_pair(
    retriever: &Retriever,
    store: &ParamStore,
    vocab: &Vocab,
    ex: &MhrcExample,
) -> Result<(Vec<usize>, Option<crate::retriever::RetrievalState>)> {
    if ex.context.len() < 2 {
        return Ok(((0..ex.context.len()).collect(), None));
    }
    let state = retriever.retrieve(store, &ex.question, &ex.context, vocab)?;
    let (a, b) = state.selected.ok_or_else(|| Error::InvalidInput("retriever selected nothing".into()))?;
    Ok((vec![a.min(b), a.max(b)], Some(state)))
}

/// The prediction document: answers and supporting facts keyed by id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub answer: BTreeMap<String, String>,
    pub sp: BTreeMap<String, Vec<(String, usize)>>,
}

impl PredictionFile {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// Paragraphs the retriever handed to the reader for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalRecord {
    pub id: String,
    pub selected: Vec<usize>,
    pub titles: Vec<String>,
    pub initial_logits: Vec<f64>,
    pub refined_logits: Option<Vec<f64>>,
    pub cascade_indices: Vec<usize>,
    pub cascaded_logits: Option<Vec<f64>>,
}

pub fn parse_retrieval_records(text: &str) -> Result<Vec<RetrievalRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Validation(format!("retrieval record {i}: {e}"))))
        .collect()
}

/// Retrieval of the top pair followed by the reader, for every question.
/// Output does not depend on the thread count.
pub fn predict(
    retriever: &Loaded<Retriever>,
    reader: &Loaded<Reader>,
    data: &[MhrcExample],
    threads: usize,
) -> Result<(PredictionFile, Vec<RetrievalRecord>)> {
    let pool = thread_pool(threads)?;
    let one = |ex: &MhrcExample| -> Result<(crate::reader::Prediction, RetrievalRecord)> {
        let (pair, state) = select_pair(&retriever.model, &retriever.store, &retriever.vocab, ex)?;
        let paras: Vec<&Paragraph> = pair.iter().map(|&i| &ex.context[i]).collect();
        let pred = reader.model.predict(&reader.store, &ex.question, &paras, &reader.vocab)?;
        let record = RetrievalRecord {
            id: ex.id.clone(),
            titles: paras.iter().map(|p| p.title.clone()).collect(),
            selected: pair,
            initial_logits: state.as_ref().map(|s| s.initial_logits.clone()).unwrap_or_default(),
            refined_logits: state.as_ref().and_then(|s| s.refined_logits.clone()),
            cascade_indices: state.as_ref().map(|s| s.cascade_indices.clone()).unwrap_or_default(),
            cascaded_logits: state.and_then(|s| s.cascaded_logits),
        };
        Ok((pred, record))
    };
    let results = pool.install(|| data.par_iter().map(one).collect::<Result<Vec<_>>>())?;
    let mut file = PredictionFile::default();
    let mut records = Vec::with_capacity(results.len());
    for (ex, (pred, rec)) in data.iter().zip(results) {
        if file.answer.insert(ex.id.clone(), pred.answer_text).is_some() {
            return Err(Error::Validation(format!("duplicate id `{}` in dataset", ex.id)));
        }
        file.sp.insert(ex.id.clone(), pred.supporting_facts.into_iter().collect());
        records.push(rec);
    }
    Ok((file, records))
}

fn id_mismatch<'a>(gold: &BTreeSet<&'a str>, keys: impl Iterator<Item = &'a String>, what: &str) -> Option<String> {
    let have: BTreeSet<&str> = keys.map(String::as_str).collect();
    let missing: Vec<&str> = gold.difference(&have).copied().collect();
    let extra: Vec<&str> = have.difference(gold).copied().collect();
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("{what} is missing ids {}", missing.join(", ")));
    }
    if !extra.is_empty() {
        parts.push(format!("{what} has ids absent from gold: {}", extra.join(", ")));
    }
    (!parts.is_empty()).then(|| parts.join("; "))
}

/// Scores a prediction document against gold data. Retrieval metrics are
/// filled in only when retrieval records are given.
pub fn evaluate(
    pred: &PredictionFile,
    gold: &[MhrcExample],
    retrieval: Option<&[RetrievalRecord]>,
) -> Result<MetricReport> {
    let ids: BTreeSet<&str> = gold.iter().map(|e| e.id.as_str()).collect();
    if ids.len() != gold.len() {
        return Err(Error::Validation("gold data has duplicate ids".into()));
    }
    let mut problems: Vec<String> =
        [id_mismatch(&ids, pred.answer.keys(), "answer map"), id_mismatch(&ids, pred.sp.keys(), "sp map")]
            .into_iter()
            .flatten()
            .collect();
    let by_id: Option<BTreeMap<&str, &RetrievalRecord>> =
        retrieval.map(|r| r.iter().map(|x| (x.id.as_str(), x)).collect());
    if let (Some(r), Some(m)) = (retrieval, &by_id) {
        if m.len() != r.len() {
            problems.push("retrieval records repeat an id".into());
        }
        problems.extend(id_mismatch(&ids, r.iter().map(|x| &x.id), "retrieval records"));
    }
    if !problems.is_empty() {
        return Err(Error::Validation(format!("id mismatch: {}", problems.join("; "))));
    }

    let mut acc = MetricAccumulator::default();
    for ex in gold {
        let ans = answer_scores(&pred.answer[&ex.id], &ex.answer);
        let sp: BTreeSet<(String, usize)> = pred.sp[&ex.id].iter().cloned().collect();
        acc.add(&ans, &sup_scores(&sp, &ex.supporting_facts));
        if let Some(m) = &by_id {
            let rec = m[ex.id.as_str()];
            acc.add_retrieval(&retrieval_metrics(&rec.selected, &ex.gold_paragraphs(), &ex.answer_paragraphs()));
        }
    }
    Ok(acc.report())
}
