//! Trains the reader on the gold paragraph pairs of a synthetic corpus and
//! reports answer, supporting-fact and joint scores on held-out questions.
//!
//!     cargo run --release --example train_reader -- [n_train] [epochs]

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2g::corpus::{answer_scores, generate_synthetic, sup_scores, MetricAccumulator, MhrcExample, SyntheticSpec};
use s2g::encoder::EncoderConfig;
use s2g::numerics::{ParamStore, Tape};
use s2g::reader::{Reader, ReaderConfig};
use s2g::textproc::Vocab;
use s2g::trainer::{TrainConfig, Trainer};

fn main() -> s2g::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_train = args.first().copied().unwrap_or(400);
    let epochs = args.get(1).copied().unwrap_or(2);

    let train = generate_synthetic(&SyntheticSpec { seed: 1, n_examples: n_train, ..Default::default() })?;
    let dev = generate_synthetic(&SyntheticSpec { seed: 2, n_examples: 100, ..Default::default() })?;
    let vocab = Vocab::build(
        train
            .iter()
            .flat_map(|e| e.context.iter().flat_map(|p| p.sentences.iter()).chain([&e.question]))
            .map(String::as_str),
        1,
    );

    let mut store = ParamStore::new();
    let enc = EncoderConfig { vocab_size: vocab.len(), ..Default::default() };
    let model = Reader::new(&mut store, &enc, &ReaderConfig::default(), &mut ChaCha8Rng::seed_from_u64(42))?;
    let mut trainer = Trainer::new(TrainConfig { epochs, ..Default::default() }, 1)?;
    let loss = |t: &mut Tape, ex: &MhrcExample, _| model.example_loss(t, ex, &ex.gold_paragraphs(), &vocab);
    for epoch in 0..epochs {
        let start = Instant::now();
        let stats = trainer.run_epoch(&mut store, &train, epoch, &loss)?;
        let mut acc = MetricAccumulator::default();
        for ex in &dev {
            let paras: Vec<_> = ex.gold_paragraphs().into_iter().map(|i| &ex.context[i]).collect();
            let pred = model.predict(&store, &ex.question, &paras, &vocab)?;
            acc.add(
                &answer_scores(&pred.answer_text, &ex.answer),
                &sup_scores(&pred.supporting_facts, &ex.supporting_facts),
            );
        }
        let r = acc.report();
        println!(
            "epoch {epoch}: loss {:.4}  ans EM {:.3}  sup EM {:.3}  joint EM {:.3}  ({:.1}s)",
            stats.mean_loss,
            r.ans_em,
            r.sup_em,
            r.joint_em,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
