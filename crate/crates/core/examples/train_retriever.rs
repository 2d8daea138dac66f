//! Trains the paragraph retriever on a synthetic corpus and reports
//! retrieval EM and Gold on held-out questions.
//!
//!     cargo run --release --example train_retriever -- [n_train] [epochs]

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2g::corpus::{generate_synthetic, retrieval_metrics, MhrcExample, SyntheticSpec};
use s2g::encoder::EncoderConfig;
use s2g::numerics::{ParamStore, Tape};
use s2g::retriever::{top_k, Retriever, RetrieverConfig};
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
    let model = Retriever::new(&mut store, &enc, &RetrieverConfig::default(), &mut ChaCha8Rng::seed_from_u64(42))?;
    let mut trainer = Trainer::new(TrainConfig { epochs, ..Default::default() }, 1)?;
    let loss = |t: &mut Tape, ex: &MhrcExample, _| {
        let pass = model.forward(t, &ex.question, &ex.context, &vocab)?;
        model.loss(t, &pass, &ex.paragraph_labels())
    };
    for epoch in 0..epochs {
        let start = Instant::now();
        let stats = trainer.run_epoch(&mut store, &train, epoch, &loss)?;
        let (mut em, mut gold) = (0.0, 0.0);
        // top-2 of the earlier stages and the first hop, for comparison
        let (mut init2, mut ref2, mut hop) = (0.0, 0.0, 0.0);
        for ex in &dev {
            let state = model.retrieve(&store, &ex.question, &ex.context, &vocab)?;
            let g = ex.gold_paragraphs();
            let pair = |v: &[f64]| {
                let mut k = top_k(v, 2);
                k.sort();
                k == g
            };
            init2 += f64::from(u8::from(pair(&state.initial_logits)));
            if let Some(r) = &state.refined_logits {
                ref2 += f64::from(u8::from(pair(r)));
            }
            hop += f64::from(u8::from(state.first_hop_index.is_some_and(|h| g.contains(&h))));
            let (a, b) = state.selected.expect("selected pair");
            let r = retrieval_metrics(&[a, b], &ex.gold_paragraphs(), &ex.answer_paragraphs());
            em += r.em;
            gold += r.gold;
        }
        let n = dev.len() as f64;
        println!(
            "epoch {epoch}: loss {:.4}  dev EM {:.3}  Gold {:.3}  initial top-2 {:.2}  refined top-2 {:.2}  first hop {:.2}  ({:.1}s)",
            stats.mean_loss,
            em / n,
            gold / n,
            init2 / n,
            ref2 / n,
            hop / n,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
