//! Trains each retriever and reader variant over several seeds and prints
//! mean dev scores per variant.
//!
//!     cargo run --release --example ablation -- [n_train] [retriever_epochs] [reader_epochs] [seeds]

use s2g::cli::pipeline::{train, Loaded};
use s2g::cli::RunConfig;
use s2g::corpus::{generate_synthetic, retrieval_metrics, MhrcExample, SyntheticSpec};
use s2g::numerics::ParamStore;
use s2g::reader::Reader;
use s2g::retriever::{top_k, Retriever, RetrieverVariant};
use s2g::textproc::Vocab;
use s2g::Result;

/// Mean EM of the top-2 of each stage and of the final selection.
fn stage_em(model: &Retriever, store: &ParamStore, vocab: &Vocab, dev: &[MhrcExample]) -> Result<[f64; 3]> {
    let mut em = [0.0; 3];
    for ex in dev {
        let s = model.retrieve(store, &ex.question, &ex.context, vocab)?;
        let gold = ex.gold_paragraphs();
        let score = |pair: &[usize]| retrieval_metrics(pair, &gold, &ex.answer_paragraphs()).em;
        em[0] += score(&top_k(&s.initial_logits, 2));
        em[1] += score(&top_k(s.refined_logits.as_deref().unwrap_or(&s.initial_logits), 2));
        let (a, b) = s.selected.expect("selection");
        em[2] += score(&[a, b]);
    }
    Ok(em.map(|v| v / dev.len() as f64))
}

fn main() -> Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_train = args.first().copied().unwrap_or(600);
    let ret_epochs = args.get(1).copied().unwrap_or(3);
    let rd_epochs = args.get(2).copied().unwrap_or(2);
    let seeds = args.get(3).copied().unwrap_or(3) as u64;

    let train_data = generate_synthetic(&SyntheticSpec { seed: 42, n_examples: n_train, ..Default::default() })?;
    let dev = generate_synthetic(&SyntheticSpec { seed: 43, n_examples: 200, ..Default::default() })?;

    for v in [RetrieverVariant::Full, RetrieverVariant::NoRefine, RetrieverVariant::NoRefineNoReformulation] {
        let mut mean = [0.0; 3];
        for s in 0..seeds {
            let mut cfg = RunConfig::default();
            cfg.retriever.variant = v;
            cfg.train.epochs = ret_epochs;
            cfg.train.seed = 42 + s;
            let m: Loaded<Retriever> =
                train(&cfg, &train_data, None, 1, |l| eprintln!("{v:?} seed {}: {l:?}", cfg.train.seed))?;
            let em = stage_em(&m.model, &m.store, &m.vocab, &dev)?;
            eprintln!("{v:?} seed {}: initial {:.3} refined {:.3} final {:.3}", cfg.train.seed, em[0], em[1], em[2]);
            for (a, b) in mean.iter_mut().zip(em) {
                *a += b / seeds as f64;
            }
        }
        println!("retriever {v:?}: EM initial {:.3} refined {:.3} final {:.3}", mean[0], mean[1], mean[2]);
    }

    for (name, st, at) in
        [("full", true, true), ("-sentence transformer", false, true), ("-answer transformer", true, false)]
    {
        let mut joint = 0.0;
        for s in 0..seeds {
            let mut cfg = RunConfig::default();
            cfg.reader.use_sentence_transformer = st;
            cfg.reader.use_answer_transformer = at;
            cfg.train.epochs = rd_epochs;
            cfg.train.seed = 42 + s;
            let mut last = 0.0;
            train::<Reader>(&cfg, &train_data, Some(&dev), 1, |l| {
                eprintln!("{name} seed {}: {l:?}", cfg.train.seed);
                last = l.dev.as_ref().map_or(0.0, |d| d["joint_em"]);
            })?;
            joint += last / seeds as f64;
        }
        println!("reader {name}: joint EM {joint:.3}");
    }
    Ok(())
}
