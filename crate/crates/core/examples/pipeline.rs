//! The whole pipeline in process: generate data, train the retriever and the
//! reader, round-trip both through checkpoint files, predict and evaluate.
//!
//!     cargo run --release --example pipeline -- [n_train] [epochs]

use s2g::cli::{evaluate, predict, train, Checkpoint, Loaded, RunConfig};
use s2g::corpus::{generate_synthetic, SyntheticSpec};
use s2g::reader::Reader;
use s2g::retriever::Retriever;

fn main() -> s2g::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_train = args.first().copied().unwrap_or(500);
    let epochs = args.get(1).copied().unwrap_or(2);

    let train_set = generate_synthetic(&SyntheticSpec { seed: 42, n_examples: n_train, ..Default::default() })?;
    let dev = generate_synthetic(&SyntheticSpec { seed: 43, n_examples: 100, ..Default::default() })?;

    let mut config = RunConfig::default();
    config.train.epochs = epochs;
    let log = |l: &s2g::cli::pipeline::EpochLog| {
        println!("{} epoch {}: loss {:.4} ({:.1}s)", l.task, l.epoch, l.loss, l.seconds)
    };
    let retriever: Loaded<Retriever> = train(&config, &train_set, None, 1, log)?;
    let reader: Loaded<Reader> = train(&config, &train_set, None, 1, log)?;

    let dir = std::env::temp_dir().join(format!("s2g-pipeline-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    retriever.to_checkpoint().save(dir.join("retriever.ckpt"))?;
    reader.to_checkpoint().save(dir.join("reader.ckpt"))?;
    let retriever = Loaded::<Retriever>::from_checkpoint(&Checkpoint::load(dir.join("retriever.ckpt"))?)?;
    let reader = Loaded::<Reader>::from_checkpoint(&Checkpoint::load(dir.join("reader.ckpt"))?)?;
    std::fs::remove_dir_all(&dir)?;

    let (pred, records) = predict(&retriever, &reader, &dev, 1)?;
    let report = evaluate(&pred, &dev, Some(&records))?;
    for (name, value) in report.rows() {
        println!("{name:<16} {}", value.map_or("-".to_string(), |v| format!("{v:.4}")));
    }
    Ok(())
}
