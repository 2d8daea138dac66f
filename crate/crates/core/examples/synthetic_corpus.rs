//! Generates a synthetic distractor corpus, prints one record and shows how
//! often plain word overlap finds the two gold paragraphs.
//!
//!     cargo run --example synthetic_corpus -- [n_examples] [seed]

use s2g::corpus::{generate_synthetic, lexical_top2, to_distractor_json, AnswerType, SyntheticSpec};

fn main() -> s2g::Result<()> {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let spec = SyntheticSpec {
        n_examples: args.first().copied().unwrap_or(500) as usize,
        seed: args.get(1).copied().unwrap_or(42),
        ..Default::default()
    };
    let data = generate_synthetic(&spec)?;

    println!("{}", to_distractor_json(&data[..1])?);

    let comparison = data.iter().filter(|e| e.answer_type != AnswerType::Span).count();
    let lexical = data
        .iter()
        .filter(|e| {
            let mut pair = lexical_top2(e).to_vec();
            pair.sort();
            pair == e.gold_paragraphs()
        })
        .count();
    println!("{} examples, {comparison} yes/no comparisons", data.len());
    println!("word-overlap top-2 equals the gold pair on {lexical} of {}", data.len());
    Ok(())
}
