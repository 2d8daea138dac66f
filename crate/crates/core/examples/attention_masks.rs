//! Lays out a reader input for a two-paragraph question and prints its
//! sentence-aware and evidence-guided attention masks.
//!
//!     cargo run --example attention_masks

use s2g::masks::{build_ega_mask, build_sasa_mask, EvidenceSelection};
use s2g::textproc::{assemble_reader_input, Vocab};

fn main() -> s2g::Result<()> {
    let question = "Where was the maker of Bolo born ?";
    let paragraphs = [
        vec!["Bolo was made by Kira .".to_string(), "Bolo is red .".to_string()],
        vec!["Kira was born in Tamu .".to_string()],
    ];
    let texts = paragraphs.iter().flatten().map(String::as_str).chain([question]);
    let vocab = Vocab::build(texts, 1);
    let refs: Vec<&[String]> = paragraphs.iter().map(Vec::as_slice).collect();
    let input = assemble_reader_input(question, &refs, &vocab, 64)?;

    let n = input.seq.len();
    println!("tokens:");
    for (i, &id) in input.seq.ids.iter().enumerate() {
        let sentence = input.map.sigma(i)?.map_or("-".to_string(), |s| s.to_string());
        println!("  {i:>2} {:<8} sentence {sentence}", vocab.token(id).unwrap_or("?"));
    }

    println!("\nsentence-aware mask ('.' visible, '#' hidden):");
    print!("{}", build_sasa_mask(&input.map, n)?);

    // keep the first and last sentence as evidence
    let z = EvidenceSelection::new(vec![true, false, true]);
    println!("\nevidence-guided mask, sentence 1 unselected:");
    print!("{}", build_ega_mask(&input.map, &z, n)?);
    Ok(())
}
