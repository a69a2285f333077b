//! Writes a small synthetic corpus and prints one rendered sample as ASCII.
//!
//! cargo run --example generate_corpus -- /tmp/corpus 200

use std::path::PathBuf;

use convmath::data::{build_corpus, generate_expr, rasterize, CorpusOptions, GrammarConfig, INK};

fn main() -> convmath::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "corpus".into()));
    let n = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);

    let summary = build_corpus(&CorpusOptions::new(n, 7), &out)?;
    println!("train/val/test: {:?}", summary.split_sizes);
    for (bucket, count) in &summary.per_bucket {
        println!("  {bucket}: {count}");
    }
    println!("vocabulary {} tokens, mean length {:.2}", summary.vocab_size, summary.mean_tokens);

    let (tree, tokens) = generate_expr(3, &GrammarConfig::default());
    let image = rasterize(&tree, 10)?;
    println!("\n{}", tokens.join(" "));
    for y in 0..image.height {
        let row: String = (0..image.width).map(|x| if image.get(x, y) == INK { '#' } else { '.' }).collect();
        if row.contains('#') {
            println!("{row}");
        }
    }
    Ok(())
}
