//! Trains on a generated corpus directory and logs one line per epoch.
//!
//! cargo run --release --example train_desk -- /tmp/corpus 128 3 30

use std::path::PathBuf;

use convmath::data::{load_corpus, DEFAULT_BUCKETS};
use convmath::training::{train, TrainConfig, TrainOptions};
use convmath::{ConvMath, ModelConfig};

fn main() -> convmath::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = PathBuf::from(args.first().map(String::as_str).unwrap_or("corpus"));
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (d_model, layers, epochs) = (arg(1, 128), arg(2, 3), arg(3, 30));

    let vocab = data.join("vocab.txt");
    let train_set = load_corpus(&data.join("train.tsv"), &vocab, &DEFAULT_BUCKETS)?;
    let val = load_corpus(&data.join("val.tsv"), &vocab, &DEFAULT_BUCKETS)?;
    let mut model = ConvMath::<f32>::new(ModelConfig::small(train_set.vocab.len(), d_model, layers), 7)?;
    println!("{} parameters", model.num_params());

    let cfg = TrainConfig { lr: 0.5, decay: 1.0, epochs, ..TrainConfig::default() };
    let opts =
        TrainOptions { out_dir: Some(data.join("run")), vocab_hash: train_set.vocab.hash(), ..Default::default() };
    for record in train(&mut model, &train_set, Some(&val), &cfg, &opts)?.epochs {
        println!("{}", record.tsv());
    }
    Ok(())
}
