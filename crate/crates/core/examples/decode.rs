//! Greedy, incremental and beam decoding of one image with a checkpoint.
//!
//! cargo run --example decode -- run/best.ckpt corpus/vocab.txt corpus/images/000000.pgm

use std::path::Path;

use convmath::checkpoint;
use convmath::data::{bucket_and_pad, detokenize, Bitmap, Vocabulary, DEFAULT_BUCKETS};
use convmath::DecodeMode;

fn main() -> convmath::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() != 3 {
        eprintln!("usage: decode <checkpoint> <vocab.txt> <image.pgm>");
        std::process::exit(1);
    }
    let model = checkpoint::load(Path::new(&args[0]))?.model;
    let vocab = Vocabulary::load(Path::new(&args[1]))?;
    let (image, bucket) = bucket_and_pad(&Bitmap::load(Path::new(&args[2]))?, &DEFAULT_BUCKETS)?;
    println!("bucket {bucket}");
    let x = image.to_tensor::<f32>();

    let greedy = model.greedy_decode(&x, 100, DecodeMode::Incremental)?;
    let again = model.greedy_decode(&x, 100, DecodeMode::Recompute)?;
    assert_eq!(greedy, again);
    println!("greedy  {:.3}  {}", greedy.score, detokenize(&vocab.decode(&greedy.ids)));
    for beam in [2, 4, 8] {
        let out = model.beam_decode(&x, beam, 100)?;
        println!("beam {beam}  {:.3}  {}", out.score, detokenize(&vocab.decode(&out.ids)));
    }
    Ok(())
}
