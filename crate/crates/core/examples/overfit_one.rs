//! Fits a single synthetic sample with a tiny model, then decodes it.

use convmath::data::{build_corpus, load_corpus, CorpusOptions, DEFAULT_BUCKETS};
use convmath::tensor::Tape;
use convmath::training::{batch_loss, Batch};
use convmath::{ConvMath, DecodeMode, ModelConfig};

fn main() -> convmath::Result<()> {
    let dir = std::env::temp_dir().join("convmath-overfit");
    let summary = build_corpus(&CorpusOptions::new(10, 7), &dir)?;
    let ds = load_corpus(&summary.manifests[0], &summary.vocab_path, &DEFAULT_BUCKETS)?;
    let sample = &ds.samples[0];
    let batch = Batch::from_samples(&[sample])?;

    let mut model = ConvMath::<f32>::new(ModelConfig::small(ds.vocab.len(), 32, 2), 7)?;
    for step in 0..300 {
        let mut tape = Tape::new();
        let loss = batch_loss(&model, &mut tape, &batch)?;
        if step % 50 == 0 {
            println!("step {step:3}  loss {:.4}", tape.value(loss).item());
        }
        tape.backward_into(loss, model.params_mut())?;
        drop(tape);
        model.params_mut().sgd_step(0.3)?;
    }

    let out = model.greedy_decode(&sample.image.to_tensor(), 100, DecodeMode::Incremental)?;
    println!("target  {}", ds.vocab.decode(&sample.token_ids).join(" "));
    println!("decoded {}", ds.vocab.decode(&out.ids).join(" "));
    println!("exact: {}", out.ids == sample.token_ids);
    Ok(())
}
