//! Prints per-layer attention over the feature grid for one teacher-forced
//! position of an untrained model.

use convmath::data::{bucket_and_pad, generate_expr, rasterize, GrammarConfig, DEFAULT_BUCKETS, START_ID};
use convmath::tensor::Tape;
use convmath::{ConvMath, ModelConfig};

fn main() -> convmath::Result<()> {
    let (tree, _) = generate_expr(5, &GrammarConfig::default());
    let (image, bucket) = bucket_and_pad(&rasterize(&tree, 14)?, &DEFAULT_BUCKETS)?;
    let model = ConvMath::<f32>::new(ModelConfig::small(30, 32, 3), 1)?;
    let (gh, gw) = model.config().encoder.grid(bucket.height, bucket.width)?;

    let mut tape = Tape::new();
    let x = tape.constant(image.to_tensor::<f32>().reshape(&[1, 1, bucket.height, bucket.width])?);
    let ids = [START_ID, 4, 5];
    let (_, states) = model.forward(&mut tape, x, &ids)?;
    for (l, state) in states.iter().enumerate() {
        let a = tape.value(state.attn_weights).data();
        let last = &a[(ids.len() - 1) * gh * gw..ids.len() * gh * gw];
        println!("layer {}", l + 1);
        for row in last.chunks(gw) {
            println!("  {}", row.iter().map(|v| format!("{:.3}", v)).collect::<Vec<_>>().join(" "));
        }
    }
    Ok(())
}
