//! Compares backprop gradients of a toy model against central differences.

use convmath::data::Sample;
use convmath::data::{Bitmap, DEFAULT_BUCKETS};
use convmath::training::{gradient_check, Batch};
use convmath::{ConvMath, ModelConfig};

fn main() -> convmath::Result<()> {
    let bucket = DEFAULT_BUCKETS[0];
    let mut image = Bitmap::blank(bucket.width, bucket.height);
    // Grey noise keeps max-pool windows free of ties.
    for y in 0..bucket.height {
        for x in 0..bucket.width {
            image.set(x, y, ((x * 131 + y * 71) * 2654435761 % 251) as u8);
        }
    }
    let samples = [
        Sample { image: image.clone(), token_ids: vec![4, 5, 6, 7], bucket },
        Sample { image, token_ids: vec![7, 6], bucket },
    ];
    let batch = Batch::from_samples(&samples.iter().collect::<Vec<_>>())?;
    let mut model = ConvMath::<f32>::new(ModelConfig::small(9, 16, 2), 1)?;
    // Zero biases put many activations exactly on ReLU and max-pool ties.
    for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with("bias")) {
        for (i, b) in p.value.data_mut().iter_mut().enumerate() {
            *b = if i % 2 == 0 { 0.1 } else { -0.1 } + 0.05 * ((i as f32 + 0.5) * 1.618).sin();
        }
    }
    for per_param in [1, 3, 8] {
        let err = gradient_check(&model, &batch, per_param, 11)?;
        println!("{per_param} coordinates per parameter: relative error {err:.3e}");
    }
    Ok(())
}
