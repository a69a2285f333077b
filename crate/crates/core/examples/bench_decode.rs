//! Parallel teacher-forced scoring against one-position-at-a-time scoring
//! for several decoder depths.

use convmath::data::Bucket;
use convmath::training::{bench_decode, BenchMode, BenchReport};
use convmath::{ConvMath, ModelConfig};

fn main() -> convmath::Result<()> {
    let d_model = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(128);
    let modes = [BenchMode::ParallelScoring, BenchMode::Stepwise];
    println!("layers\t{}", BenchReport::HEADER);
    for layers in [3, 5, 7, 9] {
        let model = ConvMath::<f32>::new(ModelConfig::small(40, d_model, layers), 7)?;
        let report = bench_decode(&model, 1, 64, Bucket::new(160, 32), &modes, 20, 7)?;
        println!("{layers}\t{}", report.tsv());
    }
    Ok(())
}
