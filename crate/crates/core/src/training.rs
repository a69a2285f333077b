//! Batching, the SGD loop with step decay, evaluation and the decode
//! benchmark.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{thread_count, KeyValues};
use crate::data::{mix_seed, Bucket, Dataset, Sample, PAD_ID, START_ID};
use crate::decode::DecodeMode;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{image_batch, ConvMath};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub decay_every_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Run a finite-difference check on the first batch before training.
    pub grad_check: bool,
    /// Output limit when decoding validation samples.
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            decay: 0.8,
            decay_every_epochs: 3,
            batch_size: 15,
            epochs: 30,
            seed: 7,
            grad_check: false,
            max_decode_len: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("train.lr must be positive, got {}", self.lr));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            problems.push(format!("train.decay must be in (0, 1], got {}", self.decay));
        }
        if self.decay_every_epochs == 0 {
            problems.push("train.decay_every must be at least 1".into());
        }
        if self.batch_size == 0 {
            problems.push("train.batch_size must be at least 1".into());
        }
        if self.max_decode_len == 0 {
            problems.push("train.max_decode_len must be at least 1".into());
        }
    }
}

/// `lr · decay^floor(epoch / decay_every_epochs)` for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.decay.powi((epoch / cfg.decay_every_epochs.max(1)) as i32)
}

/// Bucket-pure batches of sample indices: shuffled within each bucket,
/// chunked, then the batch order shuffled. Each sample appears once.
pub fn make_batches(samples: &[Sample], batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: BTreeMap<Bucket, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.bucket).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut members in groups.into_values() {
        members.shuffle(&mut rng);
        batches.extend(members.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// One bucket's images with padded targets.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 1, H, W]`.
    pub images: Tensor<f32>,
    /// `[B, width]`, padded with the pad id.
    pub targets: Vec<usize>,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub bucket: Bucket,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyBatch)?;
        let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
        let width = samples.iter().map(|s| s.token_ids.len()).max().unwrap_or(0);
        let mut targets = vec![PAD_ID; samples.len() * width];
        for (r, s) in samples.iter().enumerate() {
            targets[r * width..r * width + s.token_ids.len()].copy_from_slice(&s.token_ids);
        }
        Ok(Self {
            images: image_batch(&images)?,
            targets,
            width,
            lengths: samples.iter().map(|s| s.token_ids.len()).collect(),
            bucket: first.bucket,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn sequences(&self) -> Vec<&[usize]> {
        self.lengths.iter().enumerate().map(|(r, &n)| &self.targets[r * self.width..r * self.width + n]).collect()
    }

    /// Scored positions: every target token plus one end token per row.
    pub fn scored_tokens(&self) -> usize {
        self.lengths.iter().map(|n| n + 1).sum()
    }
}

/// Per-token mean cross-entropy of a batch under teacher forcing.
pub fn batch_loss<S: Scalar>(model: &ConvMath<S>, tape: &mut Tape<S>, batch: &Batch) -> Result<Var> {
    let images = tape.constant(batch.images.cast());
    model.loss(tape, images, &batch.sequences())
}

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between backprop gradients and
/// central differences on `per_param` sampled coordinates of every
/// parameter, evaluated in `f64`.
pub fn gradient_check(model: &ConvMath<f32>, batch: &Batch, per_param: usize, seed: u64) -> Result<f64> {
    let mut model: ConvMath<f64> = model.cast();
    model.params_mut().zero_grad();
    let mut tape = Tape::new();
    let loss = batch_loss(&model, &mut tape, batch)?;
    tape.backward_into(loss, model.params_mut())?;
    drop(tape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-4;
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let numel = model.params().by_name(&name).expect("known name").value.numel();
        for _ in 0..per_param.min(numel) {
            let i = rng.random_range(0..numel);
            let analytic = model.params().by_name(&name).unwrap().value.grad().map_or(0.0, |g| g[i]);
            let mut eval = |delta: f64| -> Result<f64> {
                let p = model.params_mut().by_name_mut(&name).unwrap();
                p.value.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let l = batch_loss(&model, &mut tape, batch).map(|l| tape.value(l).item());
                let p = model.params_mut().by_name_mut(&name).unwrap();
                p.value.data_mut()[i] -= delta;
                l
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt() + nn.sqrt();
    Ok(if denom == 0.0 { 0.0 } else { diff.sqrt() / denom })
}

/// Greedy (or beam, when `beam > 1`) predictions for every sample.
pub fn predict(model: &ConvMath<f32>, ds: &Dataset, beam: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    let run = || {
        ds.samples
            .par_iter()
            .map(|s| {
                let image = s.image.to_tensor::<f32>();
                let out = if beam <= 1 {
                    model.greedy_decode(&image, max_len, DecodeMode::Incremental)?
                } else {
                    model.beam_decode(&image, beam, max_len)?
                };
                Ok(out.ids)
            })
            .collect::<Result<Vec<_>>>()
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?
        .install(run)
}

pub fn evaluate(
    model: &ConvMath<f32>,
    ds: &Dataset,
    beam: usize,
    max_len: usize,
) -> Result<(EvalReport, Vec<Vec<usize>>)> {
    let predictions = predict(model, ds, beam, max_len)?;
    let references: Vec<Vec<usize>> = ds.samples.iter().map(|s| s.token_ids.clone()).collect();
    Ok((EvalReport::compute(&predictions, &references)?, predictions))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<EvalReport>,
    pub seconds: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tlr\ttrain_loss\tval_exact\tval_bleu\tval_edit\tseconds";

    pub fn tsv(&self) -> String {
        let (e, b, d) = self.val.map_or((f64::NAN, f64::NAN, f64::NAN), |r| (r.exact_match, r.bleu, r.edit_score));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.4}\t{:.4}\t{:.4}\t{:.2}",
            self.epoch, self.lr, self.train_loss, e, b, d, self.seconds
        )
    }
}

/// Where and how a run persists its progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.tsv`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// First epoch to run; later than 0 when resuming.
    pub start_epoch: usize,
    /// Best validation exact match so far, when resuming.
    pub best_exact: Option<f64>,
    /// Stored in checkpoints and checked on resume.
    pub vocab_hash: String,
    /// Extra entries written into every checkpoint.
    pub meta: KeyValues,
    /// Log each epoch through `log::info!`.
    pub verbose: bool,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    /// Every batch loss in order.
    pub losses: Vec<f64>,
    pub best_epoch: Option<usize>,
}

/// Runs `cfg.epochs` epochs of SGD, evaluating on `val` after each one.
pub fn train(
    model: &mut ConvMath<f32>,
    train_set: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut problems = Vec::new();
    cfg.validate(&mut problems);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if cfg.grad_check {
        let idx = &make_batches(&train_set.samples, cfg.batch_size.min(2), cfg.seed)?[0];
        let batch = Batch::from_samples(&idx.iter().map(|&i| &train_set.samples[i]).collect::<Vec<_>>())?;
        let err = gradient_check(model, &batch, 3, cfg.seed)?;
        log::info!("gradient check relative error {err:.3e}");
        if err > 1e-3 {
            return Err(Error::Invalid(format!("gradient check failed: relative error {err:.3e}")));
        }
    }
    let mut outcome = TrainOutcome::default();
    let mut best = opts.best_exact;
    for epoch in opts.start_epoch..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let batches = make_batches(&train_set.samples, cfg.batch_size, mix_seed(cfg.seed, epoch as u64))?;
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let batch = Batch::from_samples(&idx.iter().map(|&i| &train_set.samples[i]).collect::<Vec<_>>())?;
            let mut tape = Tape::new();
            let loss = batch_loss(model, &mut tape, &batch)?;
            let value = f64::from(tape.value(loss).item());
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { loss: value, epoch, batch: bi });
            }
            tape.backward_into(loss, model.params_mut())?;
            drop(tape);
            model.params_mut().sgd_step(lr)?;
            outcome.losses.push(value);
            loss_sum += value * batch.scored_tokens() as f64;
            tokens += batch.scored_tokens();
        }
        let report = match val {
            Some(v) if !v.is_empty() => Some(evaluate(model, v, 1, cfg.max_decode_len)?.0),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / tokens as f64,
            val: report,
            seconds: started.elapsed().as_secs_f64(),
        };
        if opts.verbose {
            log::info!("{}", record.tsv());
        }
        let improved = match (report, best) {
            (Some(r), Some(b)) => r.exact_match > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = report.map(|r| r.exact_match);
            outcome.best_epoch = Some(epoch);
        }
        if let Some(dir) = &opts.out_dir {
            append_metrics(&dir.join("metrics.tsv"), &record)?;
            let mut meta = opts.meta.clone();
            meta.set("vocab.hash", &opts.vocab_hash);
            meta.set("train.epochs_done", epoch + 1);
            meta.set("train.seed", cfg.seed);
            if let Some(b) = best {
                meta.set("train.best_exact", b);
            }
            checkpoint::save(&dir.join("last.ckpt"), model, &meta)?;
            if improved {
                checkpoint::save(&dir.join("best.ckpt"), model, &meta)?;
            }
        }
        outcome.epochs.push(record);
    }
    Ok(outcome)
}

fn append_metrics(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(EpochRecord::HEADER);
        text.push('\n');
    }
    text.push_str(&record.tsv());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    /// One teacher-forced pass over all positions.
    ParallelScoring,
    /// One cached step per position.
    Stepwise,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub params: usize,
    pub decoder_params: usize,
    pub batch: usize,
    pub len: usize,
    pub reps: usize,
    pub parallel: Option<Duration>,
    pub stepwise: Option<Duration>,
}

impl BenchReport {
    pub const HEADER: &'static str = "params\tdecoder_params\tbatch\tlen\treps\tparallel_ms\tstepwise_ms\tspeedup";

    pub fn speedup(&self) -> Option<f64> {
        Some(self.stepwise?.as_secs_f64() / self.parallel?.as_secs_f64())
    }

    pub fn tsv(&self) -> String {
        let ms = |d: Option<Duration>| d.map_or("-".to_string(), |d| format!("{:.3}", d.as_secs_f64() * 1e3));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.params,
            self.decoder_params,
            self.batch,
            self.len,
            self.reps,
            ms(self.parallel),
            ms(self.stepwise),
            self.speedup().map_or("-".to_string(), |s| format!("{s:.3}"))
        )
    }
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[xs.len() / 2]
}

/// Median decoder scoring time for a fixed random batch of `batch`
/// sequences of `len` positions over `image_width x image_height` inputs.
/// The encoder runs once up front and is not timed.
pub fn bench_decode(
    model: &ConvMath<f32>,
    batch: usize,
    len: usize,
    image: Bucket,
    modes: &[BenchMode],
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if batch == 0 || len == 0 || reps == 0 {
        return Err(Error::Invalid("bench needs a positive batch, length and repetition count".into()));
    }
    let cfg = model.config();
    if len > cfg.decoder.max_target_positions {
        return Err(Error::TooLong { len, limit: cfg.decoder.max_target_positions });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels: Vec<f32> = (0..batch * image.width * image.height).map(|_| rng.random::<f32>()).collect();
    let images = Tensor::new(&[batch, 1, image.height, image.width], pixels)?;
    let features = model.features(&images)?;
    let ids: Vec<usize> = (0..batch * len)
        .map(|i| if i % len == 0 { START_ID } else { rng.random_range(crate::data::UNK_ID + 1..cfg.vocab_size) })
        .collect();
    let run = |mode: BenchMode| -> Result<Duration> {
        let t = Instant::now();
        match mode {
            BenchMode::ParallelScoring => model.score_parallel(&features, &ids)?,
            BenchMode::Stepwise => model.score_stepwise(&features, &ids)?,
        };
        Ok(t.elapsed())
    };
    for &m in modes {
        run(m)?;
    }
    let mut times: BTreeMap<u8, Vec<Duration>> = BTreeMap::new();
    for _ in 0..reps {
        for &m in modes {
            times.entry(m as u8).or_default().push(run(m)?);
        }
    }
    let decoder_params =
        model.params().iter().filter(|p| p.name.starts_with("decoder.")).map(|p| p.value.numel()).sum();
    Ok(BenchReport {
        params: model.num_params(),
        decoder_params,
        batch,
        len,
        reps,
        parallel: times.remove(&(BenchMode::ParallelScoring as u8)).map(median),
        stepwise: times.remove(&(BenchMode::Stepwise as u8)).map(median),
    })
}
