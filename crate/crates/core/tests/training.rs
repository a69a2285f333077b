use convmath::checkpoint;
use convmath::config::KeyValues;
use convmath::data::{build_corpus, load_corpus, CorpusOptions, Dataset, Sample, DEFAULT_BUCKETS, PAD_ID};
use convmath::decoder::shift_targets;
use convmath::model::{ConvMath, ModelConfig};
use convmath::tensor::Tape;
use convmath::training::{batch_loss, lr_at, make_batches, train, Batch, TrainConfig, TrainOptions};

fn corpus(n: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let s = build_corpus(&CorpusOptions::new(n, 3), dir.path()).unwrap();
    let ds = load_corpus(&s.manifests[0], &s.vocab_path, &DEFAULT_BUCKETS).unwrap();
    (dir, ds)
}

fn one_bucket_batch(ds: &Dataset, size: usize) -> Vec<&Sample> {
    let bucket = ds.samples[0].bucket;
    ds.samples.iter().filter(|s| s.bucket == bucket).take(size).collect()
}

fn loss_of(model: &ConvMath<f32>, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    let l = batch_loss(model, &mut tape, batch).unwrap();
    f64::from(tape.value(l).item())
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 0.001);
    assert!((lr_at(3, &cfg) - 0.0008).abs() < 1e-15);
    assert!((lr_at(7, &cfg) - 0.001 * 0.8 * 0.8).abs() < 1e-15);
    let flat = TrainConfig { decay: 1.0, ..cfg };
    assert_eq!(lr_at(29, &flat), 0.001);
}

#[test]
fn untrained_loss_is_near_uniform() {
    let (_dir, ds) = corpus(40);
    let model = ConvMath::<f32>::new(ModelConfig::small(ds.vocab.len(), 32, 3), 1).unwrap();
    let batch = Batch::from_samples(&one_bucket_batch(&ds, 8)).unwrap();
    let loss = loss_of(&model, &batch);
    let uniform = (ds.vocab.len() as f64).ln();
    assert!((loss - uniform).abs() < 0.15 * uniform, "{loss} vs {uniform}");
}

#[test]
fn duplicated_batch_has_the_same_loss() {
    let (_dir, ds) = corpus(40);
    let model = ConvMath::<f32>::new(ModelConfig::small(ds.vocab.len(), 16, 2), 2).unwrap();
    let samples = one_bucket_batch(&ds, 4);
    let doubled: Vec<&Sample> = samples.iter().chain(samples.iter()).copied().collect();
    let a = loss_of(&model, &Batch::from_samples(&samples).unwrap());
    let b = loss_of(&model, &Batch::from_samples(&doubled).unwrap());
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn batch_loss_is_length_weighted_mean() {
    let (_dir, ds) = corpus(40);
    let model = ConvMath::<f64>::new(ModelConfig::small(ds.vocab.len(), 16, 2), 3).unwrap();
    let samples = one_bucket_batch(&ds, 4);
    let loss = |s: &[&Sample]| {
        let batch = Batch::from_samples(s).unwrap();
        let mut tape = Tape::new();
        let l = batch_loss(&model, &mut tape, &batch).unwrap();
        (tape.value(l).item(), batch.scored_tokens() as f64)
    };
    let (whole, n) = loss(&samples);
    let weighted: f64 = samples.iter().map(|s| loss(&[*s])).map(|(l, k)| l * k).sum::<f64>() / n;
    assert!((whole - weighted).abs() < 1e-9);
}

#[test]
fn extra_padding_leaves_loss_unchanged() {
    let (_dir, ds) = corpus(40);
    let model = ConvMath::<f64>::new(ModelConfig::small(ds.vocab.len(), 16, 2), 4).unwrap();
    let samples = one_bucket_batch(&ds, 3);
    let batch = Batch::from_samples(&samples).unwrap();
    let (inputs, targets, width) = shift_targets(&batch.sequences());
    let rows = samples.len();
    let loss_with = |extra: usize| {
        let w = width + extra;
        let mut ins = vec![PAD_ID; rows * w];
        let mut outs = vec![PAD_ID; rows * w];
        for r in 0..rows {
            ins[r * w..r * w + width].copy_from_slice(&inputs[r * width..(r + 1) * width]);
            outs[r * w..r * w + width].copy_from_slice(&targets[r * width..(r + 1) * width]);
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch.images.cast());
        let (logits, _) = model.forward(&mut tape, x, &ins).unwrap();
        let flat = tape.reshape(logits, &[rows * w, ds.vocab.len()]).unwrap();
        let l = tape.cross_entropy(flat, &outs, PAD_ID).unwrap();
        tape.value(l).item()
    };
    let base = loss_with(0);
    for extra in [1, 5] {
        assert!((loss_with(extra) - base).abs() < 1e-7);
    }
}

#[test]
fn seeded_training_is_reproducible() {
    let (_dir, ds) = corpus(24);
    let cfg = TrainConfig { lr: 0.05, epochs: 2, batch_size: 5, ..TrainConfig::default() };
    let run = || {
        let mut model = ConvMath::<f32>::new(ModelConfig::small(ds.vocab.len(), 16, 2), 5).unwrap();
        let out = train(&mut model, &ds, None, &cfg, &TrainOptions::default()).unwrap();
        (out.losses, checkpoint::to_bytes(&model, &KeyValues::new()))
    };
    let (la, pa) = run();
    let (lb, pb) = run();
    assert_eq!(la.len(), 2 * make_batches(&ds.samples, 5, 0).unwrap().len());
    assert_eq!(la, lb);
    assert_eq!(pa, pb);
}

#[test]
fn checkpoint_round_trip_preserves_loss_exactly() {
    let (_dir, ds) = corpus(24);
    let mut model = ConvMath::<f32>::new(ModelConfig::small(ds.vocab.len(), 16, 3), 6).unwrap();
    let cfg = TrainConfig { lr: 0.05, epochs: 1, batch_size: 6, ..TrainConfig::default() };
    train(&mut model, &ds, None, &cfg, &TrainOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut meta = KeyValues::new();
    meta.set("note", "x");
    checkpoint::save(&path, &model, &meta).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded.meta.get("note"), Some("x"));
    assert_eq!(loaded.model.config(), model.config());
    let batch = Batch::from_samples(&one_bucket_batch(&ds, 5)).unwrap();
    assert_eq!(loss_of(&model, &batch).to_bits(), loss_of(&loaded.model, &batch).to_bits());
}

#[test]
fn training_writes_logs_and_checkpoints() {
    let (_dir, ds) = corpus(24);
    let out = tempfile::tempdir().unwrap();
    let mut model = ConvMath::<f32>::new(ModelConfig::small(ds.vocab.len(), 16, 2), 7).unwrap();
    let cfg = TrainConfig { lr: 0.05, epochs: 2, batch_size: 8, max_decode_len: 10, ..TrainConfig::default() };
    let opts =
        TrainOptions { out_dir: Some(out.path().to_path_buf()), vocab_hash: ds.vocab.hash(), ..Default::default() };
    let outcome = train(&mut model, &ds, Some(&ds), &cfg, &opts).unwrap();
    assert_eq!(outcome.epochs.len(), 2);
    let log = std::fs::read_to_string(out.path().join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch\tlr\ttrain_loss\tval_exact\tval_bleu\tval_edit\tseconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 7));
    let last = checkpoint::load(&out.path().join("last.ckpt")).unwrap();
    assert_eq!(last.meta.get("train.epochs_done"), Some("2"));
    assert_eq!(last.vocab_hash(), Some(ds.vocab.hash().as_str()));
    assert!(out.path().join("best.ckpt").exists());
}

#[test]
fn diverging_run_reports_the_batch() {
    let (_dir, ds) = corpus(24);
    let mut model = ConvMath::<f32>::new(ModelConfig::small(ds.vocab.len(), 16, 2), 8).unwrap();
    let cfg = TrainConfig { lr: 1e6, epochs: 3, batch_size: 4, ..TrainConfig::default() };
    let err = train(&mut model, &ds, None, &cfg, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, convmath::Error::NonFiniteLoss { .. }), "{err}");
}
