use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use convmath::checkpoint::{self, Checkpoint};
use convmath::config::{format_buckets, parse_buckets, KeyValues, RunConfig};
use convmath::data::{
    bucket_and_pad, build_corpus, detokenize, load_corpus, load_corpus_with_vocab, Bitmap, Bucket, CorpusOptions,
    Vocabulary, DEFAULT_BUCKETS, SPLITS,
};
use convmath::metrics::EvalReport;
use convmath::training::{bench_decode, evaluate, train, BenchMode, BenchReport, EpochRecord, TrainOptions};
use convmath::{ConvMath, DecodeMode, Error, ModelConfig};

#[derive(Parser)]
#[command(name = "convmath", version, about = "Convolutional image-to-markup recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of rendered expressions.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus metrics.tsv.
    Train(TrainArgs),
    /// Decode one split and print an evaluation report.
    Eval(EvalArgs),
    /// Decode a single PGM image.
    Infer(InferArgs),
    /// Time parallel scoring against stepwise decoding.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_items: Option<usize>,
    #[arg(long)]
    max_items: Option<usize>,
    #[arg(long)]
    p_fraction: Option<f64>,
    #[arg(long)]
    p_superscript: Option<f64>,
    #[arg(long)]
    p_subscript: Option<f64>,
    /// Glyph height in pixels.
    #[arg(long)]
    glyph_px: Option<usize>,
    /// Comma-separated `WxH` list.
    #[arg(long)]
    buckets: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory; overrides `data` from the config file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    decoder_layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Any config key, e.g. `--set train.decay=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    /// Also write one predicted sequence per line here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 100)]
    max_len: usize,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Parallel,
    Stepwise,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark a trained model; otherwise a freshly initialized one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Vocabulary size of a fresh model.
    #[arg(long, default_value_t = 40)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 64)]
    len: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    mode: ModeArg,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value = "160x32")]
    image_size: String,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn buckets_arg(text: Option<&str>) -> convmath::Result<Vec<Bucket>> {
    match text {
        None => Ok(DEFAULT_BUCKETS.to_vec()),
        Some(t) => parse_buckets(t)
            .filter(|b| !b.is_empty())
            .ok_or_else(|| Error::Config(vec![format!("buckets: cannot parse `{t}`")])),
    }
}

fn gen_data(a: GenDataArgs) -> convmath::Result<()> {
    let mut opts = CorpusOptions::new(a.n, a.seed);
    let g = &mut opts.grammar;
    g.max_depth = a.max_depth.unwrap_or(g.max_depth);
    g.min_items = a.min_items.unwrap_or(g.min_items);
    g.max_items = a.max_items.unwrap_or(g.max_items);
    g.p_fraction = a.p_fraction.unwrap_or(g.p_fraction);
    g.p_superscript = a.p_superscript.unwrap_or(g.p_superscript);
    g.p_subscript = a.p_subscript.unwrap_or(g.p_subscript);
    let mut problems = Vec::new();
    if g.min_items == 0 || g.min_items > g.max_items {
        problems.push(format!("need 1 <= min-items <= max-items, got {} and {}", g.min_items, g.max_items));
    }
    for (name, p) in [("p-fraction", g.p_fraction), ("p-superscript", g.p_superscript), ("p-subscript", g.p_subscript)]
    {
        if !(0.0..=1.0).contains(&p) {
            problems.push(format!("{name} must be in [0, 1], got {p}"));
        }
    }
    if let Some(px) = a.glyph_px {
        opts.glyph_px = px;
    }
    if opts.glyph_px == 0 {
        problems.push("glyph-px must be positive".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    opts.buckets = buckets_arg(a.buckets.as_deref())?;
    let summary = build_corpus(&opts, &a.out)?;
    eprintln!("wrote {} samples to {}", a.n, a.out.display());
    println!("split\tcount");
    for (name, n) in SPLITS.iter().zip(summary.split_sizes) {
        println!("{name}\t{n}");
    }
    println!("bucket\tcount");
    for (b, n) in &summary.per_bucket {
        println!("{b}\t{n}");
    }
    println!("vocab_size\t{}", summary.vocab_size);
    println!("mean_tokens\t{:.3}", summary.mean_tokens);
    println!("discarded\t{}", summary.discarded);
    Ok(())
}

fn train_kv(a: &TrainArgs) -> convmath::Result<KeyValues> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::new(),
    };
    if let Some(d) = &a.data {
        kv.set("data", d.display());
    }
    let flags: [(&str, Option<String>); 6] = [
        ("model.d_model", a.d_model.map(|v| v.to_string())),
        ("decoder.layers", a.decoder_layers.map(|v| v.to_string())),
        ("train.lr", a.lr.map(|v| v.to_string())),
        ("train.epochs", a.epochs.map(|v| v.to_string())),
        ("train.batch_size", a.batch_size.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.set(k, v);
        }
    }
    apply_sets(&mut kv, &a.sets)?;
    Ok(kv)
}

fn apply_sets(kv: &mut KeyValues, sets: &[String]) -> convmath::Result<()> {
    let mut problems = Vec::new();
    for s in sets {
        match s.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => kv.set(k.trim(), v.trim()),
            _ => problems.push(format!("--set expects KEY=VALUE, got `{s}`")),
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems))
    }
}

fn train_cmd(a: TrainArgs) -> convmath::Result<()> {
    let run = RunConfig::from_kv(&train_kv(&a)?)?;
    let data = run.data.clone().ok_or_else(|| Error::Config(vec!["no corpus: pass --data or set `data`".into()]))?;
    let vocab_path = data.join("vocab.txt");
    let train_set = load_corpus(&data.join("train.tsv"), &vocab_path, &run.buckets)?;
    let val = load_corpus_with_vocab(&data.join("val.tsv"), train_set.vocab.clone(), &run.buckets).ok();
    let vocab_hash = train_set.vocab.hash();

    let mut opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        vocab_hash: vocab_hash.clone(),
        verbose: true,
        ..Default::default()
    };
    opts.meta.set("data.buckets", format_buckets(&run.buckets));
    let mut model = match &a.resume {
        Some(path) => {
            let ckpt = checkpoint::load(path)?;
            if ckpt.vocab_hash() != Some(vocab_hash.as_str()) {
                return Err(Error::Checkpoint(format!(
                    "{}: vocabulary hash {} does not match the corpus ({vocab_hash})",
                    path.display(),
                    ckpt.vocab_hash().unwrap_or("missing")
                )));
            }
            opts.start_epoch = ckpt.meta.get("train.epochs_done").and_then(|v| v.parse().ok()).unwrap_or(0);
            opts.best_exact = ckpt.meta.get("train.best_exact").and_then(|v| v.parse().ok());
            eprintln!("resuming from {} after epoch {}", path.display(), opts.start_epoch);
            ckpt.model
        }
        None => ConvMath::new(run.model_config(train_set.vocab.len())?, run.seed)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    train_set.vocab.save(&a.out.join("vocab.txt"))?;
    eprintln!(
        "{} training samples, {} validation, vocabulary {}, {} parameters",
        train_set.len(),
        val.as_ref().map_or(0, |v| v.len()),
        train_set.vocab.len(),
        model.num_params()
    );
    let outcome = train(&mut model, &train_set, val.as_ref(), &run.train, &opts)?;
    println!("{}", EpochRecord::HEADER);
    for r in &outcome.epochs {
        println!("{}", r.tsv());
    }
    Ok(())
}

fn checkpoint_buckets(ckpt: &Checkpoint) -> convmath::Result<Vec<Bucket>> {
    buckets_arg(ckpt.meta.get("data.buckets"))
}

fn check_vocab(ckpt: &Checkpoint, vocab: &Vocabulary, path: &Path) -> convmath::Result<()> {
    match ckpt.vocab_hash() {
        Some(h) if h != vocab.hash() => {
            Err(Error::Checkpoint(format!("{}: vocabulary hash {h} does not match {}", path.display(), vocab.hash())))
        }
        _ => Ok(()),
    }
}

fn eval_cmd(a: EvalArgs) -> convmath::Result<()> {
    if !SPLITS.contains(&a.split.as_str()) {
        return Err(Error::Config(vec![format!("--split must be one of {SPLITS:?}, got `{}`", a.split)]));
    }
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let vocab = Vocabulary::load(&a.data.join("vocab.txt"))?;
    check_vocab(&ckpt, &vocab, &a.checkpoint)?;
    let ds = load_corpus_with_vocab(&a.data.join(format!("{}.tsv", a.split)), vocab, &checkpoint_buckets(&ckpt)?)?;
    let (report, predictions) = evaluate(&ckpt.model, &ds, a.beam, a.max_len)?;
    if let Some(path) = &a.predictions {
        let text: String = predictions.iter().map(|p| detokenize(&ds.vocab.decode(p)) + "\n").collect();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    eprintln!("decoded {} samples from {}", ds.len(), a.split);
    println!("{}", EvalReport::HEADER);
    println!("{report}");
    Ok(())
}

fn infer_cmd(a: InferArgs) -> convmath::Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let vocab_path = a.vocab.clone().unwrap_or_else(|| a.checkpoint.with_file_name("vocab.txt"));
    let vocab = Vocabulary::load(&vocab_path)?;
    check_vocab(&ckpt, &vocab, &a.checkpoint)?;
    let (image, bucket) = bucket_and_pad(&Bitmap::load(&a.image)?, &checkpoint_buckets(&ckpt)?)?;
    log::debug!("padded into bucket {bucket}");
    let tensor = image.to_tensor::<f32>();
    let out = if a.beam <= 1 {
        ckpt.model.greedy_decode(&tensor, a.max_len, DecodeMode::Incremental)?
    } else {
        ckpt.model.beam_decode(&tensor, a.beam, a.max_len)?
    };
    if out.truncated {
        eprintln!("warning: output hit --max-len {} without an end token", a.max_len);
    }
    println!("{}", detokenize(&vocab.decode(&out.ids)));
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> convmath::Result<()> {
    let model = match &a.checkpoint {
        Some(path) => checkpoint::load(path)?.model,
        None => {
            let mut kv = match &a.config {
                Some(p) => KeyValues::load(p)?,
                None => KeyValues::new(),
            };
            apply_sets(&mut kv, &a.sets)?;
            let mut problems = Vec::new();
            let cfg = ModelConfig::from_kv(&kv, a.vocab_size, &mut problems);
            problems.extend(cfg.problems());
            if !problems.is_empty() {
                return Err(Error::Config(problems));
            }
            ConvMath::new(cfg, a.seed)?
        }
    };
    let image = match parse_buckets(&a.image_size).as_deref() {
        Some([b]) => *b,
        _ => return Err(Error::Config(vec![format!("--image-size expects WxH, got `{}`", a.image_size)])),
    };
    let modes = match a.mode {
        ModeArg::Parallel => vec![BenchMode::ParallelScoring],
        ModeArg::Stepwise => vec![BenchMode::Stepwise],
        ModeArg::Both => vec![BenchMode::ParallelScoring, BenchMode::Stepwise],
    };
    let report: BenchReport = bench_decode(&model, a.batch, a.len, image, &modes, a.reps, a.seed)?;
    println!("{}", BenchReport::HEADER);
    println!("{}", report.tsv());
    Ok(())
}
