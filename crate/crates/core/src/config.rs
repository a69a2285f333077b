//! Flat `key = value` configuration shared by the CLI and checkpoints.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Bucket, DEFAULT_BUCKETS};
use crate::decoder::DecoderConfig;
use crate::encoder::{BlockSpec, EncoderConfig, EncoderVariant};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Ordered string map; later assignments win.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues(pub BTreeMap<String, String>);

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Self::new();
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => out.set(k.trim(), v.trim()),
                _ => problems.push(format!("line {}: expected `key = value`, got `{}`", i + 1, raw.trim())),
            }
        }
        if problems.is_empty() {
            Ok(out)
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.insert(key.into(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in &other.0 {
            self.0.insert(k.clone(), v.clone());
        }
    }

    /// Parses `key` if present, recording a problem on failure.
    pub fn read<T: FromStr>(&self, key: &str, problems: &mut Vec<String>) -> Option<T> {
        let raw = self.get(key)?;
        match raw.parse() {
            Ok(v) => Some(v),
            Err(_) => {
                problems.push(format!("{key}: cannot parse `{raw}`"));
                None
            }
        }
    }
}

impl fmt::Display for KeyValues {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.0 {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// `64,128/2,128` style block plans; `/2` marks a strided block.
pub fn format_plan(plan: &[BlockSpec]) -> String {
    plan.iter()
        .map(|s| if s.downsample { format!("{}/2", s.channels) } else { s.channels.to_string() })
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_plan(text: &str) -> Option<Vec<BlockSpec>> {
    text.split(',')
        .map(|part| {
            let part = part.trim();
            match part.strip_suffix("/2") {
                Some(c) => c.trim().parse().ok().map(|c| BlockSpec::new(c, true)),
                None => part.parse().ok().map(|c| BlockSpec::new(c, false)),
            }
        })
        .collect()
}

pub fn format_buckets(buckets: &[Bucket]) -> String {
    buckets.iter().map(Bucket::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_buckets(text: &str) -> Option<Vec<Bucket>> {
    text.split(',')
        .map(|part| {
            let (w, h) = part.trim().split_once('x')?;
            Some(Bucket::new(w.trim().parse().ok()?, h.trim().parse().ok()?))
        })
        .collect()
}

impl ModelConfig {
    pub fn to_kv(&self, kv: &mut KeyValues) {
        kv.set("model.vocab_size", self.vocab_size);
        kv.set("model.d_model", self.decoder.channels);
        kv.set("model.max_source_positions", self.max_source_positions);
        kv.set(
            "encoder.variant",
            match self.encoder.variant {
                EncoderVariant::Residual => "residual",
                EncoderVariant::Simple => "simple",
            },
        );
        kv.set("encoder.stem_channels", self.encoder.stem_channels);
        kv.set("encoder.blocks", format_plan(&self.encoder.block_plan));
        kv.set("decoder.layers", self.decoder.depth);
        kv.set("decoder.kernel_width", self.decoder.kernel_width);
        kv.set("decoder.max_target_positions", self.decoder.max_target_positions);
    }

    /// Reads a model configuration; absent keys take defaults derived from
    /// `model.d_model` (the default plan scaled to that width).
    pub fn from_kv(kv: &KeyValues, vocab_size: usize, problems: &mut Vec<String>) -> Self {
        let d: usize = kv.read("model.d_model", problems).unwrap_or(512);
        let variant = match kv.get("encoder.variant").unwrap_or("residual") {
            "residual" => EncoderVariant::Residual,
            "simple" => EncoderVariant::Simple,
            other => {
                problems.push(format!("encoder.variant: expected `residual` or `simple`, got `{other}`"));
                EncoderVariant::Residual
            }
        };
        let mut encoder = match variant {
            EncoderVariant::Residual => EncoderConfig::scaled(d.max(1)),
            EncoderVariant::Simple => EncoderConfig::simple(d),
        };
        if let Some(plan) = kv.get("encoder.blocks").filter(|p| !p.trim().is_empty()) {
            match parse_plan(plan) {
                Some(p) => encoder.block_plan = p,
                None => problems.push(format!("encoder.blocks: cannot parse `{plan}`")),
            }
            if variant == EncoderVariant::Residual {
                encoder.stem_channels = encoder.block_plan.first().map_or(1, |b| b.channels);
            }
        }
        if let Some(s) = kv.read("encoder.stem_channels", problems) {
            encoder.stem_channels = s;
        }
        let defaults = DecoderConfig::default();
        let decoder = DecoderConfig {
            depth: kv.read("decoder.layers", problems).unwrap_or(defaults.depth),
            kernel_width: kv.read("decoder.kernel_width", problems).unwrap_or(defaults.kernel_width),
            channels: d,
            max_target_positions: kv
                .read("decoder.max_target_positions", problems)
                .unwrap_or(defaults.max_target_positions),
        };
        Self {
            vocab_size: kv.read("model.vocab_size", problems).unwrap_or(vocab_size),
            max_source_positions: kv.read("model.max_source_positions", problems).unwrap_or(1024),
            encoder,
            decoder,
        }
    }
}

/// Everything one CLI run needs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub model: KeyValues,
    pub train: TrainConfig,
    pub buckets: Vec<Bucket>,
    pub data: Option<PathBuf>,
}

impl RunConfig {
    /// Validates every key at once; unknown keys are rejected too.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "seed",
            "data",
            "data.buckets",
            "model.d_model",
            "model.max_source_positions",
            "encoder.variant",
            "encoder.stem_channels",
            "encoder.blocks",
            "decoder.layers",
            "decoder.kernel_width",
            "decoder.max_target_positions",
            "train.lr",
            "train.decay",
            "train.decay_every",
            "train.batch_size",
            "train.epochs",
            "train.grad_check",
            "train.max_decode_len",
        ];
        let mut problems = Vec::new();
        for key in kv.0.keys() {
            if !KNOWN.contains(&key.as_str()) {
                problems.push(format!("unknown key `{key}`"));
            }
        }
        let seed = kv.read("seed", &mut problems).unwrap_or(7);
        let d = TrainConfig::default();
        let train = TrainConfig {
            lr: kv.read("train.lr", &mut problems).unwrap_or(d.lr),
            decay: kv.read("train.decay", &mut problems).unwrap_or(d.decay),
            decay_every_epochs: kv.read("train.decay_every", &mut problems).unwrap_or(d.decay_every_epochs),
            batch_size: kv.read("train.batch_size", &mut problems).unwrap_or(d.batch_size),
            epochs: kv.read("train.epochs", &mut problems).unwrap_or(d.epochs),
            seed,
            grad_check: kv.read("train.grad_check", &mut problems).unwrap_or(d.grad_check),
            max_decode_len: kv.read("train.max_decode_len", &mut problems).unwrap_or(d.max_decode_len),
        };
        train.validate(&mut problems);
        let buckets = match kv.get("data.buckets") {
            Some(text) => parse_buckets(text).unwrap_or_else(|| {
                problems.push(format!("data.buckets: cannot parse `{text}`"));
                DEFAULT_BUCKETS.to_vec()
            }),
            None => DEFAULT_BUCKETS.to_vec(),
        };
        if buckets.is_empty() {
            problems.push("data.buckets is empty".into());
        }
        // The vocabulary comes from the data later; a placeholder size lets
        // every other model check run now.
        let model = ModelConfig::from_kv(kv, crate::data::RESERVED.len() + 1, &mut problems);
        problems.extend(model.problems());
        let (fh, fw) = model.encoder.downsample();
        for b in &buckets {
            if b.height % fh != 0 || b.width % fw != 0 {
                problems.push(format!("bucket {b} is not a multiple of the encoder downsampling {fw}x{fh}"));
            } else if (b.height / fh) * (b.width / fw) > model.max_source_positions {
                problems.push(format!(
                    "bucket {b} yields {} feature vectors, more than model.max_source_positions = {}",
                    (b.height / fh) * (b.width / fw),
                    model.max_source_positions
                ));
            }
        }
        if train.max_decode_len > model.decoder.max_target_positions {
            problems.push(format!(
                "train.max_decode_len {} exceeds decoder.max_target_positions {}",
                train.max_decode_len, model.decoder.max_target_positions
            ));
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let mut model_kv = KeyValues::new();
        for (k, v) in &kv.0 {
            if k.starts_with("model.") || k.starts_with("encoder.") || k.starts_with("decoder.") {
                model_kv.set(k.clone(), v);
            }
        }
        Ok(Self { seed, model: model_kv, train, buckets, data: kv.get("data").map(PathBuf::from) })
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let mut problems = Vec::new();
        let cfg = ModelConfig::from_kv(&self.model, vocab_size, &mut problems);
        if problems.is_empty() {
            cfg.validate().map(|_| cfg)
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Worker threads from `CONVMATH_THREADS`, default 1.
pub fn thread_count() -> usize {
    std::env::var("CONVMATH_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}
