//! Synthetic corpus generation and manifest-based loading.
//!
//! On disk a corpus is a directory holding `images/*.pgm`, three manifests
//! (`train.tsv`, `val.tsv`, `test.tsv`; each line `path<TAB>tok tok ...`) and
//! `vocab.txt` (one token per line, the line number being the id).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::bitmap::Bitmap;
use super::bucket::{bucket_and_pad, select_bucket, Bucket};
use super::expr::{generate_expr, GrammarConfig};
use super::raster::rasterize;
use super::tokenize::detokenize;
use super::vocab::Vocabulary;
use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// One padded image with its target ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Bitmap,
    pub token_ids: Vec<usize>,
    pub bucket: Bucket,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub vocab: Vocabulary,
    /// Manifest tokens replaced by the unknown id.
    pub unk_count: usize,
    /// Samples dropped because no bucket could hold them.
    pub discarded: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            vocab: self.vocab.clone(),
            unk_count: 0,
            discarded: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusOptions {
    pub n: usize,
    pub seed: u64,
    pub grammar: GrammarConfig,
    pub glyph_px: usize,
    pub buckets: Vec<Bucket>,
}

impl CorpusOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            grammar: GrammarConfig::default(),
            glyph_px: super::raster::DEFAULT_GLYPH_PX,
            buckets: super::bucket::DEFAULT_BUCKETS.to_vec(),
        }
    }
}

/// What [`build_corpus`] wrote.
#[derive(Clone, Debug)]
pub struct CorpusSummary {
    pub manifests: [PathBuf; 3],
    pub vocab_path: PathBuf,
    pub split_sizes: [usize; 3],
    pub per_bucket: BTreeMap<Bucket, usize>,
    pub vocab_size: usize,
    pub mean_tokens: f64,
    /// Generated candidates skipped for not fitting any bucket.
    pub discarded: usize,
}

/// Decorrelates per-sample streams derived from one corpus seed.
pub(crate) fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Generated {
    image: Bitmap,
    tokens: Vec<String>,
    bucket: Bucket,
}

fn candidate(opts: &CorpusOptions, index: u64) -> Result<Option<Generated>> {
    let (tree, tokens) = generate_expr(mix_seed(opts.seed, index), &opts.grammar);
    let image = rasterize(&tree, opts.glyph_px)?;
    Ok(select_bucket(&opts.buckets, image.width, image.height).map(|bucket| Generated { image, tokens, bucket }))
}

/// Generates `opts.n` samples into `out`. The same options always produce
/// byte-identical files.
pub fn build_corpus(opts: &CorpusOptions, out: &Path) -> Result<CorpusSummary> {
    if opts.n == 0 {
        return Err(Error::Invalid("empty dataset requested".into()));
    }
    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut accepted: Vec<Generated> = Vec::with_capacity(opts.n);
    let mut next = 0u64;
    let mut discarded = 0usize;
    const CHUNK: u64 = 256;
    while accepted.len() < opts.n {
        let chunk: Vec<Result<Option<Generated>>> =
            (next..next + CHUNK).into_par_iter().map(|i| candidate(opts, i)).collect();
        next += CHUNK;
        for c in chunk {
            match c? {
                Some(g) if accepted.len() < opts.n => accepted.push(g),
                Some(_) => {}
                None => discarded += 1,
            }
        }
        if next > 64 * opts.n as u64 + 4096 && accepted.len() < opts.n {
            return Err(Error::Invalid(format!(
                "only {} of {} generated samples fit the buckets",
                accepted.len(),
                opts.n
            )));
        }
    }

    accepted.par_iter().enumerate().try_for_each(|(i, g)| g.image.save(&images_dir.join(format!("{i:06}.pgm"))))?;

    let mut order: Vec<usize> = (0..opts.n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(opts.seed, u64::MAX)));
    let n_train = opts.n * 8 / 10;
    let n_val = opts.n / 10;
    let mut splits =
        [order[..n_train].to_vec(), order[n_train..n_train + n_val].to_vec(), order[n_train + n_val..].to_vec()];
    splits.iter_mut().for_each(|s| s.sort_unstable());

    let manifests = SPLITS.map(|name| out.join(format!("{name}.tsv")));
    for (split, path) in splits.iter().zip(&manifests) {
        let mut text = String::new();
        for &i in split {
            text.push_str(&format!("images/{i:06}.pgm\t{}\n", detokenize(&accepted[i].tokens)));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }

    let vocab = Vocabulary::from_tokens(accepted.iter().flat_map(|g| g.tokens.iter()));
    let vocab_path = out.join("vocab.txt");
    vocab.save(&vocab_path)?;

    let mut per_bucket = BTreeMap::new();
    for g in &accepted {
        *per_bucket.entry(g.bucket).or_insert(0) += 1;
    }
    let mean_tokens = accepted.iter().map(|g| g.tokens.len()).sum::<usize>() as f64 / opts.n as f64;
    Ok(CorpusSummary {
        manifests,
        vocab_path,
        split_sizes: [splits[0].len(), splits[1].len(), splits[2].len()],
        per_bucket,
        vocab_size: vocab.len(),
        mean_tokens,
        discarded,
    })
}

/// Reads a manifest and vocabulary, padding every image into its bucket.
/// Image paths are relative to the manifest's directory.
pub fn load_corpus(manifest: &Path, vocab_path: &Path, buckets: &[Bucket]) -> Result<Dataset> {
    let vocab = Vocabulary::load(vocab_path)?;
    load_corpus_with_vocab(manifest, vocab, buckets)
}

pub fn load_corpus_with_vocab(manifest: &Path, vocab: Vocabulary, buckets: &[Bucket]) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let root = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    let mut unk_count = 0;
    let mut discarded = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, tokens) = line.split_once('\t').ok_or_else(|| {
            Error::Invalid(format!("{}:{}: expected `path<TAB>tokens`", manifest.display(), lineno + 1))
        })?;
        let tokens: Vec<&str> = tokens.split_whitespace().collect();
        let image = Bitmap::load(&root.join(path))?;
        let (token_ids, unk) = vocab.encode(&tokens);
        unk_count += unk;
        match bucket_and_pad(&image, buckets) {
            Ok((image, bucket)) => samples.push(Sample { image, token_ids, bucket }),
            Err(Error::TooLarge { .. }) => {
                log::warn!(
                    "{}:{}: {}x{} image fits no bucket; discarded",
                    manifest.display(),
                    lineno + 1,
                    image.width,
                    image.height
                );
                discarded += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if unk_count > 0 {
        log::info!("{}: {unk_count} tokens mapped to <unk>", manifest.display());
    }
    Ok(Dataset { samples, vocab, unk_count, discarded })
}
