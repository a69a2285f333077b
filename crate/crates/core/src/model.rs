//! The full image-to-sequence model: encoder, source positions, decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Bitmap, PAD_ID, START_ID};
use crate::decoder::{shift_targets, BlockState, Decoder, DecoderConfig};
use crate::encoder::{add_source_positions, Encoder, EncoderConfig, FeatureSequence};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_source_positions: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// `D = 512`, seven decoder layers, six residual blocks.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            max_source_positions: 1024,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }

    /// Narrow model for CPU experiments: the default block plan scaled to
    /// `d_model` channels.
    pub fn small(vocab_size: usize, d_model: usize, depth: usize) -> Self {
        Self {
            vocab_size,
            max_source_positions: 512,
            encoder: EncoderConfig::scaled(d_model),
            decoder: DecoderConfig { depth, kernel_width: 3, channels: d_model, max_target_positions: 128 },
        }
    }

    pub fn d_model(&self) -> usize {
        self.decoder.channels
    }

    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.vocab_size <= crate::data::UNK_ID {
            problems.push(format!("vocabulary of {} tokens has no room beyond the reserved ids", self.vocab_size));
        }
        if self.max_source_positions == 0 {
            problems.push("max_source_positions must be positive".into());
        }
        self.decoder.validate(&mut problems);
        self.encoder.validate(self.decoder.channels, &mut problems);
        problems
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

/// Model parameters plus the handles needed to run them.
#[derive(Clone, Debug)]
pub struct ConvMath<S: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<S>,
    encoder: Encoder,
    decoder: Decoder,
    source_positions: ParamId,
}

impl<S: Scalar> ConvMath<S> {
    /// Freshly initialized model; the same seed gives the same parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut store, &mut rng)?;
        let source_positions = store.insert_normal(
            "encoder.positions",
            &[config.max_source_positions, config.d_model()],
            0.1,
            &mut rng,
        )?;
        let decoder = Decoder::new(&config.decoder, config.vocab_size, &mut store, &mut rng)?;
        Ok(Self { config, store, encoder, decoder, source_positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> ConvMath<T> {
        ConvMath {
            config: self.config.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            source_positions: self.source_positions,
        }
    }

    /// Encoded features with source positions added.
    pub fn encode(&self, tape: &mut Tape<S>, images: Var) -> Result<FeatureSequence> {
        let features = self.encoder.encode(tape, &self.store, images)?;
        let table = tape.param(&self.store, self.source_positions);
        add_source_positions(tape, features, table)
    }

    /// Teacher-forced logits `[B, N, K]` for input ids laid out `[B, N]`.
    pub fn forward(&self, tape: &mut Tape<S>, images: Var, ids: &[usize]) -> Result<(Var, Vec<BlockState>)> {
        let batch = tape.shape(images)[0];
        let features = self.encode(tape, images)?;
        self.decoder.forward(tape, &self.store, ids, batch, features.vectors)
    }

    /// Per-token mean cross-entropy for a batch of images `[B, 1, H, W]` and
    /// their unshifted target sequences.
    pub fn loss(&self, tape: &mut Tape<S>, images: Var, targets: &[&[usize]]) -> Result<Var> {
        if targets.len() != tape.shape(images)[0] {
            return Err(Error::shape("loss", format!("{} targets for images {:?}", targets.len(), tape.shape(images))));
        }
        let (inputs, outputs, _) = shift_targets(targets);
        let (logits, _) = self.forward(tape, images, &inputs)?;
        let k = self.config.vocab_size;
        let flat = tape.reshape(logits, &[outputs.len(), k])?;
        tape.cross_entropy(flat, &outputs, PAD_ID)
    }

    /// Feature vectors `[B, S, D]` (positions included) for images given as
    /// `[1, H, W]` or `[B, 1, H, W]`.
    pub fn features(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let images = as_batch(images)?;
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let f = self.encode(&mut tape, x)?;
        Ok(tape.value(f.vectors).clone())
    }

    /// Teacher-forced logits `[N, K]` for one image; `ids` must start with
    /// the start token.
    pub fn forward_teacher_forced(&self, image: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
        if ids.first() != Some(&START_ID) {
            return Err(Error::Invalid("teacher-forced input must begin with the start token".into()));
        }
        let image = as_batch(image)?;
        if image.shape()[0] != 1 {
            return Err(Error::shape("forward_teacher_forced", "expects a single image"));
        }
        let mut tape = Tape::new();
        let x = tape.constant(image);
        let (logits, _) = self.forward(&mut tape, x, ids)?;
        tape.value(logits).reshape(&[ids.len(), self.config.vocab_size])
    }
}

fn as_batch<S: Scalar>(images: &Tensor<S>) -> Result<Tensor<S>> {
    match images.shape() {
        [1, h, w] => images.reshape(&[1, 1, *h, *w]),
        [_, 1, _, _] => Ok(images.clone()),
        other => Err(Error::shape("encode", format!("images {other:?} are not [1,H,W] or [B,1,H,W]"))),
    }
}

/// Stacks equally sized bitmaps into a `[B, 1, H, W]` model input.
pub fn image_batch<S: Scalar>(images: &[&Bitmap]) -> Result<Tensor<S>> {
    let first = images.first().ok_or(Error::EmptyBatch)?;
    let (w, h) = (first.width, first.height);
    if let Some(bad) = images.iter().find(|b| (b.width, b.height) != (w, h)) {
        return Err(Error::shape("image_batch", format!("{}x{} image in a {w}x{h} batch", bad.width, bad.height)));
    }
    let mut data = Vec::with_capacity(images.len() * w * h);
    for b in images {
        data.extend_from_slice(b.to_tensor::<S>().data());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}
