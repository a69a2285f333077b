//! Residual CNN image encoder and the plain VGG-style baseline.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

/// One residual block: output channels and whether its first conv has
/// stride 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub downsample: bool,
}

impl BlockSpec {
    pub const fn new(channels: usize, downsample: bool) -> Self {
        Self { channels, downsample }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    Residual,
    /// Six plain convs with four max-pools; widths `[s, 2s, 4s, 4s, 8s, 8s]`
    /// for `s = stem_channels`.
    Simple,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub block_plan: Vec<BlockSpec>,
    pub variant: EncoderVariant,
}

const fn b(c: usize, d: bool) -> BlockSpec {
    BlockSpec::new(c, d)
}

/// The six-block plan ending at 512 channels, total downsample 8.
pub const DEFAULT_PLAN: [BlockSpec; 6] =
    [b(64, false), b(128, true), b(128, false), b(256, true), b(256, false), b(512, false)];

pub const FOUR_BLOCK_PLAN: [BlockSpec; 4] = [b(64, false), b(128, true), b(128, false), b(256, true)];

pub const EIGHT_BLOCK_PLAN: [BlockSpec; 8] = [
    b(64, false),
    b(128, true),
    b(128, false),
    b(256, true),
    b(256, false),
    b(512, false),
    b(1024, false),
    b(1024, false),
];

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { stem_channels: 64, block_plan: DEFAULT_PLAN.to_vec(), variant: EncoderVariant::Residual }
    }
}

impl EncoderConfig {
    /// The default plan with every width divided by `512 / d_model`; stem
    /// width follows the first block.
    pub fn scaled(d_model: usize) -> Self {
        let plan: Vec<BlockSpec> =
            DEFAULT_PLAN.iter().map(|s| BlockSpec::new(s.channels * d_model / 512, s.downsample)).collect();
        Self { stem_channels: plan[0].channels.max(1), block_plan: plan, variant: EncoderVariant::Residual }
    }

    pub fn four_blocks() -> Self {
        Self { block_plan: FOUR_BLOCK_PLAN.to_vec(), ..Self::default() }
    }

    pub fn eight_blocks() -> Self {
        Self { block_plan: EIGHT_BLOCK_PLAN.to_vec(), ..Self::default() }
    }

    /// Baseline encoder whose output width `8 * stem` equals `d_model`.
    pub fn simple(d_model: usize) -> Self {
        Self { stem_channels: d_model / 8, block_plan: Vec::new(), variant: EncoderVariant::Simple }
    }

    pub fn out_channels(&self) -> usize {
        match self.variant {
            EncoderVariant::Residual => self.block_plan.last().map_or(self.stem_channels, |s| s.channels),
            EncoderVariant::Simple => 8 * self.stem_channels,
        }
    }

    /// Per-axis `(height, width)` reduction from image to feature grid.
    pub fn downsample(&self) -> (usize, usize) {
        match self.variant {
            EncoderVariant::Residual => {
                let f = 2 << self.block_plan.iter().filter(|s| s.downsample).count();
                (f, f)
            }
            EncoderVariant::Simple => (8, 8),
        }
    }

    /// Feature grid `(height, width)` for an `height x width` image, or an
    /// error naming the required multiple.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let (fh, fw) = self.downsample();
        if !height.is_multiple_of(fh) || !width.is_multiple_of(fw) || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "image {width}x{height} is not a multiple of the encoder downsampling ({fw}x{fh})"
            )));
        }
        Ok((height / fh, width / fw))
    }

    pub fn validate(&self, d_model: usize, problems: &mut Vec<String>) {
        if self.stem_channels == 0 {
            problems.push("encoder stem_channels must be positive".into());
        }
        if self.variant == EncoderVariant::Residual {
            if self.block_plan.is_empty() {
                problems.push("encoder block plan is empty".into());
            }
            if self.block_plan.iter().any(|s| s.channels == 0) {
                problems.push("encoder block with zero channels".into());
            }
        }
        if self.out_channels() != d_model {
            problems.push(format!(
                "encoder output channels {} differ from decoder channels {d_model}",
                self.out_channels()
            ));
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

impl Conv {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert_uniform(format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, rng)?;
        let b = store.insert_zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Self { w, b })
    }

    fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        x: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, stride, padding)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
    stride: usize,
}

#[derive(Clone, Debug)]
enum Body {
    Residual { stem: [Conv; 2], blocks: Vec<ResidualBlock> },
    Simple { convs: [Conv; 6] },
}

/// Parameter handles of an encoder registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    body: Body,
}

/// Row-major flattening of the final feature map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureSequence {
    /// `[B, grid_height * grid_width, D]`.
    pub vectors: Var,
    pub grid_width: usize,
    pub grid_height: usize,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.grid_width * self.grid_height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Encoder {
    /// Registers the encoder's parameters under `encoder.*`.
    pub fn new<S: Scalar, R: Rng>(config: &EncoderConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        let s = config.stem_channels;
        let body = match config.variant {
            EncoderVariant::Residual => {
                let stem = [
                    Conv::new(store, "encoder.stem.conv1", 1, s, 3, rng)?,
                    Conv::new(store, "encoder.stem.conv2", s, s, 3, rng)?,
                ];
                let mut blocks = Vec::with_capacity(config.block_plan.len());
                let mut c_in = s;
                for (i, spec) in config.block_plan.iter().enumerate() {
                    let name = format!("encoder.block{}", i + 1);
                    let stride = if spec.downsample { 2 } else { 1 };
                    let conv1 = Conv::new(store, &format!("{name}.conv1"), c_in, spec.channels, 3, rng)?;
                    let conv2 = Conv::new(store, &format!("{name}.conv2"), spec.channels, spec.channels, 3, rng)?;
                    let shortcut = (c_in != spec.channels || stride != 1)
                        .then(|| Conv::new(store, &format!("{name}.shortcut"), c_in, spec.channels, 1, rng))
                        .transpose()?;
                    blocks.push(ResidualBlock { conv1, conv2, shortcut, stride });
                    c_in = spec.channels;
                }
                Body::Residual { stem, blocks }
            }
            EncoderVariant::Simple => {
                let widths = [1, s, 2 * s, 4 * s, 4 * s, 8 * s, 8 * s];
                let mut convs = Vec::with_capacity(6);
                for i in 0..6 {
                    convs.push(Conv::new(store, &format!("encoder.conv{}", i + 1), widths[i], widths[i + 1], 3, rng)?);
                }
                Body::Simple { convs: convs.try_into().expect("six convs") }
            }
        };
        Ok(Self { config: config.clone(), body })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Maps images `[B, 1, H, W]` to features `[B, H'W', D]`.
    pub fn encode<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, images: Var) -> Result<FeatureSequence> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::shape("encode", format!("images {shape:?} are not [B, 1, H, W]")));
        }
        let (grid_height, grid_width) = self.config.grid(shape[2], shape[3])?;
        let map = match &self.body {
            Body::Residual { stem, blocks } => {
                let mut x = stem[0].apply(tape, store, images, 1, 1)?;
                x = tape.relu(x);
                x = stem[1].apply(tape, store, x, 1, 1)?;
                x = tape.relu(x);
                x = tape.maxpool2d(x, 2, 2)?;
                for block in blocks {
                    let mut f = block.conv1.apply(tape, store, x, block.stride, 1)?;
                    f = tape.relu(f);
                    f = block.conv2.apply(tape, store, f, 1, 1)?;
                    let skip = match &block.shortcut {
                        Some(p) => p.apply(tape, store, x, block.stride, 0)?,
                        None => x,
                    };
                    let sum = tape.add(f, skip)?;
                    x = tape.relu(sum);
                }
                x
            }
            Body::Simple { convs } => {
                let mut x = images;
                for (i, conv) in convs.iter().enumerate() {
                    x = conv.apply(tape, store, x, 1, 1)?;
                    x = tape.relu(x);
                    x = match i {
                        0 | 1 => tape.maxpool2d(x, 2, 2)?,
                        3 => tape.maxpool2d(x, 1, 2)?,
                        4 => tape.maxpool2d(x, 2, 1)?,
                        _ => x,
                    };
                }
                x
            }
        };
        let d = tape.shape(map)[1];
        let flat = tape.reshape(map, &[shape[0], d, grid_height * grid_width])?;
        let vectors = tape.transpose(flat)?;
        Ok(FeatureSequence { vectors, grid_width, grid_height })
    }
}

/// Adds learned position rows to every feature vector.
pub fn add_source_positions<S: Scalar>(
    tape: &mut Tape<S>,
    features: FeatureSequence,
    table: Var,
) -> Result<FeatureSequence> {
    let limit = tape.shape(table)[0];
    if features.len() > limit {
        return Err(Error::Invalid(format!(
            "{} feature vectors need at least {} source positions, table has {limit}",
            features.len(),
            features.len()
        )));
    }
    let vectors = tape.add_positions(features.vectors, table)?;
    Ok(FeatureSequence { vectors, ..features })
}
