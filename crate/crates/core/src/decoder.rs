//! Causal convolutional decoder with GLU gating and dot-product attention
//! in every layer.
//!
//! All tape-level functions work on batched, time-major values: hidden
//! states are `[B, N, D]`, features `[B, S, D]`.

use rand::Rng;

use crate::data::{END_ID, PAD_ID, START_ID};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub kernel_width: usize,
    pub channels: usize,
    pub max_target_positions: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { depth: 7, kernel_width: 3, channels: 512, max_target_positions: 512 }
    }
}

impl DecoderConfig {
    pub fn validate(&self, problems: &mut Vec<String>) {
        if self.depth == 0 {
            problems.push("decoder depth must be at least 1".into());
        }
        if self.kernel_width == 0 {
            problems.push("decoder kernel width must be at least 1".into());
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            problems.push(format!("decoder channels {} must be positive and even", self.channels));
        }
        if self.max_target_positions < 2 {
            problems.push("max_target_positions must be at least 2".into());
        }
    }
}

/// Parameter handles of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub attn_weight: ParamId,
    pub attn_bias: ParamId,
}

/// Tape values of one decoder layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    /// `[2D, D, k]`.
    pub conv_weight: Var,
    pub conv_bias: Var,
    /// `W_d`, `[D, D]`.
    pub attn_weight: Var,
    pub attn_bias: Var,
}

impl BlockParams {
    pub fn vars<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>) -> BlockVars {
        BlockVars {
            conv_weight: tape.param(store, self.conv_weight),
            conv_bias: tape.param(store, self.conv_bias),
            attn_weight: tape.param(store, self.attn_weight),
            attn_bias: tape.param(store, self.attn_bias),
        }
    }
}

/// Values produced by one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct BlockState {
    /// Layer output `[B, N, D]`.
    pub h: Var,
    /// Attention weights `[B, N, S]`.
    pub attn_weights: Var,
    /// Content vectors `[B, N, D]`.
    pub content: Var,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    pub(crate) token_table: ParamId,
    pub(crate) pos_table: ParamId,
    pub(crate) blocks: Vec<BlockParams>,
    pub(crate) out_weight: ParamId,
    pub(crate) out_bias: ParamId,
}

impl Decoder {
    /// Registers the decoder's parameters under `decoder.*`.
    pub fn new<S: Scalar, R: Rng>(
        config: &DecoderConfig,
        vocab_size: usize,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, k) = (config.channels, config.kernel_width);
        let token_table = store.insert_normal("decoder.embed.tokens", &[vocab_size, d], 0.1, rng)?;
        let pos_table = store.insert_normal("decoder.embed.positions", &[config.max_target_positions, d], 0.1, rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 1..=config.depth {
            let name = format!("decoder.block{l}");
            blocks.push(BlockParams {
                conv_weight: store.insert_uniform(format!("{name}.conv.weight"), &[2 * d, d, k], d * k, rng)?,
                conv_bias: store.insert_zeros(format!("{name}.conv.bias"), &[2 * d])?,
                attn_weight: store.insert_uniform(format!("{name}.attn.weight"), &[d, d], d, rng)?,
                attn_bias: store.insert_zeros(format!("{name}.attn.bias"), &[d])?,
            });
        }
        let out_weight = store.insert_uniform("decoder.out.weight", &[vocab_size, d], d, rng)?;
        let out_bias = store.insert_zeros("decoder.out.bias", &[vocab_size])?;
        Ok(Self { config: config.clone(), token_table, pos_table, blocks, out_weight, out_bias })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_bias
    }

    /// `g = token_table[ids] + pos_table[offset..]` for `ids` laid out as
    /// `[batch, n]`.
    pub fn embed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &[usize],
        batch: usize,
        offset: usize,
    ) -> Result<Var> {
        let tokens = tape.param(store, self.token_table);
        let positions = tape.param(store, self.pos_table);
        embed_targets(tape, tokens, positions, ids, batch, offset)
    }

    /// Runs every layer over teacher-forced inputs and returns the logits
    /// `[B, N, K]` with the per-layer states.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        ids: &[usize],
        batch: usize,
        features: Var,
    ) -> Result<(Var, Vec<BlockState>)> {
        let g = self.embed(tape, store, ids, batch, 0)?;
        let mut h = g;
        let mut states = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let vars = block.vars(tape, store);
            let state = decoder_block(tape, h, g, features, &vars)?;
            h = state.h;
            states.push(state);
        }
        let logits = self.logits(tape, store, h)?;
        Ok((logits, states))
    }

    pub fn logits<S: Scalar>(&self, tape: &mut Tape<S>, store: &ParamStore<S>, h: Var) -> Result<Var> {
        let w = tape.param(store, self.out_weight);
        let b = tape.param(store, self.out_bias);
        logits(tape, h, w, b)
    }
}

/// Token plus position embedding of `ids` (`[batch, n]`, row-major).
pub fn embed_targets<S: Scalar>(
    tape: &mut Tape<S>,
    token_table: Var,
    pos_table: Var,
    ids: &[usize],
    batch: usize,
    offset: usize,
) -> Result<Var> {
    if batch == 0 || !ids.len().is_multiple_of(batch) {
        return Err(Error::shape("embed_targets", format!("{} ids for batch {batch}", ids.len())));
    }
    let w = tape.embedding(token_table, ids, &[batch, ids.len() / batch])?;
    tape.add_positions_from(w, pos_table, offset)
}

/// Dot-product attention of decoder states over feature vectors.
///
/// `d = r·W_dᵀ + b_d + g`, `a = softmax(d·Vᵀ)`, `c = a·V`. Returns `(c, a)`.
pub fn attention<S: Scalar>(
    tape: &mut Tape<S>,
    r: Var,
    g: Var,
    features: Var,
    w_d: Var,
    b_d: Var,
) -> Result<(Var, Var)> {
    if tape.shape(features).len() < 2 || tape.shape(features)[tape.shape(features).len() - 2] == 0 {
        return Err(Error::shape("attention", "feature sequence is empty"));
    }
    let summary = tape.linear(r, w_d, Some(b_d))?;
    let d = tape.add(summary, g)?;
    let scores = tape.bmm(d, features, true)?;
    let axis = tape.shape(scores).len() - 1;
    let weights = tape.softmax(scores, axis)?;
    let content = tape.bmm(weights, features, false)?;
    Ok((content, weights))
}

/// One layer: `r = GLU(causal_conv(h_prev)) + h_prev`, then `h = r + c` with
/// `c` the attention content for `r`.
pub fn decoder_block<S: Scalar>(
    tape: &mut Tape<S>,
    h_prev: Var,
    g: Var,
    features: Var,
    p: &BlockVars,
) -> Result<BlockState> {
    let m = tape.causal_conv1d(h_prev, p.conv_weight, p.conv_bias)?;
    let axis = tape.shape(m).len() - 1;
    let u = tape.glu(m, axis)?;
    let r = tape.add(u, h_prev)?;
    let (content, attn_weights) = attention(tape, r, g, features, p.attn_weight, p.attn_bias)?;
    let h = tape.add(r, content)?;
    Ok(BlockState { h, attn_weights, content })
}

/// Pre-softmax scores `h·W_oᵀ + b_o`.
pub fn logits<S: Scalar>(tape: &mut Tape<S>, h: Var, w_o: Var, b_o: Var) -> Result<Var> {
    tape.linear(h, w_o, Some(b_o))
}

/// Teacher-forcing inputs and targets for a batch of token sequences:
/// inputs are `<s> y_1 .. y_n`, targets `y_1 .. y_n </s>`, both padded to
/// the longest sequence. Returns `(inputs, targets, width)`.
pub fn shift_targets(sequences: &[&[usize]]) -> (Vec<usize>, Vec<usize>, usize) {
    let width = sequences.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
    let mut inputs = vec![PAD_ID; sequences.len() * width];
    let mut targets = vec![PAD_ID; sequences.len() * width];
    for (row, seq) in sequences.iter().enumerate() {
        let base = row * width;
        inputs[base] = START_ID;
        inputs[base + 1..base + 1 + seq.len()].copy_from_slice(seq);
        targets[base..base + seq.len()].copy_from_slice(seq);
        targets[base + seq.len()] = END_ID;
    }
    (inputs, targets, width)
}
