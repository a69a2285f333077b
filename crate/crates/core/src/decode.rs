//! Autoregressive inference: cached incremental steps, greedy search and
//! length-normalized beam search.
//!
//! The incremental step runs the same kernels as the parallel teacher-forced
//! pass on the newest position of cached layer inputs, so both produce
//! bit-identical scores for every position.

use std::sync::Arc;

use crate::data::{END_ID, PAD_ID, START_ID};
use crate::decoder::{attention, shift_targets};
use crate::error::{Error, Result};
use crate::model::ConvMath;
use crate::tensor::{causal_weight_rows, gemm, Mat, Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Reuse cached per-layer inputs and compute one position per step.
    Incremental,
    /// Re-run the full teacher-forced pass on the prefix at every step.
    Recompute,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Output tokens without start or end markers.
    pub ids: Vec<usize>,
    /// Hit `max_len` before emitting the end token.
    pub truncated: bool,
    /// Mean log-probability per scored token (the end token included).
    pub score: f64,
}

/// Cached decoder inputs for a batch of sequences decoded in lockstep.
#[derive(Clone, Debug)]
pub struct StepState<S: Scalar> {
    features: Tensor<S>,
    /// `history[layer][row]`: that layer's inputs so far, `len * D` values.
    history: Vec<Vec<Vec<S>>>,
    /// Per-layer convolution kernels laid out as `[2D, k*D]`.
    conv_rows: Arc<Vec<Vec<S>>>,
    len: usize,
}

impl<S: Scalar> StepState<S> {
    pub fn rows(&self) -> usize {
        self.features.shape()[0]
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Keeps rows `parents[i]` as new row `i`.
    pub fn select(&self, parents: &[usize]) -> Result<Self> {
        let shape = self.features.shape();
        let row = shape[1] * shape[2];
        let src = self.features.data();
        let mut data = Vec::with_capacity(parents.len() * row);
        for &p in parents {
            data.extend_from_slice(&src[p * row..(p + 1) * row]);
        }
        Ok(Self {
            features: Tensor::new(&[parents.len(), shape[1], shape[2]], data)?,
            history: self.history.iter().map(|rows| parents.iter().map(|&p| rows[p].clone()).collect()).collect(),
            conv_rows: Arc::clone(&self.conv_rows),
            len: self.len,
        })
    }
}

impl<S: Scalar> ConvMath<S> {
    /// Decoding state over precomputed features `[B, S, D]`.
    pub fn start_state(&self, features: Tensor<S>) -> StepState<S> {
        let rows = features.shape()[0];
        let cfg = &self.config().decoder;
        let (d, k) = (cfg.channels, cfg.kernel_width);
        let conv_rows = self
            .decoder()
            .blocks()
            .iter()
            .map(|b| causal_weight_rows(self.params().value(b.conv_weight).data(), 2 * d, d, k))
            .collect();
        StepState {
            features,
            history: vec![vec![Vec::new(); rows]; self.decoder().blocks().len()],
            conv_rows: Arc::new(conv_rows),
            len: 0,
        }
    }

    /// Feeds one token per row at the next position and returns the logits
    /// `[B, K]` for the position after it.
    pub fn step(&self, state: &mut StepState<S>, tokens: &[usize]) -> Result<Tensor<S>> {
        let rows = state.rows();
        if tokens.len() != rows {
            return Err(Error::shape("step", format!("{} tokens for {rows} rows", tokens.len())));
        }
        let t = state.len;
        let cfg = self.config().decoder.clone();
        let (d, k) = (cfg.channels, cfg.kernel_width);
        let store = self.params();
        let mut tape = Tape::new();
        let g = self.decoder().embed(&mut tape, store, tokens, rows, t)?;
        let v = tape.constant(state.features.clone());
        let mut h = g;
        for (l, block) in self.decoder().blocks().iter().enumerate() {
            // Only the newest position is needed: one im2col row per sequence.
            let hv = tape.value(h).data();
            let mut col = vec![S::zero(); rows * k * d];
            for (r, hist) in state.history[l].iter_mut().enumerate() {
                hist.extend_from_slice(&hv[r * d..(r + 1) * d]);
                for tap in (k - 1).saturating_sub(t)..k {
                    let src = t + tap + 1 - k;
                    col[(r * k + tap) * d..(r * k + tap + 1) * d].copy_from_slice(&hist[src * d..(src + 1) * d]);
                }
            }
            let p = block.vars(&mut tape, store);
            let mut last = Vec::with_capacity(rows * 2 * d);
            for _ in 0..rows {
                last.extend_from_slice(store.value(block.conv_bias).data());
            }
            gemm(Mat::new(&col, rows, k * d), Mat::t(&state.conv_rows[l], 2 * d, k * d), &mut last, true);
            let m_last = tape.constant(Tensor::new(&[rows, 1, 2 * d], last)?);
            let u = tape.glu(m_last, 2)?;
            let r = tape.add(u, h)?;
            let (c, _) = attention(&mut tape, r, g, v, p.attn_weight, p.attn_bias)?;
            h = tape.add(r, c)?;
        }
        let logits = self.decoder().logits(&mut tape, store, h)?;
        state.len += 1;
        tape.value(logits).reshape(&[rows, self.config().vocab_size])
    }

    /// Logits `[B, N, K]` for every prefix position at once, given features.
    pub fn score_parallel(&self, features: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
        let rows = features.shape()[0];
        let mut tape = Tape::new();
        let v = tape.constant(features.clone());
        let (logits, _) = self.decoder().forward(&mut tape, self.params(), ids, rows, v)?;
        Ok(tape.value(logits).clone())
    }

    /// Logits `[B, N, K]` computed one position at a time through
    /// [`ConvMath::step`].
    pub fn score_stepwise(&self, features: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
        let rows = features.shape()[0];
        let n = ids.len() / rows;
        let k = self.config().vocab_size;
        let mut state = self.start_state(features.clone());
        let mut out = vec![S::zero(); rows * n * k];
        for t in 0..n {
            let tokens: Vec<usize> = (0..rows).map(|r| ids[r * n + t]).collect();
            let logits = self.step(&mut state, &tokens)?;
            for r in 0..rows {
                out[(r * n + t) * k..(r * n + t + 1) * k].copy_from_slice(&logits.data()[r * k..(r + 1) * k]);
            }
        }
        Tensor::new(&[rows, n, k], out)
    }

    fn check_max_len(&self, max_len: usize) -> Result<()> {
        let limit = self.config().decoder.max_target_positions;
        if max_len > limit {
            return Err(Error::TooLong { len: max_len, limit });
        }
        Ok(())
    }

    /// Greedy search from the start token; stops at the end token or after
    /// `max_len` output tokens.
    pub fn greedy_decode(&self, image: &Tensor<S>, max_len: usize, mode: DecodeMode) -> Result<Decoded> {
        self.check_max_len(max_len)?;
        let features = self.features(image)?;
        if features.shape()[0] != 1 {
            return Err(Error::shape("greedy_decode", "expects a single image"));
        }
        let mut state = self.start_state(features.clone());
        let mut ids = Vec::new();
        let mut last = START_ID;
        let (mut total, mut scored) = (0.0, 0usize);
        loop {
            if ids.len() == max_len {
                return Ok(Decoded { ids, truncated: true, score: mean(total, scored) });
            }
            let logits = match mode {
                DecodeMode::Incremental => self.step(&mut state, &[last])?.into_vec(),
                DecodeMode::Recompute => {
                    let (inputs, _, n) = shift_targets(&[&ids]);
                    let all = self.score_parallel(&features, &inputs[..n])?;
                    let k = self.config().vocab_size;
                    all.data()[(n - 1) * k..n * k].to_vec()
                }
            };
            let lp = log_softmax(&logits);
            let next = argmax(&lp);
            total += lp[next];
            scored += 1;
            if next == END_ID {
                return Ok(Decoded { ids, truncated: false, score: mean(total, scored) });
            }
            ids.push(next);
            last = next;
        }
    }

    /// Beam search ranking finished hypotheses by mean token log-probability.
    /// With `beam = 1` this is exactly [`ConvMath::greedy_decode`]; wider
    /// beams fall back to the greedy hypothesis when pruning lost it.
    pub fn beam_decode(&self, image: &Tensor<S>, beam: usize, max_len: usize) -> Result<Decoded> {
        if beam == 0 {
            return Err(Error::Invalid("beam width must be at least 1".into()));
        }
        self.check_max_len(max_len)?;
        let features = self.features(image)?;
        if features.shape()[0] != 1 {
            return Err(Error::shape("beam_decode", "expects a single image"));
        }
        let k = self.config().vocab_size;
        let mut state = self.start_state(features);
        let mut active: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<Decoded> = Vec::new();
        if max_len == 0 {
            return Ok(Decoded { ids: Vec::new(), truncated: true, score: 0.0 });
        }
        while !active.is_empty() {
            let tokens: Vec<usize> = active.iter().map(|(ids, _)| ids.last().copied().unwrap_or(START_ID)).collect();
            let logits = self.step(&mut state, &tokens)?;
            // (total, step log-prob, hypothesis, token); ties on the total
            // fall back to the step score so a single beam tracks argmax.
            let mut candidates: Vec<(f64, f64, usize, usize)> = Vec::with_capacity(active.len() * k);
            for (i, (_, score)) in active.iter().enumerate() {
                let lp = log_softmax(&logits.data()[i * k..(i + 1) * k]);
                for (tok, &l) in lp.iter().enumerate() {
                    if l.is_finite() {
                        candidates.push((score + l, l, i, tok));
                    }
                }
            }
            candidates
                .sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
            candidates.truncate(beam);
            let mut next = Vec::new();
            let mut parents = Vec::new();
            for (score, _, i, tok) in candidates {
                let mut ids = active[i].0.clone();
                if tok == END_ID {
                    let n = ids.len() + 1;
                    finished.push(Decoded { ids, truncated: false, score: score / n as f64 });
                    continue;
                }
                ids.push(tok);
                if ids.len() == max_len {
                    let n = ids.len();
                    finished.push(Decoded { ids, truncated: true, score: score / n as f64 });
                } else {
                    next.push((ids, score));
                    parents.push(i);
                }
            }
            if finished.len() >= beam || next.is_empty() {
                break;
            }
            state = state.select(&parents)?;
            active = next;
        }
        let mut best = finished.swap_remove(0);
        for d in finished {
            if d.score > best.score {
                best = d;
            }
        }
        if beam > 1 {
            let greedy = self.greedy_decode(image, max_len, DecodeMode::Incremental)?;
            if greedy.score > best.score {
                best = greedy;
            }
        }
        Ok(best)
    }
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// First maximal entry; excluded tokens are −∞ and never win.
fn argmax(lp: &[f64]) -> usize {
    let mut best = END_ID;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

/// Log-probabilities in `f64`; padding and start are excluded (−∞).
fn log_softmax<S: Scalar>(logits: &[S]) -> Vec<f64> {
    let allowed = |i: usize| i != PAD_ID && i != START_ID;
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, v)| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().enumerate().filter(|(i, _)| allowed(*i)).map(|(_, v)| (v.as_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().enumerate().map(|(i, v)| if allowed(i) { v.as_f64() - lse } else { f64::NEG_INFINITY }).collect()
}
