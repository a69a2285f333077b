//! Shared helpers: random tensors, finite differences and plain nested-loop
//! reference implementations.

#![allow(dead_code)]

pub mod suites;

use convmath::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values at least `gap` apart in magnitude and away from zero, so relu
/// kinks and max ties stay out of reach of a 1e-4 perturbation.
pub fn spread_tensor(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 1.0) * gap).collect();
    for v in vals.iter_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).unwrap()
}

/// Relative error `|a - n| / (|a| + |n|)` between the tape gradient of
/// `f(inputs)` and central differences, over every input element.
pub fn grad_error(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let eps = 1e-4;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad(true))).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |inputs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap().to_vec();
        for (i, a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            diff += (a - numeric).powi(2);
            na += a.powi(2);
            nn += numeric.powi(2);
        }
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Contracts an output with fixed random weights so every element of it
/// contributes to the scalar being differentiated.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(rand_tensor(&mut r, &shape));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

pub fn conv2d_ref(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for u in 0..kh {
                        for v in 0..kw {
                            let y = (i * stride + u) as isize - pad as isize;
                            let xx = (j * stride + v) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += weight[((o * c_in + c) * kh + u) * kw + v]
                                    * x[(c * h + y as usize) * w + xx as usize];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    (out, ho, wo)
}

/// `x` is `[N, C_in]` time-major, `weight` `[C_out, C_in, k]`; tap `k - 1`
/// reads the current position.
pub fn causal_conv1d_ref(
    x: &[f64],
    n: usize,
    c_in: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c_out];
    for i in 0..n {
        for o in 0..c_out {
            let mut acc = bias[o];
            for t in 0..k {
                let src = i as isize + t as isize - (k as isize - 1);
                if src < 0 {
                    continue;
                }
                for c in 0..c_in {
                    acc += weight[(o * c_in + c) * k + t] * x[src as usize * c_in + c];
                }
            }
            out[i * c_out + o] = acc;
        }
    }
    out
}

pub fn maxpool_ref(x: &[f64], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ho, wo) = (h / kh, w / kw);
    let mut out = vec![f64::NEG_INFINITY; planes * ho * wo];
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                for u in 0..kh {
                    for v in 0..kw {
                        let val = x[(p * h + i * kh + u) * w + j * kw + v];
                        let o = &mut out[(p * ho + i) * wo + j];
                        if val > *o {
                            *o = val;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `y = x·wᵀ + b` row by row; `x` is `[n, d_in]`, `w` `[d_out, d_in]`.
pub fn linear_ref(x: &[f64], n: usize, d_in: usize, w: &[f64], b: &[f64], d_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * d_out];
    for i in 0..n {
        for o in 0..d_out {
            let mut acc = b[o];
            for c in 0..d_in {
                acc += x[i * d_in + c] * w[o * d_in + c];
            }
            y[i * d_out + o] = acc;
        }
    }
    y
}

/// Query rows `[n, d]` against features `[s, d]`: explicit exponentials,
/// normalization and weighted sums. Returns `(content, weights)`.
pub fn attention_ref(q: &[f64], n: usize, v: &[f64], s: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut weights = vec![0.0; n * s];
    let mut content = vec![0.0; n * d];
    for i in 0..n {
        let scores: Vec<f64> = (0..s).map(|j| (0..d).map(|c| q[i * d + c] * v[j * d + c]).sum::<f64>()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..s {
            weights[i * s + j] = e[j] / z;
            for c in 0..d {
                content[i * d + c] += weights[i * s + j] * v[j * d + c];
            }
        }
    }
    (content, weights)
}

/// One decoder layer for a single sequence: `h_prev`, `g` are `[n, d]`,
/// features `[s, d]`, `conv_w` `[2d, d, k]`, `attn_w` `[d, d]`.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block_ref(
    h_prev: &[f64],
    g: &[f64],
    feats: &[f64],
    n: usize,
    s: usize,
    d: usize,
    k: usize,
    conv_w: &[f64],
    conv_b: &[f64],
    attn_w: &[f64],
    attn_b: &[f64],
) -> Vec<f64> {
    let m = causal_conv1d_ref(h_prev, n, d, conv_w, conv_b, 2 * d, k);
    let mut r = vec![0.0; n * d];
    for i in 0..n {
        for c in 0..d {
            let a = m[i * 2 * d + c];
            let b = m[i * 2 * d + d + c];
            r[i * d + c] = a / (1.0 + (-b).exp()) + h_prev[i * d + c];
        }
    }
    let mut q = linear_ref(&r, n, d, attn_w, attn_b, d);
    for (qi, gi) in q.iter_mut().zip(g) {
        *qi += gi;
    }
    let (content, _) = attention_ref(&q, n, feats, s, d);
    r.iter().zip(&content).map(|(a, b)| a + b).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
