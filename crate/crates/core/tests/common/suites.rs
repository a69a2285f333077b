//! Check routines shared by the unit-style suites and the acceptance report.
//! Each returns the error it measured rather than asserting.

use convmath::data::Bitmap;
use convmath::data::END_ID;
use convmath::decoder::{attention, decoder_block, BlockVars};
use convmath::model::image_batch;
use convmath::tensor::{Tape, Tensor, Var};
use convmath::{ConvMath, ModelConfig};
use rand::Rng;

use super::*;

pub const ORACLE_CASES: u64 = 100;

/// Relative finite-difference error of every differentiable op, by name.
pub fn gradient_op_errors() -> Vec<(&'static str, f64)> {
    let mut errs = Vec::new();
    grad_elementwise_ops(&mut errs);
    grad_shape_ops(&mut errs);
    grad_matrix_ops(&mut errs);
    grad_softmax_and_glu(&mut errs);
    grad_table_ops(&mut errs);
    grad_convolutions(&mut errs);
    grad_maxpool(&mut errs);
    grad_cross_entropy(&mut errs);
    errs
}

fn grad_elementwise_ops(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(1);
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    errs.push((
        "add",
        grad_error(&[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            project(t, y, 10)
        }),
    ));
    errs.push((
        "mul",
        grad_error(&[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            project(t, y, 11)
        }),
    ));
    errs.push((
        "scale",
        grad_error(std::slice::from_ref(&a), |t, v| {
            let y = t.scale(v[0], -2.5);
            project(t, y, 12)
        }),
    ));
    errs.push((
        "sigmoid",
        grad_error(std::slice::from_ref(&a), |t, v| {
            let y = t.sigmoid(v[0]);
            project(t, y, 13)
        }),
    ));
    errs.push(("sum", grad_error(&[a], |t, v| t.sum(v[0]))));
    let spread = spread_tensor(&mut r, &[3, 5], 0.05);
    errs.push((
        "relu",
        grad_error(&[spread], |t, v| {
            let y = t.relu(v[0]);
            project(t, y, 14)
        }),
    ));
}

fn grad_shape_ops(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(2);
    let a = rand_tensor(&mut r, &[2, 3, 4]);
    errs.push((
        "reshape",
        grad_error(std::slice::from_ref(&a), |t, v| {
            let y = t.reshape(v[0], &[6, 4]).unwrap();
            project(t, y, 20)
        }),
    ));
    errs.push((
        "transpose",
        grad_error(&[a], |t, v| {
            let y = t.transpose(v[0]).unwrap();
            project(t, y, 21)
        }),
    ));
}

fn grad_matrix_ops(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(3);
    let x = rand_tensor(&mut r, &[2, 3, 4]);
    let w = rand_tensor(&mut r, &[5, 4]);
    let b = rand_tensor(&mut r, &[5]);
    errs.push((
        "linear",
        grad_error(&[x.clone(), w.clone(), b], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            project(t, y, 30)
        }),
    ));
    errs.push((
        "linear without bias",
        grad_error(&[x.clone(), w], |t, v| {
            let y = t.linear(v[0], v[1], None).unwrap();
            project(t, y, 31)
        }),
    ));
    let y = rand_tensor(&mut r, &[2, 4, 3]);
    errs.push((
        "bmm",
        grad_error(&[x.clone(), y], |t, v| {
            let z = t.bmm(v[0], v[1], false).unwrap();
            project(t, z, 32)
        }),
    ));
    let yt = rand_tensor(&mut r, &[2, 5, 4]);
    errs.push((
        "bmm transposed",
        grad_error(&[x, yt], |t, v| {
            let z = t.bmm(v[0], v[1], true).unwrap();
            project(t, z, 33)
        }),
    ));
    let p = rand_tensor(&mut r, &[3, 4]);
    let q = rand_tensor(&mut r, &[4, 2]);
    errs.push((
        "matmul",
        grad_error(&[p, q], |t, v| {
            let z = t.matmul(v[0], v[1]).unwrap();
            project(t, z, 34)
        }),
    ));
}

fn grad_softmax_and_glu(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(4);
    let a = rand_tensor(&mut r, &[2, 3, 5]);
    for axis in 0..3 {
        errs.push((
            "softmax",
            grad_error(std::slice::from_ref(&a), |t, v| {
                let y = t.softmax(v[0], axis).unwrap();
                project(t, y, 40 + axis as u64)
            }),
        ));
    }
    let g = rand_tensor(&mut r, &[4, 6]);
    for axis in 0..2 {
        errs.push((
            "glu",
            grad_error(std::slice::from_ref(&g), |t, v| {
                let y = t.glu(v[0], axis).unwrap();
                project(t, y, 45 + axis as u64)
            }),
        ));
    }
}

fn grad_table_ops(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(5);
    let table = rand_tensor(&mut r, &[6, 3]);
    errs.push((
        "embedding",
        grad_error(std::slice::from_ref(&table), |t, v| {
            let y = t.embedding(v[0], &[1, 4, 4, 0, 5, 1], &[2, 3]).unwrap();
            project(t, y, 50)
        }),
    ));
    let x = rand_tensor(&mut r, &[2, 3, 3]);
    errs.push((
        "add_positions",
        grad_error(&[x.clone(), table.clone()], |t, v| {
            let y = t.add_positions(v[0], v[1]).unwrap();
            project(t, y, 51)
        }),
    ));
    errs.push((
        "add_positions_from",
        grad_error(&[x, table], |t, v| {
            let y = t.add_positions_from(v[0], v[1], 2).unwrap();
            project(t, y, 52)
        }),
    ));
}

fn grad_convolutions(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[2, 2, 5, 6]);
    let w = rand_tensor(&mut r, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut r, &[3]);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        errs.push((
            "conv2d",
            grad_error(&[x.clone(), w.clone(), b.clone()], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                project(t, y, 60)
            }),
        ));
    }
    let w1 = rand_tensor(&mut r, &[3, 2, 1, 1]);
    errs.push((
        "conv2d 1x1",
        grad_error(&[x, w1, b], |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 0).unwrap();
            project(t, y, 61)
        }),
    ));

    let seq = rand_tensor(&mut r, &[2, 5, 3]);
    let cw = rand_tensor(&mut r, &[4, 3, 3]);
    let cb = rand_tensor(&mut r, &[4]);
    errs.push((
        "causal_conv1d",
        grad_error(&[seq, cw.clone(), cb.clone()], |t, v| {
            let y = t.causal_conv1d(v[0], v[1], v[2]).unwrap();
            project(t, y, 62)
        }),
    ));
    let cm = rand_tensor(&mut r, &[3, 5]);
    errs.push((
        "conv1d_causal",
        grad_error(&[cm, cw, cb], |t, v| {
            let y = t.conv1d_causal(v[0], v[1], v[2]).unwrap();
            project(t, y, 63)
        }),
    ));
}

fn grad_maxpool(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(7);
    let x = spread_tensor(&mut r, &[2, 4, 6], 0.01);
    for (kh, kw) in [(2, 2), (1, 2), (2, 1)] {
        errs.push((
            "maxpool2d",
            grad_error(std::slice::from_ref(&x), |t, v| {
                let y = t.maxpool2d(v[0], kh, kw).unwrap();
                project(t, y, 70)
            }),
        ));
    }
}

fn grad_cross_entropy(errs: &mut Vec<(&'static str, f64)>) {
    let mut r = rng(8);
    let logits = rand_tensor(&mut r, &[5, 4]);
    errs.push((
        "cross_entropy",
        grad_error(std::slice::from_ref(&logits), |t, v| t.cross_entropy(v[0], &[1, 3, 0, 2, 3], 0).unwrap()),
    ));
    errs.push((
        "cross_entropy no ignore",
        grad_error(&[logits], |t, v| t.cross_entropy(v[0], &[1, 3, 0, 2, 3], usize::MAX).unwrap()),
    ));
}

fn toy_batch() -> (Vec<Bitmap>, Vec<Vec<usize>>) {
    let mut r = rng(9);
    let images = (0..2)
        .map(|_| {
            let mut b = Bitmap::blank(16, 16);
            for y in 0..16 {
                for x in 0..16 {
                    b.set(x, y, rand::Rng::random::<u8>(&mut r));
                }
            }
            b
        })
        .collect();
    (images, vec![vec![4, 5, 6], vec![6, 4]])
}

/// Relative error over every scalar of a two-layer toy model, through
/// encoder, attention and loss.
pub fn end_to_end_gradient_error() -> f64 {
    let mut model: ConvMath<f64> = ConvMath::new(ModelConfig::small(7, 8, 2), 3).unwrap();
    // Zero biases put blank-region activations exactly on the relu kink.
    let mut r = rng(4);
    for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        for v in p.value.data_mut() {
            *v =
                rand::Rng::random_range(&mut r, 0.05..0.2) * if rand::Rng::random::<bool>(&mut r) { 1.0 } else { -1.0 };
        }
    }
    let (images, targets) = toy_batch();
    let refs: Vec<&Bitmap> = images.iter().collect();
    let x = image_batch::<f64>(&refs).unwrap();
    let seqs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
    let loss_of = |m: &ConvMath<f64>| {
        let mut tape = Tape::new();
        let xv: Var = tape.constant(x.clone());
        let l = m.loss(&mut tape, xv, &seqs).unwrap();
        tape.value(l).item()
    };

    let mut m = model.clone();
    m.params_mut().zero_grad();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let l = m.loss(&mut tape, xv, &seqs).unwrap();
    tape.backward_into(l, m.params_mut()).unwrap();
    drop(tape);

    let eps = 1e-4;
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    let names: Vec<String> = m.params().iter().map(|p| p.name.clone()).collect();
    for name in &names {
        let analytic = m.params().by_name(name).unwrap().value.grad().unwrap().to_vec();
        for (i, a) in analytic.iter().enumerate() {
            let mut probe = model.clone();
            let orig = probe.params().by_name(name).unwrap().value.data()[i];
            probe.params_mut().by_name_mut(name).unwrap().value.data_mut()[i] = orig + eps;
            let up = loss_of(&probe);
            probe.params_mut().by_name_mut(name).unwrap().value.data_mut()[i] = orig - eps;
            let down = loss_of(&probe);
            let numeric = (up - down) / (2.0 * eps);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    diff.sqrt() / (na.sqrt() + nn.sqrt())
}

pub fn conv2d_oracle_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..ORACLE_CASES {
        let mut r = rng(100 + case);
        let (batch, c_in, c_out) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (kh, kw) = if r.random::<bool>() { (3, 3) } else { (1, 1) };
        let stride = r.random_range(1..3);
        let pad = if kh == 3 { r.random_range(0..2) } else { 0 };
        let (h, w) = (r.random_range(kh..8), r.random_range(kw..9));
        let x = rand_tensor(&mut r, &[batch, c_in, h, w]);
        let wt = rand_tensor(&mut r, &[c_out, c_in, kh, kw]);
        let b = rand_tensor(&mut r, &[c_out]);

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv, stride, pad).unwrap();
        let plane = c_in * h * w;
        let mut expected = Vec::new();
        for bi in 0..batch {
            let (o, ho, wo) = conv2d_ref(
                &x.data()[bi * plane..(bi + 1) * plane],
                (c_in, h, w),
                wt.data(),
                b.data(),
                (c_out, kh, kw),
                stride,
                pad,
            );
            assert_eq!(tape.shape(y), [batch, c_out, ho, wo]);
            expected.extend(o);
        }
        let err = max_abs_diff(tape.value(y).data(), &expected);
        worst = worst.max(err);
    }
    worst
}

pub fn causal_conv1d_oracle_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..ORACLE_CASES {
        let mut r = rng(200 + case);
        let (batch, n, c_in, c_out, k) = (
            r.random_range(1..3),
            r.random_range(1..9),
            r.random_range(1..5),
            r.random_range(1..5),
            r.random_range(1..5),
        );
        let x = rand_tensor(&mut r, &[batch, n, c_in]);
        let wt = rand_tensor(&mut r, &[c_out, c_in, k]);
        let b = rand_tensor(&mut r, &[c_out]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.causal_conv1d(xv, wv, bv).unwrap();
        let mut expected = Vec::new();
        for bi in 0..batch {
            expected.extend(causal_conv1d_ref(
                &x.data()[bi * n * c_in..(bi + 1) * n * c_in],
                n,
                c_in,
                wt.data(),
                b.data(),
                c_out,
                k,
            ));
        }
        let err = max_abs_diff(tape.value(y).data(), &expected);
        worst = worst.max(err);

        // Channel-major entry point on the first sequence.
        let xc = rand_tensor(&mut r, &[c_in, n]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(xc.clone()), tape.constant(wt.clone()), tape.constant(b.clone()));
        let y = tape.conv1d_causal(xv, wv, bv).unwrap();
        let mut time_major = vec![0.0; n * c_in];
        for c in 0..c_in {
            for i in 0..n {
                time_major[i * c_in + c] = xc.data()[c * n + i];
            }
        }
        let reference = causal_conv1d_ref(&time_major, n, c_in, wt.data(), b.data(), c_out, k);
        let mut expected = vec![0.0; c_out * n];
        for i in 0..n {
            for o in 0..c_out {
                expected[o * n + i] = reference[i * c_out + o];
            }
        }
        let err = max_abs_diff(tape.value(y).data(), &expected);
        worst = worst.max(err);
    }
    worst
}

pub fn maxpool_oracle_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..ORACLE_CASES {
        let mut r = rng(300 + case);
        let (kh, kw) = [(2, 2), (1, 2), (2, 1)][case as usize % 3];
        let planes = r.random_range(1..5);
        let (h, w) = (kh * r.random_range(1..5), kw * r.random_range(1..5));
        let x = rand_tensor(&mut r, &[planes, h, w]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.maxpool2d(xv, kh, kw).unwrap();
        let err = max_abs_diff(tape.value(y).data(), &maxpool_ref(x.data(), planes, h, w, kh, kw));
        worst = worst.max(err);
    }
    worst
}

pub fn attention_oracle_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..ORACLE_CASES {
        let mut r = rng(400 + case);
        let (batch, n, s, d) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..7), r.random_range(1..6));
        let rr = rand_tensor(&mut r, &[batch, n, d]);
        let g = rand_tensor(&mut r, &[batch, n, d]);
        let v = rand_tensor(&mut r, &[batch, s, d]);
        let wd = rand_tensor(&mut r, &[d, d]);
        let bd = rand_tensor(&mut r, &[d]);
        let mut tape = Tape::new();
        let vars: Vec<_> = [&rr, &g, &v, &wd, &bd].iter().map(|t| tape.constant((*t).clone())).collect();
        let (c, a) = attention(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();
        let (mut ec, mut ea) = (Vec::new(), Vec::new());
        for bi in 0..batch {
            let rows = &rr.data()[bi * n * d..(bi + 1) * n * d];
            let mut q = linear_ref(rows, n, d, wd.data(), bd.data(), d);
            for (qi, gi) in q.iter_mut().zip(&g.data()[bi * n * d..(bi + 1) * n * d]) {
                *qi += gi;
            }
            let (cc, aa) = attention_ref(&q, n, &v.data()[bi * s * d..(bi + 1) * s * d], s, d);
            ec.extend(cc);
            ea.extend(aa);
        }
        let err = max_abs_diff(tape.value(c).data(), &ec).max(max_abs_diff(tape.value(a).data(), &ea));
        worst = worst.max(err);
    }
    worst
}

pub fn decoder_block_oracle_error() -> f64 {
    let mut worst = 0.0f64;
    for case in 0..ORACLE_CASES {
        let mut r = rng(500 + case);
        let (batch, n, s, d, k) = (
            r.random_range(1..3),
            r.random_range(1..6),
            r.random_range(1..6),
            r.random_range(1..5),
            r.random_range(1..4),
        );
        let h = rand_tensor(&mut r, &[batch, n, d]);
        let g = rand_tensor(&mut r, &[batch, n, d]);
        let v = rand_tensor(&mut r, &[batch, s, d]);
        let cw = rand_tensor(&mut r, &[2 * d, d, k]);
        let cb = rand_tensor(&mut r, &[2 * d]);
        let aw = rand_tensor(&mut r, &[d, d]);
        let ab = rand_tensor(&mut r, &[d]);
        let mut tape = Tape::new();
        let (hv, gv, vv) = (tape.constant(h.clone()), tape.constant(g.clone()), tape.constant(v.clone()));
        let p = BlockVars {
            conv_weight: tape.constant(cw.clone()),
            conv_bias: tape.constant(cb.clone()),
            attn_weight: tape.constant(aw.clone()),
            attn_bias: tape.constant(ab.clone()),
        };
        let out = decoder_block(&mut tape, hv, gv, vv, &p).unwrap();
        let mut expected = Vec::new();
        for bi in 0..batch {
            let span = bi * n * d..(bi + 1) * n * d;
            expected.extend(decoder_block_ref(
                &h.data()[span.clone()],
                &g.data()[span],
                &v.data()[bi * s * d..(bi + 1) * s * d],
                n,
                s,
                d,
                k,
                cw.data(),
                cb.data(),
                aw.data(),
                ab.data(),
            ));
        }
        let err = max_abs_diff(tape.value(out.h).data(), &expected);
        worst = worst.max(err);
    }
    worst
}

/// Random model with an output bias that makes ending plausible.
pub fn decode_model(seed: u64, vocab: usize) -> ConvMath<f32> {
    let mut m = ConvMath::new(ModelConfig::small(vocab, 8, 2), seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let bias = m.decoder().out_bias();
    let b = m.params_mut().get_mut(bias).value.data_mut();
    for v in b.iter_mut() {
        *v = r.random_range(-1.0..1.0);
    }
    b[END_ID] = r.random_range(-1.0..1.5);
    m
}

pub fn decode_image(seed: u64) -> Tensor<f32> {
    rand_tensor(&mut rng(seed), &[1, 32, 64]).map(f64::abs).cast()
}
