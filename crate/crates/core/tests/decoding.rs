mod common;

use common::suites::{decode_image as image, decode_model as model};
use common::*;
use convmath::data::{END_ID, PAD_ID, START_ID};
use convmath::decode::{DecodeMode, Decoded};
use convmath::model::{ConvMath, ModelConfig};
use convmath::tensor::Tensor;
use rand::Rng;

fn log_probs(logits: &[f32]) -> Vec<f64> {
    let ok = |i: usize| i != PAD_ID && i != START_ID;
    let z: f64 = logits.iter().enumerate().filter(|(i, _)| ok(*i)).map(|(_, &v)| (v as f64).exp()).sum();
    logits.iter().enumerate().map(|(i, &v)| if ok(i) { v as f64 - z.ln() } else { f64::NEG_INFINITY }).collect()
}

#[test]
fn end_bias_gives_empty_output() {
    let mut m = model(1, 12);
    let bias = m.decoder().out_bias();
    m.params_mut().get_mut(bias).value.data_mut()[END_ID] = 1e4;
    for mode in [DecodeMode::Incremental, DecodeMode::Recompute] {
        let out = m.greedy_decode(&image(2), 20, mode).unwrap();
        assert_eq!(out, Decoded { ids: vec![], truncated: false, score: 0.0 });
    }
    assert!(m.beam_decode(&image(2), 3, 20).unwrap().ids.is_empty());
}

#[test]
fn incremental_matches_recompute() {
    let mut lengths = Vec::new();
    for case in 0..20 {
        let m = model(100 + case, 12);
        let img = image(200 + case);
        let a = m.greedy_decode(&img, 12, DecodeMode::Incremental).unwrap();
        let b = m.greedy_decode(&img, 12, DecodeMode::Recompute).unwrap();
        assert_eq!(a, b, "case {case}");
        lengths.push(a.ids.len());
    }
    assert!(lengths.iter().any(|&n| n > 1), "{lengths:?}");
}

#[test]
fn beam_of_one_is_greedy() {
    for case in 0..20 {
        let m = model(300 + case, 12);
        let img = image(400 + case);
        let greedy = m.greedy_decode(&img, 12, DecodeMode::Incremental).unwrap();
        let beam = m.beam_decode(&img, 1, 12).unwrap();
        assert_eq!(greedy.ids, beam.ids, "case {case}");
        assert_eq!(greedy.truncated, beam.truncated);
        assert!((greedy.score - beam.score).abs() < 1e-12);
    }
}

#[test]
fn full_beam_finds_the_exhaustive_optimum() {
    let vocab = 7;
    let tokens: Vec<usize> = (0..vocab).filter(|&t| t != PAD_ID && t != START_ID).collect();
    for case in 0..10 {
        let m = model(500 + case, vocab);
        let img = image(600 + case);
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut consider = |score: f64, ids: Vec<usize>| {
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, ids));
            }
        };
        let first = m.forward_teacher_forced(&img, &[START_ID]).unwrap();
        let lp1 = log_probs(first.data());
        consider(lp1[END_ID], vec![]);
        for &a in tokens.iter().filter(|&&t| t != END_ID) {
            let out = m.forward_teacher_forced(&img, &[START_ID, a]).unwrap();
            let lp2 = log_probs(&out.data()[vocab..]);
            for &b in &tokens {
                let ids = if b == END_ID { vec![a] } else { vec![a, b] };
                consider((lp1[a] + lp2[b]) / 2.0, ids);
            }
        }
        let (score, ids) = best.unwrap();
        let got = m.beam_decode(&img, tokens.len(), 2).unwrap();
        assert_eq!(got.ids, ids, "case {case}");
        assert!((got.score - score).abs() < 1e-5);
    }
}

#[test]
fn wider_beam_never_scores_lower() {
    for case in 0..20 {
        let m = model(700 + case, 12);
        let img = image(800 + case);
        let greedy = m.beam_decode(&img, 1, 10).unwrap();
        let wide = m.beam_decode(&img, 4, 10).unwrap();
        assert!(wide.score >= greedy.score - 1e-9, "case {case}: {} < {}", wide.score, greedy.score);
    }
}

#[test]
fn parallel_and_stepwise_scores_are_bit_identical() {
    for case in 0..5 {
        let m = model(900 + case, 12);
        let imgs = Tensor::<f32>::new(
            &[2, 1, 32, 64],
            image(1000 + case).data().iter().chain(image(1100 + case).data()).copied().collect(),
        )
        .unwrap();
        let feats = m.features(&imgs).unwrap();
        let mut r = rng(case);
        let ids: Vec<usize> = (0..2)
            .flat_map(|_| (0..9).map(|t| if t == 0 { START_ID } else { r.random_range(4..12) }).collect::<Vec<_>>())
            .collect();
        let a = m.score_parallel(&feats, &ids).unwrap();
        let b = m.score_stepwise(&feats, &ids).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn blank_image_terminates() {
    let m = ConvMath::<f32>::new(ModelConfig::small(12, 8, 2), 3).unwrap();
    let blank = Tensor::full(&[1, 32, 64], 1.0);
    let out = m.greedy_decode(&blank, 16, DecodeMode::Incremental).unwrap();
    assert!(out.ids.len() <= 16);
    assert_eq!(out.truncated, out.ids.len() == 16);
    let out = m.beam_decode(&blank, 3, 16).unwrap();
    assert!(out.ids.len() <= 16);
}

#[test]
fn decode_length_is_bounded_by_positions() {
    let m = model(4, 12);
    let err = m.greedy_decode(&image(5), 129, DecodeMode::Incremental).unwrap_err();
    assert!(err.to_string().contains("128"), "{err}");
    assert!(m.beam_decode(&image(5), 0, 10).is_err());
}

#[test]
fn wide_model_scores_are_bit_identical() {
    let m = ConvMath::<f32>::new(ModelConfig::small(20, 128, 2), 21).unwrap();
    let feats = m.features(&image(22)).unwrap();
    let mut r = rng(23);
    let ids: Vec<usize> = (0..12).map(|t| if t == 0 { START_ID } else { r.random_range(4..20) }).collect();
    assert_eq!(m.score_parallel(&feats, &ids).unwrap(), m.score_stepwise(&feats, &ids).unwrap());
}
