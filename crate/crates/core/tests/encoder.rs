mod common;

use common::*;
use convmath::data::DEFAULT_BUCKETS;
use convmath::encoder::{add_source_positions, BlockSpec, Encoder, EncoderConfig, EncoderVariant};
use convmath::tensor::{ParamStore, Tape, Tensor};

fn build(cfg: &EncoderConfig, seed: u64) -> (Encoder, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let enc = Encoder::new(cfg, &mut store, &mut rng(seed)).unwrap();
    (enc, store)
}

fn encode(enc: &Encoder, store: &ParamStore<f32>, image: Tensor<f32>) -> (Tensor<f32>, usize, usize) {
    let mut tape = Tape::new();
    let x = tape.constant(image);
    let f = enc.encode(&mut tape, store, x).unwrap();
    (tape.value(f.vectors).clone(), f.grid_height, f.grid_width)
}

fn random_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    rand_tensor(&mut rng(seed), &[1, 1, h, w]).map(f64::abs).cast()
}

#[test]
fn default_plan_shapes_a_64x160_image() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.downsample(), (8, 8));
    let (enc, store) = build(&cfg, 1);
    let (v, gh, gw) = encode(&enc, &store, random_image(2, 64, 160));
    assert_eq!((gh, gw), (8, 20));
    assert_eq!(v.shape(), [1, 160, 512]);
}

#[test]
fn plan_output_channels() {
    assert_eq!(EncoderConfig::default().out_channels(), 512);
    assert_eq!(EncoderConfig::four_blocks().out_channels(), 256);
    assert_eq!(EncoderConfig::eight_blocks().out_channels(), 1024);
}

#[test]
fn every_bucket_encodes_to_its_predicted_grid() {
    let cfg = EncoderConfig::scaled(32);
    let (enc, store) = build(&cfg, 3);
    let (fh, fw) = cfg.downsample();
    for (i, b) in DEFAULT_BUCKETS.iter().enumerate() {
        let (v, gh, gw) = encode(&enc, &store, random_image(i as u64, b.height, b.width));
        assert_eq!((gh, gw), (b.height / fh, b.width / fw), "{b}");
        assert_eq!(v.shape(), [1, gh * gw, 32]);
    }
}

#[test]
fn incompatible_extent_names_the_multiple() {
    let cfg = EncoderConfig::scaled(32);
    let err = cfg.grid(36, 160).unwrap_err().to_string();
    assert!(err.contains('8'), "{err}");
    let (enc, store) = build(&cfg, 3);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::<f32>::zeros(&[1, 1, 36, 160]));
    assert!(enc.encode(&mut tape, &store, x).is_err());
}

#[test]
fn zero_image_with_zero_weights_gives_zero_features() {
    let cfg = EncoderConfig::scaled(32);
    let (enc, mut store) = build(&cfg, 4);
    for p in store.iter_mut().filter(|p| !p.name.contains("shortcut")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (v, _, _) = encode(&enc, &store, Tensor::zeros(&[1, 1, 32, 128]));
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn zeroed_residual_branch_is_identity() {
    let short = EncoderConfig {
        stem_channels: 8,
        block_plan: vec![BlockSpec::new(8, true)],
        variant: EncoderVariant::Residual,
    };
    let mut long = short.clone();
    long.block_plan.push(BlockSpec::new(8, false));
    let (enc_a, store_a) = build(&short, 5);
    let (enc_b, mut store_b) = build(&long, 5);
    for p in store_a.iter() {
        store_b.by_name_mut(&p.name).unwrap().value = p.value.clone();
    }
    for p in store_b.iter_mut().filter(|p| p.name.starts_with("encoder.block2.")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let image = random_image(6, 32, 64);
    let (a, ..) = encode(&enc_a, &store_a, image.clone());
    let (b, ..) = encode(&enc_b, &store_b, image);
    assert_eq!(a, b);
}

#[test]
fn pixel_only_reaches_its_receptive_field() {
    let cfg = EncoderConfig::scaled(32);
    let (enc, store) = build(&cfg, 7);
    let (base, gh, gw) = encode(&enc, &store, Tensor::zeros(&[1, 1, 32, 256]));
    let mut poked = Tensor::<f32>::zeros(&[1, 1, 32, 256]);
    poked.data_mut()[16 * 256] = 1.0;
    let (moved, ..) = encode(&enc, &store, poked);
    let d = 32;
    let mut near_changed = false;
    for r in 0..gh {
        for c in 0..gw {
            let at = (r * gw + c) * d;
            let same = base.data()[at..at + d] == moved.data()[at..at + d];
            if 8 * c > 130 {
                assert!(same, "feature ({r}, {c}) moved");
            } else if !same {
                near_changed = true;
            }
        }
    }
    assert!(near_changed);
}

#[test]
fn simple_variant_downsamples_like_the_residual_one() {
    let cfg = EncoderConfig::simple(64);
    assert_eq!(cfg.downsample(), (8, 8));
    let (enc, store) = build(&cfg, 8);
    let (v, gh, gw) = encode(&enc, &store, random_image(9, 32, 128));
    assert_eq!((gh, gw), (4, 16));
    assert_eq!(v.shape(), [1, 64, 64]);
}

#[test]
fn source_positions() {
    let mut r = rng(10);
    let feats = rand_tensor(&mut r, &[1, 6, 4]);
    let table = rand_tensor(&mut r, &[8, 4]);
    let seq = |tape: &mut Tape<f64>, f: Tensor<f64>| convmath::encoder::FeatureSequence {
        vectors: tape.leaf(f),
        grid_width: 3,
        grid_height: 2,
    };

    let mut tape = Tape::new();
    let f = seq(&mut tape, feats.clone());
    let zero = tape.constant(Tensor::zeros(&[8, 4]));
    let out = add_source_positions(&mut tape, f, zero).unwrap();
    assert_eq!(tape.value(out.vectors), &feats);

    let f = seq(&mut tape, Tensor::zeros(&[1, 6, 4]));
    let tv = tape.leaf(table.clone().with_requires_grad(true));
    let out = add_source_positions(&mut tape, f, tv).unwrap();
    assert_eq!(tape.value(out.vectors).data(), &table.data()[..24]);

    let l = project(&mut tape, out.vectors, 11);
    let g = tape.backward(l).unwrap();
    assert!(g.get(tv).unwrap()[24..].iter().all(|&v| v == 0.0));

    let f = seq(&mut tape, feats);
    let small = tape.constant(Tensor::zeros(&[5, 4]));
    let err = add_source_positions(&mut tape, f, small).unwrap_err().to_string();
    assert!(err.contains('6'), "{err}");
}
