mod common;

use proptest::prelude::*;
use vmelab::encoder::{encode_batch, init_params, EncodeOptions};
use vmelab::numerics::nn::{self, BatchShape};
use vmelab::numerics::{grad_check, ops, Array, Tensor};
use vmelab::objectives::{nt_perturb, total_loss, ObjectiveConfig, Variant};
use vmelab::rng::{stream, Purpose};

const TOL: f64 = 1e-4;

fn arr(shape: &[usize], seed: u64) -> Array {
    let n: usize = shape.iter().product();
    let mut rng = stream(seed, Purpose::Init, 99);
    let data = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    Array::new(shape, data).unwrap()
}

#[test]
fn layer_norm_gradient() {
    let r = grad_check(
        |p| {
            let y = nn::layer_norm(&p[0], &p[1], &p[2], 1e-12)?;
            Ok(ops::sum(&ops::mul(&y, &ops::map(&y, f64::sin, |x, _| x.cos()))?))
        },
        &[arr(&[3, 5], 1), arr(&[5], 2), arr(&[5], 3)],
        TOL,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn gelu_and_softmax_gradient() {
    let r = grad_check(
        |p| {
            let s = ops::softmax_rows(&nn::gelu(&p[0]), Some(&[true, true, false, true, true, false, true, true]))?;
            Ok(ops::sum(&ops::mul(&s, &p[1])?))
        },
        &[arr(&[2, 4], 4), arr(&[2, 4], 5)],
        TOL,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn attention_gradient() {
    let bs = BatchShape {
        batch: 2,
        len: 3,
        heads: 2,
    };
    let valid = [true, true, true, true, true, false];
    let r = grad_check(
        |p| {
            let probs = nn::attention_probs(&p[0], &p[1], &valid, bs)?;
            let ctx = nn::attention_context(&probs, &p[2], bs)?;
            Ok(ops::add(&ops::sum(&ops::mul(&ctx, &ctx)?), &ops::sum(&ops::mul(&probs, &probs)?))?)
        },
        &[arr(&[6, 4], 6), arr(&[6, 4], 7), arr(&[6, 4], 8)],
        TOL,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn pooling_and_gather_gradient() {
    let r = grad_check(
        |p| {
            let rows = nn::gather_rows(&p[0], &[0, 2, 2, 1, 3, 0])?;
            let pooled = ops::mean_pool_groups(&rows, &[true, true, false, true, true, true], 2)?;
            let d = ops::row_mean_sq_diff(&pooled, &ops::scale(&pooled, 0.5))?;
            Ok(ops::sum(&d))
        },
        &[arr(&[4, 3], 9)],
        TOL,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}

#[test]
fn every_variant_full_model_gradient() {
    let model = common::model(2, 16, 2);
    let params = init_params(&model).unwrap();
    let leaves: Vec<Array> = params.leaves().into_iter().cloned().collect();
    let batch = common::batch(&common::pairs(), model.max_len);
    for variant in Variant::ALL {
        let cfg = ObjectiveConfig {
            variant,
            ..ObjectiveConfig::default()
        };
        let r = grad_check(
            |p| {
                let bound = common::bind_leaves(&params, p);
                let mut noise = stream(1, Purpose::Noise, 0);
                let mut hook = |e: Tensor| nt_perturb(&e, &batch.valid, cfg.nt_sigma, &mut noise);
                let opts = || EncodeOptions::default();
                let x = if variant == Variant::NtApt {
                    encode_batch(
                        &bound,
                        &model,
                        batch.view_x(),
                        EncodeOptions {
                            dropout_rng: None,
                            embedding_hook: Some(&mut hook),
                        },
                    )?
                } else {
                    encode_batch(&bound, &model, batch.view_x(), opts())?
                };
                let xa = encode_batch(&bound, &model, batch.view_xa(), opts())?;
                Ok(total_loss(&bound, &model, &batch, &x, Some(&xa), &cfg)?.total)
            },
            &leaves,
            TOL,
        )
        .unwrap();
        assert!(r.pass, "{variant}: max relative error {}", r.max_rel_error);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12), mask in prop::collection::vec(any::<bool>(), 4)) {
        let mut mask = mask;
        mask[0] = true;
        let x = Tensor::constant(&[3, 4], vals).unwrap();
        let full: Vec<bool> = (0..12).map(|i| mask[i % 4]).collect();
        let s = ops::softmax_rows(&x, Some(&full)).unwrap();
        for row in s.values().chunks(4) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for (v, m) in row.iter().zip(&mask) {
                if !m { prop_assert_eq!(*v, 0.0); }
            }
        }
    }

    #[test]
    fn loss_signs(a in prop::collection::vec(-5.0f64..5.0, 8), b in prop::collection::vec(-5.0f64..5.0, 8)) {
        let pa = Tensor::constant(&[2, 4], a).unwrap();
        let pb = Tensor::constant(&[2, 4], b).unwrap();
        let ept = vmelab::objectives::ept_loss(&pa, &pb, None).unwrap().item();
        let srpt = vmelab::objectives::srpt_loss(&pa, &pb).unwrap().item();
        prop_assert!(ept <= 0.0);
        prop_assert!(srpt >= 0.0);
        prop_assert_eq!(srpt, -ept);
    }

    #[test]
    fn apt_is_non_negative_and_doubles_with_heads(vals in prop::collection::vec(0.0f64..1.0, 8)) {
        let bs1 = BatchShape { batch: 1, len: 2, heads: 1 };
        let a = Tensor::constant(&[1, 1, 2, 2], vals[..4].to_vec()).unwrap();
        let b = Tensor::constant(&[1, 1, 2, 2], vals[4..].to_vec()).unwrap();
        let one = vmelab::objectives::apt_loss(&a, &b, &[2], bs1).unwrap().item();
        prop_assert!(one >= 0.0);
        let bs2 = BatchShape { heads: 2, ..bs1 };
        let a2 = Tensor::constant(&[1, 2, 2, 2], [&vals[..4], &vals[..4]].concat()).unwrap();
        let b2 = Tensor::constant(&[1, 2, 2, 2], [&vals[4..], &vals[..4]].concat()).unwrap();
        let two = vmelab::objectives::apt_loss(&a2, &b2, &[2], bs2).unwrap().item();
        prop_assert!((two - one / 2.0).abs() < 1e-15);
    }

    #[test]
    fn augmentation_preserves_length(words in prop::collection::vec(0usize..6, 1..20), p in 0.0f64..=1.0, seed in any::<u64>()) {
        let dict = vmelab::augmentation::SynonymDictionary::from_entries(
            vec![("w0".into(), vec!["s0".into(), "t0".into()]), ("w3".into(), vec!["s3".into()])],
            "prop",
        ).unwrap();
        let tokens: Vec<String> = words.iter().map(|w| format!("w{w}")).collect();
        let out = vmelab::augmentation::augment_example(&tokens, &dict, p, &mut stream(seed, Purpose::Augment, 0));
        prop_assert_eq!(out.len(), tokens.len());
        for (o, t) in out.iter().zip(&tokens) {
            prop_assert!(o == t || dict.synonyms(t).unwrap().contains(o));
        }
    }

    #[test]
    fn scaled_dictionary_is_floor_sized_subset(size in 1usize..400, scale in 0.01f64..=1.0, seed in any::<u64>()) {
        let entries = (0..size).map(|i| (format!("w{i}"), vec![format!("s{i}")])).collect();
        let d = vmelab::augmentation::SynonymDictionary::from_entries(entries, "prop").unwrap();
        let s = vmelab::augmentation::scale_dictionary(&d, scale, seed).unwrap();
        prop_assert_eq!(s.size(), (scale * size as f64).floor() as usize);
        for (w, syn) in s.entries() {
            prop_assert_eq!(d.synonyms(w).unwrap(), syn.as_slice());
        }
    }
}
