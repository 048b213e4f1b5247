use latent_iqa::data::{
    apply_distortion, build_corpus, mixture_counts, outside_roi_identical, read_stage1, read_stage2, roi_msd,
    synth_base_image, write_stage1, write_stage2, CorpusConfig, DistortionKind, DistortionSpec, ForgeConfig,
    ImageStorage, Severity,
};
use latent_iqa::grpo::{
    categorical_kl, center_advantages, importance_ratios, reward_gauss, surrogate_grad_logp, surrogate_term,
};
use latent_iqa::metrics::{average_ranks, plcc, srcc};
use latent_iqa::model::{Checkpoint, Model, ModelConfig, TrainingState};
use latent_iqa::roi::{build_phi, roi_to_patch_indices, RoiSpec};
use latent_iqa::tokenizer::Vocab;
use proptest::prelude::*;

fn spread_vec(min_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50i32..50, min_len..40)
        .prop_map(|v| v.into_iter().map(|x| f64::from(x) / 4.0).collect::<Vec<f64>>())
        .prop_filter("needs spread", |v| v.iter().any(|x| *x != v[0]))
}

fn roi_strategy(size: usize) -> impl Strategy<Value = RoiSpec> {
    (1..=size, 1..=size)
        .prop_flat_map(move |(w, h)| (0..=size - w, 0..=size - h, Just(w), Just(h)))
        .prop_map(|(x0, y0, w, h)| RoiSpec::new(x0, y0, x0 + w, y0 + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn centered_advantages_sum_to_zero(rewards in prop::collection::vec(0.0f64..2.0, 1..16), normalize: bool) {
        let adv = center_advantages(&rewards, normalize);
        prop_assert_eq!(adv.len(), rewards.len());
        prop_assert!(adv.iter().sum::<f64>().abs() <= 1e-9 * rewards.len() as f64);
    }

    #[test]
    fn gaussian_reward_is_bounded(pred in 0.0f64..6.0, target in 1.0f64..5.0, sigma in 0.05f64..2.0, tau in 0.05f64..2.0) {
        let r = reward_gauss(Some(pred), target, sigma, tau);
        prop_assert!((0.0..=1.0).contains(&r));
        if (pred - target).abs() > tau {
            prop_assert_eq!(r, 0.0);
        }
        prop_assert_eq!(reward_gauss(None, target, sigma, tau), 0.0);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(p in prop::collection::vec(-6.0f64..6.0, 1..2), q in prop::collection::vec(-6.0f64..6.0, 1..2)) {
        let n = Vocab::new().len();
        let expand = |seed: &[f64]| (0..n).map(|j| seed[0] * ((j * 7 + 3) % 11) as f64 / 11.0 - (j % 5) as f64 * 0.3).collect::<Vec<f64>>();
        let (pl, ql) = (expand(&p), expand(&q));
        prop_assert!(categorical_kl(&pl, &ql) >= -1e-12);
        prop_assert!(categorical_kl(&pl, &pl).abs() <= 1e-12);
    }

    #[test]
    fn importance_ratios_are_positive(lp in prop::collection::vec((-30.0f64..0.0, -30.0f64..0.0), 1..20)) {
        let (new, old): (Vec<f64>, Vec<f64>) = lp.into_iter().unzip();
        let ratios = importance_ratios(&new, &old).unwrap();
        prop_assert!(ratios.iter().all(|r| *r > 0.0));
    }

    #[test]
    fn surrogate_never_exceeds_unclipped(ratio in 0.01f64..4.0, adv in -3.0f64..3.0, eps in 0.01f64..0.5) {
        prop_assert!(surrogate_term(ratio, adv, eps) <= ratio * adv + 1e-15);
        let g = surrogate_grad_logp(ratio, adv, eps);
        prop_assert!(g == 0.0 || g == ratio * adv);
        if (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps) {
            prop_assert_eq!(g, 0.0);
        }
    }

    #[test]
    fn correlations_are_bounded(x in spread_vec(3), seed in 0u64..1000) {
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + ((i as u64 * 31 + seed) % 7) as f64).collect();
        if let (Ok(p), Ok(s)) = (plcc(&x, &y), srcc(&x, &y)) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&p));
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s));
        }
        prop_assert!((plcc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn affine_and_monotone_maps_preserve_correlation(x in spread_vec(3), y in spread_vec(3), a in 0.1f64..5.0, b in -10.0f64..10.0) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        let (Ok(p), Ok(s)) = (plcc(x, y), srcc(x, y)) else { return Ok(()); };
        let affine: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let cubed: Vec<f64> = x.iter().map(|v| v.powi(3) + b).collect();
        prop_assert!((plcc(&affine, y).unwrap() - p).abs() < 1e-9);
        prop_assert!((srcc(&cubed, y).unwrap() - s).abs() < 1e-9);
        let flipped: Vec<f64> = x.iter().map(|v| -a * v).collect();
        prop_assert!((plcc(&flipped, y).unwrap() + p).abs() < 1e-9);
    }

    #[test]
    fn average_ranks_sum_is_triangular(x in prop::collection::vec(-5i32..5, 1..40)) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let n = x.len() as f64;
        let r = average_ranks(&x);
        prop_assert!((r.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn mixture_counts_sum_to_n(n in 0usize..5000, w in prop::collection::vec(0.01f64..10.0, 1..5)) {
        prop_assert_eq!(mixture_counts(n, &w).unwrap().iter().sum::<usize>(), n);
    }

    #[test]
    fn roi_alignment_is_a_bijection(roi in roi_strategy(32)) {
        let set = roi_to_patch_indices(&roi, 32, 8).unwrap();
        prop_assert!(set.indices().windows(2).all(|w| w[0] < w[1]));
        let phi = build_phi(&set, set.len()).unwrap();
        for (step, &patch) in (1..).zip(set.indices()) {
            prop_assert_eq!(phi.patch_at(step), Some(patch));
            prop_assert_eq!(phi.step_of(patch), Some(step));
        }
        prop_assert!(build_phi(&set, set.len() + 1).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn distortions_are_local_and_monotone(seed in 0u64..100_000, roi in roi_strategy(32), kind_ix in 0usize..3) {
        prop_assume!(roi.width() >= 4 && roi.height() >= 4);
        let kind = [DistortionKind::Noise, DistortionKind::Blur, DistortionKind::Compression][kind_ix];
        let base = synth_base_image(seed, 32);
        let mut last = -1.0;
        for level in 1..=5u8 {
            let spec = DistortionSpec { kind, severity: Severity::new(level).unwrap(), roi, seed: seed ^ 0xABCD };
            let out = apply_distortion(&base, &spec).unwrap();
            prop_assert!(outside_roi_identical(&base, &out, &roi));
            let msd = roi_msd(&base, &out, &roi);
            prop_assert!(msd >= last, "{kind} level {level}: {msd} after {last}");
            last = msd;
        }
    }

    #[test]
    fn null_distortion_is_identity(seed in 0u64..100_000, roi in roi_strategy(32), level in 1u8..=5) {
        let base = synth_base_image(seed, 32);
        let spec = DistortionSpec { kind: DistortionKind::Null, severity: Severity::new(level).unwrap(), roi, seed };
        prop_assert_eq!(apply_distortion(&base, &spec).unwrap(), base);
    }
}

#[test]
fn checkpoint_bytes_round_trip() {
    let config = ModelConfig {
        embed_dim: 16,
        num_layers: 1,
        num_heads: 2,
        mlp_dim: 32,
        ..ModelConfig::default()
    };
    let model = Model::new(config).unwrap();
    let training = TrainingState {
        stage: "sft".into(),
        step: 17,
        frozen_seed: model.config.seed,
    };
    let ckpt = Checkpoint::from_model(&model, training.clone(), None);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert_eq!(back.training, training);
    assert_eq!(back.config, model.config);
    let restored = back.into_model().unwrap();
    for ((_, a), (_, b)) in model.params.iter().zip(restored.params.iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn jsonl_round_trips_in_both_storage_modes() {
    let corpus = build_corpus(&CorpusConfig {
        n_stage1: 12,
        n_stage2: 5,
        n_heldout: 0,
        seed: 4,
        forge: ForgeConfig::default(),
        ..CorpusConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for storage in [ImageStorage::Path, ImageStorage::Base64] {
        let s1 = dir.path().join(format!("s1_{storage}.jsonl"));
        let s2 = dir.path().join(format!("s2_{storage}.jsonl"));
        write_stage1(&s1, &corpus.stage1, storage).unwrap();
        write_stage2(&s2, &corpus.stage2, storage).unwrap();
        assert_eq!(read_stage1(&s1, 32).unwrap(), corpus.stage1, "{storage}");
        for (a, b) in read_stage2(&s2, 32).unwrap().iter().zip(&corpus.stage2) {
            assert_eq!(a.image, b.image, "{storage}");
            assert_eq!((a.mos, a.mos_native, a.native_range), (b.mos, b.mos_native, b.native_range), "{storage}");
            assert_eq!((&a.prompt, a.polarity), (&b.prompt, b.polarity), "{storage}");
            assert_eq!(a.source, format!("s2_{storage}"), "records are tagged with the file stem");
        }
    }
}
