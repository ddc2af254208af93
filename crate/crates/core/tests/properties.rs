mod common;

use common::*;
use lowrank::attacks::{rank_from_fraction, Algorithm, AttackConfig, Attacker, GradThrough, InitStrategy};
use lowrank::data::{self, AttackRecord, Dataset, Generator};
use lowrank::linalg;
use lowrank::model::{Model, ModelSpec};
use lowrank::tensor::image_norm;
use lowrank::{NormKind, Tensor4};
use proptest::prelude::*;

fn algorithms() -> impl Strategy<Value = Algorithm> {
    prop_oneof![
        Just(Algorithm::Fgsm),
        Just(Algorithm::Pgd),
        Just(Algorithm::LoraPgd),
        Just(Algorithm::RankProjectedPgd),
    ]
}

fn config(algo: Algorithm, tau: f64, steps: usize, p: f64, kind: NormKind, seed: u64) -> AttackConfig {
    let steps = if algo == Algorithm::Fgsm { 1 } else { steps };
    let mut cfg = AttackConfig::new(algo, tau, steps).with_norm(kind).with_seed(seed);
    if algo.is_low_rank() {
        cfg = cfg.with_rank_fraction(p);
    }
    cfg
}

fn setup(seed: u64) -> (Model, Dataset) {
    let model = Model::init(ModelSpec::cnn([2, 8, 8], 3).unwrap(), seed).unwrap();
    let ds = data::synth_dataset(Generator::Blobs, 4, 2, 8, 8, 3, seed).unwrap();
    (model, ds)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn budget_is_met_exactly(
        algo in algorithms(),
        tau in 0.05f64..2.0,
        steps in 1usize..4,
        p in 0.1f64..1.0,
        nuclear in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let kind = if nuclear { NormKind::Nuclear } else { NormKind::Frobenius };
        let (model, ds) = setup(seed);
        let cfg = config(algo, tau, steps, p, kind, seed);
        let res = Attacker::new(&model).run(&ds.images, &ds.labels, &cfg).unwrap();
        let delta = res.perturbation.materialize();
        let norms = image_norm(&delta, kind);
        for (b, n) in norms.iter().enumerate() {
            if !res.degenerate[b] {
                prop_assert!((n - tau).abs() <= 1e-9 * tau.max(1.0), "{algo} image {b}: {n} vs {tau}");
            }
        }
        // Adversarial images are the clamped sum.
        let want = Tensor4::from_fn(delta.dims(), |i| (ds.images.get(i) + delta.get(i)).clamp(0.0, 1.0));
        prop_assert!(res.adversarial.max_abs_diff(&want) <= 1e-15);
    }

    #[test]
    fn linf_budget_for_full_rank_attacks(tau in 0.01f64..0.3, steps in 1usize..4, seed in 0u64..1000) {
        let (model, ds) = setup(seed);
        let cfg = AttackConfig::pgd(tau, steps).with_norm(NormKind::Linf);
        let res = Attacker::new(&model).run(&ds.images, &ds.labels, &cfg).unwrap();
        for n in image_norm(&res.perturbation.materialize(), NormKind::Linf) {
            prop_assert!((n - tau).abs() <= 1e-12);
        }
    }

    #[test]
    fn low_rank_outputs_have_the_requested_rank(
        lora in any::<bool>(),
        p in 0.1f64..0.6,
        seed in 0u64..1000,
    ) {
        let (model, ds) = setup(seed);
        let algo = if lora { Algorithm::LoraPgd } else { Algorithm::RankProjectedPgd };
        let cfg = config(algo, 0.5, 3, p, NormKind::Frobenius, seed);
        let r = rank_from_fraction(p, 8, 8);
        let res = Attacker::new(&model).run(&ds.images, &ds.labels, &cfg).unwrap();
        for spectrum in linalg::singular_spectrum(&res.perturbation.materialize()) {
            for c in 0..spectrum.rows() {
                let s = spectrum.row(c);
                if r < s.len() && s[0] > 0.0 {
                    prop_assert!(s[r] / s[0] <= 1e-6, "rank {r}: {:?}", s);
                }
            }
        }
    }

    #[test]
    fn chunking_does_not_change_results(
        algo in algorithms(),
        chunk in 1usize..5,
        seed in 0u64..1000,
        warm in any::<bool>(),
    ) {
        let (model, ds) = setup(seed);
        let init = if warm { InitStrategy::Warmup } else { InitStrategy::Random };
        let cfg = config(algo, 0.8, 2, 0.25, NormKind::Frobenius, seed).with_init(init);
        let attacker = Attacker::new(&model);
        let whole = attacker.run(&ds.images, &ds.labels, &cfg).unwrap();
        let parts = attacker.run_chunked(&ds.images, &ds.labels, &cfg, chunk).unwrap();
        prop_assert_eq!(whole.adversarial.data(), parts.adversarial.data());
        prop_assert_eq!(whole.degenerate, parts.degenerate);
    }

    #[test]
    fn straight_through_still_meets_the_budget(seed in 0u64..1000, tau in 0.1f64..1.5) {
        let (model, ds) = setup(seed);
        let cfg = AttackConfig::lora_pgd(tau, 3, 0.25).with_grad_through(GradThrough::StraightThrough);
        let res = Attacker::new(&model).run(&ds.images, &ds.labels, &cfg).unwrap();
        for (b, n) in image_norm(&res.perturbation.materialize(), NormKind::Frobenius).iter().enumerate() {
            if !res.degenerate[b] {
                prop_assert!((n - tau).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn eckart_young_tail_energy(rows in 1usize..10, cols in 1usize..10, r in 0usize..10, seed in 0u64..10_000) {
        let a = uniform_matrix(rows, cols, seed);
        let svd = linalg::svd(&a).unwrap();
        let r = r.min(svd.sigma.len());
        let diff = svd.reconstruct_rank(r);
        let err: f64 = a.data().iter().zip(diff.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let tail: f64 = svd.sigma[r..].iter().map(|s| s * s).sum();
        prop_assert!((err - tail).abs() <= 1e-12 * (1.0 + a.frobenius().powi(2)));
    }

    #[test]
    fn truncation_is_idempotent(seed in 0u64..10_000, r in 1usize..5) {
        let x = uniform_tensor([1, 2, 6, 5], -1.0, 1.0, seed);
        let once = linalg::truncate_rank(&x, r).unwrap();
        let twice = linalg::truncate_rank(&once, r).unwrap();
        prop_assert!(once.max_abs_diff(&twice) <= 1e-12);
        let (u, v) = linalg::factor_split(&x, r).unwrap();
        let product = naive_channel_matmul(&u, &v);
        prop_assert!(product.max_abs_diff(&once) <= 1e-12);
    }

    #[test]
    fn rank_rounding_stays_in_range(p in 0.001f64..=1.0, n in 1usize..64, m in 1usize..64) {
        let r = rank_from_fraction(p, n, m);
        prop_assert!(r >= 1 && r <= n.min(m));
    }

    #[test]
    fn dataset_bytes_round_trip(count in 1usize..5, c in 1usize..4, n in 1usize..7, m in 1usize..7, seed in 0u64..100) {
        let ds = data::synth_dataset(Generator::Stripes, count, c, n, m, 2, seed).unwrap();
        let bytes = data::encode_dataset(&ds);
        prop_assert_eq!(data::decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn any_flipped_byte_is_rejected(pos in 0usize..10_000, bit in 0u8..8, seed in 0u64..100) {
        let ds = data::synth_dataset(Generator::Blobs, 2, 1, 4, 4, 2, seed).unwrap();
        let mut bytes = data::encode_dataset(&ds);
        let pos = pos % bytes.len();
        bytes[pos] ^= 1 << bit;
        prop_assert!(data::decode_dataset(&bytes).is_err());
    }

    #[test]
    fn attack_bytes_round_trip(lora in any::<bool>(), seed in 0u64..100) {
        let (model, ds) = setup(seed);
        let algo = if lora { Algorithm::LoraPgd } else { Algorithm::Pgd };
        let cfg = config(algo, 0.5, 2, 0.25, NormKind::Frobenius, seed);
        let res = Attacker::new(&model).run(&ds.images, &ds.labels, &cfg).unwrap();
        let rec = AttackRecord::from(&res);
        let bytes = data::encode_attack(&rec);
        let back = data::decode_attack(&bytes).unwrap();
        prop_assert_eq!(data::encode_attack(&back), bytes);
        prop_assert_eq!(back.rank(), if lora { 2 } else { 0 });
        let full = back.perturbation.materialize();
        prop_assert!(full.max_abs_diff(&res.perturbation.materialize()) <= 1e-6);
    }
}

#[test]
fn zero_budget_is_the_identity_for_every_algorithm() {
    let (model, ds) = setup(1);
    for algo in [
        Algorithm::Fgsm,
        Algorithm::Pgd,
        Algorithm::LoraPgd,
        Algorithm::RankProjectedPgd,
    ] {
        let cfg = config(algo, 0.0, 3, 0.25, NormKind::Frobenius, 0);
        let res = Attacker::new(&model).run(&ds.images, &ds.labels, &cfg).unwrap();
        assert_eq!(res.adversarial, ds.images, "{algo}");
        assert!(res.degenerate.iter().all(|d| !d), "{algo}");
    }
}

#[test]
fn model_bytes_round_trip() {
    for spec in [
        ModelSpec::linear([1, 3, 3], 2).unwrap(),
        ModelSpec::mlp([2, 4, 4], 3).unwrap(),
        ModelSpec::cnn([3, 8, 8], 4).unwrap(),
    ] {
        let model = Model::init(spec.clone(), 5).unwrap();
        let bytes = data::encode_model(&spec, model.params()).unwrap();
        let (spec2, params2) = data::decode_model(&bytes).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(data::encode_model(&spec2, &params2).unwrap(), bytes);
        let x = uniform_tensor(
            [2, spec.input_dims[0], spec.input_dims[1], spec.input_dims[2]],
            0.0,
            1.0,
            3,
        );
        let m2 = Model::new(spec2, params2).unwrap();
        let a = model.forward(&x).unwrap();
        let b = m2.forward(&x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-5);
    }
}
