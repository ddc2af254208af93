//! Qualitative behaviour of the attacks on a small trained fixture.

use std::sync::OnceLock;

use lowrank::analysis::robust_accuracy;
use lowrank::attacks::{Algorithm, AttackConfig, Attacker, InitStrategy};
use lowrank::data::{self, Dataset, Generator};
use lowrank::model::{adversarial_train, train_sgd, Model, ModelSpec, TrainConfig};
use lowrank::NormKind;

const DIMS: [usize; 3] = [3, 16, 16];
const CLASSES: usize = 10;
const TRAIN_TAU: f64 = 0.5;

struct Fixture {
    standard: Model,
    robust: Model,
    test: Dataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let [c, n, m] = DIMS;
        let train = data::synth_dataset(Generator::Blobs, 600, c, n, m, CLASSES, 11).unwrap();
        let test = data::synth_dataset(Generator::Blobs, 200, c, n, m, CLASSES, 12).unwrap();
        let spec = ModelSpec::cnn(DIMS, CLASSES).unwrap();
        let cfg = TrainConfig::new(6, 16, 0.05, 13);
        let standard = train_sgd(&spec, &train, &cfg).unwrap();
        let adv_cfg = TrainConfig {
            adversarial: Some(AttackConfig::pgd(TRAIN_TAU, 3)),
            ..cfg
        };
        let robust = adversarial_train(&spec, &train, &adv_cfg).unwrap();
        Fixture {
            standard: Model::new(spec.clone(), standard.params).unwrap(),
            robust: Model::new(spec, robust.params).unwrap(),
            test,
        }
    })
}

fn rho(model: &Model, ds: &Dataset, cfg: &AttackConfig) -> f64 {
    let f = fixture();
    let attacker = Attacker::new(model).with_transfer_source(&f.standard);
    robust_accuracy(&attacker, "m", ds, cfg).unwrap().rho
}

fn stable(model: &Model, cfg: &AttackConfig) -> f64 {
    rho(model, &fixture().test, cfg)
}

#[test]
fn every_attack_raises_the_loss() {
    let f = fixture();
    let ds = f.test.slice(0, 100);
    let (before, _) = f.standard.input_gradients(&ds.images, &ds.labels).unwrap();
    for cfg in [
        AttackConfig::fgsm(0.5),
        AttackConfig::pgd(0.5, 5),
        AttackConfig::lora_pgd(0.5, 5, 0.1),
        AttackConfig::rank_projected_pgd(0.5, 5, 0.1),
    ] {
        let adv = Attacker::new(&f.standard).run(&ds.images, &ds.labels, &cfg).unwrap();
        let (after, _) = f.standard.input_gradients(&adv.adversarial, &ds.labels).unwrap();
        let up = before.iter().zip(&after).filter(|(b, a)| a >= b).count();
        assert!(
            up as f64 >= 0.95 * ds.len() as f64,
            "{}: {up}/{}",
            cfg.algorithm,
            ds.len()
        );
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&after) > mean(&before), "{}", cfg.algorithm);
    }
}

#[test]
fn iterating_beats_a_single_step() {
    let f = fixture();
    for tau in [0.5, 1.0] {
        let fgsm = stable(&f.standard, &AttackConfig::fgsm(tau));
        let pgd = stable(&f.standard, &AttackConfig::pgd(tau, 10));
        assert!(pgd <= fgsm, "tau {tau}: pgd {pgd} fgsm {fgsm}");
    }
}

#[test]
fn larger_rank_is_not_weaker() {
    let f = fixture();
    for model in [&f.standard, &f.robust] {
        for tau in [0.75, 1.0] {
            let low = stable(model, &AttackConfig::lora_pgd(tau, 10, 0.1));
            let high = stable(model, &AttackConfig::lora_pgd(tau, 10, 0.5));
            assert!(high <= low + 0.02, "tau {tau}: 50% {high} vs 10% {low}");
        }
    }
}

#[test]
fn fgsm_starts_do_not_hurt() {
    let f = fixture();
    let mut cells = 0;
    let mut wins = 0;
    for model in [&f.standard, &f.robust] {
        for p in [0.1, 0.3, 0.5] {
            let base = AttackConfig::lora_pgd(1.0, 10, p);
            let random = stable(model, &base);
            for init in [InitStrategy::Transfer, InitStrategy::Warmup] {
                cells += 1;
                if stable(model, &base.clone().with_init(init)) <= random {
                    wins += 1;
                }
            }
        }
    }
    assert!(wins as f64 >= 0.6 * cells as f64, "{wins}/{cells}");
}

#[test]
fn warmup_on_the_standard_model_is_transfer() {
    let f = fixture();
    let ds = f.test.slice(0, 20);
    let cfg = AttackConfig::lora_pgd(0.75, 4, 0.3);
    let attacker = Attacker::new(&f.standard).with_transfer_source(&f.standard);
    let warm = attacker
        .run(&ds.images, &ds.labels, &cfg.clone().with_init(InitStrategy::Warmup))
        .unwrap();
    let transfer = attacker
        .run(&ds.images, &ds.labels, &cfg.with_init(InitStrategy::Transfer))
        .unwrap();
    assert_eq!(warm.adversarial, transfer.adversarial);
    assert_eq!(warm.perturbation.materialize(), transfer.perturbation.materialize());
}

#[test]
fn full_rank_projection_is_plain_pgd() {
    let f = fixture();
    let ds = f.test.slice(0, 20);
    let attacker = Attacker::new(&f.robust);
    for kind in [NormKind::Frobenius, NormKind::Nuclear] {
        let pgd = attacker
            .run(&ds.images, &ds.labels, &AttackConfig::pgd(0.75, 5).with_norm(kind))
            .unwrap();
        let cfg = AttackConfig::new(Algorithm::RankProjectedPgd, 0.75, 5)
            .with_rank_fraction(1.0)
            .with_norm(kind);
        let projected = attacker.run(&ds.images, &ds.labels, &cfg).unwrap();
        let diff = pgd
            .perturbation
            .materialize()
            .max_abs_diff(&projected.perturbation.materialize());
        assert!(diff <= 1e-9, "{kind:?}: {diff}");
    }
}
