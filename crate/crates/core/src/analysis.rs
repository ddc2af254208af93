//! Measurements: robust accuracy, singular-spectrum change, nuclear-norm
//! profiles, memory estimates and wall-clock timing.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackConfig, Attacker};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::linalg;
use crate::tensor::Tensor4;

/// Identifier of the spectrum normalization implemented below.
pub const SPECTRUM_RULE: &str = "maxnorm-v1";

/// Images attacked per call during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracyReport {
    pub model_id: String,
    pub attack_config: AttackConfig,
    /// Fraction of images whose predicted class survives the attack.
    pub rho: f64,
    pub n_images: usize,
    pub clean_accuracy: f64,
    pub per_image_stable: Vec<bool>,
}

/// One line of `robust_accuracy.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustAccuracyRow {
    pub model_id: String,
    pub attack: String,
    pub steps: usize,
    pub tau: f64,
    pub norm: String,
    pub rank_frac: Option<f64>,
    pub init: String,
    pub rho: f64,
    pub clean_acc: f64,
    pub n: usize,
}

impl RobustAccuracyReport {
    pub fn csv_row(&self) -> RobustAccuracyRow {
        let cfg = &self.attack_config;
        RobustAccuracyRow {
            model_id: self.model_id.clone(),
            attack: cfg.algorithm.as_str().into(),
            steps: cfg.steps,
            tau: cfg.tau,
            norm: cfg.norm_kind.as_str().into(),
            rank_frac: cfg.rank_fraction,
            init: cfg.init.as_str().into(),
            rho: self.rho,
            clean_acc: self.clean_accuracy,
            n: self.n_images,
        }
    }
}

/// Attacks every image and compares the predicted class before and after.
///
/// `attacker` supplies the model and, for transfer initialization, the
/// standard model; images are processed in chunks with their global index
/// as random-initialization stream, so the result does not depend on
/// `EVAL_CHUNK`.
pub fn robust_accuracy(
    attacker: &Attacker<'_>,
    model_id: &str,
    dataset: &Dataset,
    cfg: &AttackConfig,
) -> Result<RobustAccuracyReport> {
    ensure!(!dataset.is_empty(), "dataset is empty");
    cfg.validate()?;
    let model = attacker.model();
    let mut stable = Vec::with_capacity(dataset.len());
    let mut correct = 0usize;
    for start in (0..dataset.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(dataset.len());
        let chunk = dataset.slice(start, end);
        let clean = model.predict_class(&chunk.images)?;
        correct += clean.iter().zip(&chunk.labels).filter(|(p, l)| p == l).count();
        let adv = attacker
            .with_image_offset(start as u64)
            .run(&chunk.images, &chunk.labels, cfg)?
            .adversarial;
        let attacked = model.predict_class(&adv)?;
        stable.extend(clean.iter().zip(&attacked).map(|(a, b)| a == b));
    }
    let n = dataset.len();
    Ok(RobustAccuracyReport {
        model_id: model_id.to_string(),
        attack_config: cfg.clone(),
        rho: stable.iter().filter(|&&s| s).count() as f64 / n as f64,
        n_images: n,
        clean_accuracy: correct as f64 / n as f64,
        per_image_stable: stable,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Entry `j` is the mean normalized change of the `(j+1)`-th singular value.
    pub mean_relative_change: Vec<f64>,
    pub n_images: usize,
    pub normalization_rule_id: String,
}

/// One line of `spectrum.csv`; `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub index: usize,
    pub mean_rel_change: f64,
}

impl SpectrumReport {
    pub fn csv_rows(&self) -> Vec<SpectrumRow> {
        self.mean_relative_change
            .iter()
            .enumerate()
            .map(|(j, &v)| SpectrumRow {
                index: j + 1,
                mean_rel_change: v,
            })
            .collect()
    }

    /// Mean over indices `[from, to)`.
    pub fn band_mean(&self, from: usize, to: usize) -> f64 {
        let band = &self.mean_relative_change[from..to];
        band.iter().sum::<f64>() / band.len() as f64
    }
}

/// Per image and channel, `d_j = |σ_j(attacked) − σ_j(clean)|`, divided by
/// the largest `d` of that image over all channels and indices; then averaged
/// over channels and then over images. Unchanged images contribute zeros.
pub fn spectrum_change_report(clean: &Tensor4, attacked: &Tensor4) -> Result<SpectrumReport> {
    ensure!(
        clean.dims() == attacked.dims(),
        "clean {:?} and attacked {:?} dims differ",
        clean.dims(),
        attacked.dims()
    );
    let [b, c, n, m] = clean.dims();
    let r = n.min(m);
    let s0 = linalg::singular_spectrum(clean);
    let s1 = linalg::singular_spectrum(attacked);
    let mut acc = vec![0.0; r];
    for (a, z) in s0.iter().zip(&s1) {
        let d: Vec<f64> = a.data().iter().zip(z.data()).map(|(x, y)| (x - y).abs()).collect();
        let max = d.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            continue;
        }
        let mut per_image = vec![0.0; r];
        for ch in 0..c {
            for j in 0..r {
                per_image[j] += d[ch * r + j] / max;
            }
        }
        for j in 0..r {
            acc[j] += per_image[j] / c as f64;
        }
    }
    Ok(SpectrumReport {
        mean_relative_change: acc.iter().map(|v| v / b as f64).collect(),
        n_images: b,
        normalization_rule_id: SPECTRUM_RULE.into(),
    })
}

/// Mean nuclear norm of a batch of perturbations.
pub fn nuclear_profile(perturbations: &Tensor4) -> f64 {
    let norms = linalg::nuclear_norm(perturbations);
    norms.iter().sum::<f64>() / norms.len() as f64
}

/// One line of the nuclear-norm profile CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuclearRow {
    pub model_id: String,
    pub tau: f64,
    pub steps: usize,
    pub mean_nuclear: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStat {
    pub algo: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub d: usize,
    pub c: usize,
    pub n: usize,
    pub m: usize,
    /// `None` for a full perturbation.
    pub rank: Option<usize>,
    pub elements_full: u64,
    pub elements_factored: u64,
    pub ratio: f64,
    pub timings: Vec<TimingStat>,
}

/// One line of `resources.csv`. `r` is 0 for algorithms that hold the full
/// perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub algo: String,
    pub d: usize,
    pub c: usize,
    pub n: usize,
    pub m: usize,
    pub r: usize,
    pub elements: u64,
    pub ratio: f64,
    pub median_ms: f64,
}

/// Element counts of a full `D·C·N·M` perturbation and of its rank-`r`
/// factors `D·C·r·(N + M)`.
pub fn memory_estimate(d: usize, c: usize, n: usize, m: usize, rank: Option<usize>) -> Result<ResourceReport> {
    ensure!(d >= 1 && c >= 1 && n >= 1 && m >= 1, "dims must be >= 1");
    let full = d as u64 * c as u64 * n as u64 * m as u64;
    let factored = match rank {
        Some(r) => {
            ensure!(r >= 1 && r <= n.min(m), "rank must lie in 1..={}, got {r}", n.min(m));
            d as u64 * c as u64 * r as u64 * (n + m) as u64
        }
        None => full,
    };
    Ok(ResourceReport {
        d,
        c,
        n,
        m,
        rank,
        elements_full: full,
        elements_factored: factored,
        ratio: factored as f64 / full as f64,
        timings: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub warmup: usize,
    pub repetitions: usize,
    /// Worker threads for the measured section; `None` uses the current pool.
    pub threads: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: 1,
            repetitions: 5,
            threads: None,
        }
    }
}

/// Median wall-clock time of attacking one batch, per configuration.
///
/// Configurations are interleaved within every repetition so slow drifts of
/// the machine affect all of them alike.
pub fn timing_bench(
    attacker: &Attacker<'_>,
    batch: &Dataset,
    configs: &[AttackConfig],
    opts: BenchOptions,
) -> Result<Vec<TimingStat>> {
    ensure!(opts.warmup >= 1, "need at least one warm-up run");
    ensure!(opts.repetitions >= 1, "need at least one repetition");
    ensure!(!batch.is_empty(), "benchmark batch is empty");
    for cfg in configs {
        cfg.validate()?;
    }
    let run = || -> Result<Vec<TimingStat>> {
        let mut samples = vec![Vec::with_capacity(opts.repetitions); configs.len()];
        for round in 0..opts.warmup + opts.repetitions {
            for (k, cfg) in configs.iter().enumerate() {
                let t0 = Instant::now();
                attacker.run(&batch.images, &batch.labels, cfg)?;
                let ms = t0.elapsed().as_secs_f64() * 1e3;
                if round >= opts.warmup {
                    samples[k].push(ms);
                }
            }
        }
        Ok(configs
            .iter()
            .zip(samples)
            .map(|(cfg, mut s)| {
                s.sort_by(f64::total_cmp);
                TimingStat {
                    algo: cfg.algorithm.as_str().into(),
                    median_ms: median(&s),
                    min_ms: s[0],
                    max_ms: s[s.len() - 1],
                    samples: s.len(),
                }
            })
            .collect())
    };
    match opts.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::contract(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn median(sorted: &[f64]) -> f64 {
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    }
}
