//! Gradient attacks: FGSM, full-rank PGD, low-rank PGD on channel-wise
//! factors, and PGD followed by SVD rank projection.
//!
//! All attacks are untargeted and use the true labels. Every image is
//! attacked independently; per-image loss gradients are never averaged over
//! the batch, so results do not depend on how a dataset is chunked.
//!
//! Budgets are equalities: before clamping into `[0, 1]`, each non-degenerate
//! perturbation has norm exactly `tau` in the configured norm. For the
//! nuclear norm the iterations run on the Frobenius sphere of radius `tau`
//! and the result is rescaled to nuclear norm `tau` once, after the last step.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::linalg;
use crate::model::Model;
use crate::tensor::{
    channel_matmul, channel_matmul_nt, channel_matmul_tn, clamp_box, image_norm, normalize_per_image, NormKind,
    Tensor4, DEGENERATE_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Fgsm,
    Pgd,
    LoraPgd,
    RankProjectedPgd,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Fgsm => "fgsm",
            Algorithm::Pgd => "pgd",
            Algorithm::LoraPgd => "lora_pgd",
            Algorithm::RankProjectedPgd => "rank_projected_pgd",
        }
    }

    pub fn is_low_rank(self) -> bool {
        matches!(self, Algorithm::LoraPgd | Algorithm::RankProjectedPgd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Algorithm::Fgsm),
            "pgd" => Ok(Algorithm::Pgd),
            "lora_pgd" | "lora-pgd" => Ok(Algorithm::LoraPgd),
            "rank_projected_pgd" | "rank-projected-pgd" => Ok(Algorithm::RankProjectedPgd),
            other => Err(Error::Contract(format!("unknown attack algorithm {other:?}"))),
        }
    }
}

/// Starting point of the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Low-rank: Gaussian left factor, zero right factor. Full-rank: zero.
    Random,
    /// FGSM computed on a separate standard model.
    Transfer,
    /// FGSM computed on the attacked model itself.
    Warmup,
}

impl InitStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::Transfer => "transfer",
            InitStrategy::Warmup => "warmup",
        }
    }
}

impl FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitStrategy::Random),
            "transfer" => Ok(InitStrategy::Transfer),
            "warmup" | "warm-up" => Ok(InitStrategy::Warmup),
            other => Err(Error::Contract(format!("unknown init strategy {other:?}"))),
        }
    }
}

/// How the low-rank factor gradients pass through `clamp(X + τ·normalize(·))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradThrough {
    /// Exact chain rule: clamp mask and the normalization Jacobian.
    Exact,
    /// Treat normalize∘clamp as the identity in the backward pass.
    StraightThrough,
}

impl FromStr for GradThrough {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(GradThrough::Exact),
            "straight_through" | "straight-through" => Ok(GradThrough::StraightThrough),
            other => Err(Error::Contract(format!("unknown gradient mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub tau: f64,
    pub norm_kind: NormKind,
    /// Fraction of `min(N, M)` kept; required exactly for low-rank algorithms.
    pub rank_fraction: Option<f64>,
    pub init: InitStrategy,
    pub seed: u64,
    pub normalize_grad_through: GradThrough,
    /// Low-rank only: rescale each final perturbation to the nuclear norm of
    /// the PGD attack (same `tau`, `steps`) on the same image.
    #[serde(default)]
    pub nuclear_match: bool,
}

impl AttackConfig {
    pub fn new(algorithm: Algorithm, tau: f64, steps: usize) -> Self {
        AttackConfig {
            algorithm,
            steps,
            tau,
            norm_kind: NormKind::Frobenius,
            rank_fraction: algorithm.is_low_rank().then_some(0.1),
            init: InitStrategy::Random,
            seed: 0,
            normalize_grad_through: GradThrough::Exact,
            nuclear_match: false,
        }
    }

    pub fn fgsm(tau: f64) -> Self {
        Self::new(Algorithm::Fgsm, tau, 1)
    }

    pub fn pgd(tau: f64, steps: usize) -> Self {
        Self::new(Algorithm::Pgd, tau, steps)
    }

    pub fn lora_pgd(tau: f64, steps: usize, rank_fraction: f64) -> Self {
        Self::new(Algorithm::LoraPgd, tau, steps).with_rank_fraction(rank_fraction)
    }

    pub fn rank_projected_pgd(tau: f64, steps: usize, rank_fraction: f64) -> Self {
        Self::new(Algorithm::RankProjectedPgd, tau, steps).with_rank_fraction(rank_fraction)
    }

    pub fn with_rank_fraction(mut self, p: f64) -> Self {
        self.rank_fraction = Some(p);
        self
    }

    pub fn with_norm(mut self, kind: NormKind) -> Self {
        self.norm_kind = kind;
        self
    }

    pub fn with_init(mut self, init: InitStrategy) -> Self {
        self.init = init;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_grad_through(mut self, g: GradThrough) -> Self {
        self.normalize_grad_through = g;
        self
    }

    pub fn with_nuclear_match(mut self, on: bool) -> Self {
        self.nuclear_match = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.steps >= 1, "steps must be >= 1");
        ensure!(
            self.tau >= 0.0 && self.tau.is_finite(),
            "tau must be finite and >= 0, got {}",
            self.tau
        );
        match (self.algorithm.is_low_rank(), self.rank_fraction) {
            (true, Some(p)) => ensure!(p > 0.0 && p <= 1.0, "rank_fraction must lie in (0, 1], got {p}"),
            (true, None) => return Err(Error::contract(format!("{} needs a rank fraction", self.algorithm))),
            (false, Some(_)) => {
                return Err(Error::contract(format!(
                    "{} does not take a rank fraction",
                    self.algorithm
                )))
            }
            (false, None) => {}
        }
        if self.algorithm == Algorithm::LoraPgd {
            ensure!(
                self.norm_kind != NormKind::Linf,
                "lora_pgd supports frobenius and nuclear budgets only"
            );
        }
        if self.nuclear_match {
            ensure!(
                self.algorithm.is_low_rank(),
                "nuclear matching applies to low-rank algorithms only"
            );
        }
        Ok(())
    }

    /// Rank used for `N × M` images, or `None` for full-rank algorithms.
    pub fn rank_for(&self, n: usize, m: usize) -> Option<usize> {
        self.rank_fraction.map(|p| rank_from_fraction(p, n, m))
    }
}

/// `max(1, round(p·min(n, m)))`, rounding half away from zero.
pub fn rank_from_fraction(p: f64, n: usize, m: usize) -> usize {
    ((p * n.min(m) as f64).round() as usize).max(1)
}

/// Channel-wise factors of a rank-`rank` perturbation.
///
/// The factors already carry the budget scaling, so the perturbation is
/// exactly `u ⊗_C v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredPerturbation {
    /// `B × C × N × r`
    pub u: Tensor4,
    /// `B × C × r × M`
    pub v: Tensor4,
    pub rank: usize,
    pub tau: f64,
    pub norm_kind: NormKind,
}

impl FactoredPerturbation {
    pub fn materialize(&self) -> Tensor4 {
        channel_matmul(&self.u, &self.v).expect("factor shapes are checked at construction")
    }

    pub fn dims(&self) -> [usize; 4] {
        let [b, c, n, _] = self.u.dims();
        [b, c, n, self.v.cols()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    Full(Tensor4),
    Factored(FactoredPerturbation),
}

impl Perturbation {
    pub fn materialize(&self) -> Tensor4 {
        match self {
            Perturbation::Full(t) => t.clone(),
            Perturbation::Factored(f) => f.materialize(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub perturbation: Perturbation,
    /// `clamp(X + δ, 0, 1)`
    pub adversarial: Tensor4,
    /// Images whose attack vanished (zero gradient or zero factor product).
    pub degenerate: Vec<bool>,
    pub steps_executed: usize,
    pub tau: f64,
    pub norm_kind: NormKind,
}

/// Runs attacks against one model.
#[derive(Debug, Clone, Copy)]
pub struct Attacker<'a> {
    model: &'a Model,
    transfer_source: Option<&'a Model>,
    image_offset: u64,
}

impl<'a> Attacker<'a> {
    pub fn new(model: &'a Model) -> Self {
        Attacker {
            model,
            transfer_source: None,
            image_offset: 0,
        }
    }

    pub fn model(&self) -> &'a Model {
        self.model
    }

    /// Standard model used by [`InitStrategy::Transfer`].
    pub fn with_transfer_source(mut self, model: &'a Model) -> Self {
        self.transfer_source = Some(model);
        self
    }

    /// Global index of the first image in the batches passed to this
    /// attacker; random initialization is keyed on `(seed, image index)`.
    pub fn with_image_offset(mut self, offset: u64) -> Self {
        self.image_offset = offset;
        self
    }

    pub fn run(&self, x: &Tensor4, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
        cfg.validate()?;
        match cfg.algorithm {
            Algorithm::Fgsm => self.fgsm(x, labels, cfg.tau, cfg.norm_kind),
            Algorithm::Pgd => self.pgd(x, labels, cfg),
            Algorithm::LoraPgd if cfg.nuclear_match => {
                let targets = self.nuclear_targets(x, labels, cfg)?;
                self.lora_pgd_scaled(x, labels, cfg, Some(&targets))
            }
            Algorithm::LoraPgd => self.lora_pgd(x, labels, cfg),
            Algorithm::RankProjectedPgd if cfg.nuclear_match => {
                let targets = self.nuclear_targets(x, labels, cfg)?;
                self.rank_projected_scaled(x, labels, cfg, Some(&targets))
            }
            Algorithm::RankProjectedPgd => self.rank_projected_pgd(x, labels, cfg),
        }
    }

    /// Runs `cfg` over `x` in chunks of `chunk` images and joins the results.
    /// Random initialization keys on global image indices, so the output
    /// does not depend on `chunk`.
    pub fn run_chunked(&self, x: &Tensor4, labels: &[usize], cfg: &AttackConfig, chunk: usize) -> Result<AttackResult> {
        ensure!(chunk >= 1, "chunk size must be >= 1");
        self.check_batch(x, labels)?;
        let mut parts = Vec::new();
        for start in (0..x.batch()).step_by(chunk) {
            let end = (start + chunk).min(x.batch());
            let att = self.with_image_offset(self.image_offset + start as u64);
            parts.push(att.run(&x.slice_batch(start, end), &labels[start..end], cfg)?);
        }
        join_results(parts)
    }

    /// Single gradient step from the clean image.
    pub fn fgsm(&self, x: &Tensor4, labels: &[usize], tau: f64, kind: NormKind) -> Result<AttackResult> {
        check_tau(tau)?;
        self.check_batch(x, labels)?;
        let (delta, degenerate) = self.pgd_iterate(x, labels, tau, kind, 1, Tensor4::zeros(x.dims()))?;
        let (delta, degenerate) = finish_full(delta, degenerate, tau, kind)?;
        full_result(x, delta, degenerate, 1, tau, kind)
    }

    pub fn pgd(&self, x: &Tensor4, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
        cfg.validate()?;
        ensure!(
            cfg.algorithm == Algorithm::Pgd,
            "pgd called with algorithm {}",
            cfg.algorithm
        );
        self.check_batch(x, labels)?;
        let (delta, degenerate) = self.pgd_raw(x, labels, cfg)?;
        let (delta, degenerate) = finish_full(delta, degenerate, cfg.tau, cfg.norm_kind)?;
        full_result(x, delta, degenerate, cfg.steps, cfg.tau, cfg.norm_kind)
    }

    /// PGD iterate on the Frobenius (or l∞) sphere, before any final
    /// nuclear rescaling.
    fn pgd_raw(&self, x: &Tensor4, labels: &[usize], cfg: &AttackConfig) -> Result<(Tensor4, Vec<bool>)> {
        let start = match cfg.init {
            InitStrategy::Random => Tensor4::zeros(x.dims()),
            InitStrategy::Transfer => {
                let src = self
                    .transfer_source
                    .ok_or_else(|| Error::contract("transfer initialization needs a standard model"))?;
                Attacker::new(src)
                    .fgsm(x, labels, cfg.tau, loop_norm(cfg.norm_kind))?
                    .perturbation
                    .materialize()
            }
            InitStrategy::Warmup => self
                .fgsm(x, labels, cfg.tau, loop_norm(cfg.norm_kind))?
                .perturbation
                .materialize(),
        };
        self.pgd_iterate(x, labels, cfg.tau, cfg.norm_kind, cfg.steps, start)
    }

    /// `δ ← rescale_τ(δ + τ·dir(∇ℓ(clamp(X + δ))))` for `steps` steps.
    fn pgd_iterate(
        &self,
        x: &Tensor4,
        labels: &[usize],
        tau: f64,
        kind: NormKind,
        steps: usize,
        start: Tensor4,
    ) -> Result<(Tensor4, Vec<bool>)> {
        let mut delta = start;
        let mut degenerate = vec![false; x.batch()];
        let sphere = loop_norm(kind);
        for _ in 0..steps {
            let adv = clamp_box(&x.add(&delta)?, 0.0, 1.0)?;
            let (_, g) = self.model.input_gradients(&adv, labels)?;
            let dir = match sphere {
                NormKind::Linf => sign_per_image(&g),
                _ => normalize_per_image(&g).0,
            };
            let cand = delta.add(&dir.scale(tau))?;
            (delta, degenerate) = rescale_to(&cand, &vec![tau; x.batch()], sphere);
        }
        Ok((delta, degenerate))
    }

    /// Low-rank PGD on channel-wise factors `(δU, δV)`.
    pub fn lora_pgd(&self, x: &Tensor4, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
        self.lora_pgd_scaled(x, labels, cfg, None)
    }

    /// Low-rank PGD whose final perturbation is rescaled per image to the
    /// given nuclear norms instead of the configured budget.
    pub fn lora_pgd_nuclear_matched(
        &self,
        x: &Tensor4,
        labels: &[usize],
        cfg: &AttackConfig,
        targets: &[f64],
    ) -> Result<AttackResult> {
        ensure!(
            targets.len() == x.batch(),
            "{} nuclear targets for a batch of {}",
            targets.len(),
            x.batch()
        );
        self.lora_pgd_scaled(x, labels, cfg, Some(targets))
    }

    fn lora_pgd_scaled(
        &self,
        x: &Tensor4,
        labels: &[usize],
        cfg: &AttackConfig,
        nuclear_targets: Option<&[f64]>,
    ) -> Result<AttackResult> {
        cfg.validate()?;
        ensure!(
            cfg.algorithm == Algorithm::LoraPgd,
            "lora_pgd called with algorithm {}",
            cfg.algorithm
        );
        self.check_batch(x, labels)?;
        let [_, _, n, m] = x.dims();
        let r = cfg.rank_for(n, m).expect("validated low-rank config");
        let tau = cfg.tau;

        let (mut u, mut v) = match cfg.init {
            InitStrategy::Random => init_random_at(x.dims(), r, cfg.seed, self.image_offset),
            InitStrategy::Transfer => {
                let src = self
                    .transfer_source
                    .ok_or_else(|| Error::contract("transfer initialization needs a standard model"))?;
                init_transfer(src, x, labels, tau, r)?
            }
            InitStrategy::Warmup => init_warmup(self.model, x, labels, tau, r)?,
        };

        for _ in 0..cfg.steps {
            let (_, gu, gv) = lora_gradients(self.model, x, labels, &u, &v, tau, cfg.normalize_grad_through, 1.0)?;
            u = u.add(&normalize_per_image(&gu).0)?;
            v = v.add(&normalize_per_image(&gv).0)?;
        }

        let product = channel_matmul(&u, &v)?;
        let (targets, kind) = match (nuclear_targets, cfg.norm_kind) {
            (Some(t), _) => (t.to_vec(), NormKind::Nuclear),
            (None, k) => (vec![tau; x.batch()], k),
        };
        let norms = image_norm(&product, kind);
        let mut degenerate = vec![false; x.batch()];
        let mut scales = vec![0.0; x.batch()];
        for b in 0..x.batch() {
            let frob = image_norm(&product.slice_batch(b, b + 1), NormKind::Frobenius)[0];
            if targets[b] == 0.0 {
                continue;
            }
            if frob <= DEGENERATE_EPS || norms[b] <= DEGENERATE_EPS {
                degenerate[b] = true;
            } else {
                scales[b] = (targets[b] / norms[b]).sqrt();
            }
        }
        let fu = u.scale_images(&scales);
        let fv = v.scale_images(&scales);
        let factored = FactoredPerturbation {
            u: fu,
            v: fv,
            rank: r,
            tau,
            norm_kind: kind,
        };
        let delta = factored.materialize();
        let adversarial = clamp_box(&x.add(&delta)?, 0.0, 1.0)?;
        Ok(AttackResult {
            perturbation: Perturbation::Factored(factored),
            adversarial,
            degenerate,
            steps_executed: cfg.steps,
            tau,
            norm_kind: kind,
        })
    }

    /// PGD, then per-channel SVD truncation to rank `r`, then rescaling to
    /// the budget.
    pub fn rank_projected_pgd(&self, x: &Tensor4, labels: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
        self.rank_projected_scaled(x, labels, cfg, None)
    }

    fn rank_projected_scaled(
        &self,
        x: &Tensor4,
        labels: &[usize],
        cfg: &AttackConfig,
        nuclear_targets: Option<&[f64]>,
    ) -> Result<AttackResult> {
        cfg.validate()?;
        ensure!(
            cfg.algorithm == Algorithm::RankProjectedPgd,
            "rank_projected_pgd called with algorithm {}",
            cfg.algorithm
        );
        self.check_batch(x, labels)?;
        let [_, _, n, m] = x.dims();
        let r = cfg.rank_for(n, m).expect("validated low-rank config");
        let (delta, _) = self.pgd_raw(x, labels, cfg)?;
        let projected = linalg::truncate_rank(&delta, r)?;
        let (delta, degenerate) = match nuclear_targets {
            Some(t) => rescale_to(&projected, t, NormKind::Nuclear),
            None => rescale_to(&projected, &vec![cfg.tau; x.batch()], cfg.norm_kind),
        };
        let kind = if nuclear_targets.is_some() {
            NormKind::Nuclear
        } else {
            cfg.norm_kind
        };
        full_result(x, delta, degenerate, cfg.steps, cfg.tau, kind)
    }

    /// Nuclear norms of the PGD attack with the same budget and steps.
    fn nuclear_targets(&self, x: &Tensor4, labels: &[usize], cfg: &AttackConfig) -> Result<Vec<f64>> {
        let reference = AttackConfig {
            algorithm: Algorithm::Pgd,
            rank_fraction: None,
            nuclear_match: false,
            norm_kind: NormKind::Frobenius,
            ..cfg.clone()
        };
        let pgd = self.pgd(x, labels, &reference)?;
        Ok(linalg::nuclear_norm(&pgd.perturbation.materialize()))
    }

    fn check_batch(&self, x: &Tensor4, labels: &[usize]) -> Result<()> {
        ensure!(
            labels.len() == x.batch(),
            "{} labels for a batch of {}",
            labels.len(),
            x.batch()
        );
        Ok(())
    }
}

fn join_results(parts: Vec<AttackResult>) -> Result<AttackResult> {
    let first = &parts[0];
    let (tau, norm_kind, steps) = (first.tau, first.norm_kind, first.steps_executed);
    let adversarial = Tensor4::concat(&parts.iter().map(|p| p.adversarial.clone()).collect::<Vec<_>>())?;
    let degenerate = parts.iter().flat_map(|p| p.degenerate.iter().copied()).collect();
    let perturbation = match &first.perturbation {
        Perturbation::Full(_) => {
            let full: Vec<Tensor4> = parts.iter().map(|p| p.perturbation.materialize()).collect();
            Perturbation::Full(Tensor4::concat(&full)?)
        }
        Perturbation::Factored(f) => {
            let mut us = Vec::with_capacity(parts.len());
            let mut vs = Vec::with_capacity(parts.len());
            for p in &parts {
                match &p.perturbation {
                    Perturbation::Factored(g) => {
                        us.push(g.u.clone());
                        vs.push(g.v.clone());
                    }
                    Perturbation::Full(_) => return Err(Error::contract("mixed perturbation kinds")),
                }
            }
            Perturbation::Factored(FactoredPerturbation {
                u: Tensor4::concat(&us)?,
                v: Tensor4::concat(&vs)?,
                rank: f.rank,
                tau: f.tau,
                norm_kind: f.norm_kind,
            })
        }
    };
    Ok(AttackResult {
        perturbation,
        adversarial,
        degenerate,
        steps_executed: steps,
        tau,
        norm_kind,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    ensure!(tau >= 0.0 && tau.is_finite(), "tau must be finite and >= 0, got {tau}");
    Ok(())
}

/// Sphere the iteration runs on for a given budget norm.
fn loop_norm(kind: NormKind) -> NormKind {
    match kind {
        NormKind::Linf => NormKind::Linf,
        _ => NormKind::Frobenius,
    }
}

fn sign_per_image(g: &Tensor4) -> Tensor4 {
    g.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

/// Scales every image to the target norm; images with (near) zero norm
/// become zero and are flagged.
fn rescale_to(x: &Tensor4, targets: &[f64], kind: NormKind) -> (Tensor4, Vec<bool>) {
    let norms = image_norm(x, kind);
    let mut scales = vec![0.0; x.batch()];
    let mut flags = vec![false; x.batch()];
    for b in 0..x.batch() {
        if targets[b] == 0.0 {
            continue;
        }
        if norms[b] > DEGENERATE_EPS {
            scales[b] = targets[b] / norms[b];
        } else {
            flags[b] = true;
        }
    }
    (x.scale_images(&scales), flags)
}

fn finish_full(delta: Tensor4, flags: Vec<bool>, tau: f64, kind: NormKind) -> Result<(Tensor4, Vec<bool>)> {
    if kind != NormKind::Nuclear {
        return Ok((delta, flags));
    }
    let (out, nflags) = rescale_to(&delta, &vec![tau; delta.batch()], NormKind::Nuclear);
    Ok((out, flags.iter().zip(nflags).map(|(a, b)| *a || b).collect()))
}

fn full_result(
    x: &Tensor4,
    delta: Tensor4,
    degenerate: Vec<bool>,
    steps: usize,
    tau: f64,
    norm_kind: NormKind,
) -> Result<AttackResult> {
    let adversarial = clamp_box(&x.add(&delta)?, 0.0, 1.0)?;
    Ok(AttackResult {
        perturbation: Perturbation::Full(delta),
        adversarial,
        degenerate,
        steps_executed: steps,
        tau,
        norm_kind,
    })
}

/// Loss and factor gradients of `ℓ(f(clamp(X + τ·normalize(u ⊗_C v))))`.
///
/// With `loss_scale = 1` the objective is the sum of per-image losses; with
/// `1/B` it is the batch mean. Returns `(objective, ∇u, ∇v)`.
#[allow(clippy::too_many_arguments)]
pub fn lora_gradients(
    model: &Model,
    x: &Tensor4,
    labels: &[usize],
    u: &Tensor4,
    v: &Tensor4,
    tau: f64,
    through: GradThrough,
    loss_scale: f64,
) -> Result<(f64, Tensor4, Tensor4)> {
    let product = channel_matmul(u, v)?;
    ensure!(
        product.dims() == x.dims(),
        "factor product {:?} does not match images {:?}",
        product.dims(),
        x.dims()
    );
    // One pass per image builds the clamped input; the clamp is inactive at
    // a pixel exactly when the clamped value lies strictly inside (0, 1).
    let mut adv = x.clone();
    let mut norms = Vec::with_capacity(x.batch());
    for b in 0..x.batch() {
        let p = product.image(b);
        let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(n);
        let step = if n <= DEGENERATE_EPS { tau } else { tau / n };
        for (a, &pv) in adv.image_mut(b).iter_mut().zip(p) {
            *a = (*a + step * pv).clamp(0.0, 1.0);
        }
    }
    let (losses, mut g) = model.input_gradients(&adv, labels)?;
    if through == GradThrough::Exact {
        for (b, &n) in norms.iter().enumerate() {
            let gi = g.image_mut(b);
            let mut dot = 0.0;
            for ((gv, &a), &pv) in gi.iter_mut().zip(adv.image(b)).zip(product.image(b)) {
                *gv = if a > 0.0 && a < 1.0 { *gv * tau } else { 0.0 };
                dot += *gv * pv;
            }
            // A zero product (as at the start, with v = 0) has no direction to
            // differentiate; the masked gradient is passed through unchanged.
            if n <= DEGENERATE_EPS {
                continue;
            }
            let inv = 1.0 / n;
            let along = dot * inv * inv;
            for (gv, &pv) in gi.iter_mut().zip(product.image(b)) {
                *gv = (*gv - along * pv) * inv;
            }
        }
    }
    if loss_scale != 1.0 {
        for v in g.data_mut() {
            *v *= loss_scale;
        }
    }
    let gu = channel_matmul_nt(&g, v)?;
    let gv = channel_matmul_tn(u, &g)?;
    Ok((losses.iter().sum::<f64>() * loss_scale, gu, gv))
}

/// Gaussian left factor normalized per image, zero right factor.
pub fn init_random(dims: [usize; 4], r: usize, seed: u64) -> (Tensor4, Tensor4) {
    init_random_at(dims, r, seed, 0)
}

fn init_random_at(dims: [usize; 4], r: usize, seed: u64, offset: u64) -> (Tensor4, Tensor4) {
    let [b, c, n, m] = dims;
    let mut u = Tensor4::zeros([b, c, n, r]);
    for bi in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(offset + bi as u64);
        for val in u.image_mut(bi) {
            *val = StandardNormal.sample(&mut rng);
        }
    }
    let (u, _) = normalize_per_image(&u);
    (u, Tensor4::zeros([b, c, r, m]))
}

/// Balanced rank-`r` factors of the FGSM attack computed on `standard`.
pub fn init_transfer(
    standard: &Model,
    x: &Tensor4,
    labels: &[usize],
    tau: f64,
    r: usize,
) -> Result<(Tensor4, Tensor4)> {
    let fgsm = Attacker::new(standard).fgsm(x, labels, tau, NormKind::Frobenius)?;
    linalg::factor_split(&fgsm.perturbation.materialize(), r)
}

/// As [`init_transfer`], with the FGSM attack computed on the target model.
pub fn init_warmup(target: &Model, x: &Tensor4, labels: &[usize], tau: f64, r: usize) -> Result<(Tensor4, Tensor4)> {
    init_transfer(target, x, labels, tau, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn setup() -> (Model, Tensor4, Vec<usize>) {
        let model = Model::init(ModelSpec::linear([2, 4, 4], 3).unwrap(), 3).unwrap();
        let x = Tensor4::from_fn([3, 2, 4, 4], |[b, c, i, j]| {
            0.2 + 0.6 * (((b * 5 + c * 3 + i * 7 + j * 11) % 13) as f64 / 13.0)
        });
        (model, x, vec![0, 1, 2])
    }

    #[test]
    fn rank_fraction_rounding() {
        assert_eq!(rank_from_fraction(0.5, 32, 32), 16);
        assert_eq!(rank_from_fraction(0.3, 32, 32), 10);
        assert_eq!(rank_from_fraction(0.01, 32, 32), 1);
        assert_eq!(rank_from_fraction(0.1, 32, 32), 3);
        assert_eq!(rank_from_fraction(0.4, 32, 32), 13);
        assert_eq!(rank_from_fraction(0.2, 32, 32), 6);
        // half away from zero
        assert_eq!(rank_from_fraction(0.25, 10, 12), 3);
    }

    #[test]
    fn zero_budget_is_identity() {
        let (model, x, y) = setup();
        let att = Attacker::new(&model);
        for cfg in [
            AttackConfig::fgsm(0.0),
            AttackConfig::pgd(0.0, 3),
            AttackConfig::lora_pgd(0.0, 3, 0.5),
            AttackConfig::rank_projected_pgd(0.0, 3, 0.5),
        ] {
            let res = att.run(&x, &y, &cfg).unwrap();
            assert_eq!(res.adversarial, x, "{}", cfg.algorithm);
        }
    }

    #[test]
    fn one_step_pgd_is_fgsm() {
        let (model, x, y) = setup();
        let att = Attacker::new(&model);
        let f = att.fgsm(&x, &y, 0.3, NormKind::Frobenius).unwrap();
        let p = att.run(&x, &y, &AttackConfig::pgd(0.3, 1)).unwrap();
        assert_eq!(f.adversarial, p.adversarial);
        assert_eq!(f.perturbation, p.perturbation);
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::pgd(0.5, 0).validate().is_err());
        assert!(AttackConfig::pgd(-1.0, 1).validate().is_err());
        assert!(AttackConfig::pgd(0.5, 1).with_rank_fraction(0.2).validate().is_err());
        assert!(AttackConfig::lora_pgd(0.5, 1, 0.0).validate().is_err());
        assert!(AttackConfig::lora_pgd(0.5, 1, 1.2).validate().is_err());
        let mut c = AttackConfig::lora_pgd(0.5, 1, 0.3);
        c.rank_fraction = None;
        assert!(c.validate().is_err());
        assert!(AttackConfig::lora_pgd(0.5, 1, 0.3)
            .with_norm(NormKind::Linf)
            .validate()
            .is_err());
        assert!(AttackConfig::pgd(0.5, 1).with_nuclear_match(true).validate().is_err());
    }

    #[test]
    fn transfer_without_source_is_an_error() {
        let (model, x, y) = setup();
        let cfg = AttackConfig::lora_pgd(0.5, 2, 0.5).with_init(InitStrategy::Transfer);
        assert!(matches!(
            Attacker::new(&model).run(&x, &y, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn random_init_properties() {
        let (u, v) = init_random([3, 2, 5, 6], 2, 9);
        assert!(v.data().iter().all(|&z| z == 0.0));
        for n in image_norm(&u, NormKind::Frobenius) {
            assert!((n - 1.0).abs() < 1e-12);
        }
        let p = channel_matmul(&u, &v).unwrap();
        assert!(p.data().iter().all(|&z| z == 0.0));
        let (u2, _) = init_random([3, 2, 5, 6], 2, 9);
        assert_eq!(u, u2);
        let (u3, _) = init_random([3, 2, 5, 6], 2, 10);
        assert_ne!(u, u3);
    }

    #[test]
    fn zero_gradient_is_flagged_not_fatal() {
        let spec = ModelSpec::linear([1, 3, 3], 2).unwrap();
        let model = Model::new(spec.clone(), crate::model::ModelParams::zeros(&spec)).unwrap();
        let x = Tensor4::from_fn([2, 1, 3, 3], |_| 0.5);
        for cfg in [
            AttackConfig::fgsm(0.5),
            AttackConfig::pgd(0.5, 3),
            AttackConfig::rank_projected_pgd(0.5, 3, 0.5),
        ] {
            let res = Attacker::new(&model).run(&x, &[0, 1], &cfg).unwrap();
            assert_eq!(res.degenerate, vec![true, true]);
            assert_eq!(res.adversarial, x);
        }
        let res = Attacker::new(&model)
            .run(&x, &[0, 1], &AttackConfig::lora_pgd(0.5, 3, 0.5))
            .unwrap();
        assert_eq!(res.degenerate, vec![true, true]);
        assert_eq!(res.adversarial, x);
    }
}
