//! C interface to the `lowrank` attack library.
//!
//! Objects cross the boundary as opaque handles created by `lr_*_load`,
//! `lr_*_init` or `lr_attack_run` and released with the matching `lr_*_free`.
//! Every fallible function returns an [`LrStatus`]; on failure the message
//! is available from [`lr_last_error`] on the same thread. Panics never
//! unwind into C: they are caught and reported as `LR_PANIC`.
//!
//! Tensors are exchanged as contiguous `double` arrays in `[D, C, N, M]`
//! order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lowrank::analysis;
use lowrank::attacks::{Algorithm, AttackConfig, AttackResult, Attacker, GradThrough, InitStrategy, Perturbation};
use lowrank::data::{self, AttackRecord, Dataset, Generator};
use lowrank::linalg;
use lowrank::model::{Model, ModelSpec};
use lowrank::{Error, NormKind, Tensor4};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Invalid argument or precondition (shape, range, unknown enum code).
    Contract = 2,
    /// The operating system refused a read or write.
    Io = 3,
    /// A file was malformed: bad magic, truncation, CRC, or content.
    Format = 4,
    /// Training produced a non-finite loss.
    Diverged = 5,
    /// Internal panic; the library state is unaffected.
    Panic = 6,
}

pub const LR_ALGO_FGSM: u32 = 0;
pub const LR_ALGO_PGD: u32 = 1;
pub const LR_ALGO_LORA_PGD: u32 = 2;
pub const LR_ALGO_RANK_PROJECTED_PGD: u32 = 3;

pub const LR_NORM_FROBENIUS: u32 = 0;
pub const LR_NORM_LINF: u32 = 1;
pub const LR_NORM_NUCLEAR: u32 = 2;

pub const LR_INIT_RANDOM: u32 = 0;
pub const LR_INIT_TRANSFER: u32 = 1;
pub const LR_INIT_WARMUP: u32 = 2;

pub const LR_GRAD_EXACT: u32 = 0;
pub const LR_GRAD_STRAIGHT_THROUGH: u32 = 1;

pub const LR_GEN_BLOBS: u32 = 0;
pub const LR_GEN_STRIPES: u32 = 1;

pub const LR_ARCH_LINEAR: u32 = 0;
pub const LR_ARCH_MLP: u32 = 1;
pub const LR_ARCH_CNN: u32 = 2;

/// Attack parameters. `rank_fraction` is ignored by full-rank algorithms.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LrAttackConfig {
    pub algorithm: u32,
    pub steps: usize,
    pub tau: f64,
    pub norm: u32,
    pub rank_fraction: f64,
    pub init: u32,
    pub seed: u64,
    pub grad_through: u32,
    pub nuclear_match: bool,
}

/// Opaque classifier handle.
pub struct LrModel(Model);

/// Opaque labelled image set handle.
pub struct LrDataset(Dataset);

/// Opaque attack output handle.
pub struct LrAttackResult(AttackResult);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Contract(_) => LrStatus::Contract,
            Error::Io(_) => LrStatus::Io,
            Error::Diverged { .. } => LrStatus::Diverged,
            _ => LrStatus::Format,
        };
        Failure(status, e.to_string())
    }
}

fn contract(msg: impl Into<String>) -> Failure {
    Failure(LrStatus::Contract, msg.into())
}

fn null(name: &str) -> Failure {
    Failure(LrStatus::NullPointer, format!("{name} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            LrStatus::Panic
        }
    }
}

unsafe fn arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| contract(format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(null("buffer"));
    }
    if len != src.len() {
        return Err(contract(format!("buffer holds {len} values, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    Ok(())
}

unsafe fn write_dims(dims: [usize; 4], out: *mut usize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("dims"));
    }
    ptr::copy_nonoverlapping(dims.as_ptr(), out, 4);
    Ok(())
}

fn algorithm(code: u32) -> Result<Algorithm, Failure> {
    Ok(match code {
        LR_ALGO_FGSM => Algorithm::Fgsm,
        LR_ALGO_PGD => Algorithm::Pgd,
        LR_ALGO_LORA_PGD => Algorithm::LoraPgd,
        LR_ALGO_RANK_PROJECTED_PGD => Algorithm::RankProjectedPgd,
        other => return Err(contract(format!("unknown algorithm code {other}"))),
    })
}

fn algorithm_code(a: Algorithm) -> u32 {
    match a {
        Algorithm::Fgsm => LR_ALGO_FGSM,
        Algorithm::Pgd => LR_ALGO_PGD,
        Algorithm::LoraPgd => LR_ALGO_LORA_PGD,
        Algorithm::RankProjectedPgd => LR_ALGO_RANK_PROJECTED_PGD,
    }
}

fn to_config(c: &LrAttackConfig) -> Result<AttackConfig, Failure> {
    let algorithm = algorithm(c.algorithm)?;
    let norm_kind = u8::try_from(c.norm)
        .ok()
        .and_then(NormKind::from_code)
        .ok_or_else(|| contract(format!("unknown norm code {}", c.norm)))?;
    let init = match c.init {
        LR_INIT_RANDOM => InitStrategy::Random,
        LR_INIT_TRANSFER => InitStrategy::Transfer,
        LR_INIT_WARMUP => InitStrategy::Warmup,
        other => return Err(contract(format!("unknown init code {other}"))),
    };
    let through = match c.grad_through {
        LR_GRAD_EXACT => GradThrough::Exact,
        LR_GRAD_STRAIGHT_THROUGH => GradThrough::StraightThrough,
        other => return Err(contract(format!("unknown gradient mode code {other}"))),
    };
    let cfg = AttackConfig {
        algorithm,
        steps: c.steps,
        tau: c.tau,
        norm_kind,
        rank_fraction: algorithm.is_low_rank().then_some(c.rank_fraction),
        init,
        seed: c.seed,
        normalize_grad_through: through,
        nuclear_match: c.nuclear_match,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default parameters for `algorithm`: Frobenius budget 0.5, 10 steps
/// (1 for FGSM), rank fraction 0.1, random init, seed 0, exact gradients.
#[no_mangle]
pub extern "C" fn lr_attack_config_default(code: u32) -> LrAttackConfig {
    let a = algorithm(code).unwrap_or(Algorithm::Pgd);
    let cfg = match a {
        Algorithm::Fgsm => AttackConfig::fgsm(0.5),
        other => AttackConfig::new(other, 0.5, 10),
    };
    LrAttackConfig {
        algorithm: algorithm_code(a),
        steps: cfg.steps,
        tau: cfg.tau,
        norm: LR_NORM_FROBENIUS,
        rank_fraction: 0.1,
        init: LR_INIT_RANDOM,
        seed: 0,
        grad_through: LR_GRAD_EXACT,
        nuclear_match: false,
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lr_dataset_load(path: *const c_char, out: *mut *mut LrDataset) -> LrStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let ds = data::load_dataset(&path)?;
        put(out, LrDataset(ds), "out")
    })
}

/// Deterministic synthetic dataset of `count` images.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn lr_dataset_synth(
    generator: u32,
    count: usize,
    channels: usize,
    rows: usize,
    cols: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut LrDataset,
) -> LrStatus {
    guard(|| {
        let g = match generator {
            LR_GEN_BLOBS => Generator::Blobs,
            LR_GEN_STRIPES => Generator::Stripes,
            other => return Err(contract(format!("unknown generator code {other}"))),
        };
        let ds = data::synth_dataset(g, count, channels, rows, cols, classes, seed)?;
        put(out, LrDataset(ds), "out")
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lr_dataset_save(ds: *const LrDataset, path: *const c_char) -> LrStatus {
    guard(|| {
        let ds = arg(ds, "dataset")?;
        let path = path_arg(path, "path")?;
        data::save_dataset(&ds.0, &path)?;
        Ok(())
    })
}

/// Writes `[D, C, N, M]` to `dims`.
///
/// # Safety
/// `ds` must be a live handle and `dims` point to 4 writable values.
#[no_mangle]
pub unsafe extern "C" fn lr_dataset_dims(ds: *const LrDataset, dims: *mut usize) -> LrStatus {
    guard(|| write_dims(arg(ds, "dataset")?.0.images.dims(), dims))
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lr_dataset_free(ds: *mut LrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lr_model_load(path: *const c_char, out: *mut *mut LrModel) -> LrStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let (spec, params) = data::load_model(&path)?;
        put(out, LrModel(Model::new(spec, params)?), "out")
    })
}

/// Reference architecture with seeded random weights.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lr_model_init(
    arch: u32,
    channels: usize,
    rows: usize,
    cols: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut LrModel,
) -> LrStatus {
    guard(|| {
        let dims = [channels, rows, cols];
        let spec = match arch {
            LR_ARCH_LINEAR => ModelSpec::linear(dims, classes)?,
            LR_ARCH_MLP => ModelSpec::mlp(dims, classes)?,
            LR_ARCH_CNN => ModelSpec::cnn(dims, classes)?,
            other => return Err(contract(format!("unknown architecture code {other}"))),
        };
        put(out, LrModel(Model::init(spec, seed)?), "out")
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lr_model_save(model: *const LrModel, path: *const c_char) -> LrStatus {
    guard(|| {
        let model = arg(model, "model")?;
        let path = path_arg(path, "path")?;
        data::save_model(model.0.spec(), model.0.params(), &path)?;
        Ok(())
    })
}

/// Predicted class of every image in `ds`, written to `labels[0..len]`.
///
/// # Safety
/// Handles must be live and `labels` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lr_model_predict(
    model: *const LrModel,
    ds: *const LrDataset,
    labels: *mut usize,
    len: usize,
) -> LrStatus {
    guard(|| {
        let model = arg(model, "model")?;
        let ds = arg(ds, "dataset")?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let pred = model.0.predict_class(&ds.0.images)?;
        if len != pred.len() {
            return Err(contract(format!("buffer holds {len} labels, need {}", pred.len())));
        }
        ptr::copy_nonoverlapping(pred.as_ptr(), labels, len);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lr_model_free(model: *mut LrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Attacks every image of `ds` with its label. `transfer` is the standard
/// model used by `LR_INIT_TRANSFER` and may be null otherwise.
///
/// # Safety
/// Handles and `cfg` must be valid; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_run(
    model: *const LrModel,
    transfer: *const LrModel,
    ds: *const LrDataset,
    cfg: *const LrAttackConfig,
    out: *mut *mut LrAttackResult,
) -> LrStatus {
    guard(|| {
        let model = arg(model, "model")?;
        let ds = arg(ds, "dataset")?;
        let cfg = to_config(arg(cfg, "config")?)?;
        let mut attacker = Attacker::new(&model.0);
        if let Some(t) = transfer.as_ref() {
            attacker = attacker.with_transfer_source(&t.0);
        }
        let result = attacker.run(&ds.0.images, &ds.0.labels, &cfg)?;
        put(out, LrAttackResult(result), "out")
    })
}

/// Writes `[D, C, N, M]` of the attacked images to `dims`.
///
/// # Safety
/// `res` must be a live handle and `dims` point to 4 writable values.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_result_dims(res: *const LrAttackResult, dims: *mut usize) -> LrStatus {
    guard(|| write_dims(arg(res, "result")?.0.adversarial.dims(), dims))
}

/// Rank of the stored factors, or 0 for a full perturbation.
///
/// # Safety
/// `res` must be a live handle and `rank` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_result_rank(res: *const LrAttackResult, rank: *mut usize) -> LrStatus {
    guard(|| {
        let res = arg(res, "result")?;
        if rank.is_null() {
            return Err(null("rank"));
        }
        *rank = match &res.0.perturbation {
            Perturbation::Factored(f) => f.rank,
            Perturbation::Full(_) => 0,
        };
        Ok(())
    })
}

/// Copies `clamp(X + δ, 0, 1)` into `buf`; `len` must equal `D·C·N·M`.
///
/// # Safety
/// `res` must be a live handle and `buf` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_result_adversarial(
    res: *const LrAttackResult,
    buf: *mut f64,
    len: usize,
) -> LrStatus {
    guard(|| copy_out(arg(res, "result")?.0.adversarial.data(), buf, len))
}

/// Copies the perturbation δ (materialized if factored) into `buf`.
///
/// # Safety
/// `res` must be a live handle and `buf` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_result_perturbation(
    res: *const LrAttackResult,
    buf: *mut f64,
    len: usize,
) -> LrStatus {
    guard(|| {
        let res = arg(res, "result")?;
        let delta = res.0.perturbation.materialize();
        copy_out(delta.data(), buf, len)
    })
}

/// Number of images whose attack vanished.
///
/// # Safety
/// `res` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_result_degenerate_count(res: *const LrAttackResult, count: *mut usize) -> LrStatus {
    guard(|| {
        let res = arg(res, "result")?;
        if count.is_null() {
            return Err(null("count"));
        }
        *count = res.0.degenerate.iter().filter(|&&d| d).count();
        Ok(())
    })
}

/// Stores the perturbation as an attack file.
///
/// # Safety
/// `res` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_result_save(res: *const LrAttackResult, path: *const c_char) -> LrStatus {
    guard(|| {
        let res = arg(res, "result")?;
        let path = path_arg(path, "path")?;
        data::save_attack(&AttackRecord::from(&res.0), &path)?;
        Ok(())
    })
}

/// # Safety
/// `res` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lr_attack_result_free(res: *mut LrAttackResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// Fraction of images whose predicted class survives the attack.
///
/// # Safety
/// Handles and `cfg` must be valid; `rho` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lr_robust_accuracy(
    model: *const LrModel,
    transfer: *const LrModel,
    ds: *const LrDataset,
    cfg: *const LrAttackConfig,
    rho: *mut f64,
) -> LrStatus {
    guard(|| {
        let model = arg(model, "model")?;
        let ds = arg(ds, "dataset")?;
        let cfg = to_config(arg(cfg, "config")?)?;
        if rho.is_null() {
            return Err(null("rho"));
        }
        let mut attacker = Attacker::new(&model.0);
        if let Some(t) = transfer.as_ref() {
            attacker = attacker.with_transfer_source(&t.0);
        }
        *rho = analysis::robust_accuracy(&attacker, "ffi", &ds.0, &cfg)?.rho;
        Ok(())
    })
}

/// Channel-averaged nuclear norm of one `C×N×M` image.
///
/// # Safety
/// `image` must hold `channels·rows·cols` values and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn lr_nuclear_norm(
    image: *const f64,
    channels: usize,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> LrStatus {
    guard(|| {
        if image.is_null() {
            return Err(null("image"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let len = channels
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(cols))
            .filter(|&v| v > 0)
            .ok_or_else(|| contract("image dims must be >= 1"))?;
        let x = Tensor4::from_vec(
            [1, channels, rows, cols],
            std::slice::from_raw_parts(image, len).to_vec(),
        )?;
        *out = linalg::nuclear_norm(&x)[0];
        Ok(())
    })
}

/// Element counts of a full perturbation and of rank-`rank` factors
/// (`rank = 0` means full).
///
/// # Safety
/// `full` and `factored` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lr_memory_estimate(
    d: usize,
    c: usize,
    n: usize,
    m: usize,
    rank: usize,
    full: *mut u64,
    factored: *mut u64,
) -> LrStatus {
    guard(|| {
        if full.is_null() || factored.is_null() {
            return Err(null("output"));
        }
        let report = analysis::memory_estimate(d, c, n, m, (rank > 0).then_some(rank))?;
        *full = report.elements_full;
        *factored = report.elements_factored;
        Ok(())
    })
}
