use std::ffi::{CStr, CString};
use std::ptr;

use lowrank_ffi::*;

fn last_error() -> String {
    let p = lr_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

struct Fixture {
    model: *mut LrModel,
    ds: *mut LrDataset,
}

impl Fixture {
    fn new() -> Self {
        let mut model = ptr::null_mut();
        let mut ds = ptr::null_mut();
        unsafe {
            assert_eq!(lr_model_init(LR_ARCH_CNN, 3, 8, 8, 4, 1, &mut model), LrStatus::Ok);
            assert_eq!(lr_dataset_synth(LR_GEN_BLOBS, 6, 3, 8, 8, 4, 2, &mut ds), LrStatus::Ok);
        }
        Fixture { model, ds }
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            lr_model_free(self.model);
            lr_dataset_free(self.ds);
        }
    }
}

#[test]
fn lora_attack_through_handles() {
    let f = Fixture::new();
    let mut cfg = lr_attack_config_default(LR_ALGO_LORA_PGD);
    cfg.rank_fraction = 0.25;
    cfg.steps = 3;
    let mut res = ptr::null_mut();
    unsafe {
        assert_eq!(lr_attack_run(f.model, ptr::null(), f.ds, &cfg, &mut res), LrStatus::Ok);
        let mut dims = [0usize; 4];
        assert_eq!(lr_attack_result_dims(res, dims.as_mut_ptr()), LrStatus::Ok);
        assert_eq!(dims, [6, 3, 8, 8]);
        let mut rank = 0;
        assert_eq!(lr_attack_result_rank(res, &mut rank), LrStatus::Ok);
        assert_eq!(rank, 2);

        let len = dims.iter().product::<usize>();
        let mut delta = vec![0.0; len];
        assert_eq!(
            lr_attack_result_perturbation(res, delta.as_mut_ptr(), len),
            LrStatus::Ok
        );
        for img in delta.chunks(3 * 64) {
            let n = img.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 0.5).abs() < 1e-9, "norm {n}");
        }
        let mut adv = vec![0.0; len];
        assert_eq!(lr_attack_result_adversarial(res, adv.as_mut_ptr(), len), LrStatus::Ok);
        assert!(adv.iter().all(|v| (0.0..=1.0).contains(v)));

        assert_eq!(
            lr_attack_result_adversarial(res, adv.as_mut_ptr(), len - 1),
            LrStatus::Contract
        );
        assert!(last_error().contains("buffer"));
        lr_attack_result_free(res);
    }
}

#[test]
fn bad_arguments_map_to_status_codes() {
    let f = Fixture::new();
    let mut res = ptr::null_mut();
    unsafe {
        let cfg = lr_attack_config_default(LR_ALGO_PGD);
        assert_eq!(
            lr_attack_run(ptr::null(), ptr::null(), f.ds, &cfg, &mut res),
            LrStatus::NullPointer
        );
        assert!(last_error().contains("model"));

        let mut bad = cfg;
        bad.algorithm = 99;
        assert_eq!(
            lr_attack_run(f.model, ptr::null(), f.ds, &bad, &mut res),
            LrStatus::Contract
        );
        assert!(last_error().contains("99"));

        let mut linf_lora = lr_attack_config_default(LR_ALGO_LORA_PGD);
        linf_lora.norm = LR_NORM_LINF;
        assert_eq!(
            lr_attack_run(f.model, ptr::null(), f.ds, &linf_lora, &mut res),
            LrStatus::Contract
        );

        let mut transfer = lr_attack_config_default(LR_ALGO_LORA_PGD);
        transfer.init = LR_INIT_TRANSFER;
        assert_eq!(
            lr_attack_run(f.model, ptr::null(), f.ds, &transfer, &mut res),
            LrStatus::Contract
        );
        assert_eq!(lr_attack_run(f.model, f.model, f.ds, &transfer, &mut res), LrStatus::Ok);
        lr_attack_result_free(res);

        let mut ds = ptr::null_mut();
        assert_eq!(lr_dataset_synth(7, 1, 1, 4, 4, 2, 0, &mut ds), LrStatus::Contract);
        assert!(ds.is_null());
        lr_dataset_free(ptr::null_mut());
    }
}

#[test]
fn files_round_trip_and_report_format_errors() {
    let f = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    let ds_path = cpath(&dir.path().join("d.lrtd"));
    let model_path = cpath(&dir.path().join("m.lrmd"));
    let attack_path = dir.path().join("a.lrat");
    unsafe {
        assert_eq!(lr_dataset_save(f.ds, ds_path.as_ptr()), LrStatus::Ok);
        assert_eq!(lr_model_save(f.model, model_path.as_ptr()), LrStatus::Ok);
        let mut ds = ptr::null_mut();
        let mut model = ptr::null_mut();
        assert_eq!(lr_dataset_load(ds_path.as_ptr(), &mut ds), LrStatus::Ok);
        assert_eq!(lr_model_load(model_path.as_ptr(), &mut model), LrStatus::Ok);

        let mut a = [0usize; 6];
        let mut b = [0usize; 6];
        assert_eq!(lr_model_predict(f.model, f.ds, a.as_mut_ptr(), 6), LrStatus::Ok);
        assert_eq!(lr_model_predict(model, ds, b.as_mut_ptr(), 6), LrStatus::Ok);
        assert_eq!(a, b);

        let cfg = lr_attack_config_default(LR_ALGO_FGSM);
        let mut res = ptr::null_mut();
        assert_eq!(lr_attack_run(model, ptr::null(), ds, &cfg, &mut res), LrStatus::Ok);
        assert_eq!(lr_attack_result_save(res, cpath(&attack_path).as_ptr()), LrStatus::Ok);
        let bytes = std::fs::read(&attack_path).unwrap();
        assert_eq!(&bytes[..4], b"LRAT");
        lr_attack_result_free(res);
        lr_model_free(model);
        lr_dataset_free(ds);

        // An attack file is not a dataset.
        let mut wrong = ptr::null_mut();
        assert_eq!(
            lr_dataset_load(cpath(&attack_path).as_ptr(), &mut wrong),
            LrStatus::Format
        );
        assert!(last_error().contains("magic"));
        let missing = cpath(&dir.path().join("missing.lrtd"));
        assert_eq!(lr_dataset_load(missing.as_ptr(), &mut wrong), LrStatus::Io);
    }
}

#[test]
fn robust_accuracy_at_zero_budget_is_one() {
    let f = Fixture::new();
    let mut cfg = lr_attack_config_default(LR_ALGO_PGD);
    cfg.tau = 0.0;
    let mut rho = -1.0;
    unsafe {
        assert_eq!(
            lr_robust_accuracy(f.model, ptr::null(), f.ds, &cfg, &mut rho),
            LrStatus::Ok
        );
    }
    assert_eq!(rho, 1.0);
}

#[test]
fn nuclear_norm_and_memory() {
    // diag(3, 4) in one channel, zero in the other: (3 + 4 + 0) / 2.
    let img = [3.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 0.0];
    let mut nuc = 0.0;
    unsafe {
        assert_eq!(lr_nuclear_norm(img.as_ptr(), 2, 2, 2, &mut nuc), LrStatus::Ok);
    }
    assert!((nuc - 3.5).abs() < 1e-12);

    let (mut full, mut factored) = (0u64, 0u64);
    unsafe {
        assert_eq!(
            lr_memory_estimate(1, 3, 32, 32, 3, &mut full, &mut factored),
            LrStatus::Ok
        );
        assert_eq!((full, factored), (3072, 576));
        assert_eq!(
            lr_memory_estimate(1, 3, 32, 32, 33, &mut full, &mut factored),
            LrStatus::Contract
        );
    }
    let v = unsafe { CStr::from_ptr(lr_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
