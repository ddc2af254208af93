use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lowrank::analysis::{
    memory_estimate, nuclear_profile, robust_accuracy, spectrum_change_report, timing_bench, BenchOptions, NuclearRow,
    ResourceRow, EVAL_CHUNK,
};
use lowrank::attacks::{AttackConfig, Attacker, Perturbation};
use lowrank::data::{self, AttackRecord, Dataset};
use lowrank::model::{adversarial_train, train_sgd, Model, ModelSpec, TrainConfig};
use lowrank::{Error, Result};

use crate::args::*;

/// What a command produced: a summary line and the files written.
pub struct Outcome {
    pub summary: String,
    pub outputs: Vec<PathBuf>,
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Eval(a) => eval(a),
        Command::Spectrum(a) => spectrum(a),
        Command::NucProfile(a) => nuc_profile(a),
        Command::Bench(a) => bench(a),
        Command::Render(a) => render(a),
        Command::Formats(a) => formats(a),
    }
}

fn load_model(path: &Path) -> Result<Model> {
    let (spec, params) = data::load_model(path)?;
    Model::new(spec, params)
}

fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    let [_, c, n, m] = ds.images.dims();
    let spec = model.spec();
    if [c, n, m] != spec.input_dims {
        return Err(Error::Contract(format!(
            "dataset images are {:?}, model expects {:?}",
            [c, n, m],
            spec.input_dims
        )));
    }
    if ds.num_classes() > spec.num_classes {
        return Err(Error::Contract(format!(
            "dataset has label {} but the model has {} classes",
            ds.num_classes() - 1,
            spec.num_classes
        )));
    }
    Ok(())
}

fn model_id(path: &Path, explicit: Option<&str>) -> String {
    explicit
        .map(str::to_string)
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "model".into())
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let ds = data::synth_dataset(a.generator, a.count, a.channels, a.rows, a.cols, a.classes, a.seed)?;
    data::save_dataset(&ds, &a.out)?;
    Ok(Outcome {
        summary: format!(
            "gen-data: {} {} images {}x{}x{}, {} classes",
            a.count, a.generator, a.channels, a.rows, a.cols, a.classes
        ),
        outputs: vec![a.out.clone()],
    })
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let ds = data::load_dataset(&a.data)?;
    let [_, c, n, m] = ds.images.dims();
    let classes = a.classes.unwrap_or_else(|| ds.num_classes().max(2));
    let spec = ModelSpec::reference(a.arch, [c, n, m], classes)?;
    let mut cfg = TrainConfig::new(a.epochs, a.batch_size, a.lr, a.seed);
    let outcome = match a.adv_algo {
        Some(algo) => {
            let mut attack = AttackConfig::new(algo, a.adv_tau, a.adv_steps).with_seed(a.seed);
            if algo.is_low_rank() {
                attack.rank_fraction = Some(a.adv_rank_frac.unwrap_or(0.1));
            } else {
                attack.rank_fraction = a.adv_rank_frac;
            }
            cfg.adversarial = Some(attack);
            adversarial_train(&spec, &ds, &cfg)?
        }
        None => train_sgd(&spec, &ds, &cfg)?,
    };
    for s in &outcome.log {
        eprintln!("epoch {} loss {:.6} acc {:.4}", s.epoch, s.loss, s.accuracy);
    }
    data::save_model(&spec, &outcome.params, &a.out)?;
    let last = outcome.log.last().expect("at least one epoch");
    Ok(Outcome {
        summary: format!(
            "train: {} {} epochs, final loss {:.4}, train acc {:.4}",
            format!("{:?}", a.arch).to_lowercase(),
            a.epochs,
            last.loss,
            last.accuracy
        ),
        outputs: vec![a.out.clone()],
    })
}

fn transfer_model(a: &AttackArgs) -> Result<Option<Model>> {
    a.transfer_model.as_deref().map(load_model).transpose()
}

fn attacker<'a>(model: &'a Model, transfer: Option<&'a Model>) -> Attacker<'a> {
    let att = Attacker::new(model);
    match transfer {
        Some(t) => att.with_transfer_source(t),
        None => att,
    }
}

fn attack(a: &AttackCmdArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let ds = data::load_dataset(&a.data)?;
    check_compatible(&model, &ds)?;
    let transfer = transfer_model(&a.attack)?;
    let cfg = a.attack.config(None);
    let res = attacker(&model, transfer.as_ref()).run_chunked(&ds.images, &ds.labels, &cfg, EVAL_CHUNK)?;
    let rec = AttackRecord::from(&res);
    data::save_attack(&rec, &a.out)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(path) = &a.adv_out {
        let adv = Dataset::new(res.adversarial.map(|v| v as f32 as f64), ds.labels.clone())?;
        data::save_dataset(&adv, path)?;
        outputs.push(path.clone());
    }
    let kind = match rec.perturbation {
        Perturbation::Full(_) => "full".to_string(),
        Perturbation::Factored(ref f) => format!("rank {}", f.rank),
    };
    let degenerate = res.degenerate.iter().filter(|&&d| d).count();
    Ok(Outcome {
        summary: format!(
            "attack: {} on {} images, {kind}, {} stored floats, {degenerate} degenerate",
            cfg.algorithm,
            ds.len(),
            rec.payload_elements()
        ),
        outputs,
    })
}

const SWEEP: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let ds = data::load_dataset(&a.data)?;
    check_compatible(&model, &ds)?;
    let transfer = transfer_model(&a.attack)?;
    let att = attacker(&model, transfer.as_ref());
    let id = model_id(&a.model, a.model_id.as_deref());
    let configs: Vec<AttackConfig> = if a.sweep && a.attack.algo.is_low_rank() {
        SWEEP.iter().map(|&p| a.attack.config(Some(p))).collect()
    } else {
        vec![a.attack.config(None)]
    };
    let mut rows = Vec::new();
    let mut parts = Vec::new();
    for cfg in &configs {
        let rep = robust_accuracy(&att, &id, &ds, cfg)?;
        parts.push(match cfg.rank_fraction {
            Some(p) => format!("rho({p})={:.4}", rep.rho),
            None => format!("rho={:.4}", rep.rho),
        });
        rows.push(rep.csv_row());
    }
    data::write_csv(&a.out, &rows)?;
    Ok(Outcome {
        summary: format!(
            "eval: {id} {} tau={} steps={} {} clean={:.4} n={}",
            a.attack.algo,
            a.attack.tau,
            a.attack.steps,
            parts.join(" "),
            rows[0].clean_acc,
            ds.len()
        ),
        outputs: vec![a.out.clone()],
    })
}

fn spectrum(a: &SpectrumArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let ds = data::load_dataset(&a.data)?;
    check_compatible(&model, &ds)?;
    let transfer = transfer_model(&a.attack)?;
    let cfg = a.attack.config(None);
    let res = attacker(&model, transfer.as_ref()).run_chunked(&ds.images, &ds.labels, &cfg, EVAL_CHUNK)?;
    let rep = spectrum_change_report(&ds.images, &res.adversarial)?;
    data::write_csv(&a.out, &rep.csv_rows())?;
    let r = rep.mean_relative_change.len();
    let q = (r / 4).max(1);
    Ok(Outcome {
        summary: format!(
            "spectrum: {} {} images, rule {}, first quartile {:.4}, last quartile {:.4}",
            cfg.algorithm,
            rep.n_images,
            rep.normalization_rule_id,
            rep.band_mean(0, q),
            rep.band_mean(r - q, r)
        ),
        outputs: vec![a.out.clone()],
    })
}

fn nuc_profile(a: &NucProfileArgs) -> Result<Outcome> {
    let ds = data::load_dataset(&a.data)?;
    let cfg = AttackConfig::pgd(a.tau, a.steps).with_seed(a.seed);
    let mut rows = Vec::new();
    for path in &a.models {
        let model = load_model(path)?;
        check_compatible(&model, &ds)?;
        let res = Attacker::new(&model).run_chunked(&ds.images, &ds.labels, &cfg, EVAL_CHUNK)?;
        rows.push(NuclearRow {
            model_id: model_id(path, None),
            tau: a.tau,
            steps: a.steps,
            mean_nuclear: nuclear_profile(&res.perturbation.materialize()),
            n: ds.len(),
        });
    }
    data::write_csv(&a.out, &rows)?;
    let parts: Vec<String> = rows
        .iter()
        .map(|r| format!("{}={:.4}", r.model_id, r.mean_nuclear))
        .collect();
    Ok(Outcome {
        summary: format!("nuc-profile: tau={} steps={} {}", a.tau, a.steps, parts.join(" ")),
        outputs: vec![a.out.clone()],
    })
}

fn bench(a: &BenchArgs) -> Result<Outcome> {
    let model = load_model(&a.model)?;
    let ds = data::load_dataset(&a.data)?;
    check_compatible(&model, &ds)?;
    if a.algos.is_empty() {
        return Err(Error::Contract("no algorithms to benchmark".into()));
    }
    let batch = ds.slice(0, a.batch.clamp(1, ds.len()));
    let [d, c, n, m] = batch.images.dims();
    let configs: Vec<AttackConfig> = a
        .algos
        .iter()
        .map(|&algo| {
            let cfg = AttackConfig::new(algo, a.tau, a.steps).with_seed(a.seed);
            if algo.is_low_rank() {
                cfg.with_rank_fraction(a.rank_frac)
            } else {
                cfg
            }
        })
        .collect();
    let opts = BenchOptions {
        warmup: a.warmup,
        repetitions: a.reps,
        threads: a.threads,
    };
    let stats = timing_bench(&Attacker::new(&model), &batch, &configs, opts)?;
    let mut rows = Vec::new();
    for (cfg, st) in configs.iter().zip(&stats) {
        // only LoRa-PGD keeps factors; the others hold a full perturbation
        let rank = (cfg.algorithm == lowrank::Algorithm::LoraPgd)
            .then(|| cfg.rank_for(n, m))
            .flatten();
        let mem = memory_estimate(d, c, n, m, rank)?;
        rows.push(ResourceRow {
            algo: st.algo.clone(),
            d,
            c,
            n,
            m,
            r: rank.unwrap_or(0),
            elements: mem.elements_factored,
            ratio: mem.ratio,
            median_ms: st.median_ms,
        });
    }
    data::write_csv(&a.out, &rows)?;
    let mut order: Vec<&ResourceRow> = rows.iter().collect();
    order.sort_by(|x, y| x.median_ms.total_cmp(&y.median_ms));
    let ordering: Vec<String> = order
        .iter()
        .map(|r| format!("{} ({:.1} ms)", r.algo, r.median_ms))
        .collect();
    Ok(Outcome {
        summary: format!("bench: ordering {}", ordering.join(" < ")),
        outputs: vec![a.out.clone()],
    })
}

fn render(a: &RenderArgs) -> Result<Outcome> {
    let ds = data::load_dataset(&a.data)?;
    let images = match &a.attack_file {
        Some(path) => {
            let rec = data::load_attack(path)?;
            if rec.dims() != ds.images.dims() {
                return Err(Error::Contract(format!(
                    "attack dims {:?} do not match dataset {:?}",
                    rec.dims(),
                    ds.images.dims()
                )));
            }
            let delta = rec.perturbation.materialize();
            lowrank::tensor::clamp_box(&ds.images.add(&delta)?, 0.0, 1.0)?
        }
        None => ds.images,
    };
    data::render_ppm(&images, a.index, &a.out)?;
    Ok(Outcome {
        summary: format!("render: image {}", a.index),
        outputs: vec![a.out.clone()],
    })
}

#[derive(Serialize, Deserialize)]
struct FileCheck {
    path: String,
    format: String,
    dims: Vec<usize>,
    detail: String,
}

const LAYOUTS: &str = "\
LRTD dataset: magic, version u32, D C N M u32, D*C*N*M f32 pixels in [0,1], D u32 labels, CRC32
LRAT attack: magic, version u32, kind u8 (0 full, 1 factored), D C N M u32, rank u32, tau f64, norm u8, f32 payload (full D*C*N*M; factored D*C*N*r then D*C*r*M), CRC32
LRMD model: magic, version u32, C N M u32, classes u32, seed u64, layer count u32, layer records, f32 weights and biases, CRC32";

fn formats(a: &FormatsArgs) -> Result<Outcome> {
    let Some(path) = &a.file else {
        return Ok(Outcome {
            summary: LAYOUTS.to_string(),
            outputs: Vec::new(),
        });
    };
    let bytes = std::fs::read(path)?;
    let check = match bytes.get(..4) {
        Some(b"LRTD") => {
            let ds = data::decode_dataset(&bytes)?;
            FileCheck {
                path: path.display().to_string(),
                format: "LRTD".into(),
                dims: ds.images.dims().to_vec(),
                detail: format!("{} labels, {} classes", ds.len(), ds.num_classes()),
            }
        }
        Some(b"LRAT") => {
            let rec = data::decode_attack(&bytes)?;
            FileCheck {
                path: path.display().to_string(),
                format: "LRAT".into(),
                dims: rec.dims().to_vec(),
                detail: format!(
                    "rank {}, tau {}, norm {}, {} floats",
                    rec.rank(),
                    rec.tau,
                    rec.norm_kind,
                    rec.payload_elements()
                ),
            }
        }
        Some(b"LRMD") => {
            let (spec, params) = data::decode_model(&bytes)?;
            FileCheck {
                path: path.display().to_string(),
                format: "LRMD".into(),
                dims: spec.input_dims.to_vec(),
                detail: format!(
                    "{} layers, {} classes, {} parameters",
                    spec.layers.len(),
                    spec.num_classes,
                    params.num_params()
                ),
            }
        }
        _ => {
            let mut found = [0u8; 4];
            let k = bytes.len().min(4);
            found[..k].copy_from_slice(&bytes[..k]);
            return Err(Error::BadMagic {
                offset: 0,
                expected: *b"LR??",
                found,
            });
        }
    };
    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        let json = serde_json::to_vec_pretty(&check).expect("plain struct serializes");
        data::write_atomic(out, &json)?;
        outputs.push(out.clone());
    }
    Ok(Outcome {
        summary: format!(
            "formats: {} {} {:?} {}",
            check.path, check.format, check.dims, check.detail
        ),
        outputs,
    })
}
