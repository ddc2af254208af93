use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lowrank::attacks::{Algorithm, AttackConfig, GradThrough, InitStrategy};
use lowrank::data::Generator;
use lowrank::model::Architecture;
use lowrank::NormKind;

/// Low-rank adversarial attacks on small image classifiers.
///
/// Every command that writes files also writes `<output>.manifest.json`;
/// `lowrank --manifest <file>` runs the recorded command again.
/// LOWRANK_THREADS sets the number of worker threads.
#[derive(Debug, Parser)]
#[command(name = "lowrank", version = env!("LOWRANK_DESCRIBE"), args_conflicts_with_subcommands = true)]
pub struct Cli {
    /// Replay a run manifest instead of parsing a subcommand.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "subcommand", content = "flags")]
pub enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a reference classifier, optionally adversarially.
    Train(TrainArgs),
    /// Attack a dataset and store the perturbations.
    Attack(AttackCmdArgs),
    /// Robust accuracy of a model under an attack.
    Eval(EvalArgs),
    /// Mean singular-value change caused by an attack.
    Spectrum(SpectrumArgs),
    /// Mean nuclear norm of PGD attacks on one or more models.
    NucProfile(NucProfileArgs),
    /// Time attack algorithms and report memory use.
    Bench(BenchArgs),
    /// Write one image as a binary PPM.
    Render(RenderArgs),
    /// Describe the file formats or check a file.
    Formats(FormatsArgs),
}

impl Command {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Command::GenData(a) => Some(a.seed),
            Command::Train(a) => Some(a.seed),
            Command::Attack(a) => Some(a.attack.seed),
            Command::Eval(a) => Some(a.attack.seed),
            Command::Spectrum(a) => Some(a.attack.seed),
            Command::NucProfile(a) => Some(a.seed),
            Command::Bench(a) => Some(a.seed),
            Command::Render(_) | Command::Formats(_) => None,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenDataArgs {
    #[arg(long, default_value = "blobs")]
    pub generator: Generator,
    /// Number of images.
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 16)]
    pub rows: usize,
    #[arg(long, default_value_t = 16)]
    pub cols: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "LRTD")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_name = "LRTD")]
    pub data: PathBuf,
    #[arg(long, default_value = "cnn")]
    pub arch: Architecture,
    /// Number of classes; defaults to the largest label plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Attack applied to every minibatch (adversarial training).
    #[arg(long = "adv-algo")]
    pub adv_algo: Option<Algorithm>,
    #[arg(long = "adv-tau", default_value_t = 0.5)]
    pub adv_tau: f64,
    #[arg(long = "adv-steps", default_value_t = 3)]
    pub adv_steps: usize,
    #[arg(long = "adv-rank-frac")]
    pub adv_rank_frac: Option<f64>,
    #[arg(long, value_name = "LRMD")]
    pub out: PathBuf,
}

/// Attack parameters shared by several commands.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackArgs {
    #[arg(long = "algo", visible_alias = "attack", default_value = "pgd")]
    pub algo: Algorithm,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value = "frobenius")]
    pub norm: NormKind,
    /// Kept fraction of min(rows, cols); low-rank algorithms default to 0.1.
    #[arg(long = "rank-frac")]
    pub rank_frac: Option<f64>,
    #[arg(long, default_value = "random")]
    pub init: InitStrategy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gradient through normalize and clamp: exact or straight-through.
    #[arg(long = "grad-through", default_value = "exact")]
    pub grad_through: GradThrough,
    /// Rescale low-rank attacks to the nuclear norm of the PGD attack.
    #[arg(long = "nuclear-match")]
    pub nuclear_match: bool,
    /// Standard model for transfer initialization.
    #[arg(long = "transfer-model", value_name = "LRMD")]
    pub transfer_model: Option<PathBuf>,
}

impl AttackArgs {
    pub fn config(&self, rank_frac: Option<f64>) -> AttackConfig {
        let rank_fraction = if self.algo.is_low_rank() {
            Some(rank_frac.or(self.rank_frac).unwrap_or(0.1))
        } else {
            self.rank_frac
        };
        AttackConfig {
            algorithm: self.algo,
            steps: self.steps,
            tau: self.tau,
            norm_kind: self.norm,
            rank_fraction,
            init: self.init,
            seed: self.seed,
            normalize_grad_through: self.grad_through,
            nuclear_match: self.nuclear_match,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackCmdArgs {
    #[arg(long, value_name = "LRMD")]
    pub model: PathBuf,
    #[arg(long, value_name = "LRTD")]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackArgs,
    /// Perturbation file; low-rank algorithms store factors.
    #[arg(long, value_name = "LRAT")]
    pub out: PathBuf,
    /// Also store the attacked images as a dataset.
    #[arg(long = "adv-out", value_name = "LRTD")]
    pub adv_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long, value_name = "LRMD")]
    pub model: PathBuf,
    #[arg(long, value_name = "LRTD")]
    pub data: PathBuf,
    /// Label for the CSV; defaults to the model file stem.
    #[arg(long = "model-id")]
    pub model_id: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackArgs,
    /// For low-rank algorithms, evaluate rank fractions 0.1 to 0.5.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, value_name = "CSV", default_value = "robust_accuracy.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SpectrumArgs {
    #[arg(long, value_name = "LRMD")]
    pub model: PathBuf,
    #[arg(long, value_name = "LRTD")]
    pub data: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub attack: AttackArgs,
    #[arg(long, value_name = "CSV", default_value = "spectrum.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct NucProfileArgs {
    /// Models to attack, comma separated or repeated.
    #[arg(long = "model", value_name = "LRMD", value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long, value_name = "LRTD")]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "CSV", default_value = "nuclear.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long, value_name = "LRMD")]
    pub model: PathBuf,
    #[arg(long, value_name = "LRTD")]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "pgd,lora_pgd,rank_projected_pgd")]
    pub algos: Vec<Algorithm>,
    #[arg(long = "rank-frac", default_value_t = 0.1)]
    pub rank_frac: f64,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Images per timed batch.
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Threads for the timed section; defaults to the global pool.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "CSV", default_value = "resources.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RenderArgs {
    #[arg(long, value_name = "LRTD")]
    pub data: PathBuf,
    /// Add this perturbation (clamped to [0, 1]) before rendering.
    #[arg(long = "attack-file", value_name = "LRAT")]
    pub attack_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, value_name = "PPM")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FormatsArgs {
    /// File to validate; without it the layouts are printed.
    #[arg(value_name = "FILE")]
    pub file: Option<PathBuf>,
    /// Write the check result as JSON.
    #[arg(long, value_name = "JSON")]
    pub out: Option<PathBuf>,
}
