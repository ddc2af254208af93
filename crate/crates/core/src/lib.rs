//! Low-rank projected gradient adversarial attacks.
//!
//! The crate bundles everything needed to run and measure the attacks at
//! desk scale: batched tensor kernels ([`tensor`]), an SVD and spectral
//! toolkit ([`linalg`]), small differentiable classifiers with manual
//! gradients ([`model`]), the attacks themselves ([`attacks`]), reports
//! ([`analysis`]) and binary formats ([`data`]).
//!
//! ```
//! use lowrank::attacks::{AttackConfig, Attacker};
//! use lowrank::data::{synth_dataset, Generator};
//! use lowrank::model::{Model, ModelSpec};
//!
//! let ds = synth_dataset(Generator::Blobs, 4, 3, 8, 8, 2, 1).unwrap();
//! let model = Model::init(ModelSpec::linear([3, 8, 8], 2).unwrap(), 0).unwrap();
//! let cfg = AttackConfig::lora_pgd(0.5, 10, 0.25);
//! let res = Attacker::new(&model).run(&ds.images, &ds.labels, &cfg).unwrap();
//! assert_eq!(res.adversarial.dims(), [4, 3, 8, 8]);
//! ```

pub mod analysis;
pub mod attacks;
pub mod data;
mod error;
pub mod linalg;
pub mod model;
pub mod tensor;

pub use attacks::{Algorithm, AttackConfig, AttackResult, Attacker, InitStrategy};
pub use error::{Error, Result};
pub use tensor::{NormKind, Tensor4};
