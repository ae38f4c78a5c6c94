//! Once-for-all adversarial training at desk scale.
//!
//! A single conditional network is trained across a distribution of
//! accuracy/robustness trade-off weights `λ` (and, for slimmable models,
//! channel width factors `α`), and both are chosen at inference time.
//!
//! Modules, bottom up:
//! - [`tensor`]: reverse-mode autodiff engine
//! - [`layers`]: batch norm, dual and switchable BN, FiLM, `λ` encoders and the backbone
//! - [`attacks`]: FGSM, PGD and MI-FGSM under an L∞ budget
//! - [`training`]: OAT / OATS steps, fixed-`λ` baselines, SGD and cosine schedule
//! - [`eval`]: SA/RA, trade-off sweeps, Jacobian saliency, FLOP accounting
//! - [`data`]: synthetic glyph task, IDX loader, deterministic batching

pub mod attacks;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod tensor;
pub mod training;

pub use attacks::{AttackKind, AttackSpec};
pub use data::{BatchIterator, Dataset, GlyphStyle};
pub use error::{Error, Result};
pub use layers::{BnStyle, EncodingScheme, LambdaEncoder, Model, ModelSpec};
pub use tensor::{Scalar, Tape, Tensor, Var};
