//! Adversarially trained joint energy-based models.
//!
//! A classifier `f: R^D -> R^K` doubles as an energy model: the joint energy
//! of `(x, y)` is `-f(x)[y]` and the marginal energy is `-logsumexp f(x)`.
//! The crate trains such classifiers on PGD adversarial examples together
//! with a contrastive generative term, and generates samples by combining a
//! targeted attack prior with Langevin dynamics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod image;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod pgd;
pub mod sgld;
pub mod trainer;

pub use autodiff::{Graph, GraphBuilder, Tensor};
pub use checkpoint::Checkpoint;
pub use data::{Dataset, DatasetMeta};
pub use energy::{Energy, EnergyView, Objective};
pub use error::{CheckpointError, Error, Result};
pub use inference::{InferenceSpec, Pipeline};
pub use model::{ArchTag, Classifier, Params};
pub use pgd::{AttackMode, AttackSpec};
pub use sgld::{ChainState, SgldConfig};
pub use trainer::{MixtureStats, TrainConfig};
