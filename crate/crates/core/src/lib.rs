//! Differentiable search over per-group weight bit-widths, with 0 bits
//! standing for pruning, for small classifiers trained on CPU.
//!
//! The crate carries its own reverse-mode autodiff ([`autodiff`]), uniform
//! fake quantization ([`quant`]), the relaxed supernet ([`supernet`]), the
//! size-aware objective ([`objectives`]), the alternating optimizer
//! ([`bilevel`]) and the end-to-end driver ([`pipeline`]).

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod autodiff;
pub mod bilevel;
pub mod config;
pub mod data;
pub mod error;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod quant;
pub mod rng;
pub mod supernet;
pub mod tensor;

pub use artifacts::{Checkpoint, TraceRow};
pub use autodiff::{Graph, Var};
pub use config::{ArchMode, RunConfig};
pub use data::{Dataset, DatasetSplit};
pub use error::{Error, Result};
pub use models::GroupedModel;
pub use objectives::{Band, SizeObjectiveConfig};
pub use pipeline::{run_search, FinalReport, RunArtifacts};
pub use quant::{GroupSpec, QuantParams};
pub use supernet::{Assignment, AssignmentEntry, BitAssignmentState, Supernet};
pub use tensor::Tensor;
