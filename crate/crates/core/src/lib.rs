//! Source-free domain adaptation built on selective state-space scans.
//!
//! The crate is organized bottom-up: [`tensor`] and [`autodiff`] provide the
//! numerical substrate, [`ssm`] the scan primitives, [`model`] the network,
//! [`labeling`], [`objectives`] and [`scs`] the adaptation machinery,
//! [`data`] the synthetic benchmark, and [`pipeline`] the training loops.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod exec;
pub mod kv;
pub mod labeling;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod scs;
pub mod ssm;
pub mod tensor;

pub use autodiff::{finite_difference, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Dtype, Tensor};
