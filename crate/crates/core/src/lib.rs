//! Predictive-coding networks under width- and depth-aware parameterisations.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense linear algebra, seeded Gaussian sampling, statistics
//! - [`parameterization`]: the `(a, b, c, d, α)` exponent algebra and presets
//! - [`network`]: MLP and residual architectures, init, forward pass, kernels
//! - [`bp_engine`]: MSE loss and exact reverse-mode gradients
//! - [`pc_engine`]: PC energy, activity inference and weight gradients
//! - [`equilibrated`]: closed-form equilibrated energy for linear scalar-output nets
//! - [`optim`]: GD and Adam under the parameterised learning rate

pub mod bp_engine;
pub mod equilibrated;
pub mod network;
pub mod numkit;
pub mod optim;
pub mod parameterization;
pub mod pc_engine;

mod blob;

use thiserror::Error;

pub use network::{Activation, ArchKind, Architecture, Batch, ForwardTrace, NetworkState};
pub use numkit::{Matrix, RngStream};
pub use parameterization::{Parameterisation, Preset};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error(transparent)]
    Param(#[from] parameterization::ParamError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
