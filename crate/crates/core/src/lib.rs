//! Low-rank gradient compression for data-parallel SGD.
//!
//! The crate bundles
//!
//! * [`linalg`]: the dense kernel (products, Gram-Schmidt, a converged
//!   subspace-iteration oracle for best rank-r approximations),
//! * [`compressors`]: PowerSGD and the comparison schemes behind one
//!   interface,
//! * [`efsgd`]: error-feedback SGD with momentum, plus plain momentum for
//!   schemes that run without error feedback,
//! * [`commsim`]: a deterministic in-process all-reduce / all-gather with
//!   exact bit and operation accounting,
//! * [`models`]: parameter-shape catalogs and desk-scale training problems,
//! * [`train`], [`verify`] and [`cli`]: the drivers behind the `powersgd`
//!   binary.

pub mod cli;
pub mod commsim;
pub mod compressors;
pub mod efsgd;
pub mod error;
pub mod linalg;
pub mod models;
pub mod par;
pub mod rng;
pub mod train;
pub mod verify;

pub use commsim::{CommStats, Communicator, Route};
pub use compressors::{CompressedPayload, Compressor, CompressorConfig, CompressorKind};
pub use error::{Error, Result};
pub use linalg::{LowRankFactors, Matrix};
