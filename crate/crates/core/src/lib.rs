//! Hierarchical graph feature enhancement: windowed adaptive-frequency
//! attention, a supernode context graph and the supporting numerics.

pub mod afm;
pub mod baselines;
pub mod block;
pub mod checks;
pub mod counter;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod spectral;
pub mod supernode;
pub mod tape;
pub mod tensor;
pub mod window;

pub use afm::{afm_forward, AfmConfig, AfmParams, NormMode, OutputActivation};
pub use block::{hgfe_forward, HgfeConfig, HgfeParams, Residual};
pub use error::{HgfeError, Result};
pub use tensor::{DType, Tensor};
pub use window::PartitionMode;
