//! CNN micro-framework built around the LENI block, a drop-in activation
//! replacement that keeps negative-phase information through a learnable
//! depthwise transposed-conv branch.
//!
//! Everything runs on `f64` NCHW tensors with explicit forward and backward
//! passes, so each operation can be checked against a finite-difference or
//! brute-force oracle.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod leni;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use experiment::ExperimentConfig;
pub use leni::{leni_param_count, LeniBlockParams, ParamCount};
pub use model::{Model, ModelConfig};
pub use ops::{ActivationKind, Mode};
pub use rng::Rng;
pub use tensor::{Shape, Tensor};

/// Sizes rayon's global pool from `LENIKIT_THREADS` (default: all cores).
/// Results do not depend on the thread count. Later calls are no-ops.
pub fn init_threads() -> Result<usize> {
    let threads = match std::env::var("LENIKIT_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => return Err(Error::Config(format!("LENIKIT_THREADS must be a positive integer, got '{v}'"))),
        },
        Err(_) => 0,
    };
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(rayon::current_num_threads())
}
