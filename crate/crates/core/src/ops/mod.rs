//! Layer primitives with explicit forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod deconv;
pub mod linear;
pub mod loss;
pub mod pool;

use serde::{Deserialize, Serialize};

pub use activation::{
    activation_backward, activation_forward, crelu_backward, crelu_forward, ActivationCache,
    ActivationKind,
};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnGrads, BnParams};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use deconv::{depthwise_deconv2d_backward, depthwise_deconv2d_forward};
pub use linear::{linear_backward, linear_forward, LinearGrads, LinearParams};
pub use loss::softmax_cross_entropy;
pub use pool::{global_avgpool_backward, global_avgpool_forward, maxpool2x2_backward, maxpool2x2_forward};

/// Train/eval switch for layers whose behaviour depends on it (BN, RReLU).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Samples per parallel work item. Fixed so reductions happen in the same
/// order whatever the thread count.
pub(crate) const CHUNK: usize = 8;

/// `c = a·b + beta·c` for row/column-strided `f64` matrices
/// (`a` is m×k, `b` is k×n, `c` is m×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
