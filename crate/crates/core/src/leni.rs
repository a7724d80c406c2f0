//! The LENI activation block.
//!
//! Two branches share the block input `x`:
//!
//! ```text
//! x ──relu──────────────────────────────────────┐
//! │                                              concat ─ bn_fuse ─ conv1x1(2c→c) ─ y
//! └─neg─relu─neg─ dw-deconv3x3 ─ bn_neg ─────────┘
//! ```
//!
//! The positive branch is a plain ReLU. The negative branch keeps the
//! values ReLU would discard, restores their sign (`-relu(-x) = min(x, 0)`),
//! and passes them through a learnable depthwise transposed convolution and
//! batch norm. The fused `2c` channels are normalized and compressed back to
//! `c`, so the block is a drop-in replacement for an activation layer.

use crate::error::{shape_err, Result};
use crate::ops::{
    batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward,
    deconv::delta_kernel, depthwise_deconv2d_backward, depthwise_deconv2d_forward, BnCache,
    BnParams, ConvParams, Mode,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DECONV_KERNEL: usize = 3;
const DECONV_PAD: usize = 1;

/// Learnable state of one block over `c` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LeniBlockParams {
    pub c: usize,
    /// Depthwise transposed-conv kernel, `(c, 1, 3, 3)`.
    pub deconv_weight: Tensor,
    pub bn_neg: BnParams,
    /// Over the `2c` concatenated channels.
    pub bn_fuse: BnParams,
    /// 1x1 compression, `(c, 2c, 1, 1)`, no bias.
    pub compress_weight: Tensor,
}

/// Learned parameter and running-statistic buffer counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct ParamCount {
    pub learned: usize,
    pub buffers: usize,
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;
    fn add(self, o: ParamCount) -> ParamCount {
        ParamCount {
            learned: self.learned + o.learned,
            buffers: self.buffers + o.buffers,
        }
    }
}

impl std::iter::Sum for ParamCount {
    fn sum<I: Iterator<Item = ParamCount>>(iter: I) -> Self {
        iter.fold(ParamCount::default(), |a, b| a + b)
    }
}

/// Closed-form size of a block over `c` channels:
/// deconv `9c`, `bn_neg` γβ `2c`, `bn_fuse` γβ `4c`, compression `2c²`;
/// running stats `2c + 4c`.
pub fn leni_param_count(c: usize) -> ParamCount {
    ParamCount {
        learned: 9 * c + 2 * c + 4 * c + 2 * c * c,
        buffers: 2 * c + 4 * c,
    }
}

impl LeniBlockParams {
    /// Kaiming deconv (fan_in 9) and compression (fan_in 2c); BN γ=1, β=0.
    pub fn init(c: usize, rng: &mut Rng) -> Result<Self> {
        Ok(LeniBlockParams {
            c,
            deconv_weight: Tensor::kaiming_init(rng, (c, 1, DECONV_KERNEL, DECONV_KERNEL), 9)?,
            bn_neg: BnParams::new(c)?,
            bn_fuse: BnParams::new(2 * c)?,
            compress_weight: Tensor::kaiming_init(rng, (c, 2 * c, 1, 1), 2 * c)?,
        })
    }

    /// Parameters under which the block reproduces its input exactly:
    /// delta deconv kernel, eval-mode BNs with mean 0 and var `1 - eps`,
    /// and compression `[I | I]`.
    pub fn identity(c: usize) -> Result<Self> {
        let mut bn_neg = BnParams::new(c)?;
        let mut bn_fuse = BnParams::new(2 * c)?;
        for bn in [&mut bn_neg, &mut bn_fuse] {
            bn.mode = Mode::Eval;
            let v = 1.0 - bn.eps;
            bn.running_var.data_mut().fill(v);
        }
        let mut compress = Tensor::zeros((c, 2 * c, 1, 1))?;
        for i in 0..c {
            compress.data_mut()[i * 2 * c + i] = 1.0;
            compress.data_mut()[i * 2 * c + c + i] = 1.0;
        }
        Ok(LeniBlockParams {
            c,
            deconv_weight: delta_kernel(c, DECONV_KERNEL)?,
            bn_neg,
            bn_fuse,
            compress_weight: compress,
        })
    }

    /// [`identity`](Self::identity) with the negative-branch BN scale at
    /// zero, so X2 vanishes and the block computes `relu(x)` exactly.
    pub fn relu_equivalent(c: usize) -> Result<Self> {
        let mut p = Self::identity(c)?;
        p.bn_neg.gamma.data_mut().fill(0.0);
        Ok(p)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.bn_neg.mode = mode;
        self.bn_fuse.mode = mode;
    }

    fn compress(&self) -> Result<ConvParams> {
        // ConvParams owns its weight; the clone is c*2c values.
        ConvParams::new(self.compress_weight.clone(), None, 1, 0, 1)
    }

    pub fn param_count(&self) -> ParamCount {
        leni_param_count(self.c)
    }
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct LeniCache {
    x: Tensor,
    /// `min(x, 0)`: the sign-restored negative branch input.
    pre_neg: Tensor,
    bn_neg: BnCache,
    fused_in: Tensor,
    bn_fuse: BnCache,
    fused: Tensor,
}

impl LeniCache {
    pub fn pre_neg(&self) -> &Tensor {
        &self.pre_neg
    }
}

#[derive(Debug, Clone)]
pub struct LeniGrads {
    pub deconv_weight: Tensor,
    pub bn_neg_gamma: Tensor,
    pub bn_neg_beta: Tensor,
    pub bn_fuse_gamma: Tensor,
    pub bn_fuse_beta: Tensor,
    pub compress_weight: Tensor,
}

pub fn leni_forward(x: &Tensor, p: &mut LeniBlockParams) -> Result<(Tensor, LeniCache)> {
    if x.shape().c != p.c {
        return Err(shape_err!("LENI block over {} channels got {:?}", p.c, x.shape()));
    }
    let pos = x.map(|v| if v > 0.0 { v } else { 0.0 });
    let dead = x.negate().map(|v| if v > 0.0 { v } else { 0.0 });
    let pre_neg = dead.negate();
    let deconv = depthwise_deconv2d_forward(&pre_neg, &p.deconv_weight, DECONV_PAD)?;
    let (neg, bn_neg) = batchnorm_forward(&deconv, &mut p.bn_neg)?;
    let fused_in = Tensor::concat_channels(&pos, &neg)?;
    let (fused, bn_fuse) = batchnorm_forward(&fused_in, &mut p.bn_fuse)?;
    let y = conv2d_forward(&fused, &p.compress()?)?;
    Ok((
        y,
        LeniCache {
            x: x.clone(),
            pre_neg,
            bn_neg,
            fused_in,
            bn_fuse,
            fused,
        },
    ))
}

pub fn leni_backward(
    cache: &LeniCache,
    grad_y: &Tensor,
    p: &LeniBlockParams,
) -> Result<(Tensor, LeniGrads)> {
    let s = cache.x.shape();
    grad_y.expect_shape(s)?;
    let compress = conv2d_backward(&cache.fused, &p.compress()?, grad_y)?;
    let fuse = batchnorm_backward(&cache.bn_fuse, &p.bn_fuse, &compress.grad_x)?;
    let g_pos = fuse.grad_x.slice_channels(0..p.c)?;
    let g_neg = fuse.grad_x.slice_channels(p.c..2 * p.c)?;
    let neg = batchnorm_backward(&cache.bn_neg, &p.bn_neg, &g_neg)?;
    let (g_pre_neg, g_deconv_w) =
        depthwise_deconv2d_backward(&cache.pre_neg, &p.deconv_weight, DECONV_PAD, &neg.grad_x)?;
    // pre_neg = -relu(-x): the two sign flips cancel, leaving the x < 0 mask.
    let grad_x = Tensor::from_vec(
        s,
        cache
            .x
            .data()
            .iter()
            .zip(g_pos.data().iter().zip(g_pre_neg.data()))
            .map(|(&v, (&gp, &gn))| {
                if v > 0.0 {
                    gp
                } else if v < 0.0 {
                    gn
                } else {
                    0.0
                }
            })
            .collect(),
    )?;
    debug_assert_eq!(cache.fused_in.shape().c, 2 * p.c);
    Ok((
        grad_x,
        LeniGrads {
            deconv_weight: g_deconv_w,
            bn_neg_gamma: neg.grad_gamma,
            bn_neg_beta: neg.grad_beta,
            bn_fuse_gamma: fuse.grad_gamma,
            bn_fuse_beta: fuse.grad_beta,
            compress_weight: compress.grad_weight,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::tests::random;
    use crate::ops::{activation_forward, ActivationKind};

    #[test]
    fn closed_form_counts() {
        assert_eq!(leni_param_count(64), ParamCount { learned: 9_152, buffers: 384 });
        assert_eq!(leni_param_count(64).learned + leni_param_count(64).buffers, 9_536);
        assert_eq!(leni_param_count(32).learned, 2_528);
        assert_eq!(leni_param_count(16).learned, 752);
    }

    #[test]
    fn counts_match_tensor_sizes() {
        let p = LeniBlockParams::init(7, &mut Rng::new(0)).unwrap();
        let learned = p.deconv_weight.len()
            + p.bn_neg.gamma.len()
            + p.bn_neg.beta.len()
            + p.bn_fuse.gamma.len()
            + p.bn_fuse.beta.len()
            + p.compress_weight.len();
        let buffers = p.bn_neg.running_mean.len()
            + p.bn_neg.running_var.len()
            + p.bn_fuse.running_mean.len()
            + p.bn_fuse.running_var.len();
        assert_eq!(p.param_count(), ParamCount { learned, buffers });
        assert_eq!(p.bn_fuse.channels(), 14);
        assert_eq!(p.compress_weight.shape().n, 7);
    }

    #[test]
    fn identity_configuration_reconstructs_input() {
        let mut rng = Rng::new(1);
        let mut p = LeniBlockParams::identity(5).unwrap();
        let x = random(&mut rng, (2, 5, 6, 6));
        let (y, _) = leni_forward(&x, &mut p).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-9);
        let z = Tensor::zeros((1, 5, 3, 3)).unwrap();
        assert!(leni_forward(&z, &mut p).unwrap().0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_equivalent_configuration() {
        let mut rng = Rng::new(11);
        let mut p = LeniBlockParams::relu_equivalent(4).unwrap();
        let x = random(&mut rng, (2, 4, 5, 5));
        let (y, _) = leni_forward(&x, &mut p).unwrap();
        assert!(y.max_abs_diff(&x.map(|v| v.max(0.0))).unwrap() <= 1e-12);
    }

    #[test]
    fn sign_retention() {
        let mut rng = Rng::new(2);
        let mut p = LeniBlockParams::init(3, &mut rng).unwrap();
        let x = random(&mut rng, (2, 3, 4, 4));
        let (_, cache) = leni_forward(&x, &mut p).unwrap();
        for (a, b) in cache.pre_neg().data().iter().zip(x.data()) {
            assert_eq!(*a, b.min(0.0));
        }
    }

    #[test]
    fn preserves_shape_and_rejects_mismatch() {
        let mut rng = Rng::new(3);
        let mut p = LeniBlockParams::init(4, &mut rng).unwrap();
        let x = random(&mut rng, (2, 4, 5, 7));
        assert_eq!(leni_forward(&x, &mut p).unwrap().0.shape(), x.shape());
        assert!(leni_forward(&random(&mut rng, (2, 3, 5, 7)), &mut p).is_err());
        let (y, cache) = leni_forward(&x, &mut p).unwrap();
        assert!(leni_backward(&cache, &Tensor::zeros((2, 4, 5, 6)).unwrap(), &p).is_err());
        assert!(leni_backward(&cache, &y, &p).is_ok());
    }

    #[test]
    fn train_mode_needs_batch_statistics() {
        let mut p = LeniBlockParams::init(2, &mut Rng::new(4)).unwrap();
        let x = Tensor::full((1, 2, 1, 1), -1.0).unwrap();
        assert!(matches!(leni_forward(&x, &mut p), Err(crate::Error::Stats(_))));
    }

    #[test]
    fn x1_only_branch_gives_relu_masked_gradient() {
        let mut rng = Rng::new(5);
        let c = 3;
        let mut p = LeniBlockParams::identity(c).unwrap();
        // keep the positive half of the compression only
        for i in 0..c {
            p.compress_weight.data_mut()[i * 2 * c + c + i] = 0.0;
        }
        let x = random(&mut rng, (2, c, 4, 4));
        let (_, cache) = leni_forward(&x, &mut p).unwrap();
        let gy = random(&mut rng, (2, c, 4, 4));
        let (gx, _) = leni_backward(&cache, &gy, &p).unwrap();
        let k = 1.0 / (1.0 - p.bn_fuse.eps + p.bn_fuse.eps).sqrt();
        for ((g, v), up) in gx.data().iter().zip(x.data()).zip(gy.data()) {
            let expect = if *v > 0.0 { up * k } else { 0.0 };
            assert_eq!(*g, expect);
        }
    }

    #[test]
    fn all_negative_input_routes_gradient_through_negative_branch() {
        let mut rng = Rng::new(6);
        let c = 2;
        let mut p = LeniBlockParams::init(c, &mut rng).unwrap();
        p.set_mode(Mode::Eval);
        let x = random(&mut rng, (1, c, 4, 4)).map(|v| -v.abs() - 0.05);
        let (_, cache) = leni_forward(&x, &mut p).unwrap();
        let gy = random(&mut rng, (1, c, 4, 4));
        let (gx, _) = leni_backward(&cache, &gy, &p).unwrap();
        // the X1 half sees nothing: zeroing it out of the compression changes nothing
        let mut q = p.clone();
        for o in 0..c {
            for i in 0..c {
                q.compress_weight.data_mut()[o * 2 * c + i] = 0.0;
            }
        }
        let (_, cache_q) = leni_forward(&x, &mut q).unwrap();
        let (gx_q, _) = leni_backward(&cache_q, &gy, &q).unwrap();
        assert_eq!(gx, gx_q);
        assert!(gx.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn negative_entries_influence_output_unlike_relu() {
        let mut rng = Rng::new(7);
        let c = 3;
        let mut p = LeniBlockParams::init(c, &mut rng).unwrap();
        p.set_mode(Mode::Eval);
        let x = random(&mut rng, (1, c, 5, 5));
        let idx = x.data().iter().position(|&v| v < -0.1).unwrap();
        let mut bumped = x.clone();
        bumped.data_mut()[idx] -= 1e-3;
        let y0 = leni_forward(&x, &mut p).unwrap().0;
        let y1 = leni_forward(&bumped, &mut p).unwrap().0;
        assert!(y0.max_abs_diff(&y1).unwrap() > 1e-8);
        let relu = |t: &Tensor| activation_forward(t, &ActivationKind::Relu, None, Mode::Eval, None).unwrap().0;
        assert_eq!(relu(&x), relu(&bumped));
    }

    #[test]
    fn block_is_not_odd() {
        let mut rng = Rng::new(8);
        let mut p = LeniBlockParams::init(3, &mut rng).unwrap();
        p.set_mode(Mode::Eval);
        let mut found = false;
        for _ in 0..100 {
            let x = random(&mut rng, (1, 3, 4, 4));
            let a = leni_forward(&x.negate(), &mut p).unwrap().0;
            let b = leni_forward(&x, &mut p).unwrap().0.negate();
            if a.max_abs_diff(&b).unwrap() > 1e-6 {
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn output_rarely_exactly_zero() {
        let mut rng = Rng::new(9);
        let mut p = LeniBlockParams::init(4, &mut rng).unwrap();
        let x = random(&mut rng, (4, 4, 8, 8));
        let (y, _) = leni_forward(&x, &mut p).unwrap();
        let zeros = y.data().iter().filter(|v| v.abs() < 1e-12).count();
        assert!((zeros as f64) < 0.01 * y.len() as f64);
    }
}
