//! Depthwise transposed convolution at stride 1.
//!
//! The forward pass scatters each input pixel through the kernel (the
//! transpose of depthwise correlation). At stride 1 with padding
//! `(k - 1) / 2` the output keeps the input's spatial size.

use rayon::prelude::*;

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Shape, Tensor};

fn check(x: Shape, weight: Shape, padding: usize) -> Result<usize> {
    let k = weight.h;
    if weight.w != k || weight.c != 1 {
        return Err(shape_err!("depthwise deconv weight must be (c, 1, k, k), got {weight:?}"));
    }
    if k.is_multiple_of(2) {
        return Err(param_err!("depthwise deconv needs an odd kernel, got {k}"));
    }
    if padding != (k - 1) / 2 {
        return Err(param_err!(
            "depthwise deconv supports padding (k-1)/2 = {} only, got {padding}",
            (k - 1) / 2
        ));
    }
    if weight.n != x.c {
        return Err(shape_err!(
            "deconv weight has {} channels, input {x:?}",
            weight.n
        ));
    }
    Ok(k)
}

/// Offsets `(ky, kx)` pair input `(iy, ix)` with output `(iy + ky - pad, ix + kx - pad)`.
/// Calls `f(tap, src, dst, len)` once per contiguous row segment.
#[inline]
fn for_each_tap(h: usize, w: usize, k: usize, pad: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
    for ky in 0..k {
        for kx in 0..k {
            let tap = ky * k + kx;
            let y_lo = pad.saturating_sub(ky);
            let y_hi = (h + pad).saturating_sub(ky).min(h);
            let x_lo = pad.saturating_sub(kx);
            let x_hi = (w + pad).saturating_sub(kx).min(w);
            if x_lo >= x_hi {
                continue;
            }
            for iy in y_lo..y_hi {
                let oy = iy + ky - pad;
                f(tap, iy * w + x_lo, oy * w + x_lo + kx - pad, x_hi - x_lo);
            }
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn depthwise_deconv2d_forward(x: &Tensor, weight: &Tensor, padding: usize) -> Result<Tensor> {
    let s = x.shape();
    let k = check(s, weight.shape(), padding)?;
    let plane = s.plane();
    let wd = weight.data();
    let mut out = vec![0.0; s.numel()];
    out.par_chunks_mut(plane)
        .zip(x.data().par_chunks(plane))
        .enumerate()
        .for_each(|(i, (o, xin))| {
            let kern = &wd[(i % s.c) * k * k..][..k * k];
            for_each_tap(s.h, s.w, k, padding, |tap, src, dst, len| {
                axpy(kern[tap], &xin[src..src + len], &mut o[dst..dst + len])
            });
        });
    Ok(Tensor::like(s, out))
}

/// Returns `(grad_x, grad_weight)`.
pub fn depthwise_deconv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    let k = check(s, weight.shape(), padding)?;
    grad_out.expect_shape(s)?;
    let plane = s.plane();
    let wd = weight.data();
    let mut gx = vec![0.0; s.numel()];
    gx.par_chunks_mut(plane)
        .zip(grad_out.data().par_chunks(plane))
        .enumerate()
        .for_each(|(i, (g, go))| {
            let kern = &wd[(i % s.c) * k * k..][..k * k];
            for_each_tap(s.h, s.w, k, padding, |tap, src, dst, len| {
                axpy(kern[tap], &go[dst..dst + len], &mut g[src..src + len])
            });
        });

    let mut gw = vec![0.0; s.c * k * k];
    for n in 0..s.n {
        for c in 0..s.c {
            let (xin, go) = (x.plane(n, c), grad_out.plane(n, c));
            let gk = &mut gw[c * k * k..(c + 1) * k * k];
            for_each_tap(s.h, s.w, k, padding, |tap, src, dst, len| {
                gk[tap] += dot(&xin[src..src + len], &go[dst..dst + len])
            });
        }
    }
    Ok((Tensor::like(s, gx), Tensor::like(weight.shape(), gw)))
}

/// Centered delta kernel `(c, 1, k, k)`: the identity map.
pub fn delta_kernel(c: usize, k: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros((c, 1, k, k))?;
    let centre = (k / 2) * k + k / 2;
    for ch in 0..c {
        t.data_mut()[ch * k * k + centre] = 1.0;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::tests::random;
    use crate::ops::{conv2d_forward, ConvParams};
    use crate::rng::Rng;

    fn flipped(weight: &Tensor) -> Tensor {
        let s = weight.shape();
        let k = s.h;
        let mut out = weight.clone();
        for c in 0..s.n {
            for ky in 0..k {
                for kx in 0..k {
                    out.data_mut()[(c * k + ky) * k + kx] = weight.at(c, 0, k - 1 - ky, k - 1 - kx);
                }
            }
        }
        out
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = Rng::new(0);
        let x = random(&mut rng, (2, 3, 5, 4));
        let y = depthwise_deconv2d_forward(&x, &delta_kernel(3, 3).unwrap(), 1).unwrap();
        assert_eq!(y, x);
        let go = random(&mut rng, (2, 3, 5, 4));
        let (gx, _) = depthwise_deconv2d_backward(&x, &delta_kernel(3, 3).unwrap(), 1, &go).unwrap();
        assert_eq!(gx, go);
    }

    #[test]
    fn equals_flipped_correlation() {
        let mut rng = Rng::new(1);
        for k in [3, 5] {
            let x = random(&mut rng, (2, 4, 6, 7));
            let w = random(&mut rng, (4, 1, k, k));
            let y = depthwise_deconv2d_forward(&x, &w, (k - 1) / 2).unwrap();
            let p = ConvParams::new(flipped(&w), None, 1, (k - 1) / 2, 4).unwrap();
            let diff = y.max_abs_diff(&conv2d_forward(&x, &p).unwrap()).unwrap();
            assert!(diff <= 1e-12, "k={k}: {diff}");
        }
    }

    #[test]
    fn preserves_shape() {
        let mut rng = Rng::new(2);
        let x = random(&mut rng, (2, 64, 16, 16));
        let w = random(&mut rng, (64, 1, 3, 3));
        assert_eq!(depthwise_deconv2d_forward(&x, &w, 1).unwrap().shape(), x.shape());
    }

    #[test]
    fn rejects_even_kernel_and_channel_mismatch() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, (1, 2, 4, 4));
        assert!(matches!(
            depthwise_deconv2d_forward(&x, &random(&mut rng, (2, 1, 2, 2)), 0),
            Err(crate::Error::Param(_))
        ));
        assert!(matches!(
            depthwise_deconv2d_forward(&x, &random(&mut rng, (3, 1, 3, 3)), 1),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn zero_grad_out() {
        let mut rng = Rng::new(4);
        let x = random(&mut rng, (1, 2, 4, 4));
        let w = random(&mut rng, (2, 1, 3, 3));
        let (gx, gw) = depthwise_deconv2d_backward(&x, &w, 1, &Tensor::zeros((1, 2, 4, 4)).unwrap())
            .unwrap();
        assert!(gx.data().iter().chain(gw.data()).all(|&v| v == 0.0));
    }
}
