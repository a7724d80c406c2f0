//! Grouped 2-D cross-correlation via im2col + GEMM.

use rayon::prelude::*;

use super::{gemm, CHUNK};
use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Weight `(c_out, c_in_per_group, k, k)` plus geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    /// Length-`c_out` vector stored as `(1, c_out, 1, 1)`.
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub grad_x: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Option<Tensor>,
}

impl ConvParams {
    pub fn new(
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(param_err!("conv kernel must be square, got {ws:?}"));
        }
        if stride == 0 || groups == 0 {
            return Err(param_err!("stride and groups must be positive"));
        }
        if !ws.n.is_multiple_of(groups) {
            return Err(param_err!("c_out {} not divisible by groups {groups}", ws.n));
        }
        if let Some(b) = &bias {
            if b.len() != ws.n {
                return Err(shape_err!("bias length {} != c_out {}", b.len(), ws.n));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in_per_group(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_in(&self) -> usize {
        self.groups * self.c_in_per_group()
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn is_depthwise(&self) -> bool {
        self.c_in_per_group() == 1 && self.groups == self.c_out()
    }

    /// Validates `input` and returns the output shape.
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.c_in() {
            return Err(shape_err!(
                "conv expects {} input channels ({} groups x {}), got {:?}",
                self.c_in(),
                self.groups,
                self.c_in_per_group(),
                input
            ));
        }
        let k = self.kernel();
        let span = |d: usize| -> Result<usize> {
            let padded = d + 2 * self.padding;
            if padded < k {
                return Err(shape_err!("kernel {k} larger than padded input {input:?}"));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok(Shape::new(input.n, self.c_out(), span(input.h)?, span(input.w)?))
    }
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(p: &ConvParams, input: Shape, out: Shape) -> Self {
        Geometry {
            c_in: p.c_in_per_group(),
            h: input.h,
            w: input.w,
            oh: out.h,
            ow: out.w,
            k: p.kernel(),
            stride: p.stride,
            pad: p.padding,
        }
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in
    /// bounds, as a half-open range.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// `x` holds the group's `c_in` planes; `col` is rows() x cols().
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (k, l, s) = (self.k, self.cols(), self.stride);
        for ci in 0..self.c_in {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * l..][..l];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize || lo == hi {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let first = lo * s + kx - self.pad;
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (d, v) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(s)) {
                                *d = *v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f64], x: &mut [f64]) {
        let (k, l, s) = (self.k, self.cols(), self.stride);
        for ci in 0..self.c_in {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * l..][..l];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * s + kx - self.pad;
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let src = &row[oy * self.ow + lo..oy * self.ow + hi];
                        for (d, v) in dst[first..].iter_mut().step_by(s).zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let input = x.shape();
    let out_shape = p.output_shape(input)?;
    let geo = Geometry::new(p, input, out_shape);
    let (groups, cout_g) = (p.groups, p.c_out() / p.groups);
    let (rows, cols) = (geo.rows(), geo.cols());
    let in_group_len = geo.c_in * input.plane();
    let weight = p.weight.data();
    let bias = p.bias.as_ref().map(|b| b.data());

    let mut out = vec![0.0; out_shape.numel()];
    out.par_chunks_mut(out_shape.sample_len())
        .enumerate()
        .for_each_init(
            || vec![0.0; rows * cols],
            |col, (n, out_n)| {
                let xs = x.sample(n);
                for g in 0..groups {
                    geo.im2col(&xs[g * in_group_len..(g + 1) * in_group_len], col);
                    let w_g = &weight[g * cout_g * rows..(g + 1) * cout_g * rows];
                    let o_g = &mut out_n[g * cout_g * cols..(g + 1) * cout_g * cols];
                    gemm(cout_g, rows, cols, w_g, (rows, 1), col, (cols, 1), 0.0, o_g, (cols, 1));
                }
                if let Some(b) = bias {
                    for (plane, &bv) in out_n.chunks_mut(cols).zip(b) {
                        plane.iter_mut().for_each(|v| *v += bv);
                    }
                }
            },
        );
    Ok(Tensor::like(out_shape, out))
}

pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let input = x.shape();
    let out_shape = p.output_shape(input)?;
    grad_out.expect_shape(out_shape)?;
    let geo = Geometry::new(p, input, out_shape);
    let (groups, cout_g) = (p.groups, p.c_out() / p.groups);
    let (rows, cols) = (geo.rows(), geo.cols());
    let in_group_len = geo.c_in * input.plane();
    let weight = p.weight.data();
    let w_len = weight.len();
    let c_out = p.c_out();

    let mut grad_x = vec![0.0; input.numel()];
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_x
        .par_chunks_mut(CHUNK * input.sample_len())
        .enumerate()
        .map(|(chunk, gx_chunk)| {
            let mut gw = vec![0.0; w_len];
            let mut gb = vec![0.0; c_out];
            let mut col = vec![0.0; rows * cols];
            let mut gcol = vec![0.0; rows * cols];
            for (i, gx_n) in gx_chunk.chunks_mut(input.sample_len()).enumerate() {
                let n = chunk * CHUNK + i;
                let xs = x.sample(n);
                let go = grad_out.sample(n);
                for (c, plane) in go.chunks(cols).enumerate() {
                    gb[c] += plane.iter().sum::<f64>();
                }
                for g in 0..groups {
                    geo.im2col(&xs[g * in_group_len..(g + 1) * in_group_len], &mut col);
                    let go_g = &go[g * cout_g * cols..(g + 1) * cout_g * cols];
                    let gw_g = &mut gw[g * cout_g * rows..(g + 1) * cout_g * rows];
                    gemm(cout_g, cols, rows, go_g, (cols, 1), &col, (1, cols), 1.0, gw_g, (rows, 1));
                    let w_g = &weight[g * cout_g * rows..(g + 1) * cout_g * rows];
                    gemm(rows, cout_g, cols, w_g, (1, rows), go_g, (cols, 1), 0.0, &mut gcol, (cols, 1));
                    geo.col2im_add(&gcol, &mut gx_n[g * in_group_len..(g + 1) * in_group_len]);
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw = vec![0.0; w_len];
    let mut gb = vec![0.0; c_out];
    for (pw, pb) in partials {
        gw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        grad_x: Tensor::like(input, grad_x),
        grad_weight: Tensor::like(p.weight.shape(), gw),
        grad_bias: match p.bias {
            Some(_) => Some(Tensor::channel_vector(gb)?),
            None => None,
        },
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::rng::Rng;

    pub(crate) fn random(rng: &mut Rng, shape: impl Into<Shape>) -> Tensor {
        let shape = shape.into();
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Six nested loops over the definition of grouped cross-correlation.
    pub(crate) fn direct_conv(x: &Tensor, p: &ConvParams) -> Tensor {
        let s = x.shape();
        let o = p.output_shape(s).unwrap();
        let (k, cin_g, cout_g) = (p.kernel(), p.c_in_per_group(), p.c_out() / p.groups);
        let w = &p.weight;
        let mut out = vec![0.0; o.numel()];
        for n in 0..s.n {
            for co in 0..o.c {
                let g = co / cout_g;
                for oy in 0..o.h {
                    for ox in 0..o.w {
                        let mut acc = p.bias.as_ref().map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin_g {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    acc += x.at(n, g * cin_g + ci, iy as usize, ix as usize)
                                        * w.at(co, ci, ky, kx);
                                }
                            }
                        }
                        out[((n * o.c + co) * o.h + oy) * o.w + ox] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(o, out).unwrap()
    }

    #[test]
    fn output_shape_same_padding() {
        let mut rng = Rng::new(0);
        let x = random(&mut rng, (2, 3, 32, 32));
        let p = ConvParams::new(random(&mut rng, (64, 3, 3, 3)), None, 1, 1, 1).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap().shape(), Shape::new(2, 64, 32, 32));
    }

    #[test]
    fn identity_1x1() {
        let mut rng = Rng::new(1);
        let x = random(&mut rng, (2, 4, 5, 5));
        let mut w = vec![0.0; 16];
        for i in 0..4 {
            w[i * 4 + i] = 1.0;
        }
        let p = ConvParams::new(Tensor::from_vec((4, 4, 1, 1), w).unwrap(), None, 1, 0, 1).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn matches_direct_loops() {
        let mut rng = Rng::new(2);
        let x = random(&mut rng, (1, 2, 4, 4));
        let p = ConvParams::new(
            random(&mut rng, (3, 2, 3, 3)),
            Some(random(&mut rng, (1, 3, 1, 1))),
            1,
            1,
            1,
        )
        .unwrap();
        let diff = conv2d_forward(&x, &p).unwrap().max_abs_diff(&direct_conv(&x, &p)).unwrap();
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn grouped_and_strided_match_direct_loops() {
        let mut rng = Rng::new(3);
        for (groups, stride, pad) in [(2, 2, 1), (4, 1, 0), (1, 2, 0)] {
            let x = random(&mut rng, (CHUNK + 3, 4, 7, 6));
            let p = ConvParams::new(random(&mut rng, (4, 4 / groups, 3, 3)), None, stride, pad, groups)
                .unwrap();
            let diff = conv2d_forward(&x, &p).unwrap().max_abs_diff(&direct_conv(&x, &p)).unwrap();
            assert!(diff <= 1e-12, "groups {groups}: {diff}");
        }
    }

    #[test]
    fn channel_mismatch_and_oversized_kernel() {
        let mut rng = Rng::new(4);
        let p = ConvParams::new(random(&mut rng, (2, 3, 3, 3)), None, 1, 0, 1).unwrap();
        assert!(matches!(
            conv2d_forward(&random(&mut rng, (1, 2, 4, 4)), &p),
            Err(crate::Error::Shape(_))
        ));
        assert!(conv2d_forward(&random(&mut rng, (1, 3, 2, 2)), &p).is_err());
    }

    #[test]
    fn zero_grad_out_gives_zero_grads_and_bias_is_channel_sum() {
        let mut rng = Rng::new(5);
        let x = random(&mut rng, (2, 2, 5, 5));
        let p = ConvParams::new(
            random(&mut rng, (3, 2, 3, 3)),
            Some(random(&mut rng, (1, 3, 1, 1))),
            1,
            1,
            1,
        )
        .unwrap();
        let zeros = Tensor::zeros((2, 3, 5, 5)).unwrap();
        let g = conv2d_backward(&x, &p, &zeros).unwrap();
        assert!(g.grad_x.data().iter().chain(g.grad_weight.data()).all(|&v| v == 0.0));
        let go = random(&mut rng, (2, 3, 5, 5));
        let g = conv2d_backward(&x, &p, &go).unwrap();
        assert_eq!(g.grad_bias.unwrap().data(), go.channel_sums().as_slice());
    }

    #[test]
    fn linear_in_input() {
        let mut rng = Rng::new(6);
        let p = ConvParams::new(random(&mut rng, (3, 2, 3, 3)), None, 1, 1, 1).unwrap();
        let (a, b) = (1.7, -0.4);
        let x = random(&mut rng, (2, 2, 6, 6));
        let y = random(&mut rng, (2, 2, 6, 6));
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d_forward(&mix, &p).unwrap();
        let rhs = conv2d_forward(&x, &p)
            .unwrap()
            .scale(a)
            .add(&conv2d_forward(&y, &p).unwrap().scale(b))
            .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-10);
    }
}
