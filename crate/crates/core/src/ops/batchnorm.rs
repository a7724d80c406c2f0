//! Per-channel batch normalization over `(n, h, w)`.
//!
//! Train mode normalizes with the biased batch variance and folds the
//! unbiased estimate into the running statistics:
//! `running <- (1 - momentum) * running + momentum * batch`.

use super::Mode;
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BnGrads {
    pub grad_x: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
}

impl BnParams {
    /// gamma = 1, beta = 0, running mean 0 / var 1, train mode.
    pub fn new(c: usize) -> Result<Self> {
        Ok(BnParams {
            gamma: Tensor::full((1, c, 1, 1), 1.0)?,
            beta: Tensor::zeros((1, c, 1, 1))?,
            running_mean: Tensor::zeros((1, c, 1, 1))?,
            running_var: Tensor::full((1, c, 1, 1), 1.0)?,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        if [&self.beta, &self.running_mean, &self.running_var]
            .iter()
            .any(|t| t.len() != c)
        {
            return Err(shape_err!("batchnorm parameter lengths disagree (c = {c})"));
        }
        if !(self.eps > 0.0) {
            return Err(param_err!("batchnorm eps must be positive"));
        }
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(param_err!("batchnorm momentum must be in (0, 1]"));
        }
        if self.running_var.data().iter().any(|&v| v < 0.0) {
            return Err(param_err!("negative running variance"));
        }
        Ok(())
    }
}

pub fn batchnorm_forward(x: &Tensor, p: &mut BnParams) -> Result<(Tensor, BnCache)> {
    p.validate()?;
    let s = x.shape();
    if s.c != p.channels() {
        return Err(shape_err!("batchnorm over {} channels got {s:?}", p.channels()));
    }
    let count = s.n * s.plane();
    let (mean, var) = match p.mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::Stats(format!(
                    "train-mode batchnorm needs >= 2 values per channel, got {count}"
                )));
            }
            let mean: Vec<f64> = x.channel_sums().iter().map(|v| v / count as f64).collect();
            let mut var = vec![0.0; s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    var[c] += x.plane(n, c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            let m = p.momentum;
            let unbias = count as f64 / (count - 1) as f64;
            for c in 0..s.c {
                let rm = &mut p.running_mean.data_mut()[c];
                *rm = (1.0 - m) * *rm + m * mean[c];
                let rv = &mut p.running_var.data_mut()[c];
                *rv = (1.0 - m) * *rv + m * var[c] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (p.running_mean.data().to_vec(), p.running_var.data().to_vec()),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.eps).sqrt()).collect();
    let (gamma, beta) = (p.gamma.data(), p.beta.data());
    let plane = s.plane();
    let mut x_hat = Vec::with_capacity(s.numel());
    let mut out = Vec::with_capacity(s.numel());
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let c = i % s.c;
        for &v in chunk {
            let xh = (v - mean[c]) * inv_std[c];
            x_hat.push(xh);
            out.push(gamma[c] * xh + beta[c]);
        }
    }
    Ok((
        Tensor::like(s, out),
        BnCache {
            x_hat,
            inv_std,
            mode: p.mode,
        },
    ))
}

pub fn batchnorm_backward(cache: &BnCache, p: &BnParams, grad_out: &Tensor) -> Result<BnGrads> {
    let s = grad_out.shape();
    if s.c != p.channels() || cache.x_hat.len() != s.numel() {
        return Err(shape_err!("batchnorm backward: grad shape {s:?} does not match cache"));
    }
    let plane = s.plane();
    let count = (s.n * plane) as f64;
    let gamma = p.gamma.data();
    let go = grad_out.data();
    let mut g_gamma = vec![0.0; s.c];
    let mut g_beta = vec![0.0; s.c];
    for (i, (chunk, xh)) in go.chunks(plane).zip(cache.x_hat.chunks(plane)).enumerate() {
        let c = i % s.c;
        for (&g, &h) in chunk.iter().zip(xh) {
            g_beta[c] += g;
            g_gamma[c] += g * h;
        }
    }
    let mut gx = Vec::with_capacity(s.numel());
    for (i, (chunk, xh)) in go.chunks(plane).zip(cache.x_hat.chunks(plane)).enumerate() {
        let c = i % s.c;
        let k = gamma[c] * cache.inv_std[c];
        match cache.mode {
            Mode::Eval => gx.extend(chunk.iter().map(|g| g * k)),
            Mode::Train => {
                let (mb, mg) = (g_beta[c] / count, g_gamma[c] / count);
                gx.extend(chunk.iter().zip(xh).map(|(g, h)| k * (g - mb - h * mg)));
            }
        }
    }
    Ok(BnGrads {
        grad_x: Tensor::like(s, gx),
        grad_gamma: Tensor::channel_vector(g_gamma)?,
        grad_beta: Tensor::channel_vector(g_beta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv::tests::random;
    use crate::rng::Rng;

    #[test]
    fn constant_input_maps_to_beta() {
        let mut p = BnParams::new(2).unwrap();
        p.beta = Tensor::channel_vector(vec![0.3, -1.2]).unwrap();
        p.gamma = Tensor::channel_vector(vec![2.0, 5.0]).unwrap();
        let mut x = Tensor::zeros((3, 2, 2, 2)).unwrap();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = if (i / 4) % 2 == 0 { 4.0 } else { -7.5 };
        }
        let (y, _) = batchnorm_forward(&x, &mut p).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let expect = if (i / 4) % 2 == 0 { 0.3 } else { -1.2 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn eval_identity_configuration() {
        let mut p = BnParams::new(3).unwrap();
        p.mode = Mode::Eval;
        let x = random(&mut Rng::new(0), (2, 3, 4, 4));
        let (y, _) = batchnorm_forward(&x, &mut p).unwrap();
        let k = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * k).abs() <= 1e-15);
        }
    }

    #[test]
    fn running_stats_update() {
        let mut p = BnParams::new(1).unwrap();
        let x = Tensor::from_vec((1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        batchnorm_forward(&x, &mut p).unwrap();
        // batch mean 2.5, unbiased var 5/3
        assert!((p.running_mean.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn single_value_per_channel_is_stats_error() {
        let mut p = BnParams::new(2).unwrap();
        let x = Tensor::zeros((1, 2, 1, 1)).unwrap();
        assert!(matches!(batchnorm_forward(&x, &mut p), Err(Error::Stats(_))));
        p.mode = Mode::Eval;
        assert!(batchnorm_forward(&x, &mut p).is_ok());
    }

    #[test]
    fn eval_inverse_parameters_recover_input() {
        let mut rng = Rng::new(5);
        let c = 4;
        let mut p = BnParams::new(c).unwrap();
        p.mode = Mode::Eval;
        p.gamma = Tensor::channel_vector((0..c).map(|_| rng.uniform(0.5, 2.0)).collect()).unwrap();
        p.beta = Tensor::channel_vector((0..c).map(|_| rng.normal()).collect()).unwrap();
        p.running_mean = Tensor::channel_vector((0..c).map(|_| rng.normal()).collect()).unwrap();
        p.running_var = Tensor::channel_vector((0..c).map(|_| rng.uniform(0.2, 3.0)).collect()).unwrap();
        // y = a x + b per channel; the inverse map is x = (y - b) / a.
        let a: Vec<f64> = (0..c)
            .map(|i| p.gamma.data()[i] / (p.running_var.data()[i] + p.eps).sqrt())
            .collect();
        let b: Vec<f64> = (0..c).map(|i| p.beta.data()[i] - a[i] * p.running_mean.data()[i]).collect();
        let mut inv = BnParams::new(c).unwrap();
        inv.mode = Mode::Eval;
        inv.running_var = Tensor::full((1, c, 1, 1), 1.0 - inv.eps).unwrap();
        inv.gamma = Tensor::channel_vector(a.iter().map(|v| 1.0 / v).collect()).unwrap();
        inv.beta = Tensor::channel_vector((0..c).map(|i| -b[i] / a[i]).collect()).unwrap();
        let x = random(&mut rng, (2, c, 3, 3));
        let (y, _) = batchnorm_forward(&x, &mut p).unwrap();
        let (back, _) = batchnorm_forward(&y, &mut inv).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-9);
    }
}
