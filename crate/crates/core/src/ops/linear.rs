use super::gemm;
use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Fully connected layer. `weight` is `(out, in, 1, 1)`; each input sample
/// is flattened to `c·h·w = in` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub grad_x: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
}

impl LinearParams {
    pub fn in_features(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape().n
    }

    fn check(&self, x: Shape) -> Result<()> {
        if x.sample_len() != self.in_features() || self.bias.len() != self.out_features() {
            return Err(shape_err!(
                "linear {}->{} cannot take input {x:?}",
                self.in_features(),
                self.out_features()
            ));
        }
        Ok(())
    }
}

pub fn linear_forward(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let s = x.shape();
    p.check(s)?;
    let (n, fin, fout) = (s.n, p.in_features(), p.out_features());
    let mut out: Vec<f64> = (0..n).flat_map(|_| p.bias.data().iter().copied()).collect();
    // out (n x fout) += x (n x fin) . W^T (fin x fout)
    gemm(n, fin, fout, x.data(), (fin, 1), p.weight.data(), (1, fin), 1.0, &mut out, (fout, 1));
    Ok(Tensor::like(Shape::new(n, fout, 1, 1), out))
}

pub fn linear_backward(x: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    let s = x.shape();
    p.check(s)?;
    let (n, fin, fout) = (s.n, p.in_features(), p.out_features());
    grad_out.expect_shape(Shape::new(n, fout, 1, 1))?;
    let go = grad_out.data();
    let mut gx = vec![0.0; n * fin];
    gemm(n, fout, fin, go, (fout, 1), p.weight.data(), (fin, 1), 0.0, &mut gx, (fin, 1));
    let mut gw = vec![0.0; fout * fin];
    gemm(fout, n, fin, go, (1, fout), x.data(), (fin, 1), 0.0, &mut gw, (fin, 1));
    let mut gb = vec![0.0; fout];
    for row in go.chunks(fout) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok(LinearGrads {
        grad_x: Tensor::like(s, gx),
        grad_weight: Tensor::like(p.weight.shape(), gw),
        grad_bias: Tensor::channel_vector(gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_product() {
        let p = LinearParams {
            weight: Tensor::from_vec((2, 3, 1, 1), vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap(),
            bias: Tensor::channel_vector(vec![0.5, -1.0]).unwrap(),
        };
        let x = Tensor::from_vec((1, 3, 1, 1), vec![1.0, 2.0, 4.0]).unwrap();
        assert_eq!(linear_forward(&x, &p).unwrap().data(), &[-2.5, 5.0]);
        let g = linear_backward(&x, &p, &Tensor::from_vec((1, 2, 1, 1), vec![1.0, 1.0]).unwrap()).unwrap();
        assert_eq!(g.grad_x.data(), &[3.0, 1.0, -0.5]);
        assert_eq!(g.grad_weight.data(), &[1.0, 2.0, 4.0, 1.0, 2.0, 4.0]);
        assert_eq!(g.grad_bias.data(), &[1.0, 1.0]);
    }

    #[test]
    fn flattens_spatial_input() {
        let p = LinearParams {
            weight: Tensor::full((1, 8, 1, 1), 1.0).unwrap(),
            bias: Tensor::channel_vector(vec![0.0]).unwrap(),
        };
        let x = Tensor::full((3, 2, 2, 2), 0.5).unwrap();
        assert_eq!(linear_forward(&x, &p).unwrap().data(), &[4.0, 4.0, 4.0]);
        assert!(linear_forward(&Tensor::zeros((1, 3, 1, 1)).unwrap(), &p).is_err());
    }
}
