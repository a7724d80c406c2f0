use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// 2x2 max pooling, stride 2, floor on odd sizes. Returns the output and
/// the flat input index chosen for each output element.
pub fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(shape_err!("maxpool2x2 needs at least 2x2 input, got {s:?}"));
    }
    let o = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(o.numel());
    let mut argmax = Vec::with_capacity(o.numel());
    let d = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::like(o, out), argmax))
}

pub fn maxpool2x2_backward(input: Shape, argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(shape_err!("maxpool backward: grad {:?} does not match cache", grad_out.shape()));
    }
    let mut gx = vec![0.0; input.numel()];
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        gx[i] += g;
    }
    Ok(Tensor::like(input, gx))
}

/// Mean over each `(h, w)` plane; output `(n, c, 1, 1)`.
pub fn global_avgpool_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let p = s.plane() as f64;
    let data = x.data().chunks(s.plane()).map(|ch| ch.iter().sum::<f64>() / p).collect();
    Tensor::like(Shape::new(s.n, s.c, 1, 1), data)
}

pub fn global_avgpool_backward(input: Shape, grad_out: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(Shape::new(input.n, input.c, 1, 1))?;
    let p = input.plane();
    let mut gx = Vec::with_capacity(input.numel());
    for &g in grad_out.data() {
        gx.extend(std::iter::repeat_n(g / p as f64, p));
    }
    Ok(Tensor::like(input, gx))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_maxima() {
        let x = Tensor::from_vec((1, 1, 2, 4), vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, -1.0, 7.0]).unwrap();
        let (y, arg) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0]);
        let g = maxpool2x2_backward(x.shape(), &arg, &Tensor::from_vec((1, 1, 1, 2), vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_odd_floors_and_tiny_errors() {
        let x = Tensor::zeros((1, 1, 7, 7)).unwrap();
        assert_eq!(maxpool2x2_forward(&x).unwrap().0.shape(), Shape::new(1, 1, 3, 3));
        assert!(maxpool2x2_forward(&Tensor::zeros((1, 1, 1, 4)).unwrap()).is_err());
    }

    #[test]
    fn avgpool_roundtrip() {
        let x = Tensor::from_vec((1, 2, 1, 2), vec![1.0, 3.0, -2.0, 2.0]).unwrap();
        let y = global_avgpool_forward(&x);
        assert_eq!(y.data(), &[2.0, 0.0]);
        let g = global_avgpool_backward(x.shape(), &Tensor::from_vec((1, 2, 1, 1), vec![1.0, 4.0]).unwrap())
            .unwrap();
        assert_eq!(g.data(), &[0.5, 0.5, 2.0, 2.0]);
    }
}
