//! Dense NCHW `f64` tensors.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::rng::Rng;

/// Batch, channels, rows, cols.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    /// Element count; errors on a zero dimension or overflow.
    pub fn checked_numel(&self) -> Result<usize> {
        let dims = [self.n, self.c, self.h, self.w];
        if dims.contains(&0) {
            return Err(shape_err!("zero dimension in {self:?}"));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| shape_err!("element count of {self:?} overflows"))
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per sample (`c·h·w`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape { n, c, h, w }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

impl Tensor {
    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Shape>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_numel()?;
        Ok(Tensor {
            shape,
            data: vec![value; len],
            grad: None,
        })
    }

    pub fn from_vec(shape: impl Into<Shape>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_numel()?;
        if data.len() != len {
            return Err(shape_err!(
                "data length {} does not match shape {shape:?}",
                data.len()
            ));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Per-channel vector stored as `(1, c, 1, 1)`.
    pub fn channel_vector(values: Vec<f64>) -> Result<Self> {
        Self::from_vec((1, values.len(), 1, 1), values)
    }

    /// Draws i.i.d. `N(0, 2 / fan_in)` entries.
    pub fn kaiming_init(rng: &mut Rng, shape: impl Into<Shape>, fan_in: usize) -> Result<Self> {
        if fan_in == 0 {
            return Err(param_err!("kaiming fan_in must be positive"));
        }
        let shape = shape.into();
        let len = shape.checked_numel()?;
        let std = (2.0 / fan_in as f64).sqrt();
        let data = (0..len).map(|_| rng.normal() * std).collect();
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Same-shape tensor built from raw data that is known to fit.
    pub(crate) fn like(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let len = self.data.len();
        let grad = self.grad.get_or_insert_with(|| vec![0.0; len]);
        (&mut self.data, grad)
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(shape_err!(
                "gradient length {} does not match tensor {:?}",
                delta.len(),
                self.shape
            ));
        }
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        if shape.checked_numel()? != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        let s = self.shape;
        self.data[((n * s.c + c) * s.h + h) * s.w + w]
    }

    /// Contiguous `(h, w)` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let l = self.shape.sample_len();
        &self.data[n * l..(n + 1) * l]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::like(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_shape(other.shape)?;
        Ok(Tensor::like(
            self.shape,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn negate(&self) -> Tensor {
        self.map(|v| -v)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(shape_err!("expected {shape:?}, got {:?}", self.shape));
        }
        Ok(())
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
            return Err(shape_err!("cannot concat {sa:?} with {sb:?} along channels"));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..sa.n {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Tensor::like(shape, data))
    }

    /// Channels `range` of every sample.
    pub fn slice_channels(&self, range: Range<usize>) -> Result<Tensor> {
        let s = self.shape;
        if range.start >= range.end || range.end > s.c {
            return Err(shape_err!("channel range {range:?} invalid for {s:?}"));
        }
        let shape = Shape::new(s.n, range.end - range.start, s.h, s.w);
        let p = s.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s.n {
            let base = n * s.c * p;
            data.extend_from_slice(&self.data[base + range.start * p..base + range.end * p]);
        }
        Ok(Tensor::like(shape, data))
    }

    /// Selects samples by index, in the given order.
    pub fn gather_samples(&self, indices: &[usize]) -> Result<Tensor> {
        let s = self.shape;
        if indices.is_empty() {
            return Err(shape_err!("cannot gather zero samples"));
        }
        let mut data = Vec::with_capacity(indices.len() * s.sample_len());
        for &i in indices {
            if i >= s.n {
                return Err(shape_err!("sample {i} out of range for {s:?}"));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Tensor::like(Shape::new(indices.len(), s.c, s.h, s.w), data))
    }

    /// Per-channel sum over `(n, h, w)`.
    pub fn channel_sums(&self) -> Vec<f64> {
        let s = self.shape;
        let mut out = vec![0.0; s.c];
        for n in 0..s.n {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.plane(n, c).iter().sum::<f64>();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn constructors() {
        assert_eq!(Tensor::zeros((1, 1, 2, 2)).unwrap().data(), &[0.0; 4]);
        assert_eq!(Tensor::full((1, 2, 1, 1), 3.5).unwrap().data(), &[3.5, 3.5]);
        assert!(matches!(
            Tensor::zeros((1, 0, 1, 1)),
            Err(crate::Error::Shape(_))
        ));
        assert!(Tensor::zeros((usize::MAX, 2, 2, 2)).is_err());
        assert!(Tensor::zeros((1, 1, 1, 1)).unwrap().grad().is_none());
    }

    #[test]
    fn negate_basic() {
        let t = Tensor::from_vec((1, 1, 1, 3), vec![1.0, -2.0, 0.0]).unwrap();
        assert_eq!(t.negate().data(), &[-1.0, 2.0, -0.0]);
        let z = Tensor::zeros((2, 2, 2, 2)).unwrap();
        assert!(z.negate().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_statistics() {
        let mut rng = Rng::new(42);
        let t = Tensor::kaiming_init(&mut rng, (1000, 1000, 1, 1), 8).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var.sqrt() - 0.5).abs() < 0.005, "std {}", var.sqrt());
        let again = Tensor::kaiming_init(&mut Rng::new(42), (1000, 1000, 1, 1), 8).unwrap();
        assert!(t.data().iter().zip(again.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(
            Tensor::kaiming_init(&mut rng, (1, 1, 1, 1), 0),
            Err(crate::Error::Param(_))
        ));
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor::zeros((2, 3, 8, 8)).unwrap();
        let b = Tensor::zeros((2, 3, 8, 8)).unwrap();
        assert_eq!(Tensor::concat_channels(&a, &b).unwrap().shape(), Shape::new(2, 6, 8, 8));
        let c = Tensor::zeros((2, 3, 4, 4)).unwrap();
        assert!(matches!(Tensor::concat_channels(&a, &c), Err(crate::Error::Shape(_))));
    }

    fn arb_tensor(max_c: usize) -> impl Strategy<Value = Tensor> {
        (1..3usize, 1..=max_c, 1..5usize, 1..5usize).prop_flat_map(|(n, c, h, w)| {
            proptest::collection::vec(-10.0..10.0f64, n * c * h * w)
                .prop_map(move |d| Tensor::from_vec((n, c, h, w), d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn negate_is_involution(t in arb_tensor(4)) {
            let back = t.negate().negate();
            prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }

        #[test]
        fn concat_then_slice_recovers(a in arb_tensor(3), extra_c in 1..4usize, seed in 0u64..1000) {
            let s = a.shape();
            let mut rng = Rng::new(seed);
            let b = Tensor::from_vec(
                (s.n, extra_c, s.h, s.w),
                (0..s.n * extra_c * s.plane()).map(|_| rng.normal()).collect(),
            ).unwrap();
            let cat = Tensor::concat_channels(&a, &b).unwrap();
            prop_assert_eq!(cat.slice_channels(0..s.c).unwrap(), a);
            prop_assert_eq!(cat.slice_channels(s.c..s.c + extra_c).unwrap(), b);
        }
    }
}
