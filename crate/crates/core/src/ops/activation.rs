//! Elementwise activations and CReLU.

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{param_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAKY_ALPHA: f64 = 0.01;
pub const RRELU_LOWER: f64 = 1.0 / 8.0;
pub const RRELU_UPPER: f64 = 1.0 / 3.0;
pub const PRELU_INIT: f64 = 0.25;

fn default_leaky() -> f64 {
    LEAKY_ALPHA
}
fn default_one() -> f64 {
    1.0
}
fn default_prelu() -> f64 {
    PRELU_INIT
}
fn default_lower() -> f64 {
    RRELU_LOWER
}
fn default_upper() -> f64 {
    RRELU_UPPER
}

/// The activation family. Serialized as `{"kind": "...", ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", from = "StrictKind")]
pub enum ActivationKind {
    Relu,
    LeakyRelu {
        #[serde(default = "default_leaky")]
        alpha: f64,
    },
    /// Per-channel learnable slope, initialised to `init`.
    Prelu {
        #[serde(default = "default_prelu")]
        init: f64,
    },
    Rrelu {
        #[serde(default = "default_lower")]
        lower: f64,
        #[serde(default = "default_upper")]
        upper: f64,
    },
    Elu {
        #[serde(default = "default_one")]
        alpha: f64,
    },
    Celu {
        #[serde(default = "default_one")]
        alpha: f64,
    },
    Gelu,
    Crelu,
}

// Internally tagged unit variants ignore extra keys, so deserialization goes
// through this mirror where every variant is a struct.
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum StrictKind {
    Relu {},
    LeakyRelu {
        #[serde(default = "default_leaky")]
        alpha: f64,
    },
    Prelu {
        #[serde(default = "default_prelu")]
        init: f64,
    },
    Rrelu {
        #[serde(default = "default_lower")]
        lower: f64,
        #[serde(default = "default_upper")]
        upper: f64,
    },
    Elu {
        #[serde(default = "default_one")]
        alpha: f64,
    },
    Celu {
        #[serde(default = "default_one")]
        alpha: f64,
    },
    Gelu {},
    Crelu {},
}

impl From<StrictKind> for ActivationKind {
    fn from(k: StrictKind) -> Self {
        match k {
            StrictKind::Relu {} => ActivationKind::Relu,
            StrictKind::LeakyRelu { alpha } => ActivationKind::LeakyRelu { alpha },
            StrictKind::Prelu { init } => ActivationKind::Prelu { init },
            StrictKind::Rrelu { lower, upper } => ActivationKind::Rrelu { lower, upper },
            StrictKind::Elu { alpha } => ActivationKind::Elu { alpha },
            StrictKind::Celu { alpha } => ActivationKind::Celu { alpha },
            StrictKind::Gelu {} => ActivationKind::Gelu,
            StrictKind::Crelu {} => ActivationKind::Crelu,
        }
    }
}

impl ActivationKind {
    pub const fn leaky_relu() -> Self {
        ActivationKind::LeakyRelu { alpha: LEAKY_ALPHA }
    }
    pub const fn prelu() -> Self {
        ActivationKind::Prelu { init: PRELU_INIT }
    }
    pub const fn rrelu() -> Self {
        ActivationKind::Rrelu {
            lower: RRELU_LOWER,
            upper: RRELU_UPPER,
        }
    }
    pub const fn elu() -> Self {
        ActivationKind::Elu { alpha: 1.0 }
    }
    pub const fn celu() -> Self {
        ActivationKind::Celu { alpha: 1.0 }
    }

    /// All eight kinds with default constants.
    pub fn all() -> [ActivationKind; 8] {
        [
            ActivationKind::Relu,
            Self::leaky_relu(),
            Self::prelu(),
            Self::rrelu(),
            Self::elu(),
            Self::celu(),
            ActivationKind::Gelu,
            ActivationKind::Crelu,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu { .. } => "leaky_relu",
            ActivationKind::Prelu { .. } => "prelu",
            ActivationKind::Rrelu { .. } => "rrelu",
            ActivationKind::Elu { .. } => "elu",
            ActivationKind::Celu { .. } => "celu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Crelu => "crelu",
        }
    }

    /// Channel multiplier of the output (2 for CReLU).
    pub fn width_factor(&self) -> usize {
        if matches!(self, ActivationKind::Crelu) {
            2
        } else {
            1
        }
    }

    /// Input values where the function is not differentiable.
    pub fn kinks(&self) -> &'static [f64] {
        match self {
            ActivationKind::Gelu => &[],
            _ => &[0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ActivationKind::Rrelu { lower, upper } if !(lower <= upper) => {
                Err(param_err!("rrelu needs lower <= upper, got ({lower}, {upper})"))
            }
            ActivationKind::Elu { alpha } | ActivationKind::Celu { alpha } if !(alpha > 0.0) => {
                Err(param_err!("elu/celu alpha must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// State saved by the forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    input: Tensor,
    /// RReLU negative-side slopes actually used, one per element.
    slopes: Option<Vec<f64>>,
}

impl ActivationCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn check_prelu<'a>(x: &Tensor, alpha: Option<&'a Tensor>) -> Result<&'a [f64]> {
    let a = alpha.ok_or_else(|| param_err!("prelu requires per-channel alpha"))?;
    if a.len() != x.shape().c {
        return Err(shape_err!(
            "prelu alpha has {} entries for {:?}",
            a.len(),
            x.shape()
        ));
    }
    Ok(a.data())
}

/// Elementwise forward. `prelu_alpha` is required for PReLU and `rng` for
/// RReLU in train mode. CReLU is structural; use [`crelu_forward`].
pub fn activation_forward(
    x: &Tensor,
    kind: &ActivationKind,
    prelu_alpha: Option<&Tensor>,
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(Tensor, ActivationCache)> {
    kind.validate()?;
    let mut slopes = None;
    let out = match *kind {
        ActivationKind::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        ActivationKind::LeakyRelu { alpha } => x.map(|v| if v > 0.0 { v } else { alpha * v }),
        ActivationKind::Prelu { .. } => {
            let a = check_prelu(x, prelu_alpha)?;
            let (c, plane) = (x.shape().c, x.shape().plane());
            let data = x
                .data()
                .chunks(plane)
                .enumerate()
                .flat_map(|(i, ch)| {
                    let s = a[i % c];
                    ch.iter().map(move |&v| if v > 0.0 { v } else { s * v })
                })
                .collect();
            Tensor::like(x.shape(), data)
        }
        ActivationKind::Rrelu { lower, upper } => {
            let s: Vec<f64> = match mode {
                Mode::Train => {
                    let rng = rng.ok_or_else(|| param_err!("rrelu in train mode requires an rng"))?;
                    (0..x.len()).map(|_| rng.uniform(lower, upper)).collect()
                }
                Mode::Eval => vec![0.5 * (lower + upper); x.len()],
            };
            let data = x
                .data()
                .iter()
                .zip(&s)
                .map(|(&v, &k)| if v > 0.0 { v } else { k * v })
                .collect();
            slopes = Some(s);
            Tensor::like(x.shape(), data)
        }
        ActivationKind::Elu { alpha } => x.map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() }),
        ActivationKind::Celu { alpha } => {
            x.map(|v| if v > 0.0 { v } else { alpha * (v / alpha).exp_m1() })
        }
        ActivationKind::Gelu => x.map(|v| v * std_normal_cdf(v)),
        ActivationKind::Crelu => {
            return Err(param_err!("crelu is structural; use crelu_forward"));
        }
    };
    Ok((
        out,
        ActivationCache {
            input: x.clone(),
            slopes,
        },
    ))
}

/// Returns `(grad_x, grad_alpha)`; `grad_alpha` is set for PReLU only.
pub fn activation_backward(
    cache: &ActivationCache,
    kind: &ActivationKind,
    prelu_alpha: Option<&Tensor>,
    grad_out: &Tensor,
) -> Result<(Tensor, Option<Tensor>)> {
    let x = &cache.input;
    grad_out.expect_shape(x.shape())?;
    let elementwise = |d: &dyn Fn(f64) -> f64| {
        Tensor::like(
            x.shape(),
            x.data()
                .iter()
                .zip(grad_out.data())
                .map(|(&v, &g)| g * d(v))
                .collect(),
        )
    };
    let grad_x = match *kind {
        ActivationKind::Relu => elementwise(&|v| if v > 0.0 { 1.0 } else { 0.0 }),
        ActivationKind::LeakyRelu { alpha } => elementwise(&|v| if v > 0.0 { 1.0 } else { alpha }),
        ActivationKind::Prelu { .. } => {
            let a = check_prelu(x, prelu_alpha)?;
            let s = x.shape();
            let (c, plane) = (s.c, s.plane());
            let mut gx = Vec::with_capacity(x.len());
            let mut ga = vec![0.0; c];
            for (i, (xs, gs)) in x.data().chunks(plane).zip(grad_out.data().chunks(plane)).enumerate() {
                let ch = i % c;
                for (&v, &g) in xs.iter().zip(gs) {
                    if v > 0.0 {
                        gx.push(g);
                    } else {
                        gx.push(a[ch] * g);
                        ga[ch] += v * g;
                    }
                }
            }
            return Ok((Tensor::like(s, gx), Some(Tensor::channel_vector(ga)?)));
        }
        ActivationKind::Rrelu { .. } => {
            let slopes = cache
                .slopes
                .as_ref()
                .ok_or_else(|| param_err!("rrelu cache is missing its slopes"))?;
            Tensor::like(
                x.shape(),
                x.data()
                    .iter()
                    .zip(slopes)
                    .zip(grad_out.data())
                    .map(|((&v, &k), &g)| if v > 0.0 { g } else { k * g })
                    .collect(),
            )
        }
        ActivationKind::Elu { alpha } => elementwise(&|v| if v > 0.0 { 1.0 } else { alpha * v.exp() }),
        ActivationKind::Celu { alpha } => elementwise(&|v| if v > 0.0 { 1.0 } else { (v / alpha).exp() }),
        ActivationKind::Gelu => elementwise(&|v| std_normal_cdf(v) + v * std_normal_pdf(v)),
        ActivationKind::Crelu => return Err(param_err!("crelu is structural; use crelu_backward")),
    };
    Ok((grad_x, None))
}

/// `concat_channels(relu(x), relu(-x))`.
pub fn crelu_forward(x: &Tensor) -> Result<Tensor> {
    let pos = x.map(|v| if v > 0.0 { v } else { 0.0 });
    let neg = x.map(|v| if v < 0.0 { -v } else { 0.0 });
    Tensor::concat_channels(&pos, &neg)
}

pub fn crelu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let go = grad_out.shape();
    if go.n != s.n || go.c != 2 * s.c || go.h != s.h || go.w != s.w {
        return Err(shape_err!("crelu backward: grad {go:?} for input {s:?}"));
    }
    let g_pos = grad_out.slice_channels(0..s.c)?;
    let g_neg = grad_out.slice_channels(s.c..2 * s.c)?;
    Ok(Tensor::like(
        s,
        x.data()
            .iter()
            .zip(g_pos.data().iter().zip(g_neg.data()))
            .map(|(&v, (&gp, &gn))| {
                if v > 0.0 {
                    gp
                } else if v < 0.0 {
                    -gn
                } else {
                    0.0
                }
            })
            .collect(),
    ))
}
