use crate::error::{shape_err, Result};
use crate::leni::{leni_backward, leni_forward, LeniBlockParams, LeniCache, ParamCount};
use crate::ops::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward,
    conv2d_backward, conv2d_forward, crelu_backward, crelu_forward, global_avgpool_backward,
    global_avgpool_forward, linear_backward, linear_forward, maxpool2x2_backward,
    maxpool2x2_forward, ActivationCache, ActivationKind, BnCache, BnParams, ConvParams,
    LinearParams, Mode,
};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// How the optimizer and checkpoint treat a named tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Learned, weight decay applies.
    Weight,
    /// Learned, no weight decay (BN γ/β, PReLU α).
    NoDecay,
    /// Running statistic; not learned.
    Buffer,
}

impl Role {
    pub fn is_learned(self) -> bool {
        self != Role::Buffer
    }
}

/// Per-forward settings and the optional activation probe.
pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut Rng>,
    /// Activation slot whose input/output should be captured.
    pub probe: Option<usize>,
    pub captured: Option<(Tensor, Tensor)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(mode: Mode, rng: Option<&'a mut Rng>) -> Self {
        ForwardCtx {
            mode,
            rng,
            probe: None,
            captured: None,
        }
    }

    fn capture(&mut self, slot: usize, pre: &Tensor, post: &Tensor) {
        if self.probe == Some(slot) {
            self.captured = Some((pre.clone(), post.clone()));
        }
    }
}

fn missing(what: &str) -> crate::Error {
    shape_err!("{what}: backward called without a cached forward pass")
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub params: ConvParams,
    /// Set for the depthwise convs inserted by the extended-conv control.
    pub extended: bool,
    input: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct BnLayer {
    pub params: BnParams,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
pub struct ActLayer {
    pub slot: usize,
    pub kind: ActivationKind,
    /// PReLU slopes, `(1, c, 1, 1)`.
    pub alpha: Option<Tensor>,
    cache: Option<ActivationCache>,
    crelu_input: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LeniLayer {
    pub slot: usize,
    pub params: LeniBlockParams,
    cache: Option<LeniCache>,
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub params: LinearParams,
    input: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub body: Vec<Layer>,
    /// Empty means identity.
    pub shortcut: Vec<Layer>,
    /// Post-sum activation (and its extended conv, if any).
    pub post: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayer),
    BatchNorm(BnLayer),
    Activation(ActLayer),
    Leni(LeniLayer),
    MaxPool {
        input: Option<(Shape, Vec<usize>)>,
    },
    GlobalAvgPool {
        input: Option<Shape>,
    },
    Linear(LinearLayer),
    Residual(ResidualBlock),
}

impl Layer {
    pub fn conv(params: ConvParams) -> Self {
        Layer::Conv(ConvLayer {
            params,
            extended: false,
            input: None,
        })
    }

    pub fn extended_conv(params: ConvParams) -> Self {
        Layer::Conv(ConvLayer {
            params,
            extended: true,
            input: None,
        })
    }

    pub fn batchnorm(params: BnParams) -> Self {
        Layer::BatchNorm(BnLayer {
            params,
            cache: None,
        })
    }

    pub fn activation(slot: usize, kind: ActivationKind, channels: usize) -> Result<Self> {
        let alpha = match kind {
            ActivationKind::Prelu { init } => Some(Tensor::full((1, channels, 1, 1), init)?),
            _ => None,
        };
        Ok(Layer::Activation(ActLayer {
            slot,
            kind,
            alpha,
            cache: None,
            crelu_input: None,
        }))
    }

    pub fn leni(slot: usize, params: LeniBlockParams) -> Self {
        Layer::Leni(LeniLayer {
            slot,
            params,
            cache: None,
        })
    }

    pub fn linear(params: LinearParams) -> Self {
        Layer::Linear(LinearLayer {
            params,
            input: None,
        })
    }

    /// Drops everything cached for backward.
    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.input = None,
            Layer::BatchNorm(l) => l.cache = None,
            Layer::Activation(l) => {
                l.cache = None;
                l.crelu_input = None;
            }
            Layer::Leni(l) => l.cache = None,
            Layer::MaxPool { input } => *input = None,
            Layer::GlobalAvgPool { input } => *input = None,
            Layer::Linear(l) => l.input = None,
            Layer::Residual(r) => r
                .body
                .iter_mut()
                .chain(&mut r.shortcut)
                .chain(&mut r.post)
                .for_each(Layer::clear_cache),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(c) if c.extended => "extended_conv",
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Activation(_) => "activation",
            Layer::Leni(_) => "leni",
            Layer::MaxPool { .. } => "maxpool",
            Layer::GlobalAvgPool { .. } => "global_avgpool",
            Layer::Linear(_) => "linear",
            Layer::Residual(_) => "residual",
        }
    }

    pub fn forward(&mut self, x: Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => {
                let y = conv2d_forward(&x, &l.params)?;
                l.input = Some(x);
                Ok(y)
            }
            Layer::BatchNorm(l) => {
                l.params.mode = ctx.mode;
                let (y, cache) = batchnorm_forward(&x, &mut l.params)?;
                l.cache = Some(cache);
                Ok(y)
            }
            Layer::Activation(l) => {
                let y = if matches!(l.kind, ActivationKind::Crelu) {
                    let y = crelu_forward(&x)?;
                    ctx.capture(l.slot, &x, &y);
                    l.crelu_input = Some(x);
                    y
                } else {
                    let rng = ctx.rng.as_deref_mut();
                    let (y, cache) = activation_forward(&x, &l.kind, l.alpha.as_ref(), ctx.mode, rng)?;
                    ctx.capture(l.slot, &x, &y);
                    l.cache = Some(cache);
                    y
                };
                Ok(y)
            }
            Layer::Leni(l) => {
                l.params.set_mode(ctx.mode);
                let (y, cache) = leni_forward(&x, &mut l.params)?;
                ctx.capture(l.slot, &x, &y);
                l.cache = Some(cache);
                Ok(y)
            }
            Layer::MaxPool { input } => {
                let (y, argmax) = maxpool2x2_forward(&x)?;
                *input = Some((x.shape(), argmax));
                Ok(y)
            }
            Layer::GlobalAvgPool { input } => {
                *input = Some(x.shape());
                Ok(global_avgpool_forward(&x))
            }
            Layer::Linear(l) => {
                let y = linear_forward(&x, &l.params)?;
                l.input = Some(x);
                Ok(y)
            }
            Layer::Residual(b) => {
                let short = run_forward(&mut b.shortcut, x.clone(), ctx)?;
                let body = run_forward(&mut b.body, x, ctx)?;
                let sum = body.add(&short)?;
                run_forward(&mut b.post, sum, ctx)
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, g: Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(l) => {
                let x = l.input.as_ref().ok_or_else(|| missing("conv"))?;
                let grads = conv2d_backward(x, &l.params, &g)?;
                l.params.weight.accumulate_grad(grads.grad_weight.data())?;
                if let (Some(b), Some(gb)) = (l.params.bias.as_mut(), grads.grad_bias) {
                    b.accumulate_grad(gb.data())?;
                }
                Ok(grads.grad_x)
            }
            Layer::BatchNorm(l) => {
                let cache = l.cache.as_ref().ok_or_else(|| missing("batchnorm"))?;
                let grads = batchnorm_backward(cache, &l.params, &g)?;
                l.params.gamma.accumulate_grad(grads.grad_gamma.data())?;
                l.params.beta.accumulate_grad(grads.grad_beta.data())?;
                Ok(grads.grad_x)
            }
            Layer::Activation(l) => {
                if matches!(l.kind, ActivationKind::Crelu) {
                    let x = l.crelu_input.as_ref().ok_or_else(|| missing("crelu"))?;
                    return crelu_backward(x, &g);
                }
                let cache = l.cache.as_ref().ok_or_else(|| missing("activation"))?;
                let (gx, ga) = activation_backward(cache, &l.kind, l.alpha.as_ref(), &g)?;
                if let (Some(a), Some(ga)) = (l.alpha.as_mut(), ga) {
                    a.accumulate_grad(ga.data())?;
                }
                Ok(gx)
            }
            Layer::Leni(l) => {
                let cache = l.cache.as_ref().ok_or_else(|| missing("leni"))?;
                let (gx, grads) = leni_backward(cache, &g, &l.params)?;
                let p = &mut l.params;
                p.deconv_weight.accumulate_grad(grads.deconv_weight.data())?;
                p.bn_neg.gamma.accumulate_grad(grads.bn_neg_gamma.data())?;
                p.bn_neg.beta.accumulate_grad(grads.bn_neg_beta.data())?;
                p.bn_fuse.gamma.accumulate_grad(grads.bn_fuse_gamma.data())?;
                p.bn_fuse.beta.accumulate_grad(grads.bn_fuse_beta.data())?;
                p.compress_weight.accumulate_grad(grads.compress_weight.data())?;
                Ok(gx)
            }
            Layer::MaxPool { input } => {
                let (shape, argmax) = input.as_ref().ok_or_else(|| missing("maxpool"))?;
                maxpool2x2_backward(*shape, argmax, &g)
            }
            Layer::GlobalAvgPool { input } => {
                let shape = input.ok_or_else(|| missing("global_avgpool"))?;
                global_avgpool_backward(shape, &g)
            }
            Layer::Linear(l) => {
                let x = l.input.as_ref().ok_or_else(|| missing("linear"))?;
                let grads = linear_backward(x, &l.params, &g)?;
                l.params.weight.accumulate_grad(grads.grad_weight.data())?;
                l.params.bias.accumulate_grad(grads.grad_bias.data())?;
                Ok(grads.grad_x)
            }
            Layer::Residual(b) => {
                let g = run_backward(&mut b.post, g)?;
                let g_body = run_backward(&mut b.body, g.clone())?;
                let g_short = run_backward(&mut b.shortcut, g)?;
                g_body.add(&g_short)
            }
        }
    }

    /// Counts for this layer alone (zero for residual containers).
    pub fn param_count(&self) -> ParamCount {
        let bn = |p: &BnParams| ParamCount {
            learned: p.gamma.len() + p.beta.len(),
            buffers: p.running_mean.len() + p.running_var.len(),
        };
        match self {
            Layer::Conv(l) => ParamCount {
                learned: l.params.weight.len() + l.params.bias.as_ref().map_or(0, Tensor::len),
                buffers: 0,
            },
            Layer::BatchNorm(l) => bn(&l.params),
            Layer::Activation(l) => ParamCount {
                learned: l.alpha.as_ref().map_or(0, Tensor::len),
                buffers: 0,
            },
            Layer::Leni(l) => l.params.param_count(),
            Layer::Linear(l) => ParamCount {
                learned: l.params.weight.len() + l.params.bias.len(),
                buffers: 0,
            },
            Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } | Layer::Residual(_) => ParamCount::default(),
        }
    }

    /// Named tensors of this layer (not recursing into residual blocks).
    pub(crate) fn own_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor, Role)> {
        match self {
            Layer::Conv(l) => {
                let mut v = vec![("weight", &mut l.params.weight, Role::Weight)];
                if let Some(b) = l.params.bias.as_mut() {
                    v.push(("bias", b, Role::Weight));
                }
                v
            }
            Layer::BatchNorm(l) => bn_tensors(&mut l.params, ""),
            Layer::Activation(l) => match l.alpha.as_mut() {
                Some(a) => vec![("alpha", a, Role::NoDecay)],
                None => vec![],
            },
            Layer::Leni(l) => {
                let p = &mut l.params;
                let mut v = vec![("deconv_weight", &mut p.deconv_weight, Role::Weight)];
                v.extend(bn_tensors(&mut p.bn_neg, "bn_neg."));
                v.extend(bn_tensors(&mut p.bn_fuse, "bn_fuse."));
                v.push(("compress_weight", &mut p.compress_weight, Role::Weight));
                v
            }
            Layer::Linear(l) => vec![
                ("weight", &mut l.params.weight, Role::Weight),
                ("bias", &mut l.params.bias, Role::Weight),
            ],
            Layer::MaxPool { .. } | Layer::GlobalAvgPool { .. } | Layer::Residual(_) => vec![],
        }
    }
}

fn bn_tensors<'a>(p: &'a mut BnParams, prefix: &'static str) -> Vec<(&'static str, &'a mut Tensor, Role)> {
    let names: [&'static str; 4] = match prefix {
        "bn_neg." => ["bn_neg.gamma", "bn_neg.beta", "bn_neg.running_mean", "bn_neg.running_var"],
        "bn_fuse." => ["bn_fuse.gamma", "bn_fuse.beta", "bn_fuse.running_mean", "bn_fuse.running_var"],
        _ => ["gamma", "beta", "running_mean", "running_var"],
    };
    vec![
        (names[0], &mut p.gamma, Role::NoDecay),
        (names[1], &mut p.beta, Role::NoDecay),
        (names[2], &mut p.running_mean, Role::Buffer),
        (names[3], &mut p.running_var, Role::Buffer),
    ]
}

pub(crate) fn run_forward(layers: &mut [Layer], mut x: Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
    for l in layers.iter_mut() {
        x = l.forward(x, ctx)?;
    }
    Ok(x)
}

pub(crate) fn run_backward(layers: &mut [Layer], mut g: Tensor) -> Result<Tensor> {
    for l in layers.iter_mut().rev() {
        g = l.backward(g)?;
    }
    Ok(g)
}
