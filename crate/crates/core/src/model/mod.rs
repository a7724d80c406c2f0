//! Small VGG- and ResNet-style classifiers with a per-slot activation policy.
//!
//! Activation slots are numbered in forward order. For `resnet_small` that is
//! the stem first, then for each basic block the intra-block activation
//! followed by the post-sum activation.

mod config;
mod layer;

use serde::Serialize;

pub use config::{Family, ModelConfig};
pub use layer::{ActLayer, ConvLayer, ForwardCtx, Layer, LeniLayer, ResidualBlock, Role};

use crate::error::{shape_err, Result};
use crate::leni::{LeniBlockParams, ParamCount};
use crate::ops::{BnParams, ConvParams, LinearParams, Mode};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};
use layer::{run_backward, run_forward};

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    layers: Vec<Layer>,
}

/// One row of [`Model::count_params`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerParams {
    pub name: String,
    pub kind: &'static str,
    pub count: ParamCount,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub layers: Vec<LayerParams>,
    pub total: ParamCount,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    rng: &'a Rng,
    convs: u64,
    slot: usize,
}

impl Builder<'_> {
    fn conv(&mut self, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Layer> {
        let mut rng = self.rng.fork("conv", self.convs);
        self.convs += 1;
        let w = Tensor::kaiming_init(&mut rng, (c_out, c_in, k, k), c_in * k * k)?;
        Ok(Layer::conv(ConvParams::new(w, None, stride, k / 2, 1)?))
    }

    /// Activation (or LENI) for the next slot, plus the extended conv when
    /// enabled. Returns the output channel count.
    fn activation(&mut self, c: usize, out: &mut Vec<Layer>) -> Result<usize> {
        let slot = self.slot;
        self.slot += 1;
        let mut c_out = c;
        if self.cfg.leni_layers.contains(&slot) {
            let mut rng = self.rng.fork("leni", slot as u64);
            out.push(Layer::leni(slot, LeniBlockParams::init(c, &mut rng)?));
        } else {
            out.push(Layer::activation(slot, self.cfg.base_activation, c)?);
            c_out = c * self.cfg.base_activation.width_factor();
        }
        if self.cfg.extended_conv {
            let mut rng = self.rng.fork("ext", slot as u64);
            let w = Tensor::kaiming_init(&mut rng, (c_out, 1, 3, 3), 9)?;
            out.push(Layer::extended_conv(ConvParams::new(w, None, 1, 1, c_out)?));
        }
        Ok(c_out)
    }

    fn conv_bn_act(&mut self, c_in: usize, w: usize, stride: usize, out: &mut Vec<Layer>) -> Result<usize> {
        out.push(self.conv(c_in, w, 3, stride)?);
        out.push(Layer::batchnorm(BnParams::new(w)?));
        self.activation(w, out)
    }

    fn vgg(&mut self) -> Result<(Vec<Layer>, usize)> {
        let mut layers = Vec::new();
        let mut c = self.cfg.in_channels;
        for (&width, &blocks) in self.cfg.stage_widths.iter().zip(&self.cfg.blocks_per_stage) {
            let w = self.cfg.scaled(width);
            for _ in 0..blocks {
                c = self.conv_bn_act(c, w, 1, &mut layers)?;
            }
            layers.push(Layer::MaxPool { input: None });
        }
        Ok((layers, c))
    }

    fn resnet(&mut self) -> Result<(Vec<Layer>, usize)> {
        let mut layers = Vec::new();
        let stem = self.cfg.scaled(self.cfg.stage_widths[0]);
        let mut c = self.conv_bn_act(self.cfg.in_channels, stem, 1, &mut layers)?;
        for (s, (&width, &blocks)) in self.cfg.stage_widths.iter().zip(&self.cfg.blocks_per_stage).enumerate() {
            let w = self.cfg.scaled(width);
            for b in 0..blocks {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let mut body = Vec::new();
                let mid = self.conv_bn_act(c, w, stride, &mut body)?;
                body.push(self.conv(mid, w, 3, 1)?);
                body.push(Layer::batchnorm(BnParams::new(w)?));
                let mut shortcut = Vec::new();
                if stride != 1 || c != w {
                    shortcut.push(self.conv(c, w, 1, stride)?);
                    shortcut.push(Layer::batchnorm(BnParams::new(w)?));
                }
                let mut post = Vec::new();
                c = self.activation(w, &mut post)?;
                layers.push(Layer::Residual(ResidualBlock { body, shortcut, post }));
            }
        }
        Ok((layers, c))
    }
}

fn collect_mut<'a>(layers: &'a mut [Layer], prefix: &str, out: &mut Vec<(String, &'a mut Tensor, Role)>) {
    for (i, l) in layers.iter_mut().enumerate() {
        match l {
            Layer::Residual(b) => {
                collect_mut(&mut b.body, &format!("{prefix}{i}.body."), out);
                collect_mut(&mut b.shortcut, &format!("{prefix}{i}.shortcut."), out);
                collect_mut(&mut b.post, &format!("{prefix}{i}.post."), out);
            }
            other => {
                for (name, t, role) in other.own_tensors_mut() {
                    out.push((format!("{prefix}{i}.{name}"), t, role));
                }
            }
        }
    }
}

fn flatten<'a>(layers: &'a [Layer], prefix: &str, out: &mut Vec<(String, &'a Layer)>) {
    for (i, l) in layers.iter().enumerate() {
        match l {
            Layer::Residual(b) => {
                flatten(&b.body, &format!("{prefix}{i}.body."), out);
                flatten(&b.shortcut, &format!("{prefix}{i}.shortcut."), out);
                flatten(&b.post, &format!("{prefix}{i}.post."), out);
            }
            other => out.push((format!("{prefix}{i}"), other)),
        }
    }
}

fn flatten_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Layer>) {
    for l in layers.iter_mut() {
        match l {
            Layer::Residual(b) => {
                flatten_mut(&mut b.body, out);
                flatten_mut(&mut b.shortcut, out);
                flatten_mut(&mut b.post, out);
            }
            other => out.push(other),
        }
    }
}

impl Model {
    /// Builds and initializes a model. Every layer draws from its own stream
    /// of `rng`, so toggling LENI or the extended conv at one slot leaves all
    /// other initial weights unchanged.
    pub fn build(cfg: &ModelConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder {
            cfg,
            rng,
            convs: 0,
            slot: 0,
        };
        let (mut layers, c) = match cfg.family {
            Family::VggSmall => b.vgg()?,
            Family::ResnetSmall => b.resnet()?,
        };
        layers.push(Layer::GlobalAvgPool { input: None });
        let mut lrng = rng.fork("linear", 0);
        let weight = Tensor::kaiming_init(&mut lrng, (cfg.num_classes, c, 1, 1), c)?;
        let bias = Tensor::zeros((1, cfg.num_classes, 1, 1))?;
        layers.push(Layer::linear(LinearParams { weight, bias }));
        Ok(Model { cfg: cfg.clone(), layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let want = self.input_shape(s.n);
        if s != want {
            return Err(shape_err!("model expects input {want:?}, got {s:?}"));
        }
        Ok(())
    }

    /// Logits `(n, num_classes, 1, 1)`. `rng` is only consumed by RReLU in
    /// train mode.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: Option<&mut Rng>) -> Result<Tensor> {
        self.check_input(x)?;
        let mut ctx = ForwardCtx::new(mode, rng);
        run_forward(&mut self.layers, x.clone(), &mut ctx)
    }

    /// Eval-mode forward that also returns the input and output of
    /// activation slot `slot`.
    pub fn forward_probe(&mut self, x: &Tensor, slot: usize) -> Result<(Tensor, Tensor, Tensor)> {
        if slot >= self.cfg.activation_slots() {
            return Err(crate::Error::Config(format!(
                "layer {slot} out of range: model has {} activation layers",
                self.cfg.activation_slots()
            )));
        }
        self.check_input(x)?;
        let mut ctx = ForwardCtx::new(Mode::Eval, None);
        ctx.probe = Some(slot);
        let logits = run_forward(&mut self.layers, x.clone(), &mut ctx)?;
        let (pre, post) = ctx.captured.expect("every slot is visited by forward");
        self.clear_cache();
        Ok((logits, pre, post))
    }

    /// Accumulates parameter gradients from the last forward pass and
    /// returns the gradient with respect to the input.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        run_backward(&mut self.layers, grad_logits.clone())
    }

    /// Frees the activations kept for backward; a trained model held for
    /// inference only needs its parameters.
    pub fn clear_cache(&mut self) {
        self.layers.iter_mut().for_each(Layer::clear_cache);
    }

    pub fn zero_grad(&mut self) {
        for (_, t, _) in self.tensors_mut() {
            t.zero_grad();
        }
    }

    /// Every stored tensor with a stable dotted name, in forward order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor, Role)> {
        let mut out = Vec::new();
        collect_mut(&mut self.layers, "layers.", &mut out);
        out
    }

    /// Leaf layers (residual blocks expanded) with dotted names.
    pub fn leaf_layers(&self) -> Vec<(String, &Layer)> {
        let mut out = Vec::new();
        flatten(&self.layers, "layers.", &mut out);
        out
    }

    fn leaf_layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut out = Vec::new();
        flatten_mut(&mut self.layers, &mut out);
        out
    }

    pub fn leni_blocks_mut(&mut self) -> Vec<&mut LeniBlockParams> {
        self.leaf_layers_mut()
            .into_iter()
            .filter_map(|l| match l {
                Layer::Leni(b) => Some(&mut b.params),
                _ => None,
            })
            .collect()
    }

    pub fn extended_convs_mut(&mut self) -> Vec<&mut ConvParams> {
        self.leaf_layers_mut()
            .into_iter()
            .filter_map(|l| match l {
                Layer::Conv(c) if c.extended => Some(&mut c.params),
                _ => None,
            })
            .collect()
    }

    /// Learned and buffer counts per leaf layer.
    pub fn count_params(&self) -> ParamReport {
        let layers: Vec<LayerParams> = self
            .leaf_layers()
            .into_iter()
            .map(|(name, l)| LayerParams {
                count: l.param_count(),
                kind: l.name(),
                name,
            })
            .filter(|r| r.count.learned + r.count.buffers > 0)
            .collect();
        let total = layers.iter().map(|r| r.count).sum();
        ParamReport { layers, total }
    }
}
