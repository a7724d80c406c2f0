//! Central finite-difference checks of every backward pass.
//!
//! Each registered op becomes an [`Instance`]: a list of flat inputs and a
//! closure returning a scalar `f` (a random projection of the op output)
//! together with the analytic gradient of `f` with respect to every input.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::leni::{leni_backward, leni_forward, LeniBlockParams};
use crate::model::{Model, ModelConfig, Role};
use crate::ops::{
    activation_backward, activation_forward, batchnorm_backward, batchnorm_forward, conv2d_backward,
    conv2d_forward, crelu_backward, crelu_forward, depthwise_deconv2d_backward, depthwise_deconv2d_forward,
    global_avgpool_backward, global_avgpool_forward, linear_backward, linear_forward, maxpool2x2_backward,
    maxpool2x2_forward, softmax_cross_entropy, ActivationKind, BnParams, ConvParams, LinearParams, Mode,
};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Default step, scaled by `max(1, |x|)` per coordinate.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Minimum distance of activation inputs from a non-differentiable point.
pub const KINK_MARGIN: f64 = 0.05;

type EvalFn = Box<dyn FnMut(&[Vec<f64>], bool) -> Result<(f64, Vec<Vec<f64>>)>>;

/// A differentiable scalar function of named flat inputs.
pub struct Instance {
    pub op: String,
    pub shapes: String,
    pub inputs: Vec<(String, Vec<f64>)>,
    /// `eval(inputs, with_grad)` returns `f` and, when asked, `df/dinput`
    /// for every input in order.
    pub eval: EvalFn,
    /// Skip coordinates whose step-halved difference disagrees, which marks a
    /// kink (ReLU crossing, max-pool switch) inside the step. Used only for
    /// whole-model spot checks where inputs cannot be placed away from kinks.
    pub skip_kinks: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub shapes: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// `input[index]` of the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.skipped <= self.checked && self.max_rel_error <= tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<24} {:>10.3e}  checked {:>4}  skipped {:>3}  worst {}  [{}]",
            self.op, self.max_rel_error, self.checked, self.skipped, self.worst, self.shapes
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is {v}")))
    }
}

/// Compares the analytic gradient with `(f(x+h) - f(x-h)) / 2h` at every
/// coordinate of every input, with `h = step · max(1, |x|)`.
pub fn finite_difference_check(inst: &mut Instance, step: f64) -> Result<GradCheckReport> {
    let mut xs: Vec<Vec<f64>> = inst.inputs.iter().map(|(_, v)| v.clone()).collect();
    let (f0, grads) = (inst.eval)(&xs, true)?;
    finite(f0, &format!("{} output", inst.op))?;
    if grads.len() != xs.len() || grads.iter().zip(&xs).any(|(g, x)| g.len() != x.len()) {
        return Err(Error::Shape(format!("{}: gradient layout does not match inputs", inst.op)));
    }
    let mut report = GradCheckReport {
        op: inst.op.clone(),
        shapes: inst.shapes.clone(),
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let x0 = xs[k][i];
            let h = step * x0.abs().max(1.0);
            let mut at = |xs: &mut Vec<Vec<f64>>, d: f64| -> Result<f64> {
                xs[k][i] = x0 + d;
                let v = (inst.eval)(xs, false)?.0;
                xs[k][i] = x0;
                finite(v, &format!("{} output", inst.op))
            };
            let (fp, fm) = (at(&mut xs, h)?, at(&mut xs, -h)?);
            let numeric = (fp - fm) / (2.0 * h);
            if inst.skip_kinks {
                let half = (at(&mut xs, h / 2.0)? - at(&mut xs, -h / 2.0)?) / h;
                if relative_error(numeric, half) > 1e-6 {
                    report.skipped += 1;
                    continue;
                }
            }
            let analytic = finite(grads[k][i], &format!("{} gradient", inst.op))?;
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = format!("{}[{i}]", inst.inputs[k].0);
            }
        }
    }
    Ok(report)
}

fn normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

/// Standard normal draws pushed at least `KINK_MARGIN` away from every kink.
fn kink_safe(rng: &mut Rng, n: usize, kinks: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut v = rng.normal();
            for &k in kinks {
                let d = v - k;
                if d.abs() < KINK_MARGIN {
                    v = k + d.signum() * (KINK_MARGIN + d.abs());
                }
            }
            v
        })
        .collect()
}

fn tensor(shape: impl Into<Shape>, v: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(shape, v.to_vec())
}

fn dot(a: &Tensor, r: &[f64]) -> f64 {
    a.data().iter().zip(r).map(|(x, y)| x * y).sum()
}

fn shapes_str(shapes: &[(&str, Shape)]) -> String {
    shapes
        .iter()
        .map(|(n, s)| format!("{n}={:?}", s.as_array()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn inputs(names: &[&str], values: Vec<Vec<f64>>) -> Vec<(String, Vec<f64>)> {
    names.iter().map(|s| s.to_string()).zip(values).collect()
}

fn conv_instance(name: &str, seed: u64, x: Shape, w: Shape, stride: usize, pad: usize, groups: usize, bias: bool) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let probe = ConvParams::new(Tensor::zeros(w)?, bias.then(|| Tensor::zeros((1, w.n, 1, 1))).transpose()?, stride, pad, groups)?;
    let out = probe.output_shape(x)?;
    let r = normals(&mut rng, out.numel());
    let mut vals = vec![normals(&mut rng, x.numel()), normals(&mut rng, w.numel())];
    let mut names = vec!["x", "weight"];
    if bias {
        vals.push(normals(&mut rng, w.n));
        names.push("bias");
    }
    let eval: EvalFn = Box::new(move |v, want| {
        let b = if bias { Some(tensor((1, w.n, 1, 1), &v[2])?) } else { None };
        let p = ConvParams::new(tensor(w, &v[1])?, b, stride, pad, groups)?;
        let xt = tensor(x, &v[0])?;
        let y = conv2d_forward(&xt, &p)?;
        let f = dot(&y, &r);
        if !want {
            return Ok((f, vec![]));
        }
        let g = conv2d_backward(&xt, &p, &tensor(out, &r)?)?;
        let mut grads = vec![g.grad_x.into_data(), g.grad_weight.into_data()];
        if let Some(gb) = g.grad_bias {
            grads.push(gb.into_data());
        }
        Ok((f, grads))
    });
    Ok(Instance {
        op: name.into(),
        shapes: shapes_str(&[("x", x), ("w", w)]),
        inputs: inputs(&names, vals),
        eval,
        skip_kinks: false,
    })
}

fn conv(seed: u64) -> Result<Instance> {
    conv_instance("conv2d", seed, Shape::new(2, 4, 6, 6), Shape::new(6, 2, 3, 3), 1, 1, 2, true)
}

fn conv_strided(seed: u64) -> Result<Instance> {
    conv_instance("conv2d_strided", seed, Shape::new(2, 3, 7, 7), Shape::new(4, 3, 3, 3), 2, 1, 1, true)
}

fn depthwise_conv(seed: u64) -> Result<Instance> {
    conv_instance("depthwise_conv", seed, Shape::new(2, 3, 6, 6), Shape::new(3, 1, 3, 3), 1, 1, 3, false)
}

fn depthwise_deconv(seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let (xs, ws) = (Shape::new(2, 3, 6, 6), Shape::new(3, 1, 3, 3));
    let r = normals(&mut rng, xs.numel());
    let vals = vec![normals(&mut rng, xs.numel()), normals(&mut rng, ws.numel())];
    let eval: EvalFn = Box::new(move |v, want| {
        let (x, w) = (tensor(xs, &v[0])?, tensor(ws, &v[1])?);
        let f = dot(&depthwise_deconv2d_forward(&x, &w, 1)?, &r);
        if !want {
            return Ok((f, vec![]));
        }
        let (gx, gw) = depthwise_deconv2d_backward(&x, &w, 1, &tensor(xs, &r)?)?;
        Ok((f, vec![gx.into_data(), gw.into_data()]))
    });
    Ok(Instance {
        op: "depthwise_deconv".into(),
        shapes: shapes_str(&[("x", xs), ("w", ws)]),
        inputs: inputs(&["x", "weight"], vals),
        eval,
        skip_kinks: false,
    })
}

fn batchnorm(seed: u64, mode: Mode) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let xs = Shape::new(3, 4, 3, 3);
    let c = xs.c;
    let r = normals(&mut rng, xs.numel());
    let vals = vec![
        normals(&mut rng, xs.numel()),
        (0..c).map(|_| rng.uniform(0.5, 1.5)).collect(),
        normals(&mut rng, c),
    ];
    let mean = normals(&mut rng, c);
    let var: Vec<f64> = (0..c).map(|_| rng.uniform(0.5, 2.0)).collect();
    let eval: EvalFn = Box::new(move |v, want| {
        let mut p = BnParams::new(c)?;
        p.gamma = Tensor::channel_vector(v[1].clone())?;
        p.beta = Tensor::channel_vector(v[2].clone())?;
        p.running_mean = Tensor::channel_vector(mean.clone())?;
        p.running_var = Tensor::channel_vector(var.clone())?;
        p.mode = mode;
        let x = tensor(xs, &v[0])?;
        let (y, cache) = batchnorm_forward(&x, &mut p)?;
        let f = dot(&y, &r);
        if !want {
            return Ok((f, vec![]));
        }
        let g = batchnorm_backward(&cache, &p, &tensor(xs, &r)?)?;
        Ok((f, vec![g.grad_x.into_data(), g.grad_gamma.into_data(), g.grad_beta.into_data()]))
    });
    let name = match mode {
        Mode::Train => "batchnorm_train",
        Mode::Eval => "batchnorm_eval",
    };
    Ok(Instance {
        op: name.into(),
        shapes: shapes_str(&[("x", xs)]),
        inputs: inputs(&["x", "gamma", "beta"], vals),
        eval,
        skip_kinks: false,
    })
}

fn activation(kind: ActivationKind, seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let xs = Shape::new(2, 3, 4, 4);
    let r = normals(&mut rng, xs.numel() * kind.width_factor());
    let mut vals = vec![kink_safe(&mut rng, xs.numel(), kind.kinks())];
    let mut names = vec!["x"];
    let prelu = matches!(kind, ActivationKind::Prelu { .. });
    if prelu {
        vals.push((0..xs.c).map(|_| rng.uniform(0.1, 0.4)).collect());
        names.push("alpha");
    }
    let eval: EvalFn = Box::new(move |v, want| {
        let x = tensor(xs, &v[0])?;
        if kind == ActivationKind::Crelu {
            let f = dot(&crelu_forward(&x)?, &r);
            let g = if want {
                let go = tensor(Shape::new(xs.n, 2 * xs.c, xs.h, xs.w), &r)?;
                vec![crelu_backward(&x, &go)?.into_data()]
            } else {
                vec![]
            };
            return Ok((f, g));
        }
        let alpha = if prelu { Some(Tensor::channel_vector(v[1].clone())?) } else { None };
        // A fresh stream per call keeps the RReLU slopes fixed across
        // evaluations, which makes the train-mode function deterministic.
        let mut slope_rng = Rng::new(seed ^ 0x5eed);
        let (y, cache) = activation_forward(&x, &kind, alpha.as_ref(), Mode::Train, Some(&mut slope_rng))?;
        let f = dot(&y, &r);
        if !want {
            return Ok((f, vec![]));
        }
        let (gx, ga) = activation_backward(&cache, &kind, alpha.as_ref(), &tensor(xs, &r)?)?;
        let mut grads = vec![gx.into_data()];
        if let Some(ga) = ga {
            grads.push(ga.into_data());
        }
        Ok((f, grads))
    });
    Ok(Instance {
        op: kind.name().into(),
        shapes: shapes_str(&[("x", xs)]),
        inputs: inputs(&names, vals),
        eval,
        skip_kinks: false,
    })
}

fn linear(seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let (xs, fout) = (Shape::new(3, 5, 2, 2), 7);
    let fin = xs.sample_len();
    let r = normals(&mut rng, xs.n * fout);
    let vals = vec![normals(&mut rng, xs.numel()), normals(&mut rng, fout * fin), normals(&mut rng, fout)];
    let eval: EvalFn = Box::new(move |v, want| {
        let p = LinearParams {
            weight: tensor((fout, fin, 1, 1), &v[1])?,
            bias: tensor((1, fout, 1, 1), &v[2])?,
        };
        let x = tensor(xs, &v[0])?;
        let f = dot(&linear_forward(&x, &p)?, &r);
        if !want {
            return Ok((f, vec![]));
        }
        let g = linear_backward(&x, &p, &tensor((xs.n, fout, 1, 1), &r)?)?;
        Ok((f, vec![g.grad_x.into_data(), g.grad_weight.into_data(), g.grad_bias.into_data()]))
    });
    Ok(Instance {
        op: "linear".into(),
        shapes: shapes_str(&[("x", xs), ("w", Shape::new(fout, fin, 1, 1))]),
        inputs: inputs(&["x", "weight", "bias"], vals),
        eval,
        skip_kinks: false,
    })
}

fn softmax(seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let s = Shape::new(4, 6, 1, 1);
    let labels: Vec<usize> = (0..s.n).map(|_| rng.below(s.c)).collect();
    let vals = vec![normals(&mut rng, s.numel()).into_iter().map(|v| 2.0 * v).collect()];
    let eval: EvalFn = Box::new(move |v, want| {
        let (loss, g) = softmax_cross_entropy(&tensor(s, &v[0])?, &labels)?;
        Ok((loss, if want { vec![g.into_data()] } else { vec![] }))
    });
    Ok(Instance {
        op: "softmax_cross_entropy".into(),
        shapes: shapes_str(&[("logits", s)]),
        inputs: inputs(&["logits"], vals),
        eval,
        skip_kinks: false,
    })
}

fn maxpool(seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let xs = Shape::new(2, 3, 6, 6);
    // Distinct values on a 0.1 grid: no ties within any step.
    let mut vals: Vec<f64> = (0..xs.numel()).map(|i| i as f64 * 0.1 - 10.0).collect();
    rng.shuffle(&mut vals);
    let out = Shape::new(2, 3, 3, 3);
    let r = normals(&mut rng, out.numel());
    let eval: EvalFn = Box::new(move |v, want| {
        let x = tensor(xs, &v[0])?;
        let (y, arg) = maxpool2x2_forward(&x)?;
        let f = dot(&y, &r);
        let g = if want { vec![maxpool2x2_backward(xs, &arg, &tensor(out, &r)?)?.into_data()] } else { vec![] };
        Ok((f, g))
    });
    Ok(Instance {
        op: "maxpool2x2".into(),
        shapes: shapes_str(&[("x", xs)]),
        inputs: inputs(&["x"], vec![vals]),
        eval,
        skip_kinks: false,
    })
}

fn avgpool(seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let xs = Shape::new(2, 3, 4, 5);
    let r = normals(&mut rng, xs.n * xs.c);
    let vals = vec![normals(&mut rng, xs.numel())];
    let eval: EvalFn = Box::new(move |v, want| {
        let x = tensor(xs, &v[0])?;
        let f = dot(&global_avgpool_forward(&x), &r);
        let g = if want {
            vec![global_avgpool_backward(xs, &tensor((xs.n, xs.c, 1, 1), &r)?)?.into_data()]
        } else {
            vec![]
        };
        Ok((f, g))
    });
    Ok(Instance {
        op: "global_avgpool".into(),
        shapes: shapes_str(&[("x", xs)]),
        inputs: inputs(&["x"], vals),
        eval,
        skip_kinks: false,
    })
}

fn leni(seed: u64, mode: Mode) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let xs = Shape::new(2, 4, 5, 5);
    let c = xs.c;
    let r = normals(&mut rng, xs.numel());
    let init = LeniBlockParams::init(c, &mut rng)?;
    let stats: Vec<Vec<f64>> = vec![
        normals(&mut rng, c),
        (0..c).map(|_| rng.uniform(0.5, 2.0)).collect(),
        normals(&mut rng, 2 * c),
        (0..2 * c).map(|_| rng.uniform(0.5, 2.0)).collect(),
    ];
    let mut vals = vec![
        kink_safe(&mut rng, xs.numel(), &[0.0]),
        init.deconv_weight.data().to_vec(),
        (0..c).map(|_| rng.uniform(0.5, 1.5)).collect(),
        normals(&mut rng, c),
        (0..2 * c).map(|_| rng.uniform(0.5, 1.5)).collect(),
        normals(&mut rng, 2 * c),
        init.compress_weight.data().to_vec(),
    ];
    let mut names = vec![
        "x",
        "deconv_weight",
        "bn_neg.gamma",
        "bn_neg.beta",
        "bn_fuse.gamma",
        "bn_fuse.beta",
        "compress_weight",
    ];
    // In train mode the fusing BN normalizes each X2 channel, cancelling the
    // bn_neg shift exactly and its scale up to eps. Those gradients are zero
    // or eps-sized, so finite differences of them are pure roundoff. They are
    // held fixed here, checked in eval mode, and asserted small separately.
    let neg_affine: Vec<Vec<f64>> = vals[2..4].to_vec();
    let fixed_neg = mode == Mode::Train;
    if fixed_neg {
        vals.drain(2..4);
        names.drain(2..4);
    }
    let eval: EvalFn = Box::new(move |v, want| {
        let mut v = v.to_vec();
        if fixed_neg {
            v.splice(2..2, neg_affine.iter().cloned());
        }
        let mut p = LeniBlockParams::init(c, &mut Rng::new(0))?;
        p.deconv_weight = tensor((c, 1, 3, 3), &v[1])?;
        p.bn_neg.gamma = Tensor::channel_vector(v[2].clone())?;
        p.bn_neg.beta = Tensor::channel_vector(v[3].clone())?;
        p.bn_fuse.gamma = Tensor::channel_vector(v[4].clone())?;
        p.bn_fuse.beta = Tensor::channel_vector(v[5].clone())?;
        p.compress_weight = tensor((c, 2 * c, 1, 1), &v[6])?;
        p.bn_neg.running_mean = Tensor::channel_vector(stats[0].clone())?;
        p.bn_neg.running_var = Tensor::channel_vector(stats[1].clone())?;
        p.bn_fuse.running_mean = Tensor::channel_vector(stats[2].clone())?;
        p.bn_fuse.running_var = Tensor::channel_vector(stats[3].clone())?;
        p.set_mode(mode);
        let x = tensor(xs, &v[0])?;
        let (y, cache) = leni_forward(&x, &mut p)?;
        let f = dot(&y, &r);
        if !want {
            return Ok((f, vec![]));
        }
        let (gx, g) = leni_backward(&cache, &tensor(xs, &r)?, &p)?;
        let mut grads = vec![
            gx.into_data(),
            g.deconv_weight.into_data(),
            g.bn_neg_gamma.into_data(),
            g.bn_neg_beta.into_data(),
            g.bn_fuse_gamma.into_data(),
            g.bn_fuse_beta.into_data(),
            g.compress_weight.into_data(),
        ];
        if fixed_neg {
            grads.drain(2..4);
        }
        Ok((f, grads))
    });
    let name = match mode {
        Mode::Train => "leni_block",
        Mode::Eval => "leni_block_eval",
    };
    Ok(Instance {
        op: name.into(),
        shapes: shapes_str(&[("x", xs)]),
        inputs: inputs(&names, vals),
        eval,
        skip_kinks: false,
    })
}

/// Train-mode gradients that are zero up to the BN epsilon, where the
/// finite difference is pure roundoff. Each LENI channel is renormalized by
/// its fuse BN, so the bn_neg affine and a positive per-channel scale of the
/// block input (the gamma of a BN right before it) cancel out.
fn has_vanishing_gradient(name: &str, all: &[String]) -> bool {
    if name.contains("bn_neg.") {
        return true;
    }
    let Some(prefix) = name.strip_suffix(".gamma") else {
        return false;
    };
    let Some((parent, idx)) = prefix.rsplit_once('.') else {
        return false;
    };
    let Ok(idx) = idx.parse::<usize>() else {
        return false;
    };
    let next = format!("{parent}.{}.deconv_weight", idx + 1);
    all.contains(&next)
}

/// Learned coordinates sampled for a model spot check.
pub const SPOT_COORDS: usize = 20;

/// Spot check of `SPOT_COORDS` random learned parameters (plus a few spares
/// for kink skips) of a whole model in train mode on a 2-sample batch.
pub fn model_spot_check(name: &str, cfg: &ModelConfig, seed: u64) -> Result<Instance> {
    let mut rng = Rng::new(seed);
    let mut model = Model::build(cfg, &rng.fork("init", 0))?;
    let xs = model.input_shape(2);
    let x = tensor(xs, &normals(&mut rng, xs.numel()))?;
    let r = normals(&mut rng, 2 * cfg.num_classes);
    let tensor_names: Vec<String> = model.tensors_mut().into_iter().map(|(n, _, _)| n).collect();
    let sizes: Vec<(usize, usize)> = model
        .tensors_mut()
        .into_iter()
        .enumerate()
        .filter(|(_, (name, _, role))| *role != Role::Buffer && !has_vanishing_gradient(name, &tensor_names))
        .map(|(i, (_, t, _))| (i, t.len()))
        .collect();
    let mut coords = Vec::new();
    let mut names = Vec::new();
    let all = model.tensors_mut();
    while coords.len() < SPOT_COORDS + SPOT_COORDS / 2 {
        let (ti, len) = sizes[rng.below(sizes.len())];
        let c = (ti, rng.below(len));
        if !coords.contains(&c) {
            coords.push(c);
            names.push(format!("{}[{}]", all[ti].0, c.1));
        }
    }
    let start: Vec<f64> = coords.iter().map(|&(t, i)| all[t].1.data()[i]).collect();
    drop(all);
    let out = Shape::new(2, cfg.num_classes, 1, 1);
    let eval: EvalFn = Box::new(move |v, want| {
        {
            let mut ts = model.tensors_mut();
            for (&(t, i), &val) in coords.iter().zip(&v[0]) {
                ts[t].1.data_mut()[i] = val;
            }
        }
        let y = model.forward(&x, Mode::Train, None)?;
        let f = dot(&y, &r);
        if !want {
            return Ok((f, vec![]));
        }
        model.zero_grad();
        model.backward(&tensor(out, &r)?)?;
        let ts = model.tensors_mut();
        let g = coords.iter().map(|&(t, i)| ts[t].1.grad().map_or(0.0, |g| g[i])).collect();
        Ok((f, vec![g]))
    });
    Ok(Instance {
        op: name.into(),
        shapes: shapes_str(&[("x", xs)]),
        inputs: vec![(format!("params({})", names.join(",")), start)],
        eval,
        skip_kinks: true,
    })
}

fn tiny(family: ModelConfig) -> ModelConfig {
    ModelConfig {
        stage_widths: vec![4, 6],
        blocks_per_stage: vec![1, 1],
        num_classes: 5,
        input_size: 8,
        ..family
    }
}

type Builder = fn(u64) -> Result<Instance>;

/// Every op the checker knows, in report order.
pub fn registry() -> Vec<(&'static str, Builder)> {
    vec![
        ("conv2d", conv),
        ("conv2d_strided", conv_strided),
        ("depthwise_conv", depthwise_conv),
        ("depthwise_deconv", depthwise_deconv),
        ("batchnorm_train", |s| batchnorm(s, Mode::Train)),
        ("batchnorm_eval", |s| batchnorm(s, Mode::Eval)),
        ("relu", |s| activation(ActivationKind::Relu, s)),
        ("leaky_relu", |s| activation(ActivationKind::leaky_relu(), s)),
        ("prelu", |s| activation(ActivationKind::prelu(), s)),
        ("rrelu", |s| activation(ActivationKind::rrelu(), s)),
        ("elu", |s| activation(ActivationKind::elu(), s)),
        ("celu", |s| activation(ActivationKind::celu(), s)),
        ("gelu", |s| activation(ActivationKind::Gelu, s)),
        ("crelu", |s| activation(ActivationKind::Crelu, s)),
        ("linear", linear),
        ("softmax_cross_entropy", softmax),
        ("maxpool2x2", maxpool),
        ("global_avgpool", avgpool),
        ("leni_block", |s| leni(s, Mode::Train)),
        ("leni_block_eval", |s| leni(s, Mode::Eval)),
        ("vgg_small_spot", |s| model_spot_check("vgg_small_spot", &tiny(ModelConfig::vgg_small()), s)),
        ("vgg_small_leni_spot", |s| {
            model_spot_check("vgg_small_leni_spot", &tiny(ModelConfig::vgg_small()).with_leni_everywhere(), s)
        }),
        ("resnet_small_spot", |s| model_spot_check("resnet_small_spot", &tiny(ModelConfig::resnet_small()), s)),
        ("resnet_small_leni_spot", |s| {
            model_spot_check("resnet_small_leni_spot", &tiny(ModelConfig::resnet_small()).with_leni_everywhere(), s)
        }),
    ]
}

pub fn op_names() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).collect()
}

pub fn check_op(name: &str, seed: u64) -> Result<GradCheckReport> {
    let build = registry()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Config(format!("unknown op '{name}'; valid ops: {}", op_names().join(", "))))?;
    finite_difference_check(&mut build(seed)?, DEFAULT_STEP)
}

pub fn check_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    op_names().into_iter().map(|n| check_op(n, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_near_exact() {
        // Affine in every coordinate: no truncation error, so a large step
        // leaves only roundoff.
        let r = finite_difference_check(&mut linear(1).unwrap(), 1e-2).unwrap();
        assert!(r.max_rel_error <= 1e-9, "{r}");
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let mut inst = linear(2).unwrap();
        let mut inner = inst.eval;
        inst.eval = Box::new(move |v, want| {
            let (f, mut g) = inner(v, want)?;
            for x in g.iter_mut().flatten() {
                *x *= 1.1;
            }
            Ok((f, g))
        });
        let r = finite_difference_check(&mut inst, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error > 1e-2, "{r}");
        assert!(!r.passes(TOLERANCE));
    }

    #[test]
    fn unknown_op_lists_valid_names() {
        let err = check_op("nope", 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("leni_block"));
    }

    #[test]
    fn non_finite_is_numerical_error() {
        let mut inst = softmax(0).unwrap();
        inst.inputs[0].1[0] = f64::NAN;
        assert!(matches!(finite_difference_check(&mut inst, DEFAULT_STEP), Err(Error::Numerical(_))));
    }

    #[test]
    fn affine_before_train_mode_bn_has_vanishing_gradient() {
        let mut rng = Rng::new(9);
        let mut p = LeniBlockParams::init(3, &mut rng).unwrap();
        p.bn_neg.beta = Tensor::channel_vector(vec![0.3, -1.0, 2.0]).unwrap();
        let x = tensor((2, 3, 4, 4), &normals(&mut rng, 96)).unwrap();
        let (_, cache) = leni_forward(&x, &mut p).unwrap();
        let gy = tensor((2, 3, 4, 4), &normals(&mut rng, 96)).unwrap();
        let (_, g) = leni_backward(&cache, &gy, &p).unwrap();
        assert!(g.bn_neg_beta.data().iter().all(|v| v.abs() < 1e-12), "{:?}", g.bn_neg_beta.data());
        let scale = g.deconv_weight.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let gamma = g.bn_neg_gamma.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(gamma < 1e-3 * scale, "bn_neg.gamma {gamma} vs deconv {scale}");
    }

    #[test]
    fn vanishing_gradient_selection() {
        let all: Vec<String> = ["layers.1.gamma", "layers.2.deconv_weight", "layers.4.gamma", "layers.5.weight"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert!(has_vanishing_gradient("layers.1.gamma", &all));
        assert!(has_vanishing_gradient("layers.2.bn_neg.beta", &all));
        assert!(!has_vanishing_gradient("layers.4.gamma", &all));
        assert!(!has_vanishing_gradient("layers.1.beta", &all));
        assert!(!has_vanishing_gradient("layers.2.bn_fuse.gamma", &all));
    }

    #[test]
    fn kink_margin_holds() {
        let v = kink_safe(&mut Rng::new(0), 10_000, &[0.0]);
        assert!(v.iter().all(|x| x.abs() >= KINK_MARGIN));
    }

    #[test]
    fn registry_names_are_unique() {
        let mut names = op_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(n >= 20);
    }
}
