//! SGD with momentum and decoupled handling of no-decay parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, Role};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One tensor's update: `v = momentum·v + g + wd·p`, `p -= lr·v`.
/// `decay = false` drops the `wd·p` term.
pub fn sgd_update(param: &mut [f64], grad: &[f64], velocity: &mut [f64], hp: &SgdParams, decay: bool) {
    let wd = if decay { hp.weight_decay } else { 0.0 };
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = hp.momentum * *v + g + wd * *p;
        *p -= hp.lr * *v;
    }
}

/// Momentum buffers for every learned tensor of one model, in the order of
/// [`Model::tensors_mut`].
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every learned tensor from its accumulated gradient. Nothing is
    /// modified if any gradient is non-finite.
    pub fn step(&mut self, model: &mut Model, hp: &SgdParams) -> Result<()> {
        let mut tensors: Vec<_> = model
            .tensors_mut()
            .into_iter()
            .filter(|(_, _, role)| role.is_learned())
            .collect();
        for (name, t, _) in tensors.iter() {
            if let Some(g) = t.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::Numerical(format!("non-finite gradient in {name} at element {i}")));
                }
            }
        }
        if self.velocity.is_empty() {
            self.velocity = tensors.iter().map(|(_, t, _)| vec![0.0; t.len()]).collect();
        }
        assert_eq!(self.velocity.len(), tensors.len(), "optimizer reused across models");
        for ((_, t, role), v) in tensors.iter_mut().zip(self.velocity.iter_mut()) {
            let decay = *role == Role::Weight;
            let (p, g) = t.data_and_grad_mut();
            sgd_update(p, g, v, hp, decay);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::ops::Mode;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    const HP: SgdParams = SgdParams {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.01,
    };

    #[test]
    fn plain_sgd() {
        let hp = SgdParams {
            momentum: 0.0,
            weight_decay: 0.0,
            ..HP
        };
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.5, 0.25], &mut v, &hp, true);
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);
    }

    #[test]
    fn zero_grad_zero_velocity_is_fixed_point() {
        let hp = SgdParams { weight_decay: 0.0, ..HP };
        let mut p = vec![3.0, -1.5];
        let mut v = vec![0.0; 2];
        sgd_update(&mut p, &[0.0, 0.0], &mut v, &hp, true);
        assert_eq!(p, vec![3.0, -1.5]);
    }

    #[test]
    fn two_steps_match_unrolled_recurrence() {
        let (p0, g1, g2) = (0.7, 0.3, -0.2);
        let mut p = vec![p0];
        let mut v = vec![0.0];
        sgd_update(&mut p, &[g1], &mut v, &HP, true);
        sgd_update(&mut p, &[g2], &mut v, &HP, true);
        let v1 = g1 + HP.weight_decay * p0;
        let p1 = p0 - HP.lr * v1;
        let v2 = HP.momentum * v1 + g2 + HP.weight_decay * p1;
        let p2 = p1 - HP.lr * v2;
        assert!((p[0] - p2).abs() <= 1e-15);
    }

    #[test]
    fn no_decay_roles_and_buffers() {
        let cfg = ModelConfig {
            stage_widths: vec![2],
            blocks_per_stage: vec![1],
            input_size: 4,
            ..ModelConfig::vgg_small()
        };
        let mut m = Model::build(&cfg, &Rng::new(0)).unwrap();
        let before: Vec<(String, Vec<f64>)> =
            m.tensors_mut().into_iter().map(|(n, t, _)| (n, t.data().to_vec())).collect();
        m.zero_grad();
        let mut opt = Sgd::new();
        opt.step(&mut m, &HP).unwrap();
        for ((name, t, role), (_, old)) in m.tensors_mut().into_iter().zip(&before) {
            let changed = t.data() != old.as_slice();
            assert_eq!(changed, role == Role::Weight && old.iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn nan_gradient_names_the_tensor() {
        let cfg = ModelConfig {
            stage_widths: vec![2],
            blocks_per_stage: vec![1],
            input_size: 4,
            ..ModelConfig::vgg_small()
        };
        let mut m = Model::build(&cfg, &Rng::new(0)).unwrap();
        let x = Tensor::full((2, 1, 4, 4), 0.5).unwrap();
        m.forward(&x, Mode::Train, None).unwrap();
        m.zero_grad();
        let snapshot = m.clone();
        m.tensors_mut()[0].1.grad_mut()[1] = f64::NAN;
        let err = Sgd::new().step(&mut m, &HP).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("layers.0.weight"), "{err}");
        let mut snap = snapshot;
        for ((_, a, _), (_, b, _)) in m.tensors_mut().into_iter().zip(snap.tensors_mut()) {
            assert_eq!(a.data(), b.data());
        }
    }
}
