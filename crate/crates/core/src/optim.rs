//! SGD with momentum, weight decay and the poly learning-rate schedule.
//!
//! The velocity carries the learning rate (Caffe convention):
//!
//! ```text
//! v <- momentum * v - lr * (g + wd * p)
//! p <- p + v
//! ```
//!
//! Weight decay applies to convolution weights only. Learnable dilations use
//! `lr * dilation_lr_mult` and are projected back into their range after every
//! step; fixed dilations are never touched.

use serde::{Deserialize, Serialize};

use crate::conv::LayerGradients;
use crate::error::{Error, Result};
use crate::net::Net;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch_size: usize,
    pub base_lr: f64,
    pub power: f64,
    pub max_iter: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dilation_lr_mult: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            patch_size: 32,
            base_lr: 3e-2,
            power: 0.9,
            max_iter: 2000,
            momentum: 0.9,
            weight_decay: 5e-4,
            dilation_lr_mult: 1.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Argument(m.to_string()));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return bad("power must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1");
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return bad("batch_size and patch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0 && self.dilation_lr_mult >= 0.0) {
            return bad("weight_decay and dilation_lr_mult must be non-negative");
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::Argument(format!(
            "iteration {iter} beyond max_iter {}",
            cfg.max_iter
        )));
    }
    let remaining = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.base_lr * remaining.powf(cfg.power))
}

/// Momentum update of one parameter slice.
pub fn sgd_update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert!(params.len() == grads.len() && params.len() == velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *p);
        *p += *v;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerVelocity {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub dilation: Vec<f64>,
}

/// Velocity buffers mirroring every parameter of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumState {
    pub layers: Vec<LayerVelocity>,
}

impl MomentumState {
    pub fn new(net: &Net) -> Self {
        let layers = net
            .convs()
            .iter()
            .map(|c| LayerVelocity {
                weights: vec![0.0; c.state.weights().len()],
                bias: vec![0.0; c.state.bias().len()],
                dilation: vec![0.0; c.state.dilation().len()],
            })
            .collect();
        Self { layers }
    }

    fn matches(&self, net: &Net) -> bool {
        self.layers.len() == net.convs().len()
            && self.layers.iter().zip(net.convs()).all(|(v, c)| {
                v.weights.len() == c.state.weights().len()
                    && v.bias.len() == c.state.bias().len()
                    && v.dilation.len() == c.state.dilation().len()
            })
    }
}

/// One projected SGD-momentum step over every parameter of `net`.
pub fn sgd_step(
    net: &mut Net,
    grads: &[LayerGradients],
    state: &mut MomentumState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != net.convs().len() || !state.matches(net) {
        return Err(Error::Shape(
            "gradients or momentum state do not match the network".into(),
        ));
    }
    for (conv, g) in net.convs().iter().zip(grads) {
        if g.d_weights.len() != conv.state.weights().len()
            || g.d_bias.len() != conv.state.bias().len()
            || g.d_dilation.len() != conv.state.dilation().len()
        {
            return Err(Error::Shape("layer gradient does not match its layer".into()));
        }
    }
    for ((conv, g), v) in net.convs_mut().iter_mut().zip(grads).zip(&mut state.layers) {
        sgd_update(
            conv.state.weights_mut(),
            g.d_weights.data(),
            &mut v.weights,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        );
        sgd_update(
            conv.state.bias_mut(),
            &g.d_bias,
            &mut v.bias,
            lr,
            cfg.momentum,
            0.0,
        );
        if conv.learnable {
            let dil = conv.state.dilation_mut();
            sgd_update(
                dil.values_mut(),
                &g.d_dilation,
                &mut v.dilation,
                lr * cfg.dilation_lr_mult,
                cfg.momentum,
                0.0,
            );
            dil.project_in_place();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{DilationMode, InitMode, NetSpec};
    use crate::tensor::Tensor4;

    fn cfg() -> TrainConfig {
        TrainConfig {
            base_lr: 1e-3,
            max_iter: 20000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poly_schedule_values() {
        let c = cfg();
        assert_eq!(poly_lr(0, &c).unwrap(), 1e-3);
        assert_eq!(poly_lr(20000, &c).unwrap(), 0.0);
        // 1e-3 * 0.5^0.9 = 1e-3 * exp(-0.9 ln 2) = 5.358867312681466e-4
        assert!((poly_lr(10000, &c).unwrap() - 5.358867312681466e-4).abs() < 1e-15);
        assert!(matches!(poly_lr(20001, &c), Err(Error::Argument(_))));
    }

    #[test]
    fn poly_schedule_strictly_decreasing() {
        let c = TrainConfig {
            max_iter: 500,
            ..cfg()
        };
        let lrs: Vec<f64> = (0..=500).map(|i| poly_lr(i, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn two_step_momentum_trace() {
        let mut p = [1.0];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] + 0.05).abs() < 1e-15);
        assert!((p[0] - 0.95).abs() < 1e-15);
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.9, 0.0);
        assert!((v[0] + 0.095).abs() < 1e-15);
        assert!((p[0] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_without_momentum_or_decay() {
        let mut p = [0.3, -1.2, 4.0];
        let g = [0.1, -0.7, 2.5];
        let mut v = [0.0; 3];
        let before = p;
        sgd_update(&mut p, &g, &mut v, 0.05, 0.0, 0.0);
        for i in 0..3 {
            assert_eq!(p[i], before[i] + (0.0 - 0.05 * g[i]));
        }
    }

    fn small_net() -> Net {
        let learn = DilationMode::Learnable {
            init: InitMode::Constant(4.0),
            range: (1.0, 4.0),
        };
        Net::build(&NetSpec::mini_largefov(3, 4, [learn, learn]), 1).unwrap()
    }

    fn zero_grads(net: &Net) -> Vec<LayerGradients> {
        net.convs()
            .iter()
            .map(|c| LayerGradients {
                d_weights: Tensor4::zeros(c.state.weights().shape()).unwrap(),
                d_bias: vec![0.0; c.state.bias().len()],
                d_dilation: vec![0.0; c.state.dilation().len()],
                d_input: Tensor4::zeros(c.state.weights().shape()).unwrap(),
            })
            .collect()
    }

    #[test]
    fn dilation_at_upper_bound_stays_projected() {
        let mut net = small_net();
        let mut state = MomentumState::new(&net);
        let mut grads = zero_grads(&net);
        for g in &mut grads {
            g.d_dilation.fill(-3.0);
        }
        let c = TrainConfig::default();
        for _ in 0..3 {
            sgd_step(&mut net, &grads, &mut state, 0.1, &c).unwrap();
        }
        for conv in net.convs() {
            if conv.learnable {
                assert!(conv.state.dilation().values().iter().all(|&d| d == 4.0));
            } else {
                assert!(conv.state.dilation().values().iter().all(|&d| d == 1.0));
            }
        }
    }

    #[test]
    fn decay_only_on_weights() {
        let mut net = small_net();
        for conv in net.convs_mut() {
            conv.state.bias_mut().fill(1.0);
        }
        let before = net.clone();
        let mut state = MomentumState::new(&net);
        let grads = zero_grads(&net);
        let c = TrainConfig {
            weight_decay: 0.1,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        sgd_step(&mut net, &grads, &mut state, 0.5, &c).unwrap();
        for (a, b) in net.convs().iter().zip(before.convs()) {
            assert_eq!(a.state.bias(), b.state.bias());
            assert_eq!(a.state.dilation(), b.state.dilation());
            for (x, y) in a.state.weights().data().iter().zip(b.state.weights().data()) {
                assert!((x - 0.95 * y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mismatched_gradients_rejected() {
        let mut net = small_net();
        let mut state = MomentumState::new(&net);
        let mut grads = zero_grads(&net);
        grads.pop();
        assert!(matches!(
            sgd_step(&mut net, &grads, &mut state, 0.1, &TrainConfig::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
            TrainConfig { power: 0.0, ..TrainConfig::default() },
            TrainConfig { max_iter: 0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
