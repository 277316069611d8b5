use serde::{Deserialize, Serialize};

use super::model::{Network, ParamGrads};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Learning rate after applying every milestone reached by `epoch`.
/// Milestones are `(epoch, factor)` with 0-based epochs.
pub fn lr_at(base: f64, milestones: &[(usize, f64)], epoch: usize) -> f64 {
    milestones
        .iter()
        .filter(|(at, _)| epoch >= *at)
        .fold(base, |lr, (_, factor)| lr * factor)
}

/// SGD with heavy-ball momentum; weight decay is added to the gradient.
///
/// `v = momentum * v + (g + weight_decay * w)`, then `w -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, net: &Network) -> Self {
        Self {
            cfg,
            velocity: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGrads, lr: f64) {
        let SgdConfig { momentum, weight_decay, .. } = self.cfg;
        for ((param, grad), vel) in net.params_mut().into_iter().zip(&grads.0).zip(&mut self.velocity) {
            for ((w, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                *v = momentum * *v + (g + weight_decay * *w);
                *w -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::train::model::ModelSpec;

    #[test]
    fn milestones_compound() {
        let m = [(75, 0.1), (130, 0.1), (180, 0.1)];
        assert_eq!(lr_at(0.1, &m, 0), 0.1);
        assert_eq!(lr_at(0.1, &m, 74), 0.1);
        assert!((lr_at(0.1, &m, 75) - 0.01).abs() < 1e-16);
        assert!((lr_at(0.1, &m, 199) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn momentum_update_by_hand() {
        let spec = ModelSpec::conv_stack([1, 4, 4], 2, &[1], &[]).unwrap();
        let mut net = Network::new(spec, &mut RngStream::new(0, 0)).unwrap();
        let w0: Vec<f64> = net.params().iter().flat_map(|p| p.to_vec()).collect();
        let grads = ParamGrads(net.params().iter().map(|p| vec![1.0; p.len()]).collect());
        let cfg = SgdConfig { lr: 0.5, momentum: 0.9, weight_decay: 0.01 };
        let mut opt = Sgd::new(cfg, &net);
        opt.step(&mut net, &grads, 0.5);
        opt.step(&mut net, &grads, 0.5);
        let w2: Vec<f64> = net.params().iter().flat_map(|p| p.to_vec()).collect();
        for (a, b) in w0.iter().zip(&w2) {
            let v1 = 1.0 + 0.01 * a;
            let w1 = a - 0.5 * v1;
            let v2 = 0.9 * v1 + 1.0 + 0.01 * w1;
            assert!((w1 - 0.5 * v2 - b).abs() < 1e-15);
        }
    }
}
