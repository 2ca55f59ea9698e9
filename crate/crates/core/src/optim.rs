//! Adaptive-moment gradient descent.

use serde::{Deserialize, Serialize};

use crate::tensor::{Grads, ParamId, Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one parameter set. Individual tensors may use their own
/// step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    lr_override: Vec<Option<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<T: Real>(params: &Params<T>, config: AdamConfig) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.tensor.len()])
                .collect()
        };
        Adam {
            config,
            lr_override: vec![None; params.len()],
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn set_lr(&mut self, id: ParamId, lr: f64) {
        self.lr_override[id.0] = Some(lr);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut Params<T>, grads: &Grads) {
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, g) in grads.values.iter().enumerate() {
            let lr = self.lr_override[i].unwrap_or(c.lr);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = params.get_mut(ParamId(i)).data_mut();
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let update = lr * (m[j] / bias1) / ((v[j] / bias2).sqrt() + c.eps);
                if update != 0.0 {
                    data[j] = T::from_f64(data[j].to_f64() - update);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tape};
    use rand::SeedableRng;

    #[test]
    fn minimizes_a_quadratic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p: Params<f64> = Params::new();
        let w = p.add("w", &[1, 3], Init::FanIn(1), &mut rng);
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.05));
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::new(&p);
                let wv = tape.param(w);
                let target = tape.input_f64(1, 3, &[1.0, -2.0, 0.5]);
                let d = tape.sub(wv, target);
                let sq = tape.mul(d, d);
                let loss = tape.sum(sq);
                tape.backward(loss).params
            };
            opt.step(&mut p, &grads);
        }
        for (a, b) in p.get(w).data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b).abs() < 1e-2, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut p: Params<f32> = Params::new();
        p.add("w", &[2, 2], Init::FanIn(2), &mut rng);
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::with_lr(0.1));
        let zeros = Grads::zeros_like(&p);
        opt.step(&mut p, &zeros);
        assert_eq!(p, before);
    }
}
