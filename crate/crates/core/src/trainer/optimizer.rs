//! Plain SGD with momentum over the flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::model::Params;

/// Momentum buffer plus the update rule v ← momentum·v + g, p ← p − lr·v.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    velocity: Vec<f64>,
    momentum: f64,
}

impl Optimizer {
    pub fn new(param_count: usize, momentum: f64) -> Optimizer {
        Optimizer {
            velocity: vec![0.0; param_count],
            momentum,
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        let g = grads.to_flat();
        assert_eq!(g.len(), self.velocity.len(), "gradient size mismatch");
        let mut k = 0;
        for slot in params.flat_mut() {
            for p in slot {
                let v = self.momentum * self.velocity[k] + g[k];
                self.velocity[k] = v;
                *p -= lr * v;
                k += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ArchDescriptor, SegModel};

    fn tiny_params() -> Params {
        let arch = ArchDescriptor {
            in_channels: 3,
            widths: vec![2],
            strides: vec![1],
            kernel: 1,
            feature_dim: 2,
            num_classes: 2,
        };
        SegModel::init(arch, 3).unwrap().params
    }

    #[test]
    fn zero_momentum_is_vanilla_gradient_descent() {
        let mut params = tiny_params();
        let before = params.to_flat();
        let mut grads = params.clone();
        grads.scale_in_place(0.0);
        grads.add_scaled(&params, 1.0); // grads = params, an arbitrary direction
        let g = grads.to_flat();
        let mut opt = Optimizer::new(before.len(), 0.0);
        opt.step(&mut params, &grads, 0.1);
        for ((p, b), gr) in params.to_flat().iter().zip(&before).zip(&g) {
            assert_eq!(*p, b - 0.1 * gr);
        }
    }

    #[test]
    fn momentum_accumulates_the_closed_form() {
        // Constant gradient 1 on every coordinate: after k steps the velocity
        // is the geometric sum 1 + m + ... + m^(k-1).
        let mut params = tiny_params();
        let n = params.param_count();
        let mut grads = params.clone();
        grads.scale_in_place(0.0);
        for slot in grads.flat_mut() {
            for g in slot {
                *g = 1.0;
            }
        }
        let m: f64 = 0.9;
        let mut opt = Optimizer::new(n, m);
        for k in 1..=5u32 {
            opt.step(&mut params, &grads, 0.01);
            let expect = (1.0 - m.powi(k as i32)) / (1.0 - m);
            for v in opt.velocity() {
                assert!((v - expect).abs() < 1e-12, "k={k}: {v} vs {expect}");
            }
        }
    }

    #[test]
    fn descends_a_quadratic_monotonically() {
        // f(p) = sum p_i^2 / 2, gradient p. The rate must sit below the
        // critical damping bound (1 - sqrt(momentum))^2, else the heavy-ball
        // iteration spirals instead of descending.
        let mut params = tiny_params();
        let mut opt = Optimizer::new(params.param_count(), 0.9);
        let f = |p: &Params| p.to_flat().iter().map(|v| v * v / 2.0).sum::<f64>();
        let mut last = f(&params);
        assert!(last > 0.0);
        for _ in 0..100 {
            let grads = params.clone();
            opt.step(&mut params, &grads, 0.001);
            let now = f(&params);
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }
}
