use serde::{Deserialize, Serialize};

use super::{Gradients, Network, Scalar};

/// Adam with bias correction. Defaults are β = (0.9, 0.999), ε = 1e-8.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step<T: Scalar>(&mut self, net: &mut Network<T>, grads: &Gradients<T>, lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in net
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i].f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p[i] = T::of(p[i].f64() - update);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    #[test]
    fn first_step_moves_each_param_by_lr_against_gradient_sign() {
        let layer = Layer::Dense {
            inputs: 2,
            outputs: 1,
            weight: vec![1.0f64, -1.0],
            bias: vec![0.0],
        };
        let mut net = Network::new(vec![2], vec![layer]).unwrap();
        let grads = vec![vec![0.5, -3.0], vec![0.0]];
        let mut opt = Adam::default();
        opt.step(&mut net, &grads, 0.01);
        let p = net.params();
        assert!((p[0][0] - 0.99).abs() < 1e-6);
        assert!((p[0][1] + 0.99).abs() < 1e-6);
        assert_eq!(p[1][0], 0.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let layer = Layer::Dense {
            inputs: 1,
            outputs: 1,
            weight: vec![5.0f64],
            bias: vec![-3.0],
        };
        let mut net = Network::new(vec![1], vec![layer]).unwrap();
        let mut opt = Adam::default();
        for _ in 0..2000 {
            let g: Vec<Vec<f64>> = net.params().iter().map(|p| vec![2.0 * p[0]]).collect();
            opt.step(&mut net, &g, 0.05);
        }
        assert!(net.params().iter().all(|p| p[0].abs() < 1e-2));
    }
}
