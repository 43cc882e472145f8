use serde::{Deserialize, Serialize};

/// Adam with bias correction over a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[&[f64]]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(lr, &sizes)
    }

    /// One update of every tensor; `grads[k]` pairs with `params[k]`.
    pub fn update<G: AsRef<[f64]>>(&mut self, params: &mut [&mut [f64]], grads: &[G]) {
        assert_eq!(params.len(), self.m.len(), "adam: tensor count mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient count mismatch");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.as_ref();
            assert_eq!(p.len(), g.len(), "adam: tensor {k} length mismatch");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Convenience for a single tensor.
    pub fn update_one(&mut self, param: &mut [f64], grad: &[f64]) {
        self.update(&mut [param], &[grad]);
    }
}
