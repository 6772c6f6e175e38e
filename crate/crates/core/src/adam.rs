use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a set of flat parameter blocks.
///
/// Each block registered at construction keeps its own moment buffers; the
/// step counter is shared.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update of every block. `blocks[k]` pairs parameters with their
    /// gradients and must match the size registered for block `k`.
    pub fn step(&mut self, blocks: &mut [(&mut [f64], &[f64])]) {
        assert_eq!(blocks.len(), self.m.len(), "block count changed");
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, (params, grads)) in blocks.iter_mut().enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            assert_eq!(params.len(), m.len(), "block {k} size changed");
            assert_eq!(grads.len(), m.len(), "gradient block {k} size mismatch");
            for i in 0..m.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn moments(&self, block: usize) -> (&[f64], &[f64]) {
        (&self.m[block], &self.v[block])
    }
}
