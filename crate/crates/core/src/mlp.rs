//! Fully connected coordinate networks with analytic reverse mode.
//!
//! Parameters live in one flat buffer (per layer: row-major `out x in`
//! weights followed by the bias) so a single [`Adam`](crate::adam::Adam)
//! instance can drive them. Batched passes run on `B x width` matrices.

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// tanh approximation
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub final_layer_zero_init: bool,
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::InvalidConfig(
                "an MLP needs at least one hidden layer".into(),
            ));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::InvalidConfig("MLP widths must be at least 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSpan {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerSpan {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

/// Weights and biases of one network. Also used as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    spans: Vec<LayerSpan>,
    pub data: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(config: &MlpConfig) -> Self {
        let mut offset = 0;
        let spans = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let span = LayerSpan {
                    fan_in,
                    fan_out,
                    offset,
                };
                offset += fan_in * fan_out + fan_out;
                span
            })
            .collect();
        Self {
            spans,
            data: vec![0.0; offset],
        }
    }

    pub fn from_data(config: &MlpConfig, data: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(config);
        if data.len() != params.data.len() {
            return Err(Error::InvalidConfig(format!(
                "MLP parameter buffer holds {} values, config expects {}",
                data.len(),
                params.data.len()
            )));
        }
        params.data = data;
        Ok(params)
    }

    pub fn num_layers(&self) -> usize {
        self.spans.len()
    }

    /// `(fan_in, fan_out)` of layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.spans[l].fan_in, self.spans[l].fan_out)
    }

    /// Weight matrix of layer `l`, shape `fan_out x fan_in`.
    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let span = self.spans[l];
        ArrayView2::from_shape((span.fan_out, span.fan_in), &self.data[span.weight_range()])
            .expect("layer span matches its shape")
    }

    pub fn weight_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let span = self.spans[l];
        ArrayViewMut2::from_shape(
            (span.fan_out, span.fan_in),
            &mut self.data[span.weight_range()],
        )
        .expect("layer span matches its shape")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.data[self.spans[l].bias_range()])
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        let range = self.spans[l].bias_range();
        ArrayViewMut1::from(&mut self.data[range])
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }
}

/// Activations kept from a batched forward pass for the matching backward.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to each layer (`B x fan_in`).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer (`B x fan_out`).
    pre: Vec<Array2<f64>>,
}

#[derive(Clone, Debug)]
pub struct Mlp {
    config: MlpConfig,
    pub params: MlpParams,
}

impl Mlp {
    /// Random initialization.
    ///
    /// Hidden layers draw weights from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// the output layer from `U(-sqrt(3/fan_in), sqrt(3/fan_in))` (unit-variance
    /// preserving for a linear read-out). All biases start at zero. With
    /// `final_layer_zero_init` the output layer is exactly zero.
    pub fn init<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = MlpParams::zeros(&config);
        let last = params.num_layers() - 1;
        for l in 0..params.num_layers() {
            if l == last && config.final_layer_zero_init {
                continue;
            }
            let (fan_in, _) = params.layer_shape(l);
            let gain = if l == last { 3.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            for w in params.weight_mut(l).iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { config, params })
    }

    pub fn new(config: MlpConfig, params: MlpParams) -> Result<Self> {
        config.validate()?;
        if params.data.len() != config.param_count() || params.num_layers() != config.layer_dims().len() {
            return Err(Error::InvalidConfig(
                "MLP parameters do not match the configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    /// Batched forward pass over `B x input_dim` rows.
    pub fn forward_batch(&self, input: ArrayView2<f64>) -> (Array2<f64>, ForwardCache) {
        let last = self.params.num_layers() - 1;
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(last + 1),
            pre: Vec::with_capacity(last),
        };
        let mut x = input.to_owned();
        for l in 0..=last {
            let mut z = x.dot(&self.params.weight(l).t());
            z += &self.params.bias(l);
            cache.inputs.push(x);
            if l == last {
                return (z, cache);
            }
            let act = self.config.activation;
            x = z.mapv(|v| act.apply(v));
            cache.pre.push(z);
        }
        unreachable!("an MLP has at least one layer")
    }

    /// Batched backward pass. Parameter gradients are added into `grads`;
    /// the gradient with respect to the input rows is returned.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
        grads: &mut MlpParams,
    ) -> Array2<f64> {
        let last = self.params.num_layers() - 1;
        let act = self.config.activation;
        let mut g = upstream.to_owned();
        for l in (0..=last).rev() {
            if l < last {
                let pre = &cache.pre[l];
                g.zip_mut_with(pre, |gv, &z| *gv *= act.derivative(z));
            }
            let dw = g.t().dot(&cache.inputs[l]);
            grads.weight_mut(l).scaled_add(1.0, &dw);
            grads.bias_mut(l).scaled_add(1.0, &g.sum_axis(Axis(0)));
            g = g.dot(&self.params.weight(l));
        }
        g
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let (y, _) = self.forward_batch(x);
        y.into_raw_vec_and_offset().0
    }

    /// Single-sample forward and backward: returns the output, the parameter
    /// gradients of `<upstream, output>` and its input gradient.
    pub fn forward_backward(&self, input: &[f64], upstream: &[f64]) -> (Vec<f64>, MlpParams, Vec<f64>) {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let (y, cache) = self.forward_batch(x);
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let mut grads = MlpParams::zeros(&self.config);
        let gin = self.backward_batch(&cache, up, &mut grads);
        (
            y.into_raw_vec_and_offset().0,
            grads,
            gin.slice(s![0, ..]).to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(widths: &[usize], input: usize, output: usize) -> MlpConfig {
        MlpConfig {
            input_dim: input,
            hidden_widths: widths.to_vec(),
            output_dim: output,
            activation: Activation::Relu,
            final_layer_zero_init: false,
        }
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let mut c = config(&[16, 16], 4, 3);
        c.final_layer_zero_init = true;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mlp = Mlp::init(c, &mut rng).unwrap();
        for input in [[0.1, -3.0, 2.0, 7.0], [0.0; 4], [1e3, 1.0, -1.0, 0.5]] {
            assert_eq!(mlp.forward(&input), vec![0.0; 3]);
        }
    }

    #[test]
    fn init_is_seeded() {
        let c = config(&[8], 3, 2);
        let a = Mlp::init(c.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Mlp::init(c.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let other = Mlp::init(c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, other.params);
    }

    #[test]
    fn identity_linear_path() {
        // one hidden layer of width 2 with identity weights; ReLU passes
        // non-negative inputs through unchanged
        let c = config(&[2], 2, 2);
        let mut params = MlpParams::zeros(&c);
        for l in 0..2 {
            params.weight_mut(l)[[0, 0]] = 1.0;
            params.weight_mut(l)[[1, 1]] = 1.0;
        }
        let mlp = Mlp::new(c, params).unwrap();
        assert_eq!(mlp.forward(&[0.25, 3.5]), vec![0.25, 3.5]);
    }

    #[test]
    fn matches_hand_matrix_arithmetic() {
        let c = config(&[4], 2, 1);
        let mlp = Mlp::init(c, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let p = &mlp.params;
        let x = [0.3, -0.7];
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let z = p.weight(0)[[j, 0]] * x[0] + p.weight(0)[[j, 1]] * x[1] + p.bias(0)[j];
            *h = z.max(0.0);
        }
        let y: f64 = (0..4).map(|j| p.weight(1)[[0, j]] * hidden[j]).sum::<f64>() + p.bias(1)[0];
        assert!((mlp.forward(&x)[0] - y).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let c = config(&[8, 8], 4, 2);
        let mlp = Mlp::init(c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let (_, g, gin) = mlp.forward_backward(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0]);
        assert!(g.data.iter().all(|&v| v == 0.0));
        assert!(gin.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_gradient_is_transpose_product() {
        // positive weights and inputs keep the ReLU in its linear regime
        let c = config(&[3], 2, 2);
        let mut params = MlpParams::zeros(&c);
        let w0 = [[0.5, 1.0], [2.0, 0.25], [1.5, 0.75]];
        let w1 = [[1.0, 0.5, 2.0], [0.25, 3.0, 1.0]];
        for j in 0..3 {
            for i in 0..2 {
                params.weight_mut(0)[[j, i]] = w0[j][i];
                params.weight_mut(1)[[i, j]] = w1[i][j];
            }
        }
        let mlp = Mlp::new(c, params).unwrap();
        let up = [1.0, -2.0];
        let (_, _, gin) = mlp.forward_backward(&[0.3, 0.8], &up);
        for i in 0..2 {
            let expected: f64 = (0..3)
                .map(|j| w0[j][i] * (w1[0][j] * up[0] + w1[1][j] * up[1]))
                .sum();
            assert!((gin[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (Activation::Gelu.apply(x + h) - Activation::Gelu.apply(x - h)) / (2.0 * h);
            assert!((fd - Activation::Gelu.derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        assert!(config(&[], 2, 1).validate().is_err());
        assert!(config(&[0], 2, 1).validate().is_err());
        assert!(config(&[4], 0, 1).validate().is_err());
    }
}
