//! Dense feed-forward networks with hand-written reverse mode and Adam.
//!
//! Batches are row-major: one sample per row.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the layer
    /// output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(output, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(output, |g, &o| *g *= 1.0 - o * o),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(n_out, n_in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn n_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn n_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Forward activations cached for one batch.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }

    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("non-empty network")
    }
}

/// Gradients with the same structure as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            weights: mlp
                .layers
                .iter()
                .map(|l| Array2::zeros(l.weight.raw_dim()))
                .collect(),
            biases: mlp
                .layers
                .iter()
                .map(|l| Array1::zeros(l.bias.len()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    /// Same ordering as [`Mlp::params`].
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
    }
}

impl Mlp {
    /// Builds a network with layer widths `sizes` (input first). Weights are
    /// drawn uniformly from `±sqrt(6 / (n_in + n_out))`, biases start at 0.
    pub fn new(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            sizes.len() >= 2,
            "an mlp needs at least input and output sizes"
        );
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (n_in, n_out) = (sizes[i], sizes[i + 1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_fn((n_out, n_in), |_| {
                        rng.random_range(-limit..=limit)
                    }),
                    bias: Array1::zeros(n_out),
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Layer::n_out));
        s
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    /// `Σ (n_in + 1) n_out` over layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| (l.n_in() + 1) * l.n_out()).sum()
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    fn check_input(&self, batch: &Array2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::shape("mlp input", self.input_dim(), batch.ncols()));
        }
        Ok(())
    }

    /// Evaluates without recording a tape.
    pub fn predict(&self, batch: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        for l in &self.layers {
            let mut y = x.dot(&l.weight.t());
            y += &l.bias;
            l.activation.apply(&mut y);
            x = y;
        }
        Ok(x)
    }

    pub fn forward(&self, batch: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for l in &self.layers {
            let mut y = x.dot(&l.weight.t());
            y += &l.bias;
            l.activation.apply(&mut y);
            inputs.push(x);
            x = y.clone();
            outputs.push(y);
        }
        Ok((x, Tape { inputs, outputs }))
    }

    /// Reverse pass. Returns parameter gradients and the gradient with
    /// respect to the batch input.
    pub fn backward(
        &self,
        tape: &Tape,
        output_grad: &Array2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if tape.inputs.len() != self.layers.len() {
            return Err(Error::shape(
                "tape depth",
                self.layers.len(),
                tape.inputs.len(),
            ));
        }
        let out = tape.output();
        if output_grad.raw_dim() != out.raw_dim() {
            return Err(Error::shape(
                "output gradient",
                format!("{:?}", out.shape()),
                format!("{:?}", output_grad.shape()),
            ));
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        let mut g = output_grad.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            l.activation.backprop(&tape.outputs[i], &mut g);
            weights.push(g.t().dot(&tape.inputs[i]));
            biases.push(g.sum_axis(Axis(0)));
            g = g.dot(&l.weight);
        }
        weights.reverse();
        biases.reverse();
        Ok((MlpGrads { weights, biases }, g))
    }

    /// Flat parameter vector: per layer, row-major weights then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.params_into(&mut out);
        out
    }

    pub fn params_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    /// Reads parameters from the front of `flat`; returns how many were used.
    pub fn set_params(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            for w in l.weight.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in l.bias.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
        k
    }

    /// Builds a network of the given shape with parameters read from `flat`.
    pub fn from_params(sizes: &[usize], activations: &[Activation], flat: &[f64]) -> Result<Self> {
        if activations.len() + 1 != sizes.len() {
            return Err(Error::shape(
                "mlp activations",
                sizes.len() - 1,
                activations.len(),
            ));
        }
        let mut mlp = Mlp {
            layers: (0..activations.len())
                .map(|i| Layer {
                    weight: Array2::zeros((sizes[i + 1], sizes[i])),
                    bias: Array1::zeros(sizes[i + 1]),
                    activation: activations[i],
                })
                .collect(),
        };
        if flat.len() < mlp.param_count() {
            return Err(Error::shape(
                "mlp parameters",
                mlp.param_count(),
                flat.len(),
            ));
        }
        mlp.set_params(flat);
        Ok(mlp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n_params: usize, config: AdamConfig) -> Self {
        OptimizerState {
            config,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A gradient containing a non-finite value
/// leaves both the parameters and the moments untouched.
pub fn opt_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape("optimizer", params.len(), grads.len()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient; update skipped".into(),
        });
    }
    state.step += 1;
    let AdamConfig {
        learning_rate: lr,
        beta1: b1,
        beta2: b2,
        epsilon: eps,
    } = state.config;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = b1 * state.first[i] + (1.0 - b1) * g;
        state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g;
        let m = state.first[i] / c1;
        let v = state.second[i] / c2;
        params[i] -= lr * m / (v.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_passes_through() {
        let mlp = Mlp {
            layers: vec![Layer {
                weight: Array2::eye(3),
                bias: Array1::zeros(3),
                activation: Activation::Identity,
            }],
        };
        let x = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        assert_eq!(mlp.predict(&x).unwrap(), x);
        assert!(mlp.predict(&array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn relu_clips_negative() {
        let mlp = Mlp {
            layers: vec![Layer {
                weight: array![[1.0]],
                bias: array![0.0],
                activation: Activation::Relu,
            }],
        };
        assert_eq!(
            mlp.predict(&array![[-1.0], [2.0]]).unwrap(),
            array![[0.0], [2.0]]
        );
    }

    #[test]
    fn scalar_chain_gradient() {
        let mlp = Mlp {
            layers: vec![Layer {
                weight: array![[0.7]],
                bias: array![0.0],
                activation: Activation::Identity,
            }],
        };
        let (_, tape) = mlp.forward(&array![[3.0]]).unwrap();
        let (g, gx) = mlp.backward(&tape, &array![[2.0]]).unwrap();
        assert_eq!(g.weights[0], array![[6.0]]);
        assert_eq!(g.biases[0], array![2.0]);
        assert!((gx[[0, 0]] - 1.4).abs() < 1e-15);
        let (g, gx) = mlp.backward(&tape, &array![[0.0]]).unwrap();
        assert!(g.weights[0]
            .iter()
            .chain(g.biases[0].iter())
            .all(|v| *v == 0.0));
        assert_eq!(gx[[0, 0]], 0.0);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let (_, tape) = mlp.forward(&Array2::zeros((4, 2))).unwrap();
        assert!(mlp.backward(&tape, &Array2::zeros((5, 1))).is_err());
    }

    #[test]
    fn param_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(
            &[150, 80, 80, 2],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        );
        assert_eq!(mlp.param_count(), 151 * 80 + 81 * 80 + 81 * 2);
        assert_eq!(mlp.params().len(), mlp.param_count());
        let rebuilt = Mlp::from_params(&mlp.sizes(), &mlp.activations(), &mlp.params()).unwrap();
        assert_eq!(rebuilt, mlp);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut st = OptimizerState::new(2, AdamConfig::default());
        opt_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        for g in [3.0, -0.01, 250.0] {
            let mut p = vec![0.0];
            let mut st = OptimizerState::new(1, AdamConfig::default());
            opt_step(&mut p, &[g], &mut st).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
            assert!((p[0] + 1e-3 * f64::signum(g)).abs() < 1e-9, "{}", p[0]);
        }
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        let mut x = vec![1.0];
        let mut st = OptimizerState::new(
            1,
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let g = [2.0 * x[0]];
            opt_step(&mut x, &g, &mut st).unwrap();
        }
        assert!(x[0].abs() <= 1e-2, "{}", x[0]);
    }

    #[test]
    fn adam_skips_non_finite() {
        let mut p = vec![1.0];
        let mut st = OptimizerState::new(1, AdamConfig::default());
        assert!(opt_step(&mut p, &[f64::NAN], &mut st).is_err());
        assert_eq!(p, vec![1.0]);
        assert_eq!(st.step, 0);
    }
}
