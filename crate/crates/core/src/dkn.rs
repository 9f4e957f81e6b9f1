//! Deep Koopman network.
//!
//! The latent vector is split into `K` complex-conjugate pairs. An auxiliary
//! network maps the latent to a growth rate `mu_k` and frequency `omega_k`
//! per pair, and each pair is advanced by the scaled rotation
//! `exp(mu dt) R(omega dt)`. The eigenvalues are re-evaluated at every step,
//! which lets a single pair represent a continuous spectrum.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataGenConfig, EmbeddingLayout, Normalization, Scenario};
use crate::error::{Error, Result};
use crate::model::{decay_mask_mlp, LatentModel, Transition};
use crate::net::{Activation, Mlp, Tape};
use crate::seed::rng_for;

pub use crate::training::{losses, train, LossBreakdown, LossWeights, TrainLogRow, TrainOutcome};

/// Continuous-time eigenvalue `mu ± i omega` of one latent pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEigenvalue {
    /// Growth (> 0) or decay (< 0) rate, 1/s.
    pub mu: f64,
    /// Oscillation frequency, rad/s.
    pub omega: f64,
}

/// `exp(mu dt) [[cos w dt, -sin w dt], [sin w dt, cos w dt]]`.
pub fn koopman_operator(eig: PairEigenvalue, dt: f64) -> [[f64; 2]; 2] {
    let r = (eig.mu * dt).exp();
    let (s, c) = (eig.omega * dt).sin_cos();
    [[r * c, -r * s], [r * s, r * c]]
}

/// What the auxiliary network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AuxInput {
    /// The full latent vector.
    #[default]
    Latent,
    /// The squared radius of each pair.
    Radius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DknConfig {
    pub n_pairs: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub aux_hidden: Vec<usize>,
    pub aux_activation: Activation,
    pub aux_input: AuxInput,
    pub dt: f64,
    pub loss: LossWeights,
    /// Latent steps chained in the linear and prediction losses.
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DknConfig {
    fn default() -> Self {
        DknConfig {
            n_pairs: 1,
            hidden: vec![80, 80],
            hidden_activation: Activation::Relu,
            aux_hidden: vec![32],
            aux_activation: Activation::Tanh,
            aux_input: AuxInput::Latent,
            dt: 0.02,
            loss: LossWeights::default(),
            horizon: 1,
            epochs: 200,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl DknConfig {
    /// Training settings matched to a dataset preset: one pair, the
    /// dataset's step, and a horizon no longer than the stored one. The
    /// pendulum scenarios feed pair radii to the auxiliary network.
    pub fn preset(scenario: Scenario) -> Self {
        let data = DataGenConfig::preset(scenario);
        let (aux_input, width) = match scenario {
            Scenario::Rigid | Scenario::RigidPd => (AuxInput::Radius, 80),
            Scenario::Soft => (AuxInput::Latent, 128),
        };
        DknConfig {
            dt: data.dt,
            horizon: data.horizon,
            aux_input,
            hidden: vec![width, width],
            ..Default::default()
        }
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.n_pairs
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_pairs < 1 {
            out.push("n_pairs must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            out.push("dt must be > 0".into());
        }
        let w = &self.loss;
        if [w.recon, w.lin, w.pred, w.l2].iter().any(|v| !(*v >= 0.0)) {
            out.push("loss weights must be >= 0".into());
        }
        if self.horizon < 1 {
            out.push("horizon must be >= 1".into());
        }
        if self.batch_size < 1 {
            out.push("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            out.push("learning_rate must be > 0".into());
        }
        if self.hidden.iter().chain(&self.aux_hidden).any(|w| *w == 0) {
            out.push("hidden widths must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p))
        }
    }

    pub(crate) fn build_autoencoder(
        &self,
        layout: EmbeddingLayout,
        rng: &mut impl Rng,
    ) -> (Mlp, Mlp) {
        let mut enc_sizes = vec![layout.len()];
        enc_sizes.extend(&self.hidden);
        enc_sizes.push(self.latent_dim());
        let dec_sizes: Vec<usize> = enc_sizes.iter().rev().copied().collect();
        let encoder = Mlp::new(
            &enc_sizes,
            self.hidden_activation,
            Activation::Identity,
            rng,
        );
        let decoder = Mlp::new(
            &dec_sizes,
            self.hidden_activation,
            Activation::Identity,
            rng,
        );
        (encoder, decoder)
    }
}

/// Auxiliary eigenvalue network plus the block-diagonal latent operator.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanTransition {
    pub auxiliary: Mlp,
    pub n_pairs: usize,
    pub dt: f64,
    pub aux_input: AuxInput,
}

pub struct KoopmanTape {
    y: Array2<f64>,
    eig: Array2<f64>,
    out: Array2<f64>,
    aux: Tape,
}

impl KoopmanTransition {
    pub fn new(cfg: &DknConfig, rng: &mut impl Rng) -> Self {
        let k = cfg.n_pairs;
        let n_in = match cfg.aux_input {
            AuxInput::Latent => 2 * k,
            AuxInput::Radius => k,
        };
        let mut sizes = vec![n_in];
        sizes.extend(&cfg.aux_hidden);
        sizes.push(2 * k);
        KoopmanTransition {
            auxiliary: Mlp::new(&sizes, cfg.aux_activation, Activation::Identity, rng),
            n_pairs: k,
            dt: cfg.dt,
            aux_input: cfg.aux_input,
        }
    }

    /// Pins the auxiliary output to `eigs` everywhere by zeroing the last
    /// layer's weights and writing the eigenvalues into its bias.
    pub fn freeze(&mut self, eigs: &[PairEigenvalue]) {
        assert_eq!(eigs.len(), self.n_pairs);
        let last = self.auxiliary.layers.last_mut().unwrap();
        last.weight.fill(0.0);
        for (k, e) in eigs.iter().enumerate() {
            last.bias[2 * k] = e.mu;
            last.bias[2 * k + 1] = e.omega;
        }
    }

    fn aux_features(&self, y: &Array2<f64>) -> Array2<f64> {
        match self.aux_input {
            AuxInput::Latent => y.clone(),
            AuxInput::Radius => Array2::from_shape_fn((y.nrows(), self.n_pairs), |(r, k)| {
                let a = y[[r, 2 * k]];
                let b = y[[r, 2 * k + 1]];
                a * a + b * b
            }),
        }
    }

    /// Rows of `(mu_1, omega_1, ..., mu_K, omega_K)` evaluated at `y`.
    pub fn eigenvalues(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(y)?;
        self.auxiliary.predict(&self.aux_features(y))
    }

    fn check(&self, y: &Array2<f64>) -> Result<()> {
        if y.ncols() != 2 * self.n_pairs {
            return Err(Error::shape("latent", 2 * self.n_pairs, y.ncols()));
        }
        Ok(())
    }

    fn rotate(&self, y: &Array2<f64>, eig: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(y.raw_dim());
        for r in 0..y.nrows() {
            for k in 0..self.n_pairs {
                let m = koopman_operator(
                    PairEigenvalue {
                        mu: eig[[r, 2 * k]],
                        omega: eig[[r, 2 * k + 1]],
                    },
                    self.dt,
                );
                let a = y[[r, 2 * k]];
                let b = y[[r, 2 * k + 1]];
                out[[r, 2 * k]] = m[0][0] * a + m[0][1] * b;
                out[[r, 2 * k + 1]] = m[1][0] * a + m[1][1] * b;
            }
        }
        out
    }
}

impl Transition for KoopmanTransition {
    type Tape = KoopmanTape;
    const KIND: &'static str = "dkn";

    fn latent_dim(&self) -> usize {
        2 * self.n_pairs
    }

    fn forward(&self, y: &Array2<f64>) -> Result<(Array2<f64>, KoopmanTape)> {
        self.check(y)?;
        let (eig, aux) = self.auxiliary.forward(&self.aux_features(y))?;
        let out = self.rotate(y, &eig);
        Ok((
            out.clone(),
            KoopmanTape {
                y: y.clone(),
                eig,
                out,
                aux,
            },
        ))
    }

    fn advance(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        let eig = self.eigenvalues(y)?;
        Ok(self.rotate(y, &eig))
    }

    fn backward(&self, tape: &KoopmanTape, grad: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let KoopmanTape { y, eig, out, aux } = tape;
        if grad.raw_dim() != y.raw_dim() {
            return Err(Error::shape("latent gradient", y.ncols(), grad.ncols()));
        }
        let dt = self.dt;
        let mut gy = Array2::zeros(y.raw_dim());
        let mut geig = Array2::zeros(eig.raw_dim());
        for r in 0..y.nrows() {
            for k in 0..self.n_pairs {
                let (ia, ib) = (2 * k, 2 * k + 1);
                let m = koopman_operator(
                    PairEigenvalue {
                        mu: eig[[r, ia]],
                        omega: eig[[r, ib]],
                    },
                    dt,
                );
                let (ga, gb) = (grad[[r, ia]], grad[[r, ib]]);
                let (oa, ob) = (out[[r, ia]], out[[r, ib]]);
                // out = M y, so dL/dy = M^T g
                gy[[r, ia]] = m[0][0] * ga + m[1][0] * gb;
                gy[[r, ib]] = m[0][1] * ga + m[1][1] * gb;
                // d out / d mu = dt out; d out / d omega = dt J out with J the
                // quarter rotation
                geig[[r, ia]] = dt * (ga * oa + gb * ob);
                geig[[r, ib]] = dt * (-ga * ob + gb * oa);
            }
        }
        let (aux_grads, gfeat) = self.auxiliary.backward(aux, &geig)?;
        match self.aux_input {
            AuxInput::Latent => gy += &gfeat,
            AuxInput::Radius => {
                for r in 0..y.nrows() {
                    for k in 0..self.n_pairs {
                        let g = gfeat[[r, k]];
                        gy[[r, 2 * k]] += 2.0 * y[[r, 2 * k]] * g;
                        gy[[r, 2 * k + 1]] += 2.0 * y[[r, 2 * k + 1]] * g;
                    }
                }
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        aux_grads.flatten_into(&mut flat);
        Ok((flat, gy))
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        self.auxiliary.params_into(out);
    }

    fn set_params(&mut self, flat: &[f64]) -> usize {
        self.auxiliary.set_params(flat)
    }

    fn param_count(&self) -> usize {
        self.auxiliary.param_count()
    }

    fn decay_mask_into(&self, out: &mut Vec<f64>) {
        decay_mask_mlp(&self.auxiliary, out);
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "n_pairs": self.n_pairs,
            "dt": self.dt,
            "aux_input": self.aux_input,
            "sizes": self.auxiliary.sizes(),
            "activations": self.auxiliary.activations(),
        })
    }

    fn from_meta(meta: &serde_json::Value, flat: &[f64]) -> Result<(Self, usize)> {
        let sizes: Vec<usize> = serde_json::from_value(meta["sizes"].clone())?;
        let acts: Vec<Activation> = serde_json::from_value(meta["activations"].clone())?;
        let auxiliary = Mlp::from_params(&sizes, &acts, flat)?;
        let used = auxiliary.param_count();
        Ok((
            KoopmanTransition {
                auxiliary,
                n_pairs: serde_json::from_value(meta["n_pairs"].clone())?,
                dt: serde_json::from_value(meta["dt"].clone())?,
                aux_input: serde_json::from_value(meta["aux_input"].clone())?,
            },
            used,
        ))
    }
}

pub type DknModel = LatentModel<KoopmanTransition>;

impl DknModel {
    /// Freshly initialized network; weights come from the `init` stream of
    /// `cfg.seed`.
    pub fn init(
        cfg: &DknConfig,
        layout: EmbeddingLayout,
        normalization: Normalization,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, "init", 0);
        let (encoder, decoder) = cfg.build_autoencoder(layout, &mut rng);
        let transition = KoopmanTransition::new(cfg, &mut rng);
        Ok(LatentModel {
            encoder,
            decoder,
            transition,
            layout,
            normalization,
            config: serde_json::to_value(cfg)?,
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.transition.n_pairs
    }

    pub fn eigenvalues(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.transition.eigenvalues(y)
    }
}

/// Advances every pair of every row by its own state-dependent block.
pub fn latent_step(model: &DknModel, y: &Array2<f64>) -> Result<Array2<f64>> {
    model.transition.advance(y)
}

/// Per-pair Euclidean norms, `(rows, K)`.
pub fn pair_magnitudes(y: &Array2<f64>) -> Array2<f64> {
    let k = y.ncols() / 2;
    Array2::from_shape_fn((y.nrows(), k), |(r, j)| {
        y[[r, 2 * j]].hypot(y[[r, 2 * j + 1]])
    })
}

/// Mean and population standard deviation of each auxiliary output column
/// over the rows of `eig`.
pub fn eigenvalue_spread(eig: &Array2<f64>) -> Vec<(f64, f64)> {
    if eig.nrows() == 0 {
        return vec![(f64::NAN, f64::NAN); eig.ncols()];
    }
    let mean = eig.mean_axis(Axis(0)).unwrap();
    let std = eig.std_axis(Axis(0), 0.0);
    mean.iter().zip(std.iter()).map(|(m, s)| (*m, *s)).collect()
}
