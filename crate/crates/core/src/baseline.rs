//! Fully connected comparison model: the Koopman network's encoder and
//! decoder with an unconstrained one-hidden-layer ReLU map between latents.

use ndarray::{Array1, Array2};

use crate::dataset::{EmbeddingLayout, Normalization, SnapshotDataset};
use crate::dkn::DknConfig;
use crate::error::{Error, Result};
use crate::model::{decay_mask_mlp, predict_embedding, LatentModel, Transition};
use crate::net::{Activation, Layer, Mlp, Tape};
use crate::seed::rng_for;
use crate::training::{train_loop, LoopSettings, TrainOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct InnerTransition {
    pub inner: Mlp,
}

impl InnerTransition {
    /// `latent -> 2K (relu) -> latent`.
    pub fn new(latent_dim: usize, rng: &mut impl rand::Rng) -> Self {
        InnerTransition {
            inner: Mlp::new(
                &[latent_dim, latent_dim, latent_dim],
                Activation::Relu,
                Activation::Identity,
                rng,
            ),
        }
    }

    /// Exact identity for inputs above `-offset` in every coordinate: the
    /// hidden layer adds `offset`, the output layer removes it.
    pub fn identity(latent_dim: usize, offset: f64) -> Self {
        InnerTransition {
            inner: Mlp {
                layers: vec![
                    Layer {
                        weight: Array2::eye(latent_dim),
                        bias: Array1::from_elem(latent_dim, offset),
                        activation: Activation::Relu,
                    },
                    Layer {
                        weight: Array2::eye(latent_dim),
                        bias: Array1::from_elem(latent_dim, -offset),
                        activation: Activation::Identity,
                    },
                ],
            },
        }
    }
}

impl Transition for InnerTransition {
    type Tape = Tape;
    const KIND: &'static str = "fcn";

    fn latent_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn forward(&self, y: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
        self.inner.forward(y)
    }

    fn advance(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.inner.predict(y)
    }

    fn backward(&self, tape: &Tape, grad: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let (g, gy) = self.inner.backward(tape, grad)?;
        let mut flat = Vec::with_capacity(self.inner.param_count());
        g.flatten_into(&mut flat);
        Ok((flat, gy))
    }

    fn params_into(&self, out: &mut Vec<f64>) {
        self.inner.params_into(out);
    }

    fn set_params(&mut self, flat: &[f64]) -> usize {
        self.inner.set_params(flat)
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn decay_mask_into(&self, out: &mut Vec<f64>) {
        decay_mask_mlp(&self.inner, out);
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({
            "sizes": self.inner.sizes(),
            "activations": self.inner.activations(),
        })
    }

    fn from_meta(meta: &serde_json::Value, flat: &[f64]) -> Result<(Self, usize)> {
        let sizes: Vec<usize> = serde_json::from_value(meta["sizes"].clone())?;
        let acts: Vec<Activation> = serde_json::from_value(meta["activations"].clone())?;
        let inner = Mlp::from_params(&sizes, &acts, flat)?;
        let used = inner.param_count();
        Ok((InnerTransition { inner }, used))
    }
}

pub type FcnModel = LatentModel<InnerTransition>;

impl FcnModel {
    /// Same encoder and decoder widths as the Koopman network built from
    /// `cfg`; the auxiliary settings are ignored.
    pub fn init(
        cfg: &DknConfig,
        layout: EmbeddingLayout,
        normalization: Normalization,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, "init", 0);
        let (encoder, decoder) = cfg.build_autoencoder(layout, &mut rng);
        let transition = InnerTransition::new(cfg.latent_dim(), &mut rng);
        Ok(LatentModel {
            encoder,
            decoder,
            transition,
            layout,
            normalization,
            config: serde_json::to_value(cfg)?,
        })
    }
}

pub fn fcn_train(
    cfg: &DknConfig,
    train: &SnapshotDataset,
    validation: &SnapshotDataset,
) -> Result<TrainOutcome<InnerTransition>> {
    let norm = train
        .normalization
        .clone()
        .ok_or_else(|| Error::InvalidConfig(vec!["training split is not normalized".into()]))?;
    let model = FcnModel::init(cfg, train.layout, norm)?;
    train_loop(model, &LoopSettings::from(cfg), train, validation)
}

pub fn fcn_predict(model: &FcnModel, embedding: &[f64], n_steps: usize) -> Result<Vec<Vec<f64>>> {
    predict_embedding(model, embedding, n_steps)
}
