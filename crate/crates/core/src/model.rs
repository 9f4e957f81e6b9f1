//! Encoder / latent transition / decoder models.
//!
//! Both the Koopman network and the fully connected baseline share this
//! shape; they differ only in the [`Transition`] applied in latent space.

use std::path::Path;

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::dataset::{EmbeddingLayout, Normalization};
use crate::error::{Error, Result};
use crate::net::{Activation, Mlp};

pub const CHECKPOINT_FORMAT: &str = "koopman-checkpoint/v1";

/// A differentiable map from one latent batch to the next.
pub trait Transition: Clone + Send + Sync {
    type Tape;

    /// Tag stored in checkpoints.
    const KIND: &'static str;

    fn latent_dim(&self) -> usize;
    fn forward(&self, y: &Array2<f64>) -> Result<(Array2<f64>, Self::Tape)>;
    /// Returns flat parameter gradients (ordering of [`params_into`]) and the
    /// gradient with respect to `y`.
    ///
    /// [`params_into`]: Transition::params_into
    fn backward(&self, tape: &Self::Tape, grad: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)>;
    fn params_into(&self, out: &mut Vec<f64>);
    fn set_params(&mut self, flat: &[f64]) -> usize;
    fn param_count(&self) -> usize;
    /// 1 for parameters under weight decay, 0 otherwise.
    fn decay_mask_into(&self, out: &mut Vec<f64>);
    fn meta(&self) -> serde_json::Value;
    fn from_meta(meta: &serde_json::Value, flat: &[f64]) -> Result<(Self, usize)>;

    fn advance(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(y)?.0)
    }
}

/// Object-safe view used by prediction and control.
pub trait DynamicsModel: Send + Sync {
    fn layout(&self) -> EmbeddingLayout;
    fn normalization(&self) -> &Normalization;
    fn latent_dim(&self) -> usize;
    /// Normalized embeddings to latents.
    fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>>;
    fn advance(&self, y: &Array2<f64>) -> Result<Array2<f64>>;
    /// Latents to normalized embeddings.
    fn decode(&self, y: &Array2<f64>) -> Result<Array2<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentModel<T> {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub transition: T,
    pub layout: EmbeddingLayout,
    pub normalization: Normalization,
    /// Training configuration echoed into checkpoints.
    pub config: serde_json::Value,
}

pub(crate) fn decay_mask_mlp(mlp: &Mlp, out: &mut Vec<f64>) {
    for l in &mlp.layers {
        out.extend(std::iter::repeat_n(1.0, l.weight.len()));
        out.extend(std::iter::repeat_n(0.0, l.bias.len()));
    }
}

impl<T: Transition> LatentModel<T> {
    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.param_count() + self.transition.param_count()
    }

    /// Encoder, decoder, then transition parameters.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.params_into(&mut out);
        self.decoder.params_into(&mut out);
        self.transition.params_into(&mut out);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut k = self.encoder.set_params(flat);
        k += self.decoder.set_params(&flat[k..]);
        self.transition.set_params(&flat[k..]);
    }

    pub fn decay_mask(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        decay_mask_mlp(&self.encoder, &mut out);
        decay_mask_mlp(&self.decoder, &mut out);
        self.transition.decay_mask_into(&mut out);
        out
    }

    pub fn kind(&self) -> &'static str {
        T::KIND
    }

    pub fn to_container(&self) -> Container {
        let net = |m: &Mlp| {
            serde_json::json!({
                "sizes": m.sizes(),
                "activations": m.activations(),
            })
        };
        let meta = serde_json::json!({
            "kind": T::KIND,
            "layout": self.layout,
            "normalization": self.normalization,
            "encoder": net(&self.encoder),
            "decoder": net(&self.decoder),
            "transition": self.transition.meta(),
            "init": "uniform-glorot",
            "config": self.config,
        });
        let params = self.params();
        let mut c = Container::new(CHECKPOINT_FORMAT, meta);
        c.push(
            "params",
            Array2::from_shape_vec((1, params.len()), params).unwrap(),
        );
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind = c.meta["kind"].as_str().unwrap_or_default();
        if kind != T::KIND {
            return Err(Error::Format {
                expected: T::KIND.to_string(),
                found: kind.to_string(),
            });
        }
        let flat: Vec<f64> = c.block("params")?.iter().copied().collect();
        let net = |key: &str| -> Result<(Vec<usize>, Vec<Activation>)> {
            let sizes = serde_json::from_value(c.meta[key]["sizes"].clone())?;
            let acts = serde_json::from_value(c.meta[key]["activations"].clone())?;
            Ok((sizes, acts))
        };
        let (es, ea) = net("encoder")?;
        let encoder = Mlp::from_params(&es, &ea, &flat)?;
        let mut k = encoder.param_count();
        let (ds, da) = net("decoder")?;
        let decoder = Mlp::from_params(&ds, &da, &flat[k..])?;
        k += decoder.param_count();
        let (transition, used) = T::from_meta(&c.meta["transition"], &flat[k..])?;
        if k + used != flat.len() {
            return Err(Error::shape("checkpoint parameters", k + used, flat.len()));
        }
        Ok(LatentModel {
            encoder,
            decoder,
            transition,
            layout: serde_json::from_value(c.meta["layout"].clone())?,
            normalization: serde_json::from_value(c.meta["normalization"].clone())?,
            config: c.meta["config"].clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path, CHECKPOINT_FORMAT)?)
    }
}

/// Reads only the model-kind tag of a checkpoint.
pub fn checkpoint_kind(path: &Path) -> Result<String> {
    let c = Container::read(path, CHECKPOINT_FORMAT)?;
    Ok(c.meta["kind"].as_str().unwrap_or_default().to_string())
}

impl<T: Transition> DynamicsModel for LatentModel<T> {
    fn layout(&self) -> EmbeddingLayout {
        self.layout
    }

    fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    fn latent_dim(&self) -> usize {
        self.transition.latent_dim()
    }

    fn encode(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.encoder.predict(x)
    }

    fn advance(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.transition.advance(y)
    }

    fn decode(&self, y: &Array2<f64>) -> Result<Array2<f64>> {
        self.decoder.predict(y)
    }
}

/// Open-loop prediction from one raw embedding: encode once, advance the
/// latent `n_steps` times, decode every latent. Returned embeddings are in
/// raw units.
pub fn predict_embedding(
    model: &dyn DynamicsModel,
    embedding: &[f64],
    n_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let layout = model.layout();
    if embedding.len() != layout.len() {
        return Err(Error::shape("embedding", layout.len(), embedding.len()));
    }
    let norm = model.normalization();
    let mut x = Array2::from_shape_vec((1, layout.len()), embedding.to_vec()).unwrap();
    norm.apply_row(x.row_mut(0));
    let mut y = model.encode(&x)?;
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        y = model.advance(&y)?;
        let mut dec = model.decode(&y)?;
        norm.invert_row(dec.row_mut(0));
        out.push(dec.row(0).to_vec());
    }
    Ok(out)
}

/// Normalizes a raw embedding batch for `model`.
pub fn normalize_batch(model: &dyn DynamicsModel, raw: &Array2<f64>) -> Array2<f64> {
    model.normalization().apply(raw)
}

/// Latent coordinates of pair `k` for every row.
pub fn pair_columns(y: &Array2<f64>, k: usize) -> (Array1<f64>, Array1<f64>) {
    (
        y.slice(s![.., 2 * k]).to_owned(),
        y.slice(s![.., 2 * k + 1]).to_owned(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Dkn,
    Fcn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dkn" => Some(ModelKind::Dkn),
            "fcn" => Some(ModelKind::Fcn),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Dkn => "dkn",
            ModelKind::Fcn => "fcn",
        }
    }
}
