//! Loss functions and the minibatch training loop shared by every
//! [`LatentModel`].
//!
//! For a batch of windows `x_0` and their successors `x_1..x_S`:
//!
//! * reconstruction: `x_0` against `dec(enc(x_0))`,
//! * linear dynamics: `enc(x_s)` against the latent chained `s` steps from
//!   `enc(x_0)`,
//! * prediction: `x_s` against the decoded chained latent.
//!
//! Squared errors are averaged over rows and channels; control channels are
//! excluded from the reconstruction and prediction terms. Successor windows
//! carry their recorded controls, so targets are teacher forced.

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::SnapshotDataset;
use crate::error::{Error, Result};
use crate::model::{LatentModel, Transition};
use crate::net::{opt_step, AdamConfig, OptimizerState};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub lin: f64,
    pub pred: f64,
    pub l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            lin: 1.0,
            pred: 1.0,
            l2: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub lin: f64,
    pub pred: f64,
    /// Sum of squared weights, before weighting.
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
    }
}

struct Forward<T: Transition> {
    enc_tape: crate::net::Tape,
    dec_tape: crate::net::Tape,
    trans_tapes: Vec<T::Tape>,
    /// `enc(x_s)` for every shift, stacked.
    enc_out: Array2<f64>,
    /// Chained latents `z_1..z_S`.
    chain: Vec<Array2<f64>>,
    dec_out: Array2<f64>,
}

fn masked_sq(diff: &Array2<f64>, mask: &[f64]) -> f64 {
    diff.rows()
        .into_iter()
        .map(|r| r.iter().zip(mask).map(|(d, m)| m * d * d).sum::<f64>())
        .sum()
}

fn check_batch<T: Transition>(model: &LatentModel<T>, shifts: &[Array2<f64>]) -> Result<()> {
    if shifts.len() < 2 {
        return Err(Error::shape("loss batch shifts", ">= 2", shifts.len()));
    }
    let d = model.layout.len();
    let b = shifts[0].nrows();
    for m in shifts {
        if m.ncols() != d || m.nrows() != b {
            return Err(Error::shape(
                "loss batch",
                format!("{b}x{d}"),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
    }
    Ok(())
}

fn run_forward<T: Transition>(
    model: &LatentModel<T>,
    shifts: &[Array2<f64>],
) -> Result<(Forward<T>, LossBreakdown)> {
    check_batch(model, shifts)?;
    let b = shifts[0].nrows();
    let horizon = shifts.len() - 1;
    let mask = model.layout.state_mask();
    let n_state = mask.iter().sum::<f64>().max(1.0);
    let views: Vec<_> = shifts.iter().map(|m| m.view()).collect();
    let stacked = concatenate(Axis(0), &views).expect("same widths");
    let (enc_out, enc_tape) = model.encoder.forward(&stacked)?;
    let y0 = enc_out.slice(s![0..b, ..]).to_owned();

    let mut chain = Vec::with_capacity(horizon);
    let mut trans_tapes = Vec::with_capacity(horizon);
    let mut z = y0.clone();
    for _ in 0..horizon {
        let (next, tape) = model.transition.forward(&z)?;
        trans_tapes.push(tape);
        chain.push(next.clone());
        z = next;
    }
    let mut dec_views = vec![y0.view()];
    dec_views.extend(chain.iter().map(|c| c.view()));
    let dec_in = concatenate(Axis(0), &dec_views).expect("same widths");
    let (dec_out, dec_tape) = model.decoder.forward(&dec_in)?;

    let recon =
        masked_sq(&(&shifts[0] - &dec_out.slice(s![0..b, ..])), &mask) / (b as f64 * n_state);
    let mut pred = 0.0;
    let mut lin = 0.0;
    let latent = model.transition.latent_dim() as f64;
    for s_ in 1..=horizon {
        let rows = s![s_ * b..(s_ + 1) * b, ..];
        pred += masked_sq(&(&shifts[s_] - &dec_out.slice(rows)), &mask) / (b as f64 * n_state);
        let d = &enc_out.slice(rows) - &chain[s_ - 1];
        lin += d.iter().map(|v| v * v).sum::<f64>() / (b as f64 * latent);
    }
    pred /= horizon as f64;
    lin /= horizon as f64;
    let reg = model.encoder.weight_sq_norm() + model.decoder.weight_sq_norm() + {
        let mut p = Vec::new();
        let mut m = Vec::new();
        model.transition.params_into(&mut p);
        model.transition.decay_mask_into(&mut m);
        p.iter().zip(&m).map(|(w, k)| k * w * w).sum::<f64>()
    };
    Ok((
        Forward {
            enc_tape,
            dec_tape,
            trans_tapes,
            enc_out,
            chain,
            dec_out,
        },
        LossBreakdown {
            recon,
            lin,
            pred,
            reg,
            total: 0.0,
        },
    ))
}

fn weighted(mut l: LossBreakdown, w: &LossWeights) -> LossBreakdown {
    l.total = w.recon * l.recon + w.lin * l.lin + w.pred * l.pred + w.l2 * l.reg;
    l
}

/// Loss terms for a batch whose `shifts[s]` are normalized windows `s` steps
/// ahead of `shifts[0]`.
pub fn losses<T: Transition>(
    model: &LatentModel<T>,
    shifts: &[Array2<f64>],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(weighted(run_forward(model, shifts)?.1, weights))
}

/// Loss terms and the gradient of `total` with respect to
/// [`LatentModel::params`].
pub fn loss_and_grad<T: Transition>(
    model: &LatentModel<T>,
    shifts: &[Array2<f64>],
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (fw, raw) = run_forward(model, shifts)?;
    let l = weighted(raw, weights);
    let b = shifts[0].nrows();
    let horizon = shifts.len() - 1;
    let mask = model.layout.state_mask();
    let n_state = mask.iter().sum::<f64>().max(1.0);
    let latent = model.transition.latent_dim();

    // decoder output gradient
    let mut g_dec = Array2::zeros(fw.dec_out.raw_dim());
    for s_ in 0..=horizon {
        let scale = if s_ == 0 {
            weights.recon / (b as f64 * n_state)
        } else {
            weights.pred / (horizon as f64 * b as f64 * n_state)
        };
        let target = &shifts[s_];
        let out = fw.dec_out.slice(s![s_ * b..(s_ + 1) * b, ..]);
        let mut g = g_dec.slice_mut(s![s_ * b..(s_ + 1) * b, ..]);
        for r in 0..b {
            for c in 0..target.ncols() {
                g[[r, c]] = -2.0 * scale * mask[c] * (target[[r, c]] - out[[r, c]]);
            }
        }
    }
    let (dec_grads, g_dec_in) = model.decoder.backward(&fw.dec_tape, &g_dec)?;

    // gradients w.r.t. chained latents and encoder outputs
    let lin_scale = weights.lin / (horizon as f64 * b as f64 * latent as f64);
    let mut g_enc = Array2::zeros(fw.enc_out.raw_dim());
    g_enc
        .slice_mut(s![0..b, ..])
        .assign(&g_dec_in.slice(s![0..b, ..]));
    let mut g_chain: Vec<Array2<f64>> = (1..=horizon)
        .map(|s_| g_dec_in.slice(s![s_ * b..(s_ + 1) * b, ..]).to_owned())
        .collect();
    for s_ in 1..=horizon {
        let diff = &fw.enc_out.slice(s![s_ * b..(s_ + 1) * b, ..]) - &fw.chain[s_ - 1];
        let g = diff.mapv(|d| 2.0 * lin_scale * d);
        g_enc.slice_mut(s![s_ * b..(s_ + 1) * b, ..]).assign(&g);
        g_chain[s_ - 1] -= &g;
    }
    let mut trans_grad = vec![0.0; model.transition.param_count()];
    for s_ in (1..=horizon).rev() {
        let (pg, gy) = model
            .transition
            .backward(&fw.trans_tapes[s_ - 1], &g_chain[s_ - 1])?;
        for (a, b) in trans_grad.iter_mut().zip(&pg) {
            *a += b;
        }
        if s_ >= 2 {
            g_chain[s_ - 2] += &gy;
        } else {
            let mut head = g_enc.slice_mut(s![0..b, ..]);
            head += &gy;
        }
    }
    let (enc_grads, _) = model.encoder.backward(&fw.enc_tape, &g_enc)?;

    let mut grad = Vec::with_capacity(model.param_count());
    enc_grads.flatten_into(&mut grad);
    dec_grads.flatten_into(&mut grad);
    grad.extend(trans_grad);
    if weights.l2 != 0.0 {
        let params = model.params();
        for ((g, p), m) in grad.iter_mut().zip(&params).zip(model.decay_mask()) {
            *g += 2.0 * weights.l2 * m * p;
        }
    }
    Ok((l, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub train_recon: f64,
    pub train_lin: f64,
    pub train_pred: f64,
    pub val_total: f64,
}

pub fn log_csv(log: &[TrainLogRow]) -> String {
    let mut out = String::from("epoch,train_recon,train_lin,train_pred,val_total\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_recon, r.train_lin, r.train_pred, r.val_total
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters with the lowest validation loss seen.
    pub model: LatentModel<T>,
    pub log: Vec<TrainLogRow>,
    pub best_epoch: Option<usize>,
    /// Set when a non-finite loss stopped training early.
    pub diverged_at: Option<usize>,
}

/// Hyper-parameters of the optimisation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSettings {
    pub weights: LossWeights,
    pub horizon: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl From<&crate::dkn::DknConfig> for LoopSettings {
    fn from(c: &crate::dkn::DknConfig) -> Self {
        LoopSettings {
            weights: c.loss,
            horizon: c.horizon,
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            seed: c.seed,
        }
    }
}

fn rows(shifts: &[Array2<f64>], idx: &[usize]) -> Vec<Array2<f64>> {
    shifts.iter().map(|m| m.select(Axis(0), idx)).collect()
}

/// Loss over a whole split, evaluated in chunks and averaged by row count.
pub fn dataset_losses<T: Transition>(
    model: &LatentModel<T>,
    data: &SnapshotDataset,
    horizon: usize,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let n = data.len();
    let mut acc = LossBreakdown::default();
    if n == 0 {
        return Ok(acc);
    }
    let shifts = &data.shifts[..=horizon];
    let chunk = 2048;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part: Vec<Array2<f64>> = shifts
            .iter()
            .map(|m| m.slice(s![start..end, ..]).to_owned())
            .collect();
        let l = losses(model, &part, weights)?;
        let w = (end - start) as f64 / n as f64;
        acc.recon += w * l.recon;
        acc.lin += w * l.lin;
        acc.pred += w * l.pred;
        acc.reg = l.reg;
        acc.total += w * l.total;
        start = end;
    }
    Ok(acc)
}

/// Minibatch Adam on normalized `train` data, keeping the parameters with
/// the best validation total.
pub fn train_loop<T: Transition>(
    mut model: LatentModel<T>,
    settings: &LoopSettings,
    train: &SnapshotDataset,
    validation: &SnapshotDataset,
) -> Result<TrainOutcome<T>> {
    for (name, ds) in [("train", train), ("validation", validation)] {
        if ds.layout != model.layout {
            return Err(Error::shape(
                "dataset layout",
                format!("{:?}", model.layout),
                format!("{name}: {:?}", ds.layout),
            ));
        }
        if ds.horizon() < settings.horizon {
            return Err(Error::shape(
                "dataset horizon",
                settings.horizon,
                ds.horizon(),
            ));
        }
        if ds.normalization.is_none() {
            return Err(Error::InvalidConfig(vec![format!(
                "{name} split must be normalized before training"
            )]));
        }
    }
    let shifts = &train.shifts[..=settings.horizon];
    let mut params = model.params();
    let mut opt = OptimizerState::new(
        params.len(),
        AdamConfig {
            learning_rate: settings.learning_rate,
            ..Default::default()
        },
    );
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let mut log = Vec::with_capacity(settings.epochs);
    let mut diverged_at = None;
    let n = train.len();
    'epochs: for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(settings.seed, "batches", epoch as u64));
        let mut sums = [0.0; 3];
        let mut seen = 0usize;
        for idx in order.chunks(settings.batch_size.max(1)) {
            let batch = rows(shifts, idx);
            let (l, grad) = loss_and_grad(&model, &batch, &settings.weights)?;
            if !l.is_finite() {
                log::warn!("non-finite training loss at epoch {epoch}; stopping");
                diverged_at = Some(epoch);
                break 'epochs;
            }
            if let Err(e) = opt_step(&mut params, &grad, &mut opt) {
                log::warn!("epoch {epoch}: {e}");
                continue;
            }
            model.set_params(&params);
            let w = idx.len();
            sums[0] += l.recon * w as f64;
            sums[1] += l.lin * w as f64;
            sums[2] += l.pred * w as f64;
            seen += w;
        }
        let val = dataset_losses(&model, validation, settings.horizon, &settings.weights)?;
        if !val.total.is_finite() {
            log::warn!("non-finite validation loss at epoch {epoch}; stopping");
            diverged_at = Some(epoch);
            break;
        }
        let seen = seen.max(1) as f64;
        log.push(TrainLogRow {
            epoch,
            train_recon: sums[0] / seen,
            train_lin: sums[1] / seen,
            train_pred: sums[2] / seen,
            val_total: val.total,
        });
        log::info!(
            "epoch {epoch}: train pred {:.3e}, validation total {:.3e}",
            sums[2] / seen,
            val.total
        );
        if best.as_ref().is_none_or(|(b, _, _)| val.total < *b) {
            best = Some((val.total, params.clone(), epoch));
        }
    }
    let best_epoch = best.as_ref().map(|b| b.2);
    if let Some((_, p, _)) = best {
        model.set_params(&p);
    }
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        diverged_at,
    })
}

/// Trains a Koopman network from normalized splits.
pub fn train(
    cfg: &crate::dkn::DknConfig,
    train: &SnapshotDataset,
    validation: &SnapshotDataset,
) -> Result<TrainOutcome<crate::dkn::KoopmanTransition>> {
    let norm = train
        .normalization
        .clone()
        .ok_or_else(|| Error::InvalidConfig(vec!["training split is not normalized".into()]))?;
    let model = crate::dkn::DknModel::init(cfg, train.layout, norm)?;
    train_loop(model, &LoopSettings::from(cfg), train, validation)
}
