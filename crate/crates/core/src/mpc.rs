//! Receding-horizon control with the cross-entropy method over scalar
//! control sequences, scored by rolling a learned model forward.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DynamicsModel;
use crate::seed::rng_for;
use crate::sim::{format_sig, System, DIVERGENCE_LIMIT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Planning horizon in control steps.
    pub horizon: usize,
    /// Initial sampling std; `None` means half the bound width.
    pub sigma0: Option<f64>,
    pub bounds: [f64; 2],
    /// Weight of the previous mean/std in each refit.
    pub smoothing: f64,
    /// Start each tick from the previous solution shifted by one step.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            population: 200,
            elites: 20,
            iterations: 5,
            horizon: 10,
            sigma0: None,
            bounds: [-2.0, 2.0],
            smoothing: 0.5,
            warm_start: true,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn sigma0(&self) -> f64 {
        self.sigma0
            .unwrap_or(0.5 * (self.bounds[1] - self.bounds[0]))
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.elites < 1 || self.elites > self.population {
            out.push("cem.elites must satisfy 1 <= elites <= population".into());
        }
        if self.iterations < 1 {
            out.push("cem.iterations must be >= 1".into());
        }
        if self.horizon < 1 {
            out.push("cem.horizon must be >= 1".into());
        }
        if !(self.bounds[0] <= self.bounds[1]) {
            out.push("cem.bounds must be ordered".into());
        }
        if self.sigma0.is_some_and(|s| !(s >= 0.0)) {
            out.push("cem.sigma0 must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.smoothing) {
            out.push("cem.smoothing must lie in [0, 1]".into());
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

    fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.bounds[0], self.bounds[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSpec {
    pub w1: f64,
    pub w2: f64,
    /// `(theta, thetadot)` target.
    pub target: [f64; 2],
}

impl Default for CostSpec {
    fn default() -> Self {
        CostSpec {
            w1: 1.0,
            w2: 0.1,
            target: [0.0, 0.0],
        }
    }
}

impl CostSpec {
    pub fn unit() -> Self {
        CostSpec {
            w1: 1.0,
            w2: 1.0,
            target: [0.0, 0.0],
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.w1 >= 0.0 && self.w2 >= 0.0) {
            out.push("cost weights must be >= 0".into());
        }
        if self.w1 == 0.0 && self.w2 == 0.0 {
            out.push("cost weights must not both be zero".into());
        }
        out
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = a.rem_euclid(tau);
    if r > std::f64::consts::PI {
        r - tau
    } else {
        r
    }
}

/// `w1 * wrap(theta - target)^2 + w2 * (thetadot - target)^2`.
pub fn step_cost(theta: f64, thetadot: f64, cost: &CostSpec) -> f64 {
    let e = wrap_angle(theta - cost.target[0]);
    let v = thetadot - cost.target[1];
    cost.w1 * e * e + cost.w2 * v * v
}

/// Scores candidate control sequences, one per row.
pub trait SequenceObjective {
    fn costs(&self, candidates: &Array2<f64>) -> Vec<f64>;
}

/// Rolls `model` forward from a raw history embedding. Each step overwrites
/// the control of the newest sample, predicts the next window and appends
/// its newest decoded sample to the history.
pub struct ModelObjective<'a> {
    pub model: &'a dyn DynamicsModel,
    pub history: &'a [f64],
    pub cost: CostSpec,
}

impl SequenceObjective for ModelObjective<'_> {
    fn costs(&self, candidates: &Array2<f64>) -> Vec<f64> {
        match evaluate_batch(self.model, self.history, candidates, &self.cost) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("candidate evaluation failed: {e}");
                vec![f64::INFINITY; candidates.nrows()]
            }
        }
    }
}

/// Costs of every row of `candidates`; non-finite predictions score
/// `+inf`.
pub fn evaluate_batch(
    model: &dyn DynamicsModel,
    history: &[f64],
    candidates: &Array2<f64>,
    cost: &CostSpec,
) -> Result<Vec<f64>> {
    let layout = model.layout();
    if history.len() != layout.len() {
        return Err(Error::shape(
            "history embedding",
            layout.len(),
            history.len(),
        ));
    }
    let n = candidates.nrows();
    let d = layout.len();
    let sd = layout.sample_dim;
    let newest = layout.newest_offset();
    let ctrl = newest + sd - 1;
    let norm = model.normalization();
    let mut hist = Array2::from_shape_fn((n, d), |(_, c)| history[c]);
    let mut total = vec![0.0; n];
    for i in 0..candidates.ncols() {
        for r in 0..n {
            hist[[r, ctrl]] = candidates[[r, i]];
        }
        let y = model.encode(&norm.apply(&hist))?;
        let pred = norm.invert(&model.decode(&model.advance(&y)?)?);
        for r in 0..n {
            let theta = pred[[r, newest]];
            let thetadot = pred[[r, newest + 1]];
            total[r] += step_cost(theta, thetadot, cost);
        }
        if i + 1 < candidates.ncols() {
            let mut next = Array2::zeros((n, d));
            next.slice_mut(s![.., ..d - sd])
                .assign(&hist.slice(s![.., sd..]));
            next.slice_mut(s![.., newest..newest + sd - 1])
                .assign(&pred.slice(s![.., newest..newest + sd - 1]));
            hist = next;
        }
    }
    Ok(total
        .into_iter()
        .map(|c| if c.is_finite() { c } else { f64::INFINITY })
        .collect())
}

pub fn evaluate_sequence(
    model: &dyn DynamicsModel,
    history: &[f64],
    sequence: &[f64],
    cost: &CostSpec,
) -> Result<f64> {
    let row = Array2::from_shape_vec((1, sequence.len()), sequence.to_vec()).unwrap();
    Ok(evaluate_batch(model, history, &row, cost)?[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct CemPlan {
    /// Final sampling mean, clamped to the bounds.
    pub sequence: Vec<f64>,
    pub first_action: f64,
    /// Mean elite cost of each iteration.
    pub elite_costs: Vec<f64>,
    /// Every candidate of some iteration scored `+inf`; the action is 0.
    pub all_infinite: bool,
}

/// Cross-entropy search starting from `init_mean`.
pub fn cem_plan(
    objective: &dyn SequenceObjective,
    cem: &CemConfig,
    init_mean: &[f64],
    rng: &mut impl Rng,
) -> Result<CemPlan> {
    cem.validate()?;
    let t = cem.horizon;
    if init_mean.len() != t {
        return Err(Error::shape("initial mean", t, init_mean.len()));
    }
    let mut mean: Vec<f64> = init_mean.iter().map(|u| cem.clamp(*u)).collect();
    let mut std = vec![cem.sigma0(); t];
    let mut elite_costs = Vec::with_capacity(cem.iterations);
    let a = cem.smoothing;
    for _ in 0..cem.iterations {
        let cands = Array2::from_shape_fn((cem.population, t), |(_, j)| {
            let z: f64 = rng.sample(StandardNormal);
            cem.clamp(mean[j] + std[j] * z)
        });
        let costs = objective.costs(&cands);
        let mut order: Vec<usize> = (0..cem.population).collect();
        order.sort_by(|&i, &j| costs[i].total_cmp(&costs[j]).then(i.cmp(&j)));
        if !costs[order[0]].is_finite() {
            log::warn!("every CEM candidate has infinite cost; returning a zero action");
            return Ok(CemPlan {
                sequence: vec![0.0; t],
                first_action: cem.clamp(0.0),
                elite_costs,
                all_infinite: true,
            });
        }
        let elites = &order[..cem.elites];
        let ne = elites.len() as f64;
        elite_costs.push(elites.iter().map(|&i| costs[i]).sum::<f64>() / ne);
        for j in 0..t {
            let m = elites.iter().map(|&i| cands[[i, j]]).sum::<f64>() / ne;
            let v = elites
                .iter()
                .map(|&i| (cands[[i, j]] - m).powi(2))
                .sum::<f64>()
                / ne;
            mean[j] = a * mean[j] + (1.0 - a) * m;
            std[j] = a * std[j] + (1.0 - a) * v.sqrt();
        }
    }
    let sequence: Vec<f64> = mean.iter().map(|u| cem.clamp(*u)).collect();
    Ok(CemPlan {
        first_action: sequence[0],
        sequence,
        elite_costs,
        all_infinite: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub duration_s: f64,
    pub control_hz: f64,
    /// Plant state at `t = 0`.
    pub initial_state: Vec<f64>,
    pub substeps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            duration_s: 30.0,
            control_hz: 20.0,
            initial_state: vec![0.8, 0.0, 0.0],
            substeps: 1,
        }
    }
}

impl EpisodeConfig {
    pub fn ticks(&self) -> usize {
        (self.duration_s * self.control_hz).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlEpisodeResult {
    pub channel_names: Vec<String>,
    pub times: Vec<f64>,
    /// Plant state at each decision, one row per tick.
    pub states: Array2<f64>,
    pub controls: Vec<f64>,
    /// Unit-weight error at each decision.
    pub costs: Vec<f64>,
    /// Sum of `costs`.
    pub error_sum: f64,
    /// Tick at which the plant left the finite range.
    pub diverged_at: Option<usize>,
    /// Ticks whose plan had no finite candidate.
    pub infinite_plans: usize,
    pub seconds_per_decision: f64,
}

impl ControlEpisodeResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for n in &self.channel_names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",cost\n");
        for (i, t) in self.times.iter().enumerate() {
            out.push_str(&format_sig(*t, 9));
            for v in self.states.row(i) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{}", self.controls[i], self.costs[i]);
        }
        out
    }
}

/// Closed-loop episode: measure, plan on the measured history, apply the
/// first action for one tick.
pub fn run_episode(
    plant: &System,
    model: &dyn DynamicsModel,
    cem: &CemConfig,
    cost: &CostSpec,
    episode: &EpisodeConfig,
) -> Result<ControlEpisodeResult> {
    cem.validate()?;
    let layout = model.layout();
    let sd = plant.state_dim();
    if layout.sample_dim != sd + 1 {
        return Err(Error::shape(
            "model sample width",
            sd + 1,
            layout.sample_dim,
        ));
    }
    if episode.initial_state.len() != sd {
        return Err(Error::shape(
            "initial state",
            sd,
            episode.initial_state.len(),
        ));
    }
    if !(episode.control_hz > 0.0) {
        return Err(Error::InvalidConfig(vec!["control_hz must be > 0".into()]));
    }
    let dt = 1.0 / episode.control_hz;
    let ticks = episode.ticks();
    let unit = CostSpec::unit();
    let mut x = episode.initial_state.clone();
    let mut history: Vec<f64> = (0..layout.len())
        .map(|i| {
            let c = i % layout.sample_dim;
            if c < sd {
                x[c]
            } else {
                0.0
            }
        })
        .collect();
    let mut states = Array2::zeros((ticks, sd));
    let mut times = Vec::with_capacity(ticks);
    let mut controls = Vec::with_capacity(ticks);
    let mut costs = Vec::with_capacity(ticks);
    let mut mean = vec![0.5 * (cem.bounds[0] + cem.bounds[1]); cem.horizon];
    let mut diverged_at = None;
    let mut infinite_plans = 0;
    let started = Instant::now();
    for tick in 0..ticks {
        if x.iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
        {
            log::warn!("plant diverged at tick {tick}");
            diverged_at = Some(tick);
            break;
        }
        let objective = ModelObjective {
            model,
            history: &history,
            cost: *cost,
        };
        let mut rng = rng_for(cem.seed, "cem", tick as u64);
        let plan = cem_plan(&objective, cem, &mean, &mut rng)?;
        if plan.all_infinite {
            infinite_plans += 1;
        }
        let u = plant.clamp_control(plan.first_action);
        states
            .row_mut(tick)
            .iter_mut()
            .zip(&x)
            .for_each(|(d, v)| *d = *v);
        times.push(tick as f64 * dt);
        controls.push(u);
        costs.push(step_cost(x[0], x[1], &unit));
        mean = if cem.warm_start {
            let mut m = plan.sequence[1..].to_vec();
            m.push(*plan.sequence.last().unwrap());
            m
        } else {
            vec![0.5 * (cem.bounds[0] + cem.bounds[1]); cem.horizon]
        };
        x = plant.advance(&x, u, dt, episode.substeps);
        let n = history.len();
        history[n - 1] = u;
        history.drain(..layout.sample_dim);
        history.extend(&x);
        history.push(0.0);
    }
    let done = times.len();
    let seconds_per_decision = if done > 0 {
        started.elapsed().as_secs_f64() / done as f64
    } else {
        0.0
    };
    Ok(ControlEpisodeResult {
        channel_names: plant
            .kind()
            .channel_names()
            .iter()
            .map(|s| s.to_string())
            .collect(),
        times,
        states: states.slice(s![..done, ..]).to_owned(),
        controls,
        error_sum: costs.iter().sum(),
        costs,
        diverged_at,
        infinite_plans,
        seconds_per_decision,
    })
}
