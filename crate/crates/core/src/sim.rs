//! Fixed-step simulation of the benchmark systems.
//!
//! Two plants are provided: the torque-driven rigid pendulum and a Duffing
//! oscillator standing in for the soft inverted pendulum, whose control input
//! is the velocity of the robot joint at its base. Both are integrated with a
//! classic fourth-order Runge-Kutta scheme and a zero-order hold on the
//! control over each step.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any state component larger than this in magnitude aborts a rollout.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidPendulumParams {
    pub gravity: f64,
    pub rod_length: f64,
    pub mass: f64,
    pub viscous_friction: f64,
}

impl Default for RigidPendulumParams {
    fn default() -> Self {
        RigidPendulumParams {
            gravity: -1.0,
            rod_length: 1.0,
            mass: 1.0,
            viscous_friction: 0.0,
        }
    }
}

impl RigidPendulumParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rod_length > 0.0) {
            out.push("rigid.rod_length must be > 0".into());
        }
        if !(self.mass > 0.0) {
            out.push("rigid.mass must be > 0".into());
        }
        if !(self.viscous_friction >= 0.0) {
            out.push("rigid.viscous_friction must be >= 0".into());
        }
        if !self.gravity.is_finite() {
            out.push("rigid.gravity must be finite".into());
        }
        out
    }

    /// Conserved energy of the frictionless, unforced pendulum with unit
    /// mass and length: kinetic term plus the potential `g cos q`.
    pub fn energy(&self, q: f64, qdot: f64) -> f64 {
        0.5 * qdot * qdot + self.gravity * q.cos()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    pub q: f64,
    pub qdot: f64,
    pub u: f64,
}

/// Returns `(dq, dqdot)`.
pub fn rigid_pendulum_deriv(state: &PendulumState, params: &RigidPendulumParams) -> (f64, f64) {
    let RigidPendulumParams {
        gravity: g,
        rod_length: l,
        mass: m,
        viscous_friction: c,
    } = *params;
    let ml = m * l;
    let qddot = g / l * state.q.sin() + (state.u - c * state.qdot) / (ml * ml);
    (state.qdot, qddot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuffingSurrogateParams {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub kappa: f64,
    pub u_limit: f64,
}

impl Default for DuffingSurrogateParams {
    fn default() -> Self {
        DuffingSurrogateParams {
            alpha: 4.0,
            beta: 6.25,
            delta: 0.4,
            kappa: 4.0,
            u_limit: 2.0,
        }
    }
}

impl DuffingSurrogateParams {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.alpha > 0.0) {
            out.push("soft.alpha must be > 0".into());
        }
        if !(self.beta > 0.0) {
            out.push("soft.beta must be > 0".into());
        }
        if !(self.delta >= 0.0) {
            out.push("soft.delta must be >= 0".into());
        }
        if !(self.u_limit > 0.0) {
            out.push("soft.u_limit must be > 0".into());
        }
        if !self.kappa.is_finite() {
            out.push("soft.kappa must be finite".into());
        }
        out
    }

    /// Angle of the two stable wells, `±sqrt(alpha / beta)`.
    pub fn well_angle(&self) -> f64 {
        (self.alpha / self.beta).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftPendulumState {
    pub theta: f64,
    pub thetadot: f64,
    pub q: f64,
}

/// Returns `(dtheta, dthetadot, dq)`. The joint velocity `u` is clamped to
/// `±u_limit`.
pub fn duffing_deriv(
    state: &SoftPendulumState,
    u: f64,
    params: &DuffingSurrogateParams,
) -> (f64, f64, f64) {
    let u = u.clamp(-params.u_limit, params.u_limit);
    let th = state.theta;
    let acc = params.alpha * th - params.beta * th * th * th - params.delta * state.thetadot
        + params.kappa * u;
    (state.thetadot, acc, u)
}

/// One classic RK4 step of `dx/dt = deriv(x)`.
pub fn rk4_step<const N: usize>(
    deriv: impl Fn(&[f64; N]) -> [f64; N],
    x: &[f64; N],
    dt: f64,
) -> [f64; N] {
    let axpy = |a: f64, k: &[f64; N]| {
        let mut out = *x;
        for (o, ki) in out.iter_mut().zip(k) {
            *o += a * ki;
        }
        out
    };
    let k1 = deriv(x);
    let k2 = deriv(&axpy(0.5 * dt, &k1));
    let k3 = deriv(&axpy(0.5 * dt, &k2));
    let k4 = deriv(&axpy(dt, &k3));
    let mut out = *x;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Sign convention used when a PD law drives a plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PdConvention {
    /// Apply [`pd_control`] as written: `-kp (target - angle) + kd velocity`.
    /// This is positive feedback on both terms for the plants here.
    Printed,
    /// Apply the negated law, `kp (target - angle) - kd velocity`.
    #[default]
    Regulator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
    pub target: f64,
}

impl PdGains {
    pub fn new(kp: f64, kd: f64, target: f64) -> Self {
        PdGains { kp, kd, target }
    }
}

/// `-kp (target - angle) + kd velocity`.
pub fn pd_control(angle: f64, velocity: f64, gains: &PdGains) -> f64 {
    -gains.kp * (gains.target - angle) + gains.kd * velocity
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdController {
    pub gains: PdGains,
    #[serde(default)]
    pub convention: PdConvention,
}

impl PdController {
    pub fn command(&self, angle: f64, velocity: f64) -> f64 {
        let u = pd_control(angle, velocity, &self.gains);
        match self.convention {
            PdConvention::Printed => u,
            PdConvention::Regulator => -u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    Rigid,
    Soft,
}

/// A simulated plant together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum System {
    Rigid(RigidPendulumParams),
    Soft(DuffingSurrogateParams),
}

impl System {
    pub fn kind(&self) -> SystemKind {
        match self {
            System::Rigid(_) => SystemKind::Rigid,
            System::Soft(_) => SystemKind::Soft,
        }
    }

    /// Measured state channels, control excluded.
    pub fn state_dim(&self) -> usize {
        self.kind().state_dim()
    }

    /// Clamp a control to the actuator range. The rigid pendulum is
    /// unbounded.
    pub fn clamp_control(&self, u: f64) -> f64 {
        match self {
            System::Rigid(_) => u,
            System::Soft(p) => u.clamp(-p.u_limit, p.u_limit),
        }
    }

    /// Advance `state` by `dt` holding `u` fixed, using `substeps` RK4 steps.
    pub fn advance(&self, state: &[f64], u: f64, dt: f64, substeps: usize) -> Vec<f64> {
        let h = dt / substeps.max(1) as f64;
        match self {
            System::Rigid(p) => {
                let mut x = [state[0], state[1]];
                for _ in 0..substeps.max(1) {
                    x = rk4_step(
                        |s: &[f64; 2]| {
                            let (a, b) = rigid_pendulum_deriv(
                                &PendulumState {
                                    q: s[0],
                                    qdot: s[1],
                                    u,
                                },
                                p,
                            );
                            [a, b]
                        },
                        &x,
                        h,
                    );
                }
                x.to_vec()
            }
            System::Soft(p) => {
                let mut x = [state[0], state[1], state[2]];
                for _ in 0..substeps.max(1) {
                    x = rk4_step(
                        |s: &[f64; 3]| {
                            let (a, b, c) = duffing_deriv(
                                &SoftPendulumState {
                                    theta: s[0],
                                    thetadot: s[1],
                                    q: s[2],
                                },
                                u,
                                p,
                            );
                            [a, b, c]
                        },
                        &x,
                        h,
                    );
                }
                x.to_vec()
            }
        }
    }
}

impl SystemKind {
    pub fn state_dim(self) -> usize {
        match self {
            SystemKind::Rigid => 2,
            SystemKind::Soft => 3,
        }
    }

    /// Per-sample channel names, control last.
    pub fn channel_names(self) -> &'static [&'static str] {
        match self {
            SystemKind::Rigid => &["q", "qdot", "u"],
            SystemKind::Soft => &["theta", "thetadot", "q", "u"],
        }
    }
}

/// Feedback applied during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    #[default]
    Zero,
    Pd(PdController),
}

impl Controller {
    /// Control for a measured state. Channel 0 is the angle and channel 1
    /// its velocity for both plants.
    pub fn command(&self, state: &[f64]) -> f64 {
        match self {
            Controller::Zero => 0.0,
            Controller::Pd(pd) => pd.command(state[0], state[1]),
        }
    }
}

/// Time-ordered samples; each row is the measured state followed by the
/// control applied over the next interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub kind: SystemKind,
    pub dt: f64,
    pub samples: Array2<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn sample_dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for name in self.kind.channel_names() {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, row) in self.samples.rows().into_iter().enumerate() {
            out.push_str(&format_sig(self.time(i), 9));
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Formats `x` with `digits` significant digits in positional notation.
pub fn format_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Simulates `n_steps` control intervals of length `dt` from `x0`.
///
/// The controller is evaluated on every sample, including the last, so each
/// row carries the control that was (or would be) applied from it.
pub fn rollout(
    system: &System,
    controller: &Controller,
    x0: &[f64],
    n_steps: usize,
    dt: f64,
    substeps: usize,
) -> Result<Trajectory> {
    let sd = system.state_dim();
    if x0.len() != sd {
        return Err(Error::shape("rollout initial state", sd, x0.len()));
    }
    if n_steps < 1 {
        return Err(Error::InvalidConfig(vec!["n_steps must be >= 1".into()]));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(vec!["dt must be > 0".into()]));
    }
    let mut samples = Array2::zeros((n_steps + 1, sd + 1));
    let mut x = x0.to_vec();
    for step in 0..=n_steps {
        if x.iter()
            .any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT)
        {
            return Err(Error::Divergence { step });
        }
        let u = system.clamp_control(controller.command(&x));
        let mut row = samples.row_mut(step);
        for (j, v) in x.iter().enumerate() {
            row[j] = *v;
        }
        row[sd] = u;
        if step < n_steps {
            x = system.advance(&x, u, dt, substeps);
        }
    }
    Ok(Trajectory {
        kind: system.kind(),
        dt,
        samples,
    })
}
