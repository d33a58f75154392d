//! Fixed-step method-of-steps integration for systems with discrete delays.
//!
//! Every delay is an integer number of steps, so the delayed argument at a
//! step endpoint is always a stored node. Runge–Kutta midpoint stages read the
//! delayed state from a cubic Hermite interpolant built from the stored nodes
//! and the one-sided derivatives recorded for each step.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_control, ModelError, StateTriple};

/// Relative slack used when deciding whether a ratio is an integer.
const COMMENSURATE_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("final time {tf} must exceed start time {t0}")]
    EmptyInterval { t0: f64, tf: f64 },
    #[error("{what} delay {delay} not an integer multiple of step {step}")]
    Incommensurate { what: &'static str, delay: f64, step: f64 },
    #[error("interval length {length} not an integer multiple of step {step}")]
    RaggedInterval { length: f64, step: f64 },
    #[error("history value `{name}` = {value} is invalid")]
    BadHistory { name: &'static str, value: f64 },
    #[error("control grid has {got} values, grid has {expected} steps")]
    ControlLength { expected: usize, got: usize },
    #[error(transparent)]
    Control(#[from] ModelError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Uniform time grid carrying the delays as step counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub t0: f64,
    pub tf: f64,
    pub step: f64,
    pub tau_steps: usize,
    pub xi_steps: usize,
    n_steps: usize,
}

fn integer_ratio(num: f64, den: f64) -> Option<usize> {
    let r = num / den;
    let k = r.round();
    if k >= 0.0 && (r - k).abs() <= COMMENSURATE_TOL * k.max(1.0) {
        Some(k as usize)
    } else {
        None
    }
}

impl GridConfig {
    /// Validates commensurability of the interval and both delays with `step`.
    pub fn new(t0: f64, tf: f64, step: f64, tau: f64, xi: f64) -> Result<Self, GridError> {
        if !(step.is_finite() && step > 0.0) {
            return Err(GridError::BadStep(step));
        }
        if !(tf > t0) || !t0.is_finite() || !tf.is_finite() {
            return Err(GridError::EmptyInterval { t0, tf });
        }
        let n_steps = integer_ratio(tf - t0, step)
            .filter(|&n| n > 0)
            .ok_or(GridError::RaggedInterval { length: tf - t0, step })?;
        let delay_steps = |what, delay: f64| {
            if !(delay.is_finite() && delay >= 0.0) {
                return Err(GridError::Incommensurate { what, delay, step });
            }
            integer_ratio(delay, step).ok_or(GridError::Incommensurate { what, delay, step })
        };
        let tau_steps = delay_steps("state", tau)?;
        let xi_steps = delay_steps("control", xi)?;
        Ok(Self { t0, tf, step, tau_steps, xi_steps, n_steps })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn tau(&self) -> f64 {
        self.tau_steps as f64 * self.step
    }

    pub fn xi(&self) -> f64 {
        self.xi_steps as f64 * self.step
    }

    /// Time of grid node `k`.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.step
    }

    /// Same grid with a different step; delays and interval are kept.
    pub fn refined(&self, step: f64) -> Result<Self, GridError> {
        Self::new(self.t0, self.tf, step, self.tau(), self.xi())
    }

    /// Same interval and step with other delays.
    pub fn with_delays(&self, tau: f64, xi: f64) -> Result<Self, GridError> {
        Self::new(self.t0, self.tf, self.step, tau, xi)
    }
}

/// Constant initial functions for `x`, `y` on `[−τ, 0]`, `z(0)`, and the
/// control on `[−ξ, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistorySpec {
    pub x0: f64,
    pub y0: f64,
    pub z0: f64,
    pub u0: f64,
}

impl HistorySpec {
    pub fn new(x0: f64, y0: f64, z0: f64, u0: f64) -> Result<Self, GridError> {
        let spec = Self { x0, y0, z0, u0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        for (name, value) in [("x0", self.x0), ("y0", self.y0), ("z0", self.z0)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(GridError::BadHistory { name, value });
            }
        }
        if !(0.0..=1.0).contains(&self.u0) {
            return Err(GridError::BadHistory { name: "u0", value: self.u0 });
        }
        Ok(())
    }

    pub fn state(&self) -> StateTriple {
        StateTriple::new(self.x0, self.y0, self.z0)
    }
}

/// Piecewise-constant control, one value per step interval, plus the constant
/// pre-history value used for `t < t0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub values: Vec<f64>,
    pub u0: f64,
}

impl ControlGrid {
    pub fn constant(n_steps: usize, value: f64, u0: f64) -> Self {
        Self { values: vec![value; n_steps], u0 }
    }

    pub fn validate(&self, grid: &GridConfig) -> Result<(), GridError> {
        if self.values.len() != grid.n_steps() {
            return Err(GridError::ControlLength {
                expected: grid.n_steps(),
                got: self.values.len(),
            });
        }
        check_control(self.u0)?;
        for &u in &self.values {
            check_control(u)?;
        }
        Ok(())
    }

    /// Control value on interval `k` shifted back by `lag` intervals.
    #[inline]
    pub fn lagged(&self, k: usize, lag: usize) -> f64 {
        if k >= lag {
            self.values[k - lag]
        } else {
            self.u0
        }
    }
}

/// Which Runge–Kutta abscissa of a step is being evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Stage {
    Start,
    Mid,
    End,
}

impl Stage {
    pub(crate) fn theta(self) -> f64 {
        match self {
            Stage::Start => 0.0,
            Stage::Mid => 0.5,
            Stage::End => 1.0,
        }
    }
}

/// Cubic Hermite interpolation on a unit-parameterised step of length `h`.
#[inline]
pub(crate) fn hermite(
    y0: &StateTriple,
    f0: &StateTriple,
    y1: &StateTriple,
    f1: &StateTriple,
    h: f64,
    theta: f64,
) -> StateTriple {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    *y0 * h00 + *f0 * (h * h10) + *y1 * h01 + *f1 * (h * h11)
}

/// Node values plus one-sided derivatives on each step.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Marched {
    pub samples: Vec<StateTriple>,
    /// `(f(t_k⁺), f(t_{k+1}⁻))` for step `k`.
    pub derivs: Vec<(StateTriple, StateTriple)>,
}

impl Marched {
    #[inline]
    pub(crate) fn interpolate(&self, k: usize, theta: f64, h: f64) -> StateTriple {
        if theta == 0.0 {
            return self.samples[k];
        }
        if theta == 1.0 {
            return self.samples[k + 1];
        }
        let (f0, f1) = &self.derivs[k];
        hermite(&self.samples[k], f0, &self.samples[k + 1], f1, h, theta)
    }
}

/// Generic RK4 method of steps on `n` uniform steps of size `h`.
///
/// `field(k, stage, current, delayed)` evaluates the vector field on step `k`,
/// where `delayed` is the solution `lag` steps earlier. Positions before the
/// first node come from `history`. With `lag == 0` the delayed argument is the
/// current stage value. On failure the offending step index is returned.
pub(crate) fn march<F>(
    n: usize,
    h: f64,
    lag: usize,
    start: StateTriple,
    history: StateTriple,
    mut field: F,
) -> Result<Marched, usize>
where
    F: FnMut(usize, Stage, &StateTriple, &StateTriple) -> StateTriple,
{
    let mut out = Marched {
        samples: Vec::with_capacity(n + 1),
        derivs: Vec::with_capacity(n),
    };
    out.samples.push(start);

    for k in 0..n {
        let delayed = |out: &Marched, stage: Stage, current: &StateTriple| -> StateTriple {
            if lag == 0 {
                return *current;
            }
            if k < lag {
                return history;
            }
            out.interpolate(k - lag, stage.theta(), h)
        };

        let yk = out.samples[k];
        let d0 = delayed(&out, Stage::Start, &yk);
        let k1 = field(k, Stage::Start, &yk, &d0);
        let y2 = yk + k1 * (0.5 * h);
        let dm = delayed(&out, Stage::Mid, &y2);
        let k2 = field(k, Stage::Mid, &y2, &dm);
        let y3 = yk + k2 * (0.5 * h);
        let dm = if lag == 0 { y3 } else { dm };
        let k3 = field(k, Stage::Mid, &y3, &dm);
        let y4 = yk + k3 * h;
        let d1 = delayed(&out, Stage::End, &y4);
        let k4 = field(k, Stage::End, &y4, &d1);
        let next = yk + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        if !next.is_finite() {
            return Err(k);
        }
        let d1 = delayed(&out, Stage::End, &next);
        let f_end = field(k, Stage::End, &next, &d1);
        out.samples.push(next);
        out.derivs.push((k1, f_end));
    }
    Ok(out)
}

/// Uniformly sampled solution together with the history it was started from.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: GridConfig,
    pub samples: Vec<StateTriple>,
    pub history: HistorySpec,
    derivs: Vec<(StateTriple, StateTriple)>,
}

impl Trajectory {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples.len()).map(|k| self.grid.time(k))
    }

    pub fn last(&self) -> StateTriple {
        *self.samples.last().expect("trajectory has at least two nodes")
    }

    /// One-sided derivatives `(f(t_k⁺), f(t_{k+1}⁻))` recorded on step `k`.
    pub fn step_derivatives(&self, k: usize) -> (StateTriple, StateTriple) {
        self.derivs[k]
    }

    /// State at step `k` and fraction `theta ∈ [0, 1]`; constant history for
    /// negative step indices.
    #[inline]
    pub(crate) fn at_step(&self, k: isize, theta: f64) -> StateTriple {
        if k < 0 {
            return self.history.state();
        }
        let k = k as usize;
        if k == self.grid.n_steps() && theta == 0.0 {
            return self.samples[k];
        }
        let (f0, f1) = &self.derivs[k];
        if theta == 0.0 {
            return self.samples[k];
        }
        if theta == 1.0 {
            return self.samples[k + 1];
        }
        hermite(&self.samples[k], f0, &self.samples[k + 1], f1, self.grid.step, theta)
    }

    /// Solution value at time `t ∈ [t0 − τ, tf]`.
    pub fn sample(&self, t: f64) -> Result<StateTriple, IntegrationError> {
        let g = &self.grid;
        let lo = g.t0 - g.tau();
        if !(t >= lo - COMMENSURATE_TOL * g.step && t <= g.tf + COMMENSURATE_TOL * g.step) {
            return Err(IntegrationError::OutOfRange { t, lo, hi: g.tf });
        }
        let r = (t - g.t0) / g.step;
        let nearest = r.round();
        if (r - nearest).abs() <= COMMENSURATE_TOL * nearest.abs().max(1.0) {
            if nearest < 0.0 {
                return Ok(self.history.state());
            }
            return Ok(self.samples[nearest as usize]);
        }
        if r < 0.0 {
            return Ok(self.history.state());
        }
        let k = (r.floor() as usize).min(g.n_steps() - 1);
        Ok(self.at_step(k as isize, r - k as f64))
    }
}

/// Integrates `rhs(current, delayed, u(t − ξ))` over `grid` from constant
/// history. Without a control grid the control argument is `history.u0`.
pub fn integrate<F>(
    rhs: F,
    history: &HistorySpec,
    grid: &GridConfig,
    control: Option<&ControlGrid>,
) -> Result<Trajectory, IntegrationError>
where
    F: Fn(&StateTriple, &StateTriple, f64) -> StateTriple,
{
    history.validate()?;
    if let Some(c) = control {
        c.validate(grid)?;
    }
    let u_on = |k: usize| match control {
        Some(c) => c.lagged(k, grid.xi_steps),
        None => history.u0,
    };
    let marched = march(
        grid.n_steps(),
        grid.step,
        grid.tau_steps,
        history.state(),
        history.state(),
        |k, _, cur, del| rhs(cur, del, u_on(k)),
    )
    .map_err(|k| IntegrationError::NonFinite { t: grid.time(k + 1) })?;
    Ok(Trajectory {
        grid: *grid,
        samples: marched.samples,
        history: *history,
        derivs: marched.derivs,
    })
}
