//! Optimal treatment with an incubation delay `τ` in the state and a
//! pharmacological delay `ξ` in the control.
//!
//! Maximises `J(u) = ∫ (x + z − u) dt` over piecewise-constant `u ∈ [0, 1]`
//! with a forward-backward sweep on the necessary conditions: forward state
//! integration, backward integration of the delayed adjoint system (which has
//! advanced arguments `t + τ`), the switching function with its advanced
//! `t + ξ` term, and a relaxed bang-bang projection.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dde::{
    hermite, integrate, march, ControlGrid, GridConfig, GridError, HistorySpec, IntegrationError, Marched, Stage,
    Trajectory,
};
use crate::model::{controlled_rhs_unchecked, ModelError, ModelParams, StateTriple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OcpError {
    #[error("horizon {horizon} must exceed both delays (τ = {tau}, ξ = {xi})")]
    HorizonTooShort { horizon: f64, tau: f64, xi: f64 },
    #[error("relaxation must lie in (0, 1], got {0}")]
    BadRelaxation(f64),
    #[error("solver option `{name}` invalid: {value}")]
    BadOption { name: &'static str, value: f64 },
    #[error("control has {got} intervals, grid has {expected}")]
    GridMismatch { expected: usize, got: usize },
    #[error("control value {value} on interval {index} is not 0 or 1")]
    NonBinaryControl { index: usize, value: f64 },
    #[error("non-finite adjoint at t = {t}")]
    NonFiniteAdjoint { t: f64 },
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Distance from 0 or 1 below which the final control is snapped to the bound.
pub const SNAP_BAND: f64 = 0.05;

/// Runs of at least this many intervals with `|φ|` inside the switch band are
/// reported as candidate singular arcs.
pub const SINGULAR_RUN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iterations: usize,
    pub relaxation: f64,
    pub convergence_tol: f64,
    /// `|φ|` below this keeps the previous control value.
    pub switch_band: f64,
    /// Block length in days used to turn fractional arcs into switchings.
    pub bang_period: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iterations: 500, relaxation: 0.3, convergence_tol: 1e-4, switch_band: 1e-6, bang_period: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcpConfig {
    pub params: ModelParams,
    pub grid: GridConfig,
    pub history: HistorySpec,
    pub options: SolverOptions,
}

impl OcpConfig {
    pub fn new(
        params: ModelParams,
        grid: GridConfig,
        history: HistorySpec,
        options: SolverOptions,
    ) -> Result<Self, OcpError> {
        let config = Self { params, grid, history, options };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), OcpError> {
        let horizon = self.grid.tf - self.grid.t0;
        let (tau, xi) = (self.grid.tau(), self.grid.xi());
        if !(horizon > tau && horizon > xi) {
            return Err(OcpError::HorizonTooShort { horizon, tau, xi });
        }
        let o = &self.options;
        if !(o.relaxation > 0.0 && o.relaxation <= 1.0) {
            return Err(OcpError::BadRelaxation(o.relaxation));
        }
        if !(o.convergence_tol > 0.0 && o.convergence_tol.is_finite()) {
            return Err(OcpError::BadOption { name: "convergence_tol", value: o.convergence_tol });
        }
        if !(o.bang_period > 0.0 && o.bang_period.is_finite()) {
            return Err(OcpError::BadOption { name: "bang_period", value: o.bang_period });
        }
        if !(o.switch_band >= 0.0 && o.switch_band.is_finite()) {
            return Err(OcpError::BadOption { name: "switch_band", value: o.switch_band });
        }
        self.history.validate()?;
        self.params.validate()?;
        Ok(())
    }
}

/// Costates paired with `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AdjointTriple {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl From<StateTriple> for AdjointTriple {
    fn from(s: StateTriple) -> Self {
        Self { lx: s.x, ly: s.y, lz: s.z }
    }
}

/// Adjoint nodes on the forward grid with per-step one-sided derivatives for
/// interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointPath {
    pub grid: GridConfig,
    pub nodes: Vec<AdjointTriple>,
    derivs: Vec<(StateTriple, StateTriple)>,
}

impl AdjointPath {
    fn node(&self, k: usize) -> StateTriple {
        let n = self.nodes[k];
        StateTriple::new(n.lx, n.ly, n.lz)
    }

    /// Adjoint at step `k`, fraction `theta`; zero beyond the horizon.
    pub(crate) fn at_step(&self, k: usize, theta: f64) -> AdjointTriple {
        let n = self.grid.n_steps();
        if k >= n {
            return if k == n && theta == 0.0 { self.nodes[n] } else { AdjointTriple::default() };
        }
        if theta == 0.0 {
            return self.nodes[k];
        }
        let (f0, f1) = &self.derivs[k];
        hermite(&self.node(k), f0, &self.node(k + 1), f1, self.grid.step, theta).into()
    }

    pub fn terminal(&self) -> AdjointTriple {
        *self.nodes.last().expect("adjoint path is nonempty")
    }
}

fn check_lengths(grid: &GridConfig, control: &ControlGrid) -> Result<(), OcpError> {
    if control.values.len() != grid.n_steps() {
        return Err(OcpError::GridMismatch { expected: grid.n_steps(), got: control.values.len() });
    }
    Ok(())
}

/// `J = ∫ (x + z) dt − ∫ u dt`: trapezoidal rule for the states, exact for the
/// piecewise-constant control.
pub fn objective(states: &Trajectory, control: &ControlGrid) -> Result<f64, OcpError> {
    check_lengths(&states.grid, control)?;
    let h = states.grid.step;
    let gain: f64 = states
        .samples
        .windows(2)
        .map(|w| 0.5 * (w[0].x + w[0].z + w[1].x + w[1].z))
        .sum();
    let cost: f64 = control.values.iter().sum();
    Ok(h * (gain - cost))
}

/// Forward pass of the treated system under `control`.
pub fn simulate_controlled(config: &OcpConfig, control: &ControlGrid) -> Result<Trajectory, OcpError> {
    let params = config.params;
    let control = ControlGrid { values: control.values.clone(), u0: config.history.u0 };
    Ok(integrate(
        |c, d, u| controlled_rhs_unchecked(&params, c, d, u),
        &config.history,
        &config.grid,
        Some(&control),
    )?)
}

/// Integrates the delayed adjoint system backward from zero terminal values.
///
/// With `v(t) = u(t − ξ)`, `ζ = x(t − τ)`, `η = y(t − τ)`:
///
/// ```text
/// λx' = −Hx[t] − χ[0, tf−τ](t) Hζ[t + τ]
/// λy' = −Hy[t] − χ[0, tf−τ](t) Hη[t + τ]
/// λz' = −Hz[t]
/// ```
///
/// The sweep runs in reversed time `s = tf − t`, where the advanced argument
/// becomes an ordinary delay of `τ` and is read from already computed nodes.
pub fn backward_sweep(
    config: &OcpConfig,
    states: &Trajectory,
    control: &ControlGrid,
) -> Result<AdjointPath, OcpError> {
    let grid = &config.grid;
    check_lengths(grid, control)?;
    let ModelParams { d, beta, a, p, c, h, .. } = config.params;
    let n = grid.n_steps();
    let m = grid.tau_steps;
    let xi = grid.xi_steps;
    let theta_t = |stage: Stage| match stage {
        Stage::Start => 1.0,
        Stage::Mid => 0.5,
        Stage::End => 0.0,
    };

    let field = |j: usize, stage: Stage, mu: &StateTriple, mu_adv: &StateTriple| -> StateTriple {
        let k = n - 1 - j;
        let s = states.at_step(k as isize, theta_t(stage));
        let (lx, ly, lz) = (mu.x, mu.y, mu.z);
        let inf = (1.0 - control.lagged(k, xi)) * beta;
        let hx = 1.0 + lx * (-d - inf * s.y) + lz * c * s.y * s.z;
        let hy = -lx * inf * s.x + ly * (-a - p * s.z) + lz * c * s.x * s.z;
        let hz = 1.0 - ly * p * s.y + lz * (c * s.x * s.y - h);
        // Advanced terms: ζ(t + τ) = x(t), η(t + τ) = y(t).
        let (h_zeta, h_eta) = if k + m < n {
            let inf_adv = (1.0 - control.lagged(k + m, xi)) * beta;
            (mu_adv.y * inf_adv * s.y, mu_adv.y * inf_adv * s.x)
        } else {
            (0.0, 0.0)
        };
        // dμ/ds = −dλ/dt.
        StateTriple::new(hx + h_zeta, hy + h_eta, hz)
    };

    let reversed: Marched = march(n, grid.step, m, StateTriple::ZERO, StateTriple::ZERO, field)
        .map_err(|j| OcpError::NonFiniteAdjoint { t: grid.time(n - 1 - j) })?;

    let nodes = (0..=n).map(|k| reversed.samples[n - k].into()).collect();
    let derivs = (0..n)
        .map(|k| {
            let (g_start, g_end) = reversed.derivs[n - 1 - k];
            (g_end * -1.0, g_start * -1.0)
        })
        .collect();
    Ok(AdjointPath { grid: *grid, nodes, derivs })
}

/// `−1 + λx β x y − λy β ζ η`, the pointwise switching expression with all
/// arguments taken at the advanced time `t + ξ`.
#[inline]
pub fn switching_value(beta: f64, lx: f64, ly: f64, x: f64, y: f64, zeta: f64, eta: f64) -> f64 {
    -1.0 + lx * beta * x * y - ly * beta * zeta * eta
}

/// Switching function on interval `k`, sampled at the interval midpoint.
/// Identically `−1` on intervals inside `(tf − ξ, tf]`.
pub fn switching_function(config: &OcpConfig, states: &Trajectory, adjoints: &AdjointPath, k: usize) -> f64 {
    let grid = &config.grid;
    let n = grid.n_steps();
    let xi = grid.xi_steps;
    if k + xi >= n {
        return -1.0;
    }
    let idx = k + xi;
    let lam = adjoints.at_step(idx, 0.5);
    let cur = states.at_step(idx as isize, 0.5);
    let lagged = states.at_step(idx as isize - grid.tau_steps as isize, 0.5);
    switching_value(config.params.beta, lam.lx, lam.ly, cur.x, cur.y, lagged.x, lagged.y)
}

fn switching_samples(config: &OcpConfig, states: &Trajectory, adjoints: &AdjointPath) -> Vec<f64> {
    (0..config.grid.n_steps())
        .map(|k| switching_function(config, states, adjoints, k))
        .collect()
}

/// Left endpoint times of the intervals where a binary control changes value.
pub fn extract_switchings(control: &ControlGrid, grid: &GridConfig) -> Result<Vec<f64>, OcpError> {
    check_lengths(grid, control)?;
    if let Some((index, &value)) = control
        .values
        .iter()
        .enumerate()
        .find(|(_, &u)| u != 0.0 && u != 1.0)
    {
        return Err(OcpError::NonBinaryControl { index, value });
    }
    Ok(control
        .values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(i, _)| grid.time(i + 1))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSolution {
    pub control: ControlGrid,
    pub states: Trajectory,
    pub adjoints: AdjointPath,
    /// Switching function per interval, from the reported control.
    pub phi: Vec<f64>,
    pub objective: f64,
    pub switch_times: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest distance of a control value to `{0, 1}`.
    pub bang_residual: f64,
    /// `[start, end)` time ranges where the relaxed iterate stayed fractional
    /// or `|φ|` stayed inside the switch band.
    pub singular_arcs: Vec<(f64, f64)>,
    /// Objective of the relaxed iterate before any bang-bang realization.
    pub relaxed_objective: f64,
    /// Whether fractional arcs were replaced by a switching schedule.
    pub realized: bool,
}

impl ControlSolution {
    /// Intervals breaking `u = 1 ⇒ φ ≥ −band`, `u = 0 ⇒ φ ≤ band`, and the
    /// largest excess.
    pub fn complementarity_violation(&self, band: f64) -> (usize, f64) {
        let mut count = 0;
        let mut worst: f64 = 0.0;
        for (&u, &f) in self.control.values.iter().zip(&self.phi) {
            let excess = if u == 1.0 {
                -f - band
            } else if u == 0.0 {
                f - band
            } else {
                0.0
            };
            if excess > 0.0 {
                count += 1;
                worst = worst.max(excess);
            }
        }
        (count, worst)
    }
}

fn bang_residual(values: &[f64]) -> f64 {
    values.iter().map(|&u| u.min(1.0 - u).abs()).fold(0.0, f64::max)
}

fn is_fractional(u: f64) -> bool {
    u > SNAP_BAND && u < 1.0 - SNAP_BAND
}

/// Maximal `[start, end)` index runs where `pred` holds.
fn runs(len: usize, pred: impl Fn(usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for k in 0..=len {
        match (k < len && pred(k), start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push((s, k));
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn singular_arcs(phi: &[f64], band: f64, grid: &GridConfig) -> Vec<(f64, f64)> {
    runs(phi.len(), |k| phi[k].abs() < band)
        .into_iter()
        .filter(|(s, e)| e - s >= SINGULAR_RUN)
        .map(|(s, e)| (grid.time(s), grid.time(e)))
        .collect()
}

fn merge_arcs(mut arcs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    arcs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    for arc in arcs {
        match out.last_mut() {
            Some(last) if arc.0 <= last.1 => last.1 = last.1.max(arc.1),
            _ => out.push(arc),
        }
    }
    out
}

fn evaluate(config: &OcpConfig, control: &ControlGrid) -> Result<f64, OcpError> {
    objective(&simulate_controlled(config, control)?, control)
}

/// Replaces each fractional run by blocks of about `bang_period` days, each
/// holding `u = 1` for as many leading intervals as the block's relaxed mass.
/// Everything else is snapped to the nearer bound.
pub fn realize_bang_bang(values: &[f64], grid: &GridConfig, bang_period: f64) -> Vec<f64> {
    let mut out: Vec<f64> = values.iter().map(|&u| if u >= 0.5 { 1.0 } else { 0.0 }).collect();
    for (s, e) in runs(values.len(), |k| is_fractional(values[k])) {
        let len = e - s;
        let blocks = ((len as f64 * grid.step / bang_period).round() as usize).clamp(1, len);
        for b in 0..blocks {
            let lo = s + b * len / blocks;
            let hi = s + (b + 1) * len / blocks;
            let ones = values[lo..hi].iter().sum::<f64>().round() as usize;
            for (i, u) in out[lo..hi].iter_mut().enumerate() {
                *u = if i < ones { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

/// Interval averages of the bang-bang function that starts at `first` and
/// flips at each of the sorted switch positions (in step units).
pub fn averaged_schedule(first: f64, switches: &[f64], n: usize) -> Vec<f64> {
    let mut values = vec![0.0; n];
    let mut u = first;
    let mut a = 0.0;
    for b in switches.iter().copied().chain(std::iter::once(n as f64)) {
        let b = b.clamp(a, n as f64);
        if u != 0.0 && b > a {
            let (ka, kb) = (a.floor() as usize, (b.ceil() as usize).min(n));
            for (k, v) in values.iter_mut().enumerate().take(kb).skip(ka) {
                let lo = a.max(k as f64);
                let hi = b.min(k as f64 + 1.0);
                *v += u * (hi - lo).max(0.0);
            }
        }
        u = 1.0 - u;
        a = b;
    }
    values
}

fn drop_collisions(switches: &mut Vec<f64>, first: &mut f64, n: usize) -> bool {
    let before = switches.len();
    while switches.first().is_some_and(|&s| s <= 0.0) {
        switches.remove(0);
        *first = 1.0 - *first;
    }
    while switches.last().is_some_and(|&s| s >= n as f64) {
        switches.pop();
    }
    let mut out: Vec<f64> = Vec::with_capacity(switches.len());
    for &s in switches.iter() {
        if out.last().is_some_and(|&p| s - p < 1e-9) {
            out.pop();
        } else {
            out.push(s);
        }
    }
    *switches = out;
    switches.len() != before
}

/// Optimises the switch times of a binary control (switching-time
/// parametrisation). Switch positions are real, the interval holding a switch
/// carries the covered fraction, and `∂J/∂s_i = h φ_k (u_before − u_after)`
/// comes from one adjoint sweep. BFGS with backtracking keeps the switches
/// ordered; switches that meet cancel. The result is rounded back to the grid.
pub fn optimize_switch_times(config: &OcpConfig, values: &[f64]) -> Result<(Vec<f64>, f64), OcpError> {
    let n = values.len();
    let h = config.grid.step;
    let u0 = config.history.u0;
    let mut first = values.first().copied().unwrap_or(0.0);
    let mut switches: Vec<f64> = (1..n).filter(|&k| values[k] != values[k - 1]).map(|k| k as f64).collect();

    let eval = |first: f64, sw: &[f64]| -> Result<(f64, Vec<f64>), OcpError> {
        let control = ControlGrid { values: averaged_schedule(first, sw, n), u0 };
        let states = simulate_controlled(config, &control)?;
        let j = objective(&states, &control)?;
        let adjoints = backward_sweep(config, &states, &control)?;
        let grad = sw
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let k = (s.floor() as usize).min(n - 1);
                let before = if i % 2 == 0 { first } else { 1.0 - first };
                h * switching_function(config, &states, &adjoints, k) * (2.0 * before - 1.0)
            })
            .collect();
        Ok((j, grad))
    };

    'restart: loop {
        let dim = switches.len();
        if dim == 0 {
            break;
        }
        let (mut j, mut g) = eval(first, &switches)?;
        let mut inv = DMatrix::<f64>::identity(dim, dim);
        for iter in 0..200 {
            let gn = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if gn < 1e-10 {
                break 'restart;
            }
            // Ascent direction.
            let gv = DVector::from_column_slice(&g);
            let mut dir = &inv * &gv;
            if dir.dot(&gv) <= 0.0 {
                inv = DMatrix::identity(dim, dim);
                dir = gv.clone();
            }
            if iter == 0 {
                // First move of at most one step.
                dir /= dir.amax().max(1e-300);
            }
            let mut alpha_max = f64::INFINITY;
            for i in 0..dim {
                let lo = if i == 0 { 0.0 } else { switches[i - 1] };
                let hi = if i + 1 == dim { n as f64 } else { switches[i + 1] };
                let di = dir[i];
                let dl = if i == 0 { 0.0 } else { dir[i - 1] };
                let dh = if i + 1 == dim { 0.0 } else { dir[i + 1] };
                if di - dh > 0.0 {
                    alpha_max = alpha_max.min((hi - switches[i]) / (di - dh));
                }
                if dl - di > 0.0 {
                    alpha_max = alpha_max.min((switches[i] - lo) / (dl - di));
                }
            }
            let mut alpha = alpha_max.min(1.0);
            let slope = dir.dot(&gv);
            let mut accepted = None;
            while alpha > 1e-12 {
                let trial: Vec<f64> = switches.iter().zip(dir.iter()).map(|(s, d)| s + alpha * d).collect();
                let (jt, gt) = eval(first, &trial)?;
                if jt >= j + 1e-4 * alpha * slope {
                    accepted = Some((trial, jt, gt));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((trial, jt, gt)) = accepted else { break 'restart };
            let step = DVector::from_iterator(dim, trial.iter().zip(&switches).map(|(a, b)| a - b));
            // Curvature pair for the maximisation of J (minimisation of −J).
            let y = DVector::from_iterator(dim, g.iter().zip(&gt).map(|(a, b)| a - b));
            let sy = step.dot(&y);
            switches = trial;
            j = jt;
            g = gt;
            if alpha >= alpha_max && drop_collisions(&mut switches, &mut first, n) {
                continue 'restart;
            }
            if sy > 1e-300 {
                if iter == 0 {
                    inv *= sy / y.dot(&y);
                }
                let rho = 1.0 / sy;
                let eye = DMatrix::<f64>::identity(dim, dim);
                let left = &eye - rho * &step * y.transpose();
                let right = &eye - rho * &y * step.transpose();
                inv = &left * &inv * &right + rho * &step * step.transpose();
            }
        }
        break;
    }

    let mut grid_switches: Vec<usize> = switches.iter().map(|&s| s.round() as usize).collect();
    grid_switches.sort_unstable();
    let mut grid_switches = cancel_pairs(grid_switches);

    // Rounding each switch on its own can land on the worse neighbour; polish
    // with single-step moves on the grid.
    let binary = |sw: &[usize]| -> Vec<f64> {
        averaged_schedule(first, &sw.iter().map(|&s| s as f64).collect::<Vec<_>>(), n)
            .into_iter()
            .map(|u| u.round())
            .collect()
    };
    let mut best = evaluate(config, &ControlGrid { values: binary(&grid_switches), u0 })?;
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..grid_switches.len() {
            for dir in [1isize, -1] {
                let pos = grid_switches[i] as isize + dir;
                let lo = if i == 0 { 0 } else { grid_switches[i - 1] as isize };
                let hi = if i + 1 == grid_switches.len() { n as isize } else { grid_switches[i + 1] as isize };
                if pos < lo || pos > hi {
                    continue;
                }
                let mut trial = grid_switches.clone();
                trial[i] = pos as usize;
                let j = evaluate(config, &ControlGrid { values: binary(&trial), u0 })?;
                if j > best + 1e-12 {
                    best = j;
                    grid_switches = trial;
                    improved = true;
                    break;
                }
            }
            if improved {
                break;
            }
        }
    }
    let grid_switches = cancel_pairs(grid_switches);
    Ok((binary(&grid_switches), best))
}

fn cancel_pairs(sw: Vec<usize>) -> Vec<usize> {
    // Two switches at the same index describe an empty arc.
    let mut out: Vec<usize> = Vec::with_capacity(sw.len());
    for s in sw {
        if out.last() == Some(&s) {
            out.pop();
        } else {
            out.push(s);
        }
    }
    out
}

/// Forward-backward sweep with relaxed bang-bang projection.
///
/// Starts from `u ≡ 0`. Each iteration integrates the states, the adjoints and
/// the switching function, sets `u* = 1` where `φ > band`, `0` where
/// `φ < −band` and keeps the previous value otherwise, then moves
/// `u ← (1 − ρ) u + ρ u*`. The step `ρ` starts at the relaxation factor and is
/// halved until `J` increases, so the iterates ascend monotonically; with no
/// ascent step left the iterate is stationary. Stops once the largest change
/// drops below the tolerance, or once the projection gap
/// `h Σ φ_k (u*_k − u_k)` falls below the tolerance relative to `|J|`.
///
/// Values within [`SNAP_BAND`] of a bound are snapped. Runs that stay
/// fractional mark singular arcs; they are replaced by a switching schedule
/// ([`realize_bang_bang`]) whose switch times are then tuned by
/// [`optimize_switch_times`]. The reported objective belongs to the final
/// binary control.
pub fn fbsm_solve(config: &OcpConfig) -> Result<ControlSolution, OcpError> {
    config.validate()?;
    let n = config.grid.n_steps();
    let opts = config.options;
    let mut control = ControlGrid::constant(n, 0.0, config.history.u0);
    let mut converged = false;
    let mut iterations = 0;
    let mut states = simulate_controlled(config, &control)?;
    let mut current = objective(&states, &control)?;

    while iterations < opts.max_iterations {
        iterations += 1;
        let adjoints = backward_sweep(config, &states, &control)?;
        let phi = switching_samples(config, &states, &adjoints);
        let target: Vec<f64> = control
            .values
            .iter()
            .zip(&phi)
            .map(|(&u, &f)| {
                if f > opts.switch_band {
                    1.0
                } else if f < -opts.switch_band {
                    0.0
                } else {
                    u
                }
            })
            .collect();
        let gap: f64 = config.grid.step * phi.iter().zip(&target).zip(&control.values).map(|((f, t), u)| f * (t - u)).sum::<f64>();
        // For fixed states the projection is the best vertex, so `gap` bounds
        // the first-order gain still available.
        if gap <= opts.convergence_tol * current.abs() {
            converged = true;
            break;
        }
        let mut rho = opts.relaxation;
        let mut accepted = None;
        while rho >= opts.relaxation / 4096.0 && accepted.is_none() {
            let trial = ControlGrid {
                values: control
                    .values
                    .iter()
                    .zip(&target)
                    .map(|(&u, &t)| ((1.0 - rho) * u + rho * t).clamp(0.0, 1.0))
                    .collect(),
                u0: control.u0,
            };
            let trial_states = simulate_controlled(config, &trial)?;
            let j = objective(&trial_states, &trial)?;
            if j > current {
                accepted = Some((trial, trial_states, j));
            } else {
                rho *= 0.5;
            }
        }
        let Some((next, next_states, j)) = accepted else {
            converged = true;
            break;
        };
        let change = next
            .values
            .iter()
            .zip(&control.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        control = next;
        states = next_states;
        current = j;
        if change < opts.convergence_tol {
            converged = true;
            break;
        }
    }

    let relaxed_objective = current;
    let fractional = runs(n, |k| is_fractional(control.values[k]));
    let realized = !fractional.is_empty();
    if realized {
        let guess = realize_bang_bang(&control.values, &config.grid, opts.bang_period);
        control.values = optimize_switch_times(config, &guess)?.0;
    } else {
        for u in &mut control.values {
            *u = if *u >= 0.5 { 1.0 } else { 0.0 };
        }
    }

    let states = simulate_controlled(config, &control)?;
    let adjoints = backward_sweep(config, &states, &control)?;
    let phi = switching_samples(config, &states, &adjoints);
    let objective = objective(&states, &control)?;
    let residual = bang_residual(&control.values);
    let switch_times = extract_switchings(&control, &config.grid)?;
    let mut arcs = singular_arcs(&phi, opts.switch_band, &config.grid);
    arcs.extend(
        fractional
            .iter()
            .filter(|(s, e)| e - s >= SINGULAR_RUN)
            .map(|&(s, e)| (config.grid.time(s), config.grid.time(e))),
    );

    Ok(ControlSolution {
        control,
        states,
        adjoints,
        phi,
        objective,
        switch_times,
        converged,
        iterations,
        bang_residual: residual,
        singular_arcs: merge_arcs(arcs),
        relaxed_objective,
        realized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(tau: f64, xi: f64, step: f64) -> OcpConfig {
        OcpConfig::new(
            ModelParams::baseline(0.5),
            GridConfig::new(0.0, 10.0, step, tau, xi).unwrap(),
            HistorySpec::new(5.0, 1.0, 2.0, 0.0).unwrap(),
            SolverOptions::default(),
        )
        .unwrap()
    }

    fn synthetic(grid: GridConfig, state: StateTriple) -> Trajectory {
        let hist = HistorySpec::new(state.x, state.y, state.z, 0.0).unwrap();
        integrate(|_, _, _| StateTriple::ZERO, &hist, &grid, None).unwrap()
    }

    #[test]
    fn objective_constant_integrands() {
        let grid = GridConfig::new(0.0, 10.0, 0.01, 0.0, 0.0).unwrap();
        let zero = synthetic(grid, StateTriple::ZERO);
        let ones = ControlGrid::constant(1000, 1.0, 0.0);
        assert!((objective(&zero, &ones).unwrap() + 10.0).abs() < 1e-10);
        let tens = synthetic(grid, StateTriple::new(10.0, 0.0, 0.0));
        let zeros = ControlGrid::constant(1000, 0.0, 0.0);
        assert!((objective(&tens, &zeros).unwrap() - 100.0).abs() < 1e-10);
        let short = ControlGrid::constant(999, 0.0, 0.0);
        assert!(matches!(objective(&tens, &short), Err(OcpError::GridMismatch { .. })));
    }

    #[test]
    fn adjoint_of_frozen_zero_state() {
        let cfg = config(0.5, 0.1, 0.01);
        let zero = synthetic(cfg.grid, StateTriple::ZERO);
        let u = ControlGrid::constant(1000, 0.0, 0.0);
        let adj = backward_sweep(&cfg, &zero, &u).unwrap();
        assert_eq!(adj.terminal(), AdjointTriple::default());
        for (k, node) in adj.nodes.iter().enumerate() {
            // μ' = 1 − 0.1 μ in reversed time for both λx and λz.
            let rest = cfg.grid.tf - cfg.grid.time(k);
            let want = (1.0 - (-0.1 * rest).exp()) / 0.1;
            assert!((node.lx - want).abs() < 1e-10);
            assert!((node.lz - want).abs() < 1e-10);
            assert!(node.ly.abs() < 1e-12);
        }
    }

    #[test]
    fn switching_tail_and_zero_adjoint() {
        let cfg = config(0.5, 0.1, 0.01);
        let u = ControlGrid::constant(1000, 0.0, 0.0);
        let states = simulate_controlled(&cfg, &u).unwrap();
        let adj = backward_sweep(&cfg, &states, &u).unwrap();
        for k in 990..1000 {
            assert_eq!(switching_function(&cfg, &states, &adj, k), -1.0);
        }
        let zero_adj = AdjointPath {
            grid: cfg.grid,
            nodes: vec![AdjointTriple::default(); 1001],
            derivs: vec![(StateTriple::ZERO, StateTriple::ZERO); 1000],
        };
        for k in (0..1000).step_by(37) {
            assert_eq!(switching_function(&cfg, &states, &zero_adj, k), -1.0);
        }
    }

    #[test]
    fn switching_without_delays_reduces() {
        // Constant-in-time data makes the midpoint interpolant exact.
        let cfg = config(0.0, 0.0, 0.1);
        let s = StateTriple::new(3.7, 0.45, 1.2);
        let states = synthetic(cfg.grid, s);
        let (lx, ly) = (1.9, -0.6);
        let nodes = vec![AdjointTriple { lx, ly, lz: 0.3 }; 101];
        let adj = AdjointPath {
            grid: cfg.grid,
            nodes,
            derivs: vec![(StateTriple::ZERO, StateTriple::ZERO); 100],
        };
        let want = -1.0 + 0.5 * s.x * s.y * (lx - ly);
        for k in [0, 50, 99] {
            assert!((switching_function(&cfg, &states, &adj, k) - want).abs() < 1e-13);
        }
    }

    #[test]
    fn switchings_extraction() {
        let grid = GridConfig::new(0.0, 10.0, 0.01, 0.0, 0.0).unwrap();
        assert!(extract_switchings(&ControlGrid::constant(1000, 0.0, 0.0), &grid).unwrap().is_empty());
        let mut values = vec![1.0; 500];
        values.extend(vec![0.0; 500]);
        let t = extract_switchings(&ControlGrid { values, u0: 0.0 }, &grid).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t[0] - 5.0).abs() < 1e-12);

        let grid = GridConfig::new(0.0, 1.0, 0.1, 0.0, 0.0).unwrap();
        let alt = ControlGrid { values: (0..10).map(|k| (k % 2) as f64).collect(), u0: 0.0 };
        assert_eq!(extract_switchings(&alt, &grid).unwrap().len(), 9);
        let bad = ControlGrid { values: vec![0.5; 10], u0: 0.0 };
        assert!(matches!(extract_switchings(&bad, &grid), Err(OcpError::NonBinaryControl { index: 0, .. })));
    }

    #[test]
    fn zero_iterations_returns_initial_guess() {
        let mut cfg = config(0.0, 0.0, 0.01);
        cfg.options.max_iterations = 0;
        let sol = fbsm_solve(&cfg).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 0);
        assert!(sol.control.values.iter().all(|&u| u == 0.0));
        assert!(sol.switch_times.is_empty());
    }

    #[test]
    fn config_validation() {
        let params = ModelParams::baseline(0.5);
        let hist = HistorySpec::new(5.0, 1.0, 2.0, 0.0).unwrap();
        let grid = GridConfig::new(0.0, 1.0, 0.1, 1.0, 0.0).unwrap();
        assert!(matches!(
            OcpConfig::new(params, grid, hist, SolverOptions::default()),
            Err(OcpError::HorizonTooShort { .. })
        ));
        let grid = GridConfig::new(0.0, 10.0, 0.1, 0.5, 0.1).unwrap();
        let opts = SolverOptions { relaxation: 0.0, ..Default::default() };
        assert!(matches!(OcpConfig::new(params, grid, hist, opts), Err(OcpError::BadRelaxation(_))));
    }

    #[test]
    fn singular_run_detection() {
        let grid = GridConfig::new(0.0, 3.0, 0.1, 0.0, 0.0).unwrap();
        let mut phi = vec![1.0; 30];
        for v in &mut phi[5..17] {
            *v = 0.0;
        }
        for v in &mut phi[20..25] {
            *v = 0.0;
        }
        let arcs = singular_arcs(&phi, 1e-6, &grid);
        assert_eq!(arcs.len(), 1);
        assert!((arcs[0].0 - 0.5).abs() < 1e-12 && (arcs[0].1 - 1.7).abs() < 1e-12);
    }

    #[test]
    fn averaged_schedule_fractions() {
        let v = averaged_schedule(1.0, &[2.25, 4.0, 4.5], 6);
        assert_eq!(v, vec![1.0, 1.0, 0.25, 0.0, 0.5, 0.0]);
        let v = averaged_schedule(0.0, &[3.0], 4);
        assert_eq!(v, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(averaged_schedule(0.0, &[1.5, 1.75], 3), vec![0.0, 0.25, 0.0]);
        assert_eq!(cancel_pairs(vec![1, 3, 3, 5]), vec![1, 5]);
    }

    #[test]
    fn realization_keeps_block_mass() {
        let grid = GridConfig::new(0.0, 2.0, 0.1, 0.0, 0.0).unwrap();
        let mut relaxed = vec![0.98; 4];
        relaxed.extend(vec![0.5; 10]);
        relaxed.extend(vec![0.01; 6]);
        let out = realize_bang_bang(&relaxed, &grid, 0.5);
        assert!(out[..4].iter().all(|&u| u == 1.0));
        assert!(out[14..].iter().all(|&u| u == 0.0));
        // Two blocks of five intervals, round(2.5) = 3 leading ones each.
        assert_eq!(&out[4..14], &[1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
