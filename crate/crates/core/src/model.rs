//! Model parameters, threshold quantities, equilibria and vector fields of the
//! delayed HIV / CTL system.
//!
//! State variables:
//!
//! | Symbol | Meaning |
//! |--------|---------|
//! | `x` | uninfected CD4+ T cells |
//! | `y` | infected CD4+ T cells |
//! | `z` | CTL effectors |
//!
//! The uncontrolled system is
//!
//! ```text
//! x' = λ − d x − β x y
//! y' = β x(t−τ) y(t−τ) − a y − p y z
//! z' = c x y z − h z
//! ```
//!
//! and treatment multiplies both infection terms by `1 − u(t−ξ)`.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{name}` must be strictly positive and finite, got {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("control value {0} outside [0, 1]")]
    ControlOutOfRange(f64),
}

/// The seven biological rates of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Source rate of CD4+ T cells (cells/day).
    pub lambda_src: f64,
    /// Decay rate of uninfected cells (1/day).
    pub d: f64,
    /// Infection rate (1/(cells·day)).
    pub beta: f64,
    /// Death rate of infected cells not due to CTL killing (1/day).
    pub a: f64,
    /// CTL killing rate (1/day).
    pub p: f64,
    /// Immune activation rate (1/day).
    pub c: f64,
    /// CTL death rate (1/day).
    pub h: f64,
}

impl ModelParams {
    /// Builds a validated parameter set.
    pub fn new(
        lambda_src: f64,
        d: f64,
        beta: f64,
        a: f64,
        p: f64,
        c: f64,
        h: f64,
    ) -> Result<Self, ModelError> {
        let params = Self { lambda_src, d, beta, a, p, c, h };
        params.validate()?;
        Ok(params)
    }

    /// Reference rates used throughout the numerical experiments, with the
    /// infection rate left free (admissible range `[0.00025, 0.5]`).
    pub fn baseline(beta: f64) -> Self {
        Self { lambda_src: 1.0, d: 0.1, beta, a: 0.2, p: 1.0, c: 0.1, h: 0.1 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, value) in self.named() {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::InvalidParameter { name, value });
            }
        }
        Ok(())
    }

    /// Name/value pairs in canonical order.
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("lambda", self.lambda_src),
            ("d", self.d),
            ("beta", self.beta),
            ("a", self.a),
            ("p", self.p),
            ("c", self.c),
            ("h", self.h),
        ]
    }

    /// Returns a copy with one named rate replaced. Unknown names yield `None`.
    pub fn with(&self, name: &str, value: f64) -> Option<Self> {
        let mut out = *self;
        match name {
            "lambda" => out.lambda_src = value,
            "d" => out.d = value,
            "beta" => out.beta = value,
            "a" => out.a = value,
            "p" => out.p = value,
            "c" => out.c = value,
            "h" => out.h = value,
            _ => return None,
        }
        Some(out)
    }
}

/// A point of the state space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateTriple {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl StateTriple {
    pub const ZERO: Self = Self { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn sup_norm(&self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn min_component(&self) -> f64 {
        self.x.min(self.y).min(self.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for StateTriple {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for StateTriple {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for StateTriple {
    type Output = Self;
    fn mul(self, k: f64) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
}

impl fmt::Display for StateTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Sign-determining combinations of the rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    /// `βλ − da`: sign decides whether the infection-free state persists.
    pub t1: f64,
    /// `λc − βh`: must be positive for an immune-active equilibrium.
    pub t2: f64,
    /// `β(λc − βh) − acd`: separates the CTL-free and CTL equilibria.
    pub t3: f64,
}

pub fn thresholds(params: &ModelParams) -> ThresholdReport {
    let ModelParams { lambda_src: l, d, beta: b, a, c, h, .. } = *params;
    let t1 = b * l - d * a;
    let t2 = l * c - b * h;
    let t3 = b * t2 - a * c * d;
    ThresholdReport { t1, t2, t3 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EquilibriumKind {
    /// Infection-free.
    E0,
    /// Infected, no CTL response.
    E1,
    /// Infected with an active CTL response.
    E2,
}

impl fmt::Display for EquilibriumKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::E0 => "E0",
            Self::E1 => "E1",
            Self::E2 => "E2",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Equilibrium {
    pub kind: EquilibriumKind,
    pub point: StateTriple,
    /// Coordinates nonnegative and the defining threshold inequalities hold.
    pub admissible: bool,
}

/// All equilibria whose formulas are finite, plus notes about omitted ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSet {
    pub thresholds: ThresholdReport,
    pub equilibria: Vec<Equilibrium>,
    pub diagnostics: Vec<String>,
}

impl EquilibriumSet {
    pub fn get(&self, kind: EquilibriumKind) -> Option<&Equilibrium> {
        self.equilibria.iter().find(|e| e.kind == kind)
    }

    pub fn admissible(&self) -> impl Iterator<Item = &Equilibrium> {
        self.equilibria.iter().filter(|e| e.admissible)
    }
}

pub fn infection_free(params: &ModelParams) -> StateTriple {
    StateTriple::new(params.lambda_src / params.d, 0.0, 0.0)
}

pub fn equilibria(params: &ModelParams) -> EquilibriumSet {
    let ModelParams { lambda_src: l, d, beta: b, a, p, c, h } = *params;
    let th = thresholds(params);
    let mut equilibria = vec![Equilibrium {
        kind: EquilibriumKind::E0,
        point: infection_free(params),
        admissible: true,
    }];
    let mut diagnostics = Vec::new();

    // E1 formulas only divide by β and a, both positive.
    let e1 = StateTriple::new(a / b, (l * b - d * a) / (b * a), 0.0);
    equilibria.push(Equilibrium {
        kind: EquilibriumKind::E1,
        point: e1,
        admissible: th.t1 > 0.0 && th.t3 < 0.0,
    });

    if th.t2 == 0.0 {
        diagnostics.push("E2 omitted: λc − βh = 0 makes its coordinates singular".to_string());
    } else {
        let e2 = StateTriple::new(
            th.t2 / (c * d),
            d * h / th.t2,
            b * th.t2 / (c * d * p) - a / p,
        );
        if e2.is_finite() {
            equilibria.push(Equilibrium {
                kind: EquilibriumKind::E2,
                point: e2,
                admissible: th.t2 > 0.0 && th.t3 > 0.0,
            });
        } else {
            diagnostics.push(format!("E2 omitted: non-finite coordinates {e2}"));
        }
    }

    EquilibriumSet { thresholds: th, equilibria, diagnostics }
}

/// Right-hand side of the untreated system. `delayed` supplies `x(t−τ)` and
/// `y(t−τ)`; its `z` component is ignored.
#[inline]
pub fn uncontrolled_rhs(
    params: &ModelParams,
    current: &StateTriple,
    delayed: &StateTriple,
) -> StateTriple {
    infection_rhs(params, current, delayed, params.beta)
}

/// Right-hand side of the treated system, with `u_delayed = u(t−ξ)`.
pub fn controlled_rhs(
    params: &ModelParams,
    current: &StateTriple,
    delayed: &StateTriple,
    u_delayed: f64,
) -> Result<StateTriple, ModelError> {
    check_control(u_delayed)?;
    Ok(controlled_rhs_unchecked(params, current, delayed, u_delayed))
}

#[inline]
pub(crate) fn controlled_rhs_unchecked(
    params: &ModelParams,
    current: &StateTriple,
    delayed: &StateTriple,
    u_delayed: f64,
) -> StateTriple {
    infection_rhs(params, current, delayed, (1.0 - u_delayed) * params.beta)
}

pub(crate) fn check_control(u: f64) -> Result<(), ModelError> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(ModelError::ControlOutOfRange(u))
    }
}

#[inline]
fn infection_rhs(
    params: &ModelParams,
    cur: &StateTriple,
    del: &StateTriple,
    beta_eff: f64,
) -> StateTriple {
    let ModelParams { lambda_src: l, d, a, p, c, h, .. } = *params;
    StateTriple::new(
        l - d * cur.x - beta_eff * cur.x * cur.y,
        beta_eff * del.x * del.y - a * cur.y - p * cur.y * cur.z,
        c * cur.x * cur.y * cur.z - h * cur.z,
    )
}
