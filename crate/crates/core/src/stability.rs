//! Linearisation, characteristic functions and local stability tests for the
//! three equilibria.
//!
//! The characteristic function of the linearised delay system at an
//! equilibrium is `Δ(s) = det(sI − A1 − e^{−sτ} A2)`. Closed forms are
//! provided for each equilibrium and checked against the determinant in tests.

use std::fmt;

use nalgebra::Matrix3;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{equilibria, infection_free, thresholds, EquilibriumKind, ModelParams, StateTriple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StabilityError {
    #[error("λc − βh = {0} must be positive for the CTL equilibrium analysis")]
    NonPositiveT2(f64),
}

/// Instantaneous and delayed Jacobian blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearizationPair {
    pub a1: Matrix3<f64>,
    pub a2: Matrix3<f64>,
}

pub fn linearize(params: &ModelParams, eq: &StateTriple) -> LinearizationPair {
    let ModelParams { d, beta: b, a, p, c, h, .. } = *params;
    let StateTriple { x, y, z } = *eq;
    #[rustfmt::skip]
    let a1 = Matrix3::new(
        -d - b * y, -b * x,     0.0,
        0.0,        -a - p * z, -p * y,
        c * y * z,  c * x * z,  c * x * y - h,
    );
    #[rustfmt::skip]
    let a2 = Matrix3::new(
        0.0,   0.0,   0.0,
        b * y, b * x, 0.0,
        0.0,   0.0,   0.0,
    );
    LinearizationPair { a1, a2 }
}

/// `det(sI − A1 − e^{−sτ} A2)`.
pub fn char_det(pair: &LinearizationPair, tau: f64, s: Complex64) -> Complex64 {
    let e = (-s * tau).exp();
    let m = Matrix3::from_fn(|i, j| {
        let diag = if i == j { s } else { Complex64::new(0.0, 0.0) };
        diag - pair.a1[(i, j)] - e * pair.a2[(i, j)]
    });
    m.determinant()
}

/// Factored characteristic function at the infection-free equilibrium,
/// `(d + s)(h + s)(ad + ds − βλe^{−sτ})/d`.
pub fn char_e0(params: &ModelParams, tau: f64, s: Complex64) -> Complex64 {
    let ModelParams { lambda_src: l, d, beta: b, a, h, .. } = *params;
    let e = (-s * tau).exp();
    (s + d) * (s + h) * (a * d + s * d - e * (b * l)) / d
}

/// Closed form at the CTL-free infected equilibrium, written as
///
/// ```text
/// (sβ² − βλc + β²h + acd)(−as² − a²s + a²s e^{−sτ} − λβs − λβa + a²d e^{−sτ}) / (aβ²)
/// ```
///
/// This expression equals `−Δ(s)`: same zeros, opposite sign.
pub fn char_e1(params: &ModelParams, tau: f64, s: Complex64) -> Complex64 {
    let ModelParams { lambda_src: l, d, beta: b, a, c, h, .. } = *params;
    let e = (-s * tau).exp();
    let first = s * (b * b) - b * l * c + b * b * h + a * c * d;
    let second = -s * s * a - s * (a * a) + s * e * (a * a) - s * (l * b) - l * b * a + e * (a * a * d);
    first * second / (a * b * b)
}

/// Coefficients of `s³ + A s² + B s + C − (K₂ s² + K₁ s) e^{−sτ}` at the CTL
/// equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CharCoeffsE2 {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `K₂ = β(λc − βh)/(cd)`, multiplies `−s² e^{−sτ}`.
    pub delayed_quadratic: f64,
    /// `K₁ = β(λc − βh)/c`, multiplies `−s e^{−sτ}`.
    pub delayed_linear: f64,
}

impl CharCoeffsE2 {
    pub fn new(params: &ModelParams) -> Result<Self, StabilityError> {
        let ModelParams { lambda_src: l, d, beta: b, a, c, h, .. } = *params;
        let t2 = l * c - b * h;
        if t2 == 0.0 {
            return Err(StabilityError::NonPositiveT2(t2));
        }
        let ca = (l * l * c * c * b + d * d * l * c * c - 2.0 * l * c * b * b * h + b * b * b * h * h)
            / (t2 * c * d);
        let cb = (c * l * d * b + c * l * b * h - c * h * a * d - b * b * h * h) / (c * d);
        let cc = -(-b * l * c + b * b * h + a * c * d) * h / c;
        Ok(Self {
            a: ca,
            b: cb,
            c: cc,
            delayed_quadratic: b * t2 / (c * d),
            delayed_linear: b * t2 / c,
        })
    }

    pub fn eval(&self, tau: f64, s: Complex64) -> Complex64 {
        let e = (-s * tau).exp();
        let poly = ((s + self.a) * s + self.b) * s + self.c;
        poly - (s * s * self.delayed_quadratic + s * self.delayed_linear) * e
    }

    /// Restriction to real `s`, together with its derivative.
    pub fn eval_real(&self, tau: f64, s: f64) -> (f64, f64) {
        let e = (-s * tau).exp();
        let (k2, k1) = (self.delayed_quadratic, self.delayed_linear);
        let value = ((s + self.a) * s + self.b) * s + self.c - (k2 * s * s + k1 * s) * e;
        let slope = (3.0 * s + 2.0 * self.a) * s + self.b - (2.0 * k2 * s + k1) * e
            + tau * (k2 * s * s + k1 * s) * e;
        (value, slope)
    }
}

/// `Δ(s)` at the CTL equilibrium via [`CharCoeffsE2`].
pub fn char_e2(params: &ModelParams, tau: f64, s: Complex64) -> Result<Complex64, StabilityError> {
    Ok(CharCoeffsE2::new(params)?.eval(tau, s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    LocallyAsymptoticallyStable,
    Unstable,
    CriticalCase,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::LocallyAsymptoticallyStable => "locally_asymptotically_stable",
            Self::Unstable => "unstable",
            Self::CriticalCase => "critical_case",
            Self::Inconclusive => "inconclusive",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub kind: EquilibriumKind,
    pub verdict: Verdict,
    pub rationale: String,
    /// Named quantities the verdict was read from.
    pub evidence: Vec<(String, f64)>,
}

impl StabilityVerdict {
    fn new(kind: EquilibriumKind, verdict: Verdict, rationale: impl Into<String>) -> Self {
        Self { kind, verdict, rationale: rationale.into(), evidence: Vec::new() }
    }

    fn with(mut self, name: &str, value: f64) -> Self {
        self.evidence.push((name.to_string(), value));
        self
    }

    pub fn evidence_value(&self, name: &str) -> Option<f64> {
        self.evidence.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Infection-free equilibrium: delay-independent verdict from the sign of
/// `βλ − da`.
pub fn classify_e0(params: &ModelParams) -> StabilityVerdict {
    let ModelParams { lambda_src: l, d, beta: b, a, .. } = *params;
    let t1 = thresholds(params).t1;
    // Squared crossing frequency of ad + ds − βλe^{−sτ} on the imaginary axis.
    let w2 = (l * l * b * b - d * d * a * a) / (d * d);
    let (verdict, why) = if t1 < 0.0 {
        (
            Verdict::LocallyAsymptoticallyStable,
            "βλ − da < 0: roots −d, −h, (βλ − da)/d at τ = 0 and no imaginary-axis crossing (w² < 0) for any τ",
        )
    } else if t1 > 0.0 {
        (Verdict::Unstable, "βλ − da > 0: a + s − βλe^{−sτ}/d has a positive real root for every τ")
    } else {
        (Verdict::CriticalCase, "βλ − da = 0: s = 0 is a root, all others have negative real part")
    };
    StabilityVerdict::new(EquilibriumKind::E0, verdict, why)
        .with("t1", t1)
        .with("crossing_w2", w2)
}

/// CTL-free infected equilibrium under the standing hypotheses
/// `βλ − da > 0` and `λc − βh > 0`.
pub fn classify_e1(params: &ModelParams) -> StabilityVerdict {
    let ModelParams { lambda_src: l, d, beta: b, a, .. } = *params;
    let th = thresholds(params);
    let base = |v, why: &str| {
        StabilityVerdict::new(EquilibriumKind::E1, v, why)
            .with("t1", th.t1)
            .with("t2", th.t2)
            .with("t3", th.t3)
    };
    if !(th.t1 > 0.0 && th.t2 > 0.0) {
        return base(Verdict::Inconclusive, "hypotheses not met (need βλ − da > 0 and λc − βh > 0)");
    }
    let real_root = th.t3 / (b * b);
    let out = if th.t3 < 0.0 {
        base(
            Verdict::LocallyAsymptoticallyStable,
            "β(λc − βh) − acd < 0: real root negative, τ = 0 quadratic Routh–Hurwitz positive, no imaginary-axis crossing",
        )
    } else if th.t3 > 0.0 {
        base(Verdict::Unstable, "β(λc − βh) − acd > 0: positive real root (βλc − β²h − acd)/β²")
    } else {
        base(Verdict::CriticalCase, "β(λc − βh) − acd = 0: zero root")
    };
    out.with("real_root", real_root)
        .with("rh_quadratic", 1.0 / (b * b))
        .with("rh_linear", l / (a * b))
        .with("rh_constant", (l * b - a * d) / (b * b))
        .with("crossing_contradiction", a * a * d * d - l * l * b * b)
}

/// Routh–Hurwitz data for the undelayed cubic `s³ + D s² + E s + F` at the
/// CTL equilibrium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouthHurwitzE2 {
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub de_minus_f: f64,
    pub stable_at_tau0: bool,
}

pub fn routh_hurwitz_e2(params: &ModelParams) -> Result<RouthHurwitzE2, StabilityError> {
    let ModelParams { lambda_src: l, d, beta: b, a, c, h, .. } = *params;
    let t2 = l * c - b * h;
    if !(t2 > 0.0) {
        return Err(StabilityError::NonPositiveT2(t2));
    }
    let cd = d * l * c / t2;
    let ce = (b * l * c - a * c * d + d * b * b - b * b * h) * h / (c * d);
    let cf = (b * l * c - b * b * h - a * c * d) * h / c;
    let de_minus_f = h * b * (c * l * d * b + h * (c * l * b - c * a * d - b * b * h)) / (t2 * c);
    let stable_at_tau0 = cd > 0.0 && ce > 0.0 && cf > 0.0 && de_minus_f > 0.0;
    Ok(RouthHurwitzE2 { d: cd, e: ce, f: cf, de_minus_f, stable_at_tau0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RootClass {
    RealPositive,
    RealZero,
    RealNegative,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubicRoot {
    pub re: f64,
    pub im: f64,
    pub class: RootClass,
}

/// `Q w⁶ + R w⁴ + S w² + T`, whose positive roots in `v = w²` are the
/// candidate imaginary-axis crossing frequencies of the CTL equilibrium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossingSextic {
    pub q: f64,
    pub r: f64,
    pub s: f64,
    pub t: f64,
    /// Roots of `v³ + (R/Q) v² + (S/Q) v + T/Q`.
    pub v_roots: Vec<CubicRoot>,
}

impl CrossingSextic {
    pub fn monic(&self) -> [f64; 3] {
        [self.r / self.q, self.s / self.q, self.t / self.q]
    }

    /// Frequencies `w = √v` for the real positive roots.
    pub fn crossing_frequencies(&self) -> Vec<f64> {
        self.v_roots
            .iter()
            .filter(|r| r.class == RootClass::RealPositive)
            .map(|r| r.re.sqrt())
            .collect()
    }
}

/// Roots of the monic cubic `v³ + c2 v² + c1 v + c0` as eigenvalues of its
/// companion matrix.
pub fn monic_cubic_roots(c2: f64, c1: f64, c0: f64) -> Vec<CubicRoot> {
    #[rustfmt::skip]
    let companion = Matrix3::new(
        0.0, 0.0, -c0,
        1.0, 0.0, -c1,
        0.0, 1.0, -c2,
    );
    let scale = 1.0 + c2.abs().max(c1.abs()).max(c0.abs());
    let mut roots: Vec<CubicRoot> = companion
        .complex_eigenvalues()
        .iter()
        .map(|z| {
            let class = if z.im.abs() > 1e-12 * scale {
                RootClass::Complex
            } else if z.re > 0.0 {
                RootClass::RealPositive
            } else if z.re < 0.0 {
                RootClass::RealNegative
            } else {
                RootClass::RealZero
            };
            let im = if class == RootClass::Complex { z.im } else { 0.0 };
            CubicRoot { re: z.re, im, class }
        })
        .collect();
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    roots
}

pub fn crossing_sextic_e2(params: &ModelParams) -> Result<CrossingSextic, StabilityError> {
    let ModelParams { lambda_src: l, d, beta: b, a, c, h, .. } = *params;
    let t2 = l * c - b * h;
    if !(t2 > 0.0) {
        return Err(StabilityError::NonPositiveT2(t2));
    }
    let (l2, l3, l4) = (l * l, l * l * l, l * l * l * l);
    let (b2, b3, b4, b5, b6) = (b * b, b.powi(3), b.powi(4), b.powi(5), b.powi(6));
    let (c2, c3, c4) = (c * c, c.powi(3), c.powi(4));
    let (d2, d3, d4) = (d * d, d.powi(3), d.powi(4));
    let (h2, h3, h4, h5, h6) = (h * h, h.powi(3), h.powi(4), h.powi(5), h.powi(6));
    let a2 = a * a;

    let q = l2 * c4 * d2 + b2 * h2 * c2 * d2 - 2.0 * l * c3 * d2 * b * h;

    let r = 6.0 * l2 * c3 * d * b2 * h2 + 2.0 * l2 * c4 * d2 * h * a + d4 * l2 * c4 + 2.0 * b4 * h4 * c * d
        - 2.0 * l3 * c4 * d * h * b
        + 2.0 * b2 * h3 * a * c2 * d2
        - 6.0 * b3 * h3 * l * c2 * d
        - 4.0 * l * c3 * d2 * b * h2 * a;

    let s = -2.0 * b6 * h5 * d - b6 * d2 * h4 - 2.0 * d3 * l3 * c4 * h * b - 2.0 * h3 * b3 * d3 * l * c2
        - 2.0 * b4 * h4 * d2 * a * c
        + 2.0 * d4 * l2 * c4 * h * a
        + 4.0 * d3 * l2 * c3 * b2 * h2
        + 4.0 * b5 * h3 * d2 * l * c
        - 6.0 * b3 * h4 * l * c2 * a * d
        - 2.0 * l2 * c3 * h2 * a * d2 * b2
        - 2.0 * l * c3 * h3 * a2 * d2 * b
        + 6.0 * l2 * c3 * h3 * a * d * b2
        - 2.0 * l3 * c4 * h2 * a * d * b
        + 4.0 * d2 * l * c2 * b3 * h3 * a
        + b6 * h6
        - 4.0 * b5 * h5 * l * c
        + 6.0 * b4 * h4 * l2 * c2
        - 4.0 * l3 * c3 * b3 * h3
        + l4 * c4 * h2 * b2
        - 2.0 * h2 * b * d4 * a * c3 * l
        + 6.0 * b5 * h4 * d * l * c
        + 2.0 * b4 * h5 * a * c * d
        - 6.0 * b4 * h3 * d * l2 * c2
        + l2 * c4 * h2 * a2 * d2
        - 5.0 * d2 * l2 * c2 * b4 * h2
        + 2.0 * d2 * l3 * c3 * b3 * h
        + 2.0 * d * l3 * c3 * b3 * h2
        + b2 * h4 * a2 * c2 * d2;

    let t = -4.0 * d2 * l3 * c3 * b3 * h3 - 4.0 * d2 * l * c * b5 * h5 + d2 * l4 * c4 * h2 * b2
        - 2.0 * h3 * b * d4 * a2 * c3 * l
        - 6.0 * h4 * b3 * d3 * a * c2 * l
        + h6 * b6 * d2
        + h4 * b2 * d4 * a2 * c2
        + 2.0 * h5 * b4 * d3 * a * c
        + 6.0 * h3 * b2 * d3 * a * c3 * l2
        - 2.0 * d3 * l3 * c4 * h2 * a * b
        + d4 * l2 * c4 * h2 * a2
        + 6.0 * d2 * l2 * c2 * b4 * h4;

    let v_roots = monic_cubic_roots(r / q, s / q, t / q);
    Ok(CrossingSextic { q, r, s, t, v_roots })
}

/// Sampling grid for the real-axis positivity check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealAxisScan {
    pub s_max: f64,
    pub n_samples: usize,
}

impl Default for RealAxisScan {
    fn default() -> Self {
        Self { s_max: 50.0, n_samples: 5000 }
    }
}

/// CTL equilibrium at a given delay. At `τ = 0` this is the Routh–Hurwitz
/// test; for `τ > 0` it certifies only that the real restriction `q(s)` of
/// the characteristic function has no root on `[0, s_max]`, by checking
/// `q(0) > 0` and `q′ > 0` on the sample grid and its midpoints.
pub fn classify_e2_at_tau(params: &ModelParams, tau: f64, scan: RealAxisScan) -> StabilityVerdict {
    let th = thresholds(params);
    let kind = EquilibriumKind::E2;
    let base = |v, why: &str| {
        StabilityVerdict::new(kind, v, why)
            .with("t2", th.t2)
            .with("t3", th.t3)
            .with("tau", tau)
    };
    if !(th.t2 > 0.0 && th.t3 > 0.0 && tau >= 0.0 && tau.is_finite()) {
        return base(
            Verdict::Inconclusive,
            "hypotheses not met (need λc − βh > 0, β(λc − βh) − acd > 0, τ ≥ 0)",
        );
    }

    if tau == 0.0 {
        let rh = routh_hurwitz_e2(params).expect("t2 > 0 checked above");
        // Routh array first column is 1, D, (DE − F)/D, F.
        let column = [rh.d, rh.de_minus_f / rh.d, rh.f];
        let (verdict, why) = if rh.stable_at_tau0 {
            (Verdict::LocallyAsymptoticallyStable, "τ = 0: Routh–Hurwitz D, E, F, DE − F > 0")
        } else if column.iter().any(|&v| v == 0.0 || !v.is_finite()) {
            (Verdict::CriticalCase, "τ = 0: Routh array has a zero entry")
        } else {
            (Verdict::Unstable, "τ = 0: Routh array sign change")
        };
        let mut out = base(verdict, why)
            .with("D", rh.d)
            .with("E", rh.e)
            .with("F", rh.f)
            .with("DE_minus_F", rh.de_minus_f);
        if rh.e <= 0.0 {
            out = out.with("E_nonpositive", rh.e);
        }
        return out;
    }

    let coeffs = CharCoeffsE2::new(params).expect("t2 > 0 checked above");
    let (q0, _) = coeffs.eval_real(tau, 0.0);
    let n = scan.n_samples.max(1);
    let dx = scan.s_max / n as f64;
    let mut min_slope = f64::INFINITY;
    for i in 0..=(2 * n) {
        let s = 0.5 * dx * i as f64;
        let (_, slope) = coeffs.eval_real(tau, s);
        min_slope = min_slope.min(slope);
    }
    let certified = q0 > 0.0 && min_slope > 0.0;
    let (verdict, why) = if certified {
        (
            Verdict::LocallyAsymptoticallyStable,
            "no nonnegative real roots: q(0) > 0 and q′ > 0 on the sampled half-line (real-axis check only)",
        )
    } else {
        (Verdict::Inconclusive, "real-axis check failed: q(0) ≤ 0 or q′ ≤ 0 at a sample")
    };
    let mut out = base(verdict, why)
        .with("q0", q0)
        .with("min_q_slope", min_slope)
        .with("s_max", scan.s_max)
        .with("n_samples", n as f64)
        .with("A", coeffs.a)
        .with("B", coeffs.b)
        .with("C", coeffs.c)
        .with("K2", coeffs.delayed_quadratic)
        .with("K1", coeffs.delayed_linear);
    if let Ok(sextic) = crossing_sextic_e2(params) {
        for (i, w) in sextic.crossing_frequencies().into_iter().enumerate() {
            out = out.with(&format!("crossing_w_{i}"), w);
        }
    }
    out
}

/// Verdicts for every equilibrium whose formulas are finite.
pub fn classify_all(params: &ModelParams, tau: f64, scan: RealAxisScan) -> Vec<StabilityVerdict> {
    let set = equilibria(params);
    let mut out = vec![classify_e0(params), classify_e1(params)];
    if set.get(EquilibriumKind::E2).is_some() {
        out.push(classify_e2_at_tau(params, tau, scan));
    }
    out
}

/// Roots that the analysis identifies in closed form, per equilibrium.
pub fn explicit_roots(params: &ModelParams, tau: f64) -> Vec<(EquilibriumKind, Complex64)> {
    let ModelParams { lambda_src: l, d, beta: b, a, h, .. } = *params;
    let th = thresholds(params);
    let mut out = vec![
        (EquilibriumKind::E0, Complex64::new(-d, 0.0)),
        (EquilibriumKind::E0, Complex64::new(-h, 0.0)),
        (EquilibriumKind::E1, Complex64::new(th.t3 / (b * b), 0.0)),
    ];
    if tau == 0.0 {
        out.push((EquilibriumKind::E0, Complex64::new((b * l - d * a) / d, 0.0)));
        if let Ok(rh) = routh_hurwitz_e2(params) {
            for r in monic_cubic_roots(rh.d, rh.e, rh.f) {
                out.push((EquilibriumKind::E2, Complex64::new(r.re, r.im)));
            }
        }
    }
    out
}

/// Determinant under the linearisation at the named equilibrium.
pub fn char_det_at(params: &ModelParams, kind: EquilibriumKind, tau: f64, s: Complex64) -> Option<Complex64> {
    let point = match kind {
        EquilibriumKind::E0 => infection_free(params),
        _ => equilibria(params).get(kind)?.point,
    };
    Some(char_det(&linearize(params, &point), tau, s))
}
