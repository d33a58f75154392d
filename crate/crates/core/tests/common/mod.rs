//! Delay-free reference implementations shared by the oracle and acceptance suites.
//! Written from the model equations only, without touching the library solvers.

#![allow(dead_code)]

use delayed_hiv::ModelParams;

pub type V3 = [f64; 3];

pub fn axpy(a: V3, k: V3, w: f64) -> V3 {
    [a[0] + w * k[0], a[1] + w * k[1], a[2] + w * k[2]]
}

fn field(p: &ModelParams, s: V3, u: f64) -> V3 {
    let [x, y, z] = s;
    let inf = (1.0 - u) * p.beta * x * y;
    [p.lambda_src - p.d * x - inf, inf - p.a * y - p.p * y * z, p.c * x * y * z - p.h * z]
}

fn rk4<F: Fn(V3) -> V3>(f: F, s: V3, step: f64) -> V3 {
    let k1 = f(s);
    let k2 = f(axpy(s, k1, step / 2.0));
    let k3 = f(axpy(s, k2, step / 2.0));
    let k4 = f(axpy(s, k3, step));
    let mut out = s;
    for i in 0..3 {
        out[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// State nodes on a grid of `step / substeps` under a piecewise-constant
/// control with one value per `step`.
pub fn ode_states(p: &ModelParams, y0: V3, step: f64, u: &[f64], substeps: usize) -> Vec<V3> {
    let fine = step / substeps as f64;
    let mut out = vec![y0];
    let mut s = y0;
    for &uk in u {
        for _ in 0..substeps {
            s = rk4(|v| field(p, v, uk), s, fine);
            out.push(s);
        }
    }
    out
}

/// Trapezoidal `∫(x + z) − ∫u` on the control grid.
pub fn ode_objective(p: &ModelParams, y0: V3, step: f64, u: &[f64]) -> f64 {
    let s = ode_states(p, y0, step, u, 1);
    let gain: f64 = s.windows(2).map(|w| 0.5 * (w[0][0] + w[0][2] + w[1][0] + w[1][2])).sum();
    step * (gain - u.iter().sum::<f64>())
}

/// Costate rate for the delay-free problem, `λ' = −∂H/∂state`.
fn costate_rate(p: &ModelParams, s: V3, l: V3, u: f64) -> V3 {
    let [x, y, z] = s;
    let [lx, ly, lz] = l;
    let g = (1.0 - u) * p.beta;
    [
        -(1.0 + lx * (-p.d - g * y) + ly * g * y + lz * p.c * y * z),
        -(-lx * g * x + ly * (g * x - p.a - p.p * z) + lz * p.c * x * z),
        -(1.0 - ly * p.p * y + lz * (p.c * x * y - p.h)),
    ]
}

/// Classic sweep on the delay-free problem with Frank–Wolfe steps
/// `ρ_k = 2 / (k + 2)` toward the bang-bang maximiser of the Hamiltonian.
/// Returns the relaxed control and its objective.
pub fn oracle_fbsm(p: &ModelParams, y0: V3, step: f64, n: usize, iterations: usize) -> (Vec<f64>, f64) {
    let mut u = vec![0.0; n];
    for it in 0..iterations {
        // Half-step state nodes give the RK4 midpoints of the backward pass.
        let s = ode_states(p, y0, step, &u, 2);
        let mut l = [0.0; 3];
        let mut phi = vec![0.0; n];
        for k in (0..n).rev() {
            let (s_end, s_mid, s_start) = (s[2 * k + 2], s[2 * k + 1], s[2 * k]);
            let l_end = l;
            let k1 = costate_rate(p, s_end, l, u[k]);
            let k2 = costate_rate(p, s_mid, axpy(l, k1, -step / 2.0), u[k]);
            let k3 = costate_rate(p, s_mid, axpy(l, k2, -step / 2.0), u[k]);
            let k4 = costate_rate(p, s_start, axpy(l, k3, -step), u[k]);
            for i in 0..3 {
                l[i] -= step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            // ∂H/∂u at the interval midpoint, costate averaged over the ends.
            let lm = [0.5 * (l[0] + l_end[0]), 0.5 * (l[1] + l_end[1])];
            phi[k] = -1.0 + (lm[0] - lm[1]) * p.beta * s_mid[0] * s_mid[1];
        }
        let rho = 2.0 / (it as f64 + 2.0);
        for (uk, f) in u.iter_mut().zip(&phi) {
            let target = if *f > 0.0 { 1.0 } else { 0.0 };
            *uk = (1.0 - rho) * *uk + rho * target;
        }
    }
    let j = ode_objective(p, y0, step, &u);
    (u, j)
}
