use delayed_hiv::model::uncontrolled_rhs;
use delayed_hiv::{integrate, GridConfig, HistorySpec, ModelParams, StateTriple, Trajectory};
use proptest::prelude::*;

fn run(params: ModelParams, hist: (f64, f64, f64), tf: f64, step: f64, tau: f64) -> Trajectory {
    let grid = GridConfig::new(0.0, tf, step, tau, 0.0).unwrap();
    let history = HistorySpec::new(hist.0, hist.1, hist.2, 0.0).unwrap();
    integrate(|c, d, _| uncontrolled_rhs(&params, c, d), &history, &grid, None).unwrap()
}

/// Plain RK4 on the delay-free system, written out component by component.
fn ode_rk4(p: &ModelParams, y0: [f64; 3], step: f64, n: usize) -> Vec<[f64; 3]> {
    let f = |s: [f64; 3]| -> [f64; 3] {
        let [x, y, z] = s;
        [
            p.lambda_src - p.d * x - p.beta * x * y,
            p.beta * x * y - p.a * y - p.p * y * z,
            p.c * x * y * z - p.h * z,
        ]
    };
    let axpy = |a: [f64; 3], k: [f64; 3], w: f64| [a[0] + w * k[0], a[1] + w * k[1], a[2] + w * k[2]];
    let mut out = vec![y0];
    let mut s = y0;
    for _ in 0..n {
        let k1 = f(s);
        let k2 = f(axpy(s, k1, step / 2.0));
        let k3 = f(axpy(s, k2, step / 2.0));
        let k4 = f(axpy(s, k3, step));
        for i in 0..3 {
            s[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out.push(s);
    }
    out
}

#[test]
fn zero_delay_matches_plain_ode_rk4() {
    let params = ModelParams::baseline(0.5);
    for step in [0.05, 0.01] {
        let traj = run(params, (5.0, 1.0, 2.0), 50.0, step, 0.0);
        let reference = ode_rk4(&params, [5.0, 1.0, 2.0], step, traj.grid.n_steps());
        let err = traj
            .samples
            .iter()
            .zip(&reference)
            .map(|(a, r)| (*a - StateTriple::new(r[0], r[1], r[2])).sup_norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "step {step}: sup error {err:e}");
    }
}

#[test]
fn convergence_order_at_least_three() {
    let params = ModelParams::baseline(0.5);
    let end = |step: f64| run(params, (5.0, 1.0, 2.0), 50.0, step, 10.0).last();
    let h = 0.2;
    let reference = end(h / 4.0);
    let e1 = (end(h) - reference).sup_norm();
    let e2 = (end(h / 2.0) - reference).sup_norm();
    let ratio = e1 / e2;
    assert!(ratio >= 8.0, "error ratio {ratio} ({e1:e} / {e2:e})");
}

/// Large infected histories drive `z` into the hundreds before the delayed
/// inflow switches off, so these runs use a step that keeps RK4 stable.
const STIFF_STEP: f64 = 0.001;

#[test]
fn nonnegative_over_long_runs() {
    for beta in [0.00025, 0.0202, 0.5] {
        for tau in [0.0, 1.0, 10.0] {
            for hist in [(45.0, 3.0, 20.0), (5.0, 1.0, 2.0), (0.0, 0.5, 0.0)] {
                let traj = run(ModelParams::baseline(beta), hist, 500.0, STIFF_STEP, tau);
                let low = traj.samples.iter().map(|s| s.min_component()).fold(f64::INFINITY, f64::min);
                assert!(low >= -1e-9, "β {beta}, τ {tau}, {hist:?}: min {low}");
            }
        }
    }
}

#[test]
fn bit_identical_reruns() {
    let a = run(ModelParams::baseline(0.5), (5.0, 1.0, 2.0), 100.0, 0.05, 10.0);
    let b = run(ModelParams::baseline(0.5), (5.0, 1.0, 2.0), 100.0, 0.05, 10.0);
    assert!(a.samples.iter().zip(&b.samples).all(|(p, q)| p.to_array().map(f64::to_bits) == q.to_array().map(f64::to_bits)));
}

#[test]
fn sample_reproduces_nodes_and_history() {
    let traj = run(ModelParams::baseline(0.5), (5.0, 1.0, 2.0), 20.0, 0.05, 1.0);
    for k in [0, 7, 100, 400] {
        let t = traj.grid.time(k);
        assert_eq!(traj.sample(t).unwrap(), traj.samples[k]);
    }
    assert_eq!(traj.sample(-0.5).unwrap(), StateTriple::new(5.0, 1.0, 2.0));
    assert!(traj.sample(-1.5).is_err());
    assert!(traj.sample(20.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn orthant_is_invariant(
        beta in 0.00025f64..0.5,
        quarter_days in 0usize..41,
        x0 in 0.0f64..50.0,
        y0 in 0.0f64..5.0,
        z0 in 0.0f64..20.0,
    ) {
        let traj = run(ModelParams::baseline(beta), (x0, y0, z0), 50.0, STIFF_STEP, quarter_days as f64 * 0.25);
        for s in &traj.samples {
            prop_assert!(s.is_finite());
            prop_assert!(s.min_component() >= -1e-9);
        }
    }
}
