use std::fs;
use std::process::Command;

use delayed_hiv::scenario::{execute, parse_config, run, Cell, Mode, OutputFormat, Table};

const BASELINE: &str = "\
params.lambda = 1
params.d = 0.1
params.a = 0.2
params.p = 1
params.c = 0.1
params.h = 0.1
";

fn scenario(beta: f64, extra: &str) -> String {
    format!("{BASELINE}params.beta = {beta}\n{extra}")
}

fn number(cell: &Cell) -> f64 {
    match cell {
        Cell::Num(v) => *v,
        Cell::Text(t) => panic!("expected a number, got {t:?}"),
    }
}

#[test]
fn simulate_reaches_the_stable_equilibrium() {
    for (beta, target, tol) in [(0.00025, "E0", 0.01), (0.5, "E2", 0.05)] {
        let text = scenario(
            beta,
            &format!("mode = simulate\ndelay.tau = 10\ngrid.step = 0.001\nsimulate.target = {target}\n"),
        );
        let out = execute(&parse_config(&text, None).unwrap()).unwrap();
        let s = &out.summary;
        let gap = ["x", "y", "z"]
            .iter()
            .map(|c| (s.number(&format!("{c}_final")).unwrap() - s.number(&format!("target_{c}")).unwrap()).abs())
            .fold(0.0, f64::max);
        assert!(gap < tol, "{target}: {gap}");
        assert!(s.number("settling_time").unwrap() < 500.0);
        let t = out.data.column("t").unwrap();
        assert_eq!(t.len(), 500_001);
    }
}

#[test]
fn runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for format in ["csv", "json"] {
        let mut outputs = Vec::new();
        for name in ["a", "b"] {
            let text = scenario(
                0.5,
                &format!(
                    "mode = ocp\ndelay.tau = 0.5\ndelay.xi = 0.1\noutput.format = {format}\noutput.path = {}\n",
                    dir.path().join(format!("{name}.{format}")).display()
                ),
            );
            let report = run(&parse_config(&text, None).unwrap()).unwrap();
            assert!(report.converged);
            outputs.push(report.outputs.iter().map(|p| fs::read(p).unwrap()).collect::<Vec<_>>());
        }
        assert_eq!(outputs[0], outputs[1], "{format} outputs differ between reruns");
    }
}

#[test]
fn summary_files_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    for (format, parse) in [
        (OutputFormat::Csv, Table::from_csv as fn(&str) -> Option<Table>),
        (OutputFormat::Json, Table::from_json as fn(&str) -> Option<Table>),
    ] {
        let mut config = parse_config(&scenario(0.5, "mode = ocp\ndelay.tau = 1\ndelay.xi = 0.3\n"), None).unwrap();
        config.format = format;
        config.output_path = Some(dir.path().join(format!("ocp.{}", format.extension())));
        let report = run(&config).unwrap();
        let data = parse(&fs::read_to_string(&report.outputs[0]).unwrap()).unwrap();
        let summary = parse(&fs::read_to_string(&report.outputs[1]).unwrap()).unwrap();
        assert_eq!(data.columns, ["t", "x", "y", "z", "u", "phi", "lx", "ly", "lz"]);
        assert_eq!(data.rows.len(), 1001);
        let table = report.summary.to_table();
        assert_eq!(summary, table);
        let u: Vec<f64> = data.column("u").unwrap().into_iter().map(number).collect();
        assert!(u.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn stability_sweep_has_single_e0_transition() {
    // t1 = β − 0.02 changes sign once inside the range.
    let text = scenario(
        0.5,
        "mode = sweep\nsweep.variable = beta\nsweep.start = 0.001\nsweep.stop = 0.1\nsweep.count = 41\nsweep.mode = stability\n",
    );
    let out = execute(&parse_config(&text, None).unwrap()).unwrap();
    assert_eq!(out.summary.number("E0_transitions"), Some(1.0));
    let at = out.summary.number("E0_transition_1").unwrap();
    assert!((at - 0.02).abs() < 0.1 / 40.0 + 1e-12, "{at}");
    assert_eq!(out.data.rows.len(), 41);
}

#[test]
fn equilibria_table_lists_all_three() {
    let out = execute(&parse_config(&scenario(0.5, ""), Some(Mode::Equilibria)).unwrap()).unwrap();
    let kinds: Vec<&Cell> = out.data.column("kind").unwrap();
    assert_eq!(kinds, [&Cell::Text("E0".into()), &Cell::Text("E1".into()), &Cell::Text("E2".into())]);
    let x: Vec<f64> = out.data.column("x").unwrap().into_iter().map(number).collect();
    assert!((x[0] - 10.0).abs() < 1e-12 && (x[2] - 5.0).abs() < 1e-12);
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_delayed-hiv")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let good = write("good.cfg", &scenario(0.5, "delay.tau = 10\n"));
    let out_path = dir.path().join("st.json").to_string_lossy().into_owned();
    let ok = cli(&["stability", "--config", &good, "--out", &out_path, "--format", "json"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("st.summary.json").exists());
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["converged"], serde_json::Value::Bool(true));

    let bad = write("bad.cfg", &scenario(0.5, "delay.tau = 0.5\ngrid.step = 0.4\n"));
    let err = cli(&["simulate", "--config", &bad]);
    assert_eq!(err.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&err.stderr).contains("delay not an integer multiple of step"));

    let missing = cli(&["simulate", "--config", &dir.path().join("nope.cfg").to_string_lossy()]);
    assert_eq!(missing.status.code(), Some(1));

    // Iteration cap of one cannot meet the stopping rule.
    let capped = write("cap.cfg", &scenario(0.5, "ocp.max_iterations = 1\n"));
    let out_path = dir.path().join("ocp.csv").to_string_lossy().into_owned();
    let nc = cli(&["ocp", "--config", &capped, "--out", &out_path]);
    assert_eq!(nc.status.code(), Some(3));
    assert!(dir.path().join("ocp.csv").exists());

    let short = write("short.cfg", &scenario(0.5, "delay.tau = 1\n"));
    let printed = cli(&["ocp", "--config", &short, "--print-config"]);
    assert_eq!(printed.status.code(), Some(0));
    let text = String::from_utf8(printed.stdout).unwrap();
    assert_eq!(parse_config(&text, None).unwrap(), parse_config(&scenario(0.5, "delay.tau = 1\n"), Some(Mode::Ocp)).unwrap());
}
