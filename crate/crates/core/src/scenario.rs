//! Scenario files, dispatch and deterministic export.
//!
//! A scenario is a flat UTF-8 `key = value` file. `#` starts a comment, keys
//! are dotted (`history.x0`). Every run writes one data table and one summary
//! table, both as CSV or JSON, with numbers printed to 17 significant digits.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{fbsm_solve, ControlSolution, OcpConfig, OcpError, SolverOptions};
use crate::dde::{integrate, GridConfig, GridError, HistorySpec, IntegrationError, Trajectory};
use crate::model::{equilibria, uncontrolled_rhs, EquilibriumKind, ModelParams, StateTriple};
use crate::stability::{classify_all, crossing_sextic_e2, routh_hurwitz_e2, RealAxisScan};

/// Error in a scenario file, located by key and (when known) line.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{}`{key}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
pub struct ConfigError {
    pub key: String,
    pub line: Option<usize>,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Self { key: key.into(), line, message: message.into() }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("cannot read `{path}`: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write `{path}`: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("{context}: {source}")]
    Integration { context: String, source: IntegrationError },
    #[error("{context}: {source}")]
    Ocp { context: String, source: OcpError },
}

impl ScenarioError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Read { .. } => 1,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Simulate,
    Equilibria,
    Stability,
    Ocp,
    Sweep,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Simulate, Mode::Equilibria, Mode::Stability, Mode::Ocp, Mode::Sweep];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Equilibria => "equilibria",
            Mode::Stability => "stability",
            Mode::Ocp => "ocp",
            Mode::Sweep => "sweep",
        }
    }

    fn default_step(self) -> f64 {
        if self == Mode::Ocp {
            0.01
        } else {
            0.05
        }
    }

    fn default_tf(self) -> f64 {
        if self == Mode::Ocp {
            10.0
        } else {
            500.0
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected simulate, equilibria, stability, ocp or sweep)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(format!("unknown format `{s}` (expected csv or json)")),
        }
    }
}

/// Parameter scan: the inner mode is repeated at `count` evenly spaced values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// A rate name (`lambda`, `d`, `beta`, `a`, `p`, `c`, `h`) or `tau`.
    pub variable: String,
    pub start: f64,
    pub stop: f64,
    pub count: usize,
    pub inner: Mode,
}

impl SweepSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let span = self.stop - self.start;
        (0..self.count)
            .map(|i| self.start + span * i as f64 / (self.count - 1) as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mode: Mode,
    pub params: ModelParams,
    pub tau: f64,
    pub xi: f64,
    pub t0: f64,
    pub tf: f64,
    pub step: f64,
    pub history: HistorySpec,
    pub ocp: SolverOptions,
    pub scan: RealAxisScan,
    /// Equilibrium used for the settling-time summary of a simulation.
    pub target: Option<EquilibriumKind>,
    pub epsilon: f64,
    pub sweep: Option<SweepSpec>,
    pub output_path: Option<PathBuf>,
    pub format: OutputFormat,
}

const KEYS: &[&str] = &[
    "mode",
    "params.lambda",
    "params.d",
    "params.beta",
    "params.a",
    "params.p",
    "params.c",
    "params.h",
    "delay.tau",
    "delay.xi",
    "grid.t0",
    "grid.tf",
    "grid.step",
    "history.x0",
    "history.y0",
    "history.z0",
    "history.u0",
    "ocp.max_iterations",
    "ocp.relaxation",
    "ocp.tol",
    "ocp.switch_band",
    "ocp.bang_period",
    "stability.s_max",
    "stability.n_samples",
    "simulate.target",
    "simulate.epsilon",
    "sweep.variable",
    "sweep.start",
    "sweep.stop",
    "sweep.count",
    "sweep.mode",
    "output.path",
    "output.format",
];

/// Parsed `key = value` pairs with their line numbers.
#[derive(Debug, Default)]
struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((key, value)) = body.split_once('=') else {
                return Err(ConfigError::new(body, Some(line), "expected `key = value`"));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::new(key, Some(line), "unknown key"));
            }
            if let Some((first, _)) = map.get(key) {
                return Err(ConfigError::new(key, Some(line), format!("duplicate key (first set on line {first})")));
            }
            map.insert(key.to_string(), (line, value.to_string()));
        }
        Ok(Self(map))
    }

    fn line(&self, key: &str) -> Option<usize> {
        self.0.get(key).map(|(l, _)| *l)
    }

    fn get<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>, ConfigError> {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, raw)) => raw
                .parse()
                .map(Some)
                .map_err(|_| ConfigError::new(key, Some(*line), format!("unparseable {what} `{raw}`"))),
        }
    }

    fn number(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        self.get::<f64>(key, "number")
    }

    fn number_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(self.number(key)?.unwrap_or(default))
    }

    fn required_number(&self, key: &str) -> Result<f64, ConfigError> {
        self.number(key)?.ok_or_else(|| ConfigError::new(key, None, "missing key"))
    }

    fn text<T: FromStr<Err = String>>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        match self.0.get(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e| ConfigError::new(key, Some(*line), e)),
        }
    }
}

fn parse_kind(s: &str) -> Result<EquilibriumKind, String> {
    match s {
        "E0" => Ok(EquilibriumKind::E0),
        "E1" => Ok(EquilibriumKind::E1),
        "E2" => Ok(EquilibriumKind::E2),
        _ => Err(format!("unknown equilibrium `{s}` (expected E0, E1 or E2)")),
    }
}

/// Parses and validates a scenario. `mode` overrides the file's `mode` key.
pub fn parse_config(text: &str, mode: Option<Mode>) -> Result<ScenarioConfig, ConfigError> {
    let e = Entries::parse(text)?;
    let mode = match (mode, e.text::<Mode>("mode")?) {
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => return Err(ConfigError::new("mode", None, "missing key")),
    };

    let mut rates = [0.0; 7];
    let names = ModelParams::baseline(1.0).named();
    for (slot, (name, _)) in rates.iter_mut().zip(names) {
        *slot = e.required_number(&format!("params.{name}"))?;
    }
    let [lambda, d, beta, a, p, c, h] = rates;
    let params = ModelParams::new(lambda, d, beta, a, p, c, h).map_err(|err| {
        let key = match &err {
            crate::model::ModelError::InvalidParameter { name, .. } => format!("params.{name}"),
            _ => "params".to_string(),
        };
        ConfigError::new(key.clone(), e.line(&key), err.to_string())
    })?;

    let tau = e.number_or("delay.tau", 0.0)?;
    let xi = e.number_or("delay.xi", 0.0)?;
    let t0 = e.number_or("grid.t0", 0.0)?;
    let tf = e.number_or("grid.tf", mode.default_tf())?;
    let step = e.number_or("grid.step", mode.default_step())?;
    let history = HistorySpec {
        x0: e.number_or("history.x0", 5.0)?,
        y0: e.number_or("history.y0", 1.0)?,
        z0: e.number_or("history.z0", 2.0)?,
        u0: e.number_or("history.u0", 0.0)?,
    };

    let defaults = SolverOptions::default();
    let ocp = SolverOptions {
        max_iterations: e.get("ocp.max_iterations", "integer")?.unwrap_or(defaults.max_iterations),
        relaxation: e.number_or("ocp.relaxation", defaults.relaxation)?,
        convergence_tol: e.number_or("ocp.tol", defaults.convergence_tol)?,
        switch_band: e.number_or("ocp.switch_band", defaults.switch_band)?,
        bang_period: e.number_or("ocp.bang_period", defaults.bang_period)?,
    };
    let scan_defaults = RealAxisScan::default();
    let scan = RealAxisScan {
        s_max: e.number_or("stability.s_max", scan_defaults.s_max)?,
        n_samples: e.get("stability.n_samples", "integer")?.unwrap_or(scan_defaults.n_samples),
    };
    let target = match e.0.get("simulate.target") {
        None => None,
        Some((line, raw)) => Some(parse_kind(raw).map_err(|m| ConfigError::new("simulate.target", Some(*line), m))?),
    };
    let epsilon = e.number_or("simulate.epsilon", 0.05)?;

    let sweep = if mode == Mode::Sweep {
        let need = |key: &str| ConfigError::new(key, None, "missing key (required in sweep mode)");
        let variable: String = e.get("sweep.variable", "name")?.ok_or_else(|| need("sweep.variable"))?;
        let inner = e.text::<Mode>("sweep.mode")?.unwrap_or(Mode::Stability);
        Some(SweepSpec {
            variable,
            start: e.number("sweep.start")?.ok_or_else(|| need("sweep.start"))?,
            stop: e.number("sweep.stop")?.ok_or_else(|| need("sweep.stop"))?,
            count: e.get("sweep.count", "integer")?.ok_or_else(|| need("sweep.count"))?,
            inner,
        })
    } else {
        None
    };

    let config = ScenarioConfig {
        mode,
        params,
        tau,
        xi,
        t0,
        tf,
        step,
        history,
        ocp,
        scan,
        target,
        epsilon,
        sweep,
        output_path: e.get::<String>("output.path", "path")?.map(PathBuf::from),
        format: e.text::<OutputFormat>("output.format")?.unwrap_or_default(),
    };
    validate(&config, &e)?;
    Ok(config)
}

fn grid_error(err: GridError, e: &Entries) -> ConfigError {
    let (key, message) = match &err {
        GridError::Incommensurate { what, .. } => {
            let key = if *what == "control" { "delay.xi" } else { "delay.tau" };
            (key.to_string(), format!("delay not an integer multiple of step ({err})"))
        }
        GridError::BadStep(_) => ("grid.step".to_string(), err.to_string()),
        GridError::EmptyInterval { .. } | GridError::RaggedInterval { .. } => ("grid.tf".to_string(), err.to_string()),
        GridError::BadHistory { name, .. } => (format!("history.{name}"), err.to_string()),
        _ => ("grid".to_string(), err.to_string()),
    };
    ConfigError::new(key.clone(), e.line(&key), message)
}

fn validate(config: &ScenarioConfig, e: &Entries) -> Result<(), ConfigError> {
    let grid = GridConfig::new(config.t0, config.tf, config.step, config.tau, config.xi).map_err(|g| grid_error(g, e))?;
    config.history.validate().map_err(|g| grid_error(g, e))?;
    let at = |key: &str, msg: String| ConfigError::new(key, e.line(key), msg);
    if !(config.scan.s_max > 0.0) || config.scan.n_samples == 0 {
        return Err(at("stability.s_max", "real-axis scan needs s_max > 0 and n_samples ≥ 1".into()));
    }
    if !(config.epsilon > 0.0) {
        return Err(at("simulate.epsilon", format!("must be positive, got {}", config.epsilon)));
    }
    if let Some(sweep) = &config.sweep {
        if sweep.inner == Mode::Sweep {
            return Err(at("sweep.mode", "a sweep cannot nest another sweep".into()));
        }
        if sweep.count == 0 {
            return Err(at("sweep.count", "must be at least 1".into()));
        }
        if sweep.variable != "tau" && config.params.with(&sweep.variable, 1.0).is_none() {
            return Err(at("sweep.variable", format!("unknown variable `{}`", sweep.variable)));
        }
        if sweep.variable == "tau" {
            for v in sweep.values() {
                grid.with_delays(v, config.xi).map_err(|g| grid_error(g, e)).map_err(|mut err| {
                    err.key = "sweep.start".into();
                    err.line = e.line("sweep.start");
                    err
                })?;
            }
        }
    }
    if config.mode == Mode::Ocp || config.sweep.as_ref().is_some_and(|s| s.inner == Mode::Ocp) {
        OcpConfig::new(config.params, grid, config.history, config.ocp)
            .map_err(|o| ConfigError::new("ocp", None, o.to_string()))?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig, ScenarioError> {
    let text = fs::read_to_string(path).map_err(|source| ScenarioError::Read { path: path.to_path_buf(), source })?;
    Ok(parse_config(&text, None)?)
}

impl ScenarioConfig {
    pub fn grid(&self) -> GridConfig {
        GridConfig::new(self.t0, self.tf, self.step, self.tau, self.xi).expect("validated on load")
    }

    /// Resolved configuration in the input format; parses back to `self`.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("mode", self.mode.to_string());
        for (name, value) in self.params.named() {
            put(&format!("params.{name}"), fmt_num(value));
        }
        put("delay.tau", fmt_num(self.tau));
        put("delay.xi", fmt_num(self.xi));
        put("grid.t0", fmt_num(self.t0));
        put("grid.tf", fmt_num(self.tf));
        put("grid.step", fmt_num(self.step));
        put("history.x0", fmt_num(self.history.x0));
        put("history.y0", fmt_num(self.history.y0));
        put("history.z0", fmt_num(self.history.z0));
        put("history.u0", fmt_num(self.history.u0));
        put("ocp.max_iterations", self.ocp.max_iterations.to_string());
        put("ocp.relaxation", fmt_num(self.ocp.relaxation));
        put("ocp.tol", fmt_num(self.ocp.convergence_tol));
        put("ocp.switch_band", fmt_num(self.ocp.switch_band));
        put("ocp.bang_period", fmt_num(self.ocp.bang_period));
        put("stability.s_max", fmt_num(self.scan.s_max));
        put("stability.n_samples", self.scan.n_samples.to_string());
        if let Some(t) = self.target {
            put("simulate.target", t.to_string());
        }
        put("simulate.epsilon", fmt_num(self.epsilon));
        if let Some(s) = &self.sweep {
            put("sweep.variable", s.variable.clone());
            put("sweep.start", fmt_num(s.start));
            put("sweep.stop", fmt_num(s.stop));
            put("sweep.count", s.count.to_string());
            put("sweep.mode", s.inner.to_string());
        }
        if let Some(p) = &self.output_path {
            put("output.path", p.display().to_string());
        }
        put("output.format", self.format.extension().to_string());
        out
    }
}

/// A table cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Column-labelled rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

/// `{:.16e}`: 17 significant digits, exact on re-read.
pub fn fmt_num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Num(v) => fmt_num(*v),
                    Cell::Text(s) => s.clone(),
                })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// One object holding an array per column.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{");
        for (i, name) in self.columns.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str("\n  ");
            out.push_str(&serde_json::to_string(name).expect("string serialises"));
            out.push_str(": [");
            for (j, row) in self.rows.iter().enumerate() {
                if j > 0 {
                    out.push_str(", ");
                }
                match &row[i] {
                    Cell::Num(v) if v.is_finite() => out.push_str(&fmt_num(*v)),
                    Cell::Num(_) => out.push_str("null"),
                    Cell::Text(s) => out.push_str(&serde_json::to_string(s).expect("string serialises")),
                }
            }
            out.push(']');
        }
        out.push_str("\n}\n");
        out
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => self.to_json(),
        }
    }

    /// Reads back a CSV produced by [`Table::to_csv`]. Cells that parse as
    /// numbers become [`Cell::Num`].
    pub fn from_csv(text: &str) -> Option<Self> {
        let mut lines = text.lines();
        let columns: Vec<String> = lines.next()?.split(',').map(str::to_string).collect();
        let rows = lines
            .map(|l| {
                l.split(',')
                    .map(|c| c.parse::<f64>().map(Cell::Num).unwrap_or_else(|_| Cell::Text(c.to_string())))
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>();
        rows.iter().all(|r| r.len() == columns.len()).then_some(Self { columns, rows })
    }

    /// Reads back a JSON document produced by [`Table::to_json`].
    pub fn from_json(text: &str) -> Option<Self> {
        let value: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text).ok()?;
        // Column order is not kept by the map; recover it from the text.
        let mut columns: Vec<(usize, String)> =
            value.keys().map(|k| (text.find(&format!("\"{k}\":")).unwrap_or(usize::MAX), k.clone())).collect();
        columns.sort();
        let columns: Vec<String> = columns.into_iter().map(|(_, k)| k).collect();
        let arrays: Vec<&Vec<serde_json::Value>> =
            columns.iter().map(|c| value[c].as_array()).collect::<Option<Vec<_>>>()?;
        let len = arrays.first().map_or(0, |a| a.len());
        let rows = (0..len)
            .map(|j| {
                arrays
                    .iter()
                    .map(|a| match &a[j] {
                        serde_json::Value::String(s) => Cell::Text(s.clone()),
                        serde_json::Value::Null => Cell::Num(f64::NAN),
                        v => Cell::Num(v.as_f64().unwrap_or(f64::NAN)),
                    })
                    .collect()
            })
            .collect();
        Some(Self { columns, rows })
    }
}

/// Named scalar results of a run, in emission order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub entries: Vec<(String, Cell)>,
}

impl Summary {
    fn put(&mut self, name: impl Into<String>, value: impl Into<Cell>) {
        self.entries.push((name.into(), value.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Cell> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn number(&self, name: &str) -> Option<f64> {
        match self.get(name)? {
            Cell::Num(v) => Some(*v),
            Cell::Text(_) => None,
        }
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["quantity", "value"]);
        for (n, v) in &self.entries {
            t.push(vec![Cell::Text(n.clone()), v.clone()]);
        }
        t
    }
}

/// Computed data of a run before anything is written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub data: Table,
    pub summary: Summary,
    /// `false` only when an optimal-control solve hit its iteration cap.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ScenarioConfig,
    pub outputs: Vec<PathBuf>,
    pub duration_seconds: f64,
    pub summary: Summary,
    pub converged: bool,
}

impl RunReport {
    pub fn exit_code(&self) -> i32 {
        if self.converged {
            0
        } else {
            3
        }
    }
}

/// First time after which the trajectory stays within `epsilon` (sup norm) of
/// `target` through the final node; `None` if the final node is outside.
pub fn settling_time(traj: &Trajectory, target: &StateTriple, epsilon: f64) -> Option<f64> {
    let inside = |s: &StateTriple| (*s - *target).sup_norm() <= epsilon;
    let mut first = None;
    for (k, s) in traj.samples.iter().enumerate().rev() {
        if !inside(s) {
            break;
        }
        first = Some(k);
    }
    first.map(|k| traj.grid.time(k))
}

fn simulate(params: &ModelParams, grid: &GridConfig, history: &HistorySpec) -> Result<Trajectory, IntegrationError> {
    let p = *params;
    integrate(|c, d, _| uncontrolled_rhs(&p, c, d), history, grid, None)
}

fn context(config: &ScenarioConfig) -> String {
    format!("{} run (β = {}, τ = {}, ξ = {})", config.mode, config.params.beta, config.tau, config.xi)
}

fn run_simulate(config: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    let traj = simulate(&config.params, &config.grid(), &config.history)
        .map_err(|source| ScenarioError::Integration { context: context(config), source })?;
    let mut data = Table::new(&["t", "x", "y", "z"]);
    for (t, s) in traj.times().zip(&traj.samples) {
        data.push(vec![t.into(), s.x.into(), s.y.into(), s.z.into()]);
    }
    let last = traj.last();
    let mut summary = Summary::default();
    summary.put("t_final", config.tf);
    summary.put("x_final", last.x);
    summary.put("y_final", last.y);
    summary.put("z_final", last.z);
    if let Some(kind) = config.target {
        let set = equilibria(&config.params);
        match set.get(kind) {
            Some(eq) => {
                summary.put("target_x", eq.point.x);
                summary.put("target_y", eq.point.y);
                summary.put("target_z", eq.point.z);
                let t = settling_time(&traj, &eq.point, config.epsilon);
                summary.put("settling_time", t.unwrap_or(f64::NAN));
            }
            None => summary.put("settling_time", format!("{kind} undefined")),
        }
    }
    Ok(RunOutput { data, summary, converged: true })
}

fn run_equilibria(config: &ScenarioConfig) -> RunOutput {
    let set = equilibria(&config.params);
    let th = set.thresholds;
    let mut data = Table::new(&["kind", "x", "y", "z", "admissible", "t1", "t2", "t3"]);
    for eq in &set.equilibria {
        data.push(vec![
            eq.kind.to_string().into(),
            eq.point.x.into(),
            eq.point.y.into(),
            eq.point.z.into(),
            eq.admissible.into(),
            th.t1.into(),
            th.t2.into(),
            th.t3.into(),
        ]);
    }
    let mut summary = Summary::default();
    summary.put("t1", th.t1);
    summary.put("t2", th.t2);
    summary.put("t3", th.t3);
    for eq in &set.equilibria {
        summary.put(format!("{}_admissible", eq.kind), eq.admissible);
    }
    for (i, note) in set.diagnostics.iter().enumerate() {
        summary.put(format!("diagnostic_{}", i + 1), note.replace(',', ";"));
    }
    RunOutput { data, summary, converged: true }
}

fn run_stability(config: &ScenarioConfig) -> RunOutput {
    let params = &config.params;
    let set = equilibria(params);
    let verdicts = classify_all(params, config.tau, config.scan);
    let mut data = Table::new(&["kind", "admissible", "verdict", "quantity", "value"]);
    let mut summary = Summary::default();
    let th = set.thresholds;
    summary.put("tau", config.tau);
    summary.put("t1", th.t1);
    summary.put("t2", th.t2);
    summary.put("t3", th.t3);
    for v in &verdicts {
        let admissible = set.get(v.kind).is_some_and(|e| e.admissible);
        let mut row = |q: &str, value: Cell| {
            data.push(vec![v.kind.to_string().into(), admissible.into(), v.verdict.to_string().into(), q.into(), value]);
        };
        row("rationale", v.rationale.replace(',', ";").into());
        for (name, value) in &v.evidence {
            row(name, (*value).into());
        }
        if v.kind == EquilibriumKind::E2 {
            if let Ok(rh) = routh_hurwitz_e2(params) {
                row("rh_D", rh.d.into());
                row("rh_E", rh.e.into());
                row("rh_F", rh.f.into());
                row("rh_DE_minus_F", rh.de_minus_f.into());
            }
            if let Ok(sx) = crossing_sextic_e2(params) {
                let [m2, m1, m0] = sx.monic();
                row("sextic_Q", sx.q.into());
                row("sextic_R", sx.r.into());
                row("sextic_S", sx.s.into());
                row("sextic_T", sx.t.into());
                row("sextic_monic_2", m2.into());
                row("sextic_monic_1", m1.into());
                row("sextic_monic_0", m0.into());
            }
        }
        summary.put(format!("{}_verdict", v.kind), v.verdict.to_string());
    }
    RunOutput { data, summary, converged: true }
}

fn ocp_table(sol: &ControlSolution) -> Table {
    let mut data = Table::new(&["t", "x", "y", "z", "u", "phi", "lx", "ly", "lz"]);
    let n = sol.control.values.len();
    for (k, (t, s)) in sol.states.times().zip(&sol.states.samples).enumerate() {
        // Node k carries interval k; the final node repeats the last interval.
        let i = k.min(n - 1);
        let l = sol.adjoints.nodes[k];
        data.push(vec![
            t.into(),
            s.x.into(),
            s.y.into(),
            s.z.into(),
            sol.control.values[i].into(),
            sol.phi[i].into(),
            l.lx.into(),
            l.ly.into(),
            l.lz.into(),
        ]);
    }
    data
}

fn ocp_summary(sol: &ControlSolution, summary: &mut Summary) {
    summary.put("objective", sol.objective);
    summary.put("relaxed_objective", sol.relaxed_objective);
    summary.put("n_switches", sol.switch_times.len() as f64);
    for (i, t) in sol.switch_times.iter().enumerate() {
        summary.put(format!("switch_time_{}", i + 1), *t);
    }
    summary.put("converged", sol.converged);
    summary.put("iterations", sol.iterations as f64);
    summary.put("bang_residual", sol.bang_residual);
    summary.put("realized", sol.realized);
    for (i, (a, b)) in sol.singular_arcs.iter().enumerate() {
        summary.put(format!("singular_arc_{}_start", i + 1), *a);
        summary.put(format!("singular_arc_{}_end", i + 1), *b);
    }
}

fn solve(config: &ScenarioConfig) -> Result<ControlSolution, ScenarioError> {
    let oc = OcpConfig::new(config.params, config.grid(), config.history, config.ocp)
        .map_err(|source| ScenarioError::Ocp { context: context(config), source })?;
    fbsm_solve(&oc).map_err(|source| ScenarioError::Ocp { context: context(config), source })
}

fn run_ocp(config: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    let sol = solve(config)?;
    let mut summary = Summary::default();
    ocp_summary(&sol, &mut summary);
    Ok(RunOutput { data: ocp_table(&sol), summary, converged: sol.converged })
}

fn run_sweep(config: &ScenarioConfig, sweep: &SweepSpec) -> Result<RunOutput, ScenarioError> {
    let points: Vec<ScenarioConfig> = sweep
        .values()
        .into_iter()
        .map(|v| {
            let mut c = config.clone();
            c.mode = sweep.inner;
            c.sweep = None;
            if sweep.variable == "tau" {
                c.tau = v;
            } else {
                c.params = c.params.with(&sweep.variable, v).expect("variable validated on load");
            }
            c
        })
        .collect();
    let results: Vec<Result<RunOutput, ScenarioError>> = points.par_iter().map(execute).collect();

    let values = sweep.values();
    let mut columns: Vec<String> = vec![sweep.variable.clone()];
    let mut rows = Vec::new();
    let mut converged = true;
    for (v, res) in values.iter().zip(results) {
        let out = res?;
        converged &= out.converged;
        // Switch-time columns vary in number between points; keep the count only.
        let entries: Vec<&(String, Cell)> =
            out.summary.entries.iter().filter(|(n, _)| !n.starts_with("switch_time_") && !n.starts_with("singular_arc_") && !n.starts_with("diagnostic_")).collect();
        if rows.is_empty() {
            columns.extend(entries.iter().map(|(n, _)| n.clone()));
        }
        let mut row = vec![Cell::Num(*v)];
        for name in &columns[1..] {
            row.push(entries.iter().find(|(n, _)| n == name).map_or(Cell::Text(String::new()), |(_, c)| c.clone()));
        }
        rows.push(row);
    }
    let data = Table { columns, rows };

    let mut summary = Summary::default();
    summary.put("points", values.len() as f64);
    if sweep.inner == Mode::Stability {
        // Parameter values where the E0 verdict changes.
        let verdicts = data.column("E0_verdict").unwrap_or_default();
        let mut transitions = 0;
        for i in 1..verdicts.len() {
            if verdicts[i] != verdicts[i - 1] {
                transitions += 1;
                summary.put(format!("E0_transition_{transitions}"), 0.5 * (values[i - 1] + values[i]));
            }
        }
        summary.put("E0_transitions", transitions as f64);
    }
    Ok(RunOutput { data, summary, converged })
}

/// Runs a scenario without touching the filesystem.
pub fn execute(config: &ScenarioConfig) -> Result<RunOutput, ScenarioError> {
    match config.mode {
        Mode::Simulate => run_simulate(config),
        Mode::Equilibria => Ok(run_equilibria(config)),
        Mode::Stability => Ok(run_stability(config)),
        Mode::Ocp => run_ocp(config),
        Mode::Sweep => run_sweep(config, config.sweep.as_ref().expect("sweep options validated on load")),
    }
}

/// Data path for a config and the companion summary path beside it.
pub fn output_paths(config: &ScenarioConfig) -> (PathBuf, PathBuf) {
    let ext = config.format.extension();
    let data = config
        .output_path
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.{ext}", config.mode)));
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| config.mode.to_string());
    let summary = data.with_file_name(format!("{stem}.summary.{ext}"));
    (data, summary)
}

/// Executes the scenario and writes the data and summary files.
pub fn run(config: &ScenarioConfig) -> Result<RunReport, ScenarioError> {
    let started = Instant::now();
    let out = execute(config)?;
    let (data_path, summary_path) = output_paths(config);
    for (path, table) in [(&data_path, &out.data), (&summary_path, &out.summary.to_table())] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| ScenarioError::Write { path: dir.to_path_buf(), source })?;
        }
        fs::write(path, table.render(config.format))
            .map_err(|source| ScenarioError::Write { path: path.clone(), source })?;
    }
    Ok(RunReport {
        config: config.clone(),
        outputs: vec![data_path, summary_path],
        duration_seconds: started.elapsed().as_secs_f64(),
        summary: out.summary,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASELINE: &str = "\
params.lambda = 1
params.d = 0.1
params.beta = 0.5
params.a = 0.2
params.p = 1
params.c = 0.1
params.h = 0.1
";

    fn cfg(extra: &str) -> Result<ScenarioConfig, ConfigError> {
        parse_config(&format!("{BASELINE}{extra}"), None)
    }

    #[test]
    fn delay_steps_from_config() {
        let c = cfg("mode = simulate\ndelay.tau = 10\n").unwrap();
        assert_eq!(c.step, 0.05);
        assert_eq!(c.grid().tau_steps, 200);
    }

    #[test]
    fn incommensurate_delay_names_key_and_line() {
        let err = cfg("mode = simulate\ndelay.tau = 0.5 # half a day\ngrid.step = 0.4\n").unwrap_err();
        assert_eq!(err.key, "delay.tau");
        assert_eq!(err.line, Some(9));
        assert!(err.to_string().contains("delay not an integer multiple of step"), "{err}");
    }

    #[test]
    fn minimal_config_defaults() {
        let c = cfg("mode = ocp").unwrap();
        assert_eq!((c.step, c.tf, c.t0, c.tau, c.xi), (0.01, 10.0, 0.0, 0.0, 0.0));
        assert_eq!(c.history.u0, 0.0);
        assert_eq!(c.ocp, SolverOptions::default());
        let c = cfg("mode = stability").unwrap();
        assert_eq!((c.step, c.tf), (0.05, 500.0));
        assert_eq!(c.format, OutputFormat::Csv);
    }

    #[test]
    fn config_errors() {
        let err = parse_config("mode = simulate\nparams.lambda = 1\n", None).unwrap_err();
        assert_eq!((err.key.as_str(), err.message.as_str()), ("params.d", "missing key"));
        let err = cfg("mode = simulate\ngrid.tf = ten\n").unwrap_err();
        assert_eq!((err.key.as_str(), err.line), ("grid.tf", Some(9)));
        assert!(err.message.contains("unparseable number"));
        assert_eq!(cfg("mode = simulate\ngird.tf = 1\n").unwrap_err().message, "unknown key");
        assert!(cfg("mode = simulate\nmode = ocp\n").unwrap_err().message.contains("duplicate"));
        assert_eq!(cfg("").unwrap_err().key, "mode");
        assert_eq!(cfg("mode = sweep\n").unwrap_err().key, "sweep.variable");
        let err = parse_config(&BASELINE.replace("params.p = 1", "params.p = -1"), Some(Mode::Simulate)).unwrap_err();
        assert_eq!((err.key.as_str(), err.line), ("params.p", Some(5)));
    }

    #[test]
    fn printed_config_round_trips() {
        let c = cfg("mode = sweep\nsweep.variable = beta\nsweep.start = 0.001\nsweep.stop = 0.1\nsweep.count = 7\nsimulate.target = E2\noutput.path = out/a.json\noutput.format = json\ndelay.tau = 0.1\n").unwrap();
        assert_eq!(parse_config(&c.to_config_text(), None).unwrap(), c);
    }

    #[test]
    fn thresholds_in_equilibrium_table() {
        let text = "mode = equilibria\nparams.lambda = 1\nparams.d = 0.1\nparams.beta = 0.5\nparams.a = 0.2\nparams.p = 1\nparams.c = 0.1\nparams.h = 0.1\n";
        let out = execute(&parse_config(text, None).unwrap()).unwrap();
        let t2 = out.data.column("t2").unwrap();
        let t3 = out.data.column("t3").unwrap();
        assert!(matches!(t2[0], Cell::Num(v) if (v - 1.0 / 20.0).abs() < 1e-12));
        assert!(matches!(t3[0], Cell::Num(v) if (v - 23.0 / 1000.0).abs() < 1e-12));
    }

    #[test]
    fn table_formats_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![0.1.into(), "E0".into()]);
        t.push(vec![(-1.0 / 3.0).into(), true.into()]);
        let csv = t.to_csv();
        assert!(csv.starts_with("a,b\n1.0000000000000001e-1,E0\n"));
        assert!(!csv.contains('\r'));
        assert_eq!(Table::from_csv(&csv).unwrap(), t);
        assert_eq!(Table::from_json(&t.to_json()).unwrap(), t);
    }

    #[test]
    fn settling_time_definition() {
        let grid = GridConfig::new(0.0, 1.0, 0.25, 0.0, 0.0).unwrap();
        let hist = HistorySpec::new(1.0, 0.0, 0.0, 0.0).unwrap();
        // x' = −x·4: 1, e^-1, e^-2, e^-3, e^-4 at the nodes.
        let traj = integrate(|c, _, _| *c * -4.0, &hist, &grid, None).unwrap();
        let t = settling_time(&traj, &StateTriple::ZERO, 0.1).unwrap();
        assert_eq!(t, 0.75);
        assert_eq!(settling_time(&traj, &StateTriple::new(5.0, 0.0, 0.0), 0.1), None);
    }
}
