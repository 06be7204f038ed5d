//! Experiment drivers behind the command-line tool: each returns a bundle of
//! CSV tables plus a JSON metadata document.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::analysis::{self, AsymptoticFit, BoundsReport, Certificate};
use crate::error::{Error, Result};
use crate::filter::{self, FilterRealization};
use crate::matkit::{self, Matrix};
use crate::model::{self, Deviations};
use crate::scenario::{GammaSpec, PropagationSpec, Scenario};
use crate::sim::{self, MseSeries, SimConfig};
use crate::solvers::{self, TimeGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Used when a scenario has no `[propagation]` block.
pub const DEFAULT_PROPAGATION: PropagationSpec = PropagationSpec { dt: 1e-3, horizon: 10.0, record_stride: 100 };

/// RK4 is stable for `h·|λ| ≲ 2.78`; warn well before that.
const RK4_STEP_WARN: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Text(v.to_string())
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

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Int(v) => Some(*v as f64),
            _ => None,
        }
    }

    fn render(&self, out: &mut String) {
        match self {
            // 17 significant digits round-trip every f64.
            Cell::Num(v) => write!(out, "{v:.16e}").unwrap(),
            Cell::Int(v) => write!(out, "{v}").unwrap(),
            Cell::Text(s) if s.contains([',', '"', '\n']) => {
                write!(out, "\"{}\"", s.replace('"', "\"\"")).unwrap()
            }
            Cell::Text(s) => out.push_str(s),
            Cell::Empty => {}
        }
    }
}

/// A CSV table whose header depends only on the command that produced it.
#[derive(Debug, Clone)]
pub struct Table {
    pub name: &'static str,
    pub columns: &'static [&'static str],
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &'static str, columns: &'static [&'static str]) -> Self {
        Self { name, columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    /// Numeric values of one column (`None` for empty or text cells).
    pub fn column(&self, name: &str) -> Vec<Option<f64>> {
        let idx = self
            .column_index(name)
            .unwrap_or_else(|| panic!("table {} has no column {name}", self.name));
        self.rows.iter().map(|r| r[idx].as_f64()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                cell.render(&mut out);
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub command: &'static str,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub warnings: Vec<String>,
    /// Assumption or hypothesis failures that make the run exit with status 2.
    pub violations: Vec<String>,
    pub summary: Value,
    pub tables: Vec<Table>,
}

impl Bundle {
    fn new(command: &'static str, scn: &Scenario) -> Self {
        Self {
            command,
            scenario: scn.name.clone(),
            scenario_hash: scn.hash(),
            seed: None,
            trials: None,
            warnings: Vec::new(),
            violations: Vec::new(),
            summary: Value::Null,
            tables: Vec::new(),
        }
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn metadata(&self) -> Value {
        json!({
            "command": self.command,
            "scenario": self.scenario,
            "scenario_hash": self.scenario_hash,
            "seed": self.seed,
            "trials": self.trials,
            "version": VERSION,
            "warnings": self.warnings,
            "violations": self.violations,
            "summary": self.summary,
            "tables": self.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
        })
    }

    /// Write `<table>.csv` for every table and `metadata.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for t in &self.tables {
            let path = dir.join(format!("{}.csv", t.name));
            std::fs::write(&path, t.to_csv())?;
            written.push(path);
        }
        let path = dir.join("metadata.json");
        let text = serde_json::to_string_pretty(&self.metadata()).expect("metadata is valid JSON");
        std::fs::write(&path, text + "\n")?;
        written.push(path);
        Ok(written)
    }
}

/// Command-line overrides applied on top of a scenario.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub gamma: Option<GammaSpec>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    /// Add Monte Carlo MSE to `sweep` and `divergence`.
    pub simulate: bool,
}

impl RunOptions {
    /// The scenario with the overrides folded in.
    pub fn apply(&self, scn: &Scenario) -> Result<Scenario> {
        let mut out = scn.clone();
        if let Some(g) = &self.gamma {
            let mut g = g.clone();
            g.gamma0_factor = g.gamma0_factor.or(scn.gamma.gamma0_factor);
            out.gamma = g;
        }
        if self.seed.is_some() || self.trials.is_some() {
            let sim = out.sim.as_mut().ok_or_else(|| {
                Error::InvalidConfig("--seed and --trials need a [sim] block in the scenario".into())
            })?;
            if let Some(seed) = self.seed {
                sim.seed = seed;
            }
            if let Some(trials) = self.trials {
                sim.trials = trials;
            }
            sim.validate()?;
        }
        Ok(out)
    }
}

/// Filter at `γ = 1` (only used for `γ`-independent data) and the threshold.
struct Setup {
    dev: Deviations,
    base: FilterRealization,
    gamma_bar: Option<f64>,
    gammas: Vec<f64>,
}

impl Setup {
    fn new(scn: &Scenario) -> Result<Self> {
        let dev = model::deviations(&scn.system, &scn.nominal)?;
        let base = filter::build_filter(&scn.nominal, &scn.system, &scn.topology, 1.0)?;
        let gamma_bar = base.gamma_u0_bar;
        let gammas = scn.gamma.resolve(gamma_bar)?;
        Ok(Self { dev, base, gamma_bar, gammas })
    }

    fn realize(&self, scn: &Scenario, gamma: f64) -> Result<FilterRealization> {
        match self.gamma_bar {
            Some(bar) => {
                let fr = self.base.with_gamma(gamma)?;
                let factor = scn.gamma0_factor();
                if factor == filter::GAMMA_U0_FACTOR {
                    Ok(fr)
                } else {
                    fr.with_gamma_u0(factor * bar)
                }
            }
            None => filter::build_filter(&scn.nominal, &scn.system, &scn.topology, gamma),
        }
    }

    fn first(&self, scn: &Scenario, warnings: &mut Vec<String>, command: &str) -> Result<FilterRealization> {
        if self.gammas.len() > 1 {
            warnings.push(format!("{command} uses the first of {} gamma values", self.gammas.len()));
        }
        self.realize(scn, self.gammas[0])
    }
}

fn sim_config(scn: &Scenario) -> Result<SimConfig> {
    scn.sim
        .clone()
        .ok_or_else(|| Error::InvalidConfig(format!("scenario '{}' has no [sim] block", scn.name)))
}

fn propagation_grid(scn: &Scenario, fr: &FilterRealization, warnings: &mut Vec<String>) -> Result<TimeGrid> {
    let spec = scn.propagation.unwrap_or_else(|| {
        warnings.push(format!(
            "no [propagation] block; using dt = {}, horizon = {}",
            DEFAULT_PROPAGATION.dt, DEFAULT_PROPAGATION.horizon
        ));
        DEFAULT_PROPAGATION
    });
    let stiff = matkit::norm2(&fr.a_cal) * spec.dt;
    if stiff > RK4_STEP_WARN {
        warnings.push(format!(
            "propagation step dt = {} with ||A_u||_2 = {:.4e}; RK4 may be inaccurate or unstable",
            spec.dt,
            matkit::norm2(&fr.a_cal)
        ));
    }
    spec.grid()
}

fn f64_or_null(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

/// `true` if the present values never increase along the list.
pub fn weakly_decreasing(values: &[Option<f64>]) -> bool {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    present.windows(2).all(|w| w[1] <= w[0])
}

/// Least-squares slope of `y` on `t` over `window` (inclusive).
pub fn slope_in_window(t: &[f64], y: &[f64], window: (f64, f64)) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(ti, _)| **ti >= window.0 - 1e-9 && **ti <= window.1 + 1e-9)
        .map(|(a, b)| (*a, *b))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let ym = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let num: f64 = pts.iter().map(|p| (p.0 - tm) * (p.1 - ym)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - tm).powi(2)).sum();
    (den > 0.0).then(|| num / den)
}

pub fn validate(scn: &Scenario) -> Result<Bundle> {
    let mut b = Bundle::new("validate", scn);
    let dev = model::deviations(&scn.system, &scn.nominal)?;
    let (f_du, gamma_bar) = match filter::build_filter(&scn.nominal, &scn.system, &scn.topology, 1.0) {
        Ok(fr) => (fr.f_du, fr.gamma_u0_bar),
        Err(e) => {
            b.warnings.push(format!("nominal filter could not be built: {e}"));
            let marker = if dev.structural_zero() { 0.0 } else { 1.0 };
            (Matrix::from_element(1, 1, marker), None)
        }
    };
    let rep = model::validate_assumptions(&scn.system, &scn.nominal, &scn.topology, &f_du)?;
    let mut t = Table::new("assumptions", &["check", "passed"]);
    for (name, ok) in [
        ("connected", rep.connected),
        ("observable", rep.observable),
        ("controllable", rep.controllable),
        ("f_du_zero", rep.f_du_zero),
        ("a_hurwitz", rep.a_hurwitz),
        ("assumption1", rep.assumption1),
        ("assumption2", rep.assumption2),
        ("assumption3", rep.assumption3),
    ] {
        t.push(vec![name.into(), ok.into()]);
    }
    b.violations = rep.failures().into_iter().map(String::from).collect();
    b.summary = json!({
        "overall": rep.overall(),
        "report": rep,
        "gamma_bar": f64_or_null(gamma_bar),
        "zero_deviation": dev.is_zero(),
    });
    b.tables.push(t);
    Ok(b)
}

const SWEEP_COLUMNS: &[&str] = &[
    "gamma",
    "gamma_bar",
    "gamma_u0",
    "status",
    "tr_sigma_u",
    "tr_sigma_e",
    "rho",
    "lower1",
    "upper1",
    "upper2",
    "tr_sigma_u_lower",
    "s",
    "chi",
    "s_bar_norm_bound",
    "x_bar_norm_bound",
    "s_bar_norm",
    "mse",
    "mse_std_error",
];

struct SweepPoint {
    gamma: f64,
    fr: FilterRealization,
    status: String,
    traces: Option<(f64, f64)>,
    bounds: Option<BoundsReport>,
    mse: Option<MseSeries>,
}

/// Steady-state indices and their bounds along the scenario's `γ` grid.
pub fn sweep(scn: &Scenario, opts: &RunOptions) -> Result<Bundle> {
    let scn = opts.apply(scn)?;
    let mut b = Bundle::new("sweep", &scn);
    let setup = Setup::new(&scn)?;
    let cfg = if opts.simulate { Some(sim_config(&scn)?) } else { None };
    if let Some(c) = &cfg {
        b.seed = Some(c.seed);
        b.trials = Some(c.trials);
    }
    let init = scn.initial_covariances();

    let mut points = Vec::with_capacity(setup.gammas.len());
    for &gamma in &setup.gammas {
        let fr = setup.realize(&scn, gamma)?;
        let mut point = SweepPoint { gamma, fr, status: "ok".into(), traces: None, bounds: None, mse: None };
        match solvers::steady_state(&point.fr, &scn.system, &scn.nominal) {
            Ok(ss) => {
                point.traces = Some((ss.sigma_u.trace(), ss.sigma_e.trace()));
                match analysis::trace_bounds(&point.fr, &scn.nominal, &ss, &setup.dev, scn.analysis.s_norm) {
                    Ok(r) => point.bounds = Some(r),
                    Err(Error::Hypothesis(msg)) => {
                        point.status = if gamma < point.fr.gamma_u0 { "below_gamma_u0".into() } else { "hypothesis".into() };
                        b.warnings.push(format!("gamma = {gamma:.6e}: {msg}"));
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::NotHurwitz { .. }) => point.status = "not_hurwitz".into(),
            Err(e) => return Err(e),
        }
        if let Some(c) = &cfg {
            if point.status != "not_hurwitz" {
                let series = sim::monte_carlo_mse(&scn.system, &point.fr, c, &init)?;
                b.warnings.extend(series.warnings.iter().map(|w| format!("gamma = {gamma:.6e}: {w}")));
                point.mse = Some(series);
            }
        }
        points.push(point);
    }

    // Fit the two weights of ρ over the admissible points.
    let valid: Vec<&SweepPoint> = points.iter().filter(|p| p.bounds.is_some()).collect();
    let gammas: Vec<f64> = valid.iter().map(|p| p.gamma).collect();
    let fit = {
        let v1: Vec<f64> = valid.iter().map(|p| p.bounds.as_ref().unwrap().v1.powi(2)).collect();
        let v2: Vec<f64> = valid.iter().map(|p| p.bounds.as_ref().unwrap().v2.powi(2)).collect();
        let spans = gammas.len() >= 6 && gammas.iter().copied().fold(0.0, f64::max) >= 10.0 * gammas[0];
        if spans {
            let first = analysis::fit_quadratic(&gammas, &v1)?;
            let second = analysis::fit_quadratic(&gammas, &v2)?;
            Some(AsymptoticFit {
                fit_residual: first.residual.max(second.residual),
                first,
                second,
                gammas: gammas.clone(),
                v1_sq: v1,
                v2_sq: v2,
            })
        } else {
            b.warnings.push("upper2 needs at least 6 admissible gamma values spanning a decade".into());
            None
        }
    };

    let mut t = Table::new("sweep", SWEEP_COLUMNS);
    for p in &points {
        let (tr_u, tr_e) = p.traces.unzip();
        let r = p.bounds.as_ref();
        let upper2 = match (r, &fit) {
            (Some(r), Some(fit)) => Some(r.tr_sigma_u + fit.rho(&p.fr, &setup.dev, p.gamma, r.s_bar_norm_bound)),
            _ => None,
        };
        t.push(vec![
            p.gamma.into(),
            setup.gamma_bar.into(),
            p.fr.gamma_u0.into(),
            p.status.clone().into(),
            tr_u.into(),
            tr_e.into(),
            r.map(|r| r.rho).into(),
            r.map(|r| r.lower).into(),
            r.map(|r| r.upper).into(),
            upper2.into(),
            r.map(|r| r.tr_sigma_u_lower).into(),
            r.map(|r| r.s).into(),
            r.map(|r| r.chi).into(),
            r.map(|r| r.s_bar_norm_bound).into(),
            r.map(|r| r.x_bar_norm_bound).into(),
            r.and_then(|r| r.s_bar_norm).into(),
            p.mse.as_ref().map(|m| m.steady_mse).into(),
            p.mse.as_ref().and_then(|m| m.steady_std_error).into(),
        ]);
    }

    let sandwich_all = !valid.is_empty() && valid.iter().all(|p| p.bounds.as_ref().unwrap().sandwich_holds());
    let monotone: serde_json::Map<String, Value> = ["mse", "tr_sigma_e", "upper1", "upper2", "tr_sigma_u_lower"]
        .iter()
        .map(|&c| (c.to_string(), json!(weakly_decreasing(&t.column(c)))))
        .collect();
    b.summary = json!({
        "gamma_bar": f64_or_null(setup.gamma_bar),
        "gamma_u0": points.first().map(|p| p.fr.gamma_u0),
        "s_norm": scn.analysis.s_norm,
        "points": points.len(),
        "admissible_points": valid.len(),
        "sandwich_holds_everywhere": sandwich_all,
        "weakly_decreasing": monotone,
        "fit": fit.as_ref().map(|f| json!({
            "a1": f.first.a, "b1": f.first.b, "c1": f.first.c,
            "a2": f.second.a, "b2": f.second.b, "c2": f.second.c,
            "fit_residual": f.fit_residual,
            "a1_b1_positive": f.first.positive_leading(),
            "a2_b2_positive": f.second.positive_leading(),
        })),
    });
    b.tables.push(t);
    Ok(b)
}

const CERT_COLUMNS: &[&str] = &[
    "certificate",
    "r",
    "e_re",
    "e_im",
    "aug_eig_residual",
    "eig_residual",
    "qu_residual",
    "will_diverge",
    "growth_rate",
];
const PROJECTION_COLUMNS: &[&str] =
    &["t", "certificate", "projected_sigma_u", "projected_sigma_e", "tr_sigma_u", "tr_sigma_e"];
const MSE_COLUMNS: &[&str] = &["t", "mse", "mse_analytic"];
const MSE_SENSOR_COLUMNS: &[&str] = &["t", "sensor", "mse"];

fn join_vec(v: &crate::matkit::Vector) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(";")
}

fn mse_tables(series: &MseSeries, analytic: &[f64]) -> (Table, Table) {
    let mut t = Table::new("mse", MSE_COLUMNS);
    let mut per = Table::new("mse_per_sensor", MSE_SENSOR_COLUMNS);
    for (k, &time) in series.times.iter().enumerate() {
        t.push(vec![time.into(), series.mse[k].into(), analytic.get(k).copied().into()]);
        for (i, v) in series.per_sensor[k].iter().enumerate() {
            per.push(vec![time.into(), i.into(), (*v).into()]);
        }
    }
    (t, per)
}

/// Mean squared error over the final half of the record is strictly increasing.
pub fn increasing_final_half(times: &[f64], values: &[f64]) -> bool {
    let Some(&end) = times.last() else { return false };
    let tail: Vec<f64> = times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= 0.5 * end)
        .map(|(_, v)| *v)
        .collect();
    tail.len() >= 2 && tail.windows(2).all(|w| w[1] > w[0])
}

fn simulate_into(
    b: &mut Bundle,
    scn: &Scenario,
    fr: &FilterRealization,
) -> Result<(MseSeries, Vec<f64>)> {
    let cfg = sim_config(scn)?;
    b.seed = Some(cfg.seed);
    b.trials = Some(cfg.trials);
    let init = scn.initial_covariances();
    let series = sim::monte_carlo_mse(&scn.system, fr, &cfg, &init)?;
    let analytic = sim::analytic_mse_curve(&scn.system, &scn.nominal, fr, &cfg, &init)?;
    b.warnings.extend(series.warnings.iter().cloned());
    for (trial, step) in &series.overflowed {
        b.warnings.push(format!("trial {trial} overflowed at step {step} and was excluded"));
    }
    let (t, per) = mse_tables(&series, &analytic);
    b.tables.push(t);
    b.tables.push(per);
    Ok((series, analytic))
}

/// Certificates that the nominal filter's error covariance grows without bound.
pub fn divergence(scn: &Scenario, opts: &RunOptions) -> Result<Bundle> {
    let scn = opts.apply(scn)?;
    let mut b = Bundle::new("divergence", &scn);
    let setup = Setup::new(&scn)?;
    let fr = setup.first(&scn, &mut b.warnings, "divergence")?;
    let rep = analysis::divergence_test(&fr, &scn.nominal, &scn.system)?;

    let mut certs = Table::new("certificates", CERT_COLUMNS);
    for (i, c) in rep.certificates.iter().enumerate() {
        certs.push(vec![
            i.into(),
            c.r.into(),
            join_vec(&c.e_re).into(),
            join_vec(&c.e_im).into(),
            c.aug_eig_residual.into(),
            c.eig_residual.into(),
            c.qu_residual.into(),
            c.will_diverge.into(),
            c.growth_rate.into(),
        ]);
    }
    b.tables.push(certs);

    let mut proj = Table::new("projection", PROJECTION_COLUMNS);
    let mut cert_summary = Vec::new();
    if !rep.certificates.is_empty() {
        let grid = propagation_grid(&scn, &fr, &mut b.warnings)?;
        let traj = solvers::propagate(&fr, &scn.system, &scn.nominal, &scn.initial_covariances(), &grid)?;
        let n_s = fr.sensor_count();
        for (i, c) in rep.certificates.iter().enumerate() {
            let pu: Vec<f64> = traj.sigma_u.iter().map(|s| analysis::projected_variance(s, c, n_s)).collect();
            let pe: Vec<f64> = traj.sigma_e.iter().map(|s| analysis::projected_variance(s, c, n_s)).collect();
            for (k, &time) in traj.times.iter().enumerate() {
                proj.push(vec![
                    time.into(),
                    i.into(),
                    pu[k].into(),
                    pe[k].into(),
                    traj.sigma_u[k].trace().into(),
                    traj.sigma_e[k].trace().into(),
                ]);
            }
            cert_summary.push(certificate_summary(c, &traj.times, &pu, &pe, scn.analysis.slope_window));
        }
    }
    b.tables.push(proj);

    let mut mse_summary = Value::Null;
    if opts.simulate {
        let (series, _) = simulate_into(&mut b, &scn, &fr)?;
        mse_summary = json!({
            "increasing_over_final_half": increasing_final_half(&series.times, &series.mse),
            "trials_used": series.trials_used,
        });
    }
    b.summary = json!({
        "gamma_u": fr.gamma_u,
        "gamma_bar": f64_or_null(setup.gamma_bar),
        "p_u_stabilizing": fr.p_u_stabilizing,
        "diverges": rep.diverges(),
        "certificates": cert_summary,
        "mse": mse_summary,
    });
    Ok(b)
}

fn certificate_summary(c: &Certificate, times: &[f64], pu: &[f64], pe: &[f64], window: (f64, f64)) -> Value {
    let drift = pu.iter().map(|v| (v - pu[0]).abs()).fold(0.0, f64::max);
    let slope = slope_in_window(times, pe, window);
    json!({
        "r": c.r,
        "e_re": c.e_re.as_slice(),
        "e_im": c.e_im.as_slice(),
        "will_diverge": c.will_diverge,
        "growth_rate": c.growth_rate,
        "projected_sigma_e_slope": f64_or_null(slope),
        "slope_window": [window.0, window.1],
        "nominal_projection_drift": drift,
    })
}

const RELATION_COLUMNS: &[&str] =
    &["t", "tr_sigma_u", "tr_sigma_e", "e_min_eig", "e_norm", "e_norm_bound", "closed_form_gap"];

/// Ordering of `Σ_u(t)` and `Σ_e(t)` when only the noise intensities are wrong.
pub fn relations(scn: &Scenario, opts: &RunOptions) -> Result<Bundle> {
    let scn = opts.apply(scn)?;
    let mut b = Bundle::new("relations", &scn);
    let setup = Setup::new(&scn)?;
    if !setup.dev.structural_zero() {
        return Err(Error::Hypothesis(
            "relations need A_u = A and C_i,u = C_i; the scenario has nonzero deviations there".into(),
        ));
    }
    let fr = setup.first(&scn, &mut b.warnings, "relations")?;
    let grid = propagation_grid(&scn, &fr, &mut b.warnings)?;
    let init = scn.initial_covariances();
    let e0 = &init.sigma_u - &init.sigma_e;
    let rel = analysis::relation_analysis(&fr, &setup.dev, &e0, &grid)?;
    let traj = solvers::propagate(&fr, &scn.system, &scn.nominal, &init, &grid)?;

    let mut t = Table::new("relations", RELATION_COLUMNS);
    for k in 0..rel.times.len() {
        t.push(vec![
            rel.times[k].into(),
            traj.sigma_u[k].trace().into(),
            traj.sigma_e[k].trace().into(),
            rel.e_min_eig[k].into(),
            rel.e_norm[k].into(),
            rel.norm_bound_curve[k].into(),
            (&rel.e_ode[k] - &rel.e_closed[k]).norm().into(),
        ]);
    }
    let direct_gap = traj
        .sigma_u
        .iter()
        .zip(&traj.sigma_e)
        .zip(&rel.e_ode)
        .map(|((u, e), d)| (u - e - d).norm())
        .fold(0.0, f64::max);
    b.summary = json!({
        "gamma_u": fr.gamma_u,
        "gamma_u0": fr.gamma_u0,
        "delta_d": rel.delta_d_definite,
        "delta_d_min_eig": rel.delta_d_min_eig,
        "delta_d_max_eig": rel.delta_d_max_eig,
        "ordering": rel.ordering_verdict,
        "min_e_eig": rel.e_min_eig.iter().copied().fold(f64::INFINITY, f64::min),
        "mu_bar": rel.mu_bar,
        "mu_l_gamma": rel.mu_l_gamma,
        "norm_bound_holds": rel.bound_holds(),
        "max_closed_form_gap": rel.max_closed_form_gap,
        "max_direct_gap": direct_gap,
    });
    b.tables.push(t);
    Ok(b)
}

/// Monte Carlo MSE next to its analytic counterpart.
pub fn simulate(scn: &Scenario, opts: &RunOptions) -> Result<Bundle> {
    let scn = opts.apply(scn)?;
    let mut b = Bundle::new("simulate", &scn);
    let setup = Setup::new(&scn)?;
    let fr = setup.first(&scn, &mut b.warnings, "simulate")?;
    let (series, _) = simulate_into(&mut b, &scn, &fr)?;
    let steady = solvers::steady_state(&fr, &scn.system, &scn.nominal)
        .ok()
        .map(|ss| sim::analytic_mse(&ss.sigma_e, fr.sensor_count()));
    b.summary = json!({
        "gamma_u": fr.gamma_u,
        "steady_mse": series.steady_mse,
        "steady_std_error": f64_or_null(series.steady_std_error),
        "steady_analytic": f64_or_null(steady),
        "trials_used": series.trials_used,
        "overflowed": series.overflowed.len(),
        "increasing_over_final_half": increasing_final_half(&series.times, &series.mse),
    });
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rendering() {
        let mut t = Table::new("x", &["a", "b", "c"]);
        t.push(vec![0.1.into(), Cell::Empty, "p,q".into()]);
        t.push(vec![3usize.into(), None.into(), true.into()]);
        let csv = t.to_csv();
        assert_eq!(csv, "a,b,c\n1.0000000000000001e-1,,\"p,q\"\n3,,true\n");
        let back: f64 = "1.0000000000000001e-1".parse().unwrap();
        assert_eq!(back, 0.1);
    }

    #[test]
    fn monotonicity_ignores_missing() {
        assert!(weakly_decreasing(&[Some(3.0), None, Some(3.0), Some(1.0)]));
        assert!(!weakly_decreasing(&[Some(1.0), Some(2.0)]));
        assert!(increasing_final_half(&[0.0, 1.0, 2.0, 3.0], &[5.0, 0.0, 1.0, 2.0]));
        assert!(!increasing_final_half(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 2.0]));
    }

    #[test]
    fn slope_of_line() {
        let t: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = t.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((slope_in_window(&t, &y, (5.0, 15.0)).unwrap() - 2.0).abs() < 1e-12);
        assert!(slope_in_window(&t, &y, (100.0, 200.0)).is_none());
    }
}
