//! Scenario files: true system, nominal model, topology, consensus
//! parameters and run settings in one TOML document.
//!
//! Matrices are written as a list of rows, as `{ diag = [...] }`, or as a
//! scalar (a multiple of the identity of the required size). Everything in
//! `[nominal]` is optional and defaults to the true value.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::SNormVariant;
use crate::error::{Error, Result};
use crate::graph::Topology;
use crate::matkit::{Matrix, Vector};
use crate::model::{NominalModel, Sensor, TrueSystem};
use crate::sim::SimConfig;
use crate::solvers::{InitialCovariances, TimeGrid};

pub const PRESET_NAMES: [&str; 4] = ["baseline", "case1", "case2", "case3"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Scalar(f64),
    Rows(Vec<Vec<f64>>),
    Diag { diag: Vec<f64> },
}

impl MatrixSpec {
    /// Resolve against the expected shape; scalars need a square shape.
    fn resolve(&self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let m = match self {
            MatrixSpec::Scalar(v) => {
                if rows != cols {
                    return Err(Error::Parse(format!("{what}: a scalar needs a square shape, got {rows}x{cols}")));
                }
                Matrix::identity(rows, rows) * *v
            }
            MatrixSpec::Diag { diag } => Matrix::from_diagonal(&Vector::from_column_slice(diag)),
            MatrixSpec::Rows(r) => rows_to_matrix(r, what)?,
        };
        if m.shape() != (rows, cols) {
            return Err(Error::Parse(format!("{what}: expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols())));
        }
        Ok(m)
    }

    /// Resolve a square matrix whose size is fixed by the literal itself.
    fn resolve_square(&self, what: &str) -> Result<Matrix> {
        match self {
            MatrixSpec::Scalar(_) => Err(Error::Parse(format!("{what}: size cannot be inferred from a scalar"))),
            MatrixSpec::Diag { diag } => self.resolve(diag.len(), diag.len(), what),
            MatrixSpec::Rows(r) => {
                let m = rows_to_matrix(r, what)?;
                if m.nrows() != m.ncols() {
                    return Err(Error::Parse(format!("{what}: must be square, got {}x{}", m.nrows(), m.ncols())));
                }
                Ok(m)
            }
        }
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if r == 0 || c == 0 {
        return Err(Error::Parse(format!("{what}: empty matrix")));
    }
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != c) {
        return Err(Error::Parse(format!("{what}: row {i} has {} entries, expected {c}", row.len())));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorSpec {
    c: Vec<Vec<f64>>,
    r: MatrixSpec,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NominalSensorSpec {
    c: Option<Vec<Vec<f64>>>,
    r: Option<MatrixSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemSpec {
    a: MatrixSpec,
    q: MatrixSpec,
    x0: Vec<f64>,
    sigma0: MatrixSpec,
    sensors: Vec<SensorSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NominalSpec {
    a: Option<MatrixSpec>,
    q: Option<MatrixSpec>,
    #[serde(default)]
    sensors: Vec<NominalSensorSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologySpec {
    ring: Option<usize>,
    complete: Option<usize>,
    nodes: Option<usize>,
    edges: Option<Vec<(usize, usize)>>,
    adjacency: Option<Vec<Vec<u8>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaValues {
    Value(f64),
    Values(Vec<f64>),
    LogRange { from: f64, to: f64, points: usize },
}

/// Consensus parameters to evaluate, in absolute units or as multiples of
/// the threshold `γ̄_{u0}` (`relative = true`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSpec {
    #[serde(flatten)]
    pub values: GammaValues,
    #[serde(default)]
    pub relative: bool,
    /// `γ_{u0} = gamma0_factor·γ̄_{u0}`; defaults to 1.05.
    pub gamma0_factor: Option<f64>,
}

impl GammaSpec {
    /// Parse a command-line override: `10`, `10,20,40` or `log:FROM:TO:POINTS`,
    /// optionally prefixed with `rel:` for multiples of the threshold.
    pub fn parse_cli(text: &str) -> Result<Self> {
        let (relative, body) = match text.strip_prefix("rel:") {
            Some(rest) => (true, rest),
            None => (false, text),
        };
        let bad = || Error::Parse(format!("invalid gamma spec '{text}'"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let values = if let Some(rest) = body.strip_prefix("log:") {
            let parts: Vec<&str> = rest.split(':').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            GammaValues::LogRange {
                from: num(parts[0])?,
                to: num(parts[1])?,
                points: parts[2].trim().parse().map_err(|_| bad())?,
            }
        } else {
            let list = body.split(',').map(num).collect::<Result<Vec<_>>>()?;
            match list.as_slice() {
                [v] => GammaValues::Value(*v),
                _ => GammaValues::Values(list),
            }
        };
        let spec = Self { values, relative, gamma0_factor: None };
        spec.check()?;
        Ok(spec)
    }

    fn check(&self) -> Result<()> {
        let ok = match &self.values {
            GammaValues::Value(v) => *v > 0.0,
            GammaValues::Values(v) => !v.is_empty() && v.iter().all(|x| *x > 0.0),
            GammaValues::LogRange { from, to, points } => *from > 0.0 && *to >= *from && *points >= 1,
        };
        if !ok {
            return Err(Error::Parse("gamma values must be positive and ranges increasing".into()));
        }
        if let Some(f) = self.gamma0_factor {
            if !(f > 1.0) {
                return Err(Error::Parse("gamma0_factor must exceed 1".into()));
            }
        }
        Ok(())
    }

    /// Raw grid before scaling by the threshold.
    pub fn raw(&self) -> Vec<f64> {
        match &self.values {
            GammaValues::Value(v) => vec![*v],
            GammaValues::Values(v) => v.clone(),
            GammaValues::LogRange { from, to, points } => log_grid(*from, *to, *points),
        }
    }

    /// Absolute grid; `threshold` is required when the grid is relative.
    pub fn resolve(&self, threshold: Option<f64>) -> Result<Vec<f64>> {
        let raw = self.raw();
        if !self.relative {
            return Ok(raw);
        }
        let bar = threshold.ok_or_else(|| {
            Error::Hypothesis("relative gamma values need the threshold, which is unavailable (singular P_u)".into())
        })?;
        Ok(raw.into_iter().map(|g| g * bar).collect())
    }
}

/// `points` log-spaced values from `from` to `to` inclusive.
pub fn log_grid(from: f64, to: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![from];
    }
    let (a, b) = (from.ln(), to.ln());
    (0..points)
        .map(|k| {
            if k + 1 == points {
                to
            } else {
                (a + (b - a) * k as f64 / (points - 1) as f64).exp()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialMode {
    /// Every filter starts at `x̂_i(0) = x0`.
    #[default]
    Shared,
    /// Independent local errors with identity covariance.
    Identity,
}

/// Fixed-step settings for the covariance ODEs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationSpec {
    pub dt: f64,
    pub horizon: f64,
    pub record_stride: usize,
}

impl PropagationSpec {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.dt, self.horizon, self.record_stride)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default)]
    pub s_norm: SNormVariant,
    /// Window in which projected variances are regressed on time.
    #[serde(default = "default_slope_window")]
    pub slope_window: (f64, f64),
}

fn default_slope_window() -> (f64, f64) {
    (10.0, 50.0)
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self { s_norm: SNormVariant::default(), slope_window: default_slope_window() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    name: Option<String>,
    #[serde(default)]
    description: String,
    system: SystemSpec,
    #[serde(default)]
    nominal: NominalSpec,
    topology: TopologySpec,
    gamma: GammaSpec,
    sim: Option<SimConfig>,
    #[serde(default)]
    initial: InitialMode,
    propagation: Option<PropagationSpec>,
    #[serde(default)]
    analysis: AnalysisSpec,
}

#[derive(Debug, Clone, Serialize)]
pub struct Scenario {
    pub name: String,
    #[serde(skip)]
    pub description: String,
    pub system: TrueSystem,
    pub nominal: NominalModel,
    pub topology: Topology,
    pub gamma: GammaSpec,
    pub sim: Option<SimConfig>,
    pub initial: InitialMode,
    pub propagation: Option<PropagationSpec>,
    pub analysis: AnalysisSpec,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        let mut scn = Self::from_toml_str(&text)?;
        if scn.name.is_empty() {
            scn.name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        }
        Ok(scn)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "baseline" => include_str!("../scenarios/baseline.toml"),
            "case1" => include_str!("../scenarios/case1.toml"),
            "case2" => include_str!("../scenarios/case2.toml"),
            "case3" => include_str!("../scenarios/case3.toml"),
            other => {
                return Err(Error::Parse(format!(
                    "unknown preset '{other}' (available: {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Self::from_toml_str(text)
    }

    fn from_file(f: ScenarioFile) -> Result<Self> {
        let sys = &f.system;
        let a = sys.a.resolve_square("system.a")?;
        let n = a.nrows();
        let q = sys.q.resolve(n, n, "system.q")?;
        let sigma0 = sys.sigma0.resolve(n, n, "system.sigma0")?;
        if sys.x0.len() != n {
            return Err(Error::Parse(format!("system.x0 has {} entries, expected {n}", sys.x0.len())));
        }
        let mut sensors = Vec::with_capacity(sys.sensors.len());
        for (i, s) in sys.sensors.iter().enumerate() {
            let c = rows_to_matrix(&s.c, &format!("system.sensors[{i}].c"))?;
            let r = s.r.resolve(c.nrows(), c.nrows(), &format!("system.sensors[{i}].r"))?;
            sensors.push(Sensor::new(c, r));
        }
        let system = TrueSystem::new(a, q, sensors, Vector::from_vec(sys.x0.clone()), sigma0)?;

        let nom = &f.nominal;
        let a_u = match &nom.a {
            Some(spec) => spec.resolve(n, n, "nominal.a")?,
            None => system.a.clone(),
        };
        let q_u = match &nom.q {
            Some(spec) => spec.resolve(n, n, "nominal.q")?,
            None => system.q.clone(),
        };
        if !nom.sensors.is_empty() && nom.sensors.len() != system.sensor_count() {
            return Err(Error::Parse(format!(
                "nominal.sensors has {} entries, the system has {} sensors",
                nom.sensors.len(),
                system.sensor_count()
            )));
        }
        let mut nominal_sensors = Vec::with_capacity(system.sensor_count());
        for (i, s) in system.sensors.iter().enumerate() {
            let spec = nom.sensors.get(i).cloned().unwrap_or_default();
            let c = match &spec.c {
                Some(rows) => rows_to_matrix(rows, &format!("nominal.sensors[{i}].c"))?,
                None => s.c.clone(),
            };
            let r = match &spec.r {
                Some(r) => r.resolve(c.nrows(), c.nrows(), &format!("nominal.sensors[{i}].r"))?,
                None => s.r.clone(),
            };
            nominal_sensors.push(Sensor::new(c, r));
        }
        let nominal = NominalModel::new(a_u, q_u, nominal_sensors)?;

        let topology = resolve_topology(&f.topology)?;
        if topology.node_count() != system.sensor_count() {
            return Err(Error::Parse(format!(
                "topology has {} nodes, the system has {} sensors",
                topology.node_count(),
                system.sensor_count()
            )));
        }
        f.gamma.check()?;
        if let Some(sim) = &f.sim {
            sim.validate()?;
        }
        if let Some(p) = &f.propagation {
            p.grid()?;
        }
        Ok(Self {
            name: f.name.unwrap_or_default(),
            description: f.description,
            system,
            nominal,
            topology,
            gamma: f.gamma,
            sim: f.sim,
            initial: f.initial,
            propagation: f.propagation,
            analysis: f.analysis,
        })
    }

    pub fn initial_covariances(&self) -> InitialCovariances {
        match self.initial {
            InitialMode::Shared => InitialCovariances::shared_estimate(&self.system),
            InitialMode::Identity => InitialCovariances::independent_identity(&self.system),
        }
    }

    pub fn gamma0_factor(&self) -> f64 {
        self.gamma.gamma0_factor.unwrap_or(crate::filter::GAMMA_U0_FACTOR)
    }

    /// SHA-256 over every semantic field (the name and description excluded).
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Semantic<'a> {
            system: &'a TrueSystem,
            nominal: &'a NominalModel,
            topology: &'a Topology,
            gamma: &'a GammaSpec,
            sim: &'a Option<SimConfig>,
            initial: InitialMode,
            propagation: &'a Option<PropagationSpec>,
            analysis: &'a AnalysisSpec,
        }
        let sem = Semantic {
            system: &self.system,
            nominal: &self.nominal,
            topology: &self.topology,
            gamma: &self.gamma,
            sim: &self.sim,
            initial: self.initial,
            propagation: &self.propagation,
            analysis: &self.analysis,
        };
        let bytes = serde_json::to_vec(&sem).expect("scenario is serializable");
        hex::encode(Sha256::digest(bytes))
    }
}

fn resolve_topology(t: &TopologySpec) -> Result<Topology> {
    let given = [t.ring.is_some(), t.complete.is_some(), t.edges.is_some(), t.adjacency.is_some()]
        .iter()
        .filter(|&&b| b)
        .count();
    if given != 1 {
        return Err(Error::Parse(
            "topology needs exactly one of ring, complete, edges (with nodes) or adjacency".into(),
        ));
    }
    if let Some(n) = t.ring {
        return Ok(Topology::ring(n));
    }
    if let Some(n) = t.complete {
        return Ok(Topology::complete(n));
    }
    if let Some(edges) = &t.edges {
        let nodes = t
            .nodes
            .ok_or_else(|| Error::Parse("topology.edges needs topology.nodes".into()))?;
        return Topology::from_edges(nodes, edges);
    }
    Topology::from_adjacency(t.adjacency.clone().unwrap_or_default())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [system]
        a = [[0.0, 0.0], [1.0, 0.0]]
        q = 0.03
        x0 = [0.0, 1.0]
        sigma0 = { diag = [0.1, 0.1] }
        sensors = [ { c = [[0.0, 1.0]], r = 0.2 }, { c = [[0.0, 2.0]], r = [[0.2]] } ]

        [topology]
        edges = [[0, 1]]
        nodes = 2

        [gamma]
        value = 3.0
    "#;

    #[test]
    fn minimal_scenario_defaults_nominal_to_truth() {
        let s = Scenario::from_toml_str(MINIMAL).unwrap();
        assert_eq!(s.nominal, NominalModel::exact(&s.system));
        assert_eq!(s.system.q, Matrix::identity(2, 2) * 0.03);
        assert_eq!(s.gamma.resolve(None).unwrap(), vec![3.0]);
        assert_eq!(s.initial, InitialMode::Shared);
    }

    #[test]
    fn hash_tracks_semantic_fields() {
        let a = Scenario::from_toml_str(MINIMAL).unwrap();
        let b = Scenario::from_toml_str(&MINIMAL.replace("value = 3.0", "value = 3.5")).unwrap();
        let mut renamed = a.clone();
        renamed.name = "other".into();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), renamed.hash());
    }

    #[test]
    fn parse_errors_name_the_field() {
        let err = Scenario::from_toml_str(&MINIMAL.replace("x0 = [0.0, 1.0]", "x0 = [0.0]")).unwrap_err();
        assert!(err.to_string().contains("x0"), "{err}");
        let err = Scenario::from_toml_str(&MINIMAL.replace("nodes = 2", "nodes = 3")).unwrap_err();
        assert!(err.to_string().contains("topology"), "{err}");
        assert!(matches!(Scenario::from_toml_str("[system"), Err(Error::Parse(_))));
    }

    #[test]
    fn gamma_cli_specs() {
        let g = GammaSpec::parse_cli("rel:log:1:100:3").unwrap();
        assert!(g.relative);
        let grid = g.resolve(Some(2.0)).unwrap();
        assert!((grid[1] - 20.0).abs() < 1e-12 && grid[2] == 200.0);
        assert_eq!(GammaSpec::parse_cli("5,6").unwrap().raw(), vec![5.0, 6.0]);
        assert!(GammaSpec::parse_cli("abc").is_err());
        assert!(GammaSpec::parse_cli("-1").is_err());
        assert!(matches!(
            GammaSpec::parse_cli("rel:2").unwrap().resolve(None),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn presets_load() {
        for name in PRESET_NAMES {
            let s = Scenario::preset(name).unwrap();
            assert_eq!(s.system.sensor_count(), 6);
            assert_eq!(s.topology.node_count(), 6);
        }
        assert!(Scenario::preset("nope").is_err());
    }
}
