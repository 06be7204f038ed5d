//! True system, nominal (designer) model, their deviations, and the
//! standing assumptions the analysis relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{self, Topology};
use crate::matkit::{self, Matrix, Vector};

/// Singular values below `RANK_TOL·σ₁` count as zero in rank tests.
pub const RANK_TOL: f64 = 1e-9;
/// `A` is Hurwitz when `α(A) < −HURWITZ_TOL·‖A‖₂`.
pub const HURWITZ_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    /// Measurement matrix, `m_i x n`.
    pub c: Matrix,
    /// Measurement noise intensity, `m_i x m_i`.
    pub r: Matrix,
}

impl Sensor {
    pub fn new(c: Matrix, r: Matrix) -> Self {
        Self { c, r }
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }
}

/// Actual plant `ẋ = A x + ω`, `y_i = C_i x + ν_i` with white noise
/// intensities `Q` and `R_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSystem {
    pub a: Matrix,
    pub q: Matrix,
    pub sensors: Vec<Sensor>,
    pub x0: Vector,
    pub sigma0: Matrix,
}

/// Parameters the filter designer believes in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalModel {
    pub a: Matrix,
    pub q: Matrix,
    pub sensors: Vec<Sensor>,
}

fn check_psd(m: &Matrix, what: &str) -> Result<()> {
    if !matkit::is_symmetric(m, matkit::SYMMETRY_TOL) {
        return Err(Error::InvalidConfig(format!("{what} must be symmetric")));
    }
    let min = matkit::min_sym_eigenvalue(m)?;
    let scale = matkit::max_sym_eigenvalue(m)?.abs().max(f64::MIN_POSITIVE);
    if min < -matkit::SYMMETRY_TOL * scale {
        return Err(Error::InvalidConfig(format!(
            "{what} must be positive semidefinite (min eigenvalue {min:e})"
        )));
    }
    Ok(())
}

fn check_pd(m: &Matrix, what: &str) -> Result<()> {
    if !matkit::is_symmetric(m, matkit::SYMMETRY_TOL) || m.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite { what: what.into() });
    }
    Ok(())
}

fn check_sensors(sensors: &[Sensor], n: usize, tag: &str) -> Result<()> {
    if sensors.is_empty() {
        return Err(Error::InvalidConfig(format!("{tag}: at least one sensor is required")));
    }
    for (i, s) in sensors.iter().enumerate() {
        if s.c.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "{tag}: C_{i} has {} columns, state dimension is {n}",
                s.c.ncols()
            )));
        }
        if s.r.shape() != (s.c.nrows(), s.c.nrows()) {
            return Err(Error::DimensionMismatch(format!(
                "{tag}: R_{i} is {:?}, expected {m}x{m}",
                s.r.shape(),
                m = s.c.nrows(),
            )));
        }
        check_pd(&s.r, &format!("{tag}: R_{i}"))?;
    }
    Ok(())
}

impl TrueSystem {
    pub fn new(a: Matrix, q: Matrix, sensors: Vec<Sensor>, x0: Vector, sigma0: Matrix) -> Result<Self> {
        let n = matkit::ensure_square(&a)?;
        if q.shape() != (n, n) || sigma0.shape() != (n, n) || x0.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "true system: A is {n}x{n}, Q {:?}, Sigma0 {:?}, x0 has {} entries",
                q.shape(),
                sigma0.shape(),
                x0.len()
            )));
        }
        check_psd(&q, "Q")?;
        check_psd(&sigma0, "Sigma0")?;
        check_sensors(&sensors, n, "true system")?;
        Ok(Self { a, q, sensors, x0, sigma0 })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn sensor_count(&self) -> usize {
        self.sensors.len()
    }
}

impl NominalModel {
    pub fn new(a: Matrix, q: Matrix, sensors: Vec<Sensor>) -> Result<Self> {
        let n = matkit::ensure_square(&a)?;
        if q.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!("nominal Q_u is {:?}, expected {n}x{n}", q.shape())));
        }
        check_psd(&q, "Q_u")?;
        check_sensors(&sensors, n, "nominal model")?;
        Ok(Self { a, q, sensors })
    }

    /// The nominal model that matches the true system exactly.
    pub fn exact(ts: &TrueSystem) -> Self {
        Self {
            a: ts.a.clone(),
            q: ts.q.clone(),
            sensors: ts.sensors.clone(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn sensor_count(&self) -> usize {
        self.sensors.len()
    }

    /// `C_{c,u}`.
    pub fn c_stacked(&self) -> Matrix {
        matkit::vstack(&self.sensors.iter().map(|s| s.c.clone()).collect::<Vec<_>>())
    }

    /// `R_{d,u}`.
    pub fn r_blockdiag(&self) -> Matrix {
        matkit::block_diag(&self.sensors.iter().map(|s| s.r.clone()).collect::<Vec<_>>())
    }

    /// `C_{c,u}ᵀ R_{d,u}⁻¹ C_{c,u} = Σ_i C_{i,u}ᵀ R_{i,u}⁻¹ C_{i,u}`.
    pub fn information_matrix(&self) -> Result<Matrix> {
        let n = self.state_dim();
        let mut out = Matrix::zeros(n, n);
        for (i, s) in self.sensors.iter().enumerate() {
            let rinv = s.r.clone().try_inverse().ok_or(Error::Singular { what: format!("R_{i},u") })?;
            out += s.c.transpose() * rinv * &s.c;
        }
        Ok(matkit::symmetrize(&out))
    }
}

fn ensure_compatible(ts: &TrueSystem, nm: &NominalModel) -> Result<()> {
    if ts.state_dim() != nm.state_dim() {
        return Err(Error::DimensionMismatch(format!(
            "state dimension {} (true) vs {} (nominal)",
            ts.state_dim(),
            nm.state_dim()
        )));
    }
    if ts.sensor_count() != nm.sensor_count() {
        return Err(Error::DimensionMismatch(format!(
            "sensor count {} (true) vs {} (nominal)",
            ts.sensor_count(),
            nm.sensor_count()
        )));
    }
    for (i, (s, u)) in ts.sensors.iter().zip(&nm.sensors).enumerate() {
        if s.c.shape() != u.c.shape() {
            return Err(Error::DimensionMismatch(format!(
                "sensor {i}: C is {:?} but C_u is {:?}",
                s.c.shape(),
                u.c.shape()
            )));
        }
    }
    Ok(())
}

/// Nominal minus actual, per parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deviations {
    pub da: Matrix,
    pub dc: Vec<Matrix>,
    pub dq: Matrix,
    pub dr: Vec<Matrix>,
    pub da_norm: f64,
    pub dc_norms: Vec<f64>,
    pub dq_norm: f64,
    pub dr_norms: Vec<f64>,
}

impl Deviations {
    /// `‖ΔA_d‖_F = √N ‖ΔA‖_F`.
    pub fn da_d_norm(&self) -> f64 {
        (self.dc.len() as f64).sqrt() * self.da_norm
    }

    /// `√(Σ_j ‖ΔR_j‖²_F) = ‖ΔR_d‖_F`.
    pub fn dr_d_norm(&self) -> f64 {
        self.dr_norms.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `ΔR_d = blockdiag(ΔR_i)`.
    pub fn dr_blockdiag(&self) -> Matrix {
        matkit::block_diag(&self.dr)
    }

    pub fn structural_zero(&self) -> bool {
        self.da_norm == 0.0 && self.dc_norms.iter().all(|&v| v == 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.structural_zero() && self.dq_norm == 0.0 && self.dr_norms.iter().all(|&v| v == 0.0)
    }

    /// Re-apply the deviations to a true system, giving back the nominal model.
    pub fn apply(&self, ts: &TrueSystem) -> NominalModel {
        NominalModel {
            a: &ts.a + &self.da,
            q: &ts.q + &self.dq,
            sensors: ts
                .sensors
                .iter()
                .zip(self.dc.iter().zip(&self.dr))
                .map(|(s, (dc, dr))| Sensor::new(&s.c + dc, &s.r + dr))
                .collect(),
        }
    }
}

pub fn deviations(ts: &TrueSystem, nm: &NominalModel) -> Result<Deviations> {
    ensure_compatible(ts, nm)?;
    let da = &nm.a - &ts.a;
    let dq = &nm.q - &ts.q;
    let dc: Vec<Matrix> = nm.sensors.iter().zip(&ts.sensors).map(|(u, s)| &u.c - &s.c).collect();
    let dr: Vec<Matrix> = nm.sensors.iter().zip(&ts.sensors).map(|(u, s)| &u.r - &s.r).collect();
    Ok(Deviations {
        da_norm: da.norm(),
        dq_norm: dq.norm(),
        dc_norms: dc.iter().map(|m| m.norm()).collect(),
        dr_norms: dr.iter().map(|m| m.norm()).collect(),
        da,
        dc,
        dq,
        dr,
    })
}

/// Stacked and block-diagonal forms of the per-sensor parameters.
#[derive(Debug, Clone)]
pub struct Stacked {
    pub c_c: Matrix,
    pub r_d: Matrix,
    pub c_d: Matrix,
    pub c_cu: Matrix,
    pub r_du: Matrix,
    pub c_du: Matrix,
    pub a_d: Matrix,
    pub a_du: Matrix,
}

pub fn stack(ts: &TrueSystem, nm: &NominalModel) -> Result<Stacked> {
    ensure_compatible(ts, nm)?;
    let n_sensors = ts.sensor_count();
    let eye = Matrix::identity(n_sensors, n_sensors);
    let cs: Vec<Matrix> = ts.sensors.iter().map(|s| s.c.clone()).collect();
    let rs: Vec<Matrix> = ts.sensors.iter().map(|s| s.r.clone()).collect();
    let cus: Vec<Matrix> = nm.sensors.iter().map(|s| s.c.clone()).collect();
    Ok(Stacked {
        c_c: matkit::vstack(&cs),
        r_d: matkit::block_diag(&rs),
        c_d: matkit::block_diag(&cs),
        c_cu: nm.c_stacked(),
        r_du: nm.r_blockdiag(),
        c_du: matkit::block_diag(&cus),
        a_d: matkit::kron(&eye, &ts.a),
        a_du: matkit::kron(&eye, &nm.a),
    })
}

/// Extract diagonal block `i` of a block-diagonal matrix with the given block sizes.
pub fn diag_block(m: &Matrix, sizes: &[usize], i: usize) -> Matrix {
    let off: usize = sizes[..i].iter().sum();
    m.view((off, off), (sizes[i], sizes[i])).into_owned()
}

/// Observability of `(a, c)` through the rank of the stacked observability matrix.
pub fn is_observable(a: &Matrix, c: &Matrix) -> bool {
    let n = a.nrows();
    let mut blocks = Vec::with_capacity(n);
    let mut cur = c.clone();
    for _ in 0..n {
        blocks.push(cur.clone());
        cur = &cur * a;
    }
    matkit::rank(&matkit::vstack(&blocks), RANK_TOL) == n
}

/// Controllability of `(a, b)`.
pub fn is_controllable(a: &Matrix, b: &Matrix) -> bool {
    is_observable(&a.transpose(), &b.transpose())
}

/// Hurwitz test with the model-level tolerance.
pub fn is_hurwitz(a: &Matrix) -> Result<bool> {
    let tol = HURWITZ_TOL * matkit::norm2(a);
    Ok(matkit::spectral_abscissa(a)? < -tol)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub connected: bool,
    pub observable: bool,
    pub controllable: bool,
    pub f_du_zero: bool,
    pub a_hurwitz: bool,
    pub assumption1: bool,
    pub assumption2: bool,
    pub assumption3: bool,
}

impl AssumptionReport {
    pub fn overall(&self) -> bool {
        self.assumption1 && self.assumption2 && self.assumption3
    }

    /// Human-readable names of the failing checks.
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !self.connected {
            out.push("communication graph is not connected (assumption 1)");
        }
        if !self.observable {
            out.push("(A_u, C_c,u) is not observable (assumption 2)");
        }
        if !self.controllable {
            out.push("(A_u, Q_u^1/2) is not controllable (assumption 2)");
        }
        if !self.assumption3 {
            out.push("F_d,u != 0 while A is not Hurwitz (assumption 3)");
        }
        out
    }
}

pub fn validate_assumptions(
    ts: &TrueSystem,
    nm: &NominalModel,
    t: &Topology,
    f_du: &Matrix,
) -> Result<AssumptionReport> {
    ensure_compatible(ts, nm)?;
    if t.node_count() != nm.sensor_count() {
        return Err(Error::DimensionMismatch(format!(
            "topology has {} nodes for {} sensors",
            t.node_count(),
            nm.sensor_count()
        )));
    }
    let connected = graph::is_connected(t);
    let observable = is_observable(&nm.a, &nm.c_stacked());
    let controllable = is_controllable(&nm.a, &matkit::sqrtm_psd(&nm.q)?);
    let f_du_zero = f_du.iter().all(|&v| v == 0.0);
    let a_hurwitz = is_hurwitz(&ts.a)?;
    Ok(AssumptionReport {
        connected,
        observable,
        controllable,
        f_du_zero,
        a_hurwitz,
        assumption1: connected,
        assumption2: observable && controllable,
        assumption3: f_du_zero || a_hurwitz,
    })
}
