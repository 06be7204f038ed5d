//! The nominal consensus filter: gains, stacked closed-loop matrices and the
//! consensus-parameter threshold.

use crate::error::{Error, Result};
use crate::graph::{self, Topology};
use crate::matkit::{self, Matrix};
use crate::model::{self, NominalModel, TrueSystem};
use crate::solvers;

/// Default factor on `γ̄_{u0}` for the reference parameter `γ_{u0}`.
pub const GAMMA_U0_FACTOR: f64 = 1.05;

#[derive(Debug, Clone)]
pub struct FilterRealization {
    /// `P_u(∞)`.
    pub p_u: Matrix,
    /// False when `P_u(∞)` is only the limiting (non-stabilizing) Riccati solution.
    pub p_u_stabilizing: bool,
    /// Per-sensor `K_{i,u} = N P_u C_{i,u}ᵀ R_{i,u}⁻¹`.
    pub gains: Vec<Matrix>,
    pub k_du: Matrix,
    pub g_du: Matrix,
    pub f_du: Matrix,
    pub a_u: Matrix,
    /// Nominal measurement matrices `C_{i,u}`.
    pub c_u: Vec<Matrix>,
    pub laplacian: Matrix,
    pub neighbors: Vec<Vec<usize>>,
    pub gamma_u: f64,
    /// `None` when `P_u(∞)` is singular.
    pub gamma_u0_bar: Option<f64>,
    pub gamma_u0: f64,
    /// `𝒜_u = G_{d,u} − γ_u (𝓛 ⊗ P_u)`.
    pub a_cal: Matrix,
    /// `𝒜_{u0}`, the same matrix at `γ_{u0}`.
    pub a_cal0: Matrix,
}

impl FilterRealization {
    pub fn state_dim(&self) -> usize {
        self.p_u.nrows()
    }

    pub fn sensor_count(&self) -> usize {
        self.gains.len()
    }

    pub fn f_du_is_zero(&self) -> bool {
        self.f_du.iter().all(|&v| v == 0.0)
    }

    /// `𝓛 ⊗ P_u`.
    pub fn coupling(&self) -> Matrix {
        matkit::kron(&self.laplacian, &self.p_u)
    }

    /// Same filter with a different consensus parameter; `γ_{u0}` is kept.
    pub fn with_gamma(&self, gamma_u: f64) -> Result<Self> {
        check_gamma(gamma_u)?;
        let mut out = self.clone();
        out.gamma_u = gamma_u;
        out.a_cal = &self.g_du - self.coupling() * gamma_u;
        Ok(out)
    }

    /// Same filter with an explicit reference parameter `γ_{u0}`.
    pub fn with_gamma_u0(&self, gamma_u0: f64) -> Result<Self> {
        check_gamma(gamma_u0)?;
        let mut out = self.clone();
        out.gamma_u0 = gamma_u0;
        out.a_cal0 = &self.g_du - self.coupling() * gamma_u0;
        Ok(out)
    }
}

fn check_gamma(g: f64) -> Result<()> {
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::InvalidConfig(format!("consensus parameter must be positive, got {g}")));
    }
    Ok(())
}

/// `true` iff `α(m) < −tol`; `tol` defaults to `1e-9·‖m‖₂`.
pub fn is_hurwitz(m: &Matrix, tol: Option<f64>) -> Result<bool> {
    let tol = tol.unwrap_or_else(|| model::HURWITZ_TOL * matkit::norm2(m));
    Ok(matkit::spectral_abscissa(m)? < -tol)
}

fn threshold_from(p_u: &Matrix, nm: &NominalModel, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Disconnected);
    }
    let n_s = nm.sensor_count() as f64;
    let (vals, vecs) = matkit::sym_eigen(&matkit::symmetrize(p_u))?;
    let min = vals[vals.len() - 1];
    if !(min > 1e-12 * vals[0].abs().max(f64::MIN_POSITIVE)) {
        return Err(Error::Singular { what: "P_u(inf)".into() });
    }
    let p_inv = matkit::symmetrize(&(&vecs * Matrix::from_diagonal(&vals.map(|v| 1.0 / v)) * vecs.transpose()));
    let first = matkit::norm2(&(&p_inv * &nm.a + nm.a.transpose() * &p_inv));
    let info = nm.information_matrix()?;
    let inner = matkit::symmetrize(&(&p_inv * &nm.q * &p_inv + &info));
    let inner_min = matkit::min_sym_eigenvalue(&inner)?;
    if !(inner_min > 0.0) {
        return Err(Error::Singular { what: "P_u^-1 Q_u P_u^-1 + C^T R^-1 C".into() });
    }
    let second = 4.0 * n_s * n_s * (1.0 / inner_min) * matkit::max_sym_eigenvalue(&info)?;
    Ok((first + second) / lambda)
}

/// The consensus threshold `γ̄_{u0}` above which `𝒜_u` is guaranteed Hurwitz.
///
/// `lambda_override` replaces the algebraic connectivity, e.g. with a lower
/// bound when the exact topology is not known.
pub fn gamma_threshold(nm: &NominalModel, t: &Topology, lambda_override: Option<f64>) -> Result<f64> {
    let p_u = nominal_care(nm)?.p;
    let lambda = match lambda_override {
        Some(l) => l,
        None => graph::laplacian_spectrum(t)?.algebraic_connectivity(),
    };
    threshold_from(&p_u, nm, lambda)
}

fn nominal_care(nm: &NominalModel) -> Result<solvers::CareSolution> {
    solvers::solve_care_limit(&nm.a, &nm.c_stacked(), &nm.r_blockdiag(), &nm.q)
}

/// Build the filter at consensus parameter `gamma_u`.
///
/// When the nominal model makes `P_u(∞)` singular (noise-free marginal
/// modes), the limiting Riccati solution is used, `γ̄_{u0}` is unavailable
/// and `γ_{u0}` falls back to `gamma_u`. The same happens for a single
/// sensor or a disconnected graph.
pub fn build_filter(nm: &NominalModel, ts: &TrueSystem, t: &Topology, gamma_u: f64) -> Result<FilterRealization> {
    check_gamma(gamma_u)?;
    let st = model::stack(ts, nm)?;
    let n_s = nm.sensor_count();
    if t.node_count() != n_s {
        return Err(Error::DimensionMismatch(format!(
            "topology has {} nodes for {n_s} sensors",
            t.node_count()
        )));
    }
    let care = nominal_care(nm)?;
    let p_u = care.p;

    let mut gains = Vec::with_capacity(n_s);
    let mut g_blocks = Vec::with_capacity(n_s);
    let mut f_blocks = Vec::with_capacity(n_s);
    for (i, (s_u, s)) in nm.sensors.iter().zip(&ts.sensors).enumerate() {
        let chol = s_u
            .r
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { what: format!("R_{i},u") })?;
        // K = N P Cᵀ R⁻¹  ⇔  Kᵀ = N R⁻¹ C P
        let k = chol.solve(&(&s_u.c * &p_u)).transpose() * n_s as f64;
        g_blocks.push(&nm.a - &k * &s_u.c);
        f_blocks.push(&ts.a - &nm.a - &k * (&s.c - &s_u.c));
        gains.push(k);
    }
    let k_du = matkit::block_diag(&gains);
    let g_du = matkit::block_diag(&g_blocks);
    let f_du = matkit::block_diag(&f_blocks);
    debug_assert_eq!(st.c_du.shape().1, g_du.nrows());

    let laplacian = graph::laplacian(t);
    let gamma_u0_bar = if n_s > 1 && graph::is_connected(t) && care.stabilizing {
        match threshold_from(&p_u, nm, graph::laplacian_spectrum(t)?.algebraic_connectivity()) {
            Ok(v) => Some(v),
            Err(Error::Singular { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let gamma_u0 = gamma_u0_bar.map_or(gamma_u, |g| GAMMA_U0_FACTOR * g);
    let coupling = matkit::kron(&laplacian, &p_u);
    let a_cal = &g_du - &coupling * gamma_u;
    let a_cal0 = &g_du - &coupling * gamma_u0;
    Ok(FilterRealization {
        p_u,
        p_u_stabilizing: care.stabilizing,
        gains,
        k_du,
        g_du,
        f_du,
        a_u: nm.a.clone(),
        c_u: nm.sensors.iter().map(|s| s.c.clone()).collect(),
        laplacian,
        neighbors: (0..n_s).map(|i| t.neighbors(i)).collect(),
        gamma_u,
        gamma_u0_bar,
        gamma_u0,
        a_cal,
        a_cal0,
    })
}

/// Build at `γ_u = factor·γ̄_{u0}`.
pub fn build_relative(nm: &NominalModel, ts: &TrueSystem, t: &Topology, factor: f64) -> Result<FilterRealization> {
    let bar = gamma_threshold(nm, t, None)?;
    build_filter(nm, ts, t, factor * bar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Sensor;
    use crate::matkit::Vector;

    fn toy(n_sensors: usize) -> TrueSystem {
        let a = Matrix::from_row_slice(2, 2, &[-0.5, 1.0, 0.0, -0.3]);
        let sensors = (0..n_sensors)
            .map(|i| {
                let c = if i % 2 == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
                Sensor::new(Matrix::from_row_slice(1, 2, &c), Matrix::from_element(1, 1, 0.2))
            })
            .collect();
        TrueSystem::new(a, Matrix::identity(2, 2) * 0.1, sensors, Vector::zeros(2), Matrix::identity(2, 2)).unwrap()
    }

    #[test]
    fn zero_deviation_has_zero_f() {
        let ts = toy(3);
        let nm = NominalModel::exact(&ts);
        let fr = build_filter(&nm, &ts, &Topology::ring(3), 1.0).unwrap();
        assert!(fr.f_du_is_zero());
        assert!(fr.p_u_stabilizing);
        for (i, s) in ts.sensors.iter().enumerate() {
            let g = model::diag_block(&fr.g_du, &[2, 2, 2], i);
            assert!((g - (&ts.a - &fr.gains[i] * &s.c)).norm() < 1e-14);
        }
    }

    #[test]
    fn single_sensor_ignores_gamma() {
        let ts = toy(1);
        let nm = NominalModel::exact(&ts);
        let t = Topology::ring(1);
        let a = build_filter(&nm, &ts, &t, 1.0).unwrap();
        let b = build_filter(&nm, &ts, &t, 50.0).unwrap();
        assert_eq!(a.a_cal, b.a_cal);
        assert!((&a.a_cal - (&ts.a - &a.gains[0] * &ts.sensors[0].c)).norm() < 1e-14);
    }

    #[test]
    fn threshold_scales_with_connectivity() {
        let ts = toy(6);
        let nm = NominalModel::exact(&ts);
        let ring = Topology::ring(6);
        let bar = gamma_threshold(&nm, &ring, None).unwrap();
        let half = gamma_threshold(&nm, &ring, Some(0.5)).unwrap();
        assert!((half - 2.0 * bar).abs() <= 1e-12 * bar);
        assert!(gamma_threshold(&nm, &Topology::complete(6), None).unwrap() < bar);
        let fr = build_filter(&nm, &ts, &ring, 1.1 * bar).unwrap();
        assert!(is_hurwitz(&fr.a_cal, None).unwrap());
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&-Matrix::identity(3, 3), None).unwrap());
        assert!(!is_hurwitz(&Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), None).unwrap());
    }

    #[test]
    fn with_gamma_matches_rebuild() {
        let ts = toy(4);
        let nm = NominalModel::exact(&ts);
        let t = Topology::ring(4);
        let a = build_filter(&nm, &ts, &t, 3.0).unwrap().with_gamma(7.0).unwrap();
        let b = build_filter(&nm, &ts, &t, 7.0).unwrap();
        assert!((a.a_cal - b.a_cal).norm() < 1e-12);
        assert!(build_filter(&nm, &ts, &t, -1.0).is_err());
    }
}
