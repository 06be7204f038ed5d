//! Riccati, Lyapunov and Sylvester solvers plus fixed-step propagation of
//! the coupled covariance ODEs of the distributed filter.

use nalgebra::Schur;

use crate::error::{Error, Result};
use crate::filter::FilterRealization;
use crate::matkit::{self, Matrix};
use crate::model::{self, NominalModel, TrueSystem};

/// Dense Kronecker solves are used up to this order.
pub const KRONECKER_MAX_DIM: usize = 32;
/// `min |λ_i(A) + λ_j(B)| ≤ SPECTRUM_TOL·(‖A‖_F + ‖B‖_F)` makes a Sylvester equation singular.
pub const SPECTRUM_TOL: f64 = 1e-10;
/// Hamiltonian eigenvalues with `|Re λ| ≤ HAMILTONIAN_TOL·‖H‖_F` are treated as imaginary.
pub const HAMILTONIAN_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LyapunovMethod {
    /// Kronecker for order ≤ [`KRONECKER_MAX_DIM`], Schur otherwise.
    #[default]
    Auto,
    Kronecker,
    Schur,
}

fn check_spectra(a: &Matrix, b: &Matrix) -> Result<()> {
    let la = matkit::eigenvalues(a)?;
    let lb = matkit::eigenvalues(b)?;
    let min_sum = la
        .iter()
        .flat_map(|x| lb.iter().map(move |y| (x + y).norm()))
        .fold(f64::INFINITY, f64::min);
    let scale = a.norm() + b.norm();
    if min_sum <= SPECTRUM_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::SingularEquation { min_sum });
    }
    Ok(())
}

/// Solve `A X + X B = C`.
pub fn solve_sylvester(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    solve_sylvester_with(a, b, c, LyapunovMethod::Auto)
}

pub fn solve_sylvester_with(a: &Matrix, b: &Matrix, c: &Matrix, method: LyapunovMethod) -> Result<Matrix> {
    let p = matkit::ensure_square(a)?;
    let q = matkit::ensure_square(b)?;
    if c.shape() != (p, q) {
        return Err(Error::DimensionMismatch(format!(
            "Sylvester right-hand side is {:?}, expected {p}x{q}",
            c.shape()
        )));
    }
    check_spectra(a, b)?;
    let use_kron = match method {
        LyapunovMethod::Auto => p.max(q) <= KRONECKER_MAX_DIM,
        LyapunovMethod::Kronecker => true,
        LyapunovMethod::Schur => false,
    };
    let x = if use_kron {
        sylvester_kronecker(a, b, c)?
    } else {
        sylvester_schur(a, b, c)?
    };
    let resid = (a * &x + &x * b - c).norm();
    let scale = (a.norm() + b.norm()) * x.norm() + c.norm();
    if !resid.is_finite() || resid > 1e-6 * scale.max(1.0) {
        return Err(Error::SingularEquation { min_sum: 0.0 });
    }
    Ok(x)
}

fn sylvester_kronecker(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    let (p, q) = (a.nrows(), b.nrows());
    let k = matkit::kron(&Matrix::identity(q, q), a) + matkit::kron(&b.transpose(), &Matrix::identity(p, p));
    let rhs = matkit::vec(c);
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularEquation { min_sum: 0.0 })?;
    Ok(matkit::unvec(sol.as_slice(), p, q))
}

/// Diagonal block boundaries of a real quasi-upper-triangular matrix.
fn quasi_blocks(t: &Matrix) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            out.push((i, 2));
            i += 2;
        } else {
            out.push((i, 1));
            i += 1;
        }
    }
    out
}

/// Bartels–Stewart on real Schur forms.
fn sylvester_schur(a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Matrix> {
    let sa = Schur::try_new(a.clone(), 1e-15, 10_000).ok_or(Error::EigenFailure)?;
    let sb = Schur::try_new(b.clone(), 1e-15, 10_000).ok_or(Error::EigenFailure)?;
    let (u, ta) = sa.unpack();
    let (v, tb) = sb.unpack();
    let f = u.transpose() * c * &v;
    let (p, q) = (a.nrows(), b.nrows());
    let mut y = Matrix::zeros(p, q);
    let row_blocks = quasi_blocks(&ta);
    let col_blocks = quasi_blocks(&tb);

    for &(j0, qj) in &col_blocks {
        // F_J − Σ_{K<J} Y_K Tb_{K,J}
        let mut rhs_col = f.columns(j0, qj).into_owned();
        if j0 > 0 {
            rhs_col -= y.columns(0, j0) * tb.view((0, j0), (j0, qj));
        }
        let tb_jj = tb.view((j0, j0), (qj, qj)).into_owned();
        for &(i0, pi) in row_blocks.iter().rev() {
            let mut rhs = rhs_col.rows(i0, pi).into_owned();
            let below = i0 + pi;
            if below < p {
                rhs -= ta.view((i0, below), (pi, p - below)) * y.view((below, j0), (p - below, qj));
            }
            let ta_ii = ta.view((i0, i0), (pi, pi)).into_owned();
            let small = matkit::kron(&Matrix::identity(qj, qj), &ta_ii)
                + matkit::kron(&tb_jj.transpose(), &Matrix::identity(pi, pi));
            let sol = small
                .lu()
                .solve(&matkit::vec(&rhs))
                .ok_or(Error::SingularEquation { min_sum: 0.0 })?;
            y.view_mut((i0, j0), (pi, qj))
                .copy_from(&matkit::unvec(sol.as_slice(), pi, qj));
        }
    }
    Ok(&u * y * v.transpose())
}

/// Solve `M X + X Mᵀ + W = 0`. The result is symmetrized when `W` is symmetric.
pub fn solve_lyapunov(m: &Matrix, w: &Matrix) -> Result<Matrix> {
    solve_lyapunov_with(m, w, LyapunovMethod::Auto)
}

pub fn solve_lyapunov_with(m: &Matrix, w: &Matrix, method: LyapunovMethod) -> Result<Matrix> {
    let x = solve_sylvester_with(m, &m.transpose(), &-w, method)?;
    if matkit::is_symmetric(w, matkit::SYMMETRY_TOL) {
        Ok(matkit::symmetrize(&x))
    } else {
        Ok(x)
    }
}

/// `‖A P + P Aᵀ + Q − P Cᵀ R⁻¹ C P‖_F`.
pub fn care_residual(a: &Matrix, c: &Matrix, r: &Matrix, q: &Matrix, p: &Matrix) -> Result<f64> {
    let g = care_gain_matrix(c, r)?;
    Ok((a * p + p * a.transpose() + q - p * g * p).norm())
}

fn care_gain_matrix(c: &Matrix, r: &Matrix) -> Result<Matrix> {
    let chol = r.clone().cholesky().ok_or(Error::NotPositiveDefinite { what: "R_d".into() })?;
    Ok(matkit::symmetrize(&(c.transpose() * chol.solve(c))))
}

fn check_care_dims(a: &Matrix, c: &Matrix, r: &Matrix, q: &Matrix) -> Result<usize> {
    let n = matkit::ensure_square(a)?;
    if c.ncols() != n || r.shape() != (c.nrows(), c.nrows()) || q.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "CARE: A {n}x{n}, C {:?}, R {:?}, Q {:?}",
            c.shape(),
            r.shape(),
            q.shape()
        )));
    }
    if !matkit::is_symmetric(r, matkit::SYMMETRY_TOL) {
        return Err(Error::NotPositiveDefinite { what: "R_d".into() });
    }
    Ok(n)
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(h: &Matrix) -> Result<Matrix> {
    let n = h.nrows();
    let mut z = h.clone();
    for _ in 0..100 {
        let lu = z.clone().lu();
        let log_det: f64 = lu.u().diagonal().iter().map(|d| d.abs().ln()).sum();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::NoStabilizingSolution("Hamiltonian iterate became singular".into()))?;
        let scale = (-log_det / n as f64).exp();
        let next = (&z * scale + inv / scale) * 0.5;
        let delta = (&next - &z).norm();
        z = next;
        if !matkit::all_finite(&z) {
            return Err(Error::NoStabilizingSolution("sign iteration diverged".into()));
        }
        if delta <= 1e-13 * z.norm() {
            return Ok(z);
        }
    }
    Err(Error::NoStabilizingSolution("sign iteration did not converge".into()))
}

/// Stabilizing solution of the filter Riccati equation
/// `A P + P Aᵀ + Q − P Cᵀ R⁻¹ C P = 0`.
///
/// The stable invariant subspace of the Hamiltonian is extracted with the
/// matrix sign function and the result is polished by Newton–Kleinman steps.
pub fn solve_care(a: &Matrix, c: &Matrix, r: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = check_care_dims(a, c, r, q)?;
    let g = care_gain_matrix(c, r)?;
    let q = matkit::symmetrize(q);

    let mut h = Matrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(&a.transpose());
    h.view_mut((0, n), (n, n)).copy_from(&-&g);
    h.view_mut((n, 0), (n, n)).copy_from(&-&q);
    h.view_mut((n, n), (n, n)).copy_from(&-a);

    let min_re = matkit::eigenvalues(&h)?
        .iter()
        .map(|l| l.re.abs())
        .fold(f64::INFINITY, f64::min);
    if min_re <= HAMILTONIAN_TOL * h.norm() {
        return Err(Error::NoStabilizingSolution(format!(
            "Hamiltonian has an eigenvalue with |Re| = {min_re:e}"
        )));
    }

    let w = matrix_sign(&h)?;
    // W [I; P] = −[I; P]  ⇒  [W12; W22 + I] P = −[W11 + I; W21]
    let mut lhs = Matrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(w.view((n, n), (n, n)) + Matrix::identity(n, n)));
    let mut rhs = Matrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&-(w.view((0, 0), (n, n)) + Matrix::identity(n, n)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&-w.view((n, 0), (n, n)));
    let p = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::NoStabilizingSolution(e.to_string()))?;
    let mut p = matkit::symmetrize(&p);

    let mut resid = (a * &p + &p * a.transpose() + &q - &p * &g * &p).norm();
    for _ in 0..6 {
        let acl = a - &p * &g;
        let Ok(next) = solve_lyapunov(&acl, &(&q + &p * &g * &p)) else { break };
        let next = matkit::symmetrize(&next);
        let r_next = (a * &next + &next * a.transpose() + &q - &next * &g * &next).norm();
        if !(r_next < resid) {
            break;
        }
        p = next;
        resid = r_next;
    }

    let acl = a - &p * &g;
    let abscissa = matkit::spectral_abscissa(&acl)?;
    if abscissa >= 0.0 {
        return Err(Error::NoStabilizingSolution(format!(
            "closed loop spectral abscissa {abscissa:e}"
        )));
    }
    if resid > 1e-8 * (1.0 + p.norm_squared()) {
        return Err(Error::NoStabilizingSolution(format!("residual {resid:e} too large")));
    }
    Ok(p)
}

#[derive(Debug, Clone)]
pub struct CareSolution {
    pub p: Matrix,
    /// False when `A − P Cᵀ R⁻¹ C` keeps marginal modes that the noise
    /// cannot reach.
    pub stabilizing: bool,
    pub residual: f64,
}

/// Like [`solve_care`], but falls back to the limiting solution when the
/// only obstruction is a set of noise-free modes on the imaginary axis.
///
/// Those modes get zero covariance; the rest of the equation is solved on
/// the controllable subspace of `(A, Q^{1/2})`.
pub fn solve_care_limit(a: &Matrix, c: &Matrix, r: &Matrix, q: &Matrix) -> Result<CareSolution> {
    match solve_care(a, c, r, q) {
        Ok(p) => {
            let residual = care_residual(a, c, r, q, &p)?;
            Ok(CareSolution { p, stabilizing: true, residual })
        }
        Err(Error::NoStabilizingSolution(reason)) => {
            let n = a.nrows();
            let b = matkit::sqrtm_psd(&matkit::symmetrize(q))?;
            let mut blocks = Vec::with_capacity(n);
            let mut cur = b;
            for _ in 0..n {
                blocks.push(cur.clone());
                cur = a * cur;
            }
            let mut ctrb = Matrix::zeros(n, n * n);
            for (k, blk) in blocks.iter().enumerate() {
                ctrb.view_mut((0, k * n), (n, n)).copy_from(blk);
            }
            let v = matkit::range_basis(&ctrb, model::RANK_TOL);
            let k = v.ncols();
            if k == n {
                return Err(Error::NoStabilizingSolution(reason));
            }
            let w = matkit::null_basis(&v.transpose(), 1e-12);
            let a22 = w.transpose() * a * &w;
            let marginal = matkit::spectral_abscissa(&a22)?;
            if marginal > model::HURWITZ_TOL * matkit::norm2(a).max(1.0) {
                return Err(Error::NoStabilizingSolution(format!(
                    "{reason}; unreachable modes are unstable (abscissa {marginal:e})"
                )));
            }
            let p = if k == 0 {
                Matrix::zeros(n, n)
            } else {
                let a11 = v.transpose() * a * &v;
                let q11 = matkit::symmetrize(&(v.transpose() * q * &v));
                let p11 = solve_care(&a11, &(c * &v), r, &q11)?;
                matkit::symmetrize(&(&v * p11 * v.transpose()))
            };
            let residual = care_residual(a, c, r, q, &p)?;
            if residual > 1e-8 * (1.0 + p.norm_squared()) {
                return Err(Error::NoStabilizingSolution(format!("limiting residual {residual:e}")));
            }
            Ok(CareSolution { p, stabilizing: false, residual })
        }
        Err(e) => Err(e),
    }
}

/// Steady-state covariances `Σ̄_u`, `Σ̄_e` and the cross terms `S̄`, `X̄`.
#[derive(Debug, Clone)]
pub struct SteadyStateResult {
    pub sigma_u: Matrix,
    pub sigma_e: Matrix,
    /// `None` when `F_d,u = 0` (the cross terms do not enter).
    pub s: Option<Matrix>,
    pub x: Option<Matrix>,
    pub residual_sigma_u: f64,
    pub residual_sigma_e: f64,
    pub residual_s: Option<f64>,
    pub residual_x: Option<f64>,
}

/// Constant forcing terms shared by the steady-state and transient solvers.
pub(crate) struct Forcing {
    /// `K R_{d,u} Kᵀ + U_N ⊗ Q_u`
    pub nominal: Matrix,
    /// `K R_d Kᵀ + U_N ⊗ Q`
    pub actual: Matrix,
    /// `U_N ⊗ Q`
    pub process: Matrix,
    pub a_d: Matrix,
}

impl Forcing {
    pub fn new(fr: &FilterRealization, ts: &TrueSystem, nm: &NominalModel) -> Result<Self> {
        let st = model::stack(ts, nm)?;
        let u = matkit::ones(fr.sensor_count());
        let k = &fr.k_du;
        let process = matkit::kron(&u, &ts.q);
        Ok(Self {
            nominal: matkit::symmetrize(&(k * &st.r_du * k.transpose() + matkit::kron(&u, &nm.q))),
            actual: matkit::symmetrize(&(k * &st.r_d * k.transpose() + &process)),
            process,
            a_d: st.a_d,
        })
    }
}

pub fn steady_state(fr: &FilterRealization, ts: &TrueSystem, nm: &NominalModel) -> Result<SteadyStateResult> {
    let forcing = Forcing::new(fr, ts, nm)?;
    let acal = &fr.a_cal;
    let sigma_u = solve_lyapunov(acal, &forcing.nominal)?;
    let tol = model::HURWITZ_TOL * matkit::norm2(acal);
    let abscissa = matkit::spectral_abscissa(acal)?;
    if abscissa >= -tol {
        return Err(Error::NotHurwitz { what: "closed-loop matrix A_u".into(), abscissa });
    }
    let lyap_resid = |m: &Matrix, x: &Matrix, w: &Matrix| (m * x + x * m.transpose() + w).norm();
    let residual_sigma_u = lyap_resid(acal, &sigma_u, &forcing.nominal);

    if fr.f_du_is_zero() {
        let sigma_e = solve_lyapunov(acal, &forcing.actual)?;
        let residual_sigma_e = lyap_resid(acal, &sigma_e, &forcing.actual);
        return Ok(SteadyStateResult {
            sigma_u,
            sigma_e,
            s: None,
            x: None,
            residual_sigma_u,
            residual_sigma_e,
            residual_s: None,
            residual_x: None,
        });
    }

    if !model::is_hurwitz(&ts.a)? {
        return Err(Error::NotHurwitz {
            what: "true state matrix A (required when F_d,u != 0)".into(),
            abscissa: matkit::spectral_abscissa(&ts.a)?,
        });
    }
    let f = &fr.f_du;
    let x = solve_lyapunov(&forcing.a_d, &forcing.process)?;
    let residual_x = lyap_resid(&forcing.a_d, &x, &forcing.process);
    let s_rhs = -(f * &x + &forcing.process);
    let s = solve_sylvester(acal, &forcing.a_d.transpose(), &s_rhs)?;
    let residual_s = (acal * &s + &s * forcing.a_d.transpose() - &s_rhs).norm();
    let sf = &s * f.transpose();
    let w = matkit::symmetrize(&(&sf + sf.transpose() + &forcing.actual));
    let sigma_e = solve_lyapunov(acal, &w)?;
    let residual_sigma_e = lyap_resid(acal, &sigma_e, &w);
    Ok(SteadyStateResult {
        sigma_u,
        sigma_e,
        s: Some(s),
        x: Some(x),
        residual_sigma_u,
        residual_sigma_e,
        residual_s: Some(residual_s),
        residual_x: Some(residual_x),
    })
}

/// Initial conditions for the four covariance blocks.
#[derive(Debug, Clone)]
pub struct InitialCovariances {
    pub sigma_u: Matrix,
    pub sigma_e: Matrix,
    pub s: Matrix,
    pub x: Matrix,
}

impl InitialCovariances {
    /// Every local filter starts from the same estimate `x̂_i(0) = x0`, so
    /// all error blocks coincide: `Σ_e(0) = U_N ⊗ Σ0` and `S(0) = U_N ⊗ Σ0`.
    pub fn shared_estimate(ts: &TrueSystem) -> Self {
        let n_s = ts.sensor_count();
        let u = matkit::ones(n_s);
        let sigma = matkit::kron(&u, &ts.sigma0);
        Self {
            sigma_u: sigma.clone(),
            sigma_e: sigma.clone(),
            s: sigma,
            x: Self::state_second_moment(ts),
        }
    }

    /// Local errors start independent of each other and of the state, with
    /// `Σ_e(0) = Σ_u(0) = I`.
    pub fn independent_identity(ts: &TrueSystem) -> Self {
        let dim = ts.state_dim() * ts.sensor_count();
        Self {
            sigma_u: Matrix::identity(dim, dim),
            sigma_e: Matrix::identity(dim, dim),
            s: Matrix::zeros(dim, dim),
            x: Self::state_second_moment(ts),
        }
    }

    /// `X(0) = U_N ⊗ Σ0 + (1_N ⊗ x0)(1_N ⊗ x0)ᵀ`.
    pub fn state_second_moment(ts: &TrueSystem) -> Matrix {
        let n_s = ts.sensor_count();
        let m = &ts.sigma0 + &ts.x0 * ts.x0.transpose();
        matkit::kron(&matkit::ones(n_s), &m)
    }

    /// Joint second moment of `ξ = [η_c; 1_N ⊗ x]`.
    pub fn joint(&self) -> Matrix {
        let d = self.sigma_e.nrows();
        let mut out = Matrix::zeros(2 * d, 2 * d);
        out.view_mut((0, 0), (d, d)).copy_from(&self.sigma_e);
        out.view_mut((0, d), (d, d)).copy_from(&self.s);
        out.view_mut((d, 0), (d, d)).copy_from(&self.s.transpose());
        out.view_mut((d, d), (d, d)).copy_from(&self.x);
        out
    }
}

/// Fixed-step grid: `steps` RK4 steps of length `dt`, recording every
/// `record_stride` steps (time 0 included).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
    pub record_stride: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, horizon: f64, record_stride: usize) -> Result<Self> {
        if !(dt > 0.0) || !(horizon > dt) || record_stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "time grid needs 0 < dt < horizon and stride >= 1 (dt={dt}, horizon={horizon}, stride={record_stride})"
            )));
        }
        Ok(Self { dt, steps: (horizon / dt).round() as usize, record_stride })
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn record_times(&self) -> Vec<f64> {
        (0..=self.steps)
            .step_by(self.record_stride)
            .map(|k| k as f64 * self.dt)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CovarianceTrajectory {
    pub times: Vec<f64>,
    pub sigma_u: Vec<Matrix>,
    pub sigma_e: Vec<Matrix>,
    pub s: Vec<Matrix>,
    pub x: Vec<Matrix>,
    /// `d Tr Σ_e / dt` between consecutive recorded times.
    pub trace_growth: Vec<f64>,
}

impl CovarianceTrajectory {
    pub fn last_sigma_e(&self) -> &Matrix {
        self.sigma_e.last().expect("trajectory is never empty")
    }
}

#[derive(Clone)]
struct CovState {
    sigma_u: Matrix,
    sigma_e: Matrix,
    s: Matrix,
    x: Matrix,
}

impl CovState {
    fn axpy(&self, h: f64, d: &CovState) -> CovState {
        CovState {
            sigma_u: &self.sigma_u + &d.sigma_u * h,
            sigma_e: &self.sigma_e + &d.sigma_e * h,
            s: &self.s + &d.s * h,
            x: &self.x + &d.x * h,
        }
    }
}

/// `M Σ + Σ Mᵀ` for symmetric `Σ`.
fn sym_sandwich(m: &Matrix, sigma: &Matrix) -> Matrix {
    let ms = m * sigma;
    &ms + ms.transpose()
}

pub fn propagate(
    fr: &FilterRealization,
    ts: &TrueSystem,
    nm: &NominalModel,
    init: &InitialCovariances,
    grid: &TimeGrid,
) -> Result<CovarianceTrajectory> {
    let forcing = Forcing::new(fr, ts, nm)?;
    let acal = &fr.a_cal;
    let f = &fr.f_du;
    let f_zero = fr.f_du_is_zero();
    let a_dt = forcing.a_d.transpose();
    let deriv = |st: &CovState| -> CovState {
        let mut sigma_e = sym_sandwich(acal, &st.sigma_e) + &forcing.actual;
        let mut s = acal * &st.s + &st.s * &a_dt + &forcing.process;
        if !f_zero {
            let sf = &st.s * f.transpose();
            sigma_e += &sf + sf.transpose();
            s += f * &st.x;
        }
        CovState {
            sigma_u: sym_sandwich(acal, &st.sigma_u) + &forcing.nominal,
            sigma_e,
            s,
            x: sym_sandwich(&forcing.a_d, &st.x) + &forcing.process,
        }
    };

    let mut state = CovState {
        sigma_u: init.sigma_u.clone(),
        sigma_e: init.sigma_e.clone(),
        s: init.s.clone(),
        x: init.x.clone(),
    };
    let dim = acal.nrows();
    for (m, what) in [(&state.sigma_u, "Sigma_u(0)"), (&state.sigma_e, "Sigma_e(0)"), (&state.s, "S(0)"), (&state.x, "X(0)")] {
        if m.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch(format!("{what} is {:?}, expected {dim}x{dim}", m.shape())));
        }
    }

    let mut traj = CovarianceTrajectory {
        times: Vec::new(),
        sigma_u: Vec::new(),
        sigma_e: Vec::new(),
        s: Vec::new(),
        x: Vec::new(),
        trace_growth: Vec::new(),
    };
    let record = |traj: &mut CovarianceTrajectory, t: f64, st: &CovState| {
        if let (Some(&t0), Some(prev)) = (traj.times.last(), traj.sigma_e.last()) {
            traj.trace_growth.push((st.sigma_e.trace() - prev.trace()) / (t - t0));
        }
        traj.times.push(t);
        traj.sigma_u.push(st.sigma_u.clone());
        traj.sigma_e.push(st.sigma_e.clone());
        traj.s.push(st.s.clone());
        traj.x.push(st.x.clone());
    };
    record(&mut traj, 0.0, &state);

    let h = grid.dt;
    for step in 1..=grid.steps {
        let k1 = deriv(&state);
        let k2 = deriv(&state.axpy(0.5 * h, &k1));
        let k3 = deriv(&state.axpy(0.5 * h, &k2));
        let k4 = deriv(&state.axpy(h, &k3));
        let mut next = state.axpy(h / 6.0, &k1);
        next = next.axpy(h / 3.0, &k2);
        next = next.axpy(h / 3.0, &k3);
        next = next.axpy(h / 6.0, &k4);
        next.sigma_u = matkit::symmetrize(&next.sigma_u);
        next.sigma_e = matkit::symmetrize(&next.sigma_e);
        next.x = matkit::symmetrize(&next.x);
        if !(matkit::all_finite(&next.sigma_e) && matkit::all_finite(&next.x) && matkit::all_finite(&next.sigma_u)) {
            return Err(Error::Overflow { step });
        }
        state = next;
        if step % grid.record_stride == 0 {
            record(&mut traj, step as f64 * h, &state);
        }
    }
    Ok(traj)
}

/// Joint error/state system `ξ̇ = ℱ ξ + ℬ ρ` with `ξ = [η_c; 1_N ⊗ x]`.
#[derive(Debug, Clone)]
pub struct AugmentedJointSystem {
    pub f: Matrix,
    pub b: Matrix,
    pub phi: Matrix,
    pub sigma_xi0: Matrix,
}

impl AugmentedJointSystem {
    pub fn new(fr: &FilterRealization, ts: &TrueSystem, nm: &NominalModel, init: &InitialCovariances) -> Result<Self> {
        let st = model::stack(ts, nm)?;
        let d = fr.a_cal.nrows();
        let m = st.r_d.nrows();
        let mut f = Matrix::zeros(2 * d, 2 * d);
        f.view_mut((0, 0), (d, d)).copy_from(&fr.a_cal);
        f.view_mut((0, d), (d, d)).copy_from(&fr.f_du);
        f.view_mut((d, d), (d, d)).copy_from(&st.a_d);
        let mut b = Matrix::zeros(2 * d, m + d);
        b.view_mut((0, 0), (d, m)).copy_from(&-&fr.k_du);
        b.view_mut((0, m), (d, d)).copy_from(&Matrix::identity(d, d));
        b.view_mut((d, m), (d, d)).copy_from(&Matrix::identity(d, d));
        let u = matkit::ones(fr.sensor_count());
        let phi = matkit::block_diag(&[st.r_d, matkit::kron(&u, &ts.q)]);
        Ok(Self { f, b, phi, sigma_xi0: init.joint() })
    }

    /// RK4 propagation of `Σ̇_ξ = ℱ Σ_ξ + Σ_ξ ℱᵀ + ℬ Φ ℬᵀ`.
    pub fn propagate(&self, grid: &TimeGrid) -> Result<Vec<(f64, Matrix)>> {
        let w = matkit::symmetrize(&(&self.b * &self.phi * self.b.transpose()));
        let deriv = |s: &Matrix| sym_sandwich(&self.f, s) + &w;
        let mut s = self.sigma_xi0.clone();
        let mut out = vec![(0.0, s.clone())];
        let h = grid.dt;
        for step in 1..=grid.steps {
            let k1 = deriv(&s);
            let k2 = deriv(&(&s + &k1 * (0.5 * h)));
            let k3 = deriv(&(&s + &k2 * (0.5 * h)));
            let k4 = deriv(&(&s + &k3 * h));
            s = matkit::symmetrize(&(&s + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
            if !matkit::all_finite(&s) {
                return Err(Error::Overflow { step });
            }
            if step % grid.record_stride == 0 {
                out.push((step as f64 * h, s.clone()));
            }
        }
        Ok(out)
    }
}
