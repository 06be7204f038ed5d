//! Performance bounds of the nominal filter: the steady-state trace
//! sandwich, its decay in the consensus parameter, the divergence test for
//! a wrong process-noise model, and the ordering of `Σ_u` and `Σ_e`.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterRealization;
use crate::matkit::{self, LogNormKind, Matrix, Vector};
use crate::model::{Deviations, NominalModel, TrueSystem};
use crate::solvers::{self, SteadyStateResult, TimeGrid};

/// `s` and `χ` with `|·| ≤ HYPOTHESIS_TOL·scale` are treated as zero.
pub const HYPOTHESIS_TOL: f64 = 1e-12;
/// Relative cut on `|Re λ|` and `‖Q_u e‖` for divergence certificates.
pub const CERTIFICATE_TOL: f64 = 1e-8;
/// `λ_min(ΔD) ≥ −DEFINITENESS_TOL·‖ΔD‖₂` counts as positive semidefinite.
pub const DEFINITENESS_TOL: f64 = 1e-10;
/// Ordering checks on `E_ue(t)` tolerate eigenvalues down to `−ORDERING_TOL`.
pub const ORDERING_TOL: f64 = 1e-8;

/// Multiplier on `‖ΔA_d‖_F` inside `s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SNormVariant {
    /// `√(nN)`, as required by the Kronecker-norm argument.
    #[default]
    Proof,
    /// `√N`.
    Statement,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub gamma_u: f64,
    pub tr_sigma_u: f64,
    pub tr_sigma_e: f64,
    pub rho: f64,
    pub upper: f64,
    pub lower: f64,
    pub s: f64,
    pub chi: f64,
    pub s_bar_norm_bound: f64,
    pub x_bar_norm_bound: f64,
    pub tr_sigma_u_lower: f64,
    /// `‖vec(I)ᵀ 𝒜̄_u⁻¹‖₂`.
    pub v1: f64,
    /// `‖vec(I)ᵀ 𝒜̄_u⁻¹ (K ⊗ K)‖₂`.
    pub v2: f64,
    /// `‖S̄‖_F` of the solved steady state (`None` when `F_d,u = 0`).
    pub s_bar_norm: Option<f64>,
    /// `ρ` with the solved `‖S̄‖_F` in place of its bound.
    pub rho_with_s_bar: f64,
}

impl BoundsReport {
    pub fn sandwich_holds(&self) -> bool {
        self.lower <= self.tr_sigma_e && self.tr_sigma_e <= self.upper
    }
}

/// The two weights of `ρ`, from one Lyapunov solve `𝒜ᵀ X + X 𝒜 = I`.
pub fn rho_weights(fr: &FilterRealization) -> Result<(f64, f64)> {
    let d = fr.a_cal.nrows();
    let x = solvers::solve_lyapunov(&fr.a_cal.transpose(), &-Matrix::identity(d, d))?;
    let v1 = x.norm();
    let v2 = (fr.k_du.transpose() * &x * &fr.k_du).norm();
    Ok((v1, v2))
}

struct RhoParts {
    s: f64,
    chi: f64,
    x_bound: f64,
    s_bound: f64,
}

fn rho_parts(fr: &FilterRealization, nm: &NominalModel, dev: &Deviations, variant: SNormVariant) -> Result<RhoParts> {
    let n_s = fr.sensor_count() as f64;
    let nn = fr.a_cal.nrows() as f64;
    let a_du = matkit::kron(&Matrix::identity(fr.sensor_count(), fr.sensor_count()), &nm.a);
    let da_d = dev.da_d_norm();
    let s_factor = match variant {
        SNormVariant::Proof => nn.sqrt(),
        SNormVariant::Statement => n_s.sqrt(),
    };
    let s_scale = matkit::kron_sum_frobenius(&fr.a_cal, &a_du);
    let chi_scale = matkit::kron_sum_frobenius(&a_du, &a_du);
    let s = s_scale - s_factor * da_d;
    let chi = chi_scale - 2.0 * nn.sqrt() * da_d;
    if s.abs() <= HYPOTHESIS_TOL * s_scale.max(1.0) {
        return Err(Error::Hypothesis(format!("s = {s:e} is numerically zero")));
    }
    if chi.abs() <= HYPOTHESIS_TOL * chi_scale.max(1.0) {
        return Err(Error::Hypothesis(format!("chi = {chi:e} is numerically zero")));
    }
    let q_norm = nm.q.norm();
    let x_bound = n_s * (q_norm + dev.dq_norm) / chi.abs();
    let s_bound = (nn.sqrt() * fr.f_du.norm() * x_bound + n_s * q_norm + n_s * dev.dq_norm) / s.abs();
    Ok(RhoParts { s, chi, x_bound, s_bound })
}

/// `ρ = v2·‖ΔR_d‖_F + v1·(N‖ΔQ‖_F + 2‖F_d,u‖_F·s_bar)`.
pub fn rho_from_weights(fr: &FilterRealization, dev: &Deviations, v1: f64, v2: f64, s_bar: f64) -> f64 {
    let n_s = fr.sensor_count() as f64;
    v2 * dev.dr_d_norm() + v1 * (n_s * dev.dq_norm + 2.0 * fr.f_du.norm() * s_bar)
}

/// Trace bounds on `Tr Σ̄_e` around `Tr Σ̄_u`.
pub fn trace_bounds(
    fr: &FilterRealization,
    nm: &NominalModel,
    ss: &SteadyStateResult,
    dev: &Deviations,
    variant: SNormVariant,
) -> Result<BoundsReport> {
    if fr.gamma_u < fr.gamma_u0 {
        return Err(Error::Hypothesis(format!(
            "gamma_u = {} is below gamma_u0 = {}",
            fr.gamma_u, fr.gamma_u0
        )));
    }
    let parts = rho_parts(fr, nm, dev, variant)?;
    let (v1, v2) = rho_weights(fr)?;
    let rho = rho_from_weights(fr, dev, v1, v2, parts.s_bound);
    let s_bar_norm = ss.s.as_ref().map(|s| s.norm());
    let rho_with_s_bar = rho_from_weights(fr, dev, v1, v2, s_bar_norm.unwrap_or(0.0));
    let tr_sigma_u = ss.sigma_u.trace();
    Ok(BoundsReport {
        gamma_u: fr.gamma_u,
        tr_sigma_u,
        tr_sigma_e: ss.sigma_e.trace(),
        rho,
        upper: tr_sigma_u + rho,
        lower: (tr_sigma_u - rho).max(0.0),
        s: parts.s,
        chi: parts.chi,
        s_bar_norm_bound: parts.s_bound,
        x_bar_norm_bound: parts.x_bound,
        tr_sigma_u_lower: tr_sigma_u_lower_bound(fr, nm)?,
        v1,
        v2,
        s_bar_norm,
        rho_with_s_bar,
    })
}

/// Lower bound on `Tr Σ̄_u` that decays like `1/γ_u`.
pub fn tr_sigma_u_lower_bound(fr: &FilterRealization, nm: &NominalModel) -> Result<f64> {
    if fr.gamma_u < fr.gamma_u0 {
        return Err(Error::Hypothesis(format!(
            "gamma_u = {} is below gamma_u0 = {}",
            fr.gamma_u, fr.gamma_u0
        )));
    }
    let n_s = fr.sensor_count();
    let r_du = nm.r_blockdiag();
    let num = (&fr.k_du * r_du * fr.k_du.transpose()).trace()
        + matkit::kron(&matkit::ones(n_s), &nm.q).trace();
    let den = 2.0 * (-fr.a_cal0.trace())
        + 2.0 * (fr.gamma_u - fr.gamma_u0) * fr.laplacian.trace() * fr.p_u.trace();
    if !(den > 0.0) {
        return Err(Error::Hypothesis(format!("lower-bound denominator {den:e} is not positive")));
    }
    Ok(num / den)
}

/// Quadratic fit `a + b/γ + c/γ²`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuadraticFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// `1 − R²`.
    pub residual: f64,
}

impl QuadraticFit {
    pub fn eval(&self, gamma: f64) -> f64 {
        self.a + self.b / gamma + self.c / (gamma * gamma)
    }

    pub fn positive_leading(&self) -> bool {
        self.a > 0.0 && self.b > 0.0
    }
}

/// Fits of `‖vec(I)ᵀ 𝒜̄_u⁻¹‖₂²` (`first`) and the gain-weighted norm (`second`).
#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticFit {
    pub first: QuadraticFit,
    pub second: QuadraticFit,
    pub gammas: Vec<f64>,
    pub v1_sq: Vec<f64>,
    pub v2_sq: Vec<f64>,
    pub fit_residual: f64,
}

impl AsymptoticFit {
    /// `ρ` with both weights replaced by the fitted curves.
    pub fn rho(&self, fr: &FilterRealization, dev: &Deviations, gamma: f64, s_bar: f64) -> f64 {
        let v1 = self.first.eval(gamma).max(0.0).sqrt();
        let v2 = self.second.eval(gamma).max(0.0).sqrt();
        rho_from_weights(fr, dev, v1, v2, s_bar)
    }
}

/// Least squares in `u = γ_ref/γ` on `[1, u, u²]`, mapped back to powers of `1/γ`.
pub fn fit_quadratic(gammas: &[f64], values: &[f64]) -> Result<QuadraticFit> {
    let g_ref = gammas.iter().copied().fold(f64::INFINITY, f64::min);
    let m = gammas.len();
    let design = Matrix::from_fn(m, 3, |i, j| (g_ref / gammas[i]).powi(j as i32));
    let y = Vector::from_column_slice(values);
    let coef = design
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let fitted = &design * &coef;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res = (&y - fitted).norm_squared();
    let residual = if ss_tot > 0.0 { ss_res / ss_tot } else { 0.0 };
    Ok(QuadraticFit {
        a: coef[0],
        b: coef[1] * g_ref,
        c: coef[2] * g_ref * g_ref,
        residual,
    })
}

pub fn asymptotic_fit(fr: &FilterRealization, gamma_grid: &[f64]) -> Result<AsymptoticFit> {
    if gamma_grid.len() < 6 {
        return Err(Error::InvalidConfig("asymptotic fit needs at least 6 grid points".into()));
    }
    let lo = gamma_grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = gamma_grid.iter().copied().fold(0.0, f64::max);
    if hi < 10.0 * lo {
        return Err(Error::InvalidConfig("asymptotic fit grid must span at least one decade".into()));
    }
    if let Some(bar) = fr.gamma_u0_bar {
        if lo <= bar {
            return Err(Error::Hypothesis(format!("grid starts at {lo}, at or below the threshold {bar}")));
        }
    }
    let mut v1_sq = Vec::with_capacity(gamma_grid.len());
    let mut v2_sq = Vec::with_capacity(gamma_grid.len());
    for &g in gamma_grid {
        let f = fr.with_gamma(g)?;
        let abscissa = matkit::spectral_abscissa(&f.a_cal)?;
        if abscissa >= 0.0 {
            return Err(Error::NotHurwitz { what: format!("closed-loop matrix at gamma = {g}"), abscissa });
        }
        let (v1, v2) = rho_weights(&f)?;
        v1_sq.push(v1 * v1);
        v2_sq.push(v2 * v2);
    }
    let first = fit_quadratic(gamma_grid, &v1_sq)?;
    let second = fit_quadratic(gamma_grid, &v2_sq)?;
    Ok(AsymptoticFit {
        fit_residual: first.residual.max(second.residual),
        first,
        second,
        gammas: gamma_grid.to_vec(),
        v1_sq,
        v2_sq,
    })
}

/// A pair `(r, e)` with `A_uᵀ e = r j e` and `Q_u e = 0`.
///
/// For `r ≠ 0`, `e = e_re + j e_im`; `e_im` is zero for real certificates.
#[derive(Debug, Clone, Serialize)]
pub struct Certificate {
    pub r: f64,
    pub e_re: Vector,
    pub e_im: Vector,
    /// `‖𝒜_uᵀ (1_N ⊗ e) − r j (1_N ⊗ e)‖₂`.
    pub aug_eig_residual: f64,
    /// `‖A_uᵀ e − r j e‖₂`.
    pub eig_residual: f64,
    pub qu_residual: f64,
    /// `Q e ≠ 0`.
    pub will_diverge: bool,
    /// `N² e* Q e`, the growth rate of the projected error variance.
    pub growth_rate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DivergenceReport {
    pub certificates: Vec<Certificate>,
}

impl DivergenceReport {
    pub fn diverges(&self) -> bool {
        self.certificates.iter().any(|c| c.will_diverge)
    }
}

/// Normalize to unit norm with the largest-magnitude entry positive.
fn canonical_sign(mut v: Vector) -> Vector {
    v /= v.norm();
    let idx = v.iamax();
    if v[idx] < 0.0 {
        v = -v;
    }
    v
}

fn distinct_imag_parts(vals: &[nalgebra::Complex<f64>], tol_re: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for l in vals.iter().filter(|l| l.re.abs() <= tol_re) {
        let r = l.im.abs();
        let tol = 1e-6 * r.max(1.0);
        if !out.iter().any(|&o| (o - r).abs() <= tol) {
            out.push(r);
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

/// Search for eigenvectors of `A_uᵀ` on the imaginary axis that the nominal
/// process noise cannot excite.
pub fn divergence_test(fr: &FilterRealization, nm: &NominalModel, ts: &TrueSystem) -> Result<DivergenceReport> {
    let n = nm.state_dim();
    let n_s = fr.sensor_count();
    let at = nm.a.transpose();
    let a_norm = matkit::norm2(&nm.a);
    let q_norm = matkit::norm2(&nm.q);
    let tol_re = CERTIFICATE_TOL * a_norm.max(f64::MIN_POSITIVE);
    let vals = matkit::eigenvalues(&at)?;
    let ones = matkit::ones(n_s).column(0).into_owned();
    let mut certificates = Vec::new();

    for r in distinct_imag_parts(&vals, tol_re) {
        let null_tol = CERTIFICATE_TOL * a_norm.max(q_norm).max(r).max(f64::MIN_POSITIVE);
        let basis: Vec<(Vector, Vector)> = if r == 0.0 {
            let stacked = matkit::vstack(&[at.clone(), nm.q.clone()]);
            let nb = matkit::null_basis(&stacked, null_tol);
            nb.column_iter()
                .map(|c| (canonical_sign(c.into_owned()), Vector::zeros(n)))
                .collect()
        } else {
            // [Aᵀ  rI; −rI  Aᵀ; Q 0; 0 Q] [a; b] = 0
            let mut m = Matrix::zeros(4 * n, 2 * n);
            let eye = Matrix::identity(n, n);
            m.view_mut((0, 0), (n, n)).copy_from(&at);
            m.view_mut((0, n), (n, n)).copy_from(&(&eye * r));
            m.view_mut((n, 0), (n, n)).copy_from(&(&eye * -r));
            m.view_mut((n, n), (n, n)).copy_from(&at);
            m.view_mut((2 * n, 0), (n, n)).copy_from(&nm.q);
            m.view_mut((3 * n, n), (n, n)).copy_from(&nm.q);
            let nb = matkit::null_basis(&m, null_tol);
            // (a, b) and (−b, a) span the same complex line; keep one per pair.
            let mut kept: Vec<(Vector, Vector)> = Vec::new();
            for c in nb.column_iter() {
                let v: Vector = c.into_owned();
                let (a, b) = (v.rows(0, n).into_owned(), v.rows(n, n).into_owned());
                let scale = (a.norm_squared() + b.norm_squared()).sqrt();
                let (a, b) = (a / scale, b / scale);
                let dup = kept.iter().any(|(ka, kb)| {
                    let re = ka.dot(&a) + kb.dot(&b);
                    let im = ka.dot(&b) - kb.dot(&a);
                    (re * re + im * im).sqrt() > 1.0 - 1e-6
                });
                if !dup {
                    kept.push((a, b));
                }
            }
            kept
        };

        for (e_re, e_im) in basis {
            // Aᵀ e − r j e, split into real and imaginary parts.
            let res_re = &at * &e_re + &e_im * r;
            let res_im = &at * &e_im - &e_re * r;
            let eig_residual = (res_re.norm_squared() + res_im.norm_squared()).sqrt();
            let qu_residual = ((&nm.q * &e_re).norm_squared() + (&nm.q * &e_im).norm_squared()).sqrt();
            let e_norm = (e_re.norm_squared() + e_im.norm_squared()).sqrt();
            if eig_residual > null_tol * e_norm || qu_residual > CERTIFICATE_TOL * q_norm * e_norm {
                continue;
            }
            let big_re = matkit::kron(&Matrix::from_column_slice(n_s, 1, ones.as_slice()), &Matrix::from_column_slice(n, 1, e_re.as_slice()));
            let big_im = matkit::kron(&Matrix::from_column_slice(n_s, 1, ones.as_slice()), &Matrix::from_column_slice(n, 1, e_im.as_slice()));
            let act = fr.a_cal.transpose();
            let aug_re = &act * &big_re + &big_im * r;
            let aug_im = &act * &big_im - &big_re * r;
            let aug_eig_residual = (aug_re.norm_squared() + aug_im.norm_squared()).sqrt();
            let q_form = (e_re.transpose() * &ts.q * &e_re)[(0, 0)] + (e_im.transpose() * &ts.q * &e_im)[(0, 0)];
            let q_excites = ((&ts.q * &e_re).norm_squared() + (&ts.q * &e_im).norm_squared()).sqrt();
            certificates.push(Certificate {
                r,
                will_diverge: q_excites > CERTIFICATE_TOL * matkit::norm2(&ts.q).max(f64::MIN_POSITIVE) * e_norm,
                growth_rate: (n_s * n_s) as f64 * q_form,
                e_re,
                e_im,
                aug_eig_residual,
                eig_residual,
                qu_residual,
            });
        }
    }
    Ok(DivergenceReport { certificates })
}

/// `(1_N ⊗ e)ᵀ Σ (1_N ⊗ e)` for a real certificate direction, or the trace
/// of the projection onto `span{Re e, Im e}` for a complex one.
pub fn projected_variance(sigma: &Matrix, cert: &Certificate, sensors: usize) -> f64 {
    let ones = matkit::ones(sensors).column(0).into_owned();
    let lift = |v: &Vector| {
        matkit::kron(
            &Matrix::from_column_slice(sensors, 1, ones.as_slice()),
            &Matrix::from_column_slice(v.len(), 1, v.as_slice()),
        )
    };
    let a = lift(&cert.e_re);
    let b = lift(&cert.e_im);
    (a.transpose() * sigma * &a)[(0, 0)] + (b.transpose() * sigma * &b)[(0, 0)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Definiteness {
    Zero,
    PositiveSemidefinite,
    NegativeSemidefinite,
    Indefinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Ordering {
    /// `Σ_u(t) ⪰ Σ_e(t)` on the whole grid.
    NominalAbove,
    /// `Σ_u(t) ⪯ Σ_e(t)` on the whole grid.
    NominalBelow,
    /// Preconditions for an ordering statement do not hold.
    Undetermined,
    /// The predicted ordering was violated numerically.
    Violated,
}

#[derive(Debug, Clone, Serialize)]
pub struct RelationReport {
    pub delta_d: Matrix,
    pub delta_d_definite: Definiteness,
    pub delta_d_min_eig: f64,
    pub delta_d_max_eig: f64,
    pub times: Vec<f64>,
    /// `E_ue(t) = Σ_u(t) − Σ_e(t)` by RK4.
    pub e_ode: Vec<Matrix>,
    /// The same from `Φ(t)(E0 − Ē)Φ(t)ᵀ + Ē`.
    pub e_closed: Vec<Matrix>,
    pub e_min_eig: Vec<f64>,
    pub e_norm: Vec<f64>,
    pub norm_bound_curve: Vec<f64>,
    pub ordering_verdict: Ordering,
    /// `μ₂(𝒜_{u0}) + μ₂(𝒜_{u0}ᵀ)`.
    pub mu_bar: f64,
    /// `μ₂(−(γ_u − γ_{u0})(𝓛 ⊗ P_u))`.
    pub mu_l_gamma: f64,
    pub max_closed_form_gap: f64,
}

impl RelationReport {
    pub fn bound_holds(&self) -> bool {
        self.e_norm
            .iter()
            .zip(&self.norm_bound_curve)
            .all(|(e, b)| *e <= b * (1.0 + 1e-9) + 1e-12)
    }
}

/// `ΔD = K_{d,u} ΔR_d K_{d,u}ᵀ + U_N ⊗ ΔQ`.
pub fn delta_d(fr: &FilterRealization, dev: &Deviations) -> Matrix {
    let n_s = fr.sensor_count();
    matkit::symmetrize(
        &(&fr.k_du * dev.dr_blockdiag() * fr.k_du.transpose() + matkit::kron(&matkit::ones(n_s), &dev.dq)),
    )
}

pub fn classify(m: &Matrix) -> Result<(Definiteness, f64, f64)> {
    let ev = matkit::sym_eigenvalues(m)?;
    let (max, min) = (ev[0], ev[ev.len() - 1]);
    let scale = max.abs().max(min.abs());
    let tol = DEFINITENESS_TOL * scale;
    let class = if scale == 0.0 {
        Definiteness::Zero
    } else if min >= -tol {
        Definiteness::PositiveSemidefinite
    } else if max <= tol {
        Definiteness::NegativeSemidefinite
    } else {
        Definiteness::Indefinite
    };
    Ok((class, min, max))
}

/// Bound `‖E0‖₂ e^{μ̄ t} + ‖ΔD‖₂ (e^{μ̄ t} − 1)/μ̄` (or `‖ΔD‖₂ t` for `μ̄ = 0`).
pub fn relation_bound(e0_norm: f64, dd_norm: f64, mu_bar: f64, t: f64) -> f64 {
    let growth = (mu_bar * t).exp();
    let integral = if mu_bar == 0.0 { t } else { (mu_bar * t).exp_m1() / mu_bar };
    e0_norm * growth + dd_norm * integral
}

/// Evolution of `E_ue = Σ_u − Σ_e` when only the noise intensities are wrong.
pub fn relation_analysis(fr: &FilterRealization, dev: &Deviations, e0: &Matrix, grid: &TimeGrid) -> Result<RelationReport> {
    if !dev.structural_zero() {
        return Err(Error::Hypothesis(
            "the Sigma_u/Sigma_e relations require A_u = A and C_i,u = C_i".into(),
        ));
    }
    if fr.gamma_u < fr.gamma_u0 {
        return Err(Error::Hypothesis(format!(
            "gamma_u = {} is below gamma_u0 = {}",
            fr.gamma_u, fr.gamma_u0
        )));
    }
    let acal = &fr.a_cal;
    let abscissa = matkit::spectral_abscissa(acal)?;
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz { what: "closed-loop matrix A_u".into(), abscissa });
    }
    let d = acal.nrows();
    if e0.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!("E0 is {:?}, expected {d}x{d}", e0.shape())));
    }
    let dd = delta_d(fr, dev);
    let (class, dd_min, dd_max) = classify(&dd)?;
    let (e0_class, _, _) = classify(&matkit::symmetrize(e0))?;

    let mu_bar = 2.0 * matkit::log_norm(&fr.a_cal0, LogNormKind::Two)?;
    let l_gamma = fr.coupling() * -(fr.gamma_u - fr.gamma_u0);
    let mu_l_gamma = matkit::log_norm(&l_gamma, LogNormKind::Two)?;
    let dd_norm = matkit::norm2(&dd);
    let e0_norm = matkit::norm2(e0);

    let e_bar = solvers::solve_lyapunov(acal, &dd)?;
    let deriv = |e: &Matrix| {
        let ae = acal * e;
        &ae + ae.transpose() + &dd
    };

    let mut times = Vec::new();
    let mut e_ode = Vec::new();
    let mut e_closed = Vec::new();
    let mut e = matkit::symmetrize(e0);
    let h = grid.dt;
    let push = |t: f64, e: &Matrix, times: &mut Vec<f64>, e_ode: &mut Vec<Matrix>, e_closed: &mut Vec<Matrix>| -> Result<()> {
        let phi = matkit::expm(&(acal * t))?;
        let closed = matkit::symmetrize(&(&phi * (e0 - &e_bar) * phi.transpose() + &e_bar));
        times.push(t);
        e_ode.push(e.clone());
        e_closed.push(closed);
        Ok(())
    };
    push(0.0, &e, &mut times, &mut e_ode, &mut e_closed)?;
    for step in 1..=grid.steps {
        let k1 = deriv(&e);
        let k2 = deriv(&(&e + &k1 * (0.5 * h)));
        let k3 = deriv(&(&e + &k2 * (0.5 * h)));
        let k4 = deriv(&(&e + &k3 * h));
        e = matkit::symmetrize(&(&e + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)));
        if !matkit::all_finite(&e) {
            return Err(Error::Overflow { step });
        }
        if step % grid.record_stride == 0 {
            push(step as f64 * h, &e, &mut times, &mut e_ode, &mut e_closed)?;
        }
    }

    let mut e_min_eig = Vec::with_capacity(times.len());
    let mut e_norm = Vec::with_capacity(times.len());
    let mut max_gap: f64 = 0.0;
    for (a, b) in e_ode.iter().zip(&e_closed) {
        let eig = SymmetricEigen::new(a.clone()).eigenvalues;
        e_min_eig.push(eig.min());
        e_norm.push(eig.amax());
        max_gap = max_gap.max((a - b).norm());
    }
    let norm_bound_curve = times.iter().map(|&t| relation_bound(e0_norm, dd_norm, mu_bar, t)).collect();

    let nominal_above = matches!(class, Definiteness::PositiveSemidefinite | Definiteness::Zero)
        && matches!(e0_class, Definiteness::PositiveSemidefinite | Definiteness::Zero);
    let nominal_below = matches!(class, Definiteness::NegativeSemidefinite | Definiteness::Zero)
        && matches!(e0_class, Definiteness::NegativeSemidefinite | Definiteness::Zero);
    let ordering_verdict = if nominal_above {
        if e_min_eig.iter().all(|&v| v >= -ORDERING_TOL) {
            Ordering::NominalAbove
        } else {
            Ordering::Violated
        }
    } else if nominal_below {
        let max_eig: Vec<f64> = e_ode.iter().map(|m| matkit::max_sym_eigenvalue(m).unwrap_or(f64::NAN)).collect();
        if max_eig.iter().all(|&v| v <= ORDERING_TOL) {
            Ordering::NominalBelow
        } else {
            Ordering::Violated
        }
    } else {
        Ordering::Undetermined
    };

    Ok(RelationReport {
        delta_d: dd,
        delta_d_definite: class,
        delta_d_min_eig: dd_min,
        delta_d_max_eig: dd_max,
        times,
        e_ode,
        e_closed,
        e_min_eig,
        e_norm,
        norm_bound_curve,
        ordering_verdict,
        mu_bar,
        mu_l_gamma,
        max_closed_form_gap: max_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_fit_recovers_exact_curve() {
        let g: Vec<f64> = (0..8).map(|k| 10f64.powf(k as f64 / 3.0)).collect();
        let y: Vec<f64> = g.iter().map(|x| 2.0 + 3.0 / x - 0.5 / (x * x)).collect();
        let fit = fit_quadratic(&g, &y).unwrap();
        assert!((fit.a - 2.0).abs() < 1e-10);
        assert!((fit.b - 3.0).abs() < 1e-9);
        assert!((fit.c + 0.5).abs() < 1e-9);
        assert!(fit.residual < 1e-20);
    }

    #[test]
    fn relation_bound_branches() {
        assert_eq!(relation_bound(0.0, 0.0, -1.0, 3.0), 0.0);
        assert!((relation_bound(0.0, 2.0, 0.0, 3.0) - 6.0).abs() < 1e-15);
        let v = relation_bound(1.0, 1.0, -2.0, 1.0);
        let expected = (-2f64).exp() + (1.0 - (-2f64).exp()) / 2.0;
        assert!((v - expected).abs() < 1e-15);
    }

    #[test]
    fn definiteness_classes() {
        let psd = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 0.0]));
        assert_eq!(classify(&psd).unwrap().0, Definiteness::PositiveSemidefinite);
        assert_eq!(classify(&-psd).unwrap().0, Definiteness::NegativeSemidefinite);
        let ind = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, -1.0]));
        assert_eq!(classify(&ind).unwrap().0, Definiteness::Indefinite);
        assert_eq!(classify(&Matrix::zeros(2, 2)).unwrap().0, Definiteness::Zero);
    }
}
