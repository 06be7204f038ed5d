mod common;

use common::{mat, noise_mismatch, problem, spd, Problem};
use dkf_core::analysis::{self, Definiteness, Ordering, SNormVariant};
use dkf_core::filter::{self, FilterRealization};
use dkf_core::graph::Topology;
use dkf_core::matkit::{self, Matrix, Vector};
use dkf_core::model::{self, NominalModel, Sensor, TrueSystem};
use dkf_core::scenario::{log_grid, Scenario};
use dkf_core::solvers::{self, TimeGrid};
use dkf_core::Error;
use proptest::prelude::*;

fn admissible(p: &Problem, nm: &NominalModel, factor: f64) -> Option<FilterRealization> {
    let base = filter::build_filter(nm, &p.ts, &p.topology, 1.0).ok()?;
    let bar = base.gamma_u0_bar?;
    base.with_gamma(factor * bar).ok()
}

/// `vec(I)ᵀ 𝒜̄⁻¹` and `vec(I)ᵀ 𝒜̄⁻¹ (K ⊗ K)` with `𝒜̄ = I ⊗ 𝒜 + 𝒜 ⊗ I`.
fn explicit_weights(fr: &FilterRealization) -> (f64, f64) {
    let d = fr.a_cal.nrows();
    let eye = Matrix::identity(d, d);
    let bar = matkit::kron(&eye, &fr.a_cal) + matkit::kron(&fr.a_cal, &eye);
    let inv = bar.try_inverse().unwrap();
    let row = matkit::vec(&eye).transpose() * inv;
    let kk = matkit::kron(&fr.k_du, &fr.k_du);
    (row.norm(), (&row * kk).norm())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rho_weights_match_explicit_inverse(p in problem(2, 3, false), factor in 1.05f64..20.0) {
        prop_assume!(p.ts.state_dim() * p.ts.sensor_count() <= 6);
        let nm = NominalModel::exact(&p.ts);
        let Some(fr) = admissible(&p, &nm, factor) else { return Ok(()) };
        let (v1, v2) = analysis::rho_weights(&fr).unwrap();
        let (e1, e2) = explicit_weights(&fr);
        prop_assert!((v1 - e1).abs() <= 1e-10 * e1);
        prop_assert!((v2 - e2).abs() <= 1e-10 * e2);
    }

    /// With the solved `‖S̄‖_F`, `ρ` bounds `|Tr Σ̄_e − Tr Σ̄_u|` for any mismatch.
    #[test]
    fn sandwich_with_solved_cross_term(p in problem(3, 4, true), da in mat(3, 3), dq in mat(3, 3), dr in prop::collection::vec(-1.0f64..1.0, 4), factor in 1.05f64..10.0) {
        let n = p.ts.state_dim();
        let mut nm = noise_mismatch(&p.ts, &dq.view((0, 0), (n, n)).into_owned(), &dr, 1.0);
        nm.a = &nm.a + da.view((0, 0), (n, n)) * 0.1;
        let Some(fr) = admissible(&p, &nm, factor) else { return Ok(()) };
        let dev = model::deviations(&p.ts, &nm).unwrap();
        let ss = solvers::steady_state(&fr, &p.ts, &nm).unwrap();
        let r = analysis::trace_bounds(&fr, &nm, &ss, &dev, SNormVariant::Proof).unwrap();
        let gap = (r.tr_sigma_e - r.tr_sigma_u).abs();
        prop_assert!(gap <= r.rho_with_s_bar * (1.0 + 1e-9) + 1e-12, "gap {} rho {}", gap, r.rho_with_s_bar);
        prop_assert!(r.lower == (r.tr_sigma_u - r.rho).max(0.0));
        prop_assert!(r.upper == r.tr_sigma_u + r.rho);
    }

    /// When only the noise intensities are wrong the cross term vanishes and
    /// the reported sandwich holds as stated.
    #[test]
    fn sandwich_for_noise_mismatch(p in problem(3, 5, false), dq in mat(3, 3), dr in prop::collection::vec(-1.0f64..1.0, 5), sign in prop::sample::select(vec![-1.0, 1.0]), factor in 1.05f64..10.0) {
        let n = p.ts.state_dim();
        let nm = noise_mismatch(&p.ts, &dq.view((0, 0), (n, n)).into_owned(), &dr, sign);
        prop_assume!(matkit::min_sym_eigenvalue(&nm.q).unwrap() > 0.0);
        let Some(fr) = admissible(&p, &nm, factor) else { return Ok(()) };
        let dev = model::deviations(&p.ts, &nm).unwrap();
        let ss = solvers::steady_state(&fr, &p.ts, &nm).unwrap();
        let r = analysis::trace_bounds(&fr, &nm, &ss, &dev, SNormVariant::Proof).unwrap();
        prop_assert!(r.sandwich_holds());
        prop_assert_eq!(r.s_bar_norm, None);
    }

    #[test]
    fn lower_bound_below_trace_and_decreasing(p in problem(3, 5, false), factor in 1.05f64..10.0) {
        let nm = NominalModel::exact(&p.ts);
        let Some(fr) = admissible(&p, &nm, factor) else { return Ok(()) };
        let ss = solvers::steady_state(&fr, &p.ts, &nm).unwrap();
        let lb = analysis::tr_sigma_u_lower_bound(&fr, &nm).unwrap();
        prop_assert!(lb > 0.0 && lb <= ss.sigma_u.trace());
        let lb2 = analysis::tr_sigma_u_lower_bound(&fr.with_gamma(2.0 * fr.gamma_u).unwrap(), &nm).unwrap();
        prop_assert!(lb2 < lb);
    }

    #[test]
    fn positive_definite_nominal_noise_gives_no_certificate(p in problem(3, 5, false)) {
        let nm = NominalModel::exact(&p.ts);
        let Ok(fr) = filter::build_filter(&nm, &p.ts, &p.topology, 5.0) else { return Ok(()) };
        prop_assert!(analysis::divergence_test(&fr, &nm, &p.ts).unwrap().certificates.is_empty());
    }

    #[test]
    fn noise_free_marginal_mode_is_certified(n_s in 2usize..5, b in mat(3, 3), c in mat(4, 3), q in mat(3, 3)) {
        let (ts, nm, topology) = unexcited_mode_system(n_s, &b, &c, &q);
        let fr = filter::build_filter(&nm, &ts, &topology, 3.0).unwrap();
        let rep = analysis::divergence_test(&fr, &nm, &ts).unwrap();
        prop_assert_eq!(rep.certificates.len(), 1);
        let cert = &rep.certificates[0];
        prop_assert!(cert.r == 0.0);
        prop_assert!((cert.e_re.clone() - Vector::from_vec(vec![1.0, 0.0, 0.0])).norm() < 1e-10);
        prop_assert!(cert.aug_eig_residual <= 1e-10 && cert.qu_residual <= 1e-12);
        prop_assert!(cert.will_diverge);
        prop_assert!((cert.growth_rate - (n_s * n_s) as f64 * ts.q[(0, 0)]).abs() < 1e-12);
        // Both driving terms of the nominal projection vanish for any Σ_u.
        let d = fr.a_cal.nrows();
        let lift = Matrix::from_fn(d, 1, |i, _| if i % 3 == 0 { 1.0 } else { 0.0 });
        let st = model::stack(&ts, &nm).unwrap();
        let w = &fr.k_du * &st.r_du * fr.k_du.transpose() + matkit::kron(&matkit::ones(n_s), &nm.q);
        let sigma = spd(&Matrix::from_fn(d, d, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0), 0.1);
        let deriv = &fr.a_cal * &sigma + &sigma * fr.a_cal.transpose() + w;
        prop_assert!((lift.transpose() * deriv * &lift)[(0, 0)].abs() < 1e-10 * (1.0 + sigma.norm()));
    }

    #[test]
    fn relations_follow_sign_of_delta_d(p in problem(2, 4, false), dq in mat(2, 2), dr in prop::collection::vec(0.0f64..1.0, 4), sign in prop::sample::select(vec![-1.0, 1.0])) {
        let n = p.ts.state_dim();
        let nm = noise_mismatch(&p.ts, &dq.view((0, 0), (n, n)).into_owned(), &dr, sign);
        prop_assume!(matkit::min_sym_eigenvalue(&nm.q).unwrap() > 0.0);
        let Some(fr) = admissible(&p, &nm, 1.2) else { return Ok(()) };
        let dev = model::deviations(&p.ts, &nm).unwrap();
        let d = fr.a_cal.nrows();
        let dt = 0.01 / matkit::norm2(&fr.a_cal).max(1.0);
        let grid = TimeGrid::new(dt, 2000.0 * dt, 50).unwrap();
        let rep = analysis::relation_analysis(&fr, &dev, &Matrix::zeros(d, d), &grid).unwrap();
        prop_assert!(rep.bound_holds());
        prop_assert!(rep.max_closed_form_gap <= 1e-8 * (1.0 + rep.e_norm.iter().copied().fold(0.0, f64::max)));
        prop_assert!(rep.mu_l_gamma.abs() <= 1e-10 * (1.0 + fr.coupling().norm() * (fr.gamma_u - fr.gamma_u0)));
        match rep.delta_d_definite {
            Definiteness::PositiveSemidefinite => prop_assert_eq!(rep.ordering_verdict, Ordering::NominalAbove),
            Definiteness::NegativeSemidefinite => prop_assert_eq!(rep.ordering_verdict, Ordering::NominalBelow),
            Definiteness::Zero => prop_assert!(rep.e_norm.iter().all(|&v| v == 0.0)),
            Definiteness::Indefinite => prop_assert_eq!(rep.ordering_verdict, Ordering::Undetermined),
        }
        if sign > 0.0 {
            prop_assert!(matches!(rep.delta_d_definite, Definiteness::PositiveSemidefinite | Definiteness::Zero));
        }
    }
}

/// First state has no dynamics of its own and no nominal process noise.
fn unexcited_mode_system(n_s: usize, b: &Matrix, c: &Matrix, q: &Matrix) -> (TrueSystem, NominalModel, Topology) {
    let mut a = common::stabilize(b, 0.3);
    a.row_mut(0).fill(0.0);
    let sensors = (0..n_s)
        .map(|i| {
            let mut row = c.rows(i % 4, 1).into_owned();
            row[(0, 0)] += 1.0;
            Sensor::new(row, Matrix::from_element(1, 1, 0.2))
        })
        .collect();
    let q_true = spd(q, 0.05);
    let ts = TrueSystem::new(a, q_true.clone(), sensors, Vector::zeros(3), Matrix::identity(3, 3) * 0.1).unwrap();
    let mut nm = NominalModel::exact(&ts);
    let mut q_u = q_true;
    q_u.row_mut(0).fill(0.0);
    q_u.column_mut(0).fill(0.0);
    nm.q = q_u;
    (ts, nm, Topology::ring(n_s))
}

#[test]
fn zero_deviation_collapses_bounds() {
    let scn = Scenario::preset("baseline").unwrap();
    let fr = filter::build_relative(&scn.nominal, &scn.system, &scn.topology, 2.0).unwrap();
    let dev = model::deviations(&scn.system, &scn.nominal).unwrap();
    let ss = solvers::steady_state(&fr, &scn.system, &scn.nominal).unwrap();
    let r = analysis::trace_bounds(&fr, &scn.nominal, &ss, &dev, SNormVariant::Proof).unwrap();
    assert_eq!(r.rho, 0.0);
    assert_eq!(r.lower, r.tr_sigma_u);
    assert_eq!(r.upper, r.tr_sigma_u);
    assert!((r.tr_sigma_u - r.tr_sigma_e).abs() <= 1e-12 * r.tr_sigma_u);
}

#[test]
fn scalar_two_node_rho_matches_explicit() {
    let a = Matrix::from_element(1, 1, -0.5);
    let sensors = vec![
        Sensor::new(Matrix::from_element(1, 1, 1.0), Matrix::from_element(1, 1, 0.4)),
        Sensor::new(Matrix::from_element(1, 1, 2.0), Matrix::from_element(1, 1, 0.3)),
    ];
    let ts = TrueSystem::new(a, Matrix::from_element(1, 1, 0.2), sensors, Vector::zeros(1), Matrix::identity(1, 1)).unwrap();
    let mut nm = NominalModel::exact(&ts);
    nm.q[(0, 0)] = 0.35;
    nm.sensors[1].r[(0, 0)] = 0.25;
    let topo = Topology::ring(2);
    let fr = filter::build_relative(&nm, &ts, &topo, 1.5).unwrap();
    let dev = model::deviations(&ts, &nm).unwrap();
    let ss = solvers::steady_state(&fr, &ts, &nm).unwrap();
    let r = analysis::trace_bounds(&fr, &nm, &ss, &dev, SNormVariant::Proof).unwrap();
    let (e1, e2) = explicit_weights(&fr);
    let expected = e2 * dev.dr_d_norm() + e1 * 2.0 * dev.dq_norm;
    assert!((r.rho - expected).abs() <= 1e-12 * expected, "{} vs {expected}", r.rho);
    assert!(r.sandwich_holds());
}

#[test]
fn statement_variant_changes_only_s() {
    let scn = Scenario::preset("case1").unwrap();
    let fr = filter::build_relative(&scn.nominal, &scn.system, &scn.topology, 2.0).unwrap();
    let dev = model::deviations(&scn.system, &scn.nominal).unwrap();
    let ss = solvers::steady_state(&fr, &scn.system, &scn.nominal).unwrap();
    let p = analysis::trace_bounds(&fr, &scn.nominal, &ss, &dev, SNormVariant::Proof).unwrap();
    let s = analysis::trace_bounds(&fr, &scn.nominal, &ss, &dev, SNormVariant::Statement).unwrap();
    assert_eq!(p.chi, s.chi);
    let nn = 24f64;
    assert!(((s.s - p.s) - (nn.sqrt() - 6f64.sqrt()) * dev.da_d_norm()).abs() < 1e-9 * p.s.abs());
}

#[test]
fn asymptotic_fit_extrapolates() {
    let scn = Scenario::preset("case1").unwrap();
    let fr = filter::build_relative(&scn.nominal, &scn.system, &scn.topology, 2.0).unwrap();
    let bar = fr.gamma_u0_bar.unwrap();
    let fit = analysis::asymptotic_fit(&fr, &log_grid(2.0 * bar, 200.0 * bar, 12)).unwrap();
    assert!(fit.first.positive_leading());
    assert!(fit.first.residual <= 1e-3);
    let (v1, _) = analysis::rho_weights(&fr.with_gamma(1e4 * bar).unwrap()).unwrap();
    assert!((fit.first.a - v1 * v1).abs() <= 0.01 * v1 * v1, "{} vs {}", fit.first.a, v1 * v1);
    assert!(analysis::asymptotic_fit(&fr, &log_grid(2.0 * bar, 5.0 * bar, 12)).is_err());
    assert!(analysis::asymptotic_fit(&fr, &log_grid(2.0 * bar, 200.0 * bar, 5)).is_err());
}

#[test]
fn relations_reject_structural_mismatch() {
    let scn = Scenario::preset("case1").unwrap();
    let fr = filter::build_relative(&scn.nominal, &scn.system, &scn.topology, 1.05).unwrap();
    let dev = model::deviations(&scn.system, &scn.nominal).unwrap();
    let grid = TimeGrid::new(1e-3, 0.01, 1).unwrap();
    let err = analysis::relation_analysis(&fr, &dev, &Matrix::zeros(24, 24), &grid).unwrap_err();
    assert!(matches!(err, Error::Hypothesis(_)));
}

#[test]
fn exact_noise_model_gives_identical_covariances() {
    let scn = Scenario::preset("case3").unwrap();
    let nm = NominalModel::exact(&scn.system);
    let fr = filter::build_relative(&nm, &scn.system, &scn.topology, 1.05).unwrap();
    let dev = model::deviations(&scn.system, &nm).unwrap();
    let grid = TimeGrid::new(1e-3, 1.0, 100).unwrap();
    let rep = analysis::relation_analysis(&fr, &dev, &Matrix::zeros(24, 24), &grid).unwrap();
    assert_eq!(rep.delta_d_definite, Definiteness::Zero);
    assert!(rep.e_norm.iter().chain(&rep.norm_bound_curve).all(|&v| v == 0.0));
}
