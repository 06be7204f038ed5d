mod common;

use common::{kron_sylvester, mat, problem, rel_err, spd, stabilize};
use dkf_core::filter;
use dkf_core::matkit::{self, Matrix};
use dkf_core::model::NominalModel;
use dkf_core::solvers::{self, AugmentedJointSystem, InitialCovariances, LyapunovMethod, TimeGrid};
use proptest::prelude::*;

const METHODS: [LyapunovMethod; 3] = [LyapunovMethod::Auto, LyapunovMethod::Kronecker, LyapunovMethod::Schur];

fn sylvester_instance(max: usize) -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
    (1..=max, 1..=max).prop_flat_map(|(p, q)| (mat(p, p), mat(q, q), mat(p, q)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sylvester_matches_kronecker_oracle((a, b, c) in sylvester_instance(12)) {
        let a = stabilize(&(a * 2.0), 0.5);
        let b = stabilize(&(b * 2.0), 0.5);
        let oracle = kron_sylvester(&a, &b, &c);
        for m in METHODS {
            let x = solvers::solve_sylvester_with(&a, &b, &c, m).unwrap();
            prop_assert!(rel_err(&x, &oracle) <= 1e-10, "{:?}: {}", m, rel_err(&x, &oracle));
        }
    }

    #[test]
    fn lyapunov_matches_kronecker_oracle(m in (1usize..=12).prop_flat_map(|n| (mat(n, n), mat(n, n)))) {
        let (a, w) = m;
        let a = stabilize(&(a * 2.0), 0.3);
        let w = spd(&w, 0.0);
        let oracle = kron_sylvester(&a, &a.transpose(), &-&w);
        for method in METHODS {
            let x = solvers::solve_lyapunov_with(&a, &w, method).unwrap();
            prop_assert!(rel_err(&x, &oracle) <= 1e-10);
            prop_assert!(x == x.transpose());
            // Stable M and PSD W give a PSD solution.
            prop_assert!(matkit::min_sym_eigenvalue(&x).unwrap() >= -1e-12 * x.norm());
        }
    }

    #[test]
    fn care_residual_and_stability(n in 1usize..=6, m in 1usize..=3, seed in mat(6, 6), cs in mat(3, 6), rs in mat(3, 3), qs in mat(6, 6)) {
        let a = seed.view((0, 0), (n, n)).into_owned() * 1.5;
        let c = cs.view((0, 0), (m, n)).into_owned();
        let r = spd(&rs.view((0, 0), (m, m)).into_owned(), 0.1);
        let q = spd(&qs.view((0, 0), (n, n)).into_owned(), 0.05);
        let p = solvers::solve_care(&a, &c, &r, &q).unwrap();
        let resid = solvers::care_residual(&a, &c, &r, &q, &p).unwrap();
        prop_assert!(resid <= 1e-8 * (1.0 + p.norm_squared()), "residual {}", resid);
        prop_assert!(matkit::min_sym_eigenvalue(&p).unwrap() >= -1e-10 * p.norm());
        let r_inv = r.clone().try_inverse().unwrap();
        let closed = &a - &p * c.transpose() * r_inv * &c;
        prop_assert!(matkit::spectral_abscissa(&closed).unwrap() < 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn schur_path_on_large_equations(m in (33usize..=40).prop_flat_map(|n| (mat(n, n), mat(n, n)))) {
        let (a, w) = m;
        let a = stabilize(&(a * 3.0), 0.5);
        let w = spd(&w, 0.0);
        let x = solvers::solve_lyapunov(&a, &w).unwrap();
        let oracle = kron_sylvester(&a, &a.transpose(), &-&w);
        prop_assert!(rel_err(&x, &oracle) <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The direct (Σ_e, S, X) equations and the joint ξ-system describe the
    /// same second moments.
    #[test]
    fn direct_and_joint_propagation_agree(p in problem(2, 4, true), da in mat(2, 2)) {
        let ts = &p.ts;
        let n = ts.state_dim();
        let mut nm = NominalModel::exact(ts);
        nm.a = &nm.a + da.view((0, 0), (n, n)) * 0.1;
        nm.q = &nm.q * 1.3;
        let Ok(base) = filter::build_filter(&nm, ts, &p.topology, 1.0) else { return Ok(()) };
        let gamma = base.gamma_u0_bar.map_or(5.0, |g| 2.0 * g);
        let fr = filter::build_filter(&nm, ts, &p.topology, gamma).unwrap();
        let dt = 0.2 / matkit::norm2(&fr.a_cal).max(1.0);
        let grid = TimeGrid::new(dt, 200.0 * dt, 20).unwrap();
        let init = InitialCovariances::shared_estimate(ts);
        let traj = solvers::propagate(&fr, ts, &nm, &init, &grid).unwrap();
        let joint = AugmentedJointSystem::new(&fr, ts, &nm, &init).unwrap().propagate(&grid).unwrap();
        let d = fr.a_cal.nrows();
        for (k, (_, s)) in joint.iter().enumerate() {
            let scale = 1.0 + s.norm();
            prop_assert!((s.view((0, 0), (d, d)) - &traj.sigma_e[k]).norm() <= 1e-10 * scale);
            prop_assert!((s.view((0, d), (d, d)) - &traj.s[k]).norm() <= 1e-10 * scale);
            prop_assert!((s.view((d, d), (d, d)) - &traj.x[k]).norm() <= 1e-10 * scale);
        }
    }

    /// Long propagation settles on the steady-state solution.
    #[test]
    fn propagation_reaches_steady_state(p in problem(2, 4, true), da in mat(2, 2)) {
        let ts = &p.ts;
        let n = ts.state_dim();
        let mut nm = NominalModel::exact(ts);
        nm.a = &nm.a + da.view((0, 0), (n, n)) * 0.05;
        let Ok(base) = filter::build_filter(&nm, ts, &p.topology, 1.0) else { return Ok(()) };
        let gamma = base.gamma_u0_bar.map_or(5.0, |g| 1.5 * g);
        let fr = filter::build_filter(&nm, ts, &p.topology, gamma).unwrap();
        let ss = solvers::steady_state(&fr, ts, &nm).unwrap();
        let slow = -matkit::spectral_abscissa(&fr.a_cal).unwrap().max(matkit::spectral_abscissa(&ts.a).unwrap());
        let dt = 0.2 / matkit::norm2(&fr.a_cal).max(1.0);
        let horizon = 40.0 / slow;
        let steps = (horizon / dt).ceil();
        prop_assume!(steps < 2.0e5);
        let grid = TimeGrid::new(dt, steps * dt, steps as usize).unwrap();
        let traj = solvers::propagate(&fr, ts, &nm, &InitialCovariances::shared_estimate(ts), &grid).unwrap();
        prop_assert!(rel_err(traj.last_sigma_e(), &ss.sigma_e) < 1e-8);
        prop_assert!(rel_err(traj.sigma_u.last().unwrap(), &ss.sigma_u) < 1e-8);
        prop_assert!(ss.residual_sigma_e <= 1e-9 * (1.0 + ss.sigma_e.norm()));
    }
}
