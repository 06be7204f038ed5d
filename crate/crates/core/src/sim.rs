//! Monte Carlo simulation of the true system and the distributed filter.
//!
//! Every draw of trial `l` comes from `ChaCha8Rng::seed_from_u64(seed)` on
//! stream `l`, so trials are reproducible and independent of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::FilterRealization;
use crate::matkit::{self, Matrix, Vector};
use crate::model::{NominalModel, TrueSystem};
use crate::solvers::{AugmentedJointSystem, InitialCovariances};

/// Euler steps with `‖𝒜_u‖₂·dt` above this produce a warning.
pub const EULER_STIFFNESS_WARN: f64 = 0.5;
/// States above this magnitude count as overflow.
const OVERFLOW_LIMIT: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler–Maruyama on the truth and explicit Euler on the filter, with
    /// measurement noise of covariance `R_i/dt` per step.
    #[default]
    EulerMaruyama,
    /// Exact transition of the joint linear SDE of state and estimates over
    /// each step; free of discretization bias for any `dt`.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub trials: usize,
    pub seed: u64,
    pub record_stride: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.dt < self.horizon) {
            return Err(Error::InvalidConfig(format!(
                "simulation needs 0 < dt < horizon (dt={}, horizon={})",
                self.dt, self.horizon
            )));
        }
        if self.trials == 0 || self.record_stride == 0 {
            return Err(Error::InvalidConfig("trials and record_stride must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    pub fn record_times(&self) -> Vec<f64> {
        (0..=self.steps())
            .step_by(self.record_stride)
            .map(|k| k as f64 * self.dt)
            .collect()
    }
}

/// One realization: the state and the stacked estimates at recorded times.
#[derive(Debug, Clone)]
pub struct TrialTrajectory {
    pub times: Vec<f64>,
    pub x: Vec<Vector>,
    /// `[x̂_1; …; x̂_N]`.
    pub estimates: Vec<Vector>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MseSeries {
    pub times: Vec<f64>,
    pub mse: Vec<f64>,
    /// `per_sensor[k][i]`: mean squared error of sensor `i` at `times[k]`.
    pub per_sensor: Vec<Vec<f64>>,
    pub trials_used: usize,
    /// Mean over the final 20% of the horizon.
    pub steady_mse: f64,
    /// Standard error of `steady_mse` across trials (`None` for one trial).
    pub steady_std_error: Option<f64>,
    /// `(trial, step)` for every trial dropped because it overflowed.
    pub overflowed: Vec<(usize, usize)>,
    pub warnings: Vec<String>,
}

enum Kernel {
    Euler {
        a: Matrix,
        q_sqrt: Matrix,
        c_c: Matrix,
        r_sqrt: Matrix,
        a_cal: Matrix,
        k_du: Matrix,
    },
    Exact {
        phi: Matrix,
        noise_sqrt: Matrix,
    },
}

/// Precomputed per-scenario data shared by all trials.
struct Engine {
    n: usize,
    sensors: usize,
    x0: Vector,
    init_sqrt: Matrix,
    kernel: Kernel,
    dt: f64,
    steps: usize,
    stride: usize,
}

/// Transition and noise covariance of `ż = M z + w`, `E[w wᵀ] = W δ`, over `h`.
///
/// Van Loan's block exponential on a step short enough to keep it well
/// scaled, then doubling up to `h`.
pub fn discretize(m: &Matrix, w: &Matrix, h: f64) -> Result<(Matrix, Matrix)> {
    let d = matkit::ensure_square(m)?;
    let norm = m.abs().row_sum().max();
    let mut halvings = 0;
    while norm * h / 2f64.powi(halvings) > 0.5 {
        halvings += 1;
    }
    let h0 = h / 2f64.powi(halvings);
    let mut big = Matrix::zeros(2 * d, 2 * d);
    big.view_mut((0, 0), (d, d)).copy_from(&(-m * h0));
    big.view_mut((0, d), (d, d)).copy_from(&(w * h0));
    big.view_mut((d, d), (d, d)).copy_from(&(m.transpose() * h0));
    let e = matkit::expm(&big)?;
    let mut phi = e.view((d, d), (d, d)).transpose();
    let mut qd = matkit::symmetrize(&(&phi * e.view((0, d), (d, d))));
    for _ in 0..halvings {
        qd = matkit::symmetrize(&(&qd + &phi * &qd * phi.transpose()));
        phi = &phi * &phi;
    }
    Ok((phi, qd))
}

impl Engine {
    fn new(ts: &TrueSystem, fr: &FilterRealization, cfg: &SimConfig, init: &InitialCovariances) -> Result<Self> {
        cfg.validate()?;
        let n = ts.state_dim();
        let n_s = ts.sensor_count();
        if fr.state_dim() != n || fr.sensor_count() != n_s {
            return Err(Error::DimensionMismatch(format!(
                "filter is built for n={}, N={} but the system has n={n}, N={n_s}",
                fr.state_dim(),
                fr.sensor_count()
            )));
        }
        let nn = n * n_s;
        // Joint covariance of [η(0); x(0) − x0].
        let cross = init.s.columns(0, n).into_owned();
        let mut joint = Matrix::zeros(nn + n, nn + n);
        joint.view_mut((0, 0), (nn, nn)).copy_from(&init.sigma_e);
        joint.view_mut((0, nn), (nn, n)).copy_from(&cross);
        joint.view_mut((nn, 0), (n, nn)).copy_from(&cross.transpose());
        joint.view_mut((nn, nn), (n, n)).copy_from(&ts.sigma0);
        let init_sqrt = matkit::sqrtm_psd(&matkit::symmetrize(&joint))?;

        let r_d = matkit::block_diag(&ts.sensors.iter().map(|s| s.r.clone()).collect::<Vec<_>>());
        let c_c = matkit::vstack(&ts.sensors.iter().map(|s| s.c.clone()).collect::<Vec<_>>());
        let kernel = match cfg.scheme {
            Scheme::EulerMaruyama => Kernel::Euler {
                a: ts.a.clone(),
                q_sqrt: matkit::sqrtm_psd(&ts.q)?,
                r_sqrt: matkit::sqrtm_psd(&r_d)?,
                c_c,
                a_cal: fr.a_cal.clone(),
                k_du: fr.k_du.clone(),
            },
            Scheme::Exact => {
                let m = r_d.nrows();
                let d = n + nn;
                let mut big = Matrix::zeros(d, d);
                big.view_mut((0, 0), (n, n)).copy_from(&ts.a);
                big.view_mut((n, 0), (nn, n)).copy_from(&(&fr.k_du * &c_c));
                big.view_mut((n, n), (nn, nn)).copy_from(&fr.a_cal);
                let mut b = Matrix::zeros(d, n + m);
                b.view_mut((0, 0), (n, n)).copy_from(&Matrix::identity(n, n));
                b.view_mut((n, n), (nn, m)).copy_from(&fr.k_du);
                let w = &b * matkit::block_diag(&[ts.q.clone(), r_d]) * b.transpose();
                let w = matkit::symmetrize(&w);
                let (phi, qd) = discretize(&big, &w, cfg.dt)?;
                Kernel::Exact { phi, noise_sqrt: matkit::sqrtm_psd(&qd)? }
            }
        };
        Ok(Self {
            n,
            sensors: n_s,
            x0: ts.x0.clone(),
            init_sqrt,
            kernel,
            dt: cfg.dt,
            steps: cfg.steps(),
            stride: cfg.record_stride,
        })
    }

    fn gaussian(rng: &mut ChaCha8Rng, out: &mut Vector) {
        for v in out.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
    }

    /// Run one trial, calling `record(k, x, x̂_c)` at every recorded step.
    fn run<F: FnMut(usize, &Vector, &Vector)>(&self, seed: u64, trial: usize, mut record: F) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let (n, nn) = (self.n, self.n * self.sensors);

        let mut g = Vector::zeros(nn + n);
        Self::gaussian(&mut rng, &mut g);
        let u = &self.init_sqrt * &g;
        let eta = u.rows(0, nn).into_owned();
        let mut x = &self.x0 + u.rows(nn, n);
        let mut xhat = Vector::from_fn(nn, |k, _| x[k % n]) - eta;
        record(0, &x, &xhat);

        match &self.kernel {
            Kernel::Euler { a, q_sqrt, c_c, r_sqrt, a_cal, k_du } => {
                let sdt = self.dt.sqrt();
                let mut zx = Vector::zeros(n);
                let mut zy = Vector::zeros(r_sqrt.nrows());
                let mut y = Vector::zeros(r_sqrt.nrows());
                let mut dx = Vector::zeros(n);
                let mut dxh = Vector::zeros(nn);
                for k in 1..=self.steps {
                    Self::gaussian(&mut rng, &mut zx);
                    Self::gaussian(&mut rng, &mut zy);
                    // y = C x + R^{1/2} w / √dt
                    y.gemv(1.0, c_c, &x, 0.0);
                    y.gemv(1.0 / sdt, r_sqrt, &zy, 1.0);
                    dxh.gemv(1.0, a_cal, &xhat, 0.0);
                    dxh.gemv(1.0, k_du, &y, 1.0);
                    dx.gemv(self.dt, a, &x, 0.0);
                    dx.gemv(sdt, q_sqrt, &zx, 1.0);
                    x += &dx;
                    xhat.axpy(self.dt, &dxh, 1.0);
                    if k % self.stride == 0 {
                        if !finite(&x) || !finite(&xhat) {
                            return Err(Error::Overflow { step: k });
                        }
                        record(k, &x, &xhat);
                    }
                }
            }
            Kernel::Exact { phi, noise_sqrt } => {
                let d = n + nn;
                let mut z = Vector::zeros(d);
                z.rows_mut(0, n).copy_from(&x);
                z.rows_mut(n, nn).copy_from(&xhat);
                let mut next = Vector::zeros(d);
                let mut noise = Vector::zeros(d);
                for k in 1..=self.steps {
                    Self::gaussian(&mut rng, &mut noise);
                    next.gemv(1.0, phi, &z, 0.0);
                    next.gemv(1.0, noise_sqrt, &noise, 1.0);
                    std::mem::swap(&mut z, &mut next);
                    if k % self.stride == 0 {
                        if !finite(&z) {
                            return Err(Error::Overflow { step: k });
                        }
                        x.copy_from(&z.rows(0, n));
                        xhat.copy_from(&z.rows(n, nn));
                        record(k, &x, &xhat);
                    }
                }
            }
        }
        Ok(())
    }
}

fn finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite() && x.abs() < OVERFLOW_LIMIT)
}

/// Simulate trial `trial_index` and keep the whole recorded trajectory.
pub fn simulate_trial(
    ts: &TrueSystem,
    fr: &FilterRealization,
    cfg: &SimConfig,
    init: &InitialCovariances,
    trial_index: usize,
) -> Result<TrialTrajectory> {
    let engine = Engine::new(ts, fr, cfg, init)?;
    let mut out = TrialTrajectory { times: Vec::new(), x: Vec::new(), estimates: Vec::new() };
    engine.run(cfg.seed, trial_index, |k, x, xh| {
        out.times.push(k as f64 * cfg.dt);
        out.x.push(x.clone());
        out.estimates.push(xh.clone());
    })?;
    Ok(out)
}

/// Ensemble mean squared error `(1/MN) Σ_i Σ_l ‖x̂_i − x‖²` at recorded times.
pub fn monte_carlo_mse(
    ts: &TrueSystem,
    fr: &FilterRealization,
    cfg: &SimConfig,
    init: &InitialCovariances,
) -> Result<MseSeries> {
    let engine = Engine::new(ts, fr, cfg, init)?;
    let (n, n_s) = (engine.n, engine.sensors);
    let times = cfg.record_times();
    let horizon = cfg.steps() as f64 * cfg.dt;
    let window_start = 0.8 * horizon - 1e-9 * horizon;

    let mut warnings = Vec::new();
    if cfg.scheme == Scheme::EulerMaruyama {
        let stiff = matkit::norm2(&fr.a_cal) * cfg.dt;
        if stiff > EULER_STIFFNESS_WARN {
            warnings.push(format!(
                "explicit Euler with ||A_u||_2 * dt = {stiff:.3} > {EULER_STIFFNESS_WARN}; the filter discretization may be inaccurate or unstable"
            ));
        }
    }

    let mut sums = vec![vec![0.0; n_s]; times.len()];
    let mut steady = Vec::with_capacity(cfg.trials);
    let mut overflowed = Vec::new();
    let mut trial_sums = vec![vec![0.0; n_s]; times.len()];
    for trial in 0..cfg.trials {
        let mut acc = 0.0;
        let mut count = 0usize;
        let outcome = engine.run(cfg.seed, trial, |k, x, xh| {
            let row = &mut trial_sums[k / cfg.record_stride];
            let mut total = 0.0;
            for (i, slot) in row.iter_mut().enumerate() {
                let e: f64 = (0..n).map(|j| (xh[i * n + j] - x[j]).powi(2)).sum();
                *slot = e;
                total += e;
            }
            if k as f64 * cfg.dt >= window_start {
                acc += total / n_s as f64;
                count += 1;
            }
        });
        match outcome {
            Ok(()) => {
                for (s, t) in sums.iter_mut().zip(&trial_sums) {
                    for (a, b) in s.iter_mut().zip(t) {
                        *a += b;
                    }
                }
                steady.push(acc / count.max(1) as f64);
            }
            Err(Error::Overflow { step }) => overflowed.push((trial, step)),
            Err(e) => return Err(e),
        }
    }
    let used = steady.len();
    if used == 0 {
        return Err(Error::Overflow { step: overflowed.first().map_or(0, |o| o.1) });
    }
    let per_sensor: Vec<Vec<f64>> = sums
        .iter()
        .map(|row| row.iter().map(|v| v / used as f64).collect())
        .collect();
    let mse = per_sensor.iter().map(|row| row.iter().sum::<f64>() / n_s as f64).collect();
    let steady_mse = steady.iter().sum::<f64>() / used as f64;
    let steady_std_error = (used > 1).then(|| {
        let var = steady.iter().map(|v| (v - steady_mse).powi(2)).sum::<f64>() / (used - 1) as f64;
        (var / used as f64).sqrt()
    });
    Ok(MseSeries {
        times,
        mse,
        per_sensor,
        trials_used: used,
        steady_mse,
        steady_std_error,
        overflowed,
        warnings,
    })
}

/// `Tr Σ_e(t)/N` at the recorded times of `cfg`, from the exact transition of
/// the joint covariance `Σ_ξ` over one simulation step.
pub fn analytic_mse_curve(
    ts: &TrueSystem,
    nm: &NominalModel,
    fr: &FilterRealization,
    cfg: &SimConfig,
    init: &InitialCovariances,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let sys = AugmentedJointSystem::new(fr, ts, nm, init)?;
    let d = fr.a_cal.nrows();
    let w = matkit::symmetrize(&(&sys.b * &sys.phi * sys.b.transpose()));
    let (phi, qd) = discretize(&sys.f, &w, cfg.dt)?;
    let mut sigma = sys.sigma_xi0.clone();
    let n_s = fr.sensor_count();
    let mut out = vec![sigma.view((0, 0), (d, d)).trace() / n_s as f64];
    for k in 1..=cfg.steps() {
        sigma = matkit::symmetrize(&(&phi * &sigma * phi.transpose() + &qd));
        if k % cfg.record_stride == 0 {
            out.push(sigma.view((0, 0), (d, d)).trace() / n_s as f64);
        }
    }
    Ok(out)
}

/// `Tr Σ_e(t)/N`, the analytic counterpart of the MSE.
pub fn analytic_mse(sigma_e: &Matrix, sensors: usize) -> f64 {
    sigma_e.trace() / sensors as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discretize_scalar_ou() {
        let m = Matrix::from_element(1, 1, -2.0);
        let w = Matrix::from_element(1, 1, 3.0);
        let (phi, qd) = discretize(&m, &w, 0.7).unwrap();
        assert!((phi[(0, 0)] - (-1.4f64).exp()).abs() < 1e-14);
        // ∫ e^{-4s}·3 ds = 3(1 − e^{-4h})/4
        let expected = 3.0 * (1.0 - (-2.8f64).exp()) / 4.0;
        assert!((qd[(0, 0)] - expected).abs() < 1e-13);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig { dt: 0.1, horizon: 1.0, trials: 1, seed: 0, record_stride: 1, scheme: Scheme::Exact };
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.record_times().len(), 11);
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        cfg.trials = 1;
        cfg.dt = 2.0;
        assert!(cfg.validate().is_err());
    }
}
