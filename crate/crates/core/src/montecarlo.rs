//! Self-normalized importance sampling over independent guided paths, and a
//! discrete Kalman–RTS smoother for affine models used as a reference.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::symmetrize;
use crate::mcmc::PathTarget;
use crate::sde::{derive_seed, draw_noise, ModelSpec, ObservationRecord, Path, TimeGrid};

#[derive(Debug, Clone)]
pub struct ImportanceEstimate {
    pub value: DVector<f64>,
    /// Delta-method standard error of each coordinate of `value`.
    pub std_error: DVector<f64>,
    /// `(Σw)² / Σw²`.
    pub ess: f64,
    pub n_paths: usize,
    /// Paths whose weight was not finite; they carry weight zero.
    pub n_invalid: usize,
}

/// Streaming log-sum-exp accumulator of `(log w, f)` pairs. All sums are
/// kept relative to the running maximum log-weight.
#[derive(Debug, Clone)]
pub struct WeightedAccumulator {
    max_log_weight: f64,
    sum_w: f64,
    sum_w2: f64,
    sum_wf: DVector<f64>,
    sum_w2f: DVector<f64>,
    sum_w2f2: DVector<f64>,
    n: usize,
    n_invalid: usize,
}

impl WeightedAccumulator {
    pub fn new(dim: usize) -> Self {
        WeightedAccumulator {
            max_log_weight: f64::NEG_INFINITY,
            sum_w: 0.0,
            sum_w2: 0.0,
            sum_wf: DVector::zeros(dim),
            sum_w2f: DVector::zeros(dim),
            sum_w2f2: DVector::zeros(dim),
            n: 0,
            n_invalid: 0,
        }
    }

    pub fn push(&mut self, log_weight: f64, f: &DVector<f64>) {
        self.n += 1;
        if !log_weight.is_finite() || f.iter().any(|v| !v.is_finite()) {
            self.n_invalid += 1;
            return;
        }
        if log_weight > self.max_log_weight {
            let s = (self.max_log_weight - log_weight).exp();
            let s2 = s * s;
            self.sum_w *= s;
            self.sum_wf *= s;
            self.sum_w2 *= s2;
            self.sum_w2f *= s2;
            self.sum_w2f2 *= s2;
            self.max_log_weight = log_weight;
        }
        let w = (log_weight - self.max_log_weight).exp();
        let w2 = w * w;
        self.sum_w += w;
        self.sum_w2 += w2;
        for i in 0..f.len() {
            self.sum_wf[i] += w * f[i];
            self.sum_w2f[i] += w2 * f[i];
            self.sum_w2f2[i] += w2 * f[i] * f[i];
        }
    }

    pub fn finish(&self) -> Result<ImportanceEstimate> {
        if !(self.sum_w > 0.0) {
            return Err(Error::Estimation(format!(
                "all {} importance weights are non-finite",
                self.n
            )));
        }
        let value = &self.sum_wf / self.sum_w;
        let std_error = DVector::from_fn(value.len(), |i, _| {
            let mu = value[i];
            let v = self.sum_w2f2[i] - 2.0 * mu * self.sum_w2f[i] + mu * mu * self.sum_w2;
            v.max(0.0).sqrt() / self.sum_w
        });
        let n_valid = (self.n - self.n_invalid) as f64;
        let ess = (self.sum_w * self.sum_w / self.sum_w2).clamp(1.0, n_valid);
        Ok(ImportanceEstimate {
            value,
            std_error,
            ess,
            n_paths: self.n,
            n_invalid: self.n_invalid,
        })
    }
}

const CHUNK: usize = 64;

/// Estimates `E[f(X) | Y, ζ]` from `n_paths` guided paths driven by noise
/// seeded with `derive_seed(seed, i)`. The reduction runs in path order, so
/// the result does not depend on the thread count.
pub fn importance_estimate(
    target: &dyn PathTarget,
    f: &(dyn Fn(&Path) -> DVector<f64> + Sync),
    n_paths: usize,
    seed: u64,
) -> Result<ImportanceEstimate> {
    if n_paths == 0 {
        return Err(Error::config("n_paths must be positive"));
    }
    let grid = target.grid();
    let dim_w = target.noise_dim();
    let draw = |i: usize| -> Result<Option<(f64, DVector<f64>)>> {
        let w = draw_noise(grid, dim_w, derive_seed(seed, i as u64));
        match target.evaluate(&w) {
            Ok(wp) => Ok(Some((wp.total_log_weight, f(&wp.x_path)))),
            Err(Error::Guided { .. }) | Err(Error::Simulation { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut acc: Option<WeightedAccumulator> = None;
    let mut failed_before_first = 0;
    let mut start = 0;
    while start < n_paths {
        let end = (start + CHUNK).min(n_paths);
        #[cfg(feature = "parallel")]
        let chunk: Vec<_> = {
            use rayon::prelude::*;
            (start..end).into_par_iter().map(draw).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let chunk: Vec<_> = (start..end).map(draw).collect();
        for item in chunk {
            match (item?, acc.as_mut()) {
                (Some((lw, fx)), Some(a)) => a.push(lw, &fx),
                (Some((lw, fx)), None) => {
                    let mut a = WeightedAccumulator::new(fx.len());
                    a.n = failed_before_first;
                    a.n_invalid = failed_before_first;
                    a.push(lw, &fx);
                    acc = Some(a);
                }
                (None, Some(a)) => {
                    a.n += 1;
                    a.n_invalid += 1;
                }
                (None, None) => failed_before_first += 1,
            }
        }
        start = end;
    }
    let acc = acc.ok_or_else(|| Error::Estimation(format!("all {n_paths} guided paths failed")))?;
    acc.finish()
}

/// The whole path, node after node.
pub fn path_functional(p: &Path) -> DVector<f64> {
    DVector::from_column_slice(p.values.as_slice())
}

/// Inverse of [`path_functional`].
pub fn unflatten_path(grid: TimeGrid, dim: usize, v: &DVector<f64>) -> Result<Path> {
    Path::new(
        grid,
        DMatrix::from_column_slice(dim, grid.n_nodes(), v.as_slice()),
    )
}

pub fn endpoint_functional(p: &Path) -> DVector<f64> {
    p.last()
}

#[derive(Debug, Clone)]
pub struct KalmanSmootherSolution {
    pub grid: TimeGrid,
    pub smoothed_mean: Path,
    pub smoothed_cov: Vec<DMatrix<f64>>,
    pub filtered_mean: Path,
}

fn kalman_update(
    m: &mut DVector<f64>,
    c: &mut DMatrix<f64>,
    y: &DVector<f64>,
    obs: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    node: usize,
) -> Result<()> {
    let s = obs * &*c * obs.transpose() + noise;
    let chol = s.cholesky().ok_or_else(|| Error::Filter {
        node,
        reason: "singular innovation covariance".into(),
    })?;
    let gain = chol.solve(&(obs * &*c)).transpose();
    let innovation = y - obs * &*m;
    *m += &gain * innovation;
    let d = m.len();
    let j = DMatrix::identity(d, d) - &gain * obs;
    *c = &j * &*c * j.transpose() + &gain * noise * gain.transpose();
    symmetrize(c);
    Ok(())
}

fn solve_or_pinv(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = a.clone().cholesky() {
        return chol.solve(rhs);
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let pinv = a
        .clone()
        .pseudo_inverse(1e-12 * scale)
        .expect("tolerance is nonnegative");
    pinv * rhs
}

/// Forward Kalman filter and RTS smoother for the Euler discretization
/// `X_{k+1} = (I + B h) X_k + m h + N(0, σσ' h)`,
/// `ΔY_k = H X_k h + N(0, h I)`, `ζ = B_ζ X_n + N(0, Σ_ζ)`.
pub fn kalman_rts_oracle(
    model: &ModelSpec,
    obs: &ObservationRecord,
) -> Result<KalmanSmootherSolution> {
    let (b, drift_const) = model
        .dynamics
        .affine_parts()
        .ok_or_else(|| Error::config("the Kalman oracle needs an affine drift"))?;
    let sigma = model
        .dynamics
        .constant_dispersion()
        .ok_or_else(|| Error::config("the Kalman oracle needs a constant dispersion"))?;
    let grid = obs.grid();
    let n = grid.n_steps();
    let h = grid.step();
    let d = model.dim_x();
    let dy = model.dim_y();

    let a = DMatrix::identity(d, d) + b * h;
    let q = sigma * sigma.transpose() * h;
    let obs_noise = DMatrix::identity(dy, dy) * h;
    let terminal = match (&model.terminal, &obs.zeta) {
        (Some(t), Some(z)) => Some((t, z)),
        _ => None,
    };

    let mut pred_m = Vec::with_capacity(n + 1);
    let mut pred_c = Vec::with_capacity(n + 1);
    let mut filt_m = Vec::with_capacity(n + 1);
    let mut filt_c = Vec::with_capacity(n + 1);
    let mut m = model.x0.clone();
    let mut c = DMatrix::zeros(d, d);
    for k in 0..=n {
        pred_m.push(m.clone());
        pred_c.push(c.clone());
        if k < n {
            let hk = model.obs_operator.at(grid.time(k)).into_owned() * h;
            kalman_update(&mut m, &mut c, &obs.increment(k), &hk, &obs_noise, k)?;
        } else if let Some((term, zeta)) = terminal {
            kalman_update(&mut m, &mut c, zeta, &term.b, &term.cov, k)?;
        }
        filt_m.push(m.clone());
        filt_c.push(c.clone());
        if k < n {
            m = &a * &m + drift_const * h;
            c = &a * &c * a.transpose() + &q;
            symmetrize(&mut c);
        }
    }

    let mut mean = DMatrix::zeros(d, n + 1);
    let mut cov = vec![DMatrix::zeros(d, d); n + 1];
    let mut sm = filt_m[n].clone();
    let mut sc = filt_c[n].clone();
    mean.set_column(n, &sm);
    cov[n] = sc.clone();
    for k in (0..n).rev() {
        // G = C_k|k A' C_{k+1|k}⁻¹, via the symmetric solve C_{k+1|k} G' = A C_k|k
        let gain = solve_or_pinv(&pred_c[k + 1], &(&a * &filt_c[k])).transpose();
        sm = &filt_m[k] + &gain * (&sm - &pred_m[k + 1]);
        sc = &filt_c[k] + &gain * (&sc - &pred_c[k + 1]) * gain.transpose();
        symmetrize(&mut sc);
        mean.set_column(k, &sm);
        cov[k] = sc.clone();
    }
    let mut filtered = DMatrix::zeros(d, n + 1);
    for (k, fm) in filt_m.iter().enumerate() {
        filtered.set_column(k, fm);
    }
    Ok(KalmanSmootherSolution {
        grid,
        smoothed_mean: Path::new(grid, mean)?,
        smoothed_cov: cov,
        filtered_mean: Path::new(grid, filtered)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::backward_filter::{solve_backward, FilterOptions};
    use crate::guided::GuidedSimulator;
    use crate::models::{build_guide, build_model, linear_dynamics, LinearDynamics};
    use crate::sde::{rng_from_seed, simulate_forward, simulate_observation};
    use rand::Rng;

    #[test]
    fn constant_offset_leaves_estimate_unchanged() {
        let mut rng = rng_from_seed(9);
        let samples: Vec<(f64, DVector<f64>)> = (0..200)
            .map(|_| {
                let lw = rng.random::<f64>() * 40.0 - 20.0;
                (
                    lw,
                    DVector::from_vec(vec![rng.random::<f64>(), rng.random::<f64>() * 3.0]),
                )
            })
            .collect();
        let mut a = WeightedAccumulator::new(2);
        let mut b = WeightedAccumulator::new(2);
        for (lw, f) in &samples {
            a.push(*lw, f);
            b.push(*lw + 713.25, f);
        }
        let (a, b) = (a.finish().unwrap(), b.finish().unwrap());
        assert!((&a.value - &b.value).abs().max() < 1e-12);
        assert!((a.ess - b.ess).abs() < 1e-9 * a.ess);
        assert!(a.ess >= 1.0 && a.ess <= 200.0);
    }

    #[test]
    fn ess_bounds_and_degenerate_cases() {
        let mut one = WeightedAccumulator::new(1);
        one.push(-3.0, &DVector::from_element(1, 2.5));
        let e = one.finish().unwrap();
        assert_eq!(e.ess, 1.0);
        assert_eq!(e.value[0], 2.5);

        let mut equal = WeightedAccumulator::new(1);
        for i in 0..50 {
            equal.push(0.0, &DVector::from_element(1, i as f64));
        }
        let e = equal.finish().unwrap();
        assert_eq!(e.ess, 50.0);
        assert!((e.value[0] - 24.5).abs() < 1e-12);

        let mut dominated = WeightedAccumulator::new(1);
        dominated.push(0.0, &DVector::from_element(1, 1.0));
        dominated.push(-800.0, &DVector::from_element(1, 5.0));
        dominated.push(f64::NAN, &DVector::from_element(1, 5.0));
        let e = dominated.finish().unwrap();
        assert_eq!(e.ess, 1.0);
        assert_eq!(e.n_invalid, 1);
        assert_eq!(e.value[0], 1.0);

        let mut bad = WeightedAccumulator::new(1);
        bad.push(f64::INFINITY, &DVector::from_element(1, 1.0));
        assert!(matches!(bad.finish(), Err(Error::Estimation(_))));
    }

    #[test]
    fn exact_guide_gives_plain_average() {
        let model = build_model("linear", 2).unwrap();
        let guide = build_guide("linear", &model).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, 2, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, 2, 2), 3).unwrap();
        let sol = solve_backward(&guide, &model, &obs, grid, FilterOptions::default()).unwrap();
        let sim = GuidedSimulator::new(&model, &guide, &sol, obs.zeta.as_ref()).unwrap();
        let est = importance_estimate(&sim, &endpoint_functional, 37, 5).unwrap();
        assert_eq!(est.ess, 37.0);
        assert_eq!(est.n_paths, 37);
        let mut plain = DVector::zeros(2);
        for i in 0..37 {
            let w = draw_noise(grid, 2, derive_seed(5, i));
            plain += sim.simulate(&w).unwrap().x_path.last();
        }
        plain /= 37.0;
        assert!((est.value - plain).abs().max() < 1e-12);

        let single = importance_estimate(&sim, &endpoint_functional, 1, 5).unwrap();
        let first = sim
            .simulate(&draw_noise(grid, 2, derive_seed(5, 0)))
            .unwrap();
        assert_eq!(single.ess, 1.0);
        assert!((single.value - first.x_path.last()).abs().max() < 1e-15);
    }

    #[test]
    fn path_flattening_round_trips() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let p = draw_noise(grid, 3, 1).to_path();
        let back = unflatten_path(grid, 3, &path_functional(&p)).unwrap();
        assert_eq!(back, p);
    }

    fn affine_model(dynamics: LinearDynamics, h_op: DMatrix<f64>, with_zeta: bool) -> ModelSpec {
        let d = dynamics.b.nrows();
        let terminal = with_zeta.then(|| {
            crate::sde::TerminalObservation::new(
                DMatrix::identity(d, d),
                DMatrix::identity(d, d) * 0.1,
            )
            .unwrap()
        });
        ModelSpec::new(
            "affine",
            Arc::new(dynamics),
            h_op.into(),
            terminal,
            DVector::from_element(d, 0.3),
        )
        .unwrap()
    }

    #[test]
    fn uninformative_data_gives_prior_mean() {
        let d = 2;
        let dynamics = linear_dynamics(d);
        let (b, m) = (dynamics.b.clone(), dynamics.m.clone());
        let model = affine_model(dynamics, DMatrix::zeros(d, d), false);
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, d, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, d, 2), 3).unwrap();
        let ks = kalman_rts_oracle(&model, &obs).unwrap();
        let h = grid.step();
        let mut mean = model.x0.clone();
        for k in 0..=grid.n_steps() {
            let diff = (&ks.smoothed_mean.node(k) - &mean).abs().max();
            assert!(diff < 1e-10, "node {k}: {diff}");
            mean = &mean + (&b * &mean + &m) * h;
        }
    }

    #[test]
    fn noiseless_dynamics_give_ode_flow() {
        let d = 2;
        let mut dynamics = linear_dynamics(d);
        dynamics.sigma = DMatrix::zeros(d, d);
        let (b, m) = (dynamics.b.clone(), dynamics.m.clone());
        let model = affine_model(dynamics, DMatrix::identity(d, d), true);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, d, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, d, 2), 3).unwrap();
        let ks = kalman_rts_oracle(&model, &obs).unwrap();
        let mut mean = model.x0.clone();
        for k in 0..=grid.n_steps() {
            assert!((&ks.smoothed_mean.node(k) - &mean).abs().max() < 1e-12);
            assert_eq!(ks.smoothed_cov[k].abs().max(), 0.0);
            mean = &mean + (&b * &mean + &m) * grid.step();
        }
    }

    #[test]
    fn smoothed_covariances_are_symmetric_psd() {
        let model = build_model("linear", 3).unwrap();
        let grid = TimeGrid::new(1.0, 300).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, 3, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, 3, 2), 3).unwrap();
        let ks = kalman_rts_oracle(&model, &obs).unwrap();
        for c in &ks.smoothed_cov {
            assert!((c - c.transpose()).abs().max() == 0.0);
            let eig = c.clone().symmetric_eigen().eigenvalues;
            assert!(eig.min() > -1e-12);
        }
        // terminal smoothed and filtered means coincide
        assert_eq!(ks.smoothed_mean.last(), ks.filtered_mean.last());
    }

    #[test]
    fn oracle_rejects_nonlinear_models() {
        let model = build_model("reaction_diffusion", 3).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, 3, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, 3, 2), 3).unwrap();
        assert!(matches!(
            kalman_rts_oracle(&model, &obs),
            Err(Error::Config(_))
        ));
    }
}
