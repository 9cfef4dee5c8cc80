//! Fitting the guide `B(θ), m(θ)` by stochastic gradient ascent on the
//! reward
//!
//! ```text
//! J = Σ (H X∘_k)' ΔY_k − ½ Σ |H X∘_k|² h + log N(ζ; B_ζ X∘_T, Σ_ζ)
//!     − Σ u_k' ΔW_k − ½ Σ |u_k|² h
//! ```
//!
//! Gradients are exact derivatives of the discrete recursions, obtained by
//! carrying tangents of `(P, ν)` through the backward filter and of `X∘`
//! through the guided Euler scheme, with the driving noise held fixed.

use nalgebra::{DMatrix, DVector};

use crate::backward_filter::{solve_backward, BackwardFilterSolution, FilterOptions, LinearGuide};
use crate::error::{Error, Result};
use crate::sde::{derive_seed, draw_noise, ModelSpec, NoiseDraw, ObservationRecord, TimeGrid};

/// `θ = (diag B, super-diagonal of B, m)`, so `B` is symmetric
/// tridiagonal and `|θ| = 3d − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideParams {
    pub theta: DVector<f64>,
    d: usize,
}

impl GuideParams {
    pub fn n_params(d: usize) -> usize {
        3 * d - 1
    }

    pub fn zeros(d: usize) -> Self {
        GuideParams {
            theta: DVector::zeros(Self::n_params(d)),
            d,
        }
    }

    pub fn new(d: usize, theta: DVector<f64>) -> Result<Self> {
        if d == 0 || theta.len() != Self::n_params(d) {
            return Err(Error::Dimension {
                context: "guide parameters",
                expected: Self::n_params(d.max(1)),
                got: theta.len(),
            });
        }
        Ok(GuideParams { theta, d })
    }

    /// Reads the tridiagonal part of `b`; entries off the band are ignored.
    pub fn from_parts(b: &DMatrix<f64>, m: &DVector<f64>) -> Result<Self> {
        let d = m.len();
        if b.nrows() != d || b.ncols() != d {
            return Err(Error::Dimension {
                context: "guide drift matrix",
                expected: d,
                got: b.nrows(),
            });
        }
        let mut p = Self::zeros(d);
        for i in 0..d {
            p.theta[i] = b[(i, i)];
            p.theta[2 * d - 1 + i] = m[i];
        }
        for i in 0..d - 1 {
            p.theta[d + i] = b[(i, i + 1)];
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn b(&self) -> DMatrix<f64> {
        let d = self.d;
        let mut b = DMatrix::zeros(d, d);
        for i in 0..d {
            b[(i, i)] = self.theta[i];
        }
        for i in 0..d - 1 {
            b[(i, i + 1)] = self.theta[d + i];
            b[(i + 1, i)] = self.theta[d + i];
        }
        b
    }

    pub fn m(&self) -> DVector<f64> {
        self.theta.rows(2 * self.d - 1, self.d).into_owned()
    }

    pub fn to_guide(&self, sigma: DMatrix<f64>) -> LinearGuide {
        LinearGuide::constant(self.b(), self.m(), sigma)
    }

    /// Number of coordinates that move `B` (and hence `P`).
    fn n_matrix_params(&self) -> usize {
        2 * self.d - 1
    }

    /// Rows `(i, j)` touched by `∂B/∂θ_idx`: `Some(j)` for the symmetric pair.
    fn b_direction(&self, idx: usize) -> (usize, Option<usize>) {
        if idx < self.d {
            (idx, None)
        } else {
            let i = idx - self.d;
            (i, Some(i + 1))
        }
    }
}

fn constant_sigma(model: &ModelSpec) -> Result<&DMatrix<f64>> {
    model.dynamics.constant_dispersion().ok_or_else(|| {
        Error::config("guide fitting needs a dispersion that is constant in time and state")
    })
}

/// Backward filter for `guide(θ)` together with `∂P_k/∂θ` (matrix
/// coordinates only; `m` does not move `P`) and `∂ν_k/∂θ`.
#[derive(Debug, Clone)]
pub struct FilterTangents {
    pub sol: BackwardFilterSolution,
    /// Node `k`: `d × (2d−1)d`, one `d × d` block per matrix coordinate.
    dp: Vec<DMatrix<f64>>,
    /// Node `k`: `d × (3d−1)`.
    dnu: Vec<DMatrix<f64>>,
}

pub fn solve_filter_tangents(
    params: &GuideParams,
    model: &ModelSpec,
    obs: &ObservationRecord,
    grid: TimeGrid,
    opts: FilterOptions,
) -> Result<FilterTangents> {
    let d = model.dim_x();
    if params.dim() != d {
        return Err(Error::Dimension {
            context: "guide parameters",
            expected: d,
            got: params.dim(),
        });
    }
    let sigma = constant_sigma(model)?;
    let guide = params.to_guide(sigma.clone());
    let sol = solve_backward(&guide, model, obs, grid, opts)?;

    let n = grid.n_steps();
    let h = grid.step();
    let nb = params.n_matrix_params();
    let np = GuideParams::n_params(d);
    let b = params.b();
    let mut dp = vec![DMatrix::zeros(d, nb * d); n + 1];
    let mut dnu = vec![DMatrix::zeros(d, np); n + 1];

    let const_gram = model
        .obs_operator
        .as_constant()
        .map(|hm| hm.transpose() * hm);
    for k in (0..n).rev() {
        let t = grid.time(k + 1);
        let hm = model.obs_operator.at(t);
        let gram = match &const_gram {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(hm.transpose() * hm.as_ref()),
        };
        let (p, nu) = (&sol.p[k + 1], &sol.nu[k + 1]);
        let pg = p * gram.as_ref();
        let mmat = &b + &pg;
        let c = hm.tr_mul(&obs.increment(k)) - gram.as_ref() * nu * h;

        let mdp = &mmat * &dp[k + 1];
        let mut dp_k = dp[k + 1].clone();
        let mut dnu_k = &dnu[k + 1] - (&mmat * &dnu[k + 1]) * h;
        for j in 0..nb {
            let mut y = mdp.columns(j * d, d).into_owned();
            let (i, pair) = params.b_direction(j);
            let mut dbnu = DVector::zeros(d);
            match pair {
                None => {
                    let row = p.row(i).into_owned();
                    let mut yi = y.row_mut(i);
                    yi += row;
                    dbnu[i] = nu[i];
                }
                Some(i1) => {
                    let (ri, ri1) = (p.row(i).into_owned(), p.row(i1).into_owned());
                    let mut yi = y.row_mut(i);
                    yi += ri1;
                    let mut yi1 = y.row_mut(i1);
                    yi1 += ri;
                    dbnu[i] = nu[i1];
                    dbnu[i1] = nu[i];
                }
            }
            let sym = &y + y.transpose();
            let mut block = dp_k.columns_mut(j * d, d);
            block -= sym * h;

            let dp_c = dp[k + 1].columns(j * d, d) * &c;
            let mut col = dnu_k.column_mut(j);
            col -= dbnu * h;
            col += dp_c;
        }
        for i in 0..d {
            dnu_k[(i, nb + i)] -= h;
        }
        dp[k] = dp_k;
        dnu[k] = dnu_k;
    }
    Ok(FilterTangents { sol, dp, dnu })
}

/// One Monte Carlo draw of `J` and its gradient in `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSample {
    pub value: f64,
    pub grad: DVector<f64>,
}

/// Simulates `X∘` from `w` under the filter in `ft` and accumulates `J` and
/// `∇_θ J` with left-point sums.
pub fn reward_with_tangents(
    params: &GuideParams,
    ft: &FilterTangents,
    model: &ModelSpec,
    obs: &ObservationRecord,
    w: &NoiseDraw,
) -> Result<RewardSample> {
    let grid = ft.sol.grid;
    if w.grid != grid || w.dim() != model.dim_w() {
        return Err(Error::config(
            "reward noise does not match grid or noise dimension",
        ));
    }
    let sigma = constant_sigma(model)?;
    let d = model.dim_x();
    let np = GuideParams::n_params(d);
    let nb = params.n_matrix_params();
    let h = grid.step();
    let dynamics = model.dynamics.as_ref();

    let mut x = model.x0.clone();
    let mut dx = DMatrix::<f64>::zeros(d, np);
    let mut drift = DVector::zeros(d);
    let mut jac = DMatrix::zeros(d, d);
    let mut value = 0.0;
    let mut grad = DVector::zeros(np);

    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let hm = model.obs_operator.at(t);
        let dy = obs.increment(k);
        let dw = w.increments.column(k).into_owned();
        dynamics.drift(t, &x, &mut drift);
        dynamics.drift_jacobian(t, &x, &mut jac);
        let p_inv = ft.sol.p_inv(k);
        let r = p_inv * (&ft.sol.nu[k] - &x);
        let u = sigma.tr_mul(&r);

        let hx = hm.as_ref() * &x;
        value +=
            hx.dot(&dy) - 0.5 * hx.norm_squared() * h - u.dot(&dw) - 0.5 * u.norm_squared() * h;

        // ∂u = σ' P⁻¹ (∂ν − ∂X − ∂P r)
        let g = hm.tr_mul(&(&dy - &hx * h));
        grad += dx.tr_mul(&g);
        let mut v = &ft.dnu[k] - &dx;
        for j in 0..nb {
            let dpr = ft.dp[k].columns(j * d, d) * &r;
            let mut col = v.column_mut(j);
            col -= dpr;
        }
        let du = sigma.tr_mul(&(p_inv * v));
        let e = &dw + &u * h;
        grad -= du.tr_mul(&e);

        let ddx = &jac * &dx + sigma * &du;
        dx += ddx * h;

        drift.gemv(1.0, sigma, &u, 1.0);
        x.axpy(h, &drift, 1.0);
        x.gemv(1.0, sigma, &dw, 1.0);
        if !value.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Guided { step: k });
        }
    }
    if let (Some(term), Some(zeta)) = (&model.terminal, &obs.zeta) {
        value += term.log_likelihood(zeta, &x);
        grad += dx.tr_mul(&term.grad_log_likelihood(zeta, &x));
    }
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Guided {
            step: grid.n_steps(),
        });
    }
    Ok(RewardSample { value, grad })
}

/// `J` and `∇_θ J` for one noise draw; a pure function of `(θ, w)`.
pub fn reward_and_grad(
    params: &GuideParams,
    model: &ModelSpec,
    obs: &ObservationRecord,
    grid: TimeGrid,
    w: &NoiseDraw,
) -> Result<RewardSample> {
    let ft = solve_filter_tangents(params, model, obs, grid, FilterOptions::default())?;
    reward_with_tangents(params, &ft, model, obs, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: DVector<f64>,
    pub second_moment: DVector<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn new(eta: f64, n_params: usize) -> Self {
        AdamState {
            eta,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: DVector::zeros(n_params),
            second_moment: DVector::zeros(n_params),
            step: 0,
        }
    }

    /// Moves `theta` up the gradient; returns the applied update.
    pub fn ascend(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>) -> DVector<f64> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        self.first_moment = &self.first_moment * b1 + grad * (1.0 - b1);
        self.second_moment = &self.second_moment * b2 + grad.component_mul(grad) * (1.0 - b2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let update = self.first_moment.zip_map(&self.second_moment, |m, v| {
            self.eta * (m / c1) / ((v / c2).sqrt() + self.eps)
        });
        *theta += &update;
        update
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub n_iters: usize,
    pub batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: GuideParams,
    /// Negative mean reward at each iteration.
    pub loss: Vec<f64>,
    pub invalid_samples: usize,
}

/// Adam ascent on `J`. Iteration `i` draws `batch` noise paths seeded by
/// `derive_seed(derive_seed(seed, i), b)`; the filter and its tangents are
/// solved once per iteration and shared by the batch.
pub fn fit_guide(
    model: &ModelSpec,
    obs: &ObservationRecord,
    grid: TimeGrid,
    init: GuideParams,
    mut adam: AdamState,
    cfg: FitConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<FitResult> {
    if cfg.n_iters == 0 {
        return Err(Error::config("n_iters must be at least 1"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch must be at least 1"));
    }
    if adam.first_moment.len() != init.theta.len() {
        return Err(Error::Dimension {
            context: "optimizer state",
            expected: init.theta.len(),
            got: adam.first_moment.len(),
        });
    }
    let mut params = init;
    let mut loss = Vec::with_capacity(cfg.n_iters);
    let mut invalid_samples = 0;
    for iter in 0..cfg.n_iters {
        let iter_seed = derive_seed(cfg.seed, iter as u64);
        let ft = solve_filter_tangents(&params, model, obs, grid, FilterOptions::default());
        let samples: Vec<Result<RewardSample>> = match &ft {
            Err(e) => {
                log::warn!("iteration {iter}: filter failed: {e}");
                (0..cfg.batch)
                    .map(|_| {
                        Err(Error::Fit {
                            iter,
                            reason: e.to_string(),
                        })
                    })
                    .collect()
            }
            Ok(ft) => {
                let draw = |b: usize| {
                    let w = draw_noise(grid, model.dim_w(), derive_seed(iter_seed, b as u64));
                    reward_with_tangents(&params, ft, model, obs, &w)
                };
                #[cfg(feature = "parallel")]
                {
                    use rayon::prelude::*;
                    (0..cfg.batch).into_par_iter().map(draw).collect()
                }
                #[cfg(not(feature = "parallel"))]
                {
                    (0..cfg.batch).map(draw).collect()
                }
            }
        };
        let mut grad = DVector::zeros(params.theta.len());
        let mut value = 0.0;
        let mut valid = 0usize;
        let mut last_err = None;
        for s in samples {
            match s {
                Ok(s) => {
                    grad += s.grad;
                    value += s.value;
                    valid += 1;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let invalid = cfg.batch - valid;
        invalid_samples += invalid;
        if 2 * invalid > cfg.batch {
            return Err(Error::Fit {
                iter,
                reason: format!(
                    "{invalid} of {} reward samples invalid (last: {})",
                    cfg.batch,
                    last_err.map(|e| e.to_string()).unwrap_or_default()
                ),
            });
        }
        grad /= valid as f64;
        let neg_reward = -value / valid as f64;
        adam.ascend(&mut params.theta, &grad);
        loss.push(neg_reward);
        progress(iter, neg_reward);
    }
    Ok(FitResult {
        params,
        loss,
        invalid_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward_filter::control;
    use crate::guided::GuidedSimulator;
    use crate::models::{build_model, linear_dynamics};
    use crate::sde::{rng_from_seed, simulate_forward, simulate_observation};
    use rand::Rng;

    fn problem(name: &str, d: usize, n: usize) -> (ModelSpec, ObservationRecord, TimeGrid) {
        let model = build_model(name, d).unwrap();
        let grid = TimeGrid::new(1.0, n).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, d, 11)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, d, 12), 13).unwrap();
        (model, obs, grid)
    }

    #[test]
    fn packing_round_trips() {
        let d = 4;
        let theta = DVector::from_fn(11, |i, _| i as f64 + 1.0);
        let p = GuideParams::new(d, theta.clone()).unwrap();
        let b = p.b();
        assert_eq!(b, b.transpose());
        assert_eq!(b[(0, 0)], 1.0);
        assert_eq!(b[(1, 2)], 6.0);
        assert_eq!(b[(0, 2)], 0.0);
        assert_eq!(p.m()[3], 11.0);
        assert_eq!(GuideParams::from_parts(&b, &p.m()).unwrap(), p);
        assert!(GuideParams::new(d, DVector::zeros(10)).is_err());
        assert_eq!(GuideParams::zeros(1).theta.len(), 2);
    }

    #[test]
    fn path_matches_guided_simulation() {
        let (model, obs, grid) = problem("reaction_diffusion", 3, 200);
        let mut rng = rng_from_seed(1);
        let theta = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
        let params = GuideParams::new(3, theta).unwrap();
        let ft =
            solve_filter_tangents(&params, &model, &obs, grid, FilterOptions::default()).unwrap();
        let guide = params.to_guide(DMatrix::identity(3, 3));
        let sim = GuidedSimulator::new(&model, &guide, &ft.sol, obs.zeta.as_ref()).unwrap();
        let w = draw_noise(grid, 3, 5);
        let path = sim.simulate(&w).unwrap().x_path;

        // recompute J from the guided path
        let h = grid.step();
        let mut j = 0.0;
        for k in 0..grid.n_steps() {
            let x = path.node(k);
            let u = control(&ft.sol, &model, k, &x);
            let hx = &x * 5.0;
            let dw = w.increments.column(k);
            j += hx.dot(&obs.increment(k))
                - 0.5 * hx.norm_squared() * h
                - u.dot(&dw)
                - 0.5 * u.norm_squared() * h;
        }
        let term = model.terminal.as_ref().unwrap();
        j += term.log_likelihood(obs.zeta.as_ref().unwrap(), &path.last());
        let s = reward_with_tangents(&params, &ft, &model, &obs, &w).unwrap();
        assert!(
            (s.value - j).abs() < 1e-9 * j.abs().max(1.0),
            "{} vs {j}",
            s.value
        );
    }

    fn check_fd(name: &str, d: usize, n: usize, seed: u64) {
        let (model, obs, grid) = problem(name, d, n);
        let w = draw_noise(grid, d, 77);
        let mut rng = rng_from_seed(seed);
        let np = GuideParams::n_params(d);
        for _ in 0..5 {
            let mut theta = DVector::from_fn(np, |_, _| rng.random::<f64>() - 0.5);
            for i in 0..d {
                theta[i] -= 1.0;
            }
            let params = GuideParams::new(d, theta.clone()).unwrap();
            let s = reward_and_grad(&params, &model, &obs, grid, &w).unwrap();
            for j in 0..np {
                let eps = 1e-5;
                let mut tp = theta.clone();
                tp[j] += eps;
                let mut tm = theta.clone();
                tm[j] -= eps;
                let jp = reward_and_grad(&GuideParams::new(d, tp).unwrap(), &model, &obs, grid, &w)
                    .unwrap();
                let jm = reward_and_grad(&GuideParams::new(d, tm).unwrap(), &model, &obs, grid, &w)
                    .unwrap();
                let fd = (jp.value - jm.value) / (2.0 * eps);
                let rel = (s.grad[j] - fd).abs() / fd.abs().max(1e-2);
                assert!(
                    rel <= 1e-4,
                    "{name} coord {j}: {} vs {fd} (rel {rel})",
                    s.grad[j]
                );
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_reaction_diffusion() {
        check_fd("reaction_diffusion", 3, 200, 1);
    }

    #[test]
    fn gradient_matches_finite_differences_linear_models() {
        check_fd("linear", 3, 200, 2);
        check_fd("ou", 2, 200, 3);
    }

    #[test]
    fn without_observations_only_control_terms_remain() {
        let d = 2;
        let model = build_model("ou", d)
            .unwrap()
            .with_obs_operator(DMatrix::zeros(d, d).into())
            .with_terminal(None);
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, d, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, d, 2), 3).unwrap();
        let params =
            GuideParams::new(d, DVector::from_vec(vec![-0.5, -2.0, 0.3, 0.1, 0.2])).unwrap();
        let w = draw_noise(grid, d, 4);
        let s = reward_and_grad(&params, &model, &obs, grid, &w).unwrap();
        let sol = solve_filter_tangents(&params, &model, &obs, grid, FilterOptions::default())
            .unwrap()
            .sol;
        let guide = params.to_guide(DMatrix::identity(d, d));
        let path = GuidedSimulator::new(&model, &guide, &sol, None)
            .unwrap()
            .simulate(&w)
            .unwrap()
            .x_path;
        let h = grid.step();
        let mut expected = 0.0;
        for k in 0..grid.n_steps() {
            let u = control(&sol, &model, k, &path.node(k));
            expected -= u.dot(&w.increments.column(k)) + 0.5 * u.norm_squared() * h;
        }
        assert!((s.value - expected).abs() < 1e-12 * expected.abs().max(1.0));
    }

    #[test]
    fn gradient_has_zero_mean_at_the_true_guide() {
        let d = 2;
        let (model, obs, grid) = problem("linear", d, 200);
        let lin = linear_dynamics(d);
        let params = GuideParams::from_parts(&lin.b, &lin.m).unwrap();
        let ft =
            solve_filter_tangents(&params, &model, &obs, grid, FilterOptions::default()).unwrap();
        let n = 200;
        let grads: Vec<DVector<f64>> = (0..n)
            .map(|i| {
                let w = draw_noise(grid, d, derive_seed(99, i));
                reward_with_tangents(&params, &ft, &model, &obs, &w)
                    .unwrap()
                    .grad
            })
            .collect();
        for j in 0..params.theta.len() {
            let xs: Vec<f64> = grads.iter().map(|g| g[j]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(mean.abs() <= 3.0 * se, "coord {j}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn adam_direction_is_scale_invariant() {
        let g = DVector::from_vec(vec![0.3, -2.0, 1e-3, -4e-4]);
        let mut a = AdamState::new(0.01, 4);
        let mut b = AdamState::new(0.01, 4);
        let (mut ta, mut tb) = (DVector::zeros(4), DVector::zeros(4));
        let ua = a.ascend(&mut ta, &g);
        let ub = b.ascend(&mut tb, &(&g * 250.0));
        for i in 0..4 {
            assert_eq!(ua[i].signum(), ub[i].signum());
            assert_eq!(ua[i].signum(), g[i].signum());
        }
        // first step has magnitude η up to eps
        assert!((ua[0].abs() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn fit_iteration_counts() {
        let (model, obs, grid) = problem("reaction_diffusion", 2, 50);
        let init = GuideParams::zeros(2);
        let adam = AdamState::new(0.01, 5);
        let cfg = FitConfig {
            n_iters: 0,
            batch: 1,
            seed: 1,
        };
        assert!(fit_guide(
            &model,
            &obs,
            grid,
            init.clone(),
            adam.clone(),
            cfg,
            |_, _| {}
        )
        .is_err());
        let cfg = FitConfig {
            n_iters: 1,
            batch: 2,
            seed: 1,
        };
        let mut calls = 0;
        let res = fit_guide(&model, &obs, grid, init.clone(), adam, cfg, |_, _| {
            calls += 1
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert_eq!(res.loss.len(), 1);
        assert!(res
            .params
            .theta
            .iter()
            .all(|v| (v.abs() - 0.01).abs() < 1e-6 || *v == 0.0));
        assert!(res.params.theta != init.theta);
    }
}
