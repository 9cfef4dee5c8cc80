//! Guided process `dX = b dt + σ (u∘ dt + dW∘)` driven by fixed Brownian
//! increments, together with its tractable log-weight
//!
//! ```text
//! log Ψ = ∫₀ᵀ ψ(t, X_t, ν_t) dt + log L(X_T; ζ) − log ṽ(T, X_T)
//! ψ(t, x, ν) = (b − b̃)' P⁻¹ (ν − x) − ½ tr((a − ã) P⁻¹) + ½ (ν − x)' P⁻¹ (a − ã) P⁻¹ (ν − x)
//! ```
//!
//! The factor `ṽ(0, x0) / V_0` and, with `ζ` observed through `B_ζ = I`, the
//! whole terminal ratio, are path independent and dropped: weights are
//! defined up to one multiplicative constant.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};

use crate::backward_filter::{eval_log_vtilde, BackwardFilterSolution, LinearGuide};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_dot, KahanSum};
use crate::sde::{NoiseDraw, ObservationRecord, Path};

/// A guided path and its log-weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPath {
    pub x_path: Path,
    /// Left-point Riemann sum of `ψ`.
    pub log_psi_integral: f64,
    pub log_terminal_correction: f64,
    pub total_log_weight: f64,
}

enum DispersionGap {
    /// `a − ã` vanishes identically.
    Zero,
    Constant(DMatrix<f64>),
    /// Recomputed at each step.
    Varying,
}

/// Per-(model, guide, filter) state reused across guided simulations.
pub struct GuidedSimulator<'a> {
    model: &'a crate::sde::ModelSpec,
    guide: &'a LinearGuide,
    sol: &'a BackwardFilterSolution,
    zeta: Option<&'a DVector<f64>>,
    gap: DispersionGap,
}

impl<'a> GuidedSimulator<'a> {
    /// `zeta` is the terminal observation the filter was conditioned on.
    pub fn new(
        model: &'a crate::sde::ModelSpec,
        guide: &'a LinearGuide,
        sol: &'a BackwardFilterSolution,
        zeta: Option<&'a DVector<f64>>,
    ) -> Result<Self> {
        let d = model.dim_x();
        if guide.dim() != d || sol.dim() != d {
            return Err(Error::Dimension {
                context: "guided simulation",
                expected: d,
                got: if guide.dim() != d {
                    guide.dim()
                } else {
                    sol.dim()
                },
            });
        }
        let gap = match (
            model.dynamics.constant_dispersion(),
            guide.sigma.as_constant(),
        ) {
            (Some(s), Some(st)) => {
                let gap = s * s.transpose() - st * st.transpose();
                if gap.iter().all(|v| *v == 0.0) {
                    DispersionGap::Zero
                } else {
                    DispersionGap::Constant(gap)
                }
            }
            _ => DispersionGap::Varying,
        };
        Ok(GuidedSimulator {
            model,
            guide,
            sol,
            zeta,
            gap,
        })
    }

    fn sigma_at<'s>(
        &'s self,
        t: f64,
        x: &DVector<f64>,
        buf: &'s mut DMatrix<f64>,
    ) -> &'s DMatrix<f64> {
        match self.model.dynamics.constant_dispersion() {
            Some(s) => s,
            None => {
                self.model.dynamics.dispersion(t, x, buf);
                buf
            }
        }
    }

    /// `ψ` at node `k` given the drift `b(t_k, x)`, the dispersion and
    /// `r = P_k⁻¹ (ν_k − x)`.
    fn psi_with(
        &self,
        k: usize,
        x: &DVector<f64>,
        drift: &DVector<f64>,
        sigma: &DMatrix<f64>,
        r: &DVector<f64>,
        scratch: &mut DVector<f64>,
    ) -> f64 {
        let t = self.sol.grid.time(k);
        self.guide.drift(t, x, scratch);
        let mut psi = 0.0;
        for i in 0..x.len() {
            psi += (drift[i] - scratch[i]) * r[i];
        }
        let gap: Cow<'_, DMatrix<f64>> = match &self.gap {
            DispersionGap::Zero => return psi,
            DispersionGap::Constant(g) => Cow::Borrowed(g),
            DispersionGap::Varying => Cow::Owned(sigma * sigma.transpose() - self.guide.a_tilde(t)),
        };
        psi - 0.5 * frobenius_dot(&gap, self.sol.p_inv(k)) + 0.5 * r.dot(&(gap.as_ref() * r))
    }

    pub fn grid(&self) -> crate::sde::TimeGrid {
        self.sol.grid
    }

    pub fn noise_dim(&self) -> usize {
        self.model.dim_w()
    }

    pub fn psi(&self, k: usize, x: &DVector<f64>) -> f64 {
        let d = x.len();
        let t = self.sol.grid.time(k);
        let mut drift = DVector::zeros(d);
        self.model.dynamics.drift(t, x, &mut drift);
        let mut buf = DMatrix::zeros(d, self.model.dim_w());
        let sigma = self.sigma_at(t, x, &mut buf).clone();
        let r = self.sol.p_inv(k) * (&self.sol.nu[k] - x);
        let mut scratch = DVector::zeros(d);
        self.psi_with(k, x, &drift, &sigma, &r, &mut scratch)
    }

    /// Path-dependent part of the terminal likelihood ratio `V_T / Ṽ_T`.
    pub fn terminal_correction(&self, x_end: &DVector<f64>) -> f64 {
        if self.sol.terminal_matches_likelihood() {
            return 0.0;
        }
        let n = self.sol.grid.n_steps();
        let log_l = match (&self.model.terminal, self.zeta) {
            (Some(term), Some(zeta)) => term.log_likelihood(zeta, x_end),
            _ => 0.0,
        };
        log_l - eval_log_vtilde(self.sol, n, x_end)
    }

    pub fn simulate(&self, w: &NoiseDraw) -> Result<WeightedPath> {
        self.run(w, None)
    }

    /// Simulates `X∘` and, when `lemma` is given, accumulates the right-hand
    /// side of the `d log ṽ(t, X_t)` identity alongside.
    fn run(&self, w: &NoiseDraw, mut lemma: Option<&mut LemmaTrace<'_>>) -> Result<WeightedPath> {
        let grid = self.sol.grid;
        if w.grid != grid {
            return Err(Error::config("noise grid differs from filter grid"));
        }
        if w.dim() != self.model.dim_w() {
            return Err(Error::Dimension {
                context: "guided noise",
                expected: self.model.dim_w(),
                got: w.dim(),
            });
        }
        let d = self.model.dim_x();
        let h = grid.step();
        let dynamics = self.model.dynamics.as_ref();

        let mut values = DMatrix::zeros(d, grid.n_nodes());
        values.set_column(0, &self.model.x0);
        let mut x = self.model.x0.clone();
        let mut drift = DVector::zeros(d);
        let mut sigma_buf = DMatrix::zeros(d, self.model.dim_w());
        let mut r = DVector::zeros(d);
        let mut diff = DVector::zeros(d);
        let mut u = DVector::zeros(self.model.dim_w());
        let mut scratch = DVector::zeros(d);
        let mut psi_sum = KahanSum::default();

        for k in 0..grid.n_steps() {
            let t = grid.time(k);
            dynamics.drift(t, &x, &mut drift);
            let sigma = self.sigma_at(t, &x, &mut sigma_buf);
            diff.copy_from(&self.sol.nu[k]);
            diff -= &x;
            r.gemv(1.0, self.sol.p_inv(k), &diff, 0.0);
            u.gemv_tr(1.0, sigma, &r, 0.0);
            let psi = self.psi_with(k, &x, &drift, sigma, &r, &mut scratch);
            psi_sum.add(psi * h);

            let dw = w.increments.column(k);
            if let Some(trace) = lemma.as_deref_mut() {
                trace.step(k, &x, &u, &dw.into_owned(), psi, h);
            }

            // drift + σ u∘, then the noise
            drift.gemv(1.0, sigma, &u, 1.0);
            x.axpy(h, &drift, 1.0);
            x.gemv(1.0, sigma, &dw, 1.0);
            if !psi.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Guided { step: k });
            }
            values.set_column(k + 1, &x);
        }

        let log_psi_integral = psi_sum.value();
        let log_terminal_correction = self.terminal_correction(&x);
        let total_log_weight = log_psi_integral + log_terminal_correction;
        if !total_log_weight.is_finite() {
            return Err(Error::Guided {
                step: grid.n_steps(),
            });
        }
        Ok(WeightedPath {
            x_path: Path { grid, values },
            log_psi_integral,
            log_terminal_correction,
            total_log_weight,
        })
    }
}

/// `ψ(t_k, x, ν_k)`.
pub fn psi(
    model: &crate::sde::ModelSpec,
    guide: &LinearGuide,
    sol: &BackwardFilterSolution,
    k: usize,
    x: &DVector<f64>,
) -> Result<f64> {
    Ok(GuidedSimulator::new(model, guide, sol, None)?.psi(k, x))
}

/// Simulates the guided process from the increments `w`; `zeta` is the
/// terminal observation the filter was conditioned on, if any.
pub fn simulate_guided(
    model: &crate::sde::ModelSpec,
    guide: &LinearGuide,
    sol: &BackwardFilterSolution,
    zeta: Option<&DVector<f64>>,
    w: &NoiseDraw,
) -> Result<WeightedPath> {
    GuidedSimulator::new(model, guide, sol, zeta)?.simulate(w)
}

struct LemmaTrace<'o> {
    obs: &'o ObservationRecord,
    h_op: &'o crate::linalg::TimeFn<DMatrix<f64>>,
    sums: Vec<f64>,
    acc: KahanSum,
}

impl LemmaTrace<'_> {
    fn step(
        &mut self,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
        dw: &DVector<f64>,
        psi: f64,
        h: f64,
    ) {
        let hx = self.h_op.at(self.obs.grid().time(k)).as_ref() * x;
        let dy = self.obs.increment(k);
        self.acc.add(-hx.dot(&dy));
        self.acc.add(0.5 * hx.norm_squared() * h);
        self.acc.add(u.dot(dw));
        self.acc.add(0.5 * u.norm_squared() * h);
        self.acc.add(psi * h);
        self.sums.push(self.acc.value());
    }
}

/// Largest deviation along a guided path between the accumulated right-hand
/// side of
///
/// ```text
/// d log ṽ(t, X) = −(H X)' dY + ½|H X|² dt + u∘' dW∘ + ½|u∘|² dt + ψ dt
/// ```
///
/// (left-point sums) and `log ṽ(t_k, X_k) − log ṽ(0, x0)`.
pub fn lemma_tildev_residual(
    model: &crate::sde::ModelSpec,
    guide: &LinearGuide,
    sol: &BackwardFilterSolution,
    obs: &ObservationRecord,
    w: &NoiseDraw,
) -> Result<f64> {
    if obs.grid() != sol.grid {
        return Err(Error::config("observation grid differs from filter grid"));
    }
    let sim = GuidedSimulator::new(model, guide, sol, obs.zeta.as_ref())?;
    let mut trace = LemmaTrace {
        obs,
        h_op: &model.obs_operator,
        sums: Vec::with_capacity(sol.grid.n_steps()),
        acc: KahanSum::default(),
    };
    let path = sim.run(w, Some(&mut trace))?;
    let base = eval_log_vtilde(sol, 0, &path.x_path.node(0));
    let mut worst: f64 = 0.0;
    for (k, s) in trace.sums.iter().enumerate() {
        let lhs = eval_log_vtilde(sol, k + 1, &path.x_path.node(k + 1)) - base;
        worst = worst.max((s - lhs).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward_filter::{solve_backward, FilterOptions};
    use crate::models::{build_guide, build_model, laplacian, LinearDynamics};
    use crate::sde::{
        derive_seed, draw_noise, simulate_forward, simulate_observation, ModelSpec, TimeGrid,
    };
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn observe(model: &ModelSpec, grid: TimeGrid, seed: u64) -> (Path, ObservationRecord) {
        let x = simulate_forward(model, grid, &draw_noise(grid, model.dim_w(), seed)).unwrap();
        let obs = simulate_observation(
            model,
            &x,
            &draw_noise(grid, model.dim_y(), seed + 1),
            seed + 2,
        )
        .unwrap();
        (x, obs)
    }

    #[test]
    fn psi_vanishes_for_exact_guide() {
        let model = build_model("linear", 3).unwrap();
        let guide = build_guide("linear", &model).unwrap();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let (_, obs) = observe(&model, g, 1);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-3.0..3.0));
            assert_eq!(
                psi(&model, &guide, &sol, rng.random_range(0..=100), &x).unwrap(),
                0.0
            );
        }
    }

    fn scalar(b: f64, m: f64, s: f64) -> ModelSpec {
        ModelSpec::new(
            "scalar",
            Arc::new(
                LinearDynamics::new(
                    DMatrix::from_element(1, 1, b),
                    DVector::from_element(1, m),
                    DMatrix::from_element(1, 1, s),
                )
                .unwrap(),
            ),
            DMatrix::from_element(1, 1, 1.0).into(),
            None,
            DVector::from_element(1, 0.3),
        )
        .unwrap()
    }

    #[test]
    fn psi_with_constant_drift_gap() {
        let g_const = 0.7;
        let model = scalar(-1.0, g_const, 1.0);
        let guide = LinearGuide::constant(
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
        );
        let g = TimeGrid::new(1.0, 50).unwrap();
        let (_, obs) = observe(&model, g, 4);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions { kappa: 10.0 }).unwrap();
        for k in [0, 13, 50] {
            let x = DVector::from_element(1, -0.4);
            let expected = g_const * (sol.nu[k][0] - x[0]) / sol.p[k][(0, 0)];
            let got = psi(&model, &guide, &sol, k, &x).unwrap();
            assert!((got - expected).abs() < 1e-12 * expected.abs().max(1.0));
        }
    }

    /// Independent re-derivation for the reaction–diffusion model against the
    /// guide `B = −5Λ`: `σ = σ̃ = I`, so `ψ = F(x)' P⁻¹ (ν − x)`.
    #[test]
    fn psi_reaction_diffusion_reference() {
        let d = 6;
        let model = build_model("reaction_diffusion", d).unwrap();
        let guide = build_guide("reaction_diffusion", &model).unwrap();
        let g = TimeGrid::new(1.0, 200).unwrap();
        let (_, obs) = observe(&model, g, 8);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.random_range(0..=200);
            let x = DVector::from_fn(d, |_, _| rng.random_range(-1.5..1.5));
            let f: DVector<f64> = x.map(|v: f64| 2.0 * v - 2.0 * v.powi(3));
            let pinv = sol.p[k].clone().try_inverse().unwrap();
            let expected = f.dot(&(pinv * (&sol.nu[k] - &x)));
            let got = psi(&model, &guide, &sol, k, &x).unwrap();
            assert!(
                (got - expected).abs() <= 1e-12 * expected.abs().max(1e-300) * 10.0,
                "{got} vs {expected}"
            );
        }
        let _ = laplacian(d);
    }

    #[test]
    fn exact_guide_has_zero_weight() {
        let model = build_model("linear", 2).unwrap();
        let guide = build_guide("linear", &model).unwrap();
        let g = TimeGrid::new(1.0, 500).unwrap();
        let (_, obs) = observe(&model, g, 2);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
        for s in 0..10 {
            let wp = simulate_guided(
                &model,
                &guide,
                &sol,
                obs.zeta.as_ref(),
                &draw_noise(g, 2, s),
            )
            .unwrap();
            assert_eq!(wp.total_log_weight, 0.0);
            assert_eq!(wp.log_terminal_correction, 0.0);
        }
    }

    #[test]
    fn dispersion_free_guided_path_follows_ode() {
        let gap = 0.4;
        let model = scalar(-1.0, gap, 0.0);
        let guide = LinearGuide::constant(
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        );
        let g = TimeGrid::new(1.0, 100).unwrap();
        let (_, obs) = observe(&model, g, 4);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions { kappa: 5.0 }).unwrap();
        let wp = simulate_guided(&model, &guide, &sol, None, &draw_noise(g, 1, 3)).unwrap();
        let mut x = 0.3;
        let mut weight = 0.0;
        for k in 0..100 {
            assert!((wp.x_path.values[(0, k)] - x).abs() < 1e-14);
            weight += gap * (sol.nu[k][0] - x) / sol.p[k][(0, 0)] * 0.01;
            x += (-x + gap) * 0.01;
        }
        assert!((wp.log_psi_integral - weight).abs() < 1e-12);
    }

    #[test]
    fn guided_paths_end_closer_to_terminal_observation() {
        let d = 10;
        let model = build_model("reaction_diffusion", d).unwrap();
        let guide = build_guide("reaction_diffusion", &model).unwrap();
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let (_, obs) = observe(&model, g, 77);
        let zeta = obs.zeta.clone().unwrap();
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
        let sim = GuidedSimulator::new(&model, &guide, &sol, Some(&zeta)).unwrap();
        let (mut guided, mut free) = (0.0, 0.0);
        for i in 0..100 {
            let w = draw_noise(g, d, derive_seed(1, i));
            guided += (sim.simulate(&w).unwrap().x_path.last() - &zeta).norm();
            free += (simulate_forward(&model, g, &w).unwrap().last() - &zeta).norm();
        }
        assert!(guided < free, "guided {guided} vs forward {free}");
    }

    #[test]
    fn weight_is_continuous_in_noise() {
        let d = 4;
        let model = build_model("reaction_diffusion", d).unwrap();
        let guide = build_guide("reaction_diffusion", &model).unwrap();
        let g = TimeGrid::new(1.0, 400).unwrap();
        let (_, obs) = observe(&model, g, 3);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
        let sim = GuidedSimulator::new(&model, &guide, &sol, obs.zeta.as_ref()).unwrap();
        let w = draw_noise(g, d, 10);
        let base = sim.simulate(&w).unwrap().total_log_weight;
        let deltas: Vec<f64> = [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|eps| {
                let mut wp = w.clone();
                wp.increments[(1, 200)] += eps;
                (sim.simulate(&wp).unwrap().total_log_weight - base).abs() / eps
            })
            .collect();
        // difference quotients stay bounded and settle
        assert!(
            deltas.iter().all(|q| q.is_finite() && *q < 1e3),
            "{deltas:?}"
        );
        assert!((deltas[1] - deltas[2]).abs() < 0.05 * deltas[2].max(1.0));
    }

    #[test]
    fn simulation_is_pure_function_of_noise() {
        let model = build_model("reaction_diffusion", 3).unwrap();
        let guide = build_guide("reaction_diffusion", &model).unwrap();
        let g = TimeGrid::new(1.0, 100).unwrap();
        let (_, obs) = observe(&model, g, 3);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
        let w = draw_noise(g, 3, 1);
        let a = simulate_guided(&model, &guide, &sol, obs.zeta.as_ref(), &w).unwrap();
        let b = simulate_guided(&model, &guide, &sol, obs.zeta.as_ref(), &w).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lemma_identity_is_exact_without_noise() {
        // σ = σ̃ = 0 and H = 0 remove every stochastic term; the remaining
        // discrepancy is the O(h) Euler error, which halves with h.
        let mut model = scalar(-1.0, 0.5, 0.0).with_obs_operator(DMatrix::zeros(1, 1).into());
        model.terminal = Some(
            crate::sde::TerminalObservation::new(
                DMatrix::identity(1, 1),
                DMatrix::from_element(1, 1, 0.1),
            )
            .unwrap(),
        );
        let guide = LinearGuide::constant(
            DMatrix::from_element(1, 1, -1.0),
            DVector::zeros(1),
            DMatrix::zeros(1, 1),
        );
        let residual = |n: usize| {
            let g = TimeGrid::new(1.0, n).unwrap();
            let mut obs = ObservationRecord {
                y_path: Path::zeros(g, 1),
                zeta: Some(DVector::from_element(1, 1.0)),
            };
            obs.zeta = Some(DVector::from_element(1, 1.0));
            let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
            lemma_tildev_residual(&model, &guide, &sol, &obs, &NoiseDraw::zeros(g, 1)).unwrap()
        };
        let (r1, r2) = (residual(1000), residual(2000));
        assert!(r1 < 1e-2);
        let ratio = r2 / r1;
        assert!((0.3..=0.7).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rejects_mismatched_noise() {
        let model = build_model("ou", 1).unwrap();
        let guide = build_guide("ou", &model).unwrap();
        let g = TimeGrid::new(1.0, 10).unwrap();
        let (_, obs) = observe(&model, g, 3);
        let sol = solve_backward(&guide, &model, &obs, g, FilterOptions::default()).unwrap();
        let other = TimeGrid::new(1.0, 20).unwrap();
        assert!(simulate_guided(&model, &guide, &sol, None, &draw_noise(other, 1, 0)).is_err());
        assert!(simulate_guided(&model, &guide, &sol, None, &draw_noise(g, 2, 0)).is_err());
    }
}
