//! Time grids, Brownian increments and Euler–Maruyama simulation of the
//! latent diffusion `dX = b(t, X) dt + σ(t, X) dW` and of the observation
//! process `dY = H_t X dt + dβ`.
//!
//! Models must satisfy a Novikov-type integrability condition for the
//! guided-process weights to be valid; this is a property of the model that
//! cannot be checked numerically and is left to the caller.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{SpdFactor, TimeFn, LN_2PI};

/// Uniform grid `0 = t_0 < t_1 < … < t_n = T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t_end: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(Error::config(format!(
                "final time must be positive, got {t_end}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::config("time grid needs at least one step"));
        }
        Ok(TimeGrid { t_end, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Node time; the last node is exactly `T`.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.t_end
        } else {
            k as f64 * self.step()
        }
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_nodes()).map(move |k| self.time(k))
    }
}

/// Grid-sampled path, one column per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub grid: TimeGrid,
    pub values: DMatrix<f64>,
}

impl Path {
    pub fn new(grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        if values.ncols() != grid.n_nodes() {
            return Err(Error::Dimension {
                context: "path nodes",
                expected: grid.n_nodes(),
                got: values.ncols(),
            });
        }
        Ok(Path { grid, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Path {
            grid,
            values: DMatrix::zeros(dim, grid.n_nodes()),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn node(&self, k: usize) -> DVector<f64> {
        self.values.column(k).into_owned()
    }

    pub fn last(&self) -> DVector<f64> {
        self.node(self.grid.n_steps())
    }
}

/// Brownian increments `ΔW_k ~ N(0, h I)`, one column per step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub grid: TimeGrid,
    pub increments: DMatrix<f64>,
    pub seed: u64,
}

impl NoiseDraw {
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        NoiseDraw {
            grid,
            increments: DMatrix::zeros(dim, grid.n_steps()),
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.increments.nrows()
    }

    /// Cumulative sum of the increments, starting at zero.
    pub fn to_path(&self) -> Path {
        let n = self.grid.n_steps();
        let mut values = DMatrix::zeros(self.dim(), n + 1);
        for k in 0..n {
            let next = values.column(k) + self.increments.column(k);
            values.set_column(k + 1, &next);
        }
        Path {
            grid: self.grid,
            values,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent per-path seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fills `out` with i.i.d. `N(0, scale^2)` samples in column-major order.
pub(crate) fn fill_normal(rng: &mut ChaCha8Rng, scale: f64, out: &mut DMatrix<f64>) {
    for v in out.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = scale * z;
    }
}

pub fn draw_noise(grid: TimeGrid, dim: usize, seed: u64) -> NoiseDraw {
    let mut rng = rng_from_seed(seed);
    let mut increments = DMatrix::zeros(dim, grid.n_steps());
    fill_normal(&mut rng, grid.step().sqrt(), &mut increments);
    NoiseDraw {
        grid,
        increments,
        seed,
    }
}

/// Drift and dispersion of the latent diffusion.
///
/// Implementations must be pure: the samplers evaluate them from several
/// threads at once.
pub trait Dynamics: Send + Sync {
    fn dim_x(&self) -> usize;

    fn dim_w(&self) -> usize;

    fn drift(&self, t: f64, x: &DVector<f64>, out: &mut DVector<f64>);

    fn dispersion(&self, t: f64, x: &DVector<f64>, out: &mut DMatrix<f64>);

    /// `Some(σ)` when the dispersion depends on neither time nor state.
    fn constant_dispersion(&self) -> Option<&DMatrix<f64>> {
        None
    }

    /// `Some((B, m))` when the drift is `B x + m` at all times.
    fn affine_parts(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        None
    }

    /// `∂b/∂x`. The default uses central differences.
    fn drift_jacobian(&self, t: f64, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        let d = self.dim_x();
        let mut xp = x.clone();
        let mut fp = DVector::zeros(d);
        let mut fm = DVector::zeros(d);
        for j in 0..d {
            let eps = 1e-6 * x[j].abs().max(1.0);
            xp[j] = x[j] + eps;
            self.drift(t, &xp, &mut fp);
            xp[j] = x[j] - eps;
            self.drift(t, &xp, &mut fm);
            xp[j] = x[j];
            for i in 0..d {
                out[(i, j)] = (fp[i] - fm[i]) / (2.0 * eps);
            }
        }
    }
}

/// Noisy Gaussian observation `ζ ~ N(B_ζ X_T, Σ_ζ)` of the terminal state.
#[derive(Debug, Clone)]
pub struct TerminalObservation {
    pub b: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    cov_inv: DMatrix<f64>,
    cov_log_det: f64,
}

impl TerminalObservation {
    pub fn new(b: DMatrix<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let q = cov.nrows();
        if cov.ncols() != q || b.nrows() != q {
            return Err(Error::Dimension {
                context: "terminal observation",
                expected: q,
                got: b.nrows(),
            });
        }
        let asym = (&cov - cov.transpose()).norm();
        if asym > 1e-12 * cov.norm() {
            return Err(Error::config("terminal noise covariance must be symmetric"));
        }
        let f = SpdFactor::new(&cov)
            .map_err(|e| Error::config(format!("terminal noise covariance: {e}")))?;
        Ok(TerminalObservation {
            b,
            cov,
            cov_inv: f.inverse,
            cov_log_det: f.log_det,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov_inv(&self) -> &DMatrix<f64> {
        &self.cov_inv
    }

    /// `log N(ζ; B_ζ x, Σ_ζ)`.
    pub fn log_likelihood(&self, zeta: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let r = zeta - &self.b * x;
        let q = self.dim() as f64;
        -0.5 * (q * LN_2PI + self.cov_log_det + r.dot(&(&self.cov_inv * &r)))
    }

    /// `∇_x log N(ζ; B_ζ x, Σ_ζ) = B_ζ' Σ_ζ⁻¹ (ζ − B_ζ x)`.
    pub fn grad_log_likelihood(&self, zeta: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let r = zeta - &self.b * x;
        self.b.transpose() * (&self.cov_inv * r)
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub dynamics: Arc<dyn Dynamics>,
    /// Observation operator `H_t` (D × d).
    pub obs_operator: TimeFn<DMatrix<f64>>,
    pub terminal: Option<TerminalObservation>,
    pub x0: DVector<f64>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim_x", &self.dim_x())
            .field("dim_w", &self.dim_w())
            .field("dim_y", &self.dim_y())
            .field("terminal", &self.terminal.is_some())
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        obs_operator: TimeFn<DMatrix<f64>>,
        terminal: Option<TerminalObservation>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let d = dynamics.dim_x();
        if d == 0 || dynamics.dim_w() == 0 {
            return Err(Error::config("state and noise dimensions must be positive"));
        }
        if x0.len() != d {
            return Err(Error::Dimension {
                context: "initial state",
                expected: d,
                got: x0.len(),
            });
        }
        let h0 = obs_operator.at(0.0);
        if h0.ncols() != d || h0.nrows() == 0 {
            return Err(Error::Dimension {
                context: "observation operator columns",
                expected: d,
                got: h0.ncols(),
            });
        }
        if let Some(term) = &terminal {
            if term.b.ncols() != d {
                return Err(Error::Dimension {
                    context: "terminal observation operator",
                    expected: d,
                    got: term.b.ncols(),
                });
            }
        }
        Ok(ModelSpec {
            name: name.into(),
            dynamics,
            obs_operator,
            terminal,
            x0,
        })
    }

    pub fn dim_x(&self) -> usize {
        self.dynamics.dim_x()
    }

    pub fn dim_w(&self) -> usize {
        self.dynamics.dim_w()
    }

    pub fn dim_y(&self) -> usize {
        self.obs_operator.at(0.0).nrows()
    }

    pub fn with_terminal(mut self, terminal: Option<TerminalObservation>) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_obs_operator(mut self, h: TimeFn<DMatrix<f64>>) -> Self {
        self.obs_operator = h;
        self
    }
}

/// Observation path `Y` (with `Y_0 = 0`) and optional terminal observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub y_path: Path,
    pub zeta: Option<DVector<f64>>,
}

impl ObservationRecord {
    pub fn new(y_path: Path, zeta: Option<DVector<f64>>) -> Result<Self> {
        if y_path.values.column(0).iter().any(|v| *v != 0.0) {
            return Err(Error::config("observation path must start at zero"));
        }
        Ok(ObservationRecord { y_path, zeta })
    }

    pub fn grid(&self) -> TimeGrid {
        self.y_path.grid
    }

    /// `ΔY_k = Y_{k+1} − Y_k`.
    pub fn increment(&self, k: usize) -> DVector<f64> {
        self.y_path.values.column(k + 1) - self.y_path.values.column(k)
    }
}

fn check_noise(grid: &TimeGrid, w: &NoiseDraw, dim: usize, context: &'static str) -> Result<()> {
    if w.grid != *grid {
        return Err(Error::config(format!(
            "{context}: noise grid differs from time grid"
        )));
    }
    if w.dim() != dim {
        return Err(Error::Dimension {
            context,
            expected: dim,
            got: w.dim(),
        });
    }
    Ok(())
}

/// Euler–Maruyama: `X_{k+1} = X_k + b(t_k, X_k) h + σ(t_k, X_k) ΔW_k`.
pub fn simulate_forward(model: &ModelSpec, grid: TimeGrid, w: &NoiseDraw) -> Result<Path> {
    check_noise(&grid, w, model.dim_w(), "forward noise")?;
    let d = model.dim_x();
    let h = grid.step();
    let dynamics = model.dynamics.as_ref();
    let mut values = DMatrix::zeros(d, grid.n_nodes());
    values.set_column(0, &model.x0);

    let mut x = model.x0.clone();
    let mut b = DVector::zeros(d);
    let mut sigma = DMatrix::zeros(d, model.dim_w());
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        dynamics.drift(t, &x, &mut b);
        let sigma_k = match dynamics.constant_dispersion() {
            Some(s) => s,
            None => {
                dynamics.dispersion(t, &x, &mut sigma);
                &sigma
            }
        };
        x.axpy(h, &b, 1.0);
        x.gemv(1.0, sigma_k, &w.increments.column(k), 1.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation { step: k });
        }
        values.set_column(k + 1, &x);
    }
    Ok(Path { grid, values })
}

/// `Y_{k+1} = Y_k + H_{t_k} X_k h + Δβ_k`, and `ζ = B_ζ X_T + η` with
/// `η ~ N(0, Σ_ζ)` drawn from `terminal_seed`.
pub fn simulate_observation(
    model: &ModelSpec,
    x: &Path,
    beta: &NoiseDraw,
    terminal_seed: u64,
) -> Result<ObservationRecord> {
    let grid = x.grid;
    check_noise(&grid, beta, model.dim_y(), "observation noise")?;
    if x.dim() != model.dim_x() {
        return Err(Error::Dimension {
            context: "latent path",
            expected: model.dim_x(),
            got: x.dim(),
        });
    }
    let h = grid.step();
    let dy = model.dim_y();
    let mut values = DMatrix::zeros(dy, grid.n_nodes());
    let mut y = DVector::zeros(dy);
    for k in 0..grid.n_steps() {
        let hk = model.obs_operator.at(grid.time(k));
        if hk.ncols() != x.dim() {
            return Err(Error::Dimension {
                context: "observation operator columns",
                expected: x.dim(),
                got: hk.ncols(),
            });
        }
        y.gemv(h, &hk, &x.values.column(k), 1.0);
        y += beta.increments.column(k);
        values.set_column(k + 1, &y);
    }
    let zeta = model.terminal.as_ref().map(|term| {
        let chol = term
            .cov
            .clone()
            .cholesky()
            .expect("validated at construction");
        let mut rng = rng_from_seed(terminal_seed);
        let mut z = DMatrix::zeros(term.dim(), 1);
        fill_normal(&mut rng, 1.0, &mut z);
        &term.b * x.last() + chol.l() * z.column(0)
    });
    Ok(ObservationRecord {
        y_path: Path { grid, values },
        zeta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearDynamics;

    fn scalar_model(b: f64, s: f64, x0: f64) -> ModelSpec {
        let dynamics = LinearDynamics::new(
            DMatrix::from_element(1, 1, b),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, s),
        )
        .unwrap();
        ModelSpec::new(
            "scalar",
            Arc::new(dynamics),
            DMatrix::from_element(1, 1, 1.0).into(),
            None,
            DVector::from_element(1, x0),
        )
        .unwrap()
    }

    #[test]
    fn grid_last_node_is_exact() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        assert_eq!(g.time(7), 0.3);
        assert!(g
            .times()
            .collect::<Vec<_>>()
            .windows(2)
            .all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 3).is_err());
    }

    #[test]
    fn noise_is_deterministic_given_seed() {
        let g = TimeGrid::new(1.0, 50).unwrap();
        assert_eq!(draw_noise(g, 3, 7), draw_noise(g, 3, 7));
        assert_ne!(draw_noise(g, 3, 7), draw_noise(g, 3, 8));
        assert_eq!(draw_noise(g, 1, 1).increments.nrows(), 1);
    }

    #[test]
    fn noise_variance_matches_step() {
        // 1000 N(0, h) samples: the sample variance has relative standard
        // error sqrt(2/999) ≈ 0.0447, so 3 standard errors is ±13.4 %.
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let w = draw_noise(g, 4, 2024);
        for row in w.increments.row_iter() {
            let var = row.iter().map(|v| v * v).sum::<f64>() / 1000.0;
            let se = 0.001 * (2.0f64 / 999.0).sqrt();
            assert!((var - 0.001).abs() < 3.0 * se, "variance {var}");
        }
    }

    #[test]
    fn brownian_motion_is_cumulative_noise() {
        let g = TimeGrid::new(1.0, 100).unwrap();
        let model = scalar_model(0.0, 1.0, 0.0);
        let w = draw_noise(g, 1, 3);
        let x = simulate_forward(&model, g, &w).unwrap();
        let bm = w.to_path();
        for k in 0..=100 {
            assert!((x.values[(0, k)] - bm.values[(0, k)]).abs() < 1e-14);
        }
    }

    #[test]
    fn deterministic_decay_matches_euler_recursion() {
        let g = TimeGrid::new(1.0, 1000).unwrap();
        let model = scalar_model(-1.0, 0.0, 1.0);
        let x = simulate_forward(&model, g, &NoiseDraw::zeros(g, 1)).unwrap();
        let exact = (1.0f64 - 0.001).powi(1000);
        assert!((x.last()[0] - exact).abs() < 1e-12);
        assert!((x.last()[0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn observation_mean_is_linear_in_time() {
        let g = TimeGrid::new(1.0, 200).unwrap();
        let model =
            scalar_model(0.0, 0.0, 0.7).with_obs_operator(DMatrix::from_element(1, 1, 5.0).into());
        let x = simulate_forward(&model, g, &NoiseDraw::zeros(g, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &NoiseDraw::zeros(g, 1), 0).unwrap();
        for k in 0..=200 {
            assert!((obs.y_path.values[(0, k)] - 5.0 * 0.7 * g.time(k)).abs() < 1e-12);
        }
        assert!(obs.zeta.is_none());
    }

    #[test]
    fn zero_observation_operator_gives_brownian_path() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let model = scalar_model(-1.0, 1.0, 1.0).with_obs_operator(DMatrix::zeros(1, 1).into());
        let x = simulate_forward(&model, g, &draw_noise(g, 1, 1)).unwrap();
        let beta = draw_noise(g, 1, 2);
        let obs = simulate_observation(&model, &x, &beta, 0).unwrap();
        assert!(
            (obs.y_path.values.clone() - beta.to_path().values)
                .abs()
                .max()
                < 1e-14
        );
    }

    #[test]
    fn observation_noise_is_additive() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let model = scalar_model(-1.0, 1.0, 1.0);
        let x = simulate_forward(&model, g, &draw_noise(g, 1, 1)).unwrap();
        let beta = draw_noise(g, 1, 2);
        let noisy = simulate_observation(&model, &x, &beta, 0).unwrap();
        let clean = simulate_observation(&model, &x, &NoiseDraw::zeros(g, 1), 0).unwrap();
        let diff = noisy.y_path.values - clean.y_path.values;
        assert!((diff - beta.to_path().values).abs().max() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let model = scalar_model(0.0, 1.0, 0.0);
        let err = simulate_forward(&model, g, &draw_noise(g, 2, 0)).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let x = Path::zeros(g, 2);
        let err = simulate_observation(&model, &x, &draw_noise(g, 1, 0), 0).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn blow_up_names_the_step() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let model = scalar_model(1e300, 0.0, 1e10);
        let err = simulate_forward(&model, g, &NoiseDraw::zeros(g, 1)).unwrap_err();
        assert!(matches!(err, Error::Simulation { step: 0 }));
    }
}
