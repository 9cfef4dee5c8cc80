//! Preconditioned Crank–Nicolson Metropolis–Hastings on the driving noise.
//!
//! The chain state is the vector of Brownian increments `z`; the path is its
//! image `F∘(z)` under the guided simulation. Proposals
//! `z' = ρ z + √(1−ρ²) ξ` leave the Wiener increment law invariant, so the
//! acceptance ratio only involves the guided weights.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::guided::{GuidedSimulator, WeightedPath};
use crate::sde::{derive_seed, draw_noise, fill_normal, rng_from_seed, NoiseDraw, Path, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcnConfig {
    pub rho: f64,
    pub n_iters: usize,
    pub burn_in: usize,
    pub seed: u64,
    pub thin: usize,
}

impl Default for PcnConfig {
    fn default() -> Self {
        PcnConfig {
            rho: 0.9,
            n_iters: 5000,
            burn_in: 0,
            seed: 0,
            thin: 1,
        }
    }
}

impl PcnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config(format!(
                "rho must lie in (0, 1), got {}",
                self.rho
            )));
        }
        if self.n_iters == 0 {
            return Err(Error::config("n_iters must be positive"));
        }
        if self.burn_in >= self.n_iters {
            return Err(Error::config("burn_in must be smaller than n_iters"));
        }
        if self.thin == 0 {
            return Err(Error::config("thin must be positive"));
        }
        Ok(())
    }

    pub fn retains(&self, iter: usize) -> bool {
        iter > self.burn_in && (iter - self.burn_in).is_multiple_of(self.thin)
    }
}

/// Density of the target with respect to the Wiener increment law, up to a
/// constant, together with the path it maps to.
pub trait PathTarget: Sync {
    fn grid(&self) -> TimeGrid;
    fn noise_dim(&self) -> usize;
    fn evaluate(&self, z: &NoiseDraw) -> Result<WeightedPath>;
}

impl PathTarget for GuidedSimulator<'_> {
    fn grid(&self) -> TimeGrid {
        self.grid()
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim()
    }

    fn evaluate(&self, z: &NoiseDraw) -> Result<WeightedPath> {
        self.simulate(z)
    }
}

/// Flat target: every increment vector has weight one and maps to its own
/// Brownian path. Under it the chain must sample the prior.
#[derive(Debug, Clone, Copy)]
pub struct FlatTarget {
    pub grid: TimeGrid,
    pub dim: usize,
}

impl PathTarget for FlatTarget {
    fn grid(&self) -> TimeGrid {
        self.grid
    }

    fn noise_dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, z: &NoiseDraw) -> Result<WeightedPath> {
        Ok(WeightedPath {
            x_path: z.to_path(),
            log_psi_integral: 0.0,
            log_terminal_correction: 0.0,
            total_log_weight: 0.0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChainState {
    pub z: NoiseDraw,
    pub current: WeightedPath,
    pub accept_count: usize,
    /// Proposals rejected because their weight was not finite.
    pub invalid_count: usize,
    pub iter: usize,
}

impl ChainState {
    pub fn new(target: &dyn PathTarget, z: NoiseDraw) -> Result<Self> {
        let current = target.evaluate(&z)?;
        Ok(ChainState {
            z,
            current,
            accept_count: 0,
            invalid_count: 0,
            iter: 0,
        })
    }
}

/// One pCN Metropolis–Hastings step. Returns whether the proposal was
/// accepted.
pub fn pcn_step(
    state: &mut ChainState,
    cfg: &PcnConfig,
    target: &dyn PathTarget,
    rng: &mut ChaCha8Rng,
) -> bool {
    let grid = state.z.grid;
    let mut fresh = DMatrix::zeros(state.z.dim(), grid.n_steps());
    fill_normal(rng, grid.step().sqrt(), &mut fresh);
    let scale = (1.0 - cfg.rho * cfg.rho).sqrt();
    let proposal = NoiseDraw {
        grid,
        increments: &state.z.increments * cfg.rho + fresh * scale,
        seed: state.z.seed,
    };
    let u: f64 = rng.random();
    state.iter += 1;

    let candidate = match target.evaluate(&proposal) {
        Ok(wp) if wp.total_log_weight.is_finite() => wp,
        Ok(_) | Err(Error::Guided { .. }) | Err(Error::Simulation { .. }) => {
            state.invalid_count += 1;
            log::debug!("pCN iteration {}: non-finite proposal rejected", state.iter);
            return false;
        }
        Err(e) => {
            log::warn!("pCN iteration {}: proposal failed: {e}", state.iter);
            state.invalid_count += 1;
            return false;
        }
    };
    let log_ratio = candidate.total_log_weight - state.current.total_log_weight;
    if u.ln() < log_ratio {
        state.z = proposal;
        state.current = candidate;
        state.accept_count += 1;
        true
    } else {
        false
    }
}

/// Running per-entry mean and (population) variance of retained paths.
#[derive(Debug, Clone)]
pub struct RunningMoments {
    pub count: usize,
    mean: DMatrix<f64>,
    m2: DMatrix<f64>,
}

impl RunningMoments {
    pub fn new(rows: usize, cols: usize) -> Self {
        RunningMoments {
            count: 0,
            mean: DMatrix::zeros(rows, cols),
            m2: DMatrix::zeros(rows, cols),
        }
    }

    pub fn push(&mut self, x: &DMatrix<f64>) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x.iter()) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn variance(&self) -> DMatrix<f64> {
        if self.count == 0 {
            return self.m2.clone();
        }
        self.m2.map(|v| (v / self.count as f64).max(0.0))
    }

    /// Combines two sets of moments as if all samples had been pushed into one.
    pub fn merge(&self, other: &RunningMoments) -> RunningMoments {
        if self.count == 0 {
            return other.clone();
        }
        if other.count == 0 {
            return self.clone();
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &delta * (nb / n);
        let m2 = &self.m2 + &other.m2 + delta.map(|d| d * d * na * nb / n);
        RunningMoments {
            count: self.count + other.count,
            mean,
            m2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PosteriorSummary {
    pub mean_path: Path,
    pub var_path: Path,
    pub acceptance_rate: f64,
    /// Retained samples divided by the integrated autocorrelation time of
    /// the log-weight trace.
    pub ess_proxy: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub log_weight: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct ChainDiagnostics {
    pub trace: Vec<TraceRow>,
    pub invalid_proposals: usize,
    pub moments: RunningMoments,
    /// Paths at the iterations requested through `keep`.
    pub kept_samples: Vec<(usize, Path)>,
}

/// Integrated autocorrelation time with the initial-positive-sequence cut.
pub fn integrated_autocorrelation(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 1.0;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 0.0) {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c = xs[..n - lag]
            .iter()
            .zip(&xs[lag..])
            .map(|(a, b)| (a - mean) * (b - mean))
            .sum::<f64>()
            / (n as f64 * var);
        if c <= 0.0 {
            break;
        }
        tau += 2.0 * c;
    }
    tau
}

/// Runs `cfg.n_iters` pCN steps from a prior draw, retaining every
/// `thin`-th state after `burn_in`. `keep` lists iterations whose paths are
/// returned verbatim.
pub fn run_chain(
    target: &dyn PathTarget,
    cfg: &PcnConfig,
    keep: &[usize],
) -> Result<(PosteriorSummary, ChainDiagnostics)> {
    cfg.validate()?;
    let grid = target.grid();
    let z0 = draw_noise(grid, target.noise_dim(), derive_seed(cfg.seed, 0));
    let mut state = ChainState::new(target, z0)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 1));

    let dim = state.current.x_path.dim();
    let mut moments = RunningMoments::new(dim, grid.n_nodes());
    let mut trace = Vec::with_capacity(cfg.n_iters);
    let mut retained_weights = Vec::new();
    let mut kept_samples = Vec::new();

    for _ in 0..cfg.n_iters {
        let accepted = pcn_step(&mut state, cfg, target, &mut rng);
        let iter = state.iter;
        trace.push(TraceRow {
            iter,
            log_weight: state.current.total_log_weight,
            accepted,
        });
        if cfg.retains(iter) {
            moments.push(&state.current.x_path.values);
            retained_weights.push(state.current.total_log_weight);
        }
        if keep.contains(&iter) {
            kept_samples.push((iter, state.current.x_path.clone()));
        }
    }
    if state.invalid_count > 0 {
        log::warn!(
            "{} of {} proposals had non-finite weights and were rejected",
            state.invalid_count,
            cfg.n_iters
        );
    }

    let n_samples = moments.count;
    let tau = integrated_autocorrelation(&retained_weights);
    let summary = PosteriorSummary {
        mean_path: Path::new(grid, moments.mean().clone())?,
        var_path: Path::new(grid, moments.variance())?,
        acceptance_rate: state.accept_count as f64 / cfg.n_iters as f64,
        ess_proxy: n_samples as f64 / tau,
        n_samples,
    };
    Ok((
        summary,
        ChainDiagnostics {
            trace,
            invalid_proposals: state.invalid_count,
            moments,
            kept_samples,
        },
    ))
}

/// Runs independent chains with seeds derived from `cfg.seed` and merges
/// their moments.
pub fn run_chains(
    target: &dyn PathTarget,
    cfg: &PcnConfig,
    n_chains: usize,
) -> Result<PosteriorSummary> {
    if n_chains == 0 {
        return Err(Error::config("need at least one chain"));
    }
    let run = |c: usize| {
        let cfg = PcnConfig {
            seed: derive_seed(cfg.seed, 1000 + c as u64),
            ..*cfg
        };
        run_chain(target, &cfg, &[])
    };
    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        (0..n_chains).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = (0..n_chains).map(run).collect();

    let mut moments: Option<RunningMoments> = None;
    let (mut accepted, mut ess) = (0.0, 0.0);
    for r in results {
        let (s, diag) = r?;
        accepted += s.acceptance_rate;
        ess += s.ess_proxy;
        moments = Some(match moments {
            None => diag.moments,
            Some(m) => m.merge(&diag.moments),
        });
    }
    let moments = moments.expect("n_chains > 0");
    let grid = target.grid();
    Ok(PosteriorSummary {
        mean_path: Path::new(grid, moments.mean().clone())?,
        var_path: Path::new(grid, moments.variance())?,
        acceptance_rate: accepted / n_chains as f64,
        ess_proxy: ess,
        n_samples: moments.count,
    })
}

/// Standardized moments of increments retained by a chain run against the
/// flat target.
#[derive(Debug, Clone)]
pub struct PriorPreservation {
    /// Per increment coordinate: sample mean over its standard error, using
    /// the AR(1) autocorrelation `ρ^thin` of the accepted-always chain.
    pub z_scores: Vec<f64>,
    /// Per increment coordinate: sample variance divided by `h`.
    pub var_ratios: Vec<f64>,
    pub n_samples: usize,
}

impl PriorPreservation {
    pub fn max_abs_z(&self) -> f64 {
        self.z_scores.iter().fold(0.0, |a, z| a.max(z.abs()))
    }

    pub fn var_ratio_range(&self) -> (f64, f64) {
        self.var_ratios
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v), hi.max(*v))
            })
    }

    /// `|z| ≤ 4` and variance ratios within `[0.9, 1.1]`.
    pub fn passes(&self) -> bool {
        let (lo, hi) = self.var_ratio_range();
        self.max_abs_z() <= 4.0 && lo >= 0.9 && hi <= 1.1
    }
}

/// Runs the chain on the flat target and checks that retained increments
/// keep their `N(0, h I)` law. `cfg.n_iters` is overridden to
/// `burn_in + n_samples * thin`.
pub fn pcn_preserves_prior_test(
    cfg: &PcnConfig,
    grid: TimeGrid,
    dim: usize,
    n_samples: usize,
) -> Result<PriorPreservation> {
    let cfg = PcnConfig {
        n_iters: cfg.burn_in + n_samples * cfg.thin,
        ..*cfg
    };
    cfg.validate()?;
    let target = FlatTarget { grid, dim };
    let z0 = draw_noise(grid, dim, derive_seed(cfg.seed, 0));
    let mut state = ChainState::new(&target, z0)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, 1));
    let mut moments = RunningMoments::new(dim, grid.n_steps());
    for _ in 0..cfg.n_iters {
        pcn_step(&mut state, &cfg, &target, &mut rng);
        if cfg.retains(state.iter) {
            moments.push(&state.z.increments);
        }
    }
    let h = grid.step();
    let lag = cfg.rho.powi(cfg.thin as i32);
    let tau = (1.0 + lag) / (1.0 - lag);
    let n = moments.count as f64;
    let se = (h * tau / n).sqrt();
    let var = moments.variance();
    Ok(PriorPreservation {
        z_scores: moments.mean().iter().map(|m| m / se).collect(),
        var_ratios: var.iter().map(|v| v / h).collect(),
        n_samples: moments.count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward_filter::{solve_backward, FilterOptions};
    use crate::models::{build_guide, build_model};
    use crate::sde::{simulate_forward, simulate_observation};

    #[test]
    fn config_validation() {
        let ok = PcnConfig {
            n_iters: 10,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
        for bad in [
            PcnConfig { rho: 1.0, ..ok },
            PcnConfig { rho: 0.0, ..ok },
            PcnConfig { n_iters: 0, ..ok },
            PcnConfig { burn_in: 10, ..ok },
            PcnConfig { thin: 0, ..ok },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn single_retained_sample_has_zero_variance() {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let target = FlatTarget { grid, dim: 2 };
        let cfg = PcnConfig {
            rho: 0.5,
            n_iters: 8,
            burn_in: 7,
            seed: 3,
            thin: 1,
        };
        let (summary, _) = run_chain(&target, &cfg, &[]).unwrap();
        assert_eq!(summary.n_samples, 1);
        assert_eq!(summary.var_path.values.abs().max(), 0.0);
        assert_eq!(summary.acceptance_rate, 1.0);
    }

    #[test]
    fn prior_is_preserved() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let cfg = PcnConfig {
            rho: 0.5,
            seed: 11,
            ..Default::default()
        };
        let stats = pcn_preserves_prior_test(&cfg, grid, 2, 10_000).unwrap();
        assert!(
            stats.passes(),
            "{:?} {:?}",
            stats.max_abs_z(),
            stats.var_ratio_range()
        );
    }

    #[test]
    fn prior_is_preserved_with_strong_correlation() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let cfg = PcnConfig {
            rho: 0.99,
            thin: 10,
            seed: 5,
            ..Default::default()
        };
        let stats = pcn_preserves_prior_test(&cfg, grid, 1, 10_000).unwrap();
        assert!(
            stats.passes(),
            "{:?} {:?}",
            stats.max_abs_z(),
            stats.var_ratio_range()
        );
    }

    #[test]
    fn prior_is_preserved_on_single_step() {
        let grid = TimeGrid::new(0.5, 1).unwrap();
        let cfg = PcnConfig {
            rho: 0.7,
            seed: 2,
            ..Default::default()
        };
        let stats = pcn_preserves_prior_test(&cfg, grid, 1, 10_000).unwrap();
        assert_eq!(stats.z_scores.len(), 1);
        assert!(
            stats.passes(),
            "{:?} {:?}",
            stats.max_abs_z(),
            stats.var_ratio_range()
        );
    }

    #[test]
    fn moments_merge_matches_pooled() {
        let mut a = RunningMoments::new(1, 2);
        let mut b = RunningMoments::new(1, 2);
        let mut all = RunningMoments::new(1, 2);
        for i in 0..7 {
            let x = DMatrix::from_row_slice(1, 2, &[i as f64, (i * i) as f64]);
            if i < 3 {
                a.push(&x)
            } else {
                b.push(&x)
            }
            all.push(&x);
        }
        let m = a.merge(&b);
        assert!((m.mean() - all.mean()).abs().max() < 1e-12);
        assert!((m.variance() - all.variance()).abs().max() < 1e-10);
    }

    fn linear_setup(
        d: usize,
        n: usize,
    ) -> (
        crate::sde::ModelSpec,
        crate::backward_filter::LinearGuide,
        crate::sde::ObservationRecord,
        TimeGrid,
    ) {
        let model = build_model("linear", d).unwrap();
        let guide = build_guide("linear", &model).unwrap();
        let grid = TimeGrid::new(1.0, n).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, d, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, d, 2), 3).unwrap();
        (model, guide, obs, grid)
    }

    #[test]
    fn exact_guide_accepts_everything() {
        let (model, guide, obs, grid) = linear_setup(2, 200);
        let sol = solve_backward(&guide, &model, &obs, grid, FilterOptions::default()).unwrap();
        let sim = GuidedSimulator::new(&model, &guide, &sol, obs.zeta.as_ref()).unwrap();
        let cfg = PcnConfig {
            rho: 0.9,
            n_iters: 300,
            burn_in: 0,
            seed: 1,
            thin: 1,
        };
        let (summary, diag) = run_chain(&sim, &cfg, &[5, 17]).unwrap();
        assert_eq!(summary.acceptance_rate, 1.0);
        assert!(diag.trace.iter().all(|r| r.accepted && r.log_weight == 0.0));
        assert_eq!(
            diag.kept_samples.iter().map(|s| s.0).collect::<Vec<_>>(),
            vec![5, 17]
        );
    }

    #[test]
    fn chain_is_reproducible() {
        let model = build_model("reaction_diffusion", 3).unwrap();
        let guide = build_guide("reaction_diffusion", &model).unwrap();
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let x = simulate_forward(&model, grid, &draw_noise(grid, 3, 1)).unwrap();
        let obs = simulate_observation(&model, &x, &draw_noise(grid, 3, 2), 3).unwrap();
        let sol = solve_backward(&guide, &model, &obs, grid, FilterOptions::default()).unwrap();
        let sim = GuidedSimulator::new(&model, &guide, &sol, obs.zeta.as_ref()).unwrap();
        let cfg = PcnConfig {
            rho: 0.9,
            n_iters: 100,
            burn_in: 10,
            seed: 4,
            thin: 2,
        };
        let (a, _) = run_chain(&sim, &cfg, &[]).unwrap();
        let (b, _) = run_chain(&sim, &cfg, &[]).unwrap();
        assert_eq!(a.mean_path, b.mean_path);
        assert_eq!(a.var_path, b.var_path);
        assert!(a.acceptance_rate > 0.0 && a.acceptance_rate < 1.0);
        assert!(a.var_path.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn autocorrelation_of_constant_and_iid() {
        assert_eq!(integrated_autocorrelation(&[1.0; 50]), 1.0);
        let mut rng = rng_from_seed(1);
        let xs: Vec<f64> = (0..5000).map(|_| rng.random::<f64>()).collect();
        let tau = integrated_autocorrelation(&xs);
        assert!((0.8..1.3).contains(&tau), "{tau}");
    }
}
