//! wasm-bindgen bindings for the browser demo in `www/`.
//!
//! Paths cross the boundary as flat `Float64Array`s in node-major order:
//! `[x1(t0), .., xd(t0), x1(t1), ..]`.

use guided_smoother::backward_filter::{
    solve_backward, BackwardFilterSolution, FilterOptions, LinearGuide,
};
use guided_smoother::guided::GuidedSimulator;
use guided_smoother::mcmc::{run_chain, PcnConfig};
use guided_smoother::models::{build_guide, build_model};
use guided_smoother::montecarlo::{importance_estimate, path_functional};
use guided_smoother::sde::{
    derive_seed, draw_noise, simulate_forward, simulate_observation, ModelSpec, ObservationRecord,
    Path, TimeGrid,
};
use guided_smoother::Error;
use js_sys::Float64Array;
use wasm_bindgen::prelude::*;

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One simulated data set plus the backward filter of a chosen guide.
#[wasm_bindgen]
pub struct Demo {
    model: ModelSpec,
    grid: TimeGrid,
    truth: Path,
    obs: ObservationRecord,
    guide: LinearGuide,
    filter: BackwardFilterSolution,
    ess: f64,
    acceptance: f64,
}

impl Demo {
    fn simulator(&self) -> Result<GuidedSimulator<'_>, Error> {
        GuidedSimulator::new(
            &self.model,
            &self.guide,
            &self.filter,
            self.obs.zeta.as_ref(),
        )
    }

    pub fn build(
        model: &str,
        d: usize,
        steps: usize,
        t_end: f64,
        seed: u64,
    ) -> Result<Demo, Error> {
        let model = build_model(model, d)?;
        let grid = TimeGrid::new(t_end, steps)?;
        let w = draw_noise(grid, model.dim_w(), derive_seed(seed, 0));
        let beta = draw_noise(grid, model.dim_y(), derive_seed(seed, 1));
        let truth = simulate_forward(&model, grid, &w)?;
        let obs = simulate_observation(&model, &truth, &beta, derive_seed(seed, 2))?;
        let guide = build_guide(&model.name, &model)?;
        let filter = solve_backward(&guide, &model, &obs, grid, FilterOptions::default())?;
        Ok(Demo {
            model,
            grid,
            truth,
            obs,
            guide,
            filter,
            ess: f64::NAN,
            acceptance: f64::NAN,
        })
    }

    pub fn use_guide(&mut self, guide: &str) -> Result<(), Error> {
        let g = build_guide(guide, &self.model)?;
        self.filter = solve_backward(
            &g,
            &self.model,
            &self.obs,
            self.grid,
            FilterOptions::default(),
        )?;
        self.guide = g;
        Ok(())
    }

    pub fn truth_values(&self) -> &[f64] {
        self.truth.values.as_slice()
    }

    pub fn guided_values(&self, seed: u64) -> Result<Vec<f64>, Error> {
        let sim = self.simulator()?;
        let wp = sim.simulate(&draw_noise(self.grid, sim.noise_dim(), seed))?;
        Ok(wp.x_path.values.as_slice().to_vec())
    }

    pub fn is_mean(&mut self, n_paths: usize, seed: u64) -> Result<Vec<f64>, Error> {
        let est = importance_estimate(&self.simulator()?, &path_functional, n_paths, seed)?;
        self.ess = est.ess;
        Ok(est.value.as_slice().to_vec())
    }

    pub fn pcn_mean(
        &mut self,
        rho: f64,
        iters: usize,
        burn_in: usize,
        seed: u64,
    ) -> Result<Vec<f64>, Error> {
        let cfg = PcnConfig {
            rho,
            n_iters: iters,
            burn_in,
            seed,
            thin: 1,
        };
        let (summary, _) = run_chain(&self.simulator()?, &cfg, &[])?;
        self.acceptance = summary.acceptance_rate;
        Ok(summary.mean_path.values.as_slice().to_vec())
    }
}

#[wasm_bindgen]
impl Demo {
    /// Simulates a latent path and its continuous observation, then solves
    /// the backward filter for the model's default guide.
    #[wasm_bindgen(constructor)]
    pub fn new(
        model: &str,
        d: usize,
        steps: usize,
        t_end: f64,
        seed: u32,
    ) -> Result<Demo, JsError> {
        Demo::build(model, d, steps, t_end, seed as u64).map_err(js_err)
    }

    pub fn dim(&self) -> usize {
        self.model.dim_x()
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.n_nodes()
    }

    pub fn times(&self) -> Float64Array {
        let t: Vec<f64> = self.grid.times().collect();
        Float64Array::from(t.as_slice())
    }

    pub fn truth(&self) -> Float64Array {
        Float64Array::from(self.truth_values())
    }

    /// Observation path `Y`; its slope tracks `H X`.
    pub fn observations(&self) -> Float64Array {
        Float64Array::from(self.obs.y_path.values.as_slice())
    }

    /// Switches the guide (`reaction_diffusion`, `linear`, `ou` or `zero`)
    /// and re-solves the backward filter.
    pub fn set_guide(&mut self, guide: &str) -> Result<(), JsError> {
        self.use_guide(guide).map_err(js_err)
    }

    /// One guided path for the given noise seed.
    pub fn guided_path(&self, seed: u32) -> Result<Float64Array, JsError> {
        let v = self.guided_values(seed as u64).map_err(js_err)?;
        Ok(Float64Array::from(v.as_slice()))
    }

    /// Self-normalized importance-sampling estimate of the smoothing mean.
    pub fn smooth_is(&mut self, n_paths: usize, seed: u32) -> Result<Float64Array, JsError> {
        let v = self.is_mean(n_paths, seed as u64).map_err(js_err)?;
        Ok(Float64Array::from(v.as_slice()))
    }

    /// pCN estimate of the smoothing mean.
    pub fn smooth_pcn(
        &mut self,
        rho: f64,
        iters: usize,
        burn_in: usize,
        seed: u32,
    ) -> Result<Float64Array, JsError> {
        let v = self
            .pcn_mean(rho, iters, burn_in, seed as u64)
            .map_err(js_err)?;
        Ok(Float64Array::from(v.as_slice()))
    }

    /// Effective sample size of the last `smooth_is` call.
    pub fn last_ess(&self) -> f64 {
        self.ess
    }

    /// Acceptance rate of the last `smooth_pcn` call.
    pub fn last_acceptance(&self) -> f64 {
        self.acceptance
    }
}
