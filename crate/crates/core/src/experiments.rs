//! File-level operations behind each command, the reaction–diffusion
//! scenario, and the staged pipeline that chains them through a work
//! directory.

use std::path::{Path as FsPath, PathBuf};

use serde_json::{json, Map, Value};

use crate::backward_filter::{solve_backward, FilterOptions, LinearGuide};
use crate::error::{Error, Result};
use crate::guided::GuidedSimulator;
use crate::io::{
    ensure_dir, fmt_num, load_observation, read_filter, read_json, read_path, read_vector,
    resolve_guide, save_observation, timestamp, write_filter, write_json, write_matrix, write_path,
    write_table, write_vector, ObservationData, ObservationMeta, VERSION,
};
use crate::mcmc::{run_chain, PcnConfig, PosteriorSummary};
use crate::models::{build_guide, build_model};
use crate::montecarlo::{importance_estimate, kalman_rts_oracle, path_functional, unflatten_path};
use crate::sde::{
    derive_seed, draw_noise, simulate_forward, simulate_observation, ModelSpec, Path, TimeGrid,
};
use crate::variational::{fit_guide, AdamState, FitConfig, FitResult, GuideParams};

/// Simulates a latent path and its observations into `out`
/// (`x.csv`, `y.csv`, `zeta.csv`, `meta.json`).
pub fn simulate_to_dir(
    model_name: &str,
    d: usize,
    t_end: f64,
    steps: usize,
    seed: u64,
    out: &FsPath,
) -> Result<ObservationData> {
    let model = build_model(model_name, d)?;
    let grid = TimeGrid::new(t_end, steps)?;
    let x = simulate_forward(
        &model,
        grid,
        &draw_noise(grid, model.dim_w(), derive_seed(seed, 0)),
    )?;
    let beta = draw_noise(grid, model.dim_y(), derive_seed(seed, 1));
    let obs = simulate_observation(&model, &x, &beta, derive_seed(seed, 2))?;
    let mut seeds = Map::new();
    seeds.insert("sim".into(), json!(seed));
    let meta = ObservationMeta {
        model: model_name.to_string(),
        d,
        t_end,
        steps,
        seeds,
        parameters: model_parameters(&model),
        version: VERSION.into(),
        timestamp: timestamp(),
    };
    save_observation(out, &meta, &x, &obs)?;
    Ok(ObservationData {
        meta,
        model,
        grid,
        obs,
        truth: Some(x),
    })
}

fn model_parameters(model: &ModelSpec) -> Value {
    let terminal = model.terminal.as_ref().map(|t| {
        json!({ "B_zeta_is_identity": t.b == nalgebra::DMatrix::identity(t.b.nrows(), t.b.ncols()),
                "Sigma_zeta_diag": t.cov.diagonal().as_slice() })
    });
    json!({
        "x0": model.x0.as_slice(),
        "H_diag": model.obs_operator.at(0.0).diagonal().as_slice(),
        "terminal": terminal,
    })
}

/// Solves the backward filter for `guide_spec` (registry name or
/// `file:<theta.csv>`) and writes it with its sidecar.
pub fn backward_to_file(
    guide_spec: &str,
    obs_dir: &FsPath,
    kappa: f64,
    out: &FsPath,
) -> Result<()> {
    let data = load_observation(obs_dir)?;
    let guide = resolve_guide(guide_spec, &data.model)?;
    let opts = FilterOptions { kappa };
    let sol = solve_backward(&guide, &data.model, &data.obs, data.grid, opts)?;
    write_filter(out, &sol, guide_spec, &guide, opts)
}

/// Observation data plus a filter read from disk, checked for consistency.
pub struct SmoothingInputs {
    pub data: ObservationData,
    pub sol: crate::backward_filter::BackwardFilterSolution,
    pub guide: LinearGuide,
}

impl SmoothingInputs {
    pub fn load(obs_dir: &FsPath, filter: &FsPath) -> Result<Self> {
        let data = load_observation(obs_dir)?;
        let (sol, guide, _) = read_filter(filter)?;
        if sol.grid != data.grid {
            return Err(Error::config(format!(
                "filter {} was solved on a different grid than {}",
                filter.display(),
                obs_dir.display()
            )));
        }
        if sol.dim() != data.model.dim_x() {
            return Err(Error::Dimension {
                context: "filter state",
                expected: data.model.dim_x(),
                got: sol.dim(),
            });
        }
        Ok(SmoothingInputs { data, sol, guide })
    }

    pub fn simulator(&self) -> Result<GuidedSimulator<'_>> {
        GuidedSimulator::new(
            &self.data.model,
            &self.guide,
            &self.sol,
            self.data.obs.zeta.as_ref(),
        )
    }
}

/// Per-path weights and endpoints of `n_paths` guided paths.
pub fn guided_sample_to_file(
    obs_dir: &FsPath,
    filter: &FsPath,
    n_paths: usize,
    seed: u64,
    out: &FsPath,
) -> Result<()> {
    if n_paths == 0 {
        return Err(Error::config("n_paths must be positive"));
    }
    let inputs = SmoothingInputs::load(obs_dir, filter)?;
    let sim = inputs.simulator()?;
    let d = inputs.data.model.dim_x();
    let grid = inputs.data.grid;
    let dim_w = inputs.data.model.dim_w();
    let run = |i: usize| {
        let w = draw_noise(grid, dim_w, derive_seed(seed, i as u64));
        let mut row = vec![i.to_string()];
        match sim.simulate(&w) {
            Ok(wp) => {
                row.push(fmt_num(wp.log_psi_integral));
                row.push(fmt_num(wp.log_terminal_correction));
                row.push(fmt_num(wp.total_log_weight));
                row.extend(wp.x_path.last().iter().map(|v| fmt_num(*v)));
            }
            Err(e) => {
                log::warn!("path {i}: {e}");
                row.extend(std::iter::repeat_n("nan".to_string(), 3 + d));
            }
        }
        row
    };
    let rows = par_map(n_paths, run);
    let mut header: Vec<String> = [
        "path",
        "log_psi_integral",
        "log_terminal_correction",
        "total_log_weight",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=d).map(|i| format!("xT{i}")));
    write_table(out, &header, rows)
}

fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// pCN chain; writes `mean.csv`, `var.csv`, `trace.csv`, `sample_<k>.csv`
/// and `meta.json`.
pub fn smooth_to_dir(
    obs_dir: &FsPath,
    filter: &FsPath,
    cfg: &PcnConfig,
    keep: &[usize],
    out: &FsPath,
) -> Result<PosteriorSummary> {
    let inputs = SmoothingInputs::load(obs_dir, filter)?;
    let sim = inputs.simulator()?;
    let (summary, diag) = run_chain(&sim, cfg, keep)?;
    ensure_dir(out)?;
    write_path(&out.join("mean.csv"), &summary.mean_path, "x")?;
    write_path(&out.join("var.csv"), &summary.var_path, "x")?;
    write_table(
        &out.join("trace.csv"),
        &["iter".into(), "log_weight".into(), "accepted".into()],
        diag.trace.iter().map(|r| {
            vec![
                r.iter.to_string(),
                fmt_num(r.log_weight),
                u8::from(r.accepted).to_string(),
            ]
        }),
    )?;
    for (k, path) in &diag.kept_samples {
        write_path(&out.join(format!("sample_{k}.csv")), path, "x")?;
    }
    write_json(
        &out.join("meta.json"),
        &json!({
            "rho": cfg.rho,
            "iters": cfg.n_iters,
            "burn_in": cfg.burn_in,
            "thin": cfg.thin,
            "seed": cfg.seed,
            "acceptance_rate": summary.acceptance_rate,
            "ess_proxy": summary.ess_proxy,
            "n_samples": summary.n_samples,
            "invalid_proposals": diag.invalid_proposals,
            "version": VERSION,
            "timestamp": timestamp(),
        }),
    )?;
    Ok(summary)
}

/// Importance-sampling estimate of the posterior mean path; writes
/// `estimate.csv`, `stderr.csv` and `ess.txt`.
pub fn smooth_is_to_dir(
    obs_dir: &FsPath,
    filter: &FsPath,
    n_paths: usize,
    seed: u64,
    out: &FsPath,
) -> Result<f64> {
    let inputs = SmoothingInputs::load(obs_dir, filter)?;
    let sim = inputs.simulator()?;
    let est = importance_estimate(&sim, &path_functional, n_paths, seed)?;
    let grid = inputs.data.grid;
    let d = inputs.data.model.dim_x();
    ensure_dir(out)?;
    write_path(
        &out.join("estimate.csv"),
        &unflatten_path(grid, d, &est.value)?,
        "x",
    )?;
    write_path(
        &out.join("stderr.csv"),
        &unflatten_path(grid, d, &est.std_error)?,
        "x",
    )?;
    std::fs::write(out.join("ess.txt"), fmt_num(est.ess) + "\n")?;
    if est.n_invalid > 0 {
        log::warn!(
            "{} of {} paths had non-finite weights",
            est.n_invalid,
            est.n_paths
        );
    }
    Ok(est.ess)
}

/// Kalman–RTS smoothed mean of an affine model; writes `kalman_mean.csv`.
pub fn oracle_to_dir(obs_dir: &FsPath, out: &FsPath) -> Result<Path> {
    let data = load_observation(obs_dir)?;
    let ks = kalman_rts_oracle(&data.model, &data.obs)?;
    ensure_dir(out)?;
    write_path(&out.join("kalman_mean.csv"), &ks.smoothed_mean, "x")?;
    Ok(ks.smoothed_mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSettings {
    pub eta: f64,
    pub n_iters: usize,
    pub batch: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            eta: 0.01,
            n_iters: 2000,
            batch: 1,
        }
    }
}

/// Adam fit of the guide from `θ = 0`; writes `theta.csv`, `loss.csv`,
/// `B_star.csv`, `m_star.csv`, `meta.json`.
pub fn fit_to_dir(
    obs_dir: &FsPath,
    d: usize,
    settings: FitSettings,
    seed: u64,
    out: &FsPath,
) -> Result<FitResult> {
    let data = load_observation(obs_dir)?;
    if data.model.dim_x() != d {
        return Err(Error::Dimension {
            context: "fit dimension vs observations",
            expected: data.model.dim_x(),
            got: d,
        });
    }
    let init = GuideParams::zeros(d);
    let adam = AdamState::new(settings.eta, init.theta.len());
    let cfg = FitConfig {
        n_iters: settings.n_iters,
        batch: settings.batch,
        seed,
    };
    let started = timestamp();
    let res = fit_guide(
        &data.model,
        &data.obs,
        data.grid,
        init,
        adam,
        cfg,
        |i, loss| {
            if (i + 1) % 100 == 0 {
                log::info!("fit iteration {}: negative reward {loss:.4}", i + 1);
            }
        },
    )?;
    ensure_dir(out)?;
    write_vector(&out.join("theta.csv"), "theta", &res.params.theta)?;
    write_table(
        &out.join("loss.csv"),
        &["iter".into(), "loss".into()],
        res.loss
            .iter()
            .enumerate()
            .map(|(i, l)| vec![(i + 1).to_string(), fmt_num(*l)]),
    )?;
    write_matrix(&out.join("B_star.csv"), &res.params.b())?;
    write_vector(&out.join("m_star.csv"), "m", &res.params.m())?;
    write_json(
        &out.join("meta.json"),
        &json!({
            "eta": settings.eta,
            "iters": settings.n_iters,
            "batch": settings.batch,
            "seed": seed,
            "invalid_samples": res.invalid_samples,
            "version": VERSION,
            "timestamps": { "start": started, "end": timestamp() },
        }),
    )?;
    Ok(res)
}

/// `(Σ_k |e_k|² h)^{1/2}` over the left nodes of the grid.
pub fn integrated_l2(a: &Path, b: &Path) -> f64 {
    let h = a.grid.step();
    (0..a.grid.n_steps())
        .map(|k| (a.values.column(k) - b.values.column(k)).norm_squared() * h)
        .sum::<f64>()
        .sqrt()
}

/// Plain average of guided paths (no reweighting).
pub fn guided_mean(inputs: &SmoothingInputs, n_paths: usize, seed: u64) -> Result<Path> {
    let sim = inputs.simulator()?;
    let grid = inputs.data.grid;
    let dim_w = inputs.data.model.dim_w();
    let paths = par_map(n_paths, |i| {
        sim.simulate(&draw_noise(grid, dim_w, derive_seed(seed, i as u64)))
            .map(|wp| wp.x_path.values)
    });
    let mut sum = nalgebra::DMatrix::zeros(inputs.data.model.dim_x(), grid.n_nodes());
    let mut count = 0usize;
    for p in paths {
        match p {
            Ok(v) => {
                sum += v;
                count += 1;
            }
            Err(e) => log::warn!("guided path skipped: {e}"),
        }
    }
    if count == 0 {
        return Err(Error::Estimation("every guided path failed".into()));
    }
    Path::new(grid, sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub l2_adhoc: f64,
    pub l2_fit: f64,
}

/// Compares the reference mean `mu_star` with the guided means under the
/// ad hoc filter and under the fitted one; writes the means, the error
/// fields `|μ⋆ − μ|` and `summary.json`.
pub fn compare_to_dir(
    obs_dir: &FsPath,
    mu_star_file: &FsPath,
    adhoc_filter: &FsPath,
    fitted_filter: &FsPath,
    n_paths: usize,
    seed: u64,
    out: &FsPath,
) -> Result<Comparison> {
    let adhoc = SmoothingInputs::load(obs_dir, adhoc_filter)?;
    let fitted = SmoothingInputs::load(obs_dir, fitted_filter)?;
    let mu_star = read_path(mu_star_file, adhoc.data.grid)?;
    // common random numbers for both guides
    let mu_adhoc = guided_mean(&adhoc, n_paths, seed)?;
    let mu_fit = guided_mean(&fitted, n_paths, seed)?;
    let err = |m: &Path| Path::new(m.grid, (&mu_star.values - &m.values).abs());
    ensure_dir(out)?;
    write_path(&out.join("mu_star.csv"), &mu_star, "x")?;
    write_path(&out.join("mu_adhoc.csv"), &mu_adhoc, "x")?;
    write_path(&out.join("mu_fit.csv"), &mu_fit, "x")?;
    write_path(&out.join("err_adhoc.csv"), &err(&mu_adhoc)?, "x")?;
    write_path(&out.join("err_fit.csv"), &err(&mu_fit)?, "x")?;
    let cmp = Comparison {
        l2_adhoc: integrated_l2(&mu_star, &mu_adhoc),
        l2_fit: integrated_l2(&mu_star, &mu_fit),
    };
    write_table(
        &out.join("summary.csv"),
        &["l2_adhoc".into(), "l2_fit".into()],
        [vec![fmt_num(cmp.l2_adhoc), fmt_num(cmp.l2_fit)]],
    )?;
    Ok(cmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub sim: u64,
    pub mcmc: u64,
    pub fit: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            sim: 1,
            mcmc: 2,
            fit: 3,
        }
    }
}

/// Everything needed to run the pipeline for one configuration.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model_name: String,
    pub model: ModelSpec,
    pub guide_name: String,
    pub guide: LinearGuide,
    pub grid: TimeGrid,
    pub seeds: Seeds,
    pub pcn: PcnConfig,
    pub fit: Option<FitSettings>,
    pub kappa: f64,
    /// Paths for the importance-sampling stage.
    pub is_paths: usize,
    /// Paths per guided mean in the comparison stage.
    pub compare_paths: usize,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let d = self.model.dim_x();
        if self.guide.dim() != d {
            return Err(Error::Dimension {
                context: "scenario guide",
                expected: d,
                got: self.guide.dim(),
            });
        }
        self.pcn.validate()?;
        if self.is_paths == 0 || self.compare_paths == 0 {
            return Err(Error::config("path counts must be positive"));
        }
        Ok(())
    }
}

/// Reaction–diffusion study: `T = 1`, `h = 0.001`, ad hoc guide `B = −5Λ`,
/// pCN with `ρ = 0.9` and 5000 retained iterations after 1000 burn-in,
/// Adam with `η = 0.01` for 2000 iterations from `θ = 0`.
pub fn build_reaction_diffusion(d: usize) -> Result<Scenario> {
    let model = build_model("reaction_diffusion", d)?;
    let guide = build_guide("reaction_diffusion", &model)?;
    Ok(Scenario {
        name: format!("reaction_diffusion_d{d}"),
        model_name: "reaction_diffusion".into(),
        model,
        guide_name: "reaction_diffusion".into(),
        guide,
        grid: TimeGrid::new(1.0, 1000)?,
        seeds: Seeds::default(),
        pcn: PcnConfig {
            rho: 0.9,
            n_iters: 6000,
            burn_in: 1000,
            seed: 0,
            thin: 1,
        },
        fit: Some(FitSettings::default()),
        kappa: FilterOptions::default().kappa,
        is_paths: 2000,
        compare_paths: 1000,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Simulate,
    Backward,
    Smooth,
    SmoothIs,
    Fit,
    Compare,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Backward,
        Stage::Smooth,
        Stage::SmoothIs,
        Stage::Fit,
        Stage::Compare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Backward => "backward",
            Stage::Smooth => "smooth",
            Stage::SmoothIs => "smooth-is",
            Stage::Fit => "fit",
            Stage::Compare => "compare",
        }
    }

    /// Comma-separated stage names, or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let stage = Stage::ALL
                .into_iter()
                .find(|st| st.name() == part)
                .ok_or_else(|| Error::Unknown {
                    kind: "stage",
                    name: part.to_string(),
                })?;
            if !out.contains(&stage) {
                out.push(stage);
            }
        }
        out.sort();
        if out.is_empty() {
            return Err(Error::config("no stages given"));
        }
        Ok(out)
    }
}

/// Artifact locations inside a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn sim(&self) -> PathBuf {
        self.root.join("sim")
    }
    pub fn filter(&self) -> PathBuf {
        self.root.join("backward").join("filter.csv")
    }
    pub fn smooth(&self) -> PathBuf {
        self.root.join("smooth")
    }
    pub fn smooth_is(&self) -> PathBuf {
        self.root.join("smooth-is")
    }
    pub fn fit(&self) -> PathBuf {
        self.root.join("fit")
    }
    pub fn compare(&self) -> PathBuf {
        self.root.join("compare")
    }
}

/// Outcome of the stages that produce numbers worth reporting.
#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub acceptance_rate: Option<f64>,
    pub is_ess: Option<f64>,
    pub loss: Option<Vec<f64>>,
    pub comparison: Option<Comparison>,
}

fn require(stage: Stage, path: &FsPath, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Pipeline {
            stage: stage.name().into(),
            reason: format!(
                "missing upstream artifact {} (run stage `{producer}`)",
                path.display()
            ),
        })
    }
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Pipeline { .. } => e,
        other => Error::Pipeline {
            stage: stage.name().into(),
            reason: other.to_string(),
        },
    })
}

/// Runs `stages` in pipeline order. Stages exchange data only through
/// files below `workdir`, and `workdir/meta.json` records the scenario,
/// seeds, versions and per-stage timestamps.
pub fn run_pipeline(
    scenario: &Scenario,
    stages: &[Stage],
    workdir: &FsPath,
) -> Result<PipelineReport> {
    scenario.validate()?;
    let wd = Workdir {
        root: workdir.to_path_buf(),
    };
    ensure_dir(workdir)?;
    let meta_path = workdir.join("meta.json");
    let mut stamps = match read_json::<Value>(&meta_path) {
        Ok(v) => v.get("timestamps").cloned().unwrap_or_else(|| json!({})),
        Err(_) => json!({}),
    };
    let d = scenario.model.dim_x();
    let mut stages = stages.to_vec();
    stages.sort();
    stages.dedup();
    let mut report = PipelineReport::default();

    for stage in stages {
        let start = timestamp();
        log::info!("stage {} started", stage.name());
        match stage {
            Stage::Simulate => {
                in_stage(
                    stage,
                    simulate_to_dir(
                        &scenario.model_name,
                        d,
                        scenario.grid.t_end(),
                        scenario.grid.n_steps(),
                        scenario.seeds.sim,
                        &wd.sim(),
                    ),
                )?;
            }
            Stage::Backward => {
                require(stage, &wd.sim().join("meta.json"), "simulate")?;
                in_stage(
                    stage,
                    backward_to_file(
                        &scenario.guide_name,
                        &wd.sim(),
                        scenario.kappa,
                        &wd.filter(),
                    ),
                )?;
            }
            Stage::Smooth => {
                require(stage, &wd.sim().join("meta.json"), "simulate")?;
                require(stage, &wd.filter(), "backward")?;
                let cfg = PcnConfig {
                    seed: scenario.seeds.mcmc,
                    ..scenario.pcn
                };
                let s = in_stage(
                    stage,
                    smooth_to_dir(&wd.sim(), &wd.filter(), &cfg, &[], &wd.smooth()),
                )?;
                report.acceptance_rate = Some(s.acceptance_rate);
            }
            Stage::SmoothIs => {
                require(stage, &wd.sim().join("meta.json"), "simulate")?;
                require(stage, &wd.filter(), "backward")?;
                let ess = in_stage(
                    stage,
                    smooth_is_to_dir(
                        &wd.sim(),
                        &wd.filter(),
                        scenario.is_paths,
                        derive_seed(scenario.seeds.mcmc, 7),
                        &wd.smooth_is(),
                    ),
                )?;
                report.is_ess = Some(ess);
            }
            Stage::Fit => {
                require(stage, &wd.sim().join("meta.json"), "simulate")?;
                let settings = scenario.fit.ok_or_else(|| Error::Pipeline {
                    stage: stage.name().into(),
                    reason: "scenario has no fit configuration".into(),
                })?;
                let res = in_stage(
                    stage,
                    fit_to_dir(&wd.sim(), d, settings, scenario.seeds.fit, &wd.fit()),
                )?;
                report.loss = Some(res.loss);
            }
            Stage::Compare => {
                require(stage, &wd.smooth().join("mean.csv"), "smooth")?;
                require(stage, &wd.fit().join("theta.csv"), "fit")?;
                require(stage, &wd.filter(), "backward")?;
                let theta = wd.fit().join("theta.csv");
                let fitted_filter = wd.compare().join("filter_fit.csv");
                let spec = format!("file:{}", theta.display());
                in_stage(
                    stage,
                    backward_to_file(&spec, &wd.sim(), scenario.kappa, &fitted_filter),
                )?;
                let cmp = in_stage(
                    stage,
                    compare_to_dir(
                        &wd.sim(),
                        &wd.smooth().join("mean.csv"),
                        &wd.filter(),
                        &fitted_filter,
                        scenario.compare_paths,
                        derive_seed(scenario.seeds.mcmc, 11),
                        &wd.compare(),
                    ),
                )?;
                report.comparison = Some(cmp);
            }
        }
        stamps[stage.name()] = json!({ "start": start, "end": timestamp() });
        write_json(
            &meta_path,
            &json!({
                "scenario": scenario.name,
                "d": d,
                "T": scenario.grid.t_end(),
                "steps": scenario.grid.n_steps(),
                "seeds": { "sim": scenario.seeds.sim, "mcmc": scenario.seeds.mcmc, "fit": scenario.seeds.fit },
                "rho": scenario.pcn.rho,
                "mcmc_iters": scenario.pcn.n_iters,
                "mcmc_burn_in": scenario.pcn.burn_in,
                "fit": scenario.fit.map(|f| json!({ "eta": f.eta, "iters": f.n_iters, "batch": f.batch })),
                "versions": { "guided-smoother": VERSION },
                "timestamps": stamps,
            }),
        )?;
    }
    Ok(report)
}

/// Reads a loss curve written by [`fit_to_dir`].
pub fn read_loss(path: &FsPath) -> Result<Vec<f64>> {
    let (_, rows) = crate::io::read_table(path)?;
    Ok(rows.iter().map(|r| r[1]).collect())
}

/// Reads `theta.csv` into guide parameters of dimension `d`.
pub fn read_theta(path: &FsPath, d: usize) -> Result<GuideParams> {
    GuideParams::new(d, read_vector(path)?)
}

/// Mean of the first and of the last `window` entries.
pub fn loss_windows(loss: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(loss.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&loss[..w]), mean(&loss[loss.len() - w..]))
}
