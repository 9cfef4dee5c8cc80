use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guided_smoother::experiments::{
    backward_to_file, build_reaction_diffusion, fit_to_dir, guided_sample_to_file, loss_windows,
    oracle_to_dir, run_pipeline, simulate_to_dir, smooth_is_to_dir, smooth_to_dir, FitSettings,
    Seeds, Stage,
};
use guided_smoother::mcmc::PcnConfig;
use guided_smoother::models::MODEL_NAMES;
use guided_smoother::Result;

#[derive(Parser)]
#[command(
    name = "guided-smoother",
    version,
    about = "Smoothing of continuously observed diffusions with guided processes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a latent path with continuous and terminal observations.
    Simulate {
        #[arg(long, default_value = "reaction_diffusion")]
        model: String,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long = "T", default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the backward filter of a linear guide.
    Backward {
        /// Registry name or `file:<theta.csv>`.
        #[arg(long)]
        guide: String,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long, default_value_t = 1e6)]
        kappa: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw guided paths and report their log-weights and endpoints.
    GuidedSample {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        filter: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// pCN Metropolis–Hastings on the driving noise.
    Smooth {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        filter: PathBuf,
        #[arg(long, default_value_t = 5000)]
        iters: usize,
        #[arg(long, default_value_t = 0.9)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        #[arg(long, default_value_t = 1)]
        thin: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Iterations whose path is written as `sample_<k>.csv`.
        #[arg(long, value_delimiter = ',')]
        keep_samples: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-normalized importance sampling of the posterior mean path.
    SmoothIs {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        filter: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kalman–RTS smoothed mean for affine models.
    Oracle {
        #[arg(long)]
        obs: PathBuf,
        /// Accepted for symmetry with `smooth-is`; not used.
        #[arg(long)]
        filter: Option<PathBuf>,
        #[arg(long)]
        n_paths: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the guide parameters with Adam.
    Fit {
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long, default_value_t = 0.01)]
        eta: f64,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reaction–diffusion study end to end.
    ReproduceRd {
        #[arg(long, value_parser = ["20", "100"])]
        d: String,
        /// Comma-separated subset of simulate,backward,smooth,smooth-is,fit,compare, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed_sim: u64,
        #[arg(long, default_value_t = 2)]
        seed_mcmc: u64,
        #[arg(long, default_value_t = 3)]
        seed_fit: u64,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            model,
            d,
            steps,
            t_end,
            seed,
            out,
        } => {
            if !MODEL_NAMES.contains(&model.as_str()) {
                log::warn!("known models: {}", MODEL_NAMES.join(", "));
            }
            simulate_to_dir(&model, d, t_end, steps, seed, &out)?;
        }
        Command::Backward {
            guide,
            obs,
            kappa,
            out,
        } => backward_to_file(&guide, &obs, kappa, &out)?,
        Command::GuidedSample {
            obs,
            filter,
            n_paths,
            seed,
            out,
        } => guided_sample_to_file(&obs, &filter, n_paths, seed, &out)?,
        Command::Smooth {
            obs,
            filter,
            iters,
            rho,
            burn_in,
            thin,
            seed,
            keep_samples,
            out,
        } => {
            let cfg = PcnConfig {
                rho,
                n_iters: iters,
                burn_in,
                seed,
                thin,
            };
            let s = smooth_to_dir(&obs, &filter, &cfg, &keep_samples, &out)?;
            println!(
                "acceptance rate {:.4}, ess proxy {:.1}",
                s.acceptance_rate, s.ess_proxy
            );
        }
        Command::SmoothIs {
            obs,
            filter,
            n_paths,
            seed,
            out,
        } => {
            let ess = smooth_is_to_dir(&obs, &filter, n_paths, seed, &out)?;
            println!("ess {ess:.1} of {n_paths}");
        }
        Command::Oracle { obs, out, .. } => {
            oracle_to_dir(&obs, &out)?;
        }
        Command::Fit {
            obs,
            d,
            eta,
            iters,
            batch,
            seed,
            out,
        } => {
            let res = fit_to_dir(
                &obs,
                d,
                FitSettings {
                    eta,
                    n_iters: iters,
                    batch,
                },
                seed,
                &out,
            )?;
            let (first, last) = loss_windows(&res.loss, 100);
            println!("negative reward: first-window mean {first:.4}, last-window mean {last:.4}");
        }
        Command::ReproduceRd {
            d,
            stages,
            workdir,
            seed_sim,
            seed_mcmc,
            seed_fit,
        } => {
            let d: usize = d.parse().expect("restricted by the parser");
            let mut scenario = build_reaction_diffusion(d)?;
            scenario.seeds = Seeds {
                sim: seed_sim,
                mcmc: seed_mcmc,
                fit: seed_fit,
            };
            let report = run_pipeline(&scenario, &Stage::parse_list(&stages)?, &workdir)?;
            if let Some(a) = report.acceptance_rate {
                println!("pCN acceptance rate {a:.4}");
            }
            if let Some(ess) = report.is_ess {
                println!("importance sampling ess {ess:.1}");
            }
            if let Some(loss) = &report.loss {
                let (first, last) = loss_windows(loss, 100);
                println!("negative reward: first-100 mean {first:.4}, last-100 mean {last:.4}");
            }
            if let Some(c) = report.comparison {
                println!(
                    "integrated l2 error: ad hoc guide {:.5}, fitted guide {:.5}",
                    c.l2_adhoc, c.l2_fit
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
