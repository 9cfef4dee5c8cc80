//! Backward information filter for a linear auxiliary model.
//!
//! For the guide `dX̃ = (B_t X̃ + m_t) dt + σ̃_t dW` observed through the same
//! `dY = H_t X dt + dβ`, the backward likelihood is the unnormalized Gaussian
//!
//! ```text
//! ṽ(t, x) = C_t (2π)^{-d/2} |P_t|^{-1/2} exp(−½ (x − ν_t)' P_t⁻¹ (x − ν_t))
//! ```
//!
//! whose parameters solve, backwards from `T`,
//!
//! ```text
//! dν     = (B ν + m) dt − P H' (dY − H ν dt)
//! dP     = (B P + P B' − ã + P H' H P) dt
//! dlog C = tr(B) dt − (H ν)' ⋄ dY + ½ |H ν|² dt
//! ```
//!
//! Every integrand is evaluated at the right end of each step, which makes the
//! backward Itô integral `⋄` a right-point sum.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdFactor, TimeFn, LN_2PI};
use crate::sde::{ModelSpec, ObservationRecord, TimeGrid};

/// Linear auxiliary model `b̃(t, x) = B_t x + m_t`, dispersion `σ̃_t`.
#[derive(Debug, Clone)]
pub struct LinearGuide {
    pub b: TimeFn<DMatrix<f64>>,
    pub m: TimeFn<DVector<f64>>,
    pub sigma: TimeFn<DMatrix<f64>>,
}

impl LinearGuide {
    pub fn constant(b: DMatrix<f64>, m: DVector<f64>, sigma: DMatrix<f64>) -> Self {
        LinearGuide {
            b: b.into(),
            m: m.into(),
            sigma: sigma.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.at(0.0).nrows()
    }

    /// `ã_t = σ̃_t σ̃_t'`.
    pub fn a_tilde(&self, t: f64) -> DMatrix<f64> {
        let s = self.sigma.at(t);
        s.as_ref() * s.transpose()
    }

    pub fn drift(&self, t: f64, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.copy_from(self.m.at(t).as_ref());
        out.gemv(1.0, self.b.at(t).as_ref(), x, 1.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    /// Terminal covariance `κ I` used when there is no terminal observation.
    pub kappa: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions { kappa: 1e6 }
    }
}

/// Terminal condition `(ν_T, P_T)` and whether `ṽ(T, ·)` coincides with the
/// terminal likelihood `N(ζ; B_ζ x, Σ_ζ)` as a function of `x`.
#[derive(Debug, Clone)]
pub struct TerminalCondition {
    pub nu: DVector<f64>,
    pub p: DMatrix<f64>,
    pub matches_likelihood: bool,
}

impl TerminalCondition {
    pub fn new(model: &ModelSpec, obs: &ObservationRecord, opts: FilterOptions) -> Result<Self> {
        let d = model.dim_x();
        match (&model.terminal, &obs.zeta) {
            (Some(term), Some(zeta)) => {
                if term.dim() != d {
                    return Err(Error::Dimension {
                        context: "terminal observation (must match state dimension)",
                        expected: d,
                        got: term.dim(),
                    });
                }
                if zeta.len() != term.dim() {
                    return Err(Error::Dimension {
                        context: "terminal observation value",
                        expected: term.dim(),
                        got: zeta.len(),
                    });
                }
                Ok(TerminalCondition {
                    nu: term.b.transpose() * zeta,
                    p: term.cov.clone(),
                    matches_likelihood: term.b == DMatrix::identity(d, d),
                })
            }
            _ => {
                if !(opts.kappa > 0.0 && opts.kappa.is_finite()) {
                    return Err(Error::config(format!(
                        "kappa must be positive, got {}",
                        opts.kappa
                    )));
                }
                Ok(TerminalCondition {
                    nu: DVector::zeros(d),
                    p: DMatrix::identity(d, d) * opts.kappa,
                    matches_likelihood: false,
                })
            }
        }
    }
}

/// Grid-sampled `(ν, P, log C)` with cached `P⁻¹` and `log |P|`.
#[derive(Debug, Clone)]
pub struct BackwardFilterSolution {
    pub grid: TimeGrid,
    pub nu: Vec<DVector<f64>>,
    pub p: Vec<DMatrix<f64>>,
    pub log_c: Vec<f64>,
    p_inv: Vec<DMatrix<f64>>,
    log_det_p: Vec<f64>,
    terminal_matches_likelihood: bool,
}

fn factor(p: &DMatrix<f64>, node: usize) -> Result<SpdFactor> {
    SpdFactor::new(p).map_err(|e| Error::Filter {
        node,
        reason: format!("{e}; refine the time grid"),
    })
}

impl BackwardFilterSolution {
    /// Rebuilds a solution from stored `(ν, P, log C)`, recomputing the
    /// cached inverses.
    pub fn from_parts(
        grid: TimeGrid,
        nu: Vec<DVector<f64>>,
        p: Vec<DMatrix<f64>>,
        log_c: Vec<f64>,
        terminal_matches_likelihood: bool,
    ) -> Result<Self> {
        let n = grid.n_nodes();
        if nu.len() != n || p.len() != n || log_c.len() != n {
            return Err(Error::Dimension {
                context: "filter nodes",
                expected: n,
                got: nu.len().min(p.len()).min(log_c.len()),
            });
        }
        let mut p_inv = Vec::with_capacity(n);
        let mut log_det_p = Vec::with_capacity(n);
        for (k, pk) in p.iter().enumerate() {
            let f = factor(pk, k)?;
            p_inv.push(f.inverse);
            log_det_p.push(f.log_det);
        }
        Ok(BackwardFilterSolution {
            grid,
            nu,
            p,
            log_c,
            p_inv,
            log_det_p,
            terminal_matches_likelihood,
        })
    }

    pub fn dim(&self) -> usize {
        self.nu[0].len()
    }

    pub fn p_inv(&self, k: usize) -> &DMatrix<f64> {
        &self.p_inv[k]
    }

    pub fn log_det_p(&self, k: usize) -> f64 {
        self.log_det_p[k]
    }

    /// True when `ṽ(T, ·)` equals the terminal likelihood, so the terminal
    /// likelihood ratio in the guided weight is identically one.
    pub fn terminal_matches_likelihood(&self) -> bool {
        self.terminal_matches_likelihood
    }
}

/// Solves the backward system from `T` down to `0`.
pub fn solve_backward(
    guide: &LinearGuide,
    model: &ModelSpec,
    obs: &ObservationRecord,
    grid: TimeGrid,
    opts: FilterOptions,
) -> Result<BackwardFilterSolution> {
    let d = model.dim_x();
    if guide.dim() != d {
        return Err(Error::Dimension {
            context: "guide",
            expected: d,
            got: guide.dim(),
        });
    }
    if obs.grid() != grid {
        return Err(Error::config("observation grid differs from filter grid"));
    }
    if obs.y_path.dim() != model.dim_y() {
        return Err(Error::Dimension {
            context: "observation path",
            expected: model.dim_y(),
            got: obs.y_path.dim(),
        });
    }
    let terminal = TerminalCondition::new(model, obs, opts)?;
    let n = grid.n_steps();
    let h = grid.step();

    let mut nu = vec![DVector::zeros(d); n + 1];
    let mut p = vec![DMatrix::zeros(d, d); n + 1];
    let mut log_c = vec![0.0; n + 1];
    let mut p_inv = vec![DMatrix::zeros(d, d); n + 1];
    let mut log_det_p = vec![0.0; n + 1];

    let f = factor(&terminal.p, n)?;
    nu[n] = terminal.nu;
    p[n] = terminal.p;
    p_inv[n] = f.inverse;
    log_det_p[n] = f.log_det;

    let const_h = model.obs_operator.as_constant();
    let const_gram = const_h.map(|hm| hm.transpose() * hm);

    for k in (0..n).rev() {
        let t = grid.time(k + 1);
        let b = guide.b.at(t);
        let m = guide.m.at(t);
        let a_tilde = guide.a_tilde(t);
        let hm = model.obs_operator.at(t);
        let gram = match &const_gram {
            Some(g) => std::borrow::Cow::Borrowed(g),
            None => std::borrow::Cow::Owned(hm.transpose() * hm.as_ref()),
        };
        let dy = obs.increment(k);

        let (p_next, nu_next) = (&p[k + 1], &nu[k + 1]);
        let bp = b.as_ref() * p_next;
        let pg = p_next * gram.as_ref();
        let mut dp = &bp + bp.transpose() - &a_tilde + &pg * p_next;
        symmetrize(&mut dp);
        let mut pk = p_next - dp * h;
        symmetrize(&mut pk);

        let h_nu = hm.as_ref() * nu_next;
        let drift_nu = b.as_ref() * nu_next + m.as_ref() + &pg * nu_next;
        let nuk = nu_next - drift_nu * h + p_next * (hm.transpose() * &dy);

        let lck = log_c[k + 1] - b.trace() * h + h_nu.dot(&dy) - 0.5 * h_nu.norm_squared() * h;
        if !lck.is_finite() || nuk.iter().any(|v| !v.is_finite()) {
            return Err(Error::Filter {
                node: k,
                reason: "non-finite mean or normalizing constant".into(),
            });
        }

        let f = factor(&pk, k)?;
        nu[k] = nuk;
        p[k] = pk;
        log_c[k] = lck;
        p_inv[k] = f.inverse;
        log_det_p[k] = f.log_det;
    }

    Ok(BackwardFilterSolution {
        grid,
        nu,
        p,
        log_c,
        p_inv,
        log_det_p,
        terminal_matches_likelihood: terminal.matches_likelihood,
    })
}

/// `log ṽ(t_k, x)`.
pub fn eval_log_vtilde(sol: &BackwardFilterSolution, k: usize, x: &DVector<f64>) -> f64 {
    let r = x - &sol.nu[k];
    let quad = r.dot(&(sol.p_inv(k) * &r));
    sol.log_c[k] - 0.5 * (sol.dim() as f64 * LN_2PI + sol.log_det_p(k) + quad)
}

/// `∇_x log ṽ(t_k, x) = P_k⁻¹ (ν_k − x)`.
pub fn grad_log_vtilde(sol: &BackwardFilterSolution, k: usize, x: &DVector<f64>) -> DVector<f64> {
    sol.p_inv(k) * (&sol.nu[k] - x)
}

/// Guiding control `u∘(t_k, x) = σ(t_k, x)' P_k⁻¹ (ν_k − x)`.
pub fn control(
    sol: &BackwardFilterSolution,
    model: &ModelSpec,
    k: usize,
    x: &DVector<f64>,
) -> DVector<f64> {
    let grad = grad_log_vtilde(sol, k, x);
    match model.dynamics.constant_dispersion() {
        Some(s) => s.tr_mul(&grad),
        None => {
            let mut s = DMatrix::zeros(model.dim_x(), model.dim_w());
            model.dynamics.dispersion(sol.grid.time(k), x, &mut s);
            s.tr_mul(&grad)
        }
    }
}
