//! Built-in models and the name registry used by the command line.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::backward_filter::LinearGuide;
use crate::error::{Error, Result};
use crate::sde::{Dynamics, ModelSpec, TerminalObservation};

pub const MODEL_NAMES: &[&str] = &["reaction_diffusion", "linear", "ou"];
pub const GUIDE_NAMES: &[&str] = &["reaction_diffusion", "linear", "ou", "zero"];

/// Affine drift `B x + m` with constant dispersion.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    pub b: DMatrix<f64>,
    pub m: DVector<f64>,
    pub sigma: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(b: DMatrix<f64>, m: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = b.nrows();
        if b.ncols() != d || m.len() != d || sigma.nrows() != d {
            return Err(Error::Dimension {
                context: "linear dynamics",
                expected: d,
                got: m.len(),
            });
        }
        Ok(LinearDynamics { b, m, sigma })
    }

    /// The guide with the same coefficients; guided paths are then exact.
    pub fn as_guide(&self) -> LinearGuide {
        LinearGuide::constant(self.b.clone(), self.m.clone(), self.sigma.clone())
    }
}

impl Dynamics for LinearDynamics {
    fn dim_x(&self) -> usize {
        self.b.nrows()
    }

    fn dim_w(&self) -> usize {
        self.sigma.ncols()
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, out: &mut DVector<f64>) {
        // same operation order as LinearGuide::drift so that ψ vanishes exactly
        out.copy_from(&self.m);
        out.gemv(1.0, &self.b, x, 1.0);
    }

    fn dispersion(&self, _t: f64, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(&self.sigma);
    }

    fn constant_dispersion(&self) -> Option<&DMatrix<f64>> {
        Some(&self.sigma)
    }

    fn affine_parts(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        Some((&self.b, &self.m))
    }

    fn drift_jacobian(&self, _t: f64, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(&self.b);
    }
}

/// Finite-difference reaction–diffusion system
/// `dX = (−diffusion·Λ X + F(X)) dt + dW` with `F(x)_i = 2 x_i − 2 x_i³`.
#[derive(Debug, Clone)]
pub struct ReactionDiffusion {
    d: usize,
    diffusion: f64,
    identity: DMatrix<f64>,
}

impl ReactionDiffusion {
    pub fn new(d: usize, diffusion: f64) -> Self {
        ReactionDiffusion {
            d,
            diffusion,
            identity: DMatrix::identity(d, d),
        }
    }

    pub fn reaction(x: f64) -> f64 {
        2.0 * x - 2.0 * x * x * x
    }
}

impl Dynamics for ReactionDiffusion {
    fn dim_x(&self) -> usize {
        self.d
    }

    fn dim_w(&self) -> usize {
        self.d
    }

    fn drift(&self, _t: f64, x: &DVector<f64>, out: &mut DVector<f64>) {
        let d = self.d;
        let c = self.diffusion;
        for i in 0..d {
            // −Λx with Neumann ends: neighbours minus self, per neighbour
            let mut lap = 0.0;
            if i > 0 {
                lap += x[i - 1] - x[i];
            }
            if i + 1 < d {
                lap += x[i + 1] - x[i];
            }
            out[i] = c * lap + Self::reaction(x[i]);
        }
    }

    fn dispersion(&self, _t: f64, _x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(&self.identity);
    }

    fn constant_dispersion(&self) -> Option<&DMatrix<f64>> {
        Some(&self.identity)
    }

    fn drift_jacobian(&self, _t: f64, x: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.copy_from(&(laplacian(self.d) * -self.diffusion));
        for i in 0..self.d {
            out[(i, i)] += 2.0 - 6.0 * x[i] * x[i];
        }
    }
}

/// Tridiagonal Neumann Laplacian `Λ`: diagonal 2 (1 at both ends), off-diagonal −1.
pub fn laplacian(d: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(d, d);
    for i in 0..d {
        if i > 0 {
            l[(i, i)] += 1.0;
            l[(i, i - 1)] = -1.0;
        }
        if i + 1 < d {
            l[(i, i)] += 1.0;
            l[(i, i + 1)] = -1.0;
        }
    }
    l
}

fn iso_terminal(d: usize, var: f64) -> Result<TerminalObservation> {
    TerminalObservation::new(DMatrix::identity(d, d), DMatrix::identity(d, d) * var)
}

/// Reaction–diffusion model observed with `H = 5 I` and `ζ = X_1 + N(0, 0.1 I)`.
pub fn reaction_diffusion_model(d: usize) -> Result<ModelSpec> {
    if d < 2 {
        return Err(Error::config("reaction-diffusion model needs d >= 2"));
    }
    ModelSpec::new(
        "reaction_diffusion",
        Arc::new(ReactionDiffusion::new(d, 5.0)),
        (DMatrix::identity(d, d) * 5.0).into(),
        Some(iso_terminal(d, 0.1)?),
        DVector::zeros(d),
    )
}

/// Coefficients of the `linear` registry model: `B = −I − Λ/2`, `m = 1/2`, `σ = I`.
pub fn linear_dynamics(d: usize) -> LinearDynamics {
    LinearDynamics {
        b: -DMatrix::identity(d, d) - laplacian(d) * 0.5,
        m: DVector::from_element(d, 0.5),
        sigma: DMatrix::identity(d, d),
    }
}

/// Ornstein–Uhlenbeck coefficients `dX = −X dt + dW`.
pub fn ou_dynamics(d: usize) -> LinearDynamics {
    LinearDynamics {
        b: -DMatrix::identity(d, d),
        m: DVector::zeros(d),
        sigma: DMatrix::identity(d, d),
    }
}

pub fn build_model(name: &str, d: usize) -> Result<ModelSpec> {
    if d == 0 {
        return Err(Error::config("dimension must be positive"));
    }
    match name {
        "reaction_diffusion" => reaction_diffusion_model(d),
        "linear" => ModelSpec::new(
            "linear",
            Arc::new(linear_dynamics(d)),
            DMatrix::identity(d, d).into(),
            Some(iso_terminal(d, 0.1)?),
            DVector::zeros(d),
        ),
        "ou" => ModelSpec::new(
            "ou",
            Arc::new(ou_dynamics(d)),
            DMatrix::identity(d, d).into(),
            Some(iso_terminal(d, 0.1)?),
            DVector::from_element(d, 1.0),
        ),
        other => Err(Error::Unknown {
            kind: "model",
            name: other.to_string(),
        }),
    }
}

/// Named guides. `reaction_diffusion` is the ad hoc linearization
/// `B = −5Λ, m = 0, σ̃ = I`; `linear` and `ou` reproduce the models of the same
/// name; `zero` is `B = 0, m = 0` with the model's dispersion at `x0`.
pub fn build_guide(name: &str, model: &ModelSpec) -> Result<LinearGuide> {
    let d = model.dim_x();
    match name {
        "reaction_diffusion" => Ok(LinearGuide::constant(
            laplacian(d) * -5.0,
            DVector::zeros(d),
            DMatrix::identity(d, d),
        )),
        "linear" => Ok(linear_dynamics(d).as_guide()),
        "ou" => Ok(ou_dynamics(d).as_guide()),
        "zero" => {
            let mut sigma = DMatrix::zeros(d, model.dim_w());
            model.dynamics.dispersion(0.0, &model.x0, &mut sigma);
            Ok(LinearGuide::constant(
                DMatrix::zeros(d, d),
                DVector::zeros(d),
                sigma,
            ))
        }
        other => Err(Error::Unknown {
            kind: "guide",
            name: other.to_string(),
        }),
    }
}
