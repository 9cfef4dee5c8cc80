//! Small dense linear-algebra helpers shared by the filters and samplers.

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

/// A coefficient that is either fixed or an arbitrary function of time.
#[derive(Clone)]
pub enum TimeFn<T: Clone> {
    Constant(T),
    Varying(Arc<dyn Fn(f64) -> T + Send + Sync>),
}

impl<T: Clone> TimeFn<T> {
    pub fn varying(f: impl Fn(f64) -> T + Send + Sync + 'static) -> Self {
        TimeFn::Varying(Arc::new(f))
    }

    pub fn at(&self, t: f64) -> Cow<'_, T> {
        match self {
            TimeFn::Constant(v) => Cow::Borrowed(v),
            TimeFn::Varying(f) => Cow::Owned(f(t)),
        }
    }

    pub fn as_constant(&self) -> Option<&T> {
        match self {
            TimeFn::Constant(v) => Some(v),
            TimeFn::Varying(_) => None,
        }
    }
}

impl<T: Clone + fmt::Debug> fmt::Debug for TimeFn<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeFn::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            TimeFn::Varying(_) => f.write_str("Varying(..)"),
        }
    }
}

impl From<DMatrix<f64>> for TimeFn<DMatrix<f64>> {
    fn from(m: DMatrix<f64>) -> Self {
        TimeFn::Constant(m)
    }
}

impl From<DVector<f64>> for TimeFn<DVector<f64>> {
    fn from(v: DVector<f64>) -> Self {
        TimeFn::Constant(v)
    }
}

/// Cholesky-based factorization of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpdError {
    NotFinite,
    NotPositiveDefinite,
    IllConditioned { ratio: f64 },
}

impl fmt::Display for SpdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpdError::NotFinite => f.write_str("matrix has non-finite entries"),
            SpdError::NotPositiveDefinite => f.write_str("matrix is not positive definite"),
            SpdError::IllConditioned { ratio } => write!(
                f,
                "matrix is numerically singular (eigenvalue ratio {ratio:.3e})"
            ),
        }
    }
}

/// Smallest admissible ratio of extreme eigenvalues.
pub const MIN_EIGEN_RATIO: f64 = 1e-12;

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self, SpdError> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(SpdError::NotFinite);
        }
        let chol = m.clone().cholesky().ok_or(SpdError::NotPositiveDefinite)?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let mut inverse = chol.inverse();
        symmetrize(&mut inverse);

        // tr(P) tr(P^-1) bounds the condition number from above; only fall
        // back to an eigendecomposition when the cheap bound is inconclusive.
        let bound = 1.0 / (m.trace() * inverse.trace());
        if !(bound >= MIN_EIGEN_RATIO) {
            let eig = m.clone().symmetric_eigenvalues();
            let max = eig.max();
            let min = eig.min();
            let ratio = min / max;
            if !(min > 0.0) {
                return Err(SpdError::NotPositiveDefinite);
            }
            if ratio < MIN_EIGEN_RATIO {
                return Err(SpdError::IllConditioned { ratio });
            }
        }
        Ok(SpdFactor { inverse, log_det })
    }
}

/// Replaces `m` by `(m + m') / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Frobenius inner product `tr(a' b)`; equals `tr(a b)` for symmetric `a`.
pub fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
