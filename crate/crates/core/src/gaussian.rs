//! Diagonal Gaussian distributions: log-density, closed-form KL against the
//! standard normal, and reparameterized sampling.
//!
//! These array-level functions are deliberately independent of the autodiff
//! tape: the objective graphs in [`crate::objectives`] rebuild the same
//! quantities out of tape ops, and the test suites compare the two routes.

use crate::error::{Error, Result};
use crate::graph::Scalar;
use ndarray::ArrayD;

/// Bounds applied to network log-variance outputs before exponentiation, so
/// any unconstrained real input yields a usable positive variance.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// A Gaussian with diagonal covariance over a tensor of any shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian<F: Scalar> {
    mean: ArrayD<F>,
    variance: ArrayD<F>,
}

impl<F: Scalar> DiagonalGaussian<F> {
    /// Builds a Gaussian, checking the shape and positivity invariants.
    pub fn new(mean: ArrayD<F>, variance: ArrayD<F>) -> Result<Self> {
        if mean.shape() != variance.shape() {
            return Err(Error::contract(format!(
                "mean shape {:?} != variance shape {:?}",
                mean.shape(),
                variance.shape()
            )));
        }
        if !variance.iter().all(|&v| v > F::zero() && v.is_finite()) {
            return Err(Error::contract(
                "variance must be elementwise positive and finite",
            ));
        }
        Ok(DiagonalGaussian { mean, variance })
    }

    /// Builds from a network's unconstrained log-variance output: the
    /// log-variance is clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]` and
    /// exponentiated, which guarantees positivity without clipping the
    /// variance itself.
    pub fn from_mean_log_var(mean: ArrayD<F>, log_var: ArrayD<F>) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::contract(format!(
                "mean shape {:?} != log-variance shape {:?}",
                mean.shape(),
                log_var.shape()
            )));
        }
        let lo = F::from_f64(LOG_VAR_MIN);
        let hi = F::from_f64(LOG_VAR_MAX);
        let variance = log_var.mapv(|lv| num_traits::clamp(lv, lo, hi).exp());
        Ok(DiagonalGaussian { mean, variance })
    }

    /// The standard normal over the given shape.
    pub fn standard(shape: &[usize]) -> Self {
        DiagonalGaussian {
            mean: ArrayD::zeros(shape),
            variance: ArrayD::from_elem(shape, F::one()),
        }
    }

    /// A Gaussian with the given mean and a constant (frozen) variance.
    pub fn with_fixed_variance(mean: ArrayD<F>, variance: F) -> Result<Self> {
        if !(variance > F::zero() && variance.is_finite()) {
            return Err(Error::contract("fixed variance must be positive"));
        }
        let var = ArrayD::from_elem(mean.raw_dim(), variance);
        Ok(DiagonalGaussian {
            mean,
            variance: var,
        })
    }

    pub fn mean(&self) -> &ArrayD<F> {
        &self.mean
    }

    pub fn variance(&self) -> &ArrayD<F> {
        &self.variance
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn into_parts(self) -> (ArrayD<F>, ArrayD<F>) {
        (self.mean, self.variance)
    }
}

/// Log-density of `x` under `g`:
/// `−½ Σ_d [ log(2π σ²_d) + (x_d − μ_d)² / σ²_d ]`.
pub fn log_prob_diag<F: Scalar>(x: &ArrayD<F>, g: &DiagonalGaussian<F>) -> Result<F> {
    if x.shape() != g.shape() {
        return Err(Error::contract(format!(
            "x shape {:?} != distribution shape {:?}",
            x.shape(),
            g.shape()
        )));
    }
    let two_pi = F::from_f64(2.0 * std::f64::consts::PI);
    let half = F::from_f64(0.5);
    let mut acc = F::zero();
    for ((&xv, &mu), &var) in x.iter().zip(g.mean.iter()).zip(g.variance.iter()) {
        let diff = xv - mu;
        acc = acc + (two_pi * var).ln() + diff * diff / var;
    }
    Ok(-half * acc)
}

/// Closed-form `KL(g ‖ N(0, I)) = −½ Σ_d (1 + log σ²_d − μ²_d − σ²_d)`.
///
/// Nonnegative for every valid `g`; zero exactly at the standard normal.
pub fn kl_to_standard_normal<F: Scalar>(g: &DiagonalGaussian<F>) -> F {
    let half = F::from_f64(0.5);
    let mut acc = F::zero();
    for (&mu, &var) in g.mean.iter().zip(g.variance.iter()) {
        acc = acc + F::one() + var.ln() - mu * mu - var;
    }
    -half * acc
}

/// Reparameterized sample `μ + ε ⊙ σ`. The standard-normal noise `ε` is
/// passed in by the caller so tests and training steps can fix it.
pub fn sample_reparam<F: Scalar>(
    g: &DiagonalGaussian<F>,
    noise: &ArrayD<F>,
) -> Result<ArrayD<F>> {
    if noise.shape() != g.shape() {
        return Err(Error::contract(format!(
            "noise shape {:?} != distribution shape {:?}",
            noise.shape(),
            g.shape()
        )));
    }
    let mut out = g.mean.clone();
    out.zip_mut_with(
        &(noise * &g.variance.mapv(F::sqrt)),
        |m, &e| *m = *m + e,
    );
    Ok(out)
}
