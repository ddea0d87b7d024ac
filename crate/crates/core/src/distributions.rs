//! Diagonal Gaussians and factorized Bernoullis on the tape.
//!
//! Parameters are either single vectors `[d]` or batches `[m×d]`; densities
//! and divergences reduce over the last axis, giving `[]` or `[m]`.

use std::f64::consts::PI;

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

/// Probabilities are kept inside `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DistError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("standard deviation must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("mean must be finite, got {0}")]
    Mean(f64),
    #[error("bernoulli observation must be 0 or 1, got {0}")]
    NonBinary(f64),
}

fn same_shape(tape: &Tape, a: Var, b: Var) -> Result<(), DistError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(DistError::Shape {
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

fn sum_last(tape: &mut Tape, x: Var) -> Result<Var, DistError> {
    let axis = tape.shape(x).len() - 1;
    Ok(tape.sum_axis(x, axis)?)
}

/// Diagonal Gaussian parameterised by means and standard deviations.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mu: Var,
    pub sigma: Var,
}

impl DiagGaussian {
    pub fn new(tape: &Tape, mu: Var, sigma: Var) -> Result<Self, DistError> {
        same_shape(tape, mu, sigma)?;
        if tape.shape(mu).is_empty() {
            return Err(DistError::Shape {
                lhs: vec![],
                rhs: vec![],
            });
        }
        if let Some(&bad) = tape
            .value(sigma)
            .data()
            .iter()
            .find(|&&s| !(s > 0.0 && s.is_finite()))
        {
            return Err(DistError::Sigma(bad));
        }
        if let Some(&bad) = tape.value(mu).data().iter().find(|m| !m.is_finite()) {
            return Err(DistError::Mean(bad));
        }
        Ok(DiagGaussian { mu, sigma })
    }

    pub fn dim(&self, tape: &Tape) -> usize {
        *tape.shape(self.mu).last().unwrap()
    }

    /// Reparameterized draw `μ + σ⊙ε` for caller-supplied standard normal `ε`.
    pub fn sample(&self, tape: &mut Tape, noise: Var) -> Result<Var, DistError> {
        same_shape(tape, self.mu, noise)?;
        let scaled = tape.mul(self.sigma, noise)?;
        Ok(tape.add(self.mu, scaled)?)
    }

    /// `Σ_i [−½ log 2π − log σ_i − (x_i − μ_i)² / (2σ_i²)]`
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var, DistError> {
        same_shape(tape, self.mu, x)?;
        let diff = tape.sub(x, self.mu)?;
        let z = tape.div(diff, self.sigma)?;
        let sq = tape.square(z)?;
        let ls = tape.log(self.sigma)?;
        let quad = tape.affine(sq, -0.5, -0.5 * (2.0 * PI).ln());
        let terms = tape.sub(quad, ls)?;
        sum_last(tape, terms)
    }

    /// `KL(self ‖ other) = Σ_i [log(σp/σq) + (σq² + (μq − μp)²)/(2σp²) − ½]`
    pub fn kl(&self, tape: &mut Tape, other: &DiagGaussian) -> Result<Var, DistError> {
        same_shape(tape, self.mu, other.mu)?;
        let ratio = tape.div(self.sigma, other.sigma)?;
        let r2 = tape.square(ratio)?;
        let dmu = tape.sub(self.mu, other.mu)?;
        let dz = tape.div(dmu, other.sigma)?;
        let d2 = tape.square(dz)?;
        let quad = tape.add(r2, d2)?;
        let quad = tape.affine(quad, 0.5, -0.5);
        let lp = tape.log(other.sigma)?;
        let lq = tape.log(self.sigma)?;
        let logs = tape.sub(lp, lq)?;
        let terms = tape.add(logs, quad)?;
        sum_last(tape, terms)
    }
}

/// Independent Bernoulli coordinates with success probabilities `p`.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliVec {
    pub p: Var,
}

impl BernoulliVec {
    /// Wraps probabilities, clamping them into `[1e-7, 1 − 1e-7]`.
    pub fn from_probs(tape: &mut Tape, p: Var) -> Self {
        BernoulliVec {
            p: tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP),
        }
    }

    pub fn from_logits(tape: &mut Tape, logits: Var) -> Result<Self, DistError> {
        let p = tape.sigmoid(logits)?;
        Ok(Self::from_probs(tape, p))
    }

    /// `Σ_i [x_i log p_i + (1 − x_i) log(1 − p_i)]`
    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var, DistError> {
        same_shape(tape, self.p, x)?;
        if let Some(&bad) = tape.value(x).data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(DistError::NonBinary(bad));
        }
        let lp = tape.log(self.p)?;
        let q = tape.affine(self.p, -1.0, 1.0);
        let lq = tape.log(q)?;
        let xc = tape.detach(x);
        let not_x = tape.affine(xc, -1.0, 1.0);
        let a = tape.mul(xc, lp)?;
        let b = tape.mul(not_x, lq)?;
        let terms = tape.add(a, b)?;
        sum_last(tape, terms)
    }

    /// `x_i = 1` if `u_i < p_i` else `0`, for uniform draws `u`.
    pub fn sample(&self, tape: &Tape, u: &Tensor) -> Result<Tensor, DistError> {
        let p = tape.value(self.p);
        if p.shape() != u.shape() {
            return Err(DistError::Shape {
                lhs: p.shape().to_vec(),
                rhs: u.shape().to_vec(),
            });
        }
        let data = p
            .data()
            .iter()
            .zip(u.data())
            .map(|(&p, &u)| if u < p { 1.0 } else { 0.0 })
            .collect();
        Ok(Tensor::new(p.shape().to_vec(), data)?)
    }
}
