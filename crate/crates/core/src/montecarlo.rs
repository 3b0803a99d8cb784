//! Cost estimation and the verification identity
//! `J(α) − χ₀ = E∫(α − 𝒯(α))ᵀ N̂ (α − 𝒯(α)) ds`.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::liftlq::{Curve, LiftedSystem};
use crate::policy::FeedbackPolicy;
use crate::sim::{simulate_lifted, Control, SimConfig, SimulationBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    /// Sample mean and standard error of the mean.
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::param("paths", "standard error needs at least two paths"));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            mean,
            se: (var / n).sqrt(),
        })
    }

    /// `|mean − target| ≤ k · se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// `Ĵ(α)` with its standard error.
pub fn estimate_cost(batch: &SimulationBatch) -> Result<Estimate> {
    Estimate::from_samples(&batch.costs)
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub pass: bool,
    pub cost: f64,
    pub chi0: f64,
}

/// Simulates `α = α* + ε` and compares `Ĵ(α) − χ₀` with the estimated penalty.
/// Passes when `|LHS − RHS| ≤ 3 (SE_LHS + SE_RHS)`.
pub fn verify_identity(system: &LiftedSystem, policy: Arc<FeedbackPolicy>, perturbation: Curve, cfg: &SimConfig) -> Result<VerificationReport> {
    let chi0 = policy.solution().chi0();
    let control = Control::Feedback {
        policy,
        perturbation: Some(perturbation),
    };
    let batch = simulate_lifted(system, &control, cfg)?;
    let cost = estimate_cost(&batch)?;
    let penalty = Estimate::from_samples(&batch.penalties)?;
    let lhs = cost.mean - chi0;
    let pass = (lhs - penalty.mean).abs() <= 3.0 * (cost.se + penalty.se);
    Ok(VerificationReport {
        lhs,
        lhs_se: cost.se,
        rhs: penalty.mean,
        rhs_se: penalty.se,
        pass,
        cost: cost.mean,
        chi0,
    })
}
