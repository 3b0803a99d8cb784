//! Optimal feedback law and candidate value process built from a solved
//! Riccati system.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernels::format_f64;
use crate::liftlq::LiftedSystem;
use crate::riccati::RiccatiSolution;

/// `α*(t, Y) = −(o_t + G_t Y)` with gains frozen at the left grid point.
#[derive(Debug, Clone)]
pub struct FeedbackPolicy {
    solution: Arc<RiccatiSolution>,
    system: LiftedSystem,
    /// `N̂⁻¹ [S(θ₁)c₁ … S(θₙ)cₙ]`, one `m × n d'` matrix per grid time.
    gains: Vec<DMatrix<f64>>,
    /// `N̂⁻¹ h`.
    offsets: Vec<DVector<f64>>,
    /// Block-diagonal `diag(c₁, …, cₙ)` mapping stacked `Y` to stacked `Z = (cᵢYⁱ)`.
    weight_diag: DMatrix<f64>,
}

impl FeedbackPolicy {
    pub fn new(system: &LiftedSystem, solution: Arc<RiccatiSolution>) -> Result<Self> {
        let (d, dp, _) = system.model().dims();
        let n = system.n_atoms();
        if solution.n_atoms() != n || solution.state_dim() != d {
            return Err(Error::dims(
                "solution vs system",
                format!("{n} atoms, d = {d}"),
                format!("{} atoms, d = {}", solution.n_atoms(), solution.state_dim()),
            ));
        }
        let mut weight_diag = DMatrix::zeros(n * d, n * dp);
        for (i, a) in system.measure().atoms().iter().enumerate() {
            weight_diag.view_mut((i * d, i * dp), (d, dp)).copy_from(&a.weight);
        }
        let mut gains = Vec::with_capacity(solution.times().len());
        let mut offsets = Vec::with_capacity(solution.times().len());
        for k in 0..solution.times().len() {
            let t = solution.times()[k];
            let nhat = solution.nhat(k);
            let chol = nhat.clone().cholesky().ok_or(Error::SingularControlWeight {
                t,
                eigmin: crate::liftlq::min_eigenvalue(nhat),
            })?;
            gains.push(chol.solve(&(solution.s(k) * &weight_diag)));
            offsets.push(chol.solve(solution.h(k)));
        }
        Ok(Self {
            solution,
            system: system.clone(),
            gains,
            offsets,
            weight_diag,
        })
    }

    pub fn solution(&self) -> &RiccatiSolution {
        &self.solution
    }

    pub fn system(&self) -> &LiftedSystem {
        &self.system
    }

    /// Left grid index of `t`.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let horizon = self.solution.horizon();
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::TimeOutOfRange { t, horizon });
        }
        let steps = self.solution.steps();
        let x = t / horizon * steps as f64;
        // absorb roundoff from t = k T / M
        let k = (x + 1e-9 * (1.0 + x)).floor() as usize;
        Ok(k.min(steps))
    }

    pub fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }

    pub fn offset(&self, k: usize) -> &DVector<f64> {
        &self.offsets[k]
    }

    fn check_factors(&self, factors: &DVector<f64>) -> Result<()> {
        if factors.len() != self.system.factor_dim() {
            return Err(Error::dims("factors", self.system.factor_dim(), factors.len()));
        }
        Ok(())
    }

    /// `α*` at grid index `k`.
    pub fn control_at(&self, k: usize, factors: &DVector<f64>) -> DVector<f64> {
        -(&self.offsets[k] + &self.gains[k] * factors)
    }

    /// `α*(t, Y) = −N̂⁻¹(h + Σ S(θᵢ) cᵢ Yⁱ)`.
    pub fn control(&self, t: f64, factors: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_factors(factors)?;
        Ok(self.control_at(self.grid_index(t)?, factors))
    }

    /// `V_t = ZᵀΓZ + 2ΛᵀZ + χ` with `Zⁱ = cᵢYⁱ`.
    pub fn value_process(&self, t: f64, factors: &DVector<f64>) -> Result<f64> {
        self.check_factors(factors)?;
        let k = self.grid_index(t)?;
        let z = &self.weight_diag * factors;
        Ok(z.dot(&(self.solution.gamma(k) * &z)) + 2.0 * self.solution.lambda(k).dot(&z) + self.solution.chi(k))
    }

    /// Long-format gains table `t,r,atom,c,value`; `atom` is empty for the
    /// offset `N̂⁻¹h`.
    pub fn write_gains_csv<W: Write>(&self, writer: W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "r", "atom", "c", "value"])?;
        let (_, dp, m) = self.system.model().dims();
        let n = self.system.n_atoms();
        let last = self.gains.len() - 1;
        let mut ks: Vec<usize> = (0..=last).step_by(stride).collect();
        if *ks.last().unwrap() != last {
            ks.push(last);
        }
        for k in ks {
            let t = format_f64(self.solution.times()[k]);
            for r in 0..m {
                w.write_record([t.as_str(), &r.to_string(), "", "", &format_f64(self.offsets[k][r])])?;
                for i in 0..n {
                    for c in 0..dp {
                        w.write_record([
                            t.as_str(),
                            &r.to_string(),
                            &i.to_string(),
                            &c.to_string(),
                            &format_f64(self.gains[k][(r, i * dp + c)]),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Split of the regulator control into a Markovian feedback on `X` and a
/// memory correction on the noise factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegulatorSplit {
    /// `−N⁻¹ Γ_t(0,0) X`.
    pub feedback: f64,
    /// `−N⁻¹ Σᵢ (Γ_t(θᵢ,0) − Γ_t(0,0)) c̃ᵢ Yⁱ₂`.
    pub memory: f64,
    /// `−N⁻¹ h_t`.
    pub offset: f64,
}

impl RegulatorSplit {
    pub fn total(&self) -> f64 {
        self.feedback + self.memory + self.offset
    }
}

/// Decomposes `α*` for a system built by
/// [`row_kernel_regulator`](crate::liftlq::row_kernel_regulator).
pub fn regulator_split(policy: &FeedbackPolicy, k: usize, factors: &DVector<f64>) -> Result<RegulatorSplit> {
    let sys = policy.system();
    let model = sys.model();
    let atoms = sys.measure().atoms();
    let structured = model.dims() == (1, 2, 1)
        && model.f.iter().all(|&x| x == 0.0)
        && model.c[(0, 0)] == 1.0
        && model.c[(1, 0)] == 0.0
        && model.g0.is_zero()
        && atoms[0].node == 0.0
        && atoms[0].weight[(0, 0)] == 1.0
        && atoms[0].weight[(0, 1)] == 0.0
        && atoms[1..].iter().all(|a| a.weight[(0, 0)] == 0.0);
    if !structured {
        return Err(Error::Degenerate("system is not a row-kernel regulator".into()));
    }
    if factors.len() != sys.factor_dim() {
        return Err(Error::dims("factors", sys.factor_dim(), factors.len()));
    }
    let sol = policy.solution();
    let n_inv = 1.0 / model.n[(0, 0)];
    let g = sol.gamma(k);
    let x = (sys.stacked_weights() * factors)[0];
    let g00 = g[(0, 0)];
    let memory: f64 = atoms
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, a)| (g[(i, 0)] - g00) * a.weight[(0, 1)] * factors[2 * i + 1])
        .sum();
    Ok(RegulatorSplit {
        feedback: -n_inv * g00 * x,
        memory: -n_inv * memory,
        offset: -n_inv * sol.h(k)[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{fractional_atoms, DiscreteMeasure};
    use crate::liftlq::{assemble, row_kernel_regulator, Curve, ModelCoefficients};
    use crate::riccati::{solve_backward, Scheme, SolverOptions};

    fn policy_for(sys: &LiftedSystem, steps: usize) -> FeedbackPolicy {
        let sol = solve_backward(sys, SolverOptions::new(steps, Scheme::ExpMidpoint)).unwrap();
        FeedbackPolicy::new(sys, Arc::new(sol)).unwrap()
    }

    #[test]
    fn intro_feedback_is_minus_tanh() {
        let sys = assemble(DiscreteMeasure::dirac_origin(1), ModelCoefficients::intro_regulator(1.0)).unwrap();
        let p = policy_for(&sys, 4000);
        let y = DVector::from_element(1, 0.8);
        for &t in &[0.0, 0.25, 0.5, 0.9] {
            let a = p.control(t, &y).unwrap()[0];
            assert!((a + (1.0 - t).tanh() * 0.8).abs() < 1e-6, "t={t}: {a}");
        }
        assert_eq!(p.control(1.0, &y).unwrap()[0], 0.0);
        assert!(matches!(p.control(1.5, &y), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn value_at_origin_is_chi0_and_zero_at_horizon() {
        let model = ModelCoefficients::scalar(0.2, 1.0, 0.1, 0.3, Curve::scalar(0.2), Curve::scalar(1.0), Curve::scalar(0.4), 1.0, 1.0, 0.1, 1.0);
        let sys = assemble(DiscreteMeasure::scalar(&[(1.0, 0.5), (0.5, 4.0)]).unwrap(), model).unwrap();
        let p = policy_for(&sys, 500);
        let zero = DVector::zeros(2);
        assert_eq!(p.value_process(0.0, &zero).unwrap(), p.solution().chi0());
        let y = DVector::from_vec(vec![0.3, -1.1]);
        assert_eq!(p.value_process(1.0, &y).unwrap(), 0.0);
    }

    #[test]
    fn left_grid_lookup() {
        let sys = assemble(DiscreteMeasure::dirac_origin(1), ModelCoefficients::intro_regulator(1.0)).unwrap();
        let p = policy_for(&sys, 10);
        assert_eq!(p.grid_index(0.3).unwrap(), 3);
        assert_eq!(p.grid_index(0.349).unwrap(), 3);
        assert_eq!(p.grid_index(1.0).unwrap(), 10);
    }

    #[test]
    fn regulator_split_reassembles_control() {
        let noise = fractional_atoms(0.25, 6, 2.5).unwrap();
        let sys = row_kernel_regulator(&noise, 1.0, 1.0, 1.0).unwrap();
        let p = policy_for(&sys, 400);
        let y = DVector::from_fn(sys.factor_dim(), |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        for k in [0, 100, 399] {
            let split = regulator_split(&p, k, &y).unwrap();
            let a = p.control_at(k, &y)[0];
            assert!((split.total() - a).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }
}
