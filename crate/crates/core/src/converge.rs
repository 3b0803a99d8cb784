//! Value convergence under kernel and input-curve approximation.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{centered_fractional_atoms, centered_geometric_partition, discretize, format_f64, kernel_l2_error, DiscreteMeasure, KernelKind, KernelSpec};
use crate::liftlq::{assemble, min_eigenvalue, Curve, ModelCoefficients};
use crate::riccati::{solve_backward, SolverOptions};
use crate::sim::Execution;

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub n: usize,
    pub ratio: f64,
    pub kernel_error: f64,
    pub g0_error: f64,
    pub value: f64,
    /// `|V₀ⁿ − V₀^{ref}|`.
    pub value_error: f64,
    /// `value_error / (kernel_error + g0_error)`.
    pub rate_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// How `V₀^{ref}` was obtained.
    pub reference: String,
    pub reference_value: f64,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["n", "r", "kernel_error", "g0_error", "value", "value_error", "ratio"])?;
        for r in &self.rows {
            w.write_record([
                r.n.to_string(),
                format_f64(r.ratio),
                format_f64(r.kernel_error),
                format_f64(r.g0_error),
                format_f64(r.value),
                format_f64(r.value_error),
                format_f64(r.rate_ratio),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `rₙ = 1 + 2/√n`.
pub fn default_ratio(n: usize) -> f64 {
    1.0 + 2.0 / (n as f64).sqrt()
}

pub fn default_schedule(ns: &[usize]) -> Vec<(usize, f64)> {
    ns.iter().map(|&n| (n, default_ratio(n))).collect()
}

/// Rejects `rₙ ≤ 1`; warns when the schedule does not look like
/// `rₙ ↓ 1` with `n ln rₙ ↑ ∞`.
pub fn check_schedule(schedule: &[(usize, f64)]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::param("schedule", "empty"));
    }
    for &(n, r) in schedule {
        if n == 0 {
            return Err(Error::param("schedule", "n must be positive"));
        }
        if !(r > 1.0 && r.is_finite()) {
            return Err(Error::param("schedule", format!("r_n must exceed 1, got {r} at n = {n}")));
        }
    }
    for w in schedule.windows(2) {
        let ((n0, r0), (n1, r1)) = (w[0], w[1]);
        if n1 > n0 && (r1 > r0 || n1 as f64 * r1.ln() < n0 as f64 * r0.ln()) {
            log::warn!("schedule step ({n0}, {r0}) -> ({n1}, {r1}) is not decreasing in r with growing n ln r");
        }
    }
    Ok(())
}

/// Atomic approximation of `spec` with `n` cells of ratio `r`. Atomic specs are
/// returned unchanged.
pub fn approximate(spec: &KernelSpec, n: usize, ratio: f64) -> Result<DiscreteMeasure> {
    match spec.kind() {
        KernelKind::Fractional { hurst } => centered_fractional_atoms(*hurst, n, ratio),
        KernelKind::AtomicSum(m) => Ok(m.clone()),
        _ => discretize(spec, &centered_geometric_partition(n, ratio)?),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SweepOptions {
    pub solver: SolverOptions,
    pub execution: Execution,
}

fn map_rows<T, F>(items: &[T], execution: Execution, f: F) -> Result<Vec<SweepRow>>
where
    T: Sync,
    F: Fn(&T) -> Result<SweepRow> + Sync,
{
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(&f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}

fn require_invertible_q(model: &ModelCoefficients) -> Result<()> {
    let eig = min_eigenvalue(&model.q);
    if !(eig > 0.0) {
        return Err(Error::param("Q", format!("the stability sweep needs Q invertible (eigmin {eig:e})")));
    }
    Ok(())
}

fn finish(mut rows: Vec<SweepRow>, reference: String, reference_value: f64) -> SweepTable {
    for r in rows.iter_mut() {
        r.value_error = (r.value - reference_value).abs();
        let input = r.kernel_error + r.g0_error;
        r.rate_ratio = if input > 0.0 { r.value_error / input } else { f64::NAN };
    }
    SweepTable {
        rows,
        reference,
        reference_value,
    }
}

/// `V₀ⁿ = χ₀ⁿ` along the schedule; the reference is the last (finest) entry.
pub fn value_sweep(spec: &KernelSpec, model: &ModelCoefficients, schedule: &[(usize, f64)], options: SweepOptions) -> Result<SweepTable> {
    check_schedule(schedule)?;
    model.validate()?;
    require_invertible_q(model)?;
    let horizon = model.horizon;
    let rows = map_rows(schedule, options.execution, |&(n, r)| {
        let measure = approximate(spec, n, r)?;
        let kernel_error = kernel_l2_error(&measure, spec, horizon)?;
        let sys = assemble(measure, model.clone())?;
        let sol = solve_backward(&sys, options.solver)?;
        Ok(SweepRow {
            n,
            ratio: r,
            kernel_error,
            g0_error: 0.0,
            value: sol.chi0(),
            value_error: 0.0,
            rate_ratio: 0.0,
        })
    })?;
    let last = rows.last().expect("non-empty schedule");
    let reference = format!("finest schedule entry n = {}", last.n);
    let value = last.value;
    Ok(finish(rows, reference, value))
}

/// Fixed kernel, shifted input curve `g₀ + 1/n` in every coordinate; the
/// reference is the unshifted value.
pub fn g0_sweep(measure: &DiscreteMeasure, model: &ModelCoefficients, ns: &[usize], options: SweepOptions) -> Result<SweepTable> {
    model.validate()?;
    require_invertible_q(model)?;
    if ns.contains(&0) {
        return Err(Error::param("n", "must be positive"));
    }
    let (d, _, _) = model.dims();
    let horizon = model.horizon;
    let reference = solve_backward(&assemble(measure.clone(), model.clone())?, options.solver)?.chi0();
    let rows = map_rows(ns, options.execution, |&n| {
        let shift = 1.0 / n as f64;
        let g0 = model.g0.plus(&Curve::constant(&vec![shift; d]));
        let sys = assemble(measure.clone(), model.with_g0(g0))?;
        let sol = solve_backward(&sys, options.solver)?;
        Ok(SweepRow {
            n,
            ratio: f64::NAN,
            kernel_error: 0.0,
            g0_error: shift * (d as f64 * horizon).sqrt(),
            value: sol.chi0(),
            value_error: 0.0,
            rate_ratio: 0.0,
        })
    })?;
    Ok(finish(rows, "unshifted input curve".into(), reference))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub rows_used: usize,
}

/// Least squares of `log value_error` on `log(kernel_error + g0_error)` over
/// rows where both are positive.
pub fn fit_rate(rows: &[SweepRow]) -> Result<RateFit> {
    if rows.len() < 3 {
        return Err(Error::Degenerate(format!("{} row(s), need at least 3", rows.len())));
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.value_error > 0.0 && r.kernel_error + r.g0_error > 0.0)
        .map(|r| ((r.kernel_error + r.g0_error).ln(), r.value_error.ln()))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if pts.len() < 2 {
        return Err(Error::Degenerate(format!("{} usable row(s), need at least 2", pts.len())));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 1e-300 {
        return Err(Error::Degenerate("all input errors are equal".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
        rows_used: pts.len(),
    })
}

/// `m_T = ‖g₀‖² + ‖K‖²(‖β‖² + ‖γ‖² + E∫|α|²)`, norms in `L²(0,T)`.
pub fn m_t(model: &ModelCoefficients, kernel_norm: f64, control_energy: f64) -> f64 {
    let t = model.horizon;
    model.g0.l2_norm(t).powi(2) + kernel_norm.powi(2) * (model.beta.l2_norm(t).powi(2) + model.gamma.l2_norm(t).powi(2) + control_energy)
}

/// `mₙ = ‖g₀ⁿ − g₀‖² + ‖Kⁿ − K‖²(E∫|X|² + E∫|α|²)`.
pub fn m_n(g0_error: f64, kernel_error: f64, state_energy: f64, control_energy: f64) -> f64 {
    g0_error.powi(2) + kernel_error.powi(2) * (state_energy + control_energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::Scheme;

    fn row(ke: f64, ve: f64) -> SweepRow {
        SweepRow {
            n: 1,
            ratio: 2.0,
            kernel_error: ke,
            g0_error: 0.0,
            value: 0.0,
            value_error: ve,
            rate_ratio: 0.0,
        }
    }

    #[test]
    fn exact_line_has_unit_slope() {
        let rows: Vec<_> = [0.1, 0.05, 0.02, 0.01].iter().map(|&e| row(e, 3.0 * e)).collect();
        let fit = fit_rate(&rows).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-6);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        assert!(matches!(fit_rate(&[row(0.1, 0.2), row(0.1, 0.2)]), Err(Error::Degenerate(_))));
        assert!(matches!(fit_rate(&[row(0.1, 0.2), row(0.1, 0.2), row(0.1, 0.2)]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn schedule_rejects_ratio_one() {
        assert!(check_schedule(&[(4, 1.0)]).is_err());
        assert!(check_schedule(&default_schedule(&[5, 10, 20])).is_ok());
    }

    #[test]
    fn atomic_spec_has_no_approximation_error() {
        let m = DiscreteMeasure::scalar(&[(1.0, 0.3), (0.5, 2.0)]).unwrap();
        let spec = KernelSpec::atomic(m);
        let model = ModelCoefficients::intro_regulator(1.0);
        let opts = SweepOptions {
            solver: SolverOptions::new(200, Scheme::ExpMidpoint),
            execution: Execution::Sequential,
        };
        let table = value_sweep(&spec, &model, &default_schedule(&[2, 4, 8]), opts).unwrap();
        for r in &table.rows {
            assert_eq!(r.kernel_error, 0.0);
            assert_eq!(r.value_error, 0.0);
        }
    }

    #[test]
    fn singular_q_is_rejected() {
        let mut model = ModelCoefficients::intro_regulator(1.0);
        model.q[(0, 0)] = 0.0;
        let spec = KernelSpec::fractional(0.3).unwrap();
        assert!(value_sweep(&spec, &model, &default_schedule(&[4]), SweepOptions::default()).is_err());
    }
}
