//! Monte Carlo simulation of the lifted factor system and of the Volterra
//! equation by direct convolution.
//!
//! Both simulators draw path `p` from its own ChaCha8 stream
//! (`seed`, stream `p`), one standard normal per step in step order, so
//! a lifted batch and a direct batch with equal `(seed, paths, steps)` share
//! their Brownian increments path by path.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{format_f64, Kernel};
use crate::liftlq::{Curve, LiftedSystem, ModelCoefficients};
use crate::policy::FeedbackPolicy;

/// Paths per work unit; results are merged block by block in index order.
pub const PATH_BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Rayon over path blocks. Runs sequentially when built without the
    /// `parallel` feature.
    #[default]
    Parallel,
}

/// Control applied along the simulation.
#[derive(Debug, Clone)]
pub enum Control {
    Zero,
    /// Deterministic open-loop path `α(t)`.
    Curve(Curve),
    /// `α*(t, Y) + ε(t)`.
    Feedback {
        policy: Arc<FeedbackPolicy>,
        perturbation: Option<Curve>,
    },
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Number of leading paths whose trajectories are kept.
    pub record: usize,
    pub execution: Execution,
}

impl SimConfig {
    pub fn new(paths: usize, steps: usize, seed: u64) -> Self {
        Self {
            paths,
            steps,
            seed,
            record: 0,
            execution: Execution::default(),
        }
    }

    pub fn record(mut self, record: usize) -> Self {
        self.record = record;
        self
    }

    pub fn execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::param("paths", "need at least one path"));
        }
        if self.steps == 0 {
            return Err(Error::param("steps", "need at least one step"));
        }
        Ok(())
    }
}

/// Trajectory of one path. `x` has `(M+1) d` entries, `alpha` has `M m`,
/// `factors` has `(M+1) n d'` (empty for the direct simulator).
#[derive(Debug, Clone, Default)]
pub struct RecordedPath {
    pub index: usize,
    pub x: Vec<f64>,
    pub alpha: Vec<f64>,
    pub factors: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationBatch {
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub state_dim: usize,
    pub control_dim: usize,
    pub factor_dim: usize,
    /// `∫ f(X, α) ds` per path, left Riemann.
    pub costs: Vec<f64>,
    /// `∫ (α − 𝒯(α))ᵀ N̂ (α − 𝒯(α)) ds` per path (zero unless the control is a
    /// perturbed feedback).
    pub penalties: Vec<f64>,
    /// `∫ |α|² ds` per path.
    pub control_energy: Vec<f64>,
    /// `∫ |X|² ds` per path.
    pub state_energy: Vec<f64>,
    /// `X_T`, row-major `paths × d`.
    pub terminal: Vec<f64>,
    /// `E|X_{t_k}|²`, `k = 0..=M`.
    pub second_moment: Vec<f64>,
    /// `E|X_{t_k}|⁴`.
    pub fourth_moment: Vec<f64>,
    pub recorded: Vec<RecordedPath>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub seed: u64,
    pub paths: usize,
    pub steps: usize,
    pub cost_mean: f64,
    pub cost_se: f64,
    pub penalty_mean: f64,
    pub terminal_mean: Vec<f64>,
    pub terminal_variance: Vec<f64>,
    pub max_second_moment: f64,
    pub max_fourth_moment: f64,
    pub mean_control_energy: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl SimulationBatch {
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        grid_time(self.horizon, self.steps, k)
    }

    pub fn summary(&self) -> BatchSummary {
        let (cost_mean, cost_se) = mean_se(&self.costs);
        let d = self.state_dim;
        let n = self.paths as f64;
        let terminal_mean: Vec<f64> = (0..d)
            .map(|r| (0..self.paths).map(|p| self.terminal[p * d + r]).sum::<f64>() / n)
            .collect();
        let terminal_variance = (0..d)
            .map(|r| {
                let m = terminal_mean[r];
                let ss: f64 = (0..self.paths).map(|p| (self.terminal[p * d + r] - m).powi(2)).sum();
                if self.paths > 1 {
                    ss / (n - 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        BatchSummary {
            seed: self.seed,
            paths: self.paths,
            steps: self.steps,
            cost_mean,
            cost_se,
            penalty_mean: self.penalties.iter().sum::<f64>() / n,
            terminal_mean,
            terminal_variance,
            max_second_moment: self.second_moment.iter().cloned().fold(0.0, f64::max),
            max_fourth_moment: self.fourth_moment.iter().cloned().fold(0.0, f64::max),
            mean_control_energy: self.control_energy.iter().sum::<f64>() / n,
        }
    }

    /// Recorded trajectories as `path,k,t,x_*,alpha_*,y_*` rows; at most
    /// `max_factors` factor coordinates are written.
    pub fn write_paths_csv<W: Write>(&self, writer: W, max_factors: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let (d, m) = (self.state_dim, self.control_dim);
        let nf = if self.recorded.iter().any(|r| !r.factors.is_empty()) {
            self.factor_dim.min(max_factors)
        } else {
            0
        };
        let mut header = vec!["path".to_string(), "k".into(), "t".into()];
        header.extend((0..d).map(|r| format!("x_{r}")));
        header.extend((0..m).map(|r| format!("alpha_{r}")));
        header.extend((0..nf).map(|r| format!("y_{r}")));
        w.write_record(&header)?;
        for rec in &self.recorded {
            for k in 0..=self.steps {
                let mut row = vec![rec.index.to_string(), k.to_string(), format_f64(self.time(k))];
                row.extend(rec.x[k * d..(k + 1) * d].iter().map(|v| format_f64(*v)));
                if k < self.steps {
                    row.extend(rec.alpha[k * m..(k + 1) * m].iter().map(|v| format_f64(*v)));
                } else {
                    row.extend((0..m).map(|_| String::new()));
                }
                let fd = self.factor_dim;
                row.extend((0..nf).map(|r| format_f64(rec.factors[k * fd + r])));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `t_k = k T / M`.
pub fn grid_time(horizon: f64, steps: usize, k: usize) -> f64 {
    horizon * k as f64 / steps as f64
}

/// Root-mean-square gap between the recorded states of two batches, over
/// shared paths and grid times.
pub fn paired_rms(a: &SimulationBatch, b: &SimulationBatch) -> Result<f64> {
    if a.steps != b.steps || a.state_dim != b.state_dim || a.recorded.len() != b.recorded.len() || a.recorded.is_empty() {
        return Err(Error::Degenerate("batches are not paired".into()));
    }
    let mut ss = 0.0;
    let mut count = 0usize;
    for (ra, rb) in a.recorded.iter().zip(&b.recorded) {
        if ra.index != rb.index {
            return Err(Error::Degenerate("batches are not paired".into()));
        }
        for (xa, xb) in ra.x.iter().zip(&rb.x) {
            ss += (xa - xb).powi(2);
            count += 1;
        }
    }
    Ok((ss / count as f64).sqrt())
}

/// Per-block accumulators, merged in block order.
#[derive(Default)]
struct BlockOut {
    costs: Vec<f64>,
    penalties: Vec<f64>,
    control_energy: Vec<f64>,
    state_energy: Vec<f64>,
    terminal: Vec<f64>,
    second: Vec<f64>,
    fourth: Vec<f64>,
    recorded: Vec<RecordedPath>,
}

impl BlockOut {
    fn new(steps: usize, len: usize) -> Self {
        Self {
            costs: Vec::with_capacity(len),
            penalties: Vec::with_capacity(len),
            control_energy: Vec::with_capacity(len),
            state_energy: Vec::with_capacity(len),
            terminal: Vec::new(),
            second: vec![0.0; steps + 1],
            fourth: vec![0.0; steps + 1],
            recorded: Vec::new(),
        }
    }
}

fn run_blocks<F>(paths: usize, execution: Execution, f: F) -> Result<Vec<BlockOut>>
where
    F: Fn(Range<usize>) -> Result<BlockOut> + Sync,
{
    let blocks: Vec<Range<usize>> = (0..paths)
        .step_by(PATH_BLOCK)
        .map(|s| s..(s + PATH_BLOCK).min(paths))
        .collect();
    match execution {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            blocks.into_par_iter().map(&f).collect()
        }
        _ => blocks.into_iter().map(f).collect(),
    }
}

#[allow(clippy::too_many_arguments)]
fn merge(blocks: Vec<BlockOut>, cfg: &SimConfig, horizon: f64, d: usize, m: usize, factor_dim: usize) -> SimulationBatch {
    let mut batch = SimulationBatch {
        seed: cfg.seed,
        paths: cfg.paths,
        steps: cfg.steps,
        horizon,
        state_dim: d,
        control_dim: m,
        factor_dim,
        costs: Vec::with_capacity(cfg.paths),
        penalties: Vec::with_capacity(cfg.paths),
        control_energy: Vec::with_capacity(cfg.paths),
        state_energy: Vec::with_capacity(cfg.paths),
        terminal: Vec::with_capacity(cfg.paths * d),
        second_moment: vec![0.0; cfg.steps + 1],
        fourth_moment: vec![0.0; cfg.steps + 1],
        recorded: Vec::new(),
    };
    for b in blocks {
        batch.costs.extend(b.costs);
        batch.penalties.extend(b.penalties);
        batch.control_energy.extend(b.control_energy);
        batch.state_energy.extend(b.state_energy);
        batch.terminal.extend(b.terminal);
        for k in 0..=cfg.steps {
            batch.second_moment[k] += b.second[k];
            batch.fourth_moment[k] += b.fourth[k];
        }
        batch.recorded.extend(b.recorded);
    }
    let n = cfg.paths as f64;
    batch.second_moment.iter_mut().for_each(|v| *v /= n);
    batch.fourth_moment.iter_mut().for_each(|v| *v /= n);
    batch
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Column-major dense matrix times slice, accumulated into `out`.
#[inline]
fn gemv_add(out: &mut [f64], a: &DMatrix<f64>, x: &[f64]) {
    let rows = a.nrows();
    for (c, &xc) in x.iter().enumerate() {
        if xc == 0.0 {
            continue;
        }
        let col = &a.as_slice()[c * rows..(c + 1) * rows];
        for (o, &v) in out.iter_mut().zip(col) {
            *o += v * xc;
        }
    }
}

#[inline]
fn quad_form(a: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let s = a.as_slice();
    let mut acc = 0.0;
    for c in 0..n {
        let mut col = 0.0;
        for r in 0..n {
            col += s[c * n + r] * x[r];
        }
        acc += col * x[c];
    }
    acc
}

/// Per-step coefficients shared by every path.
struct StepTable {
    g0: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// Open-loop control or feedback offset part `−o_k + ε_k`.
    alpha0: Vec<f64>,
    /// Feedback gains `−G_k` (column-major `m × n d'`), empty for open loop.
    gains: Vec<DMatrix<f64>>,
    /// `εᵀ N̂ ε Δ` per step.
    penalty: Vec<f64>,
}

fn check_curve(name: &'static str, curve: &Curve, dim: usize) -> Result<()> {
    if curve.dim() != dim {
        return Err(Error::dims(name, dim, curve.dim()));
    }
    Ok(())
}

fn step_table(model: &ModelCoefficients, control: &Control, steps: usize, shifted: bool, factor_dim: usize) -> Result<StepTable> {
    let (d, dp, m) = model.dims();
    let horizon = model.horizon;
    let dt = horizon / steps as f64;
    let mut table = StepTable {
        g0: Vec::with_capacity((steps + 1) * d),
        beta: Vec::with_capacity(steps * dp),
        gamma: Vec::with_capacity(steps * dp),
        alpha0: Vec::with_capacity(steps * m),
        gains: Vec::new(),
        penalty: vec![0.0; steps],
    };
    for k in 0..=steps {
        table.g0.extend(model.g0.eval(grid_time(horizon, steps, k)).iter());
    }
    for k in 0..steps {
        let t = grid_time(horizon, steps, k);
        if shifted {
            table.beta.extend(model.beta_tilde(t).iter());
            table.gamma.extend(model.gamma_tilde(t).iter());
        } else {
            table.beta.extend(model.beta.eval(t).iter());
            table.gamma.extend(model.gamma.eval(t).iter());
        }
    }
    match control {
        Control::Zero => table.alpha0 = vec![0.0; steps * m],
        Control::Curve(c) => {
            check_curve("control curve", c, m)?;
            for k in 0..steps {
                table.alpha0.extend(c.eval(grid_time(horizon, steps, k)).iter());
            }
        }
        Control::Feedback { policy, perturbation } => {
            if policy.system().factor_dim() != factor_dim || policy.system().model().dims() != (d, dp, m) {
                return Err(Error::dims("policy vs system", factor_dim, policy.system().factor_dim()));
            }
            if (policy.solution().horizon() - horizon).abs() > 1e-12 * horizon {
                return Err(Error::param("policy", "horizon differs from the model horizon"));
            }
            if let Some(eps) = perturbation {
                check_curve("perturbation", eps, m)?;
            }
            for k in 0..steps {
                let t = grid_time(horizon, steps, k);
                let g = policy.grid_index(t)?;
                let eps = perturbation.as_ref().map(|c| c.eval(t)).unwrap_or_else(|| DVector::zeros(m));
                let a0 = -policy.offset(g) + &eps;
                table.alpha0.extend(a0.iter());
                table.gains.push(-policy.gain(g));
                table.penalty[k] = eps.dot(&(policy.solution().nhat(g) * &eps)) * dt;
            }
        }
    }
    Ok(table)
}

/// Euler scheme on the lifted factors:
/// `Yⁱ ← e^{−θᵢΔ}(Yⁱ + b̃Δ + σ̃ΔW)` with `b̃ = β̃ + B X̄ + Cα`,
/// `σ̃ = γ̃ + D X̄ + Fα`, and `X = g₀ + Σ cⱼYʲ`.
pub fn simulate_lifted(system: &LiftedSystem, control: &Control, cfg: &SimConfig) -> Result<SimulationBatch> {
    cfg.validate()?;
    let model = system.model();
    let (d, dp, m) = model.dims();
    let nf = system.factor_dim();
    let horizon = model.horizon;
    let steps = cfg.steps;
    let dt = horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let table = step_table(model, control, steps, true, nf)?;
    let weights = system.stacked_weights();
    let decay: Vec<f64> = system
        .nodes()
        .iter()
        .flat_map(|&th| std::iter::repeat_n((-th * dt).exp(), dp))
        .collect();
    let feedback = !table.gains.is_empty();

    let blocks = run_blocks(cfg.paths, cfg.execution, |range| {
        let mut out = BlockOut::new(steps, range.len());
        let mut y = vec![0.0; nf];
        let mut xbar = vec![0.0; d];
        let mut x = vec![0.0; d];
        let mut alpha = vec![0.0; m];
        let mut drift = vec![0.0; dp];
        let mut diff = vec![0.0; dp];
        for p in range {
            let mut rng = path_rng(cfg.seed, p);
            y.iter_mut().for_each(|v| *v = 0.0);
            let keep = p < cfg.record;
            let mut rec = RecordedPath {
                index: p,
                ..Default::default()
            };
            if keep {
                rec.x.reserve((steps + 1) * d);
                rec.alpha.reserve(steps * m);
                rec.factors.reserve((steps + 1) * nf);
            }
            let (mut cost, mut penalty, mut a_energy, mut x_energy) = (0.0, 0.0, 0.0, 0.0);
            for k in 0..=steps {
                xbar.iter_mut().for_each(|v| *v = 0.0);
                gemv_add(&mut xbar, weights, &y);
                for r in 0..d {
                    x[r] = table.g0[k * d + r] + xbar[r];
                }
                let x2: f64 = x.iter().map(|v| v * v).sum();
                if !x2.is_finite() {
                    return Err(Error::NonFinite { step: k });
                }
                out.second[k] += x2;
                out.fourth[k] += x2 * x2;
                if keep {
                    rec.x.extend_from_slice(&x);
                    rec.factors.extend_from_slice(&y);
                }
                if k == steps {
                    out.terminal.extend_from_slice(&x);
                    break;
                }
                alpha.copy_from_slice(&table.alpha0[k * m..(k + 1) * m]);
                if feedback {
                    gemv_add(&mut alpha, &table.gains[k], &y);
                }
                let a2: f64 = alpha.iter().map(|v| v * v).sum();
                cost += (quad_form(&model.q, &x) + quad_form(&model.n, &alpha) + 2.0 * model.l.as_slice().iter().zip(&x).map(|(l, v)| l * v).sum::<f64>()) * dt;
                penalty += table.penalty[k];
                a_energy += a2 * dt;
                x_energy += x2 * dt;
                if keep {
                    rec.alpha.extend_from_slice(&alpha);
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                let dw = sqrt_dt * z;
                drift.copy_from_slice(&table.beta[k * dp..(k + 1) * dp]);
                diff.copy_from_slice(&table.gamma[k * dp..(k + 1) * dp]);
                gemv_add(&mut drift, &model.b, &xbar);
                gemv_add(&mut drift, &model.c, &alpha);
                gemv_add(&mut diff, &model.d, &xbar);
                gemv_add(&mut diff, &model.f, &alpha);
                for (i, yi) in y.iter_mut().enumerate() {
                    let r = i % dp;
                    *yi = decay[i] * (*yi + drift[r] * dt + diff[r] * dw);
                }
            }
            out.costs.push(cost);
            out.penalties.push(penalty);
            out.control_energy.push(a_energy);
            out.state_energy.push(x_energy);
            if keep {
                out.recorded.push(rec);
            }
        }
        Ok(out)
    })?;
    Ok(merge(blocks, cfg, horizon, d, m, nf))
}

/// Cell-averaged kernel weights `K̄ₗ = Δ⁻¹∫_{(l−1)Δ}^{lΔ} K`, `l = 1..=M`.
pub fn cell_averaged_kernel(kernel: &dyn Kernel, horizon: f64, steps: usize) -> Result<Vec<DMatrix<f64>>> {
    let dt = horizon / steps as f64;
    (1..=steps)
        .map(|l| Ok(kernel.integral(grid_time(horizon, steps, l - 1), grid_time(horizon, steps, l))? / dt))
        .collect()
}

/// Left-point convolution scheme
/// `X_k = g₀(t_k) + Σ_{j<k} K̄_{k−j}(b_j Δ + σ_j ΔW_j)`, `b = β + BX + Cα`,
/// `σ = γ + DX + Fα`. Only open-loop controls are supported.
pub fn simulate_direct_volterra(kernel: &dyn Kernel, model: &ModelCoefficients, control: &Control, cfg: &SimConfig) -> Result<SimulationBatch> {
    cfg.validate()?;
    model.validate()?;
    let (d, dp, m) = model.dims();
    if kernel.dims() != (d, dp) {
        return Err(Error::dims("kernel vs model", format!("{d}x{dp}"), format!("{:?}", kernel.dims())));
    }
    if matches!(control, Control::Feedback { .. }) {
        return Err(Error::param("control", "direct simulation takes open-loop controls only"));
    }
    let horizon = model.horizon;
    let steps = cfg.steps;
    let dt = horizon / steps as f64;
    let sqrt_dt = dt.sqrt();
    let table = step_table(model, control, steps, false, 0)?;
    let kbar = cell_averaged_kernel(kernel, horizon, steps)?;

    let blocks = run_blocks(cfg.paths, cfg.execution, |range| {
        let mut out = BlockOut::new(steps, range.len());
        let mut inc = vec![0.0; steps * dp];
        let mut x = vec![0.0; d];
        let mut alpha = vec![0.0; m];
        for p in range {
            let mut rng = path_rng(cfg.seed, p);
            let keep = p < cfg.record;
            let mut rec = RecordedPath {
                index: p,
                ..Default::default()
            };
            let (mut cost, mut a_energy, mut x_energy) = (0.0, 0.0, 0.0);
            for k in 0..=steps {
                x.copy_from_slice(&table.g0[k * d..(k + 1) * d]);
                for j in 0..k {
                    gemv_add(&mut x, &kbar[k - j - 1], &inc[j * dp..(j + 1) * dp]);
                }
                let x2: f64 = x.iter().map(|v| v * v).sum();
                if !x2.is_finite() {
                    return Err(Error::NonFinite { step: k });
                }
                out.second[k] += x2;
                out.fourth[k] += x2 * x2;
                if keep {
                    rec.x.extend_from_slice(&x);
                }
                if k == steps {
                    out.terminal.extend_from_slice(&x);
                    break;
                }
                alpha.copy_from_slice(&table.alpha0[k * m..(k + 1) * m]);
                cost += (quad_form(&model.q, &x) + quad_form(&model.n, &alpha) + 2.0 * model.l.as_slice().iter().zip(&x).map(|(l, v)| l * v).sum::<f64>()) * dt;
                a_energy += alpha.iter().map(|v| v * v).sum::<f64>() * dt;
                x_energy += x2 * dt;
                if keep {
                    rec.alpha.extend_from_slice(&alpha);
                }
                let z: f64 = StandardNormal.sample(&mut rng);
                let dw = sqrt_dt * z;
                let mut drift = table.beta[k * dp..(k + 1) * dp].to_vec();
                let mut diff = table.gamma[k * dp..(k + 1) * dp].to_vec();
                gemv_add(&mut drift, &model.b, &x);
                gemv_add(&mut drift, &model.c, &alpha);
                gemv_add(&mut diff, &model.d, &x);
                gemv_add(&mut diff, &model.f, &alpha);
                for r in 0..dp {
                    inc[k * dp + r] = drift[r] * dt + diff[r] * dw;
                }
            }
            out.costs.push(cost);
            out.penalties.push(0.0);
            out.control_energy.push(a_energy);
            out.state_energy.push(x_energy);
            if keep {
                out.recorded.push(rec);
            }
        }
        Ok(out)
    })?;
    Ok(merge(blocks, cfg, horizon, d, m, 0))
}
