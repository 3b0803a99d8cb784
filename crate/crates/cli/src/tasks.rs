use std::sync::Arc;

use anyhow::Result;
use nalgebra::DVector;
use serde_json::{json, Value};
use svlq::converge::{fit_rate, m_t, value_sweep, SweepOptions};
use svlq::kernels::{centered_fractional_atoms, format_f64, kernel_l2_error, kernel_l2_norm, KernelSpec};
use svlq::liftlq::{assemble, row_kernel_regulator, LiftedSystem};
use svlq::montecarlo::{estimate_cost, verify_identity};
use svlq::policy::{regulator_split, FeedbackPolicy};
use svlq::riccati::{solve_backward, RiccatiSolution};
use svlq::sim::{simulate_lifted, Control, Execution, SimConfig};

use crate::config::{build_measure, ControlConfig, RunConfig, Task};

/// Files produced by a task, written together at the end.
#[derive(Default)]
pub struct Artifacts {
    pub files: Vec<(&'static str, Vec<u8>)>,
}

impl Artifacts {
    fn add(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.files.push((name, bytes));
    }

    fn add_json(&mut self, name: &'static str, value: &Value) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }
}

struct Prepared {
    spec: KernelSpec,
    system: LiftedSystem,
}

/// Builds and validates everything before any numerical work.
fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let spec = cfg.kernel.build()?;
    let model = cfg.model.build()?;
    let measure = build_measure(&spec, &cfg.discretization)?;
    let system = assemble(measure, model)?;
    Ok(Prepared { spec, system })
}

fn sim_config(cfg: &RunConfig) -> SimConfig {
    let s = &cfg.simulation;
    SimConfig::new(s.paths, s.steps, s.seed).record(s.record.min(s.paths)).execution(Execution::Parallel)
}

fn solve(system: &LiftedSystem, cfg: &RunConfig) -> Result<(Arc<RiccatiSolution>, Arc<FeedbackPolicy>)> {
    let sol = Arc::new(solve_backward(system, cfg.solver.options())?);
    let policy = Arc::new(FeedbackPolicy::new(system, sol.clone())?);
    Ok((sol, policy))
}

fn riccati_tables(out: &mut Artifacts, system: &LiftedSystem, sol: &RiccatiSolution, policy: &FeedbackPolicy, stride: usize) -> Result<()> {
    let mut buf = Vec::new();
    sol.write_csv(&mut buf, stride)?;
    out.add("riccati.csv", buf);
    let mut buf = Vec::new();
    policy.write_gains_csv(&mut buf, stride)?;
    out.add("gains.csv", buf);
    let mut buf = Vec::new();
    system.measure().write_csv(&mut buf)?;
    out.add("atoms.csv", buf);
    Ok(())
}

fn solution_summary(system: &LiftedSystem, sol: &RiccatiSolution, policy: &FeedbackPolicy) -> Result<Value> {
    let zero = DVector::zeros(system.factor_dim());
    Ok(json!({
        "n_atoms": sol.n_atoms(),
        "steps": sol.steps(),
        "gamma00_at_0": sol.gamma(0)[(0, 0)],
        "chi0": sol.chi0(),
        "value0": policy.value_process(0.0, &zero)?,
        "invariants": sol.invariants(),
    }))
}

pub fn run(cfg: &RunConfig) -> Result<Artifacts> {
    let mut out = Artifacts::default();
    let summary = match cfg.task {
        Task::Riccati => {
            let p = prepare(cfg)?;
            let (sol, policy) = solve(&p.system, cfg)?;
            riccati_tables(&mut out, &p.system, &sol, &policy, cfg.solver.csv_stride)?;
            solution_summary(&p.system, &sol, &policy)?
        }
        Task::Value => {
            let p = prepare(cfg)?;
            let horizon = p.system.model().horizon;
            let kernel_error = kernel_l2_error(p.system.measure(), &p.spec, horizon)?;
            let kernel_norm = kernel_l2_norm(&p.spec, horizon)?;
            let bound = p.spec.l2_norm_bound(horizon)?;
            let admissibility = p.spec.admissibility()?;
            let (sol, policy) = solve(&p.system, cfg)?;
            let mut s = solution_summary(&p.system, &sol, &policy)?;
            s["kernel_l2_error"] = json!(kernel_error);
            s["kernel_l2_norm"] = json!(kernel_norm);
            s["kernel_l2_bound"] = json!(bound);
            s["admissibility_integral"] = json!(admissibility);
            s
        }
        Task::Simulate => {
            let p = prepare(cfg)?;
            let model = p.system.model();
            let control = match &cfg.simulation.control {
                ControlConfig::Zero => Control::Zero,
                ControlConfig::Curve { curve } => Control::Curve(curve.build("control", model.dims().2)?),
                ControlConfig::Feedback => Control::Feedback {
                    policy: solve(&p.system, cfg)?.1,
                    perturbation: None,
                },
            };
            let kernel_norm = kernel_l2_norm(&p.spec, model.horizon)?;
            let batch = simulate_lifted(&p.system, &control, &sim_config(cfg))?;
            let cost = estimate_cost(&batch)?;
            let summary = batch.summary();
            let mut buf = Vec::new();
            batch.write_paths_csv(&mut buf, 8)?;
            out.add("paths.csv", buf);
            let mut s = json!({
                "cost": cost,
                "batch": summary,
                "m_t": m_t(model, kernel_norm, summary.mean_control_energy),
            });
            if let Control::Feedback { policy, .. } = &control {
                s["chi0"] = json!(policy.solution().chi0());
            }
            s
        }
        Task::Verify => {
            let p = prepare(cfg)?;
            let eps = cfg.verify.perturbation.build("perturbation", p.system.model().dims().2)?;
            let (_, policy) = solve(&p.system, cfg)?;
            let report = verify_identity(&p.system, policy, eps, &sim_config(cfg))?;
            json!({
                "paths": cfg.simulation.paths,
                "steps": cfg.simulation.steps,
                "seed": cfg.simulation.seed,
                "report": report,
                "lhs": report.lhs,
                "lhs_se": report.lhs_se,
                "rhs": report.rhs,
                "rhs_se": report.rhs_se,
                "pass": report.pass,
            })
        }
        Task::Converge => {
            let spec = cfg.kernel.build()?;
            let model = cfg.model.build()?;
            let schedule = cfg.converge.schedule()?;
            let opts = SweepOptions {
                solver: cfg.solver.options(),
                execution: Execution::Parallel,
            };
            let table = value_sweep(&spec, &model, &schedule, opts)?;
            let mut buf = Vec::new();
            table.write_csv(&mut buf)?;
            out.add("sweep.csv", buf);
            let fit = fit_rate(&table.rows).ok();
            json!({
                "reference": table.reference,
                "reference_value": table.reference_value,
                "fit": fit,
                "rows": table.rows,
            })
        }
        Task::DemoRegulator => demo_regulator(cfg, &mut out)?,
    };
    let mut summary = summary;
    summary["task"] = json!(cfg.task.name());
    out.add_json("summary.json", &summary)?;
    Ok(out)
}

/// Optimal control of `X = ∫α ds + ∫K_H(t−s) dW` and its split into the
/// feedback on `X` and the memory correction.
fn demo_regulator(cfg: &RunConfig, out: &mut Artifacts) -> Result<Value> {
    let r = &cfg.regulator;
    let noise = centered_fractional_atoms(r.hurst, r.n, r.r)?;
    let system = row_kernel_regulator(&noise, r.q, r.control_weight, r.horizon)?;
    let (sol, policy) = solve(&system, cfg)?;
    riccati_tables(out, &system, &sol, &policy, cfg.solver.csv_stride)?;
    let sim = sim_config(cfg);
    let control = Control::Feedback {
        policy: policy.clone(),
        perturbation: None,
    };
    let batch = simulate_lifted(&system, &control, &sim)?;
    let cost = estimate_cost(&batch)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "k", "t", "x", "alpha", "feedback", "memory", "offset"])?;
    let nf = system.factor_dim();
    let (mut fb_sq, mut mem_sq, mut count) = (0.0, 0.0, 0usize);
    for rec in &batch.recorded {
        for k in 0..batch.steps {
            let t = batch.time(k);
            let y = DVector::from_column_slice(&rec.factors[k * nf..(k + 1) * nf]);
            let split = regulator_split(&policy, policy.grid_index(t)?, &y)?;
            fb_sq += split.feedback * split.feedback;
            mem_sq += split.memory * split.memory;
            count += 1;
            w.write_record([
                rec.index.to_string(),
                k.to_string(),
                format_f64(t),
                format_f64(rec.x[k]),
                format_f64(rec.alpha[k]),
                format_f64(split.feedback),
                format_f64(split.memory),
                format_f64(split.offset),
            ])?;
        }
    }
    out.add("paths.csv", w.into_inner().map_err(|e| e.into_error())?);
    let rms = |s: f64| if count > 0 { (s / count as f64).sqrt() } else { 0.0 };
    Ok(json!({
        "n_atoms": sol.n_atoms(),
        "chi0": sol.chi0(),
        "gamma00_at_0": sol.gamma(0)[(0, 0)],
        "cost": cost,
        "feedback_rms": rms(fb_sq),
        "memory_rms": rms(mem_sq),
        "invariants": sol.invariants(),
    }))
}
