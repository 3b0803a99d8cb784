//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svlq::converge::{default_schedule, fit_rate, value_sweep, SweepOptions};
use svlq::kernels::{fractional_atoms, Atom, DiscreteMeasure, KernelSpec};
use svlq::liftlq::{assemble, flatten, row_kernel_regulator, Curve, LiftedSystem, ModelCoefficients};
use svlq::montecarlo::{estimate_cost, verify_identity};
use svlq::policy::FeedbackPolicy;
use svlq::riccati::{oracle_rk4, solve_backward, solve_flat, RiccatiSolution, Scheme, SolverOptions, PSD_TOL, SYMMETRY_TOL};
use svlq::sim::{paired_rms, simulate_direct_volterra, simulate_lifted, Control, Execution, SimConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn intro_system() -> LiftedSystem {
    assemble(DiscreteMeasure::dirac_origin(1), ModelCoefficients::intro_regulator(1.0)).unwrap()
}

fn solve(sys: &LiftedSystem, steps: usize) -> RiccatiSolution {
    solve_backward(sys, SolverOptions::new(steps, Scheme::ExpMidpoint)).unwrap()
}

fn intro_run() -> (RiccatiSolution, Duration) {
    let sys = intro_system();
    let start = Instant::now();
    let sol = solve(&sys, 10_000);
    (sol, start.elapsed())
}

fn classical_nesting() -> Outcome {
    let (sol, elapsed) = intro_run();
    let err = sol
        .times()
        .iter()
        .enumerate()
        .map(|(k, &t)| (sol.gamma(k)[(0, 0)] - (1.0 - t).tanh()).abs())
        .fold(0.0, f64::max);
    check(err <= 1e-6 && elapsed < Duration::from_secs(1), format!("max|Γ − tanh(1−t)| = {err:.2e}, solve took {elapsed:.2?}"))
}

fn value_oracle() -> Outcome {
    let (sol, _) = intro_run();
    let err = (sol.chi0() - 1f64.cosh().ln()).abs();
    check(err <= 1e-5, format!("χ₀ = {:.9}, |χ₀ − ln cosh 1| = {err:.2e}", sol.chi0()))
}

fn random_scalar_instance(seed: u64) -> (DiscreteMeasure, ModelCoefficients) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let atoms: Vec<(f64, f64)> = [0.1, 1.0, 10.0, 100.0].iter().map(|&th| (rng.random_range(0.2..1.5), th)).collect();
    let model = ModelCoefficients::scalar(
        rng.random_range(-1.0..1.0),
        rng.random_range(0.5..1.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.3..0.3),
        Curve::zero(1),
        Curve::scalar(1.0),
        Curve::zero(1),
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        0.0,
        1.0,
    );
    (DiscreteMeasure::scalar(&atoms).unwrap(), model)
}

fn flat_equivalence() -> Outcome {
    let steps = 16_000;
    let (measure, model) = random_scalar_instance(7);
    let flat = flatten(&measure, &model).unwrap();
    let fs = solve_flat(&flat, SolverOptions::new(steps, Scheme::ExpMidpoint)).unwrap();
    let sol = solve(&assemble(measure, model).unwrap(), steps);
    let err = (0..=steps).map(|k| (sol.gamma(k) - &fs.gamma[k]).amax()).fold(0.0, f64::max);
    check(err <= 1e-9, format!("max |Γ_t(θᵢ,θⱼ) − Γⁿ_t,ij| = {err:.2e} at M = {steps}"))
}

fn matrix_instance() -> LiftedSystem {
    let w = |v: [f64; 4]| DMatrix::from_row_slice(2, 2, &v);
    let measure = DiscreteMeasure::new(
        (2, 2),
        vec![
            Atom::new(w([1.0, 0.2, 0.0, 0.8]), 0.0),
            Atom::new(w([0.5, -0.1, 0.3, 0.4]), 2.0),
            Atom::new(w([0.3, 0.0, 0.1, 0.6]), 25.0),
        ],
    )
    .unwrap();
    let model = ModelCoefficients {
        b: w([-0.3, 0.1, 0.2, -0.5]),
        c: DMatrix::from_row_slice(2, 1, &[1.0, 0.5]),
        d: w([0.2, 0.0, 0.1, 0.1]),
        f: DMatrix::from_row_slice(2, 1, &[0.1, 0.0]),
        beta: Curve::constant(&[0.1, -0.2]),
        gamma: Curve::constant(&[1.0, 0.5]),
        g0: Curve::constant(&[0.5, 0.0]),
        q: w([2.0, 0.3, 0.3, 1.0]),
        n: DMatrix::from_element(1, 1, 0.5),
        l: DVector::from_column_slice(&[0.1, 0.0]),
        horizon: 1.0,
    };
    assemble(measure, model).unwrap()
}

fn invariants() -> Outcome {
    let (measure, model) = random_scalar_instance(11);
    let systems = vec![
        ("intro", intro_system()),
        ("random n=4", assemble(measure, model).unwrap()),
        ("fractional H=0.1 n=20", assemble(fractional_atoms(0.1, 20, 2.5).unwrap(), ModelCoefficients::intro_regulator(1.0)).unwrap()),
        ("matrix d=2", matrix_instance()),
        ("row kernel", row_kernel_regulator(&fractional_atoms(0.25, 20, 2.5).unwrap(), 1.0, 1.0, 1.0).unwrap()),
    ];
    let mut failures = Vec::new();
    let mut worst = (0.0f64, f64::INFINITY, f64::INFINITY, 0.0f64);
    for (name, sys) in systems {
        let r = match solve_backward(&sys, SolverOptions::new(2000, Scheme::ExpMidpoint)) {
            Ok(sol) => sol.invariants().clone(),
            Err(e) => {
                failures.push(format!("{name}: {e}"));
                continue;
            }
        };
        worst.0 = worst.0.max(r.max_symmetry_error);
        worst.1 = worst.1.min(r.min_lifted_eigenvalue);
        worst.2 = worst.2.min(r.min_nhat_excess_eigenvalue);
        worst.3 = worst.3.max(r.row_sum_bound);
        if r.max_symmetry_error > SYMMETRY_TOL || r.min_lifted_eigenvalue < -PSD_TOL || r.min_nhat_excess_eigenvalue < -PSD_TOL || !r.row_sum_bound.is_finite() {
            failures.push(format!("{name}: {r:?}"));
        }
    }
    let detail = format!(
        "5 solves: symmetry {:.1e}, lifted eigmin {:.1e}, N̂−N eigmin {:.1e}, row sum {:.3}",
        worst.0, worst.1, worst.2, worst.3
    );
    check(failures.is_empty(), if failures.is_empty() { detail } else { format!("{detail}; {}", failures.join("; ")) })
}

fn sup_gap(a: &RiccatiSolution, b: &RiccatiSolution) -> f64 {
    let stride = b.steps() / a.steps();
    (0..=a.steps())
        .map(|k| {
            let kb = k * stride;
            (a.gamma(k) - b.gamma(kb))
                .amax()
                .max((a.lambda(k) - b.lambda(kb)).amax())
                .max((a.chi(k) - b.chi(kb)).abs())
        })
        .fold(0.0, f64::max)
}

fn rk4_agreement() -> Outcome {
    let model = ModelCoefficients::scalar(0.3, 1.0, 0.2, 0.1, Curve::scalar(0.1), Curve::scalar(1.0), Curve::scalar(0.5), 1.0, 1.0, 0.2, 1.0);
    let sys = assemble(DiscreteMeasure::scalar(&[(1.0, 0.5), (0.5, 2.0)]).unwrap(), model).unwrap();
    let oracle = oracle_rk4(&sys, 100_000).unwrap();
    let fine = sup_gap(&solve(&sys, 4000), &oracle);
    let coarse = sup_gap(&solve(&sys, 2000), &oracle);
    let ratio = coarse / fine;
    check(fine <= 1e-6 && ratio >= 3.5, format!("sup error {fine:.2e} at M = 4000, halving ratio {ratio:.2}"))
}

fn monte_carlo_optimality() -> Outcome {
    let start = Instant::now();
    let sys = intro_system();
    let sol = Arc::new(solve(&sys, 2000));
    let chi0 = sol.chi0();
    let policy = Arc::new(FeedbackPolicy::new(&sys, sol).unwrap());
    let cfg = SimConfig::new(100_000, 500, 2024);
    let opt = estimate_cost(&simulate_lifted(&sys, &Control::Feedback { policy, perturbation: None }, &cfg).unwrap()).unwrap();
    let zero = estimate_cost(&simulate_lifted(&sys, &Control::Zero, &cfg.clone().record(0)).unwrap()).unwrap();
    let elapsed = start.elapsed();
    check(
        opt.within(chi0, 3.0) && zero.within(0.5, 3.0) && elapsed < Duration::from_secs(30),
        format!(
            "Ĵ(α*) = {:.5} ± {:.5} vs χ₀ = {chi0:.5}; Ĵ(0) = {:.5} ± {:.5} vs 0.5; {elapsed:.2?}",
            opt.mean, opt.se, zero.mean, zero.se
        ),
    )
}

fn verification_identity() -> Outcome {
    let sys = intro_system();
    let sol = Arc::new(solve(&sys, 2000));
    let policy = Arc::new(FeedbackPolicy::new(&sys, sol).unwrap());
    let pi = std::f64::consts::PI;
    // degree-5 Taylor polynomial of sin(πt)
    let sin_like = Curve::polynomial(
        [0.0, pi, 0.0, -pi.powi(3) / 6.0, 0.0, pi.powi(5) / 120.0].iter().map(|&a| DVector::from_element(1, 0.5 * a)).collect(),
    )
    .unwrap();
    let cases = [("0", Curve::zero(1)), ("0.5", Curve::scalar(0.5)), ("0.5 sin-like", sin_like)];
    let cfg = SimConfig::new(100_000, 500, 99);
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, eps) in cases {
        let r = verify_identity(&sys, policy.clone(), eps, &cfg).unwrap();
        ok &= r.pass && r.rhs >= 0.0;
        parts.push(format!("ε={name}: LHS {:.5} RHS {:.5} (SE {:.5})", r.lhs, r.rhs, r.lhs_se + r.rhs_se));
    }
    check(ok, parts.join("; "))
}

fn representation() -> Outcome {
    let measure = DiscreteMeasure::scalar(&[(1.0, 0.5), (0.5, 3.0), (0.8, 12.0)]).unwrap();
    let model = ModelCoefficients::scalar(-0.5, 1.0, 0.3, 0.0, Curve::scalar(0.1), Curve::scalar(1.0), Curve::scalar(1.0), 1.0, 1.0, 0.0, 1.0);
    let sys = assemble(measure.clone(), model.clone()).unwrap();
    let spec = KernelSpec::atomic(measure);
    let control = Control::Curve(Curve::polynomial(vec![DVector::from_element(1, 0.5), DVector::from_element(1, -1.0)]).unwrap());
    let paths = 400;
    let gaps: Vec<f64> = [25, 50, 100, 200]
        .iter()
        .map(|&m| {
            let cfg = SimConfig::new(paths, m, 5).record(paths);
            let lifted = simulate_lifted(&sys, &control, &cfg).unwrap();
            let direct = simulate_direct_volterra(&spec, &model, &control, &cfg).unwrap();
            paired_rms(&lifted, &direct).unwrap()
        })
        .collect();
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    check(
        ratios.iter().all(|&r| r >= 1.4),
        format!("RMS gaps {} at M = 25..200, ratios {:.2?}", gaps.iter().map(|g| format!("{g:.2e}")).collect::<Vec<_>>().join(", "), ratios),
    )
}

fn stability_sweep() -> Outcome {
    let spec = KernelSpec::fractional(0.3).unwrap();
    let opts = SweepOptions {
        solver: SolverOptions::new(2000, Scheme::ExpMidpoint),
        execution: Execution::Parallel,
    };
    let table = value_sweep(&spec, &ModelCoefficients::intro_regulator(1.0), &default_schedule(&[5, 10, 20, 40]), opts).unwrap();
    let rows = &table.rows;
    let coarse = &rows[..rows.len() - 1];
    let values_decrease = coarse.windows(2).all(|w| w[1].value_error < w[0].value_error);
    let kernel_decrease = rows.windows(2).all(|w| w[1].kernel_error < w[0].kernel_error);
    let fit = fit_rate(rows).unwrap();
    check(
        values_decrease && kernel_decrease && fit.slope >= 0.9,
        format!(
            "value errors {:?}, kernel errors {:?}, slope {:.3}",
            coarse.iter().map(|r| format!("{:.2e}", r.value_error)).collect::<Vec<_>>(),
            rows.iter().map(|r| format!("{:.2e}", r.kernel_error)).collect::<Vec<_>>(),
            fit.slope
        ),
    )
}

fn fractional_coefficients() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/oracles/fractional_atoms.csv");
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut count = 0;
    for row in reader.records() {
        let row = row.map_err(|e| e.to_string())?;
        let f = |i: usize| row[i].parse::<f64>().unwrap();
        let (h, n, r, i) = (f(0), row[1].parse::<usize>().unwrap(), f(2), row[3].parse::<usize>().unwrap());
        let measure = fractional_atoms(h, n, r).unwrap();
        let atom = &measure.atoms()[i - 1];
        let rel = |x: f64, y: f64| ((x - y) / y).abs();
        worst = worst.max(rel(atom.weight[(0, 0)], f(4))).max(rel(atom.node, f(5)));
        count += 1;
    }
    check(count == 30 && worst <= 1e-12, format!("{count} atoms, worst relative error {worst:.2e}"))
}

fn determinism() -> Outcome {
    let run = || -> String {
        let sys = intro_system();
        let sol = Arc::new(solve(&sys, 500));
        let policy = Arc::new(FeedbackPolicy::new(&sys, sol).unwrap());
        let cfg = SimConfig::new(5000, 200, 42).record(3);
        let batch = simulate_lifted(&sys, &Control::Feedback { policy: policy.clone(), perturbation: None }, &cfg).unwrap();
        let report = verify_identity(&sys, policy, Curve::scalar(0.5), &cfg).unwrap();
        let sweep = value_sweep(
            &KernelSpec::fractional(0.3).unwrap(),
            &ModelCoefficients::intro_regulator(1.0),
            &default_schedule(&[5, 10, 20]),
            SweepOptions {
                solver: SolverOptions::new(500, Scheme::ExpMidpoint),
                execution: Execution::Parallel,
            },
        )
        .unwrap();
        serde_json::to_string_pretty(&serde_json::json!({
            "batch": batch.summary(),
            "verify": report,
            "sweep": sweep,
        }))
        .unwrap()
    };
    let outputs: Vec<String> = [1, 4, 8]
        .iter()
        .map(|&k| rayon::ThreadPoolBuilder::new().num_threads(k).build().unwrap().install(run))
        .collect();
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    check(same, format!("summaries for 1, 4, 8 threads {}", if same { "identical" } else { "differ" }))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("classical-nesting oracle", classical_nesting),
        ("value oracle", value_oracle),
        ("flat/kernel equivalence", flat_equivalence),
        ("solution invariants", invariants),
        ("RK4 oracle agreement", rk4_agreement),
        ("Monte Carlo optimality", monte_carlo_optimality),
        ("verification identity", verification_identity),
        ("lift representation", representation),
        ("stability sweep", stability_sweep),
        ("fractional coefficients", fractional_coefficients),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
