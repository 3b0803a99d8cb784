use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svlq::kernels::{fractional_atoms, DiscreteMeasure};
use svlq::liftlq::{assemble, flatten, Curve, LiftedSystem, ModelCoefficients};
use svlq::montecarlo::{estimate_cost, verify_identity};
use svlq::policy::FeedbackPolicy;
use svlq::riccati::{solve_backward, solve_flat, Scheme, SolverOptions};
use svlq::sim::{simulate_lifted, Control, SimConfig};

fn policy(sys: &LiftedSystem, steps: usize) -> Arc<FeedbackPolicy> {
    let sol = Arc::new(solve_backward(sys, SolverOptions::new(steps, Scheme::ExpMidpoint)).unwrap());
    Arc::new(FeedbackPolicy::new(sys, sol).unwrap())
}

#[test]
fn policy_matches_flat_lq() {
    // D = F = 0 and no affine inputs keep Λ ≡ 0
    let steps = 16_000;
    let measure = DiscreteMeasure::scalar(&[(0.9, 0.2), (0.5, 3.0), (0.3, 30.0)]).unwrap();
    let c = measure.scalar_weights().unwrap();
    let model = ModelCoefficients::scalar(-0.4, 1.3, 0.0, 0.0, Curve::zero(1), Curve::scalar(1.0), Curve::zero(1), 1.5, 0.7, 0.0, 1.0);
    let flat = flatten(&measure, &model).unwrap();
    let fs = solve_flat(&flat, SolverOptions::new(steps, Scheme::ExpMidpoint)).unwrap();
    let sys = assemble(measure, model).unwrap();
    let p = policy(&sys, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in (0..steps).step_by(1000) {
        let t = fs.times[k];
        let y = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
        let z = DVector::from_fn(3, |i, _| c[i] * y[i]);
        let g = &fs.gamma[k];
        let flat_value = (z.transpose() * g * &z)[(0, 0)] + p.solution().chi(k);
        assert!((p.value_process(t, &y).unwrap() - flat_value).abs() < 1e-9);
        let flat_control = -(flat.c.transpose() * g * &z)[(0, 0)] / 0.7;
        assert!((p.control(t, &y).unwrap()[0] - flat_control).abs() < 1e-9);
    }
}

#[test]
fn quadratic_part_of_value_is_nonnegative() {
    let model = ModelCoefficients::scalar(0.2, 1.0, 0.3, 0.1, Curve::scalar(0.2), Curve::scalar(1.0), Curve::scalar(0.5), 1.0, 1.0, 0.3, 1.0);
    let sys = assemble(fractional_atoms(0.2, 8, 2.5).unwrap(), model).unwrap();
    let p = policy(&sys, 1000);
    let sol = p.solution();
    let c = sys.measure().scalar_weights().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let k = rng.random_range(0..=sol.steps());
        let t = sol.times()[k];
        let y = DVector::from_fn(8, |_, _| rng.random_range(-3.0..3.0));
        let linear: f64 = (0..8).map(|i| sol.lambda(k)[i] * c[i] * y[i]).sum();
        let quad = p.value_process(t, &y).unwrap() - 2.0 * linear - sol.chi(k);
        assert!(quad >= -1e-10, "{quad} at t = {t}");
    }
}

#[test]
fn perturbing_the_optimal_control_costs_more() {
    let sys = assemble(fractional_atoms(0.25, 10, 2.5).unwrap(), ModelCoefficients::intro_regulator(1.0)).unwrap();
    let p = policy(&sys, 1000);
    let cfg = SimConfig::new(20_000, 200, 12);
    let optimal = estimate_cost(&simulate_lifted(&sys, &Control::Feedback { policy: p.clone(), perturbation: None }, &cfg).unwrap()).unwrap();
    for eps in [-0.3, 0.2, 0.5] {
        let perturbed = Control::Feedback {
            policy: p.clone(),
            perturbation: Some(Curve::scalar(eps)),
        };
        let cost = estimate_cost(&simulate_lifted(&sys, &perturbed, &cfg).unwrap()).unwrap();
        assert!(cost.mean >= optimal.mean - 3.0 * optimal.se, "ε = {eps}: {cost:?} vs {optimal:?}");
    }
}

#[test]
fn verification_residual_shrinks_with_paths() {
    let sys = assemble(DiscreteMeasure::dirac_origin(1), ModelCoefficients::intro_regulator(1.0)).unwrap();
    let p = policy(&sys, 2000);
    let se = |paths| {
        let r = verify_identity(&sys, p.clone(), Curve::scalar(0.5), &SimConfig::new(paths, 200, 3)).unwrap();
        assert!(r.pass && r.rhs >= 0.0, "{r:?}");
        r.lhs_se + r.rhs_se
    };
    let ratio = se(5000) / se(20_000);
    assert!((1.7..2.3).contains(&ratio), "{ratio}");
}
