//! Gauss–Legendre rules and an adaptive bisection integrator.

use nalgebra::DMatrix;
use std::sync::OnceLock;

/// Nodes and weights of an n-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Integrates `f` over `[a, b]` with this rule.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    fn integrate_matrix(
        &self,
        a: f64,
        b: f64,
        f: &mut dyn FnMut(f64) -> DMatrix<f64>,
    ) -> DMatrix<f64> {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        let mut acc: Option<DMatrix<f64>> = None;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            let v = f(mid + half * x) * (*w);
            match acc.as_mut() {
                Some(s) => *s += v,
                None => acc = Some(v),
            }
        }
        acc.expect("rule has nodes") * half
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

pub(crate) fn gl10() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(10))
}

pub(crate) fn gl16() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(16))
}

/// Outcome of an adaptive integration.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub value: DMatrix<f64>,
    pub error_estimate: f64,
    pub converged: bool,
}

const MAX_DEPTH: usize = 1000;

/// Adaptive bisection with a 10-point Gauss–Legendre rule per panel.
///
/// A panel is accepted when the two-halves estimate agrees with the
/// whole-panel estimate to within `rel_tol` of the running magnitude.
/// Integrable endpoint singularities are resolved by deep bisection of the
/// offending branch only.
pub fn adaptive(
    a: f64,
    b: f64,
    rel_tol: f64,
    abs_tol: f64,
    f: &mut dyn FnMut(f64) -> DMatrix<f64>,
) -> Quadrature {
    let rule = gl10();
    if a == b {
        let probe = f(a);
        return Quadrature {
            value: DMatrix::zeros(probe.nrows(), probe.ncols()),
            error_estimate: 0.0,
            converged: true,
        };
    }
    let coarse = rule.integrate_matrix(a, b, f);
    let scale = coarse.amax();
    let tol = (0.01 * rel_tol * scale).max(abs_tol);
    let mut err = 0.0;
    let mut converged = true;
    let mut stack = vec![(a, b, coarse, 0usize)];
    let mut total: Option<DMatrix<f64>> = None;
    while let Some((lo, hi, whole, depth)) = stack.pop() {
        let mid = 0.5 * (lo + hi);
        let left = rule.integrate_matrix(lo, mid, f);
        let right = rule.integrate_matrix(mid, hi, f);
        let halves = &left + &right;
        let diff = (&halves - &whole).amax();
        let tiny_panel = mid <= lo || mid >= hi;
        if diff <= tol || depth >= MAX_DEPTH || tiny_panel || !diff.is_finite() {
            if diff > tol {
                converged = false;
            }
            err += diff;
            match total.as_mut() {
                Some(t) => *t += halves,
                None => total = Some(halves),
            }
        } else {
            stack.push((mid, hi, right, depth + 1));
            stack.push((lo, mid, left, depth + 1));
        }
    }
    Quadrature {
        value: total.expect("at least one panel"),
        error_estimate: err,
        converged,
    }
}

/// Scalar convenience wrapper around [`adaptive`].
pub fn adaptive_scalar(a: f64, b: f64, rel_tol: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let mut g = |x: f64| DMatrix::from_element(1, 1, f(x));
    adaptive(a, b, rel_tol, 0.0, &mut g).value[(0, 0)]
}
