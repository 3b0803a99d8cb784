//! Problem data and the finite-dimensional lifted system obtained from an
//! atomic representing measure.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kernels::{Atom, DiscreteMeasure};

/// Deterministic curve `[0, T] → ℝᵏ`.
#[derive(Clone)]
pub enum Curve {
    Zero(usize),
    Constant(DVector<f64>),
    /// `Σⱼ aⱼ tʲ` with vector coefficients `aⱼ`.
    Polynomial(Vec<DVector<f64>>),
    Custom {
        dim: usize,
        f: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    },
}

impl fmt::Debug for Curve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Curve::Zero(d) => write!(f, "Zero({d})"),
            Curve::Constant(v) => write!(f, "Constant({:?})", v.as_slice()),
            Curve::Polynomial(c) => write!(f, "Polynomial({} coefficients)", c.len()),
            Curve::Custom { dim, .. } => write!(f, "Custom(dim={dim})"),
        }
    }
}

impl Curve {
    pub fn zero(dim: usize) -> Self {
        Curve::Zero(dim)
    }

    pub fn constant(values: &[f64]) -> Self {
        Curve::Constant(DVector::from_column_slice(values))
    }

    pub fn scalar(v: f64) -> Self {
        Curve::Constant(DVector::from_element(1, v))
    }

    /// Polynomial from per-power coefficient vectors (lowest power first).
    pub fn polynomial(coefficients: Vec<DVector<f64>>) -> Result<Self> {
        let dim = coefficients
            .first()
            .map(|c| c.len())
            .ok_or_else(|| Error::param("polynomial", "needs at least one coefficient"))?;
        if coefficients.iter().any(|c| c.len() != dim) {
            return Err(Error::param("polynomial", "coefficients have mixed dimensions"));
        }
        Ok(Curve::Polynomial(coefficients))
    }

    pub fn custom(dim: usize, f: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static) -> Self {
        Curve::Custom { dim, f: Arc::new(f) }
    }

    pub fn dim(&self) -> usize {
        match self {
            Curve::Zero(d) => *d,
            Curve::Constant(v) => v.len(),
            Curve::Polynomial(c) => c[0].len(),
            Curve::Custom { dim, .. } => *dim,
        }
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            Curve::Zero(d) => DVector::zeros(*d),
            Curve::Constant(v) => v.clone(),
            Curve::Polynomial(c) => {
                // Horner
                let mut acc = DVector::zeros(c[0].len());
                for coef in c.iter().rev() {
                    acc = acc * t + coef;
                }
                acc
            }
            Curve::Custom { f, .. } => f(t),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Curve::Zero(_) => true,
            Curve::Constant(v) => v.iter().all(|x| *x == 0.0),
            Curve::Polynomial(c) => c.iter().all(|v| v.iter().all(|x| *x == 0.0)),
            Curve::Custom { .. } => false,
        }
    }

    /// Pointwise sum with another curve of the same dimension.
    pub fn plus(&self, other: &Curve) -> Curve {
        let (a, b) = (self.clone(), other.clone());
        Curve::custom(self.dim(), move |t| a.eval(t) + b.eval(t))
    }

    /// `‖curve‖_{L²(0,T)}` by composite Gauss–Legendre.
    pub fn l2_norm(&self, horizon: f64) -> f64 {
        let panels = 64;
        let h = horizon / panels as f64;
        let rule = crate::quad::gl16();
        (0..panels)
            .map(|k| rule.integrate(k as f64 * h, (k + 1) as f64 * h, |t| self.eval(t).norm_squared()))
            .sum::<f64>()
            .sqrt()
    }
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Full data of the LQ–Volterra problem.
///
/// State `X ∈ ℝᵈ`, factor noise dimension `d'`, control `α ∈ ℝᵐ`:
/// `b = β + BX + Cα`, `σ = γ + DX + Fα`, running cost
/// `XᵀQX + αᵀNα + 2XᵀL` over `[0, T]`.
#[derive(Debug, Clone)]
pub struct ModelCoefficients {
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub beta: Curve,
    pub gamma: Curve,
    pub g0: Curve,
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub l: DVector<f64>,
    pub horizon: f64,
}

impl ModelCoefficients {
    /// Scalar model with `d = d' = m = 1`.
    #[allow(clippy::too_many_arguments)]
    pub fn scalar(b: f64, c: f64, d: f64, f: f64, beta: Curve, gamma: Curve, g0: Curve, q: f64, n: f64, l: f64, horizon: f64) -> Self {
        let s = |x: f64| DMatrix::from_element(1, 1, x);
        Self {
            b: s(b),
            c: s(c),
            d: s(d),
            f: s(f),
            beta,
            gamma,
            g0,
            q: s(q),
            n: s(n),
            l: DVector::from_element(1, l),
            horizon,
        }
    }

    /// The regulator `dX = α dt + dW`, cost `∫ X² + α²` on `[0, T]`.
    pub fn intro_regulator(horizon: f64) -> Self {
        Self::scalar(0.0, 1.0, 0.0, 0.0, Curve::zero(1), Curve::scalar(1.0), Curve::zero(1), 1.0, 1.0, 0.0, horizon)
    }

    /// `(d, d', m)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.q.nrows(), self.b.nrows(), self.n.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        let (d, dp, m) = self.dims();
        let check = |name: &'static str, mat: &DMatrix<f64>, r: usize, c: usize| -> Result<()> {
            if mat.shape() != (r, c) {
                return Err(Error::dims(name, format!("{r}x{c}"), format!("{}x{}", mat.nrows(), mat.ncols())));
            }
            if mat.iter().any(|x| !x.is_finite()) {
                return Err(Error::param(name, "entries must be finite"));
            }
            Ok(())
        };
        if d == 0 || dp == 0 || m == 0 {
            return Err(Error::param("dims", "d, d' and m must be positive"));
        }
        check("B", &self.b, dp, d)?;
        check("C", &self.c, dp, m)?;
        check("D", &self.d, dp, d)?;
        check("F", &self.f, dp, m)?;
        check("Q", &self.q, d, d)?;
        check("N", &self.n, m, m)?;
        if self.l.len() != d {
            return Err(Error::dims("L", d, self.l.len()));
        }
        for (name, curve, dim) in [("beta", &self.beta, dp), ("gamma", &self.gamma, dp), ("g0", &self.g0, d)] {
            if curve.dim() != dim {
                return Err(Error::dims(name, dim, curve.dim()));
            }
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::param("T", format!("horizon must be positive, got {}", self.horizon)));
        }
        let sym_tol = 1e-12;
        if (&self.q - self.q.transpose()).amax() > sym_tol * (1.0 + self.q.amax()) {
            return Err(Error::param("Q", "must be symmetric"));
        }
        if (&self.n - self.n.transpose()).amax() > sym_tol * (1.0 + self.n.amax()) {
            return Err(Error::param("N", "must be symmetric"));
        }
        let qmin = min_eigenvalue(&self.q);
        if qmin < -1e-12 {
            return Err(Error::param("Q", format!("must be positive semidefinite (eigmin {qmin:e})")));
        }
        let nmin = min_eigenvalue(&self.n);
        if nmin < 1e-10 {
            return Err(Error::param("N", format!("must be positive definite (eigmin {nmin:e})")));
        }
        Ok(())
    }

    /// `β̃(t) = β(t) + B g₀(t)`.
    pub fn beta_tilde(&self, t: f64) -> DVector<f64> {
        self.beta.eval(t) + &self.b * self.g0.eval(t)
    }

    /// `γ̃(t) = γ(t) + D g₀(t)`.
    pub fn gamma_tilde(&self, t: f64) -> DVector<f64> {
        self.gamma.eval(t) + &self.d * self.g0.eval(t)
    }

    /// Running cost `f(x, a)`.
    pub fn running_cost(&self, x: &DVector<f64>, a: &DVector<f64>) -> f64 {
        (x.transpose() * &self.q * x)[(0, 0)] + (a.transpose() * &self.n * a)[(0, 0)] + 2.0 * x.dot(&self.l)
    }

    /// Same model with a different input curve `g₀`.
    pub fn with_g0(&self, g0: Curve) -> Self {
        Self { g0, ..self.clone() }
    }
}

/// Lifted controlled system: factors `Yⁱ ∈ ℝ^{d'}`, one per atom, with
/// `dYⁱ = (−θᵢYⁱ + β̃ + B X̄ + Cα) dt + (γ̃ + D X̄ + Fα) dW` and
/// `X = g₀ + X̄`, `X̄ = Σⱼ cⱼ Yʲ`.
#[derive(Debug, Clone)]
pub struct LiftedSystem {
    measure: DiscreteMeasure,
    model: ModelCoefficients,
    /// `cᵢ` stacked horizontally: `d × (n d')`.
    weights: DMatrix<f64>,
}

/// Checks dimensions and assembles the lifted system.
pub fn assemble(measure: DiscreteMeasure, model: ModelCoefficients) -> Result<LiftedSystem> {
    model.validate()?;
    let (d, dp, _) = model.dims();
    if measure.dims() != (d, dp) {
        return Err(Error::dims(
            "measure vs model",
            format!("{d}x{dp}"),
            format!("{}x{}", measure.dims().0, measure.dims().1),
        ));
    }
    let n = measure.len();
    let mut weights = DMatrix::zeros(d, n * dp);
    for (i, a) in measure.atoms().iter().enumerate() {
        weights.view_mut((0, i * dp), (d, dp)).copy_from(&a.weight);
    }
    Ok(LiftedSystem { measure, model, weights })
}

impl LiftedSystem {
    pub fn measure(&self) -> &DiscreteMeasure {
        &self.measure
    }

    pub fn model(&self) -> &ModelCoefficients {
        &self.model
    }

    /// Number of atoms.
    pub fn n_atoms(&self) -> usize {
        self.measure.len()
    }

    /// Total factor dimension `n d'`.
    pub fn factor_dim(&self) -> usize {
        self.measure.len() * self.model.dims().1
    }

    pub fn nodes(&self) -> Vec<f64> {
        self.measure.nodes()
    }

    /// Horizontal stack `[c₁ … cₙ]` (`d × n d'`).
    pub fn stacked_weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `X̄ = Σ cⱼ Yʲ` for stacked factors.
    pub fn aggregate(&self, factors: &DVector<f64>) -> DVector<f64> {
        &self.weights * factors
    }

    /// `X = g₀(t) + Σ cⱼ Yʲ`.
    pub fn state(&self, t: f64, factors: &DVector<f64>) -> DVector<f64> {
        self.model.g0.eval(t) + self.aggregate(factors)
    }

    /// Common drift bracket `β̃(t) + B X̄ + Cα` (before mean reversion).
    pub fn drift(&self, t: f64, factors: &DVector<f64>, control: &DVector<f64>) -> DVector<f64> {
        self.model.beta_tilde(t) + &self.model.b * self.aggregate(factors) + &self.model.c * control
    }

    /// Common diffusion `γ̃(t) + D X̄ + Fα`.
    pub fn diffusion(&self, t: f64, factors: &DVector<f64>, control: &DVector<f64>) -> DVector<f64> {
        self.model.gamma_tilde(t) + &self.model.d * self.aggregate(factors) + &self.model.f * control
    }
}

/// Conventional LQ matrices over the rescaled scalar factors `Zⁱ = cᵢ Yⁱ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatLq {
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub horizon: f64,
}

/// Builds `Bⁿᵢⱼ = B cᵢ − θᵢ δᵢⱼ`, `Dⁿᵢⱼ = D cᵢ`, `Cⁿᵢ = C cᵢ`, `Fⁿᵢ = F cᵢ`,
/// `Qⁿᵢⱼ = Q`, `Nⁿ = N` for a scalar instance.
pub fn flatten(measure: &DiscreteMeasure, model: &ModelCoefficients) -> Result<FlatLq> {
    model.validate()?;
    let (d, dp, m) = model.dims();
    if d != 1 || dp != 1 {
        return Err(Error::dims("flatten (scalar state only)", "1x1", format!("{d}x{dp}")));
    }
    if measure.dims() != (1, 1) {
        return Err(Error::dims("measure vs model", "1x1", format!("{:?}", measure.dims())));
    }
    let c = measure.scalar_weights().expect("scalar measure");
    let theta = measure.nodes();
    let n = c.len();
    let b = model.b[(0, 0)];
    let dd = model.d[(0, 0)];
    Ok(FlatLq {
        b: DMatrix::from_fn(n, n, |i, j| b * c[i] - if i == j { theta[i] } else { 0.0 }),
        c: DMatrix::from_fn(n, m, |i, k| model.c[(0, k)] * c[i]),
        d: DMatrix::from_fn(n, n, |i, _| dd * c[i]),
        f: DMatrix::from_fn(n, m, |i, k| model.f[(0, k)] * c[i]),
        q: DMatrix::from_element(n, n, model.q[(0, 0)]),
        n: model.n.clone(),
        horizon: model.horizon,
    })
}

impl FlatLq {
    /// Recovers `(cᵢ, θᵢ)` from the flat matrices, given `C ≠ 0` or `F ≠ 0`
    /// and the scalar model coefficients.
    pub fn atoms(&self, model: &ModelCoefficients) -> Result<Vec<(f64, f64)>> {
        let n = self.b.nrows();
        let (scale, col) = if model.c[(0, 0)] != 0.0 {
            (model.c[(0, 0)], &self.c)
        } else if model.f[(0, 0)] != 0.0 {
            (model.f[(0, 0)], &self.f)
        } else {
            return Err(Error::Degenerate("weights are not identifiable when C = F = 0".into()));
        };
        let b = model.b[(0, 0)];
        Ok((0..n)
            .map(|i| {
                let c = col[(i, 0)] / scale;
                (c, b * c - self.b[(i, i)])
            })
            .collect())
    }
}

/// Regulator driven by Volterra noise: `X = ∫α ds + ∫K̃(t−s) dW` with
/// cost `∫ Q X² + N α²`.
///
/// The row kernel `K = (1, K̃)` is lifted with the atom `((1, 0), 0)` for
/// the control integral and `((0, c̃ᵢ), θ̃ᵢ)` for the noise atoms.
pub fn row_kernel_regulator(noise: &DiscreteMeasure, q: f64, n: f64, horizon: f64) -> Result<LiftedSystem> {
    if noise.dims() != (1, 1) {
        return Err(Error::dims("noise measure", "1x1", format!("{:?}", noise.dims())));
    }
    if noise.nodes().first() == Some(&0.0) {
        return Err(Error::param("noise measure", "atom at the origin collides with the control atom"));
    }
    let mut atoms = vec![Atom::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 0.0)];
    for a in noise.atoms() {
        atoms.push(Atom::new(DMatrix::from_row_slice(1, 2, &[0.0, a.weight[(0, 0)]]), a.node));
    }
    let measure = DiscreteMeasure::new((1, 2), atoms)?;
    let model = ModelCoefficients {
        b: DMatrix::zeros(2, 1),
        c: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
        d: DMatrix::zeros(2, 1),
        f: DMatrix::zeros(2, 1),
        beta: Curve::zero(2),
        gamma: Curve::constant(&[0.0, 1.0]),
        g0: Curve::zero(1),
        q: DMatrix::from_element(1, 1, q),
        n: DMatrix::from_element(1, 1, n),
        l: DVector::zeros(1),
        horizon,
    };
    assemble(measure, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::DiscreteMeasure;

    #[test]
    fn polynomial_curve_horner() {
        let c = Curve::polynomial(vec![DVector::from_element(1, 1.0), DVector::from_element(1, -2.0), DVector::from_element(1, 3.0)]).unwrap();
        assert_eq!(c.eval(2.0)[0], 1.0 - 4.0 + 12.0);
    }

    #[test]
    fn intro_model_nests_conventional_lq() {
        let sys = assemble(DiscreteMeasure::dirac_origin(1), ModelCoefficients::intro_regulator(1.0)).unwrap();
        let y = DVector::from_element(1, 0.3);
        let a = DVector::from_element(1, -0.7);
        assert_eq!(sys.state(0.5, &y)[0], 0.3);
        assert_eq!(sys.drift(0.5, &y, &a)[0], -0.7);
        assert_eq!(sys.diffusion(0.5, &y, &a)[0], 1.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let m = DiscreteMeasure::new((1, 2), vec![crate::kernels::Atom::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 0.0)]).unwrap();
        assert!(matches!(
            assemble(m, ModelCoefficients::intro_regulator(1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_weights_rejected() {
        let mut model = ModelCoefficients::intro_regulator(1.0);
        model.n[(0, 0)] = 0.0;
        assert!(model.validate().is_err());
        let mut model = ModelCoefficients::intro_regulator(1.0);
        model.q[(0, 0)] = -1.0;
        assert!(model.validate().is_err());
    }

    #[test]
    fn flatten_single_atom() {
        let model = ModelCoefficients::scalar(0.3, 1.2, -0.4, 0.5, Curve::zero(1), Curve::scalar(1.0), Curve::zero(1), 2.0, 1.5, 0.0, 1.0);
        let flat = flatten(&DiscreteMeasure::dirac_origin(1), &model).unwrap();
        assert_eq!(flat.b[(0, 0)], 0.3);
        assert_eq!(flat.c[(0, 0)], 1.2);
        assert_eq!(flat.d[(0, 0)], -0.4);
        assert_eq!(flat.f[(0, 0)], 0.5);
        assert_eq!(flat.q[(0, 0)], 2.0);
        assert_eq!(flat.n[(0, 0)], 1.5);
    }

    #[test]
    fn flatten_pure_mean_reversion() {
        let model = ModelCoefficients::intro_regulator(1.0);
        let m = DiscreteMeasure::scalar(&[(2.0, 1.0), (3.0, 5.0)]).unwrap();
        let flat = flatten(&m, &model).unwrap();
        assert_eq!(flat.b, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -5.0]));
        assert!(flat.q.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn flatten_round_trips_atoms() {
        let model = ModelCoefficients::scalar(0.7, -1.1, 0.2, 0.0, Curve::zero(1), Curve::scalar(1.0), Curve::zero(1), 1.0, 1.0, 0.0, 1.0);
        let m = DiscreteMeasure::scalar(&[(0.4, 0.1), (1.3, 2.0), (-0.2, 9.0)]).unwrap();
        let flat = flatten(&m, &model).unwrap();
        let back = flat.atoms(&model).unwrap();
        for ((c, x), a) in back.iter().zip(m.atoms()) {
            assert!((c - a.weight[(0, 0)]).abs() < 1e-14);
            assert!((x - a.node).abs() < 1e-13);
        }
    }
}
