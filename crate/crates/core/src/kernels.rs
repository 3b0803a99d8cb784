//! Convolution kernels written as Laplace transforms of a representing
//! measure, `K(t) = ∫ e^{-θ t} μ(dθ)`, and their reduction to finitely many
//! exponential factors.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use statrs::function::gamma::{gamma, gamma_lr};

use crate::error::{Error, Result};
use crate::quad::{adaptive, gl16};

/// Density of a matrix-valued measure, `θ ↦ dμ/dθ`.
pub type DensityFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Relative tolerance used for per-cell integrals.
pub const CELL_REL_TOL: f64 = 1e-10;
/// Cells whose mass stays below this are dropped.
pub const EMPTY_CELL_TOL: f64 = 1e-12;
/// Ratio of the graded time mesh used for L² distances.
pub const GRADED_MESH_RATIO: f64 = 1.2;
/// Number of intervals in the graded time mesh.
pub const GRADED_MESH_POINTS: usize = 200;

/// One exponential factor: a `d × d'` weight and a nonnegative node.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub weight: DMatrix<f64>,
    pub node: f64,
}

impl Atom {
    pub fn new(weight: DMatrix<f64>, node: f64) -> Self {
        Self { weight, node }
    }

    pub fn scalar(weight: f64, node: f64) -> Self {
        Self::new(DMatrix::from_element(1, 1, weight), node)
    }
}

/// How a discrete measure was obtained from a continuous one.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub boundaries: Vec<f64>,
    pub origin_cell: bool,
    pub ratio: Option<f64>,
    pub dropped_cells: usize,
}

/// Finite atomic measure `Σ cᵢ δ_{θᵢ}`; nodes strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<Atom>,
    dims: (usize, usize),
    provenance: Option<Provenance>,
}

impl DiscreteMeasure {
    /// Builds a canonical measure: atoms sorted by node, equal nodes merged,
    /// zero weights removed.
    pub fn new(dims: (usize, usize), atoms: Vec<Atom>) -> Result<Self> {
        let (d, dp) = dims;
        if d == 0 || dp == 0 {
            return Err(Error::param("dims", "dimensions must be positive"));
        }
        for a in &atoms {
            if a.weight.shape() != dims {
                return Err(Error::dims(
                    "atom weight",
                    format!("{d}x{dp}"),
                    format!("{}x{}", a.weight.nrows(), a.weight.ncols()),
                ));
            }
            if !a.node.is_finite() || a.node < 0.0 {
                return Err(Error::param("node", format!("nodes must be finite and >= 0, got {}", a.node)));
            }
            if a.weight.iter().any(|x| !x.is_finite()) {
                return Err(Error::param("weight", "weights must be finite"));
            }
        }
        let mut sorted = atoms;
        sorted.sort_by(|a, b| a.node.total_cmp(&b.node));
        let mut merged: Vec<Atom> = Vec::with_capacity(sorted.len());
        for a in sorted {
            match merged.last_mut() {
                Some(last) if last.node == a.node => last.weight += a.weight,
                _ => merged.push(a),
            }
        }
        merged.retain(|a| a.weight.amax() > 0.0);
        if merged.is_empty() {
            return Err(Error::param("atoms", "measure has no nonzero atom"));
        }
        Ok(Self {
            atoms: merged,
            dims,
            provenance: None,
        })
    }

    /// Scalar measure from `(weight, node)` pairs.
    pub fn scalar(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new((1, 1), pairs.iter().map(|&(c, x)| Atom::scalar(c, x)).collect())
    }

    /// The Dirac mass `δ₀ I` (kernel identically equal to the identity).
    pub fn dirac_origin(d: usize) -> Self {
        Self::new((d, d), vec![Atom::new(DMatrix::identity(d, d), 0.0)]).expect("identity atom")
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = Some(provenance);
        self
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn provenance(&self) -> Option<&Provenance> {
        self.provenance.as_ref()
    }

    pub fn nodes(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.node).collect()
    }

    /// Scalar weights; `None` unless the measure is `1 × 1`.
    pub fn scalar_weights(&self) -> Option<Vec<f64>> {
        (self.dims == (1, 1)).then(|| self.atoms.iter().map(|a| a.weight[(0, 0)]).collect())
    }

    /// Total mass `Σ cᵢ`, i.e. `Kⁿ(0)`.
    pub fn total_mass(&self) -> DMatrix<f64> {
        self.atoms
            .iter()
            .fold(DMatrix::zeros(self.dims.0, self.dims.1), |acc, a| acc + &a.weight)
    }

    /// Writes rows `i, theta, c (row major)`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let (d, dp) = self.dims;
        let mut header = vec!["i".to_string(), "theta".to_string()];
        for r in 0..d {
            for c in 0..dp {
                header.push(format!("c_{r}_{c}"));
            }
        }
        w.write_record(&header)?;
        for (i, a) in self.atoms.iter().enumerate() {
            let mut rec = vec![i.to_string(), format_f64(a.node)];
            for r in 0..d {
                for c in 0..dp {
                    rec.push(format_f64(a.weight[(r, c)]));
                }
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the format produced by [`write_csv`](Self::write_csv).
    pub fn read_csv<R: Read>(reader: R, dims: (usize, usize)) -> Result<Self> {
        let (d, dp) = dims;
        let mut rdr = csv::Reader::from_reader(reader);
        let mut atoms = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 + d * dp {
                return Err(Error::dims("atom csv row", 2 + d * dp, rec.len()));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::param("csv", format!("bad number `{s}`: {e}")))
            };
            let node = parse(&rec[1])?;
            let vals = (0..d * dp).map(|k| parse(&rec[2 + k])).collect::<Result<Vec<_>>>()?;
            atoms.push(Atom::new(DMatrix::from_row_slice(d, dp, &vals), node));
        }
        Self::new(dims, atoms)
    }
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

/// Symbolic kernel description.
#[derive(Clone)]
pub enum KernelKind {
    /// `K(t) = t^{H-1/2} / Γ(H+1/2)`, `0 < H ≤ 1/2`.
    Fractional { hurst: f64 },
    /// `K(t) = t^{H-1/2} e^{-ζ t} / Γ(H+1/2)`, `0 < H < 1/2`, `ζ ≥ 0`.
    Gamma { hurst: f64, damping: f64 },
    /// Finite sum of exponentials.
    AtomicSum(DiscreteMeasure),
    /// Absolutely continuous measure on a bounded support.
    Density { density: DensityFn, support: (f64, f64) },
}

impl fmt::Debug for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Fractional { hurst } => write!(f, "Fractional(H={hurst})"),
            KernelKind::Gamma { hurst, damping } => write!(f, "Gamma(H={hurst}, zeta={damping})"),
            KernelKind::AtomicSum(m) => write!(f, "AtomicSum({} atoms)", m.len()),
            KernelKind::Density { support, .. } => write!(f, "Density(support={support:?})"),
        }
    }
}

/// A kernel family together with its dimensions `(d, d')`.
#[derive(Debug, Clone)]
pub struct KernelSpec {
    kind: KernelKind,
    dims: (usize, usize),
}

impl KernelSpec {
    pub fn fractional(hurst: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst <= 0.5) {
            return Err(Error::param("hurst", format!("need 0 < H <= 1/2, got {hurst}")));
        }
        Ok(Self {
            kind: KernelKind::Fractional { hurst },
            dims: (1, 1),
        })
    }

    pub fn gamma(hurst: f64, damping: f64) -> Result<Self> {
        if !(hurst > 0.0 && hurst < 0.5) {
            return Err(Error::param("hurst", format!("need 0 < H < 1/2, got {hurst}")));
        }
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::param("damping", format!("need zeta >= 0, got {damping}")));
        }
        Ok(Self {
            kind: KernelKind::Gamma { hurst, damping },
            dims: (1, 1),
        })
    }

    pub fn atomic(measure: DiscreteMeasure) -> Self {
        let dims = measure.dims();
        Self {
            kind: KernelKind::AtomicSum(measure),
            dims,
        }
    }

    /// Measure with density on `[lo, hi]`; checks admissibility on the support.
    pub fn density(dims: (usize, usize), density: DensityFn, support: (f64, f64)) -> Result<Self> {
        let (lo, hi) = support;
        if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
            return Err(Error::param("support", format!("need 0 <= lo < hi < inf, got {support:?}")));
        }
        let probe = density(0.5 * (lo + hi));
        if probe.shape() != dims {
            return Err(Error::dims(
                "density value",
                format!("{}x{}", dims.0, dims.1),
                format!("{}x{}", probe.nrows(), probe.ncols()),
            ));
        }
        let spec = Self {
            kind: KernelKind::Density { density, support },
            dims,
        };
        spec.admissibility()?;
        Ok(spec)
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    /// `α = H + 1/2` for the fractional and gamma families.
    fn alpha(&self) -> Option<f64> {
        match self.kind {
            KernelKind::Fractional { hurst } | KernelKind::Gamma { hurst, .. } => Some(hurst + 0.5),
            _ => None,
        }
    }

    /// `(α, λ, scale)` when the measure density is `scale · (θ − λ)^{−α}` on
    /// `(λ, ∞)`.
    fn power_law(&self) -> Option<(f64, f64, f64)> {
        let (a, shift) = match self.kind {
            KernelKind::Fractional { hurst } if hurst < 0.5 => (hurst + 0.5, 0.0),
            KernelKind::Gamma { hurst, damping } => (hurst + 0.5, damping),
            _ => return None,
        };
        Some((a, shift, 1.0 / (gamma(a) * gamma(1.0 - a))))
    }

    /// Measure density at `θ`; `None` for atomic kinds or the `H = 1/2`
    /// fractional kernel, whose measure is `δ₀`.
    pub fn density_at(&self, theta: f64) -> Option<DMatrix<f64>> {
        match &self.kind {
            KernelKind::Fractional { hurst } => {
                if *hurst == 0.5 {
                    return None;
                }
                let a = hurst + 0.5;
                let v = if theta > 0.0 {
                    theta.powf(-a) / (gamma(a) * gamma(1.0 - a))
                } else {
                    f64::INFINITY
                };
                Some(DMatrix::from_element(1, 1, v))
            }
            KernelKind::Gamma { hurst, damping } => {
                let a = hurst + 0.5;
                let v = if theta > *damping {
                    (theta - damping).powf(-a) / (gamma(a) * gamma(1.0 - a))
                } else if theta == *damping {
                    f64::INFINITY
                } else {
                    0.0
                };
                Some(DMatrix::from_element(1, 1, v))
            }
            KernelKind::Density { density, support } => Some(if theta >= support.0 && theta <= support.1 {
                density(theta)
            } else {
                DMatrix::zeros(self.dims.0, self.dims.1)
            }),
            KernelKind::AtomicSum(_) => None,
        }
    }

    /// Checks `∫ (1 ∧ θ^{-1/2}) |μ|(dθ) < ∞` and returns its value.
    pub fn admissibility(&self) -> Result<f64> {
        match &self.kind {
            KernelKind::AtomicSum(m) => Ok(m
                .atoms()
                .iter()
                .map(|a| a.weight.norm() * weight_half(a.node))
                .sum()),
            KernelKind::Fractional { .. } | KernelKind::Gamma { .. } => {
                // closed-form families are admissible for 0 < H <= 1/2
                Ok(self.total_variation_integral(weight_half)?)
            }
            KernelKind::Density { .. } => {
                let v = self.total_variation_integral(weight_half)?;
                if !v.is_finite() {
                    return Err(Error::Admissibility(format!("integral evaluates to {v}")));
                }
                Ok(v)
            }
        }
    }

    /// `∫ √((1 − e^{−2θT}) / (2θ)) |μ|(dθ)`, an upper bound for `‖K‖_{L²(0,T)}`.
    pub fn l2_norm_bound(&self, horizon: f64) -> Result<f64> {
        self.total_variation_integral(|theta| exp_l2_norm(theta, horizon))
    }

    /// `∫ w(θ) |μ|(dθ)` for a nonnegative weight `w`.
    fn total_variation_integral(&self, w: impl Fn(f64) -> f64) -> Result<f64> {
        match &self.kind {
            KernelKind::AtomicSum(m) => Ok(m.atoms().iter().map(|a| a.weight.norm() * w(a.node)).sum()),
            KernelKind::Fractional { hurst } if *hurst == 0.5 => Ok(w(0.0)),
            KernelKind::Fractional { .. } | KernelKind::Gamma { .. } => {
                let shift = match self.kind {
                    KernelKind::Gamma { damping, .. } => damping,
                    _ => 0.0,
                };
                let (a, _, scale) = self.power_law().expect("power-law kind");
                // θ = shift + s / (1 − s) maps [0, 1) onto [shift, ∞); the
                // density is evaluated in u = θ − shift so it never rounds to
                // the singular point
                let mut f = |s: f64| {
                    if s >= 1.0 {
                        return DMatrix::zeros(1, 1);
                    }
                    let u = s / (1.0 - s);
                    let jac = 1.0 / ((1.0 - s) * (1.0 - s));
                    DMatrix::from_element(1, 1, scale * u.powf(-a) * w(shift + u) * jac)
                };
                let q = adaptive(0.0, 1.0, 1e-9, 0.0, &mut f);
                let v = q.value[(0, 0)];
                if !v.is_finite() {
                    return Err(Error::Admissibility(format!("integral evaluates to {v}")));
                }
                Ok(v)
            }
            KernelKind::Density { density, support } => {
                let mut f = |theta: f64| DMatrix::from_element(1, 1, density(theta).norm() * w(theta));
                let q = adaptive(support.0, support.1, 1e-9, 0.0, &mut f);
                let v = q.value[(0, 0)];
                if !v.is_finite() || !q.converged {
                    return Err(Error::Admissibility(format!(
                        "integral over {support:?} did not converge (value {v})"
                    )));
                }
                Ok(v)
            }
        }
    }
}

fn weight_half(theta: f64) -> f64 {
    if theta <= 1.0 {
        1.0
    } else {
        theta.powf(-0.5)
    }
}

/// `‖e^{−θ·}‖_{L²(0,T)}`.
fn exp_l2_norm(theta: f64, horizon: f64) -> f64 {
    exp_integral(2.0 * theta, horizon).sqrt()
}

/// `∫₀ᵀ e^{−λ s} ds`, stable for small `λ`.
pub fn exp_integral(lambda: f64, horizon: f64) -> f64 {
    if (lambda * horizon).abs() < 1e-8 {
        horizon * (1.0 - 0.5 * lambda * horizon)
    } else {
        -(-lambda * horizon).exp_m1() / lambda
    }
}

/// Leading behaviour `K(t) ≈ A t^p` as `t → 0⁺`.
#[derive(Debug, Clone)]
pub struct OriginBehavior {
    pub coefficient: DMatrix<f64>,
    pub exponent: f64,
}

/// Anything that can be evaluated as a convolution kernel on `(0, T]`.
pub trait Kernel: Send + Sync {
    fn dims(&self) -> (usize, usize);

    /// `K(t)`; errors for `t ≤ 0` when the kernel is singular there.
    fn eval(&self, t: f64) -> Result<DMatrix<f64>>;

    /// `∫_a^b K(s) ds` for `0 ≤ a ≤ b`.
    fn integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>>;

    /// Leading power law at the origin; `None` if `K` is bounded with unknown form.
    fn origin_behavior(&self) -> Option<OriginBehavior>;

    /// The atomic representation, when the kernel is a finite exponential sum.
    fn as_atomic(&self) -> Option<&DiscreteMeasure> {
        None
    }
}

impl Kernel for DiscreteMeasure {
    fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < 0.0 || !t.is_finite() {
            return Err(Error::param("t", format!("need t >= 0, got {t}")));
        }
        Ok(self
            .atoms
            .iter()
            .fold(DMatrix::zeros(self.dims.0, self.dims.1), |acc, a| {
                acc + &a.weight * (-a.node * t).exp()
            }))
    }

    fn integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
        check_interval(a, b)?;
        Ok(self
            .atoms
            .iter()
            .fold(DMatrix::zeros(self.dims.0, self.dims.1), |acc, at| {
                acc + &at.weight * ((-at.node * a).exp() * exp_integral(at.node, b - a))
            }))
    }

    fn origin_behavior(&self) -> Option<OriginBehavior> {
        Some(OriginBehavior {
            coefficient: self.total_mass(),
            exponent: 0.0,
        })
    }

    fn as_atomic(&self) -> Option<&DiscreteMeasure> {
        Some(self)
    }
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0 && b >= a && b.is_finite()) {
        return Err(Error::param("interval", format!("need 0 <= a <= b, got [{a}, {b}]")));
    }
    Ok(())
}

impl Kernel for KernelSpec {
    fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        match &self.kind {
            KernelKind::AtomicSum(m) => m.eval(t),
            KernelKind::Fractional { hurst } => {
                if *hurst == 0.5 && t >= 0.0 {
                    return Ok(DMatrix::from_element(1, 1, 1.0));
                }
                if t <= 0.0 {
                    return Err(Error::SingularKernel { t });
                }
                let a = hurst + 0.5;
                Ok(DMatrix::from_element(1, 1, t.powf(a - 1.0) / gamma(a)))
            }
            KernelKind::Gamma { hurst, damping } => {
                if t <= 0.0 {
                    return Err(Error::SingularKernel { t });
                }
                let a = hurst + 0.5;
                Ok(DMatrix::from_element(1, 1, t.powf(a - 1.0) * (-damping * t).exp() / gamma(a)))
            }
            KernelKind::Density { density, support } => {
                if t < 0.0 {
                    return Err(Error::param("t", format!("need t >= 0, got {t}")));
                }
                let mut f = |theta: f64| density(theta) * (-theta * t).exp();
                Ok(adaptive(support.0, support.1, CELL_REL_TOL, 1e-300, &mut f).value)
            }
        }
    }

    fn integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
        check_interval(a, b)?;
        match &self.kind {
            KernelKind::AtomicSum(m) => m.integral(a, b),
            KernelKind::Fractional { .. } => {
                let al = self.alpha().expect("fractional");
                let g = gamma(al + 1.0);
                Ok(DMatrix::from_element(1, 1, (b.powf(al) - a.powf(al)) / g))
            }
            KernelKind::Gamma { damping, .. } => {
                let al = self.alpha().expect("gamma");
                let v = if *damping == 0.0 {
                    (b.powf(al) - a.powf(al)) / gamma(al + 1.0)
                } else {
                    let scale = damping.powf(-al);
                    scale * (gamma_lr(al, damping * b) - if a > 0.0 { gamma_lr(al, damping * a) } else { 0.0 })
                };
                Ok(DMatrix::from_element(1, 1, v))
            }
            KernelKind::Density { density, support } => {
                let mut f = |theta: f64| density(theta) * ((-theta * a).exp() * exp_integral(theta, b - a));
                Ok(adaptive(support.0, support.1, CELL_REL_TOL, 1e-300, &mut f).value)
            }
        }
    }

    fn origin_behavior(&self) -> Option<OriginBehavior> {
        match &self.kind {
            KernelKind::AtomicSum(m) => m.origin_behavior(),
            KernelKind::Fractional { .. } | KernelKind::Gamma { .. } => {
                let a = self.alpha().expect("power family");
                Some(OriginBehavior {
                    coefficient: DMatrix::from_element(1, 1, 1.0 / gamma(a)),
                    exponent: a - 1.0,
                })
            }
            KernelKind::Density { .. } => None,
        }
    }

    fn as_atomic(&self) -> Option<&DiscreteMeasure> {
        match &self.kind {
            KernelKind::AtomicSum(m) => Some(m),
            _ => None,
        }
    }
}

/// `K(t)` for any kernel.
pub fn kernel_eval(kernel: &dyn Kernel, t: f64) -> Result<DMatrix<f64>> {
    kernel.eval(t)
}

/// Partition `η₀ < … < ηₙ` of the node axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub boundaries: Vec<f64>,
    /// Adds the cell `[0, η₀)` when `η₀ > 0`.
    pub origin_cell: bool,
    pub ratio: Option<f64>,
}

impl Partition {
    pub fn new(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(Error::param("partition", "need at least two boundaries"));
        }
        if boundaries[0] < 0.0 || boundaries.iter().any(|x| !x.is_finite()) {
            return Err(Error::param("partition", "boundaries must be finite and nonnegative"));
        }
        if boundaries.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("partition", "boundaries must be strictly increasing"));
        }
        Ok(Self {
            boundaries,
            origin_cell: false,
            ratio: None,
        })
    }

    pub fn without_origin_cell(mut self) -> Self {
        self.origin_cell = false;
        self
    }

    pub fn with_origin_cell(mut self) -> Self {
        self.origin_cell = true;
        self
    }

    /// Cells `[lo, hi]` in increasing order, including the origin cell when enabled.
    pub fn cells(&self) -> Vec<(f64, f64)> {
        let mut cells = Vec::with_capacity(self.boundaries.len());
        if self.origin_cell && self.boundaries[0] > 0.0 {
            cells.push((0.0, self.boundaries[0]));
        }
        cells.extend(self.boundaries.windows(2).map(|w| (w[0], w[1])));
        cells
    }
}

/// Geometric boundaries `ηᵢ = r^{i − n/2}`, `i = 0..=n`, with the origin
/// cell `[0, r^{−n/2})` enabled.
pub fn geometric_partition(n: usize, ratio: f64) -> Result<Partition> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::param("n", format!("geometric partition needs an even positive n, got {n}")));
    }
    centered_geometric_partition(n, ratio)
}

/// Same as [`geometric_partition`] but accepts odd `n` (half-integer exponents).
pub fn centered_geometric_partition(n: usize, ratio: f64) -> Result<Partition> {
    if n == 0 {
        return Err(Error::param("n", "need n >= 1"));
    }
    if !(ratio > 1.0 && ratio.is_finite()) {
        return Err(Error::param("r", format!("need r > 1, got {ratio}")));
    }
    let half = n as f64 / 2.0;
    let boundaries = (0..=n).map(|i| ratio.powf(i as f64 - half)).collect();
    let mut p = Partition::new(boundaries)?;
    p.origin_cell = true;
    p.ratio = Some(ratio);
    Ok(p)
}

/// Barycentric discretization: each cell becomes one atom carrying the
/// cell's mass at the cell's total-variation barycenter.
pub fn discretize(spec: &KernelSpec, partition: &Partition) -> Result<DiscreteMeasure> {
    let dims = spec.dims();
    let cells = partition.cells();
    let last = cells.len() - 1;
    let mut atoms = Vec::with_capacity(cells.len());
    let mut dropped = 0usize;
    for (k, &(lo, hi)) in cells.iter().enumerate() {
        let (mass, bary) = match spec.kind() {
            KernelKind::AtomicSum(m) => cell_of_atoms(m, lo, hi, k == last),
            KernelKind::Fractional { hurst } if *hurst == 0.5 => {
                let dirac = DiscreteMeasure::dirac_origin(1);
                cell_of_atoms(&dirac, lo, hi, k == last)
            }
            _ => cell_of_density(spec, lo, hi)?,
        };
        if mass.amax() <= EMPTY_CELL_TOL {
            dropped += 1;
            continue;
        }
        atoms.push(Atom::new(mass, bary.clamp(lo, hi)));
    }
    if dropped > 0 {
        log::warn!("discretize: dropped {dropped} empty cell(s)");
    }
    let measure = DiscreteMeasure::new(dims, atoms)?;
    Ok(measure.with_provenance(Provenance {
        boundaries: partition.boundaries.clone(),
        origin_cell: partition.origin_cell,
        ratio: partition.ratio,
        dropped_cells: dropped,
    }))
}

fn cell_of_atoms(m: &DiscreteMeasure, lo: f64, hi: f64, closed: bool) -> (DMatrix<f64>, f64) {
    let (d, dp) = m.dims();
    let mut mass = DMatrix::zeros(d, dp);
    let mut tv = 0.0;
    let mut moment = 0.0;
    for a in m.atoms() {
        let inside = a.node >= lo && (a.node < hi || (closed && a.node <= hi));
        if inside {
            mass += &a.weight;
            let w = a.weight.norm();
            tv += w;
            moment += w * a.node;
        }
    }
    let bary = if tv > 0.0 { moment / tv } else { 0.5 * (lo + hi) };
    (mass, bary)
}

fn cell_of_density(spec: &KernelSpec, lo: f64, hi: f64) -> Result<(DMatrix<f64>, f64)> {
    if let Some((a, shift, scale)) = spec.power_law() {
        // exact antiderivatives of u^{−α} and (u + λ) u^{−α}, u = θ − λ
        let u = |x: f64| (x - shift).max(0.0);
        let m = |x: f64| u(x).powf(1.0 - a) / (1.0 - a);
        let m1 = |x: f64| u(x).powf(2.0 - a) / (2.0 - a) + shift * m(x);
        let mass = scale * (m(hi) - m(lo));
        let bary = if mass > 0.0 { scale * (m1(hi) - m1(lo)) / mass } else { 0.5 * (lo + hi) };
        return Ok((DMatrix::from_element(1, 1, mass), bary));
    }
    let (d, dp) = spec.dims();
    // pack [mass entries..., |μ| mass, |μ| first moment] into one integrand
    let mut f = |theta: f64| {
        let dens = spec.density_at(theta).expect("density kind");
        let mut v = DMatrix::zeros(d * dp + 2, 1);
        for r in 0..d {
            for c in 0..dp {
                v[(r * dp + c, 0)] = dens[(r, c)];
            }
        }
        let tv = dens.norm();
        v[(d * dp, 0)] = tv;
        v[(d * dp + 1, 0)] = tv * theta;
        v
    };
    let q = adaptive(lo, hi, CELL_REL_TOL, 0.0, &mut f);
    if q.value.iter().any(|x| !x.is_finite()) {
        return Err(Error::Admissibility(format!("density not integrable on [{lo}, {hi}]")));
    }
    if !q.converged {
        log::warn!("cell [{lo}, {hi}] integral did not reach tolerance (est. {:e})", q.error_estimate);
    }
    let mass = DMatrix::from_fn(d, dp, |r, c| q.value[(r * dp + c, 0)]);
    let tv = q.value[(d * dp, 0)];
    let bary = if tv > 0.0 { q.value[(d * dp + 1, 0)] / tv } else { 0.5 * (lo + hi) };
    Ok((mass, bary))
}

/// Closed-form barycentric atoms of the fractional measure on the geometric
/// partition `ηᵢ = r^{i−n/2}` (no origin cell).
pub fn fractional_atoms(hurst: f64, n: usize, ratio: f64) -> Result<DiscreteMeasure> {
    if n == 0 || !n.is_multiple_of(2) {
        return Err(Error::param("n", format!("need an even positive n, got {n}")));
    }
    centered_fractional_atoms(hurst, n, ratio)
}

/// [`fractional_atoms`] without the parity restriction on `n`.
pub fn centered_fractional_atoms(hurst: f64, n: usize, ratio: f64) -> Result<DiscreteMeasure> {
    if !(hurst > 0.0 && hurst <= 0.5) {
        return Err(Error::param("hurst", format!("need 0 < H <= 1/2, got {hurst}")));
    }
    if n == 0 {
        return Err(Error::param("n", "need n >= 1"));
    }
    if !(ratio > 1.0 && ratio.is_finite()) {
        return Err(Error::param("r", format!("need r > 1, got {ratio}")));
    }
    let half = n as f64 / 2.0;
    let provenance = Provenance {
        boundaries: (0..=n).map(|i| ratio.powf(i as f64 - half)).collect(),
        origin_cell: false,
        ratio: Some(ratio),
        dropped_cells: 0,
    };
    if hurst == 0.5 {
        // μ_{1/2} = δ₀: the whole mass sits below every geometric cell
        return Ok(DiscreteMeasure::dirac_origin(1).with_provenance(provenance));
    }
    let a = hurst + 0.5;
    let weight_scale = (ratio.powf(1.0 - a) - 1.0) * ratio.powf((a - 1.0) * (1.0 + half)) / (gamma(a) * gamma(2.0 - a));
    let node_scale = (1.0 - a) / (2.0 - a) * (ratio.powf(2.0 - a) - 1.0) / (ratio.powf(1.0 - a) - 1.0);
    let atoms = (1..=n)
        .map(|i| {
            let i = i as f64;
            Atom::scalar(
                weight_scale * ratio.powf((1.0 - a) * i),
                node_scale * ratio.powf(i - 1.0 - half),
            )
        })
        .collect();
    Ok(DiscreteMeasure::new((1, 1), atoms)?.with_provenance(provenance))
}

/// `‖a − b‖_{L²(0,T)}` in the Frobenius norm.
///
/// Atomic pairs use the exact closed form. Otherwise the integral runs over
/// the graded mesh `t_k = T q^{−(K−k)}` with 16-point Gauss–Legendre panels, and
/// the head `[0, t₀]` is integrated from the kernels' leading power laws.
pub fn kernel_l2_error(a: &dyn Kernel, b: &dyn Kernel, horizon: f64) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dims(
            "kernel_l2_error",
            format!("{:?}", a.dims()),
            format!("{:?}", b.dims()),
        ));
    }
    l2_distance(a, Some(b), horizon)
}

/// `‖K‖_{L²(0,T)}`.
pub fn kernel_l2_norm(k: &dyn Kernel, horizon: f64) -> Result<f64> {
    l2_distance(k, None, horizon)
}

fn l2_distance(a: &dyn Kernel, b: Option<&dyn Kernel>, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::param("horizon", format!("need T > 0, got {horizon}")));
    }
    for k in std::iter::once(a).chain(b) {
        if let Some(ob) = k.origin_behavior() {
            if ob.exponent <= -0.5 {
                return Err(Error::NotSquareIntegrable(format!(
                    "kernel behaves like t^{} at the origin",
                    ob.exponent
                )));
            }
        }
    }
    let atomic_pair = match b {
        Some(b) => a.as_atomic().zip(b.as_atomic()),
        None => a.as_atomic().map(|m| (m, m)),
    };
    if let Some((ma, mb)) = atomic_pair {
        let mut atoms: Vec<Atom> = ma.atoms().to_vec();
        if b.is_some() {
            atoms.extend(mb.atoms().iter().map(|x| Atom::new(-&x.weight, x.node)));
        }
        return Ok(atomic_l2(atoms, horizon));
    }
    graded_l2(a, b, horizon)
}

fn atomic_l2(atoms: Vec<Atom>, horizon: f64) -> f64 {
    // merge equal nodes so that identical kernels cancel exactly
    let mut atoms = atoms;
    atoms.sort_by(|x, y| x.node.total_cmp(&y.node));
    let mut merged: Vec<Atom> = Vec::new();
    for a in atoms {
        match merged.last_mut() {
            Some(l) if l.node == a.node => l.weight += a.weight,
            _ => merged.push(a),
        }
    }
    merged.retain(|a| a.weight.amax() > 0.0);
    let mut sum = 0.0;
    for p in &merged {
        for q in &merged {
            let inner = p.weight.dot(&q.weight);
            sum += inner * exp_integral(p.node + q.node, horizon);
        }
    }
    sum.max(0.0).sqrt()
}

fn graded_l2(a: &dyn Kernel, b: Option<&dyn Kernel>, horizon: f64) -> Result<f64> {
    let q = GRADED_MESH_RATIO;
    let k_max = GRADED_MESH_POINTS;
    let mesh: Vec<f64> = (0..=k_max).map(|k| horizon / q.powi((k_max - k) as i32)).collect();
    let t0 = mesh[0];
    let diff = |t: f64| -> Result<f64> {
        let va = a.eval(t)?;
        Ok(match b {
            Some(b) => (va - b.eval(t)?).norm_squared(),
            None => va.norm_squared(),
        })
    };
    let head = match (a.origin_behavior(), b.map(|b| b.origin_behavior())) {
        (Some(oa), Some(Some(ob))) => power_head(&oa, Some(&ob), t0),
        (Some(oa), None) => power_head(&oa, None, t0),
        _ => diff(t0)? * t0,
    };
    let rule = gl16();
    let mut total = head;
    for w in mesh.windows(2) {
        let mut err = None;
        let v = rule.integrate(w[0], w[1], |t| match diff(t) {
            Ok(v) => v,
            Err(e) => {
                err = Some(e);
                0.0
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        total += v;
    }
    Ok(total.max(0.0).sqrt())
}

/// `∫₀^{t₀} |A t^p − B t^q|² dt` from the leading power laws.
fn power_head(a: &OriginBehavior, b: Option<&OriginBehavior>, t0: f64) -> f64 {
    let mono = |e: f64| t0.powf(e + 1.0) / (e + 1.0);
    let mut v = a.coefficient.norm_squared() * mono(2.0 * a.exponent);
    if let Some(b) = b {
        v += b.coefficient.norm_squared() * mono(2.0 * b.exponent);
        v -= 2.0 * a.coefficient.dot(&b.coefficient) * mono(a.exponent + b.exponent);
    }
    v.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn canonicalization_sorts_and_merges() {
        let m = DiscreteMeasure::scalar(&[(1.0, 2.0), (2.0, 0.5), (3.0, 2.0), (0.0, 7.0)]).unwrap();
        assert_eq!(m.nodes(), vec![0.5, 2.0]);
        assert_eq!(m.scalar_weights().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn negative_node_rejected() {
        assert!(DiscreteMeasure::scalar(&[(1.0, -0.1)]).is_err());
        assert!(DiscreteMeasure::scalar(&[(0.0, 1.0)]).is_err());
    }

    #[test]
    fn point_mass_is_recovered_by_discretize() {
        let spec = KernelSpec::atomic(DiscreteMeasure::scalar(&[(1.0, 0.7)]).unwrap());
        let part = Partition::new(vec![0.0, 1.0, 2.0]).unwrap();
        let m = discretize(&spec, &part).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.atoms()[0].node, 0.7);
        assert_eq!(m.atoms()[0].weight[(0, 0)], 1.0);
        assert_eq!(m.provenance().unwrap().dropped_cells, 1);
    }

    #[test]
    fn uniform_density_cells() {
        let f: DensityFn = Arc::new(|_| DMatrix::from_element(1, 1, 1.0));
        let spec = KernelSpec::density((1, 1), f, (0.0, 2.0)).unwrap();
        let part = Partition::new(vec![0.0, 1.0, 2.0]).unwrap();
        let m = discretize(&spec, &part).unwrap();
        assert_eq!(m.len(), 2);
        assert_relative_eq!(m.atoms()[0].weight[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.atoms()[0].node, 0.5, epsilon = 1e-12);
        assert_relative_eq!(m.atoms()[1].weight[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(m.atoms()[1].node, 1.5, epsilon = 1e-12);
    }

    #[test]
    fn geometric_partition_examples() {
        let p = geometric_partition(2, 4.0).unwrap();
        assert_eq!(p.boundaries, vec![0.25, 1.0, 4.0]);
        assert!(p.origin_cell);
        let p = geometric_partition(20, 2.5).unwrap();
        assert_eq!(p.boundaries.len(), 21);
        assert_relative_eq!(p.boundaries[0], 2.5f64.powi(-10), max_relative = 1e-14);
        assert_relative_eq!(p.boundaries[20], 2.5f64.powi(10), max_relative = 1e-14);
        assert!(geometric_partition(4, 1.0).is_err());
        assert!(geometric_partition(3, 2.0).is_err());
    }

    #[test]
    fn fractional_hurst_validation() {
        assert!(fractional_atoms(0.0, 4, 2.0).is_err());
        assert!(fractional_atoms(0.6, 4, 2.0).is_err());
        assert!(KernelSpec::fractional(0.7).is_err());
    }

    #[test]
    fn fractional_atoms_positive() {
        for &(h, n, r) in &[(0.05, 4, 1.5), (0.25, 20, 2.5), (0.45, 40, 1.3)] {
            let m = fractional_atoms(h, n, r).unwrap();
            assert_eq!(m.len(), n);
            for a in m.atoms() {
                assert!(a.weight[(0, 0)] > 0.0 && a.node > 0.0);
            }
        }
    }

    #[test]
    fn half_hurst_gives_flat_kernel() {
        let m = fractional_atoms(0.5, 20, 2.5).unwrap();
        let flat = KernelSpec::fractional(0.5).unwrap();
        for k in 0..=100 {
            let t = k as f64 / 100.0;
            let v = m.eval(t).unwrap()[(0, 0)];
            assert!((v - 1.0).abs() <= 0.01);
        }
        assert!(kernel_l2_error(&m, &flat, 1.0).unwrap() < 1e-12);
    }

    #[test]
    fn kernel_eval_examples() {
        let one = DiscreteMeasure::scalar(&[(1.0, 0.0)]).unwrap();
        for t in [0.0, 0.3, 10.0] {
            assert_eq!(one.eval(t).unwrap()[(0, 0)], 1.0);
        }
        let two = DiscreteMeasure::scalar(&[(2.0, 1.0), (3.0, 2.0)]).unwrap();
        assert_eq!(two.eval(0.0).unwrap()[(0, 0)], 5.0);
        let frac = KernelSpec::fractional(0.25).unwrap();
        // Γ(3/4) = 1.2254167024651776451290983...
        assert_relative_eq!(frac.eval(1.0).unwrap()[(0, 0)], 1.0 / 1.225_416_702_465_177_6, max_relative = 1e-13);
        assert!(matches!(frac.eval(0.0), Err(Error::SingularKernel { .. })));
    }

    #[test]
    fn l2_error_of_two_exponentials() {
        let a = DiscreteMeasure::scalar(&[(1.0, 1.0)]).unwrap();
        let b = DiscreteMeasure::scalar(&[(1.0, 2.0)]).unwrap();
        let e2 = (-2.0f64).exp();
        let e3 = (-3.0f64).exp();
        let e4 = (-4.0f64).exp();
        let exact = ((1.0 - e2) / 2.0 - 2.0 * (1.0 - e3) / 3.0 + (1.0 - e4) / 4.0).sqrt();
        let v = kernel_l2_error(&a, &b, 1.0).unwrap();
        assert_relative_eq!(v, exact, max_relative = 1e-12);
        assert_relative_eq!(v, 0.21042, epsilon = 5e-6);
        assert_eq!(kernel_l2_error(&a, &a, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn graded_mesh_agrees_with_closed_form_on_atoms() {
        // force the quadrature path by wrapping the atoms in a density-free spec
        struct Opaque(DiscreteMeasure);
        impl Kernel for Opaque {
            fn dims(&self) -> (usize, usize) {
                self.0.dims()
            }
            fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
                self.0.eval(t)
            }
            fn integral(&self, a: f64, b: f64) -> Result<DMatrix<f64>> {
                self.0.integral(a, b)
            }
            fn origin_behavior(&self) -> Option<OriginBehavior> {
                self.0.origin_behavior()
            }
        }
        let a = DiscreteMeasure::scalar(&[(1.0, 0.3), (-0.5, 40.0)]).unwrap();
        let b = DiscreteMeasure::scalar(&[(0.7, 2.0)]).unwrap();
        let exact = kernel_l2_error(&a, &b, 2.0).unwrap();
        let quad = kernel_l2_error(&Opaque(a), &b, 2.0).unwrap();
        assert_relative_eq!(exact, quad, max_relative = 1e-10);
    }

    #[test]
    fn fractional_l2_norm_closed_form() {
        // ‖K_H‖²_{L²(0,T)} = T^{2H} / (2H Γ(H+1/2)²)
        let h = 0.1;
        let spec = KernelSpec::fractional(h).unwrap();
        let v = kernel_l2_norm(&spec, 1.0).unwrap();
        let exact = (1.0 / (2.0 * h * gamma(h + 0.5).powi(2))).sqrt();
        assert_relative_eq!(v, exact, max_relative = 1e-9);
    }

    #[test]
    fn gamma_kernel_integral_matches_quadrature() {
        let spec = KernelSpec::gamma(0.2, 1.5).unwrap();
        let closed = spec.integral(0.1, 0.9).unwrap()[(0, 0)];
        let quad = crate::quad::adaptive_scalar(0.1, 0.9, 1e-12, |t| spec.eval(t).unwrap()[(0, 0)]);
        assert_relative_eq!(closed, quad, max_relative = 1e-10);
    }

    #[test]
    fn density_requires_integrability() {
        let f: DensityFn = Arc::new(|t: f64| DMatrix::from_element(1, 1, 1.0 / t));
        assert!(KernelSpec::density((1, 1), f, (0.0, 1.0)).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = DiscreteMeasure::new(
            (1, 2),
            vec![
                Atom::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 0.0),
                Atom::new(DMatrix::from_row_slice(1, 2, &[0.0, 0.123456789]), 3.5),
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("i,theta,c_0_0,c_0_1"));
        let back = DiscreteMeasure::read_csv(&buf[..], (1, 2)).unwrap();
        assert_eq!(back.atoms(), m.atoms());
    }
}
