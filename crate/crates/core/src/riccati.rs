//! Backward solver for the kernel Riccati system `(Γ, Λ, χ)` on an atomic
//! measure, in mild (integrating-factor) form.
//!
//! With `n` atoms the kernel `Γ_t(θᵢ, θⱼ)` is stored as one `(n d) × (n d)`
//! block matrix and `Λ_t(θᵢ)` as a stacked `n d` vector. Every measure
//! integral becomes a product with the vertical weight stack
//! `V = [c₁; …; cₙ]` (`n d × d'`):
//!
//! ```text
//! Σₖ cₖᵀ Γₖⱼ  = (Vᵀ Γ)ⱼ        Σₗ Γᵢₗ cₗ = (Γ V)ᵢ        ΣΣ cₖᵀ Γₖₗ cₗ = Vᵀ Γ V
//! ```
//!
//! Each step applies the exact decay `e^{−(θᵢ+θⱼ)Δ}` to the stiff linear part
//! and integrates the nonlinear remainder against the matching weight
//! `∫₀^Δ e^{−λu} du`.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{exp_integral, format_f64};
use crate::liftlq::{min_eigenvalue, FlatLq, LiftedSystem, ModelCoefficients};

/// Default number of time steps.
pub const DEFAULT_STEPS: usize = 2000;
/// Max tolerated `|Γ − Γᵀ|`.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Relative floor for the smallest eigenvalue of the lifted `Γ`.
pub const PSD_TOL: f64 = 1e-8;
/// Relative eigenvalue floor for `N̂` before it is treated as singular.
pub const NHAT_FLOOR: f64 = 1e-12;
/// Stiffness guard of the brute-force oracle: `max θ · Δ`.
pub const ORACLE_STIFFNESS_LIMIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Right-endpoint evaluation of the nonlinear term.
    ExpEuler,
    /// Half-step predictor, nonlinear term at the midpoint.
    ExpMidpoint,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exp-euler" => Ok(Scheme::ExpEuler),
            "exp-midpoint" => Ok(Scheme::ExpMidpoint),
            other => Err(Error::param("scheme", format!("unknown scheme `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub steps: usize,
    pub scheme: Scheme,
    pub check_invariants: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            scheme: Scheme::ExpMidpoint,
            check_invariants: true,
        }
    }
}

impl SolverOptions {
    pub fn new(steps: usize, scheme: Scheme) -> Self {
        Self {
            steps,
            scheme,
            ..Self::default()
        }
    }
}

/// Worst-case invariant measurements collected along a solve.
#[derive(Debug, Clone, Default, Serialize)]
pub struct InvariantReport {
    pub max_symmetry_error: f64,
    /// Smallest eigenvalue of `[cᵢᵀ Γ cⱼ]` divided by its scale.
    pub min_lifted_eigenvalue: f64,
    /// Smallest eigenvalue of `N̂ − N`, relative.
    pub min_nhat_excess_eigenvalue: f64,
    /// `max_t max_i Σⱼ |Γ_t(θᵢ, θⱼ)| |cⱼ|`.
    pub row_sum_bound: f64,
    pub min_nhat_eigenvalue: f64,
}

/// Time-gridded solution of the Riccati system.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    times: Vec<f64>,
    gamma: Vec<DMatrix<f64>>,
    lambda: Vec<DVector<f64>>,
    chi: Vec<f64>,
    s: Vec<DMatrix<f64>>,
    nhat: Vec<DMatrix<f64>>,
    h: Vec<DVector<f64>>,
    state_dim: usize,
    n_atoms: usize,
    invariants: InvariantReport,
}

impl RiccatiSolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Full block matrix `Γ_{t_k}`.
    pub fn gamma(&self, k: usize) -> &DMatrix<f64> {
        &self.gamma[k]
    }

    /// `Γ_{t_k}(θᵢ, θⱼ)` (`d × d`).
    pub fn gamma_block(&self, k: usize, i: usize, j: usize) -> DMatrix<f64> {
        let d = self.state_dim;
        self.gamma[k].view((i * d, j * d), (d, d)).into_owned()
    }

    /// Stacked `Λ_{t_k}`.
    pub fn lambda(&self, k: usize) -> &DVector<f64> {
        &self.lambda[k]
    }

    pub fn lambda_block(&self, k: usize, i: usize) -> DVector<f64> {
        let d = self.state_dim;
        self.lambda[k].rows(i * d, d).into_owned()
    }

    pub fn chi(&self, k: usize) -> f64 {
        self.chi[k]
    }

    /// `χ₀`, the optimal value.
    pub fn chi0(&self) -> f64 {
        self.chi[0]
    }

    /// `[S_t(θ₁) … S_t(θₙ)]` (`m × n d`).
    pub fn s(&self, k: usize) -> &DMatrix<f64> {
        &self.s[k]
    }

    pub fn nhat(&self, k: usize) -> &DMatrix<f64> {
        &self.nhat[k]
    }

    pub fn h(&self, k: usize) -> &DVector<f64> {
        &self.h[k]
    }

    pub fn invariants(&self) -> &InvariantReport {
        &self.invariants
    }

    /// Long-format CSV: `kind,t,i,j,r,c,value` with `kind ∈ {gamma, lambda, chi}`,
    /// every `stride`-th grid time.
    pub fn write_csv<W: Write>(&self, writer: W, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["kind", "t", "i", "j", "r", "c", "value"])?;
        let d = self.state_dim;
        let n = self.n_atoms;
        let mut ks: Vec<usize> = (0..self.times.len()).step_by(stride).collect();
        if *ks.last().unwrap() != self.times.len() - 1 {
            ks.push(self.times.len() - 1);
        }
        for k in ks {
            let t = format_f64(self.times[k]);
            for i in 0..n {
                for j in 0..n {
                    for r in 0..d {
                        for c in 0..d {
                            w.write_record([
                                "gamma",
                                &t,
                                &i.to_string(),
                                &j.to_string(),
                                &r.to_string(),
                                &c.to_string(),
                                &format_f64(self.gamma[k][(i * d + r, j * d + c)]),
                            ])?;
                        }
                    }
                }
                for r in 0..d {
                    w.write_record([
                        "lambda",
                        &t,
                        &i.to_string(),
                        "",
                        &r.to_string(),
                        "",
                        &format_f64(self.lambda[k][i * d + r]),
                    ])?;
                }
            }
            w.write_record(["chi", &t, "", "", "", "", &format_f64(self.chi[k])])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Precomputed structure shared by the right-hand sides.
pub(crate) struct RiccatiData<'a> {
    model: &'a ModelCoefficients,
    /// `n d × d'` vertical stack of weights.
    v: DMatrix<f64>,
    nodes: Vec<f64>,
    n: usize,
    d: usize,
}

/// Intermediate quantities at one `(t, Γ, Λ)`.
pub struct RhsTerms {
    pub r1: DMatrix<f64>,
    pub r2: DVector<f64>,
    pub r3: f64,
    pub s: DMatrix<f64>,
    pub nhat: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl<'a> RiccatiData<'a> {
    pub(crate) fn new(system: &'a LiftedSystem) -> Self {
        let model = system.model();
        let (d, dp, _) = model.dims();
        let n = system.n_atoms();
        let mut v = DMatrix::zeros(n * d, dp);
        for (i, a) in system.measure().atoms().iter().enumerate() {
            v.view_mut((i * d, 0), (d, dp)).copy_from(&a.weight);
        }
        Self {
            model,
            v,
            nodes: system.nodes(),
            n,
            d,
        }
    }

    fn tile_rows(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        // stack `block` (d × k) vertically n times
        let (r, c) = block.shape();
        let mut out = DMatrix::zeros(r * self.n, c);
        for i in 0..self.n {
            out.view_mut((i * r, 0), (r, c)).copy_from(block);
        }
        out
    }

    fn tile_cols(&self, block: &DMatrix<f64>) -> DMatrix<f64> {
        let (r, c) = block.shape();
        let mut out = DMatrix::zeros(r, c * self.n);
        for j in 0..self.n {
            out.view_mut((0, j * c), (r, c)).copy_from(block);
        }
        out
    }

    fn nhat_solver(&self, nhat: &DMatrix<f64>, t: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
        let eig = min_eigenvalue(nhat);
        let norm = nhat.amax().max(f64::MIN_POSITIVE);
        if !(eig > NHAT_FLOOR * norm) {
            return Err(Error::SingularControlWeight { t, eigmin: eig });
        }
        Cholesky::new(nhat.clone()).ok_or(Error::SingularControlWeight { t, eigmin: eig })
    }

    /// `R₁`, `R₂`, `R₃` and the cached `S`, `N̂`, `h`.
    pub(crate) fn rhs(&self, t: f64, gamma: &DMatrix<f64>, lambda: &DVector<f64>) -> Result<RhsTerms> {
        let m = self.model;
        let col = self.v.transpose() * gamma; // d' × n d
        let row = gamma * &self.v; // n d × d'
        let agg = self.v.transpose() * &row; // d' × d'
        let agg_d = &agg * &m.d; // d' × d
        let nhat = &m.n + m.f.transpose() * &agg * &m.f;
        let s = m.c.transpose() * &col + self.tile_cols(&(m.f.transpose() * &agg_d));
        let chol = self.nhat_solver(&nhat, t)?;

        let g0 = m.g0.eval(t);
        let beta_t = m.beta_tilde(t);
        let gamma_t = m.gamma_tilde(t);
        let v_lambda = self.v.transpose() * lambda; // d'
        let h = m.c.transpose() * &v_lambda + m.f.transpose() * (&agg * &gamma_t);

        let nhat_inv_s = chol.solve(&s);
        let nhat_inv_h = chol.solve(&h);

        let mut r1 = self.tile_cols(&self.tile_rows(&(&m.q + m.d.transpose() * &agg_d)));
        r1 += self.tile_rows(&(m.b.transpose() * &col));
        r1 += self.tile_cols(&(&row * &m.b));
        r1 -= s.transpose() * &nhat_inv_s;

        let base = &m.l + &m.q * &g0 + m.b.transpose() * &v_lambda + m.d.transpose() * (&agg * &gamma_t);
        let mut r2 = DVector::zeros(self.n * self.d);
        for i in 0..self.n {
            r2.rows_mut(i * self.d, self.d).copy_from(&base);
        }
        r2 += &row * &beta_t;
        r2 -= s.transpose() * &nhat_inv_h;

        let r3 = g0.dot(&(&m.q * &g0)) + 2.0 * m.l.dot(&g0) + gamma_t.dot(&(&agg * &gamma_t)) + 2.0 * beta_t.dot(&v_lambda)
            - h.dot(&nhat_inv_h);

        Ok(RhsTerms { r1, r2, r3, s, nhat, h })
    }
}

/// `R₁(Γ)` blockwise.
pub fn rhs_r1(system: &LiftedSystem, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let data = RiccatiData::new(system);
    let zero = DVector::zeros(gamma.nrows());
    Ok(data.rhs(0.0, gamma, &zero)?.r1)
}

/// `R₂(t, Γ, Λ)` stacked over atoms.
pub fn rhs_r2(system: &LiftedSystem, t: f64, gamma: &DMatrix<f64>, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(RiccatiData::new(system).rhs(t, gamma, lambda)?.r2)
}

/// `R₃(t, Γ, Λ)`.
pub fn rhs_r3(system: &LiftedSystem, t: f64, gamma: &DMatrix<f64>, lambda: &DVector<f64>) -> Result<f64> {
    Ok(RiccatiData::new(system).rhs(t, gamma, lambda)?.r3)
}

/// Entrywise decay and weight factors for one step length.
struct Factors {
    decay_gamma: DMatrix<f64>,
    weight_gamma: DMatrix<f64>,
    decay_lambda: DVector<f64>,
    weight_lambda: DVector<f64>,
}

impl Factors {
    fn new(rates: &[f64], block: usize, dt: f64) -> Self {
        let size = rates.len() * block;
        let rate = |r: usize| rates[r / block];
        Self {
            decay_gamma: DMatrix::from_fn(size, size, |r, c| (-(rate(r) + rate(c)) * dt).exp()),
            weight_gamma: DMatrix::from_fn(size, size, |r, c| exp_integral(rate(r) + rate(c), dt)),
            decay_lambda: DVector::from_fn(size, |r, _| (-rate(r) * dt).exp()),
            weight_lambda: DVector::from_fn(size, |r, _| exp_integral(rate(r), dt)),
        }
    }

    fn gamma(&self, prev: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        prev.component_mul(&self.decay_gamma) + rhs.component_mul(&self.weight_gamma)
    }

    fn lambda(&self, prev: &DVector<f64>, rhs: &DVector<f64>) -> DVector<f64> {
        prev.component_mul(&self.decay_lambda) + rhs.component_mul(&self.weight_lambda)
    }
}

fn uniform_grid(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| horizon * k as f64 / steps as f64).collect()
}

/// Backward solve of the mild Riccati system on a uniform grid.
pub fn solve_backward(system: &LiftedSystem, options: SolverOptions) -> Result<RiccatiSolution> {
    if options.steps == 0 {
        return Err(Error::param("steps", "need at least one step"));
    }
    let data = RiccatiData::new(system);
    let horizon = system.model().horizon;
    let steps = options.steps;
    let dt = horizon / steps as f64;
    let times = uniform_grid(horizon, steps);
    let size = data.n * data.d;

    let full = Factors::new(&data.nodes, data.d, dt);
    let half = Factors::new(&data.nodes, data.d, 0.5 * dt);

    let mut gamma = vec![DMatrix::zeros(size, size); steps + 1];
    let mut lambda = vec![DVector::zeros(size); steps + 1];
    let mut chi = vec![0.0; steps + 1];
    let mut cached: Vec<Option<RhsTerms>> = (0..=steps).map(|_| None).collect();
    cached[steps] = Some(data.rhs(horizon, &gamma[steps], &lambda[steps])?);

    for k in (0..steps).rev() {
        let t_next = times[k + 1];
        let t = times[k];
        let at_next = cached[k + 1].as_ref().expect("filled on previous step");
        let (g, l) = match options.scheme {
            Scheme::ExpEuler => (
                full.gamma(&gamma[k + 1], &at_next.r1),
                full.lambda(&lambda[k + 1], &at_next.r2),
            ),
            Scheme::ExpMidpoint => {
                let g_mid = half.gamma(&gamma[k + 1], &at_next.r1);
                let l_mid = half.lambda(&lambda[k + 1], &at_next.r2);
                let mid = data.rhs(0.5 * (t + t_next), &g_mid, &l_mid)?;
                (full.gamma(&gamma[k + 1], &mid.r1), full.lambda(&lambda[k + 1], &mid.r2))
            }
        };
        if g.iter().chain(l.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvariantViolation {
                invariant: "finite_solution",
                t,
                detail: "non-finite Riccati value".into(),
            });
        }
        let here = data.rhs(t, &g, &l)?;
        chi[k] = chi[k + 1] + 0.5 * dt * (here.r3 + at_next.r3);
        gamma[k] = g;
        lambda[k] = l;
        cached[k] = Some(here);
    }

    let mut s = Vec::with_capacity(steps + 1);
    let mut nhat = Vec::with_capacity(steps + 1);
    let mut h = Vec::with_capacity(steps + 1);
    for c in cached.into_iter() {
        let c = c.expect("all grid times solved");
        s.push(c.s);
        nhat.push(c.nhat);
        h.push(c.h);
    }
    let mut sol = RiccatiSolution {
        times,
        gamma,
        lambda,
        chi,
        s,
        nhat,
        h,
        state_dim: data.d,
        n_atoms: data.n,
        invariants: InvariantReport::default(),
    };
    sol.invariants = audit(&sol, system, options.check_invariants)?;
    Ok(sol)
}

/// Measures (and optionally enforces) symmetry, nonnegativity, `N̂ ≥ N`
/// and the uniform row-sum bound at every grid time.
fn audit(sol: &RiccatiSolution, system: &LiftedSystem, enforce: bool) -> Result<InvariantReport> {
    let model = system.model();
    let (d, dp, _) = model.dims();
    let n = sol.n_atoms;
    let weights: Vec<&DMatrix<f64>> = system.measure().atoms().iter().map(|a| &a.weight).collect();
    let mut blockdiag = DMatrix::zeros(n * d, n * dp);
    for (i, c) in weights.iter().enumerate() {
        blockdiag.view_mut((i * d, i * dp), (d, dp)).copy_from(c);
    }
    let weight_norms: Vec<f64> = weights.iter().map(|c| c.norm()).collect();
    let mut rep = InvariantReport {
        max_symmetry_error: 0.0,
        min_lifted_eigenvalue: f64::INFINITY,
        min_nhat_excess_eigenvalue: f64::INFINITY,
        row_sum_bound: 0.0,
        min_nhat_eigenvalue: f64::INFINITY,
    };
    for (k, g) in sol.gamma.iter().enumerate() {
        let t = sol.times[k];
        let sym = (g - g.transpose()).amax();
        rep.max_symmetry_error = rep.max_symmetry_error.max(sym);
        if enforce && sym > SYMMETRY_TOL {
            return Err(Error::InvariantViolation {
                invariant: "gamma_symmetry",
                t,
                detail: format!("max |Γ − Γᵀ| = {sym:e}"),
            });
        }
        let lifted = blockdiag.transpose() * g * &blockdiag;
        let scale = lifted.amax().max(1.0);
        let eig = min_eigenvalue(&lifted) / scale;
        rep.min_lifted_eigenvalue = rep.min_lifted_eigenvalue.min(eig);
        if enforce && eig < -PSD_TOL {
            return Err(Error::InvariantViolation {
                invariant: "gamma_nonnegative",
                t,
                detail: format!("relative eigmin {eig:e}"),
            });
        }
        let excess = &sol.nhat[k] - &model.n;
        let escale = sol.nhat[k].amax().max(1.0);
        let eig_excess = min_eigenvalue(&excess) / escale;
        rep.min_nhat_excess_eigenvalue = rep.min_nhat_excess_eigenvalue.min(eig_excess);
        if enforce && eig_excess < -PSD_TOL {
            return Err(Error::InvariantViolation {
                invariant: "nhat_dominates_n",
                t,
                detail: format!("relative eigmin of N̂ − N {eig_excess:e}"),
            });
        }
        rep.min_nhat_eigenvalue = rep.min_nhat_eigenvalue.min(min_eigenvalue(&sol.nhat[k]));
        for i in 0..n {
            let row: f64 = (0..n)
                .map(|j| g.view((i * d, j * d), (d, d)).norm() * weight_norms[j])
                .sum();
            rep.row_sum_bound = rep.row_sum_bound.max(row);
        }
    }
    if enforce && !rep.row_sum_bound.is_finite() {
        return Err(Error::InvariantViolation {
            invariant: "uniform_bound",
            t: 0.0,
            detail: "row-sum bound is not finite".into(),
        });
    }
    Ok(rep)
}

/// Classical RK4 on the non-mild form `Γ̇ = (θᵢ+θⱼ)Γ − R₁`, `Λ̇ = θΛ − R₂`,
/// `χ̇ = −R₃`; reference trajectories for non-stiff instances.
pub fn oracle_rk4(system: &LiftedSystem, steps: usize) -> Result<RiccatiSolution> {
    if steps == 0 {
        return Err(Error::param("steps", "need at least one step"));
    }
    let data = RiccatiData::new(system);
    let horizon = system.model().horizon;
    let dt = horizon / steps as f64;
    let max_node = data.nodes.iter().cloned().fold(0.0, f64::max);
    if max_node * dt > ORACLE_STIFFNESS_LIMIT {
        return Err(Error::Stiff {
            ratio: max_node * dt,
            limit: ORACLE_STIFFNESS_LIMIT,
        });
    }
    let size = data.n * data.d;
    let rate = |r: usize| data.nodes[r / data.d];
    let rates_g = DMatrix::from_fn(size, size, |r, c| rate(r) + rate(c));
    let rates_l = DVector::from_fn(size, |r, _| rate(r));
    let times = uniform_grid(horizon, steps);

    // time derivative of (Γ, Λ, χ)
    let deriv = |t: f64, g: &DMatrix<f64>, l: &DVector<f64>| -> Result<(DMatrix<f64>, DVector<f64>, f64, RhsTerms)> {
        let r = data.rhs(t, g, l)?;
        Ok((g.component_mul(&rates_g) - &r.r1, l.component_mul(&rates_l) - &r.r2, -r.r3, r))
    };

    let mut gamma = vec![DMatrix::zeros(size, size); steps + 1];
    let mut lambda = vec![DVector::zeros(size); steps + 1];
    let mut chi = vec![0.0; steps + 1];
    let mut s = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut nhat = vec![DMatrix::zeros(0, 0); steps + 1];
    let mut hv = vec![DVector::zeros(0); steps + 1];
    let h = -dt;
    for k in (0..steps).rev() {
        let t = times[k + 1];
        let (g, l, x) = (&gamma[k + 1], &lambda[k + 1], chi[k + 1]);
        let (k1g, k1l, k1x, cache) = deriv(t, g, l)?;
        s[k + 1] = cache.s;
        nhat[k + 1] = cache.nhat;
        hv[k + 1] = cache.h;
        let (k2g, k2l, k2x, _) = deriv(t + 0.5 * h, &(g + &k1g * (0.5 * h)), &(l + &k1l * (0.5 * h)))?;
        let (k3g, k3l, k3x, _) = deriv(t + 0.5 * h, &(g + &k2g * (0.5 * h)), &(l + &k2l * (0.5 * h)))?;
        let (k4g, k4l, k4x, _) = deriv(t + h, &(g + &k3g * h), &(l + &k3l * h))?;
        gamma[k] = g + (k1g + k2g * 2.0 + k3g * 2.0 + k4g) * (h / 6.0);
        lambda[k] = l + (k1l + k2l * 2.0 + k3l * 2.0 + k4l) * (h / 6.0);
        chi[k] = x + (k1x + 2.0 * k2x + 2.0 * k3x + k4x) * (h / 6.0);
    }
    let last = data.rhs(0.0, &gamma[0], &lambda[0])?;
    s[0] = last.s;
    nhat[0] = last.nhat;
    hv[0] = last.h;
    let mut sol = RiccatiSolution {
        times,
        gamma,
        lambda,
        chi,
        s,
        nhat,
        h: hv,
        state_dim: data.d,
        n_atoms: data.n,
        invariants: InvariantReport::default(),
    };
    sol.invariants = audit(&sol, system, false)?;
    Ok(sol)
}

/// Trajectory of the flat `n × n` matrix Riccati equation.
#[derive(Debug, Clone)]
pub struct FlatSolution {
    pub times: Vec<f64>,
    pub gamma: Vec<DMatrix<f64>>,
}

/// Solves `Γ̇ = −Q − BᵀΓ − ΓB − DᵀΓD + (FᵀΓD + CᵀΓ)ᵀ(N + FᵀΓF)⁻¹(FᵀΓD + CᵀΓ)`,
/// `Γ_T = 0`, with the diagonal of `B` treated by the integrating factor.
pub fn solve_flat(flat: &FlatLq, options: SolverOptions) -> Result<FlatSolution> {
    if options.steps == 0 {
        return Err(Error::param("steps", "need at least one step"));
    }
    let n = flat.b.nrows();
    let steps = options.steps;
    let dt = flat.horizon / steps as f64;
    let times = uniform_grid(flat.horizon, steps);
    let diag: Vec<f64> = (0..n).map(|i| -flat.b[(i, i)]).collect();
    let mut off = flat.b.clone();
    for i in 0..n {
        off[(i, i)] = 0.0;
    }
    let rhs = |t: f64, g: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let nhat = &flat.n + flat.f.transpose() * g * &flat.f;
        let gain = flat.f.transpose() * g * &flat.d + flat.c.transpose() * g;
        let eig = min_eigenvalue(&nhat);
        if !(eig > NHAT_FLOOR * nhat.amax().max(f64::MIN_POSITIVE)) {
            return Err(Error::SingularControlWeight { t, eigmin: eig });
        }
        let chol = Cholesky::new(nhat).ok_or(Error::SingularControlWeight { t, eigmin: eig })?;
        Ok(&flat.q + off.transpose() * g + g * &off + flat.d.transpose() * g * &flat.d - gain.transpose() * chol.solve(&gain))
    };
    let full = Factors::new(&diag, 1, dt);
    let half = Factors::new(&diag, 1, 0.5 * dt);
    let mut gamma = vec![DMatrix::zeros(n, n); steps + 1];
    for k in (0..steps).rev() {
        let t_next = times[k + 1];
        let r_next = rhs(t_next, &gamma[k + 1])?;
        gamma[k] = match options.scheme {
            Scheme::ExpEuler => full.gamma(&gamma[k + 1], &r_next),
            Scheme::ExpMidpoint => {
                let mid = half.gamma(&gamma[k + 1], &r_next);
                full.gamma(&gamma[k + 1], &rhs(t_next - 0.5 * dt, &mid)?)
            }
        };
        if options.check_invariants {
            let g = &gamma[k];
            let sym = (g - g.transpose()).amax();
            if sym > SYMMETRY_TOL {
                return Err(Error::InvariantViolation {
                    invariant: "gamma_symmetry",
                    t: times[k],
                    detail: format!("max |Γ − Γᵀ| = {sym:e}"),
                });
            }
            let eig = min_eigenvalue(g) / g.amax().max(1.0);
            if eig < -PSD_TOL {
                return Err(Error::InvariantViolation {
                    invariant: "gamma_nonnegative",
                    t: times[k],
                    detail: format!("relative eigmin {eig:e}"),
                });
            }
        }
    }
    Ok(FlatSolution { times, gamma })
}
