//! JSON run configuration. Every field has a default; the defaults describe
//! the regulator `dX = α dt + dW`, cost `∫ X² + α²` on `[0, 1]` with `K ≡ 1`.

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use svlq::kernels::{
    centered_fractional_atoms, centered_geometric_partition, discretize, Atom, DiscreteMeasure, KernelKind, KernelSpec, Partition,
};
use svlq::liftlq::{Curve, ModelCoefficients};
use svlq::riccati::{Scheme, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Riccati,
    Value,
    Simulate,
    Verify,
    Converge,
    DemoRegulator,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Riccati => "riccati",
            Task::Value => "value",
            Task::Simulate => "simulate",
            Task::Verify => "verify",
            Task::Converge => "converge",
            Task::DemoRegulator => "demo-regulator",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub converge: ConvergeConfig,
    #[serde(default)]
    pub regulator: RegulatorConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelConfig {
    Fractional { hurst: f64 },
    Gamma { hurst: f64, damping: f64 },
    /// Atoms `(weight, node)`; `weight` is given row by row.
    Atomic { atoms: Vec<AtomConfig> },
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig::Atomic {
            atoms: vec![AtomConfig {
                weight: vec![vec![1.0]],
                node: 0.0,
            }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub weight: Vec<Vec<f64>>,
    pub node: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationConfig {
    pub n: usize,
    pub r: f64,
    /// Explicit boundaries; overrides `n` and `r`.
    pub partition: Option<Vec<f64>>,
    /// Prepend the cell `[0, η₀)`.
    pub origin_cell: bool,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            n: 20,
            r: 2.5,
            partition: None,
            origin_cell: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CurveConfig {
    Zero,
    Constant { value: Vec<f64> },
    /// Coefficient vectors of `1, t, t², …`.
    Polynomial { coefficients: Vec<Vec<f64>> },
}

impl CurveConfig {
    pub fn build(&self, name: &str, dim: usize) -> Result<Curve> {
        match self {
            CurveConfig::Zero => Ok(Curve::zero(dim)),
            CurveConfig::Constant { value } => {
                if value.len() != dim {
                    bail!(svlq::Error::InvalidParameter {
                        name: "curve",
                        reason: format!("{name}: expected {dim} values, got {}", value.len()),
                    });
                }
                Ok(Curve::constant(value))
            }
            CurveConfig::Polynomial { coefficients } => {
                if coefficients.iter().any(|c| c.len() != dim) {
                    bail!(svlq::Error::InvalidParameter {
                        name: "curve",
                        reason: format!("{name}: every coefficient needs {dim} entries"),
                    });
                }
                Ok(Curve::polynomial(coefficients.iter().map(|c| DVector::from_column_slice(c)).collect())?)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub beta: CurveConfig,
    pub gamma: CurveConfig,
    pub g0: CurveConfig,
    pub q: Vec<Vec<f64>>,
    pub n: Vec<Vec<f64>>,
    pub l: Vec<f64>,
    pub horizon: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            b: vec![vec![0.0]],
            c: vec![vec![1.0]],
            d: vec![vec![0.0]],
            f: vec![vec![0.0]],
            beta: CurveConfig::Zero,
            gamma: CurveConfig::Constant { value: vec![1.0] },
            g0: CurveConfig::Zero,
            q: vec![vec![1.0]],
            n: vec![vec![1.0]],
            l: vec![0.0],
            horizon: 1.0,
        }
    }
}

fn matrix(name: &'static str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        bail!(svlq::Error::InvalidParameter {
            name,
            reason: "matrix must be a non-empty list of equal-length rows".into(),
        });
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelCoefficients> {
        let b = matrix("B", &self.b)?;
        let q = matrix("Q", &self.q)?;
        let (dp, d) = (b.nrows(), q.nrows());
        let model = ModelCoefficients {
            b,
            c: matrix("C", &self.c)?,
            d: matrix("D", &self.d)?,
            f: matrix("F", &self.f)?,
            beta: self.beta.build("beta", dp)?,
            gamma: self.gamma.build("gamma", dp)?,
            g0: self.g0.build("g0", d)?,
            q,
            n: matrix("N", &self.n)?,
            l: DVector::from_column_slice(&self.l),
            horizon: self.horizon,
        };
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            bail!(svlq::Error::InvalidParameter {
                name: "horizon",
                reason: format!("need T > 0, got {}", self.horizon),
            });
        }
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub steps: usize,
    pub scheme: Scheme,
    /// Write every `csv_stride`-th grid time to the CSV tables.
    pub csv_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            steps: svlq::riccati::DEFAULT_STEPS,
            scheme: Scheme::ExpMidpoint,
            csv_stride: 10,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolverOptions {
        SolverOptions::new(self.steps, self.scheme)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlConfig {
    Zero,
    Feedback,
    Curve { curve: CurveConfig },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Paths written to `paths.csv`.
    pub record: usize,
    pub control: ControlConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            paths: 10_000,
            steps: 500,
            seed: 0,
            record: 5,
            control: ControlConfig::Feedback,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub perturbation: CurveConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            perturbation: CurveConfig::Zero,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub ns: Vec<usize>,
    /// Explicit `rₙ`; defaults to `1 + 2/√n`.
    pub ratios: Option<Vec<f64>>,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        Self {
            ns: vec![5, 10, 20, 40],
            ratios: None,
        }
    }
}

impl ConvergeConfig {
    pub fn schedule(&self) -> Result<Vec<(usize, f64)>> {
        match &self.ratios {
            None => Ok(svlq::converge::default_schedule(&self.ns)),
            Some(r) if r.len() == self.ns.len() => Ok(self.ns.iter().cloned().zip(r.iter().cloned()).collect()),
            Some(r) => bail!(svlq::Error::InvalidParameter {
                name: "converge.ratios",
                reason: format!("{} ratios for {} values of n", r.len(), self.ns.len()),
            }),
        }
    }
}

/// Regulator with fractional noise `X = ∫α ds + ∫K_H(t−s) dW`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegulatorConfig {
    pub hurst: f64,
    pub n: usize,
    pub r: f64,
    pub q: f64,
    pub control_weight: f64,
    pub horizon: f64,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            hurst: 0.25,
            n: 20,
            r: 2.5,
            q: 1.0,
            control_weight: 1.0,
            horizon: 1.0,
        }
    }
}

impl KernelConfig {
    pub fn build(&self) -> Result<KernelSpec> {
        Ok(match self {
            KernelConfig::Fractional { hurst } => KernelSpec::fractional(*hurst)?,
            KernelConfig::Gamma { hurst, damping } => KernelSpec::gamma(*hurst, *damping)?,
            KernelConfig::Atomic { atoms } => {
                let first = atoms.first().ok_or(svlq::Error::InvalidParameter {
                    name: "kernel.atoms",
                    reason: "need at least one atom".into(),
                })?;
                let w0 = matrix("kernel.atoms.weight", &first.weight)?;
                let dims = w0.shape();
                let list = atoms
                    .iter()
                    .map(|a| Ok(Atom::new(matrix("kernel.atoms.weight", &a.weight)?, a.node)))
                    .collect::<Result<Vec<_>>>()?;
                KernelSpec::atomic(DiscreteMeasure::new(dims, list)?)
            }
        })
    }
}

/// Measure used by the solver: closed-form atoms for the fractional kernel,
/// the atoms themselves for atomic kernels without a partition, barycentric
/// cells otherwise.
pub fn build_measure(spec: &KernelSpec, disc: &DiscretizationConfig) -> Result<DiscreteMeasure> {
    let partition = match &disc.partition {
        Some(b) => {
            let p = Partition::new(b.clone())?;
            Some(if disc.origin_cell { p.with_origin_cell() } else { p.without_origin_cell() })
        }
        None => None,
    };
    Ok(match (spec.kind(), partition) {
        (KernelKind::Fractional { hurst }, None) => centered_fractional_atoms(*hurst, disc.n, disc.r)?,
        (KernelKind::AtomicSum(m), None) => m.clone(),
        (_, Some(p)) => discretize(spec, &p)?,
        (_, None) => {
            let p = centered_geometric_partition(disc.n, disc.r)?;
            let p = if disc.origin_cell { p } else { p.without_origin_cell() };
            discretize(spec, &p)?
        }
    })
}

pub fn load(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        anyhow::Error::new(svlq::Error::InvalidParameter {
            name: "config",
            reason: e.to_string(),
        })
    })
}
