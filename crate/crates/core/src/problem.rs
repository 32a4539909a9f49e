//! Problem instances: periodic diffusion `A(y)`, Hamiltonian `H(p, y)`, initial
//! data `g`, and sampled checks of the structure conditions they must satisfy.

use std::f64::consts::LN_2;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unit, sym_eigenvalues, vect_from_slice, BoxRegion, Mat, Vect};
use crate::trig::TrigSeries;

/// Structure-condition constants.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProblemBounds {
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub lambda_upper: f64,
    pub alpha: f64,
    pub alpha_prime: f64,
    pub beta: f64,
    pub beta_prime: f64,
    #[serde(rename = "K")]
    pub k_reg: f64,
    #[serde(rename = "L")]
    pub l_data: f64,
}

impl ProblemBounds {
    pub fn check(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.lambda <= self.lambda_upper
            && self.alpha > 0.0
            && self.alpha <= self.beta
            && self.alpha_prime >= 0.0
            && self.beta_prime >= 0.0
            && self.k_reg > 0.0
            && self.l_data > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "bounds violate 0 < lambda <= Lambda, 0 < alpha <= beta, alpha', beta' >= 0, K, L > 0: {self:?}"
            )))
        }
    }

    /// Bounds `alpha |p|^2 - alpha' <= value <= beta |p|^2 + beta'`.
    pub fn growth_interval(&self, p_norm2: f64) -> (f64, f64) {
        (
            self.alpha * p_norm2 - self.alpha_prime,
            self.beta * p_norm2 + self.beta_prime,
        )
    }
}

/// Symmetric periodic diffusion matrix with trigonometric-series entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Diffusion<const D: usize> {
    entries: Vec<TrigSeries>,
}

impl<const D: usize> Diffusion<D> {
    fn slot(a: usize, b: usize) -> usize {
        let (i, j) = if a <= b { (a, b) } else { (b, a) };
        // upper triangle, row major
        i * D - i * (i + 1) / 2 + j
    }

    pub fn identity() -> Self {
        Self::scalar(TrigSeries::constant(1.0))
    }

    /// `A(y) = a(y) I`.
    pub fn scalar(a: TrigSeries) -> Self {
        let mut entries = vec![TrigSeries::zero(); D * (D + 1) / 2];
        for i in 0..D {
            entries[Self::slot(i, i)] = a.clone();
        }
        Self { entries }
    }

    /// Builds from a full matrix of series, requiring symmetry.
    pub fn from_matrix(rows: Vec<Vec<TrigSeries>>) -> Result<Self> {
        if rows.len() != D || rows.iter().any(|r| r.len() != D) {
            return Err(Error::InvalidInput(format!("diffusion matrix must be {D}x{D}")));
        }
        let mut entries = vec![TrigSeries::zero(); D * (D + 1) / 2];
        for i in 0..D {
            for j in i..D {
                if rows[i][j] != rows[j][i] {
                    return Err(Error::InvalidInput(format!(
                        "diffusion matrix is not symmetric at ({i},{j})"
                    )));
                }
                rows[i][j].check_dim(D)?;
                entries[Self::slot(i, j)] = rows[i][j].clone();
            }
        }
        Ok(Self { entries })
    }

    pub fn entry(&self, a: usize, b: usize) -> &TrigSeries {
        &self.entries[Self::slot(a, b)]
    }

    pub fn eval(&self, y: &Vect<D>) -> Mat<D> {
        let mut m = Mat::<D>::zeros();
        for i in 0..D {
            for j in i..D {
                let v = self.entries[Self::slot(i, j)].eval(y);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn to_rows(&self) -> Vec<Vec<TrigSeries>> {
        (0..D)
            .map(|i| (0..D).map(|j| self.entry(i, j).clone()).collect())
            .collect()
    }
}

/// Hamiltonian family tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HamiltonianFamily {
    SeparableQuadratic,
    AnisotropicQuadratic,
    Custom,
}

/// Pointwise coefficients of a Hamiltonian that is quadratic in `p`:
/// `H(p, y) = p·M p + b·p + V`.
#[derive(Clone, Copy, Debug)]
pub struct QuadraticCoefficients<const D: usize> {
    pub matrix: Mat<D>,
    pub drift: Vect<D>,
    pub potential: f64,
}

/// A Hamiltonian `H(p, y)`, periodic in `y`, with derivatives in `p`.
pub trait Hamiltonian<const D: usize>: Send + Sync + fmt::Debug {
    fn value(&self, p: &Vect<D>, y: &Vect<D>) -> f64;

    fn gradient(&self, p: &Vect<D>, y: &Vect<D>) -> Vect<D>;

    fn hessian(&self, p: &Vect<D>, y: &Vect<D>) -> Mat<D>;

    /// `D_p^l H(p, y)` applied to `dirs` (`l = dirs.len()`).
    fn multilinear(&self, p: &Vect<D>, y: &Vect<D>, dirs: &[Vect<D>]) -> f64;

    fn family(&self) -> HamiltonianFamily;

    /// Exact pointwise coefficients when the Hamiltonian is quadratic in `p`.
    fn quadratic_coefficients(&self, _y: &Vect<D>) -> Option<QuadraticCoefficients<D>> {
        None
    }

    /// Whether `p`-derivatives are exact (as opposed to finite differences).
    fn analytic_derivatives(&self) -> bool {
        true
    }
}

/// `H(p, y) = p·M(y) p + b(y)·p + V(y)`.
///
/// The separable family uses `M = c I` with constant `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticHamiltonian<const D: usize> {
    family: HamiltonianFamily,
    matrix: Diffusion<D>,
    drift: Vec<TrigSeries>,
    potential: TrigSeries,
}

impl<const D: usize> QuadraticHamiltonian<D> {
    pub fn separable(c: f64, drift: Vec<TrigSeries>, potential: TrigSeries) -> Result<Self> {
        let drift = if drift.is_empty() {
            vec![TrigSeries::zero(); D]
        } else {
            drift
        };
        if drift.len() != D {
            return Err(Error::InvalidInput(format!("drift needs {D} components")));
        }
        for s in drift.iter().chain(std::iter::once(&potential)) {
            s.check_dim(D)?;
        }
        Ok(Self {
            family: HamiltonianFamily::SeparableQuadratic,
            matrix: Diffusion::scalar(TrigSeries::constant(c)),
            drift,
            potential,
        })
    }

    pub fn anisotropic(matrix: Vec<Vec<TrigSeries>>, potential: TrigSeries) -> Result<Self> {
        potential.check_dim(D)?;
        Ok(Self {
            family: HamiltonianFamily::AnisotropicQuadratic,
            matrix: Diffusion::from_matrix(matrix)?,
            drift: vec![TrigSeries::zero(); D],
            potential,
        })
    }

    /// `H(p, y) = |p|^2 + V(y)`.
    pub fn with_potential(potential: TrigSeries) -> Result<Self> {
        Self::separable(1.0, Vec::new(), potential)
    }

    fn coefficients(&self, y: &Vect<D>) -> QuadraticCoefficients<D> {
        let mut drift = Vect::<D>::zeros();
        for a in 0..D {
            drift[a] = self.drift[a].eval(y);
        }
        QuadraticCoefficients {
            matrix: self.matrix.eval(y),
            drift,
            potential: self.potential.eval(y),
        }
    }

    pub fn matrix(&self) -> &Diffusion<D> {
        &self.matrix
    }

    pub fn drift(&self) -> &[TrigSeries] {
        &self.drift
    }

    pub fn potential(&self) -> &TrigSeries {
        &self.potential
    }
}

impl<const D: usize> Hamiltonian<D> for QuadraticHamiltonian<D> {
    fn value(&self, p: &Vect<D>, y: &Vect<D>) -> f64 {
        let c = self.coefficients(y);
        p.dot(&(c.matrix * p)) + c.drift.dot(p) + c.potential
    }

    fn gradient(&self, p: &Vect<D>, y: &Vect<D>) -> Vect<D> {
        let c = self.coefficients(y);
        2.0 * c.matrix * p + c.drift
    }

    fn hessian(&self, _p: &Vect<D>, y: &Vect<D>) -> Mat<D> {
        2.0 * self.matrix.eval(y)
    }

    fn multilinear(&self, p: &Vect<D>, y: &Vect<D>, dirs: &[Vect<D>]) -> f64 {
        match dirs.len() {
            0 => self.value(p, y),
            1 => self.gradient(p, y).dot(&dirs[0]),
            2 => 2.0 * dirs[0].dot(&(self.matrix.eval(y) * dirs[1])),
            _ => 0.0,
        }
    }

    fn family(&self) -> HamiltonianFamily {
        self.family
    }

    fn quadratic_coefficients(&self, y: &Vect<D>) -> Option<QuadraticCoefficients<D>> {
        Some(self.coefficients(y))
    }
}

type ScalarFn<const D: usize> = dyn Fn(&Vect<D>, &Vect<D>) -> f64 + Send + Sync;

/// User-supplied Hamiltonian known only through its values; every
/// `p`-derivative is a nested central difference with step `1e-3 (1 + |p|)`.
#[derive(Clone)]
pub struct FiniteDifferenceHamiltonian<const D: usize> {
    f: Arc<ScalarFn<D>>,
}

impl<const D: usize> fmt::Debug for FiniteDifferenceHamiltonian<D> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FiniteDifferenceHamiltonian")
    }
}

impl<const D: usize> FiniteDifferenceHamiltonian<D> {
    pub fn new(f: impl Fn(&Vect<D>, &Vect<D>) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }

    fn step(p: &Vect<D>) -> f64 {
        1e-3 * (1.0 + p.norm())
    }
}

impl<const D: usize> Hamiltonian<D> for FiniteDifferenceHamiltonian<D> {
    fn value(&self, p: &Vect<D>, y: &Vect<D>) -> f64 {
        (self.f)(p, y)
    }

    fn gradient(&self, p: &Vect<D>, y: &Vect<D>) -> Vect<D> {
        let mut g = Vect::<D>::zeros();
        for a in 0..D {
            g[a] = self.multilinear(p, y, &[unit::<D>(a, 1.0)]);
        }
        g
    }

    fn hessian(&self, p: &Vect<D>, y: &Vect<D>) -> Mat<D> {
        let mut h = Mat::<D>::zeros();
        for a in 0..D {
            for b in a..D {
                let v = self.multilinear(p, y, &[unit::<D>(a, 1.0), unit::<D>(b, 1.0)]);
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        h
    }

    fn multilinear(&self, p: &Vect<D>, y: &Vect<D>, dirs: &[Vect<D>]) -> f64 {
        let l = dirs.len();
        if l == 0 {
            return self.value(p, y);
        }
        let h = Self::step(p);
        let mut acc = 0.0;
        for mask in 0..(1usize << l) {
            let mut q = *p;
            let mut sign = 1.0;
            for (i, d) in dirs.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    q += h * d;
                } else {
                    q -= h * d;
                    sign = -sign;
                }
            }
            acc += sign * (self.f)(&q, y);
        }
        acc / (2.0 * h).powi(l as i32)
    }

    fn family(&self) -> HamiltonianFamily {
        HamiltonianFamily::Custom
    }

    fn analytic_derivatives(&self) -> bool {
        false
    }
}

/// Initial data known only through user callbacks.
pub trait InitialProfile<const D: usize>: Send + Sync + fmt::Debug {
    fn value(&self, x: &Vect<D>) -> f64;
    fn gradient(&self, x: &Vect<D>) -> Vect<D>;
    fn hessian(&self, x: &Vect<D>) -> Mat<D>;
    /// Frobenius norm of `D^k g(x)`.
    fn derivative_norm(&self, k: usize, x: &Vect<D>) -> f64;
}

/// Convex, Lipschitz initial data `g` with `g(0) = 0`.
#[derive(Clone, Debug)]
pub enum InitialData<const D: usize> {
    /// `g(x) = p·x`.
    Affine { slope: Vect<D> },
    /// Per coordinate `½(p₊+p₋)x + ½(p₊−p₋)σ logcosh(x/σ)`, summed over axes.
    LogcoshRamp {
        p_minus: Vect<D>,
        p_plus: Vect<D>,
        sigma: f64,
    },
    Custom(Arc<dyn InitialProfile<D>>),
}

/// Coefficients of `d^n/dz^n tanh(z)` as a polynomial in `tanh(z)`.
fn tanh_derivative_poly(n: usize) -> Vec<f64> {
    let mut poly = vec![0.0, 1.0];
    for _ in 0..n {
        // P' (1 - T^2)
        let deriv: Vec<f64> = (1..poly.len()).map(|i| i as f64 * poly[i]).collect();
        let mut next = vec![0.0; deriv.len() + 2];
        for (i, c) in deriv.iter().enumerate() {
            next[i] += c;
            next[i + 2] -= c;
        }
        poly = next;
    }
    poly
}

fn eval_poly(poly: &[f64], t: f64) -> f64 {
    poly.iter().rev().fold(0.0, |acc, c| acc * t + c)
}

fn logcosh(z: f64) -> f64 {
    let a = z.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// `k`-th derivative of the 1D ramp component.
fn ramp_derivative(k: usize, x: f64, pm: f64, pp: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    let half_jump = 0.5 * (pp - pm);
    match k {
        0 => 0.5 * (pp + pm) * x + half_jump * sigma * logcosh(z),
        1 => 0.5 * (pp + pm) + half_jump * z.tanh(),
        _ => half_jump * sigma.powi(1 - k as i32) * eval_poly(&tanh_derivative_poly(k - 1), z.tanh()),
    }
}

impl<const D: usize> InitialData<D> {
    pub fn affine(slope: Vect<D>) -> Self {
        Self::Affine { slope }
    }

    pub fn ramp(p_minus: Vect<D>, p_plus: Vect<D>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidInput("ramp width sigma must be positive".into()));
        }
        for a in 0..D {
            if p_plus[a] < p_minus[a] {
                return Err(Error::InvalidInput(
                    "ramp needs p_minus <= p_plus componentwise (convexity)".into(),
                ));
            }
        }
        Ok(Self::LogcoshRamp {
            p_minus,
            p_plus,
            sigma,
        })
    }

    pub fn value(&self, x: &Vect<D>) -> f64 {
        match self {
            Self::Affine { slope } => slope.dot(x),
            Self::LogcoshRamp {
                p_minus,
                p_plus,
                sigma,
            } => (0..D)
                .map(|a| ramp_derivative(0, x[a], p_minus[a], p_plus[a], *sigma))
                .sum(),
            Self::Custom(c) => c.value(x),
        }
    }

    pub fn gradient(&self, x: &Vect<D>) -> Vect<D> {
        match self {
            Self::Affine { slope } => *slope,
            Self::LogcoshRamp {
                p_minus,
                p_plus,
                sigma,
            } => Vect::<D>::from_fn(|a, _| ramp_derivative(1, x[a], p_minus[a], p_plus[a], *sigma)),
            Self::Custom(c) => c.gradient(x),
        }
    }

    pub fn hessian(&self, x: &Vect<D>) -> Mat<D> {
        match self {
            Self::Affine { .. } => Mat::<D>::zeros(),
            Self::LogcoshRamp {
                p_minus,
                p_plus,
                sigma,
            } => {
                let mut h = Mat::<D>::zeros();
                for a in 0..D {
                    h[(a, a)] = ramp_derivative(2, x[a], p_minus[a], p_plus[a], *sigma);
                }
                h
            }
            Self::Custom(c) => c.hessian(x),
        }
    }

    /// Frobenius norm of the derivative tensor `D^k g(x)`, `k >= 1`.
    pub fn derivative_norm(&self, k: usize, x: &Vect<D>) -> f64 {
        match self {
            Self::Affine { slope } => {
                if k == 1 {
                    slope.norm()
                } else {
                    0.0
                }
            }
            Self::LogcoshRamp {
                p_minus,
                p_plus,
                sigma,
            } => (0..D)
                .map(|a| ramp_derivative(k, x[a], p_minus[a], p_plus[a], *sigma).powi(2))
                .sum::<f64>()
                .sqrt(),
            Self::Custom(c) => c.derivative_norm(k, x),
        }
    }

    /// Width of the non-affine core (zero for affine data).
    pub fn core_width(&self) -> f64 {
        match self {
            Self::LogcoshRamp { sigma, .. } => *sigma,
            _ => 0.0,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Self::Affine { .. })
    }
}

impl InitialData<1> {
    /// Far-field affine asymptote `(slope, offset)` on the left (`right = false`)
    /// or right side, when the data are affine outside a bounded core.
    pub fn far_field(&self, right: bool) -> Option<(f64, f64)> {
        match self {
            Self::Affine { slope } => Some((slope[0], 0.0)),
            Self::LogcoshRamp {
                p_minus,
                p_plus,
                sigma,
            } => {
                let offset = -0.5 * (p_plus[0] - p_minus[0]) * sigma * LN_2;
                Some((if right { p_plus[0] } else { p_minus[0] }, offset))
            }
            Self::Custom(_) => None,
        }
    }
}

/// A complete problem: diffusion, Hamiltonian and structure bounds.
#[derive(Clone, Debug)]
pub struct ProblemSpec<const D: usize> {
    pub diffusion: Diffusion<D>,
    pub hamiltonian: Arc<dyn Hamiltonian<D>>,
    pub bounds: ProblemBounds,
    /// Highest `p`-derivative order consumed downstream.
    pub k_max: usize,
}

impl<const D: usize> ProblemSpec<D> {
    pub fn new(
        diffusion: Diffusion<D>,
        hamiltonian: Arc<dyn Hamiltonian<D>>,
        bounds: ProblemBounds,
    ) -> Result<Self> {
        if D != 1 && D != 2 {
            return Err(Error::UnsupportedDimension(D));
        }
        bounds.check()?;
        Ok(Self {
            diffusion,
            hamiltonian,
            bounds,
            k_max: default_k_max(3),
        })
    }

    pub fn with_k_max(mut self, k_max: usize) -> Self {
        self.k_max = k_max;
        self
    }

    pub fn dim(&self) -> usize {
        D
    }
}

/// Derivative headroom for a requested corrector order `m`.
pub fn default_k_max(m: usize) -> usize {
    2 * m + 4
}

// ---------------------------------------------------------------------------
// JSON schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiffusionFile {
    pub matrix: Vec<Vec<TrigSeries>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum HamiltonianFile {
    SeparableQuadratic {
        c: f64,
        #[serde(default)]
        drift: Vec<TrigSeries>,
        #[serde(default)]
        potential: TrigSeries,
    },
    AnisotropicQuadratic {
        matrix: Vec<Vec<TrigSeries>>,
        #[serde(default)]
        potential: TrigSeries,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum InitialDataFile {
    Affine {
        slope: Vec<f64>,
    },
    LogcoshRamp {
        p_minus: Vec<f64>,
        p_plus: Vec<f64>,
        sigma: f64,
    },
}

impl InitialDataFile {
    pub fn build<const D: usize>(&self) -> Result<InitialData<D>> {
        match self {
            Self::Affine { slope } => Ok(InitialData::affine(vect_from_slice(slope)?)),
            Self::LogcoshRamp {
                p_minus,
                p_plus,
                sigma,
            } => InitialData::ramp(vect_from_slice(p_minus)?, vect_from_slice(p_plus)?, *sigma),
        }
    }
}

/// Serialized problem instance.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ProblemFile {
    pub dim: usize,
    pub diffusion: DiffusionFile,
    pub hamiltonian: HamiltonianFile,
    pub bounds: ProblemBounds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_data: Option<InitialDataFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
}

impl ProblemFile {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self = serde_json::from_str(text)?;
        if file.dim != 1 && file.dim != 2 {
            return Err(Error::UnsupportedDimension(file.dim));
        }
        Ok(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build<const D: usize>(&self) -> Result<ProblemSpec<D>> {
        if self.dim != D {
            return Err(Error::UnsupportedDimension(self.dim));
        }
        let diffusion = Diffusion::<D>::from_matrix(self.diffusion.matrix.clone())?;
        let hamiltonian: Arc<dyn Hamiltonian<D>> = match &self.hamiltonian {
            HamiltonianFile::SeparableQuadratic {
                c,
                drift,
                potential,
            } => Arc::new(QuadraticHamiltonian::<D>::separable(*c, drift.clone(), potential.clone())?),
            HamiltonianFile::AnisotropicQuadratic { matrix, potential } => Arc::new(
                QuadraticHamiltonian::<D>::anisotropic(matrix.clone(), potential.clone())?,
            ),
        };
        let mut spec = ProblemSpec::new(diffusion, hamiltonian, self.bounds.clone())?;
        if let Some(k) = self.k_max {
            spec.k_max = k;
        }
        Ok(spec)
    }

    pub fn initial_data<const D: usize>(&self) -> Result<InitialData<D>> {
        self.initial_data
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("problem has no initial_data".into()))?
            .build()
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Outcome of one sampled structure condition.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConditionCheck {
    pub name: String,
    pub samples: usize,
    /// Smallest slack over the samples; negative values are violations.
    pub worst_margin: f64,
    pub passed: bool,
    /// Description of the worst sample when the check failed.
    pub violation: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
    pub seed: u64,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,samples,worst_margin,passed,violation\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{:.6e},{},{}\n",
                c.name,
                c.samples,
                c.worst_margin,
                c.passed,
                c.violation.clone().unwrap_or_default().replace(',', ";")
            ));
        }
        out
    }
}

/// Tracks the minimum slack of a check and where it happened.
struct MarginTracker {
    name: &'static str,
    samples: usize,
    worst: f64,
    worst_at: String,
    tol: f64,
}

impl MarginTracker {
    fn new(name: &'static str, tol: f64) -> Self {
        Self {
            name,
            samples: 0,
            worst: f64::INFINITY,
            worst_at: String::new(),
            tol,
        }
    }

    fn record(&mut self, margin: f64, at: impl FnOnce() -> String) {
        self.samples += 1;
        if margin < self.worst || margin.is_nan() {
            self.worst = margin;
            self.worst_at = at();
        }
    }

    fn finish(self) -> ConditionCheck {
        let passed = self.worst >= -self.tol;
        ConditionCheck {
            name: self.name.to_string(),
            samples: self.samples,
            worst_margin: self.worst,
            passed,
            violation: (!passed).then_some(self.worst_at),
        }
    }
}

fn sample_torus<const D: usize>(rng: &mut ChaCha8Rng, grid: usize, random: usize) -> Vec<Vect<D>> {
    let mut pts = Vec::new();
    let total = grid.pow(D as u32);
    for f in 0..total {
        let mut idx = f;
        let mut y = Vect::<D>::zeros();
        for a in 0..D {
            y[a] = (idx % grid) as f64 / grid as f64;
            idx /= grid;
        }
        pts.push(y);
    }
    for _ in 0..random {
        pts.push(Vect::<D>::from_fn(|_, _| rng.random::<f64>()));
    }
    pts
}

fn sample_ball<const D: usize>(rng: &mut ChaCha8Rng, radius: f64, count: usize) -> Vec<Vect<D>> {
    let mut pts = vec![Vect::<D>::zeros()];
    for i in 0..count {
        let dir = Vect::<D>::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0);
        let n = dir.norm().max(1e-12);
        // alternate between uniform radii and the outer shell
        let r = if i % 4 == 0 { radius } else { radius * rng.random::<f64>() };
        pts.push(dir * (r / n));
    }
    pts
}

fn fmt_vec<const D: usize>(v: &Vect<D>) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(" "))
}

/// Frobenius norm of `D_p^k H(p, y)`, assembled from basis-direction evaluations.
fn derivative_tensor_norm<const D: usize>(h: &dyn Hamiltonian<D>, k: usize, p: &Vect<D>, y: &Vect<D>) -> f64 {
    let count = D.pow(k as u32);
    let mut sum = 0.0;
    let mut dirs = vec![Vect::<D>::zeros(); k];
    for f in 0..count {
        let mut idx = f;
        for d in dirs.iter_mut() {
            *d = unit::<D>(idx % D, 1.0);
            idx /= D;
        }
        sum += h.multilinear(p, y, &dirs).powi(2);
    }
    sum.sqrt()
}

/// Highest `p`-derivative order whose regularity bound is sampled.
const REGULARITY_ORDER_CAP: usize = 4;

/// Samples the structure conditions on `A` and `H`.
///
/// Failed conditions are reported in the returned report, not as errors.
pub fn validate_problem<const D: usize>(
    spec: &ProblemSpec<D>,
    samples: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if D != 1 && D != 2 {
        return Err(Error::UnsupportedDimension(D));
    }
    if samples == 0 {
        return Err(Error::InvalidInput("samples must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = if D == 1 { 32 } else { 8 };
    let ys = sample_torus::<D>(&mut rng, grid, samples);
    let ps = sample_ball::<D>(&mut rng, 10.0, samples);
    let h = spec.hamiltonian.as_ref();
    let b = &spec.bounds;
    let mut checks = Vec::new();

    let mut periodic = MarginTracker::new("periodicity", 0.0);
    for (i, y) in ys.iter().enumerate() {
        let p = &ps[i % ps.len()];
        for a in 0..D {
            let shifted = y + unit::<D>(a, 1.0);
            let da = (spec.diffusion.eval(y) - spec.diffusion.eval(&shifted)).abs().max();
            let dh = (h.value(p, y) - h.value(p, &shifted)).abs();
            let scale = 1.0 + h.value(p, y).abs();
            periodic.record(1e-11 * scale - da.max(dh), || {
                format!("y={} shift axis {a}", fmt_vec(y))
            });
        }
    }
    checks.push(periodic.finish());

    let mut ellip = MarginTracker::new("ellipticity", 0.0);
    for y in &ys {
        let ev = sym_eigenvalues(&spec.diffusion.eval(y));
        let margin = (ev[0] - b.lambda).min(b.lambda_upper - ev[D - 1]);
        ellip.record(margin, || format!("y={} eigenvalues {:?}", fmt_vec(y), ev));
    }
    checks.push(ellip.finish());

    // C^{0,1} norm (sup + Lipschitz quotient) of A
    let delta = 1e-4;
    let mut sup_a: f64 = 0.0;
    let mut lip_a: f64 = 0.0;
    let mut worst_y = Vect::<D>::zeros();
    for y in &ys {
        let ay = spec.diffusion.eval(y);
        sup_a = sup_a.max(ay.norm());
        for a in 0..D {
            let q = (spec.diffusion.eval(&(y + unit::<D>(a, delta))) - ay).norm() / delta;
            if q > lip_a {
                lip_a = q;
                worst_y = *y;
            }
        }
    }
    let mut reg_a = MarginTracker::new("diffusion-regularity", 0.0);
    reg_a.record(b.k_reg - (sup_a + lip_a), || {
        format!("sup={sup_a:.4} lip={lip_a:.4} near y={}", fmt_vec(&worst_y))
    });
    checks.push(reg_a.finish());

    let mut convex = MarginTracker::new("hamiltonian-convexity", 1e-9);
    let mut lower = MarginTracker::new("growth-lower", 1e-9);
    let mut upper = MarginTracker::new("growth-upper", 1e-9);
    for (i, p) in ps.iter().enumerate() {
        let q = &ps[(i * 7 + 3) % ps.len()];
        let y = &ys[i % ys.len()];
        let t: f64 = rng.random();
        let mid = t * p + (1.0 - t) * q;
        let hp = h.value(p, y);
        let hq = h.value(q, y);
        let gap = t * hp + (1.0 - t) * hq - h.value(&mid, y);
        let scale = 1.0 + hp.abs() + hq.abs();
        convex.record(gap / scale, || {
            format!("t={t:.4} p={} q={} y={}", fmt_vec(p), fmt_vec(q), fmt_vec(y))
        });
        let (lo, hi) = b.growth_interval(p.norm_squared());
        let scale = 1.0 + hp.abs();
        lower.record((hp - lo) / scale, || format!("p={} y={} H={hp:.6}", fmt_vec(p), fmt_vec(y)));
        upper.record((hi - hp) / scale, || format!("p={} y={} H={hp:.6}", fmt_vec(p), fmt_vec(y)));
    }
    checks.push(convex.finish());
    checks.push(lower.finish());
    checks.push(upper.finish());

    // ||D_p^k H(p, .)||_{C^{0,1}} <= K (1 + |p|^{(2-k)+})
    let mut reg_h = MarginTracker::new("hamiltonian-regularity", 0.0);
    let p_sub: Vec<&Vect<D>> = ps.iter().step_by((ps.len() / 16).max(1)).collect();
    let y_sub: Vec<&Vect<D>> = ys.iter().step_by((ys.len() / 48).max(1)).collect();
    for k in 0..=spec.k_max.min(REGULARITY_ORDER_CAP) {
        for p in &p_sub {
            let mut sup: f64 = 0.0;
            let mut lip: f64 = 0.0;
            for y in &y_sub {
                let v = derivative_tensor_norm(h, k, p, y);
                sup = sup.max(v);
                for a in 0..D {
                    let ys2 = *y + unit::<D>(a, delta);
                    // Lipschitz quotient of the tensor, via its Frobenius distance
                    let diff = tensor_distance(h, k, p, y, &ys2);
                    lip = lip.max(diff / delta);
                }
            }
            let bound = b.k_reg * (1.0 + p.norm().powi((2 - k as i32).max(0)));
            reg_h.record((bound - (sup + lip)) / bound, || {
                format!("k={k} p={} sup={sup:.4} lip={lip:.4} bound={bound:.4}", fmt_vec(p))
            });
        }
    }
    checks.push(reg_h.finish());

    if h.analytic_derivatives() {
        let mut consistent = MarginTracker::new("p-derivative-consistency", 0.0);
        for (i, p) in ps.iter().enumerate().take(64) {
            let y = &ys[(i * 5) % ys.len()];
            let step = 1e-4 * (1.0 + p.norm());
            let g = h.gradient(p, y);
            let hs = h.hessian(p, y);
            let mut err: f64 = 0.0;
            for a in 0..D {
                let e = unit::<D>(a, step);
                let fd1 = (h.value(&(p + e), y) - h.value(&(p - e), y)) / (2.0 * step);
                err = err.max((fd1 - g[a]).abs() / (1.0 + g[a].abs()));
                let fd2 = (h.gradient(&(p + e), y) - h.gradient(&(p - e), y)) / (2.0 * step);
                for c in 0..D {
                    err = err.max((fd2[c] - hs[(c, a)]).abs() / (1.0 + hs[(c, a)].abs()));
                }
            }
            consistent.record(1e-7 - err, || format!("p={} y={} rel err {err:.3e}", fmt_vec(p), fmt_vec(y)));
        }
        checks.push(consistent.finish());
    }

    Ok(ValidationReport { checks, seed })
}

fn tensor_distance<const D: usize>(
    h: &dyn Hamiltonian<D>,
    k: usize,
    p: &Vect<D>,
    y1: &Vect<D>,
    y2: &Vect<D>,
) -> f64 {
    let count = D.pow(k as u32);
    let mut sum = 0.0;
    let mut dirs = vec![Vect::<D>::zeros(); k];
    for f in 0..count {
        let mut idx = f;
        for d in dirs.iter_mut() {
            *d = unit::<D>(idx % D, 1.0);
            idx /= D;
        }
        sum += (h.multilinear(p, y1, &dirs) - h.multilinear(p, y2, &dirs)).powi(2);
    }
    sum.sqrt()
}

/// Checks admissibility of initial data against a tabulated effective Hamiltonian.
///
/// `drift` maps a gradient `p` to `D_p H̄(p)` and returns `None` outside the
/// tabulated range, which is an error.
pub fn validate_initial_data<const D: usize>(
    g: &InitialData<D>,
    drift: impl Fn(&Vect<D>) -> Option<Vect<D>>,
    window: &BoxRegion<D>,
    samples: usize,
    zeta_min: f64,
    k_max: usize,
    l_bound: f64,
) -> Result<ValidationReport> {
    if samples == 0 {
        return Err(Error::InvalidInput("samples must be at least 1".into()));
    }
    let per_axis = if D == 1 { samples } else { (samples as f64).sqrt().ceil() as usize }.max(2);
    let total = per_axis.pow(D as u32);
    let mut xs = Vec::with_capacity(total);
    for f in 0..total {
        let mut idx = f;
        let mut x = Vect::<D>::zeros();
        for a in 0..D {
            let s = (idx % per_axis) as f64 / (per_axis - 1) as f64;
            x[a] = window.lo[a] + s * window.width(a);
            idx /= per_axis;
        }
        xs.push(x);
    }

    let mut zeta = MarginTracker::new("non-critical-gradient", 0.0);
    let mut convex = MarginTracker::new("data-convexity", 1e-12);
    let mut bound = MarginTracker::new("data-derivative-bound", 0.0);
    for x in &xs {
        let p = g.gradient(x);
        let bbar = drift(&p).ok_or_else(|| {
            Error::TableRange(format!(
                "Dg({}) = {} lies outside the tabulated gradient range",
                fmt_vec(x),
                fmt_vec(&p)
            ))
        })?;
        let n = bbar.norm();
        zeta.record(n - zeta_min, || format!("x={} Dg={} |B̄|={n:.6}", fmt_vec(x), fmt_vec(&p)));
        let ev = sym_eigenvalues(&g.hessian(x));
        convex.record(ev[0], || format!("x={} min eigenvalue {:.3e}", fmt_vec(x), ev[0]));
        for k in 1..=k_max.max(1) {
            let v = g.derivative_norm(k, x);
            bound.record(l_bound - v, || format!("k={k} x={} |D^k g|={v:.4e}", fmt_vec(x)));
        }
    }
    let mut norm = MarginTracker::new("data-normalization", 1e-14);
    let g0 = g.value(&Vect::<D>::zeros());
    norm.record(-g0.abs(), || format!("g(0) = {g0:.3e}"));

    Ok(ValidationReport {
        checks: vec![zeta.finish(), convex.finish(), bound.finish(), norm.finish()],
        seed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(kappa: f64) -> ProblemBounds {
        ProblemBounds {
            lambda: 1.0,
            lambda_upper: 1.0,
            alpha: 1.0,
            alpha_prime: kappa,
            beta: 1.0,
            beta_prime: kappa,
            k_reg: 50.0,
            l_data: 10.0,
        }
    }

    fn cos_potential(kappa: f64) -> TrigSeries {
        TrigSeries::zero().with_mode(&[1], kappa, 0.0)
    }

    #[test]
    fn constant_coefficients_pass_every_check() {
        let h = QuadraticHamiltonian::<1>::with_potential(TrigSeries::zero()).unwrap();
        let spec = ProblemSpec::new(Diffusion::identity(), Arc::new(h), bounds(0.0)).unwrap();
        let report = validate_problem(&spec, 200, 11).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn potential_respects_growth_bounds() {
        let h = QuadraticHamiltonian::<1>::with_potential(cos_potential(0.5)).unwrap();
        let spec = ProblemSpec::new(Diffusion::identity(), Arc::new(h), bounds(0.5)).unwrap();
        let report = validate_problem(&spec, 200, 3).unwrap();
        assert!(report.check("growth-lower").unwrap().passed);
        assert!(report.check("growth-upper").unwrap().passed);
    }

    #[test]
    fn concave_hamiltonian_is_reported_with_a_violating_sample() {
        let h = QuadraticHamiltonian::<1>::separable(-1.0, vec![], TrigSeries::zero()).unwrap();
        let spec = ProblemSpec::new(Diffusion::identity(), Arc::new(h.clone()), bounds(0.0)).unwrap();
        let report = validate_problem(&spec, 100, 5).unwrap();
        let convex = report.check("hamiltonian-convexity").unwrap();
        let lower = report.check("growth-lower").unwrap();
        assert!(!convex.passed && !lower.passed);
        // the named sample really violates the growth bound
        let text = lower.violation.as_ref().unwrap();
        let p: f64 = text
            .trim_start_matches("p=[")
            .split(']')
            .next()
            .unwrap()
            .trim()
            .parse()
            .unwrap();
        let y = Vect::<1>::zeros();
        assert!(h.value(&Vect::<1>::new(p), &y) < p * p - 1e-9);
    }

    #[test]
    fn validation_is_deterministic() {
        let h = QuadraticHamiltonian::<2>::with_potential(TrigSeries::zero().with_mode(&[1, 1], 0.3, 0.0)).unwrap();
        let spec = ProblemSpec::new(Diffusion::identity(), Arc::new(h), bounds(0.3)).unwrap();
        assert_eq!(validate_problem(&spec, 50, 9).unwrap(), validate_problem(&spec, 50, 9).unwrap());
    }

    #[test]
    fn ramp_is_normalized_and_exponentially_affine() {
        let g = InitialData::<1>::ramp(Vect::<1>::new(1.0), Vect::<1>::new(2.0), 0.4).unwrap();
        assert_eq!(g.value(&Vect::<1>::zeros()), 0.0);
        for i in 1..200 {
            let x = i as f64 * 0.05;
            let right = (g.gradient(&Vect::<1>::new(x))[0] - 2.0).abs();
            let left = (g.gradient(&Vect::<1>::new(-x))[0] - 1.0).abs();
            let bound = (2.0 - 1.0) * (-2.0 * x / 0.4).exp();
            assert!(right <= bound * (1.0 + 1e-9) + 1e-15);
            assert!(left <= bound * (1.0 + 1e-9) + 1e-15);
        }
    }

    #[test]
    fn ramp_derivatives_match_differences() {
        let h = 1e-4;
        for &x in &[-1.3, -0.2, 0.0, 0.45, 2.0] {
            for k in 1..6 {
                let f = |z: f64| ramp_derivative(k - 1, z, -0.5, 1.5, 0.7);
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                let exact = ramp_derivative(k, x, -0.5, 1.5, 0.7);
                assert!((fd - exact).abs() < 1e-6 * (1.0 + exact.abs()), "k={k} x={x}");
            }
        }
    }

    #[test]
    fn finite_difference_hamiltonian_recovers_quadratic_derivatives() {
        let h = FiniteDifferenceHamiltonian::<2>::new(|p, y| p.norm_squared() + (std::f64::consts::TAU * y[0]).cos());
        let p = Vect::<2>::new(0.3, -1.2);
        let y = Vect::<2>::new(0.1, 0.7);
        let g = h.gradient(&p, &y);
        assert!((g - 2.0 * p).norm() < 1e-8);
        let hs = h.hessian(&p, &y);
        assert!((hs - 2.0 * Mat::<2>::identity()).norm() < 1e-6);
    }

    #[test]
    fn problem_file_rejects_dimension_three() {
        let text = r#"{"dim":3,"diffusion":{"matrix":[]},"hamiltonian":{"family":"separable-quadratic","c":1.0},
            "bounds":{"lambda":1,"Lambda":1,"alpha":1,"alpha_prime":0,"beta":1,"beta_prime":0,"K":1,"L":1}}"#;
        assert!(matches!(ProblemFile::from_json(text), Err(Error::UnsupportedDimension(3))));
    }
}
