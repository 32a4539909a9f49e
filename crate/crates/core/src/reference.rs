//! Direct fine-grid solver for the 1D ε-problem
//! `u_t = ε a(x/ε) u_xx - H(u_x, x/ε)` on a truncated interval with exact
//! far-field data, and comparison against the two-scale expansion.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cell::{CellOptions, CellSolver};
use crate::correctors::CorrectorHierarchy;
use crate::error::{Error, Result};
use crate::geometry::{BoxRegion, Vect};
use crate::problem::{InitialData, ProblemSpec};
use crate::torus::{PeriodicField, PointWeights, TorusGrid};

/// Time integrator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceScheme {
    /// Two-stage SSP Runge–Kutta, everything explicit.
    ExplicitCentered,
    /// IMEX-SSP2(2,2,2): implicit diffusion, explicit Hamiltonian.
    #[default]
    ImexCentered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceOptions {
    /// Grid points per fast period `ε`.
    pub n_per: usize,
    /// Spatial order of the centered differences (2 or 4).
    pub order: usize,
    pub scheme: ReferenceScheme,
    /// First-order Lax–Friedrichs Hamiltonian instead of the centered one.
    pub lax_friedrichs: bool,
    /// Advective CFL number.
    pub c_a: f64,
    /// Diffusive CFL number (explicit scheme only).
    pub c_d: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            n_per: 128,
            order: 4,
            scheme: ReferenceScheme::ImexCentered,
            lax_friedrichs: false,
            c_a: 0.4,
            c_d: 0.4,
        }
    }
}

/// Uniform grid `x_i = (i0 + i) dx`, `dx = ε / n_per`, over a domain.
///
/// The two outermost nodes on each side carry Dirichlet data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineGrid1D {
    pub eps: f64,
    pub n_per: usize,
    pub i0: i64,
    pub len: usize,
    pub dx: f64,
    pub dt: f64,
    pub scheme: ReferenceScheme,
    pub order: usize,
    pub lax_friedrichs: bool,
}

impl FineGrid1D {
    /// Lays the grid over `domain` and picks the largest admissible step.
    ///
    /// `max_speed` bounds `|D_pH|` along the solution, `lambda`/`lambda_upper`
    /// bound `a`.
    pub fn new(
        domain: &BoxRegion<1>,
        eps: f64,
        options: &ReferenceOptions,
        max_speed: f64,
        lambda: f64,
        lambda_upper: f64,
    ) -> Result<Self> {
        if !(eps > 0.0) || options.n_per < 4 {
            return Err(Error::InvalidInput("reference grid needs eps > 0 and n_per >= 4".into()));
        }
        if options.order != 2 && options.order != 4 {
            return Err(Error::InvalidInput(format!("spatial order {} not in {{2, 4}}", options.order)));
        }
        let dx = eps / options.n_per as f64;
        let peclet = max_speed * dx / (eps * lambda);
        if peclet >= 2.0 {
            return Err(Error::GridInvariant(format!("mesh Péclet number {peclet:.3} >= 2")));
        }
        let i0 = (domain.lo[0] / dx).floor() as i64;
        let i1 = (domain.hi[0] / dx).ceil() as i64;
        let len = (i1 - i0 + 1) as usize;
        if len < 16 {
            return Err(Error::GridInvariant("reference domain too small".into()));
        }
        let speed = max_speed.max(1e-12);
        let mut dt = options.c_a * dx / speed;
        if options.scheme == ReferenceScheme::ExplicitCentered {
            dt = dt.min(options.c_d * dx * dx / (2.0 * eps * lambda_upper));
        }
        Ok(Self {
            eps,
            n_per: options.n_per,
            i0,
            len,
            dx,
            dt,
            scheme: options.scheme,
            order: options.order,
            lax_friedrichs: options.lax_friedrichs,
        })
    }

    pub fn x(&self, i: usize) -> f64 {
        (self.i0 + i as i64) as f64 * self.dx
    }

    /// Index of `x_i / ε` in `0..n_per` (the fast phase).
    pub fn phase(&self, i: usize) -> usize {
        (self.i0 + i as i64).rem_euclid(self.n_per as i64) as usize
    }

    pub fn domain(&self) -> BoxRegion<1> {
        BoxRegion {
            lo: Vect::<1>::new(self.x(0)),
            hi: Vect::<1>::new(self.x(self.len - 1)),
        }
    }
}

/// Exact solution `p x + c - t H̄(p) + ε w(p, x/ε)` for affine data.
#[derive(Clone, Debug)]
pub struct AffineCell {
    pub slope: f64,
    pub offset: f64,
    pub hbar: f64,
    pub w: PeriodicField<1>,
}

impl AffineCell {
    pub fn new(solver: &CellSolver<1>, slope: f64, offset: f64) -> Result<Self> {
        let sol = solver.solve(&Vect::<1>::new(slope), None)?;
        Ok(Self {
            slope,
            offset,
            hbar: sol.gamma,
            w: sol.w,
        })
    }

    pub fn value(&self, x: f64, t: f64, eps: f64) -> f64 {
        let y = (x / eps).rem_euclid(1.0);
        self.slope * x + self.offset - t * self.hbar + eps * self.w.eval(&Vect::<1>::new(y))
    }
}

/// Dirichlet data on both ends.
#[derive(Clone, Debug)]
pub struct FarField {
    pub left: AffineCell,
    pub right: AffineCell,
}

impl FarField {
    /// From the affine tails of `g`.
    pub fn from_data(spec: &ProblemSpec<1>, grid: TorusGrid<1>, options: CellOptions, g: &InitialData<1>) -> Result<Self> {
        let solver = CellSolver::new(spec, grid, options)?;
        let (ls, lo) = g
            .far_field(false)
            .ok_or_else(|| Error::InvalidInput("initial data has no affine far field".into()))?;
        let (rs, ro) = g
            .far_field(true)
            .ok_or_else(|| Error::InvalidInput("initial data has no affine far field".into()))?;
        Ok(Self {
            left: AffineCell::new(&solver, ls, lo)?,
            right: AffineCell::new(&solver, rs, ro)?,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDiagnostics {
    pub steps: usize,
    pub dt: f64,
    /// Largest `dt |D_pH| / dx` met during the run.
    pub max_cfl: f64,
}

#[derive(Clone, Debug)]
pub struct ReferenceSolution {
    pub grid: FineGrid1D,
    pub times: Vec<f64>,
    /// One slice per entry of `times`.
    pub snapshots: Vec<Vec<f64>>,
    pub diagnostics: ReferenceDiagnostics,
    pub lambda_upper: f64,
}

/// `H(q, y) = m q² + b q + V` per fast phase when the family allows it.
enum Pointwise<'a> {
    Quadratic { m: Vec<f64>, b: Vec<f64>, v: Vec<f64> },
    General { spec: &'a ProblemSpec<1>, y: Vec<f64> },
}

impl Pointwise<'_> {
    fn value(&self, k: usize, q: f64) -> f64 {
        match self {
            Pointwise::Quadratic { m, b, v } => (m[k] * q + b[k]) * q + v[k],
            Pointwise::General { spec, y } => spec.hamiltonian.value(&Vect::<1>::new(q), &Vect::<1>::new(y[k])),
        }
    }

    fn speed(&self, k: usize, q: f64) -> f64 {
        match self {
            Pointwise::Quadratic { m, b, .. } => 2.0 * m[k] * q + b[k],
            Pointwise::General { spec, y } => spec.hamiltonian.gradient(&Vect::<1>::new(q), &Vect::<1>::new(y[k]))[0],
        }
    }
}

/// LU factors of a matrix with two sub- and two super-diagonals (no pivoting;
/// the implicit diffusion matrix is a positive row scaling of an SPD matrix).
struct Banded {
    n: usize,
    /// Row `i`, column `j` stored at `5 i + (j + 2 - i)`.
    a: Vec<f64>,
}

impl Banded {
    fn factor(n: usize, mut a: Vec<f64>) -> Result<Self> {
        let at = |i: usize, j: usize| 5 * i + (j + 2 - i);
        for k in 0..n {
            let pivot = a[at(k, k)];
            if pivot.abs() < 1e-300 {
                return Err(Error::DegenerateLinearization("zero pivot in banded diffusion solve".into()));
            }
            for i in k + 1..(k + 3).min(n) {
                let l = a[at(i, k)] / pivot;
                a[at(i, k)] = l;
                for j in k + 1..(k + 3).min(n) {
                    a[at(i, j)] -= l * a[at(k, j)];
                }
            }
        }
        // store reciprocal pivots for the back substitution
        for k in 0..n {
            a[at(k, k)] = 1.0 / a[at(k, k)];
        }
        Ok(Self { n, a })
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let a = &self.a[..5 * n];
        let b = &mut b[..n];
        for i in 0..n {
            let row = &a[5 * i..5 * i + 5];
            let mut s = b[i];
            if i >= 2 {
                s -= row[0] * b[i - 2];
            }
            if i >= 1 {
                s -= row[1] * b[i - 1];
            }
            b[i] = s;
        }
        for i in (0..n).rev() {
            let row = &a[5 * i..5 * i + 5];
            let mut s = b[i];
            if i + 1 < n {
                s -= row[3] * b[i + 1];
            }
            if i + 2 < n {
                s -= row[4] * b[i + 2];
            }
            b[i] = s * row[2];
        }
    }
}

fn second_stencil(order: usize) -> [f64; 5] {
    if order == 4 {
        [-1.0 / 12.0, 16.0 / 12.0, -30.0 / 12.0, 16.0 / 12.0, -1.0 / 12.0]
    } else {
        [0.0, 1.0, -2.0, 1.0, 0.0]
    }
}

fn first_stencil(order: usize) -> [f64; 5] {
    if order == 4 {
        [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0]
    } else {
        [0.0, -0.5, 0.0, 0.5, 0.0]
    }
}

struct Stepper<'a> {
    grid: FineGrid1D,
    /// `ε a(x_i/ε) / dx²` per node.
    diff: Vec<f64>,
    ham: Pointwise<'a>,
    d1: [f64; 5],
    d2: [f64; 5],
    alpha: f64,
    far: &'a FarField,
    phase: Vec<usize>,
    /// `ε w(p±, x/ε)` on the four boundary nodes.
    fast_boundary: [f64; 4],
}

impl Stepper<'_> {
    fn boundary(&self, u: &mut [f64], t: f64) {
        let n = self.grid.len;
        for (slot, i) in [0, 1, n - 2, n - 1].into_iter().enumerate() {
            let side = if slot < 2 { &self.far.left } else { &self.far.right };
            u[i] = side.slope * self.grid.x(i) + side.offset - t * side.hbar + self.fast_boundary[slot];
        }
    }

    /// Diffusion `ε a u_xx` at interior nodes (zero on the boundary layers).
    fn diffusion(&self, u: &[f64], out: &mut [f64]) {
        let n = self.grid.len;
        out[..2].fill(0.0);
        out[n - 2..].fill(0.0);
        for i in 2..n - 2 {
            let w = &u[i - 2..i + 3];
            let c = &self.d2;
            out[i] = self.diff[i] * (c[0] * w[0] + c[1] * w[1] + c[2] * w[2] + c[3] * w[3] + c[4] * w[4]);
        }
    }

    /// `-H(u_x, x/ε)` at interior nodes; returns the largest `|D_pH|`.
    fn hamiltonian(&self, u: &[f64], out: &mut [f64]) -> f64 {
        let n = self.grid.len;
        let dx = self.grid.dx;
        out[..2].fill(0.0);
        out[n - 2..].fill(0.0);
        let mut speed = 0.0f64;
        for i in 2..n - 2 {
            let k = self.phase[i];
            if self.grid.lax_friedrichs {
                let pp = (u[i + 1] - u[i]) / dx;
                let pm = (u[i] - u[i - 1]) / dx;
                let q = 0.5 * (pp + pm);
                out[i] = -(self.ham.value(k, q) - 0.5 * self.alpha * (pp - pm));
                speed = speed.max(self.ham.speed(k, q).abs());
            } else {
                let w = &u[i - 2..i + 3];
                let c = &self.d1;
                let q = (c[0] * w[0] + c[1] * w[1] + c[3] * w[3] + c[4] * w[4]) / dx;
                out[i] = -self.ham.value(k, q);
                speed = speed.max(self.ham.speed(k, q).abs());
            }
        }
        speed
    }
}

fn implicit_factor(n: usize, gamma: f64, dt: f64, stepper: &Stepper) -> Result<Banded> {
    let m = n - 4;
    let mut a = vec![0.0; 5 * m];
    for r in 0..m {
        let i = r + 2;
        let c = gamma * dt * stepper.diff[i];
        for l in 0..5 {
            let j = i + l;
            if j < 4 || j >= m + 4 {
                continue;
            }
            let col = j - 4;
            a[5 * r + (col + 2 - r)] = -c * stepper.d2[l];
        }
        a[5 * r + 2] += 1.0;
    }
    Banded::factor(m, a)
}

/// Marches the ε-problem from `initial` to each of `times` (sorted, within
/// `(0, horizon]`), with far-field Dirichlet data.
pub fn solve_reference(
    spec: &ProblemSpec<1>,
    far: &FarField,
    initial: &(dyn Fn(f64) -> f64 + Sync),
    grid: FineGrid1D,
    times: &[f64],
) -> Result<ReferenceSolution> {
    if times.windows(2).any(|w| w[1] <= w[0]) || times.first().is_some_and(|t| *t < 0.0) {
        return Err(Error::InvalidInput("output times must be increasing and non-negative".into()));
    }
    let n = grid.len;
    let eps = grid.eps;
    let phases: Vec<f64> = (0..grid.n_per).map(|k| k as f64 / grid.n_per as f64).collect();
    let ham = match spec.hamiltonian.quadratic_coefficients(&Vect::<1>::zeros()) {
        Some(_) => {
            let c: Vec<_> = phases
                .iter()
                .map(|y| spec.hamiltonian.quadratic_coefficients(&Vect::<1>::new(*y)).expect("quadratic family"))
                .collect();
            Pointwise::Quadratic {
                m: c.iter().map(|c| c.matrix[(0, 0)]).collect(),
                b: c.iter().map(|c| c.drift[0]).collect(),
                v: c.iter().map(|c| c.potential).collect(),
            }
        }
        None => Pointwise::General { spec, y: phases.clone() },
    };
    let a_phase: Vec<f64> = phases
        .iter()
        .map(|y| spec.diffusion.eval(&Vect::<1>::new(*y))[(0, 0)])
        .collect();
    let diff: Vec<f64> = (0..n).map(|i| eps * a_phase[grid.phase(i)] / (grid.dx * grid.dx)).collect();
    let mut u: Vec<f64> = (0..n).map(|i| initial(grid.x(i))).collect();
    let mut stepper = Stepper {
        grid,
        diff,
        ham,
        d1: first_stencil(grid.order),
        d2: second_stencil(grid.order),
        alpha: 0.0,
        far,
        phase: (0..n).map(|i| grid.phase(i)).collect(),
        fast_boundary: [0, 1, n - 2, n - 1].map(|i| {
            let side = if i < 2 { &far.left } else { &far.right };
            let x = grid.x(i);
            side.value(x, 0.0, eps) - side.slope * x - side.offset
        }),
    };
    let mut scratch = vec![0.0; n];
    let speed0 = stepper.hamiltonian(&u, &mut scratch);
    stepper.alpha = 1.25 * speed0;
    let scale = 1.0 + u.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let gamma = 1.0 - 1.0 / 2f64.sqrt();
    let mut factors: HashMap<u64, Banded> = HashMap::new();

    let mut snapshots = Vec::with_capacity(times.len());
    let mut out_times = Vec::with_capacity(times.len());
    let mut diag = ReferenceDiagnostics {
        steps: 0,
        dt: grid.dt,
        max_cfl: 0.0,
    };
    let mut t = 0.0;
    let (mut e1, mut e2, mut d1, mut d2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut stage = vec![0.0; n];
    let mut base = vec![0.0; n];
    let mut rhs = vec![0.0; n - 4];
    stepper.boundary(&mut u, 0.0);
    for &target in times {
        let span = target - t;
        let count = if span > 1e-14 * (1.0 + target) {
            (span / grid.dt - 1e-9).ceil().max(1.0) as usize
        } else {
            0
        };
        let dt = span / count.max(1) as f64;
        for _ in 0..count {
            match grid.scheme {
                ReferenceScheme::ExplicitCentered => {
                    let s1 = stepper.hamiltonian(&u, &mut e1);
                    stepper.diffusion(&u, &mut d1);
                    for i in 0..n {
                        stage[i] = u[i] + dt * (e1[i] + d1[i]);
                    }
                    stepper.boundary(&mut stage, t + dt);
                    let s2 = stepper.hamiltonian(&stage, &mut e2);
                    stepper.diffusion(&stage, &mut d2);
                    for i in 0..n {
                        u[i] = 0.5 * u[i] + 0.5 * (stage[i] + dt * (e2[i] + d2[i]));
                    }
                    diag.max_cfl = diag.max_cfl.max(dt * s1.max(s2) / grid.dx);
                }
                ReferenceScheme::ImexCentered => {
                    if !factors.contains_key(&dt.to_bits()) {
                        factors.insert(dt.to_bits(), implicit_factor(n, gamma, dt, &stepper)?);
                    }
                    let lu = &factors[&dt.to_bits()];
                    let solve_stage = |base: &[f64], time: f64, stage: &mut Vec<f64>, rhs: &mut Vec<f64>| {
                        stage.copy_from_slice(base);
                        stepper.boundary(stage, time);
                        rhs.copy_from_slice(&base[2..n - 2]);
                        for i in [2, 3, n - 4, n - 3] {
                            let c = gamma * dt * stepper.diff[i];
                            for l in 0..5 {
                                let j = i + l - 2;
                                if j < 2 || j >= n - 2 {
                                    rhs[i - 2] += c * stepper.d2[l] * stage[j];
                                }
                            }
                        }
                        lu.solve(rhs);
                        stage[2..n - 2].copy_from_slice(rhs);
                    };
                    // Boundary rows use the explicit abscissae (0, 1): these are
                    // the stage values the scheme produces for data linear in t.
                    // stage 1: U1 = u + γ dt D(U1)
                    solve_stage(&u, t, &mut stage, &mut rhs);
                    let s1 = stepper.hamiltonian(&stage, &mut e1);
                    stepper.diffusion(&stage, &mut d1);
                    // stage 2: U2 = u + dt E(U1) + (1-2γ) dt D(U1) + γ dt D(U2)
                    for i in 0..n {
                        base[i] = u[i] + dt * e1[i] + (1.0 - 2.0 * gamma) * dt * d1[i];
                    }
                    solve_stage(&base, t + dt, &mut stage, &mut rhs);
                    let s2 = stepper.hamiltonian(&stage, &mut e2);
                    stepper.diffusion(&stage, &mut d2);
                    for i in 0..n {
                        u[i] += 0.5 * dt * (e1[i] + e2[i] + d1[i] + d2[i]);
                    }
                    diag.max_cfl = diag.max_cfl.max(dt * s1.max(s2) / grid.dx);
                }
            }
            t += dt;
            diag.steps += 1;
            stepper.boundary(&mut u, t);
            if !u.iter().all(|v| v.is_finite() && v.abs() < 1e8 * scale) {
                return Err(Error::BlowUp { step: diag.steps, time: t });
            }
        }
        t = target;
        out_times.push(target);
        snapshots.push(u.clone());
    }
    Ok(ReferenceSolution {
        grid,
        times: out_times,
        snapshots,
        diagnostics: diag,
        lambda_upper: spec.bounds.lambda_upper,
    })
}

/// Largest `|D_pH(u_x, x/ε)|` over a sampled slice (centered differences).
pub fn slice_speed(spec: &ProblemSpec<1>, grid: &FineGrid1D, u: &[f64]) -> f64 {
    let mut s = 0.0f64;
    for i in 1..grid.len - 1 {
        let q = (u[i + 1] - u[i - 1]) / (2.0 * grid.dx);
        let y = grid.phase(i) as f64 / grid.n_per as f64;
        s = s.max(spec.hamiltonian.gradient(&Vect::<1>::new(q), &Vect::<1>::new(y))[0].abs());
    }
    s
}

/// Well-prepared initial slice `η_M(·, 0)` where the hierarchy lives, and
/// `g + ε w(Dg, x/ε)` outside it.
pub fn prepared_initial<'a>(hierarchy: &'a CorrectorHierarchy<1>, eps: f64) -> impl Fn(f64) -> f64 + Sync + 'a {
    let region = hierarchy.slow().region();
    let effective = hierarchy.effective();
    move |x: f64| {
        let xv = Vect::<1>::new(x);
        if region.contains(&xv) {
            if let Ok(v) = hierarchy.eta(eps, hierarchy.order(), &xv, 0.0) {
                return v;
            }
        }
        let g = &effective.g;
        let p = g.gradient(&xv);
        let y = Vect::<1>::new((x / eps).rem_euclid(1.0));
        let w = effective
            .table
            .corrector(&p)
            .ok()
            .and_then(|w| PeriodicField::new(*effective.table.grid(), w).ok())
            .map_or(0.0, |f| f.eval(&y));
        g.value(&xv) + eps * w
    }
}

/// Sup-window error `|u^ε - η_m^ε|` per output time.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub eps: f64,
    pub order: usize,
    pub sup_error: f64,
    pub per_time: Vec<f64>,
    /// `(x, t, error)` samples on the window.
    pub field: Vec<(f64, f64, f64)>,
}

/// Distance the window must keep from the domain ends.
pub fn insulation_margin(horizon: f64, max_bbar: f64, eps: f64, lambda_upper: f64, sigma: f64) -> f64 {
    horizon * max_bbar + 6.0 * (eps * lambda_upper * horizon).sqrt() + 5.0 * sigma
}

/// Compares the reference against `η_m^ε` at every fine node inside `window`
/// and every output time.
pub fn compare(
    reference: &ReferenceSolution,
    hierarchy: &CorrectorHierarchy<1>,
    m: usize,
    window: &BoxRegion<1>,
) -> Result<Comparison> {
    let grid = &reference.grid;
    let eps = grid.eps;
    let effective = hierarchy.effective();
    let horizon = reference.times.last().copied().unwrap_or(0.0);
    let max_bbar = effective.table.bbar_nodes().iter().fold(0.0f64, |s, b| s.max(b.norm()));
    let need = insulation_margin(horizon, max_bbar, eps, reference.lambda_upper, effective.g.core_width());
    let domain = grid.domain();
    if window.lo[0] - domain.lo[0] < need || domain.hi[0] - window.hi[0] < need {
        return Err(Error::OutsideWindow(format!(
            "window [{}, {}] closer than {need:.3} to the reference domain [{}, {}]",
            window.lo[0], window.hi[0], domain.lo[0], domain.hi[0]
        )));
    }
    let weights: Vec<PointWeights<1>> = (0..grid.n_per)
        .map(|k| PointWeights::new(hierarchy.grid(), &Vect::<1>::new(k as f64 / grid.n_per as f64)))
        .collect();
    let nodes: Vec<usize> = (0..grid.len)
        .filter(|&i| window.contains(&Vect::<1>::new(grid.x(i))))
        .collect();
    let mut per_time = Vec::with_capacity(reference.times.len());
    let mut field = Vec::new();
    for (slice, &t) in reference.snapshots.iter().zip(&reference.times) {
        let errs: Vec<(f64, f64)> = {
            use rayon::prelude::*;
            nodes
                .par_iter()
                .map(|&i| -> Result<(f64, f64)> {
                    let x = Vect::<1>::new(grid.x(i));
                    let eta = hierarchy.eta_with(eps, m, &x, t, &weights[grid.phase(i)])?;
                    Ok((x[0], (slice[i] - eta).abs()))
                })
                .collect::<Result<Vec<_>>>()?
        };
        per_time.push(errs.iter().fold(0.0f64, |s, e| s.max(e.1)));
        field.extend(errs.into_iter().map(|(x, e)| (x, t, e)));
    }
    Ok(Comparison {
        eps,
        order: m,
        sup_error: per_time.iter().copied().fold(0.0, f64::max),
        per_time,
        field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn banded_solver_matches_dense() {
        let n = 9;
        let mut a = vec![0.0; 5 * n];
        let mut dense = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(2)..(i + 3).min(n) {
                let v = if i == j { 4.0 + i as f64 } else { -0.7 + 0.1 * (i + 2 * j) as f64 / n as f64 };
                a[5 * i + (j + 2 - i)] = v;
                dense[(i, j)] = v;
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        Banded::factor(n, a).unwrap().solve(&mut x);
        let y = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for i in 0..n {
            assert!((x[i] - y[i]).abs() < 1e-13);
        }
    }
}
