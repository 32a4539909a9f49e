//! Periodic cell problems: the nonlinear ergodic problem for `(w, H̄(p))`, its
//! discounted approximation, and the linearized problems behind `D_pH̄`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unit, Mat, Vect};
use crate::problem::{Hamiltonian, ProblemSpec};
use crate::torus::{CellScheme, Operators, PeriodicField, TorusGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellOptions {
    pub scheme: CellScheme,
    /// Max-norm tolerance on the discrete residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Node pinned to zero (flat index).
    pub normalization_node: usize,
}

impl Default for CellOptions {
    fn default() -> Self {
        Self {
            scheme: CellScheme::Spectral,
            tol: 1e-10,
            max_iter: 60,
            normalization_node: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellDiagnostics {
    pub iterations: usize,
    pub residual: f64,
}

/// Solution `(γ = H̄(p), w(p, ·))` of the cell problem.
#[derive(Clone, Debug)]
pub struct CellSolution<const D: usize> {
    pub p: Vect<D>,
    pub gamma: f64,
    pub w: PeriodicField<D>,
    pub diagnostics: CellDiagnostics,
}

/// Right-hand side of a linear cell problem: drift offset `p_vec` and source.
#[derive(Clone, Debug)]
pub struct LinearRhs<const D: usize> {
    pub p_vec: Vect<D>,
    pub source: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct LinearCellSolution<const D: usize> {
    pub gamma: f64,
    pub v: PeriodicField<D>,
    pub residual: f64,
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Cell-problem machinery bound to one problem and one torus grid.
#[derive(Clone, Debug)]
pub struct CellSolver<const D: usize> {
    hamiltonian: Arc<dyn Hamiltonian<D>>,
    ops: Operators<D>,
    options: CellOptions,
    y: Vec<Vect<D>>,
    a: Vec<Mat<D>>,
}

impl<const D: usize> CellSolver<D> {
    pub fn new(spec: &ProblemSpec<D>, grid: TorusGrid<D>, options: CellOptions) -> Result<Self> {
        if options.normalization_node >= grid.len() {
            return Err(Error::InvalidInput(format!(
                "normalization node {} outside grid of {} nodes",
                options.normalization_node,
                grid.len()
            )));
        }
        if !(options.tol > 0.0) || options.max_iter == 0 {
            return Err(Error::InvalidInput("cell tolerance and iteration cap must be positive".into()));
        }
        let y = grid.nodes();
        let a = y.iter().map(|y| spec.diffusion.eval(y)).collect();
        Ok(Self {
            hamiltonian: spec.hamiltonian.clone(),
            ops: Operators::new(grid, options.scheme),
            options,
            y,
            a,
        })
    }

    pub fn grid(&self) -> &TorusGrid<D> {
        self.ops.grid()
    }

    pub fn operators(&self) -> &Operators<D> {
        &self.ops
    }

    pub fn options(&self) -> &CellOptions {
        &self.options
    }

    pub fn diffusion_nodes(&self) -> &[Mat<D>] {
        &self.a
    }

    pub fn nodes(&self) -> &[Vect<D>] {
        &self.y
    }

    pub fn hamiltonian(&self) -> &dyn Hamiltonian<D> {
        self.hamiltonian.as_ref()
    }

    /// `F_j = -tr(A D^2 w)_j + H((Dw)_j + p, y_j)` (without the constant).
    pub fn operator_value(&self, p: &Vect<D>, w: &[f64]) -> Vec<f64> {
        let tr = self.ops.trace_hessian(&self.a, w);
        let g = self.ops.gradient(w);
        (0..w.len())
            .map(|j| -tr[j] + self.hamiltonian.value(&(g[j] + p), &self.y[j]))
            .collect()
    }

    /// `B(y_j) = D_pH((Dw)_j + p, y_j)`.
    pub fn drift(&self, p: &Vect<D>, w: &[f64]) -> Vec<Vect<D>> {
        let g = self.ops.gradient(w);
        (0..w.len())
            .map(|j| self.hamiltonian.gradient(&(g[j] + p), &self.y[j]))
            .collect()
    }

    fn initial_gamma(&self, p: &Vect<D>) -> f64 {
        self.y.iter().map(|y| self.hamiltonian.value(p, y)).sum::<f64>() / self.y.len() as f64
    }

    /// Solves the ergodic cell problem by bordered Newton iteration.
    ///
    /// `init` supplies a starting corrector and constant (continuation).
    pub fn solve(&self, p: &Vect<D>, init: Option<(&[f64], f64)>) -> Result<CellSolution<D>> {
        let n = self.y.len();
        let nn = self.options.normalization_node;
        let (mut w, mut gamma) = match init {
            Some((w0, g0)) if w0.len() == n => (w0.to_vec(), g0),
            Some(_) => return Err(Error::InvalidInput("initial corrector has wrong length".into())),
            None => (vec![0.0; n], self.initial_gamma(p)),
        };
        let residual = |w: &[f64], gamma: f64| -> (Vec<f64>, f64) {
            let mut f = self.operator_value(p, w);
            for v in f.iter_mut() {
                *v -= gamma;
            }
            f.push(w[nn]);
            let r = max_abs(f.iter().copied());
            (f, r)
        };
        let (mut f, mut r) = residual(&w, gamma);
        let mut iterations = 0;
        while r > self.options.tol {
            if iterations >= self.options.max_iter {
                return Err(Error::NewtonDivergence {
                    iterations,
                    residual: r,
                });
            }
            iterations += 1;
            let b = self.drift(p, &w);
            let mut j = DMatrix::<f64>::zeros(n + 1, n + 1);
            j.view_mut((0, 0), (n, n))
                .copy_from(&self.ops.linear_operator(&self.a, &b, 0.0));
            for i in 0..n {
                j[(i, n)] = -1.0;
            }
            j[(n, nn)] = 1.0;
            let step = j
                .lu()
                .solve(&DVector::from_vec(f.iter().map(|v| -v).collect()))
                .ok_or_else(|| Error::DegenerateLinearization(format!("bordered Jacobian singular at p = {:?}", p.as_slice())))?;
            let mut lambda = 1.0;
            loop {
                let w_try: Vec<f64> = (0..n).map(|i| w[i] + lambda * step[i]).collect();
                let g_try = gamma + lambda * step[n];
                let (f_try, r_try) = residual(&w_try, g_try);
                if r_try <= self.options.tol || r_try < (1.0 - 1e-4 * lambda) * r {
                    w = w_try;
                    gamma = g_try;
                    f = f_try;
                    r = r_try;
                    break;
                }
                lambda *= 0.5;
                if lambda < 1.0 / 1024.0 {
                    return Err(Error::NewtonDivergence {
                        iterations,
                        residual: r,
                    });
                }
            }
        }
        let shift = w[nn];
        for v in w.iter_mut() {
            *v -= shift;
        }
        Ok(CellSolution {
            p: *p,
            gamma,
            w: PeriodicField::new(*self.grid(), w)?,
            diagnostics: CellDiagnostics {
                iterations,
                residual: r,
            },
        })
    }

    /// Discounted problem `-tr(A D^2 w) + H(Dw + p, y) + δ w = 0`.
    pub fn solve_discounted(&self, p: &Vect<D>, delta: f64) -> Result<(PeriodicField<D>, CellDiagnostics)> {
        if !(delta > 0.0) {
            return Err(Error::InvalidInput("discount delta must be positive".into()));
        }
        let n = self.y.len();
        let mut w = vec![-self.initial_gamma(p) / delta; n];
        let residual = |w: &[f64]| -> (Vec<f64>, f64) {
            let f: Vec<f64> = self
                .operator_value(p, w)
                .iter()
                .zip(w)
                .map(|(h, wi)| h + delta * wi)
                .collect();
            let r = max_abs(f.iter().copied());
            (f, r)
        };
        let (mut f, mut r) = residual(&w);
        // residual is relative to the size of δw, which is O(|p|^2)
        let tol = self.options.tol * (1.0 + max_abs(w.iter().map(|v| delta * v)));
        let mut iterations = 0;
        while r > tol {
            if iterations >= self.options.max_iter {
                return Err(Error::NewtonDivergence {
                    iterations,
                    residual: r,
                });
            }
            iterations += 1;
            let b = self.drift(p, &w);
            let j = self.ops.linear_operator(&self.a, &b, delta);
            let step = j
                .lu()
                .solve(&DVector::from_vec(f.iter().map(|v| -v).collect()))
                .ok_or_else(|| Error::DegenerateLinearization("discounted Jacobian singular".into()))?;
            let mut lambda = 1.0;
            loop {
                let w_try: Vec<f64> = (0..n).map(|i| w[i] + lambda * step[i]).collect();
                let (f_try, r_try) = residual(&w_try);
                if r_try <= tol || r_try < (1.0 - 1e-4 * lambda) * r {
                    w = w_try;
                    f = f_try;
                    r = r_try;
                    break;
                }
                lambda *= 0.5;
                if lambda < 1.0 / 1024.0 {
                    return Err(Error::NewtonDivergence {
                        iterations,
                        residual: r,
                    });
                }
            }
        }
        Ok((
            PeriodicField::new(*self.grid(), w)?,
            CellDiagnostics {
                iterations,
                residual: r,
            },
        ))
    }

    /// Factors the linear cell operator for a drift field `B`.
    pub fn linear(&self, drift: Vec<Vect<D>>) -> Result<LinearCell<D>> {
        LinearCell::new(&self.ops, &self.a, drift, self.options.normalization_node, self.options.tol)
    }

    /// Solves the cell problem at `p` and the `D` linear problems for
    /// `D_pH̄(p)` and `v = D_pw`.
    pub fn solve_with_derivatives(
        &self,
        p: &Vect<D>,
        init: Option<(&[f64], f64)>,
    ) -> Result<(CellSolution<D>, Vect<D>, Vec<PeriodicField<D>>)> {
        let sol = self.solve(p, init)?;
        let lin = self.linear(self.drift(p, &sol.w.values))?;
        let mut bbar = Vect::<D>::zeros();
        let mut v = Vec::with_capacity(D);
        for a in 0..D {
            let s = lin.solve(&unit::<D>(a, 1.0), None)?;
            bbar[a] = s.gamma;
            v.push(s.v);
        }
        Ok((sol, bbar, v))
    }
}

/// Factored bordered system for
/// `-tr(A D^2 v) + B·(Dv + p_vec) + source = γ`, `v(node) = 0`.
#[derive(Clone, Debug)]
pub struct LinearCell<const D: usize> {
    grid: TorusGrid<D>,
    matrix: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    drift: Vec<Vect<D>>,
    node: usize,
    tol: f64,
}

impl<const D: usize> LinearCell<D> {
    pub fn new(ops: &Operators<D>, a: &[Mat<D>], drift: Vec<Vect<D>>, node: usize, tol: f64) -> Result<Self> {
        let n = ops.grid().len();
        if a.len() != n || drift.len() != n {
            return Err(Error::GridInvariant("coefficient fields do not match the grid".into()));
        }
        let mut m = DMatrix::<f64>::zeros(n + 1, n + 1);
        m.view_mut((0, 0), (n, n)).copy_from(&ops.linear_operator(a, &drift, 0.0));
        for i in 0..n {
            m[(i, n)] = -1.0;
        }
        m[(n, node)] = 1.0;
        let lu = m.clone().lu();
        if !lu.is_invertible() {
            return Err(Error::DegenerateLinearization("bordered linear cell system is singular".into()));
        }
        Ok(Self {
            grid: *ops.grid(),
            matrix: m,
            lu,
            drift,
            node,
            tol,
        })
    }

    pub fn drift(&self) -> &[Vect<D>] {
        &self.drift
    }

    pub fn solve(&self, p_vec: &Vect<D>, source: Option<&[f64]>) -> Result<LinearCellSolution<D>> {
        let n = self.grid.len();
        let mut rhs = DVector::<f64>::zeros(n + 1);
        for j in 0..n {
            rhs[j] = -self.drift[j].dot(p_vec) - source.map_or(0.0, |s| s[j]);
        }
        let x = self
            .lu
            .solve(&rhs)
            .ok_or_else(|| Error::DegenerateLinearization("bordered linear cell system is singular".into()))?;
        let r = max_abs((&self.matrix * &x - &rhs).iter().copied());
        let scale = 1.0 + max_abs(rhs.iter().copied());
        if r > self.tol * scale {
            return Err(Error::LinearResidual {
                residual: r,
                tol: self.tol * scale,
            });
        }
        let mut v: Vec<f64> = x.iter().take(n).copied().collect();
        let shift = v[self.node];
        for value in v.iter_mut() {
            *value -= shift;
        }
        Ok(LinearCellSolution {
            gamma: x[n],
            v: PeriodicField::new(self.grid, v)?,
            residual: r,
        })
    }

    pub fn solve_many(&self, rhs: &[LinearRhs<D>]) -> Result<Vec<LinearCellSolution<D>>> {
        rhs.iter()
            .map(|r| self.solve(&r.p_vec, r.source.as_deref()))
            .collect()
    }
}

/// Solves stacked linear cell problems against one factorization.
pub fn solve_linear_cell<const D: usize>(
    ops: &Operators<D>,
    diffusion: &[Mat<D>],
    drift: &[Vect<D>],
    rhs: &[LinearRhs<D>],
) -> Result<Vec<LinearCellSolution<D>>> {
    LinearCell::new(ops, diffusion, drift.to_vec(), 0, 1e-10)?.solve_many(rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Diffusion, ProblemBounds, QuadraticHamiltonian};
    use crate::trig::TrigSeries;

    fn spec(kappa: f64) -> ProblemSpec<1> {
        let h = QuadraticHamiltonian::<1>::with_potential(TrigSeries::zero().with_mode(&[1], kappa, 0.0)).unwrap();
        ProblemSpec::new(
            Diffusion::identity(),
            Arc::new(h),
            ProblemBounds {
                lambda: 1.0,
                lambda_upper: 1.0,
                alpha: 1.0,
                alpha_prime: kappa,
                beta: 1.0,
                beta_prime: kappa,
                k_reg: 50.0,
                l_data: 10.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn y_independent_hamiltonian_has_zero_corrector() {
        let solver = CellSolver::new(&spec(0.0), TorusGrid::new(16).unwrap(), CellOptions::default()).unwrap();
        let sol = solver.solve(&Vect::<1>::new(1.5), None).unwrap();
        assert!((sol.gamma - 2.25).abs() < 1e-12);
        assert!(sol.w.max_abs() < 1e-12);
    }

    #[test]
    fn normalization_node_is_exactly_zero() {
        let solver = CellSolver::new(&spec(0.5), TorusGrid::new(32).unwrap(), CellOptions::default()).unwrap();
        let sol = solver.solve(&Vect::<1>::new(0.7), None).unwrap();
        assert_eq!(sol.w.values[0], 0.0);
        assert!(sol.diagnostics.residual <= 1e-10);
        assert!(sol.gamma >= 0.49 - 0.5 && sol.gamma <= 0.49 + 0.5);
    }

    #[test]
    fn discounted_constant_case() {
        let solver = CellSolver::new(&spec(0.0), TorusGrid::new(16).unwrap(), CellOptions::default()).unwrap();
        let (w, _) = solver.solve_discounted(&Vect::<1>::new(2.0), 0.5).unwrap();
        for v in &w.values {
            assert!((v + 8.0).abs() < 1e-10);
        }
    }
}
