//! Uniform grids on the unit torus, nodal differentiation and periodic
//! interpolation.
//!
//! Two discretizations share one interface: Fourier collocation (the default)
//! and second-order centered differences. Interpolation off the nodes always
//! uses the trigonometric interpolant, whose nodal derivatives are exactly the
//! spectral differentiation matrices.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat, Vect};

/// Discretization of `D_y`, `D_y^2` on the torus.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellScheme {
    #[default]
    Spectral,
    Centered,
}

/// `N^D` nodes `y_j = j / N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TorusGrid<const D: usize> {
    n: usize,
}

impl<const D: usize> TorusGrid<D> {
    pub fn new(n: usize) -> Result<Self> {
        if D != 1 && D != 2 {
            return Err(Error::UnsupportedDimension(D));
        }
        if n < 8 || n % 2 != 0 {
            return Err(Error::GridInvariant(format!(
                "torus grid needs an even N >= 8, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.n.pow(D as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn multi_index(&self, flat: usize) -> [usize; D] {
        let mut idx = [0; D];
        let mut f = flat;
        for slot in idx.iter_mut() {
            *slot = f % self.n;
            f /= self.n;
        }
        idx
    }

    pub fn node(&self, flat: usize) -> Vect<D> {
        let idx = self.multi_index(flat);
        Vect::<D>::from_fn(|a, _| idx[a] as f64 / self.n as f64)
    }

    pub fn nodes(&self) -> Vec<Vect<D>> {
        (0..self.len()).map(|j| self.node(j)).collect()
    }
}

/// Values of the trigonometric interpolation kernel and its first two
/// derivatives at offset `d = y - y_j`.
fn kernel(n: usize, d: f64) -> [f64; 3] {
    let k_nyq = n / 2;
    let theta = TAU * d;
    let (s1, c1) = theta.sin_cos();
    let (mut s, mut c) = (0.0f64, 1.0f64);
    let mut v = [1.0, 0.0, 0.0];
    for k in 1..=k_nyq {
        // rotate (c, s) by theta
        let cn = c * c1 - s * s1;
        let sn = s * c1 + c * s1;
        c = cn;
        s = sn;
        let kf = k as f64;
        let weight = if k == k_nyq { 1.0 } else { 2.0 };
        v[0] += weight * c;
        v[1] -= weight * kf * s;
        v[2] -= weight * kf * kf * c;
    }
    let inv = 1.0 / n as f64;
    [v[0] * inv, v[1] * TAU * inv, v[2] * TAU * TAU * inv]
}

/// One-dimensional trigonometric interpolation weights (value, first and
/// second derivative) for all `n` nodes at position `y`.
pub fn fourier_weights(n: usize, y: f64) -> [Vec<f64>; 3] {
    let mut w = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for j in 0..n {
        let k = kernel(n, y - j as f64 / n as f64);
        w[0][j] = k[0];
        w[1][j] = k[1];
        w[2][j] = k[2];
    }
    w
}

/// Tensor-product interpolation weights at a point of the torus.
#[derive(Clone, Debug)]
pub struct PointWeights<const D: usize> {
    n: usize,
    axes: Vec<[Vec<f64>; 3]>,
}

impl<const D: usize> PointWeights<D> {
    pub fn new(grid: &TorusGrid<D>, y: &Vect<D>) -> Self {
        Self {
            n: grid.n(),
            axes: (0..D).map(|a| fourier_weights(grid.n(), y[a])).collect(),
        }
    }

    /// `∂^deriv f(y)` of the interpolant of nodal values `f`, where
    /// `deriv[a] ∈ {0,1,2}` is the order along axis `a`.
    pub fn apply(&self, f: &[f64], deriv: [usize; D]) -> f64 {
        let n = self.n;
        match D {
            1 => {
                let w = &self.axes[0][deriv[0]];
                w.iter().zip(f).map(|(a, b)| a * b).sum()
            }
            _ => {
                let w0 = &self.axes[0][deriv[0]];
                let w1 = &self.axes[1][deriv[1]];
                let mut total = 0.0;
                for j1 in 0..n {
                    let row = &f[j1 * n..(j1 + 1) * n];
                    let s: f64 = w0.iter().zip(row).map(|(a, b)| a * b).sum();
                    total += w1[j1] * s;
                }
                total
            }
        }
    }

    pub fn value(&self, f: &[f64]) -> f64 {
        self.apply(f, [0; D])
    }

    pub fn gradient(&self, f: &[f64]) -> Vect<D> {
        Vect::<D>::from_fn(|a, _| {
            let mut d = [0; D];
            d[a] = 1;
            self.apply(f, d)
        })
    }

    pub fn hessian(&self, f: &[f64]) -> Mat<D> {
        let mut h = Mat::<D>::zeros();
        for a in 0..D {
            for b in a..D {
                let mut d = [0; D];
                d[a] += 1;
                d[b] += 1;
                let v = self.apply(f, d);
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        h
    }
}

/// Nodal differentiation on a torus grid.
#[derive(Clone, Debug)]
pub struct Operators<const D: usize> {
    grid: TorusGrid<D>,
    scheme: CellScheme,
    /// Row-major `N x N` first and second derivative matrices along one axis.
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl<const D: usize> Operators<D> {
    pub fn new(grid: TorusGrid<D>, scheme: CellScheme) -> Self {
        let n = grid.n();
        let mut d1 = vec![0.0; n * n];
        let mut d2 = vec![0.0; n * n];
        match scheme {
            CellScheme::Spectral => {
                for i in 0..n {
                    for j in 0..n {
                        let k = kernel(n, (i as f64 - j as f64) / n as f64);
                        d1[i * n + j] = k[1];
                        d2[i * n + j] = k[2];
                    }
                }
            }
            CellScheme::Centered => {
                let h = grid.spacing();
                for i in 0..n {
                    let l = (i + n - 1) % n;
                    let r = (i + 1) % n;
                    d1[i * n + r] += 0.5 / h;
                    d1[i * n + l] -= 0.5 / h;
                    d2[i * n + r] += 1.0 / (h * h);
                    d2[i * n + l] += 1.0 / (h * h);
                    d2[i * n + i] -= 2.0 / (h * h);
                }
            }
        }
        Self {
            grid,
            scheme,
            d1,
            d2,
        }
    }

    pub fn grid(&self) -> &TorusGrid<D> {
        &self.grid
    }

    pub fn scheme(&self) -> CellScheme {
        self.scheme
    }

    fn along(&self, m: &[f64], f: &[f64], axis: usize) -> Vec<f64> {
        let n = self.grid.n();
        let total = self.grid.len();
        let stride = if axis == 0 { 1 } else { n };
        let mut out = vec![0.0; total];
        for flat in 0..total {
            let i = (flat / stride) % n;
            let base = flat - i * stride;
            let row = &m[i * n..(i + 1) * n];
            let mut s = 0.0;
            for (j, c) in row.iter().enumerate() {
                s += c * f[base + j * stride];
            }
            out[flat] = s;
        }
        out
    }

    /// `∂_{y_a} f` at the nodes.
    pub fn first(&self, f: &[f64], axis: usize) -> Vec<f64> {
        self.along(&self.d1, f, axis)
    }

    /// `∂_{y_a} ∂_{y_b} f` at the nodes.
    pub fn second(&self, f: &[f64], a: usize, b: usize) -> Vec<f64> {
        if a == b {
            self.along(&self.d2, f, a)
        } else {
            self.along(&self.d1, &self.along(&self.d1, f, a), b)
        }
    }

    pub fn gradient(&self, f: &[f64]) -> Vec<Vect<D>> {
        let parts: Vec<Vec<f64>> = (0..D).map(|a| self.first(f, a)).collect();
        (0..self.grid.len())
            .map(|j| Vect::<D>::from_fn(|a, _| parts[a][j]))
            .collect()
    }

    /// `tr(A_j (D^2 f)_j)` at every node.
    pub fn trace_hessian(&self, a_nodes: &[Mat<D>], f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for a in 0..D {
            for b in a..D {
                let coef = if a == b { 1.0 } else { 2.0 };
                if (0..out.len()).all(|j| a_nodes[j][(a, b)] == 0.0) {
                    continue;
                }
                let d = self.second(f, a, b);
                for j in 0..out.len() {
                    out[j] += coef * a_nodes[j][(a, b)] * d[j];
                }
            }
        }
        out
    }

    /// Dense matrix of `v ↦ -tr(A D^2 v) + B·Dv` (plus `shift·v`).
    pub fn linear_operator(&self, a_nodes: &[Mat<D>], b_nodes: &[Vect<D>], shift: f64) -> DMatrix<f64> {
        let n = self.grid.n();
        let total = self.grid.len();
        let mut m = DMatrix::<f64>::zeros(total, total);
        match D {
            1 => {
                for i in 0..n {
                    let a = a_nodes[i][(0, 0)];
                    let b = b_nodes[i][0];
                    for j in 0..n {
                        m[(i, j)] = -a * self.d2[i * n + j] + b * self.d1[i * n + j];
                    }
                    m[(i, i)] += shift;
                }
            }
            _ => {
                let mixed = a_nodes.iter().any(|a| a[(0, 1)] != 0.0);
                for i1 in 0..n {
                    for i0 in 0..n {
                        let i = i0 + n * i1;
                        let am = &a_nodes[i];
                        let bv = &b_nodes[i];
                        // axis 0 couples nodes sharing i1
                        for j0 in 0..n {
                            let j = j0 + n * i1;
                            m[(i, j)] += -am[(0, 0)] * self.d2[i0 * n + j0] + bv[0] * self.d1[i0 * n + j0];
                        }
                        for j1 in 0..n {
                            let j = i0 + n * j1;
                            m[(i, j)] += -am[(1, 1)] * self.d2[i1 * n + j1] + bv[1] * self.d1[i1 * n + j1];
                        }
                        if mixed {
                            let c = -2.0 * am[(0, 1)];
                            for j1 in 0..n {
                                let r1 = self.d1[i1 * n + j1];
                                if r1 == 0.0 {
                                    continue;
                                }
                                for j0 in 0..n {
                                    m[(i, j0 + n * j1)] += c * self.d1[i0 * n + j0] * r1;
                                }
                            }
                        }
                        m[(i, i)] += shift;
                    }
                }
            }
        }
        m
    }
}

/// Scalar nodal values on a torus grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicField<const D: usize> {
    pub grid: TorusGrid<D>,
    pub values: Vec<f64>,
}

impl<const D: usize> PeriodicField<D> {
    pub fn new(grid: TorusGrid<D>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridInvariant(format!(
                "field has {} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: TorusGrid<D>) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_fn(grid: TorusGrid<D>, f: impl Fn(&Vect<D>) -> f64) -> Self {
        Self {
            grid,
            values: grid.nodes().iter().map(f).collect(),
        }
    }

    /// Trigonometric interpolant at an arbitrary point (any real `y`).
    pub fn eval(&self, y: &Vect<D>) -> f64 {
        PointWeights::new(&self.grid, y).value(&self.values)
    }

    pub fn gradient_at(&self, y: &Vect<D>) -> Vect<D> {
        PointWeights::new(&self.grid, y).gradient(&self.values)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_odd_or_small_grids() {
        assert!(TorusGrid::<1>::new(7).is_err());
        assert!(TorusGrid::<1>::new(6).is_err());
        assert!(TorusGrid::<2>::new(8).is_ok());
    }

    #[test]
    fn spectral_derivatives_are_exact_for_resolved_modes() {
        let grid = TorusGrid::<1>::new(16).unwrap();
        let ops = Operators::new(grid, CellScheme::Spectral);
        let f: Vec<f64> = grid.nodes().iter().map(|y| (3.0 * TAU * y[0]).sin()).collect();
        let d1 = ops.first(&f, 0);
        let d2 = ops.second(&f, 0, 0);
        for (j, y) in grid.nodes().iter().enumerate() {
            let w = 3.0 * TAU;
            assert!((d1[j] - w * (w * y[0] / 1.0).cos()).abs() < 1e-10);
            assert!((d2[j] + w * w * (w * y[0]).sin()).abs() < 1e-8);
        }
    }

    #[test]
    fn interpolation_is_periodic_and_matches_nodes() {
        let grid = TorusGrid::<2>::new(8).unwrap();
        let field = PeriodicField::from_fn(grid, |y| (TAU * (y[0] + 2.0 * y[1])).cos() + 0.3);
        let y = Vect::<2>::new(0.31, 0.77);
        let shifted = y + Vect::<2>::new(1.0, -1.0);
        assert!((field.eval(&y) - field.eval(&shifted)).abs() < 1e-13);
        assert!((field.eval(&y) - ((TAU * (y[0] + 2.0 * y[1])).cos() + 0.3)).abs() < 1e-12);
        assert!((field.eval(&grid.node(13)) - field.values[13]).abs() < 1e-13);
    }

    #[test]
    fn operator_matrix_agrees_with_nodal_application() {
        let grid = TorusGrid::<2>::new(8).unwrap();
        let ops = Operators::new(grid, CellScheme::Spectral);
        let a: Vec<Mat<2>> = grid
            .nodes()
            .iter()
            .map(|y| Mat::<2>::new(1.0 + 0.2 * (TAU * y[0]).cos(), 0.1, 0.1, 1.0))
            .collect();
        let b: Vec<Vect<2>> = grid.nodes().iter().map(|y| Vect::<2>::new(y[1], -0.5)).collect();
        let f: Vec<f64> = grid.nodes().iter().map(|y| (TAU * y[0]).sin() * (TAU * y[1]).cos()).collect();
        let m = ops.linear_operator(&a, &b, 0.0);
        let via_matrix = &m * nalgebra::DVector::from_vec(f.clone());
        let tr = ops.trace_hessian(&a, &f);
        let g = ops.gradient(&f);
        for j in 0..grid.len() {
            let direct = -tr[j] + b[j].dot(&g[j]);
            assert!((via_matrix[j] - direct).abs() < 1e-9);
        }
    }
}
