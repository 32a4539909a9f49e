//! Interior corrector hierarchy `w_1..w_m` on a slow `(x, t)` grid, the
//! two-scale expansion `η_m^ε = ū₀ + Σ ε^k w_k(x, t, x/ε)` and its residual
//! `ψ_m^ε = ∂_tη - ε tr(A D²η) + H(Dη, x/ε)`.
//!
//! Every slow node carries the fast fields on the torus grid. Slow derivatives
//! are fourth-order differences on the slow grid; fast derivatives use the
//! cell operators, so the discrete level equations hold to solver tolerance
//! and the residual sees only the truncation terms of order `ε^m`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellOptions, CellSolver};
use crate::effective::EffectiveSolution;
use crate::error::{Error, Result};
use crate::geometry::{trace_product, unit, BoxRegion, Mat, Vect};
use crate::io::{decode_len, encode_f64};
use crate::problem::ProblemSpec;
use crate::stencil::{interpolation_stencil, AxisDifferences};
use crate::torus::{CellScheme, PointWeights, TorusGrid};

/// Highest supported order per dimension.
pub fn max_order(dim: usize) -> usize {
    if dim == 1 {
        3
    } else {
        2
    }
}

/// Points per axis in slow interpolation stencils.
const SLOW_STENCIL: usize = 6;

/// Uniform grid over a box in `x` and over `[0, T]` in `t`.
///
/// Nodes are numbered with axis 0 fastest and time slowest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlowGrid<const D: usize> {
    pub lo: Vect<D>,
    pub hx: f64,
    pub counts: [usize; D],
    pub nt: usize,
    pub ht: f64,
}

/// Serialized form of a [`SlowGrid`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SlowGridFile {
    pub lo: Vec<f64>,
    pub hx: f64,
    pub counts: Vec<usize>,
    pub nt: usize,
    pub ht: f64,
}

impl<const D: usize> SlowGrid<D> {
    /// Covers `region` with spacing exactly `hx` (both ends may move out)
    /// and `[0, horizon]` with at least `horizon / ht` steps.
    pub fn new(region: &BoxRegion<D>, hx: f64, horizon: f64, ht: f64) -> Result<Self> {
        if !(hx > 0.0 && ht > 0.0 && horizon > 0.0) {
            return Err(Error::InvalidInput("slow grid needs positive hx, ht and horizon".into()));
        }
        // nodes sit on integer multiples of hx
        let lo = region.lo.map(|v| (v / hx + 1e-9).floor() * hx);
        let mut counts = [0; D];
        for (a, c) in counts.iter_mut().enumerate() {
            *c = (((region.hi[a] - lo[a]) / hx - 1e-9).ceil() as usize + 1).max(SLOW_STENCIL);
        }
        let steps = ((horizon / ht - 1e-9).ceil() as usize).max(5);
        Ok(Self {
            lo,
            hx,
            counts,
            nt: steps + 1,
            ht: horizon / steps as f64,
        })
    }

    pub fn space_len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn len(&self) -> usize {
        self.space_len() * self.nt
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> f64 {
        self.ht * (self.nt - 1) as f64
    }

    pub fn region(&self) -> BoxRegion<D> {
        let hi = Vect::<D>::from_fn(|a, _| self.lo[a] + self.hx * (self.counts[a] - 1) as f64);
        BoxRegion { lo: self.lo, hi }
    }

    pub fn x(&self, space: usize) -> Vect<D> {
        let mut rem = space;
        Vect::<D>::from_fn(|a, _| {
            let i = rem % self.counts[a];
            rem /= self.counts[a];
            self.lo[a] + self.hx * i as f64
        })
    }

    pub fn t(&self, j: usize) -> f64 {
        self.ht * j as f64
    }

    pub fn node(&self, flat: usize) -> (Vect<D>, f64) {
        let ns = self.space_len();
        (self.x(flat % ns), self.t(flat / ns))
    }

    /// Node stride and length of slow axis `axis` (`D` is time).
    fn axis(&self, axis: usize) -> (usize, usize) {
        if axis == D {
            (self.space_len(), self.nt)
        } else {
            (self.counts[..axis].iter().product(), self.counts[axis])
        }
    }

    fn differences(&self, axis: usize) -> AxisDifferences {
        let (_, n) = self.axis(axis);
        let h = if axis == D { self.ht } else { self.hx };
        AxisDifferences::new(n, h, 1).expect("slow axes have at least six nodes")
    }

    /// First derivative along slow `axis` of a field with `block` values per node.
    fn derivative(&self, f: &[f64], block: usize, axis: usize) -> Vec<f64> {
        let ad = self.differences(axis);
        let (stride, n) = self.axis(axis);
        let mut out = vec![0.0; f.len()];
        out.par_chunks_mut(block).enumerate().for_each(|(node, dst)| {
            let i = (node / stride) % n;
            let base = node - i * stride;
            let (start, w) = ad.stencil(i);
            for (l, c) in w.iter().enumerate() {
                let src = (base + (start + l) * stride) * block;
                for (d, s) in dst.iter_mut().zip(&f[src..src + block]) {
                    *d += c * s;
                }
            }
        });
        out
    }

    /// Tensor weights `(space index, weight)` interpolating at `x` within one time level.
    fn space_stencil(&self, x: &Vect<D>) -> Vec<(usize, f64)> {
        let mut out = vec![(0usize, 1.0f64)];
        let mut stride = 1;
        for a in 0..D {
            let n = self.counts[a];
            let s = ((x[a] - self.lo[a]) / self.hx).clamp(0.0, (n - 1) as f64);
            let (start, w) = interpolation_stencil(s, n, SLOW_STENCIL);
            out = out
                .iter()
                .flat_map(|&(idx, wt)| w.iter().enumerate().map(move |(l, c)| (idx + (start + l) * stride, wt * c)))
                .collect();
            stride *= n;
        }
        out
    }

    /// Tensor weights `(node, weight)` interpolating at `(x, t)`.
    pub fn stencil(&self, x: &Vect<D>, t: f64) -> Result<Vec<(usize, f64)>> {
        let region = self.region();
        let tol = 1e-12 * (1.0 + self.hx);
        for a in 0..D {
            if x[a] < region.lo[a] - tol || x[a] > region.hi[a] + tol {
                return Err(Error::OutsideWindow(format!("x = {:?} outside the slow grid", x.as_slice())));
            }
        }
        if t < -tol || t > self.horizon() * (1.0 + 1e-12) + tol {
            return Err(Error::OutsideWindow(format!("t = {t} outside [0, {}]", self.horizon())));
        }
        let space = self.space_stencil(x);
        let s = (t / self.ht).clamp(0.0, (self.nt - 1) as f64);
        let (start, w) = interpolation_stencil(s, self.nt, SLOW_STENCIL);
        let ns = self.space_len();
        let mut out = Vec::with_capacity(space.len() * w.len());
        for (l, c) in w.iter().enumerate() {
            if *c == 0.0 {
                continue;
            }
            for &(i, ws) in &space {
                out.push((i + ns * (start + l), ws * c));
            }
        }
        Ok(out)
    }

    /// Slow nodes whose `x` lies in `window`.
    pub fn nodes_in(&self, window: &BoxRegion<D>) -> Vec<usize> {
        let tol = 1e-12 * (1.0 + self.hx);
        (0..self.len())
            .filter(|&f| {
                let x = self.x(f % self.space_len());
                (0..D).all(|a| x[a] >= window.lo[a] - tol && x[a] <= window.hi[a] + tol)
            })
            .collect()
    }

    pub fn to_file(&self) -> SlowGridFile {
        SlowGridFile {
            lo: self.lo.iter().copied().collect(),
            hx: self.hx,
            counts: self.counts.to_vec(),
            nt: self.nt,
            ht: self.ht,
        }
    }

    pub fn from_file(file: &SlowGridFile) -> Result<Self> {
        if file.lo.len() != D || file.counts.len() != D {
            return Err(Error::UnsupportedDimension(file.lo.len()));
        }
        let mut counts = [0; D];
        counts.copy_from_slice(&file.counts);
        if counts.iter().any(|&c| c < SLOW_STENCIL) || file.nt < SLOW_STENCIL {
            return Err(Error::GridInvariant("slow grid needs at least six nodes per axis".into()));
        }
        Ok(Self {
            lo: Vect::<D>::from_column_slice(&file.lo),
            hx: file.hx,
            counts,
            nt: file.nt,
            ht: file.ht,
        })
    }
}

/// `w̃_k` and its slow derivatives, node-major (`node * N + j`).
#[derive(Clone, Debug)]
struct Level {
    wt: Vec<f64>,
    dt: Vec<f64>,
    /// `dx[a] = ∂_{x_a} w̃_k`.
    dx: Vec<Vec<f64>>,
    /// `dxx[a * D + b] = ∂_{x_a}∂_{x_b} w̃_k`.
    dxx: Vec<Vec<f64>>,
    /// `f_k` of the cell problem for `φ_{k+1}` (empty at the top level).
    source: Vec<f64>,
}

/// The effective data `ū_k` and its derivatives per slow node.
#[derive(Clone, Debug)]
struct Slow<const D: usize> {
    value: Vec<f64>,
    grad: Vec<Vect<D>>,
    hess: Vec<Mat<D>>,
    dt: Vec<f64>,
    fbar: Vec<f64>,
}

/// Interior correctors up to a fixed order on a slow grid.
#[derive(Clone, Debug)]
pub struct CorrectorHierarchy<const D: usize> {
    order: usize,
    slow: SlowGrid<D>,
    solver: CellSolver<D>,
    effective: Arc<EffectiveSolution<D>>,
    p: Vec<Vect<D>>,
    hess0: Vec<Mat<D>>,
    gamma: Vec<f64>,
    bbar: Vec<Vect<D>>,
    drift: Vec<Vect<D>>,
    /// `chi[a][node * N + j]`.
    chi: Vec<Vec<f64>>,
    levels: Vec<Level>,
    ubar: Vec<Slow<D>>,
}

struct NodeZero<const D: usize> {
    p: Vect<D>,
    hess: Mat<D>,
    gamma: f64,
    bbar: Vect<D>,
    drift: Vec<Vect<D>>,
    phi: Vec<f64>,
    chi: Vec<Vec<f64>>,
}

fn factorial(l: usize) -> f64 {
    (1..=l).map(|i| i as f64).product()
}

/// Ordered tuples of `parts` integers in `1..=max` whose sum passes `keep`.
fn tuples(parts: usize, max: usize, keep: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![1; parts];
    loop {
        if keep(cur.iter().sum()) {
            out.push(cur.clone());
        }
        let mut a = 0;
        loop {
            if a == parts {
                return out;
            }
            if cur[a] < max {
                cur[a] += 1;
                break;
            }
            cur[a] = 1;
            a += 1;
        }
    }
}

/// Builds `w_1..w_m` over `slow`.
pub fn build_hierarchy<const D: usize>(
    effective: Arc<EffectiveSolution<D>>,
    spec: &ProblemSpec<D>,
    grid: TorusGrid<D>,
    options: CellOptions,
    slow: SlowGrid<D>,
    order: usize,
) -> Result<CorrectorHierarchy<D>> {
    if order == 0 || order > max_order(D) {
        return Err(Error::InvalidInput(format!(
            "corrector order {order} outside 1..={} for dimension {D}",
            max_order(D)
        )));
    }
    if slow.horizon() > effective.horizon() * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::InvalidInput("slow grid extends past the effective horizon".into()));
    }
    let solver = CellSolver::new(spec, grid, options)?;
    let n = grid.len();
    let table = &effective.table;
    let same_grid = table.grid().n() == grid.n();

    let zero: Vec<NodeZero<D>> = (0..slow.len())
        .into_par_iter()
        .map(|node| -> Result<NodeZero<D>> {
            let (x, t) = slow.node(node);
            let at = |e| Error::at(format!("slow node x = {:?}, t = {t}", x.as_slice()), e);
            let jet = effective.eval(&x, t).map_err(at)?;
            let p = jet.grad;
            let start = if same_grid {
                Some((table.corrector(&p).map_err(at)?, table.hbar(&p).map_err(at)?))
            } else {
                None
            };
            let sol = solver
                .solve(&p, start.as_ref().map(|(w, h)| (w.as_slice(), *h)))
                .or_else(|_| solver.solve(&p, None))
                .map_err(at)?;
            let drift = solver.drift(&p, &sol.w.values);
            let lin = solver.linear(drift.clone()).map_err(at)?;
            let mut bbar = Vect::<D>::zeros();
            let mut chi = Vec::with_capacity(D);
            for a in 0..D {
                let s = lin.solve(&unit::<D>(a, 1.0), None).map_err(at)?;
                bbar[a] = s.gamma;
                chi.push(s.v.values);
            }
            if bbar.norm() < effective.zeta_min {
                return Err(at(Error::Inadmissible(format!(
                    "|B̄| = {:.3e} below zeta_min",
                    bbar.norm()
                ))));
            }
            Ok(NodeZero {
                p,
                hess: jet.hess,
                gamma: sol.gamma,
                bbar,
                drift,
                phi: sol.w.values,
                chi,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut h = CorrectorHierarchy {
        order,
        slow,
        solver,
        effective,
        p: zero.iter().map(|z| z.p).collect(),
        hess0: zero.iter().map(|z| z.hess).collect(),
        gamma: zero.iter().map(|z| z.gamma).collect(),
        bbar: zero.iter().map(|z| z.bbar).collect(),
        drift: zero.iter().flat_map(|z| z.drift.iter().copied()).collect(),
        chi: (0..D).map(|a| zero.iter().flat_map(|z| z.chi[a].iter().copied()).collect()).collect(),
        levels: Vec::with_capacity(order),
        ubar: Vec::with_capacity(order - 1),
    };
    let mut wt: Vec<f64> = zero.into_iter().flat_map(|z| z.phi).collect();

    for k in 1..=order {
        let dt = h.slow.derivative(&wt, n, D);
        let dx: Vec<Vec<f64>> = (0..D).map(|a| h.slow.derivative(&wt, n, a)).collect();
        let mut dxx = vec![Vec::new(); D * D];
        for a in 0..D {
            for b in a..D {
                let d = h.slow.derivative(&dx[a], n, b);
                if a != b {
                    let e = h.slow.derivative(&dx[b], n, a);
                    let avg: Vec<f64> = d.iter().zip(&e).map(|(u, v)| 0.5 * (u + v)).collect();
                    dxx[b * D + a] = avg.clone();
                    dxx[a * D + b] = avg;
                } else {
                    dxx[a * D + a] = d;
                }
            }
        }
        let mut level = Level {
            wt,
            dt,
            dx,
            dxx,
            source: Vec::new(),
        };
        if k == order {
            h.levels.push(level);
            break;
        }
        let solved: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..h.slow.len())
            .into_par_iter()
            .map(|node| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                let f = h.source(k, node, &level);
                let lin = h.solver.linear(h.drift[node * n..(node + 1) * n].to_vec())?;
                let s = lin.solve(&Vect::<D>::zeros(), Some(&f)).map_err(|e| {
                    let (x, t) = h.slow.node(node);
                    Error::at(format!("level {k} at slow node x = {:?}, t = {t}", x.as_slice()), e)
                })?;
                Ok((s.gamma, s.v.values, f))
            })
            .collect::<Result<Vec<_>>>()?;
        let fbar: Vec<f64> = solved.iter().map(|s| s.0).collect();
        level.source = solved.iter().flat_map(|s| s.2.iter().copied()).collect();
        let u = h.transport(fbar);
        let next: Vec<f64> = solved
            .into_iter()
            .enumerate()
            .flat_map(|(node, (_, phi, _))| {
                let g = u.grad[node];
                let chi = &h.chi;
                phi.into_iter()
                    .enumerate()
                    .map(move |(j, v)| v + (0..D).map(|a| chi[a][node * n + j] * g[a]).sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect();
        h.levels.push(level);
        h.ubar.push(u);
        wt = next;
    }
    Ok(h)
}

/// Pointwise `η`, `Dη` and `εD²η`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionValue<const D: usize> {
    pub eta: f64,
    pub grad: Vect<D>,
    pub hess_scaled: Mat<D>,
}

/// Residual of `η_m^ε` sampled at slow nodes of a window.
#[derive(Clone, Debug)]
pub struct ResidualField {
    pub eps: f64,
    pub order: usize,
    pub nodes: Vec<usize>,
    /// `max_y |ψ(x, t, y)|` over torus nodes.
    pub sup_y: Vec<f64>,
    /// `ψ(x, t, x/ε)`.
    pub diagonal: Vec<f64>,
    pub max: f64,
}

/// Per-node fast quantities of `w_k` for `k = 0..=m+1` under truncation at `m`.
struct NodeFields<const D: usize> {
    /// `Dη` terms per `y` node, indexed `[k][j]`: `W_k`.
    big_w: Vec<Vec<Vect<D>>>,
    /// `X_k` per `y` node.
    big_x: Vec<Vec<Mat<D>>>,
    /// `∂_t w_k` per `y` node (`k = 0..=m`).
    dt: Vec<Vec<f64>>,
}

impl<const D: usize> CorrectorHierarchy<D> {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn slow(&self) -> &SlowGrid<D> {
        &self.slow
    }

    pub fn grid(&self) -> &TorusGrid<D> {
        self.solver.grid()
    }

    pub fn solver(&self) -> &CellSolver<D> {
        &self.solver
    }

    pub fn effective(&self) -> &EffectiveSolution<D> {
        &self.effective
    }

    fn fast(&self, node: usize) -> std::ops::Range<usize> {
        let n = self.grid().len();
        node * n..(node + 1) * n
    }

    /// `Dū₀` at a slow node.
    pub fn slope(&self, node: usize) -> Vect<D> {
        self.p[node]
    }

    /// Cell constant `H̄(Dū₀)` solved at the node.
    pub fn gamma(&self, node: usize) -> f64 {
        self.gamma[node]
    }

    pub fn bbar(&self, node: usize) -> Vect<D> {
        self.bbar[node]
    }

    /// `B(x, t, y_j)` at the torus nodes.
    pub fn drift(&self, node: usize) -> &[Vect<D>] {
        &self.drift[self.fast(node)]
    }

    pub fn chi(&self, node: usize, axis: usize) -> &[f64] {
        &self.chi[axis][self.fast(node)]
    }

    /// `w̃_k` at a slow node (`φ₁` for `k = 1`).
    pub fn wt(&self, k: usize, node: usize) -> &[f64] {
        let l = &self.levels[k - 1];
        &l.wt[self.fast(node)]
    }

    /// `f_k` at a slow node, `1 <= k < order`.
    pub fn source_field(&self, k: usize, node: usize) -> &[f64] {
        let l = &self.levels[k - 1];
        &l.source[self.fast(node)]
    }

    /// `f̄_k` over all slow nodes, `1 <= k < order`.
    pub fn fbar(&self, k: usize) -> &[f64] {
        &self.ubar[k - 1].fbar
    }

    /// `ū_k` over all slow nodes, `1 <= k < order`.
    pub fn ubar(&self, k: usize) -> &[f64] {
        &self.ubar[k - 1].value
    }

    /// Largest `|w̃_k(x, t, y_0)|` and `|ū_k(x, 0)|`: both vanish by construction.
    pub fn normalization_defect(&self) -> (f64, f64) {
        let node0 = self.solver.options().normalization_node;
        let n = self.grid().len();
        let fast = self
            .levels
            .iter()
            .flat_map(|l| (0..self.slow.len()).map(move |node| l.wt[node * n + node0].abs()))
            .fold(0.0, f64::max);
        let ns = self.slow.space_len();
        let initial = self
            .ubar
            .iter()
            .flat_map(|u| u.value[..ns].iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        (fast, initial)
    }

    /// `f_k` at one node given the current level `w̃_k`.
    fn source(&self, k: usize, node: usize, level: &Level) -> Vec<f64> {
        let ops = self.solver.operators();
        let a = self.solver.diffusion_nodes();
        let ys = self.solver.nodes();
        let ham = self.solver.hamiltonian();
        let r = self.fast(node);
        let b = &self.drift[r.clone()];
        let dxdy: Vec<Vec<Vect<D>>> = (0..D).map(|ax| ops.gradient(&level.dx[ax][r.clone()])).collect();
        let prev_hess = |j: usize| -> Mat<D> {
            if k == 1 {
                self.hess0[node]
            } else {
                let l = &self.levels[k - 2];
                Mat::<D>::from_fn(|i, m| l.dxx[i * D + m][r.start + j]) + self.ubar[k - 2].hess[node]
            }
        };
        // W_0 and W_i, i = 1..k-1, for the Taylor terms
        let taylor = k >= 2;
        let (w0, ws) = if taylor {
            let w0: Vec<Vect<D>> = ops
                .gradient(&self.levels[0].wt[r.clone()])
                .into_iter()
                .map(|g| g + self.p[node])
                .collect();
            let ws: Vec<Vec<Vect<D>>> = (1..k)
                .map(|i| {
                    let upper = if i + 1 == k { &level.wt } else { &self.levels[i].wt };
                    let l = &self.levels[i - 1];
                    let gu = self.ubar[i - 1].grad[node];
                    ops.gradient(&upper[r.clone()])
                        .into_iter()
                        .enumerate()
                        .map(|(j, dy)| dy + Vect::<D>::from_fn(|ax, _| l.dx[ax][r.start + j]) + gu)
                        .collect()
                })
                .collect();
            (w0, ws)
        } else {
            (Vec::new(), Vec::new())
        };
        let combos: Vec<(usize, Vec<Vec<usize>>)> = (2..=k).map(|l| (l, tuples(l, k, |s| s == k))).collect();
        (0..r.len())
            .map(|j| {
                let idx = r.start + j;
                let dxw = Vect::<D>::from_fn(|ax, _| level.dx[ax][idx]);
                let mixed = Mat::<D>::from_fn(|ax, by| dxdy[ax][j][by]);
                let mut f = level.dt[idx] + b[j].dot(&dxw)
                    - 2.0 * trace_product(&a[j], &mixed)
                    - trace_product(&a[j], &prev_hess(j));
                if taylor {
                    for (l, list) in &combos {
                        let c = 1.0 / factorial(*l);
                        for tuple in list {
                            let dirs: Vec<Vect<D>> = tuple.iter().map(|&i| ws[i - 1][j]).collect();
                            f += c * ham.multilinear(&w0[j], &ys[j], &dirs);
                        }
                    }
                }
                f
            })
            .collect()
    }

    /// `ū_k` from `∂_tū + B̄·Dū + f̄ = 0`, `ū(·,0) = 0`, integrating `-f̄` along
    /// the straight characteristics through each node.
    fn transport(&self, fbar: Vec<f64>) -> Slow<D> {
        let slow = &self.slow;
        let ns = slow.space_len();
        let h = slow.ht;
        let value: Vec<f64> = (0..slow.len())
            .into_par_iter()
            .map(|node| {
                let j = node / ns;
                if j == 0 {
                    return 0.0;
                }
                let x = slow.x(node % ns);
                let b = self.bbar[node];
                let tj = slow.t(j);
                let f = |l: usize| -> f64 {
                    let y = x - (tj - slow.t(l)) * b;
                    let level = &fbar[l * ns..(l + 1) * ns];
                    slow.space_stencil(&y).iter().map(|&(i, w)| w * level[i]).sum()
                };
                let integral = if j == 1 {
                    h / 12.0 * (5.0 * f(0) + 8.0 * f(1) - f(2))
                } else {
                    let simpson_end = if j % 2 == 0 { j } else { j - 3 };
                    let mut s = 0.0;
                    let mut i = 0;
                    while i < simpson_end {
                        s += h / 3.0 * (f(i) + 4.0 * f(i + 1) + f(i + 2));
                        i += 2;
                    }
                    if j % 2 == 1 {
                        s += 3.0 * h / 8.0 * (f(j - 3) + 3.0 * f(j - 2) + 3.0 * f(j - 1) + f(j));
                    }
                    s
                };
                -integral
            })
            .collect();
        let grads: Vec<Vec<f64>> = (0..D).map(|a| slow.derivative(&value, 1, a)).collect();
        let mut hess = vec![Mat::<D>::zeros(); slow.len()];
        for a in 0..D {
            for b in 0..D {
                let d = slow.derivative(&grads[a], 1, b);
                for (m, v) in hess.iter_mut().zip(d) {
                    m[(a, b)] += 0.5 * v;
                    m[(b, a)] += 0.5 * v;
                }
            }
        }
        let grad: Vec<Vect<D>> = (0..slow.len())
            .map(|node| Vect::<D>::from_fn(|a, _| grads[a][node]))
            .collect();
        let dt = (0..slow.len())
            .map(|node| -self.bbar[node].dot(&grad[node]) - fbar[node])
            .collect();
        Slow {
            value,
            grad,
            hess,
            dt,
            fbar,
        }
    }

    fn check_truncation(&self, m: usize) -> Result<()> {
        if m == 0 || m > self.order {
            return Err(Error::InvalidInput(format!(
                "expansion order {m} outside 1..={}",
                self.order
            )));
        }
        Ok(())
    }

    /// `W_k` (`k = 0..=m`), `X_k` (`k = 0..=m+1`) and `∂_t w_k` at the torus
    /// nodes of one slow node, with `w_m = w̃_m` and `w_{m+1} = 0`.
    fn node_fields(&self, node: usize, m: usize) -> NodeFields<D> {
        let ops = self.solver.operators();
        let n = self.grid().len();
        let r = node * n..(node + 1) * n;
        let full = |k: usize| k < m;
        // per level k = 1..=m: Dy, Dyy, Dx, DxDy, Dxx, Dt
        let mut dy = Vec::with_capacity(m + 1);
        let mut dyy = Vec::with_capacity(m + 1);
        let mut dxk = Vec::with_capacity(m + 1);
        let mut mixed = Vec::with_capacity(m + 1);
        let mut dxx = Vec::with_capacity(m + 1);
        let mut dt = Vec::with_capacity(m + 1);
        dy.push(vec![Vect::<D>::zeros(); n]);
        dyy.push(vec![Mat::<D>::zeros(); n]);
        dxk.push(vec![self.p[node]; n]);
        mixed.push(vec![Mat::<D>::zeros(); n]);
        dxx.push(vec![self.hess0[node]; n]);
        dt.push(vec![-self.gamma[node]; n]);
        for k in 1..=m {
            let l = &self.levels[k - 1];
            let w = &l.wt[r.clone()];
            dy.push(ops.gradient(w));
            let mut second = vec![Mat::<D>::zeros(); n];
            for a in 0..D {
                for b in a..D {
                    let s = ops.second(w, a, b);
                    for (h, v) in second.iter_mut().zip(s) {
                        h[(a, b)] = v;
                        h[(b, a)] = v;
                    }
                }
            }
            dyy.push(second);
            let (gu, hu, tu) = if full(k) {
                let u = &self.ubar[k - 1];
                (u.grad[node], u.hess[node], u.dt[node])
            } else {
                (Vect::<D>::zeros(), Mat::<D>::zeros(), 0.0)
            };
            dxk.push(
                (0..n)
                    .map(|j| Vect::<D>::from_fn(|a, _| l.dx[a][r.start + j]) + gu)
                    .collect(),
            );
            let grads: Vec<Vec<Vect<D>>> = (0..D).map(|a| ops.gradient(&l.dx[a][r.clone()])).collect();
            mixed.push((0..n).map(|j| Mat::<D>::from_fn(|a, b| grads[a][j][b])).collect());
            dxx.push(
                (0..n)
                    .map(|j| Mat::<D>::from_fn(|a, b| l.dxx[a * D + b][r.start + j]) + hu)
                    .collect(),
            );
            dt.push(l.dt[r.clone()].iter().map(|v| v + tu).collect());
        }
        let big_w = (0..=m)
            .map(|k| {
                (0..n)
                    .map(|j| if k < m { dy[k + 1][j] } else { Vect::<D>::zeros() } + dxk[k][j])
                    .collect()
            })
            .collect();
        let big_x = (0..=m + 1)
            .map(|k| {
                (0..n)
                    .map(|j| {
                        let mut x = Mat::<D>::zeros();
                        if k < m {
                            x += dyy[k + 1][j];
                        }
                        if k <= m {
                            x += mixed[k][j] + mixed[k][j].transpose();
                        }
                        if k >= 1 {
                            x += dxx[k - 1][j];
                        }
                        x
                    })
                    .collect()
            })
            .collect();
        NodeFields { big_w, big_x, dt }
    }

    /// `ψ_m^ε(x, t, y_j)` at the torus nodes of one slow node.
    pub fn residual_at_node(&self, eps: f64, m: usize, node: usize) -> Result<Vec<f64>> {
        self.check_truncation(m)?;
        let f = self.node_fields(node, m);
        let a = self.solver.diffusion_nodes();
        let ys = self.solver.nodes();
        let ham = self.solver.hamiltonian();
        Ok((0..self.grid().len())
            .map(|j| {
                let mut dt = 0.0;
                let mut grad = Vect::<D>::zeros();
                let mut hess = Mat::<D>::zeros();
                let mut e = 1.0;
                for k in 0..=m + 1 {
                    if k <= m {
                        dt += e * f.dt[k][j];
                        grad += e * f.big_w[k][j];
                    }
                    hess += e * f.big_x[k][j];
                    e *= eps;
                }
                dt - trace_product(&a[j], &hess) + ham.value(&grad, &ys[j])
            })
            .collect())
    }

    /// The same residual from `ψ = ε^m ∂_t w_m + E_m^ε`, with the remainder
    /// `E_m^ε` assembled term by term: the Taylor remainder `R_{m-1}` of `H`
    /// about `W_0`, the diffusion terms `ε^m X_m`, `ε^{m+1} X_{m+1}`, the
    /// first-order term `ε^m B·W_m`, and the products `B_l(W_{i_1},…)` with
    /// `l <= m-1` and `Σi >= m`.
    pub fn residual_from_remainder(&self, eps: f64, m: usize, node: usize) -> Result<Vec<f64>> {
        self.check_truncation(m)?;
        let f = self.node_fields(node, m);
        let a = self.solver.diffusion_nodes();
        let ys = self.solver.nodes();
        let ham = self.solver.hamiltonian();
        // products of order l <= m-1 belong to the Taylor polynomial; those
        // with total index >= m are not absorbed by the level equations
        let products: Vec<(usize, Vec<Vec<usize>>)> = (2..m).map(|l| (l, tuples(l, m, |s| s >= m))).collect();
        Ok((0..self.grid().len())
            .map(|j| {
                let w0 = f.big_w[0][j];
                let mut q = Vect::<D>::zeros();
                for k in 1..=m {
                    q += eps.powi(k as i32) * f.big_w[k][j];
                }
                let mut taylor = ham.value(&w0, &ys[j]);
                if m >= 2 {
                    taylor += ham.gradient(&w0, &ys[j]).dot(&q);
                }
                for l in 2..m {
                    taylor += ham.multilinear(&w0, &ys[j], &vec![q; l]) / factorial(l);
                }
                let mut e = ham.value(&(w0 + q), &ys[j]) - taylor;
                e -= eps.powi(m as i32) * trace_product(&a[j], &f.big_x[m][j]);
                e -= eps.powi(m as i32 + 1) * trace_product(&a[j], &f.big_x[m + 1][j]);
                if m >= 2 {
                    e += eps.powi(m as i32) * ham.gradient(&w0, &ys[j]).dot(&f.big_w[m][j]);
                }
                for (l, list) in &products {
                    let c = 1.0 / factorial(*l);
                    for tuple in list {
                        let dirs: Vec<Vect<D>> = tuple.iter().map(|&i| f.big_w[i][j]).collect();
                        let s: usize = tuple.iter().sum();
                        e += c * eps.powi(s as i32) * ham.multilinear(&w0, &ys[j], &dirs);
                    }
                }
                eps.powi(m as i32) * f.dt[m][j] + e
            })
            .collect())
    }

    /// Samples `ψ_m^ε` at every slow node whose `x` lies in `window`.
    pub fn residual_field(&self, eps: f64, m: usize, window: &BoxRegion<D>) -> Result<ResidualField> {
        self.check_truncation(m)?;
        if !(eps > 0.0 && eps <= 0.5) {
            return Err(Error::InvalidInput(format!("eps = {eps} outside (0, 1/2]")));
        }
        let nodes = self.slow.nodes_in(window);
        if nodes.is_empty() {
            return Err(Error::OutsideWindow("no slow nodes inside the residual window".into()));
        }
        let per: Vec<(f64, f64)> = nodes
            .par_iter()
            .map(|&node| -> Result<(f64, f64)> {
                let psi = self.residual_at_node(eps, m, node)?;
                let (x, _) = self.slow.node(node);
                let y = (x / eps).map(|v| v.rem_euclid(1.0));
                let diag = PointWeights::new(self.grid(), &y).value(&psi);
                Ok((psi.iter().fold(0.0, |s, v| s.max(v.abs())), diag))
            })
            .collect::<Result<Vec<_>>>()?;
        let sup_y: Vec<f64> = per.iter().map(|v| v.0).collect();
        let max = sup_y.iter().copied().fold(0.0, f64::max);
        Ok(ResidualField {
            eps,
            order: m,
            nodes,
            sup_y,
            diagonal: per.iter().map(|v| v.1).collect(),
            max,
        })
    }

    /// `η_m^ε(x, t)` only; `m = 0` gives `ū₀`.
    pub fn eta(&self, eps: f64, m: usize, x: &Vect<D>, t: f64) -> Result<f64> {
        let y = (x / eps).map(|v| v.rem_euclid(1.0));
        self.eta_with(eps, m, x, t, &PointWeights::new(self.grid(), &y))
    }

    /// [`Self::eta`] with the fast interpolation weights at `x/ε` supplied.
    pub fn eta_with(&self, eps: f64, m: usize, x: &Vect<D>, t: f64, pw: &PointWeights<D>) -> Result<f64> {
        if m > 0 {
            self.check_truncation(m)?;
        }
        let stencil = self.slow.stencil(x, t)?;
        let n = self.grid().len();
        let mut eta = self.effective.value(x, t)?;
        let mut e = 1.0;
        for k in 1..=m {
            e *= eps;
            let l = &self.levels[k - 1];
            let mut v = 0.0;
            for &(node, w) in &stencil {
                let mut s = pw.value(&l.wt[node * n..(node + 1) * n]);
                if k < m {
                    s += self.ubar[k - 1].value[node];
                }
                v += w * s;
            }
            eta += e * v;
        }
        Ok(eta)
    }

    /// `η_m^ε`, `Dη_m^ε` and `εD²η_m^ε` at `(x, t)`.
    pub fn evaluate_expansion(&self, eps: f64, m: usize, x: &Vect<D>, t: f64) -> Result<ExpansionValue<D>> {
        self.check_truncation(m)?;
        let stencil = self.slow.stencil(x, t)?;
        let y = (x / eps).map(|v| v.rem_euclid(1.0));
        let pw = PointWeights::new(self.grid(), &y);
        let n = self.grid().len();
        let jet = self.effective.eval(x, t)?;
        let mut out = ExpansionValue {
            eta: jet.value,
            grad: jet.grad,
            hess_scaled: eps * jet.hess,
        };
        for k in 1..=m {
            let l = &self.levels[k - 1];
            let (mut v, mut dy, mut dyy, mut dx, mut mixed, mut dxx) = (
                0.0,
                Vect::<D>::zeros(),
                Mat::<D>::zeros(),
                Vect::<D>::zeros(),
                Mat::<D>::zeros(),
                Mat::<D>::zeros(),
            );
            for &(node, w) in &stencil {
                let r = node * n..(node + 1) * n;
                v += w * pw.value(&l.wt[r.clone()]);
                dy += w * pw.gradient(&l.wt[r.clone()]);
                dyy += w * pw.hessian(&l.wt[r.clone()]);
                for a in 0..D {
                    dx[a] += w * pw.value(&l.dx[a][r.clone()]);
                    let g = pw.gradient(&l.dx[a][r.clone()]);
                    for b in 0..D {
                        mixed[(a, b)] += w * g[b];
                        dxx[(a, b)] += w * pw.value(&l.dxx[a * D + b][r.clone()]);
                    }
                }
                if k < m {
                    let u = &self.ubar[k - 1];
                    v += w * u.value[node];
                    dx += w * u.grad[node];
                    dxx += w * u.hess[node];
                }
            }
            let ek = eps.powi(k as i32);
            out.eta += ek * v;
            out.grad += ek * dx + eps.powi(k as i32 - 1) * dy;
            out.hess_scaled += eps * ek * dxx + ek * (mixed + mixed.transpose()) + eps.powi(k as i32 - 1) * dyy;
        }
        Ok(out)
    }

    pub fn to_file(&self) -> HierarchyFile {
        let vects = |v: &[Vect<D>]| encode_f64(&v.iter().flat_map(|x| x.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>());
        let mats = |v: &[Mat<D>]| encode_f64(&v.iter().flat_map(|x| x.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>());
        HierarchyFile {
            schema: "corrector-hierarchy".into(),
            dim: D,
            order: self.order,
            n: self.grid().n(),
            scheme: self.solver.options().scheme,
            slow: self.slow.to_file(),
            p: vects(&self.p),
            hess0: mats(&self.hess0),
            gamma: encode_f64(&self.gamma),
            bbar: vects(&self.bbar),
            drift: vects(&self.drift),
            chi: self.chi.iter().map(|c| encode_f64(c)).collect(),
            levels: self
                .levels
                .iter()
                .map(|l| LevelFile {
                    wt: encode_f64(&l.wt),
                    dt: encode_f64(&l.dt),
                    dx: l.dx.iter().map(|v| encode_f64(v)).collect(),
                    dxx: l.dxx.iter().map(|v| encode_f64(v)).collect(),
                    source: encode_f64(&l.source),
                })
                .collect(),
            ubar: self
                .ubar
                .iter()
                .map(|u| SlowFile {
                    value: encode_f64(&u.value),
                    grad: vects(&u.grad),
                    hess: mats(&u.hess),
                    dt: encode_f64(&u.dt),
                    fbar: encode_f64(&u.fbar),
                })
                .collect(),
        }
    }

    /// Restores a hierarchy; `effective` and `spec` must be the ones it was built from.
    pub fn from_file(
        file: &HierarchyFile,
        effective: Arc<EffectiveSolution<D>>,
        spec: &ProblemSpec<D>,
        options: CellOptions,
    ) -> Result<Self> {
        if file.dim != D {
            return Err(Error::UnsupportedDimension(file.dim));
        }
        if file.schema != "corrector-hierarchy" {
            return Err(Error::InvalidInput(format!("unexpected archive schema {:?}", file.schema)));
        }
        let slow = SlowGrid::<D>::from_file(&file.slow)?;
        let grid = TorusGrid::<D>::new(file.n)?;
        let options = CellOptions {
            scheme: file.scheme,
            ..options
        };
        let solver = CellSolver::new(spec, grid, options)?;
        let len = slow.len();
        let n = grid.len();
        let vects = |s: &str, count: usize, what: &str| -> Result<Vec<Vect<D>>> {
            Ok(decode_len(s, count * D, what)?
                .chunks_exact(D)
                .map(Vect::<D>::from_column_slice)
                .collect())
        };
        let mats = |s: &str, what: &str| -> Result<Vec<Mat<D>>> {
            Ok(decode_len(s, len * D * D, what)?
                .chunks_exact(D * D)
                .map(Mat::<D>::from_column_slice)
                .collect())
        };
        if file.levels.len() != file.order || file.ubar.len() + 1 != file.order || file.chi.len() != D {
            return Err(Error::InvalidInput("archive level counts do not match its order".into()));
        }
        let levels = file
            .levels
            .iter()
            .enumerate()
            .map(|(i, l)| -> Result<Level> {
                let src_len = if i + 1 < file.order { len * n } else { 0 };
                Ok(Level {
                    wt: decode_len(&l.wt, len * n, "wt")?,
                    dt: decode_len(&l.dt, len * n, "dt")?,
                    dx: l.dx.iter().map(|v| decode_len(v, len * n, "dx")).collect::<Result<_>>()?,
                    dxx: l.dxx.iter().map(|v| decode_len(v, len * n, "dxx")).collect::<Result<_>>()?,
                    source: decode_len(&l.source, src_len, "source")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ubar = file
            .ubar
            .iter()
            .map(|u| -> Result<Slow<D>> {
                Ok(Slow {
                    value: decode_len(&u.value, len, "ubar")?,
                    grad: vects(&u.grad, len, "ubar grad")?,
                    hess: mats(&u.hess, "ubar hess")?,
                    dt: decode_len(&u.dt, len, "ubar dt")?,
                    fbar: decode_len(&u.fbar, len, "fbar")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            order: file.order,
            slow,
            solver,
            effective,
            p: vects(&file.p, len, "p")?,
            hess0: mats(&file.hess0, "hess0")?,
            gamma: decode_len(&file.gamma, len, "gamma")?,
            bbar: vects(&file.bbar, len, "bbar")?,
            drift: vects(&file.drift, len * n, "drift")?,
            chi: file.chi.iter().map(|c| decode_len(c, len * n, "chi")).collect::<Result<_>>()?,
            levels,
            ubar,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelFile {
    pub wt: String,
    pub dt: String,
    pub dx: Vec<String>,
    pub dxx: Vec<String>,
    pub source: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlowFile {
    pub value: String,
    pub grad: String,
    pub hess: String,
    pub dt: String,
    pub fbar: String,
}

/// Portable hierarchy archive (JSON with base64 little-endian arrays).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierarchyFile {
    pub schema: String,
    pub dim: usize,
    pub order: usize,
    pub n: usize,
    pub scheme: CellScheme,
    pub slow: SlowGridFile,
    pub p: String,
    pub hess0: String,
    pub gamma: String,
    pub bbar: String,
    pub drift: String,
    pub chi: Vec<String>,
    pub levels: Vec<LevelFile>,
    pub ubar: Vec<SlowFile>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuples_enumerate_compositions() {
        assert_eq!(tuples(2, 2, |s| s == 2), vec![vec![1, 1]]);
        assert_eq!(tuples(2, 3, |s| s == 3).len(), 2);
        assert_eq!(tuples(3, 3, |s| s >= 3).len(), 27);
        assert_eq!(tuples(2, 2, |s| s >= 2).len(), 4);
    }

    #[test]
    fn slow_derivative_is_fourth_order() {
        let region = BoxRegion::new(Vect::<1>::new(0.0), Vect::<1>::new(1.0)).unwrap();
        let err = |h: f64| {
            let g = SlowGrid::<1>::new(&region, h, 1.0, h).unwrap();
            let f: Vec<f64> = (0..g.len()).map(|i| {
                let (x, t) = g.node(i);
                (x[0] + 0.5 * t).sin()
            }).collect();
            let d = g.derivative(&f, 1, 0);
            (0..g.len())
                .map(|i| {
                    let (x, t) = g.node(i);
                    (d[i] - (x[0] + 0.5 * t).cos()).abs()
                })
                .fold(0.0, f64::max)
        };
        let rate = (err(0.05) / err(0.025)).log2();
        assert!(rate > 3.7, "rate {rate}");
    }
}
