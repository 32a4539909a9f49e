//! Tabulated effective Hamiltonian `H̄`, its gradient `B̄ = D_pH̄`, and the
//! per-node correctors `w(p,·)`, `v(p,·) = D_pw(p,·)` on a uniform `p`-grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellDiagnostics, CellOptions, CellSolver};
use crate::error::{Error, Result};
use crate::geometry::{BoxRegion, Mat, Vect};
use crate::io::{decode_f64, encode_f64};
use crate::problem::{ProblemBounds, ProblemSpec};
use crate::stencil::interpolation_stencil_with_derivative;
use crate::torus::{CellScheme, PeriodicField, TorusGrid};

/// Points per axis in the local interpolation stencil.
const STENCIL: usize = 8;

/// `p`-box and spacing of a table, as stored in configuration files.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TableSpec {
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
    pub dp: f64,
}

#[derive(Clone, Debug)]
pub struct EffectiveTable<const D: usize> {
    grid: TorusGrid<D>,
    scheme: CellScheme,
    p_lo: Vect<D>,
    dp: f64,
    counts: [usize; D],
    hbar: Vec<f64>,
    bbar: Vec<Vect<D>>,
    w_fields: Vec<Vec<f64>>,
    /// `v_fields[node][axis]`.
    v_fields: Vec<Vec<Vec<f64>>>,
    diagnostics: Vec<CellDiagnostics>,
}

/// Interpolation weights over a tensor stencil of table nodes.
struct TableStencil<const D: usize> {
    nodes: Vec<usize>,
    value: Vec<f64>,
    /// `grad[a][k]`: weight of node `k` in `∂_{p_a}`.
    grad: Vec<Vec<f64>>,
}

impl<const D: usize> EffectiveTable<D> {
    pub fn counts(&self) -> [usize; D] {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.hbar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hbar.is_empty()
    }

    pub fn dp(&self) -> f64 {
        self.dp
    }

    pub fn grid(&self) -> &TorusGrid<D> {
        &self.grid
    }

    pub fn scheme(&self) -> CellScheme {
        self.scheme
    }

    pub fn p_box(&self) -> BoxRegion<D> {
        let hi = Vect::<D>::from_fn(|a, _| self.p_lo[a] + (self.counts[a] - 1) as f64 * self.dp);
        BoxRegion { lo: self.p_lo, hi }
    }

    fn multi(&self, flat: usize) -> [usize; D] {
        let mut idx = [0; D];
        let mut f = flat;
        for a in 0..D {
            idx[a] = f % self.counts[a];
            f /= self.counts[a];
        }
        idx
    }

    pub fn p_node(&self, flat: usize) -> Vect<D> {
        let idx = self.multi(flat);
        Vect::<D>::from_fn(|a, _| self.p_lo[a] + idx[a] as f64 * self.dp)
    }

    pub fn hbar_nodes(&self) -> &[f64] {
        &self.hbar
    }

    pub fn bbar_nodes(&self) -> &[Vect<D>] {
        &self.bbar
    }

    pub fn w_field(&self, flat: usize) -> PeriodicField<D> {
        PeriodicField {
            grid: self.grid,
            values: self.w_fields[flat].clone(),
        }
    }

    pub fn v_field(&self, flat: usize, axis: usize) -> PeriodicField<D> {
        PeriodicField {
            grid: self.grid,
            values: self.v_fields[flat][axis].clone(),
        }
    }

    pub fn diagnostics(&self) -> &[CellDiagnostics] {
        &self.diagnostics
    }

    pub fn contains(&self, p: &Vect<D>) -> bool {
        let b = self.p_box();
        (0..D).all(|a| {
            let slack = 1e-12 * (1.0 + p[a].abs());
            p[a] >= b.lo[a] - slack && p[a] <= b.hi[a] + slack
        })
    }

    fn stencil(&self, p: &Vect<D>) -> Result<TableStencil<D>> {
        if !self.contains(p) {
            let b = self.p_box();
            return Err(Error::TableRange(format!(
                "p = {:?} outside tabulated box [{:?}, {:?}]",
                p.as_slice(),
                b.lo.as_slice(),
                b.hi.as_slice()
            )));
        }
        let per_axis: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..D)
            .map(|a| {
                let s = (p[a] - self.p_lo[a]) / self.dp;
                let (start, w, dw) = interpolation_stencil_with_derivative(s, self.counts[a], STENCIL);
                (start, w, dw.iter().map(|c| c / self.dp).collect())
            })
            .collect();
        let widths: Vec<usize> = per_axis.iter().map(|s| s.1.len()).collect();
        let total: usize = widths.iter().product();
        let mut st = TableStencil {
            nodes: Vec::with_capacity(total),
            value: Vec::with_capacity(total),
            grad: vec![Vec::with_capacity(total); D],
        };
        for f in 0..total {
            let mut rem = f;
            let mut local = [0usize; D];
            for a in 0..D {
                local[a] = rem % widths[a];
                rem /= widths[a];
            }
            let mut flat = 0;
            for a in (0..D).rev() {
                flat = flat * self.counts[a] + per_axis[a].0 + local[a];
            }
            st.nodes.push(flat);
            st.value.push((0..D).map(|a| per_axis[a].1[local[a]]).product());
            for g in 0..D {
                st.grad[g].push(
                    (0..D)
                        .map(|a| if a == g { per_axis[a].2[local[a]] } else { per_axis[a].1[local[a]] })
                        .product(),
                );
            }
        }
        Ok(st)
    }

    pub fn hbar(&self, p: &Vect<D>) -> Result<f64> {
        let st = self.stencil(p)?;
        Ok(st.nodes.iter().zip(&st.value).map(|(n, w)| w * self.hbar[*n]).sum())
    }

    pub fn bbar(&self, p: &Vect<D>) -> Result<Vect<D>> {
        let st = self.stencil(p)?;
        Ok(st
            .nodes
            .iter()
            .zip(&st.value)
            .fold(Vect::<D>::zeros(), |acc, (n, w)| acc + *w * self.bbar[*n]))
    }

    /// `D_p^2 H̄`, the symmetrized derivative of the `B̄` interpolant.
    pub fn hbar_hessian(&self, p: &Vect<D>) -> Result<Mat<D>> {
        let st = self.stencil(p)?;
        let mut m = Mat::<D>::zeros();
        for b in 0..D {
            for (k, n) in st.nodes.iter().enumerate() {
                let wb = st.grad[b][k];
                for a in 0..D {
                    m[(a, b)] += wb * self.bbar[*n][a];
                }
            }
        }
        Ok(0.5 * (m + m.transpose()))
    }

    /// `(H̄, B̄, D_p^2 H̄)` from one stencil.
    pub fn jet(&self, p: &Vect<D>) -> Result<(f64, Vect<D>, Mat<D>)> {
        Ok((self.hbar(p)?, self.bbar(p)?, self.hbar_hessian(p)?))
    }

    /// Interpolated corrector `w(p,·)` at the torus nodes.
    pub fn corrector(&self, p: &Vect<D>) -> Result<Vec<f64>> {
        let st = self.stencil(p)?;
        let mut out = vec![0.0; self.grid.len()];
        for (n, w) in st.nodes.iter().zip(&st.value) {
            for (o, v) in out.iter_mut().zip(&self.w_fields[*n]) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Interpolated `v(p,·)` along `axis`.
    pub fn corrector_derivative(&self, p: &Vect<D>, axis: usize) -> Result<Vec<f64>> {
        let st = self.stencil(p)?;
        let mut out = vec![0.0; self.grid.len()];
        for (n, w) in st.nodes.iter().zip(&st.value) {
            for (o, v) in out.iter_mut().zip(&self.v_fields[*n][axis]) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Checks growth bounds, midpoint convexity and `B̄` against central
    /// differences of the tabulated `H̄`.
    pub fn check_properties(&self, bounds: &ProblemBounds) -> TableReport {
        let mut report = TableReport {
            worst_bound_margin: f64::INFINITY,
            worst_convexity_gap: f64::INFINITY,
            worst_fd_relative: 0.0,
            fd_samples: 0,
        };
        for i in 0..self.len() {
            let p = self.p_node(i);
            let (lo, hi) = bounds.growth_interval(p.norm_squared());
            report.worst_bound_margin = report.worst_bound_margin.min(self.hbar[i] - lo).min(hi - self.hbar[i]);
        }
        // midpoint convexity over node pairs (q, r) whose midpoint is a node
        for i in 0..self.len() {
            let mid = self.multi(i);
            for j in 0..self.len() {
                let q = self.multi(j);
                let mut r = [0usize; D];
                let mut ok = true;
                for a in 0..D {
                    let v = 2 * mid[a] as i64 - q[a] as i64;
                    if v < 0 || v >= self.counts[a] as i64 {
                        ok = false;
                        break;
                    }
                    r[a] = v as usize;
                }
                if !ok || j == i {
                    continue;
                }
                let mut rf = 0;
                for a in (0..D).rev() {
                    rf = rf * self.counts[a] + r[a];
                }
                let gap = 0.5 * (self.hbar[j] + self.hbar[rf]) - self.hbar[i];
                report.worst_convexity_gap = report.worst_convexity_gap.min(gap);
            }
        }
        for i in 0..self.len() {
            let idx = self.multi(i);
            let p = self.p_node(i);
            for a in 0..D {
                let c = self.counts[a];
                let stride: usize = (0..a).map(|b| self.counts[b]).product();
                let at = |off: i64| self.hbar[(i as i64 + off * stride as i64) as usize];
                let fd = if idx[a] >= 2 && idx[a] + 2 < c {
                    (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * self.dp)
                } else if idx[a] >= 1 && idx[a] + 1 < c {
                    (at(1) - at(-1)) / (2.0 * self.dp)
                } else {
                    continue;
                };
                let rel = (fd - self.bbar[i][a]).abs() / (1.0 + p.norm());
                report.fd_samples += 1;
                report.worst_fd_relative = report.worst_fd_relative.max(rel);
            }
        }
        report
    }

    pub fn to_file(&self) -> TableFile {
        let enc = encode_f64;
        let bbar: Vec<f64> = self.bbar.iter().flat_map(|b| b.iter().copied().collect::<Vec<_>>()).collect();
        let w: Vec<f64> = self.w_fields.concat();
        let v: Vec<f64> = self.v_fields.iter().flat_map(|f| f.concat()).collect();
        TableFile {
            schema: "effective-table".into(),
            dim: D,
            n: self.grid.n(),
            scheme: self.scheme,
            p_lo: self.p_lo.iter().copied().collect(),
            dp: self.dp,
            counts: self.counts.to_vec(),
            hbar: enc(&self.hbar),
            bbar: enc(&bbar),
            w: enc(&w),
            v: enc(&v),
            diagnostics: self.diagnostics.clone(),
        }
    }

    pub fn from_file(file: &TableFile) -> Result<Self> {
        if file.dim != D {
            return Err(Error::UnsupportedDimension(file.dim));
        }
        let dec = decode_f64;
        let grid = TorusGrid::<D>::new(file.n)?;
        let mut counts = [0usize; D];
        if file.counts.len() != D {
            return Err(Error::InvalidInput("table counts do not match dimension".into()));
        }
        counts.copy_from_slice(&file.counts);
        let nodes: usize = counts.iter().product();
        let m = grid.len();
        let hbar = dec(&file.hbar)?;
        let bbar_flat = dec(&file.bbar)?;
        let w = dec(&file.w)?;
        let v = dec(&file.v)?;
        if hbar.len() != nodes || bbar_flat.len() != nodes * D || w.len() != nodes * m || v.len() != nodes * m * D {
            return Err(Error::InvalidInput("table arrays have inconsistent lengths".into()));
        }
        Ok(Self {
            grid,
            scheme: file.scheme,
            p_lo: Vect::<D>::from_column_slice(&file.p_lo),
            dp: file.dp,
            counts,
            hbar,
            bbar: bbar_flat.chunks_exact(D).map(Vect::<D>::from_column_slice).collect(),
            w_fields: w.chunks_exact(m).map(|c| c.to_vec()).collect(),
            v_fields: v
                .chunks_exact(m * D)
                .map(|c| c.chunks_exact(m).map(|f| f.to_vec()).collect())
                .collect(),
            diagnostics: file.diagnostics.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }
}

/// Worst-case margins from [`EffectiveTable::check_properties`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TableReport {
    /// Smallest slack in `α|p|²-α' <= H̄ <= β|p|²+β'`.
    pub worst_bound_margin: f64,
    /// Smallest `½H̄(q) + ½H̄(r) - H̄((q+r)/2)` over grid pairs.
    pub worst_convexity_gap: f64,
    /// Largest `|B̄ - FD| / (1 + |p|)`.
    pub worst_fd_relative: f64,
    pub fd_samples: usize,
}

/// Portable serialized table: JSON header plus base64 little-endian arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableFile {
    pub schema: String,
    pub dim: usize,
    pub n: usize,
    pub scheme: CellScheme,
    pub p_lo: Vec<f64>,
    pub dp: f64,
    pub counts: Vec<usize>,
    pub hbar: String,
    pub bbar: String,
    pub w: String,
    pub v: String,
    pub diagnostics: Vec<CellDiagnostics>,
}

struct NodeResult {
    hbar: f64,
    bbar: Vec<f64>,
    w: Vec<f64>,
    v: Vec<Vec<f64>>,
    diag: CellDiagnostics,
}

/// Tabulates `H̄`, `B̄` and the correctors over `p_box` with spacing `dp`.
///
/// Nodes along each axis-0 line are solved in sequence, each starting from
/// its neighbour's solution; distinct lines run in parallel.
pub fn effective_table<const D: usize>(
    spec: &ProblemSpec<D>,
    grid: TorusGrid<D>,
    options: CellOptions,
    p_box: &BoxRegion<D>,
    dp: f64,
) -> Result<EffectiveTable<D>> {
    if !(dp > 0.0) {
        return Err(Error::InvalidInput("table spacing dp must be positive".into()));
    }
    let mut counts = [0usize; D];
    for a in 0..D {
        let steps = (p_box.width(a) / dp - 1e-9).ceil().max(0.0) as usize;
        counts[a] = steps + 1;
        if counts[a] < 2 {
            return Err(Error::InvalidInput(format!("p-box axis {a} needs at least two nodes")));
        }
    }
    let solver = CellSolver::new(spec, grid, options)?;
    let line_len = counts[0];
    let lines: usize = counts.iter().skip(1).product();
    let p_lo = p_box.lo;

    let results: Vec<Vec<NodeResult>> = (0..lines)
        .into_par_iter()
        .map(|line| -> Result<Vec<NodeResult>> {
            let mut out: Vec<NodeResult> = Vec::with_capacity(line_len);
            for i0 in 0..line_len {
                let flat = i0 + line_len * line;
                let mut rem = flat;
                let p = Vect::<D>::from_fn(|a, _| {
                    let i = rem % counts[a];
                    rem /= counts[a];
                    p_lo[a] + i as f64 * dp
                });
                let init = out.last().map(|r| (r.w.as_slice(), r.hbar));
                let (sol, bbar, v) = solver
                    .solve_with_derivatives(&p, init)
                    .or_else(|e| if init.is_some() { solver.solve_with_derivatives(&p, None) } else { Err(e) })
                    .map_err(|e| Error::at(format!("table node p = {:?}", p.as_slice()), e))?;
                out.push(NodeResult {
                    hbar: sol.gamma,
                    bbar: bbar.iter().copied().collect(),
                    w: sol.w.values,
                    v: v.into_iter().map(|f| f.values).collect(),
                    diag: sol.diagnostics,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut table = EffectiveTable {
        grid,
        scheme: options.scheme,
        p_lo,
        dp,
        counts,
        hbar: Vec::new(),
        bbar: Vec::new(),
        w_fields: Vec::new(),
        v_fields: Vec::new(),
        diagnostics: Vec::new(),
    };
    for node in results.into_iter().flatten() {
        table.hbar.push(node.hbar);
        table.bbar.push(Vect::<D>::from_column_slice(&node.bbar));
        table.w_fields.push(node.w);
        table.v_fields.push(node.v);
        table.diagnostics.push(node.diag);
    }
    Ok(table)
}

/// A one-node-per-axis helper used by callers that need `B̄` at an exact
/// `p` without a table (e.g. far-field boundary data).
pub fn drift_at<const D: usize>(solver: &CellSolver<D>, p: &Vect<D>) -> Result<(f64, Vect<D>)> {
    let (sol, bbar, _) = solver.solve_with_derivatives(p, None)?;
    Ok((sol.gamma, bbar))
}
