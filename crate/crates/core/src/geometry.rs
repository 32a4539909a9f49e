//! Small fixed-size vector and matrix helpers shared by every module.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vect<const D: usize> = SVector<f64, D>;
pub type Mat<const D: usize> = SMatrix<f64, D, D>;

/// Converts a JSON-style coordinate list into a fixed-size vector.
pub fn vect_from_slice<const D: usize>(values: &[f64]) -> Result<Vect<D>> {
    if values.len() != D {
        return Err(Error::InvalidInput(format!(
            "expected {D} coordinates, found {}",
            values.len()
        )));
    }
    Ok(Vect::<D>::from_column_slice(values))
}

/// `v e_a`, the scaled unit vector along axis `a`.
pub fn unit<const D: usize>(a: usize, v: f64) -> Vect<D> {
    let mut e = Vect::<D>::zeros();
    e[a] = v;
    e
}

pub fn vect_to_vec<const D: usize>(v: &Vect<D>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Eigenvalues of a symmetric 1x1 or 2x2 matrix, ascending.
pub fn sym_eigenvalues<const D: usize>(m: &Mat<D>) -> Vec<f64> {
    match D {
        1 => vec![m[(0, 0)]],
        2 => {
            let a = m[(0, 0)];
            let d = m[(1, 1)];
            let b = 0.5 * (m[(0, 1)] + m[(1, 0)]);
            let mean = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            vec![mean - rad, mean + rad]
        }
        _ => {
            let sym = 0.5 * (m + m.transpose());
            let dm = nalgebra::DMatrix::from_fn(D, D, |i, j| sym[(i, j)]);
            let mut ev: Vec<f64> = dm.symmetric_eigenvalues().iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            ev
        }
    }
}

/// `tr(A B)` for square matrices.
pub fn trace_product<const D: usize>(a: &Mat<D>, b: &Mat<D>) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        for j in 0..D {
            s += a[(i, j)] * b[(j, i)];
        }
    }
    s
}

/// Determinant of a small square matrix.
pub fn det<const D: usize>(m: &Mat<D>) -> f64 {
    match D {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        _ => nalgebra::DMatrix::from_fn(D, D, |i, j| m[(i, j)]).determinant(),
    }
}

/// Inverse of a small square matrix, `None` when singular.
pub fn inverse<const D: usize>(m: &Mat<D>) -> Option<Mat<D>> {
    let d = det(m);
    if d == 0.0 || !d.is_finite() {
        return None;
    }
    match D {
        1 => Some(Mat::<D>::from_element(1.0 / d)),
        2 => {
            let mut inv = Mat::<D>::zeros();
            inv[(0, 0)] = m[(1, 1)] / d;
            inv[(1, 1)] = m[(0, 0)] / d;
            inv[(0, 1)] = -m[(0, 1)] / d;
            inv[(1, 0)] = -m[(1, 0)] / d;
            Some(inv)
        }
        _ => {
            let dm = nalgebra::DMatrix::from_fn(D, D, |i, j| m[(i, j)]).try_inverse()?;
            Some(Mat::<D>::from_fn(|i, j| dm[(i, j)]))
        }
    }
}

/// Axis-aligned box `lo <= x <= hi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxRegion<const D: usize> {
    pub lo: Vect<D>,
    pub hi: Vect<D>,
}

impl<const D: usize> BoxRegion<D> {
    pub fn new(lo: Vect<D>, hi: Vect<D>) -> Result<Self> {
        for a in 0..D {
            if !(lo[a] <= hi[a]) || !lo[a].is_finite() || !hi[a].is_finite() {
                return Err(Error::InvalidInput(format!(
                    "empty box along axis {a}: [{}, {}]",
                    lo[a], hi[a]
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, x: &Vect<D>) -> bool {
        (0..D).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }

    pub fn inflate(&self, margin: f64) -> Self {
        let m = Vect::<D>::repeat(margin);
        Self {
            lo: self.lo - m,
            hi: self.hi + m,
        }
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }
}

/// Serialized form of a box: `{"lo": [..], "hi": [..]}`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BoxSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSpec {
    pub fn to_region<const D: usize>(&self) -> Result<BoxRegion<D>> {
        BoxRegion::new(vect_from_slice(&self.lo)?, vect_from_slice(&self.hi)?)
    }

    pub fn from_region<const D: usize>(r: &BoxRegion<D>) -> Self {
        Self {
            lo: vect_to_vec(&r.lo),
            hi: vect_to_vec(&r.hi),
        }
    }
}

/// Multi-index helpers for row-major-by-first-axis flattening (axis 0 fastest).
pub fn unflatten<const D: usize>(mut flat: usize, counts: &[usize; D]) -> [usize; D] {
    let mut idx = [0usize; D];
    for a in 0..D {
        idx[a] = flat % counts[a];
        flat /= counts[a];
    }
    idx
}

pub fn flatten<const D: usize>(idx: &[usize; D], counts: &[usize; D]) -> usize {
    let mut flat = 0;
    for a in (0..D).rev() {
        flat = flat * counts[a] + idx[a];
    }
    flat
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let counts = [3usize, 5];
        for f in 0..15 {
            assert_eq!(flatten(&unflatten(f, &counts), &counts), f);
        }
        assert_eq!(unflatten::<2>(4, &counts), [1, 1]);
    }

    #[test]
    fn eigenvalues_2x2() {
        let m = Mat::<2>::new(2.0, 1.0, 1.0, 2.0);
        let ev = sym_eigenvalues(&m);
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
    }
}
