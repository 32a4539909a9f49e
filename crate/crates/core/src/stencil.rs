//! Finite-difference and Lagrange stencils on uniform axes.

/// Fornberg's recursion: weights `c[d][j]` so that
/// `f^{(d)}(z) ≈ Σ_j c[d][j] f(x_j)` for `d = 0..=max_order`.
pub fn fornberg_weights(z: f64, x: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// Lagrange interpolation weights at `z` for nodes `x`.
pub fn lagrange_weights(z: f64, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut w = vec![1.0; n];
    for j in 0..n {
        for k in 0..n {
            if k != j {
                w[j] *= (z - x[k]) / (x[j] - x[k]);
            }
        }
    }
    w
}

/// Stencil start and weights for interpolating at fractional position `s`
/// (in units of the spacing) on an axis with `n` nodes using `width` points.
///
/// The stencil is shifted to stay inside `0..n`; callers clamp `s` if they
/// must not extrapolate.
pub fn interpolation_stencil(s: f64, n: usize, width: usize) -> (usize, Vec<f64>) {
    let width = width.min(n);
    let base = s.floor() as i64 - (width as i64 / 2 - 1);
    let start = base.clamp(0, (n - width) as i64) as usize;
    let nodes: Vec<f64> = (0..width).map(|j| (start + j) as f64).collect();
    (start, lagrange_weights(s, &nodes))
}

/// Same as [`interpolation_stencil`] but also returns first-derivative
/// weights (per unit index spacing).
pub fn interpolation_stencil_with_derivative(s: f64, n: usize, width: usize) -> (usize, Vec<f64>, Vec<f64>) {
    let width = width.min(n);
    let base = s.floor() as i64 - (width as i64 / 2 - 1);
    let start = base.clamp(0, (n - width) as i64) as usize;
    let nodes: Vec<f64> = (0..width).map(|j| (start + j) as f64).collect();
    let c = fornberg_weights(s, &nodes, 1);
    (start, c[0].clone(), c[1].clone())
}

/// Fourth-order derivative stencils for every node of a uniform axis.
///
/// Interior nodes use the centered five-point formula; the two nodes nearest
/// each end use one-sided stencils with `order + 4` points.
#[derive(Clone, Debug)]
pub struct AxisDifferences {
    n: usize,
    /// Per node: (start, weights) already scaled by `h^-order`.
    stencils: Vec<(usize, Vec<f64>)>,
}

impl AxisDifferences {
    pub fn new(n: usize, h: f64, order: usize) -> Option<Self> {
        let one_sided = order + 4;
        if n < one_sided.max(5) {
            return None;
        }
        let scale = h.powi(-(order as i32));
        let stencils = (0..n)
            .map(|i| {
                let (start, len) = if i >= 2 && i + 2 < n {
                    (i - 2, 5)
                } else if i < 2 {
                    (0, one_sided)
                } else {
                    (n - one_sided, one_sided)
                };
                let nodes: Vec<f64> = (0..len).map(|j| (start + j) as f64).collect();
                let w = fornberg_weights(i as f64, &nodes, order);
                (start, w[order].iter().map(|c| c * scale).collect())
            })
            .collect();
        Some(Self { n, stencils })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn stencil(&self, i: usize) -> (usize, &[f64]) {
        let (s, w) = &self.stencils[i];
        (*s, w)
    }

    /// Derivative of a scalar sequence.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (s, w) = self.stencil(i);
                w.iter().enumerate().map(|(j, c)| c * f[s + j]).sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fornberg_matches_classical_central_weights() {
        let x = [-2.0, -1.0, 0.0, 1.0, 2.0];
        let c = fornberg_weights(0.0, &x, 2);
        let d1 = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
        let d2 = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];
        for j in 0..5 {
            assert!((c[1][j] - d1[j]).abs() < 1e-14);
            assert!((c[2][j] - d2[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn axis_differences_are_fourth_order() {
        let errs: Vec<f64> = [20usize, 40]
            .iter()
            .map(|&n| {
                let h = 1.0 / (n - 1) as f64;
                let f: Vec<f64> = (0..n).map(|i| (1.3 * i as f64 * h).sin()).collect();
                let d2 = AxisDifferences::new(n, h, 2).unwrap().apply(&f);
                (0..n)
                    .map(|i| (d2[i] + 1.69 * (1.3 * i as f64 * h).sin()).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let rate = (errs[0] / errs[1]).log2();
        assert!(rate > 3.5, "observed order {rate}");
    }

    #[test]
    fn interpolation_reproduces_quintics() {
        let f = |x: f64| 1.0 - x + 0.3 * x.powi(5);
        let (start, w) = interpolation_stencil(3.4, 10, 6);
        let v: f64 = w.iter().enumerate().map(|(j, c)| c * f((start + j) as f64)).sum();
        assert!((v - f(3.4)).abs() < 1e-9);
    }
}
