//! Finite trigonometric series on the unit torus.
//!
//! Every builtin coefficient (diffusion entries, drift, potential, quadratic
//! form) is a [`TrigSeries`]: a constant plus finitely many modes
//! `cos(2π k·y)`, `sin(2π k·y)` with integer wave vectors, so periodicity under
//! unit lattice shifts holds exactly.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vect;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrigTerm {
    pub k: Vec<i32>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct TrigSeries {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl TrigSeries {
    pub fn constant(c: f64) -> Self {
        Self {
            constant: c,
            terms: Vec::new(),
        }
    }

    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    /// Adds `cos_coef·cos(2π k·y) + sin_coef·sin(2π k·y)`.
    pub fn with_mode(mut self, k: &[i32], cos_coef: f64, sin_coef: f64) -> Self {
        self.terms.push(TrigTerm {
            k: k.to_vec(),
            cos: cos_coef,
            sin: sin_coef,
        });
        self
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        for t in &self.terms {
            if t.k.len() != dim {
                return Err(Error::InvalidInput(format!(
                    "trigonometric mode {:?} has {} components, expected {dim}",
                    t.k,
                    t.k.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_constant(&self) -> bool {
        self.terms.iter().all(|t| t.cos == 0.0 && t.sin == 0.0)
    }

    fn phase<const D: usize>(k: &[i32], y: &Vect<D>) -> f64 {
        let mut s = 0.0;
        for a in 0..D {
            s += k[a] as f64 * y[a];
        }
        TAU * s
    }

    pub fn eval<const D: usize>(&self, y: &Vect<D>) -> f64 {
        let mut v = self.constant;
        for t in &self.terms {
            let (s, c) = Self::phase(&t.k, y).sin_cos();
            v += t.cos * c + t.sin * s;
        }
        v
    }

    pub fn gradient<const D: usize>(&self, y: &Vect<D>) -> Vect<D> {
        let mut g = Vect::<D>::zeros();
        for t in &self.terms {
            let (s, c) = Self::phase(&t.k, y).sin_cos();
            let d = -t.cos * s + t.sin * c;
            for a in 0..D {
                g[a] += TAU * t.k[a] as f64 * d;
            }
        }
        g
    }

    /// Upper bound on `sup |f|`.
    pub fn sup_bound(&self) -> f64 {
        self.constant.abs()
            + self
                .terms
                .iter()
                .map(|t| t.cos.hypot(t.sin))
                .sum::<f64>()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            constant: self.constant * factor,
            terms: self
                .terms
                .iter()
                .map(|t| TrigTerm {
                    k: t.k.clone(),
                    cos: t.cos * factor,
                    sin: t.sin * factor,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_under_lattice_shift() {
        let f = TrigSeries::constant(0.3)
            .with_mode(&[1, 2], 0.5, -0.25)
            .with_mode(&[3, -1], 0.1, 0.2);
        let y = Vect::<2>::new(0.137, 0.811);
        for shift in [Vect::<2>::new(1.0, 0.0), Vect::<2>::new(0.0, 1.0)] {
            let d = f.eval(&y) - f.eval(&(y + shift));
            assert!(d.abs() < 1e-13);
        }
    }

    #[test]
    fn gradient_matches_difference_quotient() {
        let f = TrigSeries::zero().with_mode(&[2], 0.7, 0.4);
        let y = Vect::<1>::new(0.23);
        let h = 1e-6;
        let fd = (f.eval(&Vect::<1>::new(y[0] + h)) - f.eval(&Vect::<1>::new(y[0] - h))) / (2.0 * h);
        assert!((f.gradient(&y)[0] - fd).abs() < 1e-7);
    }
}
