//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use hjh_core::geometry::Vect;
use hjh_core::problem::{Diffusion, InitialData, ProblemBounds, ProblemSpec, QuadraticHamiltonian};
use hjh_core::trig::TrigSeries;
use nalgebra::DMatrix;

pub fn bounds(kappa: f64) -> ProblemBounds {
    ProblemBounds {
        lambda: 0.5,
        lambda_upper: 1.5,
        alpha: 1.0,
        alpha_prime: kappa,
        beta: 1.0,
        beta_prime: kappa,
        k_reg: 60.0,
        l_data: 10.0,
    }
}

pub fn cosine(kappa: f64) -> TrigSeries {
    TrigSeries::zero().with_mode(&[1], kappa, 0.0)
}

/// `A = 1`, `H(q, y) = q^2 + κ cos(2πy)`.
pub fn potential_problem(kappa: f64) -> ProblemSpec<1> {
    let h = QuadraticHamiltonian::<1>::with_potential(cosine(kappa)).unwrap();
    ProblemSpec::new(Diffusion::identity(), Arc::new(h), bounds(kappa)).unwrap()
}

/// Variable diffusion and a potential with two modes, still in the quadratic family.
pub fn rich_problem() -> ProblemSpec<1> {
    let a = TrigSeries::constant(1.0).with_mode(&[1], 0.0, 0.2);
    let v = TrigSeries::zero().with_mode(&[1], 0.5, 0.0).with_mode(&[2], 0.0, 0.15);
    let h = QuadraticHamiltonian::<1>::with_potential(v).unwrap();
    ProblemSpec::new(Diffusion::scalar(a), Arc::new(h), bounds(0.65)).unwrap()
}

pub fn ramp(p_minus: f64, p_plus: f64, sigma: f64) -> InitialData<1> {
    InitialData::ramp(Vect::<1>::new(p_minus), Vect::<1>::new(p_plus), sigma).unwrap()
}

/// Effective Hamiltonian of `A = 1`, `H = q^2 + V(y)` from the exponential
/// substitution `φ = exp(-w - p y)`: with `φ = e^{-py} ψ`, `ψ` periodic,
/// `-(d/dy - p)^2 ψ - V ψ = μ ψ`, and `H̄(p) = -μ_1` for the principal
/// eigenvalue. The operator is discretized by a Fourier–Galerkin method with
/// modes `|k| <= modes`, exact for trigonometric `V`.
pub fn hopf_cole_hbar(v: &TrigSeries, p: f64, modes: usize) -> f64 {
    let m = 2 * modes + 1;
    // complex Galerkin matrix stored as (re, im)
    let mut re = DMatrix::<f64>::zeros(m, m);
    let mut im = DMatrix::<f64>::zeros(m, m);
    let kk = |i: usize| i as i64 - modes as i64;
    // exponential coefficients of V
    let vhat = |d: i64| -> (f64, f64) {
        let mut r = 0.0;
        let mut s = 0.0;
        if d == 0 {
            r += v.constant;
        }
        for t in &v.terms {
            let k = t.k[0] as i64;
            if k == d {
                r += 0.5 * t.cos;
                s -= 0.5 * t.sin;
            }
            if -k == d {
                r += 0.5 * t.cos;
                s += 0.5 * t.sin;
            }
        }
        (r, s)
    };
    for i in 0..m {
        let k = kk(i) as f64;
        re[(i, i)] += 4.0 * PI * PI * k * k - p * p;
        im[(i, i)] += 2.0 * TAU * k * p;
        for j in 0..m {
            let (r, s) = vhat(kk(i) - kk(j));
            re[(i, j)] -= r;
            im[(i, j)] -= s;
        }
    }
    let mut big = DMatrix::<f64>::zeros(2 * m, 2 * m);
    big.view_mut((0, 0), (m, m)).copy_from(&re);
    big.view_mut((m, m), (m, m)).copy_from(&re);
    big.view_mut((0, m), (m, m)).copy_from(&(-&im));
    big.view_mut((m, 0), (m, m)).copy_from(&im);
    let ev = big.complex_eigenvalues();
    let mu = ev.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    -mu
}
