//! The effective equation `ū_t + H̄(Dū) = 0`, `ū(·,0) = g`, solved by straight
//! characteristics `ξ(t; x₀) = x₀ + t B̄(Dg(x₀))`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{det, inverse, unit, BoxRegion, Mat, Vect};
use crate::problem::InitialData;
use crate::table::EffectiveTable;

/// Tuning of the characteristic fan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FanOptions {
    /// Source nodes per axis.
    pub nodes_per_axis: usize,
    /// Lower bound on `|D_pH̄(Dg)|`.
    pub zeta_min: f64,
    /// Extra source margin in units of the data's core width.
    pub core_widths: f64,
}

impl Default for FanOptions {
    fn default() -> Self {
        Self {
            nodes_per_axis: 1024,
            zeta_min: 1e-3,
            core_widths: 5.0,
        }
    }
}

/// Straight characteristics issued from a uniform grid of source points.
#[derive(Clone, Debug)]
pub struct CharacteristicFan<const D: usize> {
    pub source_box: BoxRegion<D>,
    pub counts: [usize; D],
    pub sources: Vec<Vect<D>>,
    /// `Dg(x₀)` per source.
    pub slopes: Vec<Vect<D>>,
    /// `D_pH̄(Dg(x₀))` per source.
    pub speeds: Vec<Vect<D>>,
    /// `Dg·D_pH̄ - H̄` per source.
    pub rates: Vec<f64>,
    pub horizon: f64,
    /// Smallest `det(I + t D_p²H̄ D²g)` seen over sources and sampled times.
    pub min_jacobian: f64,
}

/// `ū₀` and its low-order derivatives at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct U0Jet<const D: usize> {
    pub value: f64,
    pub grad: Vect<D>,
    pub hess: Mat<D>,
    pub dt: f64,
    pub dt_grad: Vect<D>,
    pub dtt: f64,
    /// Characteristic source `x₀`.
    pub source: Vect<D>,
    /// `D_pH̄(Dū₀)`.
    pub drift: Vect<D>,
}

#[derive(Clone, Debug)]
pub struct EffectiveSolution<const D: usize> {
    pub fan: CharacteristicFan<D>,
    pub table: Arc<EffectiveTable<D>>,
    pub g: InitialData<D>,
    pub window: BoxRegion<D>,
    pub zeta_min: f64,
}

/// Builds the fan and checks injectivity and coverage of `window × [0, horizon]`.
pub fn solve_effective<const D: usize>(
    g: &InitialData<D>,
    table: Arc<EffectiveTable<D>>,
    window: &BoxRegion<D>,
    horizon: f64,
    options: FanOptions,
) -> Result<EffectiveSolution<D>> {
    if !(horizon >= 0.0) {
        return Err(Error::InvalidInput("horizon must be non-negative".into()));
    }
    if options.nodes_per_axis < 4 {
        return Err(Error::InvalidInput("fan needs at least 4 source nodes per axis".into()));
    }
    let max_speed = table.bbar_nodes().iter().fold(0.0f64, |m, b| m.max(b.norm()));
    let margin = horizon * max_speed + options.core_widths * g.core_width() + 1e-3;
    let source_box = window.inflate(margin);
    let counts = [options.nodes_per_axis; D];
    let total = options.nodes_per_axis.pow(D as u32);
    let mut fan = CharacteristicFan {
        source_box,
        counts,
        sources: Vec::with_capacity(total),
        slopes: Vec::with_capacity(total),
        speeds: Vec::with_capacity(total),
        rates: Vec::with_capacity(total),
        horizon,
        min_jacobian: f64::INFINITY,
    };
    let times: Vec<f64> = (0..=4).map(|k| horizon * k as f64 / 4.0).collect();
    for f in 0..total {
        let mut rem = f;
        let x0 = Vect::<D>::from_fn(|a, _| {
            let i = rem % counts[a];
            rem /= counts[a];
            source_box.lo[a] + source_box.width(a) * i as f64 / (counts[a] - 1) as f64
        });
        let p = g.gradient(&x0);
        let (h, b, q) = table
            .jet(&p)
            .map_err(|e| Error::at(format!("fan source x0 = {:?}", x0.as_slice()), e))?;
        let gh = g.hessian(&x0);
        for &t in &times {
            let jd = det(&(Mat::<D>::identity() + t * q * gh));
            if jd < fan.min_jacobian {
                fan.min_jacobian = jd;
            }
        }
        fan.sources.push(x0);
        fan.slopes.push(p);
        fan.speeds.push(b);
        fan.rates.push(p.dot(&b) - h);
    }
    if fan.min_jacobian < 1.0 - 1e-12 {
        return Err(Error::CrossingCharacteristics(format!(
            "Jacobian of the forward map drops to {:.3e}",
            fan.min_jacobian
        )));
    }
    if D == 1 {
        for &t in &times {
            for j in 1..total {
                let a = fan.sources[j - 1][0] + t * fan.speeds[j - 1][0];
                let b = fan.sources[j][0] + t * fan.speeds[j][0];
                if b <= a {
                    return Err(Error::CrossingCharacteristics(format!(
                        "forward map not increasing between sources {:.6} and {:.6} at t = {t}",
                        fan.sources[j - 1][0], fan.sources[j][0]
                    )));
                }
            }
        }
    }
    let sol = EffectiveSolution {
        fan,
        table,
        g: g.clone(),
        window: *window,
        zeta_min: options.zeta_min,
    };
    sol.check_coverage()?;
    Ok(sol)
}

impl<const D: usize> EffectiveSolution<D> {
    pub fn horizon(&self) -> f64 {
        self.fan.horizon
    }

    fn forward(&self, x0: &Vect<D>, t: f64) -> Result<(Vect<D>, Mat<D>)> {
        let p = self.g.gradient(x0);
        let b = self.table.bbar(&p)?;
        let q = self.table.hbar_hessian(&p)?;
        let jac = Mat::<D>::identity() + t * q * self.g.hessian(x0);
        Ok((x0 + t * b, jac))
    }

    /// `ξ(t; x₀)`.
    pub fn characteristic(&self, x0: &Vect<D>, t: f64) -> Result<Vect<D>> {
        Ok(self.forward(x0, t)?.0)
    }

    fn check_coverage(&self) -> Result<()> {
        let t_end = self.horizon();
        let w = &self.window;
        let per_edge = 16;
        let mut probes = Vec::new();
        match D {
            1 => {
                probes.push(w.lo);
                probes.push(w.hi);
            }
            _ => {
                for k in 0..=per_edge {
                    let s = k as f64 / per_edge as f64;
                    for a in 0..D {
                        for side in [w.lo[a], w.hi[a]] {
                            let mut x = w.lo + s * (w.hi - w.lo);
                            x[a] = side;
                            probes.push(x);
                        }
                    }
                }
            }
        }
        for &t in &[0.0, 0.5 * t_end, t_end] {
            for x in &probes {
                let x0 = self.invert_characteristics(x, t)?;
                if !self.fan.source_box.contains(&x0) {
                    return Err(Error::Coverage(format!(
                        "window point {:?} at t = {t} traces back to {:?} outside the fan",
                        x.as_slice(),
                        x0.as_slice()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Source `x₀` with `ξ(t; x₀) = x`, to `1e-12 (1 + |x|)`.
    pub fn invert_characteristics(&self, x: &Vect<D>, t: f64) -> Result<Vect<D>> {
        if t < 0.0 || t > self.horizon() * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::OutsideWindow(format!("time {t} outside [0, {}]", self.horizon())));
        }
        if t == 0.0 {
            return Ok(*x);
        }
        let tol = 1e-12 * (1.0 + x.norm());
        if D == 1 {
            self.invert_1d(x[0], t, tol).map(|v| Vect::<D>::from_element(v))
        } else {
            self.invert_newton(x, t, tol)
        }
    }

    fn invert_1d(&self, x: f64, t: f64, tol: f64) -> Result<f64> {
        let fan = &self.fan;
        let xi = |j: usize| fan.sources[j][0] + t * fan.speeds[j][0];
        let n = fan.sources.len();
        if x < xi(0) || x > xi(n - 1) {
            return Err(Error::Coverage(format!(
                "x = {x} at t = {t} outside the fan image [{}, {}]",
                xi(0),
                xi(n - 1)
            )));
        }
        let (mut lo, mut hi) = (0usize, n - 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if xi(mid) <= x {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut a = fan.sources[lo][0];
        let mut b = fan.sources[hi][0];
        let f = |x0: f64| -> Result<(f64, f64)> {
            let v = Vect::<D>::from_element(x0);
            let (fwd, jac) = self.forward(&v, t)?;
            Ok((fwd[0] - x, jac[(0, 0)]))
        };
        // bisection to a tight bracket, then safeguarded Newton
        let mut x0 = a + (b - a) * (x - xi(lo)) / (xi(hi) - xi(lo)).max(f64::MIN_POSITIVE);
        for _ in 0..100 {
            let (r, d) = f(x0)?;
            if r.abs() <= tol {
                return Ok(x0);
            }
            if r > 0.0 {
                b = x0;
            } else {
                a = x0;
            }
            let newton = x0 - r / d;
            x0 = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
            if b - a <= f64::EPSILON * (1.0 + x0.abs()) {
                let (r, _) = f(x0)?;
                if r.abs() <= tol {
                    return Ok(x0);
                }
                break;
            }
        }
        Err(Error::Coverage(format!("characteristic inversion stalled at x = {x}, t = {t}")))
    }

    fn invert_newton(&self, x: &Vect<D>, t: f64, tol: f64) -> Result<Vect<D>> {
        let p = self.g.gradient(x);
        let mut x0 = x - t * self.table.bbar(&p)?;
        let mut r = self.forward(&x0, t)?.0 - x;
        for _ in 0..100 {
            if r.norm() <= tol {
                return Ok(x0);
            }
            let (_, jac) = self.forward(&x0, t)?;
            let step = inverse(&jac)
                .map(|inv| -(inv * r))
                .ok_or_else(|| Error::CrossingCharacteristics("singular forward Jacobian".into()))?;
            let mut lambda = 1.0;
            loop {
                let cand = x0 + lambda * step;
                let rc = self.forward(&cand, t).map(|(f, _)| f - x);
                if let Ok(rc) = rc {
                    if rc.norm() < (1.0 - 1e-4 * lambda) * r.norm() || rc.norm() <= tol {
                        x0 = cand;
                        r = rc;
                        break;
                    }
                }
                lambda *= 0.5;
                if lambda < 1e-6 {
                    return Err(Error::Coverage(format!(
                        "characteristic inversion failed at x = {:?}, t = {t}",
                        x.as_slice()
                    )));
                }
            }
        }
        Err(Error::Coverage(format!(
            "characteristic inversion did not converge at x = {:?}, t = {t}",
            x.as_slice()
        )))
    }

    /// Values and analytic derivatives up to second order.
    pub fn eval(&self, x: &Vect<D>, t: f64) -> Result<U0Jet<D>> {
        let x0 = self.invert_characteristics(x, t)?;
        let p = self.g.gradient(&x0);
        let (h, b, q) = self.table.jet(&p)?;
        let gh = self.g.hessian(&x0);
        let inv = inverse(&(Mat::<D>::identity() + t * q * gh))
            .ok_or_else(|| Error::CrossingCharacteristics("singular forward Jacobian".into()))?;
        let hess = gh * inv;
        let hess = 0.5 * (hess + hess.transpose());
        Ok(U0Jet {
            value: self.g.value(&x0) + t * (p.dot(&b) - h),
            grad: p,
            hess,
            dt: -h,
            dt_grad: -(hess * b),
            dtt: b.dot(&(hess * b)),
            source: x0,
            drift: b,
        })
    }

    pub fn value(&self, x: &Vect<D>, t: f64) -> Result<f64> {
        let x0 = self.invert_characteristics(x, t)?;
        let p = self.g.gradient(&x0);
        let b = self.table.bbar(&p)?;
        let h = self.table.hbar(&p)?;
        Ok(self.g.value(&x0) + t * (p.dot(&b) - h))
    }

    /// `D_x^α ∂_t^j ū₀` for a multi-index `α` (per axis) and `j`.
    ///
    /// Orders covered by [`U0Jet`] are analytic; the rest are fourth-order
    /// centered differences of the next lower analytic quantity.
    pub fn derivative(&self, x: &Vect<D>, t: f64, alpha: [usize; D], j: usize) -> Result<f64> {
        let total: usize = alpha.iter().sum::<usize>() + j;
        if total <= 2 {
            let jet = self.eval(x, t)?;
            let nz: Vec<usize> = (0..D).flat_map(|a| std::iter::repeat_n(a, alpha[a])).collect();
            return Ok(match (nz.len(), j) {
                (0, 0) => jet.value,
                (1, 0) => jet.grad[nz[0]],
                (2, 0) => jet.hess[(nz[0], nz[1])],
                (0, 1) => jet.dt,
                (1, 1) => jet.dt_grad[nz[0]],
                _ => jet.dtt,
            });
        }
        let step = 1e-3;
        // peel one derivative: prefer a spatial one
        if let Some(a) = (0..D).find(|&a| alpha[a] > 0) {
            let mut lower = alpha;
            lower[a] -= 1;
            let e = unit::<D>(a, step);
            let f = |s: f64| self.derivative(&(x + s * e / step), t, lower, j);
            return Ok((f(-2.0 * step)? - 8.0 * f(-step)? + 8.0 * f(step)? - f(2.0 * step)?) / (12.0 * step));
        }
        let h = step.min(0.25 * t.max(0.0)).min(0.25 * (self.horizon() - t).max(0.0));
        let f = |s: f64| self.derivative(x, t + s, alpha, j - 1);
        if h > 1e-6 {
            Ok((f(-2.0 * h)? - 8.0 * f(-h)? + 8.0 * f(h)? - f(2.0 * h)?) / (12.0 * h))
        } else {
            // one-sided at the ends of the time interval
            let s = if t < 0.5 * self.horizon() { step } else { -step };
            let w = [-25.0 / 12.0, 4.0, -3.0, 4.0 / 3.0, -0.25];
            let mut acc = 0.0;
            for (k, c) in w.iter().enumerate() {
                acc += c * f(k as f64 * s)?;
            }
            Ok(acc / s)
        }
    }

    /// `B̄(x, t) = D_pH̄(Dū₀(x, t))`, rejecting critical gradients.
    pub fn drift_field(&self, x: &Vect<D>, t: f64) -> Result<Vect<D>> {
        let x0 = self.invert_characteristics(x, t)?;
        let b = self.table.bbar(&self.g.gradient(&x0))?;
        if b.norm() < self.zeta_min {
            return Err(Error::Inadmissible(format!(
                "|B̄| = {:.3e} < zeta_min = {:.3e} at x = {:?}, t = {t}",
                b.norm(),
                self.zeta_min,
                x.as_slice()
            )));
        }
        Ok(b)
    }

    /// `|∂_tū₀ + H̄(Dū₀)|` with both derivatives taken by fourth-order
    /// differences of the value function (an end-to-end check of the
    /// inversion and value formula).
    pub fn pde_residual(&self, x: &Vect<D>, t: f64) -> Result<f64> {
        let h = 1e-3f64.min(0.25 * t.max(1e-12)).min(0.25 * (self.horizon() - t).max(1e-12));
        let ut = if h > 1e-6 {
            (self.value(x, t - 2.0 * h)? - 8.0 * self.value(x, t - h)? + 8.0 * self.value(x, t + h)?
                - self.value(x, t + 2.0 * h)?)
                / (12.0 * h)
        } else {
            self.eval(x, t)?.dt
        };
        let hx = 1e-3;
        let mut grad = Vect::<D>::zeros();
        for a in 0..D {
            let e = unit::<D>(a, hx);
            grad[a] = (self.value(&(x - 2.0 * e), t)? - 8.0 * self.value(&(x - e), t)?
                + 8.0 * self.value(&(x + e), t)?
                - self.value(&(x + 2.0 * e), t)?)
                / (12.0 * hx);
        }
        Ok((ut + self.table.hbar(&grad)?).abs())
    }
}
