mod support;

use std::sync::Arc;

use hjh_core::cell::CellOptions;
use hjh_core::correctors::{build_hierarchy, CorrectorHierarchy, SlowGrid};
use hjh_core::effective::{solve_effective, FanOptions};
use hjh_core::geometry::{BoxRegion, Vect};
use hjh_core::problem::{InitialData, ProblemSpec};
use hjh_core::table::effective_table;
use hjh_core::torus::TorusGrid;
use support::{ramp, rich_problem};

fn interval(lo: f64, hi: f64) -> BoxRegion<1> {
    BoxRegion::new(Vect::<1>::new(lo), Vect::<1>::new(hi)).unwrap()
}

fn hierarchy(spec: &ProblemSpec<1>, g: &InitialData<1>, order: usize, hx: f64, n: usize) -> CorrectorHierarchy<1> {
    let grid = TorusGrid::new(n).unwrap();
    let table = Arc::new(effective_table(spec, grid, CellOptions::default(), &interval(0.2, 1.8), 0.05).unwrap());
    let horizon = 0.25;
    let max_speed = table.bbar_nodes().iter().fold(0.0f64, |m, b| m.max(b.norm()));
    let margin = (order - 1) as f64 * horizon * max_speed + 8.0 * hx;
    let slow_region = interval(-0.5, 0.5).inflate(margin);
    let sol = solve_effective(g, table, &slow_region, horizon, FanOptions::default()).unwrap();
    let slow = SlowGrid::new(&slow_region, hx, horizon, hx / 2.0).unwrap();
    build_hierarchy(Arc::new(sol), spec, grid, CellOptions::default(), slow, order).unwrap()
}

fn slope(eps: &[f64], err: &[f64]) -> f64 {
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[test]
fn ramp_residual_rates() {
    let spec = rich_problem();
    let h = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 3, 0.02, 64);
    let eps: Vec<f64> = (2..=6).map(|k| 0.5f64.powi(k)).collect();
    for m in 1..=3 {
        let err: Vec<f64> = eps
            .iter()
            .map(|&e| h.residual_field(e, m, &interval(-0.5, 0.5)).unwrap().max)
            .collect();
        let s = slope(&eps, &err);
        assert!(s >= m as f64 - 0.3, "m = {m}: slope {s}, errors {err:?}");
    }
    for node in (0..h.slow().len()).step_by(501) {
        for eps in [0.25, 1.0 / 64.0] {
            let a = h.residual_at_node(eps, 3, node).unwrap();
            let b = h.residual_from_remainder(eps, 3, node).unwrap();
            let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-8, "third-order assemblies differ by {d}");
        }
    }
    // normalizations hold exactly
    let (fast, initial) = h.normalization_defect();
    assert_eq!(fast, 0.0);
    assert_eq!(initial, 0.0);
}

#[test]
fn affine_data_is_reproduced_exactly() {
    let spec = rich_problem();
    let p = 0.9;
    let h = hierarchy(&spec, &InitialData::affine(Vect::<1>::new(p)), 3, 0.05, 64);
    let table_w = h.effective().table.corrector(&Vect::<1>::new(p)).unwrap();
    for node in [0, h.slow().len() / 2, h.slow().len() - 1] {
        let w1 = h.wt(1, node);
        assert!(w1.iter().zip(&table_w).all(|(a, b)| (a - b).abs() < 1e-9));
        for k in 2..=3 {
            assert!(h.wt(k, node).iter().all(|v| v.abs() < 1e-9));
        }
    }
    for k in 1..=2 {
        assert!(h.ubar(k).iter().all(|v| v.abs() < 1e-9));
        assert!(h.fbar(k).iter().all(|v| v.abs() < 1e-9));
    }
    for m in 1..=3 {
        for k in 1..=6 {
            let r = h.residual_field(0.5f64.powi(k), m, &interval(-0.5, 0.5)).unwrap();
            assert!(r.max <= 1e-8, "m = {m}, eps = 2^-{k}: {}", r.max);
        }
    }
}

#[test]
fn hierarchy_identities() {
    let spec = rich_problem();
    let h = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 2, 0.04, 64);
    let table = &h.effective().table;
    let solver = h.solver();
    let slow = *h.slow();
    for node in (0..slow.len()).step_by(97) {
        let p = h.slope(node);
        // chi agrees with the table's v at p = Dū₀
        let v = table.corrector_derivative(&p, 0).unwrap();
        let err = h.chi(node, 0).iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "chi vs table: {err}");
        // first-order cell identity: φ₁ with γ = H̄(Dū₀) solves the cell problem
        let f = solver.operator_value(&p, h.wt(1, node));
        let res = f.iter().map(|v| (v - h.gamma(node)).abs()).fold(0.0, f64::max);
        assert!(res < 1e-9, "cell residual {res}");
        assert!((h.gamma(node) - table.hbar(&p).unwrap()).abs() < 1e-7);
        // solvability constant shifts with the source
        let lin = solver.linear(h.drift(node).to_vec()).unwrap();
        let src = h.source_field(1, node);
        let base = lin.solve(&Vect::<1>::zeros(), Some(src)).unwrap();
        let shifted: Vec<f64> = src.iter().map(|s| s + 0.37).collect();
        let moved = lin.solve(&Vect::<1>::zeros(), Some(&shifted)).unwrap();
        assert!((moved.gamma - base.gamma - 0.37).abs() < 1e-10);
        assert!((base.gamma - h.fbar(1)[node]).abs() < 1e-12);
        // the two residual assemblies agree
        for eps in [0.25, 1.0 / 32.0] {
            for m in 1..=2 {
                let a = h.residual_at_node(eps, m, node).unwrap();
                let b = h.residual_from_remainder(eps, m, node).unwrap();
                let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(d < 1e-8, "assemblies differ by {d}");
            }
        }
    }
}

#[test]
fn expansion_evaluation() {
    let spec = rich_problem();
    let g = ramp(0.5, 1.5, 0.3);
    let h = hierarchy(&spec, &g, 2, 0.04, 64);
    let eps = 1.0 / 16.0;
    for &x in &[-0.41, 0.0, 0.33] {
        let xv = Vect::<1>::new(x);
        // initial slice
        let e0 = h.evaluate_expansion(eps, 2, &xv, 0.0).unwrap();
        let w1 = h.effective().table.corrector(&g.gradient(&xv)).unwrap();
        let y = (x / eps).rem_euclid(1.0);
        let field = hjh_core::torus::PeriodicField::new(*h.grid(), w1).unwrap();
        let w2 = h.wt(2, 0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let w2 = h.slow().nodes_in(&interval(-0.5, 0.5)).iter().filter(|&&n| n < h.slow().space_len()).fold(w2, |m, &n| {
            h.wt(2, n).iter().fold(m, |m, v| m.max(v.abs()))
        });
        assert!((e0.eta - g.value(&xv) - eps * field.eval(&Vect::<1>::new(y))).abs() <= 1.01 * eps * eps * w2 + 1e-9);
        // gradient against differences of the value
        let t = 0.13;
        let ev = h.evaluate_expansion(eps, 2, &xv, t).unwrap();
        assert!((ev.eta - h.eta(eps, 2, &xv, t).unwrap()).abs() < 1e-14);
        let d = 1e-5;
        let fd = (h.eta(eps, 2, &Vect::<1>::new(x + d), t).unwrap() - h.eta(eps, 2, &Vect::<1>::new(x - d), t).unwrap())
            / (2.0 * d);
        assert!((fd - ev.grad[0]).abs() < 1e-4, "grad {} vs {fd}", ev.grad[0]);
    }
}

#[test]
fn archive_round_trip() {
    let spec = rich_problem();
    let h = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 2, 0.05, 32);
    let text = serde_json::to_string(&h.to_file()).unwrap();
    let file = serde_json::from_str(&text).unwrap();
    let back = CorrectorHierarchy::from_file(&file, Arc::new(h.effective().clone()), &spec, CellOptions::default()).unwrap();
    let a = h.residual_field(0.125, 2, &interval(-0.5, 0.5)).unwrap();
    let b = back.residual_field(0.125, 2, &interval(-0.5, 0.5)).unwrap();
    assert_eq!(a.sup_y, b.sup_y);
}

#[test]
fn slow_refinement_converges() {
    let spec = rich_problem();
    let g = ramp(0.5, 1.5, 0.3);
    let probes = [-0.4, -0.1, 0.2, 0.4];
    let sample = |hx: f64| -> Vec<f64> {
        let h = hierarchy(&spec, &g, 2, hx, 32);
        let slow = h.slow();
        let ns = slow.space_len();
        let j = slow.nt - 1;
        probes
            .iter()
            .map(|&x| {
                let i = ((x - slow.lo[0]) / slow.hx).round() as usize;
                assert!((slow.x(i)[0] - x).abs() < 1e-9);
                h.fbar(1)[i + ns * j]
            })
            .collect()
    };
    let coarse = sample(0.1);
    let mid = sample(0.05);
    let fine = sample(0.025);
    let e1 = coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let e2 = mid.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let order = (e1 / e2).log2();
    assert!(order >= 1.9, "observed order {order} ({e1:.3e}, {e2:.3e})");
}
