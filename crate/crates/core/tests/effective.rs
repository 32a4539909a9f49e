mod support;

use std::sync::Arc;

use hjh_core::cell::CellOptions;
use hjh_core::effective::{solve_effective, EffectiveSolution, FanOptions};
use hjh_core::geometry::{BoxRegion, Vect};
use hjh_core::table::{effective_table, EffectiveTable};
use hjh_core::torus::TorusGrid;
use support::{ramp, rich_problem};

fn table() -> Arc<EffectiveTable<1>> {
    let spec = rich_problem();
    let p_box = BoxRegion::new(Vect::<1>::new(0.2), Vect::<1>::new(1.8)).unwrap();
    Arc::new(effective_table(&spec, TorusGrid::new(32).unwrap(), CellOptions::default(), &p_box, 0.05).unwrap())
}

fn ramp_solution(table: Arc<EffectiveTable<1>>) -> EffectiveSolution<1> {
    let g = ramp(0.5, 1.5, 0.3);
    let window = BoxRegion::new(Vect::<1>::new(-1.0), Vect::<1>::new(1.0)).unwrap();
    let options = FanOptions { nodes_per_axis: 256, ..FanOptions::default() };
    solve_effective(&g, table, &window, 0.25, options).unwrap()
}

#[test]
fn affine_data_moves_rigidly() {
    let table = table();
    let p = Vect::<1>::new(0.9);
    let g = hjh_core::problem::InitialData::affine(p);
    let window = BoxRegion::new(Vect::<1>::new(-1.0), Vect::<1>::new(1.0)).unwrap();
    let sol = solve_effective(&g, table.clone(), &window, 0.5, FanOptions::default()).unwrap();
    let hbar = table.hbar(&p).unwrap();
    for &x in &[-0.7, 0.0, 0.4] {
        let jet = sol.eval(&Vect::<1>::new(x), 0.3).unwrap();
        assert!((jet.value - (0.9 * x - 0.3 * hbar)).abs() < 1e-12);
        assert!((jet.grad[0] - 0.9).abs() < 1e-14);
        assert!(jet.hess[(0, 0)].abs() < 1e-14);
    }
}

#[test]
fn fan_invariants_hold_for_a_ramp() {
    let sol = ramp_solution(table());
    assert!(sol.fan.min_jacobian >= 1.0 - 1e-12);
    for k in 0..40 {
        let x = Vect::<1>::new(-1.0 + 2.0 * k as f64 / 39.0);
        let t = 0.25 * ((k * 7) % 40) as f64 / 39.0;
        let x0 = sol.invert_characteristics(&x, t).unwrap();
        let back = sol.characteristic(&x0, t).unwrap();
        assert!((back - x).norm() <= 1e-12 * (1.0 + x.norm()));
        // gradient is carried unchanged along the characteristic
        let jet = sol.eval(&x, t).unwrap();
        assert!((jet.grad - sol.g.gradient(&x0)).norm() <= 1e-9);
        if t > 0.01 && t < 0.24 {
            assert!(sol.pde_residual(&x, t).unwrap() <= 1e-7, "residual at x={x:?} t={t}");
        }
    }
}

#[test]
fn hessian_matches_closed_form() {
    let sol = ramp_solution(table());
    let t = 0.2;
    for &x in &[-0.5, 0.0, 0.3] {
        let x = Vect::<1>::new(x);
        let jet = sol.eval(&x, t).unwrap();
        let q = sol.table.hbar_hessian(&jet.grad).unwrap()[(0, 0)];
        let gh = sol.g.hessian(&jet.source)[(0, 0)];
        assert!((jet.hess[(0, 0)] * (1.0 + t * q * gh) - gh).abs() < 1e-12);
        let fd = sol.derivative(&x, t, [2], 0).unwrap();
        assert!((fd - jet.hess[(0, 0)]).abs() < 1e-12);
        let d3 = sol.derivative(&x, t, [3], 0).unwrap();
        let h = 1e-3;
        let hp = sol.eval(&Vect::<1>::new(x[0] + h), t).unwrap().hess[(0, 0)];
        let hm = sol.eval(&Vect::<1>::new(x[0] - h), t).unwrap().hess[(0, 0)];
        assert!((d3 - (hp - hm) / (2.0 * h)).abs() < 1e-4);
    }
}

#[test]
fn window_outside_table_is_rejected() {
    let g = ramp(0.1, 2.5, 0.3);
    let window = BoxRegion::new(Vect::<1>::new(-1.0), Vect::<1>::new(1.0)).unwrap();
    assert!(solve_effective(&g, table(), &window, 0.25, FanOptions::default()).is_err());
}
