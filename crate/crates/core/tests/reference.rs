mod support;

use std::sync::Arc;

use hjh_core::cell::CellOptions;
use hjh_core::correctors::{build_hierarchy, CorrectorHierarchy, SlowGrid};
use hjh_core::effective::{solve_effective, FanOptions};
use hjh_core::error::Error;
use hjh_core::geometry::{BoxRegion, Vect};
use hjh_core::problem::{Diffusion, InitialData, ProblemSpec, QuadraticHamiltonian};
use hjh_core::reference::{
    compare, insulation_margin, prepared_initial, slice_speed, solve_reference, FarField, FineGrid1D,
    ReferenceOptions, ReferenceScheme, ReferenceSolution,
};
use hjh_core::table::effective_table;
use hjh_core::torus::TorusGrid;
use hjh_core::trig::TrigSeries;
use support::{bounds, ramp, rich_problem};

const HORIZON: f64 = 0.25;

fn interval(lo: f64, hi: f64) -> BoxRegion<1> {
    BoxRegion::new(Vect::<1>::new(lo), Vect::<1>::new(hi)).unwrap()
}

fn window() -> BoxRegion<1> {
    interval(-0.5, 0.5)
}

fn hierarchy(spec: &ProblemSpec<1>, g: &InitialData<1>, order: usize, eps_max: f64) -> CorrectorHierarchy<1> {
    let grid = TorusGrid::new(64).unwrap();
    let table = Arc::new(effective_table(spec, grid, CellOptions::default(), &interval(0.2, 1.8), 0.05).unwrap());
    let hx = 0.02;
    let max_b = max_bbar(table.bbar_nodes());
    let margin = (order - 1) as f64 * HORIZON * max_b
        + 6.0 * (eps_max * spec.bounds.lambda_upper * HORIZON).sqrt()
        + 8.0 * hx;
    let region = window().inflate(margin);
    let sol = solve_effective(g, table, &region, HORIZON, FanOptions::default()).unwrap();
    let slow = SlowGrid::new(&region, hx, HORIZON, hx / 2.0).unwrap();
    build_hierarchy(Arc::new(sol), spec, grid, CellOptions::default(), slow, order).unwrap()
}

fn max_bbar(b: &[Vect<1>]) -> f64 {
    b.iter().fold(0.0f64, |m, v| m.max(v.norm()))
}

fn run(
    spec: &ProblemSpec<1>,
    h: &CorrectorHierarchy<1>,
    eps: f64,
    options: ReferenceOptions,
    extra: f64,
    horizon: f64,
) -> ReferenceSolution {
    let eff = h.effective();
    let margin = insulation_margin(HORIZON, max_bbar(eff.table.bbar_nodes()), eps, spec.bounds.lambda_upper, eff.g.core_width());
    let domain = window().inflate(margin + extra);
    let far = FarField::from_data(spec, *h.grid(), CellOptions::default(), &eff.g).unwrap();
    let init = prepared_initial(h, eps);
    let (lam, lam_up) = (spec.bounds.lambda, spec.bounds.lambda_upper);
    let probe = FineGrid1D::new(&domain, eps, &options, 0.0, lam, lam_up).unwrap();
    let u0: Vec<f64> = (0..probe.len).map(|i| init(probe.x(i))).collect();
    let speed = 1.25 * slice_speed(spec, &probe, &u0);
    let grid = FineGrid1D::new(&domain, eps, &options, speed, lam, lam_up).unwrap();
    let times: Vec<f64> = (1..=4).map(|k| k as f64 * horizon / 4.0).collect();
    solve_reference(spec, &far, &init, grid, &times).unwrap()
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

fn options(n_per: usize) -> ReferenceOptions {
    ReferenceOptions {
        n_per,
        ..Default::default()
    }
}

#[test]
fn quadratic_hamiltonian_is_exact() {
    let h = QuadraticHamiltonian::<1>::with_potential(TrigSeries::zero()).unwrap();
    let spec = ProblemSpec::new(Diffusion::identity(), Arc::new(h), bounds(0.0)).unwrap();
    let p = 1.1;
    let hier = hierarchy(&spec, &InitialData::affine(Vect::<1>::new(p)), 2, 0.25);
    let r = run(&spec, &hier, 0.25, options(16), 0.0, HORIZON);
    let grid = r.grid;
    for (slice, t) in r.snapshots.iter().zip(&r.times) {
        let err = (0..grid.len)
            .map(|i| (slice[i] - (p * grid.x(i) - p * p * t)).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "t = {t}: {err}");
    }
}

#[test]
fn affine_error_is_scheme_level() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &InitialData::affine(Vect::<1>::new(0.9)), 2, 0.25);
    let err: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| compare(&run(&spec, &hier, 0.25, options(n), 0.0, HORIZON), &hier, 1, &window()).unwrap().sup_error)
        .collect();
    let orders: Vec<f64> = err.windows(2).map(|e| (e[0] / e[1]).log2()).collect();
    assert!(orders.iter().all(|o| *o >= 1.9), "errors {err:?}, orders {orders:?}");
    assert!(err[0] / err[1] >= 3.5 && err[1] / err[2] >= 3.5);
    assert!(err[2] < 2e-6);
}

#[test]
fn second_order_space_converges_at_second_order() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &InitialData::affine(Vect::<1>::new(0.9)), 2, 0.25);
    let opts = |n| ReferenceOptions {
        n_per: n,
        order: 2,
        ..Default::default()
    };
    let err: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| compare(&run(&spec, &hier, 0.25, opts(n), 0.0, HORIZON), &hier, 1, &window()).unwrap().sup_error)
        .collect();
    for e in err.windows(2) {
        assert!((e[0] / e[1]).log2() >= 1.9, "errors {err:?}");
    }
}

#[test]
fn ramp_rates_and_ordering() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 3, 0.125);
    let eps: Vec<f64> = (3..=5).map(|k| 0.5f64.powi(k)).collect();
    let runs: Vec<_> = eps.iter().map(|&e| run(&spec, &hier, e, options(32), 0.0, HORIZON)).collect();
    let errors = |m: usize| -> Vec<f64> {
        runs.iter()
            .map(|r| compare(r, &hier, m, &window()).unwrap().sup_error)
            .collect()
    };
    let (e0, e1, e2) = (errors(0), errors(1), errors(2));
    let s0 = slope(&eps, &e0);
    assert!((s0 - 1.0).abs() < 0.3, "m = 0 slope {s0}: {e0:?}");
    assert!(slope(&eps, &e1) >= 0.7, "{e1:?}");
    assert!(slope(&eps, &e2) >= 1.7, "{e2:?}");
    assert!(e1.iter().zip(&e2).all(|(a, b)| b < a));
}

#[test]
fn ramp_solution_is_monotone() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 2, 0.25);
    let r = run(&spec, &hier, 0.25, options(32), 0.0, HORIZON);
    for slice in &r.snapshots {
        assert!(slice.windows(2).all(|w| w[1] > w[0]));
    }
}

#[test]
fn explicit_and_imex_agree() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 2, 0.25);
    let horizon = 0.02;
    let explicit = run(
        &spec,
        &hier,
        0.25,
        ReferenceOptions {
            n_per: 16,
            scheme: ReferenceScheme::ExplicitCentered,
            ..Default::default()
        },
        0.0,
        horizon,
    );
    let imex = run(
        &spec,
        &hier,
        0.25,
        ReferenceOptions {
            n_per: 16,
            c_a: 0.005,
            ..Default::default()
        },
        0.0,
        horizon,
    );
    let d = explicit.snapshots[3]
        .iter()
        .zip(&imex.snapshots[3])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(d <= 1e-7, "schemes differ by {d}");
}

#[test]
fn boundary_is_insulated() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 2, 0.25);
    let eps = 0.25;
    let base = run(&spec, &hier, eps, options(16), 0.0, HORIZON);
    let width = base.grid.domain().width(0);
    let wide = run(&spec, &hier, eps, options(16), width / 2.0, HORIZON);
    let shift = (wide.grid.i0 - base.grid.i0).unsigned_abs() as usize;
    let mut d = 0.0f64;
    for (a, b) in base.snapshots.iter().zip(&wide.snapshots) {
        for i in 0..base.grid.len {
            if window().contains(&Vect::<1>::new(base.grid.x(i))) {
                d = d.max((a[i] - b[i + shift]).abs());
            }
        }
    }
    assert!(d <= 1e-9, "windowed solutions differ by {d}");
}

#[test]
fn window_too_close_to_the_boundary_is_rejected() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 2, 0.25);
    let r = run(&spec, &hier, 0.25, options(8), 0.0, HORIZON);
    let wide = interval(-1.5, 1.5);
    assert!(matches!(compare(&r, &hier, 1, &wide), Err(Error::OutsideWindow(_))));
}

#[test]
fn lax_friedrichs_runs() {
    let spec = rich_problem();
    let hier = hierarchy(&spec, &ramp(0.5, 1.5, 0.3), 2, 0.25);
    let opts = ReferenceOptions {
        n_per: 32,
        lax_friedrichs: true,
        ..Default::default()
    };
    let r = run(&spec, &hier, 0.25, opts, 0.0, HORIZON);
    let e = compare(&r, &hier, 1, &window()).unwrap().sup_error;
    assert!(e.is_finite() && e < 0.5);
}

