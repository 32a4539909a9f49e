mod support;

use hjh_core::cell::{CellOptions, CellSolver};
use hjh_core::geometry::Vect;
use hjh_core::torus::TorusGrid;
use support::{cosine, hopf_cole_hbar, potential_problem};

#[test]
fn matches_hopf_cole_eigenvalue() {
    let spec = potential_problem(0.5);
    let solver = CellSolver::new(&spec, TorusGrid::new(256).unwrap(), CellOptions::default()).unwrap();
    for p in [0.0, 0.5, -0.5, 1.0, -1.0, 2.0] {
        let sol = solver.solve(&Vect::<1>::new(p), None).unwrap();
        let oracle = hopf_cole_hbar(&cosine(0.5), p, 48);
        println!("p={p} gamma={:.12} oracle={:.12}", sol.gamma, oracle);
        assert!((sol.gamma - oracle).abs() <= 1e-6);
    }
}
