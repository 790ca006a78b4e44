mod common;

use koopsafe::qp::{QpSolver, QpStatus};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn random_problems_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let solver = QpSolver::default();
    for case in 0..40 {
        let p = common::random_convex_qp(&mut rng, 8, 16);
        let (expected, _) = common::enumerate_active_sets(&p).expect("feasible by construction");
        let out = solver.solve(&p, None).unwrap();
        assert_eq!(out.status, QpStatus::Solved, "case {case}");
        let y = out.solution.unwrap();
        assert!(p.max_violation(&y) <= 1e-6, "case {case}");
        assert!(
            (out.objective - expected).abs() <= 1e-5 * expected.abs().max(1.0),
            "case {case}: {} vs {expected}",
            out.objective
        );
    }
}

#[test]
fn infeasible_problems_are_certified() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let solver = QpSolver::default();
    for case in 0..15 {
        let p = common::random_infeasible_qp(&mut rng, case);
        let out = solver.solve(&p, None).unwrap();
        assert_eq!(out.status, QpStatus::PrimalInfeasible, "case {case}");
        assert!(out.certificate.unwrap().verify(&p), "case {case}");
    }
}

#[test]
fn solving_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let p = common::random_convex_qp(&mut rng, 10, 20);
    let solver = QpSolver::default();
    let a = solver.solve(&p, None).unwrap();
    let b = solver.solve(&p, None).unwrap();
    assert_eq!(a.solution, b.solution);
    assert_eq!(a.iterations, b.iterations);
}
