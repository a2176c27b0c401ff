mod common;

use common::{dantzig_feasibility_case, dantzig_oracle_case, lasso_kkt_case, lasso_oracle_case, normal_mat, normal_vec, rng};
use drdid::solvers::{constraint_violation, dantzig_solve, lasso_solve, DantzigProblem, LassoProblem};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn lasso_matches_grid_oracle_on_random_instances() {
    for case in 0..50u64 {
        let lambda = (case == 0).then_some(0.1);
        if let Err(e) = lasso_oracle_case(1100 + case, lambda) {
            panic!("case {case}: {e}");
        }
    }
}

#[test]
fn dantzig_matches_vertex_oracle_on_random_instances() {
    for case in 0..50u64 {
        let bound = (case == 0).then_some(0.1);
        if let Err(e) = dantzig_oracle_case(1200 + case, bound) {
            panic!("case {case}: {e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lasso_kkt_certificate_holds(seed in any::<u64>(), n in 8usize..60, m in 1usize..25, lam in 0.001f64..1.0, unpen in 0usize..3) {
        let check = lasso_kkt_case(seed, n, m, lam, unpen);
        prop_assert!(check.is_ok(), "{:?}", check);
    }

    #[test]
    fn lasso_scales_with_response(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut rng = rng(seed);
        let a = normal_mat(&mut rng, 30, 6);
        let s = normal_vec(&mut rng, 30);
        let lam = 0.2;
        let base = lasso_solve(&LassoProblem::new(&a, &s, lam).with_tol(1e-12)).unwrap();
        let sc = &s * c;
        let scaled = lasso_solve(&LassoProblem::new(&a, &sc, lam * c).with_tol(1e-12)).unwrap();
        prop_assert!((&scaled.coef - &base.coef * c).amax() <= 1e-8 * c.max(1.0));
    }

    #[test]
    fn dantzig_solution_is_feasible_and_no_larger_than_inverse(seed in any::<u64>(), m in 1usize..20, bound in 0.01f64..0.6) {
        let check = dantzig_feasibility_case(seed, m, bound);
        prop_assert!(check.is_ok(), "{:?}", check);
    }

    #[test]
    fn dantzig_feasible_on_rank_deficient_grams(seed in any::<u64>(), m in 2usize..12) {
        let mut rng = rng(seed);
        // fewer rows than columns
        let a = normal_mat(&mut rng, m / 2 + 1, m);
        let gram = a.tr_mul(&a) / a.nrows() as f64;
        let target = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
        if let Ok(sol) = dantzig_solve(&DantzigProblem { gram: &gram, target: &target, bound: 0.2 }) {
            prop_assert!(constraint_violation(&gram, &target, &sol.w) <= sol.bound * (1.0 + 1e-8));
        }
    }
}
