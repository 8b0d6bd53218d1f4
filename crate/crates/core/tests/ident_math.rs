use std::collections::BTreeSet;

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskstruct::ident::{
    best_permutation, check_span_condition, evaluate_r2, make_instance, objective_and_gradient, random_supports,
    rotation_instance, sparse_unmix, superset_property, UnmixConfig, ZERO_TOL,
};

fn sets(s: &[&[usize]]) -> Vec<BTreeSet<usize>> {
    s.iter().map(|v| v.iter().copied().collect()).collect()
}

#[test]
fn jacobian_matches_finite_differences() {
    let inst = make_instance(4, &sets(&[&[1, 2], &[3], &[2, 4]]), 5).unwrap();
    let s = [0.3, -1.1, 0.7, 2.0];
    let jac = inst.task_jacobian(&s);
    let h = 1e-6;
    for j in 0..4 {
        let (mut up, mut down) = (s, s);
        up[j] += h;
        down[j] -= h;
        let (fu, fd) = (inst.task_map(&up), inst.task_map(&down));
        for i in 0..3 {
            let fdiff = (fu[i] - fd[i]) / (2.0 * h);
            assert!((fdiff - jac[(i, j)]).abs() < 1e-6, "({i}, {j}): {fdiff} vs {}", jac[(i, j)]);
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let inst = make_instance(3, &sets(&[&[1, 2], &[3]]), 2).unwrap();
    let points = inst.sample_latents(40, 1);
    let g = inst.generalist_jacobians(&points).unwrap();
    let q = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, -0.3, 0.1, 0.9, 0.4, -0.2, 0.3, 1.1]);
    let (_, grad) = objective_and_gradient(&g, 40, &q, 1.0, 0.1, 1e-2).unwrap();
    let h = 1e-6;
    for r in 0..3 {
        for c in 0..3 {
            let (mut up, mut down) = (q.clone(), q.clone());
            up[(r, c)] += h;
            down[(r, c)] -= h;
            let fu = objective_and_gradient(&g, 40, &up, 1.0, 0.1, 1e-2).unwrap().0;
            let fd = objective_and_gradient(&g, 40, &down, 1.0, 0.1, 1e-2).unwrap().0;
            assert_relative_eq!((fu - fd) / (2.0 * h), grad[(r, c)], max_relative = 1e-5, epsilon = 1e-8);
        }
    }
}

#[test]
fn identity_mixing_is_recovered() {
    let inst = make_instance(3, &sets(&[&[1], &[2], &[3]]), 0)
        .unwrap()
        .with_mixing(DMatrix::identity(3, 3))
        .unwrap();
    let res = sparse_unmix(&inst, &UnmixConfig::default()).unwrap();
    assert!(res.success(), "{res:?}");
    assert_eq!(res.l0_counts, res.l0_truth);
}

#[test]
fn rotated_singletons_are_separated() {
    let inst = rotation_instance(0).unwrap();
    let res = sparse_unmix(&inst, &UnmixConfig::default()).unwrap();
    assert!(res.success());
    for t in evaluate_r2(&inst, &res, 5000, 1).unwrap() {
        assert!(t.r2_relevant > 0.99 && t.r2_irrelevant < 0.01, "{t:?}");
    }
}

#[test]
fn shared_block_is_split_from_irrelevant_latent() {
    let inst = make_instance(3, &sets(&[&[1, 2]]), 4).unwrap();
    let res = sparse_unmix(&inst, &UnmixConfig::default()).unwrap();
    assert!(res.success(), "{res:?}");
    let r2 = evaluate_r2(&inst, &res, 5000, 2).unwrap();
    assert!(r2[0].r2_relevant > 0.99 && r2[0].r2_irrelevant < 0.01, "{r2:?}");
}

#[test]
fn span_condition_holds_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut held, mut total) = (0, 0);
    for seed in 0..200 {
        let d = 2 + seed as usize % 4;
        let sup = random_supports(d, &mut rng);
        let inst = make_instance(d, &sup, seed).unwrap();
        let largest = sup.iter().map(BTreeSet::len).max().unwrap();
        for row in check_span_condition(&inst, 10 * largest, seed).unwrap() {
            total += 1;
            held += row.holds as usize;
        }
    }
    assert!(held * 100 >= total * 99, "{held}/{total}");
}

#[test]
fn permutation_search_undoes_a_shuffle() {
    let supports = sets(&[&[1], &[2], &[3], &[4]]);
    // Row r of the decoder-side matrix is latent perm[r] - 1.
    let perm = [3usize, 1, 4, 2];
    let w = DMatrix::from_fn(4, 4, |r, c| if perm[c] - 1 == r { 2.0 } else { 0.0 });
    let (found, score) = best_permutation(&w, &supports).unwrap();
    assert_eq!(score, 0.0);
    assert_eq!(found.iter().map(|&p| p + 1).collect::<Vec<_>>(), perm);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_invertible_reparameterization_keeps_support_sizes(seed in any::<u64>(), entries in prop::collection::vec(-2.0f64..2.0, 16)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sup = random_supports(4, &mut rng);
        let inst = make_instance(4, &sup, seed).unwrap();
        let q = DMatrix::from_vec(4, 4, entries);
        let sv = q.singular_values();
        prop_assume!(sv.min() > 1e-3 * sv.max());
        let points = inst.sample_latents(64, seed ^ 1);
        for row in superset_property(&inst, &q, &points, ZERO_TOL).unwrap() {
            prop_assert!(row.holds, "{row:?}");
        }
    }
}
