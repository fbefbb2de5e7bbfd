use bmtm_core::contrast::{contrast_covariance, contrast_mle};
use bmtm_core::ddm::{ddm_mle, ddm_mle_tree, verify_kkt};
use bmtm_core::estimators::{
    least_squares, linear_shrink, ls_objective, mxshrink, neighbor_joining, one_third_shrink, upgma, MxMode,
};
use bmtm_core::format::{cluster_map, parse_newick, parse_tree_json, to_newick, TreeDoc};
use bmtm_core::likelihood::{
    fiedler, fiedler_inverse, is_ddm, log_likelihood, logdet_via_matrix_tree, pair_inner, squared_distance,
};
use bmtm_core::linalg;
use bmtm_core::mle::{brute_force_mle, loglik_of_result, mle};
use bmtm_core::numfmt::{format_sig, JSON_DIGITS};
use bmtm_core::simulate::{normalize_operator_norm, random_tree, random_ultrametric_tree};
use bmtm_core::suites::{random_connected_weights, random_data};
use bmtm_core::tree::{
    build_covariance, contract_in_order, contract_set, enumerate_fully_observed, is_fully_observed, reroot_at_leaf,
    EdgeParams, RootedTree, SparsityStructure, ENUMERATION_CAP,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_theta(tree: &RootedTree, r: &mut ChaCha8Rng, zero_prob: f64) -> EdgeParams {
    EdgeParams {
        theta: (0..tree.num_nodes())
            .map(|v| if v == 0 || r.random_bool(zero_prob) { 0.0 } else { r.random_range(0.05..2.0) })
            .collect(),
    }
}

fn instance(seed: u64, d: usize) -> (RootedTree, Vec<f64>) {
    let mut r = rng(seed);
    let tree = random_tree(d, r.random_bool(0.5), &mut r).unwrap();
    let x = random_data(d, &mut r);
    (tree, x)
}

fn path_sums(tree: &RootedTree, theta: &EdgeParams) -> Vec<f64> {
    tree.leaves()
        .iter()
        .map(|&l| {
            let (mut s, mut v) = (0.0, l);
            while v != 0 {
                s += theta.theta[v];
                v = tree.parent(v).unwrap();
            }
            s
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_is_psd_and_inverse_is_ddm(seed in any::<u64>(), d in 1usize..8) {
        let mut r = rng(seed);
        let tree = random_tree(d, r.random_bool(0.5), &mut r).unwrap();
        let theta = random_theta(&tree, &mut r, 0.3);
        let s = build_covariance(&tree, &theta);
        prop_assert!(linalg::is_symmetric(&s, 0.0));
        let ev = linalg::sym_eigenvalues(&s);
        prop_assert!(ev[0] > -1e-10);
        let mut pos = theta.clone();
        for &l in tree.leaves() {
            pos.theta[l] = r.random_range(0.05..2.0);
        }
        let s = build_covariance(&tree, &pos);
        let ev = linalg::sym_eigenvalues(&s);
        prop_assert!(ev[0] > 1e-12 * ev[d - 1]);
        let k = linalg::inverse_pd(&s).unwrap();
        for i in 0..d {
            prop_assert!(k.row(i).sum() >= -1e-10);
            for j in 0..d {
                if i != j {
                    prop_assert!(k[(i, j)] <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn contraction_is_order_independent(seed in any::<u64>(), d in 2usize..7) {
        let mut r = rng(seed);
        let tree = random_tree(d, r.random_bool(0.5), &mut r).unwrap();
        let mut s: Vec<usize> = (1..tree.num_nodes()).filter(|_| r.random_bool(0.4)).collect();
        let a = contract_in_order(&tree, &s).unwrap();
        s.shuffle(&mut r);
        let b = contract_in_order(&tree, &s).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fully_observed_structures_have_distinct_cuts(seed in any::<u64>(), d in 1usize..7) {
        let mut r = rng(seed);
        let tree = random_tree(d, r.random_bool(0.5), &mut r).unwrap();
        let all = enumerate_fully_observed(&tree, ENUMERATION_CAP).unwrap();
        let cuts: Vec<_> = all.iter().map(|s| contract_set(&tree, s).unwrap().cuts(&tree)).collect();
        for i in 0..cuts.len() {
            prop_assert!(is_fully_observed(&tree, &all[i]));
            for j in (i + 1)..cuts.len() {
                prop_assert_ne!(&cuts[i], &cuts[j]);
            }
        }
    }

    #[test]
    fn newick_and_json_round_trip(seed in any::<u64>(), d in 1usize..9) {
        let mut r = rng(seed);
        let tree = random_tree(d, r.random_bool(0.5), &mut r).unwrap();
        let theta = random_theta(&tree, &mut r, 0.2);
        let (t2, th2) = parse_newick(&to_newick(&tree, &theta)).unwrap();
        prop_assert_eq!(cluster_map(&t2, &th2), cluster_map(&tree, &theta));
        prop_assert_eq!(build_covariance(&t2, &th2), build_covariance(&tree, &theta));
        let js = serde_json::to_string(&TreeDoc::from_tree(&tree, Some(&theta))).unwrap();
        let (t3, th3) = parse_tree_json(&js).unwrap();
        prop_assert_eq!(t3.parents(), tree.parents());
        prop_assert_eq!(th3, theta);
    }

    #[test]
    fn seventeen_digits_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(format_sig(v, JSON_DIGITS).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn fiedler_is_a_bijection(seed in any::<u64>(), d in 1usize..7) {
        let mut r = rng(seed);
        let p = random_connected_weights(d + 1, &mut r);
        let k = fiedler_inverse(&p);
        prop_assert!(is_ddm(&k));
        prop_assert!((fiedler(&k) - &p).amax() <= 1e-12 * linalg::max_abs(&p));
    }

    #[test]
    fn likelihood_through_spanning_trees(seed in any::<u64>(), d in 1usize..7) {
        let mut r = rng(seed);
        let p = random_connected_weights(d + 1, &mut r);
        let x = random_data(d, &mut r);
        let k = fiedler_inverse(&p);
        let det = linalg::logdet_pd(&k).unwrap();
        let mt = logdet_via_matrix_tree(&p).unwrap();
        prop_assert!((det - mt).abs() <= 1e-9 * det.abs().max(1.0));
        let lhs = 0.5 * (mt - pair_inner(&p, &squared_distance(&x)));
        let rhs = log_likelihood(&k, &x).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.abs().max(1.0));
    }

    #[test]
    fn ddm_mle_certificates(seed in any::<u64>(), d in 1usize..7) {
        let x = random_data(d, &mut rng(seed));
        let m = ddm_mle(&x).unwrap();
        prop_assert!(is_ddm(&m.k_hat));
        prop_assert!(verify_kkt(&m.p_hat, &x).unwrap().passed);
        // backward error of K̂ as the inverse of the tree covariance
        let (t, th) = ddm_mle_tree(&x).unwrap();
        let sigma = build_covariance(&t, &th);
        let resid = (&m.k_hat * &sigma - DMatrix::identity(d, d)).amax();
        prop_assert!(resid <= 1e-12 * d as f64 * linalg::max_abs(&m.k_hat) * linalg::max_abs(&sigma));
    }

    #[test]
    fn ddm_mle_scales_exactly_by_powers_of_two(seed in any::<u64>(), d in 1usize..7, k in -6i32..6, neg in any::<bool>()) {
        let x = random_data(d, &mut rng(seed));
        let lam = if neg { -(2f64.powi(k)) } else { 2f64.powi(k) };
        let xs: Vec<f64> = x.iter().map(|v| v * lam).collect();
        let a = ddm_mle(&x).unwrap().k_hat;
        let b = ddm_mle(&xs).unwrap().k_hat;
        prop_assert_eq!(b * (lam * lam), a);
    }

    #[test]
    fn ddm_mle_scales(seed in any::<u64>(), d in 1usize..7, lam in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0]) {
        let x = random_data(d, &mut rng(seed));
        let xs: Vec<f64> = x.iter().map(|v| v * lam).collect();
        let a = ddm_mle(&x).unwrap().k_hat;
        let b = ddm_mle(&xs).unwrap().k_hat;
        // rounding of λx is amplified by |x| / gap in each entry
        let mut sorted = x.clone();
        sorted.push(0.0);
        sorted.sort_by(f64::total_cmp);
        let gap = sorted.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let cond = sorted.iter().fold(0.0f64, |m, v| m.max(v.abs())) / gap;
        for (u, v) in (b * lam * lam).iter().zip(a.iter()) {
            prop_assert!((u - v).abs() <= 1e-12 * cond.max(1.0) * v.abs());
        }
    }

    #[test]
    fn mle_matches_brute_force_and_sandwich(seed in any::<u64>(), d in 1usize..8) {
        let (tree, x) = instance(seed, d);
        let dp = mle(&tree, &x).unwrap();
        let bf = brute_force_mle(&tree, &x, ENUMERATION_CAP).unwrap();
        prop_assert!((dp.objective_log - bf.objective_log).abs() <= 1e-9 * dp.objective_log.abs().max(1.0));
        prop_assert_eq!(dp.tie_count, bf.tie_count);
        if dp.tie_count == 1 {
            prop_assert_eq!(&dp.sparsity, &bf.sparsity);
        }
        prop_assert!(is_fully_observed(&tree, &dp.sparsity));
        let dense = loglik_of_result(&tree, &dp, &x).unwrap();
        prop_assert!(ddm_mle(&x).unwrap().loglik >= dense - 1e-9 * dense.abs().max(1.0));
    }

    #[test]
    fn mle_scales_and_keeps_structure(seed in any::<u64>(), d in 1usize..8, lam in 0.1f64..10.0) {
        let (tree, x) = instance(seed, d);
        let xs: Vec<f64> = x.iter().map(|v| v * lam).collect();
        let a = mle(&tree, &x).unwrap();
        let b = mle(&tree, &xs).unwrap();
        prop_assert_eq!(&a.sparsity, &b.sparsity);
        let shift = d as f64 * lam.ln();
        prop_assert!((b.objective_log - a.objective_log - shift).abs() <= 1e-9 * b.objective_log.abs().max(1.0));
    }

    #[test]
    fn reroot_preserves_contrast_covariance(seed in any::<u64>(), d in 2usize..8) {
        let mut r = rng(seed);
        let tree = random_tree(d, r.random_bool(0.5), &mut r).unwrap();
        let theta = random_theta(&tree, &mut r, 0.2);
        let slot = r.random_range(0..d);
        let rr = reroot_at_leaf(&tree, slot).unwrap();
        let lhs = contrast_covariance(&build_covariance(&tree, &theta), slot);
        let rhs = build_covariance(&rr.tree, &rr.map_theta(&theta));
        prop_assert!((lhs - rhs).amax() <= 1e-10 * linalg::max_abs(&build_covariance(&tree, &theta)).max(1.0));
    }

    #[test]
    fn contrast_mle_is_fully_observed(seed in any::<u64>(), d in 2usize..7) {
        let (tree, x) = instance(seed, d);
        let c = contrast_mle(&tree, &x, 0).unwrap();
        prop_assert!(c.rerooted.tree.validate().is_ok());
        prop_assert!(is_fully_observed(&c.rerooted.tree, &c.mle.sparsity));
        loglik_of_result(&c.rerooted.tree, &c.mle, &c.y).unwrap();
    }

    #[test]
    fn upgma_is_ultrametric_and_nj_is_valid(seed in any::<u64>(), d in 2usize..10) {
        let x = random_data(d, &mut rng(seed));
        let (t, th) = upgma(&x).unwrap().tree.unwrap();
        let sums = path_sums(&t, &th);
        for s in &sums {
            prop_assert!((s - sums[0]).abs() <= 1e-10 * sums[0].abs().max(1.0));
        }
        let out = neighbor_joining(&x).unwrap();
        let (t, th) = out.tree.as_ref().unwrap();
        prop_assert!(t.validate().is_ok());
        prop_assert!(th.theta.iter().all(|&v| v >= 0.0));
        prop_assert!(linalg::sym_eigenvalues(&out.covariance)[0] >= -1e-9 * linalg::max_abs(&out.covariance).max(1.0));
    }

    #[test]
    fn least_squares_beats_feasible_points(seed in any::<u64>(), d in 1usize..7) {
        let (tree, x) = instance(seed, d);
        let out = least_squares(&tree, &x).unwrap();
        let th = &out.tree.as_ref().unwrap().1;
        let f = ls_objective(&tree, th, &x);
        let slack = 1e-9 * f.max(1.0);
        prop_assert!(f <= ls_objective(&tree, &EdgeParams::zeros(&tree), &x) + slack);
        prop_assert!(f <= ls_objective(&tree, &mle(&tree, &x).unwrap().theta, &x) + slack);
        prop_assert!(out.solver.unwrap().kkt_residual <= 1e-8);
    }

    #[test]
    fn shrinkers_behave(seed in any::<u64>(), d in 2usize..8, beta in 0.0f64..5.0) {
        let mut r = rng(seed);
        let (tree, theta) = random_ultrametric_tree(d, &mut r).unwrap();
        let s = build_covariance(&tree, &theta);
        let mx = mxshrink(&s, MxMode::Clamped).unwrap().covariance;
        prop_assert!((&s * &mx - &mx * &s).amax() <= 1e-9 * linalg::max_abs(&s).powi(2).max(1.0));
        prop_assert!((build_covariance(&tree, &one_third_shrink(&theta)) - &s / 3.0).amax() <= 1e-15 * linalg::max_abs(&s));
        let (t2, th2) = random_ultrametric_tree(d, &mut r).unwrap();
        let star = build_covariance(&t2, &th2);
        let lin = linear_shrink(&s, &star, beta).unwrap().covariance;
        let mu = star.trace() / d as f64;
        let alpha = linalg::frobenius_sq(&(&star - DMatrix::identity(d, d) * mu));
        let d1 = beta * mu / (alpha + beta);
        let rest = lin - DMatrix::identity(d, d) * d1;
        // the remainder is a nonnegative multiple of the input
        let c = rest.dot(&s) / s.dot(&s);
        prop_assert!(c >= 0.0);
        prop_assert!((rest - &s * c).amax() <= 1e-12 * linalg::max_abs(&s).max(1.0));
    }

    #[test]
    fn normalization_hits_target(seed in any::<u64>(), d in 2usize..9, target in 0.1f64..10.0) {
        let mut r = rng(seed);
        let (tree, theta) = random_ultrametric_tree(d, &mut r).unwrap();
        let n = normalize_operator_norm(&tree, &theta, target).unwrap();
        prop_assert!((linalg::operator_norm_sym(&build_covariance(&tree, &n)) - target).abs() <= 1e-10 * target);
    }
}

#[test]
fn sparsity_rejects_unknown_nodes() {
    let t = RootedTree::star(2).unwrap();
    assert!(SparsityStructure::new(&t, [7]).is_err());
}
