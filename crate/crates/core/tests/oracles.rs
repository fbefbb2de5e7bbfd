use bmtm_core::ddm::ddm_mle;
use bmtm_core::estimators::{least_squares, ls_objective, neighbor_joining, one_third_shrink};
use bmtm_core::likelihood::{log_likelihood, negative_curvature_direction, second_directional_derivative};
use bmtm_core::linalg;
use bmtm_core::mle::mle;
use bmtm_core::simulate::{
    aggregate, random_tree, run_experiment, run_trial, sample_bmtm, EstimatorKind, ExperimentConfig, Metric,
};
use bmtm_core::suites::{finite_difference, random_data, random_ddm};
use bmtm_core::tree::{build_covariance, EdgeParams, RootedTree};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn ddm_mle_beats_random_ddms_and_every_tree_mle() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for d in 1..=5 {
        let x = random_data(d, &mut rng);
        let best = ddm_mle(&x).unwrap().loglik;
        for _ in 0..10_000 {
            let k = random_ddm(d, &mut rng) * rng.random_range(0.01..100.0);
            assert!(log_likelihood(&k, &x).unwrap() <= best + 1e-9);
        }
        for i in 0..200 {
            let t = random_tree(d, i % 2 == 0, &mut rng).unwrap();
            assert!(mle(&t, &x).unwrap().loglik <= best + 1e-9 * best.abs().max(1.0));
        }
    }
}

#[test]
fn continuous_data_gives_unique_mle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..10_000 {
        let d = 2 + i % 7;
        let t = random_tree(d, i % 2 == 0, &mut rng).unwrap();
        let x = random_data(d, &mut rng);
        assert_eq!(mle(&t, &x).unwrap().tie_count, 1, "tree {:?} x {:?}", t.parents(), x);
    }
}

#[test]
fn least_squares_beats_random_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for d in 1..=4 {
        for binary in [true, false] {
            let t = random_tree(d, binary, &mut rng).unwrap();
            let x = random_data(d, &mut rng);
            let out = least_squares(&t, &x).unwrap();
            let f = ls_objective(&t, &out.tree.unwrap().1, &x);
            let top = x.iter().map(|v| v * v).sum::<f64>();
            for _ in 0..10_000 {
                let th = EdgeParams {
                    theta: (0..t.num_nodes()).map(|v| if v == 0 { 0.0 } else { rng.random_range(0.0..top) }).collect(),
                };
                assert!(f <= ls_objective(&t, &th, &x) + 1e-9);
            }
        }
    }
}

#[test]
fn nj_on_three_leaves_is_valid() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for _ in 0..50 {
        let x = random_data(3, &mut rng);
        let (t, _) = neighbor_joining(&x).unwrap().tree.unwrap();
        assert_eq!(t.num_leaves(), 3);
        assert!(t.validate().is_ok());
    }
}

#[test]
fn sampler_matches_covariance() {
    let t = RootedTree::from_parents(vec![None, Some(4), Some(4), Some(5), Some(5), Some(0)], vec![1, 2, 3]).unwrap();
    let theta = EdgeParams { theta: vec![0.0, 0.5, 1.0, 2.0, 0.7, 1.3] };
    let sigma = build_covariance(&t, &theta);
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let n = 100_000;
    let mut sum = DVector::zeros(3);
    let mut prods = DMatrix::zeros(3, 3);
    let mut sq = DMatrix::zeros(3, 3);
    for _ in 0..n {
        let x = DVector::from_vec(sample_bmtm(&t, &theta, &mut rng));
        sum += &x;
        let p = &x * x.transpose();
        sq += p.map(|v| v * v);
        prods += p;
    }
    let nf = n as f64;
    for i in 0..3 {
        let se = (sigma[(i, i)] / nf).sqrt();
        assert!((sum[i] / nf).abs() < 3.0 * se, "mean {i}");
        for j in 0..3 {
            let m = prods[(i, j)] / nf;
            let var = sq[(i, j)] / nf - m * m;
            let se = (var / nf).sqrt();
            assert!((m - sigma[(i, j)]).abs() < 3.0 * se, "entry ({i}, {j}): {m} vs {}", sigma[(i, j)]);
        }
    }
}

#[test]
fn one_third_shrink_univariate_risk() {
    // E[(x²/3 − 1)²] = E x⁴/9 − 2/3 + 1 = 2/3 for x ~ N(0, 1)
    let t = RootedTree::star(1).unwrap();
    let theta = EdgeParams { theta: vec![0.0, 1.0] };
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let n = 200_000;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for _ in 0..n {
        let x = sample_bmtm(&t, &theta, &mut rng);
        let th = one_third_shrink(&mle(&t, &x).unwrap().theta);
        let loss = (th.theta[1] - 1.0).powi(2);
        s += loss;
        s2 += loss * loss;
    }
    let mean = s / n as f64;
    let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((mean - 2.0 / 3.0).abs() < 3.0 * se, "{mean} ± {se}");
}

#[test]
fn experiment_is_deterministic_and_order_free() {
    let mut cfg = ExperimentConfig::new(
        vec![3, 5],
        12,
        99,
        vec![
            EstimatorKind::BmtmMle,
            EstimatorKind::DdmMle,
            EstimatorKind::Upgma,
            EstimatorKind::Nj,
            EstimatorKind::Ls,
            EstimatorKind::Ots,
            EstimatorKind::Mxshrink,
            EstimatorKind::LinearShrink,
        ],
    );
    cfg.inner_replicates = 5;
    cfg.beta_sq_replicates = 10;
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    let mut outcomes: Vec<_> =
        [3usize, 5].iter().flat_map(|&d| (0..12).map(move |t| (d, t))).map(|(d, t)| run_trial(&cfg, d, t).unwrap()).collect();
    outcomes.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    assert_eq!(aggregate(&cfg, outcomes).to_csv(), a.to_csv());
    for r in &a.rows {
        assert!(r.p10 <= r.p90);
        assert!(r.mean.is_finite());
        assert_eq!(r.errors, 0);
    }
    assert_eq!(a.containment_violations, 0);
    assert_eq!(a.rows.len(), 2 * 8 * 3);
    assert!(a.get(5, EstimatorKind::Ls, Metric::Variance).is_some());
}

#[test]
fn direction_for_prescribed_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for d in 2..=6 {
        let t = RootedTree::star(d).unwrap();
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let mut spec: Vec<f64> = (0..d - 1).map(|_| -rng.random_range(0.5..3.0)).collect();
        spec.push(rng.random_range(0.5..3.0));
        let b = &q * DMatrix::from_diagonal(&DVector::from_vec(spec)) * q.transpose();
        let b = linalg::symmetrize(&b);
        let a = negative_curvature_direction(&b, &t).unwrap().direction.matrix;
        let ev = linalg::sym_eigenvalues(&(&a * &b * &a));
        assert!(ev[d - 1] <= 1e-9 * linalg::max_abs(&a).powi(2).max(1.0), "{ev:?}");
        assert!(ev[0] < -1e-9 * linalg::operator_norm_sym(&b));
    }
}

#[test]
fn curvature_formula_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    for d in 1..=6 {
        let t = random_tree(d, false, &mut rng).unwrap();
        let theta = EdgeParams {
            theta: (0..t.num_nodes()).map(|v| if v == 0 { 0.0 } else { rng.random_range(0.2..2.0) }).collect(),
        };
        let sigma = build_covariance(&t, &theta);
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        let a = linalg::symmetrize(&a);
        let x = random_data(d, &mut rng);
        let exact = second_directional_derivative(&sigma, &a, &x).unwrap();
        let fd = finite_difference(&sigma, &a, &x).unwrap();
        assert!((exact - fd).abs() <= 1e-5 * exact.abs().max(fd.abs()).max(1.0), "{exact} vs {fd}");
    }
}
