//! Randomized property suites shared by the `verify` command and the tests.
//! Every instance is generated from `(seed, suite, index)`, so a failure can
//! be replayed from its serialized input.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::ddm::{ddm_mle, verify_kkt};
use crate::error::{Error, Result};
use crate::format::{cluster_map, parse_newick, parse_tree_json, to_newick, TreeDoc};
use crate::likelihood::{
    curvature_matrix, curvature_scale, fiedler_inverse, laplacian_embed, laplacian_restrict, log_likelihood,
    logdet_via_matrix_tree, negative_curvature_direction, pair_inner, second_directional_derivative,
    squared_distance, CurvatureCase, DirectionMatrix,
};
use crate::linalg;
use crate::mle::{brute_force_mle, loglik_of_result, mle, objective_log};
use crate::serde_matrix::to_rows;
use crate::simulate::random_tree;
use crate::tree::{build_covariance, enumerate_fully_observed, is_fully_observed, EdgeParams, RootedTree, ENUMERATION_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Oracle,
    Kkt,
    Curvature,
    Roundtrip,
    MatrixTree,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Oracle, Suite::Kkt, Suite::Curvature, Suite::Roundtrip, Suite::MatrixTree];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Oracle => "oracle",
            Suite::Kkt => "kkt",
            Suite::Curvature => "curvature",
            Suite::Roundtrip => "roundtrip",
            Suite::MatrixTree => "matrix-tree",
        }
    }

    /// Instances run when none are requested.
    pub fn default_instances(self) -> usize {
        match self {
            Suite::Oracle => 200,
            Suite::Kkt => 500,
            Suite::Curvature | Suite::Roundtrip | Suite::MatrixTree => 100,
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown suite {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub index: usize,
    pub message: String,
    pub input: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub instances: usize,
    pub passed: usize,
    pub failures: Vec<Failure>,
    /// Extra tallies, e.g. how often each curvature case was hit.
    pub notes: Vec<(String, usize)>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.passed == self.instances
    }
}

pub fn instance_rng(seed: u64, suite: Suite, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((suite.tag() << 48) ^ index as u64);
    rng
}

/// Standard normal data with distinct nonzero entries.
pub fn random_data<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut s = x.clone();
        s.push(0.0);
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[0] != w[1]) {
            return x;
        }
    }
}

/// Hollow symmetric nonnegative weights on `n` nodes whose support is
/// connected: a random spanning tree plus extra edges.
pub fn random_connected_weights<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for v in 1..n {
        let u = rng.random_range(0..v);
        let w = rng.random_range(0.1..2.0);
        p[(u, v)] = w;
        p[(v, u)] = w;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if p[(i, j)] == 0.0 && rng.random_bool(0.4) {
                let w = rng.random_range(0.0..2.0);
                p[(i, j)] = w;
                p[(j, i)] = w;
            }
        }
    }
    p
}

/// Random DDM of size `d` from connected weights on `d + 1` nodes.
pub fn random_ddm<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    fiedler_inverse(&random_connected_weights(d + 1, rng))
}

/// Laplacian of random connected weights on `n` nodes.
pub fn random_laplacian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let p = random_connected_weights(n, rng);
    let mut l = -p.clone();
    for i in 0..n {
        l[(i, i)] = p.row(i).sum();
    }
    l
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn tree_json(tree: &RootedTree, theta: Option<&EdgeParams>) -> Value {
    serde_json::to_value(TreeDoc::from_tree(tree, theta)).unwrap_or(Value::Null)
}

type Check = std::result::Result<Option<&'static str>, String>;

fn run<F>(suite: Suite, seed: u64, instances: usize, f: F) -> SuiteReport
where
    F: Fn(usize, &mut ChaCha8Rng) -> (Value, Check) + Sync,
{
    let results: Vec<(Value, Check)> = (0..instances)
        .into_par_iter()
        .map(|i| {
            let mut rng = instance_rng(seed, suite, i);
            f(i, &mut rng)
        })
        .collect();
    let mut failures = Vec::new();
    let mut notes: Vec<(String, usize)> = Vec::new();
    let mut passed = 0;
    for (i, (input, check)) in results.into_iter().enumerate() {
        match check {
            Ok(note) => {
                passed += 1;
                if let Some(n) = note {
                    match notes.iter_mut().find(|(k, _)| k == n) {
                        Some(e) => e.1 += 1,
                        None => notes.push((n.to_string(), 1)),
                    }
                }
            }
            Err(message) => failures.push(Failure { index: i, message, input }),
        }
    }
    SuiteReport { suite, seed, instances, passed, failures, notes }
}

/// Tolerance on log-objectives and log-likelihoods in the oracle suite.
pub const ORACLE_RTOL: f64 = 1e-9;

/// One oracle instance: DP against brute force, plus the structural
/// properties of the optimum.
pub fn check_oracle(tree: &RootedTree, x: &[f64]) -> std::result::Result<(), String> {
    let dp = mle(tree, x).map_err(|e| format!("mle: {e}"))?;
    let bf = brute_force_mle(tree, x, ENUMERATION_CAP).map_err(|e| format!("brute force: {e}"))?;
    if !rel_close(dp.objective_log, bf.objective_log, ORACLE_RTOL) {
        return Err(format!("objective_log {} vs brute force {}", dp.objective_log, bf.objective_log));
    }
    if dp.tie_count != bf.tie_count {
        return Err(format!("tie_count {} vs brute force {}", dp.tie_count, bf.tie_count));
    }
    if dp.tie_count == 1 && dp.sparsity != bf.sparsity {
        return Err(format!("sparsity {:?} vs brute force {:?}", dp.sparsity.zeroed, bf.sparsity.zeroed));
    }
    if !is_fully_observed(tree, &dp.sparsity) {
        return Err("optimum is not fully observed".into());
    }
    let near_leaf_or_root =
        dp.sparsity.zeroed.iter().any(|&v| tree.is_leaf(v) || v == tree.root_child());
    if !near_leaf_or_root {
        return Err("no zero edge at a leaf or below the root".into());
    }
    loglik_of_result(tree, &dp, x).map_err(|e| format!("dense check: {e}"))?;
    let ddm = ddm_mle(x).map_err(|e| format!("ddm mle: {e}"))?;
    if ddm.loglik < dp.loglik - ORACLE_RTOL * dp.loglik.abs().max(1.0) {
        return Err(format!("ddm loglik {} below bmtm loglik {}", ddm.loglik, dp.loglik));
    }
    let d = x.len() as f64;
    for s in enumerate_fully_observed(tree, ENUMERATION_CAP).map_err(|e| e.to_string())? {
        let ll = -0.5 * d - objective_log(tree, &s, x).map_err(|e| e.to_string())?;
        if ll > dp.loglik + ORACLE_RTOL * dp.loglik.abs().max(1.0) {
            return Err(format!("candidate {:?} has loglik {} above the optimum {}", s.zeroed, ll, dp.loglik));
        }
    }
    Ok(())
}

/// Oracle suite: `instances` random problems for each `d` in `2..=8`.
pub fn oracle_suite(seed: u64, instances: usize) -> SuiteReport {
    let dims: Vec<usize> = (2..=8).collect();
    run(Suite::Oracle, seed, instances * dims.len(), |i, rng| {
        let d = dims[i / instances.max(1)];
        let binary = i % 2 == 0;
        let tree = match random_tree(d, binary, rng) {
            Ok(t) => t,
            Err(e) => return (Value::Null, Err(e.to_string())),
        };
        let x = random_data(d, rng);
        let input = json!({ "tree": tree_json(&tree, None), "x": x });
        (input, check_oracle(&tree, &x).map(|_| None))
    })
}

/// KKT suite: the closed-form DDM MLE satisfies its optimality conditions.
pub fn kkt_suite(seed: u64, instances: usize) -> SuiteReport {
    run(Suite::Kkt, seed, instances, |i, rng| {
        let d = 2 + i % 5;
        let x = random_data(d, rng);
        let input = json!({ "x": x });
        let check = (|| {
            let m = ddm_mle(&x).map_err(|e| e.to_string())?;
            let report = verify_kkt(&m.p_hat, &x).map_err(|e| e.to_string())?;
            if !report.passed {
                return Err(format!(
                    "kkt failed: max gradient {}, max slackness {}",
                    report.max_gradient, report.max_slackness
                ));
            }
            let ll = log_likelihood(&m.k_hat, &x).map_err(|e| e.to_string())?;
            if !rel_close(ll, m.loglik, 1e-9) {
                return Err(format!("dense loglik {ll} vs closed form {}", m.loglik));
            }
            Ok(None)
        })();
        (input, check)
    })
}

/// Curvature check outcome for one instance.
#[derive(Debug, Clone, Serialize)]
pub struct CurvatureCheck {
    pub value: f64,
    pub scale: f64,
    pub finite_difference: f64,
    pub case: Option<CurvatureCase>,
}

/// Relative tolerance between the curvature formula and finite differences.
pub const FD_RTOL: f64 = 1e-5;
/// Minimum curvature relative to [`curvature_scale`].
pub const CURVATURE_FLOOR: f64 = 1e-10;

/// Ascent direction at an interior point and its curvature. When
/// `Σ⁻¹(2xxᵀ − Σ)Σ⁻¹` is negative definite every direction curves upward and
/// the root-child indicator is used.
pub fn curvature_probe(tree: &RootedTree, theta: &EdgeParams, x: &[f64]) -> Result<(DirectionMatrix, CurvatureCheck)> {
    let sigma = build_covariance(tree, theta);
    let b = curvature_matrix(&sigma, x)?;
    let all_negative = linalg::sym_eigenvalues(&b).iter().all(|&v| v < -1e-10);
    let (dir, case) = if all_negative {
        let mut c = vec![0.0; tree.num_nodes()];
        c[tree.root_child()] = 1.0;
        (DirectionMatrix::from_coeffs(tree, c), None)
    } else {
        let r = negative_curvature_direction(&b, tree)?;
        (r.direction, Some(r.case))
    };
    let value = second_directional_derivative(&sigma, &dir.matrix, x)?;
    let scale = curvature_scale(&sigma, &dir.matrix, x)?;
    let fd = finite_difference(&sigma, &dir.matrix, x)?;
    Ok((dir, CurvatureCheck { value, scale, finite_difference: fd, case }))
}

/// Central second difference of `t ↦ 2ℓ(Σ + tA) − 2ℓ(Σ)` at 0.
///
/// The increment is evaluated in whitened coordinates, W = L⁻¹AL⁻ᵀ with
/// Σ = LLᵀ, as −Σ log1p(tμᵢ) + Σ wᵢ² tμᵢ/(1 + tμᵢ). This avoids subtracting
/// two copies of ℓ(Σ), which loses most digits when the curvature is small
/// next to its own terms.
pub fn finite_difference(sigma: &DMatrix<f64>, a: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let l = linalg::cholesky(sigma)?.l();
    let li = l.clone().try_inverse().ok_or(Error::NotPositiveDefinite)?;
    let w = linalg::symmetrize(&(&li * a * li.transpose()));
    let (mu, q) = linalg::sym_eigen_desc(&w);
    let z = q.transpose() * (&li * DVector::from_column_slice(x));
    let mu_max = mu.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if mu_max == 0.0 {
        return Ok(0.0);
    }
    let h = 1e-2 / mu_max;
    let g = |t: f64| -> f64 {
        mu.iter().zip(z.iter()).map(|(&m, &zi)| -(t * m).ln_1p() + zi * zi * t * m / (1.0 + t * m)).sum()
    };
    // fourth-order stencil, g(0) = 0
    Ok((-g(2.0 * h) + 16.0 * g(h) + 16.0 * g(-h) - g(-2.0 * h)) / (12.0 * h * h))
}

/// Curvature suite: random trees with positive edge variances and random data.
pub fn curvature_suite(seed: u64, instances: usize) -> SuiteReport {
    run(Suite::Curvature, seed, instances, |i, rng| {
        let d = 2 + i % 5;
        let tree = match random_tree(d, i % 2 == 0, rng) {
            Ok(t) => t,
            Err(e) => return (Value::Null, Err(e.to_string())),
        };
        let theta: Vec<f64> =
            (0..tree.num_nodes()).map(|v| if v == 0 { 0.0 } else { rng.random_range(0.1..2.0) }).collect();
        let theta = EdgeParams { theta };
        let x = random_data(d, rng);
        let input = json!({ "tree": tree_json(&tree, Some(&theta)), "x": x });
        let check = (|| {
            let (_, c) = curvature_probe(&tree, &theta, &x).map_err(|e| e.to_string())?;
            if !(c.value > CURVATURE_FLOOR * c.scale) {
                return Err(format!("curvature {} not above {} x scale {}", c.value, CURVATURE_FLOOR, c.scale));
            }
            if !rel_close(c.value, c.finite_difference, FD_RTOL) {
                return Err(format!("curvature {} vs finite difference {}", c.value, c.finite_difference));
            }
            Ok(Some(match c.case {
                None => "negative-definite",
                Some(CurvatureCase::Canonical) => "canonical",
                Some(CurvatureCase::Generic) => "generic",
                Some(CurvatureCase::NearSingular) => "near-singular",
            }))
        })();
        (input, check)
    })
}

/// Relative tolerance for the Laplacian-first round trip, whose corner row
/// is recomputed from sums.
pub const LAPLACIAN_RTOL: f64 = 1e-12;

/// Round-trip suite: Laplacian embedding both ways, Newick and JSON trees.
pub fn roundtrip_suite(seed: u64, instances: usize) -> SuiteReport {
    run(Suite::Roundtrip, seed, instances, |i, rng| {
        let d = 2 + i % 5;
        let k = random_ddm(d, rng);
        let l = random_laplacian(d + 1, rng);
        let tree = match random_tree(d, i % 2 == 0, rng) {
            Ok(t) => t,
            Err(e) => return (Value::Null, Err(e.to_string())),
        };
        let theta: Vec<f64> =
            (0..tree.num_nodes()).map(|v| if v == 0 { 0.0 } else { rng.random_range(0.0..3.0) }).collect();
        let theta = EdgeParams { theta };
        let input = json!({ "k": to_rows(&k), "laplacian": to_rows(&l), "tree": tree_json(&tree, Some(&theta)) });
        let check = (|| {
            let back = laplacian_restrict(&laplacian_embed(&k).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            if back != k {
                return Err("restrict(embed(K)) differs from K".into());
            }
            let back = laplacian_embed(&laplacian_restrict(&l).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            if (&back - &l).amax() > LAPLACIAN_RTOL * linalg::max_abs(&l) {
                return Err(format!("embed(restrict(L)) off by {}", (&back - &l).amax()));
            }
            let nwk = to_newick(&tree, &theta);
            let (t2, th2) = parse_newick(&nwk).map_err(|e| format!("newick reparse: {e}"))?;
            if cluster_map(&t2, &th2) != cluster_map(&tree, &theta) {
                return Err(format!("newick round trip changed the tree: {nwk}"));
            }
            let js = serde_json::to_string(&TreeDoc::from_tree(&tree, Some(&theta))).map_err(|e| e.to_string())?;
            let (t3, th3) = parse_tree_json(&js).map_err(|e| format!("json reparse: {e}"))?;
            if t3.parents() != tree.parents() || th3 != theta {
                return Err("json round trip changed the tree".into());
            }
            Ok(None)
        })();
        (input, check)
    })
}

/// Matrix-tree suite: spanning-tree log-determinant against the dense one,
/// and the squared-distance form of the likelihood.
pub fn matrix_tree_suite(seed: u64, instances: usize) -> SuiteReport {
    run(Suite::MatrixTree, seed, instances, |i, rng| {
        let d = 1 + i % 5;
        let p = random_connected_weights(d + 1, rng);
        let x = random_data(d, rng);
        let input = json!({ "p": to_rows(&p), "x": x });
        let check = (|| {
            let tree_side = logdet_via_matrix_tree(&p).map_err(|e| e.to_string())?;
            let k = fiedler_inverse(&p);
            let dense = linalg::logdet_pd(&k).map_err(|e| e.to_string())?;
            if !rel_close(tree_side, dense, 1e-9) {
                return Err(format!("matrix-tree {tree_side} vs dense {dense}"));
            }
            let via_d = 0.5 * (tree_side - pair_inner(&p, &squared_distance(&x)));
            let ll = log_likelihood(&k, &x).map_err(|e| e.to_string())?;
            if !rel_close(via_d, ll, 1e-9) {
                return Err(format!("distance form {via_d} vs likelihood {ll}"));
            }
            Ok(None)
        })();
        (input, check)
    })
}

pub fn run_suite(suite: Suite, seed: u64, instances: usize) -> SuiteReport {
    match suite {
        Suite::Oracle => oracle_suite(seed, instances),
        Suite::Kkt => kkt_suite(seed, instances),
        Suite::Curvature => curvature_suite(seed, instances),
        Suite::Roundtrip => roundtrip_suite(seed, instances),
        Suite::MatrixTree => matrix_tree_suite(seed, instances),
    }
}
