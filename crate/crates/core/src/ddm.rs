//! Closed-form one-sample MLE over diagonally dominant M-matrices.
//!
//! With `x₀ = 0` appended, sort the augmented data and join neighbours in a
//! path. The optimal edge weights are `1/(xᵢ − xⱼ)²` on that path and zero
//! elsewhere.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::{self, check_weights, fiedler_inverse, squared_distance, MATRIX_TREE_MAX_NODES};
use crate::linalg;
use crate::tree::{EdgeParams, NodeId, RootedTree};

/// Rejects empty, non-finite, zero or repeated data.
pub fn validate_data(x: &[f64]) -> Result<()> {
    if x.is_empty() {
        return Err(Error::TooSmall { what: "data vector", min: 1, got: 0 });
    }
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        if *v == 0.0 {
            return Err(Error::ZeroValue { index: i });
        }
    }
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    for w in idx.windows(2) {
        if x[w[0]] == x[w[1]] {
            return Err(Error::DuplicateValue { first: w[0].min(w[1]), second: w[0].max(w[1]) });
        }
    }
    Ok(())
}

/// Augmented indices `0..=d` ordered by value, with the path edges between
/// neighbours.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SortedPathTree {
    pub order: Vec<usize>,
    pub edges: Vec<(usize, usize)>,
}

pub fn sorted_path_tree(x: &[f64]) -> Result<SortedPathTree> {
    validate_data(x)?;
    let aug = |i: usize| if i == 0 { 0.0 } else { x[i - 1] };
    let mut order: Vec<usize> = (0..=x.len()).collect();
    order.sort_by(|&a, &b| aug(a).total_cmp(&aug(b)));
    let edges = order.windows(2).map(|w| (w[0], w[1])).collect();
    Ok(SortedPathTree { order, edges })
}

#[derive(Debug, Clone, Serialize)]
pub struct DdmMle {
    pub path: SortedPathTree,
    #[serde(serialize_with = "crate::serde_matrix::rows")]
    pub p_hat: DMatrix<f64>,
    #[serde(serialize_with = "crate::serde_matrix::rows")]
    pub k_hat: DMatrix<f64>,
    pub loglik: f64,
}

pub fn ddm_mle(x: &[f64]) -> Result<DdmMle> {
    let path = sorted_path_tree(x)?;
    let aug = |i: usize| if i == 0 { 0.0 } else { x[i - 1] };
    let d = x.len();
    let mut p = DMatrix::zeros(d + 1, d + 1);
    for &(a, b) in &path.edges {
        let t = aug(a) - aug(b);
        let w = 1.0 / (t * t);
        p[(a, b)] = w;
        p[(b, a)] = w;
    }
    let k = fiedler_inverse(&p);
    // each path edge contributes -½ log D - ½
    let loglik = -0.5 * path.edges.iter().map(|&(a, b)| ((aug(a) - aug(b)) * (aug(a) - aug(b))).ln()).sum::<f64>()
        - 0.5 * d as f64;
    Ok(DdmMle { path, p_hat: p, k_hat: k, loglik })
}

/// How the gradient was evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum GradientMethod {
    /// Sum of reciprocal weights along the unique support path.
    TreePath,
    /// Ratio of spanning-tree sums (small matrices only).
    SpanningTrees,
    /// Effective resistance through the grounded Laplacian.
    Resistance,
}

#[derive(Debug, Clone, Serialize)]
pub struct KktPair {
    pub k: usize,
    pub l: usize,
    pub weight: f64,
    pub gradient: f64,
    pub slackness: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KktReport {
    pub pairs: Vec<KktPair>,
    pub nonnegative: bool,
    pub gradient_nonpositive: bool,
    pub complementary_slackness: bool,
    pub passed: bool,
    pub method: GradientMethod,
    pub max_gradient: f64,
    pub max_slackness: f64,
}

pub const KKT_TOL: f64 = 1e-9;

fn support_adjacency(p: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = p.nrows();
    (0..n).map(|i| (0..n).filter(|&j| j != i && p[(i, j)] > 0.0).collect()).collect()
}

fn reachable(adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut q = VecDeque::from([0]);
    seen[0] = true;
    while let Some(v) = q.pop_front() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                q.push_back(w);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Partial derivatives of `log Σ_T Π P − ⟨⟨P, D⟩⟩` for every pair, using the
/// path form when the support is a tree and the requested general form
/// otherwise.
pub fn kkt_gradients(p: &DMatrix<f64>, x: &[f64], force: Option<GradientMethod>) -> Result<(DMatrix<f64>, GradientMethod)> {
    check_weights(p)?;
    let n = p.nrows();
    if x.len() + 1 != n {
        return Err(Error::DimensionMismatch { expected: n - 1, got: x.len() });
    }
    let adj = support_adjacency(p);
    if !reachable(&adj) {
        return Err(Error::DisconnectedSupport);
    }
    let n_edges: usize = adj.iter().map(|a| a.len()).sum::<usize>() / 2;
    let method = match force {
        Some(m) => m,
        None if n_edges == n - 1 => GradientMethod::TreePath,
        None if n <= MATRIX_TREE_MAX_NODES => GradientMethod::SpanningTrees,
        None => GradientMethod::Resistance,
    };
    let dist = squared_distance(x);
    let mut grad = DMatrix::zeros(n, n);
    match method {
        GradientMethod::TreePath => {
            if n_edges != n - 1 {
                return Err(Error::InvalidWeights("support is not a tree".into()));
            }
            for s in 0..n {
                // resistance from s along the tree
                let mut r = vec![f64::NAN; n];
                r[s] = 0.0;
                let mut q = VecDeque::from([s]);
                while let Some(v) = q.pop_front() {
                    for &w in &adj[v] {
                        if r[w].is_nan() {
                            r[w] = r[v] + 1.0 / p[(v, w)];
                            q.push_back(w);
                        }
                    }
                }
                for t in 0..n {
                    if t != s {
                        grad[(s, t)] = r[t] - dist[(s, t)];
                    }
                }
            }
        }
        GradientMethod::SpanningTrees => {
            for k in 0..n {
                for l in (k + 1)..n {
                    let g = likelihood::spanning_tree_ratio(p, k, l)? - dist[(k, l)];
                    grad[(k, l)] = g;
                    grad[(l, k)] = g;
                }
            }
        }
        GradientMethod::Resistance => {
            let kmat = fiedler_inverse(p);
            let kinv = linalg::inverse_pd(&kmat)?;
            for k in 0..n {
                for l in (k + 1)..n {
                    let mut e = DVector::zeros(n - 1);
                    if k > 0 {
                        e[k - 1] += 1.0;
                    }
                    e[l - 1] -= 1.0;
                    let g = e.dot(&(&kinv * &e)) - dist[(k, l)];
                    grad[(k, l)] = g;
                    grad[(l, k)] = g;
                }
            }
        }
    }
    Ok((grad, method))
}

/// Checks nonnegativity, nonpositive gradient and complementary slackness.
/// Gradient tolerances scale with `max(1, D_kl)`.
pub fn verify_kkt(p: &DMatrix<f64>, x: &[f64]) -> Result<KktReport> {
    verify_kkt_with(p, x, None)
}

pub fn verify_kkt_with(p: &DMatrix<f64>, x: &[f64], force: Option<GradientMethod>) -> Result<KktReport> {
    let (grad, method) = kkt_gradients(p, x, force)?;
    let dist = squared_distance(x);
    let n = p.nrows();
    let mut pairs = Vec::new();
    let (mut nonneg, mut gneg, mut slack) = (true, true, true);
    let (mut max_g, mut max_s) = (f64::NEG_INFINITY, 0.0_f64);
    for k in 0..n {
        for l in (k + 1)..n {
            let w = p[(k, l)];
            let g = grad[(k, l)];
            let scale = dist[(k, l)].max(1.0);
            let s = g * w;
            nonneg &= w >= 0.0;
            gneg &= g <= KKT_TOL * scale;
            slack &= s.abs() <= KKT_TOL * scale;
            max_g = max_g.max(g / scale);
            max_s = max_s.max(s.abs() / scale);
            pairs.push(KktPair { k, l, weight: w, gradient: g, slackness: s });
        }
    }
    Ok(KktReport {
        pairs,
        nonnegative: nonneg,
        gradient_nonpositive: gneg,
        complementary_slackness: slack,
        passed: nonneg && gneg && slack,
        method,
        max_gradient: max_g,
        max_slackness: max_s,
    })
}

/// The DDM MLE realized as a BMTM. The root feeds a hub standing for the
/// value 0 when data of both signs exist. Walking away from 0 along each sign,
/// an interior value becomes a latent node with a zero-variance pendant leaf
/// and the outermost value becomes a leaf. Edge variances are squared gaps.
pub fn ddm_mle_tree(x: &[f64]) -> Result<(RootedTree, EdgeParams)> {
    validate_data(x)?;
    let d = x.len();
    let mut neg: Vec<usize> = (0..d).filter(|&i| x[i] < 0.0).collect();
    let mut pos: Vec<usize> = (0..d).filter(|&i| x[i] > 0.0).collect();
    neg.sort_by(|&a, &b| x[b].total_cmp(&x[a]));
    pos.sort_by(|&a, &b| x[a].total_cmp(&x[b]));

    let mut parent: Vec<Option<NodeId>> = vec![None; d + 1];
    let mut theta = vec![0.0; d + 1];
    let mut next = d + 1;
    let mut new_latent = |parent: &mut Vec<Option<NodeId>>, theta: &mut Vec<f64>, up: NodeId, t: f64| {
        let id = next;
        next += 1;
        parent.push(Some(up));
        theta.push(t);
        id
    };
    let top = if !neg.is_empty() && !pos.is_empty() {
        new_latent(&mut parent, &mut theta, 0, 0.0)
    } else {
        0
    };
    for chain in [&neg, &pos] {
        let mut up = top;
        let mut prev = 0.0;
        for (pos_in_chain, &i) in chain.iter().enumerate() {
            let gap = (x[i] - prev) * (x[i] - prev);
            let leaf = i + 1;
            if pos_in_chain + 1 == chain.len() {
                parent[leaf] = Some(up);
                theta[leaf] = gap;
            } else {
                let v = new_latent(&mut parent, &mut theta, up, gap);
                parent[leaf] = Some(v);
                theta[leaf] = 0.0;
                up = v;
            }
            prev = x[i];
        }
    }
    let tree = RootedTree::from_parents(parent, (1..=d).collect())?;
    let params = EdgeParams::new(&tree, theta)?;
    Ok((tree, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::parse_newick;
    use crate::format::cluster_map;
    use crate::tree::build_covariance;

    const X: [f64; 4] = [-5.0, -2.0, 4.0, 8.0];

    #[test]
    fn path_examples() {
        assert_eq!(sorted_path_tree(&X).unwrap().order, vec![1, 2, 0, 3, 4]);
        assert_eq!(sorted_path_tree(&[3.0]).unwrap().edges, vec![(0, 1)]);
        assert_eq!(sorted_path_tree(&[1.0, 1.0]), Err(Error::DuplicateValue { first: 0, second: 1 }));
        assert_eq!(sorted_path_tree(&[1.0, 0.0]), Err(Error::ZeroValue { index: 1 }));
    }

    #[test]
    fn worked_example() {
        let r = ddm_mle(&X).unwrap();
        assert_eq!(r.p_hat[(0, 2)], 0.25);
        assert_eq!(r.p_hat[(1, 2)], 1.0 / 9.0);
        assert_eq!(r.k_hat[(1, 1)], 13.0 / 36.0);
        assert_eq!(r.k_hat[(2, 3)], -1.0 / 16.0);
        assert!(likelihood::is_ddm(&r.k_hat));
        let direct = likelihood::log_likelihood(&r.k_hat, &X).unwrap();
        assert!((direct - r.loglik).abs() < 1e-12);
    }

    #[test]
    fn univariate() {
        let r = ddm_mle(&[-3.0]).unwrap();
        assert_eq!(r.k_hat[(0, 0)], 1.0 / 9.0);
        let (t, th) = ddm_mle_tree(&[3.0]).unwrap();
        assert_eq!(t.num_nodes(), 2);
        assert_eq!(th.theta, vec![0.0, 9.0]);
    }

    #[test]
    fn kkt_on_worked_example() {
        let r = ddm_mle(&X).unwrap();
        let rep = verify_kkt(&r.p_hat, &X).unwrap();
        assert!(rep.passed);
        assert_eq!(rep.method, GradientMethod::TreePath);
        for pr in &rep.pairs {
            if pr.weight > 0.0 {
                assert_eq!(pr.gradient, 0.0);
            }
        }
        let full = verify_kkt_with(&r.p_hat, &X, Some(GradientMethod::SpanningTrees)).unwrap();
        let res = verify_kkt_with(&r.p_hat, &X, Some(GradientMethod::Resistance)).unwrap();
        for ((a, b), c) in rep.pairs.iter().zip(&full.pairs).zip(&res.pairs) {
            assert!((a.gradient - b.gradient).abs() < 1e-9);
            assert!((a.gradient - c.gradient).abs() < 1e-9);
        }
        // (0, 1) is not adjacent on the path: strictly negative
        let g01 = rep.pairs.iter().find(|p| (p.k, p.l) == (0, 1)).unwrap().gradient;
        assert!(g01 < 0.0);
    }

    #[test]
    fn kkt_detects_violation() {
        let r = ddm_mle(&X).unwrap();
        let mut p = r.p_hat.clone();
        let d01 = 25.0;
        p[(0, 1)] = 2.0 / d01;
        p[(1, 0)] = 2.0 / d01;
        let rep = verify_kkt(&p, &X).unwrap();
        assert!(!rep.complementary_slackness);
        assert!(!rep.passed);
        let mut q = DMatrix::zeros(5, 5);
        q[(0, 1)] = 1.0;
        q[(1, 0)] = 1.0;
        assert!(matches!(verify_kkt(&q, &X), Err(Error::DisconnectedSupport)));
    }

    #[test]
    fn gstar_matches_figure() {
        let (t, th) = ddm_mle_tree(&X).unwrap();
        let (ft, fth) = parse_newick("((1:9.0,2:0.0):4.0,(3:0.0,4:16.0):16.0)0:0.0;").unwrap();
        assert_eq!(cluster_map(&t, &th), cluster_map(&ft, &fth));
        let sigma = build_covariance(&t, &th);
        let k = linalg::inverse_pd(&sigma).unwrap();
        let r = ddm_mle(&X).unwrap();
        assert!((k - r.k_hat).amax() < 1e-12);
    }
}
