//! Comparison estimators: UPGMA, neighbor joining, nonnegative least
//! squares on a fixed tree, and three shrinkage rules.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tree::{build_covariance, EdgeParams, NodeId, RootedTree};

#[derive(Debug, Clone)]
pub struct EstimatorOutput {
    pub covariance: DMatrix<f64>,
    pub tree: Option<(RootedTree, EdgeParams)>,
    /// Set by [`mxshrink`] when some divisor was raised to 1.
    pub clamped: bool,
    /// Solver diagnostics for [`least_squares`].
    pub solver: Option<NnlsReport>,
}

impl EstimatorOutput {
    fn from_tree(tree: RootedTree, theta: EdgeParams) -> Self {
        EstimatorOutput { covariance: build_covariance(&tree, &theta), tree: Some((tree, theta)), clamped: false, solver: None }
    }

    fn from_matrix(covariance: DMatrix<f64>) -> Self {
        EstimatorOutput { covariance, tree: None, clamped: false, solver: None }
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
    }
    Ok(())
}

/// Builds a binary tree from a merge list. Leaves are `1..=d`, merge `t`
/// creates node `d + 1 + t` above the two given nodes, and the last merge
/// hangs below the root.
pub(crate) fn tree_from_merges(d: usize, merges: &[(NodeId, NodeId)], theta_of: impl Fn(NodeId) -> f64) -> Result<(RootedTree, EdgeParams)> {
    let n = 2 * d;
    let mut parent = vec![None; n];
    for (t, &(a, b)) in merges.iter().enumerate() {
        let u = d + 1 + t;
        parent[a] = Some(u);
        parent[b] = Some(u);
    }
    parent[n - 1] = Some(0);
    let tree = RootedTree::from_parents(parent, (1..=d).collect())?;
    let theta = (0..n).map(|v| if v == 0 { 0.0 } else { theta_of(v) }).collect();
    let params = EdgeParams::new(&tree, theta)?;
    Ok((tree, params))
}

/// Average-linkage clustering on `|a − b|`. A merge at distance `δ` sits at
/// height `δ/2`; edge variances are height differences and the root edge is 0.
/// For one leaf the variance is `x₁²`.
pub fn upgma(x: &[f64]) -> Result<EstimatorOutput> {
    check_finite(x)?;
    let d = x.len();
    if d == 0 {
        return Err(Error::TooSmall { what: "data vector", min: 1, got: 0 });
    }
    if d == 1 {
        let tree = RootedTree::star(1)?;
        let theta = EdgeParams::new(&tree, vec![0.0, x[0] * x[0]])?;
        return Ok(EstimatorOutput::from_tree(tree, theta));
    }
    // active clusters: (node id, size), pairwise distance matrix indexed by position
    let mut active: Vec<(NodeId, usize)> = (1..=d).map(|v| (v, 1)).collect();
    let mut dist: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (x[i] - x[j]).abs()).collect()).collect();
    let mut height = vec![0.0; 2 * d];
    let mut merges = Vec::with_capacity(d - 1);
    while active.len() > 1 {
        let r = active.len();
        let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
        for i in 0..r {
            for j in (i + 1)..r {
                if dist[i][j] < best {
                    best = dist[i][j];
                    bi = i;
                    bj = j;
                }
            }
        }
        let (a, na) = active[bi];
        let (b, nb) = active[bj];
        let u = d + 1 + merges.len();
        merges.push((a, b));
        height[u] = best / 2.0;
        let merged: Vec<f64> = (0..r)
            .map(|k| (na as f64 * dist[bi][k] + nb as f64 * dist[bj][k]) / (na + nb) as f64)
            .collect();
        // replace bi with the merge, drop bj
        active[bi] = (u, na + nb);
        for k in 0..r {
            dist[bi][k] = merged[k];
            dist[k][bi] = merged[k];
        }
        dist[bi][bi] = 0.0;
        active.remove(bj);
        dist.remove(bj);
        for row in dist.iter_mut() {
            row.remove(bj);
        }
    }
    let root_child = 2 * d - 1;
    let mut up = vec![0; 2 * d];
    for (t, &(a, b)) in merges.iter().enumerate() {
        up[a] = d + 1 + t;
        up[b] = d + 1 + t;
    }
    let (tree, theta) = tree_from_merges(d, &merges, |v| {
        if v == root_child {
            0.0
        } else {
            (height[up[v]] - height[v]).max(0.0)
        }
    })?;
    Ok(EstimatorOutput::from_tree(tree, theta))
}

/// Neighbor joining with `m(A, B)` the smallest squared difference between
/// members. Joins minimize `(r − 2) m(A, B) − Σₖ m(A, Xₖ) − Σₖ m(B, Xₖ)`;
/// branch lengths use the usual split, clamped at 0. The final pair splits
/// its distance equally below a node with zero variance under the root.
pub fn neighbor_joining(x: &[f64]) -> Result<EstimatorOutput> {
    check_finite(x)?;
    let d = x.len();
    if d < 2 {
        return Err(Error::TooSmall { what: "data vector", min: 2, got: d });
    }
    let mut active: Vec<NodeId> = (1..=d).collect();
    let mut m: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| (x[i] - x[j]).powi(2)).collect()).collect();
    let mut theta = vec![0.0; 2 * d];
    let mut merges = Vec::with_capacity(d - 1);
    while active.len() > 2 {
        let r = active.len();
        let sums: Vec<f64> = (0..r).map(|i| m[i].iter().sum()).collect();
        let (mut bi, mut bj, mut best) = (0, 1, f64::INFINITY);
        for i in 0..r {
            for j in (i + 1)..r {
                let q = (r as f64 - 2.0) * m[i][j] - sums[i] - sums[j];
                if q < best {
                    best = q;
                    bi = i;
                    bj = j;
                }
            }
        }
        let dij = m[bi][bj];
        let li = 0.5 * dij + (sums[bi] - sums[bj]) / (2.0 * (r as f64 - 2.0));
        let lj = dij - li;
        let (a, b) = (active[bi], active[bj]);
        theta[a] = li.max(0.0);
        theta[b] = lj.max(0.0);
        let u = d + 1 + merges.len();
        merges.push((a, b));
        let merged: Vec<f64> = (0..r).map(|k| m[bi][k].min(m[bj][k])).collect();
        active[bi] = u;
        for k in 0..r {
            m[bi][k] = merged[k];
            m[k][bi] = merged[k];
        }
        m[bi][bi] = 0.0;
        active.remove(bj);
        m.remove(bj);
        for row in m.iter_mut() {
            row.remove(bj);
        }
    }
    let (a, b) = (active[0], active[1]);
    let half = 0.5 * m[0][1];
    theta[a] = half;
    theta[b] = half;
    merges.push((a, b));
    let (tree, params) = tree_from_merges(d, &merges, |v| theta[v])?;
    Ok(EstimatorOutput::from_tree(tree, params))
}

#[derive(Debug, Clone, Serialize)]
pub struct NnlsReport {
    pub iterations: usize,
    pub kkt_residual: f64,
}

pub const NNLS_TOL: f64 = 1e-8;
pub const NNLS_MAX_ITER: usize = 100_000;

/// `max_i |min(θᵢ, ∇ᵢ)|` for `½θᵀGθ − bᵀθ`, relative to `max(1, ‖b‖∞)`.
fn kkt_residual(g: &DMatrix<f64>, b: &DVector<f64>, th: &DVector<f64>) -> f64 {
    let grad = g * th - b;
    let scale = b.amax().max(1.0);
    th.iter().zip(grad.iter()).map(|(t, gr)| t.min(*gr).abs()).fold(0.0, f64::max) / scale
}

/// Minimizes `½θᵀGθ − bᵀθ` over `θ ≥ 0` by accelerated projected gradient
/// with restarts, finished by active-set iterations from the detected support.
pub fn nnls_gram(g: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, NnlsReport)> {
    let n = b.len();
    let lmax = linalg::operator_norm_sym(g);
    if n == 0 || lmax == 0.0 {
        return Ok((DVector::zeros(n), NnlsReport { iterations: 0, kkt_residual: 0.0 }));
    }
    let step = 1.0 / lmax;
    let obj = |t: &DVector<f64>| 0.5 * t.dot(&(g * t)) - b.dot(t);
    let mut th = DVector::zeros(n);
    let mut y = th.clone();
    let mut tk = 1.0_f64;
    let mut f_prev = obj(&th);
    let mut residual = kkt_residual(g, b, &th);
    let mut it = 0;
    while it < NNLS_MAX_ITER && residual > NNLS_TOL {
        it += 1;
        if it % 10 == 0 {
            if let Some(p) = polish(g, b, &th) {
                let r = kkt_residual(g, b, &p);
                if r <= NNLS_TOL {
                    th = p;
                    residual = r;
                    break;
                }
            }
        }
        let grad = g * &y - b;
        let next = (&y - step * grad).map(|v| v.max(0.0));
        let f_next = obj(&next);
        if f_next > f_prev && tk > 1.0 {
            // restart momentum; a plain projected step from `th` follows
            tk = 1.0;
            y = th.clone();
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * tk * tk).sqrt());
        y = &next + ((tk - 1.0) / tn) * (&next - &th);
        tk = tn;
        th = next;
        f_prev = f_next;
        residual = kkt_residual(g, b, &th);
    }
    if residual > NNLS_TOL {
        return Err(Error::NonConvergence { iterations: it, residual });
    }
    Ok((th, NnlsReport { iterations: it, kkt_residual: residual }))
}

/// Lawson–Hanson active-set iterations started from the support of `th`.
fn polish(g: &DMatrix<f64>, b: &DVector<f64>, th: &DVector<f64>) -> Option<DVector<f64>> {
    let n = th.len();
    let tol = 1e-13 * b.amax().max(1.0);
    let mut in_p: Vec<bool> = th.iter().map(|&t| t > 0.0).collect();
    let mut x = DVector::zeros(n);
    let solve = |in_p: &[bool]| -> Option<DVector<f64>> {
        let idx: Vec<usize> = (0..n).filter(|&i| in_p[i]).collect();
        let mut out = DVector::zeros(n);
        if idx.is_empty() {
            return Some(out);
        }
        let k = idx.len();
        let gs = DMatrix::from_fn(k, k, |i, j| g[(idx[i], idx[j])]);
        let bs = DVector::from_fn(k, |i, _| b[idx[i]]);
        let sol = gs.cholesky()?.solve(&bs);
        for (i, &v) in idx.iter().enumerate() {
            out[v] = sol[i];
        }
        Some(out)
    };
    for _ in 0..(10 * n + 10) {
        // inner loop: move toward the support solution while staying feasible
        loop {
            let s = solve(&in_p)?;
            let blocking: Vec<usize> = (0..n).filter(|&i| in_p[i] && s[i] <= 0.0).collect();
            if blocking.is_empty() {
                x = s;
                break;
            }
            let alpha = blocking.iter().map(|&i| x[i] / (x[i] - s[i])).fold(f64::INFINITY, f64::min);
            x = &x + alpha * (&s - &x);
            for i in 0..n {
                if in_p[i] && x[i] <= tol {
                    in_p[i] = false;
                    x[i] = 0.0;
                }
            }
        }
        let w = b - g * &x;
        let next = (0..n).filter(|&i| !in_p[i] && w[i] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        match next {
            Some(j) => in_p[j] = true,
            None => return Some(x),
        }
    }
    None
}

/// Gram matrix `Gᵢⱼ = |de(i) ∩ de(j)|²` and target `bᵢ = (Σ_{de(i)} x)²` of
/// the map `θ ↦ Σ_θ` against `xxᵀ`, over non-root nodes.
pub fn ls_system(tree: &RootedTree, x: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = tree.num_nodes();
    let size: Vec<f64> = (0..n).map(|v| tree.subtree_slots(v).len() as f64).collect();
    let mut anc = vec![vec![false; n]; n];
    for &v in tree.preorder() {
        if let Some(p) = tree.parent(v) {
            let row = anc[p].clone();
            anc[v] = row;
        }
        anc[v][v] = true;
    }
    let m = n - 1;
    let g = DMatrix::from_fn(m, m, |i, j| {
        let (a, b) = (i + 1, j + 1);
        if anc[a][b] {
            size[a] * size[a]
        } else if anc[b][a] {
            size[b] * size[b]
        } else {
            0.0
        }
    });
    let b = DVector::from_fn(m, |i, _| {
        let s: f64 = tree.subtree_slots(i + 1).iter().map(|&k| x[k]).sum();
        s * s
    });
    (g, b)
}

/// `‖Σ_θ − xxᵀ‖²_F`.
pub fn ls_objective(tree: &RootedTree, theta: &EdgeParams, x: &[f64]) -> f64 {
    let xv = DVector::from_column_slice(x);
    linalg::frobenius_sq(&(build_covariance(tree, theta) - &xv * xv.transpose()))
}

/// Nonnegative least-squares fit of `Σ_θ` to `xxᵀ` on a fixed tree.
pub fn least_squares(tree: &RootedTree, x: &[f64]) -> Result<EstimatorOutput> {
    check_finite(x)?;
    if x.len() != tree.num_leaves() {
        return Err(Error::DimensionMismatch { expected: tree.num_leaves(), got: x.len() });
    }
    let (g, b) = ls_system(tree, x);
    let (th, report) = nnls_gram(&g, &b)?;
    let theta = EdgeParams { theta: std::iter::once(0.0).chain(th.iter().copied()).collect() };
    let mut out = EstimatorOutput::from_tree(tree.clone(), theta);
    out.solver = Some(report);
    Ok(out)
}

pub fn one_third_shrink(theta: &EdgeParams) -> EdgeParams {
    EdgeParams { theta: theta.theta.iter().map(|t| t / 3.0).collect() }
}

/// Divisor handling in [`mxshrink`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MxMode {
    /// `max(1 + d − 2i, 1)`.
    #[default]
    Clamped,
    /// `1 + d − 2i` as is; fails on a zero divisor.
    Literal,
}

/// Eigenvalue shrinkage `λᵢ / (1 + d − 2i)` with eigenvalues in decreasing
/// order (`i` from 1).
pub fn mxshrink(sigma: &DMatrix<f64>, mode: MxMode) -> Result<EstimatorOutput> {
    if !sigma.is_square() {
        return Err(Error::NotSymmetric);
    }
    if !linalg::is_symmetric(sigma, 1e-10) {
        return Err(Error::NotSymmetric);
    }
    let d = sigma.nrows();
    let (vals, vecs) = linalg::sym_eigen_desc(&linalg::symmetrize(sigma));
    let mut clamped = false;
    let mut shrunk = Vec::with_capacity(d);
    for (i0, &lam) in vals.iter().enumerate() {
        let i = i0 as i64 + 1;
        let raw = 1 + d as i64 - 2 * i;
        let div = match mode {
            MxMode::Clamped => {
                if raw < 1 {
                    clamped = true;
                }
                raw.max(1)
            }
            MxMode::Literal => {
                if raw == 0 {
                    return Err(Error::ZeroDivisor { index: i as usize });
                }
                raw
            }
        };
        shrunk.push(lam / div as f64);
    }
    let dm = DMatrix::from_diagonal(&DVector::from_vec(shrunk));
    let cov = linalg::symmetrize(&(&vecs * dm * vecs.transpose()));
    let mut out = EstimatorOutput::from_matrix(cov);
    out.clamped = clamped;
    Ok(out)
}

/// `δ₁ I + δ₂ Σ̂` with `μ = tr(Σ*)/d`, `α² = ‖Σ* − μI‖²_F`,
/// `δ₁ = β²μ/(α² + β²)`, `δ₂ = α²/(α² + β²)`. Returns `Σ*` when
/// `α² = β² = 0`.
pub fn linear_shrink(sigma_hat: &DMatrix<f64>, sigma_star: &DMatrix<f64>, beta_sq: f64) -> Result<EstimatorOutput> {
    if sigma_hat.shape() != sigma_star.shape() || !sigma_star.is_square() {
        return Err(Error::DimensionMismatch { expected: sigma_star.nrows(), got: sigma_hat.nrows() });
    }
    if !(beta_sq >= 0.0) || !beta_sq.is_finite() {
        return Err(Error::InvalidParams(format!("beta squared must be finite and nonnegative, got {beta_sq}")));
    }
    let d = sigma_star.nrows();
    let mu = sigma_star.trace() / d as f64;
    let alpha_sq = linalg::frobenius_sq(&(sigma_star - DMatrix::identity(d, d) * mu));
    let denom = alpha_sq + beta_sq;
    if denom == 0.0 {
        return Ok(EstimatorOutput::from_matrix(sigma_star.clone()));
    }
    let d1 = beta_sq * mu / denom;
    let d2 = alpha_sq / denom;
    Ok(EstimatorOutput::from_matrix(DMatrix::identity(d, d) * d1 + sigma_hat * d2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn root_to_leaf_sums(tree: &RootedTree, theta: &EdgeParams) -> Vec<f64> {
        tree.leaves()
            .iter()
            .map(|&l| {
                let mut s = 0.0;
                let mut v = l;
                while v != 0 {
                    s += theta.theta[v];
                    v = tree.parent(v).unwrap();
                }
                s
            })
            .collect()
    }

    #[test]
    fn upgma_hand_example() {
        let out = upgma(&[1.0, 2.0, 10.0]).unwrap();
        let (t, th) = out.tree.unwrap();
        // first merge {1, 2} at height 0.5, then with {10} at 4.25
        assert_eq!(t.parent(1), t.parent(2));
        let first = t.parent(1).unwrap();
        assert_eq!(th.theta[1], 0.5);
        assert_eq!(th.theta[first], 4.25 - 0.5);
        assert_eq!(th.theta[3], 4.25);
        assert_eq!(th.theta[t.root_child()], 0.0);
        for s in root_to_leaf_sums(&t, &th) {
            assert!((s - 4.25).abs() < 1e-12);
        }
    }

    #[test]
    fn upgma_small_cases() {
        let (t, th) = upgma(&[3.0, -1.0]).unwrap().tree.unwrap();
        assert_eq!(root_to_leaf_sums(&t, &th), vec![2.0, 2.0]);
        let (_, th) = upgma(&[3.0]).unwrap().tree.unwrap();
        assert_eq!(th.theta, vec![0.0, 9.0]);
    }

    #[test]
    fn nj_examples() {
        let (t, th) = neighbor_joining(&[4.0, 1.0]).unwrap().tree.unwrap();
        assert_eq!(th.theta[1], 4.5);
        assert_eq!(th.theta[2], 4.5);
        assert_eq!(th.theta[t.root_child()], 0.0);
        // all three criteria tie at -146, the first pair wins
        let (t, _) = neighbor_joining(&[1.0, 2.0, 10.0]).unwrap().tree.unwrap();
        assert_eq!(t.parent(1), t.parent(2));
        assert!(t.validate().is_ok());
        assert!(matches!(neighbor_joining(&[1.0]), Err(Error::TooSmall { .. })));
    }

    #[test]
    fn ls_examples() {
        let t1 = RootedTree::star(1).unwrap();
        let out = least_squares(&t1, &[-3.0]).unwrap();
        assert!((out.tree.unwrap().1.theta[1] - 9.0).abs() < 1e-9);
        let t2 = RootedTree::star(2).unwrap();
        let out = least_squares(&t2, &[1.0, 1.0]).unwrap();
        let th = out.tree.as_ref().unwrap().1.clone();
        assert!((th.theta[3] - 1.0).abs() < 1e-8);
        assert!(th.theta[1].abs() < 1e-8 && th.theta[2].abs() < 1e-8);
        assert!(ls_objective(&t2, &th, &[1.0, 1.0]) < 1e-12);
    }

    #[test]
    fn ots_examples() {
        let th = EdgeParams { theta: vec![0.0, 3.0, 6.0] };
        assert_eq!(one_third_shrink(&th).theta, vec![0.0, 1.0, 2.0]);
        assert_eq!(one_third_shrink(&EdgeParams { theta: vec![0.0; 3] }).theta, vec![0.0; 3]);
    }

    #[test]
    fn mxshrink_examples() {
        let d2 = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let out = mxshrink(&d2, MxMode::Clamped).unwrap();
        assert!((out.covariance - &d2).amax() < 1e-12);
        assert!(out.clamped);
        let d4 = DMatrix::from_diagonal(&DVector::from_vec(vec![8.0, 4.0, 2.0, 1.0]));
        let out = mxshrink(&d4, MxMode::Clamped).unwrap();
        let expect = DMatrix::from_diagonal(&DVector::from_vec(vec![8.0 / 3.0, 4.0, 2.0, 1.0]));
        assert!((out.covariance - expect).amax() < 1e-12);
        let d3 = DMatrix::identity(3, 3);
        assert_eq!(mxshrink(&d3, MxMode::Literal).unwrap_err(), Error::ZeroDivisor { index: 2 });
        let lit = mxshrink(&d4, MxMode::Literal).unwrap();
        assert!(linalg::sym_eigenvalues(&lit.covariance)[0] < 0.0);
    }

    #[test]
    fn linear_shrink_examples() {
        let i3 = DMatrix::identity(3, 3);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 1.0, 2.0]));
        assert!((linear_shrink(&s, &i3, 0.7).unwrap().covariance - &i3).amax() < 1e-15);
        let star = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let hat = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.5]));
        assert_eq!(linear_shrink(&hat, &star, 0.0).unwrap().covariance, hat);
        let out = linear_shrink(&DMatrix::identity(2, 2), &star, 2.0).unwrap();
        assert!((out.covariance - DMatrix::identity(2, 2)).amax() < 1e-15);
        assert_eq!(linear_shrink(&hat, &i3.view((0, 0), (2, 2)).into_owned(), 0.0).unwrap().covariance, DMatrix::identity(2, 2));
    }
}
