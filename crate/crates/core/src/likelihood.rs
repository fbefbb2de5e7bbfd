//! Gaussian log-likelihood, the Fiedler and Laplacian reparametrizations,
//! the spanning-tree determinant and second-order directional probes.
//!
//! Log-likelihoods drop the additive `-(d/2) log(2π)` constant throughout.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tree::{build_covariance, EdgeParams, RootedTree};

/// Tolerance on off-diagonal signs and row sums in [`is_ddm`].
pub const DDM_TOL: f64 = 1e-12;
/// Largest node count (`d + 1`) for exhaustive spanning-tree enumeration.
pub const MATRIX_TREE_MAX_NODES: usize = 8;

fn check_data(k: &DMatrix<f64>, x: &[f64]) -> Result<()> {
    if k.nrows() != x.len() || !k.is_square() {
        return Err(Error::DimensionMismatch { expected: k.nrows(), got: x.len() });
    }
    Ok(())
}

/// `½ log det K − ½ xᵀ K x`.
pub fn log_likelihood(k: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    check_data(k, x)?;
    if !linalg::is_symmetric(k, 1e-12) {
        return Err(Error::NotSymmetric);
    }
    let logdet = linalg::logdet_pd(k)?;
    let xv = DVector::from_column_slice(x);
    Ok(0.5 * logdet - 0.5 * xv.dot(&(k * &xv)))
}

/// Log-likelihood of a covariance matrix, `ℓ(Σ⁻¹)`.
pub fn log_likelihood_cov(sigma: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    check_data(sigma, x)?;
    let ch = linalg::cholesky(sigma).map_err(|_| Error::SingularCovariance)?;
    let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let xv = DVector::from_column_slice(x);
    let sol = ch.solve(&xv);
    Ok(-0.5 * logdet - 0.5 * xv.dot(&sol))
}

/// Positive definite, nonpositive off-diagonal, nonnegative row sums.
pub fn is_ddm(k: &DMatrix<f64>) -> bool {
    if !k.is_square() || !linalg::is_symmetric(k, 1e-12) {
        return false;
    }
    let d = k.nrows();
    let scale = linalg::max_abs(k).max(f64::MIN_POSITIVE);
    for i in 0..d {
        let mut row = 0.0;
        for j in 0..d {
            row += k[(i, j)];
            if i != j && k[(i, j)] > DDM_TOL * scale {
                return false;
            }
        }
        if row < -DDM_TOL * scale {
            return false;
        }
    }
    linalg::is_positive_definite(k)
}

/// Hollow `(d+1)×(d+1)` matrix: `P₀ⱼ` is the `j`-th row sum of `K`, `Pᵢⱼ = −Kᵢⱼ`.
pub fn fiedler(k: &DMatrix<f64>) -> DMatrix<f64> {
    let d = k.nrows();
    let mut p = DMatrix::zeros(d + 1, d + 1);
    for j in 0..d {
        let s: f64 = k.column(j).sum();
        p[(0, j + 1)] = s;
        p[(j + 1, 0)] = s;
        for i in 0..d {
            if i != j {
                p[(i + 1, j + 1)] = -k[(i, j)];
            }
        }
    }
    p
}

/// `Kᵢᵢ = Σₖ Pᵢₖ` over `k = 0..d`, `Kᵢⱼ = −Pᵢⱼ`.
pub fn fiedler_inverse(p: &DMatrix<f64>) -> DMatrix<f64> {
    let d = p.nrows() - 1;
    let mut k = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            k[(i, j)] = if i == j {
                (0..=d).filter(|&m| m != i + 1).map(|m| p[(i + 1, m)]).sum()
            } else {
                -p[(i + 1, j + 1)]
            };
        }
    }
    k
}

/// Laplacian on `d + 1` nodes whose principal block on `1..d` is `K`.
pub fn laplacian_embed(k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !is_ddm(k) {
        return Err(Error::NotDdm);
    }
    let d = k.nrows();
    let mut l = DMatrix::zeros(d + 1, d + 1);
    l.view_mut((1, 1), (d, d)).copy_from(k);
    let mut total = 0.0;
    for i in 0..d {
        let s: f64 = k.row(i).sum();
        l[(0, i + 1)] = -s;
        l[(i + 1, 0)] = -s;
        total += s;
    }
    l[(0, 0)] = total;
    Ok(l)
}

/// Connected-graph Laplacian check: symmetric, nonpositive off-diagonal,
/// zero row sums, connected support.
pub fn check_laplacian(l: &DMatrix<f64>) -> Result<()> {
    if !l.is_square() || l.nrows() < 2 {
        return Err(Error::NotLaplacian("needs a square matrix of size at least 2".into()));
    }
    if !linalg::is_symmetric(l, 1e-12) {
        return Err(Error::NotLaplacian("not symmetric".into()));
    }
    let n = l.nrows();
    let scale = linalg::max_abs(l).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..n {
            if i != j && l[(i, j)] > 1e-12 * scale {
                return Err(Error::NotLaplacian(format!("positive off-diagonal entry ({i}, {j})")));
            }
        }
        if l.row(i).sum().abs() > 1e-10 * scale {
            return Err(Error::NotLaplacian(format!("row {i} does not sum to zero")));
        }
    }
    let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i != j && l[(i, j)] < 0.0).collect()).collect();
    if !connected(&adj) {
        return Err(Error::NotLaplacian("graph is disconnected".into()));
    }
    Ok(())
}

/// Deletes row and column 0 of a connected-graph Laplacian.
pub fn laplacian_restrict(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_laplacian(l)?;
    let n = l.nrows();
    Ok(l.view((1, 1), (n - 1, n - 1)).into_owned())
}

fn connected(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for w in 0..n {
            if adj[v][w] && !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// `D(x)ᵢⱼ = (xᵢ − xⱼ)²` on `0..d` with `x₀ = 0`.
pub fn squared_distance(x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let aug = |i: usize| if i == 0 { 0.0 } else { x[i - 1] };
    DMatrix::from_fn(d + 1, d + 1, |i, j| {
        let t = aug(i) - aug(j);
        t * t
    })
}

/// `Σ_{i<j} Pᵢⱼ Dᵢⱼ`.
pub fn pair_inner(p: &DMatrix<f64>, d: &DMatrix<f64>) -> f64 {
    let n = p.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            s += p[(i, j)] * d[(i, j)];
        }
    }
    s
}

/// Checks that `p` is square, symmetric, hollow and nonnegative.
pub fn check_weights(p: &DMatrix<f64>) -> Result<()> {
    if !p.is_square() || p.nrows() < 2 {
        return Err(Error::InvalidWeights("needs a square matrix of size at least 2".into()));
    }
    let n = p.nrows();
    for i in 0..n {
        if p[(i, i)] != 0.0 {
            return Err(Error::InvalidWeights(format!("nonzero diagonal entry {i}")));
        }
        for j in 0..n {
            if !p[(i, j)].is_finite() || p[(i, j)] < 0.0 {
                return Err(Error::InvalidWeights(format!("entry ({i}, {j}) is negative or not finite")));
            }
            if p[(i, j)] != p[(j, i)] {
                return Err(Error::InvalidWeights(format!("entry ({i}, {j}) breaks symmetry")));
            }
        }
    }
    Ok(())
}

/// Calls `f` with the edge list of every spanning tree of the complete graph
/// on `n` nodes, decoded from Prüfer sequences.
pub fn for_each_spanning_tree(n: usize, mut f: impl FnMut(&[(usize, usize)])) {
    if n < 2 {
        return;
    }
    if n == 2 {
        f(&[(0, 1)]);
        return;
    }
    let len = n - 2;
    let mut seq = vec![0usize; len];
    let mut edges = Vec::with_capacity(n - 1);
    let mut degree = vec![0usize; n];
    loop {
        edges.clear();
        degree.iter_mut().for_each(|v| *v = 1);
        for &s in &seq {
            degree[s] += 1;
        }
        for &s in &seq {
            let leaf = (0..n).find(|&v| degree[v] == 1).unwrap();
            edges.push((leaf, s));
            degree[leaf] -= 1;
            degree[s] -= 1;
        }
        let rest: Vec<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
        edges.push((rest[0], rest[1]));
        f(&edges);

        let mut pos = 0;
        loop {
            if pos == len {
                return;
            }
            seq[pos] += 1;
            if seq[pos] < n {
                break;
            }
            seq[pos] = 0;
            pos += 1;
        }
    }
}

/// Weighted spanning-tree sum `Σ_T Π_{e∈T} P_e` restricted to trees for
/// which `keep` holds.
fn spanning_tree_sum(p: &DMatrix<f64>, mut keep: impl FnMut(&[(usize, usize)]) -> bool) -> f64 {
    let mut total = 0.0;
    for_each_spanning_tree(p.nrows(), |edges| {
        if keep(edges) {
            total += edges.iter().map(|&(a, b)| p[(a, b)]).product::<f64>();
        }
    });
    total
}

/// `log Σ_T Π_{(k,j)∈T} Pₖⱼ` over spanning trees of the complete graph.
pub fn logdet_via_matrix_tree(p: &DMatrix<f64>) -> Result<f64> {
    check_weights(p)?;
    if p.nrows() > MATRIX_TREE_MAX_NODES {
        return Err(Error::TooLarge {
            what: "node count for spanning-tree enumeration",
            size: p.nrows(),
            limit: MATRIX_TREE_MAX_NODES,
        });
    }
    let total = spanning_tree_sum(p, |_| true);
    if total <= 0.0 {
        return Err(Error::ZeroTotal);
    }
    Ok(total.ln())
}

/// Share of spanning-tree weight carried by trees that use edge `(k, l)`,
/// divided by `P_kl`: the derivative of the log spanning-tree sum with
/// respect to `P_kl`. Exhaustive, so only for small matrices.
pub fn spanning_tree_ratio(p: &DMatrix<f64>, k: usize, l: usize) -> Result<f64> {
    check_weights(p)?;
    if p.nrows() > MATRIX_TREE_MAX_NODES {
        return Err(Error::TooLarge {
            what: "node count for spanning-tree enumeration",
            size: p.nrows(),
            limit: MATRIX_TREE_MAX_NODES,
        });
    }
    let total = spanning_tree_sum(p, |_| true);
    if total <= 0.0 {
        return Err(Error::ZeroTotal);
    }
    let mut with = 0.0;
    for_each_spanning_tree(p.nrows(), |edges| {
        if edges.iter().any(|&(a, b)| (a, b) == (k, l) || (a, b) == (l, k)) {
            with += edges
                .iter()
                .filter(|&&(a, b)| !((a, b) == (k, l) || (a, b) == (l, k)))
                .map(|&(a, b)| p[(a, b)])
                .product::<f64>();
        }
    });
    Ok(with / total)
}

/// Symmetric direction `A = Σᵢ cᵢ e_{de(i)} e_{de(i)}ᵀ` with its coefficients
/// indexed by node (root entry unused).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionMatrix {
    pub coeffs: Vec<f64>,
    #[serde(skip)]
    pub matrix: DMatrix<f64>,
}

impl DirectionMatrix {
    pub fn from_coeffs(tree: &RootedTree, coeffs: Vec<f64>) -> Self {
        let matrix = build_covariance(tree, &EdgeParams { theta: coeffs.clone() });
        DirectionMatrix { coeffs, matrix }
    }

    /// Rebuilds the matrix from the coefficients and compares entrywise.
    pub fn is_consistent(&self, tree: &RootedTree, tol: f64) -> bool {
        let m = build_covariance(tree, &EdgeParams { theta: self.coeffs.clone() });
        (m - &self.matrix).amax() <= tol * linalg::max_abs(&self.matrix).max(1.0)
    }
}

/// `−tr(A Σ⁻¹ (2xxᵀ − Σ) Σ⁻¹ A Σ⁻¹)`. This is the second derivative of
/// `t ↦ 2 ℓ((Σ + tA)⁻¹)` at `t = 0`.
pub fn second_directional_derivative(sigma: &DMatrix<f64>, a: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    check_data(sigma, x)?;
    let si = linalg::inverse_pd(sigma)?;
    let xv = DVector::from_column_slice(x);
    let b = 2.0 * &xv * xv.transpose() - sigma;
    let m = a * &si * b * &si * a * &si;
    Ok(-m.trace())
}

/// How [`negative_curvature_direction`] picked its direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CurvatureCase {
    /// A basis direction (the all-ones vector or a unit vector) lies in the
    /// negative eigenspace.
    Canonical,
    /// Generic construction through the inverse of `[u₁..u_{d−1}, 𝟙]`.
    Generic,
    /// Generic construction was ill-conditioned; fell back to the basis
    /// direction closest to the negative eigenspace.
    NearSingular,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvatureDirection {
    pub direction: DirectionMatrix,
    pub case: CurvatureCase,
}

const CANONICAL_TOL: f64 = 1e-10;
const COEFF_LIMIT: f64 = 1e12;

/// Finds `A = c₀𝟙𝟙ᵀ + Σ cᵢ eᵢeᵢᵀ` with every column of `A` inside the span of
/// the `d − 1` negative eigenvectors of `B`, so that `ABA ⪯ 0`. `c₀` sits on
/// the root's child and `cᵢ` on the leaf of data slot `i`.
pub fn negative_curvature_direction(b: &DMatrix<f64>, tree: &RootedTree) -> Result<CurvatureDirection> {
    let d = tree.num_leaves();
    if b.nrows() != d || !b.is_square() {
        return Err(Error::DimensionMismatch { expected: d, got: b.nrows() });
    }
    if d < 2 {
        return Err(Error::TooSmall { what: "leaf count", min: 2, got: d });
    }
    if !linalg::is_symmetric(b, 1e-10) {
        return Err(Error::NotSymmetric);
    }
    let (vals, vecs) = linalg::sym_eigen_desc(b);
    let found = vals.iter().filter(|&&v| v < -1e-10).count();
    if found != d - 1 {
        return Err(Error::SpectrumViolation { expected: d - 1, found });
    }
    // negative eigenvectors are the last d - 1 columns
    let u = vecs.columns(1, d - 1).into_owned();

    // squared distance of each unit basis direction from span(U); index 0 is 𝟙/√d
    let residual = |v: &DVector<f64>| {
        let proj = u.transpose() * v;
        (1.0 - proj.norm_squared()).max(0.0)
    };
    let ones = DVector::from_element(d, 1.0 / (d as f64).sqrt());
    let mut res = vec![residual(&ones)];
    for i in 0..d {
        let mut e = DVector::zeros(d);
        e[i] = 1.0;
        res.push(residual(&e));
    }
    let canonical = |i: usize| {
        let mut c = vec![0.0; tree.num_nodes()];
        if i == 0 {
            c[tree.root_child()] = 1.0;
        } else {
            c[tree.leaf_node(i - 1)] = 1.0;
        }
        DirectionMatrix::from_coeffs(tree, c)
    };
    let best = (0..=d).min_by(|&a, &b| res[a].total_cmp(&res[b])).unwrap();
    if res[best] < CANONICAL_TOL {
        return Ok(CurvatureDirection { direction: canonical(best), case: CurvatureCase::Canonical });
    }

    let mut c_mat = DMatrix::zeros(d, d);
    c_mat.columns_mut(0, d - 1).copy_from(&u);
    c_mat.set_column(d - 1, &DVector::from_element(d, 1.0));
    let inv = c_mat.clone().try_inverse();
    let coeffs = inv.and_then(|inv| {
        let r = inv.row(d - 1);
        let mut c = vec![0.0; tree.num_nodes()];
        c[tree.root_child()] = 1.0;
        for i in 0..d {
            let ci = 1.0 / r[i];
            if !ci.is_finite() || ci.abs() > COEFF_LIMIT {
                return None;
            }
            c[tree.leaf_node(i)] = -ci;
        }
        Some(c)
    });
    match coeffs {
        Some(c) => Ok(CurvatureDirection {
            direction: DirectionMatrix::from_coeffs(tree, c),
            case: CurvatureCase::Generic,
        }),
        None => Ok(CurvatureDirection { direction: canonical(best), case: CurvatureCase::NearSingular }),
    }
}

/// `Σ⁻¹ (2xxᵀ − Σ) Σ⁻¹`, the matrix whose negative eigenspace drives the
/// ascent direction at an interior point.
pub fn curvature_matrix(sigma: &DMatrix<f64>, x: &[f64]) -> Result<DMatrix<f64>> {
    check_data(sigma, x)?;
    let si = linalg::inverse_pd(sigma)?;
    let xv = DVector::from_column_slice(x);
    let b = 2.0 * &xv * xv.transpose() - sigma;
    Ok(linalg::symmetrize(&(&si * b * &si)))
}

/// Scale used to judge the sign of a curvature value.
pub fn curvature_scale(sigma: &DMatrix<f64>, a: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    let b = curvature_matrix(sigma, x)?;
    let si = linalg::inverse_pd(sigma)?;
    Ok(linalg::operator_norm_sym(&b) * (a * si * a).trace().abs())
}
