//! Contrast model MLE via rerooting, and the unbounded likelihood of the
//! positive latent Gaussian tree model on data with a repeated value.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::likelihood::log_likelihood_cov;
use crate::mle::{mle, MleResult};
use crate::tree::{build_covariance, reroot_at_leaf, EdgeParams, RootedTree, Rerooted};

#[derive(Debug, Clone)]
pub struct ContrastResult {
    /// `yᵢ = xᵢ − x_ref` over the other leaves, in data order.
    pub y: Vec<f64>,
    pub rerooted: Rerooted,
    pub mle: MleResult,
}

/// Data contrasts against the leaf at `ref_slot`.
pub fn contrasts(x: &[f64], ref_slot: usize) -> Vec<f64> {
    x.iter().enumerate().filter(|&(i, _)| i != ref_slot).map(|(_, v)| v - x[ref_slot]).collect()
}

/// Covariance of the contrasts `Xᵢ − X_ref` under `Σ`.
pub fn contrast_covariance(sigma: &DMatrix<f64>, ref_slot: usize) -> DMatrix<f64> {
    let d = sigma.nrows();
    let idx: Vec<usize> = (0..d).filter(|&i| i != ref_slot).collect();
    let r = ref_slot;
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
        let (i, j) = (idx[a], idx[b]);
        sigma[(i, j)] - sigma[(i, r)] - sigma[(r, j)] + sigma[(r, r)]
    })
}

/// MLE of the contrast model: the BMTM MLE of the contrasts on the tree
/// rerooted at the reference leaf.
pub fn contrast_mle(tree: &RootedTree, x: &[f64], ref_slot: usize) -> Result<ContrastResult> {
    if x.len() != tree.num_leaves() {
        return Err(Error::DimensionMismatch { expected: tree.num_leaves(), got: x.len() });
    }
    if x.len() < 2 {
        return Err(Error::TooSmall { what: "leaf count for contrasts", min: 2, got: x.len() });
    }
    if ref_slot >= x.len() {
        return Err(Error::UnknownLeaf(ref_slot));
    }
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
    }
    let y = contrasts(x, ref_slot);
    for i in 0..y.len() {
        if y[i] == 0.0 {
            return Err(Error::DegenerateContrast(format!("contrast {} is zero", i + 1)));
        }
        for j in (i + 1)..y.len() {
            if y[i] == y[j] {
                return Err(Error::DegenerateContrast(format!("contrasts {} and {} coincide", i + 1, j + 1)));
            }
        }
    }
    let rerooted = reroot_at_leaf(tree, ref_slot)?;
    let mle = mle(&rerooted.tree, &y)?;
    Ok(ContrastResult { y, rerooted, mle })
}

/// Edge variances used by the witness: zero above leaf `a`, `eps` above leaf
/// `b`, and the fully observed values elsewhere (1 where those vanish).
pub fn witness_params(tree: &RootedTree, x: &[f64], a: usize, b: usize, eps: f64) -> EdgeParams {
    let or_one = |v: f64| if v == 0.0 { 1.0 } else { v };
    let mut theta = vec![0.0; tree.num_nodes()];
    theta[tree.root_child()] = or_one(x[a] * x[a]);
    for k in 0..x.len() {
        let node = tree.leaf_node(k);
        theta[node] = if k == a {
            0.0
        } else if k == b {
            eps
        } else {
            or_one((x[a] - x[k]).powi(2))
        };
    }
    EdgeParams { theta }
}

/// Log-likelihoods on the star tree along a decreasing sequence of `eps`.
/// With a repeated value `x_a = x_b` these grow like `−½ log eps`.
pub fn plgtm_divergence_witness(x: &[f64], epsilons: &[f64]) -> Result<Vec<WitnessPoint>> {
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
    }
    let mut pair = None;
    'outer: for i in 0..x.len() {
        for j in (i + 1)..x.len() {
            if x[i] == x[j] {
                pair = Some((i, j));
                break 'outer;
            }
        }
    }
    let (a, b) = pair.ok_or(Error::NoDuplicate)?;
    for w in epsilons.windows(2) {
        if !(w[1] < w[0]) {
            return Err(Error::InvalidParams("epsilons must be strictly decreasing".into()));
        }
    }
    if let Some(&e) = epsilons.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
        return Err(Error::InvalidParams(format!("epsilon must be positive and finite, got {e}")));
    }
    let tree = RootedTree::star(x.len())?;
    epsilons
        .iter()
        .map(|&eps| {
            let theta = witness_params(&tree, x, a, b, eps);
            let loglik = log_likelihood_cov(&build_covariance(&tree, &theta), x)?;
            Ok(WitnessPoint { epsilon: eps, loglik })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WitnessPoint {
    pub epsilon: f64,
    pub loglik: f64,
}
