//! Exact one-sample BMTM MLE on a fixed tree.
//!
//! The optimum is fully observed: every node takes the value of the root or of
//! a leaf, and maximizing the likelihood amounts to minimizing
//! `Σ log|xᵢ − xⱼ|` over the edges left after contracting zero-variance edges.
//! `R(i, ℓ)` is the best contribution of the subtree at `i` (including the
//! edge above it) when the parent of `i` holds value `ℓ`.

use serde::Serialize;

use crate::ddm::validate_data;
use crate::error::{Error, Result};
use crate::likelihood::log_likelihood_cov;
use crate::tree::{
    build_covariance, contract_fully_observed, contract_set, enumerate_fully_observed, EdgeParams, NodeId,
    RootedTree, SparsityStructure,
};

/// Relative tolerance for treating two log-objectives as tied.
pub const TIE_RTOL: f64 = 1e-12;

pub(crate) fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_RTOL * a.abs().max(b.abs()).max(1.0)
}

/// Value at augmented index `v`: 0 for the root, `x[v - 1]` otherwise.
#[inline]
fn aug(x: &[f64], v: usize) -> f64 {
    if v == 0 {
        0.0
    } else {
        x[v - 1]
    }
}

#[inline]
fn log_gap(x: &[f64], a: usize, b: usize) -> f64 {
    (aug(x, a) - aug(x, b)).abs().ln()
}

#[derive(Debug, Clone, Serialize)]
pub struct MleResult {
    pub sparsity: SparsityStructure,
    pub theta: EdgeParams,
    /// Augmented value index held by every node (0 = root, `k + 1` = leaf slot `k`).
    pub values: Vec<usize>,
    /// `Π |xᵢ − xⱼ|` over contracted edges; may overflow for large `d`.
    pub objective: f64,
    pub objective_log: f64,
    /// `−d/2 − objective_log`, without the `2π` term.
    pub loglik: f64,
    /// Number of optimal sparsity structures.
    pub tie_count: u64,
}

/// Choice stored for `R(i, ℓ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    /// Node takes its parent's value; the edge above it is zero.
    Inherit,
    /// Node takes the value of a leaf below it (augmented index).
    Take(usize),
}

/// Memo of `R(i, ℓ)` with the chosen branch and the number of optimal
/// structures for every node and parent value.
#[derive(Debug, Clone)]
pub struct DpTable {
    pub r: Vec<Vec<f64>>,
    pub choice: Vec<Vec<Choice>>,
    pub count: Vec<Vec<u64>>,
}

fn check_inputs(tree: &RootedTree, x: &[f64]) -> Result<()> {
    if x.len() != tree.num_leaves() {
        return Err(Error::DimensionMismatch { expected: tree.num_leaves(), got: x.len() });
    }
    validate_data(x)
}

/// Fills the table bottom-up.
pub fn dp_table(tree: &RootedTree, x: &[f64]) -> Result<DpTable> {
    check_inputs(tree, x)?;
    let n = tree.num_nodes();
    let d = tree.num_leaves();
    let mut r = vec![Vec::new(); n];
    let mut choice = vec![Vec::new(); n];
    let mut count = vec![Vec::new(); n];
    let mut c = vec![0.0; d + 1];
    let mut cc = vec![1u64; d + 1];
    for &v in tree.preorder().iter().rev() {
        if v == 0 {
            continue;
        }
        if let Some(k) = tree.leaf_slot(v) {
            let own = k + 1;
            r[v] = (0..=d).map(|l| if l == own { 0.0 } else { log_gap(x, l, own) }).collect();
            choice[v] = (0..=d).map(|l| if l == own { Choice::Inherit } else { Choice::Take(own) }).collect();
            count[v] = vec![1; d + 1];
            continue;
        }
        c.iter_mut().for_each(|t| *t = 0.0);
        cc.iter_mut().for_each(|t| *t = 1);
        for &ch in tree.children(v) {
            for l in 0..=d {
                c[l] += r[ch][l];
                cc[l] = cc[l].saturating_mul(count[ch][l]);
            }
        }
        // candidate leaves sorted by value for the tie-break
        let mut cand: Vec<usize> = tree.subtree_slots(v).iter().map(|&k| k + 1).collect();
        cand.sort_by(|&a, &b| aug(x, a).total_cmp(&aug(x, b)));
        let mut rv = vec![0.0; d + 1];
        let mut chv = vec![Choice::Inherit; d + 1];
        let mut cnt = vec![0u64; d + 1];
        for l in 0..=d {
            if l > 0 && tree.contains_slot(v, l - 1) {
                rv[l] = c[l];
                chv[l] = Choice::Inherit;
                cnt[l] = cc[l];
                continue;
            }
            let mut best = c[l];
            let mut arg = Choice::Inherit;
            for &m in &cand {
                let val = log_gap(x, l, m) + c[m];
                if val < best && !tied(val, best) {
                    best = val;
                    arg = Choice::Take(m);
                }
            }
            let mut total = if tied(c[l], best) { cc[l] } else { 0 };
            for &m in &cand {
                if tied(log_gap(x, l, m) + c[m], best) {
                    total = total.saturating_add(cc[m]);
                }
            }
            rv[l] = best;
            chv[l] = arg;
            cnt[l] = total.max(1);
        }
        r[v] = rv;
        choice[v] = chv;
        count[v] = cnt;
    }
    Ok(DpTable { r, choice, count })
}

fn result_from_values(tree: &RootedTree, x: &[f64], values: Vec<usize>, tie_count: u64) -> MleResult {
    let n = tree.num_nodes();
    let d = tree.num_leaves();
    let mut zeroed = Vec::new();
    let mut theta = vec![0.0; n];
    let mut objective_log = 0.0;
    for v in 1..n {
        let p = tree.parent(v).unwrap();
        if values[v] == values[p] {
            zeroed.push(v);
        } else {
            let g = aug(x, values[v]) - aug(x, values[p]);
            theta[v] = g * g;
            objective_log += g.abs().ln();
        }
    }
    MleResult {
        sparsity: SparsityStructure { zeroed: zeroed.into_iter().collect() },
        theta: EdgeParams { theta },
        values,
        objective: objective_log.exp(),
        objective_log,
        loglik: -0.5 * d as f64 - objective_log,
        tie_count,
    }
}

/// Dynamic-programming MLE. Ties prefer the zero edge, then the smallest value.
pub fn mle(tree: &RootedTree, x: &[f64]) -> Result<MleResult> {
    let table = dp_table(tree, x)?;
    let n = tree.num_nodes();
    let mut values = vec![0usize; n];
    for &v in tree.preorder().iter().skip(1) {
        let l = values[tree.parent(v).unwrap()];
        values[v] = match table.choice[v][l] {
            Choice::Inherit => l,
            Choice::Take(m) => m,
        };
    }
    let rc = tree.root_child();
    let mut res = result_from_values(tree, x, values, table.count[rc][0]);
    // the backtracked objective and the table agree up to summation order
    debug_assert!(tied(res.objective_log, table.r[rc][0]) || (res.objective_log - table.r[rc][0]).abs() < 1e-9);
    res.objective_log = table.r[rc][0];
    res.objective = res.objective_log.exp();
    res.loglik = -0.5 * tree.num_leaves() as f64 - res.objective_log;
    Ok(res)
}

/// `log Π |xᵢ − xⱼ|` over the edges of the contraction onto the determined nodes.
pub fn objective_log(tree: &RootedTree, sparsity: &SparsityStructure, x: &[f64]) -> Result<f64> {
    check_inputs(tree, x)?;
    let c = contract_fully_observed(tree, sparsity)?;
    let val = |v: NodeId| if v == 0 { 0.0 } else { x[tree.leaf_slot(v).unwrap()] };
    Ok(c.edges.iter().map(|e| (val(e.upper) - val(e.lower)).abs().ln()).sum())
}

pub fn objective(tree: &RootedTree, sparsity: &SparsityStructure, x: &[f64]) -> Result<f64> {
    objective_log(tree, sparsity, x).map(f64::exp)
}

/// Value index of every node under a fully-observed structure.
pub fn values_of(tree: &RootedTree, sparsity: &SparsityStructure) -> Result<Vec<usize>> {
    let c = contract_set(tree, sparsity)?;
    if !c.is_over_determined(tree) {
        return Err(Error::NotFullyObserved);
    }
    Ok(c.rep.iter().map(|&r| tree.leaf_slot(r).map_or(0, |k| k + 1)).collect())
}

/// Exhaustive reference MLE over every fully-observed structure.
pub fn brute_force_mle(tree: &RootedTree, x: &[f64], cap: usize) -> Result<MleResult> {
    check_inputs(tree, x)?;
    let all = enumerate_fully_observed(tree, cap)?;
    let mut scored = Vec::with_capacity(all.len());
    for s in all {
        let obj = objective_log(tree, &s, x)?;
        scored.push((obj, s));
    }
    let best = scored.iter().map(|(o, _)| *o).fold(f64::INFINITY, f64::min);
    let winners: Vec<&SparsityStructure> = scored.iter().filter(|(o, _)| tied(*o, best)).map(|(_, s)| s).collect();
    let key = |s: &SparsityStructure| -> Result<Vec<(u8, f64)>> {
        let values = values_of(tree, s)?;
        Ok(tree
            .preorder()
            .iter()
            .skip(1)
            .map(|&v| (u8::from(!s.contains(v)), aug(x, values[v])))
            .collect())
    };
    let mut pick = winners[0];
    let mut pick_key = key(pick)?;
    for &w in &winners[1..] {
        let k = key(w)?;
        if k.partial_cmp(&pick_key) == Some(std::cmp::Ordering::Less) {
            pick = w;
            pick_key = k;
        }
    }
    let values = values_of(tree, pick)?;
    let mut res = result_from_values(tree, x, values, winners.len() as u64);
    res.objective_log = objective_log(tree, pick, x)?;
    res.objective = res.objective_log.exp();
    res.loglik = -0.5 * tree.num_leaves() as f64 - res.objective_log;
    Ok(res)
}

/// Dense log-likelihood of the fitted covariance, checked against the closed
/// form `−d/2 − Σ log|xᵢ − xⱼ|`.
pub fn loglik_of_result(tree: &RootedTree, result: &MleResult, x: &[f64]) -> Result<f64> {
    let sigma = build_covariance(tree, &result.theta);
    let dense = log_likelihood_cov(&sigma, x)?;
    let closed = result.loglik;
    if (dense - closed).abs() > 1e-9 * closed.abs().max(1.0) {
        return Err(Error::LikelihoodMismatch { dense, closed });
    }
    Ok(dense)
}
