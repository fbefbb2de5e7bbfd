//! Random ground truths, one-sample draws and the Frobenius risk harness.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddm::{ddm_mle, ddm_mle_tree};
use crate::error::{Error, Result};
use crate::estimators::{self, tree_from_merges, MxMode};
use crate::linalg;
use crate::mle::mle;
use crate::numfmt::{format_sig, CSV_DIGITS};
use crate::tree::{build_covariance, EdgeParams, NodeId, RootedTree};

/// Uniform on `(0, 1]`.
fn unit_open_closed<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    1.0 - rng.random::<f64>()
}

/// Random binary ultrametric tree. Merge topology picks a uniform pair of
/// clusters at each step; the `d − 1` merge heights and the root height are
/// sorted uniforms on `(0, 1]`.
pub fn random_ultrametric_tree<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<(RootedTree, EdgeParams)> {
    if d < 2 {
        return Err(Error::TooSmall { what: "leaf count", min: 2, got: d });
    }
    let mut active: Vec<NodeId> = (1..=d).collect();
    let mut merges = Vec::with_capacity(d - 1);
    while active.len() > 1 {
        let pick = sample(rng, active.len(), 2);
        let (i, j) = (pick.index(0).min(pick.index(1)), pick.index(0).max(pick.index(1)));
        let u = d + 1 + merges.len();
        merges.push((active[i], active[j]));
        active.remove(j);
        active[i] = u;
    }
    let mut heights: Vec<f64> = (0..d).map(|_| unit_open_closed(rng)).collect();
    heights.sort_by(f64::total_cmp);
    let n = 2 * d;
    let mut h = vec![0.0; n];
    let mut up = vec![0; n];
    for (t, &(a, b)) in merges.iter().enumerate() {
        h[d + 1 + t] = heights[t];
        up[a] = d + 1 + t;
        up[b] = d + 1 + t;
    }
    let root_height = heights[d - 1];
    tree_from_merges(d, &merges, |v| if v == n - 1 { root_height - h[v] } else { h[up[v]] - h[v] })
}

/// Random topology with `d` leaves for testing: clusters of two (binary) or
/// two to four (multifurcating) are merged until one remains.
pub fn random_tree<R: Rng + ?Sized>(d: usize, binary: bool, rng: &mut R) -> Result<RootedTree> {
    if d == 0 {
        return Err(Error::TooSmall { what: "leaf count", min: 1, got: 0 });
    }
    if d == 1 {
        return RootedTree::star(1);
    }
    let mut parent: Vec<Option<NodeId>> = vec![None; d + 1];
    let mut active: Vec<NodeId> = (1..=d).collect();
    while active.len() > 1 {
        let k = if binary { 2 } else { rng.random_range(2..=active.len().min(4)) };
        let mut pick: Vec<usize> = sample(rng, active.len(), k).into_vec();
        pick.sort_unstable();
        let u = parent.len();
        parent.push(None);
        for &i in &pick {
            parent[active[i]] = Some(u);
        }
        for &i in pick.iter().rev().take(k - 1) {
            active.remove(i);
        }
        active[pick[0]] = u;
    }
    parent[active[0]] = Some(0);
    RootedTree::from_parents(parent, (1..=d).collect())
}

/// Scales `θ` so that the largest eigenvalue of `Σ_θ` equals `target`.
pub fn normalize_operator_norm(tree: &RootedTree, theta: &EdgeParams, target: f64) -> Result<EdgeParams> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::InvalidParams(format!("target norm must be positive, got {target}")));
    }
    let lam = linalg::operator_norm_sym(&build_covariance(tree, theta));
    if lam == 0.0 {
        return Err(Error::ZeroCovariance);
    }
    Ok(theta.scaled(target / lam))
}

/// One draw of the leaves: each node adds an independent `N(0, θᵥ)` increment
/// to its parent's value.
pub fn sample_bmtm<R: Rng + ?Sized>(tree: &RootedTree, theta: &EdgeParams, rng: &mut R) -> Vec<f64> {
    let mut w = vec![0.0; tree.num_nodes()];
    for &v in tree.preorder().iter().skip(1) {
        let z: f64 = rng.sample(StandardNormal);
        w[v] = w[tree.parent(v).unwrap()] + theta.theta[v].sqrt() * z;
    }
    tree.leaves().iter().map(|&l| w[l]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "bmtm-mle")]
    BmtmMle,
    #[serde(rename = "ddm-mle")]
    DdmMle,
    #[serde(rename = "upgma")]
    Upgma,
    #[serde(rename = "nj")]
    Nj,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "ots")]
    Ots,
    #[serde(rename = "mxshrink")]
    Mxshrink,
    #[serde(rename = "linear-shrink")]
    LinearShrink,
    /// Returns the ground truth; a zero-risk reference.
    #[serde(rename = "truth")]
    Truth,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 9] = [
        EstimatorKind::BmtmMle,
        EstimatorKind::DdmMle,
        EstimatorKind::Upgma,
        EstimatorKind::Nj,
        EstimatorKind::Ls,
        EstimatorKind::Ots,
        EstimatorKind::Mxshrink,
        EstimatorKind::LinearShrink,
        EstimatorKind::Truth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::BmtmMle => "bmtm-mle",
            EstimatorKind::DdmMle => "ddm-mle",
            EstimatorKind::Upgma => "upgma",
            EstimatorKind::Nj => "nj",
            EstimatorKind::Ls => "ls",
            EstimatorKind::Ots => "ots",
            EstimatorKind::Mxshrink => "mxshrink",
            EstimatorKind::LinearShrink => "linear-shrink",
            EstimatorKind::Truth => "truth",
        }
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| Error::UnknownEstimator(s.to_string()))
    }
}

fn default_beta_sq_replicates() -> usize {
    100
}
fn default_inner_replicates() -> usize {
    50
}
fn default_target_norm() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub d_values: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorKind>,
    /// Draws used to estimate `β²` for linear shrinkage.
    #[serde(default = "default_beta_sq_replicates")]
    pub beta_sq_replicates: usize,
    /// Draws per ground truth for bias and variance; 0 skips them.
    #[serde(default = "default_inner_replicates")]
    pub inner_replicates: usize,
    #[serde(default = "default_target_norm")]
    pub target_norm: f64,
    #[serde(default)]
    pub mx_literal: bool,
}

impl ExperimentConfig {
    pub fn new(d_values: Vec<usize>, trials: usize, seed: u64, estimators: Vec<EstimatorKind>) -> Self {
        ExperimentConfig {
            d_values,
            trials,
            seed,
            estimators,
            beta_sq_replicates: default_beta_sq_replicates(),
            inner_replicates: default_inner_replicates(),
            target_norm: default_target_norm(),
            mx_literal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.d_values.is_empty() || self.estimators.is_empty() {
            return Err(Error::InvalidConfig("need at least one d value and one estimator".into()));
        }
        if let Some(&d) = self.d_values.iter().find(|&&d| d < 2) {
            return Err(Error::InvalidConfig(format!("d must be at least 2, got {d}")));
        }
        if self.estimators.contains(&EstimatorKind::LinearShrink) && self.beta_sq_replicates == 0 {
            return Err(Error::InvalidConfig("linear-shrink needs beta_sq_replicates >= 1".into()));
        }
        if !(self.target_norm > 0.0) || !self.target_norm.is_finite() {
            return Err(Error::InvalidConfig(format!("target_norm must be positive, got {}", self.target_norm)));
        }
        Ok(())
    }
}

/// Generator for trial `trial` at leaf count `d`.
pub fn trial_rng(seed: u64, d: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((d as u64) << 32) ^ trial as u64);
    rng
}

/// Ground truth seen by the estimators.
pub struct Truth<'a> {
    pub tree: &'a RootedTree,
    pub sigma: &'a DMatrix<f64>,
    pub beta_sq: f64,
    pub mx_mode: MxMode,
}

fn mle_cov(tree: &RootedTree, x: &[f64]) -> Result<(DMatrix<f64>, EdgeParams)> {
    let r = mle(tree, x)?;
    Ok((build_covariance(tree, &r.theta), r.theta))
}

/// Covariance estimate of `kind` from the sample `x`.
pub fn estimate(kind: EstimatorKind, truth: &Truth<'_>, x: &[f64]) -> Result<DMatrix<f64>> {
    Ok(match kind {
        EstimatorKind::BmtmMle => mle_cov(truth.tree, x)?.0,
        EstimatorKind::DdmMle => {
            let (t, th) = ddm_mle_tree(x)?;
            build_covariance(&t, &th)
        }
        EstimatorKind::Upgma => estimators::upgma(x)?.covariance,
        EstimatorKind::Nj => estimators::neighbor_joining(x)?.covariance,
        EstimatorKind::Ls => estimators::least_squares(truth.tree, x)?.covariance,
        EstimatorKind::Ots => {
            let (_, th) = mle_cov(truth.tree, x)?;
            build_covariance(truth.tree, &estimators::one_third_shrink(&th))
        }
        EstimatorKind::Mxshrink => estimators::mxshrink(&mle_cov(truth.tree, x)?.0, truth.mx_mode)?.covariance,
        EstimatorKind::LinearShrink => {
            estimators::linear_shrink(&mle_cov(truth.tree, x)?.0, truth.sigma, truth.beta_sq)?.covariance
        }
        EstimatorKind::Truth => truth.sigma.clone(),
    })
}

/// Monte Carlo estimate of `E‖Σ_MLE − Σ*‖²_F`.
pub fn estimate_beta_sq<R: Rng + ?Sized>(
    tree: &RootedTree,
    theta: &EdgeParams,
    sigma: &DMatrix<f64>,
    replicates: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    for _ in 0..replicates {
        let x = sample_bmtm(tree, theta, rng);
        total += linalg::frobenius_sq(&(mle_cov(tree, &x)?.0 - sigma));
    }
    Ok(total / replicates as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Risk,
    Bias,
    Variance,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Risk => "risk",
            Metric::Bias => "bias",
            Metric::Variance => "variance",
        }
    }
}

/// Per-estimator metrics of one trial.
#[derive(Debug, Clone)]
pub struct TrialMetrics {
    pub risk: Result<f64>,
    pub bias_variance: Option<Result<(f64, f64)>>,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub d: usize,
    pub trial: usize,
    pub metrics: Vec<TrialMetrics>,
    /// `(ℓ(DDM MLE), ℓ(BMTM MLE))` on the single sample.
    pub logliks: Option<(f64, f64)>,
}

/// Bias `‖mean(Σ̂) − Σ*‖²` and variance `mean ‖Σ̂ − mean(Σ̂)‖²`.
pub fn bias_variance(estimates: &[DMatrix<f64>], sigma: &DMatrix<f64>) -> (f64, f64) {
    let r = estimates.len() as f64;
    let mut mean = DMatrix::zeros(sigma.nrows(), sigma.ncols());
    for e in estimates {
        mean += e;
    }
    mean /= r;
    let bias = linalg::frobenius_sq(&(&mean - sigma));
    let var = estimates.iter().map(|e| linalg::frobenius_sq(&(e - &mean))).sum::<f64>() / r;
    (bias, var)
}

/// One ground truth: draw, normalize, sample, score every estimator.
pub fn run_trial(config: &ExperimentConfig, d: usize, trial: usize) -> Result<TrialOutcome> {
    let mut rng = trial_rng(config.seed, d, trial);
    let (tree, raw) = random_ultrametric_tree(d, &mut rng)?;
    let theta = normalize_operator_norm(&tree, &raw, config.target_norm)?;
    let sigma = build_covariance(&tree, &theta);
    let x = sample_bmtm(&tree, &theta, &mut rng);
    let inner: Vec<Vec<f64>> = (0..config.inner_replicates).map(|_| sample_bmtm(&tree, &theta, &mut rng)).collect();
    let beta_sq = if config.estimators.contains(&EstimatorKind::LinearShrink) {
        estimate_beta_sq(&tree, &theta, &sigma, config.beta_sq_replicates, &mut rng)
    } else {
        Ok(0.0)
    };
    let mx_mode = if config.mx_literal { MxMode::Literal } else { MxMode::Clamped };
    let metrics = config
        .estimators
        .iter()
        .map(|&kind| {
            let beta = match (&beta_sq, kind) {
                (Err(e), EstimatorKind::LinearShrink) => {
                    return TrialMetrics { risk: Err(e.clone()), bias_variance: None };
                }
                (Ok(b), _) => *b,
                (Err(_), _) => 0.0,
            };
            let truth = Truth { tree: &tree, sigma: &sigma, beta_sq: beta, mx_mode };
            let risk = estimate(kind, &truth, &x).map(|s| linalg::frobenius_sq(&(s - &sigma)));
            let bias_variance = (config.inner_replicates > 0).then(|| {
                inner
                    .iter()
                    .map(|xi| estimate(kind, &truth, xi))
                    .collect::<Result<Vec<_>>>()
                    .map(|es| bias_variance(&es, &sigma))
            });
            TrialMetrics { risk, bias_variance }
        })
        .collect();
    let logliks = match (ddm_mle(&x), mle(&tree, &x)) {
        (Ok(a), Ok(b)) => Some((a.loglik, b.loglik)),
        _ => None,
    };
    Ok(TrialOutcome { d, trial, metrics, logliks })
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskRow {
    pub d: usize,
    pub estimator: EstimatorKind,
    pub metric: Metric,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
    /// Trials that produced a value.
    pub trials: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RiskTable {
    pub seed: u64,
    pub rows: Vec<RiskRow>,
    /// Trials where the DDM MLE log-likelihood fell below the BMTM MLE's.
    pub containment_violations: usize,
    /// First error message per (d, estimator), for diagnosis.
    pub error_messages: Vec<String>,
}

impl RiskTable {
    pub fn get(&self, d: usize, estimator: EstimatorKind, metric: Metric) -> Option<&RiskRow> {
        self.rows.iter().find(|r| r.d == d && r.estimator == estimator && r.metric == metric)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("d,estimator,metric,mean,p10,p90,trials,seed,errors\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.d,
                r.estimator.name(),
                r.metric.name(),
                format_sig(r.mean, CSV_DIGITS),
                format_sig(r.p10, CSV_DIGITS),
                format_sig(r.p90, CSV_DIGITS),
                r.trials,
                self.seed,
                r.errors
            );
        }
        s
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(d: usize, estimator: EstimatorKind, metric: Metric, values: &[f64], errors: usize) -> RiskRow {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / values.len() as f64 };
    RiskRow {
        d,
        estimator,
        metric,
        mean,
        p10: quantile_sorted(&sorted, 0.1),
        p90: quantile_sorted(&sorted, 0.9),
        trials: values.len(),
        errors,
    }
}

/// Aggregates outcomes in `(d, trial)` order, so the table does not depend on
/// the order in which trials ran.
pub fn aggregate(config: &ExperimentConfig, mut outcomes: Vec<TrialOutcome>) -> RiskTable {
    outcomes.sort_by_key(|o| (o.d, o.trial));
    let mut rows = Vec::new();
    let mut error_messages = Vec::new();
    for &d in &config.d_values {
        let of_d: Vec<&TrialOutcome> = outcomes.iter().filter(|o| o.d == d).collect();
        for (e, &kind) in config.estimators.iter().enumerate() {
            let mut first_error: Option<String> = None;
            let mut collect = |get: &dyn Fn(&TrialMetrics) -> Option<Result<f64>>| {
                let mut vals = Vec::new();
                let mut errs = 0;
                for o in &of_d {
                    match get(&o.metrics[e]) {
                        Some(Ok(v)) => vals.push(v),
                        Some(Err(err)) => {
                            errs += 1;
                            first_error.get_or_insert_with(|| err.to_string());
                        }
                        None => {}
                    }
                }
                (vals, errs)
            };
            let (risk, risk_err) = collect(&|m| Some(m.risk.clone()));
            rows.push(summarize(d, kind, Metric::Risk, &risk, risk_err));
            if config.inner_replicates > 0 {
                let (bias, bias_err) =
                    collect(&|m| m.bias_variance.as_ref().map(|r| r.as_ref().map(|bv| bv.0).map_err(Clone::clone)));
                let (var, var_err) =
                    collect(&|m| m.bias_variance.as_ref().map(|r| r.as_ref().map(|bv| bv.1).map_err(Clone::clone)));
                rows.push(summarize(d, kind, Metric::Bias, &bias, bias_err));
                rows.push(summarize(d, kind, Metric::Variance, &var, var_err));
            }
            if let Some(msg) = first_error {
                error_messages.push(format!("d={d} {}: {msg}", kind.name()));
            }
        }
    }
    let containment_violations = outcomes
        .iter()
        .filter_map(|o| o.logliks)
        .filter(|&(ddm, bmtm)| ddm < bmtm - 1e-9 * bmtm.abs().max(1.0))
        .count();
    RiskTable { seed: config.seed, rows, containment_violations, error_messages }
}

/// Runs every `(d, trial)` pair on the current rayon pool.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RiskTable> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> =
        config.d_values.iter().flat_map(|&d| (0..config.trials).map(move |t| (d, t))).collect();
    let outcomes = jobs.par_iter().map(|&(d, t)| run_trial(config, d, t)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate(config, outcomes))
}
