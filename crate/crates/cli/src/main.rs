//! `bmtm`: one-sample tree-model estimation from the command line.
//!
//! Exit status is 0 on success, 2 on a usage error and 1 on a domain error.
//! Domain errors are reported as one JSON line `{"error": .., "message": ..}`
//! on standard error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bmtm_core::contrast::{contrast_mle, plgtm_divergence_witness};
use bmtm_core::ddm::{ddm_mle, verify_kkt};
use bmtm_core::estimators::{self, EstimatorOutput, MxMode};
use bmtm_core::format::{parse_tree_any, to_newick, TreeDoc};
use bmtm_core::mle::{mle, MleResult};
use bmtm_core::numfmt::{format_sig, to_json_string, CSV_DIGITS};
use bmtm_core::serde_matrix::to_rows;
use bmtm_core::simulate::{run_experiment, EstimatorKind, ExperimentConfig};
use bmtm_core::suites::{run_suite, Suite, SuiteReport};
use bmtm_core::tree::{build_covariance, EdgeParams, RootedTree};
use bmtm_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "bmtm", version, about = "One-sample MLE for Brownian motion tree models and DDM Gaussian models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact MLE on a fixed tree.
    Mle {
        #[command(flatten)]
        tree: TreeArg,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Closed-form MLE over diagonally dominant M-matrices.
    DdmMle {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Comparison estimators.
    Estimate {
        #[arg(long, value_enum)]
        method: Method,
        /// Tree for ls, ots and mxshrink.
        #[arg(long)]
        tree: Option<PathBuf>,
        /// Use the unclamped mxshrink divisors.
        #[arg(long)]
        mx_literal: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// MLE of the contrasts against a reference leaf.
    ContrastMle {
        #[command(flatten)]
        tree: TreeArg,
        /// Reference leaf, 1-based.
        #[arg(long = "ref", default_value_t = 1)]
        reference: usize,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Log-likelihoods along a shrinking edge for data with a repeated value.
    PlgtmWitness {
        /// Decreasing positive values.
        #[arg(long, value_delimiter = ',', default_value = "1,1e-1,1e-2,1e-3,1e-4,1e-5,1e-6")]
        epsilons: Vec<f64>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Frobenius risk, bias and variance on random ultrametric trees.
    Simulate {
        /// JSON experiment config; flags below are ignored when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "d", value_delimiter = ',', default_value = "4,8,16")]
        d_values: Vec<usize>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "bmtm-mle,ddm-mle,upgma,nj,ls,ots,mxshrink,linear-shrink")]
        estimators: Vec<String>,
        /// Draws per ground truth for bias and variance.
        #[arg(long, default_value_t = 50)]
        inner: usize,
        #[arg(long, default_value_t = 100)]
        beta_reps: usize,
        #[arg(long, default_value_t = 1.0)]
        target_norm: f64,
        #[arg(long)]
        mx_literal: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Randomized property suites.
    Verify {
        /// oracle, kkt, curvature, roundtrip, matrix-tree or all.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instances per suite (per leaf count for oracle).
        #[arg(long)]
        instances: Option<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(Args, Debug)]
struct TreeArg {
    /// Newick or JSON tree file.
    #[arg(long)]
    tree: PathBuf,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct DataArgs {
    /// File of numbers (comma or whitespace separated, or a JSON array).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated numbers.
    #[arg(long, allow_hyphen_values = true)]
    data_inline: Option<String>,
}

#[derive(Args, Debug)]
struct OutArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Method {
    Upgma,
    Nj,
    Ls,
    Ots,
    Mxshrink,
}

#[derive(Debug)]
struct Failure {
    kind: String,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: e.kind().to_string(), message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure { kind: "Io".into(), message: e.to_string() }
    }
}

fn fail(kind: &str, message: impl Into<String>) -> Failure {
    Failure { kind: kind.into(), message: message.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| fail("Io", format!("{}: {e}", path.display())))
}

fn parse_numbers(text: &str) -> CliResult<Vec<f64>> {
    let t = text.trim();
    if t.starts_with('[') {
        return serde_json::from_str(t).map_err(|e| Error::Parse { offset: e.column(), message: e.to_string() }.into());
    }
    let mut out = Vec::new();
    let mut offset = 0;
    for tok in text.split(|c: char| c == ',' || c.is_whitespace()) {
        if !tok.is_empty() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Parse { offset, message: format!("not a number: {tok:?}") })?;
            out.push(v);
        }
        offset += tok.len() + 1;
    }
    Ok(out)
}

fn load_data(args: &DataArgs) -> CliResult<Vec<f64>> {
    match (&args.data, &args.data_inline) {
        (Some(p), None) => parse_numbers(&read_file(p)?),
        (None, Some(s)) => parse_numbers(s),
        _ => unreachable!("clap enforces exactly one data source"),
    }
}

fn load_tree(path: &Path) -> CliResult<(RootedTree, EdgeParams)> {
    Ok(parse_tree_any(&read_file(path)?)?)
}

fn json_out<T: Serialize + ?Sized>(v: &T) -> CliResult<String> {
    let mut s = to_json_string(v, true).map_err(|e| fail("Io", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

fn csv_num(v: f64) -> String {
    format_sig(v, CSV_DIGITS)
}

fn matrix_csv(rows: &[Vec<f64>]) -> String {
    rows.iter().map(|r| r.iter().map(|&v| csv_num(v)).collect::<Vec<_>>().join(",") + "\n").collect()
}

fn tree_csv(tree: &RootedTree, theta: &EdgeParams, zeroed: Option<&MleResult>) -> String {
    let mut s = String::from("node,parent,theta,leaf_slot,zeroed\n");
    for v in 1..tree.num_nodes() {
        let slot = tree.leaf_slot(v).map(|k| (k + 1).to_string()).unwrap_or_default();
        let z = zeroed.map(|r| r.sparsity.contains(v)).unwrap_or(theta.theta[v] == 0.0);
        s.push_str(&format!("{v},{},{},{slot},{z}\n", tree.parent(v).unwrap(), csv_num(theta.theta[v])));
    }
    s
}

/// Writes through a temporary file in the target directory so a failed run
/// leaves no partial output.
fn emit(out: &OutArgs, text: &str) -> CliResult<()> {
    match &out.out {
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
        Some(path) => {
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
            tmp.write_all(text.as_bytes())?;
            tmp.as_file().sync_all()?;
            tmp.persist(path).map_err(|e| Failure::from(e.error))?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct MleOut<'a> {
    zeroed: Vec<usize>,
    theta: &'a [f64],
    values: &'a [usize],
    objective: f64,
    objective_log: f64,
    loglik: f64,
    tie_count: u64,
    newick: String,
}

fn mle_json<'a>(tree: &RootedTree, r: &'a MleResult) -> MleOut<'a> {
    MleOut {
        zeroed: r.sparsity.zeroed.iter().copied().collect(),
        theta: &r.theta.theta,
        values: &r.values,
        objective: r.objective,
        objective_log: r.objective_log,
        loglik: r.loglik,
        tie_count: r.tie_count,
        newick: to_newick(tree, &r.theta),
    }
}

fn tree_output(out: &EstimatorOutput) -> serde_json::Value {
    match &out.tree {
        Some((t, th)) => json!({ "newick": to_newick(t, th), "tree": TreeDoc::from_tree(t, Some(th)) }),
        None => serde_json::Value::Null,
    }
}

fn need_tree(tree: &Option<PathBuf>, method: &str) -> CliResult<(RootedTree, EdgeParams)> {
    match tree {
        Some(p) => load_tree(p),
        None => Err(fail("Usage", format!("--tree is required for {method}"))),
    }
}

fn report_line(r: &SuiteReport) -> String {
    format!("{}: {}/{} passed", r.suite.name(), r.passed, r.instances)
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Mle { tree, data, out } => {
            let (t, _) = load_tree(&tree.tree)?;
            let x = load_data(&data)?;
            let r = mle(&t, &x)?;
            let text = match out.format.unwrap_or(Format::Json) {
                Format::Json => json_out(&mle_json(&t, &r))?,
                Format::Csv => tree_csv(&t, &r.theta, Some(&r)),
            };
            emit(&out, &text)
        }
        Command::DdmMle { data, out } => {
            let x = load_data(&data)?;
            let m = ddm_mle(&x)?;
            let text = match out.format.unwrap_or(Format::Json) {
                Format::Json => {
                    let kkt = verify_kkt(&m.p_hat, &x)?;
                    json_out(&json!({
                        "order": m.path.order,
                        "p_hat": to_rows(&m.p_hat),
                        "k_hat": to_rows(&m.k_hat),
                        "loglik": m.loglik,
                        "kkt_passed": kkt.passed,
                    }))?
                }
                Format::Csv => matrix_csv(&to_rows(&m.k_hat)),
            };
            emit(&out, &text)
        }
        Command::Estimate { method, tree, mx_literal, data, out } => {
            let x = load_data(&data)?;
            let (name, est) = match method {
                Method::Upgma => ("upgma", estimators::upgma(&x)?),
                Method::Nj => ("nj", estimators::neighbor_joining(&x)?),
                Method::Ls => {
                    let (t, _) = need_tree(&tree, "ls")?;
                    ("ls", estimators::least_squares(&t, &x)?)
                }
                Method::Ots => {
                    let (t, _) = need_tree(&tree, "ots")?;
                    let th = estimators::one_third_shrink(&mle(&t, &x)?.theta);
                    let cov = build_covariance(&t, &th);
                    ("ots", EstimatorOutput { covariance: cov, tree: Some((t, th)), clamped: false, solver: None })
                }
                Method::Mxshrink => {
                    let (t, _) = need_tree(&tree, "mxshrink")?;
                    let sigma = build_covariance(&t, &mle(&t, &x)?.theta);
                    let mode = if mx_literal { MxMode::Literal } else { MxMode::Clamped };
                    ("mxshrink", estimators::mxshrink(&sigma, mode)?)
                }
            };
            let text = match out.format.unwrap_or(Format::Json) {
                Format::Json => json_out(&json!({
                    "method": name,
                    "covariance": to_rows(&est.covariance),
                    "tree": tree_output(&est),
                    "clamped": est.clamped,
                    "solver": est.solver,
                }))?,
                Format::Csv => matrix_csv(&to_rows(&est.covariance)),
            };
            emit(&out, &text)
        }
        Command::ContrastMle { tree, reference, data, out } => {
            let (t, _) = load_tree(&tree.tree)?;
            let x = load_data(&data)?;
            if reference == 0 {
                return Err(Error::UnknownLeaf(0).into());
            }
            let c = contrast_mle(&t, &x, reference - 1)?;
            let rt = &c.rerooted.tree;
            let text = match out.format.unwrap_or(Format::Json) {
                Format::Json => json_out(&json!({
                    "y": c.y,
                    "rerooted": TreeDoc::from_tree(rt, None),
                    "original_node": c.rerooted.node_map,
                    "mle": mle_json(rt, &c.mle),
                }))?,
                Format::Csv => tree_csv(rt, &c.mle.theta, Some(&c.mle)),
            };
            emit(&out, &text)
        }
        Command::PlgtmWitness { epsilons, data, out } => {
            let x = load_data(&data)?;
            let pts = plgtm_divergence_witness(&x, &epsilons)?;
            let text = match out.format.unwrap_or(Format::Json) {
                Format::Json => json_out(&pts)?,
                Format::Csv => {
                    let mut s = String::from("epsilon,loglik\n");
                    for p in &pts {
                        s.push_str(&format!("{},{}\n", csv_num(p.epsilon), csv_num(p.loglik)));
                    }
                    s
                }
            };
            emit(&out, &text)
        }
        Command::Simulate { config, d_values, trials, seed, estimators, inner, beta_reps, target_norm, mx_literal, out } => {
            let cfg = match config {
                Some(p) => serde_json::from_str::<ExperimentConfig>(&read_file(&p)?)
                    .map_err(|e| Failure::from(Error::InvalidConfig(e.to_string())))?,
                None => {
                    let kinds = estimators.iter().map(|s| s.parse::<EstimatorKind>()).collect::<Result<Vec<_>, _>>()?;
                    let mut c = ExperimentConfig::new(d_values, trials, seed, kinds);
                    c.inner_replicates = inner;
                    c.beta_sq_replicates = beta_reps;
                    c.target_norm = target_norm;
                    c.mx_literal = mx_literal;
                    c
                }
            };
            let table = run_experiment(&cfg)?;
            for m in &table.error_messages {
                eprintln!("{}", serde_json::to_string(&json!({ "warning": "EstimatorError", "message": m })).unwrap());
            }
            let text = match out.format.unwrap_or(Format::Csv) {
                Format::Csv => table.to_csv(),
                Format::Json => json_out(&table)?,
            };
            emit(&out, &text)
        }
        Command::Verify { suite, seed, instances, out } => {
            let suites: Vec<Suite> = if suite == "all" { Suite::ALL.to_vec() } else { vec![suite.parse::<Suite>()?] };
            let reports: Vec<SuiteReport> =
                suites.iter().map(|&s| run_suite(s, seed, instances.unwrap_or(s.default_instances()))).collect();
            for r in &reports {
                eprintln!("{}", report_line(r));
            }
            let text = match out.format.unwrap_or(Format::Json) {
                Format::Json => json_out(&reports)?,
                Format::Csv => {
                    let mut s = String::from("suite,instances,passed,failed,seed\n");
                    for r in &reports {
                        s.push_str(&format!(
                            "{},{},{},{},{}\n",
                            r.suite.name(),
                            r.instances,
                            r.passed,
                            r.failures.len(),
                            r.seed
                        ));
                    }
                    s
                }
            };
            emit(&out, &text)?;
            let failed: Vec<&SuiteReport> = reports.iter().filter(|r| !r.ok()).collect();
            if failed.is_empty() {
                Ok(())
            } else {
                let first = failed[0].failures.first();
                Err(fail(
                    "PropertyFailed",
                    format!(
                        "{} failed; first failing instance: {}",
                        failed.iter().map(|r| r.suite.name()).collect::<Vec<_>>().join(", "),
                        first.map(|f| serde_json::to_string(f).unwrap_or_default()).unwrap_or_default()
                    ),
                ))
            }
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(v) = std::env::var("BMTM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| format!("BMTM_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) if f.kind == "Usage" => {
            eprintln!("error: {}", f.message);
            ExitCode::from(2)
        }
        Err(f) => {
            let line = json!({ "error": f.kind, "message": f.message });
            eprintln!("{}", serde_json::to_string(&line).unwrap());
            ExitCode::from(1)
        }
    }
}
