//! Command-line front end: validate networks, inspect SPI trees, run queries
//! with evidence, check the engine against the dense oracle, and replay query
//! lists against one session to measure goal-directedness and cache reuse.
//!
//! Exit codes: 0 success, 1 validation/query error, 2 check failure above
//! tolerance (argument-parsing errors exit with clap's conventional 2).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::engine::{Diagnostics, Query, QueryResult, Session};
use crate::network::{Network, NodeId};
use crate::oracle;
use crate::spi_tree::TreeMode;

/// Environment variable overriding the default `check` tolerance.
pub const TOL_ENV: &str = "GSPI_TOL";

#[derive(Debug, Parser)]
#[command(
    name = "gspi",
    version,
    about = "Exact goal-directed inference for linear-Gaussian Bayesian networks"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Bushy,
    Chain,
}

impl From<Mode> for TreeMode {
    fn from(m: Mode) -> TreeMode {
        match m {
            Mode::Bushy => TreeMode::Bushy,
            Mode::Chain => TreeMode::Chain,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Machine,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate a network document.
    Validate {
        /// Network file (JSON).
        #[arg(long)]
        network: PathBuf,
    },
    /// Build the SPI forest and print roots, eccentricities, visit order,
    /// parent maps, and the arc-constraint verification result.
    Tree {
        #[arg(long)]
        network: PathBuf,
        /// Attachment strategy; bushy falls back to chain when needed.
        #[arg(long, value_enum, default_value_t = Mode::Bushy)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Answer P(target | given, evidence).
    Query {
        #[arg(long)]
        network: PathBuf,
        /// Target nodes, comma-separated: `--target a1,c2`.
        #[arg(long, value_delimiter = ',', required = true)]
        target: Vec<String>,
        /// Symbolic conditioners, comma-separated.
        #[arg(long, value_delimiter = ',')]
        given: Vec<String>,
        /// Observed values: `id=v1,v2;id2=v` (vector entries comma-separated,
        /// assignments separated by `;`).
        #[arg(long)]
        evidence: Option<String>,
        #[arg(long, value_enum, default_value_t = Mode::Bushy)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Compare the engine against the dense oracle over seeded random
    /// networks and random queries; exit 2 on any deviation above tolerance.
    Check {
        /// Number of seeded networks.
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Queries per network.
        #[arg(long, default_value_t = 5)]
        queries: u64,
        /// Nodes per network.
        #[arg(long, default_value_t = 12)]
        nodes: usize,
        #[arg(long, default_value_t = 3)]
        max_parents: usize,
        #[arg(long, default_value_t = 3)]
        max_dim: usize,
        /// Maximum |engine − oracle| over all means, covariances, and links.
        /// Defaults to 1e-8, overridable via GSPI_TOL.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Bushy)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Replay a query list (one JSON object per line) against one persistent
    /// session and report per-query operation counts.
    Bench {
        #[arg(long)]
        network: PathBuf,
        /// Query list: lines of {"target": [...], "given": [...],
        /// "evidence": {"id": [v, ...]}}.
        #[arg(long)]
        queries: PathBuf,
        /// Replay the whole list this many times.
        #[arg(long, default_value_t = 1)]
        repeat: u32,
        #[arg(long, value_enum, default_value_t = Mode::Bushy)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
}

/// Machine form of a query answer. Reals serialize with full round-trip
/// precision; parsing the document reconstructs the moments bit-exactly.
#[derive(Debug, Serialize, Deserialize)]
pub struct ResultDoc {
    pub members: Vec<MemberDoc>,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub links: Vec<LinkDoc>,
    pub diagnostics: DiagnosticsDoc,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MemberDoc {
    pub id: String,
    pub dim: usize,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LinkDoc {
    pub id: String,
    #[serde(rename = "K")]
    pub k: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DiagnosticsDoc {
    pub multiplications: u64,
    pub integrations: u64,
    pub cache_hits: u64,
    pub subtree_requests: u64,
    pub cache_entries: u64,
    pub requests_per_node: BTreeMap<String, u64>,
}

impl From<&Diagnostics> for DiagnosticsDoc {
    fn from(d: &Diagnostics) -> Self {
        DiagnosticsDoc {
            multiplications: d.multiplications,
            integrations: d.integrations,
            cache_hits: d.cache_hits,
            subtree_requests: d.subtree_requests,
            cache_entries: d.cache_entries,
            requests_per_node: d
                .requests_per_node
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
        }
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Converts a query result into its machine document.
pub fn result_doc(result: &QueryResult) -> ResultDoc {
    let mut members = Vec::new();
    let mut offset = 0;
    for b in &result.members {
        members.push(MemberDoc {
            id: b.id.to_string(),
            dim: b.dim,
            offset,
        });
        offset += b.dim;
    }
    ResultDoc {
        members,
        mean: result.mean.iter().copied().collect(),
        cov: matrix_rows(&result.cov),
        links: result
            .links
            .iter()
            .map(|(id, k)| LinkDoc {
                id: id.to_string(),
                k: matrix_rows(k),
            })
            .collect(),
        diagnostics: (&result.diagnostics).into(),
    }
}

/// Emits a query result in the requested format.
pub fn emit_result(result: &QueryResult, format: Format) -> String {
    match format {
        Format::Machine => {
            let mut text =
                serde_json::to_string_pretty(&result_doc(result)).expect("result serialization");
            text.push('\n');
            text
        }
        Format::Human => {
            let mut out = String::new();
            let _ = writeln!(out, "members:");
            let mut offset = 0;
            for b in &result.members {
                let _ = writeln!(out, "  {}  dim {}  offset {}", b.id, b.dim, offset);
                offset += b.dim;
            }
            let _ = writeln!(out, "mean:");
            let _ = writeln!(out, "  [{}]", join_reals(result.mean.iter()));
            let _ = writeln!(out, "cov:");
            for i in 0..result.cov.nrows() {
                let _ = writeln!(
                    out,
                    "  [{}]",
                    join_reals((0..result.cov.ncols()).map(|j| &result.cov[(i, j)]))
                );
            }
            if !result.links.is_empty() {
                let _ = writeln!(out, "links:");
                for (id, k) in &result.links {
                    for i in 0..k.nrows() {
                        let prefix = if i == 0 {
                            format!("  {id} ")
                        } else {
                            " ".repeat(id.as_str().len() + 3)
                        };
                        let _ = writeln!(
                            out,
                            "{prefix}[{}]",
                            join_reals((0..k.ncols()).map(|j| &k[(i, j)]))
                        );
                    }
                }
            }
            let d = &result.diagnostics;
            let _ = writeln!(
                out,
                "diagnostics: multiplications {}  integrations {}  cache hits {}  subtree requests {}  cache entries {}",
                d.multiplications, d.integrations, d.cache_hits, d.subtree_requests, d.cache_entries
            );
            out
        }
    }
}

/// Rounds to 6 significant digits for human output.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    let s = format!("{x:.decimals$}");
    if !s.contains('.') {
        return s;
    }
    let trimmed = s.trim_end_matches('0');
    match trimmed.strip_suffix('.') {
        Some(whole) => format!("{whole}.0"),
        None => trimmed.to_string(),
    }
}

fn join_reals<'a>(xs: impl Iterator<Item = &'a f64>) -> String {
    xs.map(|x| sig6(*x)).collect::<Vec<_>>().join(", ")
}

/// Parses the `id=v1,v2;id2=v` evidence syntax.
pub fn parse_evidence(text: &str) -> Result<BTreeMap<NodeId, DVector<f64>>> {
    let mut out = BTreeMap::new();
    for assignment in text.split(';').filter(|s| !s.trim().is_empty()) {
        let (id, values) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("evidence assignment {assignment:?} is missing '='"))?;
        let id = id.trim();
        if id.is_empty() {
            return Err(anyhow!(
                "evidence assignment {assignment:?} has an empty id"
            ));
        }
        let values: Vec<f64> = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .with_context(|| format!("bad real {v:?} in evidence for {id}"))
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(anyhow!("evidence for {id} has no values"));
        }
        if out
            .insert(NodeId::from(id), DVector::from_vec(values))
            .is_some()
        {
            return Err(anyhow!("evidence for {id} given twice"));
        }
    }
    Ok(out)
}

/// One line of a bench query list.
#[derive(Debug, Deserialize)]
struct QueryLine {
    target: Vec<String>,
    #[serde(default)]
    given: Vec<String>,
    #[serde(default)]
    evidence: BTreeMap<String, Vec<f64>>,
}

impl QueryLine {
    fn to_query(&self) -> Query {
        Query {
            targets: self
                .target
                .iter()
                .map(|s| NodeId::from(s.as_str()))
                .collect(),
            given: self
                .given
                .iter()
                .map(|s| NodeId::from(s.as_str()))
                .collect(),
            evidence: self
                .evidence
                .iter()
                .map(|(id, v)| (NodeId::from(id.as_str()), DVector::from_vec(v.clone())))
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
struct TreeDoc {
    root: String,
    mode: String,
    fell_back: bool,
    mcs_order: Vec<String>,
    parents: BTreeMap<String, Option<String>>,
    eccentricities: BTreeMap<String, String>,
    violations: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
struct CheckDoc {
    networks: u64,
    queries: u64,
    degenerate_skipped: u64,
    max_deviation: f64,
    tolerance: f64,
    failures: Vec<String>,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    query: String,
    multiplications: u64,
    integrations: u64,
    cache_hits: u64,
    subtree_requests: u64,
    cache_entries: u64,
}

/// Runs the CLI and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            1
        }
    }
}

fn load_network(path: &PathBuf) -> Result<Network> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read network file {}", path.display()))?;
    Ok(Network::parse(&text)?)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Validate { network } => {
            let net = load_network(&network)?;
            println!(
                "ok: {} nodes, total dimension {}, {} component(s)",
                net.len(),
                net.total_dim(),
                net.components().len()
            );
            println!(
                "topological order: {}",
                net.topological_order()
                    .iter()
                    .map(NodeId::as_str)
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            Ok(0)
        }
        Command::Tree {
            network,
            mode,
            format,
        } => {
            let net = load_network(&network)?;
            let forest = crate::spi_tree::SpiForest::build(&net, mode.into())?;
            let ecc = net.skeleton_distances();
            let mut docs = Vec::new();
            for tree in forest.trees() {
                let violations: Vec<(String, String)> = tree
                    .verify_constraint(&net)
                    .into_iter()
                    .map(|(u, v)| (u.to_string(), v.to_string()))
                    .collect();
                docs.push(TreeDoc {
                    root: tree.root().to_string(),
                    mode: tree.mode().to_string(),
                    fell_back: tree.fell_back(),
                    mcs_order: tree.mcs_order().iter().map(ToString::to_string).collect(),
                    parents: tree
                        .parent_map()
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.as_ref().map(ToString::to_string)))
                        .collect(),
                    eccentricities: tree
                        .mcs_order()
                        .iter()
                        .map(|id| (id.to_string(), ecc[id].to_string()))
                        .collect(),
                    violations,
                });
            }
            let ok = docs.iter().all(|d| d.violations.is_empty());
            match format {
                Format::Machine => println!("{}", serde_json::to_string_pretty(&docs)?),
                Format::Human => {
                    for (i, d) in docs.iter().enumerate() {
                        let note = if d.fell_back {
                            ", fell back from bushy"
                        } else {
                            ""
                        };
                        println!("tree {i}: root {} (mode {}{note})", d.root, d.mode);
                        println!("  visit order: {}", d.mcs_order.join(", "));
                        println!("  eccentricities:");
                        for (id, e) in &d.eccentricities {
                            println!("    {id}: {e}");
                        }
                        println!("  parents:");
                        for (id, p) in &d.parents {
                            match p {
                                Some(p) => println!("    {id} <- {p}"),
                                None => println!("    {id} (root)"),
                            }
                        }
                        if d.violations.is_empty() {
                            println!("  arc constraint: ok");
                        } else {
                            println!("  arc constraint VIOLATED: {:?}", d.violations);
                        }
                    }
                }
            }
            Ok(if ok { 0 } else { 1 })
        }
        Command::Query {
            network,
            target,
            given,
            evidence,
            mode,
            format,
        } => {
            let net = load_network(&network)?;
            let mut session = Session::new(net, mode.into())?;
            let q = Query {
                targets: target.iter().map(|s| NodeId::from(s.as_str())).collect(),
                given: given.iter().map(|s| NodeId::from(s.as_str())).collect(),
                evidence: evidence
                    .as_deref()
                    .map(parse_evidence)
                    .transpose()?
                    .unwrap_or_default(),
            };
            let result = session.answer_query(&q)?;
            print!("{}", emit_result(&result, format));
            Ok(0)
        }
        Command::Check {
            seeds,
            queries,
            nodes,
            max_parents,
            max_dim,
            tol,
            mode,
            format,
        } => {
            let tol = match tol {
                Some(t) => t,
                None => match std::env::var(TOL_ENV) {
                    Ok(v) => v
                        .parse::<f64>()
                        .with_context(|| format!("bad {TOL_ENV} value {v:?}"))?,
                    Err(_) => 1e-8,
                },
            };
            if tol <= 0.0 {
                return Err(anyhow!("tolerance must be positive"));
            }
            let doc = run_check(
                seeds,
                queries,
                nodes,
                max_parents,
                max_dim,
                tol,
                mode.into(),
            )?;
            match format {
                Format::Machine => println!("{}", serde_json::to_string_pretty(&doc)?),
                Format::Human => {
                    println!(
                        "checked {} networks x {} queries ({} degenerate draws skipped)",
                        doc.networks, doc.queries, doc.degenerate_skipped
                    );
                    println!(
                        "max deviation {:.3e} (tolerance {:.1e})",
                        doc.max_deviation, doc.tolerance
                    );
                    for f in &doc.failures {
                        println!("FAIL {f}");
                    }
                    if doc.failures.is_empty() {
                        println!("max deviation <= tolerance: ok");
                    }
                }
            }
            Ok(if doc.failures.is_empty() { 0 } else { 2 })
        }
        Command::Bench {
            network,
            queries,
            repeat,
            mode,
            format,
        } => {
            let net = load_network(&network)?;
            let text = fs::read_to_string(&queries)
                .with_context(|| format!("cannot read query list {}", queries.display()))?;
            let lines: Vec<QueryLine> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| serde_json::from_str(l).with_context(|| format!("bad query line {l:?}")))
                .collect::<Result<_>>()?;
            let mut session = Session::new(net, mode.into())?;
            let mut rows = Vec::new();
            for round in 0..repeat {
                for (i, line) in lines.iter().enumerate() {
                    let q = line.to_query();
                    let result = session.answer_query(&q)?;
                    let d = &result.diagnostics;
                    rows.push(BenchRow {
                        query: format!("round {round} #{i} target {}", line.target.join(",")),
                        multiplications: d.multiplications,
                        integrations: d.integrations,
                        cache_hits: d.cache_hits,
                        subtree_requests: d.subtree_requests,
                        cache_entries: d.cache_entries,
                    });
                }
            }
            match format {
                Format::Machine => println!("{}", serde_json::to_string_pretty(&rows)?),
                Format::Human => {
                    println!(
                        "{:<28} {:>6} {:>6} {:>6} {:>8} {:>8}",
                        "query", "mult", "integ", "hits", "requests", "cached"
                    );
                    for r in &rows {
                        println!(
                            "{:<28} {:>6} {:>6} {:>6} {:>8} {:>8}",
                            r.query,
                            r.multiplications,
                            r.integrations,
                            r.cache_hits,
                            r.subtree_requests,
                            r.cache_entries
                        );
                    }
                }
            }
            Ok(0)
        }
    }
}

fn run_check(
    seeds: u64,
    queries: u64,
    nodes: usize,
    max_parents: usize,
    max_dim: usize,
    tol: f64,
    mode: TreeMode,
) -> Result<CheckDoc> {
    use rand::SeedableRng;
    let mut max_dev = 0.0f64;
    let mut failures = Vec::new();
    let mut total_queries = 0u64;
    let mut degenerate = 0u64;
    for seed in 0..seeds {
        let net = oracle::random_network(seed, nodes, max_parents, max_dim);
        let jm = oracle::joint_moments(&net);
        let mut session = Session::new(net.clone(), mode)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for qi in 0..queries {
            let (targets, given, evidence) = oracle::random_query(&net, &mut rng);
            let q = Query {
                targets,
                given,
                evidence,
            };
            let result = match session.answer_query(&q) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(format!("seed {seed} query {qi}: engine error {e}"));
                    continue;
                }
            };
            let target_order: Vec<NodeId> = result.members.iter().map(|b| b.id.clone()).collect();
            let given_order: Vec<NodeId> = result.links.iter().map(|(id, _)| id.clone()).collect();
            let reference = match oracle::oracle_query(
                &jm,
                &target_order,
                &given_order,
                &q.evidence,
                net.tolerances().conditioning,
            ) {
                Ok(a) => a,
                Err(_) => {
                    // Near-singular conditioning block in the draw; skip.
                    degenerate += 1;
                    continue;
                }
            };
            total_queries += 1;
            let mut dev = 0.0f64;
            for (a, b) in result.mean.iter().zip(reference.mean.iter()) {
                dev = dev.max((a - b).abs());
            }
            for (a, b) in result.cov.iter().zip(reference.cov.iter()) {
                dev = dev.max((a - b).abs());
            }
            for (id, k) in &result.links {
                let (_, ko) = reference
                    .links
                    .iter()
                    .find(|(oid, _)| oid == id)
                    .ok_or_else(|| anyhow!("oracle lost link {id}"))?;
                for (a, b) in k.iter().zip(ko.iter()) {
                    dev = dev.max((a - b).abs());
                }
            }
            max_dev = max_dev.max(dev);
            if dev > tol {
                failures.push(format!("seed {seed} query {qi}: deviation {dev:.3e}"));
            }
        }
    }
    Ok(CheckDoc {
        networks: seeds,
        queries: total_queries,
        degenerate_skipped: degenerate,
        max_deviation: max_dev,
        tolerance: tol,
        failures,
    })
}
