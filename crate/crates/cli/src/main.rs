//! `gridfault`: generate data, train and evaluate detectors, run the
//! generalization benchmark and gradient checks.
//!
//! Exit codes: 0 ok, 1 other failure, 2 bad configuration or usage,
//! 3 training divergence, 4 incomplete benchmark grid, 5 gradient check failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use gridfault::datagen::{build_dataset, load_dataset, project_to_pmu_subset, save_dataset, GeneratorConfig};
use gridfault::experiment::{
    config_graphs, emit_plot_data, load_report, run_benchmark, write_report, BenchmarkConfig, BenchmarkReport, Variant,
};
use gridfault::graph::{bundled_pmu_configs, induce_pmu_graph};
use gridfault::models::ModelInstance;
use gridfault::seed::sha256_hex;
use gridfault::tensor::Mutation;
use gridfault::training::{evaluate, train, TrainConfig, DESK_HIDDEN};
use gridfault::verify::{gradcheck_suite, ELEMENTWISE_TOL, GRADCHECK_TOL};
use gridfault::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_PARTIAL: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

const ELEMENTWISE: [&str; 11] = [
    "matmul",
    "add",
    "sub",
    "mul",
    "sigmoid",
    "tanh",
    "relu",
    "leaky_relu",
    "concat",
    "segment_softmax",
    "bce_with_logits",
];

#[derive(Parser, Debug)]
#[command(
    name = "gridfault",
    version,
    about = "Recurrent and graph fault detectors for distribution feeders"
)]
struct Cli {
    /// Worker threads for independent jobs (defaults to available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Simulate fault events and write a normalized, split dataset.
    Gen(GenArgs),
    /// Train one model family on a PMU configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Train on 11 PMUs, test on every configuration.
    Benchmark(BenchArgs),
    /// Compare every backward rule against finite differences.
    Gradcheck(GradArgs),
    /// Regenerate plot data and a summary from a benchmark report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator config JSON; fields left out take preset values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "full")]
    preset: String,
    /// Topology file overriding the bundled feeder.
    #[arg(long)]
    topology: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    family: String,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// PMU configuration (number of buses) to train on.
    #[arg(long, default_value_t = 11)]
    nodes: usize,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint path without extension.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// PMU configuration to evaluate on; the checkpoint's own graph when absent.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Benchmark config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated families, e.g. `rgcn,rgatv2,rgsage-mean`.
    #[arg(long)]
    families: Option<String>,
    /// Number of training seeds.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Installs a deliberately wrong backward rule (used by tests).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    /// Directory for fig3.csv; next to the report when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config_path: Option<PathBuf>,
    seeds: Vec<u64>,
    output_dir: Option<PathBuf>,
    started_unix: u64,
    finished_unix: u64,
    resolved_config: serde_json::Value,
    artifacts: BTreeMap<String, String>,
    exit_code: u8,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_)
            | Error::Usage(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::Topology(_)
            | Error::Construction(_)
            | Error::Binding { .. } => EXIT_CONFIG,
            Error::Divergence { .. } | Error::NonFinite(_) => EXIT_DIVERGENCE,
            _ => EXIT_OTHER,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<Outcome, Failure>;

struct Outcome {
    code: u8,
    output_dir: Option<PathBuf>,
    config_path: Option<PathBuf>,
    seeds: Vec<u64>,
    resolved: serde_json::Value,
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: msg.into(),
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
}

/// Merges a JSON object over a serialized default so partial configs work.
fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, path: &Path) -> std::result::Result<T, Failure> {
    let patch: serde_json::Value = read_json(path)?;
    let mut merged = serde_json::to_value(base).expect("config serializes");
    merge(&mut merged, patch);
    serde_json::from_value(merged).map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// SHA-256 of every regular file under `dir`, keyed by relative path.
fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run_manifest.json") {
                if let Ok(bytes) = fs::read(&p) {
                    let rel = p.strip_prefix(dir).unwrap_or(&p).display().to_string();
                    out.insert(rel, sha256_hex(&bytes));
                }
            }
        }
    }
    out
}

fn desk_or(preset: &Option<String>, value: Option<usize>, full: usize) -> std::result::Result<usize, Failure> {
    match (value, preset.as_deref()) {
        (Some(v), _) => Ok(v),
        (None, None | Some("full")) => Ok(full),
        (None, Some("desk")) => Ok(DESK_HIDDEN),
        (None, Some(other)) => Err(config_err(format!("unknown preset {other:?}"))),
    }
}

fn cmd_gen(args: &GenArgs, root: Option<u64>) -> CmdResult {
    let base = GeneratorConfig::preset(&args.preset)?;
    let mut cfg = match &args.config {
        Some(p) => overlay(&base, p)?,
        None => base,
    };
    if let Some(t) = &args.topology {
        cfg.topology = Some(t.clone());
    }
    if let Some(s) = root {
        cfg.seed = s;
    }
    if let Some(t) = &cfg.topology {
        if !t.exists() {
            return Err(config_err(format!("topology file {} does not exist", t.display())));
        }
    }
    let split = build_dataset(&cfg)?;
    let manifest = save_dataset(&split, &cfg, &args.out)?;
    let c = &manifest.counts;
    println!(
        "events {}  graph windows {}  per-PMU windows {} (fault {}, no-fault {})",
        c.events, c.graph_windows, c.per_pmu_windows, c.per_pmu_fault, c.per_pmu_no_fault
    );
    println!("split train/val/test {}/{}/{}", c.train, c.val, c.test);
    println!("content sha256 {}", manifest.content_sha256);
    Ok(Outcome {
        code: 0,
        output_dir: Some(args.out.clone()),
        config_path: args.config.clone(),
        seeds: vec![cfg.seed],
        resolved: serde_json::to_value(&cfg).expect("serializable"),
    })
}

fn cmd_train(args: &TrainArgs, root: Option<u64>) -> CmdResult {
    let variant = Variant::parse(&args.family)?;
    let mut tc = match &args.config {
        Some(p) => overlay(&TrainConfig::default(), p)?,
        None => TrainConfig::default(),
    };
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    tc.hidden = desk_or(&args.preset, args.hidden, tc.hidden)?;
    let seed = root.unwrap_or(0);
    tc.seeds = vec![seed];
    tc.validate()?;
    let (dataset, dm) = load_dataset(&args.dataset)?;
    let topo = dm.config.load_topology()?;
    let configs = bundled_pmu_configs();
    let set = configs
        .get(&args.nodes)
        .ok_or_else(|| config_err(format!("no PMU configuration with {} buses", args.nodes)))?;
    let split = project_to_pmu_subset(&dataset, set)?;
    let graph = induce_pmu_graph(&topo, set)?;
    let mut model = ModelInstance::new(variant.spec(&tc, seed), graph)?;
    let history = train(&mut model, &split.train, &split.val, &tc, seed)?;
    fs::create_dir_all(&args.out).map_err(Error::from)?;
    let stem = args.out.join(format!("{}_seed{seed}", variant.label()));
    let sha = model.save(&stem)?;
    fs::write(
        args.out.join("history.json"),
        serde_json::to_string_pretty(&history).expect("serializable"),
    )
    .map_err(Error::from)?;
    let m = evaluate(&mut model, &split.test)?;
    if let Some(last) = history.epochs.last() {
        println!("final train loss {:.5}", last.train_loss);
    }
    println!(
        "test f1 {:.4}  precision {:.4}  recall {:.4}",
        m.f1, m.precision, m.recall
    );
    println!("checkpoint {} (sha256 {sha})", stem.display());
    Ok(Outcome {
        code: 0,
        output_dir: Some(args.out.clone()),
        config_path: args.config.clone(),
        seeds: vec![seed],
        resolved: serde_json::json!({"train": tc, "family": variant.label(), "nodes": args.nodes,
                                     "dataset": args.dataset, "dataset_sha256": dm.content_sha256}),
    })
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let model = ModelInstance::load(&args.checkpoint)?;
    let (dataset, dm) = load_dataset(&args.dataset)?;
    let topo = dm.config.load_topology()?;
    let (set, mut bound) = match args.nodes {
        Some(n) => {
            let set = bundled_pmu_configs()
                .get(&n)
                .cloned()
                .ok_or_else(|| config_err(format!("no PMU configuration with {n} buses")))?;
            let g = induce_pmu_graph(&topo, &set)?;
            (set, model.rebind_graph(g))
        }
        None => (model.graph().pmu_buses().to_vec(), model),
    };
    let split = project_to_pmu_subset(&dataset, &set)?;
    let m = evaluate(&mut bound, &split.test)?;
    let text = serde_json::to_string_pretty(&m).expect("serializable");
    println!("{text}");
    if let Some(p) = &args.out {
        if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(d).map_err(Error::from)?;
        }
        fs::write(p, &text).map_err(Error::from)?;
    }
    Ok(Outcome {
        code: 0,
        output_dir: args.out.as_ref().and_then(|p| p.parent().map(Path::to_path_buf)),
        config_path: None,
        seeds: vec![bound.spec.seed],
        resolved: serde_json::json!({"checkpoint": args.checkpoint, "dataset": args.dataset,
                                     "nodes": set.len(), "metrics": m}),
    })
}

fn print_summary(report: &BenchmarkReport) {
    let c = &report.provenance.config;
    println!(
        "{:<12} {}",
        "family",
        c.test_nodes
            .iter()
            .map(|n| format!("{:>22}", format!("N={n}")))
            .collect::<String>()
    );
    for v in &c.variants {
        let label = v.label();
        let mut line = format!("{label:<12} ");
        for &n in &c.test_nodes {
            match report.aggregate(&label, n) {
                Some(a) => line.push_str(&format!("{:>8.4} [{:>5.3},{:>5.3}]", a.mean_f1, a.ci_low, a.ci_high)),
                None => line.push_str(&format!("{:>22}", "-")),
            }
        }
        if let Some(d) = c.test_nodes.iter().max().and_then(|&n| report.drop(&label, n)) {
            line.push_str(&format!("  drop {d:+.4}"));
        }
        println!("{line}");
    }
    for f in &report.failures {
        println!("FAILED {} seed {}: {}", f.family, f.seed, f.error);
    }
}

fn cmd_benchmark(args: &BenchArgs, root: Option<u64>) -> CmdResult {
    let mut cfg = match &args.config {
        Some(p) => overlay(&BenchmarkConfig::default(), p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(list) = &args.families {
        cfg.variants = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Variant::parse)
            .collect::<gridfault::Result<_>>()?;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.hidden = desk_or(&args.preset, args.hidden, cfg.train.hidden)?;
    if root.is_some() || args.seeds.is_some() {
        let base = root.unwrap_or(0);
        let k = args.seeds.unwrap_or(cfg.train.seeds.len()) as u64;
        cfg.train.seeds = (0..k).map(|i| base * 1000 + i).collect();
    }
    let (dataset, dm) = load_dataset(&args.dataset)?;
    let topo = dm.config.load_topology()?;
    config_graphs(&topo, &cfg)?;
    let report = run_benchmark(&topo, &dataset, &cfg, &args.out)?;
    print_summary(&report);
    let code = if report.is_complete() { 0 } else { EXIT_PARTIAL };
    Ok(Outcome {
        code,
        output_dir: Some(args.out.clone()),
        config_path: args.config.clone(),
        seeds: cfg.train.seeds.clone(),
        resolved: serde_json::json!({"benchmark": cfg, "dataset": args.dataset,
                                     "dataset_sha256": dm.content_sha256}),
    })
}

fn cmd_gradcheck(args: &GradArgs, root: Option<u64>) -> CmdResult {
    let mutation = match args.inject_fault.as_deref() {
        None => None,
        Some("flip-leaky-relu" | "gatv2-sign") => Some(Mutation::FlipLeakyReluGrad),
        Some(other) => return Err(config_err(format!("unknown fault {other:?}"))),
    };
    let seed = root.unwrap_or(0);
    let reports = gradcheck_suite(mutation, seed)?;
    println!("{:<20} {:>12}  {:>8}  result", "component", "max rel err", "tol");
    let mut all = true;
    for r in &reports {
        all &= r.passed;
        let tol = if ELEMENTWISE.contains(&r.component.as_str()) {
            ELEMENTWISE_TOL
        } else {
            GRADCHECK_TOL
        };
        println!(
            "{:<20} {:>12.3e}  {:>8.0e}  {}",
            r.component,
            r.max_rel_err,
            tol,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(Error::from)?;
        fs::write(
            out.join("gradcheck.json"),
            serde_json::to_string_pretty(&reports).expect("serializable"),
        )
        .map_err(Error::from)?;
    }
    Ok(Outcome {
        code: if all { 0 } else { EXIT_GRADCHECK },
        output_dir: args.out.clone(),
        config_path: None,
        seeds: vec![seed],
        resolved: serde_json::json!({"inject_fault": args.inject_fault}),
    })
}

fn cmd_report(args: &ReportArgs) -> CmdResult {
    let report = load_report(&args.report)?;
    let dir = args
        .out
        .clone()
        .or_else(|| args.report.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    print_summary(&report);
    if report.is_complete() {
        fs::create_dir_all(&dir).map_err(Error::from)?;
        fs::write(dir.join("fig3.csv"), emit_plot_data(&report)?).map_err(Error::from)?;
    } else {
        write_report(&report, &dir)?;
    }
    Ok(Outcome {
        code: if report.is_complete() { 0 } else { EXIT_PARTIAL },
        // next to the report the benchmark's own manifest stays in place
        output_dir: args.out.is_some().then_some(dir),
        config_path: Some(args.report.clone()),
        seeds: report.provenance.seeds.clone(),
        resolved: serde_json::to_value(&report.provenance).expect("serializable"),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = now();
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .max(1);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::from(EXIT_OTHER);
        }
    };
    let (name, result) = pool.install(|| match &cli.cmd {
        Cmd::Gen(a) => ("gen", cmd_gen(a, cli.seed)),
        Cmd::Train(a) => ("train", cmd_train(a, cli.seed)),
        Cmd::Eval(a) => ("eval", cmd_eval(a)),
        Cmd::Benchmark(a) => ("benchmark", cmd_benchmark(a, cli.seed)),
        Cmd::Gradcheck(a) => ("gradcheck", cmd_gradcheck(a, cli.seed)),
        Cmd::Report(a) => ("report", cmd_report(a)),
    });
    match result {
        Ok(out) => {
            if let Some(dir) = &out.output_dir {
                let manifest = RunManifest {
                    command: name.to_string(),
                    argv: std::env::args().collect(),
                    config_path: out.config_path.clone(),
                    seeds: out.seeds.clone(),
                    output_dir: Some(dir.clone()),
                    started_unix: started,
                    finished_unix: now(),
                    resolved_config: out.resolved.clone(),
                    artifacts: hash_tree(dir),
                    exit_code: out.code,
                };
                let text = serde_json::to_string_pretty(&manifest).expect("serializable");
                if let Err(e) = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join("run_manifest.json"), text)) {
                    eprintln!("warning: could not write run manifest: {e}");
                }
            }
            ExitCode::from(out.code)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
