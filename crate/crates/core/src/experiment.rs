//! Train-on-11, test-on-every-configuration generalization benchmark.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{project_to_pmu_subset, DatasetSplit, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::graph::{bundled_pmu_configs, induce_pmu_graph, BusId, PmuGraph, Topology};
use crate::layers::SageAggregator;
use crate::models::{Family, ModelInstance, ModelSpec};
use crate::seed::sha256_hex;
use crate::training::{confidence_interval_90, evaluate, mean, train, History, Metrics, TrainConfig};

/// A family plus, for GraphSAGE, its aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Variant {
    pub family: Family,
    pub aggregator: Option<SageAggregator>,
}

impl Variant {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            aggregator: (family == Family::Rgsage).then_some(SageAggregator::Max),
        }
    }

    pub fn all() -> Vec<Variant> {
        Family::ALL.into_iter().map(Variant::new).collect()
    }

    pub fn label(&self) -> String {
        match self.aggregator {
            Some(SageAggregator::Max) => "rgsage-max".into(),
            Some(SageAggregator::Mean) => "rgsage-mean".into(),
            None => self.family.name().into(),
        }
    }

    /// Accepts family names plus `rgsage-max` / `rgsage-mean`.
    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let mut v = Variant::new(s.parse()?);
        if v.family == Family::Rgsage && key.ends_with("mean") {
            v.aggregator = Some(SageAggregator::Mean);
        }
        Ok(v)
    }

    pub fn spec(&self, train: &TrainConfig, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(self.family, NUM_FEATURES, seed).with_sizes(train.hidden, train.hidden);
        spec.sage_aggregator = self.aggregator;
        spec.dropout = train.dropout;
        spec.attn_dropout = train.attn_dropout;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub variants: Vec<Variant>,
    pub train_nodes: usize,
    pub test_nodes: Vec<usize>,
    pub train: TrainConfig,
    /// PMU sets keyed by size; the bundled table when empty.
    pub pmu_configs: BTreeMap<usize, Vec<BusId>>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            variants: Variant::all(),
            train_nodes: 11,
            test_nodes: vec![7, 11, 15, 19, 25],
            train: TrainConfig::default(),
            pmu_configs: BTreeMap::new(),
        }
    }
}

impl BenchmarkConfig {
    pub fn configs(&self) -> BTreeMap<usize, Vec<BusId>> {
        if self.pmu_configs.is_empty() {
            bundled_pmu_configs()
        } else {
            self.pmu_configs.clone()
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub family: String,
    pub n: usize,
    pub seed: u64,
    pub metrics: Metrics,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub family: String,
    pub n: usize,
    pub f1: Vec<f64>,
    pub mean_f1: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub family: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_seed: u64,
    pub dataset_sha256: String,
    pub config_sha256: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub config: BenchmarkConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<Failure>,
    pub provenance: Provenance,
}

impl BenchmarkReport {
    pub fn expected_cells(&self) -> usize {
        let c = &self.provenance.config;
        c.variants.len() * c.test_nodes.len() * c.train.seeds.len()
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty() && self.cells.len() == self.expected_cells()
    }

    pub fn aggregate(&self, family: &str, n: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.family == family && a.n == n)
    }

    /// `F1(train config) - F1(n)`, seed means.
    pub fn drop(&self, family: &str, n: usize) -> Option<f64> {
        let base = self.aggregate(family, self.provenance.config.train_nodes)?.mean_f1;
        Some(base - self.aggregate(family, n)?.mean_f1)
    }
}

/// Graph of each configured PMU set on the feeder.
pub fn config_graphs(topo: &Topology, cfg: &BenchmarkConfig) -> Result<BTreeMap<usize, PmuGraph>> {
    let configs = cfg.configs();
    let mut needed = cfg.test_nodes.clone();
    needed.push(cfg.train_nodes);
    let mut out = BTreeMap::new();
    for n in needed {
        let set = configs
            .get(&n)
            .ok_or_else(|| Error::Config(format!("no PMU configuration with {n} buses")))?;
        out.insert(n, induce_pmu_graph(topo, set)?);
    }
    Ok(out)
}

struct JobResult {
    cells: Vec<Cell>,
    failure: Option<Failure>,
}

fn checkpoint_stem(out_dir: &Path, label: &str, seed: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("{label}_seed{seed}"))
}

fn run_job(
    variant: Variant,
    seed: u64,
    cfg: &BenchmarkConfig,
    graphs: &BTreeMap<usize, PmuGraph>,
    train_split: &DatasetSplit,
    test_splits: &BTreeMap<usize, DatasetSplit>,
    out_dir: &Path,
) -> Result<(Vec<Cell>, History)> {
    let label = variant.label();
    let spec = variant.spec(&cfg.train, seed);
    let mut model = ModelInstance::new(spec, graphs[&cfg.train_nodes].clone())?;
    let history = train(&mut model, &train_split.train, &train_split.val, &cfg.train, seed)?;
    let sha = model.save(&checkpoint_stem(out_dir, &label, seed))?;
    let hist_path = out_dir.join("history").join(format!("{label}_seed{seed}.json"));
    fs::create_dir_all(hist_path.parent().expect("has parent"))?;
    fs::write(&hist_path, serde_json::to_string_pretty(&history)?)?;
    let mut cells = Vec::new();
    for &n in &cfg.test_nodes {
        let mut bound = model.rebind_graph(graphs[&n].clone());
        let metrics = evaluate(&mut bound, &test_splits[&n].test)?;
        cells.push(Cell {
            family: label.clone(),
            n,
            seed,
            metrics,
            checkpoint_sha256: sha.clone(),
        });
    }
    Ok((cells, history))
}

/// Trains each (variant, seed) once on the training configuration and
/// evaluates it on every test configuration. Jobs run on the current rayon
/// pool; results are ordered independently of scheduling. Failed jobs are
/// listed in `failures` and their cells omitted; `report.json`, the flat CSV
/// and, when complete, `fig3.csv` are written to `out_dir`.
pub fn run_benchmark(
    topo: &Topology,
    dataset: &DatasetSplit,
    cfg: &BenchmarkConfig,
    out_dir: &Path,
) -> Result<BenchmarkReport> {
    cfg.train.validate()?;
    if cfg.train.seeds.is_empty() || cfg.variants.is_empty() {
        return Err(Error::Config(
            "benchmark needs at least one variant and one seed".into(),
        ));
    }
    fs::create_dir_all(out_dir)?;
    let configs = cfg.configs();
    let graphs = config_graphs(topo, cfg)?;
    let train_split = project_to_pmu_subset(dataset, &configs[&cfg.train_nodes])?;
    let mut test_splits = BTreeMap::new();
    for &n in &cfg.test_nodes {
        test_splits.insert(n, project_to_pmu_subset(dataset, &configs[&n])?);
    }

    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|v| cfg.train.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let results: Vec<JobResult> = jobs
        .par_iter()
        .map(
            |&(v, s)| match run_job(v, s, cfg, &graphs, &train_split, &test_splits, out_dir) {
                Ok((cells, _)) => JobResult { cells, failure: None },
                Err(e) => JobResult {
                    cells: Vec::new(),
                    failure: Some(Failure {
                        family: v.label(),
                        seed: s,
                        error: e.to_string(),
                    }),
                },
            },
        )
        .collect();

    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        cells.extend(r.cells);
        failures.extend(r.failure);
    }
    let aggregates = aggregate_cells(&cfg.variants, &cfg.test_nodes, &cells);
    let report = BenchmarkReport {
        cells,
        aggregates,
        failures,
        provenance: Provenance {
            dataset_seed: dataset.seed,
            dataset_sha256: dataset.content_hash(),
            config_sha256: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: cfg.train.seeds.clone(),
            config: cfg.clone(),
        },
    };
    write_report(&report, out_dir)?;
    Ok(report)
}

/// Seed mean and 90% interval per (variant, n) for which every seed has a cell.
pub fn aggregate_cells(variants: &[Variant], test_nodes: &[usize], cells: &[Cell]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for v in variants {
        let label = v.label();
        for &n in test_nodes {
            let f1: Vec<f64> = cells
                .iter()
                .filter(|c| c.family == label && c.n == n)
                .map(|c| c.metrics.f1)
                .collect();
            if f1.is_empty() {
                continue;
            }
            let m = mean(&f1);
            let (lo, hi) = confidence_interval_90(&f1).unwrap_or((m, m));
            out.push(Aggregate {
                family: label.clone(),
                n,
                f1,
                mean_f1: m,
                ci_low: lo,
                ci_high: hi,
            });
        }
    }
    out
}

/// `family,n,mean_f1,ci_low,ci_high`, one row per (family, n).
pub fn emit_plot_data(report: &BenchmarkReport) -> Result<String> {
    if !report.is_complete() {
        return Err(Error::Usage(format!(
            "report has {} of {} cells and {} failures",
            report.cells.len(),
            report.expected_cells(),
            report.failures.len()
        )));
    }
    let mut s = String::from("family,n,mean_f1,ci_low,ci_high\n");
    for a in &report.aggregates {
        writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6}",
            a.family, a.n, a.mean_f1, a.ci_low, a.ci_high
        )
        .expect("string write");
    }
    Ok(s)
}

/// `family,n,seed,f1,precision,recall`, one row per cell.
pub fn flat_csv(report: &BenchmarkReport) -> String {
    let mut s = String::from("family,n,seed,f1,precision,recall\n");
    for c in &report.cells {
        let m = &c.metrics;
        writeln!(
            s,
            "{},{},{},{:.6},{:.6},{:.6}",
            c.family, c.n, c.seed, m.f1, m.precision, m.recall
        )
        .expect("string write");
    }
    s
}

pub fn write_report(report: &BenchmarkReport, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(
        out_dir.join("provenance.json"),
        serde_json::to_string_pretty(&report.provenance)?,
    )?;
    fs::write(out_dir.join("cells.csv"), flat_csv(report))?;
    if report.is_complete() {
        fs::write(out_dir.join("fig3.csv"), emit_plot_data(report)?)?;
    }
    Ok(())
}

pub fn load_report(path: &Path) -> Result<BenchmarkReport> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_labels_round_trip() {
        for v in Variant::all() {
            assert_eq!(Variant::parse(&v.label()).unwrap(), v);
        }
        let mean = Variant::parse("rgsage-mean").unwrap();
        assert_eq!(mean.aggregator, Some(SageAggregator::Mean));
        assert!(Variant::parse("cnn").is_err());
    }

    #[test]
    fn plot_data_rejects_incomplete_reports() {
        let cfg = BenchmarkConfig::default();
        let report = BenchmarkReport {
            cells: Vec::new(),
            aggregates: Vec::new(),
            failures: Vec::new(),
            provenance: Provenance {
                dataset_seed: 0,
                dataset_sha256: String::new(),
                config_sha256: cfg.hash(),
                code_version: String::new(),
                seeds: cfg.train.seeds.clone(),
                config: cfg,
            },
        };
        assert_eq!(report.expected_cells(), 150);
        assert!(matches!(emit_plot_data(&report), Err(Error::Usage(_))));
    }
}
