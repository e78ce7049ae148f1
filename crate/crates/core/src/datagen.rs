//! Surrogate single line-to-ground fault records, sliding windows, Z-score
//! normalization and splitting.
//!
//! The waveform model is parametric, not electrical: phase-A sags and current
//! surges that decay with feeder hop distance and fault resistance, on top of
//! a load-dependent steady state with Gaussian measurement noise. Magnitudes
//! are per-unit, angles radians. All constants live in [`SurrogateParams`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{bundled_fault_buses, bundled_pmu_configs, BusId, Topology};
use crate::seed::{self, sha256_hex};

pub const FEATURE_NAMES: [&str; 9] = ["v_a", "v_b", "v_c", "i_a", "i_b", "i_c", "ang_a", "ang_b", "ang_c"];
pub const NUM_FEATURES: usize = 9;
pub const SUBSTATION_BUS: BusId = 150;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateParams {
    /// Std-dev of additive measurement noise (p.u. for magnitudes, rad for angles).
    pub noise_sigma: f64,
    /// Fractional phase-A sag at the fault bus for a bolted fault.
    pub base_depth: f64,
    /// Per-hop decay of the sag.
    pub beta: f64,
    /// Resistance scale of the sag attenuation, ohms.
    pub rho0: f64,
    /// Phase-A current rises by `surge_gain * sag`.
    pub surge_gain: f64,
    /// Phase-A voltage angle moves by `-angle_shift * sag` radians.
    pub angle_shift: f64,
    /// Healthy phases swell by `healthy_swing * sag`.
    pub healthy_swing: f64,
    /// Steady-state voltage drop per hop from the substation at 1.0 p.u. load.
    pub drop_per_hop: f64,
    /// Steady-state angle lag per hop at 1.0 p.u. load, radians.
    pub angle_per_hop: f64,
    /// Amplitude of the fixed per-bus, per-phase load imbalance.
    pub imbalance: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0025,
            base_depth: 0.6,
            beta: 0.35,
            rho0: 2.0,
            surge_gain: 2.0,
            angle_shift: 0.2,
            healthy_swing: 0.1,
            drop_per_hop: 0.002,
            angle_per_hop: 0.003,
            imbalance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Topology file; the bundled feeder when absent.
    pub topology: Option<PathBuf>,
    pub pmus: Vec<BusId>,
    pub fault_buses: Vec<BusId>,
    pub load_scales: Vec<f64>,
    pub resistances: Vec<f64>,
    pub record_samples: usize,
    pub onset: usize,
    pub duration: usize,
    pub window: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub physics: SurrogateParams,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl GeneratorConfig {
    /// 3 load levels x 25 fault locations, 25 PMUs.
    pub fn full() -> Self {
        Self {
            seed: 0,
            topology: None,
            pmus: bundled_pmu_configs()[&25].clone(),
            fault_buses: bundled_fault_buses(),
            load_scales: vec![0.7, 1.0, 1.3],
            resistances: vec![0.1, 1.0, 10.0],
            record_samples: 60,
            onset: 40,
            duration: 20,
            window: 20,
            train_fraction: 28.0 / 41.0,
            val_fraction: 7.0 / 41.0,
            physics: SurrogateParams::default(),
        }
    }

    /// 1 load level x 8 fault locations spread over the feeder.
    pub fn desk() -> Self {
        let all = bundled_fault_buses();
        let fault_buses = (0..8).map(|i| all[i * all.len() / 8]).collect();
        Self {
            load_scales: vec![1.0],
            fault_buses,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected full or desk)"
            ))),
        }
    }

    pub fn load_topology(&self) -> Result<Topology> {
        match &self.topology {
            Some(p) => Topology::load(p),
            None => Ok(Topology::ieee123()),
        }
    }

    pub fn windows_per_event(&self) -> usize {
        self.record_samples - self.window + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.pmus.len() < 2 {
            return bad("at least two PMUs are required");
        }
        if self.fault_buses.is_empty() || self.load_scales.is_empty() || self.resistances.is_empty() {
            return bad("fault_buses, load_scales and resistances must be non-empty");
        }
        if self.window == 0 || self.window > self.record_samples {
            return bad("window must lie in 1..=record_samples");
        }
        if self.duration == 0 || self.onset + self.duration > self.record_samples {
            return bad("fault interval must fit inside the record");
        }
        if self.resistances.iter().any(|r| *r < 0.0) || self.load_scales.iter().any(|l| *l <= 0.0) {
            return bad("resistances must be >= 0 and load scales > 0");
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(t > 0.0 && v >= 0.0 && t + v < 1.0) {
            return bad("split fractions must satisfy train > 0, val >= 0, train + val < 1");
        }
        let p = &self.physics;
        if p.noise_sigma < 0.0 || p.beta < 0.0 || p.rho0 <= 0.0 || !(0.0..1.0).contains(&p.base_depth) {
            return bad("physics: need noise_sigma >= 0, beta >= 0, rho0 > 0, base_depth in [0,1)");
        }
        Ok(())
    }

    /// Scenario grid: load-major, then fault location. Resistance cycles over
    /// locations, shifted by one per load level so every location meets every
    /// resistance across the load sweep.
    pub fn scenarios(&self) -> Vec<FaultScenario> {
        let mut out = Vec::new();
        for (li, &load) in self.load_scales.iter().enumerate() {
            for (fi, &bus) in self.fault_buses.iter().enumerate() {
                out.push(FaultScenario {
                    id: out.len(),
                    fault_bus: bus,
                    resistance: self.resistances[(fi + li) % self.resistances.len()],
                    load_scale: load,
                    onset: self.onset,
                    duration: self.duration,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultScenario {
    pub id: usize,
    pub fault_bus: BusId,
    pub resistance: f64,
    pub load_scale: f64,
    /// Fault start, in samples (1 sample = 1 ms).
    pub onset: usize,
    pub duration: usize,
}

/// Per-PMU samples, laid out `P x T x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub scenario: FaultScenario,
    pub pmus: Vec<BusId>,
    pub samples: usize,
    pub data: Vec<f64>,
}

impl EventRecord {
    pub fn at(&self, pmu: usize, t: usize, f: usize) -> f64 {
        self.data[(pmu * self.samples + t) * NUM_FEATURES + f]
    }
}

/// One labeled window over a node set, features laid out `N x S x F`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub features: Vec<f64>,
    pub label: u8,
    pub scenario_id: usize,
    pub offset: usize,
}

/// Phase-A sag fraction seen `hops` away from a fault of the given resistance.
pub fn sag_depth(p: &SurrogateParams, hops: usize, resistance: f64) -> f64 {
    p.base_depth / ((1.0 + p.beta * hops as f64) * (1.0 + resistance / p.rho0))
}

/// Deterministic value in [-1, 1] tied to a bus and phase.
fn bus_phase_offset(bus: BusId, phase: usize) -> f64 {
    let d = seed::derive(bus as u64, "imbalance", phase as u64);
    (d >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

/// Feeder quantities the generator needs, computed once per topology.
#[derive(Debug, Clone)]
pub struct FeederProfile {
    depth: BTreeMap<BusId, usize>,
    load_share: BTreeMap<BusId, f64>,
}

impl FeederProfile {
    pub fn new(topo: &Topology) -> Result<Self> {
        let source = if topo.contains(SUBSTATION_BUS) {
            SUBSTATION_BUS
        } else {
            topo.buses()[0]
        };
        let depth = topo.hop_distances(source)?;
        let sizes = topo.subtree_sizes(source)?;
        let total = topo.buses().len() as f64;
        let load_share = sizes.into_iter().map(|(b, s)| (b, s as f64 / total)).collect();
        Ok(Self { depth, load_share })
    }
}

/// Simulates one fault event at every listed PMU.
pub fn simulate_event<R: Rng + ?Sized>(
    topo: &Topology,
    profile: &FeederProfile,
    params: &SurrogateParams,
    scenario: &FaultScenario,
    samples: usize,
    pmus: &[BusId],
    rng: &mut R,
) -> Result<EventRecord> {
    if !topo.contains(scenario.fault_bus) {
        return Err(Error::Topology(format!(
            "fault bus {} is not on the feeder",
            scenario.fault_bus
        )));
    }
    if scenario.onset + scenario.duration > samples {
        return Err(Error::Config("fault interval exceeds the record".into()));
    }
    let hops = topo.hop_distances(scenario.fault_bus)?;
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let load = scenario.load_scale;
    let phase_angle = [
        0.0,
        -2.0 * std::f64::consts::FRAC_PI_3,
        2.0 * std::f64::consts::FRAC_PI_3,
    ];
    let mut data = Vec::with_capacity(pmus.len() * samples * NUM_FEATURES);
    for &bus in pmus {
        let d = *hops
            .get(&bus)
            .ok_or_else(|| Error::Topology(format!("PMU bus {bus} is unreachable from the fault")))?;
        let depth = *profile
            .depth
            .get(&bus)
            .ok_or_else(|| Error::Config(format!("PMU bus {bus} not on feeder")))? as f64;
        let share = profile.load_share[&bus];
        let mut v0 = [0.0; 3];
        let mut i0 = [0.0; 3];
        let mut a0 = [0.0; 3];
        for ph in 0..3 {
            let imb = params.imbalance * bus_phase_offset(bus, ph);
            v0[ph] = 1.0 - load * (params.drop_per_hop * depth + imb);
            i0[ph] = load * share * (1.0 + imb * 10.0);
            a0[ph] = phase_angle[ph] - load * params.angle_per_hop * depth;
        }
        let sag = sag_depth(params, d, scenario.resistance);
        for t in 0..samples {
            let (mut v, mut i, mut a) = (v0, i0, a0);
            if t >= scenario.onset && t < scenario.onset + scenario.duration {
                v[0] *= 1.0 - sag;
                i[0] *= 1.0 + params.surge_gain * sag;
                a[0] -= params.angle_shift * sag;
                for ph in 1..3 {
                    v[ph] *= 1.0 + params.healthy_swing * sag;
                    i[ph] *= 1.0 + 0.25 * params.healthy_swing * sag;
                }
            }
            for x in v.iter().chain(&i).chain(&a) {
                let n = if params.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                data.push(x + n);
            }
        }
    }
    Ok(EventRecord {
        scenario: scenario.clone(),
        pmus: pmus.to_vec(),
        samples,
        data,
    })
}

/// Label rule: a window is faulty iff it overlaps `[onset, onset+duration)`.
pub fn window_label(offset: usize, window: usize, onset: usize, duration: usize) -> u8 {
    u8::from(duration > 0 && offset < onset + duration && offset + window > onset)
}

/// All `samples - window + 1` sliding windows of one record.
pub fn slice_windows(rec: &EventRecord, window: usize, expected_samples: usize) -> Result<Vec<WindowSample>> {
    if rec.samples != expected_samples {
        return Err(Error::Data(format!(
            "record has {} samples, expected {expected_samples}",
            rec.samples
        )));
    }
    if window == 0 || window > rec.samples {
        return Err(Error::Data(format!(
            "window {window} does not fit {} samples",
            rec.samples
        )));
    }
    let p = rec.pmus.len();
    let sc = &rec.scenario;
    Ok((0..=rec.samples - window)
        .map(|off| {
            let mut features = Vec::with_capacity(p * window * NUM_FEATURES);
            for n in 0..p {
                let start = (n * rec.samples + off) * NUM_FEATURES;
                features.extend_from_slice(&rec.data[start..start + window * NUM_FEATURES]);
            }
            WindowSample {
                features,
                label: window_label(off, window, sc.onset, sc.duration),
                scenario_id: sc.id,
                offset: off,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Per-feature population mean and standard deviation over every node
    /// and step of `windows`. Constant features get std 1.
    pub fn fit(windows: &[WindowSample]) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::Data("cannot fit normalization on an empty split".into()));
        }
        let mut mean = vec![0.0; NUM_FEATURES];
        let mut count = 0usize;
        for w in windows {
            for row in w.features.chunks_exact(NUM_FEATURES) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                count += 1;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = [0.0; NUM_FEATURES];
        for w in windows {
            for row in w.features.chunks_exact(NUM_FEATURES) {
                for f in 0..NUM_FEATURES {
                    let c = row[f] - mean[f];
                    var[f] += c * c;
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, windows: &mut [WindowSample]) {
        for w in windows {
            for row in w.features.chunks_exact_mut(NUM_FEATURES) {
                for f in 0..NUM_FEATURES {
                    row[f] = (row[f] - self.mean[f]) / self.std[f];
                }
            }
        }
    }
}

/// Train/validation/test windows over one PMU node set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub pmu_buses: Vec<BusId>,
    pub steps: usize,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub norm: Normalization,
    pub scenarios: Vec<FaultScenario>,
    pub seed: u64,
}

/// Per-PMU and graph-level window counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub events: usize,
    pub graph_windows: usize,
    pub per_pmu_windows: usize,
    pub per_pmu_fault: usize,
    pub per_pmu_no_fault: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl DatasetSplit {
    pub fn nodes(&self) -> usize {
        self.pmu_buses.len()
    }

    pub fn all_windows(&self) -> impl Iterator<Item = &WindowSample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn counts(&self) -> DatasetCounts {
        let n = self.nodes();
        let faults = self.all_windows().filter(|w| w.label == 1).count();
        let total = self.train.len() + self.val.len() + self.test.len();
        DatasetCounts {
            events: self.scenarios.len(),
            graph_windows: total,
            per_pmu_windows: total * n,
            per_pmu_fault: faults * n,
            per_pmu_no_fault: (total - faults) * n,
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    /// SHA-256 over the manifest-relevant content: node set, stats, every
    /// window's metadata and features, in split order.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::new();
        for b in &self.pmu_buses {
            bytes.extend_from_slice(&b.to_le_bytes());
        }
        for v in self.norm.mean.iter().chain(&self.norm.std) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for w in self.all_windows() {
            bytes.extend_from_slice(&(w.scenario_id as u64).to_le_bytes());
            bytes.extend_from_slice(&(w.offset as u64).to_le_bytes());
            bytes.push(w.label);
            for v in &w.features {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// Simulates every scenario, slices, splits at graph-window level with a
/// seeded shuffle and normalizes with train-only statistics.
pub fn build_dataset(config: &GeneratorConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let topo = config.load_topology()?;
    for b in config.pmus.iter().chain(&config.fault_buses) {
        if !topo.contains(*b) {
            return Err(Error::Config(format!("bus {b} is not on the feeder")));
        }
    }
    let profile = FeederProfile::new(&topo)?;
    let scenarios = config.scenarios();
    let per_event: Vec<Vec<WindowSample>> = scenarios
        .par_iter()
        .map(|sc| {
            let mut rng = seed::rng(config.seed, "event", sc.id as u64);
            let rec = simulate_event(
                &topo,
                &profile,
                &config.physics,
                sc,
                config.record_samples,
                &config.pmus,
                &mut rng,
            )?;
            slice_windows(&rec, config.window, config.record_samples)
        })
        .collect::<Result<_>>()?;
    let mut all: Vec<WindowSample> = per_event.into_iter().flatten().collect();

    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut seed::rng(config.seed, "split", 0));
    let n = all.len();
    let n_train = ((n as f64) * config.train_fraction).round() as usize;
    let n_val = ((n as f64) * config.val_fraction).round() as usize;
    let mut slots: Vec<Option<WindowSample>> = all.drain(..).map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<WindowSample> {
        idx.iter()
            .map(|&i| slots[i].take().expect("each index used once"))
            .collect()
    };
    let mut train = take(&order[..n_train]);
    let mut val = take(&order[n_train..n_train + n_val]);
    let mut test = take(&order[n_train + n_val..]);

    let norm = Normalization::fit(&train)?;
    norm.apply(&mut train);
    norm.apply(&mut val);
    norm.apply(&mut test);
    Ok(DatasetSplit {
        pmu_buses: config.pmus.clone(),
        steps: config.window,
        train,
        val,
        test,
        norm,
        scenarios,
        seed: config.seed,
    })
}

/// Keeps only the rows of `cfg`'s buses (in ascending bus order) in every
/// window. Labels and normalization statistics are unchanged.
pub fn project_to_pmu_subset(split: &DatasetSplit, cfg: &[BusId]) -> Result<DatasetSplit> {
    let wanted: BTreeSet<BusId> = cfg.iter().copied().collect();
    let mut rows = Vec::with_capacity(wanted.len());
    for b in &wanted {
        let i = split
            .pmu_buses
            .iter()
            .position(|x| x == b)
            .ok_or_else(|| Error::Config(format!("bus {b} is not among the dataset's PMUs")))?;
        rows.push(i);
    }
    let per = split.steps * NUM_FEATURES;
    let project = |ws: &[WindowSample]| -> Vec<WindowSample> {
        ws.iter()
            .map(|w| {
                let mut features = Vec::with_capacity(rows.len() * per);
                for &r in &rows {
                    features.extend_from_slice(&w.features[r * per..(r + 1) * per]);
                }
                WindowSample { features, ..w.clone() }
            })
            .collect()
    };
    Ok(DatasetSplit {
        pmu_buses: wanted.into_iter().collect(),
        steps: split.steps,
        train: project(&split.train),
        val: project(&split.val),
        test: project(&split.test),
        norm: split.norm.clone(),
        scenarios: split.scenarios.clone(),
        seed: split.seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WindowMeta {
    scenario_id: usize,
    offset: usize,
    label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub pmu_buses: Vec<BusId>,
    pub steps: usize,
    pub feature_names: Vec<String>,
    /// Shape of each split file: windows x nodes x steps x features.
    pub shapes: BTreeMap<String, [usize; 4]>,
    pub file_sha256: BTreeMap<String, String>,
    pub content_sha256: String,
    pub normalization: Normalization,
    pub counts: DatasetCounts,
    pub scenarios: Vec<FaultScenario>,
    pub config: GeneratorConfig,
    windows: BTreeMap<String, Vec<WindowMeta>>,
}

const DATASET_FORMAT: &str = "gridfault-dataset-v1";
pub const DATASET_MANIFEST: &str = "dataset.json";

/// Writes `train.bin`, `val.bin`, `test.bin` (little-endian f64) and
/// `dataset.json` into `dir`.
pub fn save_dataset(split: &DatasetSplit, config: &GeneratorConfig, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut shapes = BTreeMap::new();
    let mut hashes = BTreeMap::new();
    let mut windows = BTreeMap::new();
    for (name, ws) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let mut bytes = Vec::with_capacity(ws.len() * split.nodes() * split.steps * NUM_FEATURES * 8);
        for w in ws {
            for v in &w.features {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hashes.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(dir.join(format!("{name}.bin")), &bytes)?;
        shapes.insert(name.to_string(), [ws.len(), split.nodes(), split.steps, NUM_FEATURES]);
        windows.insert(
            name.to_string(),
            ws.iter()
                .map(|w| WindowMeta {
                    scenario_id: w.scenario_id,
                    offset: w.offset,
                    label: w.label,
                })
                .collect(),
        );
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        seed: split.seed,
        pmu_buses: split.pmu_buses.clone(),
        steps: split.steps,
        feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        shapes,
        file_sha256: hashes,
        content_sha256: split.content_hash(),
        normalization: split.norm.clone(),
        counts: split.counts(),
        scenarios: split.scenarios.clone(),
        config: config.clone(),
        windows,
    };
    fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, DatasetManifest)> {
    let text = fs::read_to_string(dir.join(DATASET_MANIFEST))
        .map_err(|e| Error::Config(format!("no dataset in {}: {e}", dir.display())))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::Data(format!("unknown dataset format {:?}", manifest.format)));
    }
    let mut parts = BTreeMap::new();
    for name in ["train", "val", "test"] {
        let bytes = fs::read(dir.join(format!("{name}.bin")))?;
        if sha256_hex(&bytes) != manifest.file_sha256[name] {
            return Err(Error::Data(format!("{name}.bin does not match its manifest hash")));
        }
        let [w, n, s, f] = manifest.shapes[name];
        let per = n * s * f;
        if bytes.len() != w * per * 8 {
            return Err(Error::Data(format!("{name}.bin has the wrong length")));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let meta = &manifest.windows[name];
        let ws: Vec<WindowSample> = meta
            .iter()
            .enumerate()
            .map(|(k, m)| WindowSample {
                features: values[k * per..(k + 1) * per].to_vec(),
                label: m.label,
                scenario_id: m.scenario_id,
                offset: m.offset,
            })
            .collect();
        parts.insert(name, ws);
    }
    let split = DatasetSplit {
        pmu_buses: manifest.pmu_buses.clone(),
        steps: manifest.steps,
        train: parts.remove("train").unwrap_or_default(),
        val: parts.remove("val").unwrap_or_default(),
        test: parts.remove("test").unwrap_or_default(),
        norm: manifest.normalization.clone(),
        scenarios: manifest.scenarios.clone(),
        seed: manifest.seed,
    };
    if split.content_hash() != manifest.content_sha256 {
        return Err(Error::Data("dataset content does not match its manifest hash".into()));
    }
    Ok((split, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SurrogateParams {
        SurrogateParams {
            noise_sigma: 0.0,
            ..SurrogateParams::default()
        }
    }

    fn scenario(bus: BusId, r: f64) -> FaultScenario {
        FaultScenario {
            id: 0,
            fault_bus: bus,
            resistance: r,
            load_scale: 1.0,
            onset: 40,
            duration: 20,
        }
    }

    fn record(sc: &FaultScenario, params: &SurrogateParams) -> EventRecord {
        let topo = Topology::ieee123();
        let prof = FeederProfile::new(&topo).unwrap();
        let pmus = bundled_pmu_configs()[&25].clone();
        simulate_event(&topo, &prof, params, sc, 60, &pmus, &mut seed::rng(1, "t", 0)).unwrap()
    }

    #[test]
    fn higher_resistance_gives_shallower_sag_everywhere() {
        let lo = record(&scenario(47, 0.1), &quiet());
        let hi = record(&scenario(47, 10.0), &quiet());
        for p in 0..lo.pmus.len() {
            let sag_lo = lo.at(p, 0, 0) - lo.at(p, 50, 0);
            let sag_hi = hi.at(p, 0, 0) - hi.at(p, 50, 0);
            assert!(sag_hi < sag_lo, "pmu {}", lo.pmus[p]);
        }
    }

    #[test]
    fn deepest_sag_at_fault_bus() {
        let rec = record(&scenario(35, 1.0), &quiet());
        let rel = |p: usize| 1.0 - rec.at(p, 50, 0) / rec.at(p, 0, 0);
        let at_fault = rec.pmus.iter().position(|b| *b == 35).unwrap();
        for p in 0..rec.pmus.len() {
            if p != at_fault {
                assert!(rel(p) < rel(at_fault));
            }
        }
    }

    #[test]
    fn noiseless_healthy_record_is_constant() {
        let mut sc = scenario(13, 1.0);
        sc.duration = 0;
        let rec = record(&sc, &quiet());
        for p in 0..rec.pmus.len() {
            for t in 1..60 {
                for f in 0..NUM_FEATURES {
                    assert_eq!(rec.at(p, t, f), rec.at(p, 0, f));
                }
            }
        }
    }

    #[test]
    fn unknown_fault_bus_is_a_topology_error() {
        let topo = Topology::ieee123();
        let prof = FeederProfile::new(&topo).unwrap();
        let r = simulate_event(
            &topo,
            &prof,
            &quiet(),
            &scenario(9999, 1.0),
            60,
            &[1, 13],
            &mut seed::rng(0, "t", 0),
        );
        assert!(matches!(r, Err(Error::Topology(_))));
    }

    #[test]
    fn window_labels_match_protocol() {
        let rec = record(&scenario(13, 1.0), &SurrogateParams::default());
        let ws = slice_windows(&rec, 20, 60).unwrap();
        assert_eq!(ws.len(), 41);
        assert_eq!(ws[20].label, 0);
        assert_eq!(ws[21].label, 1);
        assert_eq!(ws.iter().filter(|w| w.label == 0).count(), 21);
        assert!(slice_windows(&rec, 20, 61).is_err());
    }

    #[test]
    fn desk_dataset_counts() {
        let split = build_dataset(&GeneratorConfig::desk()).unwrap();
        let c = split.counts();
        assert_eq!(c.graph_windows, 8 * 41);
        assert_eq!((c.train, c.val, c.test), (224, 56, 48));
    }
}
