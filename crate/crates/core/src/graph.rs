//! Feeder topology and the measured-bus graph the GNN layers run on.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type BusId = u32;

pub const NOMINAL_VOLTAGE_V: f64 = 13_200.0;
pub const FREQUENCY_HZ: f64 = 60.0;

const BUNDLED_TOPOLOGY: &str = include_str!("../data/ieee123.topo");
const BUNDLED_PMU_CONFIGS: &str = include_str!("../data/pmu_configs.json");
const BUNDLED_FAULT_BUSES: &str = include_str!("../data/fault_buses.json");

/// A simple, connected feeder graph over bus ids.
#[derive(Debug, Clone)]
pub struct Topology {
    buses: Vec<BusId>,
    edges: Vec<(BusId, BusId)>,
    index: HashMap<BusId, usize>,
    adjacency: Vec<Vec<usize>>,
    pub nominal_voltage: f64,
    pub frequency: f64,
}

impl Topology {
    pub fn new(buses: Vec<BusId>, edges: Vec<(BusId, BusId)>) -> Result<Self> {
        let mut sorted = buses.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != buses.len() {
            return Err(Error::Topology("duplicate bus declaration".into()));
        }
        let index: HashMap<BusId, usize> = sorted.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        let mut seen = BTreeSet::new();
        let mut adjacency = vec![Vec::new(); sorted.len()];
        let mut canon = Vec::with_capacity(edges.len());
        for &(a, b) in &edges {
            if a == b {
                return Err(Error::Topology(format!("self-loop at bus {a}")));
            }
            let (ia, ib) = match (index.get(&a), index.get(&b)) {
                (Some(ia), Some(ib)) => (*ia, *ib),
                _ => return Err(Error::Topology(format!("edge {a}-{b} uses an undeclared bus"))),
            };
            let key = (a.min(b), a.max(b));
            if !seen.insert(key) {
                return Err(Error::Topology(format!("duplicate edge {}-{}", key.0, key.1)));
            }
            adjacency[ia].push(ib);
            adjacency[ib].push(ia);
            canon.push(key);
        }
        adjacency.iter_mut().for_each(|n| n.sort_unstable());
        canon.sort_unstable();
        let topo = Self {
            buses: sorted,
            edges: canon,
            index,
            adjacency,
            nominal_voltage: NOMINAL_VOLTAGE_V,
            frequency: FREQUENCY_HZ,
        };
        if !topo.buses.is_empty() && topo.hops_from_index(0).iter().any(Option::is_none) {
            return Err(Error::Topology("feeder is not connected".into()));
        }
        Ok(topo)
    }

    /// Parses `bus <id>` / `edge <id> <id>` records; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut buses = Vec::new();
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let id = |s: &str| {
                s.parse::<BusId>()
                    .map_err(|_| Error::Topology(format!("line {}: bad bus id {s:?}", lineno + 1)))
            };
            match fields.as_slice() {
                ["bus", b] => buses.push(id(b)?),
                ["edge", a, b] => edges.push((id(a)?, id(b)?)),
                _ => {
                    return Err(Error::Topology(format!(
                        "line {}: unrecognized record {line:?}",
                        lineno + 1
                    )))
                }
            }
        }
        Self::new(buses, edges)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The bundled IEEE 123-node feeder connectivity.
    pub fn ieee123() -> Self {
        Self::parse(BUNDLED_TOPOLOGY).expect("bundled topology is valid")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.buses {
            out.push_str(&format!("bus {b}\n"));
        }
        for (a, b) in &self.edges {
            out.push_str(&format!("edge {a} {b}\n"));
        }
        out
    }

    pub fn buses(&self) -> &[BusId] {
        &self.buses
    }

    pub fn edges(&self) -> &[(BusId, BusId)] {
        &self.edges
    }

    pub fn contains(&self, bus: BusId) -> bool {
        self.index.contains_key(&bus)
    }

    pub fn index_of(&self, bus: BusId) -> Result<usize> {
        self.index
            .get(&bus)
            .copied()
            .ok_or_else(|| Error::Config(format!("bus {bus} is not in the topology")))
    }

    pub fn neighbors(&self, bus: BusId) -> Result<Vec<BusId>> {
        let i = self.index_of(bus)?;
        Ok(self.adjacency[i].iter().map(|&j| self.buses[j]).collect())
    }

    fn hops_from_index(&self, start: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.buses.len()];
        let mut queue = VecDeque::from([start]);
        dist[start] = Some(0);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for &w in &self.adjacency[u] {
                if dist[w].is_none() {
                    dist[w] = Some(du + 1);
                    queue.push_back(w);
                }
            }
        }
        dist
    }

    /// Hop distance from `bus` to every bus, keyed by bus id.
    pub fn hop_distances(&self, bus: BusId) -> Result<BTreeMap<BusId, usize>> {
        let start = self.index_of(bus)?;
        let dist = self.hops_from_index(start);
        Ok(self
            .buses
            .iter()
            .zip(dist)
            .filter_map(|(b, d)| d.map(|d| (*b, d)))
            .collect())
    }

    /// Number of buses in the subtree hanging below `bus` when the feeder is
    /// rooted at `source` (the bus itself included).
    pub fn subtree_sizes(&self, source: BusId) -> Result<BTreeMap<BusId, usize>> {
        let root = self.index_of(source)?;
        let mut order = Vec::with_capacity(self.buses.len());
        let mut parent = vec![usize::MAX; self.buses.len()];
        let mut visited = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &w in &self.adjacency[u] {
                if !visited[w] {
                    visited[w] = true;
                    parent[w] = u;
                    queue.push_back(w);
                }
            }
        }
        let mut size = vec![1usize; self.buses.len()];
        for &u in order.iter().rev() {
            if parent[u] != usize::MAX {
                size[parent[u]] += size[u];
            }
        }
        Ok(self.buses.iter().zip(size).map(|(b, s)| (*b, s)).collect())
    }
}

/// Graph over measured buses. Node `i` is `pmu_buses()[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PmuGraph {
    pmu_buses: Vec<BusId>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl PmuGraph {
    /// Builds a graph from node labels and index pairs. Node order is kept as
    /// given; edges are undirected and must be simple.
    pub fn from_edges(pmu_buses: Vec<BusId>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = pmu_buses.len();
        if n == 0 {
            return Err(Error::EmptyGraph("graph with no nodes".into()));
        }
        let mut seen = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Construction(format!(
                    "edge ({a},{b}) out of range for {n} nodes"
                )));
            }
            if a == b {
                return Err(Error::Construction(format!("self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Construction(format!("duplicate edge ({a},{b})")));
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        neighbors.iter_mut().for_each(|v| v.sort_unstable());
        if n > 1 {
            if let Some(iso) = neighbors.iter().position(Vec::is_empty) {
                return Err(Error::Construction(format!("node {iso} is isolated")));
            }
        }
        Ok(Self {
            pmu_buses,
            edges: seen.into_iter().collect(),
            neighbors,
        })
    }

    pub fn len(&self) -> usize {
        self.pmu_buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pmu_buses.is_empty()
    }

    pub fn pmu_buses(&self) -> &[BusId] {
        &self.pmu_buses
    }

    /// Undirected edges as `(i, j)` with `i < j`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Edges expressed as bus-id pairs, smaller id first.
    pub fn bus_edges(&self) -> BTreeSet<(BusId, BusId)> {
        self.edges
            .iter()
            .map(|&(i, j)| {
                let (a, b) = (self.pmu_buses[i], self.pmu_buses[j]);
                (a.min(b), a.max(b))
            })
            .collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn adjacency(&self) -> Tensor {
        let n = self.len();
        let mut a = Tensor::zeros(&[n, n]);
        let data = a.data_mut();
        for &(i, j) in &self.edges {
            data[i * n + j] = 1.0;
            data[j * n + i] = 1.0;
        }
        a
    }

    pub fn degree_matrix(&self) -> Tensor {
        let n = self.len();
        let mut d = Tensor::zeros(&[n, n]);
        let data = d.data_mut();
        for i in 0..n {
            data[i * n + i] = self.degree(i) as f64;
        }
        d
    }

    /// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
    pub fn normalized_adjacency(&self) -> Tensor {
        let n = self.len();
        let deg: Vec<f64> = (0..n).map(|i| (self.degree(i) + 1) as f64).collect();
        let mut a = Tensor::zeros(&[n, n]);
        let data = a.data_mut();
        for i in 0..n {
            data[i * n + i] = 1.0 / deg[i];
            for &j in &self.neighbors[i] {
                data[i * n + j] = 1.0 / (deg[i] * deg[j]).sqrt();
            }
        }
        a
    }

    /// Sorted neighbor indices per node, self excluded.
    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbors
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in perm.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::Usage("permutation is not a bijection".into()));
            }
            inverse[old] = new;
        }
        if perm.len() != n {
            return Err(Error::Usage("permutation length mismatch".into()));
        }
        let buses = perm.iter().map(|&o| self.pmu_buses[o]).collect();
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(a, b)| (inverse[a], inverse[b])).collect();
        Self::from_edges(buses, &edges)
    }
}

/// Induces the measured-bus graph by contracting unmeasured buses: PMUs `u`
/// and `v` are adjacent iff the feeder path between them passes through no
/// other PMU. Nodes are ordered by ascending bus id.
pub fn induce_pmu_graph(topo: &Topology, pmus: &[BusId]) -> Result<PmuGraph> {
    let mut buses: Vec<BusId> = pmus.to_vec();
    buses.sort_unstable();
    buses.dedup();
    if buses.len() < 2 {
        return Err(Error::Config("a PMU graph needs at least two PMUs".into()));
    }
    let topo_idx: Vec<usize> = buses.iter().map(|b| topo.index_of(*b)).collect::<Result<_>>()?;
    let node_of: HashMap<usize, usize> = topo_idx.iter().enumerate().map(|(n, t)| (*t, n)).collect();

    let mut edges = BTreeSet::new();
    for (u, &start) in topo_idx.iter().enumerate() {
        // BFS that stops at other PMUs: every PMU reached is a contracted neighbor.
        let mut visited = vec![false; topo.buses.len()];
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(x) = queue.pop_front() {
            for &w in &topo.adjacency[x] {
                if visited[w] {
                    continue;
                }
                visited[w] = true;
                match node_of.get(&w) {
                    Some(&v) => {
                        edges.insert((u.min(v), u.max(v)));
                    }
                    None => queue.push_back(w),
                }
            }
        }
    }
    let edges: Vec<(usize, usize)> = edges.into_iter().collect();
    let graph = PmuGraph::from_edges(buses, &edges).map_err(|e| match e {
        Error::Construction(m) => Error::Construction(format!("induced PMU graph: {m}")),
        other => other,
    })?;
    if !is_connected(&graph) {
        return Err(Error::Construction("induced PMU graph is disconnected".into()));
    }
    Ok(graph)
}

fn is_connected(g: &PmuGraph) -> bool {
    let mut seen = vec![false; g.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &w in &g.neighbors[u] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// The five measurement configurations (7, 11, 15, 19, 25 PMUs), keyed by size.
pub fn bundled_pmu_configs() -> BTreeMap<usize, Vec<BusId>> {
    let raw: BTreeMap<String, Vec<BusId>> =
        serde_json::from_str(BUNDLED_PMU_CONFIGS).expect("bundled PMU configs are valid JSON");
    raw.into_iter()
        .map(|(k, v)| (k.parse().expect("numeric key"), v))
        .collect()
}

pub fn bundled_fault_buses() -> Vec<BusId> {
    serde_json::from_str(BUNDLED_FAULT_BUSES).expect("bundled fault buses are valid JSON")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Topology {
        Topology::parse("bus 1\nbus 2\nbus 3\nedge 1 2\nedge 2 3 # line\n").unwrap()
    }

    #[test]
    fn parse_rejects_bad_input() {
        assert!(Topology::parse("bus 1\nedge 1 1\n").is_err());
        assert!(Topology::parse("bus 1\nbus 2\nedge 1 3\n").is_err());
        assert!(Topology::parse("bus 1\nbus 2\nedge 1 2\nedge 2 1\n").is_err());
        assert!(Topology::parse("bus 1\nbus 2\n").is_err());
        assert!(Topology::parse("node 1\n").is_err());
    }

    #[test]
    fn bundled_feeder_is_a_tree_containing_every_table_bus() {
        let topo = Topology::ieee123();
        assert_eq!(topo.edges().len() + 1, topo.buses().len());
        for b in bundled_pmu_configs()
            .values()
            .flatten()
            .chain(bundled_fault_buses().iter())
        {
            assert!(topo.contains(*b), "bus {b} missing");
        }
        assert_eq!(topo.nominal_voltage, 13_200.0);
        assert_eq!(topo.frequency, 60.0);
        let round = Topology::parse(&topo.to_text()).unwrap();
        assert_eq!(round.edges(), topo.edges());
    }

    #[test]
    fn contraction_of_unmeasured_bus() {
        let g = induce_pmu_graph(&path3(), &[3, 1]).unwrap();
        assert_eq!(g.pmu_buses(), &[1, 3]);
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn all_buses_measured_gives_feeder_edges() {
        let topo = Topology::ieee123();
        let g = induce_pmu_graph(&topo, topo.buses()).unwrap();
        let expected: BTreeSet<_> = topo.edges().iter().copied().collect();
        assert_eq!(g.bus_edges(), expected);
    }

    #[test]
    fn induce_errors() {
        assert!(matches!(induce_pmu_graph(&path3(), &[1, 9]), Err(Error::Config(_))));
        assert!(matches!(induce_pmu_graph(&path3(), &[1]), Err(Error::Config(_))));
    }

    #[test]
    fn normalized_adjacency_hand_cases() {
        let two = PmuGraph::from_edges(vec![1, 2], &[(0, 1)]).unwrap();
        assert_eq!(two.normalized_adjacency().data(), &[0.5, 0.5, 0.5, 0.5]);

        let star = PmuGraph::from_edges(vec![1, 2, 3], &[(0, 1), (0, 2)]).unwrap();
        let a = star.normalized_adjacency();
        assert!((a.at(0, 1) - 1.0 / (3.0f64 * 2.0).sqrt()).abs() < 1e-15);
        assert_eq!(a.at(1, 2), 0.0);
    }

    #[test]
    fn neighbor_lists_two_nodes() {
        let two = PmuGraph::from_edges(vec![1, 2], &[(0, 1)]).unwrap();
        assert_eq!(two.neighbor_lists(), &[vec![1], vec![0]]);
    }

    #[test]
    fn isolated_nodes_rejected() {
        assert!(matches!(
            PmuGraph::from_edges(vec![1, 2, 3], &[(0, 1)]),
            Err(Error::Construction(_))
        ));
        assert!(PmuGraph::from_edges(vec![7], &[]).is_ok());
    }

    #[test]
    fn subtree_sizes_on_path() {
        let s = path3().subtree_sizes(1).unwrap();
        assert_eq!(s[&1], 3);
        assert_eq!(s[&3], 1);
    }
}
