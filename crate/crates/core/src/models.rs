//! The six detector families behind one forward/predict interface.
//!
//! Inputs are batches of `B` windows over the same `N` nodes, each window
//! `S x F` per node. They enter the GRU step-major: row
//! `t*(B*N) + b*N + n` holds step `t` of node `n` in window `b`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{BusId, PmuGraph};
use crate::layers::{
    maxpool_readout, BatchNormLayer, ClassifyHead, GatLayer, GatV2Layer, GcnLayer, GraphBatch, GruCell, GruVars,
    Params, SageAggregator, SageLayer,
};
use crate::seed::{self, hash_f64s};
use crate::tensor::{BatchNormState, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GruLocal,
    GruAgg,
    Rgcn,
    Rgsage,
    Rgat,
    Rgatv2,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::GruLocal,
        Family::GruAgg,
        Family::Rgcn,
        Family::Rgsage,
        Family::Rgat,
        Family::Rgatv2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::GruLocal => "gru_local",
            Family::GruAgg => "gru_agg",
            Family::Rgcn => "rgcn",
            Family::Rgsage => "rgsage",
            Family::Rgat => "rgat",
            Family::Rgatv2 => "rgatv2",
        }
    }

    pub fn has_gnn(self) -> bool {
        !matches!(self, Family::GruLocal | Family::GruAgg)
    }

    pub fn is_recurrent_only(self) -> bool {
        !self.has_gnn()
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Family::ALL
            .into_iter()
            .find(|f| f.name() == key)
            .or(match key.as_str() {
                "gru" => Some(Family::GruLocal),
                "gcn" => Some(Family::Rgcn),
                "sage" | "rgsage_max" | "rgsage_mean" => Some(Family::Rgsage),
                "gat" => Some(Family::Rgat),
                "gatv2" => Some(Family::Rgatv2),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown model family {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub input_dim: usize,
    pub hidden: usize,
    pub gnn_out: usize,
    pub gnn_layers: usize,
    /// Only meaningful (and only allowed) for `Rgsage`.
    pub sage_aggregator: Option<SageAggregator>,
    pub heads: usize,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(family: Family, input_dim: usize, seed: u64) -> Self {
        Self {
            family,
            input_dim,
            hidden: 128,
            gnn_out: 128,
            gnn_layers: 1,
            sage_aggregator: (family == Family::Rgsage).then_some(SageAggregator::Max),
            heads: 1,
            dropout: 0.2,
            attn_dropout: 0.1,
            seed,
        }
    }

    pub fn with_sizes(mut self, hidden: usize, gnn_out: usize) -> Self {
        self.hidden = hidden;
        self.gnn_out = gnn_out;
        self
    }

    /// Family name plus the aggregator for GraphSAGE, e.g. `rgsage-max`.
    pub fn label(&self) -> String {
        match self.sage_aggregator {
            Some(SageAggregator::Max) => "rgsage-max".into(),
            Some(SageAggregator::Mean) => "rgsage-mean".into(),
            None => self.family.name().into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.hidden == 0 || self.gnn_out == 0 {
            return bad("input, hidden and gnn_out sizes must be positive".into());
        }
        match (self.family, self.sage_aggregator) {
            (Family::Rgsage, None) => return bad("rgsage needs a sage_aggregator".into()),
            (f, Some(_)) if f != Family::Rgsage => {
                return bad(format!("sage_aggregator is only valid for rgsage, not {f}"))
            }
            _ => {}
        }
        if self.family.has_gnn() && self.gnn_layers == 0 {
            return bad("graph families need at least one gnn layer".into());
        }
        if self.heads != 1 {
            return bad(format!(
                "{} attention heads requested; only single-head attention is implemented",
                self.heads
            ));
        }
        for (name, p) in [("dropout", self.dropout), ("attn_dropout", self.attn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GnnLayer {
    Gcn(GcnLayer),
    Sage(SageLayer),
    Gat(GatLayer),
    GatV2(GatV2Layer),
}

impl GnnLayer {
    fn inner(&self) -> &dyn Params {
        match self {
            GnnLayer::Gcn(l) => l,
            GnnLayer::Sage(l) => l,
            GnnLayer::Gat(l) => l,
            GnnLayer::GatV2(l) => l,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Params {
        match self {
            GnnLayer::Gcn(l) => l,
            GnnLayer::Sage(l) => l,
            GnnLayer::Gat(l) => l,
            GnnLayer::GatV2(l) => l,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        graph: &GraphBatch,
        adj: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match self {
            GnnLayer::Gcn(l) => l.forward(tape, vars, x, adj),
            GnnLayer::Sage(l) => l.forward(tape, vars, x, graph),
            GnnLayer::Gat(l) => l.forward(tape, vars, x, graph, training, rng),
            GnnLayer::GatV2(l) => l.forward(tape, vars, x, graph, training, rng),
        }
    }
}

/// Message passing, then dropout, then batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnBlock {
    pub layer: GnnLayer,
    pub norm: BatchNormLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance {
    pub spec: ModelSpec,
    pub gru: GruCell,
    pub blocks: Vec<GnnBlock>,
    pub head: ClassifyHead,
    graph: PmuGraph,
}

impl ModelInstance {
    /// Deterministic construction from `ModelSpec::seed`.
    pub fn new(spec: ModelSpec, graph: PmuGraph) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(spec.seed, "init", 0);
        let gru = GruCell::new(spec.input_dim, spec.hidden, &mut rng);
        let mut blocks = Vec::new();
        if spec.family.has_gnn() {
            for k in 0..spec.gnn_layers {
                let (i, o) = (if k == 0 { spec.hidden } else { spec.gnn_out }, spec.gnn_out);
                let layer = match spec.family {
                    Family::Rgcn => GnnLayer::Gcn(GcnLayer::new(i, o, &mut rng)),
                    Family::Rgsage => {
                        GnnLayer::Sage(SageLayer::new(i, o, spec.sage_aggregator.expect("validated"), &mut rng))
                    }
                    Family::Rgat => GnnLayer::Gat(GatLayer::new(i, o, spec.attn_dropout, &mut rng)),
                    Family::Rgatv2 => GnnLayer::GatV2(GatV2Layer::new(i, o, spec.attn_dropout, &mut rng)),
                    Family::GruLocal | Family::GruAgg => unreachable!(),
                };
                blocks.push(GnnBlock {
                    layer,
                    norm: BatchNormLayer::new(o),
                });
            }
        }
        let head_in = if spec.family.has_gnn() {
            spec.gnn_out
        } else {
            spec.hidden
        };
        let head = ClassifyHead::new(head_in, &mut rng);
        Ok(Self {
            spec,
            gru,
            blocks,
            head,
            graph,
        })
    }

    pub fn graph(&self) -> &PmuGraph {
        &self.graph
    }

    pub fn nodes(&self) -> usize {
        self.graph.len()
    }

    /// Same parameters bound to another graph. GCN picks up the new
    /// normalized adjacency, the other layers the new neighbor lists; no
    /// parameter shape depends on the node count.
    pub fn rebind_graph(&self, graph: PmuGraph) -> ModelInstance {
        ModelInstance { graph, ..self.clone() }
    }

    /// All learnable tensors with dotted names, in binding order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.gru.param_names().into_iter().zip(self.gru.params()) {
            out.push((format!("gru.{n}"), t));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            let l = b.layer.inner();
            for (n, t) in l.param_names().into_iter().zip(l.params()) {
                out.push((format!("gnn{k}.{n}"), t));
            }
            for (n, t) in b.norm.param_names().into_iter().zip(b.norm.params()) {
                out.push((format!("gnn{k}.bn.{n}"), t));
            }
        }
        for (n, t) in self.head.param_names().into_iter().zip(self.head.params()) {
            out.push((format!("head.{n}"), t));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.gru.params_mut();
        for b in &mut self.blocks {
            out.extend(b.layer.inner_mut().params_mut());
            out.extend(b.norm.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every parameter on the tape in [`Self::named_params`] order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.named_params()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// SHA-256 over all parameters and batch-norm running statistics.
    pub fn checksum(&self) -> String {
        let params = self.named_params();
        let mut chunks: Vec<&[f64]> = params.iter().map(|(_, t)| t.data()).collect();
        for b in &self.blocks {
            chunks.push(&b.norm.state.running_mean);
            chunks.push(&b.norm.state.running_var);
        }
        hash_f64s(chunks)
    }

    /// Logits for a step-major batch of `batch` windows. Graph families
    /// return `B` logits; `GruLocal` returns `B*N` per-node logits.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        vars: &[Var],
        input: Var,
        steps: usize,
        batch: usize,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let n = self.graph.len();
        let rows = batch * n;
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 2 || shape[0] != steps * rows {
            return Err(Error::Binding {
                expected: n,
                got: if steps * batch == 0 {
                    0
                } else {
                    shape.first().copied().unwrap_or(0) / (steps * batch)
                },
            });
        }
        let mut cursor = 0;
        let mut take = |k: usize| {
            let s = &vars[cursor..cursor + k];
            cursor += k;
            s
        };
        let gv = GruVars::from_slice(take(4));
        let mut h = self.gru.forward(tape, gv, input, steps, rows, None)?;

        if self.spec.family == Family::GruLocal {
            return self.head.forward(tape, take(2), h);
        }
        if self.spec.family.has_gnn() {
            let gb = GraphBatch::new(&self.graph, batch);
            let adj = tape.constant(gb.norm_adj.clone());
            let p = self.spec.dropout;
            for block in &mut self.blocks {
                let nl = block.layer.inner().params().len();
                let lv = take(nl);
                h = block.layer.forward(tape, lv, h, &gb, adj, training, rng)?;
                h = tape.dropout(h, p, training, rng)?;
                let bv = take(2);
                h = block.norm.forward(tape, bv, h, training)?;
            }
        }
        let pooled = maxpool_readout(tape, h, n)?;
        self.head.forward(tape, take(2), pooled)
    }

    /// Eval-mode logits for a step-major input tensor.
    pub fn logits(&mut self, input: &Tensor, steps: usize, batch: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let mut rng = seed::rng(0, "eval", 0);
        let out = self.forward(&mut tape, &vars, x, steps, batch, false, &mut rng)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Training targets matching the forward output layout.
    pub fn expand_labels(&self, labels: &[f64]) -> Vec<f64> {
        if self.spec.family == Family::GruLocal {
            let n = self.graph.len();
            labels.iter().flat_map(|&y| std::iter::repeat_n(y, n)).collect()
        } else {
            labels.to_vec()
        }
    }

    /// Graph-level decisions from forward logits.
    pub fn decide(&self, logits: &[f64]) -> Vec<bool> {
        if self.spec.family == Family::GruLocal {
            logits.chunks(self.graph.len()).map(majority_vote).collect()
        } else {
            logits.iter().map(|&z| z > 0.0).collect()
        }
    }

    pub fn predict(&mut self, input: &Tensor, steps: usize, batch: usize) -> Result<Vec<bool>> {
        let z = self.logits(input, steps, batch)?;
        Ok(self.decide(&z))
    }

    /// Writes `<stem>.bin` / `<stem>.json`; returns the binary's SHA-256.
    pub fn save(&self, stem: &Path) -> Result<String> {
        let mut arrays: Vec<(String, Tensor)> = self.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
        for (k, b) in self.blocks.iter().enumerate() {
            let f = b.norm.state.running_mean.len();
            arrays.push((
                format!("gnn{k}.bn.running_mean"),
                Tensor::new(vec![f], b.norm.state.running_mean.clone())?,
            ));
            arrays.push((
                format!("gnn{k}.bn.running_var"),
                Tensor::new(vec![f], b.norm.state.running_var.clone())?,
            ));
        }
        let refs: Vec<(String, &Tensor)> = arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        let meta = serde_json::json!({
            "spec": self.spec,
            "seed": self.spec.seed,
            "pmu_buses": self.graph.pmu_buses(),
            "edges": self.graph.edges(),
        });
        checkpoint::save(stem, &refs, meta)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, arrays) = checkpoint::load(stem)?;
        let spec: ModelSpec = serde_json::from_value(manifest.meta["spec"].clone())?;
        let buses: Vec<BusId> = serde_json::from_value(manifest.meta["pmu_buses"].clone())?;
        let edges: Vec<(usize, usize)> = serde_json::from_value(manifest.meta["edges"].clone())?;
        let graph = PmuGraph::from_edges(buses, &edges)?;
        let mut model = ModelInstance::new(spec, graph)?;
        let lookup = |name: &str| {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Data(format!("checkpoint lacks array {name}")))
        };
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = lookup(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        for (k, b) in model.blocks.iter_mut().enumerate() {
            b.norm.state = BatchNormState {
                running_mean: lookup(&format!("gnn{k}.bn.running_mean"))?.into_data(),
                running_var: lookup(&format!("gnn{k}.bn.running_var"))?.into_data(),
            };
        }
        Ok(model)
    }
}

/// Fault iff strictly more than half the nodes vote fault; ties are no-fault.
pub fn majority_vote(node_logits: &[f64]) -> bool {
    let votes = node_logits.iter().filter(|&&z| z > 0.0).count();
    2 * votes > node_logits.len()
}

/// Packs windows laid out `N x S x F` (row-major) into the step-major
/// `(S*B*N) x F` layout the GRU consumes.
pub fn step_major(windows: &[&[f64]], nodes: usize, steps: usize, features: usize) -> Result<Tensor> {
    let b = windows.len();
    let per = nodes * steps * features;
    let mut out = vec![0.0; b * per];
    for (w, win) in windows.iter().enumerate() {
        if win.len() != per {
            return Err(Error::Dimension(format!(
                "window has {} values, expected {nodes}x{steps}x{features}",
                win.len()
            )));
        }
        for n in 0..nodes {
            for t in 0..steps {
                let src = (n * steps + t) * features;
                let dst = ((t * b + w) * nodes + n) * features;
                out[dst..dst + features].copy_from_slice(&win[src..src + features]);
            }
        }
    }
    Tensor::new(vec![steps * b * nodes, features], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> PmuGraph {
        PmuGraph::from_edges(vec![1, 2, 3], &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn majority_vote_rules() {
        assert!(majority_vote(&[1.0, 1.0, -1.0]));
        assert!(!majority_vote(&[1.0, -1.0]));
        assert!(!majority_vote(&[-2.0]));
        assert!(!majority_vote(&[0.0, 0.0, 1.0]));
    }

    #[test]
    fn family_parsing() {
        for f in Family::ALL {
            assert_eq!(f.name().parse::<Family>().unwrap(), f);
        }
        assert_eq!("RGATv2".parse::<Family>().unwrap(), Family::Rgatv2);
        assert!("lstm".parse::<Family>().is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = ModelSpec::new(Family::Rgcn, 9, 0);
        assert!(s.validate().is_ok());
        s.sage_aggregator = Some(SageAggregator::Mean);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = ModelSpec::new(Family::Rgat, 9, 0);
        s.heads = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn step_major_layout() {
        // 2 windows, 2 nodes, 2 steps, 1 feature; value = 100w + 10n + t
        let w0 = [0.0, 1.0, 10.0, 11.0];
        let w1 = [100.0, 101.0, 110.0, 111.0];
        let t = step_major(&[&w0, &w1], 2, 2, 1).unwrap();
        assert_eq!(t.data(), &[0.0, 10.0, 100.0, 110.0, 1.0, 11.0, 101.0, 111.0]);
    }

    #[test]
    fn every_family_runs_and_shapes_match() {
        let g = path3();
        for f in Family::ALL {
            let spec = ModelSpec::new(f, 2, 3).with_sizes(4, 3);
            let mut m = ModelInstance::new(spec, g.clone()).unwrap();
            let input = Tensor::full(&[5 * 2 * 3, 2], 0.3);
            let z = m.logits(&input, 5, 2).unwrap();
            let expect = if f == Family::GruLocal { 6 } else { 2 };
            assert_eq!(z.len(), expect, "{f}");
            assert_eq!(m.decide(&z).len(), 2);
        }
    }

    #[test]
    fn node_count_mismatch_is_a_binding_error() {
        let mut m = ModelInstance::new(ModelSpec::new(Family::Rgatv2, 2, 0).with_sizes(3, 3), path3()).unwrap();
        let input = Tensor::zeros(&[5 * 4, 2]);
        assert!(matches!(m.logits(&input, 5, 1), Err(Error::Binding { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = ModelInstance::new(ModelSpec::new(Family::Rgsage, 2, 9).with_sizes(4, 4), path3()).unwrap();
        m.blocks[0].norm.state.running_mean[1] = 0.25;
        let stem = dir.path().join("model");
        m.save(&stem).unwrap();
        let back = ModelInstance::load(&stem).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }
}
