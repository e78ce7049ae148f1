use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{uniform_init, Activation, Params, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::graph::PmuGraph;
use crate::tensor::{Tape, Tensor, Var};

/// Index structures for `batch` stacked copies of one graph.
///
/// Node `i` of graph `b` is row `b*n + i`. Message edges are directed
/// `src -> dst` pairs over both directions of every undirected edge;
/// attention edges additionally contain one self-loop per node.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub nodes: usize,
    pub batch: usize,
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub attn_src: Arc<[usize]>,
    pub attn_dst: Arc<[usize]>,
    /// `1/|N(v)|` per row (0 for isolated nodes).
    pub inv_degree: Tensor,
    /// Graph index of every row.
    pub graph_of_row: Vec<usize>,
    pub norm_adj: Tensor,
    has_isolated: bool,
}

impl GraphBatch {
    pub fn new(graph: &PmuGraph, batch: usize) -> Self {
        let n = graph.len();
        let nbrs = graph.neighbor_lists();
        let (mut src, mut dst, mut asrc, mut adst) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut inv_degree = Vec::with_capacity(n * batch);
        for b in 0..batch {
            let off = b * n;
            for (v, list) in nbrs.iter().enumerate() {
                // self-loop first, then neighbors in ascending order
                asrc.push(off + v);
                adst.push(off + v);
                for &u in list {
                    src.push(off + u);
                    dst.push(off + v);
                    asrc.push(off + u);
                    adst.push(off + v);
                }
                inv_degree.push(if list.is_empty() { 0.0 } else { 1.0 / list.len() as f64 });
            }
        }
        Self {
            nodes: n,
            batch,
            src: src.into(),
            dst: dst.into(),
            attn_src: asrc.into(),
            attn_dst: adst.into(),
            inv_degree: Tensor::from_parts(vec![n * batch], inv_degree),
            graph_of_row: (0..n * batch).map(|r| r / n).collect(),
            norm_adj: graph.normalized_adjacency(),
            has_isolated: nbrs.iter().any(Vec::is_empty),
        }
    }

    pub fn rows(&self) -> usize {
        self.nodes * self.batch
    }

    fn check_rows(&self, tape: &Tape, x: Var, in_dim: usize, what: &str) -> Result<()> {
        let s = tape.value(x).shape();
        if s != [self.rows(), in_dim] {
            return Err(Error::Dimension(format!(
                "{what}: input {s:?}, expected [{}, {in_dim}]",
                self.rows()
            )));
        }
        Ok(())
    }
}

/// `phi(A_hat H W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: Tensor,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(&[in_dim, out_dim], in_dim, rng),
            activation: Activation::Relu,
        }
    }

    /// `adj` is the `N x N` normalized adjacency, applied block-wise.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, adj: Var) -> Result<Var> {
        let hw = tape.matmul(x, vars[0])?;
        let out = tape.block_matmul(adj, hw)?;
        self.activation.apply(tape, out)
    }
}

impl Params for GcnLayer {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight"]
    }
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SageAggregator {
    Mean,
    Max,
}

/// `phi(W . concat(h_v, AGG{h_u : u in N(v)}))`, full neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    pub weight: Tensor,
    pub aggregator: SageAggregator,
    pub activation: Activation,
}

impl SageLayer {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, aggregator: SageAggregator, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(&[2 * in_dim, out_dim], 2 * in_dim, rng),
            aggregator,
            activation: Activation::Relu,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, graph: &GraphBatch) -> Result<Var> {
        let in_dim = self.weight.rows() / 2;
        graph.check_rows(tape, x, in_dim, "sage")?;
        if graph.has_isolated {
            return Err(Error::DegenerateNeighborhood("sage: node without neighbors".into()));
        }
        let msgs = tape.gather_rows(x, graph.src.clone())?;
        let agg = match self.aggregator {
            SageAggregator::Mean => {
                let summed = tape.segment_sum(msgs, graph.dst.clone(), graph.rows())?;
                let inv = tape.constant(graph.inv_degree.clone());
                tape.scale_rows(summed, inv)?
            }
            SageAggregator::Max => tape.segment_max(msgs, &graph.dst, graph.rows())?,
        };
        let cat = tape.concat(&[x, agg], 1)?;
        let out = tape.matmul(cat, vars[0])?;
        self.activation.apply(tape, out)
    }
}

impl Params for SageLayer {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight"]
    }
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight]
    }
}

/// Attention aggregation shared by both GAT variants: softmax of `scores`
/// over each destination's attention neighborhood, optional dropout on the
/// coefficients, then the weighted sum of `messages[src]`.
fn attend<R: Rng + ?Sized>(
    tape: &mut Tape,
    graph: &GraphBatch,
    scores: Var,
    messages: Var,
    attn_dropout: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let e = tape.value(scores).len();
    let scores = tape.reshape(scores, &[e])?;
    let alpha = tape.segment_softmax(scores, graph.attn_dst.clone(), graph.rows())?;
    let alpha_d = tape.dropout(alpha, attn_dropout, training, rng)?;
    let m = tape.gather_rows(messages, graph.attn_src.clone())?;
    let weighted = tape.scale_rows(m, alpha_d)?;
    let out = tape.segment_sum(weighted, graph.attn_dst.clone(), graph.rows())?;
    Ok((out, alpha))
}

/// Original graph attention:
/// `e_vu = LeakyReLU(a . concat(W h_v, W h_u))`, `h'_v = phi(sum alpha_vu W h_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub weight: Tensor,
    /// First half scores the destination, second half the source.
    pub attention: Tensor,
    pub slope: f64,
    pub attn_dropout: f64,
    pub activation: Activation,
}

impl GatLayer {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, attn_dropout: f64, rng: &mut R) -> Self {
        Self {
            weight: uniform_init(&[in_dim, out_dim], in_dim, rng),
            attention: uniform_init(&[2 * out_dim], 2 * out_dim, rng),
            slope: DEFAULT_LEAKY_SLOPE,
            attn_dropout,
            activation: Activation::Relu,
        }
    }

    /// Returns the layer output and the attention coefficients (one per
    /// attention edge, ordered as `graph.attn_src`/`attn_dst`).
    pub fn forward_with_attention<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        graph: &GraphBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        graph.check_rows(tape, x, self.weight.rows(), "gat")?;
        let out_dim = self.weight.cols();
        let z = tape.matmul(x, vars[0])?;
        let a = tape.reshape(vars[1], &[2 * out_dim, 1])?;
        let a_dst = tape.slice2(a, 0..out_dim, 0..1)?;
        let a_src = tape.slice2(a, out_dim..2 * out_dim, 0..1)?;
        let s_dst = tape.matmul(z, a_dst)?;
        let s_src = tape.matmul(z, a_src)?;
        let e_dst = tape.gather_rows(s_dst, graph.attn_dst.clone())?;
        let e_src = tape.gather_rows(s_src, graph.attn_src.clone())?;
        let e = tape.add(e_dst, e_src)?;
        let e = tape.leaky_relu(e, self.slope)?;
        let (out, alpha) = attend(tape, graph, e, z, self.attn_dropout, training, rng)?;
        Ok((self.activation.apply(tape, out)?, alpha))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        graph: &GraphBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        Ok(self.forward_with_attention(tape, vars, x, graph, training, rng)?.0)
    }
}

impl Params for GatLayer {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["weight", "attention"]
    }
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.attention]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.attention]
    }
}

/// Attention with separate target/source transforms and the nonlinearity
/// inside the score: `e_vu = a . LeakyReLU(W1 h_v + W2 h_u)`,
/// `h'_v = phi(sum alpha_vu W2 h_u)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatV2Layer {
    /// Applied to the destination node `v`.
    pub w_target: Tensor,
    /// Applied to the neighbor `u`; also produces the messages.
    pub w_source: Tensor,
    pub attention: Tensor,
    pub slope: f64,
    pub attn_dropout: f64,
    pub activation: Activation,
}

impl GatV2Layer {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, attn_dropout: f64, rng: &mut R) -> Self {
        Self {
            w_target: uniform_init(&[in_dim, out_dim], in_dim, rng),
            w_source: uniform_init(&[in_dim, out_dim], in_dim, rng),
            attention: uniform_init(&[out_dim], out_dim, rng),
            slope: DEFAULT_LEAKY_SLOPE,
            attn_dropout,
            activation: Activation::Relu,
        }
    }

    pub fn forward_with_attention<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        graph: &GraphBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        graph.check_rows(tape, x, self.w_target.rows(), "gatv2")?;
        let out_dim = self.w_target.cols();
        let p = tape.matmul(x, vars[0])?;
        let q = tape.matmul(x, vars[1])?;
        let pe = tape.gather_rows(p, graph.attn_dst.clone())?;
        let qe = tape.gather_rows(q, graph.attn_src.clone())?;
        let pre = tape.add(pe, qe)?;
        let act = tape.leaky_relu(pre, self.slope)?;
        let a = tape.reshape(vars[2], &[out_dim, 1])?;
        let e = tape.matmul(act, a)?;
        let (out, alpha) = attend(tape, graph, e, q, self.attn_dropout, training, rng)?;
        Ok((self.activation.apply(tape, out)?, alpha))
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        graph: &GraphBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        Ok(self.forward_with_attention(tape, vars, x, graph, training, rng)?.0)
    }
}

impl Params for GatV2Layer {
    fn param_names(&self) -> Vec<&'static str> {
        vec!["w_target", "w_source", "attention"]
    }
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.w_target, &self.w_source, &self.attention]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w_target, &mut self.w_source, &mut self.attention]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_nodes() -> PmuGraph {
        PmuGraph::from_edges(vec![1, 2], &[(0, 1)]).unwrap()
    }

    #[test]
    fn gcn_single_node_identity() {
        let g = PmuGraph::from_edges(vec![1], &[]).unwrap();
        let batch = GraphBatch::new(&g, 1);
        let layer = GcnLayer {
            weight: Tensor::eye(3),
            activation: Activation::Identity,
        };
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.5]).unwrap());
        let adj = tape.constant(batch.norm_adj.clone());
        let out = layer.forward(&mut tape, &vars, x, adj).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn gcn_two_nodes_averages_rows() {
        let batch = GraphBatch::new(&two_nodes(), 1);
        let layer = GcnLayer {
            weight: Tensor::eye(2),
            activation: Activation::Identity,
        };
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 4.0, 3.0, -2.0]).unwrap());
        let adj = tape.constant(batch.norm_adj.clone());
        let out = layer.forward(&mut tape, &vars, x, adj).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn sage_mean_with_stacked_identity() {
        let batch = GraphBatch::new(&two_nodes(), 1);
        let mut w = vec![0.0; 8];
        // [I; I] as a 4x2 matrix
        w[0] = 1.0;
        w[3] = 1.0;
        w[4] = 1.0;
        w[7] = 1.0;
        let layer = SageLayer {
            weight: Tensor::matrix(4, 2, w).unwrap(),
            aggregator: SageAggregator::Mean,
            activation: Activation::Identity,
        };
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, false);
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 4.0, 3.0, -2.0]).unwrap());
        let out = layer.forward(&mut tape, &vars, x, &batch).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, 2.0, 4.0, 2.0]);

        let max_layer = SageLayer {
            aggregator: SageAggregator::Max,
            ..layer.clone()
        };
        let out_max = max_layer.forward(&mut tape, &vars, x, &batch).unwrap();
        assert_eq!(tape.value(out_max).data(), tape.value(out).data());
    }

    #[test]
    fn sage_rejects_isolated_nodes() {
        let g = PmuGraph::from_edges(vec![1], &[]).unwrap();
        let batch = GraphBatch::new(&g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = SageLayer::new(2, 2, SageAggregator::Mean, &mut rng);
        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            layer.forward(&mut tape, &vars, x, &batch),
            Err(Error::DegenerateNeighborhood(_))
        ));
    }

    #[test]
    fn gat_attention_is_uniform_for_identical_features() {
        let g = PmuGraph::from_edges(vec![1, 2, 3], &[(0, 1), (0, 2)]).unwrap();
        let batch = GraphBatch::new(&g, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v1 = GatLayer::new(3, 4, 0.0, &mut rng);
        let v2 = GatV2Layer::new(3, 4, 0.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 3], 0.7));
        let vars1 = v1.bind(&mut tape, false);
        let (_, a1) = v1
            .forward_with_attention(&mut tape, &vars1, x, &batch, false, &mut rng)
            .unwrap();
        let vars2 = v2.bind(&mut tape, false);
        let (_, a2) = v2
            .forward_with_attention(&mut tape, &vars2, x, &batch, false, &mut rng)
            .unwrap();
        // node 0 attends to {0,1,2}; nodes 1 and 2 to themselves and node 0
        let expected = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.5, 0.5, 0.5, 0.5];
        for alpha in [a1, a2] {
            for (a, e) in tape.value(alpha).data().iter().zip(expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
