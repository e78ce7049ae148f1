//! Naive reference implementations used as test oracles. Everything here is
//! written as plain loops over nodes and edges, independent of the tape.
#![allow(dead_code)]

use std::collections::{BTreeSet, VecDeque};

use gridfault::graph::{BusId, PmuGraph, Topology};
use gridfault::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.rows(), t.cols());
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn matvec_t(x: &[f64], w: &Mat) -> Vec<f64> {
    // x (1 x in) times w (in x out)
    let out = w[0].len();
    let mut y = vec![0.0; out];
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w[i][j];
        }
    }
    y
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn adjacency_lists(g: &PmuGraph) -> Vec<Vec<usize>> {
    let n = g.len();
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in g.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    adj.iter_mut().for_each(|l| l.sort_unstable());
    adj
}

/// Dense `D^{-1/2} (A+I) D^{-1/2}` by explicit matrix products.
pub fn naive_norm_adj(g: &PmuGraph) -> Mat {
    let n = g.len();
    let mut a = vec![vec![0.0; n]; n];
    for &(i, j) in g.edges() {
        a[i][j] = 1.0;
        a[j][i] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>()).collect();
    let mut dm = vec![vec![0.0; n]; n];
    for i in 0..n {
        dm[i][i] = 1.0 / d[i].sqrt();
    }
    let mul = |x: &Mat, y: &Mat| -> Mat {
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| x[i][k] * y[k][j]).sum()).collect())
            .collect()
    };
    mul(&mul(&dm, &a), &dm)
}

/// `relu(A_hat X W)` for one graph.
pub fn gcn_oracle(g: &PmuGraph, x: &Mat, w: &Mat) -> Mat {
    let a = naive_norm_adj(g);
    let n = g.len();
    let xw: Mat = x.iter().map(|r| matvec_t(r, w)).collect();
    (0..n)
        .map(|v| {
            let mut acc = vec![0.0; w[0].len()];
            for u in 0..n {
                for (k, val) in xw[u].iter().enumerate() {
                    acc[k] += a[v][u] * val;
                }
            }
            relu(acc)
        })
        .collect()
}

/// `relu(concat(x_v, agg_u x_u) W)` with mean or elementwise max.
pub fn sage_oracle(g: &PmuGraph, x: &Mat, w: &Mat, use_max: bool) -> Mat {
    let adj = adjacency_lists(g);
    let d = x[0].len();
    adj.iter()
        .enumerate()
        .map(|(v, nb)| {
            let mut agg = if use_max {
                vec![f64::NEG_INFINITY; d]
            } else {
                vec![0.0; d]
            };
            for &u in nb {
                for k in 0..d {
                    if use_max {
                        agg[k] = agg[k].max(x[u][k]);
                    } else {
                        agg[k] += x[u][k] / nb.len() as f64;
                    }
                }
            }
            let mut cat = x[v].clone();
            cat.extend(agg);
            relu(matvec_t(&cat, w))
        })
        .collect()
}

/// Per-node softmax over `{v} ∪ N(v)` of arbitrary scores.
fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Output and per-node attention (self first, then neighbors ascending).
pub fn gat_oracle(g: &PmuGraph, x: &Mat, w: &Mat, a: &[f64], slope: f64) -> (Mat, Vec<Vec<f64>>) {
    let adj = adjacency_lists(g);
    let out = w[0].len();
    let z: Mat = x.iter().map(|r| matvec_t(r, w)).collect();
    let mut h = Vec::new();
    let mut alphas = Vec::new();
    for (v, nb) in adj.iter().enumerate() {
        let hood: Vec<usize> = std::iter::once(v).chain(nb.iter().copied()).collect();
        let scores: Vec<f64> = hood
            .iter()
            .map(|&u| leaky(dot(&a[..out], &z[v]) + dot(&a[out..], &z[u]), slope))
            .collect();
        let al = softmax(&scores);
        let mut acc = vec![0.0; out];
        for (i, &u) in hood.iter().enumerate() {
            for k in 0..out {
                acc[k] += al[i] * z[u][k];
            }
        }
        h.push(relu(acc));
        alphas.push(al);
    }
    (h, alphas)
}

pub fn gatv2_oracle(
    g: &PmuGraph,
    x: &Mat,
    w_target: &Mat,
    w_source: &Mat,
    a: &[f64],
    slope: f64,
) -> (Mat, Vec<Vec<f64>>) {
    let adj = adjacency_lists(g);
    let out = w_target[0].len();
    let mut h = Vec::new();
    let mut alphas = Vec::new();
    for (v, nb) in adj.iter().enumerate() {
        let hood: Vec<usize> = std::iter::once(v).chain(nb.iter().copied()).collect();
        let tv = matvec_t(&x[v], w_target);
        let scores: Vec<f64> = hood
            .iter()
            .map(|&u| {
                let su = matvec_t(&x[u], w_source);
                let pre: Vec<f64> = tv.iter().zip(&su).map(|(p, q)| leaky(p + q, slope)).collect();
                dot(a, &pre)
            })
            .collect();
        let al = softmax(&scores);
        let mut acc = vec![0.0; out];
        for (i, &u) in hood.iter().enumerate() {
            let su = matvec_t(&x[u], w_source);
            for k in 0..out {
                acc[k] += al[i] * su[k];
            }
        }
        h.push(relu(acc));
        alphas.push(al);
    }
    (h, alphas)
}

/// Path-contraction oracle: for every PMU pair, recover the feeder path by
/// BFS parents and accept the edge iff no other PMU lies strictly inside.
pub fn contraction_oracle(topo: &Topology, pmus: &[BusId]) -> BTreeSet<(BusId, BusId)> {
    let set: BTreeSet<BusId> = pmus.iter().copied().collect();
    let mut out = BTreeSet::new();
    for &a in &set {
        for &b in &set {
            if a >= b {
                continue;
            }
            let path = feeder_path(topo, a, b);
            if path[1..path.len() - 1].iter().all(|x| !set.contains(x)) {
                out.insert((a, b));
            }
        }
    }
    out
}

fn feeder_path(topo: &Topology, a: BusId, b: BusId) -> Vec<BusId> {
    let mut parent = std::collections::BTreeMap::new();
    let mut q = VecDeque::from([a]);
    parent.insert(a, a);
    while let Some(x) = q.pop_front() {
        if x == b {
            break;
        }
        for w in topo.neighbors(x).unwrap() {
            if let std::collections::btree_map::Entry::Vacant(e) = parent.entry(w) {
                e.insert(x);
                q.push_back(w);
            }
        }
    }
    let mut path = vec![b];
    let mut cur = b;
    while cur != a {
        cur = parent[&cur];
        path.push(cur);
    }
    path.reverse();
    path
}

pub fn max_abs(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
