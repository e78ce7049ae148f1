use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{gemm, matmul, sigmoid, MatRef};
use super::Tensor;
use crate::error::{Error, Result};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch when updating running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule defects, used to prove that gradient checks catch
/// broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Negates the gradient flowing through every LeakyReLU.
    FlipLeakyReluGrad,
}

/// Per-feature running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice2 {
        src: Var,
        rows: Range<usize>,
        cols: Range<usize>,
    },
    Reshape(Var),
    Gather {
        src: Var,
        index: Arc<[usize]>,
    },
    SegmentSum {
        src: Var,
        segments: Arc<[usize]>,
    },
    SegmentMax {
        src: Var,
        argmax: Vec<usize>,
    },
    SegmentSoftmax {
        src: Var,
        segments: Arc<[usize]>,
        num_segments: usize,
    },
    BlockMatMul {
        adj: Var,
        x: Var,
    },
    Dropout {
        src: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in topological order and replays them backwards.
///
/// Gradients accumulate across [`Tape::backward`] calls until
/// [`Tape::zero_grads`] is called.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mutation: Option<Mutation>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_mutation(mutation: Mutation) -> Self {
        Self {
            mutation: Some(mutation),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let out = matmul(
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
        );
        let ng = self.ng(&[a, b]);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "add_bias: bias length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let ng = self.ng(&[x, bias]);
        self.push(
            "add_bias",
            Tensor::from_parts(vec![m, n], data),
            Op::AddBias(x, bias),
            ng,
        )
    }

    /// Multiplies row `i` of `x` by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "scale_rows")?;
        if self.value(scale).len() != m {
            return Err(Error::Dimension(format!(
                "scale_rows: {} scales for {m} rows",
                self.value(scale).len()
            )));
        }
        let s = self.value(scale).data();
        let mut data = self.value(x).data().to_vec();
        for (row, sv) in data.chunks_exact_mut(n.max(1)).zip(s) {
            row.iter_mut().for_each(|v| *v *= sv);
        }
        let ng = self.ng(&[x, scale]);
        self.push(
            "scale_rows",
            Tensor::from_parts(vec![m, n], data),
            Op::ScaleRows(x, scale),
            ng,
        )
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v * c);
        let ng = self.ng(&[x]);
        self.push("scale", out, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.map(x, |v| v + c);
        let ng = self.ng(&[x]);
        self.push("add_scalar", out, Op::AddScalar(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, sigmoid);
        let ng = self.ng(&[x]);
        self.push("sigmoid", out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, f64::tanh);
        let ng = self.ng(&[x]);
        self.push("tanh", out, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.map(x, |v| v.max(0.0));
        let ng = self.ng(&[x]);
        self.push("relu", out, Op::Relu(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("leaky_relu slope {slope} outside (0,1)")));
        }
        let out = self.map(x, |v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(&[x]);
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope), ng)
    }

    /// Concatenates along `axis`. Zero-length inputs are skipped.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<Var> = inputs.iter().copied().filter(|v| !self.value(*v).is_empty()).collect();
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat of nothing".into()));
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} for rank {}", base.len())));
        }
        let mut extent = 0;
        for &p in &parts {
            let s = self.value(p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension(format!("concat: {s:?} incompatible with {base:?}")));
            }
            extent += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * extent * inner);
        for o in 0..outer {
            for &p in &parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let ng = self.ng(&parts);
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat { inputs: parts, axis },
            ng,
        )
    }

    /// Rectangular sub-block of a matrix.
    pub fn slice2(&mut self, src: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (m, n) = self.matrix_dims(src, "slice2")?;
        if rows.end > m || cols.end > n || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::Dimension(format!(
                "slice2: {rows:?} x {cols:?} outside {m} x {n}"
            )));
        }
        let t = self.value(src).data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&t[r * n + cols.start..r * n + cols.end]);
        }
        let shape = vec![rows.len(), cols.len()];
        let ng = self.ng(&[src]);
        self.push(
            "slice2",
            Tensor::from_parts(shape, data),
            Op::Slice2 { src, rows, cols },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.ng(&[x]);
        self.push("reshape", out, Op::Reshape(x), ng)
    }

    fn row_layout(&self, x: Var) -> (usize, usize) {
        let t = self.value(x);
        let rows = t.rows();
        (rows, if rows == 0 { 0 } else { t.len() / rows })
    }

    fn out_shape_rows(&self, x: Var, rows: usize) -> Vec<usize> {
        let mut s = self.value(x).shape().to_vec();
        if s.is_empty() {
            s.push(rows);
        } else {
            s[0] = rows;
        }
        s
    }

    /// Row gather: `out[e] = x[index[e]]`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let (rows, cols) = self.row_layout(x);
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("gather_rows: index {bad} >= {rows}")));
        }
        let t = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let shape = self.out_shape_rows(x, index.len());
        let ng = self.ng(&[x]);
        self.push(
            "gather_rows",
            Tensor::from_parts(shape, data),
            Op::Gather { src: x, index },
            ng,
        )
    }

    fn check_segments(&self, x: Var, segments: &[usize], num: usize, what: &str) -> Result<(usize, usize)> {
        let (rows, cols) = self.row_layout(x);
        if segments.len() != rows {
            return Err(Error::Dimension(format!(
                "{what}: {} segment ids for {rows} rows",
                segments.len()
            )));
        }
        if let Some(bad) = segments.iter().find(|&&s| s >= num) {
            return Err(Error::Dimension(format!("{what}: segment {bad} >= {num}")));
        }
        Ok((rows, cols))
    }

    fn require_nonempty_segments(segments: &[usize], num: usize, what: &str) -> Result<()> {
        let mut seen = vec![false; num];
        segments.iter().for_each(|&s| seen[s] = true);
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::DegenerateNeighborhood(format!("{what}: segment {i} is empty"))),
            None => Ok(()),
        }
    }

    /// Row-wise scatter-add: `out[s] = sum of x[r] with segments[r] == s`.
    pub fn segment_sum(&mut self, x: Var, segments: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let (_, cols) = self.check_segments(x, &segments, num_segments, "segment_sum")?;
        let t = self.value(x).data();
        let mut data = vec![0.0; num_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            let dst = &mut data[s * cols..(s + 1) * cols];
            dst.iter_mut()
                .zip(&t[r * cols..(r + 1) * cols])
                .for_each(|(d, v)| *d += v);
        }
        let shape = self.out_shape_rows(x, num_segments);
        let ng = self.ng(&[x]);
        self.push(
            "segment_sum",
            Tensor::from_parts(shape, data),
            Op::SegmentSum { src: x, segments },
            ng,
        )
    }

    /// Column-wise max within each row segment. Gradient goes to the lowest
    /// row index attaining the max.
    pub fn segment_max(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var> {
        let (_, cols) = self.check_segments(x, segments, num_segments, "segment_max")?;
        Self::require_nonempty_segments(segments, num_segments, "segment_max")?;
        let t = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; num_segments * cols];
        let mut argmax = vec![usize::MAX; num_segments * cols];
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let v = t[r * cols + c];
                let k = s * cols + c;
                if argmax[k] == usize::MAX || v > data[k] {
                    data[k] = v;
                    argmax[k] = r;
                }
            }
        }
        let shape = self.out_shape_rows(x, num_segments);
        let ng = self.ng(&[x]);
        self.push(
            "segment_max",
            Tensor::from_parts(shape, data),
            Op::SegmentMax { src: x, argmax },
            ng,
        )
    }

    /// Softmax of a score vector within each segment.
    pub fn segment_softmax(&mut self, scores: Var, segments: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let (_, cols) = self.check_segments(scores, &segments, num_segments, "segment_softmax")?;
        if cols != 1 {
            return Err(Error::Dimension("segment_softmax expects one score per edge".into()));
        }
        Self::require_nonempty_segments(&segments, num_segments, "segment_softmax")?;
        let t = self.value(scores).data();
        let mut max = vec![f64::NEG_INFINITY; num_segments];
        for (v, &s) in t.iter().zip(segments.iter()) {
            max[s] = max[s].max(*v);
        }
        let mut data: Vec<f64> = t
            .iter()
            .zip(segments.iter())
            .map(|(v, &s)| (v - max[s]).exp())
            .collect();
        let mut denom = vec![0.0; num_segments];
        for (v, &s) in data.iter().zip(segments.iter()) {
            denom[s] += v;
        }
        for (v, &s) in data.iter_mut().zip(segments.iter()) {
            *v /= denom[s];
        }
        let shape = self.value(scores).shape().to_vec();
        let ng = self.ng(&[scores]);
        self.push(
            "segment_softmax",
            Tensor::from_parts(shape, data),
            Op::SegmentSoftmax {
                src: scores,
                segments,
                num_segments,
            },
            ng,
        )
    }

    /// Applies an `n x n` matrix to each of the stacked `n`-row blocks of `x`.
    pub fn block_matmul(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (n, n2) = self.matrix_dims(adj, "block_matmul adjacency")?;
        let (rows, d) = self.matrix_dims(x, "block_matmul features")?;
        if n != n2 || n == 0 || rows % n != 0 {
            return Err(Error::Dimension(format!(
                "block_matmul: {n}x{n2} operator on {rows} rows"
            )));
        }
        let a = self.value(adj).data();
        let xs = self.value(x).data();
        let mut out = vec![0.0; rows * d];
        for (xb, ob) in xs.chunks_exact(n * d).zip(out.chunks_exact_mut(n * d)) {
            gemm(MatRef::new(a, n, n), MatRef::new(xb, n, d), ob, 0.0);
        }
        let ng = self.ng(&[adj, x]);
        self.push(
            "block_matmul",
            Tensor::from_parts(vec![rows, d], out),
            Op::BlockMatMul { adj, x },
            ng,
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let t = self.value(x);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let ng = self.ng(&[x]);
        self.push("dropout", out, Op::Dropout { src: x, mask }, ng)
    }

    /// Batch normalization over the rows of `x` (`B x D`). Training mode uses
    /// batch statistics and updates `state`; eval mode uses `state`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        training: bool,
    ) -> Result<Var> {
        let (b, d) = self.matrix_dims(x, "batch_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d || state.running_mean.len() != d {
            return Err(Error::Dimension(format!(
                "batch_norm: parameters do not match {d} features"
            )));
        }
        if training && b < 2 {
            return Err(Error::BatchTooSmall(b));
        }
        let xs = self.value(x).data();
        let (mean, var) = if training {
            let mut mean = vec![0.0; d];
            for row in xs.chunks_exact(d) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; d];
            for row in xs.chunks_exact(d) {
                for j in 0..d {
                    let c = row[j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= b as f64);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; b * d];
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..d {
                let k = i * d + j;
                xhat[k] = (xs[k] - mean[j]) * inv_std[j];
                out[k] = g[j] * xhat[k] + bt[j];
            }
        }
        if training {
            let unbiased = b as f64 / (b as f64 - 1.0);
            for j in 0..d {
                state.running_mean[j] = (1.0 - BN_MOMENTUM) * state.running_mean[j] + BN_MOMENTUM * mean[j];
                state.running_var[j] = (1.0 - BN_MOMENTUM) * state.running_var[j] + BN_MOMENTUM * var[j] * unbiased;
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            "batch_norm",
            Tensor::from_parts(vec![b, d], out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
        )
    }

    /// Mean binary cross-entropy on logits, in the overflow-free form
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "bce_with_logits: {} logits for {} labels",
                z.len(),
                labels.len()
            )));
        }
        if z.is_empty() {
            return Err(Error::Usage("bce_with_logits on an empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(Error::Data(format!("label {bad} is not binary")));
        }
        let total: f64 = z
            .iter()
            .zip(labels)
            .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let loss = total / z.len() as f64;
        let ng = self.ng(&[logits]);
        self.push(
            "bce_with_logits",
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Usage("mean of an empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[x]);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate into the tape's
    /// gradient buffers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            propagate(&self.nodes, i, &g, &mut local, self.mutation);
        }
        Ok(())
    }
}

fn acc<'a>(local: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(local[v.0].get_or_insert_with(|| vec![0.0; n]))
}

/// Adds `f(k)` to element `k` of `v`'s gradient, writing it directly when
/// this is the first contribution.
fn contribute(local: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut local[v.0] {
        Some(buf) => buf.iter_mut().enumerate().for_each(|(k, b)| *b += f(k)),
        slot @ None => *slot = Some((0..nodes[v.0].value.len()).map(f).collect()),
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
}

fn propagate(nodes: &[Node], i: usize, g: &[f64], local: &mut [Option<Vec<f64>>], mutation: Option<Mutation>) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            let gm = MatRef::new(g, m, n);
            if let Some(buf) = acc(local, nodes, *a) {
                gemm(gm, MatRef::new(val(*b).data(), k, n).t(), buf, 1.0);
            }
            if let Some(buf) = acc(local, nodes, *b) {
                gemm(MatRef::new(val(*a).data(), m, k).t(), gm, buf, 1.0);
            }
        }
        Op::Add(a, b) => {
            contribute(local, nodes, *a, |k| g[k]);
            contribute(local, nodes, *b, |k| g[k]);
        }
        Op::Sub(a, b) => {
            contribute(local, nodes, *a, |k| g[k]);
            contribute(local, nodes, *b, |k| -g[k]);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            contribute(local, nodes, *a, |k| g[k] * bd[k]);
            contribute(local, nodes, *b, |k| g[k] * ad[k]);
        }
        Op::AddBias(x, bias) => {
            contribute(local, nodes, *x, |k| g[k]);
            let n = val(*bias).len();
            if let Some(buf) = acc(local, nodes, *bias) {
                for row in g.chunks_exact(n) {
                    add_into(buf, row);
                }
            }
        }
        Op::ScaleRows(x, s) => {
            let n = val(*x).shape()[1];
            let sd = val(*s).data();
            if n == 0 {
                return;
            }
            if let Some(buf) = acc(local, nodes, *x) {
                for ((brow, grow), sv) in buf.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(sd) {
                    brow.iter_mut().zip(grow).for_each(|(b, gv)| *b += gv * sv);
                }
            }
            if let Some(buf) = acc(local, nodes, *s) {
                let xd = val(*x).data();
                for (r, b) in buf.iter_mut().enumerate() {
                    *b += g[r * n..(r + 1) * n]
                        .iter()
                        .zip(&xd[r * n..(r + 1) * n])
                        .map(|(gv, xv)| gv * xv)
                        .sum::<f64>();
                }
            }
        }
        Op::Scale(x, c) => contribute(local, nodes, *x, |k| c * g[k]),
        Op::AddScalar(x) | Op::Reshape(x) => contribute(local, nodes, *x, |k| g[k]),
        Op::Sigmoid(x) => {
            let y = node.value.data();
            contribute(local, nodes, *x, |k| g[k] * y[k] * (1.0 - y[k]));
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            contribute(local, nodes, *x, |k| g[k] * (1.0 - y[k] * y[k]));
        }
        Op::Relu(x) => {
            let xd = val(*x).data();
            if let Some(buf) = acc(local, nodes, *x) {
                for ((b, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                    if *xv > 0.0 {
                        *b += gv;
                    }
                }
            }
        }
        Op::LeakyRelu(x, slope) => {
            let xd = val(*x).data();
            let sign = if mutation == Some(Mutation::FlipLeakyReluGrad) {
                -1.0
            } else {
                1.0
            };
            if let Some(buf) = acc(local, nodes, *x) {
                for ((b, gv), xv) in buf.iter_mut().zip(g).zip(xd) {
                    *b += sign * gv * if *xv > 0.0 { 1.0 } else { *slope };
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for p in inputs {
                let chunk = val(*p).shape()[*axis] * inner;
                if let Some(buf) = acc(local, nodes, *p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        add_into(&mut buf[o * chunk..(o + 1) * chunk], src);
                    }
                }
                offset += chunk;
            }
        }
        Op::Slice2 { src, rows, cols } => {
            let n = val(*src).shape()[1];
            let w = cols.len();
            if let Some(buf) = acc(local, nodes, *src) {
                for (k, r) in rows.clone().enumerate() {
                    add_into(&mut buf[r * n + cols.start..r * n + cols.end], &g[k * w..(k + 1) * w]);
                }
            }
        }
        Op::Gather { src, index } => {
            let cols = if index.is_empty() { 0 } else { g.len() / index.len() };
            if let Some(buf) = acc(local, nodes, *src) {
                for (e, &r) in index.iter().enumerate() {
                    add_into(&mut buf[r * cols..(r + 1) * cols], &g[e * cols..(e + 1) * cols]);
                }
            }
        }
        Op::SegmentSum { src, segments } => {
            let rows = segments.len();
            let cols = if rows == 0 { 0 } else { val(*src).len() / rows };
            if let Some(buf) = acc(local, nodes, *src) {
                for (r, &s) in segments.iter().enumerate() {
                    add_into(&mut buf[r * cols..(r + 1) * cols], &g[s * cols..(s + 1) * cols]);
                }
            }
        }
        Op::SegmentMax { src, argmax } => {
            let cols = node.value.len() / node.value.rows().max(1);
            if let Some(buf) = acc(local, nodes, *src) {
                for (k, &r) in argmax.iter().enumerate() {
                    buf[r * cols + k % cols] += g[k];
                }
            }
        }
        Op::SegmentSoftmax {
            src,
            segments,
            num_segments,
        } => {
            let y = node.value.data();
            let mut dot = vec![0.0; *num_segments];
            for ((gv, yv), &s) in g.iter().zip(y).zip(segments.iter()) {
                dot[s] += gv * yv;
            }
            if let Some(buf) = acc(local, nodes, *src) {
                for (e, &s) in segments.iter().enumerate() {
                    buf[e] += y[e] * (g[e] - dot[s]);
                }
            }
        }
        Op::BlockMatMul { adj, x } => {
            let n = val(*adj).shape()[0];
            let d = val(*x).shape()[1];
            let a = val(*adj).data();
            if let Some(buf) = acc(local, nodes, *x) {
                for (gb, bb) in g.chunks_exact(n * d).zip(buf.chunks_exact_mut(n * d)) {
                    gemm(MatRef::new(a, n, n).t(), MatRef::new(gb, n, d), bb, 1.0);
                }
            }
            if let Some(buf) = acc(local, nodes, *adj) {
                let xd = val(*x).data();
                for (gb, xb) in g.chunks_exact(n * d).zip(xd.chunks_exact(n * d)) {
                    gemm(MatRef::new(gb, n, d), MatRef::new(xb, n, d).t(), buf, 1.0);
                }
            }
        }
        Op::Dropout { src, mask } => contribute(local, nodes, *src, |k| g[k] * mask[k]),
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let d = inv_std.len();
            let b = g.len() / d;
            let gm = val(*gamma).data();
            if let Some(buf) = acc(local, nodes, *gamma) {
                for (k, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                    buf[k % d] += gv * xh;
                }
            }
            if let Some(buf) = acc(local, nodes, *beta) {
                for (k, gv) in g.iter().enumerate() {
                    buf[k % d] += gv;
                }
            }
            if let Some(buf) = acc(local, nodes, *x) {
                if *training {
                    let mut sum_dxhat = vec![0.0; d];
                    let mut sum_dxhat_xhat = vec![0.0; d];
                    for (k, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        let dxh = gv * gm[k % d];
                        sum_dxhat[k % d] += dxh;
                        sum_dxhat_xhat[k % d] += dxh * xh;
                    }
                    let bf = b as f64;
                    for (k, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        let j = k % d;
                        let dxh = gv * gm[j];
                        buf[k] += inv_std[j] / bf * (bf * dxh - sum_dxhat[j] - xh * sum_dxhat_xhat[j]);
                    }
                } else {
                    for (k, gv) in g.iter().enumerate() {
                        buf[k] += gv * gm[k % d] * inv_std[k % d];
                    }
                }
            }
        }
        Op::BceWithLogits { logits, labels } => {
            let z = val(*logits).data();
            let scale = g[0] / z.len() as f64;
            if let Some(buf) = acc(local, nodes, *logits) {
                for ((b, zv), y) in buf.iter_mut().zip(z).zip(labels) {
                    *b += scale * (sigmoid(*zv) - y);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(buf) = acc(local, nodes, *x) {
                buf.iter_mut().for_each(|b| *b += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            if let Some(buf) = acc(local, nodes, *x) {
                buf.iter_mut().for_each(|b| *b += g[0] / n);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, -2.0, 0.25, 4.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 3.0]);
        assert_eq!(tape.value(out).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, -1.0, 2.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        let l = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0, -0.2, 2.0]);
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.add(x, y), Err(Error::Dimension(_))));
        assert!(matches!(tape.leaky_relu(x, 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn sigmoid_is_stable_for_large_negative_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-800.0, 800.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_cases() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[1], &[3.0]));
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let empty = tape.constant(Tensor::zeros(&[0]));
        let same = tape.concat(&[a, empty], 0).unwrap();
        assert_eq!(tape.value(same), tape.value(a));
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0]);

        let m = tape.constant(Tensor::zeros(&[2, 3]));
        let n = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.concat(&[m, n], 1).is_err());
        assert!(tape.concat(&[m, n], 0).is_ok());
    }

    #[test]
    fn concat_along_columns_interleaves_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn segment_softmax_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(t(&[3], &[0.7, 2.0, 2.0]));
        let seg: Arc<[usize]> = vec![0, 1, 1].into();
        let a = tape.segment_softmax(s, seg.clone(), 2).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 0.5, 0.5]);

        let shifted = tape.constant(t(&[3], &[100.7, 102.0, 102.0]));
        let b = tape.segment_softmax(shifted, seg, 2).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-15);

        let empty: Arc<[usize]> = vec![0, 0, 2].into();
        assert!(matches!(
            tape.segment_softmax(s, empty, 3),
            Err(Error::DegenerateNeighborhood(_))
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 4.0]));
        let e = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(x).data());
        let z = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_zero_fraction_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let n = 1_000_000;
        let x = tape.constant(Tensor::full(&[n], 1.0));
        let d = tape.dropout(x, 0.2, true, &mut rng).unwrap();
        let v = tape.value(d).data();
        let zeros = v.iter().filter(|x| **x == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.2).abs() < 0.005, "zero fraction {zeros}");
        assert!(v.iter().all(|x| *x == 0.0 || (*x - 1.25).abs() < 1e-15));
    }

    #[test]
    fn batch_norm_training_and_eval() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4, 2], &[10.0, 10.0, 20.0, 20.0, 30.0, 30.0, 40.0, 45.0]));
        let gamma = tape.constant(Tensor::full(&[2], 1.0));
        let beta = tape.constant(Tensor::zeros(&[2]));
        let mut state = BatchNormState::new(2);
        let y = tape.batch_norm(x, gamma, beta, &mut state, true).unwrap();
        let out = tape.value(y);
        for j in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| out.at(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
        assert!((state.running_mean[0] - 2.5).abs() < 1e-12);

        let mut fresh = BatchNormState::new(2);
        let e = tape.batch_norm(x, gamma, beta, &mut fresh, false).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        for (o, i) in tape.value(e).data().iter().zip(tape.value(x).data()) {
            assert!((o - i * scale).abs() < 1e-12);
        }
        assert_eq!(fresh, BatchNormState::new(2));

        let one = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            tape.batch_norm(one, gamma, beta, &mut state, true),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn bce_values() {
        let mut tape = Tape::new();
        let z = tape.constant(t(&[1], &[0.0]));
        let l = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let z = tape.constant(t(&[1], &[20.0]));
        let l = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!(tape.value(l).item() < 1e-8);
        let z = tape.constant(t(&[1], &[-1000.0]));
        let l = tape.bce_with_logits(z, &[1.0]).unwrap();
        assert!((tape.value(l).item() - 1000.0).abs() < 1e-9);
        assert!(matches!(tape.bce_with_logits(z, &[0.5]), Err(Error::Data(_))));
    }

    #[test]
    fn backward_basics() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
        // accumulate until reset
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());

        assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
    }

    #[test]
    fn segment_max_routes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3, 2], &[1.0, 5.0, 3.0, 5.0, 3.0, 2.0]));
        let m = tape.segment_max(x, &[0, 0, 0], 1).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let s = tape.sum(m).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tensor_rejects_nan_and_bad_lengths() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0]), Err(Error::Dimension(_))));
    }
}
