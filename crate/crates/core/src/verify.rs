//! Finite-difference gradient checks over every op, layer and model family.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::graph::PmuGraph;
use crate::layers::{
    maxpool_readout, BatchNormLayer, ClassifyHead, GatLayer, GatV2Layer, GcnLayer, GraphBatch, GruCell, GruVars,
    Params, SageAggregator, SageLayer,
};
use crate::models::{Family, ModelInstance, ModelSpec};
use crate::seed;
use crate::tensor::{
    finite_difference_grad, relative_error, BatchNormState, GradCheckReport, Mutation, Tape, Tensor, Var,
};

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const ELEMENTWISE_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;

/// Random connected simple graph: a random spanning tree plus `extra` chords.
pub fn random_connected_graph<R: Rng + ?Sized>(n: usize, extra: usize, rng: &mut R) -> PmuGraph {
    let mut edges = Vec::new();
    for v in 1..n {
        edges.push((rng.gen_range(0..v), v));
    }
    let mut tries = 0;
    while edges.len() < n - 1 + extra && tries < 100 {
        tries += 1;
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let key = (a.min(b), a.max(b));
        if a != b && !edges.iter().any(|&(x, y)| (x.min(y), x.max(y)) == key) {
            edges.push(key);
        }
    }
    PmuGraph::from_edges((1..=n as u32).collect(), &edges).expect("valid by construction")
}

pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("finite")
}

/// Compares tape gradients of `sum(build(inputs) * probe)` against central
/// differences for every input. `probe` is a fixed random weighting so that
/// the check is not blind to permutations of the output.
pub fn check_component<F>(
    name: &str,
    inputs: &[Tensor],
    tol: f64,
    mutation: Option<Mutation>,
    probe_seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let new_tape = || match mutation {
        Some(m) => Tape::with_mutation(m),
        None => Tape::new(),
    };
    let probe = {
        let mut t = new_tape();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vars)?;
        let shape = t.value(out).shape().to_vec();
        random_tensor(&shape, 1.0, &mut seed::rng(probe_seed, "probe", 0))
    };
    let loss = |t: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = build(t, vars)?;
        let p = t.constant(probe.clone());
        let prod = t.mul(out, p)?;
        t.sum(prod)
    };

    let mut tape = new_tape();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let l = loss(&mut tape, &vars)?;
    tape.backward(l)?;
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).expect("leaf requires grad");
        let numeric = finite_difference_grad(
            |xs| {
                let mut t = new_tape();
                let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let l = loss(&mut t, &vs)?;
                Ok(t.value(l).item())
            },
            inputs,
            k,
            FD_STEP,
        )?;
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        component: name.to_string(),
        max_rel_err: worst,
        passed: worst < tol,
    })
}

fn layer_inputs<R: Rng + ?Sized>(rows: usize, dim: usize, params: Vec<&Tensor>, rng: &mut R) -> Vec<Tensor> {
    let mut v = vec![random_tensor(&[rows, dim], 1.0, rng)];
    v.extend(params.into_iter().cloned());
    v
}

/// Runs the whole suite. With a mutation installed, components that use the
/// mutated backward rule are expected to fail.
pub fn gradcheck_suite(mutation: Option<Mutation>, root_seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = seed::rng(root_seed, "gradcheck", 0);
    let mut out = Vec::new();
    let m = mutation;
    let mut next = || rng.gen::<u64>();

    // elementwise and structural ops
    {
        let mut r = seed::rng(next(), "ops", 0);
        let a = random_tensor(&[3, 4], 1.0, &mut r);
        let b = random_tensor(&[3, 4], 1.0, &mut r);
        let c = random_tensor(&[4, 2], 1.0, &mut r);
        let s = next();
        out.push(check_component(
            "matmul",
            &[a.clone(), c.clone()],
            ELEMENTWISE_TOL,
            m,
            s,
            |t, v| t.matmul(v[0], v[1]),
        )?);
        type Bin = fn(&mut Tape, Var, Var) -> Result<Var>;
        let binaries: [(&str, Bin); 3] = [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul)];
        for (name, f) in binaries {
            out.push(check_component(
                name,
                &[a.clone(), b.clone()],
                ELEMENTWISE_TOL,
                m,
                s,
                |t, v| f(t, v[0], v[1]),
            )?);
        }
        type Un = fn(&mut Tape, Var) -> Result<Var>;
        let unaries: [(&str, Un); 3] = [("sigmoid", Tape::sigmoid), ("tanh", Tape::tanh), ("relu", Tape::relu)];
        for (name, f) in unaries {
            out.push(check_component(name, std::slice::from_ref(&a), ELEMENTWISE_TOL, m, s, |t, v| {
                f(t, v[0])
            })?);
        }
        out.push(check_component(
            "leaky_relu",
            std::slice::from_ref(&a),
            ELEMENTWISE_TOL,
            m,
            s,
            |t, v| t.leaky_relu(v[0], 0.2),
        )?);
        out.push(check_component(
            "concat",
            &[a.clone(), c.transpose()?],
            ELEMENTWISE_TOL,
            m,
            s,
            |t, v| t.concat(&[v[0], v[1]], 0),
        )?);
        let scores = random_tensor(&[7], 2.0, &mut r);
        let seg: Arc<[usize]> = vec![0, 0, 1, 1, 1, 2, 2].into();
        out.push(check_component(
            "segment_softmax",
            &[scores],
            ELEMENTWISE_TOL,
            m,
            s,
            |t, v| t.segment_softmax(v[0], seg.clone(), 3),
        )?);
        let logits = random_tensor(&[6], 3.0, &mut r);
        let labels = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        out.push(check_component(
            "bce_with_logits",
            &[logits],
            ELEMENTWISE_TOL,
            m,
            s,
            |t, v| t.bce_with_logits(v[0], &labels),
        )?);
    }

    let n = 4 + (next() % 5) as usize;
    let graph = random_connected_graph(n, 2, &mut seed::rng(next(), "graph", 0));
    let batch = 2;
    let gb = GraphBatch::new(&graph, batch);
    let rows = gb.rows();
    let (din, dout) = (3, 4);

    {
        let mut r = seed::rng(next(), "bn", 0);
        let bn = BatchNormLayer {
            gamma: random_tensor(&[dout], 1.0, &mut r),
            beta: random_tensor(&[dout], 1.0, &mut r),
            state: BatchNormState::new(dout),
        };
        let inputs = layer_inputs(rows, dout, bn.params(), &mut r);
        out.push(check_component(
            "batch_norm",
            &inputs,
            GRADCHECK_TOL,
            m,
            next(),
            |t, v| {
                let mut st = BatchNormState::new(dout);
                t.batch_norm(v[0], v[1], v[2], &mut st, true)
            },
        )?);
    }
    {
        let mut r = seed::rng(next(), "gru", 0);
        let cell = GruCell::new(din, dout, &mut r);
        let steps = 5;
        let mut inputs = vec![random_tensor(&[steps * rows, din], 1.0, &mut r)];
        inputs.extend(cell.params().into_iter().cloned());
        out.push(check_component("gru", &inputs, GRADCHECK_TOL, m, next(), |t, v| {
            cell.forward(t, GruVars::from_slice(&v[1..]), v[0], steps, rows, None)
        })?);
    }
    {
        let mut r = seed::rng(next(), "gcn", 0);
        let layer = GcnLayer::new(din, dout, &mut r);
        let inputs = layer_inputs(rows, din, layer.params(), &mut r);
        let adj = gb.norm_adj.clone();
        out.push(check_component("gcn", &inputs, GRADCHECK_TOL, m, next(), |t, v| {
            let a = t.constant(adj.clone());
            layer.forward(t, &v[1..], v[0], a)
        })?);
    }
    for (name, agg) in [("sage_mean", SageAggregator::Mean), ("sage_max", SageAggregator::Max)] {
        let mut r = seed::rng(next(), name, 0);
        let layer = SageLayer::new(din, dout, agg, &mut r);
        let inputs = layer_inputs(rows, din, layer.params(), &mut r);
        out.push(check_component(name, &inputs, GRADCHECK_TOL, m, next(), |t, v| {
            layer.forward(t, &v[1..], v[0], &gb)
        })?);
    }
    {
        let mut r = seed::rng(next(), "gat", 0);
        let layer = GatLayer::new(din, dout, 0.0, &mut r);
        let inputs = layer_inputs(rows, din, layer.params(), &mut r);
        let dr = seed::rng(0, "unused", 0);
        out.push(check_component("gat", &inputs, GRADCHECK_TOL, m, next(), |t, v| {
            layer.forward(t, &v[1..], v[0], &gb, false, &mut dr.clone())
        })?);
        let layer = GatV2Layer::new(din, dout, 0.0, &mut r);
        let inputs = layer_inputs(rows, din, layer.params(), &mut r);
        out.push(check_component("gatv2", &inputs, GRADCHECK_TOL, m, next(), |t, v| {
            layer.forward(t, &v[1..], v[0], &gb, false, &mut dr.clone())
        })?);
    }
    {
        let mut r = seed::rng(next(), "readout", 0);
        let x = random_tensor(&[rows, dout], 1.0, &mut r);
        out.push(check_component(
            "maxpool_readout",
            &[x],
            GRADCHECK_TOL,
            m,
            next(),
            |t, v| maxpool_readout(t, v[0], n),
        )?);
        let head = ClassifyHead::new(dout, &mut r);
        let inputs = layer_inputs(batch, dout, head.params(), &mut r);
        out.push(check_component(
            "classify_head",
            &inputs,
            GRADCHECK_TOL,
            m,
            next(),
            |t, v| head.forward(t, &v[1..], v[0]),
        )?);
    }

    for family in Family::ALL {
        let mut r = seed::rng(next(), family.name(), 0);
        let mut spec = ModelSpec::new(family, 3, r.gen()).with_sizes(4, 4);
        spec.dropout = 0.0;
        spec.attn_dropout = 0.0;
        let model = ModelInstance::new(spec, graph.clone())?;
        let steps = 4;
        let x = random_tensor(&[steps * rows, 3], 1.0, &mut r);
        let params: Vec<Tensor> = model.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let labels: Vec<f64> = model.expand_labels(&[1.0, 0.0]);
        let report = check_component(
            &format!("model:{}", family.name()),
            &params,
            GRADCHECK_TOL,
            m,
            next(),
            |t, v| {
                let mut mm = model.clone();
                let xin = t.constant(x.clone());
                let mut dr = seed::rng(0, "unused", 0);
                let z = mm.forward(t, v, xin, steps, batch, true, &mut dr)?;
                let l = t.bce_with_logits(z, &labels)?;
                t.reshape(l, &[1])
            },
        )?;
        out.push(report);
    }
    Ok(out)
}
