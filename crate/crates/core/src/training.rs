//! AdamW, the mini-batch training loop, metrics and confidence intervals.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datagen::{WindowSample, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::models::{step_major, ModelInstance};
use crate::seed;
use crate::tensor::{Tape, Tensor};

/// Hidden width used with the desk preset, sized for the few-minute budget.
pub const DESK_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub attn_dropout: f64,
    pub seeds: Vec<u64>,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 35,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            dropout: 0.2,
            attn_dropout: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            hidden: 128,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            hidden: DESK_HIDDEN,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config("epochs, batch_size and hidden must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning_rate must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWParams {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &[&mut Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState, hp: &AdamWParams) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Dimension(format!(
            "adamw: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, g) in grads.iter().enumerate() {
        if g.len() != params[k].len() || state.m[k].len() != g.len() {
            return Err(Error::Dimension(format!("adamw: slot {k} has mismatched sizes")));
        }
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {k} contains {bad}")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let mut data = p.data().to_vec();
        for i in 0..data.len() {
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            data[i] -= hp.lr * (mh / (vh.sqrt() + hp.eps) + hp.weight_decay * data[i]);
        }
        p.set_data(data)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

fn pack(model: &ModelInstance, windows: &[&WindowSample], steps: usize) -> Result<(Tensor, Vec<f64>)> {
    let feats: Vec<&[f64]> = windows.iter().map(|w| w.features.as_slice()).collect();
    let x = step_major(&feats, model.nodes(), steps, NUM_FEATURES)?;
    let y = windows.iter().map(|w| f64::from(w.label)).collect();
    Ok((x, y))
}

fn steps_of(model: &ModelInstance, w: &WindowSample) -> Result<usize> {
    let per_step = model.nodes() * NUM_FEATURES;
    if w.features.is_empty() || !w.features.len().is_multiple_of(per_step) {
        return Err(Error::Dimension(format!(
            "window with {} values does not fit {} nodes x {NUM_FEATURES} features",
            w.features.len(),
            model.nodes()
        )));
    }
    Ok(w.features.len() / per_step)
}

/// Trains for a fixed number of epochs on shuffled mini-batches and keeps
/// the final parameters. Validation F1 is recorded per epoch when `val` is
/// non-empty.
pub fn train(
    model: &mut ModelInstance,
    train_set: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<History> {
    cfg.validate()?;
    let first = train_set
        .first()
        .ok_or_else(|| Error::Usage("training set is empty".into()))?;
    let steps = steps_of(model, first)?;
    let hp = AdamWParams::new(cfg.learning_rate, cfg.weight_decay);
    let mut state = AdamState::for_params(&model.params_mut());
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seed::rng(seed, "shuffle", epoch as u64));
        let mut drop_rng = seed::rng(seed, "dropout", epoch as u64);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (x, y) = pack(model, &batch, steps)?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let xin = tape.constant(x);
            let logits = model.forward(&mut tape, &vars, xin, steps, batch.len(), true, &mut drop_rng)?;
            let targets = model.expand_labels(&y);
            let loss = tape.bce_with_logits(logits, &targets)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: format!("loss {lv}"),
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|v| tape.grad(*v).expect("trainable leaf has a gradient"))
                .collect();
            let mut params = model.params_mut();
            adamw_step(&mut params, &grads, &mut state, &hp).map_err(|e| Error::Divergence {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            loss_sum += lv * batch.len() as f64;
            seen += batch.len();
        }
        let val_f1 = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, val)?.f1)
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_f1,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Metrics {
    /// Derived scores from confusion counts; every 0/0 is defined as 0.
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            tn,
            fn_,
            precision,
            recall,
            f1,
            accuracy: ratio(tp + tn, tp + fp + tn + fn_),
        }
    }

    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

const EVAL_BATCH: usize = 256;

/// Eval-mode predictions for every window.
pub fn predict_windows(model: &mut ModelInstance, windows: &[WindowSample]) -> Result<Vec<bool>> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Usage("cannot evaluate on an empty window set".into()))?;
    let steps = steps_of(model, first)?;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_BATCH) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let (x, _) = pack(model, &refs, steps)?;
        out.extend(model.predict(&x, steps, refs.len())?);
    }
    Ok(out)
}

/// Confusion counts and scores in eval mode; parameters are not touched.
pub fn evaluate(model: &mut ModelInstance, windows: &[WindowSample]) -> Result<Metrics> {
    let pred = predict_windows(model, windows)?;
    let truth: Vec<bool> = windows.iter().map(|w| w.label == 1).collect();
    Ok(Metrics::from_predictions(&pred, &truth))
}

/// Two-sided 90% Student-t interval `mean +- t(0.95, n-1) * s / sqrt(n)`.
pub fn confidence_interval_90(values: &[f64]) -> Result<(f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "a confidence interval needs at least 2 values, got {n}"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Config(e.to_string()))?
        .inverse_cdf(0.95);
    let half = t * var.sqrt() / (n as f64).sqrt();
    Ok((mean - half, mean + half))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_grads_without_decay_is_a_no_op() {
        let mut p = Tensor::vector(vec![1.5, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut slots = [&mut p];
        let mut st = AdamState::for_params(&slots);
        adamw_step(&mut slots, &[g], &mut st, &AdamWParams::new(1e-3, 0.0)).unwrap();
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn adamw_single_scalar_step_by_hand() {
        let (theta, g, lr, wd) = (0.5_f64, 0.2_f64, 0.01, 0.1);
        let m = 0.1 * g;
        let v = 0.001 * g * g;
        let mh = m / 0.1;
        let vh = v / 0.001;
        let expected = theta - lr * (mh / (vh.sqrt() + 1e-8) + wd * theta);
        let mut p = Tensor::vector(vec![theta]).unwrap();
        let mut slots = [&mut p];
        let mut st = AdamState::for_params(&slots);
        adamw_step(
            &mut slots,
            &[Tensor::vector(vec![g]).unwrap()],
            &mut st,
            &AdamWParams::new(lr, wd),
        )
        .unwrap();
        assert!((p.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adamw_decay_shrinks_weights() {
        let mut p = Tensor::vector(vec![1.0, -3.0]).unwrap();
        let mut slots = [&mut p];
        let mut st = AdamState::for_params(&slots);
        adamw_step(
            &mut slots,
            &[Tensor::zeros(&[2])],
            &mut st,
            &AdamWParams::new(1e-2, 0.5),
        )
        .unwrap();
        assert!(p.data()[0].abs() < 1.0 && p.data()[1].abs() < 3.0);
    }

    #[test]
    fn metric_edge_cases() {
        let all_right = Metrics::from_predictions(&[true, false, true], &[true, false, true]);
        assert_eq!(all_right.f1, 1.0);
        let silent = Metrics::from_predictions(&[false, false], &[true, false]);
        assert_eq!((silent.recall, silent.f1, silent.precision), (0.0, 0.0, 0.0));
    }

    #[test]
    fn student_t_interval() {
        let (lo, hi) = confidence_interval_90(&[0.75, 0.75, 0.75]).unwrap();
        assert_eq!((lo, hi), (0.75, 0.75));
        let (lo, hi) = confidence_interval_90(&[0.0, 1.0]).unwrap();
        assert!((hi - 0.5 - 3.157).abs() < 1e-3, "{hi}");
        assert!(((hi - 0.5) - (0.5 - lo)).abs() < 1e-12);
        assert!(confidence_interval_90(&[1.0]).is_err());
    }
}
