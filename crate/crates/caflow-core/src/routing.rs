//! Quality-aware exit routing: oracle labels from per-exit reconstruction
//! losses, the router's cross-entropy objective, and adaptive inference that
//! skips trunk blocks past the predicted exit.

use std::rc::Rc;

use crate::autodiff::{Graph, VarId};
use crate::backbone::{FlowResNet, ForwardMode};
use crate::error::{CoreError, Result};
use crate::flow;
use crate::imaging::Image;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default tolerance for the oracle's "within epsilon of the best" rule.
pub const ORACLE_EPSILON: f64 = 0.02;
/// Router training only sees near-inference samples, `t` below this bound.
pub const ROUTER_T_MAX: f64 = 0.15;

/// Outcome of routing one input.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RoutingDecision {
    pub predicted_exit: usize,
    pub logits: [f64; 4],
    pub oracle_exit: Option<usize>,
    pub per_exit_losses: Option<[f64; 4]>,
}

/// Argmax with lowest-index tie breaking.
pub fn argmax_lowest<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-exit reconstruction L1 losses: `l_e = mean |x1_hat^(e) - x1|` in
/// rearranged space, one scalar per sample per exit. `velocities[e]` is
/// `(N, C, h, w)`; returns `losses[sample][exit]`.
pub fn per_exit_losses(
    velocities: &[&Tensor<f32>],
    x_t: &Tensor<f32>,
    t: &[f64],
    x1: &Tensor<f32>,
) -> Result<Vec<[f64; 4]>> {
    if velocities.len() != 4 {
        return Err(CoreError::invalid(
            "per_exit_losses",
            format!("need all four exits, got {}", velocities.len()),
        ));
    }
    let n = x_t.shape()[0];
    if t.len() != n {
        return Err(CoreError::invalid("per_exit_losses", "timestep count != batch"));
    }
    let inner: usize = x_t.shape()[1..].iter().product();
    let mut out = vec![[0.0f64; 4]; n];
    for (e, v) in velocities.iter().enumerate() {
        if v.shape() != x_t.shape() {
            return Err(CoreError::shape("per_exit_losses", "velocity shape mismatch"));
        }
        for s in 0..n {
            let c = (1.0 - t[s]) as f32;
            let mut acc = 0.0f64;
            let base = s * inner;
            for i in 0..inner {
                let rec = x_t.data()[base + i] + c * v.data()[base + i];
                acc += (rec - x1.data()[base + i]).abs() as f64;
            }
            out[s][e] = acc / inner as f64;
        }
    }
    Ok(out)
}

/// Earliest exit whose loss is within `epsilon` of the best.
pub fn oracle_label(losses: &[f64; 4], epsilon: f64) -> usize {
    let min = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    for (e, &l) in losses.iter().enumerate() {
        if l <= min + epsilon {
            return e;
        }
    }
    3
}

/// Adds the router's cross-entropy loss node on (a subset of) the batch
/// logits. Gradients reach only the classifier because the backbone features
/// are behind a stop-gradient.
pub fn router_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: VarId,
    sample_idx: &[usize],
    labels: &[usize],
) -> VarId {
    assert_eq!(sample_idx.len(), labels.len());
    let selected = if sample_idx.len() == g.shape(logits)[0]
        && sample_idx.iter().enumerate().all(|(i, &s)| i == s)
    {
        logits
    } else {
        g.select_rows(logits, Rc::new(sample_idx.to_vec()))
    };
    g.cross_entropy(selected, Rc::new(labels.to_vec()))
}

/// Adaptive single-step inference (quality-aware routing): run the trunk to
/// the first tap, classify, then either take exit 0 immediately or continue
/// to the predicted exit.
pub fn adaptive_infer(model: &FlowResNet<f32>, lr: &Image) -> Result<(Image, RoutingDecision)> {
    let (x0, spec) = flow::prepare_rearranged(lr, model.cfg.scale, model.cfg.window)?;
    let mut g = Graph::new();
    let x0_id = g.input(x0.clone());
    let exits = model.cfg.exit_blocks();

    let mut st = model.start_trunk(&mut g, x0_id, x0_id, &[0.0]);
    model.run_blocks(&mut g, &mut st, 0, exits[0] + 1);
    let f_e0 = st.features;
    let logits_id = model.classify_exit(&mut g, f_e0);
    let logits_t = g.value(logits_id);
    let mut logits = [0.0f64; 4];
    for (i, l) in logits.iter_mut().enumerate() {
        *l = logits_t.data()[i] as f64;
    }
    let e_hat = argmax_lowest(&logits);

    let v = if e_hat == 0 {
        model.exit_velocity(&mut g, &st, 0)
    } else {
        model.run_blocks(&mut g, &mut st, exits[0] + 1, exits[e_hat] + 1);
        model.exit_velocity(&mut g, &st, e_hat)
    };
    let vt = g.value(v);
    let x1_hat = Tensor::from_fn(x0.shape(), |i| x0.data()[i] + vt.data()[i]);
    let img = flow::finish_image(&x1_hat, model.cfg.scale, &spec)?;
    Ok((
        img,
        RoutingDecision { predicted_exit: e_hat, logits, oracle_exit: None, per_exit_losses: None },
    ))
}

/// Evaluation-time routing against ground truth: runs all exits at `t = 0`,
/// derives the oracle label, and reports both predicted and oracle exits.
pub fn route_with_oracle(model: &FlowResNet<f32>, lr: &Image, hr: &Image) -> Result<RoutingDecision> {
    let pair = flow::make_pair(lr, hr, model.cfg.scale)?;
    let mut g = Graph::new();
    let x0_id = g.input(pair.x0.clone());
    let bundle = model.forward(&mut g, x0_id, x0_id, &[0.0], ForwardMode::AllExits);
    let vs: Vec<&Tensor<f32>> = bundle.velocities.iter().map(|&v| g.value(v)).collect();
    let losses = per_exit_losses(&vs, &pair.x0, &[0.0], &pair.x1)?;
    let logits_t = g.value(bundle.logits);
    let mut logits = [0.0f64; 4];
    for (i, l) in logits.iter_mut().enumerate() {
        *l = logits_t.data()[i] as f64;
    }
    let e_hat = argmax_lowest(&logits);
    let e_star = oracle_label(&losses[0], ORACLE_EPSILON);
    Ok(RoutingDecision {
        predicted_exit: e_hat,
        logits,
        oracle_exit: Some(e_star),
        per_exit_losses: Some(losses[0]),
    })
}
