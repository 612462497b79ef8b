//! Gradient training loop: Adam with bias correction, a two-phase learning
//! rate (the base rate for the first half of all steps, a tenth of it after),
//! seeded per-epoch shuffling, and batch gradients averaged over sequences
//! in a fixed order.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::SequenceSet;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_frames, MetricReport};
use crate::stack::Stack;
use crate::tensor::ImageTensor;

/// Optimization settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch sequence shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 1,
            batch_size: 4,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::config(format!("bad learning rate {}", self.base_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        Ok(())
    }
}

/// The learning rate for a given 1-based step: the base rate while
/// `step` < max(total/2, 1), a tenth of it from there on.
pub fn lr_schedule(base: f64, step: usize, total_steps: usize) -> f64 {
    let threshold = (total_steps / 2).max(1);
    if step < threshold {
        base
    } else {
        base / 10.0
    }
}

/// One optimizer-step record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean rollout loss over the batch.
    pub loss: f64,
    pub wall_ms: u128,
}

impl TrainLogRow {
    pub fn csv_header() -> &'static str {
        "step,epoch,lr,loss,wall_ms"
    }

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.epoch, self.lr, self.loss, self.wall_ms)
    }
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(shapes: &[(String, Vec<f64>)]) -> AdamState {
        AdamState {
            m: shapes.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: shapes.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    fn apply(
        &mut self,
        params: &mut [(String, Vec<f64>)],
        grads: &[(String, Vec<f64>)],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, (param, grad)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (p, &g)) in param.1.iter_mut().zip(&grad.1).enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Number of optimizer steps a full run will take.
pub fn total_steps(sequence_count: usize, cfg: &TrainConfig) -> usize {
    cfg.epochs * sequence_count.div_ceil(cfg.batch_size)
}

/// Train the stack in place over the data set. Returns one log row per
/// optimizer step. Aborts with a named parameter if any gradient goes
/// non-finite.
pub fn train(stack: &mut Stack, data: &SequenceSet, cfg: &TrainConfig) -> Result<Vec<TrainLogRow>> {
    cfg.validate()?;
    let count = data.len();
    let total = total_steps(count, cfg);
    let mut params = stack.flatten();
    let mut adam = AdamState::new(&params);
    let mut log = Vec::with_capacity(total);
    let mut step = 0usize;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..count).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut grad_sum: Option<Vec<(String, Vec<f64>)>> = None;
            let mut loss_sum = 0.0;
            for &idx in batch {
                let rollout = stack.rollout(&data.sequences()[idx], true)?;
                loss_sum += rollout.loss;
                let grads = rollout.backward()?;
                match grad_sum.as_mut() {
                    None => grad_sum = Some(grads),
                    Some(acc) => {
                        for ((_, a), (_, g)) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = grad_sum.expect("batches are non-empty");
            let inv = 1.0 / batch.len() as f64;
            for (name, g) in grads.iter_mut() {
                for x in g.iter_mut() {
                    *x *= inv;
                }
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::verification(format!(
                        "non-finite gradient {bad} in parameter {name} at step {step}"
                    )));
                }
            }
            // the schedule counts finished steps, so the first step is 0
            let lr = lr_schedule(cfg.base_lr, step - 1, total);
            adam.apply(&mut params, &grads, lr, cfg);
            stack.unflatten_into(&params)?;
            log.push(TrainLogRow {
                step,
                epoch,
                lr,
                loss: loss_sum / batch.len() as f64,
                wall_ms: started.elapsed().as_millis(),
            });
        }
    }
    Ok(log)
}

/// Result of scoring a model on held-out sequences.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: MetricReport,
    pub mean_loss: f64,
}

/// Scores one-step-ahead prediction: for every sequence the model rolls
/// forward and the prediction emitted at step t is compared against frame t,
/// for t >= 1. Frame 0 is excluded because the prediction for it comes from
/// the all-zero initial state.
pub fn evaluate(stack: &Stack, data: &SequenceSet) -> Result<EvalSummary> {
    if data.is_empty() {
        return Err(Error::config("evaluation needs at least one sequence"));
    }
    let mut predicted: Vec<ImageTensor> = Vec::new();
    let mut actual: Vec<ImageTensor> = Vec::new();
    let mut loss_sum = 0.0;
    for frames in data.sequences() {
        let rollout = stack.rollout(frames, false)?;
        loss_sum += rollout.loss;
        for (step, frame) in rollout.steps.iter().zip(frames.iter()).skip(1) {
            predicted.push(step.a_hat0.clone());
            actual.push(frame.clone());
        }
    }
    Ok(EvalSummary {
        report: evaluate_frames(&predicted, &actual)?,
        mean_loss: loss_sum / data.len() as f64,
    })
}

/// Baseline that predicts each frame as an exact copy of the previous one,
/// scored over the same (t >= 1) frames as `evaluate`.
pub fn copy_last_report(data: &SequenceSet) -> Result<MetricReport> {
    let mut predicted: Vec<ImageTensor> = Vec::new();
    let mut actual: Vec<ImageTensor> = Vec::new();
    for frames in data.sequences() {
        for t in 1..frames.len() {
            predicted.push(frames[t - 1].clone());
            actual.push(frames[t].clone());
        }
    }
    evaluate_frames(&predicted, &actual)
}
