//! Two-phase training: task loss first, then task loss plus capacity penalty.

mod loss;
mod metrics;
mod optim;

pub use loss::{bce_loss, bce_loss_on_tape, composite_loss, l1_loss, l1_loss_on_tape, PROB_CLAMP};
pub use metrics::eer;
pub use optim::{AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gate::{lambda_penalty_on_tape, GATE_GRAD_CLIP};
use crate::layers::{Mode, ModelGraph, ParamKind, DEFAULT_PRUNE_THRESHOLD};
use crate::profiler::effective_flops;
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    /// Steps trained on the task alone before the penalty is switched on.
    pub phase1_steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight of the `λ²` penalty.
    pub beta: f64,
    pub lambda_min: f64,
    pub l1_scale: f64,
    pub seed: u64,
    pub batch_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            phase1_steps: 1000,
            lr: 1e-3,
            weight_decay: 0.0,
            beta: 0.5,
            lambda_min: 1e-3,
            l1_scale: 1.0,
            seed: 0,
            batch_frames: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.phase1_steps > self.total_steps {
            return Err(invalid(format!(
                "phase1_steps {} exceeds total_steps {}",
                self.phase1_steps, self.total_steps
            )));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(invalid(format!("beta {} must be nonnegative", self.beta)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(invalid(format!("lr {} must be positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(invalid(format!("weight_decay {} must be nonnegative", self.weight_decay)));
        }
        if !(self.lambda_min > 0.0 && self.lambda_min < crate::gate::LAMBDA_MAX) {
            return Err(invalid(format!("lambda_min {} outside (0, λ_max)", self.lambda_min)));
        }
        if !(self.l1_scale.is_finite() && self.l1_scale > 0.0) {
            return Err(invalid(format!("l1_scale {} must be positive", self.l1_scale)));
        }
        if self.batch_frames == 0 {
            return Err(invalid("batch_frames must be positive"));
        }
        Ok(())
    }
}

/// A source of training batches and the loss used to fit them.
pub trait Task {
    /// `(input, target)` for step `step`; must be a pure function of `step`.
    fn batch(&self, step: u64) -> Result<(Tensor, Tensor)>;

    /// Task loss on the tape; mean absolute error by default.
    fn loss(&self, tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
        l1_loss_on_tape(tape, target, pred)
    }
}

impl Task for crate::filterbank::FilterBankTask {
    fn batch(&self, step: u64) -> Result<(Tensor, Tensor)> {
        crate::filterbank::FilterBankTask::batch(self, step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub task_loss: f64,
    /// Penalty term that entered the objective (0 during phase 1).
    pub lambda_penalty: f64,
    pub mean_lambda: f64,
    pub active_units: usize,
    pub flops_per_frame: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,task_loss,lambda_penalty,mean_lambda,active_units,flops_per_frame\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.step, r.task_loss, r.lambda_penalty, r.mean_lambda, r.active_units, r.flops_per_frame
            );
        }
        s
    }
}

/// Sub-stream of the run seed that supplies gate noise.
const NOISE_STREAM: u64 = 0x6A7E;

/// Trains `model` in place.
///
/// Steps `0..phase1_steps` fit the task with every `λ` frozen. Later steps
/// minimize `l1_scale · task + Σ (β/N) Σ λ²` with `λ` trainable (with
/// `β = 0` the second phase is plain training and `λ` stays frozen); its
/// gradient is clipped to `±GATE_GRAD_CLIP` and `λ` is clamped to the gate
/// band after each update. Each training forward feeds the gates' running
/// deviation estimate. Gate noise for step `s`, layer `i` comes from
/// `seed → NOISE_STREAM → s → i`.
pub fn train_two_phase(model: &mut ModelGraph, task: &dyn Task, config: &TrainConfig) -> Result<TrainHistory> {
    config.validate()?;
    let mut opt = AdamState::adamw(config.lr, config.weight_decay)?;
    let noise_root = RngStream::new(config.seed).derive(NOISE_STREAM);
    let mut history = TrainHistory { records: Vec::with_capacity(config.total_steps as usize) };

    for step in 0..config.total_steps {
        let penalized = step >= config.phase1_steps && config.beta > 0.0;
        let (x, y) = task.batch(step)?;

        let mut tape = Tape::new();
        let bindings = model.bind(&mut tape, penalized);
        let xv = tape.constant(x);
        let yv = tape.constant(y);
        let pass = model.forward(&mut tape, &bindings, xv, Mode::Train { noise: Some(noise_root.derive(step)) })?;
        let task_loss = task.loss(&mut tape, pass.output, yv)?;
        let mut objective = tape.scale(task_loss, config.l1_scale);
        let mut penalty_value = 0.0;
        if penalized {
            for (id, var) in bindings.iter() {
                if id.kind == ParamKind::Lambda {
                    let p = lambda_penalty_on_tape(&mut tape, *var, config.beta);
                    penalty_value += tape.value(p).item()?;
                    objective = tape.add(objective, p)?;
                }
            }
        }
        let task_value = tape.value(task_loss).item()?;
        if !tape.value(objective).item()?.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }

        let grads = tape.backward(objective)?;
        let updates: Vec<_> = bindings
            .iter()
            .filter(|(_, var)| tape.requires_grad(*var))
            .map(|(id, var)| {
                let g = grads.get(*var);
                let g = if id.kind == ParamKind::Lambda { g.clamp(-GATE_GRAD_CLIP, GATE_GRAD_CLIP) } else { g };
                (*id, id.name(), g)
            })
            .collect();
        let mut values: Vec<Tensor> =
            updates.iter().map(|(id, _, _)| model.param(*id).expect("bound parameter").clone()).collect();
        opt.step(values.iter_mut().zip(&updates).map(|(p, (_, name, g))| (name.as_str(), p, g)))?;
        for (value, (id, _, _)) in values.into_iter().zip(&updates) {
            *model.param_mut(*id).expect("bound parameter") = value;
        }
        model.clamp_lambdas();
        model.update_sigma(&pass.gate_features)?;

        history.records.push(StepRecord {
            step: step + 1,
            task_loss: task_value,
            lambda_penalty: penalty_value,
            mean_lambda: model.mean_lambda().unwrap_or(1.0),
            active_units: model.active_units(DEFAULT_PRUNE_THRESHOLD),
            flops_per_frame: effective_flops(model),
        });
    }
    Ok(history)
}
