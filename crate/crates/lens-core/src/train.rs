//! Optimization stack: AdamW and SGD with momentum, linear warmup with
//! cosine or exponential decay, global gradient clipping, effective-number
//! class weighting, and the member-parallel epoch loop.
//!
//! Every member sees identical batches; the objective is the mean of the
//! per-member cross-entropy losses. Member gradients are computed on
//! separate tapes in parallel, then merged in member order, so results are
//! bitwise independent of thread scheduling.


use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::backbone::{patchify_batch, vit_forward_graph, ForwardMode, LoadedParams, Method,
    Model, ModelConfig, ModelError};
use crate::checkpoint::ParamSet;
use crate::ensemble::{finalize_snapshots, plan_snapshots, record_snapshot};
use crate::metrics::argmax_row;
use crate::rng::{derive, member_seed, SplitMix64};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("training configuration: {0}")]
    Config(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

/// Optimizer family and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    Sgd { momentum: f64 },
}

impl OptimizerKind {
    pub fn adamw_default() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }

    pub fn sgd_default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

/// Per-parameter optimizer state: first/second moments for AdamW, velocity
/// for SGD. Buffers are keyed by position in the trainable parameter list.
pub struct Optimizer {
    kind: OptimizerKind,
    step: usize,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, sizes: &[usize]) -> Self {
        let m = sizes.iter().map(|&n| vec![0.0f32; n]).collect();
        let v = match kind {
            OptimizerKind::AdamW { .. } => sizes.iter().map(|&n| vec![0.0f32; n]).collect(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer { kind, step: 0, m, v }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update over aligned (parameter, gradient) pairs. Rejects
    /// non-finite gradients before touching any parameter.
    pub fn step(
        &mut self,
        params: &mut [&mut [f32]],
        grads: &[&[f32]],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::Config(format!(
                "optimizer built for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if lr < 0.0 || !lr.is_finite() {
            return Err(TrainError::Config(format!("learning rate must be >= 0, got {lr}")));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.len() != self.m[i].len() {
                return Err(TrainError::Config(format!(
                    "gradient {i} has {} values, expected {}",
                    g.len(),
                    self.m[i].len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::Diverged {
                    step: self.step + 1,
                    what: format!("non-finite gradient in tensor {i}"),
                });
            }
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                let t = self.step as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for j in 0..p.len() {
                        let gj = g[j] as f64;
                        let mj = beta1 * m[j] as f64 + (1.0 - beta1) * gj;
                        let vj = beta2 * v[j] as f64 + (1.0 - beta2) * gj * gj;
                        m[j] = mj as f32;
                        v[j] = vj as f32;
                        let m_hat = mj / bc1;
                        let v_hat = vj / bc2;
                        let pj = p[j] as f64;
                        p[j] = (pj - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * pj)
                            as f32;
                    }
                }
            }
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(self.m.iter_mut()) {
                    for j in 0..p.len() {
                        let vel = momentum * m[j] as f64 + g[j] as f64;
                        m[j] = vel as f32;
                        p[j] = (p[j] as f64 - lr * vel) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Learning-rate trajectory: linear warmup from zero, then cosine decay to
/// zero at `total_steps` or stepwise exponential decay per epoch block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "shape")]
pub enum ScheduleShape {
    WarmupCosine,
    WarmupExponential { factor: f64, every_epochs: usize },
}

#[derive(Clone, Debug)]
pub struct SchedulePlan {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub steps_per_epoch: usize,
    pub shape: ScheduleShape,
}

/// Learning rate at an optimizer step (0-based, at most `total_steps`).
/// Both warmup and decay agree on `base_lr` at the boundary. Exponential
/// decay counts epochs from the end of warmup.
pub fn lr_at(step: usize, plan: &SchedulePlan) -> f64 {
    let step = step.min(plan.total_steps);
    let w = plan.warmup_steps;
    if w > 0 && step < w {
        return plan.base_lr * step as f64 / w as f64;
    }
    match plan.shape {
        ScheduleShape::WarmupCosine => {
            let len = plan.total_steps.saturating_sub(w);
            if len == 0 {
                return 0.0;
            }
            let t = (step - w) as f64 / len as f64;
            plan.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
        ScheduleShape::WarmupExponential { factor, every_epochs } => {
            let spe = plan.steps_per_epoch.max(1);
            let epochs_done = (step - w) / spe;
            let blocks = if every_epochs == 0 { 0 } else { epochs_done / every_epochs };
            plan.base_lr * factor.powi(blocks as i32)
        }
    }
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm over
/// every tensor exceeds `max_norm`. Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [&mut [f32]], max_norm: f64) -> Result<f64, TrainError> {
    if max_norm <= 0.0 {
        return Err(TrainError::Config(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut sum_sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.iter() {
            if !x.is_finite() {
                return Err(TrainError::Diverged {
                    step: 0,
                    what: "non-finite gradient before clipping".into(),
                });
            }
            sum_sq += x as f64 * x as f64;
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    Ok(norm)
}

/// Class weights proportional to `(1 - beta) / (1 - beta^count)`, normalized
/// to mean one. `beta = 0` gives uniform weights.
pub fn effective_number_weights(counts: &[usize], beta: f64) -> Result<Vec<f32>, TrainError> {
    if counts.is_empty() {
        return Err(TrainError::Config("need at least one class count".into()));
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(TrainError::Config("class counts must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(TrainError::Config(format!("beta must be in [0,1), got {beta}")));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if beta == 0.0 {
                1.0
            } else {
                (1.0 - beta) / (1.0 - beta.powi(c as i32))
            }
        })
        .collect();
    let mean: f64 = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.iter().map(|&w| (w / mean) as f32).collect())
}

/// Training hyperparameters. Defaults are the desk-scale recipe: AdamW at
/// base rate 1e-4, batch 32, 100 warmup steps, cosine decay, 30 epochs,
/// gradient norm capped at 1.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub optimizer: OptimizerKind,
    pub schedule: ScheduleShape,
    pub clip_max_norm: Option<f64>,
    /// Effective-number class weighting; `None` means uniform weights.
    pub class_beta: Option<f64>,
    /// Epochs before the first snapshot cycle (snapshot method only).
    pub burn_in: usize,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-4,
            warmup_steps: 100,
            optimizer: OptimizerKind::adamw_default(),
            schedule: ScheduleShape::WarmupCosine,
            clip_max_norm: Some(1.0),
            class_beta: None,
            burn_in: 15,
            shuffle: true,
        }
    }
}

/// One history record: per-member rows plus one aggregate row (member null)
/// per epoch.
#[derive(Clone, Debug, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub member: Option<usize>,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
}

struct MemberStep {
    loss: f64,
    correct: usize,
    grads: Vec<Option<Vec<f32>>>,
}

/// Trains a freshly initialized model on the labeled images. Deterministic
/// given (configs, data, seed): member gradients merge in member order and
/// batch order is drawn from the seed.
pub fn train_run(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    images: &[f32],
    labels: &[usize],
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let model = Model::init(model_config.clone(), seed)?;
    let config = model.config.clone();
    let mut params = model.params;
    let n = labels.len();
    let per_image = config.image_size * config.image_size * config.channels;
    if images.len() != n * per_image {
        return Err(TrainError::Config(format!(
            "image buffer has {} values, expected {} for {} labels",
            images.len(),
            n * per_image,
            n
        )));
    }
    if train_config.batch_size == 0 {
        return Err(TrainError::Config("batch size must be positive".into()));
    }
    if n == 0 {
        return Err(TrainError::Config("training set is empty".into()));
    }

    let classes = config.num_classes;
    let class_weights: Vec<f32> = match train_config.class_beta {
        Some(beta) => {
            let mut counts = vec![0usize; classes];
            for &y in labels {
                if y >= classes {
                    return Err(TrainError::Config(format!(
                        "label {y} out of range for {classes} classes"
                    )));
                }
                counts[y] += 1;
            }
            effective_number_weights(&counts, beta)?
        }
        None => vec![1.0; classes],
    };

    let trainable_names: Vec<String> =
        params.trainable().map(|p| p.name.clone()).collect();
    let sizes: Vec<usize> = trainable_names
        .iter()
        .map(|name| params.get(name).expect("trainable name").numel())
        .collect();
    let mut optimizer = Optimizer::new(train_config.optimizer, &sizes);

    let steps_per_epoch = n.div_ceil(train_config.batch_size);
    let total_steps = train_config.epochs * steps_per_epoch;
    let plan = SchedulePlan {
        base_lr: train_config.base_lr,
        warmup_steps: train_config.warmup_steps.min(total_steps),
        total_steps,
        steps_per_epoch,
        shape: train_config.schedule,
    };
    let snapshot_plan = if config.method == Method::Snapshot && train_config.epochs > 0 {
        Some(plan_snapshots(train_config.epochs, train_config.burn_in, config.members)?)
    } else {
        None
    };

    let members = config.members;
    let mut history = Vec::new();
    let mut snapshots_taken = 0usize;
    let mut global_step = 0usize;

    for epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if train_config.shuffle {
            let mut rng = SplitMix64::new(derive(derive(seed, 0xDA7A), epoch as u64));
            rng.shuffle(&mut order);
        }
        let mut epoch_loss = vec![0.0f64; members];
        let mut epoch_correct = vec![0usize; members];
        let mut epoch_lr_sum = 0.0f64;

        for chunk in order.chunks(train_config.batch_size) {
            let lr = match &snapshot_plan {
                Some(sp) => snapshot_lr(global_step, &plan, sp),
                None => lr_at(global_step, &plan),
            };
            epoch_lr_sum += lr;

            let mut batch_images = Vec::with_capacity(chunk.len() * per_image);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch_images.extend_from_slice(&images[i * per_image..(i + 1) * per_image]);
                batch_labels.push(labels[i]);
            }

            let step_results: Vec<Result<MemberStep, TrainError>> = (0..members)
                .into_par_iter()
                .map(|m| {
                    member_step(
                        &config,
                        &params,
                        &trainable_names,
                        &batch_images,
                        &batch_labels,
                        &class_weights,
                        m,
                        seed,
                        global_step,
                    )
                })
                .collect();

            let mut merged: Vec<Vec<f32>> =
                sizes.iter().map(|&s| vec![0.0f32; s]).collect();
            let scale = 1.0 / members as f32;
            for (m, result) in step_results.into_iter().enumerate() {
                let step = result.map_err(|e| at_step(e, global_step))?;
                if !step.loss.is_finite() {
                    return Err(TrainError::Diverged {
                        step: global_step,
                        what: format!("member {m} loss is not finite"),
                    });
                }
                epoch_loss[m] += step.loss;
                epoch_correct[m] += step.correct;
                for (dst, src) in merged.iter_mut().zip(step.grads) {
                    if let Some(g) = src {
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += scale * s;
                        }
                    }
                }
            }

            if let Some(max_norm) = train_config.clip_max_norm {
                let mut refs: Vec<&mut [f32]> =
                    merged.iter_mut().map(|g| g.as_mut_slice()).collect();
                clip_gradients(&mut refs, max_norm).map_err(|e| at_step(e, global_step))?;
            }

            {
                let grad_refs: Vec<&[f32]> = merged.iter().map(|g| g.as_slice()).collect();
                let mut param_refs: Vec<&mut [f32]> = Vec::with_capacity(trainable_names.len());
                let mut taken: Vec<&mut crate::checkpoint::Param> = params
                    .iter_mut()
                    .filter(|p| p.trainable)
                    .collect();
                for p in taken.iter_mut() {
                    param_refs.push(p.tensor.data_mut());
                }
                optimizer
                    .step(&mut param_refs, &grad_refs, lr)
                    .map_err(|e| at_step(e, global_step))?;
            }
            global_step += 1;
        }

        let batches = steps_per_epoch as f64;
        let mean_lr = epoch_lr_sum / batches;
        let mut agg_loss = 0.0f64;
        let mut agg_acc = 0.0f64;
        for m in 0..members {
            let loss = epoch_loss[m] / batches;
            let acc = epoch_correct[m] as f64 / n as f64;
            agg_loss += loss;
            agg_acc += acc;
            history.push(HistoryRow { epoch, member: Some(m), loss, acc, lr: mean_lr });
        }
        history.push(HistoryRow {
            epoch,
            member: None,
            loss: agg_loss / members as f64,
            acc: agg_acc / members as f64,
            lr: mean_lr,
        });

        if let Some(sp) = &snapshot_plan {
            if snapshots_taken < sp.snapshot_epochs.len()
                && sp.snapshot_epochs[snapshots_taken] == epoch + 1
            {
                record_snapshot(&mut params, snapshots_taken)?;
                snapshots_taken += 1;
            }
        }
    }

    if let Some(sp) = &snapshot_plan {
        if snapshots_taken != sp.members {
            return Err(TrainError::Config(format!(
                "recorded {snapshots_taken} snapshots, expected {}",
                sp.members
            )));
        }
        params = finalize_snapshots(&params, sp.members)?;
    }

    Ok(TrainOutcome { model: Model { config, params }, history })
}

fn at_step(e: TrainError, step: usize) -> TrainError {
    match e {
        TrainError::Diverged { what, .. } => TrainError::Diverged { step, what },
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op })) => {
            TrainError::Diverged { step, what: format!("non-finite values in {op}") }
        }
        other => other,
    }
}

/// Burn-in follows the warmup-cosine plan compressed into the burn-in
/// epochs; afterwards the rate restarts from base and decays to the cycle
/// boundary, whose end is where snapshots are recorded.
fn snapshot_lr(step: usize, plan: &SchedulePlan, sp: &crate::ensemble::SnapshotPlan) -> f64 {
    let burn_steps = sp.burn_in * plan.steps_per_epoch;
    if step < burn_steps {
        let burn_plan = SchedulePlan {
            base_lr: plan.base_lr,
            warmup_steps: plan.warmup_steps.min(burn_steps),
            total_steps: burn_steps,
            steps_per_epoch: plan.steps_per_epoch,
            shape: ScheduleShape::WarmupCosine,
        };
        return lr_at(step, &burn_plan);
    }
    let cycle_steps = (sp.cycle_length * plan.steps_per_epoch).max(1);
    let pos = (step - burn_steps) % cycle_steps;
    plan.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * pos as f64 / cycle_steps as f64).cos())
}

#[allow(clippy::too_many_arguments)]
fn member_step(
    config: &ModelConfig,
    params: &ParamSet,
    trainable_names: &[String],
    batch_images: &[f32],
    batch_labels: &[usize],
    class_weights: &[f32],
    member: usize,
    seed: u64,
    global_step: usize,
) -> Result<MemberStep, TrainError> {
    let mut tape: Tape<f32> = Tape::new();
    let loaded = LoadedParams::load(&mut tape, params);
    let batch = batch_labels.len();
    let patches = patchify_batch(&mut tape, batch_images, batch, config)?;
    let stochastic = matches!(config.method, Method::McDropout | Method::Epinet);
    let out = if stochastic {
        let mut rng =
            SplitMix64::new(derive(derive(member_seed(seed, member), 0x7EA1), global_step as u64));
        let mut mode = ForwardMode::Stochastic { rng: &mut rng };
        vit_forward_graph(&mut tape, &loaded, config, patches, batch, member, &mut mode)?
    } else {
        let mut mode = ForwardMode::Deterministic;
        vit_forward_graph(&mut tape, &loaded, config, patches, batch, member, &mut mode)?
    };
    let loss_id = tape.weighted_ce(out.logits, batch_labels, class_weights)?;
    let loss = tape.value(loss_id)[0] as f64;
    let correct = tape
        .value(out.logits)
        .chunks_exact(config.num_classes)
        .zip(batch_labels)
        .filter(|(row, &y)| argmax_row(row) == y)
        .count();
    tape.backward(loss_id)?;
    let grads = trainable_names
        .iter()
        .map(|name| tape.grad(loaded.id(name)).map(|g| g.to_vec()))
        .collect();
    Ok(MemberStep { loss, correct, grads })
}

/// Serializes history rows as JSON lines.
pub fn history_to_jsonl(history: &[HistoryRow]) -> String {
    history
        .iter()
        .map(|row| serde_json::to_string(row).expect("history row serializes"))
        .collect::<Vec<_>>()
        .join("\n")
}
