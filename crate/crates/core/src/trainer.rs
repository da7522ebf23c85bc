//! End-to-end training with batch-size adaptation and SNR scheduling.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::gradcheck::{check_store_gradients, GradCheckConfig, GradCheckReport};
use crate::autodiff::{AdamConfig, AdamState, Checkpoint, Tape, Var, BCE_CLAMP, ParamStore};
use crate::channel::{generate_dataset, ChannelSpec, SeedPath};
use crate::decoder::Phase;
use crate::error::{DrfError, Result};
use crate::model::{AttentionMode, Batch, DrfModel, PassOptions};

/// Global gradient-norm bound applied before every Adam step.
pub const GRAD_CLIP: f64 = 1.0;

/// Power weights are projected onto `[POWER_WEIGHT_FLOOR, ∞)` after each step.
pub const POWER_WEIGHT_FLOOR: f64 = 1e-6;

/// How the loss-stall condition compares consecutive epoch losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallRule {
    /// Grow when `L_u ≥ λ·L_{u-1}`.
    #[default]
    Multiplied,
    /// Grow when `L_u ≥ L_{u-1}/λ`, i.e. the loss did not fall by a factor λ.
    Divided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPlan {
    /// Forward SNR (dB) per epoch; its length is the number of epochs.
    pub snr_schedule_db: Vec<f64>,
    pub initial_batch: usize,
    pub max_batch: usize,
    /// Optimiser steps per epoch (the dataset holds `ζ·|B|` samples).
    pub zeta: usize,
    pub stall_factor: f64,
    pub growth_factor: f64,
    #[serde(default)]
    pub stall_rule: StallRule,
    pub learning_rate: f64,
    pub seed: u64,
    /// Samples in the end-of-training pass that freezes normalisation statistics.
    pub calibration_samples: usize,
    /// SNR of the calibration pass; the last scheduled SNR when absent.
    #[serde(default)]
    pub calibration_snr_db: Option<f64>,
    /// Per-receiver loss weights for multicast codes.
    #[serde(default = "unit_weights")]
    pub loss_weights: [f64; 2],
}

fn unit_weights() -> [f64; 2] {
    [1.0, 1.0]
}

/// `{-1, -1, 0, 1, 2}` dB, each for `repeats` epochs.
pub fn default_schedule(repeats: usize) -> Vec<f64> {
    [-1.0, -1.0, 0.0, 1.0, 2.0].iter().flat_map(|s| std::iter::repeat_n(*s, repeats)).collect()
}

impl TrainPlan {
    /// Full-size plan: 15 epochs, batch 1000 growing to 16000, 100 steps per epoch, stall and growth factors 2.
    pub fn standard() -> Self {
        Self {
            snr_schedule_db: default_schedule(3),
            initial_batch: 1000,
            max_batch: 16000,
            zeta: 100,
            stall_factor: 2.0,
            growth_factor: 2.0,
            stall_rule: StallRule::Multiplied,
            learning_rate: 1e-3,
            seed: 0,
            calibration_samples: 10_000,
            calibration_snr_db: None,
            loss_weights: unit_weights(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.snr_schedule_db.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_schedule_db.is_empty() {
            return Err(DrfError::invalid("SNR schedule is empty"));
        }
        if self.snr_schedule_db.iter().any(|s| !s.is_finite()) {
            return Err(DrfError::invalid("SNR schedule must be finite"));
        }
        if let Some(i) = self.snr_schedule_db.windows(2).position(|w| w[1] < w[0]) {
            return Err(DrfError::invalid(format!(
                "SNR schedule must be non-decreasing ({} dB then {} dB at epoch {})",
                self.snr_schedule_db[i],
                self.snr_schedule_db[i + 1],
                i + 2
            )));
        }
        if self.initial_batch == 0 || self.initial_batch > self.max_batch {
            return Err(DrfError::invalid(format!("need 0 < |B¹| ≤ B_max, got {} and {}", self.initial_batch, self.max_batch)));
        }
        if !(self.growth_factor > 1.0) {
            return Err(DrfError::invalid("batch growth factor κ must exceed 1"));
        }
        if !(self.stall_factor >= 1.0) {
            return Err(DrfError::invalid("loss-stall factor λ must be at least 1"));
        }
        if self.zeta == 0 {
            return Err(DrfError::invalid("ζ must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(DrfError::invalid("learning rate must be positive"));
        }
        if self.calibration_samples == 0 {
            return Err(DrfError::invalid("calibration needs at least one sample"));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(DrfError::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Batch size for the next epoch.
pub fn update_batch_size(loss: f64, previous: f64, batch: usize, lambda: f64, kappa: f64, max_batch: usize, rule: StallRule) -> usize {
    let stalled = match rule {
        StallRule::Multiplied => loss >= lambda * previous,
        StallRule::Divided => loss >= previous / lambda,
    };
    if stalled && batch < max_batch {
        ((batch as f64 * kappa).round() as usize).min(max_batch)
    } else {
        batch
    }
}

/// Batch sizes `|B¹|, |B²|, …` produced by a sequence of epoch losses, with `L_0 = ∞`.
pub fn batch_size_trace(losses: &[f64], plan: &TrainPlan) -> Vec<usize> {
    let mut sizes = vec![plan.initial_batch];
    let mut previous = f64::INFINITY;
    for &loss in losses {
        let b = *sizes.last().expect("non-empty");
        sizes.push(update_batch_size(loss, previous, b, plan.stall_factor, plan.growth_factor, plan.max_batch, plan.stall_rule));
        previous = loss;
    }
    sizes
}

/// Binary cross entropy in bits of one message, summed over bits.
pub fn bce_loss(probs: &[f64], bits: &[u8]) -> Result<f64> {
    if probs.len() != bits.len() {
        return Err(DrfError::invalid(format!("{} probabilities for {} bits", probs.len(), bits.len())));
    }
    let mut total = 0.0;
    for (p, b) in probs.iter().zip(bits) {
        let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        if !(0.0..=1.0).contains(&q) {
            return Err(DrfError::invalid(format!("probability {p} out of range")));
        }
        total -= if *b == 1 { q.log2() } else { (1.0 - q).log2() };
    }
    Ok(total)
}

/// `w₁·bce(b̂¹, b) + w₂·bce(b̂², b)` on the tape.
pub fn multicast_loss(tape: &mut Tape, p1: Var, p2: Var, targets: &[f64], weights: [f64; 2]) -> Result<Var> {
    let l1 = tape.bce(p1, targets)?;
    let l2 = tape.bce(p2, targets)?;
    let l1 = tape.affine(l1, weights[0], 0.0);
    let l2 = tape.affine(l2, weights[1], 0.0);
    tape.add(l1, l2)
}

/// Sum of the per-receiver losses of a pass.
pub fn pass_loss(tape: &mut Tape, probs: &[Var], targets: &[f64], weights: [f64; 2]) -> Result<Var> {
    match probs {
        [p] => tape.bce(*p, targets),
        [p1, p2] => multicast_loss(tape, *p1, *p2, targets, weights),
        _ => Err(DrfError::invalid(format!("{} receivers", probs.len()))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch index.
    pub epoch: usize,
    pub batch_size: usize,
    pub snr_db: f64,
    /// Loss of the last step of the epoch.
    pub final_loss: f64,
    pub mean_loss: f64,
    pub wall_seconds: f64,
    pub checksum: String,
}

/// Model plus optimiser state carried across epochs.
pub struct Trainer<'a> {
    pub model: &'a mut DrfModel,
    pub adam: AdamState,
    pub plan: TrainPlan,
    pub channel: ChannelSpec,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut DrfModel, plan: TrainPlan, channel: ChannelSpec) -> Result<Self> {
        plan.validate()?;
        model.config.check_channel(&channel)?;
        let adam = AdamState::new(&model.store, AdamConfig { learning_rate: plan.learning_rate, ..AdamConfig::default() });
        Ok(Self { model, adam, plan, channel })
    }

    /// One optimiser step on `batch`; returns the loss before the update.
    pub fn step(&mut self, batch: &Batch, channel: &ChannelSpec) -> Result<f64> {
        let mut tape = Tape::new();
        let opts = PassOptions { phase: Phase::Train, attention: AttentionMode::Matched, zero_feedback: false };
        let pass = self.model.forward(&mut tape, batch, channel, &opts)?;
        let loss = pass_loss(&mut tape, &pass.probs, &batch.targets(), self.plan.loss_weights)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Ok(value);
        }
        self.model.store.zero_grad();
        tape.backward_into(loss, &mut self.model.store)?;
        self.model.store.clip_grad_norm(GRAD_CLIP);
        self.adam.step(&mut self.model.store)?;
        let w = self.model.encoder.power_w;
        for v in self.model.store.get_mut(w).data_mut() {
            *v = v.max(POWER_WEIGHT_FLOOR);
        }
        self.model.absorb_statistics(&pass);
        Ok(value)
    }

    /// Runs epoch `epoch` (1-based) with the given batch size.
    pub fn run_epoch(&mut self, epoch: usize, batch_size: usize) -> Result<EpochReport> {
        if epoch == 0 || epoch > self.plan.epochs() {
            return Err(DrfError::invalid(format!("epoch {epoch} outside 1..={}", self.plan.epochs())));
        }
        let start = Instant::now();
        let snr = self.plan.snr_schedule_db[epoch - 1];
        let channel = self.channel.with_forward_snr(snr);
        let path = SeedPath::new(self.plan.seed, epoch as u64);
        let k = self.model.config.k;
        let mut total = 0.0;
        let mut last = f64::NAN;
        for step in 0..self.plan.zeta {
            let samples = generate_dataset(&channel, k, batch_size, path, (step * batch_size) as u64)?;
            let batch = Batch::from_samples(&samples)?;
            last = self.step(&batch, &channel)?;
            if !last.is_finite() {
                return Err(DrfError::NonFiniteLoss { epoch, step, value: last });
            }
            total += last;
        }
        Ok(EpochReport {
            epoch,
            batch_size,
            snr_db: snr,
            final_loss: last,
            mean_loss: total / self.plan.zeta as f64,
            wall_seconds: start.elapsed().as_secs_f64(),
            checksum: parameter_checksum(self.model),
        })
    }

    /// Freezes power and batch-norm statistics from one large training-mode pass.
    pub fn calibrate(&mut self) -> Result<()> {
        let snr = self.plan.calibration_snr_db.unwrap_or(*self.plan.snr_schedule_db.last().expect("validated"));
        let channel = self.channel.with_forward_snr(snr);
        let path = SeedPath::new(self.plan.seed, CALIBRATION_EPOCH);
        let samples = generate_dataset(&channel, self.model.config.k, self.plan.calibration_samples, path, 0)?;
        self.model.calibrate(&Batch::from_samples(&samples)?, &channel)
    }
}

const CALIBRATION_EPOCH: u64 = u64::MAX - 1;

/// SHA-256 over the serialised parameters and configuration.
pub fn parameter_checksum(model: &DrfModel) -> String {
    model.checkpoint(serde_json::Value::Null).checksum()
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Loss exceeded ten times the initial loss in two consecutive epochs;
    /// the model holds the parameters of the last good epoch.
    Diverged { epoch: usize, loss: f64, initial: f64 },
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub reports: Vec<EpochReport>,
    pub status: TrainStatus,
    /// Epoch with the lowest final loss.
    pub best_epoch: usize,
}

/// Runs every epoch of `plan`, adapting the batch size, then calibrates the
/// frozen statistics. `on_epoch` sees each report with the updated model;
/// its errors abort training and are returned unchanged.
pub fn train<F, E>(model: &mut DrfModel, plan: &TrainPlan, channel: &ChannelSpec, mut on_epoch: F) -> std::result::Result<TrainSummary, E>
where
    F: FnMut(&EpochReport, &DrfModel, bool) -> std::result::Result<(), E>,
    E: From<DrfError>,
{
    let mut trainer = Trainer::new(model, plan.clone(), *channel)?;
    let mut reports: Vec<EpochReport> = Vec::new();
    let mut batch = plan.initial_batch;
    let mut previous = f64::INFINITY;
    let mut initial: Option<f64> = None;
    let mut high_streak = 0;
    let mut last_good: Option<Checkpoint> = None;
    let mut best = (f64::INFINITY, 0);
    let mut status = TrainStatus::Completed;

    for epoch in 1..=plan.epochs() {
        let report = trainer.run_epoch(epoch, batch)?;
        let init = *initial.get_or_insert(report.final_loss);
        if report.final_loss > 10.0 * init {
            high_streak += 1;
            if high_streak >= 2 {
                if let Some(ckpt) = &last_good {
                    ckpt.load_into(&mut trainer.model.store)?;
                }
                status = TrainStatus::Diverged { epoch, loss: report.final_loss, initial: init };
                reports.push(report);
                break;
            }
        } else {
            high_streak = 0;
            last_good = Some(trainer.model.checkpoint(serde_json::Value::Null));
        }
        let is_best = report.final_loss < best.0;
        if is_best {
            best = (report.final_loss, epoch);
        }
        on_epoch(&report, trainer.model, is_best)?;
        batch = update_batch_size(report.final_loss, previous, batch, plan.stall_factor, plan.growth_factor, plan.max_batch, plan.stall_rule);
        previous = report.final_loss;
        reports.push(report);
    }
    trainer.calibrate()?;
    Ok(TrainSummary { reports, status, best_epoch: best.1 })
}

/// Compares the backpropagated gradient of the training loss on one fixed
/// batch against central differences, for every trainable parameter.
///
/// Estimated CSI enters the graph as a constant, so finite differences only
/// agree with backpropagation when the model uses exact CSI.
pub fn full_gradient_check(model: &DrfModel, batch: &Batch, channel: &ChannelSpec, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let opts = PassOptions::train();
    let targets = batch.targets();
    let loss_of = |store: &ParamStore, grads: Option<&mut ParamStore>| -> Result<f64> {
        let mut tape = Tape::new();
        let pass = model.forward_with(&mut tape, store, batch, channel, &opts)?;
        let loss = pass_loss(&mut tape, &pass.probs, &targets, [1.0, 1.0])?;
        if let Some(g) = grads {
            tape.backward_into(loss, g)?;
        }
        Ok(tape.scalar(loss))
    };
    let mut grads = model.store.clone();
    grads.zero_grad();
    loss_of(&model.store, Some(&mut grads))?;
    let ids: Vec<_> = grads.trainable_ids().collect();
    check_store_gradients(&mut grads, &ids, cfg, |s| loss_of(s, None))
}
