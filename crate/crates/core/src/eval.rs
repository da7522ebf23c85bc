//! Monte-Carlo error-rate estimation, SNR-mismatch sweeps, multicast tables
//! and the uncoded antipodal baseline.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::channel::{generate_dataset, snr_db_to_variance, ChannelSpec, SeedPath};
use crate::decoder::{harden, NoiseLevels};
use crate::error::{DrfError, Result};
use crate::model::{AttentionMode, Batch, DrfModel, PassOptions};

/// Error events required before an estimate counts as uncensored.
pub const MIN_ERROR_EVENTS: u64 = 100;
/// Seed-path epoch reserved for evaluation streams.
const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ber,
    Bler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub metric: Metric,
    pub estimate: f64,
    /// 95% normal-approximation half-width.
    pub half_width: f64,
    /// Trials: bits for BER, blocks for BLER.
    pub trials: u64,
    pub errors: u64,
    /// Fewer than [`MIN_ERROR_EVENTS`] errors were seen before the cap.
    pub censored: bool,
}

impl ErrorEstimate {
    pub fn from_counts(metric: Metric, errors: u64, trials: u64) -> Self {
        let p = if trials == 0 { 0.0 } else { errors as f64 / trials as f64 };
        let half_width = if trials == 0 { f64::INFINITY } else { 1.96 * (p * (1.0 - p) / trials as f64).sqrt() };
        Self { metric, estimate: p, half_width, trials, errors, censored: errors < MIN_ERROR_EVENTS }
    }

    pub fn contains(&self, p: f64) -> bool {
        (self.estimate - p).abs() <= self.half_width
    }
}

/// Monte-Carlo budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleBudget {
    /// Always simulate at least this many messages.
    pub min_samples: u64,
    /// Never simulate more than this many messages.
    pub max_samples: u64,
    /// Messages per independently seeded shard.
    pub shard_size: usize,
    /// Messages per forward pass within a shard.
    pub batch_size: usize,
}

impl SampleBudget {
    /// Exactly `n` messages.
    pub fn fixed(n: u64) -> Self {
        Self { min_samples: n, max_samples: n, shard_size: 10_000, batch_size: 2_000 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_samples == 0 || self.min_samples > self.max_samples {
            return Err(DrfError::invalid(format!("need 0 < min ≤ max samples, got {} and {}", self.min_samples, self.max_samples)));
        }
        if self.shard_size == 0 || self.batch_size == 0 {
            return Err(DrfError::invalid("shard and batch sizes must be positive"));
        }
        Ok(())
    }
}

impl Default for SampleBudget {
    fn default() -> Self {
        Self { min_samples: 10_000, max_samples: 1_000_000, shard_size: 10_000, batch_size: 2_000 }
    }
}

/// Per-receiver error counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorCounts {
    pub messages: u64,
    pub bits: u64,
    pub bit_errors: Vec<u64>,
    pub block_errors: Vec<u64>,
}

impl ErrorCounts {
    fn new(receivers: usize) -> Self {
        Self { messages: 0, bits: 0, bit_errors: vec![0; receivers], block_errors: vec![0; receivers] }
    }

    fn merge(&mut self, other: &ErrorCounts) {
        self.messages += other.messages;
        self.bits += other.bits;
        for (a, b) in self.bit_errors.iter_mut().zip(&other.bit_errors) {
            *a += b;
        }
        for (a, b) in self.block_errors.iter_mut().zip(&other.block_errors) {
            *a += b;
        }
    }

    pub fn ber(&self, receiver: usize) -> ErrorEstimate {
        ErrorEstimate::from_counts(Metric::Ber, self.bit_errors[receiver], self.bits)
    }

    pub fn bler(&self, receiver: usize) -> ErrorEstimate {
        ErrorEstimate::from_counts(Metric::Bler, self.block_errors[receiver], self.messages)
    }
}

/// What to simulate and how to decode it.
#[derive(Clone, Debug)]
pub struct EvalSpec {
    pub channel: ChannelSpec,
    pub attention: AttentionMode,
    pub budget: SampleBudget,
    pub seed: u64,
}

fn run_shard(model: &DrfModel, spec: &EvalSpec, shard: u64, count: usize) -> Result<ErrorCounts> {
    let receivers = model.config.receivers;
    let mut counts = ErrorCounts::new(receivers);
    let path = SeedPath::new(spec.seed, EVAL_EPOCH);
    let first = shard * spec.budget.shard_size as u64;
    let opts = PassOptions { attention: spec.attention.clone(), ..PassOptions::eval() };
    let mut done = 0;
    while done < count {
        let n = spec.budget.batch_size.min(count - done);
        let samples = generate_dataset(&spec.channel, model.config.k, n, path, first + done as u64)?;
        let batch = Batch::from_samples(&samples)?;
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &batch, &spec.channel, &opts)?;
        for (r, probs) in pass.probs.iter().enumerate() {
            let values = tape.values(*probs);
            for (row, bits) in values.chunks(model.config.k).zip(&batch.bits) {
                let errs = harden(row).iter().zip(bits).filter(|(a, b)| a != b).count() as u64;
                counts.bit_errors[r] += errs;
                counts.block_errors[r] += u64::from(errs > 0);
            }
        }
        counts.messages += n as u64;
        counts.bits += (n * model.config.k) as u64;
        done += n;
    }
    Ok(counts)
}

/// Streams shards of the evaluation sample stream until every receiver has
/// seen [`MIN_ERROR_EVENTS`] block errors (after `min_samples`) or the cap is
/// reached. Shards run in parallel; the stopping point and totals depend only
/// on the seed, not on the thread count.
pub fn count_errors(model: &DrfModel, spec: &EvalSpec) -> Result<ErrorCounts> {
    spec.budget.validate()?;
    model.config.check_channel(&spec.channel)?;
    let receivers = model.config.receivers;
    let shard = spec.budget.shard_size as u64;
    let total_shards = spec.budget.max_samples.div_ceil(shard);
    let wave = rayon::current_num_threads().max(1) as u64;
    let mut counts = ErrorCounts::new(receivers);
    let mut next = 0;
    while next < total_shards {
        let end = (next + wave).min(total_shards);
        let results: Vec<Result<ErrorCounts>> = (next..end)
            .into_par_iter()
            .map(|s| {
                let count = (spec.budget.max_samples - s * shard).min(shard) as usize;
                run_shard(model, spec, s, count)
            })
            .collect();
        for r in results {
            counts.merge(&r?);
            let enough = counts.block_errors.iter().all(|e| *e >= MIN_ERROR_EVENTS);
            if counts.messages >= spec.budget.min_samples && enough {
                return Ok(counts);
            }
        }
        next = end;
    }
    Ok(counts)
}

/// BER and BLER of receiver 1.
pub fn estimate_error(model: &DrfModel, spec: &EvalSpec) -> Result<(ErrorEstimate, ErrorEstimate)> {
    let counts = count_errors(model, spec)?;
    Ok((counts.ber(0), counts.bler(0)))
}

/// `K·(1 − BLER)/L`.
pub fn spectral_efficiency(k: usize, l: usize, bler: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&bler) {
        return Err(DrfError::invalid(format!("BLER {bler} outside [0, 1]")));
    }
    if l == 0 {
        return Err(DrfError::invalid("block length must be positive"));
    }
    Ok(k as f64 * (1.0 - bler) / l as f64)
}

/// Inclusive grid `start, start+step, …, end`.
pub fn grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(end >= start) || !start.is_finite() || !end.is_finite() {
        return Err(DrfError::invalid(format!("bad grid {start}:{end}:{step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| start + i as f64 * step).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub snr_db: f64,
    pub delta_db: f64,
    /// SNR assumed by the attention network, `ρ − Δρ`.
    pub assumed_snr_db: f64,
    pub ber: ErrorEstimate,
    pub bler: ErrorEstimate,
}

/// Evaluates every `(ρ, Δρ)` pair with the attention network fed the
/// forward variance of `ρ̂ = ρ − Δρ` and the true feedback variance.
/// `ablate` forces the coefficients to one instead.
pub fn mismatch_sweep(model: &DrfModel, base: &EvalSpec, snrs: &[f64], deltas: &[f64], ablate: bool) -> Result<Vec<SweepRow>> {
    if snrs.is_empty() || deltas.is_empty() {
        return Err(DrfError::invalid("sweep grids must be non-empty"));
    }
    let mut rows = Vec::with_capacity(snrs.len() * deltas.len());
    for &snr in snrs {
        let channel = base.channel.with_forward_snr(snr);
        for &delta in deltas {
            let assumed = snr - delta;
            let attention = if ablate {
                AttentionMode::Ones
            } else {
                let levels = (0..model.config.receivers)
                    .map(|r| NoiseLevels::new(snr_db_to_variance(assumed), channel.feedback_variance(r)))
                    .collect::<Result<_>>()?;
                AttentionMode::Assumed(levels)
            };
            let spec = EvalSpec { channel, attention, ..base.clone() };
            let counts = count_errors(model, &spec)?;
            rows.push(SweepRow { snr_db: snr, delta_db: delta, assumed_snr_db: assumed, ber: counts.ber(0), bler: counts.bler(0) });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MulticastRow {
    pub ber: [ErrorEstimate; 2],
    pub bler: [ErrorEstimate; 2],
    pub spectral_efficiency: [f64; 2],
}

pub fn multicast_eval(model: &DrfModel, spec: &EvalSpec) -> Result<MulticastRow> {
    if model.config.receivers != 2 {
        return Err(DrfError::invalid("multicast evaluation needs a two-receiver checkpoint"));
    }
    let counts = count_errors(model, spec)?;
    let (k, l) = (model.config.k, model.config.block_length());
    let bler = [counts.bler(0), counts.bler(1)];
    Ok(MulticastRow {
        ber: [counts.ber(0), counts.ber(1)],
        spectral_efficiency: [spectral_efficiency(k, l, bler[0].estimate)?, spectral_efficiency(k, l, bler[1].estimate)?],
        bler,
    })
}

/// Gaussian tail `Q(x) = ½·erfc(x/√2)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Uncoded antipodal signalling over AWGN, detected by the sign of `y`.
/// Returns the BER over `bits` independent transmissions.
pub fn uncoded_ber(snr_db: f64, bits: u64, seed: u64) -> ErrorEstimate {
    let sigma = snr_db_to_variance(snr_db).sqrt();
    let shard = 100_000u64;
    let shards = bits.div_ceil(shard);
    let errors: u64 = (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = SeedPath::new(seed, EVAL_EPOCH).rng_for(s);
            let n = (bits - s * shard).min(shard);
            (0..n)
                .filter(|_| {
                    let bit: bool = rng.random();
                    let x = if bit { 1.0 } else { -1.0 };
                    let y = x + sigma * rng.sample::<f64, _>(StandardNormal);
                    (y >= 0.0) != bit
                })
                .count() as u64
        })
        .sum();
    ErrorEstimate::from_counts(Metric::Ber, errors, bits)
}
