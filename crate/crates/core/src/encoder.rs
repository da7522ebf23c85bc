//! Two-phase DRF encoder.
//!
//! Phase I sends the zero-padded message antipodally. Phase II runs a
//! single-direction LSTM over `K+1` steps; step `s` sees the phase-I symbol and
//! noise estimate at index `s` plus the one-step delayed noise estimates (and
//! fading amplitudes) of both parity streams, and emits one symbol for each
//! stream. All symbols pass through the learned power reallocation layer.

use rand::Rng;

use crate::autodiff::{Lstm, LstmState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::channel::block_length;
use crate::error::{DrfError, Result};

/// `c_I = 2·[b; 0] − 1`.
pub fn encode_phase1(bits: &[u8]) -> Result<Vec<f64>> {
    if let Some(b) = bits.iter().find(|b| **b > 1) {
        return Err(DrfError::invalid(format!("message bit {b} is not binary")));
    }
    Ok(bits.iter().chain(std::iter::once(&0)).map(|b| 2.0 * f64::from(*b) - 1.0).collect())
}

/// Power normalisation source.
#[derive(Clone, Debug, PartialEq)]
pub enum PowerNormalizer {
    /// Per-position mean square over the current batch.
    Batch,
    /// Frozen per-position mean squares.
    Frozen(Vec<f64>),
}

/// `x_p = w̃_p · c_p / √ms_p` with `w̃ = w·√(L/Σw²)` and `ms_p` the mean square
/// of column `p`. Operates on a batch given as rows of length `L`.
/// Returns the codewords and the mean squares that were used.
pub fn power_reallocate(c: &[Vec<f64>], w: &[f64], normalizer: &PowerNormalizer) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let l = w.len();
    if c.is_empty() {
        return Err(DrfError::invalid("empty batch"));
    }
    if c.iter().any(|row| row.len() != l) {
        return Err(DrfError::Shape { op: "power_reallocate", detail: format!("rows must have {l} symbols") });
    }
    check_power_weights(w)?;
    let ms = match normalizer {
        PowerNormalizer::Batch => {
            let n = c.len() as f64;
            (0..l).map(|p| c.iter().map(|row| row[p] * row[p]).sum::<f64>() / n).collect::<Vec<_>>()
        }
        PowerNormalizer::Frozen(ms) if ms.len() == l => ms.clone(),
        PowerNormalizer::Frozen(ms) => {
            return Err(DrfError::Shape { op: "power_reallocate", detail: format!("{} frozen statistics for {l} positions", ms.len()) })
        }
    };
    if let Some(p) = ms.iter().position(|v| !(*v > 0.0)) {
        return Err(DrfError::invalid(format!("zero batch power at position {p}")));
    }
    let scale = weight_scale(w);
    let x = c
        .iter()
        .map(|row| row.iter().enumerate().map(|(p, v)| w[p] * scale * v / ms[p].sqrt()).collect())
        .collect();
    Ok((x, ms))
}

fn weight_scale(w: &[f64]) -> f64 {
    let mean_sq = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    1.0 / mean_sq.sqrt()
}

fn check_power_weights(w: &[f64]) -> Result<()> {
    match w.iter().position(|v| !(*v > 0.0)) {
        Some(p) => Err(DrfError::invalid(format!("power weight {p} is not positive ({})", w[p]))),
        None => Ok(()),
    }
}

/// Width of the per-step LSTM input.
///
/// One antipodal symbol, a phase-I noise estimate and two delayed parity
/// noise estimates per receiver, plus three fading amplitudes when fading.
pub fn feature_dim(receivers: usize, fading: bool) -> usize {
    1 + 3 * receivers + if fading { 3 } else { 0 }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub k: usize,
    pub hidden: usize,
    pub receivers: usize,
    pub fading: bool,
    pub lstm: Lstm,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub power_w: ParamId,
    pub power_ms: ParamId,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, k: usize, hidden: usize, receivers: usize, fading: bool, rng: &mut R) -> Self {
        let l = block_length(k);
        let lstm = Lstm::new(store, "encoder.lstm", feature_dim(receivers, fading), hidden, rng);
        let bound = 1.0 / (hidden as f64).sqrt();
        let out_w = store.add_uniform("encoder.out.w", &[hidden, 2], bound, rng);
        let out_b = store.add("encoder.out.b", Tensor::zeros(&[2]));
        let power_w = store.add("encoder.power.w", Tensor::full(&[l], 1.0));
        let power_ms = store.add_buffer("encoder.power.mean_square", Tensor::full(&[l], 1.0));
        Self { k, hidden, receivers, fading, lstm, out_w, out_b, power_w, power_ms }
    }

    pub fn block_length(&self) -> usize {
        block_length(self.k)
    }

    pub fn feature_dim(&self) -> usize {
        feature_dim(self.receivers, self.fading)
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, frozen_power: bool) -> Result<BoundEncoder> {
        check_power_weights(store.get(self.power_w).data())?;
        let lstm = self.lstm.bind(tape, store);
        let out_w = tape.param(store, self.out_w);
        let out_b = tape.param(store, self.out_b);
        let w = tape.param(store, self.power_w);
        let sq = tape.mul(w, w)?;
        let mean_sq = tape.mean(sq);
        let inv = tape.rsqrt(mean_sq)?;
        let w_scaled = tape.mul_scalar(w, inv)?;
        let frozen_inv = if frozen_power {
            let ms = store.get(self.power_ms).data();
            if let Some(p) = ms.iter().position(|v| !(*v > 0.0)) {
                return Err(DrfError::invalid(format!("frozen power statistic {p} is not positive")));
            }
            Some(ms.iter().map(|v| 1.0 / v.sqrt()).collect())
        } else {
            None
        };
        Ok(BoundEncoder { lstm, out_w, out_b, w_scaled, frozen_inv, hidden: self.hidden, feature_dim: self.feature_dim() })
    }
}

/// Encoder weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    lstm: crate::autodiff::BoundLstm,
    out_w: Var,
    out_b: Var,
    w_scaled: Var,
    frozen_inv: Option<Vec<f64>>,
    hidden: usize,
    feature_dim: usize,
}

impl BoundEncoder {
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn initial_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        let _ = self.hidden;
        self.lstm.zero_state(tape, batch)
    }

    /// Applies `P{·}` to one `[B,1]` column at layout position `p`.
    /// Returns the power-scaled symbol and the batch mean square used.
    pub fn reallocate(&self, tape: &mut Tape, c: Var, p: usize) -> Result<(Var, f64)> {
        let wp = tape.slice_cols(self.w_scaled, p, p + 1)?;
        match &self.frozen_inv {
            Some(inv) => {
                let k = tape.constant(&Tensor::scalar(inv[p]));
                let s = tape.mul(wp, k)?;
                Ok((tape.mul_scalar(c, s)?, 1.0 / (inv[p] * inv[p])))
            }
            None => {
                let sq = tape.mul(c, c)?;
                let ms = tape.mean_rows(sq);
                let ms_value = tape.scalar(ms);
                if !(ms_value > 0.0) {
                    return Err(DrfError::invalid(format!("zero batch power at position {p}")));
                }
                let inv = tape.rsqrt(ms)?;
                let s = tape.mul(inv, wp)?;
                Ok((tape.mul_scalar(c, s)?, ms_value))
            }
        }
    }

    /// One LSTM step on `[B, d_in]` features; returns the new state and the
    /// two parity pre-symbols `2·sigmoid(·) − 1` as `[B,1]` columns.
    pub fn parity_step(&self, tape: &mut Tape, features: Var, state: LstmState) -> Result<(LstmState, Var, Var)> {
        let state = self.lstm.step(tape, features, state)?;
        let o = tape.matmul(state.h, self.out_w)?;
        let o = tape.add_row(o, self.out_b)?;
        let o = tape.sigmoid(o);
        let c = tape.affine(o, 2.0, -1.0);
        let c1 = tape.slice_cols(c, 0, 1)?;
        let c2 = tape.slice_cols(c, 1, 2)?;
        Ok((state, c1, c2))
    }
}

/// Feedback-derived quantities for one transmitted position.
#[derive(Clone, Copy, Debug)]
pub struct PositionFeedback {
    /// Transmission time at which the feedback carrying this symbol arrives.
    pub arrival: usize,
    /// Noise estimate `z − α̂·x` per receiver (`[B,1]`), at most two receivers.
    pub noise: [Option<Var>; 2],
    /// Fading amplitude column (`[B,1]`) fed to the encoder.
    pub alpha: Option<Var>,
}

/// Causal record of feedback the encoder has received, indexed by layout position.
#[derive(Debug)]
pub struct FeedbackHistory {
    k: usize,
    entries: Vec<Option<PositionFeedback>>,
}

impl FeedbackHistory {
    pub fn new(k: usize) -> Self {
        Self { k, entries: vec![None; block_length(k)] }
    }

    pub fn record(&mut self, position: usize, fb: PositionFeedback) {
        self.entries[position] = Some(fb);
    }

    fn get(&self, position: usize, now: usize) -> Result<PositionFeedback> {
        let fb = self.entries[position]
            .ok_or_else(|| DrfError::Causality(format!("no feedback recorded for position {position}")))?;
        if fb.arrival > now {
            return Err(DrfError::Causality(format!(
                "feedback for position {position} arrives at time {} but is needed at time {now}",
                fb.arrival
            )));
        }
        Ok(fb)
    }
}

/// Inputs controlling feature construction.
#[derive(Clone, Copy, Debug, Default)]
pub struct FeatureOptions {
    /// Replace every feedback-derived feature by zero (open-loop code).
    pub zero_feedback: bool,
}

/// Feature matrix `[B, d_in]` for encoder step `s` (0-based) at time `now`.
///
/// Column order: `c_I`, phase-I noise estimate per receiver, delayed
/// stream-1 noise estimate per receiver, delayed stream-2 noise estimate per
/// receiver, then (fading only) `α_I`, delayed `α⁽¹⁾`, delayed `α⁽²⁾`.
/// Delayed entries are zero at the first step.
#[allow(clippy::too_many_arguments)]
pub fn build_phase2_inputs(
    tape: &mut Tape,
    step: usize,
    now: usize,
    phase1: &[Var],
    history: &FeedbackHistory,
    receivers: usize,
    fading: bool,
    opts: FeatureOptions,
) -> Result<Var> {
    let k = history.k;
    let n = k + 1;
    if step >= n {
        return Err(DrfError::invalid(format!("encoder step {step} out of range")));
    }
    let [batch, _] = tape.shape(phase1[step]);
    let zero = tape.constant(&Tensor::zeros(&[batch, 1]));
    let current = history.get(step, now)?;
    let delayed = if step > 0 { Some([history.get(n + step - 1, now)?, history.get(2 * n + step - 1, now)?]) } else { None };
    let pick = |v: Option<Var>| if opts.zero_feedback { zero } else { v.unwrap_or(zero) };

    let mut cols = vec![phase1[step]];
    for r in 0..receivers {
        cols.push(pick(current.noise[r]));
    }
    for stream in 0..2 {
        for r in 0..receivers {
            cols.push(delayed.map_or(zero, |d| pick(d[stream].noise[r])));
        }
    }
    if fading {
        cols.push(pick(current.alpha));
        for stream in 0..2 {
            cols.push(delayed.map_or(zero, |d| pick(d[stream].alpha)));
        }
    }
    tape.concat_cols(&cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase1_mapping_and_padding() {
        assert_eq!(encode_phase1(&[0, 1]).unwrap(), vec![-1.0, 1.0, -1.0]);
        assert!(encode_phase1(&[0; 6]).unwrap().iter().all(|c| *c == -1.0));
        assert_eq!(encode_phase1(&[1; 50]).unwrap().len(), 51);
        assert!(encode_phase1(&[0, 2]).is_err());
    }

    #[test]
    fn unit_weights_on_antipodal_symbols_are_identity() {
        let c = vec![vec![1.0, -1.0, 1.0], vec![-1.0, -1.0, 1.0]];
        let (x, ms) = power_reallocate(&c, &[1.0; 3], &PowerNormalizer::Batch).unwrap();
        assert_eq!(x, c);
        assert_eq!(ms, vec![1.0; 3]);
    }

    #[test]
    fn weight_scaling_is_invariant() {
        let c = vec![vec![0.3, -0.8, 0.1, 0.5], vec![-0.2, 0.4, 0.9, -0.7]];
        let w = [0.5, 1.5, 1.0, 2.0];
        let w2: Vec<f64> = w.iter().map(|v| 2.0 * v).collect();
        let (a, _) = power_reallocate(&c, &w, &PowerNormalizer::Batch).unwrap();
        let (b, _) = power_reallocate(&c, &w2, &PowerNormalizer::Batch).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        let power: f64 = a.iter().flatten().map(|v| v * v).sum::<f64>() / (2.0 * 4.0);
        assert!((power - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_errors() {
        let c = vec![vec![0.0, 1.0]];
        assert!(power_reallocate(&c, &[1.0, 1.0], &PowerNormalizer::Batch).is_err());
        assert!(power_reallocate(&[vec![1.0, 1.0]], &[1.0, 0.0], &PowerNormalizer::Batch).is_err());
        assert!(power_reallocate(&[vec![1.0, 1.0]], &[1.0, 1.0], &PowerNormalizer::Frozen(vec![1.0])).is_err());
    }

    #[test]
    fn feature_widths() {
        assert_eq!(feature_dim(1, false), 4);
        assert_eq!(feature_dim(1, true), 7);
        assert_eq!(feature_dim(2, false), 7);
    }
}
