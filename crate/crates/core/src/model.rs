//! Encoder, channel and decoder(s) unrolled on one tape.
//!
//! The forward pass replays a batch of pre-drawn samples through the closed
//! loop: each transmitted symbol passes the forward channel, returns to the
//! encoder through the delayed feedback link, and the resulting noise
//! estimates drive the next encoder step. Channel draws enter as constants,
//! so gradients reach the encoder through `y = α·x + n` and the feedback path.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, ParamStore, Tape, Var};
use crate::channel::{block_length, transmission_time, ChannelSpec, FadingMode, Sample};
use crate::csi::{compensation_gain, lmmse_fast, lmmse_slow_from_sums, CsiMode, FadingPrior};
use crate::decoder::{AttentionInput, Decoder, DecoderStats, NoiseLevels, Phase, BN_MOMENTUM};
use crate::encoder::{build_phase2_inputs, encode_phase1, Encoder, FeatureOptions, FeedbackHistory, PositionFeedback};
use crate::error::{DrfError, Result};

/// Architecture and operating mode of a code.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeConfig {
    pub k: usize,
    pub hidden: usize,
    pub fading: FadingMode,
    /// 1 for point-to-point, 2 for multicast.
    pub receivers: usize,
    pub attention: bool,
    /// Decoder receives LMMSE-compensated symbols using the true fading.
    pub decoder_csi: bool,
    pub encoder_csi: CsiMode,
    pub rayleigh_omega: f64,
}

impl CodeConfig {
    /// AWGN point-to-point code with attention and `H = K`.
    pub fn awgn(k: usize) -> Self {
        Self {
            k,
            hidden: k,
            fading: FadingMode::Awgn,
            receivers: 1,
            attention: true,
            decoder_csi: false,
            encoder_csi: CsiMode::Exact,
            rayleigh_omega: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.hidden == 0 {
            return Err(DrfError::invalid("K and H must be positive"));
        }
        if !(1..=2).contains(&self.receivers) {
            return Err(DrfError::invalid(format!("{} receivers; expected 1 or 2", self.receivers)));
        }
        if self.receivers == 2 && self.fading.is_fading() {
            return Err(DrfError::invalid("multicast codes are AWGN only"));
        }
        if self.fading.is_fading() && !(self.rayleigh_omega > 0.0) {
            return Err(DrfError::invalid("Rayleigh Ω must be positive"));
        }
        Ok(())
    }

    pub fn block_length(&self) -> usize {
        block_length(self.k)
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.block_length() as f64
    }

    pub fn fading_prior(&self) -> FadingPrior {
        match self.fading {
            FadingMode::Awgn => FadingPrior::unit(),
            _ => FadingPrior::rayleigh(self.rayleigh_omega),
        }
    }

    /// Checks that a channel matches this code's mode.
    pub fn check_channel(&self, spec: &ChannelSpec) -> Result<()> {
        spec.validate()?;
        if spec.fading != self.fading {
            return Err(DrfError::invalid(format!("channel fading {:?} but code trained for {:?}", spec.fading, self.fading)));
        }
        if spec.receivers() != self.receivers {
            return Err(DrfError::invalid(format!("channel has {} receivers, code has {}", spec.receivers(), self.receivers)));
        }
        Ok(())
    }
}

/// Samples regrouped into per-position columns.
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub k: usize,
    pub bits: Vec<Vec<u8>>,
    /// `[position][sample]`.
    pub fading: Vec<Vec<f64>>,
    /// `[receiver][position][sample]`.
    pub forward_noise: Vec<Vec<Vec<f64>>>,
    /// `[receiver][time][sample]`.
    pub feedback_noise: Vec<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| DrfError::invalid("empty batch"))?;
        let k = first.bits.len();
        let l = block_length(k);
        let receivers = first.forward_noise.len();
        for s in samples {
            if s.bits.len() != k || s.fading.len() != l || s.forward_noise.len() != receivers || s.feedback_noise.len() != receivers {
                return Err(DrfError::invalid("samples in a batch must share K and receiver count"));
            }
            if s.forward_noise.iter().chain(&s.feedback_noise).any(|v| v.len() != l) {
                return Err(DrfError::invalid(format!("noise vectors must have length {l}")));
            }
        }
        let column = |f: &dyn Fn(&Sample) -> f64| samples.iter().map(f).collect::<Vec<f64>>();
        Ok(Self {
            size: samples.len(),
            k,
            bits: samples.iter().map(|s| s.bits.clone()).collect(),
            fading: (0..l).map(|p| column(&|s| s.fading[p])).collect(),
            forward_noise: (0..receivers).map(|r| (0..l).map(|p| column(&|s| s.forward_noise[r][p])).collect()).collect(),
            feedback_noise: (0..receivers).map(|r| (0..l).map(|t| column(&|s| s.feedback_noise[r][t])).collect()).collect(),
        })
    }

    /// Row-major `[B, K]` bit targets.
    pub fn targets(&self) -> Vec<f64> {
        self.bits.iter().flatten().map(|b| f64::from(*b)).collect()
    }
}

/// What the attention network is told about the channel.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMode {
    /// The variances of the channel actually simulated.
    Matched,
    /// Assumed variances, one pair per receiver (SNR mismatch).
    Assumed(Vec<NoiseLevels>),
    /// Coefficients forced to one.
    Ones,
}

#[derive(Clone, Debug)]
pub struct PassOptions {
    pub phase: Phase,
    pub attention: AttentionMode,
    pub zero_feedback: bool,
}

impl PassOptions {
    pub fn train() -> Self {
        Self { phase: Phase::Train, attention: AttentionMode::Matched, zero_feedback: false }
    }

    pub fn eval() -> Self {
        Self { phase: Phase::Eval, attention: AttentionMode::Matched, zero_feedback: false }
    }
}

/// Handles to one unrolled pass.
#[derive(Clone, Debug)]
pub struct Pass {
    /// `[B, K]` bit probabilities per receiver.
    pub probs: Vec<Var>,
    /// Transmitted symbols per layout position, each `[B, 1]`.
    pub x: Vec<Var>,
    /// Received symbols `[receiver][position]`, each `[B, 1]`.
    pub y: Vec<Vec<Var>>,
    /// Encoder feature matrices per phase-II step.
    pub features: Vec<Var>,
    /// Mean square per position used by the power normaliser.
    pub power_ms: Vec<f64>,
    pub decoder_stats: Vec<Option<DecoderStats>>,
}

#[derive(Clone, Debug)]
pub struct DrfModel {
    pub config: CodeConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoders: Vec<Decoder>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: CodeConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

impl DrfModel {
    pub fn new(config: CodeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, config.k, config.hidden, config.receivers, config.fading.is_fading(), &mut rng);
        let decoders = (0..config.receivers)
            .map(|r| {
                let prefix = if config.receivers == 1 { "decoder".to_string() } else { format!("decoder{}", r + 1) };
                Decoder::new(&mut store, &prefix, config.k, config.hidden, config.attention, &mut rng)
            })
            .collect();
        Ok(Self { config, store, encoder, decoders })
    }

    /// Unrolls the closed loop for `batch` over `channel`.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, channel: &ChannelSpec, opts: &PassOptions) -> Result<Pass> {
        self.forward_with(tape, &self.store, batch, channel, opts)
    }

    /// As [`forward`](Self::forward) with parameter values taken from `store`,
    /// which must have this model's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, channel: &ChannelSpec, opts: &PassOptions) -> Result<Pass> {
        let cfg = &self.config;
        cfg.check_channel(channel)?;
        if batch.k != cfg.k || batch.forward_noise.len() != cfg.receivers {
            return Err(DrfError::invalid(format!(
                "batch has K={} and {} receivers, model has K={} and {}",
                batch.k,
                batch.forward_noise.len(),
                cfg.k,
                cfg.receivers
            )));
        }
        let b = batch.size;
        let k = cfg.k;
        let n = k + 1;
        let l = block_length(k);
        let receivers = cfg.receivers;
        let fading = cfg.fading.is_fading();
        let prior = cfg.fading_prior();
        let fwd_var: Vec<f64> = (0..receivers).map(|r| channel.forward_variance(r)).collect();
        let fb_var: Vec<f64> = (0..receivers).map(|r| channel.feedback_variance(r)).collect();
        let time = transmission_time(k);

        let enc = self.encoder.bind(tape, store, opts.phase == Phase::Eval)?;
        let mut phase1 = Vec::with_capacity(n);
        let c_rows: Vec<Vec<f64>> = batch.bits.iter().map(|bits| encode_phase1(bits)).collect::<Result<_>>()?;
        for s in 0..n {
            phase1.push(tape.constant_raw(b, 1, c_rows.iter().map(|row| row[s]).collect())?);
        }

        let mut x: Vec<Option<Var>> = vec![None; l];
        let mut y: Vec<Vec<Option<Var>>> = vec![vec![None; l]; receivers];
        let mut power_ms = vec![0.0; l];
        let mut history = FeedbackHistory::new(k);
        // Slow-fading LMMSE sufficient statistics per sample.
        let mut sums = vec![(0.0f64, 0.0f64); b];

        let mut transmit = |tape: &mut Tape, c: Var, p: usize, history: &mut FeedbackHistory| -> Result<()> {
            let (xp, ms) = enc.reallocate(tape, c, p)?;
            power_ms[p] = ms;
            x[p] = Some(xp);
            let t = time[p];
            let alpha = if fading { Some(tape.constant_raw(b, 1, batch.fading[p].clone())?) } else { None };
            let faded = match alpha {
                Some(a) => tape.mul(a, xp)?,
                None => xp,
            };
            let mut fb = PositionFeedback { arrival: t + 1, noise: [None, None], alpha: None };
            for r in 0..receivers {
                let noise = tape.constant_raw(b, 1, batch.forward_noise[r][p].clone())?;
                let yr = tape.add(faded, noise)?;
                y[r][p] = Some(yr);
                if t + 1 >= l {
                    continue;
                }
                let z = if fb_var[r] == 0.0 {
                    yr
                } else {
                    let m = tape.constant_raw(b, 1, batch.feedback_noise[r][t + 1].clone())?;
                    tape.add(yr, m)?
                };
                let alpha_hat = match (alpha, cfg.encoder_csi) {
                    (None, _) => None,
                    (Some(a), CsiMode::Exact) => Some(a),
                    (Some(_), CsiMode::Estimated) => {
                        let zv = tape.values(z).to_vec();
                        let xv = tape.values(xp).to_vec();
                        let est: Vec<f64> = match cfg.fading {
                            FadingMode::SlowRayleigh => (0..b)
                                .map(|i| {
                                    sums[i].0 += xv[i] * xv[i];
                                    sums[i].1 += xv[i] * zv[i];
                                    lmmse_slow_from_sums(sums[i].0, sums[i].1, prior, fwd_var[r], fb_var[r])
                                })
                                .collect(),
                            _ => (0..b).map(|i| lmmse_fast(zv[i], xv[i], prior, fwd_var[r], fb_var[r])).collect(),
                        };
                        Some(tape.constant_raw(b, 1, est)?)
                    }
                };
                let predicted = match alpha_hat {
                    Some(a) => tape.mul(a, xp)?,
                    None => xp,
                };
                fb.noise[r] = Some(tape.sub(z, predicted)?);
                fb.alpha = alpha_hat;
            }
            if t + 1 < l {
                history.record(p, fb);
            }
            Ok(())
        };

        for (p, c) in phase1.iter().enumerate() {
            transmit(tape, *c, p, &mut history)?;
        }
        let mut state = enc.initial_state(tape, b);
        let mut features = Vec::with_capacity(n);
        let feature_opts = FeatureOptions { zero_feedback: opts.zero_feedback };
        for s in 0..n {
            let now = time[n + s];
            let f = build_phase2_inputs(tape, s, now, &phase1, &history, receivers, fading, feature_opts)?;
            features.push(f);
            let (next, c1, c2) = enc.parity_step(tape, f, state)?;
            state = next;
            transmit(tape, c1, n + s, &mut history)?;
            transmit(tape, c2, 2 * n + s, &mut history)?;
        }

        let x: Vec<Var> = x.into_iter().map(|v| v.expect("every position transmitted")).collect();
        let y: Vec<Vec<Var>> = y.into_iter().map(|row| row.into_iter().map(|v| v.expect("every position received")).collect()).collect();

        let mut probs = Vec::with_capacity(receivers);
        let mut decoder_stats = Vec::with_capacity(receivers);
        for (r, dec) in self.decoders.iter().enumerate() {
            let mut steps = Vec::with_capacity(n);
            for s in 0..n {
                let mut cols = [y[r][s], y[r][n + s], y[r][2 * n + s]];
                if cfg.decoder_csi && fading {
                    for (col, p) in cols.iter_mut().zip([s, n + s, 2 * n + s]) {
                        let g: Vec<f64> = batch.fading[p].iter().map(|a| compensation_gain(*a, fwd_var[r])).collect();
                        let g = tape.constant_raw(b, 1, g)?;
                        *col = tape.mul(*col, g)?;
                    }
                }
                steps.push(tape.concat_cols(&cols)?);
            }
            let attention = match &opts.attention {
                AttentionMode::Matched => AttentionInput::Noise(NoiseLevels::new(fwd_var[r], fb_var[r])?),
                AttentionMode::Assumed(levels) => AttentionInput::Noise(
                    *levels.get(r).ok_or_else(|| DrfError::invalid(format!("no assumed noise levels for receiver {}", r + 1)))?,
                ),
                AttentionMode::Ones => AttentionInput::Ones,
            };
            let out = dec.decode(tape, store, &steps, attention, opts.phase)?;
            probs.push(out.probs);
            decoder_stats.push(out.stats);
        }
        Ok(Pass { probs, x, y, features, power_ms, decoder_stats })
    }

    /// Folds training-mode statistics into the running buffers.
    pub fn absorb_statistics(&mut self, pass: &Pass) {
        for (dec, stats) in self.decoders.iter().zip(&pass.decoder_stats) {
            if let Some(s) = stats {
                dec.update_running(&mut self.store, s);
            }
        }
        for (r, b) in self.store.get_mut(self.encoder.power_ms).data_mut().iter_mut().zip(&pass.power_ms) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
        }
    }

    /// Replaces every running statistic by those of a single training-mode
    /// pass over `batch`, typically a large one.
    pub fn calibrate(&mut self, batch: &Batch, channel: &ChannelSpec) -> Result<()> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, batch, channel, &PassOptions::train())?;
        self.store.get_mut(self.encoder.power_ms).data_mut().copy_from_slice(&pass.power_ms);
        for (dec, stats) in self.decoders.iter().zip(&pass.decoder_stats) {
            let s = stats.as_ref().expect("training pass records statistics");
            self.store.get_mut(dec.bn1.running_mean).data_mut().copy_from_slice(&s.bn1.mean);
            self.store.get_mut(dec.bn1.running_var).data_mut().copy_from_slice(&s.bn1.var);
            self.store.get_mut(dec.bn2.running_mean).data_mut().copy_from_slice(&s.bn2.mean);
            self.store.get_mut(dec.bn2.running_var).data_mut().copy_from_slice(&s.bn2.var);
        }
        Ok(())
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let meta = CheckpointMeta { config: self.config.clone(), extra };
        Checkpoint::from_store(serde_json::to_string(&meta).expect("metadata serialises"), &self.store)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ckpt.meta).map_err(|e| DrfError::Checkpoint(format!("bad metadata: {e}")))?;
        let mut model = Self::new(meta.config, 0)?;
        ckpt.load_into(&mut model.store)?;
        Ok(model)
    }

    /// Extra metadata stored alongside the configuration.
    pub fn checkpoint_extra(ckpt: &Checkpoint) -> Result<serde_json::Value> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ckpt.meta).map_err(|e| DrfError::Checkpoint(format!("bad metadata: {e}")))?;
        Ok(meta.extra)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_dataset, FeedbackSnr, SeedPath};

    fn batch(spec: &ChannelSpec, k: usize, count: usize, seed: u64) -> Batch {
        Batch::from_samples(&generate_dataset(spec, k, count, SeedPath::new(seed, 0), 0).unwrap()).unwrap()
    }

    #[test]
    fn pass_shapes() {
        let model = DrfModel::new(CodeConfig::awgn(4), 1).unwrap();
        let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Db(20.0));
        let bt = batch(&spec, 4, 6, 1);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &bt, &spec, &PassOptions::train()).unwrap();
        assert_eq!(tape.shape(pass.probs[0]), [6, 4]);
        assert_eq!(pass.x.len(), 15);
        assert_eq!(pass.features.len(), 5);
        assert_eq!(tape.shape(pass.features[0]), [6, 4]);
    }

    #[test]
    fn noiseless_awgn_features_vanish() {
        let model = DrfModel::new(CodeConfig::awgn(3), 2).unwrap();
        let spec = ChannelSpec::awgn(300.0, FeedbackSnr::Noiseless);
        let mut bt = batch(&spec, 3, 4, 2);
        bt.forward_noise.iter_mut().flatten().flatten().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &bt, &spec, &PassOptions::train()).unwrap();
        for f in &pass.features {
            for row in tape.values(*f).chunks(4) {
                assert!(row[1..].iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn mismatched_channel_is_rejected() {
        let model = DrfModel::new(CodeConfig::awgn(3), 3).unwrap();
        let spec = ChannelSpec::rayleigh(0.0, FeedbackSnr::Noiseless, FadingMode::FastRayleigh, 1.0);
        let bt = batch(&spec, 3, 2, 3);
        let mut tape = Tape::new();
        assert!(model.forward(&mut tape, &bt, &spec, &PassOptions::eval()).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let mut cfg = CodeConfig::awgn(3);
        cfg.fading = FadingMode::SlowRayleigh;
        cfg.encoder_csi = CsiMode::Estimated;
        let model = DrfModel::new(cfg, 4).unwrap();
        let spec = ChannelSpec::rayleigh(3.0, FeedbackSnr::Db(10.0), FadingMode::SlowRayleigh, 1.0);
        let bt = batch(&spec, 3, 5, 4);
        let restored = DrfModel::from_checkpoint(&Checkpoint::read_from(&model.checkpoint(serde_json::json!({"run": 1})).to_bytes()[..]).unwrap()).unwrap();
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let p1 = model.forward(&mut t1, &bt, &spec, &PassOptions::eval()).unwrap();
        let p2 = restored.forward(&mut t2, &bt, &spec, &PassOptions::eval()).unwrap();
        assert_eq!(t1.values(p1.probs[0]), t2.values(p2.probs[0]));
        assert_eq!(restored.config, model.config);
    }
}
