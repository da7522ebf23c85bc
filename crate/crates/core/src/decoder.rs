//! Bi-LSTM decoder with batch normalisation and SNR-aware attention.

use rand::Rng;

use crate::autodiff::{bilstm_layer, Lstm, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{DrfError, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in the batch-norm update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Noise variances fed to the attention network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevels {
    pub forward: f64,
    pub feedback: f64,
}

impl NoiseLevels {
    pub fn new(forward: f64, feedback: f64) -> Result<Self> {
        if !(forward >= 0.0) || !(feedback >= 0.0) || !forward.is_finite() || !feedback.is_finite() {
            return Err(DrfError::invalid(format!("noise variances must be finite and non-negative, got ({forward}, {feedback})")));
        }
        Ok(Self { forward, feedback })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[width])),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[width])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full(&[width], 1.0)),
        }
    }

    /// Returns the normalised output and, in training mode, the batch mean and variance.
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, phase: Phase) -> Result<(Var, Option<BatchStats>)> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match phase {
            Phase::Train => {
                let (y, mean, var) = tape.batch_norm(x, gamma, beta, BN_EPS)?;
                Ok((y, Some(BatchStats { mean, var })))
            }
            Phase::Eval => {
                let rm = store.get(self.running_mean).data();
                let rv = store.get(self.running_var).data();
                let w = rm.len();
                let shift = tape.constant_raw(1, w, rm.iter().map(|m| -m).collect())?;
                let scale = tape.constant_raw(1, w, rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect())?;
                let h = tape.add_row(x, shift)?;
                let h = tape.mul_row(h, scale)?;
                let h = tape.mul_row(h, gamma)?;
                Ok((tape.add_row(h, beta)?, None))
            }
        }
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        blend(store.get_mut(self.running_mean).data_mut(), &stats.mean);
        blend(store.get_mut(self.running_var).data_mut(), &stats.var);
    }
}

fn blend(running: &mut [f64], batch: &[f64]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
    }
}

/// Per-feature batch statistics from a training-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Two-layer sigmoid MLP mapping `(σ_n², σ_m²)` to `K × 2H` coefficients.
#[derive(Clone, Debug)]
pub struct AttentionNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    rows: usize,
    cols: usize,
}

impl AttentionNet {
    fn new<R: Rng>(store: &mut ParamStore, prefix: &str, k: usize, hidden: usize, rng: &mut R) -> Self {
        let inner = 4 * hidden * k;
        let out = 2 * hidden * k;
        Self {
            w1: store.add_uniform(format!("{prefix}.attention.w1"), &[2, inner], 1.0 / 2f64.sqrt(), rng),
            b1: store.add(format!("{prefix}.attention.b1"), Tensor::zeros(&[inner])),
            w2: store.add_uniform(format!("{prefix}.attention.w2"), &[inner, out], 1.0 / (inner as f64).sqrt(), rng),
            b2: store.add(format!("{prefix}.attention.b2"), Tensor::zeros(&[out])),
            rows: k,
            cols: 2 * hidden,
        }
    }

    /// `[1, K·2H]` row of coefficients; row `k` of the matrix is the slice `k·2H..(k+1)·2H`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, noise: NoiseLevels) -> Result<Var> {
        let noise = NoiseLevels::new(noise.forward, noise.feedback)?;
        let input = tape.constant_raw(1, 2, vec![noise.forward, noise.feedback])?;
        let w1 = tape.param(store, self.w1);
        let b1 = tape.param(store, self.b1);
        let w2 = tape.param(store, self.w2);
        let b2 = tape.param(store, self.b2);
        let h = tape.matmul(input, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.sigmoid(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        Ok(tape.sigmoid(o))
    }

    /// Coefficient matrix `A` as `K` rows of `2H` values.
    pub fn coefficients(&self, store: &ParamStore, noise: NoiseLevels) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let a = self.forward(&mut tape, store, noise)?;
        Ok(tape.values(a).chunks(self.cols).take(self.rows).map(<[f64]>::to_vec).collect())
    }
}

/// Attention behaviour for one decoding pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionInput {
    /// Feed these variances to the attention network.
    Noise(NoiseLevels),
    /// Replace every coefficient by one (ablation).
    Ones,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub k: usize,
    pub hidden: usize,
    pub layer1: [Lstm; 2],
    pub bn1: BatchNormLayer,
    pub layer2: [Lstm; 2],
    pub bn2: BatchNormLayer,
    pub attention: Option<AttentionNet>,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// Training-mode batch statistics of both normalisation layers.
#[derive(Clone, Debug)]
pub struct DecoderStats {
    pub bn1: BatchStats,
    pub bn2: BatchStats,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// `[B, K]` bit probabilities.
    pub probs: Var,
    /// Attention row `[1, K·2H]` when the network was used.
    pub attention: Option<Var>,
    pub stats: Option<DecoderStats>,
}

pub const DECODER_INPUT_DIM: usize = 3;

impl Decoder {
    /// `prefix` distinguishes decoders of different receivers.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, k: usize, hidden: usize, attention: bool, rng: &mut R) -> Self {
        let lstm = |store: &mut ParamStore, name: &str, d: usize, rng: &mut R| Lstm::new(store, &format!("{prefix}.{name}"), d, hidden, rng);
        let layer1 = [lstm(store, "l1.fwd", DECODER_INPUT_DIM, rng), lstm(store, "l1.bwd", DECODER_INPUT_DIM, rng)];
        let bn1 = BatchNormLayer::new(store, &format!("{prefix}.bn1"), 2 * hidden);
        let layer2 = [lstm(store, "l2.fwd", 2 * hidden, rng), lstm(store, "l2.bwd", 2 * hidden, rng)];
        let bn2 = BatchNormLayer::new(store, &format!("{prefix}.bn2"), 2 * hidden);
        let attention = attention.then(|| AttentionNet::new(store, prefix, k, hidden, rng));
        let bound = 1.0 / ((2 * hidden) as f64).sqrt();
        let head_w = store.add_uniform(format!("{prefix}.head.w"), &[2 * hidden, 1], bound, rng);
        let head_b = store.add(format!("{prefix}.head.b"), Tensor::zeros(&[1]));
        Self { k, hidden, layer1, bn1, layer2, bn2, attention, head_w, head_b }
    }

    /// Decodes a sequence of `K+1` step inputs, each `[B, 3]`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, steps: &[Var], attention: AttentionInput, phase: Phase) -> Result<DecoderOutput> {
        let n = self.k + 1;
        if steps.len() != n {
            return Err(DrfError::Shape { op: "decode", detail: format!("{} input steps, expected {n}", steps.len()) });
        }
        let [batch, width] = tape.shape(steps[0]);
        if width != DECODER_INPUT_DIM {
            return Err(DrfError::Shape { op: "decode", detail: format!("step width {width}, expected {DECODER_INPUT_DIM}") });
        }
        let seq = tape.stack_rows(steps)?;
        let [f1, b1] = &self.layer1;
        let (f1, b1) = (f1.bind(tape, store), b1.bind(tape, store));
        let h = bilstm_layer(tape, seq, n, batch, &f1, &b1)?;
        let (h, s1) = self.bn1.apply(tape, store, h, phase)?;
        let [f2, b2] = &self.layer2;
        let (f2, b2) = (f2.bind(tape, store), b2.bind(tape, store));
        let h = bilstm_layer(tape, h, n, batch, &f2, &b2)?;
        let (features, s2) = self.bn2.apply(tape, store, h, phase)?;

        let att = match (attention, &self.attention) {
            (AttentionInput::Ones, _) => None,
            (AttentionInput::Noise(noise), Some(net)) => Some(net.forward(tape, store, noise)?),
            (AttentionInput::Noise(noise), None) => {
                NoiseLevels::new(noise.forward, noise.feedback)?;
                None
            }
        };
        let w2h = 2 * self.hidden;
        let mut scaled = Vec::with_capacity(self.k);
        for k in 0..self.k {
            let f = tape.slice_rows(features, k * batch, (k + 1) * batch)?;
            scaled.push(match att {
                Some(a) => {
                    let row = tape.slice_cols(a, k * w2h, (k + 1) * w2h)?;
                    tape.mul_row(f, row)?
                }
                None => f,
            });
        }
        let stacked = tape.stack_rows(&scaled)?;
        let hw = tape.param(store, self.head_w);
        let hb = tape.param(store, self.head_b);
        let logits = tape.matmul(stacked, hw)?;
        let logits = tape.add_row(logits, hb)?;
        let p = tape.sigmoid(logits);
        let cols: Vec<Var> = (0..self.k).map(|k| tape.slice_rows(p, k * batch, (k + 1) * batch)).collect::<Result<_>>()?;
        let probs = tape.concat_cols(&cols)?;
        let stats = match (s1, s2) {
            (Some(bn1), Some(bn2)) => Some(DecoderStats { bn1, bn2 }),
            _ => None,
        };
        Ok(DecoderOutput { probs, attention: att, stats })
    }

    pub fn update_running(&self, store: &mut ParamStore, stats: &DecoderStats) {
        self.bn1.update_running(store, &stats.bn1);
        self.bn2.update_running(store, &stats.bn2);
    }
}

/// Threshold at 0.5 (ties to 1).
pub fn harden(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|p| u8::from(*p >= 0.5)).collect()
}

/// Number of differing bits.
pub fn bit_errors(decoded: &[u8], reference: &[u8]) -> usize {
    decoded.iter().zip(reference).filter(|(a, b)| a != b).count()
}

pub fn ber(decoded: &[u8], reference: &[u8]) -> f64 {
    bit_errors(decoded, reference) as f64 / reference.len() as f64
}

pub fn bler(decoded: &[u8], reference: &[u8]) -> f64 {
    f64::from(u8::from(bit_errors(decoded, reference) > 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_steps(tape: &mut Tape, k: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Var> {
        (0..=k)
            .map(|_| tape.constant_raw(batch, 3, (0..batch * 3).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn hardening_and_error_rates() {
        assert_eq!(harden(&[0.2, 0.5, 0.51, 0.49]), vec![0, 1, 1, 0]);
        let b = vec![1u8; 50];
        assert_eq!(ber(&b, &b), 0.0);
        assert_eq!(bler(&b, &b), 0.0);
        let mut d = b.clone();
        d[7] = 0;
        assert!((ber(&d, &b) - 0.02).abs() < 1e-15);
        assert_eq!(bler(&d, &b), 1.0);
    }

    #[test]
    fn attention_zero_weights_give_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "decoder", 3, 3, true, &mut rng);
        let net = dec.attention.as_ref().unwrap();
        for id in [net.w1, net.b1, net.w2, net.b2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let a = net.coefficients(&store, NoiseLevels::new(1.0, 0.1).unwrap()).unwrap();
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|row| row.len() == 6 && row.iter().all(|v| *v == 0.5)));
        assert!(net.coefficients(&store, NoiseLevels { forward: -1.0, feedback: 0.0 }).is_err());
    }

    #[test]
    fn attention_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "decoder", 4, 4, true, &mut rng);
        let net = dec.attention.unwrap();
        assert_eq!(store.get(net.b2).len(), 2 * 4 * 4);
        assert_eq!(store.get(net.b1).len(), 4 * 4 * 4);
    }

    #[test]
    fn output_shape_range_and_bidirectionality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let (k, b) = (5, 4);
        let dec = Decoder::new(&mut store, "decoder", k, 6, true, &mut rng);
        let noise = AttentionInput::Noise(NoiseLevels::new(1.0, 0.0).unwrap());
        let mut tape = Tape::new();
        let steps = random_steps(&mut tape, k, b, &mut rng);
        let out = dec.decode(&mut tape, &store, &steps, noise, Phase::Eval).unwrap();
        assert_eq!(tape.shape(out.probs), [b, k]);
        assert!(tape.values(out.probs).iter().all(|p| *p > 0.0 && *p < 1.0));
        let first: Vec<f64> = (0..b).map(|r| tape.values(out.probs)[r * k]).collect();

        let mut tape2 = Tape::new();
        let mut steps_vals: Vec<Tensor> = steps.iter().map(|s| tape.value(*s)).collect();
        steps_vals[k].data_mut()[0] += 1.0;
        let steps2: Vec<Var> = steps_vals.iter().map(|t| tape2.constant(t)).collect();
        let out2 = dec.decode(&mut tape2, &store, &steps2, noise, Phase::Eval).unwrap();
        assert_ne!(first[0], tape2.values(out2.probs)[0]);
    }

    #[test]
    fn wrong_length_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&mut store, "decoder", 3, 3, false, &mut rng);
        let mut tape = Tape::new();
        let steps = random_steps(&mut tape, 2, 2, &mut rng);
        assert!(dec.decode(&mut tape, &store, &steps, AttentionInput::Ones, Phase::Eval).is_err());
    }

    #[test]
    fn train_and_eval_modes_differ_until_statistics_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let k = 3;
        let dec = Decoder::new(&mut store, "decoder", k, 3, false, &mut rng);
        let mut tape = Tape::new();
        let steps = random_steps(&mut tape, k, 8, &mut rng);
        let train = dec.decode(&mut tape, &store, &steps, AttentionInput::Ones, Phase::Train).unwrap();
        let eval = dec.decode(&mut tape, &store, &steps, AttentionInput::Ones, Phase::Eval).unwrap();
        let diff: f64 = tape.values(train.probs).iter().zip(tape.values(eval.probs)).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6);

        let stats = train.stats.unwrap();
        let bn1 = &dec.bn1;
        store.get_mut(bn1.running_mean).data_mut().copy_from_slice(&stats.bn1.mean);
        store.get_mut(bn1.running_var).data_mut().copy_from_slice(&stats.bn1.var);
        store.get_mut(dec.bn2.running_mean).data_mut().copy_from_slice(&stats.bn2.mean);
        store.get_mut(dec.bn2.running_var).data_mut().copy_from_slice(&stats.bn2.var);
        let eval = dec.decode(&mut tape, &store, &steps, AttentionInput::Ones, Phase::Eval).unwrap();
        for (a, b) in tape.values(train.probs).iter().zip(tape.values(eval.probs)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn running_update_uses_momentum() {
        let mut r = vec![1.0, 0.0];
        blend(&mut r, &[0.0, 1.0]);
        assert!((r[0] - 0.9).abs() < 1e-15 && (r[1] - 0.1).abs() < 1e-15);
    }
}
