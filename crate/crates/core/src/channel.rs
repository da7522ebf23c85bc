//! Stochastic environment: forward fading channel, unit-delay noisy feedback,
//! Rayleigh draws, correlated two-receiver noise and dataset generation.
//!
//! Codeword positions follow the layout `[x_I | x_II⁽¹⁾ | x_II⁽²⁾]`, each part
//! `K+1` long. Fading and forward noise are indexed by layout position.
//! Feedback noise is indexed by transmission time: `z_t = y(t-1) + m_t`.
//! Phase II sends the two parity symbols of each encoder step back to back,
//! see [`transmission_order`].

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};

/// `10^(-dB/10)`: noise variance for a unit-power signal at the given SNR.
pub fn snr_db_to_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

pub fn variance_to_snr_db(variance: f64) -> f64 {
    -10.0 * variance.log10()
}

/// Feedback link quality. `Noiseless` is an exact zero-variance link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackSnr {
    Noiseless,
    Db(f64),
}

impl FeedbackSnr {
    pub fn variance(self) -> f64 {
        match self {
            FeedbackSnr::Noiseless => 0.0,
            FeedbackSnr::Db(db) => snr_db_to_variance(db),
        }
    }
}

impl std::fmt::Display for FeedbackSnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeedbackSnr::Noiseless => write!(f, "noiseless"),
            FeedbackSnr::Db(db) => write!(f, "{db}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingMode {
    Awgn,
    SlowRayleigh,
    FastRayleigh,
}

impl FadingMode {
    pub fn is_fading(self) -> bool {
        !matches!(self, FadingMode::Awgn)
    }
}

/// Second receiver of the multicast channel; receiver 1 uses the
/// point-to-point fields of [`ChannelSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondReceiver {
    pub forward_snr_db: f64,
    pub feedback_snr: FeedbackSnr,
    /// Correlation coefficient of the two forward noises.
    pub noise_correlation: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub forward_snr_db: f64,
    pub feedback_snr: FeedbackSnr,
    pub fading: FadingMode,
    /// Average power gain `Ω = 2σ²` of the Rayleigh amplitude.
    pub rayleigh_omega: f64,
    pub multicast: Option<SecondReceiver>,
}

impl ChannelSpec {
    pub fn awgn(forward_snr_db: f64, feedback_snr: FeedbackSnr) -> Self {
        Self { forward_snr_db, feedback_snr, fading: FadingMode::Awgn, rayleigh_omega: 1.0, multicast: None }
    }

    pub fn rayleigh(forward_snr_db: f64, feedback_snr: FeedbackSnr, fading: FadingMode, omega: f64) -> Self {
        Self { forward_snr_db, feedback_snr, fading, rayleigh_omega: omega, multicast: None }
    }

    pub fn multicast(snr_db: [f64; 2], feedback: [FeedbackSnr; 2], correlation: f64) -> Self {
        Self {
            forward_snr_db: snr_db[0],
            feedback_snr: feedback[0],
            fading: FadingMode::Awgn,
            rayleigh_omega: 1.0,
            multicast: Some(SecondReceiver {
                forward_snr_db: snr_db[1],
                feedback_snr: feedback[1],
                noise_correlation: correlation,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.forward_snr_db.is_finite() {
            return Err(DrfError::invalid("forward SNR must be finite"));
        }
        if let FeedbackSnr::Db(db) = self.feedback_snr {
            if !db.is_finite() {
                return Err(DrfError::invalid("feedback SNR must be finite or noiseless"));
            }
        }
        if self.fading.is_fading() && !(self.rayleigh_omega > 0.0) {
            return Err(DrfError::invalid("Rayleigh Ω must be positive"));
        }
        if let Some(m) = self.multicast {
            if self.fading.is_fading() {
                return Err(DrfError::invalid("multicast channel is AWGN only"));
            }
            if !(m.noise_correlation.abs() <= 1.0) {
                return Err(DrfError::invalid(format!("noise correlation {} outside [-1, 1]", m.noise_correlation)));
            }
        }
        Ok(())
    }

    pub fn receivers(&self) -> usize {
        if self.multicast.is_some() {
            2
        } else {
            1
        }
    }

    pub fn forward_variance(&self, receiver: usize) -> f64 {
        match (receiver, self.multicast) {
            (0, _) => snr_db_to_variance(self.forward_snr_db),
            (_, Some(m)) => snr_db_to_variance(m.forward_snr_db),
            _ => panic!("receiver {receiver} out of range"),
        }
    }

    pub fn feedback_variance(&self, receiver: usize) -> f64 {
        match (receiver, self.multicast) {
            (0, _) => self.feedback_snr.variance(),
            (_, Some(m)) => m.feedback_snr.variance(),
            _ => panic!("receiver {receiver} out of range"),
        }
    }

    pub fn rayleigh_sigma(&self) -> f64 {
        (self.rayleigh_omega / 2.0).sqrt()
    }

    /// Same channel with every receiver's forward SNR set to `snr_db`.
    pub fn with_forward_snr(mut self, snr_db: f64) -> Self {
        self.forward_snr_db = snr_db;
        if let Some(m) = &mut self.multicast {
            m.forward_snr_db = snr_db;
        }
        self
    }
}

/// Codeword length `L = 3(K+1)`.
pub fn block_length(k: usize) -> usize {
    3 * (k + 1)
}

/// Layout position sent at each transmission time: phase I in order, then
/// for each encoder step the stream-1 symbol followed by the stream-2 symbol.
pub fn transmission_order(k: usize) -> Vec<usize> {
    let n = k + 1;
    let mut order: Vec<usize> = (0..n).collect();
    for s in 0..n {
        order.push(n + s);
        order.push(2 * n + s);
    }
    order
}

/// Inverse of [`transmission_order`]: transmission time of each position.
pub fn transmission_time(k: usize) -> Vec<usize> {
    let order = transmission_order(k);
    let mut time = vec![0; order.len()];
    for (t, p) in order.into_iter().enumerate() {
        time[p] = t;
    }
    time
}

/// `y = α·x + n`.
pub fn forward_channel(x: f64, alpha: f64, noise: f64) -> f64 {
    alpha * x + noise
}

/// `z_i = y_{i-1} + m_i`; before the first transmission there is no output
/// and the encoder sees pure feedback noise.
pub fn feedback_channel(previous_output: Option<f64>, noise: f64) -> f64 {
    previous_output.unwrap_or(0.0) + noise
}

/// Inverse-CDF Rayleigh draw from `u ∈ (0, 1]`.
pub fn rayleigh_from_uniform(sigma: f64, u: f64) -> f64 {
    sigma * (-2.0 * u.ln()).sqrt()
}

pub fn sample_rayleigh<R: Rng + ?Sized>(sigma: f64, rng: &mut R) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    rayleigh_from_uniform(sigma, u)
}

/// Rayleigh CDF `1 - exp(-α²/2σ²)`.
pub fn rayleigh_cdf(sigma: f64, alpha: f64) -> f64 {
    if alpha <= 0.0 {
        0.0
    } else {
        1.0 - (-alpha * alpha / (2.0 * sigma * sigma)).exp()
    }
}

/// Jointly Gaussian pair with standard deviations `σ1`, `σ2` and correlation `ε`.
pub fn sample_correlated_noise<R: Rng + ?Sized>(sigma1: f64, sigma2: f64, corr: f64, rng: &mut R) -> Result<(f64, f64)> {
    if !(corr.abs() <= 1.0) {
        return Err(DrfError::invalid(format!("correlation {corr} outside [-1, 1]")));
    }
    let g1: f64 = rng.sample(StandardNormal);
    let g2: f64 = rng.sample(StandardNormal);
    Ok(correlate(sigma1, sigma2, corr, g1, g2))
}

fn correlate(sigma1: f64, sigma2: f64, corr: f64, g1: f64, g2: f64) -> (f64, f64) {
    let n1 = sigma1 * g1;
    let n2 = sigma2 * (corr * g1 + (1.0 - corr * corr).sqrt() * g2);
    (n1, n2)
}

/// One realisation `{b, α, n, m}`. Noise vectors are per receiver.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub bits: Vec<u8>,
    /// Fading amplitude per layout position.
    pub fading: Vec<f64>,
    /// Forward noise per receiver, indexed by layout position.
    pub forward_noise: Vec<Vec<f64>>,
    /// Feedback noise per receiver, indexed by transmission time.
    pub feedback_noise: Vec<Vec<f64>>,
}

/// Derives independent per-sample RNG streams from `(seed, epoch, index)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedPath {
    pub seed: u64,
    pub epoch: u64,
}

impl SeedPath {
    pub fn new(seed: u64, epoch: u64) -> Self {
        Self { seed, epoch }
    }

    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.epoch.to_le_bytes());
        key[16..24].copy_from_slice(b"drf-samp");
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }
}

pub fn generate_sample<R: Rng + ?Sized>(spec: &ChannelSpec, k: usize, rng: &mut R) -> Result<Sample> {
    let l = block_length(k);
    let bits: Vec<u8> = (0..k).map(|_| u8::from(rng.random::<bool>())).collect();
    let sigma = spec.rayleigh_sigma();
    let fading = match spec.fading {
        FadingMode::Awgn => vec![1.0; l],
        FadingMode::SlowRayleigh => vec![sample_rayleigh(sigma, rng); l],
        FadingMode::FastRayleigh => (0..l).map(|_| sample_rayleigh(sigma, rng)).collect(),
    };
    let s1 = spec.forward_variance(0).sqrt();
    let (forward_noise, feedback_noise) = match spec.multicast {
        None => {
            let n = (0..l).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)).collect();
            let sm = spec.feedback_variance(0).sqrt();
            let m = (0..l).map(|_| sm * rng.sample::<f64, _>(StandardNormal)).collect();
            (vec![n], vec![m])
        }
        Some(second) => {
            let s2 = spec.forward_variance(1).sqrt();
            let mut n1 = Vec::with_capacity(l);
            let mut n2 = Vec::with_capacity(l);
            for _ in 0..l {
                let (a, b) = sample_correlated_noise(s1, s2, second.noise_correlation, rng)?;
                n1.push(a);
                n2.push(b);
            }
            let sm1 = spec.feedback_variance(0).sqrt();
            let sm2 = spec.feedback_variance(1).sqrt();
            let m1 = (0..l).map(|_| sm1 * rng.sample::<f64, _>(StandardNormal)).collect();
            let m2 = (0..l).map(|_| sm2 * rng.sample::<f64, _>(StandardNormal)).collect();
            (vec![n1, n2], vec![m1, m2])
        }
    };
    Ok(Sample { bits, fading, forward_noise, feedback_noise })
}

/// Samples `first_index .. first_index + count` of the stream at `path`.
pub fn generate_dataset(spec: &ChannelSpec, k: usize, count: usize, path: SeedPath, first_index: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if count == 0 {
        return Err(DrfError::invalid("dataset needs at least one sample"));
    }
    (0..count as u64).map(|i| generate_sample(spec, k, &mut path.rng_for(first_index + i))).collect()
}

/// Dataset size `ζ·|B|` for one epoch.
pub fn epoch_dataset_size(batch: usize, zeta: usize) -> usize {
    batch * zeta
}

const DATASET_MAGIC: &[u8; 8] = b"DRFDATA\0";
const DATASET_VERSION: u32 = 1;

fn fading_code(mode: FadingMode) -> u8 {
    match mode {
        FadingMode::Awgn => 0,
        FadingMode::SlowRayleigh => 1,
        FadingMode::FastRayleigh => 2,
    }
}

/// Binary dump of a dataset.
///
/// Header: magic `DRFDATA\0`, u32 version, u32 K, u32 L, u8 fading mode
/// (0 awgn, 1 slow, 2 fast), u8 receiver count R, u64 seed, u64 sample count.
/// Each sample: K bytes of bits, then L f64 fading values, R×L f64 forward
/// noise values and R×L f64 feedback noise values, all little-endian.
pub fn write_dataset<W: Write>(mut w: W, spec: &ChannelSpec, k: usize, seed: u64, samples: &[Sample]) -> Result<()> {
    let l = block_length(k);
    let r = spec.receivers();
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&(l as u32).to_le_bytes())?;
    w.write_all(&[fading_code(spec.fading), r as u8])?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        if s.bits.len() != k || s.fading.len() != l || s.forward_noise.len() != r || s.feedback_noise.len() != r {
            return Err(DrfError::invalid("sample does not match dataset header"));
        }
        w.write_all(&s.bits)?;
        for v in s.fading.iter().chain(s.forward_noise.iter().flatten()).chain(s.feedback_noise.iter().flatten()) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub k: usize,
    pub l: usize,
    pub fading: FadingMode,
    pub receivers: usize,
    pub seed: u64,
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<(DatasetHeader, Vec<Sample>)> {
    let bad = |_| DrfError::invalid("truncated dataset file");
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != DATASET_MAGIC {
        return Err(DrfError::invalid("not a dataset file"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(bad)?;
    if u32::from_le_bytes(b4) != DATASET_VERSION {
        return Err(DrfError::invalid("unsupported dataset version"));
    }
    r.read_exact(&mut b4).map_err(bad)?;
    let k = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4).map_err(bad)?;
    let l = u32::from_le_bytes(b4) as usize;
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2).map_err(bad)?;
    let fading = match b2[0] {
        0 => FadingMode::Awgn,
        1 => FadingMode::SlowRayleigh,
        2 => FadingMode::FastRayleigh,
        other => return Err(DrfError::invalid(format!("unknown fading code {other}"))),
    };
    let receivers = b2[1] as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(bad)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b8).map_err(bad)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut read_vec = |r: &mut R, n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                r.read_exact(&mut b8).map_err(bad)?;
                Ok(f64::from_le_bytes(b8))
            })
            .collect()
    };
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let mut bits = vec![0u8; k];
        r.read_exact(&mut bits).map_err(bad)?;
        let fading_v = read_vec(&mut r, l)?;
        let forward_noise = (0..receivers).map(|_| read_vec(&mut r, l)).collect::<Result<_>>()?;
        let feedback_noise = (0..receivers).map(|_| read_vec(&mut r, l)).collect::<Result<_>>()?;
        samples.push(Sample { bits, fading: fading_v, forward_noise, feedback_noise });
    }
    Ok((DatasetHeader { k, l, fading, receivers, seed }, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snr_conversions() {
        assert_eq!(snr_db_to_variance(0.0), 1.0);
        assert!((snr_db_to_variance(20.0) - 0.01).abs() < 1e-15);
        assert!((snr_db_to_variance(-1.0) - 10f64.powf(0.1)).abs() < 1e-15);
        assert!((snr_db_to_variance(-1.0) - 1.258925).abs() < 1e-6);
        assert_eq!(FeedbackSnr::Noiseless.variance(), 0.0);
        for db in [-3.0, 0.0, 1.5, 20.0] {
            assert!((variance_to_snr_db(snr_db_to_variance(db)) - db).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_output_model() {
        assert_eq!(forward_channel(1.0, 1.0, 0.0), 1.0);
        assert_eq!(forward_channel(2.0, 0.5, -0.25), 0.75);
        assert_eq!(feedback_channel(Some(1.5), -0.5), 1.0);
        assert_eq!(feedback_channel(Some(0.3), 0.0), 0.3);
        assert_eq!(feedback_channel(None, 0.2), 0.2);
    }

    #[test]
    fn rayleigh_inverse_cdf_spot_value() {
        let sigma = 0.7;
        let a = rayleigh_from_uniform(sigma, (-0.5f64).exp());
        assert!((a - sigma).abs() < 1e-15);
    }

    #[test]
    fn correlated_noise_degenerate_and_invalid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (a, b) = sample_correlated_noise(0.8, 0.8, 1.0, &mut rng).unwrap();
            assert_eq!(a, b);
        }
        assert!(sample_correlated_noise(1.0, 1.0, 1.01, &mut rng).is_err());
    }

    #[test]
    fn transmission_schedule_is_a_permutation() {
        let order = transmission_order(3);
        assert_eq!(order, vec![0, 1, 2, 3, 4, 8, 5, 9, 6, 10, 7, 11]);
        let time = transmission_time(3);
        for (t, p) in order.iter().enumerate() {
            assert_eq!(time[*p], t);
        }
    }

    #[test]
    fn slow_fading_is_constant_within_sample() {
        let spec = ChannelSpec::rayleigh(0.0, FeedbackSnr::Noiseless, FadingMode::SlowRayleigh, 1.0);
        let data = generate_dataset(&spec, 5, 20, SeedPath::new(1, 1), 0).unwrap();
        for s in &data {
            assert!(s.fading.iter().all(|a| *a == s.fading[0]));
            assert!(s.feedback_noise[0].iter().all(|m| *m == 0.0));
        }
        assert!(data.windows(2).any(|w| w[0].fading[0] != w[1].fading[0]));
    }

    #[test]
    fn awgn_has_unit_fading_and_regeneration_is_exact() {
        let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Db(20.0));
        let a = generate_dataset(&spec, 4, 10, SeedPath::new(9, 2), 5).unwrap();
        let b = generate_dataset(&spec, 4, 10, SeedPath::new(9, 2), 5).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.fading.iter().all(|x| *x == 1.0)));
        let c = generate_dataset(&spec, 4, 1, SeedPath::new(9, 2), 6).unwrap();
        assert_eq!(c[0], a[1]);
        assert!(generate_dataset(&spec, 4, 0, SeedPath::new(9, 2), 0).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let spec = ChannelSpec::multicast([0.0, 2.0], [FeedbackSnr::Noiseless, FeedbackSnr::Db(20.0)], 0.5);
        let data = generate_dataset(&spec, 3, 4, SeedPath::new(1, 0), 0).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &spec, 3, 1, &data).unwrap();
        let (hdr, back) = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(hdr, DatasetHeader { k: 3, l: 12, fading: FadingMode::Awgn, receivers: 2, seed: 1 });
        assert_eq!(back, data);
    }

    #[test]
    fn epoch_one_dataset_size() {
        assert_eq!(epoch_dataset_size(1000, 100), 100_000);
    }
}
