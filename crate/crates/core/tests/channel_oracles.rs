//! Monte-Carlo checks of the channel simulator against closed-form moments.

use drf_core::channel::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (variance(a) * variance(b)).sqrt()
}

#[test]
fn snr_conversion_spot_values() {
    assert_eq!(snr_db_to_variance(0.0), 1.0);
    assert!((snr_db_to_variance(20.0) - 0.01).abs() < 1e-15);
    assert!((snr_db_to_variance(-1.0) - 10f64.powf(0.1)).abs() < 1e-15);
    assert_eq!(FeedbackSnr::Noiseless.variance(), 0.0);
}

#[test]
fn forward_noise_variance_at_zero_db() {
    let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Noiseless);
    let samples = generate_dataset(&spec, 10, 30_304, SeedPath::new(1, 0), 0).unwrap();
    // 33 positions per sample, about 10⁶ draws.
    let noise: Vec<f64> = samples.iter().flat_map(|s| s.forward_noise[0].iter().copied()).collect();
    assert!(noise.len() >= 1_000_000);
    assert!((variance(&noise) - 1.0).abs() < 0.01);
    // y − α·x recovers the noise exactly.
    let residual: Vec<f64> = samples
        .iter()
        .take(1000)
        .flat_map(|s| s.forward_noise[0].iter().zip(&s.fading).map(|(n, a)| forward_channel(0.7, *a, *n) - a * 0.7 - n))
        .collect();
    assert!(residual.iter().all(|r| r.abs() < 1e-15));
}

#[test]
fn forward_noise_variance_tracks_snr() {
    for snr in [-1.0, 3.0, 10.0] {
        let spec = ChannelSpec::awgn(snr, FeedbackSnr::Db(20.0));
        let samples = generate_dataset(&spec, 50, 6536, SeedPath::new(2, 0), 0).unwrap();
        let noise: Vec<f64> = samples.iter().flat_map(|s| s.forward_noise[0].iter().copied()).collect();
        let target = snr_db_to_variance(snr);
        assert!((variance(&noise) / target - 1.0).abs() < 0.01, "snr {snr}");
        let fb: Vec<f64> = samples.iter().flat_map(|s| s.feedback_noise[0].iter().copied()).collect();
        assert!((variance(&fb) / 0.01 - 1.0).abs() < 0.01);
    }
}

#[test]
fn rayleigh_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sigma = (0.5f64).sqrt();
    let draws: Vec<f64> = (0..1_000_000).map(|_| sample_rayleigh(sigma, &mut rng)).collect();
    let power = draws.iter().map(|a| a * a).sum::<f64>() / draws.len() as f64;
    assert!((power - 1.0).abs() < 0.01, "E[α²] = {power}");
    assert!((mean(&draws) - 0.886_23).abs() < 0.005);
    assert!(draws.iter().all(|a| a.is_finite() && *a >= 0.0));
}

#[test]
fn rayleigh_kolmogorov_smirnov() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sigma = 0.8;
    let n = 100_000;
    let mut draws: Vec<f64> = (0..n).map(|_| sample_rayleigh(sigma, &mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let d = draws
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let f = rayleigh_cdf(sigma, *a);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0, f64::max);
    // Asymptotic critical value at significance 0.01.
    assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
}

#[test]
fn inverse_cdf_spot_value() {
    let sigma = 1.7;
    assert!((rayleigh_from_uniform(sigma, (-0.5f64).exp()) - sigma).abs() < 1e-12);
}

#[test]
fn correlated_noise_statistics() {
    for (eps, tol) in [(0.0, 0.01), (0.9, 0.01), (-0.5, 0.01)] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b): (Vec<f64>, Vec<f64>) = (0..1_000_000).map(|_| sample_correlated_noise(1.0, 0.5, eps, &mut rng).unwrap()).unzip();
        let c = correlation(&a, &b);
        assert!((c - eps).abs() < tol, "ε={eps}: empirical {c}");
        assert!((variance(&b) / 0.25 - 1.0).abs() < 0.01);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let (a, b) = sample_correlated_noise(0.7, 0.7, 1.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }
    assert!(sample_correlated_noise(1.0, 1.0, 1.01, &mut rng).is_err());
}

#[test]
fn multicast_dataset_uses_correlated_forward_and_independent_feedback() {
    let spec = ChannelSpec::multicast([0.0, 0.0], [FeedbackSnr::Db(0.0), FeedbackSnr::Db(0.0)], 0.9);
    let samples = generate_dataset(&spec, 4, 20_000, SeedPath::new(7, 0), 0).unwrap();
    let n1: Vec<f64> = samples.iter().flat_map(|s| s.forward_noise[0].clone()).collect();
    let n2: Vec<f64> = samples.iter().flat_map(|s| s.forward_noise[1].clone()).collect();
    let m1: Vec<f64> = samples.iter().flat_map(|s| s.feedback_noise[0].clone()).collect();
    let m2: Vec<f64> = samples.iter().flat_map(|s| s.feedback_noise[1].clone()).collect();
    assert!((correlation(&n1, &n2) - 0.9).abs() < 0.01);
    assert!(correlation(&m1, &m2).abs() < 0.01);
}

#[test]
fn message_bits_are_fair() {
    let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Noiseless);
    let samples = generate_dataset(&spec, 50, 20_000, SeedPath::new(8, 0), 0).unwrap();
    let ones: usize = samples.iter().flat_map(|s| &s.bits).filter(|b| **b == 1).count();
    let freq = ones as f64 / 1_000_000.0;
    assert!((freq - 0.5).abs() < 0.002, "bit frequency {freq}");
}

#[test]
fn per_index_streams_are_uncorrelated() {
    let path = SeedPath::new(9, 3);
    let draws: Vec<f64> = (0..1_000_001u64).map(|i| path.rng_for(i).sample::<f64, _>(StandardNormal)).collect();
    let c = correlation(&draws[..1_000_000], &draws[1..]);
    assert!(c.abs() < 4.0 / 1000.0, "lag-1 correlation {c}");
}

#[test]
fn epoch_one_dataset_size() {
    assert_eq!(epoch_dataset_size(1000, 100), 100_000);
}

#[test]
fn feedback_link_definitions() {
    assert_eq!(feedback_channel(Some(1.5), -0.5), 1.0);
    assert_eq!(feedback_channel(Some(0.3), 0.0), 0.3);
    assert_eq!(feedback_channel(None, 0.2), 0.2);
    assert_eq!(forward_channel(1.0, 1.0, 0.0), 1.0);
    assert_eq!(forward_channel(2.0, 0.5, -0.25), 0.75);
}

proptest! {
    #[test]
    fn snr_round_trip(db in -30.0f64..60.0) {
        prop_assert!((variance_to_snr_db(snr_db_to_variance(db)) - db).abs() < 1e-9);
    }

    #[test]
    fn regeneration_is_bit_exact(seed in any::<u64>(), epoch in 0u64..100, index in 0u64..1_000_000) {
        let spec = ChannelSpec::rayleigh(1.0, FeedbackSnr::Db(10.0), FadingMode::FastRayleigh, 1.0);
        let path = SeedPath::new(seed, epoch);
        let a = generate_sample(&spec, 5, &mut path.rng_for(index)).unwrap();
        let b = generate_dataset(&spec, 5, 1, path, index).unwrap().remove(0);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn slow_fading_constant_fast_fading_varies(seed in any::<u64>()) {
        let slow = ChannelSpec::rayleigh(0.0, FeedbackSnr::Noiseless, FadingMode::SlowRayleigh, 1.0);
        let s = generate_dataset(&slow, 6, 1, SeedPath::new(seed, 0), 0).unwrap().remove(0);
        prop_assert!(s.fading.iter().all(|a| *a == s.fading[0]));
        let fast = ChannelSpec { fading: FadingMode::FastRayleigh, ..slow };
        let f = generate_dataset(&fast, 6, 1, SeedPath::new(seed, 0), 0).unwrap().remove(0);
        prop_assert!(f.fading.iter().any(|a| *a != f.fading[0]));
    }

    #[test]
    fn awgn_fading_is_unity(seed in any::<u64>(), k in 1usize..20) {
        let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Db(5.0));
        let s = generate_dataset(&spec, k, 1, SeedPath::new(seed, 0), 0).unwrap().remove(0);
        prop_assert_eq!(s.fading.len(), 3 * (k + 1));
        prop_assert!(s.fading.iter().all(|a| *a == 1.0));
    }

    #[test]
    fn schedule_is_causal_interleaving(k in 1usize..40) {
        let order = transmission_order(k);
        let time = transmission_time(k);
        let n = k + 1;
        for s in 0..n {
            prop_assert_eq!(time[s], s);
            prop_assert_eq!(time[2 * n + s], time[n + s] + 1);
        }
        for (t, p) in order.iter().enumerate() {
            prop_assert_eq!(time[*p], t);
        }
    }

    #[test]
    fn dataset_file_round_trip(seed in any::<u64>(), count in 1usize..6) {
        let spec = ChannelSpec::multicast([1.0, 2.0], [FeedbackSnr::Noiseless, FeedbackSnr::Db(3.0)], 0.4);
        let samples = generate_dataset(&spec, 3, count, SeedPath::new(seed, 0), 0).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &spec, 3, seed, &samples).unwrap();
        let (header, back) = read_dataset(&buf[..]).unwrap();
        prop_assert_eq!(header.seed, seed);
        prop_assert_eq!(back, samples);
    }
}
