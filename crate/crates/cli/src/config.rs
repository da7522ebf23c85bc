//! Strict TOML run configuration.
//!
//! Every section and key is optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [code]
//! k = 10
//! hidden = 10            # defaults to k
//! fading = "awgn"        # awgn | slow_rayleigh | fast_rayleigh
//! receivers = 1
//! attention = true
//! decoder_csi = false
//! encoder_csi = "exact"  # exact | estimated
//! rayleigh_omega = 1.0
//!
//! [channel]
//! forward_snr_db = 0.0
//! feedback_snr_db = 20.0 # omit for a noiseless feedback link
//! # second receiver, multicast codes only
//! second_forward_snr_db = 0.0
//! second_feedback_snr_db = 20.0
//! noise_correlation = 0.9
//!
//! [train]
//! snr_schedule_db = [-1, -1, -1, 0, 0, 0, 1, 1, 1, 2, 2, 2]
//! initial_batch = 1000
//! max_batch = 16000
//! steps_per_epoch = 100
//! stall_factor = 2.0
//! growth_factor = 2.0
//! stall_rule = "multiplied"  # multiplied | divided
//! learning_rate = 0.001
//! calibration_samples = 10000
//! calibration_snr_db = 0.0
//! loss_weights = [1.0, 1.0]
//!
//! [eval]
//! min_samples = 10000
//! max_samples = 1000000
//! shard_size = 10000
//! batch_size = 2000
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use drf_core::channel::{ChannelSpec, FadingMode, FeedbackSnr};
use drf_core::csi::CsiMode;
use drf_core::eval::SampleBudget;
use drf_core::model::CodeConfig;
use drf_core::trainer::{StallRule, TrainPlan};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub code: CodeSection,
    #[serde(default)]
    pub channel: ChannelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSection {
    pub k: Option<usize>,
    pub hidden: Option<usize>,
    pub fading: Option<FadingMode>,
    pub receivers: Option<usize>,
    pub attention: Option<bool>,
    pub decoder_csi: Option<bool>,
    pub encoder_csi: Option<CsiMode>,
    pub rayleigh_omega: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub forward_snr_db: Option<f64>,
    pub feedback_snr_db: Option<f64>,
    pub second_forward_snr_db: Option<f64>,
    pub second_feedback_snr_db: Option<f64>,
    pub noise_correlation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub snr_schedule_db: Option<Vec<f64>>,
    pub initial_batch: Option<usize>,
    pub max_batch: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub stall_factor: Option<f64>,
    pub growth_factor: Option<f64>,
    pub stall_rule: Option<StallRule>,
    pub learning_rate: Option<f64>,
    pub calibration_samples: Option<usize>,
    pub calibration_snr_db: Option<f64>,
    pub loss_weights: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub min_samples: Option<u64>,
    pub max_samples: Option<u64>,
    pub shard_size: Option<usize>,
    pub batch_size: Option<usize>,
}

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_SEED: u64 = 0;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn code(&self) -> Result<CodeConfig> {
        let c = &self.code;
        let k = c.k.unwrap_or(DEFAULT_K);
        let cfg = CodeConfig {
            k,
            hidden: c.hidden.unwrap_or(k),
            fading: c.fading.unwrap_or(FadingMode::Awgn),
            receivers: c.receivers.unwrap_or(1),
            attention: c.attention.unwrap_or(true),
            decoder_csi: c.decoder_csi.unwrap_or(false),
            encoder_csi: c.encoder_csi.unwrap_or(CsiMode::Exact),
            rayleigh_omega: c.rayleigh_omega.unwrap_or(1.0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Channel for a code with `receivers` receivers and the given fading.
    pub fn channel(&self, fading: FadingMode, receivers: usize, omega: f64) -> Result<ChannelSpec> {
        let c = &self.channel;
        let feedback = |db: Option<f64>| db.map_or(FeedbackSnr::Noiseless, FeedbackSnr::Db);
        let snr = c.forward_snr_db.unwrap_or(0.0);
        let spec = if receivers == 2 {
            ChannelSpec::multicast(
                [snr, c.second_forward_snr_db.unwrap_or(snr)],
                [feedback(c.feedback_snr_db), feedback(c.second_feedback_snr_db.or(c.feedback_snr_db))],
                c.noise_correlation.unwrap_or(0.0),
            )
        } else {
            if c.second_forward_snr_db.is_some() || c.second_feedback_snr_db.is_some() || c.noise_correlation.is_some() {
                bail!("second-receiver channel keys need a two-receiver code");
            }
            ChannelSpec::rayleigh(snr, feedback(c.feedback_snr_db), fading, omega)
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        let t = &self.train;
        let d = TrainPlan::standard();
        let plan = TrainPlan {
            snr_schedule_db: t.snr_schedule_db.clone().unwrap_or(d.snr_schedule_db),
            initial_batch: t.initial_batch.unwrap_or(d.initial_batch),
            max_batch: t.max_batch.unwrap_or(d.max_batch),
            zeta: t.steps_per_epoch.unwrap_or(d.zeta),
            stall_factor: t.stall_factor.unwrap_or(d.stall_factor),
            growth_factor: t.growth_factor.unwrap_or(d.growth_factor),
            stall_rule: t.stall_rule.unwrap_or(d.stall_rule),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            seed: self.seed(),
            calibration_samples: t.calibration_samples.unwrap_or(d.calibration_samples),
            calibration_snr_db: t.calibration_snr_db.or(d.calibration_snr_db),
            loss_weights: t.loss_weights.unwrap_or(d.loss_weights),
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn budget(&self) -> Result<SampleBudget> {
        let e = &self.eval;
        let d = SampleBudget::default();
        let b = SampleBudget {
            min_samples: e.min_samples.unwrap_or(d.min_samples),
            max_samples: e.max_samples.unwrap_or(d.max_samples),
            shard_size: e.shard_size.unwrap_or(d.shard_size),
            batch_size: e.batch_size.unwrap_or(d.batch_size),
        };
        b.validate()?;
        Ok(b)
    }

    /// SHA-256 of the canonical JSON form, used to tag run metadata.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses `start:end:step` (inclusive) or a single value.
pub fn parse_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| s.trim().parse::<f64>().with_context(|| format!("bad number `{s}` in grid `{text}`"));
    match parts.as_slice() {
        [v] => Ok(vec![num(v)?]),
        [a, b, s] => Ok(drf_core::eval::grid(num(a)?, num(b)?, num(s)?)?),
        _ => bail!("grid `{text}` must be `value` or `start:end:step`"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        let code = cfg.code().unwrap();
        assert_eq!((code.k, code.hidden, code.attention), (10, 10, true));
        assert_eq!(cfg.plan().unwrap(), TrainPlan { seed: 0, ..TrainPlan::standard() });
        assert_eq!(cfg.budget().unwrap(), SampleBudget::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        assert!(RunConfig::parse("[code]\nkk = 4").is_err());
        assert!(RunConfig::parse("[training]\n").is_err());
        assert!(RunConfig::parse("[code]\nfading = \"flat\"").is_err());
    }

    #[test]
    fn hidden_follows_k() {
        let cfg = RunConfig::parse("[code]\nk = 4").unwrap();
        assert_eq!(cfg.code().unwrap().hidden, 4);
    }

    #[test]
    fn multicast_channel_from_keys() {
        let cfg = RunConfig::parse(
            "[code]\nreceivers = 2\n[channel]\nforward_snr_db = 1.0\nfeedback_snr_db = 10.0\nnoise_correlation = 0.9",
        )
        .unwrap();
        let code = cfg.code().unwrap();
        let ch = cfg.channel(code.fading, code.receivers, 1.0).unwrap();
        let m = ch.multicast.unwrap();
        assert_eq!((m.forward_snr_db, m.noise_correlation), (1.0, 0.9));
        assert_eq!(m.feedback_snr, FeedbackSnr::Db(10.0));
        let single = RunConfig::parse("[channel]\nnoise_correlation = 0.5").unwrap();
        assert!(single.channel(FadingMode::Awgn, 1, 1.0).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::parse("[code]\nk = 0").unwrap().code().is_err());
        assert!(RunConfig::parse("[train]\ninitial_batch = 99999").unwrap().plan().is_err());
        assert!(RunConfig::parse("[eval]\nmin_samples = 10\nmax_samples = 5").unwrap().budget().is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(parse_grid("-1:2:1").unwrap(), vec![-1.0, 0.0, 1.0, 2.0]);
        assert_eq!(parse_grid("-3:3:1").unwrap().len(), 7);
        assert_eq!(parse_grid("0.5").unwrap(), vec![0.5]);
        assert!(parse_grid("1:2").is_err());
        assert!(parse_grid("a:b:c").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::parse("seed = 1").unwrap();
        assert_eq!(a.hash(), RunConfig::parse("seed = 1").unwrap().hash());
        assert_ne!(a.hash(), RunConfig::parse("seed = 2").unwrap().hash());
    }
}
