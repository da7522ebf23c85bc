//! Subcommand implementations. Each writes its table under the run
//! directory and returns the path of that table.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use drf_core::autodiff::gradcheck::GradCheckConfig;
use drf_core::autodiff::Checkpoint;
use drf_core::channel::{generate_dataset, ChannelSpec, FeedbackSnr, SeedPath};
use drf_core::eval::{
    count_errors, mismatch_sweep, multicast_eval, q_function, uncoded_ber, ErrorEstimate, EvalSpec, SampleBudget,
};
use drf_core::model::{AttentionMode, Batch, CodeConfig, DrfModel};
use drf_core::trainer::{self, full_gradient_check, parameter_checksum, TrainStatus};
use serde_json::json;

use crate::config::{parse_grid, RunConfig};
use crate::output::{RunDir, Table, TOOL_VERSION};

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $DRF_RUN_DIR, else runs/<timestamp>-seed<seed>).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Message length K (hidden size follows unless configured).
    #[arg(long)]
    pub k: Option<usize>,
    /// Replaces the SNR schedule with `start:end:step` or a single value.
    #[arg(long, allow_hyphen_values = true)]
    pub schedule: Option<String>,
    /// Repeats each scheduled SNR this many times.
    #[arg(long)]
    pub repeats: Option<usize>,
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Feedback SNR in dB, or `noiseless`.
    #[arg(long, allow_hyphen_values = true)]
    pub feedback_snr: Option<String>,
    /// Trains without the attention network.
    #[arg(long)]
    pub no_attention: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Forward SNR grid in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: String,
    /// Feedback SNR in dB, or `noiseless` (default: the training channel).
    #[arg(long, allow_hyphen_values = true)]
    pub feedback_snr: Option<String>,
    /// Simulates exactly this many messages per point.
    #[arg(long)]
    pub samples: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// True forward SNR grid ρ in dB.
    #[arg(long, allow_hyphen_values = true)]
    pub snr: String,
    /// Mismatch grid Δρ in dB; attention is told ρ − Δρ.
    #[arg(long, allow_hyphen_values = true)]
    pub delta: String,
    /// Feeds all-ones attention coefficients instead.
    #[arg(long)]
    pub ablate: bool,
    #[arg(long, allow_hyphen_values = true)]
    pub feedback_snr: Option<String>,
    #[arg(long)]
    pub samples: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct MulticastArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub snr1: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub snr2: f64,
    /// Forward-noise correlation grid.
    #[arg(long, allow_hyphen_values = true)]
    pub eps: String,
    #[arg(long, allow_hyphen_values = true)]
    pub feedback_snr: Option<String>,
    #[arg(long)]
    pub samples: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

#[derive(Args, Debug, Clone, Default)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, allow_hyphen_values = true)]
    pub snr: String,
    #[arg(long, default_value_t = 1_000_000)]
    pub bits: u64,
}

fn parse_feedback(text: &str) -> Result<FeedbackSnr> {
    if text.eq_ignore_ascii_case("noiseless") {
        return Ok(FeedbackSnr::Noiseless);
    }
    let db: f64 = text.parse().with_context(|| format!("feedback SNR `{text}` is neither a number nor `noiseless`"))?;
    Ok(FeedbackSnr::Db(db))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn estimate_fields(e: &ErrorEstimate) -> Vec<String> {
    vec![num(e.estimate), num(e.half_width), e.errors.to_string(), e.trials.to_string(), e.censored.to_string()]
}

fn start(run: &RunDir, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<Instant> {
    run.log(&json!({
        "event": "start",
        "command": command,
        "version": TOOL_VERSION,
        "seed": cfg.seed(),
        "config_hash": cfg.hash(),
        "config": cfg,
        "args": extra,
    }))?;
    Ok(Instant::now())
}

fn finish(run: &RunDir, command: &str, t0: Instant, extra: serde_json::Value) -> Result<()> {
    run.log(&json!({
        "event": "end",
        "command": command,
        "wall_seconds": t0.elapsed().as_secs_f64(),
        "result": extra,
    }))
}

fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("ckpt.partial");
    let mut w = BufWriter::new(File::create(&tmp)?);
    ckpt.write_to(&mut w)?;
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a trained code and the channel it was trained on.
pub fn load_checkpoint(path: &Path) -> Result<(DrfModel, Option<ChannelSpec>)> {
    let file = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    let ckpt = Checkpoint::read_from(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
    let model = DrfModel::from_checkpoint(&ckpt)?;
    let channel = DrfModel::checkpoint_extra(&ckpt)?.get("channel").cloned().map(serde_json::from_value).transpose()?;
    Ok((model, channel))
}

fn eval_channel(model: &DrfModel, trained: Option<ChannelSpec>, cfg: &RunConfig, feedback: Option<&str>) -> Result<ChannelSpec> {
    let c = &model.config;
    let mut spec = match trained {
        Some(s) if cfg.channel == Default::default() => s,
        _ => cfg.channel(c.fading, c.receivers, c.rayleigh_omega)?,
    };
    if let Some(text) = feedback {
        let fb = parse_feedback(text)?;
        spec.feedback_snr = fb;
        if let Some(m) = spec.multicast.as_mut() {
            m.feedback_snr = fb;
        }
    }
    Ok(spec)
}

fn budget(cfg: &RunConfig, samples: Option<u64>) -> Result<SampleBudget> {
    let b = cfg.budget()?;
    Ok(match samples {
        Some(n) => SampleBudget { min_samples: n, max_samples: n, ..b },
        None => b,
    })
}

pub fn train(args: &TrainArgs) -> Result<PathBuf> {
    let mut cfg = args.common.load()?;
    if let Some(k) = args.k {
        cfg.code.k = Some(k);
    }
    if args.no_attention {
        cfg.code.attention = Some(false);
    }
    if let Some(text) = &args.schedule {
        let repeats = args.repeats.unwrap_or(1);
        let grid = parse_grid(text)?;
        cfg.train.snr_schedule_db = Some(grid.iter().flat_map(|s| std::iter::repeat_n(*s, repeats)).collect());
    } else if args.repeats.is_some() {
        bail!("--repeats needs --schedule");
    }
    if let Some(z) = args.steps_per_epoch {
        cfg.train.steps_per_epoch = Some(z);
    }
    if let Some(b) = args.batch {
        cfg.train.initial_batch = Some(b);
        cfg.train.max_batch = Some(cfg.train.max_batch.unwrap_or(b).max(b));
    }
    if let Some(fb) = &args.feedback_snr {
        cfg.channel.feedback_snr_db = match parse_feedback(fb)? {
            FeedbackSnr::Noiseless => None,
            FeedbackSnr::Db(db) => Some(db),
        };
    }
    let code = cfg.code()?;
    let channel = cfg.channel(code.fading, code.receivers, code.rayleigh_omega)?;
    let plan = cfg.plan()?;
    let seed = cfg.seed();

    let run = RunDir::create(args.common.run_dir.as_deref(), seed)?;
    let t0 = start(&run, "train", &cfg, json!({ "plan": plan, "channel": channel }))?;
    let ckdir = run.checkpoint_dir()?;
    let mut model = DrfModel::new(code, seed)?;
    let meta = |epoch: usize| json!({ "channel": channel, "seed": seed, "epoch": epoch });
    let summary = trainer::train(&mut model, &plan, &channel, |report, model, is_best| {
        let ckpt = model.checkpoint(meta(report.epoch));
        save_checkpoint(&ckdir.join(format!("epoch-{:03}.ckpt", report.epoch)), &ckpt)?;
        if is_best {
            save_checkpoint(&ckdir.join("best.ckpt"), &ckpt)?;
        }
        run.log(&json!({ "event": "epoch", "report": report }))?;
        log::info!(
            "epoch {:>3}  snr {:>5} dB  batch {:>5}  loss {:.5}  ({:.1}s)",
            report.epoch,
            report.snr_db,
            report.batch_size,
            report.final_loss,
            report.wall_seconds
        );
        Ok::<_, anyhow::Error>(())
    })?;
    let final_ckpt = model.checkpoint(meta(summary.reports.len()));
    save_checkpoint(&ckdir.join("final.ckpt"), &final_ckpt)?;

    let mut table = Table::new(&["epoch", "snr_db", "batch_size", "final_loss", "mean_loss", "checksum"]);
    for r in &summary.reports {
        table.push(vec![
            r.epoch.to_string(),
            num(r.snr_db),
            r.batch_size.to_string(),
            num(r.final_loss),
            num(r.mean_loss),
            r.checksum.clone(),
        ]);
    }
    let path = run.file("train.csv");
    table.write(&path)?;
    let status = match summary.status {
        TrainStatus::Completed => json!("completed"),
        TrainStatus::Diverged { epoch, loss, initial } => {
            log::warn!("training diverged at epoch {epoch}; kept the last good parameters");
            json!({ "diverged": { "epoch": epoch, "loss": loss, "initial": initial } })
        }
    };
    finish(
        &run,
        "train",
        t0,
        json!({ "status": status, "best_epoch": summary.best_epoch, "final_checksum": final_ckpt.checksum() }),
    )?;
    log::info!("final checkpoint checksum {}", parameter_checksum(&model));
    Ok(path)
}

pub fn eval(args: &EvalArgs) -> Result<PathBuf> {
    let cfg = args.common.load()?;
    let snrs = parse_grid(&args.snr)?;
    let (model, trained) = load_checkpoint(&args.checkpoint)?;
    let base = eval_channel(&model, trained, &cfg, args.feedback_snr.as_deref())?;
    let budget = budget(&cfg, args.samples)?;
    let run = RunDir::create(args.common.run_dir.as_deref(), cfg.seed())?;
    let t0 = start(&run, "eval", &cfg, json!({ "checkpoint": args.checkpoint, "snr": snrs, "channel": base }))?;

    let mut table = Table::new(&[
        "snr_db",
        "feedback_snr",
        "receiver",
        "ber",
        "ber_half_width",
        "bit_errors",
        "bits",
        "ber_censored",
        "bler",
        "bler_half_width",
        "block_errors",
        "blocks",
        "bler_censored",
    ]);
    for &snr in &snrs {
        let spec = EvalSpec { channel: base.with_forward_snr(snr), attention: AttentionMode::Matched, budget, seed: cfg.seed() };
        let counts = count_errors(&model, &spec)?;
        for r in 0..model.config.receivers {
            let mut row = vec![num(snr), spec.channel.feedback_snr.to_string(), (r + 1).to_string()];
            row.extend(estimate_fields(&counts.ber(r)));
            row.extend(estimate_fields(&counts.bler(r)));
            table.push(row);
        }
        log::info!("snr {snr} dB: BLER {}", counts.bler(0).estimate);
    }
    let path = run.file("eval.csv");
    table.write(&path)?;
    finish(&run, "eval", t0, json!({ "rows": table.len() }))?;
    Ok(path)
}

pub fn sweep(args: &SweepArgs) -> Result<PathBuf> {
    let cfg = args.common.load()?;
    let snrs = parse_grid(&args.snr)?;
    let deltas = parse_grid(&args.delta)?;
    let (model, trained) = load_checkpoint(&args.checkpoint)?;
    if model.config.receivers != 1 {
        bail!("mismatch sweeps need a point-to-point checkpoint");
    }
    let base = eval_channel(&model, trained, &cfg, args.feedback_snr.as_deref())?;
    let spec = EvalSpec { channel: base, attention: AttentionMode::Matched, budget: budget(&cfg, args.samples)?, seed: cfg.seed() };
    let run = RunDir::create(args.common.run_dir.as_deref(), cfg.seed())?;
    let t0 = start(
        &run,
        "sweep",
        &cfg,
        json!({ "checkpoint": args.checkpoint, "snr": snrs, "delta": deltas, "ablate": args.ablate, "channel": base }),
    )?;
    let rows = mismatch_sweep(&model, &spec, &snrs, &deltas, args.ablate)?;
    let attention = match (model.config.attention, args.ablate) {
        (false, _) => "none",
        (true, true) => "ones",
        (true, false) => "snr",
    };
    let mut table = Table::new(&[
        "snr_db",
        "delta_db",
        "assumed_snr_db",
        "attention",
        "ber",
        "ber_half_width",
        "bit_errors",
        "bits",
        "ber_censored",
        "bler",
        "bler_half_width",
        "block_errors",
        "blocks",
        "bler_censored",
    ]);
    for row in &rows {
        let mut fields = vec![num(row.snr_db), num(row.delta_db), num(row.assumed_snr_db), attention.to_string()];
        fields.extend(estimate_fields(&row.ber));
        fields.extend(estimate_fields(&row.bler));
        table.push(fields);
    }
    let path = run.file("sweep.csv");
    table.write(&path)?;
    finish(&run, "sweep", t0, json!({ "rows": table.len() }))?;
    Ok(path)
}

pub fn multicast(args: &MulticastArgs) -> Result<PathBuf> {
    let cfg = args.common.load()?;
    let eps = parse_grid(&args.eps)?;
    let (model, trained) = load_checkpoint(&args.checkpoint)?;
    if model.config.receivers != 2 {
        bail!("multicast evaluation needs a two-receiver checkpoint");
    }
    let base = eval_channel(&model, trained, &cfg, args.feedback_snr.as_deref())?;
    let mc = base.multicast.context("checkpoint channel has no second receiver")?;
    let budget = budget(&cfg, args.samples)?;
    let run = RunDir::create(args.common.run_dir.as_deref(), cfg.seed())?;
    let t0 = start(&run, "multicast", &cfg, json!({ "checkpoint": args.checkpoint, "eps": eps, "channel": base }))?;
    let mut table = Table::new(&[
        "snr1_db",
        "snr2_db",
        "noise_correlation",
        "receiver",
        "ber",
        "ber_half_width",
        "bit_errors",
        "bits",
        "ber_censored",
        "bler",
        "bler_half_width",
        "block_errors",
        "blocks",
        "bler_censored",
        "spectral_efficiency",
    ]);
    for &e in &eps {
        let channel = ChannelSpec::multicast([args.snr1, args.snr2], [base.feedback_snr, mc.feedback_snr], e);
        let spec = EvalSpec { channel, attention: AttentionMode::Matched, budget, seed: cfg.seed() };
        let row = multicast_eval(&model, &spec)?;
        for r in 0..2 {
            let mut fields = vec![num(args.snr1), num(args.snr2), num(e), (r + 1).to_string()];
            fields.extend(estimate_fields(&row.ber[r]));
            fields.extend(estimate_fields(&row.bler[r]));
            fields.push(num(row.spectral_efficiency[r]));
            table.push(fields);
        }
    }
    let path = run.file("multicast.csv");
    table.write(&path)?;
    finish(&run, "multicast", t0, json!({ "rows": table.len() }))?;
    Ok(path)
}

/// Returns the table path and the maximum relative error.
pub fn gradcheck(args: &GradcheckArgs) -> Result<(PathBuf, f64)> {
    let cfg = args.common.load()?;
    let mut code = CodeConfig::awgn(args.k);
    code.hidden = cfg.code.hidden.unwrap_or(args.k);
    let seed = cfg.seed();
    // Noisy feedback so every feedback path carries gradient.
    let feedback = FeedbackSnr::Db(cfg.channel.feedback_snr_db.unwrap_or(10.0));
    let channel = ChannelSpec::awgn(cfg.channel.forward_snr_db.unwrap_or(0.0), feedback);
    let run = RunDir::create(args.common.run_dir.as_deref(), seed)?;
    let t0 = start(&run, "gradcheck", &cfg, json!({ "k": args.k, "batch": args.batch, "step": args.step }))?;
    let model = DrfModel::new(code, seed)?;
    let samples = generate_dataset(&channel, args.k, args.batch, SeedPath::new(seed, 0), 0)?;
    let check = GradCheckConfig { step: args.step, ..GradCheckConfig::default() };
    let report = full_gradient_check(&model, &Batch::from_samples(&samples)?, &channel, check)?;
    let worst = report.worst.clone().context("no parameters checked")?;
    let passed = report.passes(args.tolerance) && report.all_zero.is_empty();
    let mut table = Table::new(&["k", "checked", "max_relative_error", "worst_parameter", "worst_index", "tolerance", "passed"]);
    table.push(vec![
        args.k.to_string(),
        report.checked.to_string(),
        num(report.max_error),
        worst.param.clone(),
        worst.index.to_string(),
        num(args.tolerance),
        passed.to_string(),
    ]);
    let path = run.file("gradcheck.csv");
    table.write(&path)?;
    finish(&run, "gradcheck", t0, json!({ "max_relative_error": report.max_error, "passed": passed }))?;
    println!("max relative error {:e} over {} elements (worst: {}[{}])", report.max_error, report.checked, worst.param, worst.index);
    if !report.all_zero.is_empty() {
        bail!("parameters without gradient: {}", report.all_zero.join(", "));
    }
    if !passed {
        bail!("gradient check failed: {:e} exceeds {:e}", report.max_error, args.tolerance);
    }
    Ok((path, report.max_error))
}

pub fn baseline(args: &BaselineArgs) -> Result<PathBuf> {
    let cfg = args.common.load()?;
    let snrs = parse_grid(&args.snr)?;
    if args.bits == 0 {
        bail!("--bits must be positive");
    }
    let run = RunDir::create(args.common.run_dir.as_deref(), cfg.seed())?;
    let t0 = start(&run, "baseline", &cfg, json!({ "snr": snrs, "bits": args.bits }))?;
    let mut table = Table::new(&["snr_db", "ber", "ber_half_width", "bit_errors", "bits", "ber_censored", "theory_ber"]);
    for &snr in &snrs {
        let est = uncoded_ber(snr, args.bits, cfg.seed());
        let mut row = vec![num(snr)];
        row.extend(estimate_fields(&est));
        row.push(num(q_function(10f64.powf(snr / 10.0).sqrt())));
        table.push(row);
    }
    let path = run.file("baseline.csv");
    table.write(&path)?;
    finish(&run, "baseline", t0, json!({ "rows": table.len() }))?;
    Ok(path)
}
