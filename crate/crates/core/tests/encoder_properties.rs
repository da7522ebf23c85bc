//! Closed-loop encoder properties: causality, power, open-loop reduction.

use drf_core::autodiff::Tape;
use drf_core::channel::*;
use drf_core::csi::CsiMode;
use drf_core::decoder::Phase;
use drf_core::model::*;
use drf_core::trainer::pass_loss;

fn batch(spec: &ChannelSpec, k: usize, count: usize, seed: u64) -> Batch {
    Batch::from_samples(&generate_dataset(spec, k, count, SeedPath::new(seed, 0), 0).unwrap()).unwrap()
}

fn codewords(model: &DrfModel, bt: &Batch, spec: &ChannelSpec, opts: &PassOptions) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, bt, spec, opts).unwrap();
    pass.x.iter().map(|x| tape.values(*x).to_vec()).collect()
}

/// Perturbs every feedback symbol in turn and checks that no symbol sent
/// before it changes. Returns how many perturbations changed later symbols.
fn exhaustive_causality(model: &DrfModel, spec: &ChannelSpec, opts: &PassOptions) -> usize {
    let k = model.config.k;
    let l = block_length(k);
    let time = transmission_time(k);
    let bt = batch(spec, k, 4, 11);
    let base = codewords(model, &bt, spec, opts);
    let mut effective = 0;
    for r in 0..model.config.receivers {
        for j in 1..l {
            let mut perturbed = bt.clone();
            perturbed.feedback_noise[r][j][0] += 0.75;
            let x = codewords(model, &perturbed, spec, opts);
            let mut changed_later = false;
            for p in 0..l {
                let same = x[p] == base[p];
                if time[p] < j {
                    assert!(same, "x at time {} changed after perturbing z_{j} (receiver {r})", time[p]);
                } else if !same {
                    changed_later = true;
                }
            }
            effective += usize::from(changed_later);
        }
    }
    effective
}

#[test]
fn causality_awgn_noisy_feedback_train_and_eval() {
    let model = DrfModel::new(CodeConfig::awgn(8), 1).unwrap();
    let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Db(10.0));
    for opts in [PassOptions::train(), PassOptions::eval()] {
        let effective = exhaustive_causality(&model, &spec, &opts);
        // Only the feedback arriving at the final time slot goes unused.
        assert_eq!(effective, block_length(8) - 2);
    }
}

#[test]
fn causality_with_fading_and_estimated_csi() {
    for fading in [FadingMode::SlowRayleigh, FadingMode::FastRayleigh] {
        let mut cfg = CodeConfig::awgn(8);
        cfg.fading = fading;
        cfg.encoder_csi = CsiMode::Estimated;
        let model = DrfModel::new(cfg, 2).unwrap();
        let spec = ChannelSpec::rayleigh(3.0, FeedbackSnr::Db(15.0), fading, 1.0);
        assert!(exhaustive_causality(&model, &spec, &PassOptions::train()) > 0);
    }
}

#[test]
fn causality_multicast() {
    let mut cfg = CodeConfig::awgn(8);
    cfg.receivers = 2;
    let model = DrfModel::new(cfg, 3).unwrap();
    let spec = ChannelSpec::multicast([0.0, 1.0], [FeedbackSnr::Db(10.0), FeedbackSnr::Db(12.0)], 0.5);
    assert!(exhaustive_causality(&model, &spec, &PassOptions::eval()) > 0);
}

#[test]
fn training_mode_power_is_unit() {
    let model = DrfModel::new(CodeConfig::awgn(10), 4).unwrap();
    let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Db(20.0));
    let bt = batch(&spec, 10, 10_000, 4);
    let x = codewords(&model, &bt, &spec, &PassOptions::train());
    let power = x.iter().flatten().map(|v| v * v).sum::<f64>() / (10_000.0 * block_length(10) as f64);
    assert!((power - 1.0).abs() < 0.02, "power {power}");
}

#[test]
fn frozen_power_holds_on_fresh_messages() {
    let mut model = DrfModel::new(CodeConfig::awgn(10), 5).unwrap();
    let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Db(20.0));
    model.calibrate(&batch(&spec, 10, 10_000, 5), &spec).unwrap();
    let x = codewords(&model, &batch(&spec, 10, 10_000, 6), &spec, &PassOptions::eval());
    let power = x.iter().flatten().map(|v| v * v).sum::<f64>() / (10_000.0 * block_length(10) as f64);
    assert!((power - 1.0).abs() < 0.03, "power {power}");
}

#[test]
fn zero_feedback_depends_on_message_only() {
    let model = DrfModel::new(CodeConfig::awgn(5), 6).unwrap();
    let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Db(5.0));
    let a = batch(&spec, 5, 8, 7);
    let mut b = batch(&spec, 5, 8, 8);
    b.bits = a.bits.clone();
    let opts = PassOptions { zero_feedback: true, ..PassOptions::eval() };
    assert_eq!(codewords(&model, &a, &spec, &opts), codewords(&model, &b, &spec, &opts));
    let closed = PassOptions::eval();
    assert_ne!(codewords(&model, &a, &spec, &closed), codewords(&model, &b, &spec, &closed));
}

#[test]
fn phase_one_symbols_are_antipodal_with_unit_weights() {
    let model = DrfModel::new(CodeConfig::awgn(6), 7).unwrap();
    let spec = ChannelSpec::awgn(0.0, FeedbackSnr::Noiseless);
    let bt = batch(&spec, 6, 5, 9);
    let x = codewords(&model, &bt, &spec, &PassOptions::eval());
    for (i, bits) in bt.bits.iter().enumerate() {
        for (p, b) in bits.iter().enumerate() {
            assert_eq!(x[p][i], if *b == 1 { 1.0 } else { -1.0 });
        }
        assert_eq!(x[6][i], -1.0);
    }
}

#[test]
fn every_parameter_receives_gradient() {
    for receivers in [1, 2] {
        let mut cfg = CodeConfig::awgn(4);
        cfg.receivers = receivers;
        let mut model = DrfModel::new(cfg, 8).unwrap();
        let spec = if receivers == 1 {
            ChannelSpec::awgn(0.0, FeedbackSnr::Db(10.0))
        } else {
            ChannelSpec::multicast([0.0, 0.0], [FeedbackSnr::Db(10.0); 2], 0.3)
        };
        let bt = batch(&spec, 4, 16, 10);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &bt, &spec, &PassOptions::train()).unwrap();
        let loss = pass_loss(&mut tape, &pass.probs, &bt.targets(), [1.0, 1.0]).unwrap();
        tape.backward_into(loss, &mut model.store).unwrap();
        for id in model.store.trainable_ids().collect::<Vec<_>>() {
            let g = model.store.get(id).grad().unwrap_or(&[]);
            assert!(g.iter().any(|v| *v != 0.0), "no gradient reaches {}", model.store.name(id));
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let model = DrfModel::new(CodeConfig::awgn(4), 9).unwrap();
    let spec = ChannelSpec::awgn(1.0, FeedbackSnr::Db(10.0));
    let bt = batch(&spec, 4, 6, 12);
    for phase in [Phase::Train, Phase::Eval] {
        let opts = PassOptions { phase, ..PassOptions::train() };
        assert_eq!(codewords(&model, &bt, &spec, &opts), codewords(&model, &bt, &spec, &opts));
    }
}
