//! End-to-end training behaviour on real synthetic datasets: the loss goes
//! down, zero learning rate changes nothing, identical runs are bit
//! identical, the weight-averaging window counts snapshots correctly, and
//! augmentation-averaged prediction stays on the probability simplex.

use skinfuse::data::{synth_generate, SynthConfig, TaskSchema};
use skinfuse::model::{BackboneConfig, Framework, Model, ModelConfig};
use skinfuse::blocks::FusionKind;
use skinfuse::train::{default_tta_plans, fit, tta_predict, AugmentToggles, TrainConfig};

/// A deliberately small model for fast integration runs: two stages, tiny
/// widths, 8x8 inputs.
fn mini_config(fusion: FusionKind) -> ModelConfig {
    ModelConfig {
        framework: Framework::Aff,
        fusion,
        attention_stages: if fusion == FusionKind::Cat { vec![] } else { vec![1] },
        input_size: (8, 8),
        clin: BackboneConfig { widths: vec![2, 3], depths: vec![1, 1], strides: vec![2, 2], embed: 4 },
        derm: BackboneConfig { widths: vec![3, 4], depths: vec![1, 1], strides: vec![2, 2], embed: 4 },
        scale_attention_logits: false,
    }
}

fn mini_data(cases: usize, seed: u64) -> Vec<skinfuse::data::CaseRecord> {
    let cfg = SynthConfig { cases, height: 8, width: 8, derm_snr: 4.0, clin_snr: 1.0 };
    synth_generate(&cfg, &TaskSchema::seven_point(), seed).unwrap()
}

#[test]
fn training_reduces_the_loss_on_synthetic_data() {
    let schema = TaskSchema::seven_point();
    let cfg = SynthConfig { cases: 24, height: 16, width: 16, derm_snr: 5.0, clin_snr: 1.5 };
    let data = synth_generate(&cfg, &schema, 7).unwrap();

    let mut model_cfg = ModelConfig::toy(Framework::Aff, FusionKind::Aab);
    model_cfg.input_size = (16, 16);
    let mut model = Model::build(&model_cfg, &schema, 7).unwrap();

    let train_cfg = TrainConfig {
        epochs: 6,
        batch_size: 8,
        augment: AugmentToggles::none(),
        seed: 7,
        ..TrainConfig::default()
    };
    let result = fit(&mut model, &data, &train_cfg).unwrap();
    assert_eq!(result.trace.len(), 6);
    let first = result.trace.first().unwrap().total;
    let last = result.trace.last().unwrap().total;
    assert!(
        last < first,
        "mean loss should fall over six epochs: started {first}, ended {last}"
    );
    for (e, step) in result.trace.iter().enumerate() {
        assert!(step.total.is_finite(), "epoch {e} produced a non-finite loss");
        assert!(
            (step.derm + step.clin + step.fusion - step.total).abs() <= 1e-9,
            "epoch {e}: branch losses do not add up"
        );
    }
}

#[test]
fn zero_learning_rate_changes_nothing_even_with_augmentation_and_averaging() {
    let schema = TaskSchema::seven_point();
    let data = mini_data(6, 11);
    let mut model = Model::build(&mini_config(FusionKind::Aab), &schema, 11).unwrap();
    let before: Vec<_> =
        model.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();

    let mut cfg = TrainConfig {
        epochs: 4,
        batch_size: 2,
        // Four epochs with a 0.5 window average two identical snapshots,
        // which is exact in floating point.
        swa_window: 0.5,
        augment: AugmentToggles::all(),
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.adam.lr = 0.0;
    let result = fit(&mut model, &data, &cfg).unwrap();
    assert_eq!(result.swa_snapshots, 2);

    let after = model.named_params();
    assert_eq!(before.len(), after.len());
    for ((bn, bt), (an, at)) in before.iter().zip(&after) {
        assert_eq!(bn, an);
        assert!(bt.bit_eq(at), "parameter {bn} moved under lr = 0");
    }
}

#[test]
fn identical_fits_are_bit_identical_and_the_seed_matters() {
    let schema = TaskSchema::seven_point();
    let data = mini_data(8, 3);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        augment: AugmentToggles::all(),
        seed: 9,
        ..TrainConfig::default()
    };

    let run = |train_seed: u64, model_seed: u64| {
        let mut model = Model::build(&mini_config(FusionKind::Aab), &schema, model_seed).unwrap();
        let mut c = cfg.clone();
        c.seed = train_seed;
        let result = fit(&mut model, &data, &c).unwrap();
        (model, result)
    };

    let (m1, r1) = run(9, 1);
    let (m2, r2) = run(9, 1);
    assert_eq!(r1.trace, r2.trace, "identical runs must produce identical traces");
    for ((n1, t1), (_, t2)) in m1.named_params().iter().zip(m2.named_params().iter()) {
        assert!(t1.bit_eq(t2), "parameter {n1} differs between identical runs");
    }

    let (m3, r3) = run(10, 1);
    let trace_differs = r1.trace != r3.trace;
    let params_differ = m1
        .named_params()
        .iter()
        .zip(m3.named_params().iter())
        .any(|((_, a), (_, b))| !a.bit_eq(b));
    assert!(
        trace_differs || params_differ,
        "changing the training seed left the run untouched"
    );
}

#[test]
fn the_averaging_window_counts_end_of_run_snapshots() {
    let schema = TaskSchema::seven_point();
    let data = mini_data(2, 21);
    for (epochs, window, expected) in
        [(5usize, 0.4f64, 2usize), (5, 0.0, 0), (5, 1.0, 5), (3, 0.5, 1), (1, 0.99, 0)]
    {
        let mut model = Model::build(&mini_config(FusionKind::Cat), &schema, 2).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 2,
            swa_window: window,
            augment: AugmentToggles::none(),
            seed: 1,
            ..TrainConfig::default()
        };
        let result = fit(&mut model, &data, &cfg).unwrap();
        assert_eq!(
            result.swa_snapshots, expected,
            "{epochs} epochs with window {window} should average {expected} snapshots"
        );
    }
}

#[test]
fn augmentation_averaged_predictions_are_distributions() {
    let schema = TaskSchema::seven_point();
    let data = mini_data(2, 31);
    let model = Model::build(&mini_config(FusionKind::Aab), &schema, 4).unwrap();
    let case = &data[0];

    let plans = default_tta_plans();
    assert!(plans[0].is_identity(), "the first view must be the unaugmented image");
    assert!(plans.len() > 1, "averaging needs more than one view to mean anything");

    let averaged = tta_predict(&model, &case.clin, &case.derm, &plans).unwrap();
    for branch in [&averaged.derm, &averaged.clin, &averaged.fusion] {
        for (t, probs) in branch.iter().enumerate() {
            assert_eq!(probs.len(), schema.n_categories(t));
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "task {t}: averaged probabilities sum to {sum}");
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    let single = tta_predict(&model, &case.clin, &case.derm, &plans[..1]).unwrap();
    let plain = model.predict(&case.clin, &case.derm).unwrap();
    assert_eq!(single, plain, "a lone identity view must equal plain prediction");
}

#[test]
fn an_empty_training_set_is_rejected() {
    let schema = TaskSchema::seven_point();
    let mut model = Model::build(&mini_config(FusionKind::Cat), &schema, 0).unwrap();
    let err = fit(&mut model, &[], &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, skinfuse::Error::Contract(_)), "got {err:?}");
}
