//! `ablate`: train and evaluate every framework x fusion-block combination
//! over several seeds and tabulate mean +/- std of the headline metrics,
//! with exact parameter counts per configuration.

use std::path::PathBuf;

use skinfuse::blocks::FusionKind;
use skinfuse::data::TaskSchema;
use skinfuse::eval::report::{ablation_table, AblationRow};
use skinfuse::eval::{compute_metrics, fuse_cases, weight_search};
use skinfuse::model::Framework;
use skinfuse::train::{AdamConfig, AugmentToggles, TrainConfig};
use skinfuse::{Error, Result};

use crate::manifest::RunManifest;
use crate::settings::Settings;

use super::train::{build_and_fit, TrainPlan};
use super::{
    labels_of, load_split_dataset, parse_objective, predict_cases, prediction_sets, tta_plans,
    write_text,
};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    /// Seeds per configuration: base seed, base+1, ... [default: 3]
    #[arg(long)]
    seeds: Option<u64>,
    /// Training epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Cases per optimiser step [default: 8]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    lr: Option<f64>,
    /// Fraction of final epochs whose weights are averaged [default: 0.2]
    #[arg(long)]
    swa_window: Option<f64>,
    /// Random train-time augmentation [default: true]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    augment: Option<bool>,
    /// Average predictions over flipped views [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    tta: Option<bool>,
    /// Scale attention logits by 1/sqrt(channels) [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    scale_attention_logits: Option<bool>,
    /// Grid step for the weight search; must divide 1 [default: 0.1]
    #[arg(long)]
    step: Option<f64>,
    /// Search objective: avg-acc or avg-auc [default: avg-acc]
    #[arg(long)]
    objective: Option<String>,
    /// Base RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Settings file (key = value); flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let seeds = settings.resolve("seeds", args.seeds, 3)?;
    if seeds == 0 {
        return Err(Error::Config("seeds must be at least 1".into()));
    }
    let epochs = settings.resolve("epochs", args.epochs, 30)?;
    let batch_size = settings.resolve("batch_size", args.batch_size, 8)?;
    let lr = settings.resolve("lr", args.lr, 1e-3)?;
    let swa_window = settings.resolve("swa_window", args.swa_window, 0.2)?;
    let augment = settings.resolve("augment", args.augment, true)?;
    let tta = settings.resolve("tta", args.tta, false)?;
    let scale = settings.resolve("scale_attention_logits", args.scale_attention_logits, false)?;
    let step = settings.resolve("step", args.step, 0.1)?;
    let objective = parse_objective(&settings.resolve_raw(
        "objective",
        args.objective.as_deref(),
        "avg-acc",
    ))?;
    let base_seed = settings.resolve("seed", args.seed, 0)?;

    let schema = TaskSchema::seven_point();
    let (records, idx, dims) = load_split_dataset(&args.data, &schema)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;

    let plans = tta_plans(tta);
    let val_labels = labels_of(&records, &idx.val);
    let test_labels = labels_of(&records, &idx.test);

    let grid = [Framework::Sff, Framework::Aff];
    let blocks = [FusionKind::Cat, FusionKind::Bab, FusionKind::Aab];
    let mut rows = Vec::with_capacity(grid.len() * blocks.len());
    for framework in grid {
        for block in blocks {
            let label = format!("{}/{}", framework.as_str(), block.as_str());
            let mut avg_auc = Vec::with_capacity(seeds as usize);
            let mut avg_acc = Vec::with_capacity(seeds as usize);
            let mut params = 0u64;
            for s in 0..seeds {
                let seed = base_seed + s;
                eprintln!("[{label} seed {seed}] training {epochs} epochs");
                let plan = TrainPlan {
                    framework,
                    block,
                    train: TrainConfig {
                        epochs,
                        batch_size,
                        adam: AdamConfig { lr, ..AdamConfig::default() },
                        swa_window,
                        mean_reduction: true,
                        augment: if augment {
                            AugmentToggles::all()
                        } else {
                            AugmentToggles::none()
                        },
                        seed,
                    },
                    augment,
                    scale_attention_logits: scale,
                };
                let (model, _) = build_and_fit(&plan, &schema, dims, &records, &idx.train)?;
                params = model.param_audit().total;

                let val_preds = predict_cases(&model, &records, &idx.val, &plans)?;
                let (weights, val_value) = weight_search(
                    &prediction_sets(&val_preds),
                    &val_labels,
                    &schema,
                    step,
                    objective,
                )?;
                eprintln!(
                    "[{label} seed {seed}] weights {weights} (val {} {val_value:.4})",
                    objective.as_str()
                );
                let test_preds = predict_cases(&model, &records, &idx.test, &plans)?;
                let fused = fuse_cases(&prediction_sets(&test_preds), weights)?;
                let report = compute_metrics(&fused, &test_labels, &schema)?;
                for w in &report.warnings {
                    eprintln!("warning: [{label} seed {seed}] {w}");
                }
                let auc = report.avg_auc.ok_or_else(|| {
                    Error::numeric(
                        "ablate",
                        format!(
                            "{label} seed {seed}: every scored category is single-class on \
                             the test split, so the average AUC is undefined"
                        ),
                    )
                })?;
                if !auc.is_finite() || !report.avg_accuracy.is_finite() {
                    return Err(Error::numeric(
                        "ablate",
                        format!("{label} seed {seed}: non-finite headline metric"),
                    ));
                }
                avg_auc.push(auc);
                avg_acc.push(report.avg_accuracy);
            }
            rows.push(AblationRow { label, avg_auc, avg_acc, params });
        }
    }

    let text = ablation_table(&rows, false)?.text();
    print!("{text}");
    write_text(&args.out.join("ablation.txt"), &text)?;
    write_text(&args.out.join("ablation.csv"), &ablation_table(&rows, true)?.csv())?;

    let mut manifest = RunManifest::new("ablate");
    manifest.push("ablate.seeds", seeds.to_string());
    manifest.push("ablate.base_seed", base_seed.to_string());
    manifest.push("train.epochs", epochs.to_string());
    manifest.push("train.batch_size", batch_size.to_string());
    manifest.push("train.lr", lr.to_string());
    manifest.push("train.swa_window", swa_window.to_string());
    manifest.push("train.augment", augment.to_string());
    manifest.push("train.scale_attention_logits", scale.to_string());
    manifest.push("eval.tta", tta.to_string());
    manifest.push("eval.step", step.to_string());
    manifest.push("eval.objective", objective.as_str().to_string());
    manifest.push_input("data", &args.data)?;
    manifest.push_artifact("table", &args.out, "ablation.txt")?;
    manifest.push_artifact("table_csv", &args.out, "ablation.csv")?;
    manifest.write(&args.out.join("manifest.txt"))?;
    Ok(())
}
