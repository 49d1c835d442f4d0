//! `train`: fit a model on a dataset's train split and write the checkpoint,
//! the per-epoch loss trace, and a run manifest.

use std::path::PathBuf;

use skinfuse::blocks::FusionKind;
use skinfuse::data::TaskSchema;
use skinfuse::model::{save_checkpoint, Framework, Model, ModelConfig};
use skinfuse::train::{fit, AdamConfig, AugmentToggles, TrainConfig};
use skinfuse::{Error, Result};

use crate::manifest::RunManifest;
use crate::settings::Settings;

use super::{load_split_dataset, write_text};

#[derive(clap::Args)]
pub struct Args {
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    /// Backbone framework: sff (symmetric) or aff (asymmetric) [default: aff]
    #[arg(long)]
    framework: Option<String>,
    /// Fusion block: cat, bab, or aab [default: aab]
    #[arg(long)]
    block: Option<String>,
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
    /// Scale attention logits by 1/sqrt(channels) [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    scale_attention_logits: Option<bool>,
    /// RNG seed for weight init, shuffling, and augmentation [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Settings file (key = value); flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Everything `train` needs after flag/file/default resolution.
pub struct TrainPlan {
    pub framework: Framework,
    pub block: FusionKind,
    pub train: TrainConfig,
    pub augment: bool,
    pub scale_attention_logits: bool,
}

pub fn resolve_plan(
    settings: &Settings,
    framework: Option<&str>,
    block: Option<&str>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    swa_window: Option<f64>,
    augment: Option<bool>,
    scale: Option<bool>,
    seed: Option<u64>,
) -> Result<TrainPlan> {
    let framework = Framework::parse(&settings.resolve_raw("framework", framework, "aff"))?;
    let block = FusionKind::parse(&settings.resolve_raw("block", block, "aab"))?;
    let augment = settings.resolve("augment", augment, true)?;
    let train = TrainConfig {
        epochs: settings.resolve("epochs", epochs, 30)?,
        batch_size: settings.resolve("batch_size", batch_size, 8)?,
        adam: AdamConfig { lr: settings.resolve("lr", lr, 1e-3)?, ..AdamConfig::default() },
        swa_window: settings.resolve("swa_window", swa_window, 0.2)?,
        mean_reduction: true,
        augment: if augment { AugmentToggles::all() } else { AugmentToggles::none() },
        seed: settings.resolve("seed", seed, 0)?,
    };
    let scale_attention_logits =
        settings.resolve("scale_attention_logits", scale, false)?;
    Ok(TrainPlan { framework, block, train, augment, scale_attention_logits })
}

/// Shared by `train` and `ablate`: build a model for this dataset, fit it on
/// the train split, and return it with its trace.
pub fn build_and_fit(
    plan: &TrainPlan,
    schema: &TaskSchema,
    input_size: (usize, usize),
    records: &[skinfuse::data::CaseRecord],
    train_indices: &[usize],
) -> Result<(Model, skinfuse::train::FitResult)> {
    let mut config = ModelConfig::toy(plan.framework, plan.block);
    config.input_size = input_size;
    config.scale_attention_logits = plan.scale_attention_logits;
    config.validate()?;
    let mut model = Model::build(&config, schema, plan.train.seed)?;
    let train_set: Vec<skinfuse::data::CaseRecord> =
        train_indices.iter().map(|&i| records[i].clone()).collect();
    let result = fit(&mut model, &train_set, &plan.train)?;
    Ok((model, result))
}

pub fn trace_csv(trace: &[skinfuse::train::LossBreakdown]) -> String {
    let mut out = String::from("epoch,derm,clin,fusion,total\n");
    for (i, row) in trace.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            row.derm,
            row.clin,
            row.fusion,
            row.total
        ));
    }
    out
}

pub fn run(args: &Args) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let plan = resolve_plan(
        &settings,
        args.framework.as_deref(),
        args.block.as_deref(),
        args.epochs,
        args.batch_size,
        args.lr,
        args.swa_window,
        args.augment,
        args.scale_attention_logits,
        args.seed,
    )?;

    let schema = TaskSchema::seven_point();
    let (records, idx, dims) = load_split_dataset(&args.data, &schema)?;

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    eprintln!(
        "training {}/{} on {} cases for {} epochs",
        plan.framework.as_str(),
        plan.block.as_str(),
        idx.train.len(),
        plan.train.epochs
    );
    let (model, result) = build_and_fit(&plan, &schema, dims, &records, &idx.train)?;

    let ckpt_dir = args.out.join("checkpoint");
    save_checkpoint(&model, &ckpt_dir)?;
    let trace_path = args.out.join("trace.csv");
    write_text(&trace_path, &trace_csv(&result.trace))?;

    let mut manifest = RunManifest::new("train");
    for (k, v) in model.config.to_kv() {
        manifest.push(format!("config.{k}"), v);
    }
    manifest.push("train.epochs", plan.train.epochs.to_string());
    manifest.push("train.batch_size", plan.train.batch_size.to_string());
    manifest.push("train.lr", plan.train.adam.lr.to_string());
    manifest.push("train.swa_window", plan.train.swa_window.to_string());
    manifest.push("train.augment", plan.augment.to_string());
    manifest.push("train.seed", plan.train.seed.to_string());
    manifest.push("result.swa_snapshots", result.swa_snapshots.to_string());
    manifest.push_input("data", &args.data)?;
    manifest.push_artifact("checkpoint", &args.out, "checkpoint")?;
    manifest.push_artifact("trace", &args.out, "trace.csv")?;
    manifest.write(&args.out.join("manifest.txt"))?;

    if let Some(last) = result.trace.last() {
        println!(
            "trained {}/{}: {} epochs, final mean loss {:.4}, checkpoint at {}",
            plan.framework.as_str(),
            plan.block.as_str(),
            result.trace.len(),
            last.total,
            ckpt_dir.display()
        );
    } else {
        println!(
            "trained {}/{}:0 epochs (initial weights kept), checkpoint at {}",
            plan.framework.as_str(),
            plan.block.as_str(),
            ckpt_dir.display()
        );
    }
    Ok(())
}
