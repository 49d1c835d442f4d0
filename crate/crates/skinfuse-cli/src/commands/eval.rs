//! `eval`: score a trained checkpoint on a dataset's val and test splits.
//!
//! Writes full-precision prediction dumps for both splits, resolves the
//! final-fusion weights (grid search on val, or a fixed triple), and emits
//! the metric tables for the test split as aligned text and as CSV.

use std::path::{Path, PathBuf};

use skinfuse::data::TaskSchema;
use skinfuse::eval::dump::write_prediction_dump;
use skinfuse::eval::report::{accuracy_table, auc_table, melanoma_panel, Table};
use skinfuse::eval::{compute_metrics, fuse_cases, weight_search, MetricsReport};
use skinfuse::model::{load_checkpoint, Branch};
use skinfuse::{Error, Result};

use crate::manifest::RunManifest;
use crate::settings::Settings;

use super::{
    branch_probs, labels_of, load_split_dataset, parse_objective, parse_weights, predict_cases,
    prediction_sets, print_warnings, reject_nan, tta_plans, write_text, WeightsChoice,
};

#[derive(clap::Args)]
pub struct Args {
    /// Checkpoint directory (from train)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    /// Average predictions over flipped views [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    tta: Option<bool>,
    /// Final-fusion weights: 'search' or a derm,clin,fusion triple [default: search]
    #[arg(long)]
    weights: Option<String>,
    /// Grid step for the weight search; must divide 1 [default: 0.1]
    #[arg(long)]
    step: Option<f64>,
    /// Search objective: avg-acc or avg-auc [default: avg-acc]
    #[arg(long)]
    objective: Option<String>,
    /// Settings file (key = value); flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Writes one table as display-precision text and full-precision CSV, and
/// echoes the text to stdout under a heading.
fn emit_table(
    out_dir: &Path,
    stem: &str,
    heading: &str,
    text: &Table,
    csv: &Table,
) -> Result<()> {
    let rendered = text.text();
    println!("{heading}\n{rendered}");
    write_text(&out_dir.join(format!("{stem}.txt")), &rendered)?;
    write_text(&out_dir.join(format!("{stem}.csv")), &csv.csv())
}

pub fn run(args: &Args) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let tta = settings.resolve("tta", args.tta, false)?;
    let weights_raw = settings.resolve_raw("weights", args.weights.as_deref(), "search");
    let weights_choice = parse_weights(&weights_raw)?;
    let step = settings.resolve("step", args.step, 0.1)?;
    let objective = parse_objective(&settings.resolve_raw(
        "objective",
        args.objective.as_deref(),
        "avg-acc",
    ))?;

    if !args.checkpoint.join("manifest.txt").is_file() {
        return Err(Error::Config(format!(
            "checkpoint directory {} not found (no manifest.txt)",
            args.checkpoint.display()
        )));
    }
    let schema = TaskSchema::seven_point();
    let model = load_checkpoint(&args.checkpoint, &schema)?;
    let (records, idx, dims) = load_split_dataset(&args.data, &schema)?;
    if dims != model.config.input_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{} but the checkpoint expects {}x{}",
            dims.0, dims.1, model.config.input_size.0, model.config.input_size.1
        )));
    }

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let plans = tta_plans(tta);
    eprintln!(
        "scoring {} val and {} test cases ({} view{} each)",
        idx.val.len(),
        idx.test.len(),
        plans.len(),
        if plans.len() == 1 { "" } else { "s" }
    );
    let val_preds = predict_cases(&model, &records, &idx.val, &plans)?;
    let test_preds = predict_cases(&model, &records, &idx.test, &plans)?;
    write_prediction_dump(&args.out.join("predictions_val.csv"), &val_preds, &schema)?;
    write_prediction_dump(&args.out.join("predictions_test.csv"), &test_preds, &schema)?;

    let val_labels = labels_of(&records, &idx.val);
    let (weights, chosen_by) = match weights_choice {
        WeightsChoice::Fixed(w) => {
            println!("final-fusion weights (given): {w}");
            (w, "given".to_string())
        }
        WeightsChoice::Search => {
            let (w, value) =
                weight_search(&prediction_sets(&val_preds), &val_labels, &schema, step, objective)?;
            println!(
                "final-fusion weights (searched, step {step}): {w} with val {} {value}",
                objective.as_str()
            );
            (w, format!("search step {step} objective {}", objective.as_str()))
        }
    };

    let test_labels = labels_of(&records, &idx.test);
    let mut sources: Vec<(&str, MetricsReport)> = Vec::new();
    for branch in Branch::ALL {
        let probs = branch_probs(&test_preds, branch);
        sources.push((branch.as_str(), compute_metrics(&probs, &test_labels, &schema)?));
    }
    let fused = fuse_cases(&prediction_sets(&test_preds), weights)?;
    sources.push(("final", compute_metrics(&fused, &test_labels, &schema)?));
    for (name, report) in &sources {
        reject_nan(name, report)?;
        print_warnings(report);
    }

    let named: Vec<(&str, &MetricsReport)> =
        sources.iter().map(|(n, r)| (*n, r)).collect();
    emit_table(
        &args.out,
        "accuracy",
        "exact-match accuracy per task (test split)",
        &accuracy_table(&named, &schema, false),
        &accuracy_table(&named, &schema, true),
    )?;
    emit_table(
        &args.out,
        "auc",
        "one-vs-rest AUC per scored category (test split)",
        &auc_table(&named, &schema, false),
        &auc_table(&named, &schema, true),
    )?;
    emit_table(
        &args.out,
        "melanoma",
        "melanoma-focused panel (test split)",
        &melanoma_panel(&named, &schema, false),
        &melanoma_panel(&named, &schema, true),
    )?;

    let mut manifest = RunManifest::new("eval");
    manifest.push("eval.tta", tta.to_string());
    manifest.push("eval.weights", weights_raw);
    manifest.push("eval.weights.chosen_by", chosen_by);
    let [wd, wc, wf] = weights.as_array();
    manifest.push("eval.weights.derm", wd.to_string());
    manifest.push("eval.weights.clin", wc.to_string());
    manifest.push("eval.weights.fusion", wf.to_string());
    manifest.push("eval.step", step.to_string());
    manifest.push("eval.objective", objective.as_str().to_string());
    manifest.push_input("checkpoint", &args.checkpoint)?;
    manifest.push_input("data", &args.data)?;
    for artifact in [
        "predictions_val.csv",
        "predictions_test.csv",
        "accuracy.txt",
        "accuracy.csv",
        "auc.txt",
        "auc.csv",
        "melanoma.txt",
        "melanoma.csv",
    ] {
        manifest.push_artifact(artifact, &args.out, artifact)?;
    }
    manifest.write(&args.out.join("manifest.txt"))?;
    Ok(())
}
