//! The five subcommands plus the plumbing they share.

pub mod ablate;
pub mod eval;
pub mod gen_data;
pub mod params;
pub mod train;

use std::path::Path;

use skinfuse::data::{CaseRecord, SplitIndices, TaskSchema};
use skinfuse::eval::{FusionWeights, MetricsReport, SearchObjective};
use skinfuse::model::{Branch, Model, PredictionSet};
use skinfuse::train::{default_tta_plans, tta_predict, AugmentPlan};
use skinfuse::{Error, Result};

pub fn parse_objective(raw: &str) -> Result<SearchObjective> {
    SearchObjective::parse(raw).ok_or_else(|| {
        Error::Config(format!("unknown objective '{raw}' (expected avg-acc or avg-auc)"))
    })
}

/// Image size: either one integer (square) or `HxW`.
pub fn parse_size(raw: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("bad size '{raw}' (expected an integer or HxW)"));
    match raw.split_once('x') {
        Some((h, w)) => {
            Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
        }
        None => {
            let s: usize = raw.trim().parse().map_err(|_| bad())?;
            Ok((s, s))
        }
    }
}

/// Split ratios as `train,val,test`.
pub fn parse_ratios(raw: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<&str> = raw.split(',').collect();
    let bad = || Error::Config(format!("bad split '{raw}' (expected train,val,test ratios)"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.trim().parse().map_err(|_| bad())?;
    }
    Ok((v[0], v[1], v[2]))
}

/// Final-fusion weights: `search` or an explicit `derm,clin,fusion` triple
/// (normalised, so `2,1,1` is accepted).
pub enum WeightsChoice {
    Search,
    Fixed(FusionWeights),
}

pub fn parse_weights(raw: &str) -> Result<WeightsChoice> {
    if raw == "search" {
        return Ok(WeightsChoice::Search);
    }
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "bad weights '{raw}' (expected 'search' or derm,clin,fusion)"
        )));
    }
    let mut v = [0.0f64; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad weight '{p}' in '{raw}'")))?;
    }
    match FusionWeights::normalized(v[0], v[1], v[2]) {
        Ok(w) => Ok(WeightsChoice::Fixed(w)),
        Err(e) => Err(Error::Config(e.to_string())),
    }
}

/// Requires every record to carry a split tag (datasets from `gen-data`
/// always do) and returns the index partition.
pub fn tagged_split(records: &[CaseRecord]) -> Result<SplitIndices> {
    let mut idx = SplitIndices { train: vec![], val: vec![], test: vec![] };
    for (i, r) in records.iter().enumerate() {
        match r.split {
            Some(skinfuse::data::Split::Train) => idx.train.push(i),
            Some(skinfuse::data::Split::Val) => idx.val.push(i),
            Some(skinfuse::data::Split::Test) => idx.test.push(i),
            None => {
                return Err(Error::Config(format!(
                    "case {} carries no split tag; regenerate the dataset with gen-data \
                     or add a split column",
                    r.id
                )))
            }
        }
    }
    for (name, part) in [("train", &idx.train), ("val", &idx.val), ("test", &idx.test)] {
        if part.is_empty() {
            return Err(Error::Config(format!("dataset has an empty {name} split")));
        }
    }
    Ok(idx)
}

/// All images must share one [H, W, 3] shape; returns (H, W).
pub fn image_dims(records: &[CaseRecord]) -> Result<(usize, usize)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Config("dataset holds no cases".into()))?;
    let shape = first.clin.shape().to_vec();
    for r in records {
        for img in [&r.clin, &r.derm] {
            if img.shape() != shape.as_slice() {
                return Err(Error::Ingest(format!(
                    "case {}: image shape {:?} differs from {:?}",
                    r.id,
                    img.shape(),
                    shape
                )));
            }
        }
    }
    Ok((shape[0], shape[1]))
}

pub fn tta_plans(tta: bool) -> Vec<AugmentPlan> {
    if tta {
        default_tta_plans()
    } else {
        vec![AugmentPlan::identity()]
    }
}

/// Predicts every indexed case, in index order.
pub fn predict_cases(
    model: &Model,
    records: &[CaseRecord],
    indices: &[usize],
    plans: &[AugmentPlan],
) -> Result<Vec<(String, PredictionSet)>> {
    indices
        .iter()
        .map(|&i| {
            let r = &records[i];
            Ok((r.id.clone(), tta_predict(model, &r.clin, &r.derm, plans)?))
        })
        .collect()
}

pub fn labels_of(records: &[CaseRecord], indices: &[usize]) -> Vec<Vec<usize>> {
    indices.iter().map(|&i| records[i].labels.clone()).collect()
}

pub fn branch_probs(preds: &[(String, PredictionSet)], branch: Branch) -> Vec<Vec<Vec<f64>>> {
    preds.iter().map(|(_, p)| p.branch(branch).to_vec()).collect()
}

pub fn prediction_sets(preds: &[(String, PredictionSet)]) -> Vec<PredictionSet> {
    preds.iter().map(|(_, p)| p.clone()).collect()
}

/// Guards the exit-code contract: a NaN anywhere in a report is a runtime
/// failure, never silently written into tables.
pub fn reject_nan(label: &str, report: &MetricsReport) -> Result<()> {
    let mut all = vec![report.avg_accuracy];
    all.extend(&report.task_accuracy);
    if let Some(a) = report.avg_auc {
        all.push(a);
    }
    for row in &report.categories {
        for m in row {
            all.extend([m.auc, m.precision, m.sensitivity, m.specificity].into_iter().flatten());
        }
    }
    if all.iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("metrics", format!("NaN metric in the {label} report")));
    }
    Ok(())
}

pub fn print_warnings(report: &MetricsReport) {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Loads a dataset directory and its split, shared by train/eval/ablate.
pub fn load_split_dataset(
    data: &Path,
    schema: &TaskSchema,
) -> Result<(Vec<CaseRecord>, SplitIndices, (usize, usize))> {
    if !data.join("index.csv").is_file() {
        return Err(Error::Config(format!(
            "dataset directory {} not found (no index.csv)",
            data.display()
        )));
    }
    let records = skinfuse::data::load_dataset(data, schema)?;
    let idx = tagged_split(&records)?;
    let dims = image_dims(&records)?;
    Ok((records, idx, dims))
}
