//! Prediction dumps: a flat CSV holding every branch probability for every
//! case, so evaluation and weight search can run over immutable artifacts.
//!
//! Rows appear in canonical order — case, then branch (derm, clin, fusion),
//! then task, then category — and probabilities are written with enough
//! digits to round-trip `f64` exactly, so a dump read back in is bit-equal
//! to the predictions that produced it.

use std::path::Path;

use crate::data::TaskSchema;
use crate::error::{Error, Result};
use crate::model::{Branch, PredictionSet};

pub const DUMP_COLUMNS: [&str; 5] = ["case_id", "branch", "task", "category", "probability"];

/// Writes one row per (case, branch, task, category) probability.
pub fn write_prediction_dump(
    path: &Path,
    cases: &[(String, PredictionSet)],
    schema: &TaskSchema,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    w.write_record(DUMP_COLUMNS).map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    for (id, preds) in cases {
        for branch in Branch::ALL {
            let per_task = preds.branch(branch);
            if per_task.len() != schema.n_tasks() {
                return Err(Error::Contract(format!(
                    "case {id}: branch {} has {} tasks, schema has {}",
                    branch.as_str(),
                    per_task.len(),
                    schema.n_tasks()
                )));
            }
            for (t, probs) in per_task.iter().enumerate() {
                if probs.len() != schema.n_categories(t) {
                    return Err(Error::Contract(format!(
                        "case {id}: task {} has {} categories, schema has {}",
                        schema.task_name(t),
                        probs.len(),
                        schema.n_categories(t)
                    )));
                }
                for (c, &p) in probs.iter().enumerate() {
                    w.write_record([
                        id.as_str(),
                        branch.as_str(),
                        schema.task_name(t),
                        schema.category_name(t, c),
                        &format!("{p}"),
                    ])
                    .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a dump back, enforcing the canonical row order so a malformed or
/// truncated file fails loudly with a row number.
pub fn read_prediction_dump(
    path: &Path,
    schema: &TaskSchema,
) -> Result<Vec<(String, PredictionSet)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
    {
        let headers = rdr.headers().map_err(|e| Error::Ingest(format!("{}: {e}", path.display())))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != DUMP_COLUMNS {
            return Err(Error::Ingest(format!(
                "{}: header {:?} does not match {:?}",
                path.display(),
                got,
                DUMP_COLUMNS
            )));
        }
    }

    let mut rows = rdr.records().enumerate();
    let mut out: Vec<(String, PredictionSet)> = Vec::new();
    let bad = |row: usize, msg: String| -> Error {
        // +2: one for the header line, one for 1-based numbering.
        Error::Ingest(format!("{} row {}: {}", path.display(), row + 2, msg))
    };

    'cases: loop {
        let mut preds =
            PredictionSet { derm: Vec::new(), clin: Vec::new(), fusion: Vec::new() };
        let mut case_id: Option<String> = None;
        for branch in Branch::ALL {
            let mut per_task: Vec<Vec<f64>> = Vec::with_capacity(schema.n_tasks());
            for t in 0..schema.n_tasks() {
                let mut probs: Vec<f64> = Vec::with_capacity(schema.n_categories(t));
                for c in 0..schema.n_categories(t) {
                    let (row, record) = match rows.next() {
                        Some((row, Ok(record))) => (row, record),
                        Some((row, Err(e))) => return Err(bad(row, e.to_string())),
                        None if branch == Branch::Derm && t == 0 && c == 0 => break 'cases,
                        None => {
                            return Err(Error::Ingest(format!(
                                "{}: file ends mid-case (expected {} {} {})",
                                path.display(),
                                branch.as_str(),
                                schema.task_name(t),
                                schema.category_name(t, c)
                            )))
                        }
                    };
                    let fields: Vec<&str> = record.iter().collect();
                    if fields.len() != DUMP_COLUMNS.len() {
                        return Err(bad(row, format!("expected 5 fields, got {}", fields.len())));
                    }
                    let id = case_id.get_or_insert_with(|| fields[0].to_string());
                    if fields[0] != id {
                        return Err(bad(row, format!("case changed mid-record: {id} to {}", fields[0])));
                    }
                    if fields[1] != branch.as_str() {
                        return Err(bad(
                            row,
                            format!("expected branch {}, got {}", branch.as_str(), fields[1]),
                        ));
                    }
                    if fields[2] != schema.task_name(t) {
                        return Err(bad(
                            row,
                            format!("expected task {}, got {}", schema.task_name(t), fields[2]),
                        ));
                    }
                    if fields[3] != schema.category_name(t, c) {
                        return Err(bad(
                            row,
                            format!(
                                "expected category {}, got {}",
                                schema.category_name(t, c),
                                fields[3]
                            ),
                        ));
                    }
                    let p: f64 = fields[4]
                        .parse()
                        .map_err(|e| bad(row, format!("bad probability {:?}: {e}", fields[4])))?;
                    if !(0.0..=1.0).contains(&p) {
                        return Err(bad(row, format!("probability {p} outside [0, 1]")));
                    }
                    probs.push(p);
                }
                per_task.push(probs);
            }
            match branch {
                Branch::Derm => preds.derm = per_task,
                Branch::Clin => preds.clin = per_task,
                Branch::Fusion => preds.fusion = per_task,
            }
        }
        let id = case_id.expect("a full case was read");
        if out.iter().any(|(existing, _)| *existing == id) {
            return Err(Error::Ingest(format!("{}: duplicate case id {id}", path.display())));
        }
        out.push((id, preds));
    }

    if out.is_empty() {
        return Err(Error::Ingest(format!("{}: dump holds no cases", path.display())));
    }
    Ok(out)
}
