//! Table rendering for metric reports.
//!
//! Each table is built once as header plus string rows and can be rendered
//! two ways: aligned text for terminals (values rounded to four decimals)
//! and CSV for downstream tooling (values at full precision, so means can
//! be re-checked exactly). Undefined cells carry the `NA` marker in both.

use crate::data::{TaskSchema, MELANOMA_FOCUS};
use crate::error::{Error, Result};
use crate::eval::{mean_std, CategoryMetrics, MetricsReport};

/// Marker for metrics that are undefined on the evaluation set.
pub const ABSENT: &str = "NA";

/// A rendered table: one header row plus data rows of equal width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: Vec<String>) -> Table {
        Table { header, rows: Vec::new() }
    }

    fn push_row(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len(), "table rows must match the header");
        self.rows.push(row);
    }

    /// Space-aligned text: the first column is left-aligned, the rest right.
    pub fn text(&self) -> String {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for row in &self.rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.len());
            }
        }
        let mut out = String::new();
        for (r, row) in std::iter::once(&self.header).chain(self.rows.iter()).enumerate() {
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    out.push_str("  ");
                }
                if i == 0 {
                    out.push_str(&format!("{:<width$}", cell, width = widths[i]));
                } else {
                    out.push_str(&format!("{:>width$}", cell, width = widths[i]));
                }
            }
            // Trim the padding after the final column.
            while out.ends_with(' ') {
                out.pop();
            }
            out.push('\n');
            if r == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }

    /// CSV with the same cells at full precision.
    pub fn csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory csv write cannot fail");
        for row in &self.rows {
            w.write_record(row).expect("in-memory csv write cannot fail");
        }
        String::from_utf8(w.into_inner().expect("csv writer flush")).expect("csv is utf-8")
    }
}

fn text_cell(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:.4}"))
}

fn csv_cell(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x}"))
}

fn cell(v: Option<f64>, full_precision: bool) -> String {
    if full_precision {
        csv_cell(v)
    } else {
        text_cell(v)
    }
}

/// Mean of the defined entries, or `None` if all are absent.
fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

fn metric_field(m: &CategoryMetrics, which: &str) -> Option<f64> {
    match which {
        "AUC" => m.auc,
        "PRE" => m.precision,
        "SEN" => m.sensitivity,
        "SPE" => m.specificity,
        _ => unreachable!("unknown metric {which}"),
    }
}

/// One-vs-rest AUC per scored category (17 columns) plus the average, one
/// row per prediction source.
pub fn auc_table(
    sources: &[(&str, &MetricsReport)],
    schema: &TaskSchema,
    full_precision: bool,
) -> Table {
    let scored = schema.scored_categories();
    let mut header = vec!["source".to_string()];
    header.extend(scored.iter().map(|&(t, c)| schema.category_label(t, c)));
    header.push("AVG".to_string());
    let mut table = Table::new(header);
    for (name, report) in sources {
        let mut row = vec![name.to_string()];
        row.extend(scored.iter().map(|&(t, c)| cell(report.categories[t][c].auc, full_precision)));
        row.push(cell(report.avg_auc, full_precision));
        table.push_row(row);
    }
    table
}

/// Exact-match accuracy per task (8 columns) plus the average, one row per
/// prediction source.
pub fn accuracy_table(
    sources: &[(&str, &MetricsReport)],
    schema: &TaskSchema,
    full_precision: bool,
) -> Table {
    let mut header = vec!["source".to_string()];
    header.extend((0..schema.n_tasks()).map(|t| schema.task_name(t).to_uppercase()));
    header.push("AVG".to_string());
    let mut table = Table::new(header);
    for (name, report) in sources {
        let mut row = vec![name.to_string()];
        row.extend(report.task_accuracy.iter().map(|&a| cell(Some(a), full_precision)));
        row.push(cell(Some(report.avg_accuracy), full_precision));
        table.push_row(row);
    }
    table
}

/// The melanoma-oriented panel: the eight categories most indicative of
/// melanoma as columns, with AUC / PRE / SEN / SPE rows per source. The AVG
/// column is the mean of the defined cells in its row.
pub fn melanoma_panel(
    sources: &[(&str, &MetricsReport)],
    schema: &TaskSchema,
    full_precision: bool,
) -> Table {
    let mut header = vec!["source".to_string(), "metric".to_string()];
    header.extend(MELANOMA_FOCUS.iter().map(|&(t, c, _)| schema.category_label(t, c)));
    header.push("AVG".to_string());
    let mut table = Table::new(header);
    for (name, report) in sources {
        for which in ["AUC", "PRE", "SEN", "SPE"] {
            let values: Vec<Option<f64>> = MELANOMA_FOCUS
                .iter()
                .map(|&(t, c, _)| metric_field(&report.categories[t][c], which))
                .collect();
            let mut row = vec![name.to_string(), which.to_string()];
            row.extend(values.iter().map(|&v| cell(v, full_precision)));
            row.push(cell(mean_present(&values), full_precision));
            table.push_row(row);
        }
    }
    table
}

/// Aggregate table over repeated runs: one row per configuration with
/// `mean ± std` for average AUC and average accuracy, plus a parameter
/// count. Used by the ablation grid.
pub struct AblationRow {
    pub label: String,
    pub avg_auc: Vec<f64>,
    pub avg_acc: Vec<f64>,
    pub params: u64,
}

pub fn ablation_table(rows: &[AblationRow], full_precision: bool) -> Result<Table> {
    let header = ["config", "AVG AUC", "AVG ACC", "params"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    let mut table = Table::new(header);
    for row in rows {
        if row.avg_auc.is_empty() || row.avg_acc.is_empty() {
            return Err(Error::Contract(format!(
                "ablation row {} has no per-seed values",
                row.label
            )));
        }
        let (auc_m, auc_s) = mean_std(&row.avg_auc);
        let (acc_m, acc_s) = mean_std(&row.avg_acc);
        let fmt = |m: f64, s: f64| {
            if full_precision {
                format!("{m} ± {s}")
            } else {
                format!("{m:.4} ± {s:.4}")
            }
        };
        table.push_row(vec![
            row.label.clone(),
            fmt(auc_m, auc_s),
            fmt(acc_m, acc_s),
            row.params.to_string(),
        ]);
    }
    Ok(table)
}
