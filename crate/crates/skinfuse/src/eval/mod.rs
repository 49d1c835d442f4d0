//! Prediction fusion and the evaluation metric suite.
//!
//! The model emits three probability vectors per task (dermoscopic branch,
//! clinical branch, fused branch). Final predictions are a weighted average
//! of the three under convex weights, with the weights either supplied or
//! found by exhaustive grid search on a validation split. Metrics follow the
//! usual multi-label protocol: exact-match accuracy per task, and one-vs-rest
//! AUC / precision / sensitivity / specificity per category, averaged over
//! the scored categories.

pub mod dump;
pub mod report;

use crate::data::TaskSchema;
use crate::error::{Error, Result};
use crate::model::PredictionSet;

/// Convex weights over the three prediction branches (dermoscopic,
/// clinical, fused). Nonnegative, summing to one within 1e-12.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    derm: f64,
    clin: f64,
    fusion: f64,
}

impl FusionWeights {
    pub fn new(derm: f64, clin: f64, fusion: f64) -> Result<Self> {
        for (name, v) in [("derm", derm), ("clin", clin), ("fusion", fusion)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!(
                    "fusion weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        let sum = derm + clin + fusion;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!(
                "fusion weights must sum to 1 (got {sum}); pass them through \
                 FusionWeights::normalized to rescale"
            )));
        }
        Ok(FusionWeights { derm, clin, fusion })
    }

    /// Builds weights from any nonnegative triple with a positive sum by
    /// dividing through by the sum.
    pub fn normalized(derm: f64, clin: f64, fusion: f64) -> Result<Self> {
        for (name, v) in [("derm", derm), ("clin", clin), ("fusion", fusion)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Contract(format!(
                    "fusion weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        let sum = derm + clin + fusion;
        if sum <= 0.0 {
            return Err(Error::Contract("fusion weights must not all be zero".into()));
        }
        // Renormalise the rounded quotients so the invariant holds exactly
        // enough for `new` even when sum is not a power of two.
        let (d, c, f) = (derm / sum, clin / sum, fusion / sum);
        let s2 = d + c + f;
        FusionWeights::new(d / s2, c / s2, f / s2)
    }

    pub fn derm(&self) -> f64 {
        self.derm
    }

    pub fn clin(&self) -> f64 {
        self.clin
    }

    pub fn fusion(&self) -> f64 {
        self.fusion
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.derm, self.clin, self.fusion]
    }
}

impl std::fmt::Display for FusionWeights {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {})", self.derm, self.clin, self.fusion)
    }
}

/// Weighted average of the three branches' probability vectors, one fused
/// vector per task. A weight of exactly one on a branch reproduces that
/// branch bit for bit.
pub fn weighted_fuse(preds: &PredictionSet, w: FusionWeights) -> Result<Vec<Vec<f64>>> {
    if preds.derm.len() != preds.clin.len() || preds.derm.len() != preds.fusion.len() {
        return Err(Error::shape(
            "weighted_fuse",
            format!(
                "branches disagree on task count: derm {}, clin {}, fusion {}",
                preds.derm.len(),
                preds.clin.len(),
                preds.fusion.len()
            ),
        ));
    }
    let mut out = Vec::with_capacity(preds.derm.len());
    for (t, d) in preds.derm.iter().enumerate() {
        let (c, f) = (&preds.clin[t], &preds.fusion[t]);
        if d.len() != c.len() || d.len() != f.len() {
            return Err(Error::shape(
                "weighted_fuse",
                format!("task {t}: category counts differ ({}, {}, {})", d.len(), c.len(), f.len()),
            ));
        }
        out.push(
            (0..d.len())
                .map(|k| w.derm * d[k] + w.clin * c[k] + w.fusion * f[k])
                .collect::<Vec<f64>>(),
        );
    }
    Ok(out)
}

/// Fuses every case in a prediction list under one weight triple.
pub fn fuse_cases(preds: &[PredictionSet], w: FusionWeights) -> Result<Vec<Vec<Vec<f64>>>> {
    preds.iter().map(|p| weighted_fuse(p, w)).collect()
}

/// All weight triples on the 2-simplex whose coordinates are multiples of
/// `step`, in ascending lexicographic order of (derm, clin, fusion). The
/// step must divide 1; a step of 0.1 yields 66 triples.
pub fn simplex_grid(step: f64) -> Result<Vec<FusionWeights>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Contract(format!("grid step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!("grid step must divide 1, got {step}")));
    }
    let n = n as u32;
    let mut grid = Vec::with_capacity(((n + 1) * (n + 2) / 2) as usize);
    for i in 0..=n {
        for j in 0..=(n - i) {
            let k = n - i - j;
            grid.push(FusionWeights::new(
                f64::from(i) / f64::from(n),
                f64::from(j) / f64::from(n),
                f64::from(k) / f64::from(n),
            )?);
        }
    }
    Ok(grid)
}

/// What the validation-set weight search maximises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchObjective {
    /// Mean exact-match accuracy over the tasks (the default).
    AvgAcc,
    /// Mean one-vs-rest AUC over the scored categories.
    AvgAuc,
}

impl SearchObjective {
    pub fn as_str(self) -> &'static str {
        match self {
            SearchObjective::AvgAcc => "avg-acc",
            SearchObjective::AvgAuc => "avg-auc",
        }
    }

    pub fn parse(s: &str) -> Option<SearchObjective> {
        match s {
            "avg-acc" => Some(SearchObjective::AvgAcc),
            "avg-auc" => Some(SearchObjective::AvgAuc),
            _ => None,
        }
    }
}

/// Exhaustive grid search for the fusion weights maximising the objective
/// on a validation set. Ties break toward the lexicographically smallest
/// (derm, clin, fusion) triple. Returns the winner and its objective value.
pub fn weight_search(
    preds: &[PredictionSet],
    labels: &[Vec<usize>],
    schema: &TaskSchema,
    step: f64,
    objective: SearchObjective,
) -> Result<(FusionWeights, f64)> {
    if preds.is_empty() {
        return Err(Error::Contract("weight search needs a nonempty validation set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "weight search got {} prediction sets but {} label rows",
            preds.len(),
            labels.len()
        )));
    }
    let mut best: Option<(FusionWeights, f64)> = None;
    for w in simplex_grid(step)? {
        let fused = fuse_cases(preds, w)?;
        let value = match objective {
            SearchObjective::AvgAcc => compute_metrics(&fused, labels, schema)?.avg_accuracy,
            SearchObjective::AvgAuc => compute_metrics(&fused, labels, schema)?
                .avg_auc
                .unwrap_or(f64::NEG_INFINITY),
        };
        // Strictly-greater keeps the first (lexicographically smallest) triple.
        if best.map_or(true, |(_, b)| value > b) {
            best = Some((w, value));
        }
    }
    Ok(best.expect("grid is never empty"))
}

/// One-vs-rest area under the ROC curve by the rank statistic with midranks
/// for ties. Returns `None` when either class is absent. Scores must be
/// finite. Agrees exactly with the O(n^2) pairwise count.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc_binary: scores and labels must pair up");
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Midranks: tied scores share the average of their 1-based rank range.
    // Ranks are integers or half-integers, so the sums below are exact.
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let p = n_pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n_neg as f64))
}

/// The O(n^2) definition of `auc_binary`, kept public so tests and the
/// acceptance suite can cross-check the rank method against it.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0u64;
    let mut ties = 0u64;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                wins += 1;
            } else if p == q {
                ties += 1;
            }
        }
    }
    Some((wins as f64 + ties as f64 / 2.0) / (pos.len() as f64 * neg.len() as f64))
}

/// One-vs-rest confusion counts for a single category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(pred: &[usize], truth: &[usize], category: usize) -> ConfusionCounts {
        assert_eq!(pred.len(), truth.len(), "confusion counts need paired predictions");
        let mut c = ConfusionCounts {
            true_positive: 0,
            false_positive: 0,
            false_negative: 0,
            true_negative: 0,
        };
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == category, t == category) {
                (true, true) => c.true_positive += 1,
                (true, false) => c.false_positive += 1,
                (false, true) => c.false_negative += 1,
                (false, false) => c.true_negative += 1,
            }
        }
        c
    }

    /// TP / (TP + FP); `None` when the category is never predicted.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    /// TP / (TP + FN); `None` when the category never occurs.
    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// TN / (TN + FP); `None` when every case is positive.
    pub fn specificity(&self) -> Option<f64> {
        ratio(self.true_negative, self.true_negative + self.false_positive)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Index of the largest probability; the first index wins ties.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Metrics for one (task, category) pair. Undefined values (single-class
/// AUC, zero-denominator rates) are `None` and excluded from averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CategoryMetrics {
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// The full metric suite for one prediction source over one case set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Exact-match accuracy per task, in schema order.
    pub task_accuracy: Vec<f64>,
    /// Mean of `task_accuracy`.
    pub avg_accuracy: f64,
    /// Per-task, per-category metrics (all categories, scored or not).
    pub categories: Vec<Vec<CategoryMetrics>>,
    /// Mean AUC over the scored categories where it is defined; `None`
    /// when no scored category has both classes present.
    pub avg_auc: Option<f64>,
    /// One entry per scored category whose AUC had to be skipped.
    pub warnings: Vec<String>,
}

/// Computes the metric suite from per-case, per-task probability vectors.
pub fn compute_metrics(
    probs: &[Vec<Vec<f64>>],
    labels: &[Vec<usize>],
    schema: &TaskSchema,
) -> Result<MetricsReport> {
    if probs.is_empty() {
        return Err(Error::Contract("metrics need a nonempty evaluation set".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "metrics got {} probability rows but {} label rows",
            probs.len(),
            labels.len()
        )));
    }
    for (ci, (case, lab)) in probs.iter().zip(labels).enumerate() {
        if case.len() != schema.n_tasks() || lab.len() != schema.n_tasks() {
            return Err(Error::Contract(format!(
                "case {ci}: expected {} tasks, got {} probability vectors and {} labels",
                schema.n_tasks(),
                case.len(),
                lab.len()
            )));
        }
        for (t, v) in case.iter().enumerate() {
            if v.len() != schema.n_categories(t) {
                return Err(Error::Contract(format!(
                    "case {ci}, task {}: expected {} categories, got {}",
                    schema.task_name(t),
                    schema.n_categories(t),
                    v.len()
                )));
            }
            if v.iter().any(|p| !p.is_finite()) {
                return Err(Error::numeric(
                    "compute_metrics",
                    format!("case {ci}, task {}: non-finite probability", schema.task_name(t)),
                ));
            }
            if lab[t] >= schema.n_categories(t) {
                return Err(Error::Contract(format!(
                    "case {ci}, task {}: label {} out of range",
                    schema.task_name(t),
                    lab[t]
                )));
            }
        }
    }

    let n_cases = probs.len();
    let mut task_accuracy = Vec::with_capacity(schema.n_tasks());
    let mut categories = Vec::with_capacity(schema.n_tasks());
    for t in 0..schema.n_tasks() {
        let pred: Vec<usize> = probs.iter().map(|case| argmax(&case[t])).collect();
        let truth: Vec<usize> = labels.iter().map(|lab| lab[t]).collect();
        let hits = pred.iter().zip(&truth).filter(|(p, t)| p == t).count();
        task_accuracy.push(hits as f64 / n_cases as f64);

        let mut per_cat = Vec::with_capacity(schema.n_categories(t));
        for c in 0..schema.n_categories(t) {
            let scores: Vec<f64> = probs.iter().map(|case| case[t][c]).collect();
            let is_pos: Vec<bool> = truth.iter().map(|&l| l == c).collect();
            let counts = ConfusionCounts::from_predictions(&pred, &truth, c);
            per_cat.push(CategoryMetrics {
                auc: auc_binary(&scores, &is_pos),
                precision: counts.precision(),
                sensitivity: counts.sensitivity(),
                specificity: counts.specificity(),
            });
        }
        categories.push(per_cat);
    }

    let avg_accuracy = task_accuracy.iter().sum::<f64>() / task_accuracy.len() as f64;
    let mut defined = Vec::new();
    let mut warnings = Vec::new();
    for (t, c) in schema.scored_categories() {
        match categories[t][c].auc {
            Some(a) => defined.push(a),
            None => warnings.push(format!(
                "AUC undefined for {} (single class in the evaluation set); \
                 excluded from the average",
                schema.category_label(t, c)
            )),
        }
    }
    let avg_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };

    Ok(MetricsReport { task_accuracy, avg_accuracy, categories, avg_auc, warnings })
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_std needs at least one value");
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
