//! The eight-task label schema: five-way diagnosis plus the seven-point
//! checklist criteria, with empirical category counts used as sampling
//! marginals by the synthetic generator.

/// (task index, category index) pairs for the melanoma-oriented summary
/// panel: the diagnosis's melanoma category plus the seven checklist
/// findings that contribute to the melanoma score.
pub const MELANOMA_FOCUS: [(usize, usize, &str); 8] = [
    (0, 2, "DIAG:MEL"),
    (1, 2, "PN:ATP"),
    (2, 2, "STR:IR"),
    (3, 2, "PIG:IR"),
    (4, 1, "RS:PRS"),
    (5, 2, "DAG:IR"),
    (6, 1, "BWV:PRS"),
    (7, 2, "VS:IR"),
];

struct TaskDef {
    name: &'static str,
    categories: &'static [&'static str],
    counts: &'static [u64],
    /// Categories that mean "criterion absent" and are skipped by the
    /// per-category metric summary (they dominate the marginals and would
    /// drown the findings of interest).
    unscored: &'static [usize],
}

const TASKS: [TaskDef; 8] = [
    TaskDef {
        name: "diag",
        categories: &["BCC", "NEV", "MEL", "MISC", "SK"],
        counts: &[42, 575, 252, 97, 45],
        unscored: &[],
    },
    TaskDef {
        name: "pn",
        categories: &["ABS", "TYP", "ATP"],
        counts: &[400, 381, 230],
        unscored: &[0],
    },
    TaskDef {
        name: "str",
        categories: &["ABS", "REG", "IR"],
        counts: &[653, 107, 251],
        unscored: &[0],
    },
    TaskDef {
        name: "pig",
        categories: &["ABS", "REG", "IR"],
        counts: &[588, 118, 305],
        unscored: &[0],
    },
    TaskDef { name: "rs", categories: &["ABS", "PRS"], counts: &[758, 253], unscored: &[0] },
    TaskDef {
        name: "dag",
        categories: &["ABS", "REG", "IR"],
        counts: &[229, 334, 448],
        unscored: &[0],
    },
    TaskDef { name: "bwv", categories: &["ABS", "PRS"], counts: &[816, 195], unscored: &[0] },
    TaskDef { name: "vs", categories: &["ABS", "REG", "IR"], counts: &[833, 117, 71], unscored: &[0] },
];

/// The fixed eight-task schema. Construction checks internal consistency
/// once; everything downstream trusts the indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchema {
    _guard: (),
}

impl TaskSchema {
    pub fn seven_point() -> Self {
        for t in &TASKS {
            assert!(t.categories.len() >= 2, "task {} needs at least two categories", t.name);
            assert_eq!(
                t.categories.len(),
                t.counts.len(),
                "task {}: counts/categories length mismatch",
                t.name
            );
            assert!(t.counts.iter().all(|&c| c > 0), "task {}: zero marginal count", t.name);
            assert!(
                t.unscored.iter().all(|&u| u < t.categories.len()),
                "task {}: unscored index out of range",
                t.name
            );
        }
        TaskSchema { _guard: () }
    }

    pub fn n_tasks(&self) -> usize {
        TASKS.len()
    }

    pub fn task_name(&self, task: usize) -> &'static str {
        TASKS[task].name
    }

    pub fn task_index(&self, name: &str) -> Option<usize> {
        TASKS.iter().position(|t| t.name == name)
    }

    pub fn n_categories(&self, task: usize) -> usize {
        TASKS[task].categories.len()
    }

    /// Category counts per task, in task order.
    pub fn category_counts(&self) -> Vec<usize> {
        TASKS.iter().map(|t| t.categories.len()).collect()
    }

    /// Total number of categories across all tasks.
    pub fn total_categories(&self) -> usize {
        TASKS.iter().map(|t| t.categories.len()).sum()
    }

    pub fn category_name(&self, task: usize, cat: usize) -> &'static str {
        TASKS[task].categories[cat]
    }

    pub fn category_index(&self, task: usize, name: &str) -> Option<usize> {
        TASKS[task].categories.iter().position(|&c| c == name)
    }

    /// Short "TASK:CAT" label for report columns.
    pub fn category_label(&self, task: usize, cat: usize) -> String {
        format!("{}:{}", TASKS[task].name.to_uppercase(), TASKS[task].categories[cat])
    }

    /// Empirical marginal distribution for one task, normalised to sum 1.
    pub fn marginals(&self, task: usize) -> Vec<f64> {
        let t = &TASKS[task];
        let total: u64 = t.counts.iter().sum();
        t.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }

    pub fn all_marginals(&self) -> Vec<Vec<f64>> {
        (0..self.n_tasks()).map(|t| self.marginals(t)).collect()
    }

    /// Accuracy of always predicting the most common category.
    pub fn majority_rate(&self, task: usize) -> f64 {
        let m = self.marginals(task);
        m.iter().cloned().fold(0.0, f64::max)
    }

    /// (task, category) pairs that metric summaries aggregate over:
    /// everything except the "absent" categories.
    pub fn scored_categories(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ti, t) in TASKS.iter().enumerate() {
            for ci in 0..t.categories.len() {
                if !t.unscored.contains(&ci) {
                    out.push((ti, ci));
                }
            }
        }
        out
    }
}
