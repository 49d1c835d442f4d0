//! Label schema, synthetic two-modality image generation, and dataset I/O.
//!
//! Each case carries a clinical and a dermoscopic image of the same lesion
//! plus eight categorical labels: a five-way diagnosis and the seven
//! checklist criteria used for melanoma scoring.

mod schema;
mod synth;

pub use schema::{TaskSchema, MELANOMA_FOCUS};
pub use synth::{synth_generate, SynthConfig};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Which partition a case belongs to, when assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Ingest(format!("unknown split tag '{}'", other))),
        }
    }
}

/// One labelled case: paired images plus one category index per task.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    pub clin: Tensor,
    pub derm: Tensor,
    pub labels: Vec<usize>,
    pub split: Option<Split>,
}

impl CaseRecord {
    pub fn validate(&self, schema: &TaskSchema) -> Result<()> {
        if self.labels.len() != schema.n_tasks() {
            return Err(Error::Ingest(format!(
                "case {}: expected {} labels, got {}",
                self.id,
                schema.n_tasks(),
                self.labels.len()
            )));
        }
        for (t, &lab) in self.labels.iter().enumerate() {
            let k = schema.n_categories(t);
            if lab >= k {
                return Err(Error::Ingest(format!(
                    "case {}: label {} out of range for task {} ({} categories)",
                    self.id,
                    lab,
                    schema.task_name(t),
                    k
                )));
            }
        }
        for (name, img) in [("clinical", &self.clin), ("dermoscopic", &self.derm)] {
            let s = img.shape();
            if s.len() != 3 || s[2] != 3 {
                return Err(Error::Ingest(format!(
                    "case {}: {} image must be [H, W, 3], got {:?}",
                    self.id, name, s
                )));
            }
        }
        Ok(())
    }
}

/// Index assignments produced by a dataset split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions cases into train/val/test.
///
/// If every record already carries a split tag the tags win and the ratios
/// are ignored; if none do, a seeded shuffle is partitioned by the ratios.
/// A mixture of tagged and untagged records is rejected.
pub fn split_records(
    records: &[CaseRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitIndices> {
    if records.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let tagged = records.iter().filter(|r| r.split.is_some()).count();
    if tagged == records.len() {
        let mut out = SplitIndices { train: vec![], val: vec![], test: vec![] };
        for (i, r) in records.iter().enumerate() {
            match r.split.unwrap() {
                Split::Train => out.train.push(i),
                Split::Val => out.val.push(i),
                Split::Test => out.test.push(i),
            }
        }
        return Ok(out);
    }
    if tagged > 0 {
        return Err(Error::Ingest(format!(
            "{} of {} records carry split tags; tag all or none",
            tagged,
            records.len()
        )));
    }

    let (rt, rv, rs) = ratios;
    for r in [rt, rv, rs] {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::Config(format!("split ratios must be positive, got {:?}", ratios)));
        }
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios must sum to 1, got {:?}", ratios)));
    }

    let n = records.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Streams::new(seed).derive("split").rng("shuffle");
    // Fisher-Yates, spelled out so the order is pinned to this RNG stream.
    use rand::Rng;
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let n_train = (rt * n as f64).round() as usize;
    let n_val = (rv * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Config(format!(
            "split of {} cases by {:?} leaves an empty partition",
            n, ratios
        )));
    }
    Ok(SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    })
}

const INDEX_COLUMNS: [&str; 12] = [
    "case_id", "clinical_path", "derm_path", "diag", "pn", "str", "pig", "rs", "dag", "bwv", "vs",
    "split",
];

/// Writes a dataset directory: `index.csv` plus one image tensor file per
/// modality per case under `images/`. Paths in the index are relative to
/// `dir`. Output bytes depend only on the records, so identical inputs give
/// identical files.
pub fn write_dataset(dir: &Path, records: &[CaseRecord], schema: &TaskSchema) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let index_path = dir.join("index.csv");
    let mut wtr = csv::Writer::from_path(&index_path).map_err(|e| {
        Error::Ingest(format!("cannot write {}: {}", index_path.display(), e))
    })?;
    wtr.write_record(INDEX_COLUMNS).map_err(|e| Error::Ingest(e.to_string()))?;
    for r in records {
        r.validate(schema)?;
        let clin_rel = format!("images/{}_clin.t64", r.id);
        let derm_rel = format!("images/{}_derm.t64", r.id);
        write_tensor(&dir.join(&clin_rel), &r.clin)?;
        write_tensor(&dir.join(&derm_rel), &r.derm)?;
        let mut row: Vec<String> = vec![r.id.clone(), clin_rel, derm_rel];
        for (t, &lab) in r.labels.iter().enumerate() {
            row.push(schema.category_name(t, lab).to_string());
        }
        row.push(r.split.map(|s| s.as_str().to_string()).unwrap_or_default());
        wtr.write_record(&row).map_err(|e| Error::Ingest(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

/// Loads a dataset directory written by [`write_dataset`] (or laid out the
/// same way by hand). Every image referenced by the index must exist and
/// parse; labels must be valid category names for their task.
pub fn load_dataset(dir: &Path, schema: &TaskSchema) -> Result<Vec<CaseRecord>> {
    let index_path = dir.join("index.csv");
    let mut rdr = csv::Reader::from_path(&index_path).map_err(|e| {
        Error::Ingest(format!("cannot read {}: {}", index_path.display(), e))
    })?;
    let headers = rdr.headers().map_err(|e| Error::Ingest(e.to_string()))?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != INDEX_COLUMNS {
        return Err(Error::Ingest(format!(
            "index header mismatch: expected {:?}, got {:?}",
            INDEX_COLUMNS, got
        )));
    }
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Ingest(format!("index row {}: {}", line + 2, e)))?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(Error::Ingest(format!("index row {}: empty case_id", line + 2)));
        }
        if let Some(prev) = seen.insert(id.clone(), line + 2) {
            return Err(Error::Ingest(format!(
                "index row {}: duplicate case_id '{}' (first seen on row {})",
                line + 2,
                id,
                prev
            )));
        }
        let clin = read_image(dir, field(1), &id, "clinical")?;
        let derm = read_image(dir, field(2), &id, "dermoscopic")?;
        let mut labels = Vec::with_capacity(schema.n_tasks());
        for t in 0..schema.n_tasks() {
            let name = field(3 + t);
            let idx = schema.category_index(t, name).ok_or_else(|| {
                Error::Ingest(format!(
                    "index row {}: '{}' is not a {} category",
                    line + 2,
                    name,
                    schema.task_name(t)
                ))
            })?;
            labels.push(idx);
        }
        let split_field = field(11);
        let split =
            if split_field.is_empty() { None } else { Some(Split::parse(split_field)?) };
        let record = CaseRecord { id, clin, derm, labels, split };
        record.validate(schema)?;
        out.push(record);
    }
    Ok(out)
}

fn read_image(dir: &Path, rel: &str, id: &str, which: &str) -> Result<Tensor> {
    if rel.is_empty() {
        return Err(Error::Ingest(format!("case {}: missing {} image path", id, which)));
    }
    let path: PathBuf = dir.join(rel);
    read_tensor(&path)
}
