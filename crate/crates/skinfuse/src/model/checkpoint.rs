//! Checkpoints: a directory of tensor files plus a plain-text manifest
//! recording the config, the parameter audit and the tensor file map.
//! Writing is deterministic — the same model always produces the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, ParamAudit};
use crate::data::TaskSchema;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor};

const FORMAT_LINE: &str = "format = fusion-checkpoint-v1";

#[derive(Debug, Clone)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub audit: ParamAudit,
    /// (parameter name, path relative to the checkpoint dir), model order.
    pub tensors: Vec<(String, String)>,
}

fn tensor_file_name(param: &str) -> String {
    format!("tensors/{}.t64", param.replace('.', "_"))
}

pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    let tdir = dir.join("tensors");
    fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let audit = model.param_audit();
    let mut manifest = String::new();
    manifest.push_str(FORMAT_LINE);
    manifest.push_str("\n\n[config]\n");
    for (k, v) in model.config.to_kv() {
        manifest.push_str(&format!("{} = {}\n", k, v));
    }
    manifest.push_str("\n[audit]\n");
    for (k, v) in audit.lines() {
        manifest.push_str(&format!("{} = {}\n", k, v));
    }
    manifest.push_str("\n[tensors]\n");
    for (name, tensor) in model.named_params() {
        let rel = tensor_file_name(&name);
        write_tensor(&dir.join(&rel), tensor)?;
        manifest.push_str(&format!("{} = {}\n", name, rel));
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join("manifest.txt");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(FORMAT_LINE) {
        return Err(Error::Ingest(format!(
            "{}: not a checkpoint manifest (bad format line)",
            mpath.display()
        )));
    }
    let mut section = String::new();
    let mut config_kv = BTreeMap::new();
    let mut audit_kv = BTreeMap::new();
    let mut tensors = Vec::new();
    for (ln, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            section = name.to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Ingest(format!(
                "{}: line {}: expected 'key = value', got '{}'",
                mpath.display(),
                ln + 2,
                line
            )));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        match section.as_str() {
            "config" => {
                config_kv.insert(k, v);
            }
            "audit" => {
                audit_kv.insert(k, v);
            }
            "tensors" => tensors.push((k, v)),
            other => {
                return Err(Error::Ingest(format!(
                    "{}: line {}: unknown section '{}'",
                    mpath.display(),
                    ln + 2,
                    other
                )));
            }
        }
    }
    let config = ModelConfig::from_kv(&config_kv)?;
    let audit_num = |k: &str| -> Result<u64> {
        audit_kv
            .get(k)
            .ok_or_else(|| Error::Ingest(format!("manifest audit missing '{}'", k)))?
            .parse::<u64>()
            .map_err(|_| Error::Ingest(format!("manifest audit '{}' is not a number", k)))
    };
    let audit = ParamAudit {
        clin_backbone: audit_num("clin_backbone")?,
        derm_backbone: audit_num("derm_backbone")?,
        attention: audit_num("attention")?,
        alignment: audit_num("alignment")?,
        heads: audit_num("heads")?,
        total: audit_num("total")?,
    };
    Ok(CheckpointManifest { config, audit, tensors })
}

pub fn load_checkpoint(dir: &Path, schema: &TaskSchema) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let mut model = Model::build(&manifest.config, schema, 0)?;
    if model.param_audit() != manifest.audit {
        return Err(Error::Ingest(format!(
            "{}: audit does not match the configured architecture: \
             manifest says {} parameters, config builds {}",
            dir.display(),
            manifest.audit.total,
            model.param_audit().total
        )));
    }
    let files: BTreeMap<&str, &str> =
        manifest.tensors.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    if files.len() != manifest.tensors.len() {
        return Err(Error::Ingest("manifest lists a tensor twice".into()));
    }
    let mut loaded = 0usize;
    for (name, slot) in model.named_params_mut() {
        let rel = files.get(name.as_str()).ok_or_else(|| {
            Error::Ingest(format!("checkpoint is missing tensor '{}'", name))
        })?;
        let t = read_tensor(&dir.join(rel))?;
        if t.shape() != slot.shape() {
            return Err(Error::Ingest(format!(
                "tensor '{}': expected shape {:?}, file has {:?}",
                name,
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t.with_requires_grad();
        loaded += 1;
    }
    if loaded != files.len() {
        return Err(Error::Ingest(format!(
            "checkpoint lists {} tensors but the architecture has {}",
            files.len(),
            loaded
        )));
    }
    Ok(model)
}
