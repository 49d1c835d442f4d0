//! Model configuration: backbone shapes, framework choice, fusion block and
//! attention placement, plus a flat key=value serialisation used by
//! checkpoints and run manifests.

use std::collections::BTreeMap;

use crate::blocks::FusionKind;
use crate::error::{Error, Result};

/// Whether the two backbones are twins or deliberately unequal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framework {
    /// Symmetric: both modalities get the same (heavy) backbone.
    Sff,
    /// Asymmetric: the clinical modality gets a strictly smaller backbone.
    Aff,
}

impl Framework {
    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Sff => "sff",
            Framework::Aff => "aff",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sff" => Ok(Framework::Sff),
            "aff" => Ok(Framework::Aff),
            other => Err(Error::Config(format!("unknown framework '{}'", other))),
        }
    }
}

/// Shape of one convolutional backbone. Stage `i` opens with a 3x3 conv of
/// stride `strides[i]` to `widths[i]` channels, followed by `depths[i] - 1`
/// unit-stride 3x3 convs at the same width; after the last stage a global
/// average pool and a linear map produce an `embed`-dimensional vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub strides: Vec<usize>,
    pub embed: usize,
}

impl BackboneConfig {
    /// Small backbone for the weaker (clinical) modality.
    pub fn toy_light() -> Self {
        BackboneConfig {
            widths: vec![4, 12, 24, 32],
            depths: vec![1, 1, 2, 2],
            strides: vec![2, 2, 2, 2],
            embed: 32,
        }
    }

    /// Large backbone for the dermoscopic modality (and both sides of the
    /// symmetric framework). Depth is concentrated in late stages where the
    /// spatial grid is small, keeping compute modest while the parameter
    /// count grows roughly tenfold over the light preset.
    pub fn toy_heavy() -> Self {
        BackboneConfig {
            widths: vec![8, 24, 48, 48],
            depths: vec![1, 2, 4, 9],
            strides: vec![2, 2, 2, 2],
            embed: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.depths.len() != n || self.strides.len() != n {
            return Err(Error::Config(format!(
                "backbone stage lists disagree: {} widths, {} depths, {} strides",
                n,
                self.depths.len(),
                self.strides.len()
            )));
        }
        if self.widths.iter().any(|&w| w == 0)
            || self.depths.iter().any(|&d| d == 0)
            || self.strides.iter().any(|&s| s == 0)
            || self.embed == 0
        {
            return Err(Error::Config("backbone dimensions must all be positive".into()));
        }
        Ok(())
    }

    /// Exact trainable-parameter count, computable without building.
    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        let mut c_in = 3u64;
        for (&w, &d) in self.widths.iter().zip(&self.depths) {
            let w = w as u64;
            total += 9 * c_in * w + w;
            total += (d as u64 - 1) * (9 * w * w + w);
            c_in = w;
        }
        total + c_in * self.embed as u64 + self.embed as u64
    }

    /// Spatial grid after each stage for a given input size. A 3x3 conv with
    /// padding 1 and stride s maps h to (h - 1) / s + 1.
    pub fn stage_dims(&self, input: (usize, usize)) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.strides.len());
        let (mut h, mut w) = input;
        for &s in &self.strides {
            h = (h - 1) / s + 1;
            w = (w - 1) / s + 1;
            dims.push((h, w));
        }
        dims
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub framework: Framework,
    pub fusion: FusionKind,
    /// Stage indices (0-based) after which cross-modal attention runs.
    /// Must be empty exactly when the fusion block is plain concatenation.
    pub attention_stages: Vec<usize>,
    pub input_size: (usize, usize),
    pub clin: BackboneConfig,
    pub derm: BackboneConfig,
    pub scale_attention_logits: bool,
}

impl ModelConfig {
    /// Desk-scale preset: 32x32 inputs, toy backbones, attention (when the
    /// block has any) at every stage from the second onward.
    pub fn toy(framework: Framework, fusion: FusionKind) -> Self {
        let (clin, derm) = match framework {
            Framework::Sff => (BackboneConfig::toy_heavy(), BackboneConfig::toy_heavy()),
            Framework::Aff => (BackboneConfig::toy_light(), BackboneConfig::toy_heavy()),
        };
        let attention_stages = match fusion {
            FusionKind::Cat => vec![],
            _ => (1..derm.widths.len()).collect(),
        };
        ModelConfig {
            framework,
            fusion,
            attention_stages,
            input_size: (32, 32),
            clin,
            derm,
            scale_attention_logits: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.clin.validate()?;
        self.derm.validate()?;
        let n = self.derm.widths.len();
        if self.clin.widths.len() != n {
            return Err(Error::Config(format!(
                "backbones must have the same stage count for stage-wise fusion; \
                 got {} (clinical) vs {} (dermoscopic)",
                self.clin.widths.len(),
                n
            )));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        match self.framework {
            Framework::Sff => {
                if self.clin != self.derm {
                    return Err(Error::Config(
                        "symmetric framework requires identical backbones".into(),
                    ));
                }
            }
            Framework::Aff => {
                if self.clin.param_count() >= self.derm.param_count() {
                    return Err(Error::Config(format!(
                        "asymmetric framework requires a strictly smaller clinical \
                         backbone; got {} vs {} parameters",
                        self.clin.param_count(),
                        self.derm.param_count()
                    )));
                }
            }
        }
        match self.fusion {
            FusionKind::Cat => {
                if !self.attention_stages.is_empty() {
                    return Err(Error::Config(
                        "concatenation fusion places no attention; attention_stages must be empty"
                            .into(),
                    ));
                }
            }
            _ => {
                if self.attention_stages.is_empty() {
                    return Err(Error::Config(
                        "attention fusion needs at least one attention stage".into(),
                    ));
                }
            }
        }
        let mut prev: Option<usize> = None;
        for &s in &self.attention_stages {
            if s >= n {
                return Err(Error::Config(format!(
                    "attention stage {} out of range for {} stages",
                    s, n
                )));
            }
            if let Some(p) = prev {
                if s <= p {
                    return Err(Error::Config(
                        "attention stages must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(s);
        }
        // Alignment moves between grids by integer pool/repeat factors only.
        let cd = self.clin.stage_dims(self.input_size);
        let dd = self.derm.stage_dims(self.input_size);
        for &s in &self.attention_stages {
            for (a, b) in [(cd[s].0, dd[s].0), (cd[s].1, dd[s].1)] {
                if a != b && a % b != 0 && b % a != 0 {
                    return Err(Error::Config(format!(
                        "stage {} grids {}x{} and {}x{} have no integer alignment factor",
                        s, cd[s].0, cd[s].1, dd[s].0, dd[s].1
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flat, ordered key=value form. Inverse of [`ModelConfig::from_kv`].
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let mut kv = vec![
            ("framework".to_string(), self.framework.as_str().to_string()),
            ("fusion".to_string(), self.fusion.as_str().to_string()),
            ("attention_stages".to_string(), join(&self.attention_stages)),
            ("input_height".to_string(), self.input_size.0.to_string()),
            ("input_width".to_string(), self.input_size.1.to_string()),
            (
                "scale_attention_logits".to_string(),
                self.scale_attention_logits.to_string(),
            ),
        ];
        for (prefix, bb) in [("clin", &self.clin), ("derm", &self.derm)] {
            kv.push((format!("{prefix}.widths"), join(&bb.widths)));
            kv.push((format!("{prefix}.depths"), join(&bb.depths)));
            kv.push((format!("{prefix}.strides"), join(&bb.strides)));
            kv.push((format!("{prefix}.embed"), bb.embed.to_string()));
        }
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k).ok_or_else(|| Error::Ingest(format!("missing config key '{}'", k)))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            let raw = get(k)?;
            if raw.is_empty() {
                return Ok(vec![]);
            }
            raw.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Ingest(format!("bad value '{}' in key '{}'", p, k)))
                })
                .collect()
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse::<usize>()
                .map_err(|_| Error::Ingest(format!("bad number for key '{}'", k)))
        };
        let backbone = |prefix: &str| -> Result<BackboneConfig> {
            Ok(BackboneConfig {
                widths: list(&format!("{prefix}.widths"))?,
                depths: list(&format!("{prefix}.depths"))?,
                strides: list(&format!("{prefix}.strides"))?,
                embed: num(&format!("{prefix}.embed"))?,
            })
        };
        let cfg = ModelConfig {
            framework: Framework::parse(get("framework")?)?,
            fusion: FusionKind::parse(get("fusion")?)?,
            attention_stages: list("attention_stages")?,
            input_size: (num("input_height")?, num("input_width")?),
            clin: backbone("clin")?,
            derm: backbone("derm")?,
            scale_attention_logits: get("scale_attention_logits")?
                .parse::<bool>()
                .map_err(|_| Error::Ingest("bad boolean for scale_attention_logits".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
