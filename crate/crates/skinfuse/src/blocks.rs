//! Cross-modal fusion blocks. The asymmetric block lets one modality's
//! features steer attention over the other's; the bidirectional variant runs
//! two independent such blocks, one per direction; concatenation has no
//! parameters at all and simply defers fusion to the embedding stage.

use crate::error::{Error, Result};
use crate::layers::Conv1x1;
use crate::rng::Streams;
use crate::tensor::{Graph, Tensor, Var};

/// Which fusion block a model places between its two feature streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Embedding-level concatenation only; zero fusion parameters.
    Cat,
    /// One-directional attention: the guiding stream (clinical) produces the
    /// attention map, the target stream (dermoscopic) gets refined.
    Aab,
    /// Two independent one-directional blocks, one refining each stream.
    Bab,
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Cat => "cat",
            FusionKind::Aab => "aab",
            FusionKind::Bab => "bab",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cat" => Ok(FusionKind::Cat),
            "aab" => Ok(FusionKind::Aab),
            "bab" => Ok(FusionKind::Bab),
            other => Err(Error::Config(format!("unknown fusion block '{}'", other))),
        }
    }
}

/// Fusion parameters added per attention site at channel width `c`.
/// Cat: 0. One-directional: three 1x1 projections, each c*c + c.
/// Bidirectional: twice that (the directions share nothing).
pub fn fusion_param_count(kind: FusionKind, c: usize) -> u64 {
    let per_proj = (c * c + c) as u64;
    match kind {
        FusionKind::Cat => 0,
        FusionKind::Aab => 3 * per_proj,
        FusionKind::Bab => 6 * per_proj,
    }
}

/// One-directional cross-modal attention at a single stage.
///
/// Query and key come from the guiding stream, value from the target stream.
/// With N = H*W pixels flattened per stream, the map is
/// `softmax_rows(Q K^T)` (N x N), and the output is `map . V + target`:
/// a residual refinement, so zeroed value weights pass the target through.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub query_proj: Conv1x1,
    pub key_proj: Conv1x1,
    pub value_proj: Conv1x1,
    /// Scale attention logits by 1/sqrt(C) before the softmax. Off by
    /// default: the reference formulation uses raw products.
    pub scale_logits: bool,
}

impl AttentionBlock {
    pub fn init(channels: usize, scale_logits: bool, streams: &Streams) -> Self {
        // The value projection starts at zero, so a fresh block is an exact
        // pass-through of the target stream and the cross-modal term only
        // enters as training grows it. Random value weights would splice
        // guide-driven noise into the target path from the first step, which
        // measurably degrades what the refined stream can learn.
        AttentionBlock {
            query_proj: Conv1x1::init(channels, channels, &mut streams.rng("query")),
            key_proj: Conv1x1::init(channels, channels, &mut streams.rng("key")),
            value_proj: Conv1x1::zeros(channels, channels),
            scale_logits,
        }
    }

    /// Identity projections, for worked examples and tests.
    pub fn identity(channels: usize, scale_logits: bool) -> Result<Self> {
        Ok(AttentionBlock {
            query_proj: Conv1x1::identity(channels)?,
            key_proj: Conv1x1::identity(channels)?,
            value_proj: Conv1x1::identity(channels)?,
            scale_logits,
        })
    }

    /// Refines `target` under guidance from `guide`. Both must be [H, W, C]
    /// with identical shapes (alignment happens upstream). Returns the
    /// refined features and a value-level copy of the attention map.
    pub fn forward(&self, g: &mut Graph, guide: Var, target: Var) -> Result<(Var, Tensor)> {
        let gs = g.value(guide).shape().to_vec();
        let ts = g.value(target).shape().to_vec();
        if gs != ts {
            return Err(Error::shape(
                "attention",
                format!("guide shape {:?} != target shape {:?}", gs, ts),
            ));
        }
        let &[h, w, c] = ts.as_slice() else {
            return Err(Error::shape("attention", format!("needs [H, W, C] input, got {:?}", ts)));
        };
        let n = h * w;

        let q = self.query_proj.forward(g, guide)?;
        let k = self.key_proj.forward(g, guide)?;
        let v = self.value_proj.forward(g, target)?;
        let qf = g.reshape(q, &[n, c])?;
        let kf = g.reshape(k, &[n, c])?;
        let vf = g.reshape(v, &[n, c])?;
        let kt = g.transpose2d(kf)?;
        let mut logits = g.matmul(qf, kt)?;
        if self.scale_logits {
            logits = g.mul_scalar(logits, 1.0 / (c as f64).sqrt())?;
        }
        let map = g.softmax_rows(logits)?;
        let mixed = g.matmul(map, vf)?;
        let spatial = g.reshape(mixed, &[h, w, c])?;
        let refined = g.add(spatial, target)?;
        Ok((refined, g.value(map).clone()))
    }

    pub fn param_count(&self) -> u64 {
        self.query_proj.param_count() + self.key_proj.param_count() + self.value_proj.param_count()
    }

    pub fn params(&self) -> [(&'static str, &Tensor); 6] {
        [
            ("query.weight", &self.query_proj.weight),
            ("query.bias", &self.query_proj.bias),
            ("key.weight", &self.key_proj.weight),
            ("key.bias", &self.key_proj.bias),
            ("value.weight", &self.value_proj.weight),
            ("value.bias", &self.value_proj.bias),
        ]
    }

    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("query.weight", &mut self.query_proj.weight),
            ("query.bias", &mut self.query_proj.bias),
            ("key.weight", &mut self.key_proj.weight),
            ("key.bias", &mut self.key_proj.bias),
            ("value.weight", &mut self.value_proj.weight),
            ("value.bias", &mut self.value_proj.bias),
        ]
    }
}

/// Two independent one-directional blocks. Both read the original stage
/// features: the clinical-to-dermoscopic direction is guided by clinical
/// features, and vice versa, with no weight sharing between directions.
#[derive(Debug, Clone)]
pub struct BidirectionalBlock {
    pub to_derm: AttentionBlock,
    pub to_clin: AttentionBlock,
}

impl BidirectionalBlock {
    pub fn init(channels_derm: usize, channels_clin: usize, scale_logits: bool, streams: &Streams) -> Self {
        BidirectionalBlock {
            to_derm: AttentionBlock::init(channels_derm, scale_logits, &streams.derive("to_derm")),
            to_clin: AttentionBlock::init(channels_clin, scale_logits, &streams.derive("to_clin")),
        }
    }

    pub fn param_count(&self) -> u64 {
        self.to_derm.param_count() + self.to_clin.param_count()
    }
}
