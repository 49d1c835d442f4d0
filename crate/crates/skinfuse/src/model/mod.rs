//! Two-backbone fusion models: per-modality convolutional feature
//! extractors, optional cross-modal attention between stages, and three
//! prediction branches (clinical, dermoscopic, fused) sharing nothing but
//! the features they read.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest};
pub use config::{BackboneConfig, Framework, ModelConfig};

use crate::blocks::{AttentionBlock, FusionKind};
use crate::data::TaskSchema;
use crate::error::{Error, Result};
use crate::layers::{Conv1x1, Conv3x3, Linear};
use crate::rng::Streams;
use crate::tensor::{Graph, Tensor, Var};

/// Raw pixels are stored in [0, 1]; the model recentres them to roughly
/// zero-mean unit-variance before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_SCALE: f64 = 10.0;

pub fn standardize(img: &Tensor) -> Tensor {
    let data = img.data().iter().map(|&v| (v - INPUT_CENTER) * INPUT_SCALE).collect();
    Tensor::new(img.shape().to_vec(), data).expect("shape unchanged")
}

/// One backbone stage: a strided 3x3 conv followed by depth-1 unit-stride
/// ones, SiLU after each.
#[derive(Debug, Clone)]
pub struct Stage {
    pub convs: Vec<Conv3x3>,
}

/// A per-modality feature extractor: stages, then global average pooling
/// and a learned projection to the shared embedding width.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    pub embed: Linear,
}

impl Backbone {
    pub fn init(config: &BackboneConfig, streams: &Streams) -> Self {
        let mut stages = Vec::with_capacity(config.widths.len());
        let mut c_in = 3;
        for (i, (&w, (&d, &s))) in
            config.widths.iter().zip(config.depths.iter().zip(&config.strides)).enumerate()
        {
            let ns = streams.derive(&format!("stage{i}"));
            let mut convs = Vec::with_capacity(d);
            convs.push(Conv3x3::init(c_in, w, s, &mut ns.rng("conv0")));
            for j in 1..d {
                convs.push(Conv3x3::init(w, w, 1, &mut ns.rng(&format!("conv{j}"))));
            }
            stages.push(Stage { convs });
            c_in = w;
        }
        let embed = Linear::init(c_in, config.embed, &mut streams.rng("embed"));
        Backbone { config: config.clone(), stages, embed }
    }

    pub fn forward_stage(&self, g: &mut Graph, x: Var, stage: usize) -> Result<Var> {
        let mut y = x;
        for conv in &self.stages[stage].convs {
            y = conv.forward(g, y)?;
            y = g.silu(y)?;
        }
        Ok(y)
    }

    /// Final features -> embedding vector.
    pub fn embed_forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let pooled = g.global_avg_pool(features)?;
        self.embed.forward(g, pooled)
    }

    pub fn param_count(&self) -> u64 {
        let convs: u64 =
            self.stages.iter().flat_map(|s| &s.convs).map(|c| c.param_count()).sum();
        convs + self.embed.param_count()
    }
}

/// Brings one stream's stage features to another's spatial/channel layout:
/// average-pool or nearest-repeat per axis (integer factors only), then a
/// learned 1x1 projection.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub proj: Conv1x1,
}

/// Param-free spatial resize used by [`Aligner`], exposed for tests.
pub fn resize_to(g: &mut Graph, x: Var, th: usize, tw: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let &[h, w, _] = shape.as_slice() else {
        return Err(Error::shape("resize_to", format!("needs [H, W, C], got {:?}", shape)));
    };
    let factor = |from: usize, to: usize| -> Result<(usize, usize)> {
        if from == to {
            Ok((1, 1))
        } else if from > to && from % to == 0 {
            Ok((from / to, 1))
        } else if to > from && to % from == 0 {
            Ok((1, to / from))
        } else {
            Err(Error::shape(
                "resize_to",
                format!("no integer factor maps {} to {}", from, to),
            ))
        }
    };
    let (ph, uh) = factor(h, th)?;
    let (pw, uw) = factor(w, tw)?;
    let mut y = x;
    if ph > 1 || pw > 1 {
        y = g.avg_pool2d(y, ph, pw)?;
    }
    if uh > 1 || uw > 1 {
        y = g.upsample_nearest(y, uh, uw)?;
    }
    Ok(y)
}

impl Aligner {
    pub fn init(c_in: usize, c_out: usize, streams: &Streams) -> Self {
        Aligner { proj: Conv1x1::init(c_in, c_out, &mut streams.rng("proj")) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, th: usize, tw: usize) -> Result<Var> {
        let resized = resize_to(g, x, th, tw)?;
        self.proj.forward(g, resized)
    }

    pub fn param_count(&self) -> u64 {
        self.proj.param_count()
    }
}

/// A one-directional attention site at one stage. `align` is present only
/// when the guiding stream's features need reshaping to the target layout.
#[derive(Debug, Clone)]
pub struct OneWaySite {
    pub stage: usize,
    pub align: Option<Aligner>,
    pub block: AttentionBlock,
}

#[derive(Debug, Clone)]
pub struct TwoWaySite {
    pub stage: usize,
    pub align_to_derm: Option<Aligner>,
    pub align_to_clin: Option<Aligner>,
    pub to_derm: AttentionBlock,
    pub to_clin: AttentionBlock,
}

/// The fusion mechanism sitting between the two backbones.
#[derive(Debug, Clone)]
pub enum FusionModule {
    /// No interaction until the embeddings are concatenated.
    Cat,
    /// Clinical features guide attention over dermoscopic features.
    OneWay(Vec<OneWaySite>),
    /// Both directions, independently parameterised.
    TwoWay(Vec<TwoWaySite>),
}

impl FusionModule {
    pub fn attention_param_count(&self) -> u64 {
        match self {
            FusionModule::Cat => 0,
            FusionModule::OneWay(sites) => sites.iter().map(|s| s.block.param_count()).sum(),
            FusionModule::TwoWay(sites) => {
                sites.iter().map(|s| s.to_derm.param_count() + s.to_clin.param_count()).sum()
            }
        }
    }

    pub fn alignment_param_count(&self) -> u64 {
        let opt = |a: &Option<Aligner>| a.as_ref().map_or(0, |x| x.param_count());
        match self {
            FusionModule::Cat => 0,
            FusionModule::OneWay(sites) => sites.iter().map(|s| opt(&s.align)).sum(),
            FusionModule::TwoWay(sites) => {
                sites.iter().map(|s| opt(&s.align_to_derm) + opt(&s.align_to_clin)).sum()
            }
        }
    }
}

/// Per-task linear classifiers on one embedding.
#[derive(Debug, Clone)]
pub struct Heads {
    pub per_task: Vec<Linear>,
}

impl Heads {
    fn init(embed_dim: usize, schema: &TaskSchema, streams: &Streams) -> Self {
        let per_task = (0..schema.n_tasks())
            .map(|t| {
                Linear::init(embed_dim, schema.n_categories(t), &mut streams.rng(schema.task_name(t)))
            })
            .collect();
        Heads { per_task }
    }

    pub fn forward(&self, g: &mut Graph, emb: Var) -> Result<Vec<Var>> {
        self.per_task.iter().map(|h| h.forward(g, emb)).collect()
    }

    pub fn param_count(&self) -> u64 {
        self.per_task.iter().map(|h| h.param_count()).sum()
    }
}

/// Attention maps recorded during a forward pass, for inspection.
#[derive(Debug, Clone)]
pub struct AttentionSnapshot {
    pub stage: usize,
    pub toward_derm: Tensor,
    pub toward_clin: Option<Tensor>,
}

/// Graph handles produced by [`Model::forward`].
pub struct ForwardOutput {
    pub emb_clin: Var,
    pub emb_derm: Var,
    pub emb_fusion: Var,
    pub attention: Vec<AttentionSnapshot>,
}

/// Per-branch, per-task logits.
pub struct LogitSet {
    pub clin: Vec<Var>,
    pub derm: Vec<Var>,
    pub fusion: Vec<Var>,
}

/// The three prediction branches, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Derm,
    Clin,
    Fusion,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Derm, Branch::Clin, Branch::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Derm => "derm",
            Branch::Clin => "clin",
            Branch::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Branch> {
        Branch::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

/// Per-branch softmax probabilities, one vector per task.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub derm: Vec<Vec<f64>>,
    pub clin: Vec<Vec<f64>>,
    pub fusion: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn branch(&self, b: Branch) -> &[Vec<f64>] {
        match b {
            Branch::Derm => &self.derm,
            Branch::Clin => &self.clin,
            Branch::Fusion => &self.fusion,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: TaskSchema,
    pub clin_backbone: Backbone,
    pub derm_backbone: Backbone,
    pub fusion: FusionModule,
    pub clin_heads: Heads,
    pub derm_heads: Heads,
    pub fusion_heads: Heads,
}

/// Parameter counts by component. `total` is always the sum of the parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamAudit {
    pub clin_backbone: u64,
    pub derm_backbone: u64,
    pub attention: u64,
    pub alignment: u64,
    pub heads: u64,
    pub total: u64,
}

impl ParamAudit {
    pub fn lines(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("clin_backbone", self.clin_backbone),
            ("derm_backbone", self.derm_backbone),
            ("attention", self.attention),
            ("alignment", self.alignment),
            ("heads", self.heads),
            ("total", self.total),
        ]
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.lines() {
            out.push_str(&format!("{:<14} {:>10}\n", name, v));
        }
        out
    }
}

impl Model {
    /// Builds a model with seed-determined weights. Initialisation draws an
    /// independent named stream per layer, so a component's weights depend
    /// only on the seed and its own position, not on which other components
    /// exist: e.g. the dermoscopic backbone starts identically whether the
    /// fusion block is attention or plain concatenation.
    pub fn build(config: &ModelConfig, schema: &TaskSchema, seed: u64) -> Result<Model> {
        config.validate()?;
        let root = Streams::new(seed).derive("model");
        let clin_backbone = Backbone::init(&config.clin, &root.derive("clin_backbone"));
        let derm_backbone = Backbone::init(&config.derm, &root.derive("derm_backbone"));

        let clin_dims = config.clin.stage_dims(config.input_size);
        let derm_dims = config.derm.stage_dims(config.input_size);
        let fusion_ns = root.derive("fusion");
        let scale = config.scale_attention_logits;
        let needs_align = |s: usize| {
            config.clin.widths[s] != config.derm.widths[s] || clin_dims[s] != derm_dims[s]
        };
        let fusion = match config.fusion {
            FusionKind::Cat => FusionModule::Cat,
            FusionKind::Aab => FusionModule::OneWay(
                config
                    .attention_stages
                    .iter()
                    .map(|&s| {
                        let ns = fusion_ns.derive(&format!("stage{s}"));
                        let align = needs_align(s).then(|| {
                            Aligner::init(
                                config.clin.widths[s],
                                config.derm.widths[s],
                                &ns.derive("align_to_derm"),
                            )
                        });
                        let block =
                            AttentionBlock::init(config.derm.widths[s], scale, &ns.derive("to_derm"));
                        OneWaySite { stage: s, align, block }
                    })
                    .collect(),
            ),
            FusionKind::Bab => FusionModule::TwoWay(
                config
                    .attention_stages
                    .iter()
                    .map(|&s| {
                        let ns = fusion_ns.derive(&format!("stage{s}"));
                        let align_to_derm = needs_align(s).then(|| {
                            Aligner::init(
                                config.clin.widths[s],
                                config.derm.widths[s],
                                &ns.derive("align_to_derm"),
                            )
                        });
                        let align_to_clin = needs_align(s).then(|| {
                            Aligner::init(
                                config.derm.widths[s],
                                config.clin.widths[s],
                                &ns.derive("align_to_clin"),
                            )
                        });
                        TwoWaySite {
                            stage: s,
                            align_to_derm,
                            align_to_clin,
                            to_derm: AttentionBlock::init(
                                config.derm.widths[s],
                                scale,
                                &ns.derive("to_derm"),
                            ),
                            to_clin: AttentionBlock::init(
                                config.clin.widths[s],
                                scale,
                                &ns.derive("to_clin"),
                            ),
                        }
                    })
                    .collect(),
            ),
        };

        let clin_heads = Heads::init(config.clin.embed, schema, &root.derive("clin_heads"));
        let derm_heads = Heads::init(config.derm.embed, schema, &root.derive("derm_heads"));
        let fusion_heads = Heads::init(
            config.clin.embed + config.derm.embed,
            schema,
            &root.derive("fusion_heads"),
        );

        Ok(Model {
            config: config.clone(),
            schema: schema.clone(),
            clin_backbone,
            derm_backbone,
            fusion,
            clin_heads,
            derm_heads,
            fusion_heads,
        })
    }

    fn check_input(&self, name: &str, img: &Tensor) -> Result<()> {
        let (h, w) = self.config.input_size;
        if img.shape() != [h, w, 3] {
            return Err(Error::shape(
                "model_forward",
                format!("{} image must be [{}, {}, 3], got {:?}", name, h, w, img.shape()),
            ));
        }
        if let Some(bad) = img.data().iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v))
        {
            return Err(Error::Contract(format!(
                "{} image has value {} outside the [0, 1] storage range",
                name, bad
            )));
        }
        Ok(())
    }

    /// Runs both backbones with cross-modal fusion between stages, returning
    /// the three embeddings plus attention-map snapshots.
    pub fn forward(&self, g: &mut Graph, clin_img: &Tensor, derm_img: &Tensor) -> Result<ForwardOutput> {
        self.check_input("clinical", clin_img)?;
        self.check_input("dermoscopic", derm_img)?;
        let mut xc = g.constant(standardize(clin_img));
        let mut xd = g.constant(standardize(derm_img));
        let mut attention = Vec::new();
        let n_stages = self.config.clin.widths.len();
        for s in 0..n_stages {
            xc = self.clin_backbone.forward_stage(g, xc, s)?;
            xd = self.derm_backbone.forward_stage(g, xd, s)?;
            match &self.fusion {
                FusionModule::Cat => {}
                FusionModule::OneWay(sites) => {
                    if let Some(site) = sites.iter().find(|site| site.stage == s) {
                        let ds = g.value(xd).shape().to_vec();
                        let guide = match &site.align {
                            Some(a) => a.forward(g, xc, ds[0], ds[1])?,
                            None => xc,
                        };
                        let (refined, map) = site.block.forward(g, guide, xd)?;
                        xd = refined;
                        attention.push(AttentionSnapshot {
                            stage: s,
                            toward_derm: map,
                            toward_clin: None,
                        });
                    }
                }
                FusionModule::TwoWay(sites) => {
                    if let Some(site) = sites.iter().find(|site| site.stage == s) {
                        // Both directions read the original stage features.
                        let ds = g.value(xd).shape().to_vec();
                        let cs = g.value(xc).shape().to_vec();
                        let guide_c = match &site.align_to_derm {
                            Some(a) => a.forward(g, xc, ds[0], ds[1])?,
                            None => xc,
                        };
                        let guide_d = match &site.align_to_clin {
                            Some(a) => a.forward(g, xd, cs[0], cs[1])?,
                            None => xd,
                        };
                        let (new_d, map_d) = site.to_derm.forward(g, guide_c, xd)?;
                        let (new_c, map_c) = site.to_clin.forward(g, guide_d, xc)?;
                        xd = new_d;
                        xc = new_c;
                        attention.push(AttentionSnapshot {
                            stage: s,
                            toward_derm: map_d,
                            toward_clin: Some(map_c),
                        });
                    }
                }
            }
        }
        let emb_clin = self.clin_backbone.embed_forward(g, xc)?;
        let emb_derm = self.derm_backbone.embed_forward(g, xd)?;
        let emb_fusion = g.concat(emb_clin, emb_derm)?;
        Ok(ForwardOutput { emb_clin, emb_derm, emb_fusion, attention })
    }

    pub fn branch_logits(&self, g: &mut Graph, fwd: &ForwardOutput) -> Result<LogitSet> {
        Ok(LogitSet {
            clin: self.clin_heads.forward(g, fwd.emb_clin)?,
            derm: self.derm_heads.forward(g, fwd.emb_derm)?,
            fusion: self.fusion_heads.forward(g, fwd.emb_fusion)?,
        })
    }

    /// Single-view prediction: forward pass plus per-task softmax, no graph
    /// exposed.
    pub fn predict(&self, clin_img: &Tensor, derm_img: &Tensor) -> Result<PredictionSet> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, clin_img, derm_img)?;
        let logits = self.branch_logits(&mut g, &fwd)?;
        let probs = |g: &mut Graph, vars: &[Var]| -> Result<Vec<Vec<f64>>> {
            vars.iter()
                .map(|&v| {
                    let k = g.value(v).len();
                    let row = g.reshape(v, &[1, k])?;
                    let sm = g.softmax_rows(row)?;
                    Ok(g.value(sm).data().to_vec())
                })
                .collect()
        };
        Ok(PredictionSet {
            derm: probs(&mut g, &logits.derm)?,
            clin: probs(&mut g, &logits.clin)?,
            fusion: probs(&mut g, &logits.fusion)?,
        })
    }

    pub fn param_audit(&self) -> ParamAudit {
        let clin_backbone = self.clin_backbone.param_count();
        let derm_backbone = self.derm_backbone.param_count();
        let attention = self.fusion.attention_param_count();
        let alignment = self.fusion.alignment_param_count();
        let heads = self.clin_heads.param_count()
            + self.derm_heads.param_count()
            + self.fusion_heads.param_count();
        let audit = ParamAudit {
            clin_backbone,
            derm_backbone,
            attention,
            alignment,
            heads,
            total: clin_backbone + derm_backbone + attention + alignment + heads,
        };
        debug_assert_eq!(
            audit.total,
            self.named_params().iter().map(|(_, t)| t.len() as u64).sum::<u64>(),
            "audit must cover every parameter exactly once"
        );
        audit
    }

    /// Every trainable tensor with a stable dotted name, in a fixed
    /// traversal order (backbones, fusion, heads).
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, bb) in
            [("clin_backbone", &self.clin_backbone), ("derm_backbone", &self.derm_backbone)]
        {
            for (i, st) in bb.stages.iter().enumerate() {
                for (j, c) in st.convs.iter().enumerate() {
                    out.push((format!("{prefix}.stage{i}.conv{j}.weight"), &c.weight));
                    out.push((format!("{prefix}.stage{i}.conv{j}.bias"), &c.bias));
                }
            }
            out.push((format!("{prefix}.embed.weight"), &bb.embed.weight));
            out.push((format!("{prefix}.embed.bias"), &bb.embed.bias));
        }
        fn push_align<'a>(
            out: &mut Vec<(String, &'a Tensor)>,
            s: usize,
            name: &str,
            a: &'a Option<Aligner>,
        ) {
            if let Some(a) = a {
                out.push((format!("fusion.stage{s}.{name}.weight"), &a.proj.weight));
                out.push((format!("fusion.stage{s}.{name}.bias"), &a.proj.bias));
            }
        }
        match &self.fusion {
            FusionModule::Cat => {}
            FusionModule::OneWay(sites) => {
                for site in sites {
                    let s = site.stage;
                    push_align(&mut out, s, "align_to_derm", &site.align);
                    for (n, t) in site.block.params() {
                        out.push((format!("fusion.stage{s}.to_derm.{n}"), t));
                    }
                }
            }
            FusionModule::TwoWay(sites) => {
                for site in sites {
                    let s = site.stage;
                    push_align(&mut out, s, "align_to_derm", &site.align_to_derm);
                    push_align(&mut out, s, "align_to_clin", &site.align_to_clin);
                    for (n, t) in site.to_derm.params() {
                        out.push((format!("fusion.stage{s}.to_derm.{n}"), t));
                    }
                    for (n, t) in site.to_clin.params() {
                        out.push((format!("fusion.stage{s}.to_clin.{n}"), t));
                    }
                }
            }
        }
        for (prefix, heads) in [
            ("clin_heads", &self.clin_heads),
            ("derm_heads", &self.derm_heads),
            ("fusion_heads", &self.fusion_heads),
        ] {
            for (t, h) in heads.per_task.iter().enumerate() {
                let name = self.schema.task_name(t);
                out.push((format!("{prefix}.{name}.weight"), &h.weight));
                out.push((format!("{prefix}.{name}.bias"), &h.bias));
            }
        }
        out
    }

    /// Mutable variant of [`named_params`], same names and order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        let schema = self.schema.clone();
        for (prefix, bb) in [
            ("clin_backbone", &mut self.clin_backbone),
            ("derm_backbone", &mut self.derm_backbone),
        ] {
            for (i, st) in bb.stages.iter_mut().enumerate() {
                for (j, c) in st.convs.iter_mut().enumerate() {
                    out.push((format!("{prefix}.stage{i}.conv{j}.weight"), &mut c.weight));
                    out.push((format!("{prefix}.stage{i}.conv{j}.bias"), &mut c.bias));
                }
            }
            out.push((format!("{prefix}.embed.weight"), &mut bb.embed.weight));
            out.push((format!("{prefix}.embed.bias"), &mut bb.embed.bias));
        }
        match &mut self.fusion {
            FusionModule::Cat => {}
            FusionModule::OneWay(sites) => {
                for site in sites {
                    let s = site.stage;
                    if let Some(a) = &mut site.align {
                        out.push((format!("fusion.stage{s}.align_to_derm.weight"), &mut a.proj.weight));
                        out.push((format!("fusion.stage{s}.align_to_derm.bias"), &mut a.proj.bias));
                    }
                    for (n, t) in site.block.params_mut() {
                        out.push((format!("fusion.stage{s}.to_derm.{n}"), t));
                    }
                }
            }
            FusionModule::TwoWay(sites) => {
                for site in sites {
                    let s = site.stage;
                    if let Some(a) = &mut site.align_to_derm {
                        out.push((format!("fusion.stage{s}.align_to_derm.weight"), &mut a.proj.weight));
                        out.push((format!("fusion.stage{s}.align_to_derm.bias"), &mut a.proj.bias));
                    }
                    if let Some(a) = &mut site.align_to_clin {
                        out.push((format!("fusion.stage{s}.align_to_clin.weight"), &mut a.proj.weight));
                        out.push((format!("fusion.stage{s}.align_to_clin.bias"), &mut a.proj.bias));
                    }
                    for (n, t) in site.to_derm.params_mut() {
                        out.push((format!("fusion.stage{s}.to_derm.{n}"), t));
                    }
                    for (n, t) in site.to_clin.params_mut() {
                        out.push((format!("fusion.stage{s}.to_clin.{n}"), t));
                    }
                }
            }
        }
        for (prefix, heads) in [
            ("clin_heads", &mut self.clin_heads),
            ("derm_heads", &mut self.derm_heads),
            ("fusion_heads", &mut self.fusion_heads),
        ] {
            for (t, h) in heads.per_task.iter_mut().enumerate() {
                let name = schema.task_name(t);
                out.push((format!("{prefix}.{name}.weight"), &mut h.weight));
                out.push((format!("{prefix}.{name}.bias"), &mut h.bias));
            }
        }
        out
    }
}
