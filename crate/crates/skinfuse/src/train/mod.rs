//! Three-branch training: summed cross-entropy over the clinical,
//! dermoscopic and fused heads, Adam updates, optional weight averaging over
//! the closing epochs, and augmentation-averaged prediction.

mod augment;

pub use augment::{apply, default_tta_plans, sample_plan, AugmentPlan, AugmentToggles};

use crate::data::{CaseRecord, TaskSchema};
use crate::error::{Error, Result};
use crate::model::{Model, PredictionSet};
use crate::rng::Streams;
use crate::tensor::{Graph, Tensor, Var};

/// Per-branch loss totals. `total` is exactly `derm + clin + fusion`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub derm: f64,
    pub clin: f64,
    pub fusion: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(derm: f64, clin: f64, fusion: f64) -> Self {
        LossBreakdown { derm, clin, fusion, total: derm + clin + fusion }
    }
}

/// Summed cross-entropy of already-softmaxed predictions against labels,
/// per branch, accumulated over cases. The value is a sum, not a mean, so
/// concatenating case lists adds their losses exactly.
pub fn total_loss(
    preds: &[PredictionSet],
    labels: &[Vec<usize>],
    schema: &TaskSchema,
) -> Result<LossBreakdown> {
    if preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} prediction sets for {} label sets",
            preds.len(),
            labels.len()
        )));
    }
    let mut sums = [0.0f64; 3];
    for (i, (p, labs)) in preds.iter().zip(labels).enumerate() {
        if labs.len() != schema.n_tasks() {
            return Err(Error::Contract(format!(
                "case {}: expected {} labels, got {}",
                i,
                schema.n_tasks(),
                labs.len()
            )));
        }
        for (bi, branch) in [&p.derm, &p.clin, &p.fusion].into_iter().enumerate() {
            if branch.len() != schema.n_tasks() {
                return Err(Error::Contract(format!(
                    "case {}: branch has {} task vectors, schema has {}",
                    i,
                    branch.len(),
                    schema.n_tasks()
                )));
            }
            for (t, probs) in branch.iter().enumerate() {
                let k = schema.n_categories(t);
                if probs.len() != k {
                    return Err(Error::Contract(format!(
                        "case {} task {}: {} probabilities for {} categories",
                        i,
                        schema.task_name(t),
                        probs.len(),
                        k
                    )));
                }
                let lab = labs[t];
                if lab >= k {
                    return Err(Error::Contract(format!(
                        "case {} task {}: label {} out of range",
                        i,
                        schema.task_name(t),
                        lab
                    )));
                }
                let p_true = probs[lab];
                if !(p_true > 0.0 && p_true <= 1.0 + 1e-12) {
                    return Err(Error::numeric(
                        "total_loss",
                        format!(
                            "case {} task {}: probability {} outside (0, 1]",
                            i,
                            schema.task_name(t),
                            p_true
                        ),
                    ));
                }
                sums[bi] -= p_true.ln();
            }
        }
    }
    Ok(LossBreakdown::new(sums[0], sums[1], sums[2]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{} must be in [0, 1), got {}", name, b)));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Adam with bias correction. Moment buffers are laid out to match one fixed
/// parameter order; `step` insists on that order's lengths.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn step(&mut self, params: &mut [(String, &mut Tensor)], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (((name, p), g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v))
        {
            if g.len() != p.len() || m.len() != p.len() {
                return Err(Error::Contract(format!(
                    "parameter {}: length {} vs gradient {} vs state {}",
                    name,
                    p.len(),
                    g.len(),
                    m.len()
                )));
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of the final epochs whose end-of-epoch weights are averaged
    /// into the result; 0 keeps the last weights as-is.
    pub swa_window: f64,
    /// Scale each batch gradient by 1/batch_len (mean reduction) instead of
    /// using the raw sum. Loss traces are per-case means either way.
    pub mean_reduction: bool,
    pub augment: AugmentToggles,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfig::default(),
            swa_window: 0.2,
            mean_reduction: true,
            augment: AugmentToggles::all(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.swa_window) {
            return Err(Error::Config(format!(
                "swa_window must be in [0, 1], got {}",
                self.swa_window
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Per-epoch mean loss per case, in epoch order.
    pub trace: Vec<LossBreakdown>,
    /// How many end-of-epoch snapshots were averaged into the final weights
    /// (0 means the last epoch's weights were kept unchanged).
    pub swa_snapshots: usize,
}

/// Element-wise mean of parameter snapshots. All snapshots must list the
/// same tensors in the same order.
pub fn swa_average(snapshots: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let Some(first) = snapshots.first() else {
        return Err(Error::Contract("cannot average zero snapshots".into()));
    };
    for s in snapshots {
        if s.len() != first.len() {
            return Err(Error::Contract(format!(
                "snapshot tensor counts differ: {} vs {}",
                s.len(),
                first.len()
            )));
        }
    }
    let n = snapshots.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let shape = first[i].shape().to_vec();
        for s in snapshots {
            if s[i].shape() != shape.as_slice() {
                return Err(Error::shape(
                    "swa_average",
                    format!("snapshot tensor {} shape {:?} vs {:?}", i, s[i].shape(), shape),
                ));
            }
        }
        let mut acc = vec![0.0; first[i].len()];
        for s in snapshots {
            for (a, &v) in acc.iter_mut().zip(s[i].data()) {
                *a += v;
            }
        }
        for a in &mut acc {
            *a /= n;
        }
        out.push(Tensor::new(shape, acc)?);
    }
    Ok(out)
}

/// Builds the three-branch loss for a batch inside `g` and returns
/// (per-branch sum vars, total var). The caller decides what to backward.
fn batch_loss(
    model: &Model,
    g: &mut Graph,
    batch: &[(&Tensor, &Tensor, &[usize])],
) -> Result<([Var; 3], Var)> {
    let mut branch_sums: [Option<Var>; 3] = [None, None, None];
    for (clin, derm, labels) in batch {
        let fwd = model.forward(g, clin, derm)?;
        let logits = model.branch_logits(g, &fwd)?;
        for (bi, branch) in
            [&logits.derm, &logits.clin, &logits.fusion].into_iter().enumerate()
        {
            for (t, &lv) in branch.iter().enumerate() {
                let ce = g.cross_entropy(lv, labels[t])?;
                branch_sums[bi] = Some(match branch_sums[bi] {
                    Some(acc) => g.add(acc, ce)?,
                    None => ce,
                });
            }
        }
    }
    let sums = [
        branch_sums[0].expect("non-empty batch"),
        branch_sums[1].expect("non-empty batch"),
        branch_sums[2].expect("non-empty batch"),
    ];
    let dc = g.add(sums[0], sums[1])?;
    let total = g.add(dc, sums[2])?;
    Ok((sums, total))
}

/// Trains in place. Per epoch: shuffle, augment, batch, one Adam step per
/// batch; afterwards optionally replace the weights by the average of the
/// final window's end-of-epoch snapshots. Everything is sequential and
/// seeded, so identical inputs give bit-identical weights.
pub fn fit(model: &mut Model, train_set: &[CaseRecord], config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    for case in train_set {
        case.validate(&model.schema)?;
    }

    let param_names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let param_sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(config.adam, &param_sizes)?;
    let streams = Streams::new(config.seed).derive("train");

    let swa_keep = ((config.swa_window * config.epochs as f64) + 1e-9).floor() as usize;
    let swa_from = config.epochs.saturating_sub(swa_keep);
    let mut snapshots: Vec<Vec<Tensor>> = Vec::new();

    let mut trace = Vec::with_capacity(config.epochs);
    let n = train_set.len();
    for epoch in 0..config.epochs {
        let epoch_ns = streams.derive(&format!("epoch{epoch}"));
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::Rng;
            let mut rng = epoch_ns.rng("shuffle");
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        let mut aug_rng = epoch_ns.rng("augment");
        let mut sums = [0.0f64; 3];
        for chunk in order.chunks(config.batch_size) {
            // Augmented views are sampled case by case in shuffle order,
            // clinical plan first, so the draw sequence is pinned.
            let mut views: Vec<(Tensor, Tensor, &[usize])> = Vec::with_capacity(chunk.len());
            for &ci in chunk {
                let case = &train_set[ci];
                let cs = case.clin.shape();
                let plan_c = sample_plan(&config.augment, cs[0], cs[1], &mut aug_rng);
                let ds = case.derm.shape();
                let plan_d = sample_plan(&config.augment, ds[0], ds[1], &mut aug_rng);
                views.push((
                    apply(&case.clin, &plan_c)?,
                    apply(&case.derm, &plan_d)?,
                    &case.labels,
                ));
            }
            let batch: Vec<(&Tensor, &Tensor, &[usize])> =
                views.iter().map(|(c, d, l)| (c, d, *l)).collect();

            let mut g = Graph::new();
            let (branch_vars, total) = batch_loss(model, &mut g, &batch)?;
            for (bi, &bv) in branch_vars.iter().enumerate() {
                sums[bi] += g.scalar_value(bv);
            }
            let objective = if config.mean_reduction {
                g.mul_scalar(total, 1.0 / batch.len() as f64)?
            } else {
                total
            };
            g.backward(objective)?;

            let grads: Vec<Vec<f64>> = model
                .named_params()
                .iter()
                .map(|(_, t)| {
                    g.grad_of(t).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()])
                })
                .collect();
            // The graph still holds handles to the parameter buffers; drop
            // it so the optimizer can update them in place.
            drop(g);
            let mut params = model.named_params_mut();
            debug_assert!(params.iter().map(|(n, _)| n).eq(param_names.iter()));
            adam.step(&mut params, &grads)?;
        }
        let nf = n as f64;
        trace.push(LossBreakdown::new(sums[0] / nf, sums[1] / nf, sums[2] / nf));
        if epoch >= swa_from {
            snapshots.push(model.named_params().iter().map(|(_, t)| (*t).clone()).collect());
        }
    }

    let swa_snapshots = snapshots.len();
    if swa_snapshots > 0 {
        let averaged = swa_average(&snapshots)?;
        for ((_, slot), avg) in model.named_params_mut().into_iter().zip(averaged) {
            *slot = avg.with_requires_grad();
        }
    }
    Ok(FitResult { trace, swa_snapshots })
}

/// Prediction averaged over augmented views: each plan is applied to both
/// images, and the per-task probability vectors are averaged across views.
pub fn tta_predict(
    model: &Model,
    clin: &Tensor,
    derm: &Tensor,
    plans: &[AugmentPlan],
) -> Result<PredictionSet> {
    if plans.is_empty() {
        return Err(Error::Contract("test-time augmentation needs at least one view".into()));
    }
    let mut acc: Option<PredictionSet> = None;
    for plan in plans {
        let p = model.predict(&apply(clin, plan)?, &apply(derm, plan)?)?;
        acc = Some(match acc {
            None => p,
            Some(mut a) => {
                let add = |dst: &mut Vec<Vec<f64>>, src: &Vec<Vec<f64>>| {
                    for (d, s) in dst.iter_mut().zip(src) {
                        for (x, y) in d.iter_mut().zip(s) {
                            *x += y;
                        }
                    }
                };
                add(&mut a.derm, &p.derm);
                add(&mut a.clin, &p.clin);
                add(&mut a.fusion, &p.fusion);
                a
            }
        });
    }
    let mut out = acc.expect("at least one plan");
    let k = plans.len() as f64;
    for branch in [&mut out.derm, &mut out.clin, &mut out.fusion] {
        for task in branch.iter_mut() {
            for v in task.iter_mut() {
                *v /= k;
            }
        }
    }
    Ok(out)
}
