//! Synthetic paired-modality generator.
//!
//! The image plane is cut into eight equal row-major pixel bands, one per
//! task. A category is encoded in its band as a binary parity pattern
//! (sign = parity of `pixel_index & mask`, one mask per category); distinct
//! categories give orthogonal unit-norm templates, so each label is a
//! separate matched-filter problem whose difficulty is set purely by the
//! modality's signal-to-noise ratio.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::schema::TaskSchema;
use super::CaseRecord;
use crate::error::{Error, Result};
use crate::rng::Streams;
use crate::tensor::Tensor;

/// Pixel values are 0.5 + GAIN * (snr * template + unit noise), clamped to
/// [0, 1]. GAIN keeps almost all mass inside the storage range.
const GAIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub cases: usize,
    pub height: usize,
    pub width: usize,
    /// Dermoscopic signal-to-noise ratio (matched-filter d').
    pub derm_snr: f64,
    /// Clinical signal-to-noise ratio; meant to be the weaker modality.
    pub clin_snr: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { cases: 200, height: 32, width: 32, derm_snr: 4.0, clin_snr: 1.0 }
    }
}

impl SynthConfig {
    /// Checks the hard constraints and returns soft warnings (currently:
    /// a dermoscopic SNR that does not exceed the clinical one, which
    /// defeats the point of the asymmetric setup but is still generable).
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.cases == 0 {
            return Err(Error::Config("need at least one case".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if (self.height * self.width) % 64 != 0 {
            return Err(Error::Config(format!(
                "height*width must be a multiple of 64 so the eight bands hold \
                 orthogonal parity patterns; got {}x{}",
                self.height, self.width
            )));
        }
        for (name, snr) in [("derm_snr", self.derm_snr), ("clin_snr", self.clin_snr)] {
            if !snr.is_finite() || snr < 0.0 {
                return Err(Error::Config(format!("{} must be finite and >= 0, got {}", name, snr)));
            }
        }
        let mut warnings = Vec::new();
        if self.derm_snr <= self.clin_snr {
            warnings.push(format!(
                "derm_snr ({}) does not exceed clin_snr ({}): the dermoscopic modality \
                 is supposed to be the more informative one",
                self.derm_snr, self.clin_snr
            ));
        }
        Ok(warnings)
    }
}

/// Unit-norm template encoding `cat` of `task` on an HxW canvas, replicated
/// over 3 channels. Nonzero only inside the task's pixel band.
pub fn template(height: usize, width: usize, task: usize, cat: usize, schema: &TaskSchema) -> Result<Tensor> {
    if (height * width) % 64 != 0 {
        return Err(Error::Config("height*width must be a multiple of 64".into()));
    }
    if task >= schema.n_tasks() || cat >= schema.n_categories(task) {
        return Err(Error::Config(format!("no such category: task {} cat {}", task, cat)));
    }
    let region = height * width / schema.n_tasks();
    let amp = 1.0 / ((3 * region) as f64).sqrt();
    let mask = cat + 1; // mask 0 would be constant-sign, not orthogonal to others
    let mut t = Tensor::zeros(&[height, width, 3]);
    let d = t.data_mut();
    for r in 0..region {
        let sign = if (r & mask).count_ones() % 2 == 0 { amp } else { -amp };
        let p = task * region + r;
        for ch in 0..3 {
            d[p * 3 + ch] = sign;
        }
    }
    Ok(t)
}

fn render(
    signal: &[f64],
    snr: f64,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Tensor {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut img = Tensor::zeros(&[height, width, 3]);
    let d = img.data_mut();
    for (i, v) in d.iter_mut().enumerate() {
        let x = 0.5 + GAIN * (snr * signal[i] + normal.sample(rng));
        *v = x.clamp(0.0, 1.0);
    }
    img
}

/// Generates `cfg.cases` labelled cases. Labels are drawn from the schema's
/// empirical marginals (independently per task); both images of a case carry
/// the same eight templates, scaled by their modality's SNR, plus fresh unit
/// noise. Fully determined by (cfg, seed).
pub fn synth_generate(
    cfg: &SynthConfig,
    schema: &TaskSchema,
    seed: u64,
) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    let streams = Streams::new(seed).derive("synth");
    let mut label_rng = streams.rng("labels");
    let mut clin_rng = streams.rng("clin_noise");
    let mut derm_rng = streams.rng("derm_noise");

    let marginals = schema.all_marginals();
    let n_entries = cfg.height * cfg.width * 3;
    // One template per category, flattened; reused across cases.
    let templates: Vec<Vec<Vec<f64>>> = (0..schema.n_tasks())
        .map(|t| {
            (0..schema.n_categories(t))
                .map(|c| template(cfg.height, cfg.width, t, c, schema).map(|t| t.data().to_vec()))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(cfg.cases);
    for i in 0..cfg.cases {
        let mut labels = Vec::with_capacity(schema.n_tasks());
        for m in &marginals {
            let u: f64 = label_rng.gen();
            let mut acc = 0.0;
            let mut chosen = m.len() - 1;
            for (c, &p) in m.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            labels.push(chosen);
        }
        let mut signal = vec![0.0; n_entries];
        for (t, &lab) in labels.iter().enumerate() {
            for (s, &tv) in signal.iter_mut().zip(&templates[t][lab]) {
                *s += tv;
            }
        }
        let clin = render(&signal, cfg.clin_snr, cfg.height, cfg.width, &mut clin_rng);
        let derm = render(&signal, cfg.derm_snr, cfg.height, cfg.width, &mut derm_rng);
        out.push(CaseRecord { id: format!("c{:05}", i), clin, derm, labels, split: None });
    }
    Ok(out)
}
