//! `gen-data`: synthesise a paired-modality dataset directory.
//!
//! The output is pure data (index plus image tensors) with no manifest or
//! timestamps, so the same flags and seed always produce a byte-identical
//! directory tree.

use std::path::PathBuf;

use skinfuse::data::{split_records, synth_generate, write_dataset, SynthConfig, TaskSchema};
use skinfuse::data::Split;
use skinfuse::Result;

use crate::settings::Settings;

use super::{parse_ratios, parse_size};

#[derive(clap::Args)]
pub struct Args {
    /// Directory to create the dataset in
    #[arg(long)]
    out: PathBuf,
    /// Number of cases to generate [default: 200]
    #[arg(long)]
    cases: Option<usize>,
    /// Image size as one integer or HxW [default: 32]
    #[arg(long)]
    size: Option<String>,
    /// Signal-to-noise ratio of the dermoscopic images [default: 4.0]
    #[arg(long)]
    derm_snr: Option<f64>,
    /// Signal-to-noise ratio of the clinical images [default: 1.0]
    #[arg(long)]
    clin_snr: Option<f64>,
    /// Train,val,test ratios for the split tags [default: 0.6,0.2,0.2]
    #[arg(long)]
    split: Option<String>,
    /// RNG seed for labels, images, and the split shuffle [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Settings file (key = value); flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let cases = settings.resolve("cases", args.cases, 200)?;
    let (height, width) =
        parse_size(&settings.resolve_raw("size", args.size.as_deref(), "32"))?;
    let derm_snr = settings.resolve("derm_snr", args.derm_snr, 4.0)?;
    let clin_snr = settings.resolve("clin_snr", args.clin_snr, 1.0)?;
    let ratios = parse_ratios(&settings.resolve_raw("split", args.split.as_deref(), "0.6,0.2,0.2"))?;
    let seed = settings.resolve("seed", args.seed, 0)?;

    let cfg = SynthConfig { cases, height, width, derm_snr, clin_snr };
    for w in cfg.validate()? {
        eprintln!("warning: {w}");
    }

    let schema = TaskSchema::seven_point();
    let mut records = synth_generate(&cfg, &schema, seed)?;
    let idx = split_records(&records, ratios, seed)?;
    for (&i, split) in idx
        .train
        .iter()
        .map(|i| (i, Split::Train))
        .chain(idx.val.iter().map(|i| (i, Split::Val)))
        .chain(idx.test.iter().map(|i| (i, Split::Test)))
    {
        records[i].split = Some(split);
    }
    write_dataset(&args.out, &records, &schema)?;

    println!(
        "wrote {} cases ({} train / {} val / {} test) at {}x{} to {}",
        records.len(),
        idx.train.len(),
        idx.val.len(),
        idx.test.len(),
        height,
        width,
        args.out.display()
    );
    Ok(())
}
