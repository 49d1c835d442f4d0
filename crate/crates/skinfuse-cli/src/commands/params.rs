//! `params`: print the exact trainable-parameter audit for a configuration
//! without training anything. Output is whitespace-aligned `name value`
//! lines, so scripts can split on whitespace.

use std::path::PathBuf;

use skinfuse::blocks::FusionKind;
use skinfuse::data::TaskSchema;
use skinfuse::model::{Framework, Model, ModelConfig};
use skinfuse::{Error, Result};

use crate::settings::Settings;

#[derive(clap::Args)]
pub struct Args {
    /// Backbone framework: sff (symmetric) or aff (asymmetric) [default: aff]
    #[arg(long)]
    framework: Option<String>,
    /// Fusion block: cat, bab, or aab [default: aab]
    #[arg(long)]
    block: Option<String>,
    /// Size preset; only 'toy' exists
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Settings file (key = value); flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<()> {
    let settings = Settings::load(args.config.as_deref())?;
    let framework =
        Framework::parse(&settings.resolve_raw("framework", args.framework.as_deref(), "aff"))?;
    let block = FusionKind::parse(&settings.resolve_raw("block", args.block.as_deref(), "aab"))?;
    if args.preset != "toy" {
        return Err(Error::Config(format!(
            "unknown preset '{}' (only 'toy' exists)",
            args.preset
        )));
    }

    let config = ModelConfig::toy(framework, block);
    let model = Model::build(&config, &TaskSchema::seven_point(), 0)?;
    let audit = model.param_audit();
    println!("{:<14} {:>10}", "framework", framework.as_str());
    println!("{:<14} {:>10}", "fusion", block.as_str());
    println!("{:<14} {:>10}", "preset", args.preset);
    print!("{}", audit.format());
    Ok(())
}
