//! Command-line interface.
//!
//! Subcommands: `gen-data`, `train`, `sample CHECKPOINT`, `eval IMAGE_DIR`,
//! `experiment NAME`. Configuration comes from `--config FILE` (defaults
//! otherwise), every key is overridable via `--section.key VALUE`, and a few
//! convenience flags map onto common keys. Every command writes a
//! `run_manifest.cfg` holding the fully resolved configuration; re-running a
//! command from its manifest reproduces its outputs bit-exactly.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 runtime or numeric error.

pub mod commands;
pub mod config;
pub mod experiments;

pub use config::RunConfig;

use crate::Result;
use clap::{Arg, ArgMatches, Command};
use std::path::PathBuf;

fn with_common_args(cmd: Command) -> Command {
    let mut cmd = cmd
        .arg(Arg::new("config").long("config").value_name("PATH").help("Config file to start from"))
        .arg(Arg::new("seed").long("seed").value_name("U64").help("Root seed (run.seed)"))
        .arg(Arg::new("out").long("out").value_name("DIR").help("Output directory (run.out)"))
        .arg(
            Arg::new("guidance")
                .long("guidance")
                .value_name("on|off")
                .help("Enable or disable guidance (guidance.enabled)"),
        )
        .arg(
            Arg::new("ablate")
                .long("ablate")
                .value_name("cross|self|none")
                .help("Drop a guidance term (guidance.ablate)"),
        )
        .arg(
            Arg::new("n")
                .long("n")
                .value_name("INT")
                .help("Sample/image count for this command"),
        );
    for &key in config::KEYS {
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE").hide(true));
    }
    // Repeated flags follow last-wins semantics.
    let ids: Vec<String> = cmd.get_arguments().map(|a| a.get_id().to_string()).collect();
    for id in ids {
        cmd = cmd.mut_arg(id.as_str(), |a| {
            let id = a.get_id().clone();
            a.overrides_with(id)
        });
    }
    cmd
}

fn build_cli() -> Command {
    let common = |name: &'static str, about: &'static str| {
        with_common_args(Command::new(name).about(about))
    };
    Command::new("intact")
        .about("Toy diffusion lab: crop-induced object truncation and its dispelling fix")
        .after_help(
            "Any config key can be overridden with a flag of the same dotted name, \
             e.g. --dataset.n 500 --guidance.alpha 1.2 (see the run manifest for \
             the full key list).",
        )
        .subcommand_required(true)
        .subcommand(common("gen-data", "Generate the synthetic scene dataset"))
        .subcommand(common("train", "Train the denoiser on the configured dataset"))
        .subcommand(
            common("sample", "Sample images from a trained checkpoint").arg(
                Arg::new("checkpoint")
                    .value_name("CHECKPOINT")
                    .required(true)
                    .help("Checkpoint file to sample from"),
            ),
        )
        .subcommand(
            common("eval", "Evaluate object completeness over an image directory").arg(
                Arg::new("image_dir")
                    .value_name("IMAGE_DIR")
                    .required(true)
                    .help("Directory of .pgm images"),
            ),
        )
        .subcommand(
            common("experiment", "Run a named experiment").arg(
                Arg::new("name")
                    .value_name("NAME")
                    .required(true)
                    .help("crop_trend | guidance_ab | ablation"),
            ),
        )
}

/// Resolve the effective config: file (or defaults), then dotted-key
/// overrides, then convenience flags. `n_key` names the config key the
/// command's `--n` flag maps to.
fn resolve_config(matches: &ArgMatches, n_key: Option<&str>) -> Result<RunConfig> {
    let base = match matches.get_one::<String>("config") {
        Some(path) => RunConfig::load(std::path::Path::new(path))?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<(String, String)> = Vec::new();
    for &key in config::KEYS {
        if let Some(value) = matches.get_one::<String>(key) {
            overrides.push((key.to_string(), value.clone()));
        }
    }
    if let Some(seed) = matches.get_one::<String>("seed") {
        overrides.push(("run.seed".into(), seed.clone()));
    }
    if let Some(out) = matches.get_one::<String>("out") {
        overrides.push(("run.out".into(), out.clone()));
    }
    if let Some(v) = matches.get_one::<String>("guidance") {
        let enabled = match v.as_str() {
            "on" => "true",
            "off" => "false",
            other => {
                return Err(crate::Error::Config(format!(
                    "--guidance expects on|off, got '{other}'"
                )))
            }
        };
        overrides.push(("guidance.enabled".into(), enabled.into()));
    }
    if let Some(v) = matches.get_one::<String>("ablate") {
        overrides.push(("guidance.ablate".into(), v.clone()));
    }
    if let Some(v) = matches.get_one::<String>("n") {
        let key = n_key.ok_or_else(|| {
            crate::Error::Config("--n is not meaningful for this command".into())
        })?;
        overrides.push((key.to_string(), v.clone()));
    }
    base.apply_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

/// Parse arguments and dispatch. Separated from `main` so tests can drive the
/// CLI in-process.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match build_cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(crate::Error::Config(e.render().to_string())),
    };
    dispatch(&matches)
}

fn dispatch(matches: &ArgMatches) -> Result<()> {
    match matches.subcommand() {
        Some(("gen-data", sub)) => {
            let config = resolve_config(sub, Some("dataset.n"))?;
            commands::cmd_gen_data(&config)
        }
        Some(("train", sub)) => {
            let config = resolve_config(sub, Some("dataset.n"))?;
            commands::cmd_train(&config)
        }
        Some(("sample", sub)) => {
            let config = resolve_config(sub, Some("sampler.n"))?;
            let checkpoint = PathBuf::from(sub.get_one::<String>("checkpoint").unwrap());
            commands::cmd_sample(&config, &checkpoint)
        }
        Some(("eval", sub)) => {
            let config = resolve_config(sub, None)?;
            let dir = PathBuf::from(sub.get_one::<String>("image_dir").unwrap());
            commands::cmd_eval(&config, &dir)
        }
        Some(("experiment", sub)) => {
            let name =
                experiments::ExperimentName::parse(sub.get_one::<String>("name").unwrap())?;
            let n_key = match name {
                experiments::ExperimentName::CropTrend => "experiment.samples_per_epoch",
                _ => "experiment.pairs",
            };
            let config = resolve_config(sub, Some(n_key))?;
            experiments::cmd_experiment(name, &config)
        }
        _ => unreachable!("subcommand is required"),
    }
}

/// Entry point for the binary: maps errors to exit codes.
pub fn main() -> i32 {
    match run(std::env::args_os()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
