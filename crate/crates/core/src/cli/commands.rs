//! Subcommand bodies: dataset generation, training, sampling, evaluation.

use super::config::{render_manifest, sha256_hex, RunConfig};
use crate::denoiser::{
    load_checkpoint, save_checkpoint, train_with, DenoiserParams, NoiseSchedule,
};
use crate::img::Image;
use crate::metrics;
use crate::rng;
use crate::sampler::{sample, SamplerConfig, StepTrace};
use crate::scenes::{make_dataset, DatasetItem, PromptTokens, CLASSES};
use crate::{Error, Result};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub(crate) fn ensure_out_dir(config: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.out)?;
    Ok(config.out.clone())
}

fn write_manifest(
    config: &RunConfig,
    command: &str,
    inputs: &[(String, String)],
    out: &Path,
) -> Result<()> {
    std::fs::write(out.join("run_manifest.cfg"), render_manifest(config, command, inputs))?;
    Ok(())
}

pub(crate) fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Dataset construction shared by gen-data, train, and the experiments: the
/// geometry stream comes from the run seed, the augmentation stream from its
/// own domain, so crop/no-crop variants share identical underlying scenes.
pub(crate) fn build_dataset(config: &RunConfig) -> Result<Vec<DatasetItem>> {
    let policy = config.augment_policy(rng::derive_seed(config.seed, "augment", 0));
    make_dataset(
        config.dataset.n,
        &policy,
        config.dataset.size,
        rng::derive_seed(config.seed, "scenes", 0),
    )
}

pub fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let items = build_dataset(config)?;
    crate::scenes::export_dataset(&items, &out)?;
    write_manifest(config, "gen-data", &[], &out)?;
    let contacts = items
        .iter()
        .filter(|i| {
            metrics::border_contact(&i.image, config.eval.threshold, config.eval.margin)
                == metrics::BorderVerdict::Contact
        })
        .count();
    println!(
        "wrote {} images to {} (border contact {}/{})",
        items.len(),
        out.display(),
        contacts,
        items.len()
    );
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let dataset = build_dataset(config)?;

    let mut inputs = Vec::new();
    let (mut params, start_epoch) = match &config.train.resume {
        Some(path) => {
            inputs.push(("resume".to_string(), hash_file(path)?));
            let (params, epochs) = load_checkpoint(path)?;
            if params.config != config.denoiser_config() {
                return Err(Error::Config(format!(
                    "checkpoint model {:?} does not match configured {:?}",
                    params.config,
                    config.denoiser_config()
                )));
            }
            (params, epochs as usize)
        }
        None => (
            DenoiserParams::init(
                config.denoiser_config(),
                rng::derive_seed(config.seed, "model-init", 0),
            )?,
            0,
        ),
    };
    write_manifest(config, "train", &inputs, &out)?;

    let tc = config.train_config(rng::derive_seed(config.seed, "train", 0));
    let mut curve_csv = String::from("epoch,loss\n");
    let curve = train_with(&dataset, &mut params, &tc, start_epoch, |epoch, _, loss| {
        let _ = writeln!(curve_csv, "{epoch},{loss}");
        println!("epoch {epoch}: loss {loss:.5}");
    })?;

    save_checkpoint(&params, (start_epoch + tc.epochs) as u32, &out.join("checkpoint.ckpt"))?;
    std::fs::write(out.join("loss_curve.csv"), curve_csv)?;
    println!(
        "trained {} epochs on {} images; checkpoint at {}",
        curve.len(),
        dataset.len(),
        out.join("checkpoint.ckpt").display()
    );
    Ok(())
}

/// Deterministic per-index sampling fan-out. Prompts cycle the object
/// classes; each index derives its own sampler and guidance streams from
/// `root`, so results are independent of worker scheduling.
pub(crate) fn sample_batch(
    params: &DenoiserParams,
    config: &RunConfig,
    n: usize,
    root: u64,
    guidance: Option<crate::dispel::Ablation>,
) -> Result<Vec<(Image, StepTrace)>> {
    let schedule = NoiseSchedule::default_linear(config.sampler.steps)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let tokens = PromptTokens::for_class(CLASSES[i % CLASSES.len()]);
            let guidance_cfg = guidance.map(|ablate| {
                let mut g = config.guidance_config(rng::derive_seed(root, "guidance", i as u64));
                g.ablate = ablate;
                g
            });
            let sampler_cfg = SamplerConfig {
                schedule: schedule.clone(),
                variant: config.sampler.variant,
                seed: rng::derive_seed(root, "sample", i as u64),
                guidance: guidance_cfg,
                clip_x0: config.sampler.clip_x0,
            };
            sample(&tokens, params, &sampler_cfg)
        })
        .collect()
}

pub(crate) fn load_model_for(config: &RunConfig, path: &Path) -> Result<DenoiserParams> {
    let (params, _) = load_checkpoint(path)?;
    if params.config != config.denoiser_config() {
        return Err(Error::Config(format!(
            "checkpoint model {:?} does not match configured {:?}",
            params.config,
            config.denoiser_config()
        )));
    }
    Ok(params)
}

pub fn cmd_sample(config: &RunConfig, checkpoint: &Path) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let params = load_model_for(config, checkpoint)?;
    write_manifest(
        config,
        "sample",
        &[("checkpoint".to_string(), hash_file(checkpoint)?)],
        &out,
    )?;

    let guidance = config.guidance.enabled.then_some(config.guidance.ablate);
    let results = sample_batch(&params, config, config.sampler.n, config.seed, guidance)?;

    let image_dir = out.join("samples");
    let trace_dir = out.join("traces");
    std::fs::create_dir_all(&image_dir)?;
    std::fs::create_dir_all(&trace_dir)?;
    for (i, (image, trace)) in results.iter().enumerate() {
        image.write_pgm(&image_dir.join(format!("{i:06}.pgm")))?;
        std::fs::write(trace_dir.join(format!("{i:06}.csv")), trace.to_csv())?;
    }
    let guided: usize = results.iter().map(|(_, t)| t.guided_steps).sum();
    println!(
        "sampled {} images to {} (guidance {}, {} guided steps total)",
        results.len(),
        image_dir.display(),
        if config.guidance.enabled { "on" } else { "off" },
        guided
    );
    Ok(())
}

pub fn cmd_eval(config: &RunConfig, image_dir: &Path) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let mut names: Vec<PathBuf> = std::fs::read_dir(image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!(
            "no .pgm images under {}",
            image_dir.display()
        )));
    }
    let images: Vec<(String, Image)> = names
        .iter()
        .map(|p| {
            Ok((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                Image::read_pgm(p)?,
            ))
        })
        .collect::<Result<_>>()?;
    let report = metrics::incompleteness_rate(
        images.iter().map(|(n, i)| (n.clone(), i)),
        config.eval.threshold,
        config.eval.margin,
    )?;

    // Input digest: names and bytes of everything evaluated.
    let mut hasher_input = Vec::new();
    for (name, _) in &images {
        hasher_input.extend_from_slice(name.as_bytes());
        hasher_input.extend_from_slice(&std::fs::read(image_dir.join(name))?);
    }
    let input_hash = sha256_hex(&hasher_input);
    write_manifest(config, "eval", &[("images".to_string(), input_hash.clone())], &out)?;

    std::fs::write(out.join("report.csv"), report.to_csv())?;
    let config_hash = sha256_hex(config.to_text().as_bytes());
    let summary = format!(
        "[summary]\nrate = {}\nn = {}\nno_object = {}\nconfig_hash = {}\ninput_hash = {}\n",
        report.rate, report.n, report.no_object, config_hash, input_hash
    );
    std::fs::write(out.join("eval_summary.cfg"), summary)?;
    println!(
        "incompleteness rate {:.4} over {} images ({} without objects)",
        report.rate, report.n, report.no_object
    );
    Ok(())
}
