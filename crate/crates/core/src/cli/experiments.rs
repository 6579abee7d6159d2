//! The three headline experiments.
//!
//! `crop_trend` fine-tunes twin models from a shared lightly-pretrained base
//! on the same scenes, once with RandomCrop and once without, sampling after
//! every epoch to follow the incompleteness rate. `guidance_ab` draws
//! seed-paired samples from the crop-trained model with guidance off and on.
//! `ablation` repeats the paired comparison with each constraint term
//! dropped.
//!
//! Report files are deterministic; wall-clock timings go to a separate
//! `timing.txt` because they can never reproduce bit-exactly.

use super::commands::{build_dataset, ensure_out_dir, hash_file, load_model_for, sample_batch};
use super::config::{render_manifest, RunConfig};
use crate::denoiser::{save_checkpoint, train_with, DenoiserParams, TrainConfig};
use crate::dispel::Ablation;
use crate::img::Image;
use crate::metrics::{self, TrendVerdict};
use crate::rng;
use crate::scenes::AugmentMode;
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentName {
    CropTrend,
    GuidanceAb,
    Ablation,
}

impl ExperimentName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "crop_trend" => Ok(ExperimentName::CropTrend),
            "guidance_ab" => Ok(ExperimentName::GuidanceAb),
            "ablation" => Ok(ExperimentName::Ablation),
            other => Err(Error::Usage(format!(
                "unknown experiment '{other}' (expected crop_trend | guidance_ab | ablation)"
            ))),
        }
    }
}

pub fn cmd_experiment(name: ExperimentName, config: &RunConfig) -> Result<()> {
    match name {
        ExperimentName::CropTrend => crop_trend(config),
        ExperimentName::GuidanceAb => guidance_ab(config),
        ExperimentName::Ablation => ablation(config),
    }
}

fn rate_of(images: &[Image], config: &RunConfig) -> Result<f64> {
    let report = metrics::incompleteness_rate(
        images.iter().enumerate().map(|(i, img)| (i.to_string(), img)),
        config.eval.threshold,
        config.eval.margin,
    )?;
    Ok(report.rate)
}

fn sample_warning(config: &RunConfig, n: usize, summary: &mut String) {
    if n < 100 {
        let _ = writeln!(
            summary,
            "warning = sample count {n} below 100; rates are statistically weak"
        );
    }
    let _ = config;
}

/// Base model shared by the twins: fresh init plus `base_epochs` of no-crop
/// pretraining, mirroring a fine-tuning setup that starts from a model
/// without the crop bias.
fn pretrained_base(config: &RunConfig) -> Result<DenoiserParams> {
    let mut params = DenoiserParams::init(
        config.denoiser_config(),
        rng::derive_seed(config.seed, "model-init", 0),
    )?;
    if config.experiment.base_epochs > 0 {
        let mut no_crop = config.clone();
        no_crop.dataset.augment = AugmentMode::None;
        let dataset = build_dataset(&no_crop)?;
        let tc = TrainConfig {
            epochs: config.experiment.base_epochs,
            seed: rng::derive_seed(config.seed, "train-base", 0),
            ..config.train_config(0)
        };
        train_with(&dataset, &mut params, &tc, 0, |epoch, _, loss| {
            println!("base pretrain epoch {epoch}: loss {loss:.5}");
        })?;
    }
    Ok(params)
}

/// The crop-trained model used by guidance_ab and ablation: loaded from
/// `experiment.checkpoint` when given, otherwise trained in-run with the same
/// recipe as crop_trend's crop twin.
fn crop_model(config: &RunConfig, out: &Path) -> Result<(DenoiserParams, Vec<(String, String)>)> {
    if let Some(path) = &config.experiment.checkpoint {
        let inputs = vec![("checkpoint".to_string(), hash_file(path)?)];
        return Ok((load_model_for(config, path)?, inputs));
    }
    let mut params = pretrained_base(config)?;
    let mut crop_cfg = config.clone();
    crop_cfg.dataset.augment = AugmentMode::RandomCrop;
    let dataset = build_dataset(&crop_cfg)?;
    let tc = config.train_config(rng::derive_seed(config.seed, "train-crop", 0));
    train_with(&dataset, &mut params, &tc, config.experiment.base_epochs, |epoch, _, loss| {
        println!("crop fine-tune epoch {epoch}: loss {loss:.5}");
    })?;
    save_checkpoint(
        &params,
        (config.experiment.base_epochs + config.train.epochs) as u32,
        &out.join("crop_model.ckpt"),
    )?;
    Ok((params, Vec::new()))
}

fn crop_trend(config: &RunConfig) -> Result<()> {
    let out = ensure_out_dir(config)?;
    write_manifest_for(config, "experiment crop_trend", &[], &out)?;
    let per_epoch = config.experiment.samples_per_epoch;

    let base = pretrained_base(config)?;
    let mut rates_csv = String::from("variant,epoch,rate,train_loss\n");
    let mut verdicts = Vec::new();

    for (variant, mode) in
        [("crop", AugmentMode::RandomCrop), ("no_crop", AugmentMode::None)]
    {
        let mut variant_cfg = config.clone();
        variant_cfg.dataset.augment = mode;
        let dataset = build_dataset(&variant_cfg)?;
        let mut params = base.clone();
        let tc = config.train_config(rng::derive_seed(config.seed, "train-crop", 0));

        let mut series: Vec<(usize, f64)> = Vec::new();
        let mut sample_err: Option<Error> = None;
        train_with(
            &dataset,
            &mut params,
            &tc,
            config.experiment.base_epochs,
            |epoch, snapshot, loss| {
                if sample_err.is_some() {
                    return;
                }
                let rel_epoch = epoch - config.experiment.base_epochs;
                let root = rng::derive_seed(
                    config.seed,
                    &format!("trend-{variant}"),
                    rel_epoch as u64,
                );
                match sample_batch(snapshot, config, per_epoch, root, None)
                    .and_then(|results| {
                        let images: Vec<Image> =
                            results.into_iter().map(|(img, _)| img).collect();
                        rate_of(&images, config)
                    }) {
                    Ok(rate) => {
                        println!(
                            "{variant} epoch {rel_epoch}: loss {loss:.5}, \
                             incompleteness rate {rate:.4}"
                        );
                        let _ = writeln!(rates_csv, "{variant},{rel_epoch},{rate},{loss}");
                        series.push((rel_epoch, rate));
                    }
                    Err(e) => sample_err = Some(e),
                }
            },
        )?;
        if let Some(e) = sample_err {
            return Err(e);
        }
        let verdict = metrics::trend_report(&series)?;
        verdicts.push((variant, verdict));
        if variant == "crop" {
            save_checkpoint(
                &params,
                (config.experiment.base_epochs + config.train.epochs) as u32,
                &out.join("crop_model.ckpt"),
            )?;
        }
    }

    std::fs::write(out.join("rates.csv"), rates_csv)?;
    let mut summary = String::from("[crop_trend]\n");
    for (variant, verdict) in &verdicts {
        let _ = writeln!(summary, "{variant}_trend = {verdict}");
    }
    sample_warning(config, per_epoch, &mut summary);
    std::fs::write(out.join("experiment_summary.cfg"), &summary)?;
    print!("{summary}");
    Ok(())
}

struct Arm {
    name: &'static str,
    guidance: Option<Ablation>,
}

/// Sample every arm over shared per-index seeds and report paired rates.
fn paired_arms(
    config: &RunConfig,
    params: &DenoiserParams,
    arms: &[Arm],
    out: &Path,
    summary_header: &str,
) -> Result<Vec<(String, f64)>> {
    let pairs = config.experiment.pairs;
    let root = rng::derive_seed(config.seed, "paired", 0);

    let mut rates = Vec::new();
    let mut pair_flags: Vec<Vec<bool>> = Vec::new();
    let mut timing = String::new();
    for arm in arms {
        let start = Instant::now();
        let results = sample_batch(params, config, pairs, root, arm.guidance)?;
        let elapsed = start.elapsed().as_secs_f64();
        let images: Vec<Image> = results.into_iter().map(|(img, _)| img).collect();
        let rate = rate_of(&images, config)?;
        let _ = writeln!(
            timing,
            "{} = {:.3} s total, {:.4} s/image",
            arm.name,
            elapsed,
            elapsed / pairs as f64
        );
        pair_flags.push(
            images
                .iter()
                .map(|img| {
                    metrics::border_contact(img, config.eval.threshold, config.eval.margin)
                        == metrics::BorderVerdict::Contact
                })
                .collect(),
        );
        println!("{}: rate {rate:.4} ({elapsed:.1}s)", arm.name);
        rates.push((arm.name.to_string(), rate));
    }

    let mut pairs_csv = String::from("index,class");
    for arm in arms {
        let _ = write!(pairs_csv, ",{}", arm.name);
    }
    pairs_csv.push('\n');
    for i in 0..pairs {
        let class = crate::scenes::CLASSES[i % crate::scenes::CLASSES.len()];
        let _ = write!(pairs_csv, "{i},{class}");
        for flags in &pair_flags {
            let _ = write!(pairs_csv, ",{}", flags[i] as u8);
        }
        pairs_csv.push('\n');
    }
    std::fs::write(out.join("pairs.csv"), pairs_csv)?;

    let mut summary = format!("[{summary_header}]\n");
    for (name, rate) in &rates {
        let _ = writeln!(summary, "rate_{name} = {rate}");
    }
    sample_warning(config, pairs, &mut summary);
    std::fs::write(out.join("experiment_summary.cfg"), &summary)?;
    std::fs::write(out.join("timing.txt"), timing)?;
    print!("{summary}");
    Ok(rates)
}

fn guidance_ab(config: &RunConfig) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let (params, inputs) = crop_model(config, &out)?;
    write_manifest_for(config, "experiment guidance_ab", &inputs, &out)?;
    let arms = [
        Arm { name: "unguided", guidance: None },
        Arm { name: "guided", guidance: Some(config.guidance.ablate) },
    ];
    let rates = paired_arms(config, &params, &arms, &out, "guidance_ab")?;
    let ratio = rates[1].1 / rates[0].1.max(f64::MIN_POSITIVE);
    let mut summary = std::fs::read_to_string(out.join("experiment_summary.cfg"))?;
    let _ = writeln!(summary, "guided_over_unguided = {ratio}");
    std::fs::write(out.join("experiment_summary.cfg"), &summary)?;
    println!("guided/unguided rate ratio = {ratio:.4}");
    Ok(())
}

fn ablation(config: &RunConfig) -> Result<()> {
    let out = ensure_out_dir(config)?;
    let (params, inputs) = crop_model(config, &out)?;
    write_manifest_for(config, "experiment ablation", &inputs, &out)?;
    let arms = [
        Arm { name: "unguided", guidance: None },
        Arm { name: "full", guidance: Some(Ablation::None) },
        Arm { name: "drop_cross", guidance: Some(Ablation::DropCross) },
        Arm { name: "drop_self", guidance: Some(Ablation::DropSelf) },
    ];
    let rates = paired_arms(config, &params, &arms, &out, "ablation")?;
    let by_name = |n: &str| rates.iter().find(|(name, _)| name == n).unwrap().1;
    let (unguided, full) = (by_name("unguided"), by_name("full"));
    let mut summary = std::fs::read_to_string(out.join("experiment_summary.cfg"))?;
    for arm in ["drop_cross", "drop_self"] {
        let r = by_name(arm);
        let ordered = full < r && r < unguided;
        let _ = writeln!(summary, "{arm}_between_full_and_unguided = {ordered}");
    }
    std::fs::write(out.join("experiment_summary.cfg"), &summary)?;
    Ok(())
}

fn write_manifest_for(
    config: &RunConfig,
    command: &str,
    inputs: &[(String, String)],
    out: &Path,
) -> Result<()> {
    std::fs::write(out.join("run_manifest.cfg"), render_manifest(config, command, inputs))?;
    Ok(())
}

/// Trend verdict pair from a finished crop_trend run directory.
pub fn read_trend_verdicts(out: &Path) -> Result<(TrendVerdict, TrendVerdict)> {
    let text = std::fs::read_to_string(out.join("experiment_summary.cfg"))?;
    let mut crop = None;
    let mut no_crop = None;
    for line in text.lines() {
        let parse = |v: &str| match v.trim() {
            "increasing" => Some(TrendVerdict::Increasing),
            "decreasing" => Some(TrendVerdict::Decreasing),
            _ => Some(TrendVerdict::Neither),
        };
        if let Some(v) = line.strip_prefix("crop_trend = ") {
            crop = parse(v);
        }
        if let Some(v) = line.strip_prefix("no_crop_trend = ") {
            no_crop = parse(v);
        }
    }
    match (crop, no_crop) {
        (Some(c), Some(n)) => Ok((c, n)),
        _ => Err(Error::Validation("missing trend verdicts in summary".into())),
    }
}
