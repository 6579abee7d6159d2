//! Run configuration: flat-sectioned `key = value` text.
//!
//! Every key can be overridden on the command line by a flag of the same
//! dotted name (`--dataset.n 500`). Files written back out (run manifests)
//! use a canonical key order, so a manifest is itself a loadable config and
//! diffs cleanly. Lines starting with `#` are comments; provenance records
//! are emitted as comments so they never affect a re-run.

use crate::dispel::{Ablation, DecaySchedule, GuidanceConfig};
use crate::sampler::SamplerVariant;
use crate::scenes::{AugmentMode, AugmentPolicy};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub guidance: GuidanceSection,
    pub eval: EvalSection,
    pub experiment: ExperimentSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub n: usize,
    pub size: usize,
    pub augment: AugmentMode,
    pub crop_lo: f32,
    pub crop_hi: f32,
    pub flip_prob: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub d_model: usize,
    pub self_layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSection {
    pub variant: SamplerVariant,
    pub steps: usize,
    pub n: usize,
    pub clip_x0: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSection {
    pub enabled: bool,
    pub alpha: f32,
    pub beta: f32,
    pub k: usize,
    pub t1: usize,
    pub alpha_t_start: f32,
    pub alpha_t_decay: DecaySchedule,
    pub sigma: f32,
    pub band_width: usize,
    pub inner_frac: f32,
    pub min_sep: usize,
    pub ablate: Ablation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub threshold: f32,
    pub margin: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSection {
    pub samples_per_epoch: usize,
    pub pairs: usize,
    pub base_epochs: usize,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            out: PathBuf::from("out"),
            dataset: DatasetSection {
                n: 2000,
                size: 32,
                augment: AugmentMode::None,
                crop_lo: 0.5,
                crop_hi: 0.9,
                flip_prob: 0.0,
            },
            model: ModelSection { d_model: 64, self_layers: 2 },
            train: TrainSection { epochs: 5, lr: 2e-3, batch_size: 16, resume: None },
            sampler: SamplerSection {
                variant: SamplerVariant::Ddim,
                steps: 50,
                n: 16,
                clip_x0: false,
            },
            guidance: GuidanceSection {
                enabled: false,
                alpha: 1.2,
                beta: 0.4,
                k: 10,
                t1: 45,
                alpha_t_start: 40.0,
                alpha_t_decay: DecaySchedule::LinearToZeroAtT1,
                sigma: 1.0,
                band_width: 2,
                inner_frac: 0.5,
                min_sep: 2,
                ablate: Ablation::None,
            },
            eval: EvalSection { threshold: 0.5, margin: 1 },
            experiment: ExperimentSection {
                samples_per_epoch: 500,
                pairs: 500,
                base_epochs: 2,
                checkpoint: None,
            },
        }
    }
}

/// All config keys in canonical (section, key) order.
pub const KEYS: &[&str] = &[
    "run.seed",
    "run.out",
    "dataset.n",
    "dataset.size",
    "dataset.augment",
    "dataset.crop_lo",
    "dataset.crop_hi",
    "dataset.flip_prob",
    "model.d_model",
    "model.self_layers",
    "train.epochs",
    "train.lr",
    "train.batch_size",
    "train.resume",
    "sampler.variant",
    "sampler.steps",
    "sampler.n",
    "sampler.clip_x0",
    "guidance.enabled",
    "guidance.alpha",
    "guidance.beta",
    "guidance.k",
    "guidance.t1",
    "guidance.alpha_t_start",
    "guidance.alpha_t_decay",
    "guidance.sigma",
    "guidance.band_width",
    "guidance.inner_frac",
    "guidance.min_sep",
    "guidance.ablate",
    "eval.threshold",
    "eval.margin",
    "experiment.samples_per_epoch",
    "experiment.pairs",
    "experiment.base_epochs",
    "experiment.checkpoint",
];

impl RunConfig {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };
        put("run.seed", self.seed.to_string());
        put("run.out", self.out.display().to_string());
        let d = &self.dataset;
        put("dataset.n", d.n.to_string());
        put("dataset.size", d.size.to_string());
        put(
            "dataset.augment",
            match d.augment {
                AugmentMode::None => "none".into(),
                AugmentMode::RandomCrop => "random_crop".into(),
            },
        );
        put("dataset.crop_lo", d.crop_lo.to_string());
        put("dataset.crop_hi", d.crop_hi.to_string());
        put("dataset.flip_prob", d.flip_prob.to_string());
        put("model.d_model", self.model.d_model.to_string());
        put("model.self_layers", self.model.self_layers.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put(
            "train.resume",
            self.train.resume.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put(
            "sampler.variant",
            match self.sampler.variant {
                SamplerVariant::Ddim => "ddim".into(),
                SamplerVariant::Ddpm => "ddpm".into(),
            },
        );
        put("sampler.steps", self.sampler.steps.to_string());
        put("sampler.n", self.sampler.n.to_string());
        put("sampler.clip_x0", self.sampler.clip_x0.to_string());
        let g = &self.guidance;
        put("guidance.enabled", g.enabled.to_string());
        put("guidance.alpha", g.alpha.to_string());
        put("guidance.beta", g.beta.to_string());
        put("guidance.k", g.k.to_string());
        put("guidance.t1", g.t1.to_string());
        put("guidance.alpha_t_start", g.alpha_t_start.to_string());
        put(
            "guidance.alpha_t_decay",
            match g.alpha_t_decay {
                DecaySchedule::LinearToZeroAtT1 => "linear".into(),
                DecaySchedule::Constant => "constant".into(),
            },
        );
        put("guidance.sigma", g.sigma.to_string());
        put("guidance.band_width", g.band_width.to_string());
        put("guidance.inner_frac", g.inner_frac.to_string());
        put("guidance.min_sep", g.min_sep.to_string());
        put(
            "guidance.ablate",
            match g.ablate {
                Ablation::None => "none".into(),
                Ablation::DropCross => "cross".into(),
                Ablation::DropSelf => "self".into(),
                Ablation::DropBoth => "both".into(),
            },
        );
        put("eval.threshold", self.eval.threshold.to_string());
        put("eval.margin", self.eval.margin.to_string());
        let e = &self.experiment;
        put("experiment.samples_per_epoch", e.samples_per_epoch.to_string());
        put("experiment.pairs", e.pairs.to_string());
        put("experiment.base_epochs", e.base_epochs.to_string());
        put(
            "experiment.checkpoint",
            e.checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        map
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        for key in map.keys() {
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
        }
        let defaults = RunConfig::default().to_map();
        let get = |key: &str| -> &str {
            map.get(key).map(|s| s.as_str()).unwrap_or_else(|| defaults[key].as_str())
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key).parse().map_err(|_| bad(key, get(key), "an unsigned integer"))
        };
        let parse_u64 = |key: &str| -> Result<u64> {
            get(key).parse().map_err(|_| bad(key, get(key), "an unsigned integer"))
        };
        let parse_f32 = |key: &str| -> Result<f32> {
            get(key).parse().map_err(|_| bad(key, get(key), "a number"))
        };
        let parse_bool = |key: &str| -> Result<bool> {
            match get(key) {
                "true" | "on" | "1" => Ok(true),
                "false" | "off" | "0" => Ok(false),
                other => Err(bad(key, other, "true/false")),
            }
        };
        let parse_path = |key: &str| -> Option<PathBuf> {
            let v = get(key);
            if v.is_empty() {
                None
            } else {
                Some(PathBuf::from(v))
            }
        };

        let config = RunConfig {
            seed: parse_u64("run.seed")?,
            out: PathBuf::from(get("run.out")),
            dataset: DatasetSection {
                n: parse_usize("dataset.n")?,
                size: parse_usize("dataset.size")?,
                augment: match get("dataset.augment") {
                    "none" => AugmentMode::None,
                    "random_crop" => AugmentMode::RandomCrop,
                    other => return Err(bad("dataset.augment", other, "none|random_crop")),
                },
                crop_lo: parse_f32("dataset.crop_lo")?,
                crop_hi: parse_f32("dataset.crop_hi")?,
                flip_prob: parse_f32("dataset.flip_prob")?,
            },
            model: ModelSection {
                d_model: parse_usize("model.d_model")?,
                self_layers: parse_usize("model.self_layers")?,
            },
            train: TrainSection {
                epochs: parse_usize("train.epochs")?,
                lr: parse_f32("train.lr")?,
                batch_size: parse_usize("train.batch_size")?,
                resume: parse_path("train.resume"),
            },
            sampler: SamplerSection {
                variant: match get("sampler.variant") {
                    "ddim" => SamplerVariant::Ddim,
                    "ddpm" => SamplerVariant::Ddpm,
                    other => return Err(bad("sampler.variant", other, "ddim|ddpm")),
                },
                steps: parse_usize("sampler.steps")?,
                n: parse_usize("sampler.n")?,
                clip_x0: parse_bool("sampler.clip_x0")?,
            },
            guidance: GuidanceSection {
                enabled: parse_bool("guidance.enabled")?,
                alpha: parse_f32("guidance.alpha")?,
                beta: parse_f32("guidance.beta")?,
                k: parse_usize("guidance.k")?,
                t1: parse_usize("guidance.t1")?,
                alpha_t_start: parse_f32("guidance.alpha_t_start")?,
                alpha_t_decay: match get("guidance.alpha_t_decay") {
                    "linear" => DecaySchedule::LinearToZeroAtT1,
                    "constant" => DecaySchedule::Constant,
                    other => return Err(bad("guidance.alpha_t_decay", other, "linear|constant")),
                },
                sigma: parse_f32("guidance.sigma")?,
                band_width: parse_usize("guidance.band_width")?,
                inner_frac: parse_f32("guidance.inner_frac")?,
                min_sep: parse_usize("guidance.min_sep")?,
                ablate: match get("guidance.ablate") {
                    "none" => Ablation::None,
                    "cross" => Ablation::DropCross,
                    "self" => Ablation::DropSelf,
                    "both" => Ablation::DropBoth,
                    other => return Err(bad("guidance.ablate", other, "none|cross|self|both")),
                },
            },
            eval: EvalSection {
                threshold: parse_f32("eval.threshold")?,
                margin: parse_usize("eval.margin")?,
            },
            experiment: ExperimentSection {
                samples_per_epoch: parse_usize("experiment.samples_per_epoch")?,
                pairs: parse_usize("experiment.pairs")?,
                base_epochs: parse_usize("experiment.base_epochs")?,
                checkpoint: parse_path("experiment.checkpoint"),
            },
        };
        config.validate()?;
        Ok(config)
    }

    /// Cross-section consistency; rejected before any side effect.
    pub fn validate(&self) -> Result<()> {
        if self.guidance.t1 >= self.sampler.steps {
            return Err(Error::Config(format!(
                "guidance.t1 {} must be below sampler.steps {}",
                self.guidance.t1, self.sampler.steps
            )));
        }
        if self.dataset.size < 16 || !self.dataset.size.is_multiple_of(crate::GRID) {
            return Err(Error::Config(format!(
                "dataset.size {} must be a multiple of {} and at least 16",
                self.dataset.size,
                crate::GRID
            )));
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!(
                "eval.threshold {} outside (0, 1)",
                self.eval.threshold
            )));
        }
        if self.eval.margin == 0 {
            return Err(Error::Config("eval.margin must be at least 1".into()));
        }
        if self.dataset.augment == AugmentMode::RandomCrop {
            self.augment_policy(0).validate().map_err(rewrap)?;
        }
        self.guidance_config(0).validate(self.sampler.steps).map_err(rewrap)?;
        self.denoiser_config().validate().map_err(rewrap)?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let map = self.to_map();
        let mut out = String::new();
        let mut current_section = "";
        for &key in KEYS {
            let (section, name) = key.split_once('.').unwrap();
            if section != current_section {
                if !current_section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current_section = section;
            }
            let _ = writeln!(out, "{name} = {}", map[key]);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_map(&parse_map(text)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Apply `key = value` overrides by dotted name.
    pub fn apply_overrides<'a>(
        &self,
        overrides: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut map = self.to_map();
        for (key, value) in overrides {
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            map.insert(key.to_string(), value.to_string());
        }
        Self::from_map(&map)
    }

    // ---- typed views ------------------------------------------------------

    pub fn augment_policy(&self, policy_seed: u64) -> AugmentPolicy {
        AugmentPolicy {
            mode: self.dataset.augment,
            crop_ratio_range: (self.dataset.crop_lo, self.dataset.crop_hi),
            flip_prob: self.dataset.flip_prob,
            seed: policy_seed,
        }
    }

    pub fn denoiser_config(&self) -> crate::denoiser::DenoiserConfig {
        crate::denoiser::DenoiserConfig {
            image_size: self.dataset.size,
            d_model: self.model.d_model,
            n_self_layers: self.model.self_layers,
            t_max: self.sampler.steps,
        }
    }

    pub fn guidance_config(&self, seed: u64) -> GuidanceConfig {
        let g = &self.guidance;
        GuidanceConfig {
            alpha: g.alpha,
            beta: g.beta,
            k: g.k,
            t1: g.t1,
            alpha_t_start: g.alpha_t_start,
            alpha_t_decay: g.alpha_t_decay,
            sigma: g.sigma,
            band_width: g.band_width,
            inner_frac: g.inner_frac,
            min_sep: g.min_sep,
            seed,
            ablate: g.ablate,
        }
    }

    pub fn train_config(&self, seed: u64) -> crate::denoiser::TrainConfig {
        crate::denoiser::TrainConfig {
            epochs: self.train.epochs,
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            seed,
        }
    }
}

fn bad(key: &str, value: &str, expected: &str) -> Error {
    Error::Config(format!("key '{key}': value '{value}' is not {expected}"))
}

fn rewrap(e: Error) -> Error {
    Error::Config(e.to_string())
}

fn parse_map(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                line_no + 1
            )));
        };
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {}: key outside any [section]",
                line_no + 1
            )));
        }
        map.insert(format!("{section}.{}", key.trim()), value.trim().to_string());
    }
    Ok(map)
}

/// sha256 hex digest, used for config and input provenance.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Render the run manifest: provenance comments plus the full resolved
/// config. The manifest is itself a valid config file.
pub fn render_manifest(config: &RunConfig, command: &str, inputs: &[(String, String)]) -> String {
    let body = config.to_text();
    let mut out = String::new();
    let _ = writeln!(out, "# run manifest");
    let _ = writeln!(out, "# command = {command}");
    let _ = writeln!(out, "# config_hash = {}", sha256_hex(body.as_bytes()));
    for (name, hash) in inputs {
        let _ = writeln!(out, "# input.{name} = {hash}");
    }
    out.push_str(&body);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_text() {
        let config = RunConfig::default();
        let text = config.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(config, back);
        // Canonical render is stable.
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn overrides_apply_by_dotted_name() {
        let config = RunConfig::default();
        let patched = config
            .apply_overrides([("dataset.n", "100"), ("guidance.enabled", "true")])
            .unwrap();
        assert_eq!(patched.dataset.n, 100);
        assert!(patched.guidance.enabled);
        assert!(config.apply_overrides([("dataset.bogus", "1")]).is_err());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            RunConfig::from_text("[dataset]\nn = twelve\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_text("[dataset]\nmystery = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_text("n = 2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn cross_section_validation() {
        let config = RunConfig::default();
        assert!(config.apply_overrides([("guidance.t1", "50")]).is_err());
        assert!(config.apply_overrides([("sampler.steps", "40")]).is_err()); // t1 45 >= 40
        assert!(config.apply_overrides([("dataset.size", "30")]).is_err());
        assert!(config
            .apply_overrides([("sampler.steps", "40"), ("guidance.t1", "35")])
            .is_ok());
    }

    #[test]
    fn manifest_is_a_loadable_config() {
        let config = RunConfig::default();
        let manifest = render_manifest(
            &config,
            "sample",
            &[("checkpoint".into(), "abc123".into())],
        );
        let back = RunConfig::from_text(&manifest).unwrap();
        assert_eq!(config, back);
        assert!(manifest.contains("# input.checkpoint = abc123"));
    }
}
