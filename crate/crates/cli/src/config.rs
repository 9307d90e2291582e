//! Key-value pipeline configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file (`--config`
//! or `$DEOCC_CONFIG`), `--set key=value` overrides, dedicated flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use deocc_core::deocc_gan::{ArchDescriptor, LossWeights, TrainConfig};
use deocc_core::occlusion_synth::DatasetConfig;
use deocc_core::sfs_refine::SfsConfig;
use deocc_core::{FitConfig, SyntheticModelSpec};

pub const CONFIG_ENV: &str = "DEOCC_CONFIG";

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Model file; a synthetic model is generated from `model_spec` when unset.
    pub model_path: Option<PathBuf>,
    /// Sprite directory; the procedural library is used when unset.
    pub sprites_dir: Option<PathBuf>,
    pub sprite_seed: u64,
    pub resolution: usize,
    pub model_spec: SyntheticModelSpec,
    pub fit: FitConfig,
    pub dataset: DatasetConfig,
    pub arch: ArchDescriptor,
    pub arch_seed: u64,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub sfs: SfsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            sprites_dir: None,
            sprite_seed: 0,
            resolution: 64,
            model_spec: SyntheticModelSpec::default(),
            fit: FitConfig::default(),
            dataset: DatasetConfig::default(),
            arch: ArchDescriptor::default(),
            arch_seed: 0,
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            sfs: SfsConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| anyhow!("bad value `{value}` for `{key}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("bad value `{value}` for `{key}`: expected true or false"),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model_path" => self.model_path = Some(v.into()),
            "sprites_dir" => self.sprites_dir = Some(v.into()),
            "sprite_seed" => self.sprite_seed = parse(key, v)?,
            "resolution" => self.resolution = parse(key, v)?,
            "model.seed" => self.model_spec.seed = parse(key, v)?,
            "model.n_grid" => self.model_spec.n_grid = parse(key, v)?,
            "model.k_id" => self.model_spec.k_id = parse(key, v)?,
            "model.k_exp" => self.model_spec.k_exp = parse(key, v)?,
            "fit.rho1" => self.fit.rho1 = parse(key, v)?,
            "fit.rho2" => self.fit.rho2 = parse(key, v)?,
            "fit.max_iters" => self.fit.max_iters = parse(key, v)?,
            "fit.damping_init" => self.fit.lm_damping_init = parse(key, v)?,
            "fit.damping_up" => self.fit.damping_up = parse(key, v)?,
            "fit.damping_down" => self.fit.damping_down = parse(key, v)?,
            "fit.tol" => self.fit.convergence_tol = parse(key, v)?,
            "dataset.train_count" => self.dataset.train_count = parse(key, v)?,
            "dataset.test_count" => self.dataset.test_count = parse(key, v)?,
            "dataset.seed" => self.dataset.seed = parse(key, v)?,
            "dataset.classes" => self.dataset.classes = parse_list(key, v)?,
            "dataset.eval_classes_in_test" => self.dataset.evaluation_classes_in_test = parse_bool(key, v)?,
            "dataset.max_yaw_deg" => self.dataset.max_yaw_deg = parse(key, v)?,
            "dataset.max_pitch_deg" => self.dataset.max_pitch_deg = parse(key, v)?,
            "dataset.max_roll_deg" => self.dataset.max_roll_deg = parse(key, v)?,
            "dataset.max_attempts" => self.dataset.max_attempts = parse(key, v)?,
            "arch.gen_channels" => self.arch.gen_channels = parse_list(key, v)?,
            "arch.disc_channels" => self.arch.disc_channels = parse_list(key, v)?,
            "arch.seed" => self.arch_seed = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.stage1_lr" => self.train.stage1_lr = parse(key, v)?,
            "train.stage1_epochs" => self.train.stage1_epochs = parse(key, v)?,
            "train.stage2_lr" => self.train.stage2_lr = parse(key, v)?,
            "train.stage2_epochs" => self.train.stage2_epochs = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.adam_eps" => self.train.adam_eps = parse(key, v)?,
            "train.seed" => self.train.rng_seed = parse(key, v)?,
            "train.checkpoint_interval" => self.train.checkpoint_interval = parse(key, v)?,
            "train.augment" => self.train.augment = parse_bool(key, v)?,
            "train.augment_pad" => self.train.augment_pad = parse(key, v)?,
            "loss.lambda1" => self.weights.lambda1 = parse(key, v)?,
            "loss.lambda2" => self.weights.lambda2 = parse(key, v)?,
            "loss.lambda3" => self.weights.lambda3 = parse(key, v)?,
            "loss.lambda4" => self.weights.lambda4 = parse(key, v)?,
            "loss.lambda5" => self.weights.lambda5 = parse(key, v)?,
            "loss.lambda6" => self.weights.lambda6 = parse(key, v)?,
            "sfs.fidelity_weight" => self.sfs.fidelity_weight = parse(key, v)?,
            "sfs.smoothness" => self.sfs.smoothness = parse(key, v)?,
            "sfs.nz_min" => self.sfs.nz_min = parse(key, v)?,
            "sfs.stencil" => self.sfs.stencil = parse(key, v)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not `key=value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Copies the shared resolution into the components and validates them.
    pub fn finish(mut self) -> Result<Self> {
        self.dataset.resolution = self.resolution;
        self.arch.resolution = self.resolution;
        self.train.image_resolution = self.resolution;
        self.dataset.fit = self.fit;
        self.fit.validate()?;
        self.arch.validate()?;
        self.weights.validate()?;
        self.sfs.validate()?;
        Ok(self)
    }

    /// The train configuration is validated only where training happens,
    /// since it requires a larger resolution than inference.
    pub fn validated_train(&self) -> Result<&TrainConfig> {
        self.train.validate()?;
        Ok(&self.train)
    }
}
