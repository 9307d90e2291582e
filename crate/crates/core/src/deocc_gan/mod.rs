//! Synthesis-conditioned de-occlusion GAN: a U-Net generator fed with the
//! occluded image and the rendered model, a global discriminator on whole
//! images, a local discriminator on mask-gated images, their losses and the
//! two-stage training schedule.

mod checkpoint;
mod discriminator;
mod generator;
mod layers;
mod losses;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use discriminator::{DiscCache, Discriminator};
pub use generator::{GenCache, Generator, GENERATOR_IN_CHANNELS};
pub use layers::Mode;
pub use losses::{
    bce_fake, bce_real, discriminator_gradients, discriminator_losses, generator_gradients,
    generator_loss, l1_loss, tv_loss, LossComponents, LOG_CLAMP,
};
pub use train::{train, EpochLog, TrainConfig, Trainer};

use std::fmt;

use crate::error::{Error, Result};
use crate::imaging::{FaceMask, ImageRGB};
use crate::nn::Tensor;

/// Network shape stored with every checkpoint and validated on load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchDescriptor {
    pub resolution: usize,
    /// Encoder widths, outermost first; the length is the U-Net depth.
    pub gen_channels: Vec<usize>,
    /// Widths of the discriminator hidden convolutions.
    pub disc_channels: Vec<usize>,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            resolution: 64,
            gen_channels: vec![32, 64, 128, 256],
            disc_channels: vec![32, 64, 128, 256, 256, 256, 256],
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 4 || !r.is_power_of_two() {
            return Err(Error::Architecture(format!("resolution {r} is not a power of two >= 4")));
        }
        let levels = r.trailing_zeros() as usize;
        if self.gen_channels.is_empty() || self.gen_channels.len() > levels {
            return Err(Error::Architecture(format!(
                "generator depth {} must be in 1..={levels} at resolution {r}",
                self.gen_channels.len()
            )));
        }
        if self.disc_channels.is_empty() {
            return Err(Error::Architecture("discriminator needs at least one layer".into()));
        }
        if self.gen_channels.iter().chain(&self.disc_channels).any(|&c| c == 0) {
            return Err(Error::Architecture("channel widths must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "resolution {}\ngen_channels {}\ndisc_channels {}\n",
            self.resolution,
            join(&self.gen_channels),
            join(&self.disc_channels)
        )
    }

    pub(crate) fn from_text(text: &str) -> Result<Self> {
        let mut resolution = None;
        let mut gen = None;
        let mut disc = None;
        let list = |v: &str, line: usize| -> Result<Vec<usize>> {
            v.split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::parse(line, format!("bad width `{s}`"))))
                .collect()
        };
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(i + 1, format!("expected `key value`, got `{line}`")))?;
            match key {
                "resolution" => {
                    resolution = Some(value.trim().parse().map_err(|_| Error::parse(i + 1, "bad resolution"))?)
                }
                "gen_channels" => gen = Some(list(value, i + 1)?),
                "disc_channels" => disc = Some(list(value, i + 1)?),
                other => return Err(Error::parse(i + 1, format!("unknown architecture key `{other}`"))),
            }
        }
        let arch = Self {
            resolution: resolution.ok_or_else(|| Error::parse(0, "missing resolution"))?,
            gen_channels: gen.ok_or_else(|| Error::parse(0, "missing gen_channels"))?,
            disc_channels: disc.ok_or_else(|| Error::parse(0, "missing disc_channels"))?,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Weights of the six loss terms: reconstruction, total variation, global
/// and local adversarial (generator side), local and global discriminator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 10.0,
            lambda2: 1e-5,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 1.0,
            lambda6: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3, self.lambda4, self.lambda5, self.lambda6];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Training stage. Stage one trains the generator against the global
/// discriminator with total variation; stage two adds the local
/// discriminator and drops total variation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::One => "1",
            Stage::Two => "2",
        })
    }
}

/// One paired example: occluded input, model synthesis, occlusion-free
/// ground truth and the model silhouette mask.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub occluded: ImageRGB,
    pub synthesis: ImageRGB,
    pub ground_truth: ImageRGB,
    pub mask: FaceMask,
}

/// Generator and both discriminators.
#[derive(Debug, Clone)]
pub struct NetworkParams {
    pub generator: Generator,
    pub d_global: Discriminator,
    pub d_local: Discriminator,
}

impl NetworkParams {
    pub fn new(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        Ok(Self {
            generator: Generator::new(arch, seed)?,
            d_global: Discriminator::new(arch, "d_global", seed.wrapping_add(1))?,
            d_local: Discriminator::new(arch, "d_local", seed.wrapping_add(2))?,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        self.generator.arch()
    }

    pub fn all_finite(&self) -> bool {
        [&self.generator.params, &self.d_global.params, &self.d_local.params]
            .iter()
            .all(|p| p.all_finite())
    }
}

/// Mini-batch tensors in NCHW layout.
#[derive(Debug, Clone)]
pub struct GanBatch {
    pub occluded: Tensor,
    pub synthesis: Tensor,
    pub ground_truth: Tensor,
    pub mask: Tensor,
}

impl GanBatch {
    pub fn from_samples(samples: &[&TrainingSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let masks: Vec<&FaceMask> = samples.iter().map(|s| &s.mask).collect();
        Ok(Self {
            occluded: images_to_tensor(&samples.iter().map(|s| &s.occluded).collect::<Vec<_>>())?,
            synthesis: images_to_tensor(&samples.iter().map(|s| &s.synthesis).collect::<Vec<_>>())?,
            ground_truth: images_to_tensor(&samples.iter().map(|s| &s.ground_truth).collect::<Vec<_>>())?,
            mask: masks_to_tensor(&masks)?,
        })
    }

    pub fn len(&self) -> usize {
        self.occluded.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generator input: occluded image and synthesis stacked on channels.
    pub fn generator_input(&self) -> Tensor {
        Tensor::concat_channels(&self.occluded, &self.synthesis)
    }
}

/// Packs equally sized images into an `N × 3 × H × W` tensor.
pub fn images_to_tensor(images: &[&ImageRGB]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("no images".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut t = Tensor::zeros(images.len(), 3, h, w);
    for (i, img) in images.iter().enumerate() {
        if !img.same_dims(first) {
            return Err(Error::InvalidInput(format!(
                "image {i} is {}×{}, expected {w}×{h}",
                img.width(),
                img.height()
            )));
        }
        let dst = t.sample_mut(i);
        for (p, rgb) in img.data().chunks_exact(3).enumerate() {
            for c in 0..3 {
                dst[c * w * h + p] = rgb[c];
            }
        }
    }
    Ok(t)
}

pub fn masks_to_tensor(masks: &[&FaceMask]) -> Result<Tensor> {
    let first = masks.first().ok_or_else(|| Error::InvalidInput("no masks".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut t = Tensor::zeros(masks.len(), 1, h, w);
    for (i, m) in masks.iter().enumerate() {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::InvalidInput(format!("mask {i} size differs")));
        }
        for (d, &v) in t.sample_mut(i).iter_mut().zip(m.data()) {
            *d = f64::from(v);
        }
    }
    Ok(t)
}

/// Extracts sample `i` of a 3-channel tensor as an image (clamped to [0,1]).
pub fn tensor_to_image(t: &Tensor, i: usize) -> Result<ImageRGB> {
    if t.c != 3 {
        return Err(Error::InvalidInput(format!("expected 3 channels, got {}", t.c)));
    }
    let hw = t.h * t.w;
    let src = t.sample(i);
    let mut data = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            data[3 * p + c] = src[c * hw + p];
        }
    }
    ImageRGB::from_raw_clamped(t.w, t.h, data)
}

fn check_resolution(arch: &ArchDescriptor, img: &ImageRGB, what: &str) -> Result<()> {
    let r = arch.resolution;
    if img.width() != r || img.height() != r {
        return Err(Error::InvalidInput(format!(
            "{what} is {}×{}, the network expects {r}×{r}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

/// Single inference pass of the generator with stored batch-norm
/// statistics.
pub fn generator_forward(generator: &Generator, occluded: &ImageRGB, synthesis: &ImageRGB) -> Result<ImageRGB> {
    check_resolution(generator.arch(), occluded, "occluded image")?;
    check_resolution(generator.arch(), synthesis, "synthesis image")?;
    let x = Tensor::concat_channels(&images_to_tensor(&[occluded])?, &images_to_tensor(&[synthesis])?);
    let cache = generator.forward(&x, Mode::Eval)?;
    tensor_to_image(&cache.output, 0)
}

/// Real-image probability of `image` under a discriminator in inference
/// mode.
pub fn discriminator_forward(d: &Discriminator, image: &ImageRGB) -> Result<f64> {
    check_resolution(d.arch(), image, "discriminator input")?;
    let cache = d.forward(&images_to_tensor(&[image])?, Mode::Eval)?;
    Ok(cache.probs[0])
}

/// Removes the occluder from `occluded` given the synthesis image. Only the
/// generator is involved at test time.
pub fn deocclude(params: &NetworkParams, occluded: &ImageRGB, synthesis: &ImageRGB) -> Result<ImageRGB> {
    generator_forward(&params.generator, occluded, synthesis)
}

#[cfg(test)]
mod tests;
