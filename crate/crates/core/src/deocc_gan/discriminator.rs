use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BlockCache, ConvBlock, Mode};
use super::ArchDescriptor;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu_backward, leaky_relu_forward, sigmoid, ConvSpec, ParamStore, Tensor};

const SLOPE: f64 = 0.2;

/// Convolutional real/fake classifier. Layers halve the resolution until it
/// reaches 1×1 and then keep it with 3×3 convolutions; a final projection
/// whose kernel spans the remaining map yields one logit per sample.
#[derive(Debug, Clone)]
pub struct Discriminator {
    arch: ArchDescriptor,
    pub params: ParamStore,
    pub buffers: ParamStore,
    layers: Vec<ConvBlock>,
    proj: ConvBlock,
}

pub struct DiscCache {
    layers: Vec<(BlockCache, Tensor)>,
    proj: BlockCache,
    pub probs: Vec<f64>,
}

impl Discriminator {
    pub fn new(arch: &ArchDescriptor, name: &str, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut size = arch.resolution;
        let mut cin = 3;
        let mut layers = Vec::with_capacity(arch.disc_channels.len());
        for (l, &cout) in arch.disc_channels.iter().enumerate() {
            let spec = if size > 1 {
                ConvSpec { cin, cout, k: 4, stride: 2, pad: 1 }
            } else {
                ConvSpec { cin, cout, k: 3, stride: 1, pad: 1 }
            };
            size = spec.conv_out(size);
            // Batch statistics over tiny maps are dominated by the batch
            // composition, so normalization stops below 2×2.
            let bn = l > 0 && size >= 2;
            layers.push(ConvBlock::new(
                &mut params,
                &mut buffers,
                &mut rng,
                &format!("{name}.conv{l}"),
                spec,
                false,
                bn,
            ));
            cin = cout;
        }
        let proj_spec = ConvSpec { cin, cout: 1, k: size, stride: 1, pad: 0 };
        let proj = ConvBlock::new(
            &mut params,
            &mut buffers,
            &mut rng,
            &format!("{name}.proj"),
            proj_spec,
            false,
            false,
        );
        Ok(Self {
            arch: arch.clone(),
            params,
            buffers,
            layers,
            proj,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn num_conv_layers(&self) -> usize {
        self.layers.len()
    }

    /// Strides of the hidden convolution layers.
    pub fn strides(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.spec.stride).collect()
    }

    /// Zeroes the projection so every output is exactly `sigmoid(0) = 0.5`.
    pub fn zero_projection(&mut self) {
        self.proj.zero(&mut self.params);
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<DiscCache> {
        let r = self.arch.resolution;
        if x.c != 3 || x.h != r || x.w != r {
            return Err(Error::InvalidInput(format!(
                "discriminator expects 3×{r}×{r} input, got {}×{}×{}",
                x.c, x.h, x.w
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for block in &self.layers {
            let (mut y, c) = block.forward(&self.params, &self.buffers, &h, mode);
            leaky_relu_forward(&mut y, SLOPE);
            h = y.clone();
            layers.push((c, y));
        }
        let (logits, proj) = self.proj.forward(&self.params, &self.buffers, &h, mode);
        let probs = logits.data.iter().map(|&z| sigmoid(z)).collect();
        Ok(DiscCache { layers, proj, probs })
    }

    /// Backpropagates per-sample logit gradients. Returns the parameter
    /// gradients and the gradient w.r.t. the input, each only when requested.
    pub fn backward(
        &self,
        cache: &DiscCache,
        dlogits: &[f64],
        param_grads: bool,
        input_grad: bool,
    ) -> (Option<ParamStore>, Option<Tensor>) {
        let mut grads = param_grads.then(|| self.params.zeros_like());
        let n = dlogits.len();
        let dy = Tensor::from_vec(n, 1, 1, 1, dlogits.to_vec()).expect("one logit per sample");
        let mut dy = self
            .proj
            .backward(&self.params, &cache.proj, &dy, grads.as_mut(), true);
        for (l, (block, (c, out))) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let dz = leaky_relu_backward(out, dy.as_ref().expect("gradient flows"), SLOPE);
            dy = block.backward(&self.params, c, &dz, grads.as_mut(), l > 0 || input_grad);
        }
        (grads, dy)
    }

    pub fn update_running_stats(&mut self, cache: &DiscCache) {
        for (b, (c, _)) in self.layers.iter().zip(&cache.layers) {
            b.update_running(&mut self.buffers, c);
        }
    }
}
