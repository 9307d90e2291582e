use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BlockCache, ConvBlock, Mode};
use super::ArchDescriptor;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu_backward, leaky_relu_forward, sigmoid, ConvSpec, ParamStore, Tensor};

/// Channels of the generator input: occluded image plus synthesis image.
pub const GENERATOR_IN_CHANNELS: usize = 6;
const ENC_SLOPE: f64 = 0.2;

/// U-Net encoder-decoder. Encoder block `j` halves the resolution; decoder
/// block `j` doubles it and, except for the innermost one, consumes the
/// concatenation of the previous decoder output with encoder output `j`.
#[derive(Debug, Clone)]
pub struct Generator {
    arch: ArchDescriptor,
    pub params: ParamStore,
    pub buffers: ParamStore,
    enc: Vec<ConvBlock>,
    dec: Vec<ConvBlock>,
}

pub struct GenCache {
    enc: Vec<(BlockCache, Tensor)>,
    dec: Vec<Option<(BlockCache, Tensor)>>,
    skips: Vec<bool>,
    pub output: Tensor,
}

impl Generator {
    pub fn new(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let ch = &arch.gen_channels;
        let d = ch.len();
        let down = |cin, cout| ConvSpec { cin, cout, k: 4, stride: 2, pad: 1 };
        let mut enc = Vec::with_capacity(d);
        for j in 0..d {
            let cin = if j == 0 { GENERATOR_IN_CHANNELS } else { ch[j - 1] };
            enc.push(ConvBlock::new(
                &mut params,
                &mut buffers,
                &mut rng,
                &format!("gen.enc{j}"),
                down(cin, ch[j]),
                false,
                j > 0,
            ));
        }
        // Decoder blocks are created outermost first so indices match `j`.
        let mut dec = Vec::with_capacity(d);
        for j in 0..d {
            let cin = if j == d - 1 { ch[j] } else { 2 * ch[j] };
            let cout = if j == 0 { 3 } else { ch[j - 1] };
            dec.push(ConvBlock::new(
                &mut params,
                &mut buffers,
                &mut rng,
                &format!("gen.dec{j}"),
                down(cin, cout),
                true,
                j > 0,
            ));
        }
        Ok(Self {
            arch: arch.clone(),
            params,
            buffers,
            enc,
            dec,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.enc.len()
    }

    /// Number of skip connections (`depth - 1`).
    pub fn num_skips(&self) -> usize {
        self.enc.len() - 1
    }

    /// Zeroes the output layer so the pre-sigmoid activation is exactly 0.
    pub fn zero_output_layer(&mut self) {
        self.dec[0].zero(&mut self.params);
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let r = self.arch.resolution;
        if x.c != GENERATOR_IN_CHANNELS || x.h != r || x.w != r {
            return Err(Error::InvalidInput(format!(
                "generator expects {GENERATOR_IN_CHANNELS}×{r}×{r} input, got {}×{}×{}",
                x.c, x.h, x.w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<GenCache> {
        self.forward_with_skips(x, mode, &vec![true; self.num_skips()])
    }

    /// Forward pass where a disabled skip connection feeds zeros in place
    /// of the encoder features (same channel layout).
    pub fn forward_with_skips(&self, x: &Tensor, mode: Mode, skips: &[bool]) -> Result<GenCache> {
        self.check_input(x)?;
        if skips.len() != self.num_skips() {
            return Err(Error::DimensionMismatch {
                what: "skip switches",
                expected: self.num_skips(),
                got: skips.len(),
            });
        }
        let d = self.depth();
        let mut enc = Vec::with_capacity(d);
        let mut h = x.clone();
        for block in &self.enc {
            let (mut y, c) = block.forward(&self.params, &self.buffers, &h, mode);
            leaky_relu_forward(&mut y, ENC_SLOPE);
            h = y.clone();
            enc.push((c, y));
        }
        let mut dec: Vec<Option<(BlockCache, Tensor)>> = (0..d).map(|_| None).collect();
        let mut up: Option<Tensor> = None;
        for j in (0..d).rev() {
            let input = match up.take() {
                None => enc[j].1.clone(),
                Some(u) => {
                    let e = &enc[j].1;
                    if skips[j] {
                        Tensor::concat_channels(&u, e)
                    } else {
                        Tensor::concat_channels(&u, &e.zeros_like())
                    }
                }
            };
            let (mut y, c) = self.dec[j].forward(&self.params, &self.buffers, &input, mode);
            if j == 0 {
                y.data.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                leaky_relu_forward(&mut y, 0.0);
            }
            up = Some(y.clone());
            dec[j] = Some((c, y));
        }
        let output = up.expect("depth >= 1");
        Ok(GenCache {
            enc,
            dec,
            skips: skips.to_vec(),
            output,
        })
    }

    /// Gradient of a scalar loss w.r.t. all generator parameters, given its
    /// gradient `dout` w.r.t. the generator output.
    pub fn backward(&self, cache: &GenCache, dout: &Tensor) -> ParamStore {
        let mut grads = self.params.zeros_like();
        let d = self.depth();
        let mut enc_grad: Vec<Option<Tensor>> = (0..d).map(|_| None).collect();
        let mut dy = dout.clone();
        let y0 = &cache.output;
        for (g, y) in dy.data.iter_mut().zip(&y0.data) {
            *g *= y * (1.0 - y);
        }
        for j in 0..d {
            let (bc, out) = cache.dec[j].as_ref().expect("decoder cache");
            if j > 0 {
                dy = leaky_relu_backward(out, &dy, 0.0);
            }
            let dinput = self.dec[j]
                .backward(&self.params, bc, &dy, Some(&mut grads), true)
                .expect("input gradient requested");
            if j == d - 1 {
                accumulate(&mut enc_grad[j], dinput);
            } else {
                let up_channels = self.dec[j + 1].spec.cout;
                let (d_up, d_skip) = dinput.split_channels(up_channels);
                if cache.skips[j] {
                    accumulate(&mut enc_grad[j], d_skip);
                }
                dy = d_up;
            }
        }
        for j in (0..d).rev() {
            let Some(g) = enc_grad[j].take() else { continue };
            let (bc, out) = &cache.enc[j];
            let dz = leaky_relu_backward(out, &g, ENC_SLOPE);
            if let Some(dx) = self.enc[j].backward(&self.params, bc, &dz, Some(&mut grads), j > 0) {
                accumulate(&mut enc_grad[j - 1], dx);
            }
        }
        grads
    }

    /// Folds the batch statistics of a training-mode pass into the stored
    /// running statistics.
    pub fn update_running_stats(&mut self, cache: &GenCache) {
        for (b, (c, _)) in self.enc.iter().zip(&cache.enc) {
            b.update_running(&mut self.buffers, c);
        }
        for (b, c) in self.dec.iter().zip(&cache.dec) {
            if let Some((c, _)) = c {
                b.update_running(&mut self.buffers, c);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}
