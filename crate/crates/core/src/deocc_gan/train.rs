use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::generator::GenCache;
use super::layers::Mode;
use super::losses::{discriminator_objective, generator_objective, LossComponents};
use super::{GanBatch, LossWeights, NetworkParams, Stage, TrainingSample};
use crate::error::{Error, Result};
use crate::nn::AdamState;
use crate::occlusion_synth::augment;

/// Optimization schedule. Epochs `1..=stage1_epochs` run stage one, the
/// following `stage2_epochs` run stage two.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage1_epochs: usize,
    pub stage2_lr: f64,
    pub stage2_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub image_resolution: usize,
    pub rng_seed: u64,
    /// Write a checkpoint every this many epochs (0 disables periodic ones).
    pub checkpoint_interval: usize,
    /// Random pad-and-crop and flip on every training sample.
    pub augment: bool,
    /// Maximum crop shift in pixels when augmenting.
    pub augment_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 5,
            stage1_lr: 2e-4,
            stage1_epochs: 100,
            stage2_lr: 5e-5,
            stage2_epochs: 10,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            image_resolution: 64,
            rng_seed: 0,
            checkpoint_interval: 10,
            augment: true,
            augment_pad: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr), ("adam_eps", self.adam_eps)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.stage1_epochs == 0 {
            return bad("stage1_epochs must be positive".into());
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        let r = self.image_resolution;
        if r < 32 || !r.is_power_of_two() {
            return bad(format!("image_resolution {r} must be a power of two >= 32"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }

    /// Stage of a 1-based epoch number.
    pub fn stage_of(&self, epoch: usize) -> Stage {
        if epoch <= self.stage1_epochs {
            Stage::One
        } else {
            Stage::Two
        }
    }

    pub fn learning_rate(&self, stage: Stage) -> f64 {
        match stage {
            Stage::One => self.stage1_lr,
            Stage::Two => self.stage2_lr,
        }
    }
}

/// Per-epoch means of the loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: Stage,
    pub batches: usize,
    pub means: LossComponents,
    /// Weighted sum of all present terms.
    pub total: f64,
}

impl EpochLog {
    /// Tab-separated `name=value` tokens.
    pub fn to_line(&self) -> String {
        let mut s = format!("epoch={}\tstage={}\tbatches={}", self.epoch, self.stage, self.batches);
        for (name, v) in self.means.named() {
            let _ = write!(s, "\t{name}={v:.10e}");
        }
        let _ = write!(s, "\ttotal={:.10e}", self.total);
        s
    }
}

/// Stateful two-stage trainer. One discriminator step, then one generator
/// step, per mini-batch.
pub struct Trainer {
    pub net: NetworkParams,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub(crate) opt_g: AdamState,
    pub(crate) opt_dg: AdamState,
    pub(crate) opt_dl: AdamState,
    pub(crate) epochs_done: usize,
    pub(crate) rng: ChaCha8Rng,
    pub log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(net: NetworkParams, cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if net.arch().resolution != cfg.image_resolution {
            return Err(Error::Architecture(format!(
                "network resolution {} differs from image_resolution {}",
                net.arch().resolution,
                cfg.image_resolution
            )));
        }
        let adam = |p| AdamState::new(p, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self {
            opt_g: adam(&net.generator.params),
            opt_dg: adam(&net.d_global.params),
            opt_dl: adam(&net.d_local.params),
            rng: ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            net,
            cfg,
            weights,
            epochs_done: 0,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint with the given schedule.
    pub fn from_checkpoint(ck: Checkpoint, cfg: TrainConfig, weights: LossWeights) -> Result<Self> {
        let mut t = Self::new(ck.net, cfg, weights)?;
        t.opt_g = ck.opt_g;
        t.opt_dg = ck.opt_dg;
        t.opt_dl = ck.opt_dl;
        t.epochs_done = ck.epochs_done;
        t.rng = ck.rng;
        Ok(t)
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            net: self.net.clone(),
            opt_g: self.opt_g.clone(),
            opt_dg: self.opt_dg.clone(),
            opt_dl: self.opt_dl.clone(),
            epochs_done: self.epochs_done,
            rng: self.rng.clone(),
        }
    }

    /// Discriminator update on a detached generator output.
    pub fn discriminator_step(&mut self, batch: &GanBatch, fake: &crate::nn::Tensor, stage: Stage) -> Result<(f64, Option<f64>)> {
        let lr = self.cfg.learning_rate(stage);
        let pass = discriminator_objective(&self.net, batch, fake, &self.weights, stage == Stage::Two, true)?;
        for c in &pass.caches_dg {
            self.net.d_global.update_running_stats(c);
        }
        for c in &pass.caches_dl {
            self.net.d_local.update_running_stats(c);
        }
        if let Some(g) = &pass.grads_dg {
            self.opt_dg.step(&mut self.net.d_global.params, g, lr);
        }
        if let Some(g) = &pass.grads_dl {
            self.opt_dl.step(&mut self.net.d_local.params, g, lr);
        }
        Ok((pass.l_dg, pass.l_dl))
    }

    /// Generator update through the (current) discriminators.
    pub fn generator_step(&mut self, batch: &GanBatch, gen: &GenCache, stage: Stage) -> Result<LossComponents> {
        let lr = self.cfg.learning_rate(stage);
        let (comps, dout) = generator_objective(&self.net, batch, &gen.output, &self.weights, stage, true)?;
        let grads = self.net.generator.backward(gen, &dout.expect("gradient requested"));
        self.opt_g.step(&mut self.net.generator.params, &grads, lr);
        Ok(comps)
    }

    /// One alternating update on a batch; returns the batch loss terms.
    pub fn train_batch(&mut self, batch: &GanBatch, stage: Stage) -> Result<LossComponents> {
        let gen = self.net.generator.forward(&batch.generator_input(), Mode::Train)?;
        self.net.generator.update_running_stats(&gen);
        let (l_dg, l_dl) = self.discriminator_step(batch, &gen.output, stage)?;
        let mut comps = self.generator_step(batch, &gen, stage)?;
        comps.l_dg = Some(l_dg);
        comps.l_dl = l_dl;
        Ok(comps)
    }

    /// Runs the next epoch over `samples` (shuffled, optionally augmented).
    pub fn run_epoch(&mut self, samples: &[TrainingSample]) -> Result<EpochLog> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no training samples".into()));
        }
        let epoch = self.epochs_done + 1;
        let stage = self.cfg.stage_of(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sums: Vec<(&'static str, f64)> = Vec::new();
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let prepared: Vec<TrainingSample> = chunk
                .iter()
                .map(|&i| {
                    if self.cfg.augment {
                        augment(&samples[i], self.cfg.augment_pad, &mut self.rng)
                    } else {
                        Ok(samples[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&TrainingSample> = prepared.iter().collect();
            let batch = GanBatch::from_samples(&refs)?;
            let comps = self.train_batch(&batch, stage)?;
            if !comps.all_finite() || !self.net.all_finite() {
                return Err(Error::NonFinite(format!(
                    "loss became non-finite in epoch {epoch}, batch {}: {:?}",
                    batches + 1,
                    comps.named()
                )));
            }
            let named = comps.named();
            if sums.is_empty() {
                sums = named;
            } else {
                for (s, (_, v)) in sums.iter_mut().zip(named) {
                    s.1 += v;
                }
            }
            batches += 1;
        }
        let mean = |name: &str| sums.iter().find(|(n, _)| *n == name).map(|(_, v)| v / batches as f64);
        let means = LossComponents {
            l_gen: mean("L_gen").unwrap_or(0.0),
            l_tv: mean("L_tv"),
            l_adv_g: mean("L_adv_g").unwrap_or(0.0),
            l_adv_l: mean("L_adv_l"),
            l_dl: mean("L_Dl"),
            l_dg: mean("L_Dg"),
        };
        self.epochs_done = epoch;
        let entry = EpochLog {
            epoch,
            stage,
            batches,
            total: means.total(&self.weights),
            means,
        };
        info!("{}", entry.to_line());
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Trains until the schedule is complete. With `out_dir`, writes
    /// periodic checkpoints, `model.ckpt` at the end and the metrics log
    /// `train_log.tsv`. On a non-finite loss the last checkpoint on disk is
    /// left untouched and the error names it.
    pub fn run(&mut self, samples: &[TrainingSample], out_dir: Option<&Path>) -> Result<()> {
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut last_good: Option<PathBuf> = None;
        while self.epochs_done < self.cfg.total_epochs() {
            let entry = match self.run_epoch(samples) {
                Ok(e) => e,
                Err(Error::NonFinite(msg)) => {
                    let hint = last_good
                        .as_ref()
                        .map_or("no checkpoint was written yet".to_string(), |p| {
                            format!("last good checkpoint: {}", p.display())
                        });
                    warn!("training aborted: {msg}");
                    return Err(Error::NonFinite(format!("{msg}; {hint}")));
                }
                Err(e) => return Err(e),
            };
            if let Some(dir) = out_dir {
                self.write_log(dir)?;
                let k = self.cfg.checkpoint_interval;
                if k > 0 && entry.epoch % k == 0 {
                    let p = dir.join(format!("checkpoint_epoch_{:04}.ckpt", entry.epoch));
                    save_checkpoint(&p, &self.checkpoint())?;
                    last_good = Some(p);
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(dir.join("model.ckpt"), &self.checkpoint())?;
        }
        Ok(())
    }

    fn write_log(&self, dir: &Path) -> Result<()> {
        let path = dir.join("train_log.tsv");
        let mut text = String::new();
        for e in &self.log {
            text.push_str(&e.to_line());
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Trains `net` on `samples` under `cfg`. Returns the trained networks and
/// the per-epoch log.
pub fn train(
    net: NetworkParams,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    weights: &LossWeights,
    out_dir: Option<&Path>,
) -> Result<(NetworkParams, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(net, cfg.clone(), *weights)?;
    trainer.run(samples, out_dir)?;
    Ok((trainer.net, trainer.log))
}
