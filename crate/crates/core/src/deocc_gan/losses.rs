use super::discriminator::DiscCache;
use super::layers::Mode;
use super::{GanBatch, LossWeights, NetworkParams, Stage};
use crate::error::Result;
use crate::nn::{ParamStore, Tensor};

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` inside every
/// log term.
pub const LOG_CLAMP: f64 = 1e-7;

/// Logged loss terms. Terms not active in a stage are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents {
    pub l_gen: f64,
    pub l_tv: Option<f64>,
    pub l_adv_g: f64,
    pub l_adv_l: Option<f64>,
    pub l_dl: Option<f64>,
    pub l_dg: Option<f64>,
}

impl LossComponents {
    /// Generator objective: weighted reconstruction, total variation and
    /// adversarial terms.
    pub fn generator_total(&self, w: &LossWeights) -> f64 {
        w.lambda1 * self.l_gen
            + w.lambda2 * self.l_tv.unwrap_or(0.0)
            + w.lambda3 * self.l_adv_g
            + w.lambda4 * self.l_adv_l.unwrap_or(0.0)
    }

    pub fn discriminator_total(&self, w: &LossWeights) -> f64 {
        w.lambda5 * self.l_dl.unwrap_or(0.0) + w.lambda6 * self.l_dg.unwrap_or(0.0)
    }

    /// Weighted sum of all six terms.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.generator_total(w) + self.discriminator_total(w)
    }

    /// Present components as `(name, value)` pairs in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![("L_gen", self.l_gen)];
        if let Some(v) = self.l_tv {
            out.push(("L_tv", v));
        }
        out.push(("L_adv_g", self.l_adv_g));
        for (name, v) in [("L_adv_l", self.l_adv_l), ("L_Dl", self.l_dl), ("L_Dg", self.l_dg)] {
            if let Some(v) = v {
                out.push((name, v));
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, v)| v.is_finite())
    }
}

/// Mean absolute difference and its gradient w.r.t. `out`.
pub fn l1_loss(out: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert!(out.same_shape(target));
    let n = out.data.len() as f64;
    let mut grad = out.zeros_like();
    let mut sum = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&out.data).zip(&target.data) {
        let d = a - b;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    (sum / n, grad)
}

/// Total variation: per image, the root-mean-square of horizontal forward
/// differences plus that of vertical ones; averaged over the batch. The
/// gradient of a zero-variation direction is taken as zero.
pub fn tv_loss(out: &Tensor) -> (f64, Tensor) {
    let (c, h, w) = (out.c, out.h, out.w);
    let nb = out.n as f64;
    let nx = (c * h * w.saturating_sub(1)) as f64;
    let ny = (c * h.saturating_sub(1) * w) as f64;
    let mut grad = out.zeros_like();
    let mut total = 0.0;
    for i in 0..out.n {
        let x = out.sample(i);
        let (mut sx, mut sy) = (0.0, 0.0);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let p = (ch * h + y) * w + xx;
                    if xx + 1 < w {
                        sx += (x[p + 1] - x[p]).powi(2);
                    }
                    if y + 1 < h {
                        sy += (x[p + w] - x[p]).powi(2);
                    }
                }
            }
        }
        let rx = if nx > 0.0 { (sx / nx).sqrt() } else { 0.0 };
        let ry = if ny > 0.0 { (sy / ny).sqrt() } else { 0.0 };
        total += rx + ry;
        let kx = if rx > 1e-12 { 1.0 / (nb * nx * rx) } else { 0.0 };
        let ky = if ry > 1e-12 { 1.0 / (nb * ny * ry) } else { 0.0 };
        let g = grad.sample_mut(i);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let p = (ch * h + y) * w + xx;
                    if xx + 1 < w {
                        let d = kx * (x[p + 1] - x[p]);
                        g[p + 1] += d;
                        g[p] -= d;
                    }
                    if y + 1 < h {
                        let d = ky * (x[p + w] - x[p]);
                        g[p + w] += d;
                        g[p] -= d;
                    }
                }
            }
        }
    }
    (total / nb, grad)
}

fn clamped(p: f64) -> Option<f64> {
    (LOG_CLAMP..=1.0 - LOG_CLAMP).contains(&p).then_some(p)
}

/// `mean(-ln p)` over the batch and its gradient w.r.t. the logits.
pub fn bce_real(probs: &[f64]) -> (f64, Vec<f64>) {
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .map(|&p| {
            let pc = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            loss -= pc.ln();
            clamped(p).map_or(0.0, |p| -(1.0 - p) / n)
        })
        .collect();
    (loss / n, grad)
}

/// `mean(-ln(1 - p))` over the batch and its gradient w.r.t. the logits.
pub fn bce_fake(probs: &[f64]) -> (f64, Vec<f64>) {
    let n = probs.len() as f64;
    let mut loss = 0.0;
    let grad = probs
        .iter()
        .map(|&p| {
            let pc = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            loss -= (1.0 - pc).ln();
            clamped(p).map_or(0.0, |p| p / n)
        })
        .collect();
    (loss / n, grad)
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Generator-side terms for a given generator output, plus (optionally)
/// the gradient of the weighted generator objective w.r.t. that output.
/// Discriminators run with batch statistics but are not updated.
pub(crate) fn generator_objective(
    net: &NetworkParams,
    batch: &GanBatch,
    out: &Tensor,
    weights: &LossWeights,
    stage: Stage,
    need_grad: bool,
) -> Result<(LossComponents, Option<Tensor>)> {
    let mut comps = LossComponents::default();
    let (l_gen, g_gen) = l1_loss(out, &batch.ground_truth);
    comps.l_gen = l_gen;
    let mut dout = need_grad.then(|| {
        let mut g = g_gen;
        g.data.iter_mut().for_each(|v| *v *= weights.lambda1);
        g
    });
    if stage == Stage::One {
        let (tv, g_tv) = tv_loss(out);
        comps.l_tv = Some(tv);
        if let Some(d) = dout.as_mut() {
            d.data.iter_mut().zip(&g_tv.data).for_each(|(a, b)| *a += weights.lambda2 * b);
        }
    }
    let dg = net.d_global.forward(out, Mode::Train)?;
    let (adv_g, dl) = bce_real(&dg.probs);
    comps.l_adv_g = adv_g;
    if let Some(d) = dout.as_mut() {
        if weights.lambda3 != 0.0 {
            let (_, dx) = net.d_global.backward(&dg, &scaled(&dl, weights.lambda3), false, true);
            d.add_assign(&dx.expect("input gradient"));
        }
    }
    if stage == Stage::Two {
        let masked = out.mul_mask(&batch.mask);
        let dl_cache = net.d_local.forward(&masked, Mode::Train)?;
        let (adv_l, dlog) = bce_real(&dl_cache.probs);
        comps.l_adv_l = Some(adv_l);
        if let Some(d) = dout.as_mut() {
            if weights.lambda4 != 0.0 {
                let (_, dx) = net.d_local.backward(&dl_cache, &scaled(&dlog, weights.lambda4), false, true);
                d.add_assign(&dx.expect("input gradient").mul_mask(&batch.mask));
            }
        }
    }
    Ok((comps, dout))
}

/// Discriminator losses (and weighted parameter gradients) for a detached
/// generator output. Nothing here reaches generator parameters.
pub(crate) struct DiscriminatorPass {
    pub l_dg: f64,
    pub l_dl: Option<f64>,
    pub grads_dg: Option<ParamStore>,
    pub grads_dl: Option<ParamStore>,
    pub caches_dg: Vec<DiscCache>,
    pub caches_dl: Vec<DiscCache>,
}

pub(crate) fn discriminator_objective(
    net: &NetworkParams,
    batch: &GanBatch,
    fake: &Tensor,
    weights: &LossWeights,
    local: bool,
    need_grad: bool,
) -> Result<DiscriminatorPass> {
    let run = |d: &super::Discriminator, real: &Tensor, fake: &Tensor, lambda: f64| -> Result<_> {
        let cr = d.forward(real, Mode::Train)?;
        let cf = d.forward(fake, Mode::Train)?;
        let (lr, gr) = bce_real(&cr.probs);
        let (lf, gf) = bce_fake(&cf.probs);
        let grads = if need_grad {
            let (g1, _) = d.backward(&cr, &scaled(&gr, lambda), true, false);
            let (g2, _) = d.backward(&cf, &scaled(&gf, lambda), true, false);
            let mut g = g1.expect("param grads");
            g.add_scaled(&g2.expect("param grads"), 1.0);
            Some(g)
        } else {
            None
        };
        Ok((lr + lf, grads, vec![cr, cf]))
    };
    let (l_dg, grads_dg, caches_dg) = run(&net.d_global, &batch.ground_truth, fake, weights.lambda6)?;
    let (l_dl, grads_dl, caches_dl) = if local {
        let (l, g, c) = run(
            &net.d_local,
            &batch.ground_truth.mul_mask(&batch.mask),
            &fake.mul_mask(&batch.mask),
            weights.lambda5,
        )?;
        (Some(l), g, c)
    } else {
        (None, None, Vec::new())
    };
    Ok(DiscriminatorPass {
        l_dg,
        l_dl,
        grads_dg,
        grads_dl,
        caches_dg,
        caches_dl,
    })
}

/// Generator objective for a batch (training-mode statistics). Returns the
/// weighted total and the individual terms.
pub fn generator_loss(
    net: &NetworkParams,
    batch: &GanBatch,
    weights: &LossWeights,
    stage: Stage,
) -> Result<(f64, LossComponents)> {
    let cache = net.generator.forward(&batch.generator_input(), Mode::Train)?;
    let (comps, _) = generator_objective(net, batch, &cache.output, weights, stage, false)?;
    Ok((comps.generator_total(weights), comps))
}

/// Gradient of the weighted generator objective w.r.t. generator
/// parameters.
pub fn generator_gradients(
    net: &NetworkParams,
    batch: &GanBatch,
    weights: &LossWeights,
    stage: Stage,
) -> Result<(LossComponents, ParamStore)> {
    let cache = net.generator.forward(&batch.generator_input(), Mode::Train)?;
    let (comps, dout) = generator_objective(net, batch, &cache.output, weights, stage, true)?;
    let grads = net.generator.backward(&cache, &dout.expect("gradient requested"));
    Ok((comps, grads))
}

/// Unweighted global and local discriminator losses, with the generator
/// output treated as a constant.
pub fn discriminator_losses(net: &NetworkParams, batch: &GanBatch) -> Result<(f64, f64)> {
    let cache = net.generator.forward(&batch.generator_input(), Mode::Train)?;
    let pass = discriminator_objective(net, batch, &cache.output, &LossWeights::default(), true, false)?;
    Ok((pass.l_dg, pass.l_dl.expect("local loss requested")))
}

/// Gradients of `lambda6 · L_Dg` w.r.t. the global discriminator and, in
/// stage two, of `lambda5 · L_Dl` w.r.t. the local one. Returns
/// `(L_Dg, L_Dl, grad_global, grad_local)`.
pub fn discriminator_gradients(
    net: &NetworkParams,
    batch: &GanBatch,
    weights: &LossWeights,
    stage: Stage,
) -> Result<(f64, Option<f64>, ParamStore, Option<ParamStore>)> {
    let cache = net.generator.forward(&batch.generator_input(), Mode::Train)?;
    let pass = discriminator_objective(net, batch, &cache.output, weights, stage == Stage::Two, true)?;
    Ok((
        pass.l_dg,
        pass.l_dl,
        pass.grads_dg.expect("gradients requested"),
        pass.grads_dl,
    ))
}
