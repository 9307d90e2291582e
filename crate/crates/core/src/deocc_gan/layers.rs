use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nn::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, conv2d_backward, conv2d_forward,
    conv_transpose2d_backward, conv_transpose2d_forward, BnCache, ConvSpec, ParamId, ParamStore,
    Tensor,
};

/// Whether batch norm uses batch statistics (training) or stored running
/// statistics (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub(crate) struct BnIds {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

/// Convolution (or transposed convolution) with an optional batch norm.
#[derive(Debug, Clone)]
pub(crate) struct ConvBlock {
    pub spec: ConvSpec,
    pub transposed: bool,
    w: ParamId,
    b: Option<ParamId>,
    bn: Option<BnIds>,
}

pub(crate) struct BlockCache {
    /// im2col patches (conv) or the forward input (transposed conv).
    saved: Saved,
    in_hw: (usize, usize),
    bn: Option<BnCache>,
}

enum Saved {
    Cols(Vec<f64>),
    Input(Tensor),
}

impl ConvBlock {
    /// Registers the block's tensors. Conv weights follow N(0, 0.02); batch
    /// norm scales follow N(1, 0.02); biases and shifts start at zero. A
    /// bias is only created when no batch norm follows (it would cancel).
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
        transposed: bool,
        batch_norm: bool,
    ) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let wshape = if transposed {
            vec![spec.cin, spec.cout, spec.k, spec.k]
        } else {
            vec![spec.cout, spec.cin, spec.k, spec.k]
        };
        let wdata = (0..spec.conv_weight_len()).map(|_| normal.sample(rng)).collect();
        let w = params.add(format!("{name}.weight"), wshape, wdata);
        let (b, bn) = if batch_norm {
            let g = (0..spec.cout).map(|_| 1.0 + normal.sample(rng)).collect();
            let gamma = params.add(format!("{name}.bn.gamma"), vec![spec.cout], g);
            let beta = params.add(format!("{name}.bn.beta"), vec![spec.cout], vec![0.0; spec.cout]);
            let mean = buffers.add(format!("{name}.bn.running_mean"), vec![spec.cout], vec![0.0; spec.cout]);
            let var = buffers.add(format!("{name}.bn.running_var"), vec![spec.cout], vec![1.0; spec.cout]);
            (None, Some(BnIds { gamma, beta, mean, var }))
        } else {
            let b = params.add(format!("{name}.bias"), vec![spec.cout], vec![0.0; spec.cout]);
            (Some(b), None)
        };
        Self {
            spec,
            transposed,
            w,
            b,
            bn,
        }
    }

    /// Zeroes weights and bias so the block outputs exactly zero.
    pub fn zero(&self, params: &mut ParamStore) {
        params.get_mut(self.w).fill(0.0);
        if let Some(b) = self.b {
            params.get_mut(b).fill(0.0);
        }
        if let Some(bn) = &self.bn {
            params.get_mut(bn.gamma).fill(0.0);
            params.get_mut(bn.beta).fill(0.0);
        }
    }

    pub fn forward(
        &self,
        params: &ParamStore,
        buffers: &ParamStore,
        x: &Tensor,
        mode: Mode,
    ) -> (Tensor, BlockCache) {
        let w = params.get(self.w);
        let b = self.b.map(|id| params.get(id));
        let (y, saved) = if self.transposed {
            (conv_transpose2d_forward(x, w, b, &self.spec), Saved::Input(x.clone()))
        } else {
            let (y, cols) = conv2d_forward(x, w, b, &self.spec);
            (y, Saved::Cols(cols))
        };
        let (y, bn) = match (&self.bn, mode) {
            (None, _) => (y, None),
            (Some(ids), Mode::Train) => {
                let (y, c) = batchnorm_train(&y, params.get(ids.gamma), params.get(ids.beta));
                (y, Some(c))
            }
            (Some(ids), Mode::Eval) => (
                batchnorm_eval(
                    &y,
                    params.get(ids.gamma),
                    params.get(ids.beta),
                    buffers.get(ids.mean),
                    buffers.get(ids.var),
                ),
                None,
            ),
        };
        (
            y,
            BlockCache {
                saved,
                in_hw: (x.h, x.w),
                bn,
            },
        )
    }

    /// Backpropagates `dy` (gradient w.r.t. the block output). Parameter
    /// gradients are accumulated into `grads` when given.
    pub fn backward(
        &self,
        params: &ParamStore,
        cache: &BlockCache,
        dy: &Tensor,
        mut grads: Option<&mut ParamStore>,
        need_dx: bool,
    ) -> Option<Tensor> {
        let dz = match (&self.bn, &cache.bn) {
            (Some(ids), Some(bc)) => {
                let gamma = params.get(ids.gamma);
                match grads.as_deref_mut() {
                    Some(g) => {
                        let mut dgamma = vec![0.0; gamma.len()];
                        let mut dbeta = vec![0.0; gamma.len()];
                        let dz = batchnorm_backward(bc, dy, gamma, Some(&mut dgamma), Some(&mut dbeta));
                        add_into(g.get_mut(ids.gamma), &dgamma);
                        add_into(g.get_mut(ids.beta), &dbeta);
                        dz
                    }
                    None => batchnorm_backward(bc, dy, gamma, None, None),
                }
            }
            (Some(_), None) => panic!("backward through an eval-mode batch norm"),
            _ => dy.clone(),
        };
        let w = params.get(self.w);
        let mut dw = grads.as_ref().map(|_| vec![0.0; w.len()]);
        let mut db = match (&grads, self.b) {
            (Some(_), Some(_)) => Some(vec![0.0; self.spec.cout]),
            _ => None,
        };
        let dx = match &cache.saved {
            Saved::Cols(cols) => conv2d_backward(
                &self.spec,
                cache.in_hw,
                cols,
                &dz,
                w,
                dw.as_deref_mut(),
                db.as_deref_mut(),
                need_dx,
            ),
            Saved::Input(x) => conv_transpose2d_backward(
                &self.spec,
                x,
                &dz,
                w,
                dw.as_deref_mut(),
                db.as_deref_mut(),
                need_dx,
            ),
        };
        if let Some(g) = grads {
            if let Some(dw) = dw {
                add_into(g.get_mut(self.w), &dw);
            }
            if let (Some(db), Some(id)) = (db, self.b) {
                add_into(g.get_mut(id), &db);
            }
        }
        dx
    }

    pub fn update_running(&self, buffers: &mut ParamStore, cache: &BlockCache) {
        if let (Some(ids), Some(bc)) = (&self.bn, &cache.bn) {
            let mut rm = buffers.get(ids.mean).to_vec();
            let mut rv = buffers.get(ids.var).to_vec();
            bc.update_running(&mut rm, &mut rv);
            buffers.get_mut(ids.mean).copy_from_slice(&rm);
            buffers.get_mut(ids.var).copy_from_slice(&rv);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
