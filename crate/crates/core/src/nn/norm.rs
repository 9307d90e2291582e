use super::Tensor;

pub const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics saved by a training-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl BnCache {
    /// Folds the batch statistics into running estimates (unbiased variance).
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        let count = (self.xhat.n * self.xhat.h * self.xhat.w) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - BN_MOMENTUM) * running_mean[c] + BN_MOMENTUM * self.mean[c];
            running_var[c] = (1.0 - BN_MOMENTUM) * running_var[c] + BN_MOMENTUM * self.var[c] * unbias;
        }
    }
}

fn channel_apply(x: &Tensor, mut f: impl FnMut(usize, &[f64])) {
    let hw = x.h * x.w;
    for n in 0..x.n {
        for (c, plane) in x.sample(n).chunks_exact(hw).enumerate() {
            f(c, plane);
        }
    }
}

/// Batch norm with batch statistics (biased variance).
pub fn batchnorm_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnCache) {
    let count = (x.n * x.h * x.w) as f64;
    let mut mean = vec![0.0; x.c];
    channel_apply(x, |c, p| mean[c] += p.iter().sum::<f64>());
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; x.c];
    channel_apply(x, |c, p| var[c] += p.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>());
    var.iter_mut().for_each(|v| *v /= count);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let hw = x.h * x.w;
    let mut xhat = x.clone();
    let mut y = x.zeros_like();
    for n in 0..x.n {
        for (c, (xh, yp)) in xhat
            .sample_mut(n)
            .chunks_exact_mut(hw)
            .zip(y.sample_mut(n).chunks_exact_mut(hw))
            .enumerate()
        {
            for (a, b) in xh.iter_mut().zip(yp.iter_mut()) {
                *a = (*a - mean[c]) * inv_std[c];
                *b = gamma[c] * *a + beta[c];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            mean,
            var,
            inv_std,
        },
    )
}

/// Batch norm with stored running statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Tensor {
    let hw = x.h * x.w;
    let mut y = x.clone();
    for n in 0..x.n {
        for (c, plane) in y.sample_mut(n).chunks_exact_mut(hw).enumerate() {
            let s = gamma[c] / (running_var[c] + BN_EPS).sqrt();
            let o = beta[c] - running_mean[c] * s;
            plane.iter_mut().for_each(|v| *v = *v * s + o);
        }
    }
    y
}

/// Backward of [`batchnorm_train`]. Accumulates into `dgamma` / `dbeta`.
pub fn batchnorm_backward(
    cache: &BnCache,
    dy: &Tensor,
    gamma: &[f64],
    dgamma: Option<&mut [f64]>,
    dbeta: Option<&mut [f64]>,
) -> Tensor {
    let c_count = gamma.len();
    let count = (dy.n * dy.h * dy.w) as f64;
    let hw = dy.h * dy.w;
    let mut sum_dy = vec![0.0; c_count];
    let mut sum_dy_xhat = vec![0.0; c_count];
    for n in 0..dy.n {
        for (c, (g, xh)) in dy
            .sample(n)
            .chunks_exact(hw)
            .zip(cache.xhat.sample(n).chunks_exact(hw))
            .enumerate()
        {
            sum_dy[c] += g.iter().sum::<f64>();
            sum_dy_xhat[c] += g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    if let Some(dg) = dgamma {
        dg.iter_mut().zip(&sum_dy_xhat).for_each(|(d, s)| *d += s);
    }
    if let Some(db) = dbeta {
        db.iter_mut().zip(&sum_dy).for_each(|(d, s)| *d += s);
    }
    let mut dx = dy.zeros_like();
    for n in 0..dy.n {
        let src = dy.sample(n);
        let xh = cache.xhat.sample(n);
        for (c, plane) in dx.sample_mut(n).chunks_exact_mut(hw).enumerate() {
            let k = gamma[c] * cache.inv_std[c] / count;
            let off = c * hw;
            for (j, v) in plane.iter_mut().enumerate() {
                *v = k * (count * src[off + j] - sum_dy[c] - xh[off + j] * sum_dy_xhat[c]);
            }
        }
    }
    dx
}

/// In-place leaky ReLU; `slope = 0` gives a plain ReLU.
pub fn leaky_relu_forward(x: &mut Tensor, slope: f64) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Backward of a leaky ReLU using its output, whose sign matches the input
/// for any `slope >= 0`.
pub fn leaky_relu_backward(y: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    let mut dx = dy.clone();
    for (g, v) in dx.data.iter_mut().zip(&y.data) {
        if *v <= 0.0 {
            *g *= slope;
        }
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
