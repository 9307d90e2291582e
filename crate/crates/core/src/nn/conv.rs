use super::{gemm, Tensor};

/// Square-kernel convolution hyper-parameters.
///
/// Conv weights are stored `[cout, cin·k·k]`; transposed-conv weights are
/// stored `[cin, cout·k·k]`, the same memory layout as the forward conv they
/// are the adjoint of.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn conv_out(&self, size: usize) -> usize {
        (size + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn conv_transpose_out(&self, size: usize) -> usize {
        (size - 1) * self.stride + self.k - 2 * self.pad
    }

    pub fn conv_weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

/// Patch geometry: an image of `c × h × w` sampled by a `k × k` window into
/// an `oh × ow` grid.
#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f64], g: Geom, col: &mut [f64]) {
    let pcount = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * pcount..(row + 1) * pcount];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) patch columns into `x`.
fn col2im(col: &[f64], g: Geom, x: &mut [f64]) {
    let pcount = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * pcount..(row + 1) * pcount];
                for oy in 0..g.oh {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(spec: &ConvSpec, h: usize, w: usize) -> Geom {
    Geom {
        c: spec.cin,
        h,
        w,
        k: spec.k,
        s: spec.stride,
        p: spec.pad,
        oh: spec.conv_out(h),
        ow: spec.conv_out(w),
    }
}

/// Geometry of the forward conv whose adjoint is the transposed conv from
/// an `h × w` input.
fn transpose_geom(spec: &ConvSpec, h: usize, w: usize) -> Geom {
    Geom {
        c: spec.cout,
        h: spec.conv_transpose_out(h),
        w: spec.conv_transpose_out(w),
        k: spec.k,
        s: spec.stride,
        p: spec.pad,
        oh: h,
        ow: w,
    }
}

fn add_bias(y: &mut [f64], bias: Option<&[f64]>, plane: usize) {
    if let Some(b) = bias {
        for (chan, bv) in y.chunks_exact_mut(plane).zip(b) {
            chan.iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn accumulate_bias_grad(dy: &[f64], db: Option<&mut [f64]>, plane: usize) {
    if let Some(db) = db {
        for (chan, g) in dy.chunks_exact(plane).zip(db.iter_mut()) {
            *g += chan.iter().sum::<f64>();
        }
    }
}

/// Forward convolution. Returns the output and the patch matrices of every
/// sample, which the backward pass reuses.
pub fn conv2d_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> (Tensor, Vec<f64>) {
    assert_eq!(x.c, spec.cin, "conv input channels");
    assert_eq!(weight.len(), spec.conv_weight_len());
    let g = conv_geom(spec, x.h, x.w);
    let per = g.rows() * g.cols();
    let mut cols = vec![0.0; per * x.n];
    let mut y = Tensor::zeros(x.n, spec.cout, g.oh, g.ow);
    for i in 0..x.n {
        let col = &mut cols[i * per..(i + 1) * per];
        im2col(x.sample(i), g, col);
        let ys = y.sample_mut(i);
        gemm(spec.cout, g.cols(), g.rows(), weight, false, col, false, ys, 0.0);
        add_bias(ys, bias, g.cols());
    }
    (y, cols)
}

/// Backward convolution. Accumulates into `dw` / `db` and returns the input
/// gradient when `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    spec: &ConvSpec,
    in_hw: (usize, usize),
    cols: &[f64],
    dy: &Tensor,
    weight: &[f64],
    dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor> {
    let g = conv_geom(spec, in_hw.0, in_hw.1);
    let per = g.rows() * g.cols();
    let mut dw = dw;
    let mut dx = need_dx.then(|| Tensor::zeros(dy.n, spec.cin, in_hw.0, in_hw.1));
    let mut dcol = vec![0.0; if need_dx { per } else { 0 }];
    for i in 0..dy.n {
        let dys = dy.sample(i);
        if let Some(dw) = dw.as_deref_mut() {
            let col = &cols[i * per..(i + 1) * per];
            gemm(spec.cout, g.rows(), g.cols(), dys, false, col, true, dw, 1.0);
        }
        accumulate_bias_grad(dys, db.as_deref_mut(), g.cols());
        if let Some(dx) = dx.as_mut() {
            gemm(g.rows(), g.cols(), spec.cout, weight, true, dys, false, &mut dcol, 0.0);
            col2im(&dcol, g, dx.sample_mut(i));
        }
    }
    dx
}

/// Forward transposed convolution (the adjoint of a strided conv).
pub fn conv_transpose2d_forward(
    x: &Tensor,
    weight: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Tensor {
    assert_eq!(x.c, spec.cin, "transposed conv input channels");
    assert_eq!(weight.len(), spec.conv_weight_len());
    let g = transpose_geom(spec, x.h, x.w);
    let mut col = vec![0.0; g.rows() * g.cols()];
    let mut y = Tensor::zeros(x.n, spec.cout, g.h, g.w);
    for i in 0..x.n {
        gemm(g.rows(), g.cols(), spec.cin, weight, true, x.sample(i), false, &mut col, 0.0);
        let ys = y.sample_mut(i);
        col2im(&col, g, ys);
        add_bias(ys, bias, g.h * g.w);
    }
    y
}

/// Backward transposed convolution; `x` is the forward input.
pub fn conv_transpose2d_backward(
    spec: &ConvSpec,
    x: &Tensor,
    dy: &Tensor,
    weight: &[f64],
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
    need_dx: bool,
) -> Option<Tensor> {
    let g = transpose_geom(spec, x.h, x.w);
    let mut dcol = vec![0.0; g.rows() * g.cols()];
    let mut dx = need_dx.then(|| x.zeros_like());
    for i in 0..dy.n {
        let dys = dy.sample(i);
        im2col(dys, g, &mut dcol);
        if let Some(dw) = dw.as_deref_mut() {
            gemm(spec.cin, g.rows(), g.cols(), x.sample(i), false, &dcol, true, dw, 1.0);
        }
        accumulate_bias_grad(dys, db.as_deref_mut(), g.h * g.w);
        if let Some(dx) = dx.as_mut() {
            gemm(spec.cin, g.cols(), g.rows(), weight, false, &dcol, false, dx.sample_mut(i), 0.0);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], s: &ConvSpec) -> Tensor {
        let (oh, ow) = (s.conv_out(x.h), s.conv_out(x.w));
        let mut y = Tensor::zeros(x.n, s.cout, oh, ow);
        for n in 0..x.n {
            for co in 0..s.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[co];
                        for ci in 0..s.cin {
                            for ky in 0..s.k {
                                for kx in 0..s.k {
                                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let xv = x.data[((n * s.cin + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    acc += xv * w[((co * s.cin + ci) * s.k + ky) * s.k + kx];
                                }
                            }
                        }
                        y.data[((n * s.cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_matches_direct_loop() {
        for (k, stride, pad) in [(4, 2, 1), (3, 1, 1), (2, 1, 0)] {
            let spec = ConvSpec { cin: 2, cout: 3, k, stride, pad };
            let x = Tensor::from_vec(2, 2, 6, 6, random(144, 1)).unwrap();
            let w = random(spec.conv_weight_len(), 2);
            let b = random(3, 3);
            let (y, _) = conv2d_forward(&x, &w, Some(&b), &spec);
            let y0 = naive_conv(&x, &w, &b, &spec);
            assert!(y.same_shape(&y0));
            for (a, b) in y.data.iter().zip(&y0.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), u> == <x, convT(u)> when both share the weight memory.
        let conv = ConvSpec { cin: 3, cout: 4, k: 4, stride: 2, pad: 1 };
        let tconv = ConvSpec { cin: 4, cout: 3, k: 4, stride: 2, pad: 1 };
        let x = Tensor::from_vec(1, 3, 8, 8, random(192, 4)).unwrap();
        let w = random(conv.conv_weight_len(), 5);
        let (y, _) = conv2d_forward(&x, &w, None, &conv);
        let u = Tensor::from_vec(1, 4, 4, 4, random(64, 6)).unwrap();
        let xt = conv_transpose2d_forward(&u, &w, None, &tconv);
        assert!(xt.same_shape(&x));
        assert!((dot(&y.data, &u.data) - dot(&x.data, &xt.data)).abs() < 1e-10);
    }

    fn check_grads(transposed: bool) {
        let spec = if transposed {
            ConvSpec { cin: 2, cout: 3, k: 4, stride: 2, pad: 1 }
        } else {
            ConvSpec { cin: 2, cout: 3, k: 3, stride: 2, pad: 1 }
        };
        let (h, w) = if transposed { (3, 3) } else { (5, 5) };
        let x = Tensor::from_vec(2, 2, h, w, random(2 * 2 * h * w, 7)).unwrap();
        let wt = random(spec.conv_weight_len(), 8);
        let b = random(3, 9);
        let fwd = |x: &Tensor, wt: &[f64], b: &[f64]| {
            if transposed {
                conv_transpose2d_forward(x, wt, Some(b), &spec)
            } else {
                conv2d_forward(x, wt, Some(b), &spec).0
            }
        };
        let y = fwd(&x, &wt, &b);
        let g = Tensor::from_vec(y.n, y.c, y.h, y.w, random(y.data.len(), 10)).unwrap();
        let loss = |x: &Tensor, wt: &[f64], b: &[f64]| dot(&fwd(x, wt, b).data, &g.data);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; 3];
        let dx = if transposed {
            conv_transpose2d_backward(&spec, &x, &g, &wt, Some(&mut dw), Some(&mut db), true)
        } else {
            let (_, cols) = conv2d_forward(&x, &wt, Some(&b), &spec);
            conv2d_backward(&spec, (h, w), &cols, &g, &wt, Some(&mut dw), Some(&mut db), true)
        }
        .unwrap();
        let eps = 1e-6;
        for i in 0..wt.len() {
            let (mut p, mut m) = (wt.clone(), wt.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6, "dw[{i}] {fd} vs {}", dw[i]);
        }
        for i in 0..3 {
            let (mut p, mut m) = (b.clone(), b.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (loss(&x, &wt, &p) - loss(&x, &wt, &m)) / (2.0 * eps);
            assert!((fd - db[i]).abs() < 1e-6);
        }
        for i in 0..x.data.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += eps;
            m.data[i] -= eps;
            let fd = (loss(&p, &wt, &b) - loss(&m, &wt, &b)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_grads(false);
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        check_grads(true);
    }

    #[test]
    fn output_sizes() {
        let s = ConvSpec { cin: 1, cout: 1, k: 4, stride: 2, pad: 1 };
        assert_eq!(s.conv_out(64), 32);
        assert_eq!(s.conv_transpose_out(32), 64);
        let s = ConvSpec { cin: 1, cout: 1, k: 3, stride: 1, pad: 1 };
        assert_eq!(s.conv_out(1), 1);
    }
}
