//! Minimal CPU neural-network building blocks with hand-written backward
//! passes: NCHW tensors, named parameter stores, convolutions, batch
//! normalization, activations and Adam.
//!
//! Everything is `f64` so analytic gradients can be checked against central
//! finite differences.

mod adam;
mod conv;
mod norm;

pub use adam::AdamState;
pub use conv::{
    conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward, ConvSpec,
};
pub use norm::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, leaky_relu_backward, leaky_relu_forward,
    sigmoid, BnCache, BN_EPS, BN_MOMENTUM,
};

use crate::error::{Error, Result};

/// Dense `N × C × H × W` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::DimensionMismatch {
                what: "tensor data",
                expected: n * c * h * w,
                got: data.len(),
            });
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.n, self.c, self.h, self.w)
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.sample_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        (self.n, self.c, self.h, self.w) == (other.n, other.c, other.h, other.w)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape mismatch");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let dst = out.sample_mut(i);
            let la = a.sample_len();
            dst[..la].copy_from_slice(a.sample(i));
            dst[la..].copy_from_slice(b.sample(i));
        }
        out
    }

    /// Splits off the first `c_first` channels (inverse of [`Tensor::concat_channels`]).
    pub fn split_channels(&self, c_first: usize) -> (Tensor, Tensor) {
        let hw = self.h * self.w;
        let mut a = Tensor::zeros(self.n, c_first, self.h, self.w);
        let mut b = Tensor::zeros(self.n, self.c - c_first, self.h, self.w);
        for i in 0..self.n {
            let src = self.sample(i);
            a.sample_mut(i).copy_from_slice(&src[..c_first * hw]);
            b.sample_mut(i).copy_from_slice(&src[c_first * hw..]);
        }
        (a, b)
    }

    /// Multiplies every channel by a per-sample single-channel mask.
    pub fn mul_mask(&self, mask: &Tensor) -> Tensor {
        assert!(mask.c == 1 && mask.n == self.n && mask.h == self.h && mask.w == self.w);
        let hw = self.h * self.w;
        let mut out = self.clone();
        for i in 0..self.n {
            let m = mask.sample(i);
            for plane in out.sample_mut(i).chunks_exact_mut(hw) {
                for (v, mv) in plane.iter_mut().zip(m) {
                    *v *= mv;
                }
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named parameter tensors. Gradients and optimizer
/// moments use stores with the same layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].data
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: vec![0.0; e.data.len()],
                })
                .collect(),
        }
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, e) in self.entries.iter().enumerate() {
            if flat < e.data.len() {
                return (i, flat);
            }
            flat -= e.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Scalar at a flat index across all entries.
    pub fn flat_get(&self, flat: usize) -> f64 {
        let (e, i) = self.locate(flat);
        self.entries[e].data[i]
    }

    pub fn flat_set(&mut self, flat: usize, v: f64) {
        let (e, i) = self.locate(flat);
        self.entries[e].data[i] = v;
    }

    /// Name of the entry holding a flat index.
    pub fn flat_name(&self, flat: usize) -> &str {
        &self.entries[self.locate(flat).0].name
    }

    pub fn scale(&mut self, s: f64) {
        for e in &mut self.entries {
            e.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_scaled(&mut self, other: &ParamStore, s: f64) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += s * y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Checks that `other` has identical names and shapes.
    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Architecture(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Architecture(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }
}

/// `C = op(A)·op(B) + beta·C` for contiguous row-major matrices, where
/// `op(A)` is `m × k` and `op(B)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let (m, n, k) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let naive = |ta: bool, tb: bool| {
            let mut c = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        let av = if ta { a[p * m + i] } else { a[i * k + p] };
                        let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                        c[i * n + j] += av * bv;
                    }
                }
            }
            c
        };
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, n, k, &a, ta, &b, tb, &mut c, 0.0);
                for (x, y) in c.iter().zip(naive(ta, tb)) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_vec(2, 1, 2, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::from_vec(2, 2, 2, 2, (0..16).map(|v| -(v as f64)).collect()).unwrap();
        let cat = Tensor::concat_channels(&a, &b);
        let (a2, b2) = cat.split_channels(1);
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn param_store_flat_indexing() {
        let mut p = ParamStore::new();
        p.add("a", vec![2], vec![1.0, 2.0]);
        p.add("b", vec![3], vec![3.0, 4.0, 5.0]);
        assert_eq!(p.len(), 5);
        assert_eq!(p.flat_get(3), 4.0);
        p.flat_set(4, 9.0);
        assert_eq!(p.get(ParamId(1)), &[3.0, 4.0, 9.0]);
        assert_eq!(p.flat_name(1), "a");
        assert!(p.check_layout(&p.zeros_like()).is_ok());
    }
}
