/// Active pixels of a grid with their right/down neighbour links.
pub(crate) struct PixelGraph {
    /// Grid index of each unknown.
    pub pixels: Vec<usize>,
    /// `(a, b, horizontal)` unknown pairs; `b` is right of or below `a`.
    pub edges: Vec<(usize, usize, bool)>,
}

pub(crate) const INACTIVE: usize = usize::MAX;

impl PixelGraph {
    pub fn new(width: usize, height: usize, active: impl Fn(usize) -> bool) -> Self {
        let mut slot = vec![INACTIVE; width * height];
        let mut pixels = Vec::new();
        for (i, s) in slot.iter_mut().enumerate() {
            if active(i) {
                *s = pixels.len();
                pixels.push(i);
            }
        }
        let mut edges = Vec::new();
        for (a, &i) in pixels.iter().enumerate() {
            let (x, y) = (i % width, i / width);
            if x + 1 < width && slot[i + 1] != INACTIVE {
                edges.push((a, slot[i + 1], true));
            }
            if y + 1 < height && slot[i + width] != INACTIVE {
                edges.push((a, slot[i + width], false));
            }
        }
        Self { pixels, edges }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    /// Connected-component label per unknown, labels `0..count`.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let n = self.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b, _) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut label = vec![INACTIVE; n];
        let mut count = 0;
        let mut stack = Vec::new();
        for s in 0..n {
            if label[s] != INACTIVE {
                continue;
            }
            label[s] = count;
            stack.push(s);
            while let Some(u) = stack.pop() {
                for &v in &adj[u] {
                    if label[v] == INACTIVE {
                        label[v] = count;
                        stack.push(v);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    /// `out = diag ⊙ x + weight · L x` with `L` the graph Laplacian.
    pub fn apply_screened_laplacian(&self, diag: &[f64], weight: f64, x: &[f64], out: &mut [f64]) {
        for ((o, d), v) in out.iter_mut().zip(diag).zip(x) {
            *o = d * v;
        }
        for &(a, b, _) in &self.edges {
            let d = weight * (x[a] - x[b]);
            out[a] += d;
            out[b] -= d;
        }
    }
}

pub(crate) struct CgOutcome {
    pub converged: bool,
}

/// Conjugate gradients for a symmetric positive semi-definite operator,
/// starting from `x`. Stops when `‖r‖ ≤ tol · max(‖b‖, tiny)`. On a consistent
/// singular system the null-space part of the start vector is preserved.
pub(crate) fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> CgOutcome {
    let n = b.len();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut ax = vec![0.0; n];
    apply(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = tol * dot(b, b).sqrt().max(1e-300);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        if rr.sqrt() <= target {
            return CgOutcome { converged: true };
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            // Remaining residual lies in the null space.
            return CgOutcome {
                converged: rr.sqrt() <= target.max(1e-12),
            };
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    CgOutcome {
        converged: rr.sqrt() <= target,
    }
}
