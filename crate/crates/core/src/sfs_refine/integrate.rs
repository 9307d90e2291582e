use super::maps::{DepthMap, NormalMap};
use super::solve::{conjugate_gradient, PixelGraph};
use crate::error::{Error, Result};
use crate::imaging::FaceMask;

/// How the gradient along a pixel edge is taken from the two endpoint
/// gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// Mean of both endpoints; exact for quadratic surfaces.
    #[default]
    Trapezoid,
    /// The left (or upper) endpoint only; exact for forward differences.
    Forward,
}

impl std::str::FromStr for Stencil {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trapezoid" => Ok(Stencil::Trapezoid),
            "forward" => Ok(Stencil::Forward),
            _ => Err(Error::InvalidInput(format!("unknown stencil `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Integration {
    pub depth: DepthMap,
    /// Pixels whose `|nz|` was raised to the clamp threshold.
    pub clamped: usize,
    /// Connected pixel groups, each anchored separately.
    pub components: usize,
    pub converged: bool,
}

/// Surface gradient `(∂d/∂x, ∂d/∂y) = (−nx/nz, −ny/nz)` with `|nz|` floored
/// at `nz_min`. Returns the gradient and whether the floor applied.
fn gradient_of(n: [f64; 3], nz_min: f64) -> ([f64; 2], bool) {
    let mut nz = n[2];
    let clamped = nz.abs() < nz_min;
    if clamped {
        nz = if nz > 0.0 { nz_min } else { -nz_min };
    }
    ([-n[0] / nz, -n[1] / nz], clamped)
}

/// Least-squares integration of the normal field over mask pixels with
/// defined normals. Each connected group of pixels is shifted so its
/// mean matches the mean of `init_depth` over the same pixels (zero when
/// `init_depth` is undefined there).
pub fn integrate_normals(
    normals: &NormalMap,
    mask: &FaceMask,
    init_depth: &DepthMap,
    stencil: Stencil,
    nz_min: f64,
) -> Result<Integration> {
    let (w, h) = (normals.width, normals.height);
    if (mask.width(), mask.height()) != (w, h) || (init_depth.width, init_depth.height) != (w, h) {
        return Err(Error::InvalidInput("normal map, mask and anchor depth differ in size".into()));
    }
    if !(nz_min > 0.0 && nz_min <= 1.0) {
        return Err(Error::InvalidInput(format!("nz threshold {nz_min} must lie in (0, 1]")));
    }
    let g = PixelGraph::new(w, h, |i| mask.data()[i] != 0 && normals.is_defined(i));
    if g.len() == 0 {
        return Err(Error::InvalidInput("no pixels to integrate".into()));
    }
    let mut clamped = 0;
    let grads: Vec<[f64; 2]> = g
        .pixels
        .iter()
        .map(|&i| {
            let (p, c) = gradient_of(normals.normals[i], nz_min);
            clamped += c as usize;
            p
        })
        .collect();
    let mut rhs = vec![0.0; g.len()];
    for &(a, b, horizontal) in &g.edges {
        let k = if horizontal { 0 } else { 1 };
        let d = match stencil {
            Stencil::Trapezoid => 0.5 * (grads[a][k] + grads[b][k]),
            Stencil::Forward => grads[a][k],
        };
        rhs[b] += d;
        rhs[a] -= d;
    }
    let zeros = vec![0.0; g.len()];
    let mut z = vec![0.0; g.len()];
    let out = conjugate_gradient(
        |v, o| g.apply_screened_laplacian(&zeros, 1.0, v, o),
        &rhs,
        &mut z,
        1e-12,
        20 * g.len() + 200,
    );
    let (label, count) = g.components();
    let mut sum_z = vec![0.0; count];
    let mut sum_a = vec![0.0; count];
    let mut n_z = vec![0usize; count];
    let mut n_a = vec![0usize; count];
    for (u, &i) in g.pixels.iter().enumerate() {
        sum_z[label[u]] += z[u];
        n_z[label[u]] += 1;
        if init_depth.is_defined(i) {
            sum_a[label[u]] += init_depth.values[i];
            n_a[label[u]] += 1;
        }
    }
    let shift: Vec<f64> = (0..count)
        .map(|c| {
            let anchor = if n_a[c] > 0 { sum_a[c] / n_a[c] as f64 } else { 0.0 };
            anchor - sum_z[c] / n_z[c] as f64
        })
        .collect();
    let mut depth = DepthMap::undefined(w, h);
    for (u, &i) in g.pixels.iter().enumerate() {
        depth.values[i] = z[u] + shift[label[u]];
    }
    Ok(Integration {
        depth,
        clamped,
        components: count,
        converged: out.converged,
    })
}
