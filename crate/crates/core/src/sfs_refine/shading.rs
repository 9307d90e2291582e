use super::lighting::{check_sizes, sh_gradient, LightingSH, SH_TERMS};
use super::maps::{norm3, AlbedoMap, NormalMap};
use super::solve::{conjugate_gradient, PixelGraph};
use crate::error::{Error, Result};
use crate::imaging::FaceMask;

#[derive(Debug, Clone, PartialEq)]
pub struct AlbedoEstimate {
    pub albedo: AlbedoMap,
    /// Pixels whose shading was too small to carry data; filled from
    /// their neighbours.
    pub excluded: usize,
    pub converged: bool,
}

/// Shading magnitude (relative to the largest) below which a pixel is
/// excluded from the albedo data term.
const MIN_SHADING: f64 = 1e-4;

/// Screened least squares for albedo:
/// `Σ (s·ρ − I)² + smoothness · Σ_neighbours (ρ_i − ρ_j)²` with shading
/// `s = l · Y(n)`. Output is clamped to `[0, ∞)`.
pub fn estimate_albedo(
    gray: &[f64],
    normals: &NormalMap,
    lighting: &LightingSH,
    mask: &FaceMask,
    smoothness: f64,
) -> Result<AlbedoEstimate> {
    let (w, h) = (normals.width, normals.height);
    check_sizes(gray.len(), mask, w, h)?;
    if !(smoothness.is_finite() && smoothness >= 0.0) {
        return Err(Error::InvalidInput(format!("smoothness {smoothness} must be non-negative")));
    }
    let g = PixelGraph::new(w, h, |i| mask.data()[i] != 0 && normals.is_defined(i) && gray[i].is_finite());
    if g.len() == 0 {
        return Err(Error::InvalidInput("no pixels to estimate albedo on".into()));
    }
    let shading: Vec<f64> = g.pixels.iter().map(|&i| lighting.shade(normals.normals[i])).collect();
    let smax = shading.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let valid: Vec<bool> = shading.iter().map(|s| smax > 0.0 && s.abs() >= MIN_SHADING * smax).collect();
    let excluded = valid.iter().filter(|v| !**v).count();
    if excluded == g.len() {
        return Err(Error::Infeasible("shading vanishes on every pixel".into()));
    }
    let diag: Vec<f64> = shading.iter().zip(&valid).map(|(s, &v)| if v { s * s } else { 0.0 }).collect();
    let rhs: Vec<f64> = g
        .pixels
        .iter()
        .zip(&shading)
        .zip(&valid)
        .map(|((&i, s), &v)| if v { s * gray[i] } else { 0.0 })
        .collect();
    // Start from the shading-weighted mean albedo: the limit of infinite
    // smoothness and the fill value for isolated excluded pixels.
    let mean = rhs.iter().sum::<f64>() / diag.iter().sum::<f64>();
    let mut x = vec![mean; g.len()];
    let out = conjugate_gradient(
        |v, o| g.apply_screened_laplacian(&diag, smoothness, v, o),
        &rhs,
        &mut x,
        1e-12,
        20 * g.len() + 100,
    );
    let mut albedo = AlbedoMap::undefined(w, h);
    for (&i, v) in g.pixels.iter().zip(&x) {
        albedo.values[i] = v.max(0.0);
    }
    if albedo.values.iter().any(|v| v.is_infinite()) {
        return Err(Error::NonFinite("albedo".into()));
    }
    Ok(AlbedoEstimate {
        albedo,
        excluded,
        converged: out.converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalRefinement {
    pub normals: NormalMap,
    /// Pixels that kept their initial normal because the solver failed.
    pub non_converged: usize,
}

const MAX_PIXEL_ITERS: usize = 50;

fn pixel_objective(i: f64, rho: f64, l: &LightingSH, n: [f64; 3], n0: [f64; 3], w: f64) -> f64 {
    let r = i - rho * l.shade(n);
    let d = (0..3).map(|k| (n[k] - n0[k]).powi(2)).sum::<f64>();
    r * r + w * d
}

fn tangent_basis(n: [f64; 3]) -> [[f64; 3]; 2] {
    let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let t1 = cross(n, helper);
    let l1 = norm3(t1);
    let t1 = t1.map(|v| v / l1);
    [t1, cross(n, t1)]
}

/// Damped Gauss–Newton on the unit sphere for one pixel. Returns the
/// refined normal, or `None` when the iteration cap is hit without
/// convergence or values stop being finite.
fn refine_pixel(i: f64, rho: f64, l: &LightingSH, n0: [f64; 3], w: f64) -> Option<[f64; 3]> {
    let mut n = n0;
    let mut e = pixel_objective(i, rho, l, n, n0, w);
    let mut mu = 1e-3;
    let sw = w.sqrt();
    for _ in 0..MAX_PIXEL_ITERS {
        if e <= 1e-28 {
            return Some(n);
        }
        let t = tangent_basis(n);
        let grad_y = sh_gradient(n);
        let dshade: [f64; 3] = [0, 1, 2].map(|k| (0..SH_TERMS).map(|j| l.coeffs[j] * grad_y[k][j]).sum());
        // Rows of J (residual derivatives w.r.t. the two tangent steps).
        let mut rows: Vec<([f64; 2], f64)> = Vec::with_capacity(4);
        let jd = [0, 1].map(|c| -rho * (0..3).map(|k| dshade[k] * t[c][k]).sum::<f64>());
        rows.push((jd, i - rho * l.shade(n)));
        for k in 0..3 {
            rows.push(([sw * t[0][k], sw * t[1][k]], sw * (n[k] - n0[k])));
        }
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for (j, r) in &rows {
            for a in 0..2 {
                jtr[a] += j[a] * r;
                for b in 0..2 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        if jtr[0].hypot(jtr[1]) <= 1e-15 {
            return Some(n);
        }
        let mut improved = false;
        while mu < 1e12 {
            let (a, b, c, d) = (jtj[0][0] + mu, jtj[0][1], jtj[1][0], jtj[1][1] + mu);
            let det = a * d - b * c;
            let step = [-(d * jtr[0] - b * jtr[1]) / det, -(a * jtr[1] - c * jtr[0]) / det];
            let cand = [0, 1, 2].map(|k| n[k] + step[0] * t[0][k] + step[1] * t[1][k]);
            let len = norm3(cand);
            let cand = cand.map(|v| v / len);
            let ec = pixel_objective(i, rho, l, cand, n0, w);
            if ec.is_finite() && ec < e {
                let done = e - ec <= 1e-12 * e + 1e-30;
                n = cand;
                e = ec;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if done {
                    return Some(n);
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            // No descent direction left: a local minimum.
            return Some(n);
        }
    }
    None
}

/// Per-pixel minimization of
/// `(I − ρ · l · Y(n))² + fidelity_weight · ‖n − n_init‖²` over unit
/// normals. The objective never increases relative to `n_init`.
pub fn refine_normals(
    gray: &[f64],
    albedo: &AlbedoMap,
    lighting: &LightingSH,
    init: &NormalMap,
    mask: &FaceMask,
    fidelity_weight: f64,
) -> Result<NormalRefinement> {
    let (w, h) = (init.width, init.height);
    check_sizes(gray.len(), mask, w, h)?;
    if (albedo.width, albedo.height) != (w, h) {
        return Err(Error::InvalidInput("albedo and normal maps differ in size".into()));
    }
    if !(fidelity_weight.is_finite() && fidelity_weight >= 0.0) {
        return Err(Error::InvalidInput(format!("fidelity weight {fidelity_weight} must be non-negative")));
    }
    let mut out = init.clone();
    let mut non_converged = 0;
    for i in 0..w * h {
        if mask.data()[i] == 0 || !init.is_defined(i) || !albedo.is_defined(i) || !gray[i].is_finite() {
            continue;
        }
        let n0 = init.normals[i];
        let len = norm3(n0);
        let n0 = if (len - 1.0).abs() > 1e-6 {
            log::warn!("initial normal at pixel {i} has length {len}; normalizing");
            n0.map(|v| v / len)
        } else {
            n0
        };
        match refine_pixel(gray[i], albedo.values[i], lighting, n0, fidelity_weight) {
            Some(n) => out.normals[i] = n,
            None => {
                out.normals[i] = n0;
                non_converged += 1;
            }
        }
    }
    if non_converged > 0 {
        log::info!("{non_converged} pixels kept their initial normal");
    }
    Ok(NormalRefinement {
        normals: out,
        non_converged,
    })
}
