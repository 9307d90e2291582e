//! Detail refinement of the coarse fitted surface by shape from shading:
//! Lambertian reflectance under second-order spherical-harmonics lighting,
//! estimated in turn as lighting, albedo and normals, then integrated to
//! depth.
//!
//! Normals live in view space (`x` right, `y` down, `z` away from the
//! camera) and depth is view `z` in pixel units, so `∂d/∂x = −nx/nz`.

mod integrate;
mod lighting;
mod maps;
mod shading;
mod solve;

pub use integrate::{integrate_normals, Integration, Stencil};
pub use lighting::{estimate_lighting, sh_basis, LightingEstimate, LightingSH, SH_TERMS};
pub use maps::{depth_to_obj, save_obj, AlbedoMap, DepthMap, NormalMap, ScalarMap};
pub use shading::{estimate_albedo, refine_normals, AlbedoEstimate, NormalRefinement};

use crate::error::{Error, Result};
use crate::fitting::FitResult;
use crate::imaging::{FaceMask, ImageRGB};
use crate::morphable_model::MorphableModel;
use crate::rasterizer::{render, ShadingParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SfsConfig {
    /// Weight of `‖n − n_init‖²` in the per-pixel normal objective.
    pub fidelity_weight: f64,
    /// Weight of the albedo smoothness prior.
    pub smoothness: f64,
    /// `|nz|` floor before converting normals to gradients.
    pub nz_min: f64,
    pub stencil: Stencil,
}

impl Default for SfsConfig {
    fn default() -> Self {
        Self {
            fidelity_weight: 0.1,
            smoothness: 1.0,
            nz_min: 0.05,
            stencil: Stencil::Trapezoid,
        }
    }
}

impl SfsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("fidelity_weight", self.fidelity_weight), ("smoothness", self.smoothness)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.nz_min > 0.0 && self.nz_min <= 1.0) {
            return Err(Error::InvalidInput(format!("nz_min {} must lie in (0, 1]", self.nz_min)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfsResult {
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub albedo: AlbedoMap,
    pub lighting: LightingEstimate,
    pub coarse_depth: DepthMap,
    pub coarse_normals: NormalMap,
    pub mask: FaceMask,
    pub albedo_excluded: usize,
    pub normals_non_converged: usize,
    pub gradients_clamped: usize,
}

/// Coarse depth (pixel units) and normals of the fitted model, plus its
/// face mask.
pub fn coarse_geometry(
    fit: &FitResult,
    model: &MorphableModel,
    width: usize,
    height: usize,
) -> Result<(DepthMap, NormalMap, FaceMask)> {
    let out = render(model, &fit.coefficients, &fit.pose, width, height, &ShadingParams::default())?;
    let mut depth = DepthMap::undefined(width, height);
    for (i, d) in out.depth.iter().enumerate() {
        if out.mask.data()[i] != 0 {
            depth.values[i] = fit.pose.scale * d;
        }
    }
    let normals = NormalMap::from_normals(width, height, out.normals)?;
    Ok((depth, normals, out.mask))
}

/// Full cascade on `image`: render the fit for initial normals and depth,
/// then estimate lighting, albedo and refined normals, and integrate.
pub fn refine(image: &ImageRGB, fit: &FitResult, model: &MorphableModel, cfg: &SfsConfig) -> Result<SfsResult> {
    cfg.validate()?;
    let (w, h) = (image.width(), image.height());
    let (coarse_depth, coarse_normals, mask) = coarse_geometry(fit, model, w, h)?;
    if mask.is_empty() {
        return Err(Error::InvalidInput("the fitted model covers no pixels of the image".into()));
    }
    let gray = image.luma();
    let lighting = estimate_lighting(&gray, &coarse_normals, &mask, None)?;
    let albedo = estimate_albedo(&gray, &coarse_normals, &lighting.lighting, &mask, cfg.smoothness)?;
    let refined = refine_normals(
        &gray,
        &albedo.albedo,
        &lighting.lighting,
        &coarse_normals,
        &mask,
        cfg.fidelity_weight,
    )?;
    let integ = integrate_normals(&refined.normals, &mask, &coarse_depth, cfg.stencil, cfg.nz_min)?;
    Ok(SfsResult {
        depth: integ.depth,
        normals: refined.normals,
        albedo: albedo.albedo,
        lighting,
        coarse_depth,
        coarse_normals,
        mask,
        albedo_excluded: albedo.excluded,
        normals_non_converged: refined.non_converged,
        gradients_clamped: integ.clamped,
    })
}

#[cfg(test)]
mod tests;
