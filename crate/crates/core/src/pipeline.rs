//! End-to-end operations on a single photograph: fit the model, render the
//! synthesis image, run the generator, and expression editing.

use crate::deocc_gan::{deocclude, NetworkParams};
use crate::error::{ensure_dim, Result};
use crate::fitting::{fit, FitConfig, FitResult, LandmarkSet2D};
use crate::imaging::ImageRGB;
use crate::morphable_model::{Coefficients, MorphableModel};
use crate::rasterizer::{render, RenderOutput, ShadingParams};

/// Where the model parameters of a photograph come from.
#[derive(Debug, Clone, Copy)]
pub enum FitSource<'a> {
    Landmarks(&'a LandmarkSet2D, &'a FitConfig),
    Fitted(&'a FitResult),
}

impl FitSource<'_> {
    pub fn resolve(self, model: &MorphableModel) -> Result<FitResult> {
        match self {
            FitSource::Landmarks(lm, cfg) => fit(model, lm, cfg, None),
            FitSource::Fitted(f) => {
                model.check_coefficients(&f.coefficients)?;
                Ok(f.clone())
            }
        }
    }
}

/// Renders the synthesis image for `coefficients` under the fitted pose,
/// with the canonical shading used to build training data.
pub fn synthesis(
    model: &MorphableModel,
    coefficients: &Coefficients,
    fit: &FitResult,
    width: usize,
    height: usize,
) -> Result<RenderOutput> {
    render(model, coefficients, &fit.pose, width, height, &ShadingParams::default())
}

#[derive(Debug, Clone)]
pub struct Deoccluded {
    pub fit: FitResult,
    pub synthesis: ImageRGB,
    pub output: ImageRGB,
}

/// Fits (or reuses) the parameters, renders the synthesis image and runs
/// the generator on the pair.
pub fn deocclude_photo(
    model: &MorphableModel,
    params: &NetworkParams,
    image: &ImageRGB,
    source: FitSource<'_>,
) -> Result<Deoccluded> {
    let fit = source.resolve(model)?;
    let coefficients = fit.coefficients.clone();
    run_with(model, params, image, fit, &coefficients)
}

fn run_with(
    model: &MorphableModel,
    params: &NetworkParams,
    image: &ImageRGB,
    fit: FitResult,
    coefficients: &Coefficients,
) -> Result<Deoccluded> {
    let synthesis = synthesis(model, coefficients, &fit, image.width(), image.height())?.image;
    let output = deocclude(params, image, &synthesis)?;
    Ok(Deoccluded {
        fit,
        synthesis,
        output,
    })
}

/// Expression components farther than three standard deviations from zero.
pub fn expression_out_of_range(model: &MorphableModel, beta: &[f64]) -> Vec<usize> {
    beta.iter()
        .zip(model.exp_std())
        .enumerate()
        .filter(|(_, (b, s))| b.abs() > 3.0 * **s)
        .map(|(i, _)| i)
        .collect()
}

/// De-occludes `image` with the fitted expression replaced by `new_beta`.
/// The returned `fit` keeps the fitted coefficients; `synthesis` shows the
/// edited face.
pub fn edit_expression(
    model: &MorphableModel,
    params: &NetworkParams,
    image: &ImageRGB,
    source: FitSource<'_>,
    new_beta: &[f64],
) -> Result<Deoccluded> {
    ensure_dim("expression coefficients", model.k_exp(), new_beta.len())?;
    let out_of_range = expression_out_of_range(model, new_beta);
    if !out_of_range.is_empty() {
        log::warn!("expression components {out_of_range:?} exceed three standard deviations");
    }
    let fit = source.resolve(model)?;
    let edited = Coefficients {
        alpha: fit.coefficients.alpha.clone(),
        beta: new_beta.to_vec(),
    };
    run_with(model, params, image, fit, &edited)
}
