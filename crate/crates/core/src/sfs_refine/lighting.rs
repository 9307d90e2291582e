use log::warn;
use nalgebra::{DMatrix, DVector};

use super::maps::{norm3, NormalMap};
use crate::error::{Error, Result};
use crate::imaging::FaceMask;

pub const SH_TERMS: usize = 9;

/// Second-order spherical-harmonics lighting in image-intensity units,
/// paired with [`sh_basis`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightingSH {
    pub coeffs: [f64; SH_TERMS],
}

impl LightingSH {
    /// Irradiance `l · Y(n)` for a unit normal.
    pub fn shade(&self, n: [f64; 3]) -> f64 {
        dot9(&self.coeffs, &sh_basis_unchecked(n))
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub fn to_text(&self) -> String {
        let v: Vec<String> = self.coeffs.iter().map(|c| format!("{c:?}")).collect();
        format!("lighting: {}\n", v.join(" "))
    }
}

fn dot9(a: &[f64; SH_TERMS], b: &[f64; SH_TERMS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sh_basis_unchecked(n: [f64; 3]) -> [f64; SH_TERMS] {
    let [x, y, z] = n;
    [1.0, x, y, z, x * y, x * z, y * z, x * x - y * y, 3.0 * z * z - 1.0]
}

/// Unnormalized basis `[1, x, y, z, xy, xz, yz, x²−y², 3z²−1]`. Inputs
/// that are not unit length are normalized (with a warning).
pub fn sh_basis(n: [f64; 3]) -> [f64; SH_TERMS] {
    let len = norm3(n);
    if (len - 1.0).abs() > 1e-6 && len > 0.0 {
        warn!("normal {n:?} has length {len}; normalizing");
        return sh_basis_unchecked(n.map(|v| v / len));
    }
    sh_basis_unchecked(n)
}

/// Partial derivatives of [`sh_basis`] with respect to `x`, `y`, `z`.
pub(crate) fn sh_gradient(n: [f64; 3]) -> [[f64; SH_TERMS]; 3] {
    let [x, y, z] = n;
    [
        [0.0, 1.0, 0.0, 0.0, y, z, 0.0, 2.0 * x, 0.0],
        [0.0, 0.0, 1.0, 0.0, x, 0.0, z, -2.0 * y, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0, x, y, 0.0, 6.0 * z],
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightingEstimate {
    pub lighting: LightingSH,
    /// Constant albedo assumed while solving.
    pub albedo0: f64,
    /// The normals did not span all nine basis functions; the solve was
    /// ridge-regularized.
    pub rank_deficient: bool,
    pub residual_rms: f64,
    pub pixels: usize,
}

/// Relative singular-value floor below which the system is rank deficient.
const RANK_TOL: f64 = 1e-9;
const RIDGE: f64 = 1e-8;

/// Least-squares lighting for `I = ρ₀ · l · Y(n)` over mask pixels with
/// defined normals. `ρ₀` defaults to the mean intensity of those pixels.
pub fn estimate_lighting(
    gray: &[f64],
    normals: &NormalMap,
    mask: &FaceMask,
    albedo0: Option<f64>,
) -> Result<LightingEstimate> {
    let (w, h) = (normals.width, normals.height);
    check_sizes(gray.len(), mask, w, h)?;
    let idx: Vec<usize> = (0..w * h)
        .filter(|&i| mask.data()[i] != 0 && normals.is_defined(i) && gray[i].is_finite())
        .collect();
    if idx.len() < SH_TERMS {
        return Err(Error::Underdetermined {
            needed: SH_TERMS,
            available: idx.len(),
        });
    }
    let rho = albedo0.unwrap_or_else(|| idx.iter().map(|&i| gray[i]).sum::<f64>() / idx.len() as f64);
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::InvalidInput(format!("albedo {rho} must be positive")));
    }
    let m = idx.len();
    let a = DMatrix::from_fn(m, SH_TERMS, |r, c| rho * sh_basis(normals.normals[idx[r]])[c]);
    let b = DVector::from_iterator(m, idx.iter().map(|&i| gray[i]));
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rank_deficient = !(smax > 0.0) || smin < RANK_TOL * smax;
    let l = if rank_deficient {
        warn!("lighting system is rank deficient ({smin:.3e} / {smax:.3e}); using ridge solve");
        let ata = a.transpose() * &a + DMatrix::identity(SH_TERMS, SH_TERMS) * (RIDGE * smax.max(1.0).powi(2));
        let atb = a.transpose() * &b;
        ata.cholesky()
            .ok_or_else(|| Error::Infeasible("regularized lighting system is not positive definite".into()))?
            .solve(&atb)
    } else {
        svd.solve(&b, 0.0).map_err(|e| Error::Infeasible(format!("lighting solve failed: {e}")))?
    };
    let mut coeffs = [0.0; SH_TERMS];
    coeffs.copy_from_slice(l.as_slice());
    let residual = &a * &l - &b;
    let lighting = LightingSH { coeffs };
    if !lighting.is_finite() {
        return Err(Error::NonFinite("lighting coefficients".into()));
    }
    Ok(LightingEstimate {
        lighting,
        albedo0: rho,
        rank_deficient,
        residual_rms: (residual.norm_squared() / m as f64).sqrt(),
        pixels: m,
    })
}

pub(crate) fn check_sizes(gray_len: usize, mask: &FaceMask, w: usize, h: usize) -> Result<()> {
    if gray_len != w * h {
        return Err(Error::DimensionMismatch {
            what: "intensity pixels",
            expected: w * h,
            got: gray_len,
        });
    }
    if (mask.width(), mask.height()) != (w, h) {
        return Err(Error::InvalidInput(format!(
            "mask is {}×{}, maps are {w}×{h}",
            mask.width(),
            mask.height()
        )));
    }
    Ok(())
}
