use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fitting::CameraPose;
use crate::imaging::FaceMask;
use crate::morphable_model::{generate_synthetic_model, Coefficients, SyntheticModelSpec};

const L_TRUE: [f64; 9] = [0.6, 0.1, -0.15, -0.45, 0.03, -0.02, 0.05, 0.04, 0.06];

/// Visible hemisphere of radius `r` centred at `(c, c)`.
fn sphere(size: usize, c: f64, r: f64) -> (NormalMap, FaceMask) {
    let mut normals = NormalMap::undefined(size, size);
    let mut mask = FaceMask::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5 - c) / r, (y as f64 + 0.5 - c) / r);
            let q = 1.0 - u * u - v * v;
            if q > 0.01 {
                normals.normals[y * size + x] = [u, v, -q.sqrt()];
                mask.set(x, y, true);
            }
        }
    }
    (normals, mask)
}

fn shade_image(normals: &NormalMap, l: &LightingSH, albedo: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..normals.normals.len())
        .map(|i| if normals.is_defined(i) { albedo(i) * l.shade(normals.normals[i]) } else { 0.0 })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn sh_basis_at_axes() {
    assert_eq!(sh_basis([0.0, 0.0, 1.0]), [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    assert_eq!(sh_basis([1.0, 0.0, 0.0]), [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -1.0]);
    let scaled = sh_basis([0.0, 0.0, 3.0]);
    assert_eq!(scaled, sh_basis([0.0, 0.0, 1.0]));
}

proptest! {
    #[test]
    fn sh_basis_matches_monomials(theta in 0.0f64..3.14, phi in -3.14f64..3.14) {
        let n = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
        // Each term as (coefficient, powers of x, y, z) summed.
        let terms: [&[(f64, [i32; 3])]; 9] = [
            &[(1.0, [0, 0, 0])],
            &[(1.0, [1, 0, 0])],
            &[(1.0, [0, 1, 0])],
            &[(1.0, [0, 0, 1])],
            &[(1.0, [1, 1, 0])],
            &[(1.0, [1, 0, 1])],
            &[(1.0, [0, 1, 1])],
            &[(1.0, [2, 0, 0]), (-1.0, [0, 2, 0])],
            &[(3.0, [0, 0, 2]), (-1.0, [0, 0, 0])],
        ];
        let y = sh_basis(n);
        for (k, t) in terms.iter().enumerate() {
            let v: f64 = t.iter().map(|(c, p)| c * n[0].powi(p[0]) * n[1].powi(p[1]) * n[2].powi(p[2])).sum();
            prop_assert!((y[k] - v).abs() < 1e-14);
        }
    }
}

#[test]
fn lighting_is_recovered_from_exact_shading() {
    let (normals, mask) = sphere(32, 16.0, 14.0);
    let l = LightingSH { coeffs: L_TRUE };
    let gray = shade_image(&normals, &l, |_| 0.8);
    let est = estimate_lighting(&gray, &normals, &mask, Some(0.8)).unwrap();
    assert!(!est.rank_deficient);
    assert!(rel_err(&est.lighting.coeffs, &L_TRUE) < 1e-6);
    // With the default albedo the lighting absorbs the mean intensity.
    let est = estimate_lighting(&gray, &normals, &mask, None).unwrap();
    let scaled: Vec<f64> = est.lighting.coeffs.iter().map(|c| c * est.albedo0 / 0.8).collect();
    assert!(rel_err(&scaled, &L_TRUE) < 1e-6);
}

#[test]
fn constant_image_gives_ambient_only_lighting() {
    let (normals, mask) = sphere(32, 16.0, 14.0);
    let gray = vec![0.42; 32 * 32];
    let est = estimate_lighting(&gray, &normals, &mask, None).unwrap();
    assert!((est.lighting.coeffs[0] - 1.0).abs() < 1e-9);
    assert!(est.lighting.coeffs[1..].iter().all(|c| c.abs() < 1e-9));
}

#[test]
fn lighting_needs_nine_pixels() {
    let (normals, _) = sphere(32, 16.0, 14.0);
    let mut mask = FaceMask::empty(32, 32);
    for x in 10..18 {
        mask.set(x, 16, true);
    }
    let err = estimate_lighting(&[0.5; 1024], &normals, &mask, None).unwrap_err();
    assert!(matches!(err, crate::Error::Underdetermined { needed: 9, available: 8 }));
}

#[test]
fn flat_normals_are_flagged() {
    let normals = NormalMap::from_normals(8, 8, vec![[0.0, 0.0, -1.0]; 64]).unwrap();
    let mut mask = FaceMask::empty(8, 8);
    (0..8).for_each(|x| (0..8).for_each(|y| mask.set(x, y, true)));
    let est = estimate_lighting(&[0.3; 64], &normals, &mask, None).unwrap();
    assert!(est.rank_deficient);
    assert!(est.residual_rms < 1e-6);
    assert!(est.lighting.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lighting_residual_beats_zero_lighting(seed in 0u64..1000) {
        let (normals, mask) = sphere(16, 8.0, 7.5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gray: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        let est = estimate_lighting(&gray, &normals, &mask, None).unwrap();
        let idx: Vec<usize> = (0..256).filter(|&i| mask.data()[i] != 0).collect();
        let zero_rms = (idx.iter().map(|&i| gray[i] * gray[i]).sum::<f64>() / idx.len() as f64).sqrt();
        prop_assert!(est.residual_rms <= zero_rms + 1e-12);
    }
}

#[test]
fn constant_albedo_is_recovered() {
    let (normals, mask) = sphere(32, 16.0, 14.0);
    let l = LightingSH { coeffs: L_TRUE };
    let gray = shade_image(&normals, &l, |_| 0.7);
    let est = estimate_albedo(&gray, &normals, &l, &mask, 1.0).unwrap();
    assert_eq!(est.excluded, 0);
    for i in 0..1024 {
        if mask.data()[i] != 0 {
            assert!((est.albedo.values[i] - 0.7).abs() < 1e-3);
        } else {
            assert!(est.albedo.values[i].is_nan());
        }
    }
}

#[test]
fn heavy_smoothing_gives_weighted_mean() {
    let (normals, mask) = sphere(16, 8.0, 7.5);
    let l = LightingSH { coeffs: L_TRUE };
    let gray = shade_image(&normals, &l, |i| 0.4 + 0.3 * ((i % 7) as f64 / 6.0));
    let est = estimate_albedo(&gray, &normals, &l, &mask, 1e5).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..256 {
        if mask.data()[i] != 0 {
            let s = l.shade(normals.normals[i]);
            num += s * gray[i];
            den += s * s;
        }
    }
    let mean = num / den;
    let vals: Vec<f64> = est.albedo.values.iter().copied().filter(|v| v.is_finite()).collect();
    assert!(vals.iter().all(|v| (v - mean).abs() < 1e-3), "mean {mean}");
}

#[test]
fn zero_shading_pixels_are_excluded() {
    // Shading `nx` vanishes on the centre column.
    let (normals, mask) = sphere(33, 16.5, 15.0);
    let mut c = [0.0; 9];
    c[1] = 1.0;
    let l = LightingSH { coeffs: c };
    let gray = shade_image(&normals, &l, |_| 0.7);
    let est = estimate_albedo(&gray, &normals, &l, &mask, 1.0).unwrap();
    assert!(est.excluded > 0);
    assert!(est.albedo.values.iter().all(|v| !v.is_infinite()));
    assert!((est.albedo.get(16, 16) - 0.7).abs() < 1e-3);
}

fn perturbed(normals: &NormalMap, amount: f64, seed: u64) -> NormalMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = normals.clone();
    for i in 0..out.normals.len() {
        if out.is_defined(i) {
            let n = out.normals[i].map(|v| v + rng.random_range(-amount..amount));
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            out.normals[i] = n.map(|v| v / len);
        }
    }
    out
}

#[test]
fn exact_shading_is_a_fixed_point() {
    let (normals, mask) = sphere(24, 12.0, 11.0);
    let l = LightingSH { coeffs: L_TRUE };
    let gray = shade_image(&normals, &l, |_| 0.9);
    let albedo = AlbedoMap::from_values(24, 24, vec![0.9; 576]).unwrap();
    let out = refine_normals(&gray, &albedo, &l, &normals, &mask, 0.1).unwrap();
    assert_eq!(out.non_converged, 0);
    for i in 0..576 {
        if normals.is_defined(i) {
            for k in 0..3 {
                assert!((out.normals.normals[i][k] - normals.normals[i][k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn refinement_reduces_data_residual() {
    let (truth, mask) = sphere(32, 16.0, 14.0);
    let l = LightingSH { coeffs: L_TRUE };
    let gray = shade_image(&truth, &l, |_| 0.8);
    let init = perturbed(&truth, 0.15, 3);
    let albedo = AlbedoMap::from_values(32, 32, vec![0.8; 1024]).unwrap();
    let out = refine_normals(&gray, &albedo, &l, &init, &mask, 0.01).unwrap();
    assert!(out.normals.max_norm_error() < 1e-6);
    let (mut better, mut total) = (0, 0);
    for i in 0..1024 {
        if !init.is_defined(i) {
            continue;
        }
        let before = (gray[i] - 0.8 * l.shade(init.normals[i])).abs();
        let after = (gray[i] - 0.8 * l.shade(out.normals.normals[i])).abs();
        total += 1;
        if after < before || before < 1e-12 {
            better += 1;
        }
    }
    assert!(better as f64 >= 0.99 * total as f64, "{better}/{total}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn refinement_never_increases_objective(seed in 0u64..500, w in 0.0f64..2.0) {
        let (truth, mask) = sphere(12, 6.0, 5.5);
        let l = LightingSH { coeffs: L_TRUE };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gray: Vec<f64> = (0..144).map(|_| rng.random_range(0.0..0.9)).collect();
        let init = perturbed(&truth, 0.3, seed);
        let albedo = AlbedoMap::from_values(12, 12, vec![0.7; 144]).unwrap();
        let out = refine_normals(&gray, &albedo, &l, &init, &mask, w).unwrap();
        for i in 0..144 {
            if !init.is_defined(i) { continue; }
            let obj = |n: [f64; 3]| {
                (gray[i] - 0.7 * l.shade(n)).powi(2)
                    + w * (0..3).map(|k| (n[k] - init.normals[i][k]).powi(2)).sum::<f64>()
            };
            prop_assert!(obj(out.normals.normals[i]) <= obj(init.normals[i]) + 1e-15);
        }
    }
}

fn normals_from_gradients(w: usize, h: usize, grad: impl Fn(usize, usize) -> [f64; 2]) -> NormalMap {
    let mut n = NormalMap::undefined(w, h);
    for y in 0..h {
        for x in 0..w {
            let [p, q] = grad(x, y);
            let len = (p * p + q * q + 1.0).sqrt();
            n.normals[y * w + x] = [p / len, q / len, -1.0 / len];
        }
    }
    n
}

fn full_mask(w: usize, h: usize) -> FaceMask {
    FaceMask::from_raw(w, h, vec![1; w * h]).unwrap()
}

#[test]
fn paraboloid_integrates_accurately() {
    let (w, a) = (40, 0.01);
    let c = 20.0;
    let f = |x: f64, y: f64| a * ((x - c).powi(2) + (y - c).powi(2));
    let normals = normals_from_gradients(w, w, |x, y| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        [2.0 * a * (px - c), 2.0 * a * (py - c)]
    });
    let mask = full_mask(w, w);
    let truth = ScalarMap::from_values(w, w, (0..w * w).map(|i| f((i % w) as f64 + 0.5, (i / w) as f64 + 0.5)).collect()).unwrap();
    let out = integrate_normals(&normals, &mask, &truth, Stencil::Trapezoid, 0.05).unwrap();
    let range = truth.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - truth.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let rmse = out.depth.rmse(&truth, &mask, false).unwrap();
    assert!(rmse < 0.01 * range, "{rmse} vs range {range}");
    assert_eq!(out.components, 1);
}

#[test]
fn flat_normals_give_anchor_constant() {
    let normals = NormalMap::from_normals(10, 8, vec![[0.0, 0.0, -1.0]; 80]).unwrap();
    let anchor = ScalarMap::from_values(10, 8, (0..80).map(|i| i as f64).collect()).unwrap();
    let out = integrate_normals(&normals, &full_mask(10, 8), &anchor, Stencil::Trapezoid, 0.05).unwrap();
    assert!(out.depth.values.iter().all(|v| (v - 39.5).abs() < 1e-10));
}

#[test]
fn forward_differences_round_trip() {
    let (w, h) = (30, 26);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let depth: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            (x * 0.21).sin() * 3.0 + (y * 0.17).cos() * 2.0 + rng.random_range(-0.2..0.2)
        })
        .collect();
    // Irregular mask: a disc minus a notch.
    let mut mask = FaceMask::empty(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f64 - 15.0).powi(2) + (y as f64 - 13.0).powi(2)).sqrt();
            if d < 12.0 && !(x > 15 && (11..14).contains(&y)) {
                mask.set(x, y, true);
            }
        }
    }
    let at = |x: usize, y: usize| depth[y * w + x];
    let normals = normals_from_gradients(w, h, |x, y| {
        let p = if x + 1 < w { at(x + 1, y) - at(x, y) } else { 0.0 };
        let q = if y + 1 < h { at(x, y + 1) - at(x, y) } else { 0.0 };
        [p, q]
    });
    let truth = ScalarMap::from_values(w, h, depth.clone()).unwrap();
    let zero = ScalarMap::from_values(w, h, vec![0.0; w * h]).unwrap();
    let out = integrate_normals(&normals, &mask, &zero, Stencil::Forward, 0.05).unwrap();
    let rmse = out.depth.rmse(&truth, &mask, true).unwrap();
    assert!(rmse < 1e-6, "{rmse}");
    let shifted = ScalarMap::from_values(w, h, vec![7.25; w * h]).unwrap();
    let moved = integrate_normals(&normals, &mask, &shifted, Stencil::Forward, 0.05).unwrap();
    for i in 0..w * h {
        if mask.data()[i] != 0 {
            assert!((moved.depth.values[i] - 7.25 - out.depth.values[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn grazing_normals_are_clamped() {
    let mut normals = NormalMap::from_normals(4, 4, vec![[0.0, 0.0, -1.0]; 16]).unwrap();
    normals.normals[5] = [1.0, 0.0, 0.0];
    let zero = ScalarMap::from_values(4, 4, vec![0.0; 16]).unwrap();
    let out = integrate_normals(&normals, &full_mask(4, 4), &zero, Stencil::Trapezoid, 0.05).unwrap();
    assert_eq!(out.clamped, 1);
    assert!(out.depth.values.iter().all(|v| v.is_finite()));
}

#[test]
fn separate_islands_are_anchored_separately() {
    let normals = NormalMap::from_normals(6, 2, vec![[0.0, 0.0, -1.0]; 12]).unwrap();
    let mut mask = full_mask(6, 2);
    mask.set(3, 0, false);
    mask.set(3, 1, false);
    let anchor = ScalarMap::from_values(6, 2, vec![1.0, 1.0, 1.0, 0.0, 5.0, 5.0, 1.0, 1.0, 1.0, 0.0, 5.0, 5.0]).unwrap();
    let out = integrate_normals(&normals, &mask, &anchor, Stencil::Trapezoid, 0.05).unwrap();
    assert_eq!(out.components, 2);
    assert!((out.depth.get(0, 0) - 1.0).abs() < 1e-12);
    assert!((out.depth.get(5, 1) - 5.0).abs() < 1e-12);
    assert!(out.depth.get(3, 0).is_nan());
}

#[test]
fn maps_round_trip_through_text() {
    let (normals, mask) = sphere(9, 4.5, 4.0);
    assert_eq!(NormalMap::from_text(&normals.to_text()).unwrap().to_text(), normals.to_text());
    let mut depth = ScalarMap::undefined(9, 9);
    for i in 0..81 {
        if mask.data()[i] != 0 {
            depth.values[i] = i as f64 * 0.1 - 3.0;
        }
    }
    let back = ScalarMap::from_text(&depth.to_text()).unwrap();
    assert_eq!(back.to_text(), depth.to_text());
    assert!(ScalarMap::from_text("3 1\n1 2\n").is_err());
    let obj = depth_to_obj(&depth);
    let verts = obj.lines().filter(|l| l.starts_with("v ")).count();
    assert_eq!(verts, mask.count());
    assert!(obj.lines().any(|l| l.starts_with("f ")));
}

fn face_setup() -> (crate::morphable_model::MorphableModel, FitResult, FitResult) {
    let model = generate_synthetic_model(&SyntheticModelSpec::default()).unwrap();
    let mut c = Coefficients::zeros(model.k_id(), model.k_exp());
    for (k, a) in c.alpha.iter_mut().enumerate() {
        *a = model.id_std()[k] * if k % 2 == 0 { 2.0 } else { -1.5 };
    }
    let pose = CameraPose {
        rotation: [0.05, 0.2, 0.0],
        translation: [32.0, 32.0],
        scale: 19.0,
    };
    let truth = FitResult::from_parameters(c, pose.clone());
    let coarse = FitResult::from_parameters(model.zero_coefficients(), pose);
    (model, truth, coarse)
}

fn lambert_render(model: &crate::morphable_model::MorphableModel, fit: &FitResult) -> ImageRGB {
    let shading = ShadingParams {
        albedo: [0.8, 0.8, 0.8],
        light_dir: [0.2, -0.3, -1.0],
        diffuse: 0.7,
        ambient: 0.25,
        background: [0.0; 3],
    };
    render(model, &fit.coefficients, &fit.pose, 64, 64, &shading).unwrap().image
}

#[test]
fn refinement_moves_depth_toward_truth() {
    let (model, truth, coarse) = face_setup();
    let image = lambert_render(&model, &truth);
    let (true_depth, _, true_mask) = coarse_geometry(&truth, &model, 64, 64).unwrap();
    let out = refine(&image, &coarse, &model, &SfsConfig::default()).unwrap();
    let both = FaceMask::from_raw(
        64,
        64,
        (0..4096).map(|i| (true_mask.data()[i] != 0 && out.mask.data()[i] != 0) as u8).collect(),
    )
    .unwrap();
    let before = out.coarse_depth.rmse(&true_depth, &both, true).unwrap();
    let after = out.depth.rmse(&true_depth, &both, true).unwrap();
    assert!(after < before, "refined {after} vs coarse {before}");
    assert!(out.normals.max_norm_error() < 1e-6);
}

#[test]
fn occluder_texture_roughens_normals() {
    let (model, truth, _) = face_setup();
    let clean = lambert_render(&model, &truth);
    let mut occluded = clean.clone();
    let mut region = FaceMask::empty(64, 64);
    for y in 36..50 {
        for x in 18..46 {
            let v = if (x / 2 + y / 3) % 2 == 0 { 0.15 } else { 0.85 };
            occluded.set_pixel(x, y, [v, 0.3, 0.5]);
            region.set(x, y, true);
        }
    }
    let cfg = SfsConfig::default();
    let a = refine(&clean, &truth, &model, &cfg).unwrap();
    let b = refine(&occluded, &truth, &model, &cfg).unwrap();
    let ra = a.normals.roughness(&region).unwrap();
    let rb = b.normals.roughness(&region).unwrap();
    assert!(rb > ra, "occluded {rb} vs clean {ra}");
}

#[test]
fn equal_channels_only_see_intensity() {
    let (model, truth, _) = face_setup();
    let img = lambert_render(&model, &truth);
    let gray: Vec<f64> = img.luma();
    let mut data = Vec::with_capacity(gray.len() * 3);
    for g in &gray {
        data.extend([*g, *g, *g]);
    }
    let equal = ImageRGB::from_raw(64, 64, data).unwrap();
    let mut rotated = equal.clone();
    for y in 0..64 {
        for x in 0..64 {
            let [r, g, b] = equal.pixel(x, y);
            rotated.set_pixel(x, y, [g, b, r]);
        }
    }
    let cfg = SfsConfig::default();
    assert_eq!(
        refine(&equal, &truth, &model, &cfg).unwrap().depth.to_text(),
        refine(&rotated, &truth, &model, &cfg).unwrap().depth.to_text()
    );
}
