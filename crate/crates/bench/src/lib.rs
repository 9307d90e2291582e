//! Shared fixtures for the benchmarks.

use deocc_core::deocc_gan::{ArchDescriptor, NetworkParams};
use deocc_core::fitting::project_points;
use deocc_core::rasterizer::ShadingParams;
use deocc_core::{
    generate_synthetic_model, rasterizer, CameraPose, Coefficients, ImageRGB, LandmarkSet2D, MorphableModel,
    SyntheticModelSpec,
};

pub struct Fixture {
    pub model: MorphableModel,
    pub coefficients: Coefficients,
    pub pose: CameraPose,
    pub landmarks: LandmarkSet2D,
    pub image: ImageRGB,
}

/// Default synthetic model posed in a `size`×`size` frame.
pub fn face(size: usize) -> Fixture {
    let model = generate_synthetic_model(&SyntheticModelSpec::default()).expect("default model");
    let mut coefficients = model.zero_coefficients();
    for (i, a) in coefficients.alpha.iter_mut().enumerate() {
        *a = 0.5 * model.id_std()[i] * if i % 2 == 0 { 1.0 } else { -1.0 };
    }
    let s = size as f64;
    let pose = CameraPose {
        rotation: [0.1, 0.3, 0.05],
        translation: [s / 2.0, s / 2.0],
        scale: 0.4 * s,
    };
    let shape = model.assemble_shape(&coefficients).expect("shape");
    let landmarks = LandmarkSet2D::new(project_points(&shape, &pose, model.landmark_indices()).expect("landmarks"))
        .expect("68 points");
    let image = rasterizer::render(&model, &coefficients, &pose, size, size, &ShadingParams::default())
        .expect("render")
        .image;
    Fixture {
        model,
        coefficients,
        pose,
        landmarks,
        image,
    }
}

/// Networks of the default architecture at `resolution`.
pub fn networks(resolution: usize) -> NetworkParams {
    let arch = ArchDescriptor {
        resolution,
        ..ArchDescriptor::default()
    };
    NetworkParams::new(&arch, 0).expect("valid architecture")
}
