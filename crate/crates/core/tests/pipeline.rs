use deocc_core::deocc_gan::{ArchDescriptor, NetworkParams};
use deocc_core::fitting::project_landmarks;
use deocc_core::pipeline::{deocclude_photo, edit_expression, synthesis, FitSource};
use deocc_core::sfs_refine::{refine, SfsConfig};
use deocc_core::{generate_synthetic_model, CameraPose, FitConfig, FitResult, LandmarkSet2D, SyntheticModelSpec};

fn face_pose() -> CameraPose {
    CameraPose {
        rotation: [0.05, 0.3, -0.02],
        translation: [16.0, 16.5],
        scale: 9.5,
    }
}

#[test]
fn photo_to_refined_shape() {
    let model = generate_synthetic_model(&SyntheticModelSpec::default()).unwrap();
    let mut c = model.zero_coefficients();
    c.alpha[0] = model.id_std()[0];
    let truth = FitResult::from_parameters(c.clone(), face_pose());
    let photo = synthesis(&model, &c, &truth, 32, 32).unwrap().image;
    let lm = LandmarkSet2D::new(project_landmarks(&model, &c, &truth.pose).unwrap()).unwrap();

    let arch = ArchDescriptor {
        resolution: 32,
        gen_channels: vec![4, 8],
        disc_channels: vec![4, 4],
    };
    let net = NetworkParams::new(&arch, 1).unwrap();
    let cfg = FitConfig::default();
    let out = deocclude_photo(&model, &net, &photo, FitSource::Landmarks(&lm, &cfg)).unwrap();
    assert_eq!((out.output.width(), out.output.height()), (32, 32));
    assert!(out.output.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // Re-running from the stored fit and a no-op edit give the same output.
    let again = deocclude_photo(&model, &net, &photo, FitSource::Fitted(&out.fit)).unwrap();
    assert_eq!(again.output, out.output);
    let beta = out.fit.coefficients.beta.clone();
    let edited = edit_expression(&model, &net, &photo, FitSource::Fitted(&out.fit), &beta).unwrap();
    assert_eq!(edited.output, out.output);
    assert!(edit_expression(&model, &net, &photo, FitSource::Fitted(&out.fit), &beta[1..]).is_err());

    let sfs = refine(&photo, &out.fit, &model, &SfsConfig::default()).unwrap();
    let face = sfs.mask.data().iter().filter(|&&m| m != 0).count();
    assert!(face > 50);
    for (i, &m) in sfs.mask.data().iter().enumerate() {
        assert_eq!(m != 0, sfs.depth.values[i].is_finite(), "pixel {i}");
    }
}
