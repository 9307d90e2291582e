use deocc_bench::{face, networks};

#[test]
fn fixture_face_is_inside_the_frame() {
    let f = face(64);
    assert!(f.landmarks.within_bounds(64, 64));
    assert_eq!(f.image.width(), 64);
    assert!(f.image.data().iter().any(|&v| v > 0.0));
}

#[test]
fn fixture_networks_match_resolution() {
    assert_eq!(networks(32).arch().resolution, 32);
}
