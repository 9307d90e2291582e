use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OccluderClass, OccluderSprite};
use crate::error::{Error, Result};
use crate::fitting::LandmarkSet2D;
use crate::imaging::{FaceMask, ImageRGB};

/// Minimum sprite alpha for a pixel to count as occluded. Pixels below it
/// are left untouched so the occluded image equals the clean one outside
/// the occlusion region.
pub const ALPHA_THRESHOLD: f64 = 0.5;

/// Landmarks a hand may be centered on: lower jaw, lower nose and mouth.
const LOWER_FACE: [usize; 34] = [
    4, 5, 6, 7, 8, 9, 10, 11, 12, 31, 32, 33, 34, 35, 48, 49, 50, 51, 52, 53, 54, 55, 56, 57, 58, 59, 60, 61,
    62, 63, 64, 65, 66, 67,
];

/// Similarity transform from sprite to image coordinates. The sprite
/// anchor lands on `center`; the sprite is mirrored about its anchor by
/// the flips, scaled by `scale` image pixels per sprite pixel and rotated
/// by `angle` (radians, image axes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub center: [f64; 2],
    pub angle: f64,
    pub scale: f64,
    pub flip_x: bool,
    pub flip_y: bool,
}

fn mean_of(points: &[[f64; 2]], idx: impl IntoIterator<Item = usize>) -> [f64; 2] {
    let mut s = [0.0; 2];
    let mut n = 0.0;
    for i in idx {
        s[0] += points[i][0];
        s[1] += points[i][1];
        n += 1.0;
    }
    [s[0] / n, s[1] / n]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Derives a placement from the landmarks and the sprite class, with small
/// seeded jitter of scale and position.
///
/// The reference length is the interocular distance, floored at 0.55 times
/// the nose-bridge-to-chin distance so that strongly turned heads (whose
/// eyes nearly overlap in the image) still get face-sized occluders.
pub fn compute_placement(landmarks: &LandmarkSet2D, sprite: &OccluderSprite, rng_seed: u64) -> Result<Placement> {
    let p = &landmarks.points;
    if p.len() != crate::morphable_model::NUM_LANDMARKS {
        return Err(Error::DimensionMismatch {
            what: "landmark count",
            expected: crate::morphable_model::NUM_LANDMARKS,
            got: p.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let scale_jitter = rng.random_range(0.92..=1.08);
    let off = [rng.random_range(-0.05..=0.05), rng.random_range(-0.05..=0.05)];
    let coin_x = rng.random_bool(0.5);
    let coin_y = rng.random_bool(0.5);
    let hand_idx = LOWER_FACE[rng.random_range(0..LOWER_FACE.len())];

    let left_eye = mean_of(p, 36..42);
    let right_eye = mean_of(p, 42..48);
    let (ex, ey) = (right_eye[0] - left_eye[0], right_eye[1] - left_eye[1]);
    let mut angle = ey.atan2(ex);
    if angle.abs() > std::f64::consts::FRAC_PI_2 {
        angle -= std::f64::consts::PI * angle.signum();
    }
    let d = dist(left_eye, right_eye).max(0.55 * dist(p[27], p[8]));
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::InvalidInput("landmarks give a degenerate face size".into()));
    }
    let mouth = mean_of(p, 48..68);
    let face_center = [mean_of(p, 27..31)[0], mean_of(p, 0..68)[1]];
    let class = sprite.class;
    let base = match class {
        OccluderClass::Eyeglasses | OccluderClass::Sunglasses => {
            [(left_eye[0] + right_eye[0]) / 2.0, (left_eye[1] + right_eye[1]) / 2.0]
        }
        OccluderClass::Mask => [(p[30][0] + mouth[0]) / 2.0, (p[30][1] + mouth[1]) / 2.0],
        OccluderClass::Cup => mouth,
        OccluderClass::Scarf => mean_of(p, 4..13),
        OccluderClass::Hand => p[hand_idx],
        OccluderClass::HalfFace | OccluderClass::ThreeQuarters => face_center,
    };
    let (flip_x, flip_y) = match class {
        OccluderClass::Hand | OccluderClass::HalfFace => (coin_x, false),
        OccluderClass::ThreeQuarters => (coin_x, coin_y),
        _ => (false, false),
    };
    Ok(Placement {
        center: [base[0] + off[0] * d, base[1] + off[1] * d],
        angle,
        scale: d * class.scale_factor() * scale_jitter / sprite.rgba.width as f64,
        flip_x,
        flip_y,
    })
}

/// Alpha-composites the sprite under `placement` with nearest-neighbour
/// sampling. Returns the composite and the occlusion region (pixels whose
/// sampled alpha exceeds [`ALPHA_THRESHOLD`]).
pub fn composite(face: &ImageRGB, sprite: &OccluderSprite, placement: &Placement) -> (ImageRGB, FaceMask) {
    let (out, region, _) = composite_counted(face, sprite, placement);
    (out, region)
}

/// [`composite`] plus the number of image pixels that sample the sprite
/// rectangle at all (regardless of alpha).
fn composite_counted(face: &ImageRGB, sprite: &OccluderSprite, placement: &Placement) -> (ImageRGB, FaceMask, usize) {
    let (w, h) = (face.width(), face.height());
    let mut out = face.clone();
    let mut region = FaceMask::empty(w, h);
    let (s, c) = placement.angle.sin_cos();
    let (sw, sh) = (sprite.rgba.width as f64, sprite.rgba.height as f64);
    let ax = sprite.anchor[0] * sw;
    let ay = sprite.anchor[1] * sh;
    let mut covered = 0;
    for y in 0..h {
        for x in 0..w {
            let rx = x as f64 + 0.5 - placement.center[0];
            let ry = y as f64 + 0.5 - placement.center[1];
            let mut u = (c * rx + s * ry) / placement.scale;
            let mut v = (-s * rx + c * ry) / placement.scale;
            if placement.flip_x {
                u = -u;
            }
            if placement.flip_y {
                v = -v;
            }
            let (qx, qy) = ((u + ax).floor(), (v + ay).floor());
            if qx < 0.0 || qy < 0.0 || qx >= sw || qy >= sh {
                continue;
            }
            covered += 1;
            let [r, g, b, a] = sprite.rgba.pixel(qx as usize, qy as usize);
            if a <= ALPHA_THRESHOLD {
                continue;
            }
            let f = face.pixel(x, y);
            out.set_pixel(x, y, [a * r + (1.0 - a) * f[0], a * g + (1.0 - a) * f[1], a * b + (1.0 - a) * f[2]]);
            region.set(x, y, true);
        }
    }
    (out, region, covered)
}

/// Places `sprite` on `face` at its class-specific landmark location. A
/// sprite that lands fully outside the image is rejected with
/// [`Error::OccluderRejected`] so the caller can retry with another seed.
pub fn place_occluder(
    face: &ImageRGB,
    landmarks: &LandmarkSet2D,
    sprite: &OccluderSprite,
    rng_seed: u64,
) -> Result<(ImageRGB, FaceMask)> {
    if !landmarks.within_bounds(face.width(), face.height()) {
        return Err(Error::InvalidInput("landmarks lie outside the image".into()));
    }
    let placement = compute_placement(landmarks, sprite, rng_seed)?;
    let (out, region, covered) = composite_counted(face, sprite, &placement);
    if covered == 0 {
        return Err(Error::OccluderRejected(format!(
            "{} sprite falls outside the {}×{} image",
            sprite.class,
            face.width(),
            face.height()
        )));
    }
    Ok((out, region))
}
