//! Paired training data: occluder sprites composited onto clean faces at
//! landmark-defined locations, plus the matching synthesis images and
//! face masks.

mod dataset;
mod place;
mod sprites;

pub use dataset::{
    build_dataset, synthesize_face, DatasetConfig, DatasetManifest, FaceSource, ManifestRecord, Split,
    SyntheticFace, MANIFEST_FILE,
};
pub use place::{composite, compute_placement, place_occluder, Placement};
pub use sprites::{default_sprite_library, load_sprite_library, procedural_sprite, write_sprite_library};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;

use crate::deocc_gan::TrainingSample;
use crate::error::{Error, Result};
use crate::imaging::ImageRGBA;

/// Occluder kinds. The last two exist only to populate evaluation
/// categories covering half or three quarters of the face.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OccluderClass {
    Mask,
    Eyeglasses,
    Sunglasses,
    Cup,
    Scarf,
    Hand,
    HalfFace,
    ThreeQuarters,
}

impl OccluderClass {
    /// Classes used to build training data.
    pub const TRAINING: [OccluderClass; 6] = [
        OccluderClass::Mask,
        OccluderClass::Eyeglasses,
        OccluderClass::Sunglasses,
        OccluderClass::Cup,
        OccluderClass::Scarf,
        OccluderClass::Hand,
    ];

    pub const EVALUATION_ONLY: [OccluderClass; 2] = [OccluderClass::HalfFace, OccluderClass::ThreeQuarters];

    pub fn name(self) -> &'static str {
        match self {
            OccluderClass::Mask => "mask",
            OccluderClass::Eyeglasses => "eyeglasses",
            OccluderClass::Sunglasses => "sunglasses",
            OccluderClass::Cup => "cup",
            OccluderClass::Scarf => "scarf",
            OccluderClass::Hand => "hand",
            OccluderClass::HalfFace => "half_face",
            OccluderClass::ThreeQuarters => "three_quarters",
        }
    }

    /// Sprite width in units of the interocular distance.
    pub fn scale_factor(self) -> f64 {
        match self {
            OccluderClass::Eyeglasses | OccluderClass::Sunglasses => 2.2,
            OccluderClass::Mask => 2.8,
            OccluderClass::Cup => 1.5,
            OccluderClass::Scarf => 3.5,
            OccluderClass::Hand => 2.0,
            OccluderClass::HalfFace => 1.6,
            OccluderClass::ThreeQuarters => 3.2,
        }
    }

    pub fn is_evaluation_only(self) -> bool {
        Self::EVALUATION_ONLY.contains(&self)
    }
}

impl fmt::Display for OccluderClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OccluderClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::TRAINING
            .iter()
            .chain(&Self::EVALUATION_ONLY)
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown occluder class `{s}`")))
    }
}

/// RGBA occluder image with its placement reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct OccluderSprite {
    pub rgba: ImageRGBA,
    pub class: OccluderClass,
    /// Reference point in normalized sprite coordinates (`[0,1]²`, origin
    /// top-left) that is placed on the class anchor landmark.
    pub anchor: [f64; 2],
}

impl OccluderSprite {
    pub fn new(rgba: ImageRGBA, class: OccluderClass, anchor: [f64; 2]) -> Result<Self> {
        if rgba.width == 0 || rgba.height == 0 || rgba.data.len() != rgba.width * rgba.height * 4 {
            return Err(Error::InvalidInput("sprite image is empty or malformed".into()));
        }
        if rgba.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("sprite channels must lie in [0, 1]".into()));
        }
        if anchor.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sprite anchor".into()));
        }
        Ok(Self { rgba, class, anchor })
    }

    fn sidecar(png: &Path) -> PathBuf {
        png.with_extension("txt")
    }

    /// Writes `path` (RGBA PNG) and a sidecar `.txt` with class and anchor.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.rgba.save_png(path)?;
        let side = Self::sidecar(path);
        let text = format!("class {}\nanchor {:?} {:?}\n", self.class, self.anchor[0], self.anchor[1]);
        fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rgba = ImageRGBA::load_png(path)?;
        let side = Self::sidecar(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let mut class = None;
        let mut anchor = None;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("class") => {
                    class = Some(parts.next().ok_or_else(|| Error::parse(i + 1, "missing class"))?.parse()?)
                }
                Some("anchor") => {
                    let mut v = [0.0; 2];
                    for slot in &mut v {
                        *slot = parts
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| Error::parse(i + 1, "anchor needs two numbers"))?;
                    }
                    anchor = Some(v);
                }
                Some(other) if !other.starts_with('#') => {
                    return Err(Error::parse(i + 1, format!("unknown sprite key `{other}`")))
                }
                _ => {}
            }
        }
        Self::new(
            rgba,
            class.ok_or_else(|| Error::parse(0, format!("{}: missing class", side.display())))?,
            anchor.ok_or_else(|| Error::parse(0, format!("{}: missing anchor", side.display())))?,
        )
    }
}

/// Applies the same shift (see [`crate::imaging::ImageRGB::shifted`]) and
/// optional horizontal flip to all four images of a sample.
pub fn augment_with(sample: &TrainingSample, dx: isize, dy: isize, flip: bool) -> TrainingSample {
    let mut out = TrainingSample {
        occluded: sample.occluded.shifted(dx, dy),
        synthesis: sample.synthesis.shifted(dx, dy),
        ground_truth: sample.ground_truth.shifted(dx, dy),
        mask: sample.mask.shifted(dx, dy),
    };
    if flip {
        out = TrainingSample {
            occluded: out.occluded.flip_horizontal(),
            synthesis: out.synthesis.flip_horizontal(),
            ground_truth: out.ground_truth.flip_horizontal(),
            mask: out.mask.flip_horizontal(),
        };
    }
    out
}

/// Random pad-and-crop (offsets uniform in `[-pad, pad]`) and horizontal
/// flip with probability one half.
pub fn augment<R: Rng>(sample: &TrainingSample, pad: usize, rng: &mut R) -> Result<TrainingSample> {
    let dims = (sample.occluded.width(), sample.occluded.height());
    let all_same = [&sample.synthesis, &sample.ground_truth]
        .iter()
        .all(|i| (i.width(), i.height()) == dims)
        && (sample.mask.width(), sample.mask.height()) == dims;
    if !all_same {
        return Err(Error::InvalidInput("sample images differ in size".into()));
    }
    let p = pad as i64;
    let dx = rng.random_range(-p..=p) as isize;
    let dy = rng.random_range(-p..=p) as isize;
    let flip = rng.random_bool(0.5);
    Ok(augment_with(sample, dx, dy, flip))
}
