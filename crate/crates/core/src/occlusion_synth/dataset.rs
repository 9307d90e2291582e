use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::Rotation3;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{place_occluder, OccluderClass, OccluderSprite};
use crate::deocc_gan::TrainingSample;
use crate::error::{Error, Result};
use crate::fitting::{fit, project_landmarks, CameraPose, FitConfig, FitResult, LandmarkSet2D};
use crate::imaging::{FaceMask, ImageRGB};
use crate::morphable_model::{Coefficients, MorphableModel};
use crate::rasterizer::{render, ShadingParams};

pub const MANIFEST_FILE: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "# ground_truth_path\toccluded_path\tsynthesis_path\tmask_path\tocclusion_class\tsplit";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`"))),
        }
    }
}

/// One dataset sample. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub ground_truth_path: PathBuf,
    pub occluded_path: PathBuf,
    pub synthesis_path: PathBuf,
    pub mask_path: PathBuf,
    pub occlusion_class: OccluderClass,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.ground_truth_path.display(),
                r.occluded_path.display(),
                r.synthesis_path.display(),
                r.mask_path.display(),
                r.occlusion_class,
                r.split
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::parse(i + 1, format!("expected 6 tab-separated fields, got {}", f.len())));
            }
            let err = |e: Error| Error::parse(i + 1, e.to_string());
            records.push(ManifestRecord {
                ground_truth_path: f[0].into(),
                occluded_path: f[1].into(),
                synthesis_path: f[2].into(),
                mask_path: f[3].into(),
                occlusion_class: f[4].parse().map_err(err)?,
                split: f[5].parse().map_err(err)?,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// Loads the four images of a record; `base` is the manifest directory.
    pub fn load_sample(base: &Path, record: &ManifestRecord) -> Result<TrainingSample> {
        Ok(TrainingSample {
            occluded: ImageRGB::load_png(base.join(&record.occluded_path))?,
            synthesis: ImageRGB::load_png(base.join(&record.synthesis_path))?,
            ground_truth: ImageRGB::load_png(base.join(&record.ground_truth_path))?,
            mask: FaceMask::load_png(base.join(&record.mask_path))?,
        })
    }

    /// Loads every sample of `split`.
    pub fn load_split(&self, base: &Path, split: Split) -> Result<Vec<TrainingSample>> {
        self.split(split).map(|r| Self::load_sample(base, r)).collect()
    }
}

/// Where clean faces come from.
#[derive(Debug, Clone, Copy)]
pub enum FaceSource<'a> {
    /// Rendered from random model coefficients, poses and lighting; the
    /// ground-truth parameters double as the fit.
    Synthetic,
    /// `*.png` faces, each with a `<stem>.txt` 68-landmark file; parameters
    /// are fitted from the landmarks.
    Directory(&'a Path),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub resolution: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Classes cycled over the sample index (stratified assignment).
    pub classes: Vec<OccluderClass>,
    /// Also cycle the half-face and three-quarter classes over the test
    /// split.
    pub evaluation_classes_in_test: bool,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
    pub max_roll_deg: f64,
    /// Occluder placements tried before a sample is skipped.
    pub max_attempts: usize,
    pub fit: FitConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            train_count: 200,
            test_count: 50,
            seed: 0,
            classes: OccluderClass::TRAINING.to_vec(),
            evaluation_classes_in_test: false,
            max_yaw_deg: 60.0,
            max_pitch_deg: 15.0,
            max_roll_deg: 10.0,
            max_attempts: 20,
            fit: FitConfig::default(),
        }
    }
}

/// A rendered clean face with its exact parameters.
#[derive(Debug, Clone)]
pub struct SyntheticFace {
    pub image: ImageRGB,
    pub landmarks: LandmarkSet2D,
    pub params: FitResult,
}

fn truncated_normal<R: Rng>(rng: &mut R, limit: f64) -> f64 {
    loop {
        let v: f64 = StandardNormal.sample(rng);
        if v.abs() <= limit {
            return v;
        }
    }
}

/// Random coefficients (prior-distributed, truncated at 2.5σ), head pose
/// (yaw uniform in `±max_yaw_deg`), shading and a gradient background.
pub fn synthesize_face<R: Rng>(
    model: &MorphableModel,
    resolution: usize,
    cfg: &DatasetConfig,
    rng: &mut R,
) -> Result<SyntheticFace> {
    let alpha = model.id_std().iter().map(|s| s * truncated_normal(rng, 2.5)).collect();
    let beta = model.exp_std().iter().map(|s| s * truncated_normal(rng, 2.5)).collect();
    let coefficients = Coefficients { alpha, beta };
    let yaw = rng.random_range(-cfg.max_yaw_deg..=cfg.max_yaw_deg).to_radians();
    let pitch = rng.random_range(-cfg.max_pitch_deg..=cfg.max_pitch_deg).to_radians();
    let roll = rng.random_range(-cfg.max_roll_deg..=cfg.max_roll_deg).to_radians();
    let rot = Rotation3::from_euler_angles(pitch, yaw, roll).scaled_axis();
    let r = resolution as f64;
    let pose = CameraPose {
        rotation: [rot.x, rot.y, rot.z],
        translation: [
            r / 2.0 + rng.random_range(-0.03..=0.03) * r,
            r / 2.0 + rng.random_range(-0.03..=0.03) * r,
        ],
        scale: 0.3 * r * rng.random_range(0.92..=1.05),
    };
    let skin = [[0.88, 0.7, 0.58], [0.75, 0.55, 0.42], [0.55, 0.38, 0.28], [0.95, 0.8, 0.7]];
    let base = skin[rng.random_range(0..skin.len())];
    let albedo = base.map(|c: f64| (c * rng.random_range(0.9..=1.1)).clamp(0.05, 1.0));
    let shading = ShadingParams {
        albedo,
        light_dir: [rng.random_range(-0.6..=0.6), rng.random_range(-0.6..=0.3), -1.0],
        diffuse: rng.random_range(0.6..=0.9),
        ambient: rng.random_range(0.15..=0.35),
        background: [0.0; 3],
    };
    let bg_a: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let bg_b: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let tilt = rng.random_range(0.0..std::f64::consts::TAU);
    let out = render(model, &coefficients, &pose, resolution, resolution, &shading)?;
    let mut image = out.image.clone();
    let (s, c) = tilt.sin_cos();
    for y in 0..resolution {
        for x in 0..resolution {
            if out.mask.get(x, y) {
                continue;
            }
            let u = ((x as f64 / r - 0.5) * c + (y as f64 / r - 0.5) * s + 0.71) / 1.42;
            let col = [0, 1, 2].map(|k| bg_a[k] * (1.0 - u) + bg_b[k] * u);
            image.set_pixel(x, y, col);
        }
    }
    let landmarks = LandmarkSet2D::new(project_landmarks(model, &coefficients, &pose)?)?;
    Ok(SyntheticFace {
        image,
        landmarks,
        params: FitResult::from_parameters(coefficients, pose),
    })
}

struct ExternalFace {
    image: PathBuf,
    landmarks: PathBuf,
}

fn list_external_faces(dir: &Path) -> Result<Vec<ExternalFace>> {
    let mut faces: Vec<ExternalFace> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .map(|p| ExternalFace {
            landmarks: p.with_extension("txt"),
            image: p,
        })
        .collect();
    faces.sort_by(|a, b| a.image.cmp(&b.image));
    if faces.is_empty() {
        return Err(Error::InvalidInput(format!("no face images in {}", dir.display())));
    }
    if let Some(f) = faces.iter().find(|f| !f.landmarks.exists()) {
        return Err(Error::InvalidInput(format!(
            "face {} has no landmark file {}",
            f.image.display(),
            f.landmarks.display()
        )));
    }
    Ok(faces)
}

/// Clean face, its landmarks and parameters for one sample.
fn clean_face<R: Rng>(
    source: &FaceSource<'_>,
    external: &[ExternalFace],
    index: usize,
    model: &MorphableModel,
    cfg: &DatasetConfig,
    rng: &mut R,
) -> Result<(ImageRGB, LandmarkSet2D, FitResult)> {
    match source {
        FaceSource::Synthetic => {
            let f = synthesize_face(model, cfg.resolution, cfg, rng)?;
            Ok((f.image, f.landmarks, f.params))
        }
        FaceSource::Directory(_) => {
            let face = &external[index % external.len()];
            let image = ImageRGB::load_png(&face.image)?;
            if image.width() != cfg.resolution || image.height() != cfg.resolution {
                return Err(Error::InvalidInput(format!(
                    "{} is {}×{}, expected {}×{}",
                    face.image.display(),
                    image.width(),
                    image.height(),
                    cfg.resolution,
                    cfg.resolution
                )));
            }
            let landmarks = LandmarkSet2D::load(&face.landmarks)?;
            let fitted = fit(model, &landmarks, &cfg.fit, None)?;
            if !fitted.converged {
                return Err(Error::Infeasible(format!(
                    "fit for {} did not converge (cost {:.4})",
                    face.image.display(),
                    fitted.final_cost
                )));
            }
            Ok((image, landmarks, fitted))
        }
    }
}

fn class_for(cfg: &DatasetConfig, split: Split, global: usize, local: usize) -> OccluderClass {
    if split == Split::Test && cfg.evaluation_classes_in_test {
        let all: Vec<OccluderClass> = cfg.classes.iter().chain(&OccluderClass::EVALUATION_ONLY).copied().collect();
        all[local % all.len()]
    } else {
        cfg.classes[global % cfg.classes.len()]
    }
}

/// Builds a paired dataset under `out_dir` and writes its manifest.
///
/// Per sample: a clean face `I^g`, an occluded version `I` whose occluder
/// overlaps the face mask, the synthesis `I^s` rendered with canonical
/// shading from the (true or fitted) parameters, and the face mask `M`.
/// Landmarks and parameters are stored next to the images. Samples whose
/// face cannot be obtained or fitted, or whose occluder never overlaps the
/// face, are skipped with a warning.
pub fn build_dataset(
    source: FaceSource<'_>,
    model: &MorphableModel,
    sprites: &[OccluderSprite],
    out_dir: impl AsRef<Path>,
    cfg: &DatasetConfig,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    if cfg.classes.is_empty() {
        return Err(Error::InvalidInput("no occluder classes requested".into()));
    }
    if cfg.resolution < 8 {
        return Err(Error::InvalidInput(format!("resolution {} is too small", cfg.resolution)));
    }
    let mut needed: Vec<OccluderClass> = cfg.classes.clone();
    if cfg.evaluation_classes_in_test && cfg.test_count > 0 {
        needed.extend(OccluderClass::EVALUATION_ONLY);
    }
    for c in &needed {
        if !sprites.iter().any(|s| s.class == *c) {
            return Err(Error::InvalidInput(format!("no sprite of class {c}")));
        }
    }
    let external = match source {
        FaceSource::Directory(dir) => list_external_faces(dir)?,
        FaceSource::Synthetic => Vec::new(),
    };
    for split in [Split::Train, Split::Test] {
        let d = out_dir.join(split.name());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut manifest = DatasetManifest::default();
    let plan = (0..cfg.train_count)
        .map(|i| (Split::Train, i))
        .chain((0..cfg.test_count).map(|i| (Split::Test, i)));
    for (global, (split, local)) in plan.enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(global as u64 + 1);
        let class = class_for(cfg, split, global, local);
        let (gt, landmarks, params) = match clean_face(&source, &external, global, model, cfg, &mut rng) {
            Ok(v) => v,
            Err(e) => {
                warn!("skipping sample {global}: {e}");
                continue;
            }
        };
        let synth = render(
            model,
            &params.coefficients,
            &params.pose,
            cfg.resolution,
            cfg.resolution,
            &ShadingParams::default(),
        )?;
        let mask = synth.mask.clone();
        let candidates: Vec<&OccluderSprite> = sprites.iter().filter(|s| s.class == class).collect();
        let sprite = candidates[rng.random_range(0..candidates.len())];
        let mut occluded = None;
        for _ in 0..cfg.max_attempts {
            match place_occluder(&gt, &landmarks, sprite, rng.next_u64()) {
                Ok((img, region)) if region.overlap(&mask) > 0 => {
                    occluded = Some(img);
                    break;
                }
                Ok(_) | Err(Error::OccluderRejected(_)) => continue,
                Err(e) => {
                    warn!("sample {global}: {e}");
                    break;
                }
            }
        }
        let Some(occluded) = occluded else {
            warn!("skipping sample {global}: no {class} placement overlapped the face");
            continue;
        };
        let stem = format!("{}/{:05}", split.name(), global);
        let rel = |suffix: &str| PathBuf::from(format!("{stem}_{suffix}"));
        let record = ManifestRecord {
            ground_truth_path: rel("gt.png"),
            occluded_path: rel("occluded.png"),
            synthesis_path: rel("synthesis.png"),
            mask_path: rel("mask.png"),
            occlusion_class: class,
            split,
        };
        gt.save_png(out_dir.join(&record.ground_truth_path))?;
        occluded.save_png(out_dir.join(&record.occluded_path))?;
        synth.image.save_png(out_dir.join(&record.synthesis_path))?;
        mask.save_png(out_dir.join(&record.mask_path))?;
        landmarks.save(out_dir.join(rel("landmarks.txt")))?;
        params.save(out_dir.join(rel("fit.txt")))?;
        manifest.records.push(record);
    }
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    info!(
        "dataset: {} train, {} test samples in {}",
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        out_dir.display()
    );
    Ok(manifest)
}
