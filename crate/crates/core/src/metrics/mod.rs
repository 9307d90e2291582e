//! Image fidelity metrics and the per-category evaluation report.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::deocc_gan::{deocclude, NetworkParams, TrainingSample};
use crate::error::{ensure_dim, Error, Result};
use crate::imaging::{FaceMask, ImageRGB};
use crate::occlusion_synth::{DatasetManifest, OccluderClass, Split};

/// Value reported for identical images, whose PSNR is unbounded.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    ensure_dim("image width", a.width(), b.width())?;
    ensure_dim("image height", a.height(), b.height())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio in dB over all channels, peak value 1.
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len();
    let sse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(psnr_from_mse(sse / n as f64))
}

/// PSNR restricted to the pixels of `region`; `None` when it is empty.
pub fn psnr_in(a: &ImageRGB, b: &ImageRGB, region: &FaceMask) -> Result<Option<f64>> {
    check_dims(a, b)?;
    ensure_dim("mask width", a.width(), region.width())?;
    ensure_dim("mask height", a.height(), region.height())?;
    let (mut sse, mut n) = (0.0, 0usize);
    for (i, &m) in region.data().iter().enumerate() {
        if m != 0 {
            sse += (0..3).map(|c| (a.data()[3 * i + c] - b.data()[3 * i + c]).powi(2)).sum::<f64>();
            n += 3;
        }
    }
    Ok((n > 0).then(|| psnr_from_mse(sse / n as f64)))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Local SSIM values on luma for every window that fits inside the image,
/// row-major over window positions, together with the map's width.
pub fn ssim_map(a: &ImageRGB, b: &ImageRGB) -> Result<(Vec<f64>, usize)> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )));
    }
    let (la, lb) = (a.luma(), b.luma());
    let planes = [
        la.clone(),
        lb.clone(),
        la.iter().map(|v| v * v).collect(),
        lb.iter().map(|v| v * v).collect(),
        la.iter().zip(&lb).map(|(x, y)| x * y).collect(),
    ];
    let g = gaussian_window();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let filtered: Vec<Vec<f64>> = planes
        .iter()
        .map(|p| {
            let mut rows = vec![0.0; ow * h];
            for y in 0..h {
                for x in 0..ow {
                    rows[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * p[y * w + x + k]).sum();
                }
            }
            let mut out = vec![0.0; ow * oh];
            for y in 0..oh {
                for x in 0..ow {
                    out[y * ow + x] = g.iter().enumerate().map(|(k, gk)| gk * rows[(y + k) * ow + x]).sum();
                }
            }
            out
        })
        .collect();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let map = (0..ow * oh)
        .map(|i| {
            let (ma, mb) = (filtered[0][i], filtered[1][i]);
            let va = filtered[2][i] - ma * ma;
            let vb = filtered[3][i] - mb * mb;
            let cov = filtered[4][i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect();
    Ok((map, ow))
}

/// Mean local SSIM on luma (11×11 Gaussian window, σ 1.5, range 1).
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    let (map, _) = ssim_map(a, b)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean local SSIM over windows centred inside `region`.
pub fn ssim_in(a: &ImageRGB, b: &ImageRGB, region: &FaceMask) -> Result<Option<f64>> {
    let (map, ow) = ssim_map(a, b)?;
    ensure_dim("mask width", a.width(), region.width())?;
    ensure_dim("mask height", a.height(), region.height())?;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, v) in map.iter().enumerate() {
        if region.get(i % ow + r, i / ow + r) {
            sum += v;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// Evaluation categories, grouping occluder classes by the face part they hide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    LowerFace,
    UpperFace,
    Half,
    ThreeQuarters,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::LowerFace, Category::UpperFace, Category::Half, Category::ThreeQuarters];

    pub fn of(class: OccluderClass) -> Self {
        match class {
            OccluderClass::Mask | OccluderClass::Cup | OccluderClass::Scarf | OccluderClass::Hand => Category::LowerFace,
            OccluderClass::Eyeglasses | OccluderClass::Sunglasses => Category::UpperFace,
            OccluderClass::HalfFace => Category::Half,
            OccluderClass::ThreeQuarters => Category::ThreeQuarters,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::LowerFace => "lower_face",
            Category::UpperFace => "upper_face",
            Category::Half => "left_right_half",
            Category::ThreeQuarters => "three_quarters",
        }
    }

    /// Published PSNR / SSIM for the category, kept for context only.
    pub fn reference(self) -> (f64, f64) {
        match self {
            Category::LowerFace => (27.3228, 0.9615),
            Category::UpperFace => (34.0024, 0.9860),
            Category::Half => (28.7785, 0.9659),
            Category::ThreeQuarters => (22.1680, 0.8967),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown category `{s}`")))
    }
}

/// Metrics of one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub occluded_path: PathBuf,
    pub class: OccluderClass,
    pub psnr: f64,
    pub ssim: f64,
    /// Same metrics restricted to the face mask.
    pub psnr_face: Option<f64>,
    pub ssim_face: Option<f64>,
    /// Metrics of the occluded input itself, as a baseline.
    pub input_psnr: f64,
    pub input_ssim: f64,
}

impl SampleMetrics {
    pub fn compute(
        occluded_path: PathBuf,
        class: OccluderClass,
        sample: &TrainingSample,
        output: &ImageRGB,
    ) -> Result<Self> {
        let gt = &sample.ground_truth;
        Ok(Self {
            occluded_path,
            class,
            psnr: psnr(output, gt)?,
            ssim: ssim(output, gt)?,
            psnr_face: psnr_in(output, gt, &sample.mask)?,
            ssim_face: ssim_in(output, gt, &sample.mask)?,
            input_psnr: psnr(&sample.occluded, gt)?,
            input_ssim: ssim(&sample.occluded, gt)?,
        })
    }
}

/// Averages over a group of samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Summary {
    pub count: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub psnr_face_mean: f64,
    pub ssim_face_mean: f64,
    pub input_psnr_mean: f64,
    pub input_ssim_mean: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl Summary {
    pub fn of<'a>(samples: impl Iterator<Item = &'a SampleMetrics> + Clone) -> Self {
        Self {
            count: samples.clone().count(),
            psnr_mean: mean_of(samples.clone().map(|s| s.psnr)),
            ssim_mean: mean_of(samples.clone().map(|s| s.ssim)),
            psnr_face_mean: mean_of(samples.clone().filter_map(|s| s.psnr_face)),
            ssim_face_mean: mean_of(samples.clone().filter_map(|s| s.ssim_face)),
            input_psnr_mean: mean_of(samples.clone().map(|s| s.input_psnr)),
            input_ssim_mean: mean_of(samples.map(|s| s.input_ssim)),
        }
    }
}

/// A test sample that could not be evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Skipped {
    pub occluded_path: PathBuf,
    pub reason: String,
}

/// Per-category and overall results on a test split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub categories: BTreeMap<Category, Summary>,
    pub overall: Summary,
    /// Ground truth scored against itself: the metric ceiling.
    pub control: (f64, f64),
    pub skipped: Vec<Skipped>,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, control: (f64, f64), skipped: Vec<Skipped>) -> Self {
        let categories = Category::ALL
            .into_iter()
            .filter_map(|c| {
                let group = samples.iter().filter(move |s| Category::of(s.class) == c);
                (group.clone().count() > 0).then(|| (c, Summary::of(group)))
            })
            .collect();
        let overall = Summary::of(samples.iter());
        Self {
            samples,
            categories,
            overall,
            control,
            skipped,
        }
    }

    /// Tab-separated table: one row per category present plus `overall`,
    /// followed by `#` footer lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("category\tpsnr\tssim\tcount\tpsnr_face\tssim_face\tinput_psnr\tinput_ssim\n");
        let row = |name: &str, s: &Summary| {
            format!(
                "{name}\t{:.4}\t{:.4}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
                s.psnr_mean, s.ssim_mean, s.count, s.psnr_face_mean, s.ssim_face_mean, s.input_psnr_mean, s.input_ssim_mean
            )
        };
        for (c, s) in &self.categories {
            out += &row(c.name(), s);
        }
        out += &row("overall", &self.overall);
        out += &format!("# control\t{:.4}\t{:.4}\n", self.control.0, self.control.1);
        for c in Category::ALL {
            let (p, s) = c.reference();
            out += &format!("# reference\t{}\t{p:.4}\t{s:.4}\n", c.name());
        }
        for s in &self.skipped {
            out += &format!("# skipped\t{}\t{}\n", s.occluded_path.display(), s.reason);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `run` on every test record under `base`. Records whose files
/// cannot be read are skipped; errors from `run` abort the evaluation.
pub fn evaluate_with(
    manifest: &DatasetManifest,
    base: &Path,
    mut run: impl FnMut(&TrainingSample) -> Result<ImageRGB>,
) -> Result<EvalReport> {
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    let mut control: (f64, f64) = (PSNR_CAP, 1.0);
    for record in manifest.split(Split::Test) {
        let sample = match DatasetManifest::load_sample(base, record) {
            Ok(s) => s,
            Err(e @ (Error::Io { .. } | Error::Image { .. })) => {
                log::warn!("skipping {}: {e}", record.occluded_path.display());
                skipped.push(Skipped {
                    occluded_path: record.occluded_path.clone(),
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let gt = &sample.ground_truth;
        let c = (psnr(gt, gt)?, ssim(gt, gt)?);
        control = (control.0.min(c.0), control.1.min(c.1));
        let output = run(&sample)?;
        samples.push(SampleMetrics::compute(record.occluded_path.clone(), record.occlusion_class, &sample, &output)?);
    }
    Ok(EvalReport::from_samples(samples, control, skipped))
}

/// Evaluates the trained generator on the stored synthesis images.
pub fn evaluate(manifest: &DatasetManifest, base: &Path, params: &NetworkParams) -> Result<EvalReport> {
    evaluate_with(manifest, base, |s| deocclude(params, &s.occluded, &s.synthesis))
}
