use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use log::info;

use deocc_core::deocc_gan::{load_checkpoint, NetworkParams, Trainer};
use deocc_core::metrics;
use deocc_core::occlusion_synth::{
    self, default_sprite_library, load_sprite_library, write_sprite_library, DatasetManifest, FaceSource, Split,
    MANIFEST_FILE,
};
use deocc_core::pipeline::{self, FitSource};
use deocc_core::sfs_refine::{self, save_obj};
use deocc_core::{generate_synthetic_model, FitResult, ImageRGB, LandmarkSet2D, MorphableModel};

use crate::config::PipelineConfig;
use crate::FitInput;

fn model(cfg: &PipelineConfig) -> Result<MorphableModel> {
    match &cfg.model_path {
        Some(p) => MorphableModel::load(p).with_context(|| format!("loading model {}", p.display())),
        None => Ok(generate_synthetic_model(&cfg.model_spec)?),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn load_image(path: &Path) -> Result<ImageRGB> {
    ImageRGB::load_png(path).with_context(|| format!("loading image {}", path.display()))
}

fn load_network(path: &Path) -> Result<NetworkParams> {
    Ok(load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?.net)
}

/// Fit result from `--fit`, or from fitting `--landmarks`.
fn resolve_fit(cfg: &PipelineConfig, model: &MorphableModel, input: &FitInput) -> Result<FitResult> {
    match (&input.landmarks, &input.fit) {
        (Some(l), _) => {
            let lm = LandmarkSet2D::load(l).with_context(|| format!("loading landmarks {}", l.display()))?;
            Ok(FitSource::Landmarks(&lm, &cfg.fit).resolve(model)?)
        }
        (None, Some(f)) => {
            let fit = FitResult::load(f).with_context(|| format!("loading fit {}", f.display()))?;
            Ok(FitSource::Fitted(&fit).resolve(model)?)
        }
        (None, None) => bail!("either --landmarks or --fit is required"),
    }
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the procedural occluder sprites to this directory.
    #[arg(long)]
    sprites_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn gen_model(mut cfg: PipelineConfig, a: GenModelArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.model_spec.seed = s;
    }
    let cfg = cfg.finish()?;
    let m = generate_synthetic_model(&cfg.model_spec)?;
    create_parent(&a.out)?;
    m.save(&a.out)?;
    info!("wrote model with {} vertices to {}", m.num_vertices(), a.out.display());
    if let Some(dir) = a.sprites_out {
        write_sprite_library(&dir, &default_sprite_library(cfg.sprite_seed))?;
        info!("wrote sprites to {}", dir.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Image the landmarks belong to; used to check that they lie inside it.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    landmarks: PathBuf,
    /// Output fit file.
    #[arg(long)]
    out: PathBuf,
}

pub fn fit(cfg: PipelineConfig, a: FitArgs) -> Result<()> {
    let cfg = cfg.finish()?;
    let model = model(&cfg)?;
    let lm = LandmarkSet2D::load(&a.landmarks).with_context(|| format!("loading landmarks {}", a.landmarks.display()))?;
    if let Some(p) = &a.image {
        let img = load_image(p)?;
        if !lm.within_bounds(img.width(), img.height()) {
            log::warn!("some landmarks lie outside the {}x{} image", img.width(), img.height());
        }
    }
    let result = deocc_core::fit(&model, &lm, &cfg.fit, None)?;
    info!(
        "fit: cost {:.6e} after {} iterations (converged: {})",
        result.final_cost, result.iterations, result.converged
    );
    create_parent(&a.out)?;
    result.save(&a.out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Output image.
    #[arg(long)]
    out: PathBuf,
    /// Also write the face mask.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Image width and height (defaults to the configured resolution).
    #[arg(long)]
    size: Option<usize>,
}

pub fn render(cfg: PipelineConfig, a: RenderArgs) -> Result<()> {
    let cfg = cfg.finish()?;
    let model = model(&cfg)?;
    let fit = FitResult::load(&a.fit).with_context(|| format!("loading fit {}", a.fit.display()))?;
    let size = a.size.unwrap_or(cfg.resolution);
    let out = pipeline::synthesis(&model, &fit.coefficients, &fit, size, size)?;
    create_parent(&a.out)?;
    out.image.save_png(&a.out)?;
    if let Some(m) = a.mask_out {
        create_parent(&m)?;
        out.mask.save_png(&m)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add the half-face and three-quarter occluders to the test split.
    #[arg(long)]
    eval_classes: bool,
}

pub fn build_dataset(mut cfg: PipelineConfig, a: BuildDatasetArgs) -> Result<()> {
    if let Some(n) = a.train_count {
        cfg.dataset.train_count = n;
    }
    if let Some(n) = a.test_count {
        cfg.dataset.test_count = n;
    }
    if let Some(s) = a.seed {
        cfg.dataset.seed = s;
    }
    if a.eval_classes {
        cfg.dataset.evaluation_classes_in_test = true;
    }
    let cfg = cfg.finish()?;
    let model = model(&cfg)?;
    let sprites = match &cfg.sprites_dir {
        Some(d) => load_sprite_library(d)?,
        None => default_sprite_library(cfg.sprite_seed),
    };
    let man = occlusion_synth::build_dataset(FaceSource::Synthetic, &model, &sprites, &a.out, &cfg.dataset)?;
    info!(
        "dataset: {} train / {} test samples in {}",
        man.count(Split::Train),
        man.count(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let p = dir.join(MANIFEST_FILE);
    DatasetManifest::load(&p).with_context(|| format!("loading manifest {}", p.display()))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory for the log and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

pub fn train(mut cfg: PipelineConfig, a: TrainArgs) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.train.rng_seed = s;
    }
    let cfg = cfg.finish()?;
    let tc = cfg.validated_train()?.clone();
    let man = load_manifest(&a.dataset)?;
    let samples = man.load_split(&a.dataset, Split::Train)?;
    if samples.is_empty() {
        bail!("dataset {} has no training samples", a.dataset.display());
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            info!("resuming after epoch {}", ck.epochs_done);
            Trainer::from_checkpoint(ck, tc, cfg.weights)?
        }
        None => Trainer::new(NetworkParams::new(&cfg.arch, cfg.arch_seed)?, tc, cfg.weights)?,
    };
    trainer.run(&samples, Some(&a.out))?;
    for e in &trainer.log {
        info!("{}", e.to_line());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct DeoccludeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    input: FitInput,
    /// Output image.
    #[arg(long)]
    out: PathBuf,
    /// Also write the synthesis image fed to the generator.
    #[arg(long)]
    synthesis_out: Option<PathBuf>,
    /// Also write the fit result.
    #[arg(long)]
    fit_out: Option<PathBuf>,
}

fn write_deoccluded(r: &pipeline::Deoccluded, out: &Path, synthesis: Option<&Path>, fit: Option<&Path>) -> Result<()> {
    create_parent(out)?;
    r.output.save_png(out)?;
    if let Some(p) = synthesis {
        create_parent(p)?;
        r.synthesis.save_png(p)?;
    }
    if let Some(p) = fit {
        create_parent(p)?;
        r.fit.save(p)?;
    }
    Ok(())
}

pub fn deocclude(cfg: PipelineConfig, a: DeoccludeArgs) -> Result<()> {
    let cfg = cfg.finish()?;
    let model = model(&cfg)?;
    let net = load_network(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let fit = resolve_fit(&cfg, &model, &a.input)?;
    let r = pipeline::deocclude_photo(&model, &net, &image, FitSource::Fitted(&fit))?;
    write_deoccluded(&r, &a.out, a.synthesis_out.as_deref(), a.fit_out.as_deref())
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// De-occluded (or clean) face image.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    input: FitInput,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

pub fn refine(cfg: PipelineConfig, a: RefineArgs) -> Result<()> {
    let cfg = cfg.finish()?;
    let model = model(&cfg)?;
    let image = load_image(&a.image)?;
    let fit = resolve_fit(&cfg, &model, &a.input)?;
    let r = sfs_refine::refine(&image, &fit, &model, &cfg.sfs)?;
    let dir = &a.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    r.depth.save(dir.join("depth.txt"))?;
    r.depth.save_preview(dir.join("depth.png"))?;
    r.coarse_depth.save(dir.join("coarse_depth.txt"))?;
    r.normals.save(dir.join("normals.txt"))?;
    r.normals.save_preview(dir.join("normals.png"))?;
    r.albedo.save(dir.join("albedo.txt"))?;
    r.albedo.save_preview(dir.join("albedo.png"))?;
    save_obj(dir.join("face.obj"), &r.depth)?;
    let light = dir.join("lighting.txt");
    fs::write(&light, r.lighting.lighting.to_text() + "\n").with_context(|| format!("writing {}", light.display()))?;
    if r.lighting.rank_deficient {
        log::warn!("lighting system was rank deficient; a ridge term was used");
    }
    info!(
        "refined {} pixels: lighting residual {:.4e}, {} albedo pixels excluded, {} normals unconverged, {} gradients clamped",
        r.mask.count(),
        r.lighting.residual_rms,
        r.albedo_excluded,
        r.normals_non_converged,
        r.gradients_clamped
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output report (tab-separated).
    #[arg(long)]
    out: PathBuf,
}

pub fn evaluate(cfg: PipelineConfig, a: EvaluateArgs) -> Result<()> {
    cfg.finish()?;
    let man = load_manifest(&a.dataset)?;
    let net = load_network(&a.checkpoint)?;
    let report = metrics::evaluate(&man, &a.dataset, &net)?;
    create_parent(&a.out)?;
    report.save(&a.out)?;
    print!("{}", report.to_tsv());
    Ok(())
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    input: FitInput,
    /// New expression coefficients, comma separated (`--beta=-0.1,0.2,...`).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
    beta: Vec<f64>,
    /// Output image.
    #[arg(long)]
    out: PathBuf,
    /// Also write the edited synthesis image.
    #[arg(long)]
    synthesis_out: Option<PathBuf>,
}

pub fn edit(cfg: PipelineConfig, a: EditArgs) -> Result<()> {
    let cfg = cfg.finish()?;
    let model = model(&cfg)?;
    let net = load_network(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let fit = resolve_fit(&cfg, &model, &a.input)?;
    let r = pipeline::edit_expression(&model, &net, &image, FitSource::Fitted(&fit), &a.beta)?;
    write_deoccluded(&r, &a.out, a.synthesis_out.as_deref(), None)
}
