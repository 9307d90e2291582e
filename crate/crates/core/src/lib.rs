pub mod deocc_gan;
pub mod error;
pub mod fitting;
pub mod imaging;
pub mod metrics;
pub mod morphable_model;
pub mod nn;
pub mod occlusion_synth;
pub mod pipeline;
pub mod rasterizer;
pub mod sfs_refine;

pub use error::{Error, Result};
pub use fitting::{fit, CameraPose, FitConfig, FitResult, LandmarkSet2D};
pub use imaging::{FaceMask, ImageRGB};
pub use morphable_model::{generate_synthetic_model, Coefficients, MorphableModel, Shape3D, SyntheticModelSpec};
