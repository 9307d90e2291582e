//! Landmark-driven estimation of morphable-model coefficients and camera pose.
//!
//! The camera is weak-perspective: rotate, drop `z`, scale, translate in the
//! image plane. The cost is
//!
//! ```text
//! Σ_i ‖proj(V_i) − U_i‖² + ρ₁ ‖α / ξ_id‖² + ρ₂ ‖β / ξ_exp‖²
//! ```
//!
//! minimized with Levenberg–Marquardt using an analytic Jacobian. Rotation is
//! an axis-angle vector; scale is optimized in log space so it stays positive.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{ensure_dim, Error, Result};
use crate::morphable_model::{Coefficients, MorphableModel, Shape3D, NUM_LANDMARKS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    /// Axis-angle rotation (radians), angle kept in `[0, π]`.
    pub rotation: [f64; 3],
    /// Image-plane translation (pixels) applied after projection.
    pub translation: [f64; 2],
    /// Pixels per model unit; strictly positive.
    pub scale: f64,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: [0.0; 3],
            translation: [0.0; 2],
            scale: 1.0,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        rotation_matrix(&self.rotation)
    }

    /// Rotates a model-space point into view space (no projection).
    pub fn to_view(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.rotation_matrix() * Vector3::from(p);
        [v.x, v.y, v.z]
    }
}

/// Rodrigues' formula.
pub fn rotation_matrix(omega: &[f64; 3]) -> Matrix3<f64> {
    let w = Vector3::from(*omega);
    let theta = w.norm();
    if theta < 1e-12 {
        return Matrix3::identity() + skew(&w);
    }
    let k = skew(&(w / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Maps an axis-angle vector to the equivalent one with angle in `[0, π]`.
fn canonical_axis_angle(omega: [f64; 3]) -> [f64; 3] {
    use std::f64::consts::PI;
    let w = Vector3::from(omega);
    let theta = w.norm();
    if theta <= PI {
        return omega;
    }
    let wrapped = theta.rem_euclid(2.0 * PI);
    let axis = w / theta;
    let v = if wrapped > PI {
        -axis * (2.0 * PI - wrapped)
    } else {
        axis * wrapped
    };
    [v.x, v.y, v.z]
}

/// `∂(R(ω) v) / ∂ω` for the axis-angle parameterization.
fn rotated_point_jacobian(omega: &[f64; 3], r: &Matrix3<f64>, v: &Vector3<f64>) -> Matrix3<f64> {
    let w = Vector3::from(*omega);
    let theta2 = w.norm_squared();
    if theta2 < 1e-20 {
        return -skew(v);
    }
    let m = w * w.transpose() + (r.transpose() - Matrix3::identity()) * skew(&w);
    -r * skew(v) * m / theta2
}

/// Projects the selected vertices of `shape` to pixel coordinates.
pub fn project_points(shape: &Shape3D, pose: &CameraPose, indices: &[usize]) -> Result<Vec<[f64; 2]>> {
    let r = pose.rotation_matrix();
    indices
        .iter()
        .map(|&i| {
            let p = shape.get(i).ok_or_else(|| {
                Error::InvalidInput(format!("vertex index {i} outside 0..{}", shape.len()))
            })?;
            let v = r * Vector3::from(*p);
            Ok([
                pose.scale * v.x + pose.translation[0],
                pose.scale * v.y + pose.translation[1],
            ])
        })
        .collect()
}

/// 68 image-space landmarks (pixels, origin top-left, `y` down).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet2D {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet2D {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        ensure_dim("landmark count", NUM_LANDMARKS, points.len())?;
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("landmark coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn within_bounds(&self, width: usize, height: usize) -> bool {
        self.points
            .iter()
            .all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= width as f64 && p[1] <= height as f64)
    }

    pub fn translated(&self, d: [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect(),
        }
    }

    /// Parses the landmark file format: 68 lines of `x y`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| Error::parse(i + 1, format!("invalid coordinate `{t}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != 2 {
                return Err(Error::parse(i + 1, format!("expected 2 values, found {}", vals.len())));
            }
            points.push([vals[0], vals[1]]);
        }
        if points.len() != NUM_LANDMARKS {
            return Err(Error::parse(
                text.lines().count(),
                format!("expected {NUM_LANDMARKS} landmarks, found {}", points.len()),
            ));
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            let _ = writeln!(s, "{:?} {:?}", p[0], p[1]);
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub rho1: f64,
    pub rho2: f64,
    pub max_iters: usize,
    pub lm_damping_init: f64,
    pub damping_up: f64,
    pub damping_down: f64,
    pub convergence_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rho1: 1.0,
            rho2: 1.0,
            max_iters: 100,
            lm_damping_init: 1e-3,
            damping_up: 10.0,
            damping_down: 0.3,
            convergence_tol: 1e-9,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho1 >= 0.0
            && self.rho2 >= 0.0
            && self.max_iters > 0
            && self.lm_damping_init > 0.0
            && self.damping_up > 1.0
            && self.damping_down > 0.0
            && self.damping_down < 1.0
            && self.convergence_tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid fit configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: Coefficients,
    pub pose: CameraPose,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost at the initial point followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
}

impl FitResult {
    /// Writes the `key: values…` text format.
    pub fn to_text(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "alpha: {}", join(&self.coefficients.alpha));
        let _ = writeln!(s, "beta: {}", join(&self.coefficients.beta));
        let _ = writeln!(s, "rotation: {}", join(&self.pose.rotation));
        let _ = writeln!(s, "translation: {}", join(&self.pose.translation));
        let _ = writeln!(s, "scale: {:?}", self.pose.scale);
        let _ = writeln!(s, "final_cost: {:?}", self.final_cost);
        let _ = writeln!(s, "iterations: {}", self.iterations);
        let _ = writeln!(s, "converged: {}", self.converged);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut alpha = None;
        let mut beta = None;
        let mut rotation = None;
        let mut translation = None;
        let mut scale = None;
        let mut final_cost = 0.0;
        let mut iterations = 0;
        let mut converged = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::parse(i + 1, "expected `key: value`"))?;
            let floats = || -> Result<Vec<f64>> {
                rest.split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| Error::parse(i + 1, format!("invalid number `{t}`")))
                    })
                    .collect()
            };
            let fixed = |n: usize| -> Result<Vec<f64>> {
                let v = floats()?;
                if v.len() == n {
                    Ok(v)
                } else {
                    Err(Error::parse(i + 1, format!("`{key}` needs {n} values")))
                }
            };
            match key.trim() {
                "alpha" => alpha = Some(floats()?),
                "beta" => beta = Some(floats()?),
                "rotation" => {
                    let v = fixed(3)?;
                    rotation = Some([v[0], v[1], v[2]]);
                }
                "translation" => {
                    let v = fixed(2)?;
                    translation = Some([v[0], v[1]]);
                }
                "scale" => scale = Some(fixed(1)?[0]),
                "final_cost" => final_cost = fixed(1)?[0],
                "iterations" => {
                    iterations = rest
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(i + 1, "invalid iteration count"))?
                }
                "converged" => {
                    converged = rest
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(i + 1, "invalid converged flag"))?
                }
                other => return Err(Error::parse(i + 1, format!("unknown key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::parse(text.lines().count(), format!("missing `{k}`"));
        let scale = scale.ok_or_else(|| missing("scale"))?;
        if !(scale > 0.0) {
            return Err(Error::InvalidInput(format!("scale must be positive, got {scale}")));
        }
        Ok(Self {
            coefficients: Coefficients {
                alpha: alpha.ok_or_else(|| missing("alpha"))?,
                beta: beta.ok_or_else(|| missing("beta"))?,
            },
            pose: CameraPose {
                rotation: rotation.ok_or_else(|| missing("rotation"))?,
                translation: translation.ok_or_else(|| missing("translation"))?,
                scale,
            },
            final_cost,
            iterations,
            converged,
            cost_history: Vec::new(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Wraps known parameters as a (trivially converged) fit.
    pub fn from_parameters(coefficients: Coefficients, pose: CameraPose) -> Self {
        Self {
            coefficients,
            pose,
            final_cost: 0.0,
            iterations: 0,
            converged: true,
            cost_history: Vec::new(),
        }
    }
}

/// Cost value and stacked residual vector (136 landmark residuals followed by
/// the `k_id + k_exp` weighted prior residuals).
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub cost: f64,
    pub residuals: Vec<f64>,
}

pub fn objective(
    model: &MorphableModel,
    c: &Coefficients,
    pose: &CameraPose,
    landmarks: &LandmarkSet2D,
    cfg: &FitConfig,
) -> Result<Objective> {
    model.check_coefficients(c)?;
    ensure_dim("landmark count", NUM_LANDMARKS, landmarks.points.len())?;
    let residuals = residual_vector(model, c, pose, landmarks, cfg);
    let cost = residuals.iter().map(|r| r * r).sum();
    Ok(Objective { cost, residuals })
}

/// Root-mean-square distance between projected model landmarks and `landmarks`.
pub fn reprojection_rmse(
    model: &MorphableModel,
    c: &Coefficients,
    pose: &CameraPose,
    landmarks: &LandmarkSet2D,
) -> Result<f64> {
    let proj = project_landmarks(model, c, pose)?;
    let sum: f64 = proj
        .iter()
        .zip(&landmarks.points)
        .map(|(p, u)| (p[0] - u[0]).powi(2) + (p[1] - u[1]).powi(2))
        .sum();
    Ok((sum / proj.len() as f64).sqrt())
}

/// Projects the model's 68 landmark vertices.
pub fn project_landmarks(
    model: &MorphableModel,
    c: &Coefficients,
    pose: &CameraPose,
) -> Result<Vec<[f64; 2]>> {
    model.check_coefficients(c)?;
    let pts: Shape3D = model
        .landmark_indices()
        .iter()
        .map(|&v| model.vertex(v, c))
        .collect();
    let idx: Vec<usize> = (0..pts.len()).collect();
    project_points(&pts, pose, &idx)
}

fn residual_vector(
    model: &MorphableModel,
    c: &Coefficients,
    pose: &CameraPose,
    landmarks: &LandmarkSet2D,
    cfg: &FitConfig,
) -> Vec<f64> {
    let r = pose.rotation_matrix();
    let mut out = Vec::with_capacity(2 * NUM_LANDMARKS + model.k_id() + model.k_exp());
    for (&v, u) in model.landmark_indices().iter().zip(&landmarks.points) {
        let p = r * Vector3::from(model.vertex(v, c));
        out.push(pose.scale * p.x + pose.translation[0] - u[0]);
        out.push(pose.scale * p.y + pose.translation[1] - u[1]);
    }
    let (w1, w2) = (cfg.rho1.sqrt(), cfg.rho2.sqrt());
    out.extend(c.alpha.iter().zip(model.id_std()).map(|(a, s)| w1 * a / s));
    out.extend(c.beta.iter().zip(model.exp_std()).map(|(b, s)| w2 * b / s));
    out
}

/// Parameter vector layout: `[α, β, ω (3), t (2), ln s]`.
struct Layout {
    k_id: usize,
    k_exp: usize,
}

impl Layout {
    fn len(&self) -> usize {
        self.k_id + self.k_exp + 6
    }

    fn pack(&self, c: &Coefficients, pose: &CameraPose) -> DVector<f64> {
        let mut x = DVector::zeros(self.len());
        for (i, a) in c.alpha.iter().enumerate() {
            x[i] = *a;
        }
        for (i, b) in c.beta.iter().enumerate() {
            x[self.k_id + i] = *b;
        }
        let o = self.k_id + self.k_exp;
        x[o] = pose.rotation[0];
        x[o + 1] = pose.rotation[1];
        x[o + 2] = pose.rotation[2];
        x[o + 3] = pose.translation[0];
        x[o + 4] = pose.translation[1];
        x[o + 5] = pose.scale.ln();
        x
    }

    fn unpack(&self, x: &DVector<f64>) -> (Coefficients, CameraPose) {
        let o = self.k_id + self.k_exp;
        let c = Coefficients {
            alpha: x.rows(0, self.k_id).iter().copied().collect(),
            beta: x.rows(self.k_id, self.k_exp).iter().copied().collect(),
        };
        let pose = CameraPose {
            rotation: canonical_axis_angle([x[o], x[o + 1], x[o + 2]]),
            translation: [x[o + 3], x[o + 4]],
            scale: x[o + 5].exp(),
        };
        (c, pose)
    }
}

/// Analytic Jacobian of [`objective`]'s residual vector with respect to the
/// packed parameters `[α, β, ω, t, ln s]`.
pub fn residual_jacobian(
    model: &MorphableModel,
    c: &Coefficients,
    pose: &CameraPose,
    cfg: &FitConfig,
) -> Result<DMatrix<f64>> {
    model.check_coefficients(c)?;
    let (k_id, k_exp) = (model.k_id(), model.k_exp());
    let layout = Layout { k_id, k_exp };
    let m = 2 * NUM_LANDMARKS + k_id + k_exp;
    let mut jac = DMatrix::zeros(m, layout.len());
    let r = pose.rotation_matrix();
    let s = pose.scale;
    let o = k_id + k_exp;
    for (li, &v) in model.landmark_indices().iter().enumerate() {
        let p = Vector3::from(model.vertex(v, c));
        let rp = r * p;
        let drot = rotated_point_jacobian(&pose.rotation, &r, &p);
        for axis in 0..2 {
            let row = 2 * li + axis;
            let ra = r.row(axis);
            for j in 0..k_id {
                let col = Vector3::new(
                    model.id_row(3 * v)[j],
                    model.id_row(3 * v + 1)[j],
                    model.id_row(3 * v + 2)[j],
                );
                jac[(row, j)] = s * ra.dot(&col.transpose());
            }
            for j in 0..k_exp {
                let col = Vector3::new(
                    model.exp_row(3 * v)[j],
                    model.exp_row(3 * v + 1)[j],
                    model.exp_row(3 * v + 2)[j],
                );
                jac[(row, k_id + j)] = s * ra.dot(&col.transpose());
            }
            for k in 0..3 {
                jac[(row, o + k)] = s * drot[(axis, k)];
            }
            jac[(row, o + 3 + axis)] = 1.0;
            jac[(row, o + 5)] = s * rp[axis];
        }
    }
    let base = 2 * NUM_LANDMARKS;
    let (w1, w2) = (cfg.rho1.sqrt(), cfg.rho2.sqrt());
    for (j, sd) in model.id_std().iter().enumerate() {
        jac[(base + j, j)] = w1 / sd;
    }
    for (j, sd) in model.exp_std().iter().enumerate() {
        jac[(base + k_id + j, k_id + j)] = w2 / sd;
    }
    Ok(jac)
}

/// Residuals as a function of the packed parameter vector (used for
/// finite-difference checks of [`residual_jacobian`]).
pub fn residuals_at(
    model: &MorphableModel,
    params: &[f64],
    landmarks: &LandmarkSet2D,
    cfg: &FitConfig,
) -> Result<Vec<f64>> {
    let layout = Layout {
        k_id: model.k_id(),
        k_exp: model.k_exp(),
    };
    ensure_dim("parameter vector", layout.len(), params.len())?;
    let o = layout.k_id + layout.k_exp;
    // no axis-angle canonicalization here: the Jacobian is taken at the raw vector
    let c = Coefficients {
        alpha: params[..layout.k_id].to_vec(),
        beta: params[layout.k_id..o].to_vec(),
    };
    let pose = CameraPose {
        rotation: [params[o], params[o + 1], params[o + 2]],
        translation: [params[o + 3], params[o + 4]],
        scale: params[o + 5].exp(),
    };
    Ok(residual_vector(model, &c, &pose, landmarks, cfg))
}

/// Packs coefficients and pose into the layout used by [`residual_jacobian`].
pub fn pack_parameters(model: &MorphableModel, c: &Coefficients, pose: &CameraPose) -> Vec<f64> {
    Layout {
        k_id: model.k_id(),
        k_exp: model.k_exp(),
    }
    .pack(c, pose)
    .iter()
    .copied()
    .collect()
}

/// Closed-form 2D similarity (scale, in-plane rotation, translation) aligning
/// the mean-shape landmarks to `landmarks`, with zero coefficients.
pub fn initial_estimate(model: &MorphableModel, landmarks: &LandmarkSet2D) -> CameraPose {
    let src: Vec<[f64; 2]> = model.mean_landmarks().iter().map(|p| [p[0], p[1]]).collect();
    let n = src.len() as f64;
    let centroid = |pts: &[[f64; 2]]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        [sx / n, sy / n]
    };
    let cs = centroid(&src);
    let cu = centroid(&landmarks.points);
    let (mut dot_sum, mut cross_sum, mut norm_sum) = (0.0, 0.0, 0.0);
    for (m, u) in src.iter().zip(&landmarks.points) {
        let (mx, my) = (m[0] - cs[0], m[1] - cs[1]);
        let (ux, uy) = (u[0] - cu[0], u[1] - cu[1]);
        dot_sum += mx * ux + my * uy;
        cross_sum += mx * uy - my * ux;
        norm_sum += mx * mx + my * my;
    }
    let theta = cross_sum.atan2(dot_sum);
    let scale = (dot_sum * theta.cos() + cross_sum * theta.sin()) / norm_sum.max(1e-300);
    let scale = if scale.is_finite() && scale > 1e-9 { scale } else { 1.0 };
    let (st, ct) = theta.sin_cos();
    // t = cu - s R cs
    let translation = [
        cu[0] - scale * (ct * cs[0] - st * cs[1]),
        cu[1] - scale * (st * cs[0] + ct * cs[1]),
    ];
    CameraPose {
        rotation: [0.0, 0.0, theta],
        translation,
        scale,
    }
}

/// True when the landmarks span (numerically) less than two dimensions.
fn is_degenerate(landmarks: &LandmarkSet2D) -> bool {
    let n = landmarks.points.len() as f64;
    let (mx, my) = landmarks
        .points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0] / n, b + p[1] / n));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in &landmarks.points {
        let (dx, dy) = (p[0] - mx, p[1] - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (lmax, lmin) = (tr / 2.0 + disc, tr / 2.0 - disc);
    !(lmax > 1e-12) || lmin < 1e-9 * lmax
}

/// Fits coefficients and pose to 68 landmarks with Levenberg–Marquardt.
///
/// Without `init`, starts from zero coefficients and the similarity
/// alignment of [`initial_estimate`]. Degenerate (collinear) landmark sets
/// return the initial estimate flagged as not converged.
pub fn fit(
    model: &MorphableModel,
    landmarks: &LandmarkSet2D,
    cfg: &FitConfig,
    init: Option<&FitResult>,
) -> Result<FitResult> {
    cfg.validate()?;
    ensure_dim("landmark count", NUM_LANDMARKS, landmarks.points.len())?;
    if landmarks.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("landmark coordinates".into()));
    }
    let layout = Layout {
        k_id: model.k_id(),
        k_exp: model.k_exp(),
    };
    let (c0, pose0) = match init {
        Some(f) => {
            model.check_coefficients(&f.coefficients)?;
            (f.coefficients.clone(), f.pose)
        }
        None => (model.zero_coefficients(), initial_estimate(model, landmarks)),
    };
    let mut x = layout.pack(&c0, &pose0);
    let eval = |x: &DVector<f64>| -> (f64, DVector<f64>) {
        let (c, pose) = layout.unpack(x);
        let r = residual_vector(model, &c, &pose, landmarks, cfg);
        let cost = r.iter().map(|v| v * v).sum();
        (cost, DVector::from_vec(r))
    };
    let (mut cost, mut res) = eval(&x);
    let mut history = vec![cost];

    if is_degenerate(landmarks) || !cost.is_finite() {
        log::warn!("degenerate landmark configuration; returning initial estimate");
        return Ok(FitResult {
            coefficients: c0,
            pose: pose0,
            final_cost: if cost.is_finite() { cost } else { f64::MAX },
            iterations: 0,
            converged: false,
            cost_history: history,
        });
    }

    let mut lambda = cfg.lm_damping_init;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let (c, pose) = layout.unpack(&x);
        // unpack may have re-canonicalized the rotation; keep x consistent with it
        x = layout.pack(&c, &pose);
        let jac = residual_jacobian(model, &c, &pose, cfg)?;
        let jt = jac.transpose();
        let a = &jt * &jac;
        let g = &jt * &res;
        if g.amax() < 1e-14 * (1.0 + cost) {
            converged = true;
            break;
        }
        let mut accepted = None;
        while lambda < 1e16 {
            let mut damped = a.clone();
            for i in 0..damped.nrows() {
                damped[(i, i)] += lambda * a[(i, i)].max(1e-9);
            }
            let step = damped.cholesky().map(|ch| ch.solve(&(-&g)));
            if let Some(step) = step.filter(|s| s.iter().all(|v| v.is_finite())) {
                let x_new = &x + &step;
                let (cost_new, res_new) = eval(&x_new);
                if cost_new.is_finite() && cost_new < cost {
                    lambda = (lambda * cfg.damping_down).max(1e-15);
                    accepted = Some((x_new, cost_new, res_new));
                    break;
                }
            }
            lambda *= cfg.damping_up;
        }
        match accepted {
            Some((x_new, cost_new, res_new)) => {
                let decrease = cost - cost_new;
                x = x_new;
                cost = cost_new;
                res = res_new;
                history.push(cost);
                if decrease < cfg.convergence_tol * (1.0 + cost) {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent step exists even under heavy damping: a numerical minimum
                converged = true;
                break;
            }
        }
    }
    let (coefficients, pose) = layout.unpack(&x);
    Ok(FitResult {
        coefficients,
        pose,
        final_cost: cost,
        iterations,
        converged,
        cost_history: history,
    })
}
