//! Linear morphable face model: `shape = mean + id_basis·α + exp_basis·β`.
//!
//! The bases are stored row-major (`3n × k`), one row per vertex coordinate
//! in the order `x0 y0 z0 x1 y1 z1 …`. Model space uses image orientation:
//! `x` right, `y` down, and `z` pointing away from the viewer, so the face
//! surface bulges toward negative `z`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_dim, Error, Result};

/// Number of facial landmarks carried by every model.
pub const NUM_LANDMARKS: usize = 68;

pub const MODEL_FILE_VERSION: u32 = 1;
const MODEL_MAGIC: &str = "deocc-morphable-model";

/// `n × 3` vertex positions.
pub type Shape3D = Vec<[f64; 3]>;

#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    mean_shape: Vec<f64>,
    id_basis: Vec<f64>,
    exp_basis: Vec<f64>,
    id_std: Vec<f64>,
    exp_std: Vec<f64>,
    triangles: Vec<[usize; 3]>,
    landmark_indices: Vec<usize>,
}

/// Identity (`alpha`) and expression (`beta`) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl Coefficients {
    pub fn zeros(k_id: usize, k_exp: usize) -> Self {
        Self {
            alpha: vec![0.0; k_id],
            beta: vec![0.0; k_exp],
        }
    }

    /// `a·self + b·other`, component-wise.
    pub fn combine(&self, a: f64, other: &Coefficients, b: f64) -> Coefficients {
        Coefficients {
            alpha: self
                .alpha
                .iter()
                .zip(&other.alpha)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            beta: self
                .beta
                .iter()
                .zip(&other.beta)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        }
    }
}

impl MorphableModel {
    /// Assembles a model, checking every structural invariant except basis
    /// orthogonality (which is a property of how the bases were produced).
    pub fn new(
        mean_shape: Vec<f64>,
        id_basis: Vec<f64>,
        exp_basis: Vec<f64>,
        id_std: Vec<f64>,
        exp_std: Vec<f64>,
        triangles: Vec<[usize; 3]>,
        landmark_indices: Vec<usize>,
    ) -> Result<Self> {
        if mean_shape.len() % 3 != 0 || mean_shape.is_empty() {
            return Err(Error::InvalidInput(format!(
                "mean shape length {} is not a positive multiple of 3",
                mean_shape.len()
            )));
        }
        let rows = mean_shape.len();
        let n = rows / 3;
        let (k_id, k_exp) = (id_std.len(), exp_std.len());
        ensure_dim("identity basis", rows * k_id, id_basis.len())?;
        ensure_dim("expression basis", rows * k_exp, exp_basis.len())?;
        ensure_dim("landmark count", NUM_LANDMARKS, landmark_indices.len())?;
        if id_std.iter().chain(&exp_std).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(
                "basis standard deviations must be strictly positive".into(),
            ));
        }
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidInput(format!(
                "triangle {t:?} references a vertex outside 0..{n}"
            )));
        }
        if let Some(&i) = landmark_indices.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidInput(format!(
                "landmark index {i} outside 0..{n}"
            )));
        }
        if mean_shape
            .iter()
            .chain(&id_basis)
            .chain(&exp_basis)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("model data".into()));
        }
        Ok(Self {
            mean_shape,
            id_basis,
            exp_basis,
            id_std,
            exp_std,
            triangles,
            landmark_indices,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn k_id(&self) -> usize {
        self.id_std.len()
    }

    pub fn k_exp(&self) -> usize {
        self.exp_std.len()
    }

    pub fn mean_shape(&self) -> &[f64] {
        &self.mean_shape
    }

    pub fn id_basis(&self) -> &[f64] {
        &self.id_basis
    }

    pub fn exp_basis(&self) -> &[f64] {
        &self.exp_basis
    }

    pub fn id_std(&self) -> &[f64] {
        &self.id_std
    }

    pub fn exp_std(&self) -> &[f64] {
        &self.exp_std
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn zero_coefficients(&self) -> Coefficients {
        Coefficients::zeros(self.k_id(), self.k_exp())
    }

    pub fn check_coefficients(&self, c: &Coefficients) -> Result<()> {
        ensure_dim("identity coefficients", self.k_id(), c.alpha.len())?;
        ensure_dim("expression coefficients", self.k_exp(), c.beta.len())
    }

    /// Row `r` of the identity basis (coordinate `r` of the flattened shape).
    pub fn id_row(&self, r: usize) -> &[f64] {
        let k = self.k_id();
        &self.id_basis[r * k..(r + 1) * k]
    }

    pub fn exp_row(&self, r: usize) -> &[f64] {
        let k = self.k_exp();
        &self.exp_basis[r * k..(r + 1) * k]
    }

    /// Position of vertex `v` for coefficients `c` (no dimension check).
    pub(crate) fn vertex(&self, v: usize, c: &Coefficients) -> [f64; 3] {
        let mut p = [0.0; 3];
        for (axis, out) in p.iter_mut().enumerate() {
            let r = 3 * v + axis;
            *out = self.mean_shape[r] + dot(self.id_row(r), &c.alpha) + dot(self.exp_row(r), &c.beta);
        }
        p
    }

    /// Evaluates the model for the given coefficients.
    pub fn assemble_shape(&self, c: &Coefficients) -> Result<Shape3D> {
        self.check_coefficients(c)?;
        Ok((0..self.num_vertices()).map(|v| self.vertex(v, c)).collect())
    }

    /// Mean-shape positions of the 68 landmark vertices.
    pub fn mean_landmarks(&self) -> Vec<[f64; 3]> {
        let zero = self.zero_coefficients();
        self.landmark_indices
            .iter()
            .map(|&v| self.vertex(v, &zero))
            .collect()
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

    /// Serializes to the versioned text container. Floats use Rust's
    /// shortest round-trip formatting, so a reload is bit-exact.
    pub fn to_text(&self) -> String {
        let n = self.num_vertices();
        let mut s = String::new();
        let _ = writeln!(s, "{MODEL_MAGIC}");
        let _ = writeln!(s, "version {MODEL_FILE_VERSION}");
        let _ = writeln!(s, "n_vertices {n}");
        let _ = writeln!(s, "k_id {}", self.k_id());
        let _ = writeln!(s, "k_exp {}", self.k_exp());
        let _ = writeln!(s, "n_triangles {}", self.triangles.len());
        s.push_str("[mean_shape]\n");
        write_rows(&mut s, &self.mean_shape, 3);
        s.push_str("[id_basis]\n");
        write_rows(&mut s, &self.id_basis, self.k_id());
        s.push_str("[exp_basis]\n");
        write_rows(&mut s, &self.exp_basis, self.k_exp());
        s.push_str("[id_std]\n");
        write_rows(&mut s, &self.id_std, self.k_id());
        s.push_str("[exp_std]\n");
        write_rows(&mut s, &self.exp_std, self.k_exp());
        s.push_str("[triangles]\n");
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        s.push_str("[landmarks]\n");
        let lm: Vec<String> = self.landmark_indices.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "{}", lm.join(" "));
        s.push_str("end\n");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rd = LineReader::new(text);
        let magic = rd.next_line()?;
        if magic != MODEL_MAGIC {
            return Err(Error::parse(rd.line, format!("expected `{MODEL_MAGIC}` header")));
        }
        let version = rd.keyed_usize("version")? as u32;
        if version != MODEL_FILE_VERSION {
            return Err(Error::Version {
                kind: "model file",
                found: version,
                expected: MODEL_FILE_VERSION,
            });
        }
        let n = rd.keyed_usize("n_vertices")?;
        let k_id = rd.keyed_usize("k_id")?;
        let k_exp = rd.keyed_usize("k_exp")?;
        let n_tri = rd.keyed_usize("n_triangles")?;
        rd.expect("[mean_shape]")?;
        let mean_shape = rd.float_rows(n, 3)?;
        rd.expect("[id_basis]")?;
        let id_basis = rd.float_rows(3 * n, k_id)?;
        rd.expect("[exp_basis]")?;
        let exp_basis = rd.float_rows(3 * n, k_exp)?;
        rd.expect("[id_std]")?;
        let id_std = rd.float_rows(1, k_id)?;
        rd.expect("[exp_std]")?;
        let exp_std = rd.float_rows(1, k_exp)?;
        rd.expect("[triangles]")?;
        let mut triangles = Vec::with_capacity(n_tri);
        for _ in 0..n_tri {
            let v = rd.index_row(3)?;
            triangles.push([v[0], v[1], v[2]]);
        }
        rd.expect("[landmarks]")?;
        let landmark_indices = rd.index_row(NUM_LANDMARKS)?;
        rd.expect("end")?;
        Self::new(
            mean_shape,
            id_basis,
            exp_basis,
            id_std,
            exp_std,
            triangles,
            landmark_indices,
        )
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn write_rows(s: &mut String, data: &[f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in data.chunks(cols) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{v:?}");
        }
        s.push('\n');
    }
}

struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    line: usize,
}

impl<'a> LineReader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines(),
            line: 0,
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        self.line += 1;
        self.lines
            .next()
            .map(str::trim)
            .ok_or_else(|| Error::parse(self.line, "unexpected end of file"))
    }

    fn expect(&mut self, tag: &str) -> Result<()> {
        let l = self.next_line()?;
        if l != tag {
            return Err(Error::parse(self.line, format!("expected `{tag}`, found `{l}`")));
        }
        Ok(())
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let l = self.next_line()?;
        let mut it = l.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(k), Some(v), None) if k == key => v
                .parse()
                .map_err(|_| Error::parse(self.line, format!("invalid value for `{key}`: `{v}`"))),
            _ => Err(Error::parse(self.line, format!("expected `{key} <integer>`"))),
        }
    }

    fn float_rows(&mut self, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(rows * cols);
        if cols == 0 {
            return Ok(out);
        }
        for _ in 0..rows {
            let l = self.next_line()?;
            let before = out.len();
            for tok in l.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(self.line, format!("invalid float `{tok}`")))?;
                out.push(v);
            }
            if out.len() - before != cols {
                return Err(Error::parse(
                    self.line,
                    format!("expected {cols} values, found {}", out.len() - before),
                ));
            }
        }
        Ok(out)
    }

    fn index_row(&mut self, cols: usize) -> Result<Vec<usize>> {
        let l = self.next_line()?;
        let v = l
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::parse(self.line, format!("invalid index `{tok}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if v.len() != cols {
            return Err(Error::parse(
                self.line,
                format!("expected {cols} indices, found {}", v.len()),
            ));
        }
        Ok(v)
    }
}

/// Parameters of the procedural model generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticModelSpec {
    pub seed: u64,
    pub n_grid: usize,
    pub k_id: usize,
    pub k_exp: usize,
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_grid: 24,
            k_id: 16,
            k_exp: 8,
        }
    }
}

/// Per-vertex RMS displacement (model units) of the first identity mode at
/// one standard deviation; later modes decay geometrically.
const ID_AMPLITUDE: f64 = 0.05;
const EXP_AMPLITUDE: f64 = 0.04;
const MODE_DECAY: f64 = 0.88;
/// Highest cosine frequency (per axis) among the smooth deformation candidates.
const MAX_FREQ: usize = 3;

/// Facial regions that receive localized deformation bumps: `(u, v, radius)`.
const BUMP_REGIONS: [(f64, f64, f64); 8] = [
    (0.0, -0.1, 0.18),   // nose
    (-0.38, -0.3, 0.14), // left eye
    (0.38, -0.3, 0.14),  // right eye
    (-0.4, -0.48, 0.14), // left brow
    (0.4, -0.48, 0.14),  // right brow
    (0.0, 0.3, 0.2),     // mouth
    (0.0, 0.68, 0.2),    // chin
    (0.0, -0.7, 0.3),    // forehead
];

/// Number of candidate deformation fields available to the generator.
pub fn smooth_mode_candidates() -> usize {
    3 * ((MAX_FREQ + 1) * (MAX_FREQ + 1) + BUMP_REGIONS.len())
}

/// Canonical 68-point layout in normalized face coordinates
/// (`u` right, `v` down, both in `[-1, 1]`), following the usual ordering:
/// jawline 0–16, brows 17–26, nose 27–35, eyes 36–47, mouth 48–67.
pub fn canonical_landmark_layout() -> Vec<[f64; 2]> {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    for i in 0..17 {
        // evenly spaced in x so neighbouring points snap to distinct columns
        let u = -0.86 + 1.72 * i as f64 / 16.0;
        let v = -0.15 + 0.83 * (1.0 - (u / 0.9).powi(2)).max(0.0).sqrt();
        pts.push([u, v]);
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            // left brow runs outer→inner, right brow inner→outer
            let t = if side < 0.0 { i as f64 / 4.0 } else { 1.0 - i as f64 / 4.0 };
            let u = side * (0.68 - 0.5 * t);
            let v = -0.45 - 0.07 * (PI * (0.15 + 0.7 * t)).sin();
            pts.push([u, v]);
        }
    }
    for i in 0..4 {
        pts.push([0.0, -0.34 + 0.11 * i as f64]);
    }
    for (i, u) in [-0.18, -0.09, 0.0, 0.09, 0.18].into_iter().enumerate() {
        let v = if i == 2 { 0.1 } else { 0.08 };
        pts.push([u, v]);
    }
    for cx in [-0.38, 0.38] {
        for a in [180.0f64, 130.0, 50.0, 0.0, -50.0, -130.0] {
            let r = a.to_radians();
            pts.push([cx + 0.15 * r.cos(), -0.3 - 0.07 * r.sin()]);
        }
    }
    for i in 0..12 {
        let a = PI - 2.0 * PI * i as f64 / 12.0;
        pts.push([0.34 * a.cos(), 0.32 - 0.14 * a.sin()]);
    }
    for i in 0..8 {
        let a = PI - 2.0 * PI * i as f64 / 8.0;
        pts.push([0.21 * a.cos(), 0.32 - 0.05 * a.sin()]);
    }
    pts
}

fn base_surface(u: f64, v: f64) -> [f64; 3] {
    let g = |du: f64, dv: f64, s: f64| (-(du * du + dv * dv) / (2.0 * s * s)).exp();
    let dome = -0.8 * (1.0 - 0.5 * (u * u + v * v)).max(0.0).sqrt();
    let nose = -0.28 * (-(u * u) / (2.0 * 0.09 * 0.09)).exp() * (-(v + 0.1).powi(2) / (2.0 * 0.16 * 0.16)).exp();
    let sockets = 0.08 * (g(u + 0.38, v + 0.3, 0.11) + g(u - 0.38, v + 0.3, 0.11));
    let brow = -0.05 * (-(v + 0.47).powi(2) / (2.0 * 0.05 * 0.05)).exp() * (-(u * u) / (2.0 * 0.4 * 0.4)).exp();
    let lips = -0.05 * g(u, v - 0.32, 0.1);
    let chin = -0.05 * g(u, v - 0.68, 0.14);
    [u, 1.2 * v, dome + nose + sockets + brow + lips + chin]
}

/// Candidate displacement fields, each a flat `3n` vector.
fn candidate_fields(uv: &[[f64; 2]]) -> Vec<(Vec<f64>, bool)> {
    use std::f64::consts::PI;
    let n = uv.len();
    let mut out = Vec::new();
    // (field, is_local)
    for a in 0..=MAX_FREQ {
        for b in 0..=MAX_FREQ {
            for axis in 0..3 {
                let mut f = vec![0.0; 3 * n];
                for (i, &[u, v]) in uv.iter().enumerate() {
                    let window = (1.0 - 0.5 * (u * u + v * v)).max(0.0);
                    f[3 * i + axis] = window
                        * (a as f64 * PI * (u + 1.0) / 2.0).cos()
                        * (b as f64 * PI * (v + 1.0) / 2.0).cos();
                }
                out.push((f, false));
            }
        }
    }
    for &(cu, cv, r) in &BUMP_REGIONS {
        for axis in 0..3 {
            let mut f = vec![0.0; 3 * n];
            for (i, &[u, v]) in uv.iter().enumerate() {
                let d2 = (u - cu).powi(2) + (v - cv).powi(2);
                f[3 * i + axis] = (-d2 / (2.0 * r * r)).exp();
            }
            out.push((f, true));
        }
    }
    out
}

/// Orthonormalizes `v` against `basis` (modified Gram–Schmidt, two passes).
/// Returns `None` when the remainder is numerically zero.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    let norm0 = dot(&v, &v).sqrt();
    for _ in 0..2 {
        for b in basis {
            let p = dot(&v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
    }
    let norm = dot(&v, &v).sqrt();
    if !(norm > 1e-8 * norm0.max(1e-300)) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(v)
}

/// Procedurally generates a face-shaped morphable model on an
/// `n_grid × n_grid` height-field mesh.
///
/// Both bases are random smooth combinations of low-frequency cosine fields
/// and localized facial bumps, orthonormalized; the expression basis favors
/// the localized bumps and is also orthogonal to the identity basis. The
/// standard deviations are the generation-time mode amplitudes.
pub fn generate_synthetic_model(spec: &SyntheticModelSpec) -> Result<MorphableModel> {
    let SyntheticModelSpec {
        seed,
        n_grid,
        k_id,
        k_exp,
    } = *spec;
    if n_grid < 8 {
        return Err(Error::InvalidInput(format!("n_grid must be at least 8, got {n_grid}")));
    }
    if k_id == 0 || k_exp == 0 {
        return Err(Error::InvalidInput("k_id and k_exp must be at least 1".into()));
    }
    let available = smooth_mode_candidates();
    if k_id + k_exp > available {
        return Err(Error::Infeasible(format!(
            "k_id + k_exp = {} exceeds the {available} smooth deformation candidates",
            k_id + k_exp
        )));
    }

    let n = n_grid * n_grid;
    let step = 2.0 / (n_grid - 1) as f64;
    let mut uv = Vec::with_capacity(n);
    let mut mean_shape = Vec::with_capacity(3 * n);
    for j in 0..n_grid {
        for i in 0..n_grid {
            let (u, v) = (-1.0 + i as f64 * step, -1.0 + j as f64 * step);
            uv.push([u, v]);
            mean_shape.extend_from_slice(&base_surface(u, v));
        }
    }

    // Winding (a, c, b), (b, c, d) makes the geometric normal face the viewer (-z).
    let mut triangles = Vec::with_capacity(2 * (n_grid - 1) * (n_grid - 1));
    for j in 0..n_grid - 1 {
        for i in 0..n_grid - 1 {
            let a = j * n_grid + i;
            let b = a + 1;
            let c = a + n_grid;
            let d = c + 1;
            triangles.push([a, c, b]);
            triangles.push([b, c, d]);
        }
    }

    let landmark_indices = canonical_landmark_layout()
        .iter()
        .map(|&[lu, lv]| {
            let i = ((lu + 1.0) / step).round().clamp(0.0, (n_grid - 1) as f64) as usize;
            let j = ((lv + 1.0) / step).round().clamp(0.0, (n_grid - 1) as f64) as usize;
            j * n_grid + i
        })
        .collect();

    let candidates = candidate_fields(&uv);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut id_cols: Vec<Vec<f64>> = Vec::with_capacity(k_id);
    let mut exp_cols: Vec<Vec<f64>> = Vec::with_capacity(k_exp);
    let mut attempts = 0;
    while id_cols.len() < k_id || exp_cols.len() < k_exp {
        attempts += 1;
        if attempts > 20 * available {
            return Err(Error::Infeasible("could not orthogonalize the requested bases".into()));
        }
        let for_identity = id_cols.len() < k_id;
        let mut mix = vec![0.0; 3 * n];
        for (f, local) in &candidates {
            let weight = match (for_identity, local) {
                (true, _) => 1.0,
                (false, true) => 1.0,
                (false, false) => 0.3,
            };
            let w: f64 = rng.sample::<f64, _>(StandardNormal) * weight;
            for (m, x) in mix.iter_mut().zip(f) {
                *m += w * x;
            }
        }
        let mut prev: Vec<Vec<f64>> = id_cols.clone();
        prev.extend(exp_cols.iter().cloned());
        if let Some(col) = orthonormalize(mix, &prev) {
            if for_identity {
                id_cols.push(col);
            } else {
                exp_cols.push(col);
            }
        }
    }

    let scale = (n as f64).sqrt();
    let id_std = (0..k_id)
        .map(|j| ID_AMPLITUDE * MODE_DECAY.powi(j as i32) * scale)
        .collect();
    let exp_std = (0..k_exp)
        .map(|j| EXP_AMPLITUDE * MODE_DECAY.powi(j as i32) * scale)
        .collect();

    MorphableModel::new(
        mean_shape,
        to_row_major(&id_cols, 3 * n),
        to_row_major(&exp_cols, 3 * n),
        id_std,
        exp_std,
        triangles,
        landmark_indices,
    )
}

fn to_row_major(cols: &[Vec<f64>], rows: usize) -> Vec<f64> {
    let k = cols.len();
    let mut out = vec![0.0; rows * k];
    for (j, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out[r * k + j] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_model() -> MorphableModel {
        generate_synthetic_model(&SyntheticModelSpec::default()).unwrap()
    }

    #[test]
    fn grid_counts() {
        let m = small_model();
        assert_eq!(m.num_vertices(), 576);
        assert_eq!(m.triangles().len(), 2 * 23 * 23);
        assert_eq!(m.k_id(), 16);
        assert_eq!(m.k_exp(), 8);
        assert_eq!(m.landmark_indices().len(), NUM_LANDMARKS);
    }

    #[test]
    fn deterministic_for_seed() {
        let a = small_model();
        let b = small_model();
        assert_eq!(a, b);
        let c = generate_synthetic_model(&SyntheticModelSpec {
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.id_basis(), c.id_basis());
    }

    #[test]
    fn bases_are_orthonormal() {
        let m = small_model();
        let rows = 3 * m.num_vertices();
        for (basis, k) in [(m.id_basis(), m.k_id()), (m.exp_basis(), m.k_exp())] {
            for a in 0..k {
                for b in 0..k {
                    let g: f64 = (0..rows).map(|r| basis[r * k + a] * basis[r * k + b]).sum();
                    let expect = if a == b { 1.0 } else { 0.0 };
                    assert!((g - expect).abs() < 1e-10, "gram[{a},{b}] = {g}");
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_give_mean() {
        let m = small_model();
        let s = m.assemble_shape(&m.zero_coefficients()).unwrap();
        let flat: Vec<f64> = s.iter().flatten().copied().collect();
        assert_eq!(flat, m.mean_shape());
    }

    #[test]
    fn unit_alpha_adds_first_column() {
        let m = small_model();
        let mut c = m.zero_coefficients();
        c.alpha[0] = 1.0;
        let s = m.assemble_shape(&c).unwrap();
        for (v, p) in s.iter().enumerate() {
            for axis in 0..3 {
                let r = 3 * v + axis;
                let expect = m.mean_shape()[r] + m.id_basis()[r * m.k_id()];
                assert_eq!(p[axis], expect);
            }
        }
    }

    #[test]
    fn assemble_matches_dense_oracle() {
        let m = small_model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = Coefficients {
            alpha: (0..m.k_id()).map(|_| rng.random_range(-3.0..3.0)).collect(),
            beta: (0..m.k_exp()).map(|_| rng.random_range(-3.0..3.0)).collect(),
        };
        let s = m.assemble_shape(&c).unwrap();
        // Brute-force per-vertex accumulation over basis columns.
        let rows = 3 * m.num_vertices();
        let mut oracle = m.mean_shape().to_vec();
        for j in 0..m.k_id() {
            for r in 0..rows {
                oracle[r] += m.id_basis()[r * m.k_id() + j] * c.alpha[j];
            }
        }
        for j in 0..m.k_exp() {
            for r in 0..rows {
                oracle[r] += m.exp_basis()[r * m.k_exp() + j] * c.beta[j];
            }
        }
        for (v, p) in s.iter().enumerate() {
            for axis in 0..3 {
                assert!((p[axis] - oracle[3 * v + axis]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        let m = small_model();
        let c = Coefficients::zeros(3, m.k_exp());
        assert!(matches!(
            m.assemble_shape(&c),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(generate_synthetic_model(&SyntheticModelSpec {
            n_grid: 7,
            ..Default::default()
        })
        .is_err());
        assert!(matches!(
            generate_synthetic_model(&SyntheticModelSpec {
                k_id: smooth_mode_candidates(),
                ..Default::default()
            }),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn jawline_is_monotone_in_x() {
        let m = small_model();
        let lm = m.mean_landmarks();
        for i in 0..16 {
            assert!(lm[i + 1][0] > lm[i][0], "jaw {i}: {} !< {}", lm[i][0], lm[i + 1][0]);
        }
        // chin below the eyes, nose tip in front of the cheeks
        assert!(lm[8][1] > lm[36][1]);
        assert!(lm[30][2] < lm[0][2]);
    }

    #[test]
    fn save_load_round_trip() {
        let m = small_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.txt");
        m.save(&path).unwrap();
        let back = MorphableModel::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let text = small_model().to_text();
        let cut = &text[..text.len() / 2];
        match MorphableModel::from_text(cut) {
            Err(Error::Parse { line, .. }) => assert!(line > 6),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let text = small_model().to_text().replacen("version 1", "version 9", 1);
        assert!(matches!(
            MorphableModel::from_text(&text),
            Err(Error::Version { found: 9, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn assemble_is_affine(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let m = small_model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_c = || Coefficients {
                alpha: (0..m.k_id()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                beta: (0..m.k_exp()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let (c1, c2) = (rand_c(), rand_c());
            let s12 = m.assemble_shape(&c1.combine(a, &c2, b)).unwrap();
            let s1 = m.assemble_shape(&c1).unwrap();
            let s2 = m.assemble_shape(&c2).unwrap();
            let mean = m.mean_shape();
            for v in 0..m.num_vertices() {
                for axis in 0..3 {
                    let mu = mean[3 * v + axis];
                    let lhs = s12[v][axis] - mu;
                    let rhs = a * (s1[v][axis] - mu) + b * (s2[v][axis] - mu);
                    prop_assert!((lhs - rhs).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn three_sigma_stays_bounded(seed in 0u64..1000) {
            let m = small_model();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Coefficients {
                alpha: m.id_std().iter().map(|s| if rng.random::<bool>() { 3.0 * s } else { -3.0 * s }).collect(),
                beta: m.exp_std().iter().map(|s| if rng.random::<bool>() { 3.0 * s } else { -3.0 * s }).collect(),
            };
            let s = m.assemble_shape(&c).unwrap();
            let mean = m.mean_shape();
            for (v, p) in s.iter().enumerate() {
                for axis in 0..3 {
                    prop_assert!(p[axis].is_finite());
                    prop_assert!((p[axis] - mean[3 * v + axis]).abs() < 2.0);
                }
            }
        }
    }
}
