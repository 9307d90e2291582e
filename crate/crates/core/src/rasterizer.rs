//! Z-buffered triangle rasterization of the morphable model.
//!
//! Screen space is pixels with `x` right and `y` down; depth is the
//! view-space `z` after rotation (smaller is nearer). Pixels are sampled at
//! their centers `(x + 0.5, y + 0.5)` and edge ties follow the top-left
//! rule, so every pixel on a shared edge belongs to exactly one triangle.
//! Triangles whose geometric normal points away from the viewer are culled.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fitting::CameraPose;
use crate::imaging::{FaceMask, ImageRGB};
use crate::morphable_model::{Coefficients, MorphableModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingParams {
    pub albedo: [f64; 3],
    /// Direction toward the light, in view space. Normalized on use.
    pub light_dir: [f64; 3],
    pub diffuse: f64,
    pub ambient: f64,
    pub background: [f64; 3],
}

impl Default for ShadingParams {
    /// Canonical appearance of the synthesis image: skin-tone albedo,
    /// frontal-upper light, black background.
    fn default() -> Self {
        Self {
            albedo: [0.88, 0.7, 0.58],
            light_dir: [0.25, -0.35, -1.0],
            diffuse: 0.8,
            ambient: 0.2,
            background: [0.0; 3],
        }
    }
}

/// Per-pixel visibility from the depth test.
#[derive(Debug, Clone, PartialEq)]
pub struct ZBuffer {
    pub width: usize,
    pub height: usize,
    /// `+∞` where nothing was drawn.
    pub depth: Vec<f64>,
    /// Index of the visible triangle, `-1` for background.
    pub triangle_id: Vec<i64>,
    /// Barycentric weights of the visible triangle's vertices (in list order).
    pub barycentric: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: ImageRGB,
    pub mask: FaceMask,
    pub depth: Vec<f64>,
    pub triangle_id: Vec<i64>,
    /// Interpolated unit view-space normals; `NaN` on background pixels.
    pub normals: Vec<[f64; 3]>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

// Inward normal of edge a→b is (-(by-ay), bx-ax); left edges have it pointing
// right, top edges have it pointing straight down.
fn is_top_left(a: [f64; 2], b: [f64; 2]) -> bool {
    let nx = -(b[1] - a[1]);
    let ny = b[0] - a[0];
    nx > 0.0 || (nx == 0.0 && ny > 0.0)
}

/// Signed screen area (doubled). Negative means the triangle faces the viewer.
pub fn screen_area(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    edge([a[0], a[1]], [b[0], b[1]], [c[0], c[1]])
}

/// Rasterizes `triangles` over screen-space vertices `(x_px, y_px, depth)`.
pub fn rasterize(vertices: &[[f64; 3]], triangles: &[[usize; 3]], width: usize, height: usize) -> ZBuffer {
    let n = width * height;
    let mut zb = ZBuffer {
        width,
        height,
        depth: vec![f64::INFINITY; n],
        triangle_id: vec![-1; n],
        barycentric: vec![[0.0; 3]; n],
    };
    for (tid, tri) in triangles.iter().enumerate() {
        let (Some(&va), Some(&vb), Some(&vc)) = (
            vertices.get(tri[0]),
            vertices.get(tri[1]),
            vertices.get(tri[2]),
        ) else {
            continue;
        };
        let area = screen_area(va, vb, vc);
        if !(area < 0.0) || !area.is_finite() {
            // back-facing or degenerate
            continue;
        }
        // Swap to positive orientation; remember where each original vertex went.
        let (p0, p1, p2) = ([va[0], va[1]], [vc[0], vc[1]], [vb[0], vb[1]]);
        let (z0, z1, z2) = (va[2], vc[2], vb[2]);
        let area = -area;
        let tl12 = is_top_left(p1, p2);
        let tl20 = is_top_left(p2, p0);
        let tl01 = is_top_left(p0, p1);

        let min_x = p0[0].min(p1[0]).min(p2[0]);
        let max_x = p0[0].max(p1[0]).max(p2[0]);
        let min_y = p0[1].min(p1[1]).min(p2[1]);
        let max_y = p0[1].max(p1[1]).max(p2[1]);
        if max_x < 0.0 || max_y < 0.0 || min_x > width as f64 || min_y > height as f64 {
            continue;
        }
        let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((max_x - 0.5).floor()).min(width as f64 - 1.0);
        let y1 = ((max_y - 0.5).floor()).min(height as f64 - 1.0);
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let (x1, y1) = (x1 as usize, y1 as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let w0 = edge(p1, p2, p);
                let w1 = edge(p2, p0, p);
                let w2 = edge(p0, p1, p);
                let inside = (w0 > 0.0 || (w0 == 0.0 && tl12))
                    && (w1 > 0.0 || (w1 == 0.0 && tl20))
                    && (w2 > 0.0 || (w2 == 0.0 && tl01));
                if !inside {
                    continue;
                }
                let (b0, b1, b2) = (w0 / area, w1 / area, w2 / area);
                let z = b0 * z0 + b1 * z1 + b2 * z2;
                let i = y * width + x;
                if z < zb.depth[i] {
                    zb.depth[i] = z;
                    zb.triangle_id[i] = tid as i64;
                    // original order is (a, b, c) = (p0, p2, p1)
                    zb.barycentric[i] = [b0, b2, b1];
                }
            }
        }
    }
    zb
}

/// Area-weighted vertex normals; with the model's winding they face `-z`.
pub fn vertex_normals(vertices: &[[f64; 3]], triangles: &[[usize; 3]]) -> Vec<[f64; 3]> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for t in triangles {
        let a = Vector3::from(vertices[t[0]]);
        let b = Vector3::from(vertices[t[1]]);
        let c = Vector3::from(vertices[t[2]]);
        let n = (b - a).cross(&(c - a));
        for &i in t {
            acc[i] += n;
        }
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len > 0.0 {
                [n.x / len, n.y / len, n.z / len]
            } else {
                [0.0, 0.0, -1.0]
            }
        })
        .collect()
}

/// Renders an arbitrary mesh given in model space.
pub fn render_mesh(
    shape: &[[f64; 3]],
    triangles: &[[usize; 3]],
    pose: &CameraPose,
    width: usize,
    height: usize,
    shading: &ShadingParams,
) -> Result<RenderOutput> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(format!("render size must be positive, got {width}x{height}")));
    }
    let r = pose.rotation_matrix();
    let view: Vec<Vector3<f64>> = shape.iter().map(|p| r * Vector3::from(*p)).collect();
    let screen: Vec<[f64; 3]> = view
        .iter()
        .map(|v| {
            [
                pose.scale * v.x + pose.translation[0],
                pose.scale * v.y + pose.translation[1],
                v.z,
            ]
        })
        .collect();
    let view_arr: Vec<[f64; 3]> = view.iter().map(|v| [v.x, v.y, v.z]).collect();
    let normals_v = vertex_normals(&view_arr, triangles);
    let zb = rasterize(&screen, triangles, width, height);

    let light = Vector3::from(shading.light_dir);
    let light = if light.norm() > 0.0 { light.normalize() } else { Vector3::new(0.0, 0.0, -1.0) };
    let mut image = ImageRGB::filled(width, height, shading.background);
    let mut mask = FaceMask::empty(width, height);
    let mut normals = vec![[f64::NAN; 3]; width * height];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let tid = zb.triangle_id[i];
            if tid < 0 {
                continue;
            }
            let t = triangles[tid as usize];
            let b = zb.barycentric[i];
            let mut n = Vector3::zeros();
            for k in 0..3 {
                n += Vector3::from(normals_v[t[k]]) * b[k];
            }
            let n = if n.norm() > 0.0 { n.normalize() } else { Vector3::new(0.0, 0.0, -1.0) };
            normals[i] = [n.x, n.y, n.z];
            let lambert = n.dot(&light).max(0.0);
            let shade = shading.diffuse * lambert + shading.ambient;
            image.set_pixel(
                x,
                y,
                [
                    shading.albedo[0] * shade,
                    shading.albedo[1] * shade,
                    shading.albedo[2] * shade,
                ],
            );
            mask.set(x, y, true);
        }
    }
    if mask.is_empty() {
        log::warn!("render produced no face pixels (model outside the {width}x{height} frame?)");
    }
    Ok(RenderOutput {
        image,
        mask,
        depth: zb.depth,
        triangle_id: zb.triangle_id,
        normals,
    })
}

/// Renders the morphable model for coefficients `c` under `pose`.
pub fn render(
    model: &MorphableModel,
    c: &Coefficients,
    pose: &CameraPose,
    width: usize,
    height: usize,
    shading: &ShadingParams,
) -> Result<RenderOutput> {
    let shape = model.assemble_shape(c)?;
    render_mesh(&shape, model.triangles(), pose, width, height, shading)
}

/// The face-region mask: pixels covered by the projected mesh.
pub fn silhouette_mask(out: &RenderOutput) -> FaceMask {
    out.mask.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphable_model::{generate_synthetic_model, SyntheticModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_scene() {
        let zb = rasterize(&[], &[], 8, 8);
        assert!(zb.triangle_id.iter().all(|&t| t == -1));
        let out = render_mesh(&[], &[], &CameraPose::identity(), 4, 4, &ShadingParams::default()).unwrap();
        assert!(out.mask.is_empty());
        assert_eq!(out.image, ImageRGB::zeros(4, 4));
    }

    #[test]
    fn nearer_triangle_wins() {
        // Two front-facing triangles covering the same square, depths 2 then 1.
        let v = vec![
            [0.0, 0.0, 2.0],
            [0.0, 8.0, 2.0],
            [8.0, 0.0, 2.0],
            [0.0, 0.0, 1.0],
            [0.0, 8.0, 1.0],
            [8.0, 0.0, 1.0],
        ];
        let tris = [[0, 1, 2], [3, 4, 5]];
        assert!(screen_area(v[0], v[1], v[2]) < 0.0);
        let zb = rasterize(&v, &tris, 8, 8);
        let covered: Vec<_> = zb.triangle_id.iter().filter(|&&t| t >= 0).collect();
        assert!(!covered.is_empty());
        assert!(covered.iter().all(|&&t| t == 1));
        // reversed order gives the same answer
        let zb2 = rasterize(&v, &[[3, 4, 5], [0, 1, 2]], 8, 8);
        assert!(zb2.triangle_id.iter().filter(|&&t| t >= 0).all(|&t| t == 0));
    }

    #[test]
    fn backfaces_and_degenerates_are_skipped() {
        let v = vec![[0.0, 0.0, 1.0], [8.0, 0.0, 1.0], [0.0, 8.0, 1.0], [4.0, 4.0, 1.0]];
        let zb = rasterize(&v, &[[0, 1, 2], [0, 3, 3]], 8, 8);
        assert!(zb.triangle_id.iter().all(|&t| t == -1));
    }

    #[test]
    fn shared_edge_pixels_counted_once() {
        // Square split along its diagonal; diagonal passes through pixel centers.
        let v = vec![[0.0, 0.0, 1.0], [0.0, 8.0, 1.0], [8.0, 0.0, 1.0], [8.0, 8.0, 1.0]];
        let zb = rasterize(&v, &[[0, 1, 2], [2, 1, 3]], 8, 8);
        assert!(zb.triangle_id.iter().all(|&t| t >= 0));
    }

    #[test]
    fn model_render_mask_and_determinism() {
        let m = generate_synthetic_model(&SyntheticModelSpec::default()).unwrap();
        let pose = CameraPose {
            rotation: [0.1, 0.4, 0.0],
            translation: [32.0, 32.0],
            scale: 22.0,
        };
        let c = m.zero_coefficients();
        let a = render(&m, &c, &pose, 64, 64, &ShadingParams::default()).unwrap();
        let b = render(&m, &c, &pose, 64, 64, &ShadingParams::default()).unwrap();
        assert!(a.image == b.image && a.mask == b.mask && a.triangle_id == b.triangle_id);
        let bits = |o: &RenderOutput| -> Vec<u64> {
            o.normals.iter().flatten().chain(&o.depth).map(|v| v.to_bits()).collect()
        };
        assert!(bits(&a) == bits(&b));
        let finite = a.depth.iter().filter(|d| d.is_finite()).count();
        assert!(a.mask.count() > 0);
        assert_eq!(a.mask.count(), finite);
        for i in 0..64 * 64 {
            assert_eq!(a.mask.data()[i] == 1, a.triangle_id[i] >= 0);
        }
        assert!(silhouette_mask(&a) == a.mask);
        // mask does not depend on shading
        let other = ShadingParams {
            albedo: [0.2, 0.9, 0.1],
            light_dir: [-1.0, 0.0, -0.2],
            ambient: 0.0,
            ..Default::default()
        };
        let d = render(&m, &c, &pose, 64, 64, &other).unwrap();
        assert!(d.mask == a.mask);
        assert!(d.triangle_id == a.triangle_id);
        // masked image is zero outside the mask
        let masked = a.image.masked(&a.mask).unwrap();
        for (i, &mv) in a.mask.data().iter().enumerate() {
            if mv == 0 {
                assert_eq!(&masked.data()[3 * i..3 * i + 3], &[0.0; 3]);
            }
        }
    }

    #[test]
    fn off_screen_pose_gives_empty_mask() {
        let m = generate_synthetic_model(&SyntheticModelSpec::default()).unwrap();
        let pose = CameraPose {
            rotation: [0.0; 3],
            translation: [500.0, 500.0],
            scale: 10.0,
        };
        let out = render(&m, &m.zero_coefficients(), &pose, 32, 32, &ShadingParams::default()).unwrap();
        assert!(out.mask.is_empty());
    }

    #[test]
    fn random_triangles_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<[f64; 3]> = (0..60)
            .map(|_| [rng.random_range(-4.0..36.0), rng.random_range(-4.0..36.0), rng.random_range(0.0..5.0)])
            .collect();
        let t: Vec<[usize; 3]> = (0..20).map(|i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        assert!(rasterize(&v, &t, 32, 32) == rasterize(&v, &t, 32, 32));
    }
}
