use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{OccluderClass, OccluderSprite};
use crate::error::{Error, Result};
use crate::imaging::ImageRGBA;

struct Canvas(ImageRGBA);

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self(ImageRGBA::transparent(w, h))
    }

    /// Overwrites every pixel whose center satisfies `inside`.
    fn paint(&mut self, rgba: [f64; 4], inside: impl Fn(f64, f64) -> bool) {
        for y in 0..self.0.height {
            for x in 0..self.0.width {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    self.0.set_pixel(x, y, rgba);
                }
            }
        }
    }
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> impl Fn(f64, f64) -> bool {
    move |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
}

fn rotated_ellipse(cx: f64, cy: f64, rx: f64, ry: f64, angle: f64) -> impl Fn(f64, f64) -> bool {
    let (s, c) = angle.sin_cos();
    move |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
    }
}

fn ring(cx: f64, cy: f64, rx: f64, ry: f64, thickness: f64) -> impl Fn(f64, f64) -> bool {
    let outer = ellipse(cx, cy, rx, ry);
    let inner = ellipse(cx, cy, rx - thickness, ry - thickness);
    move |x, y| outer(x, y) && !inner(x, y)
}

fn rounded_rect(x0: f64, y0: f64, x1: f64, y1: f64, r: f64) -> impl Fn(f64, f64) -> bool {
    move |x, y| {
        if x < x0 || x > x1 || y < y0 || y > y1 {
            return false;
        }
        let cx = x.clamp(x0 + r, x1 - r);
        let cy = y.clamp(y0 + r, y1 - r);
        (x - cx).powi(2) + (y - cy).powi(2) <= r * r
    }
}

fn jitter<R: Rng>(rng: &mut R, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn rgba(c: [f64; 3], a: f64) -> [f64; 4] {
    [c[0], c[1], c[2], a]
}

fn eyewear<R: Rng>(rng: &mut R, dark_lenses: bool) -> Canvas {
    let mut cv = Canvas::new(96, 36);
    let frame = jitter(rng, [0.12, 0.1, 0.1], 0.1);
    if dark_lenses {
        let lens = jitter(rng, [0.08, 0.08, 0.1], 0.06);
        cv.paint(rgba(lens, 0.97), ellipse(26.0, 18.0, 20.0, 14.0));
        cv.paint(rgba(lens, 0.97), ellipse(70.0, 18.0, 20.0, 14.0));
    } else {
        let tint = jitter(rng, [0.8, 0.85, 0.9], 0.05);
        cv.paint(rgba(tint, 0.2), ellipse(26.0, 18.0, 20.0, 14.0));
        cv.paint(rgba(tint, 0.2), ellipse(70.0, 18.0, 20.0, 14.0));
    }
    let f = rgba(frame, 1.0);
    cv.paint(f, ring(26.0, 18.0, 20.0, 14.0, 3.0));
    cv.paint(f, ring(70.0, 18.0, 20.0, 14.0, 3.0));
    cv.paint(f, |x, y| (44.0..52.0).contains(&x) && (12.0..16.0).contains(&y));
    cv.paint(f, |x, y| (x < 7.0 || x > 89.0) && (13.0..18.0).contains(&y));
    cv
}

fn face_mask<R: Rng>(rng: &mut R) -> Canvas {
    let mut cv = Canvas::new(100, 70);
    let base = if rng.random_bool(0.5) {
        jitter(rng, [0.55, 0.75, 0.9], 0.08)
    } else {
        jitter(rng, [0.92, 0.92, 0.9], 0.05)
    };
    let shade = base.map(|c| c * 0.8);
    cv.paint(rgba(shade, 1.0), ring(7.0, 30.0, 8.0, 16.0, 2.0));
    cv.paint(rgba(shade, 1.0), ring(93.0, 30.0, 8.0, 16.0, 2.0));
    let body = rounded_rect(9.0, 6.0, 91.0, 62.0, 16.0);
    cv.paint(rgba(base, 1.0), body);
    for py in [24.0, 34.0, 44.0] {
        cv.paint(rgba(shade, 1.0), move |x, y| (14.0..86.0).contains(&x) && (y - py).abs() < 1.0);
    }
    cv
}

fn cup<R: Rng>(rng: &mut R) -> Canvas {
    let mut cv = Canvas::new(52, 70);
    let body: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let body = body.map(|c| 0.2 + 0.7 * c);
    let rim = body.map(|c| c * 0.6);
    cv.paint(rgba(body, 1.0), ring(40.0, 30.0, 11.0, 12.0, 4.0));
    cv.paint(rgba(body, 1.0), rounded_rect(3.0, 3.0, 39.0, 69.0, 6.0));
    cv.paint(rgba(rim, 1.0), |x, y| (3.0..39.0).contains(&x) && (3.0..9.0).contains(&y));
    cv
}

fn scarf<R: Rng>(rng: &mut R) -> Canvas {
    let mut cv = Canvas::new(120, 70);
    let a = jitter(rng, [0.7, 0.15, 0.2], 0.2);
    let b = jitter(rng, [0.9, 0.8, 0.4], 0.2);
    let shape = |x: f64, y: f64| {
        let top = 6.0 + 3.0 * (x / 9.0).sin();
        y >= top && rounded_rect(0.0, 0.0, 120.0, 70.0, 10.0)(x, y)
    };
    cv.paint(rgba(a, 1.0), shape);
    cv.paint(rgba(b, 1.0), move |x, y| shape(x, y) && (((x + y) / 10.0).floor() as i64) % 3 == 0);
    cv
}

fn hand<R: Rng>(rng: &mut R) -> Canvas {
    let mut cv = Canvas::new(70, 90);
    let skin = jitter(rng, [0.85, 0.64, 0.52], 0.12);
    let fold = skin.map(|c| c * 0.82);
    let s = rgba(skin, 1.0);
    for (i, len) in [40.0, 46.0, 44.0, 36.0].into_iter().enumerate() {
        let x0 = 14.0 + 12.0 * i as f64;
        cv.paint(s, rounded_rect(x0, 52.0 - len, x0 + 10.0, 60.0, 5.0));
        cv.paint(rgba(fold, 1.0), move |x, y| (x0..x0 + 10.0).contains(&x) && (y - (52.0 - len * 0.45)).abs() < 0.8);
    }
    cv.paint(s, rotated_ellipse(11.0, 62.0, 7.0, 17.0, 0.6));
    cv.paint(s, ellipse(36.0, 64.0, 24.0, 24.0));
    cv
}

fn solid_block<R: Rng>(rng: &mut R, w: usize, h: usize, hole_quadrant: bool) -> Canvas {
    let mut cv = Canvas::new(w, h);
    let a = jitter(rng, [0.4, 0.42, 0.45], 0.25);
    let b = a.map(|c| c * 0.75);
    let (wf, hf) = (w as f64, h as f64);
    let keep = move |x: f64, y: f64| !(hole_quadrant && x >= wf / 2.0 && y >= hf / 2.0);
    cv.paint(rgba(a, 1.0), keep);
    cv.paint(rgba(b, 1.0), move |x, y| keep(x, y) && ((y / 8.0).floor() as i64) % 2 == 0);
    cv
}

/// Draws one sprite of `class`; `seed` varies colors.
pub fn procedural_sprite(class: OccluderClass, seed: u64) -> OccluderSprite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (canvas, anchor) = match class {
        OccluderClass::Eyeglasses => (eyewear(&mut rng, false), [0.5, 0.5]),
        OccluderClass::Sunglasses => (eyewear(&mut rng, true), [0.5, 0.5]),
        OccluderClass::Mask => (face_mask(&mut rng), [0.5, 0.3]),
        OccluderClass::Cup => (cup(&mut rng), [0.4, 0.08]),
        OccluderClass::Scarf => (scarf(&mut rng), [0.5, 0.15]),
        OccluderClass::Hand => (hand(&mut rng), [0.5, 0.6]),
        OccluderClass::HalfFace => (solid_block(&mut rng, 60, 150, false), [1.0, 0.5]),
        OccluderClass::ThreeQuarters => (solid_block(&mut rng, 120, 112, true), [0.5, 0.5]),
    };
    OccluderSprite::new(canvas.0, class, anchor).expect("procedural sprites are valid")
}

/// Two color variants for every class, training classes first.
pub fn default_sprite_library(seed: u64) -> Vec<OccluderSprite> {
    OccluderClass::TRAINING
        .iter()
        .chain(&OccluderClass::EVALUATION_ONLY)
        .enumerate()
        .flat_map(|(i, &c)| (0..2).map(move |k| procedural_sprite(c, seed.wrapping_mul(31).wrapping_add((2 * i + k) as u64))))
        .collect()
}

/// Writes each sprite as `<class>_<k>.png` plus its sidecar.
pub fn write_sprite_library(dir: impl AsRef<Path>, sprites: &[OccluderSprite]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut counter = std::collections::BTreeMap::new();
    for s in sprites {
        let k = counter.entry(s.class).or_insert(0usize);
        s.save(dir.join(format!("{}_{}.png", s.class, k)))?;
        *k += 1;
    }
    Ok(())
}

/// Loads every `*.png` sprite (with sidecar) in `dir`, in file-name order.
pub fn load_sprite_library(dir: impl AsRef<Path>) -> Result<Vec<OccluderSprite>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    paths.sort();
    let sprites = paths.iter().map(OccluderSprite::load).collect::<Result<Vec<_>>>()?;
    if sprites.is_empty() {
        return Err(Error::InvalidInput(format!("no sprites found in {}", dir.display())));
    }
    Ok(sprites)
}
