use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{save_scalar_preview, FaceMask, ImageRGB};

/// Per-pixel scalar field (depth, albedo). Undefined pixels hold `NaN`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

pub type DepthMap = ScalarMap;
pub type AlbedoMap = ScalarMap;

impl ScalarMap {
    pub fn undefined(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![f64::NAN; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "scalar map values",
                expected: width * height,
                got: values.len(),
            });
        }
        Ok(Self { width, height, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_defined(&self, i: usize) -> bool {
        self.values[i].is_finite()
    }

    /// Mask of the defined pixels.
    pub fn defined_mask(&self) -> FaceMask {
        let data = self.values.iter().map(|v| v.is_finite() as u8).collect();
        FaceMask::from_raw(self.width, self.height, data).expect("sizes agree")
    }

    /// Root-mean-square difference over pixels defined in both maps and set
    /// in `mask`, after removing the mean offset when `align` is set.
    pub fn rmse(&self, other: &ScalarMap, mask: &FaceMask, align: bool) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height)
            || (mask.width(), mask.height()) != (self.width, self.height)
        {
            return Err(Error::InvalidInput("map sizes differ".into()));
        }
        let diffs: Vec<f64> = (0..self.values.len())
            .filter(|&i| mask.data()[i] != 0 && self.is_defined(i) && other.is_defined(i))
            .map(|i| self.values[i] - other.values[i])
            .collect();
        if diffs.is_empty() {
            return Err(Error::InvalidInput("maps share no defined pixels".into()));
        }
        let n = diffs.len() as f64;
        let offset = if align { diffs.iter().sum::<f64>() / n } else { 0.0 };
        Ok((diffs.iter().map(|d| (d - offset).powi(2)).sum::<f64>() / n).sqrt())
    }

    /// Text grid: a `width height` line, then one row of values per line
    /// (`nan` marks undefined pixels).
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.width, self.height);
        for row in self.values.chunks(self.width.max(1)) {
            let line: Vec<String> = row.iter().map(|v| fmt_value(*v)).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (width, height, rows) = parse_grid_header(text)?;
        let mut values = Vec::with_capacity(width * height);
        for (i, line) in rows {
            let row = line.split_whitespace().map(|t| parse_value(t, i)).collect::<Result<Vec<_>>>()?;
            if row.len() != width {
                return Err(Error::parse(i, format!("expected {width} values, got {}", row.len())));
            }
            values.extend(row);
        }
        Self::from_values(width, height, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&read_text(path.as_ref())?)
    }

    pub fn save_preview(&self, path: impl AsRef<Path>) -> Result<()> {
        save_scalar_preview(path, self.width, self.height, &self.values)
    }
}

/// Per-pixel unit normals in view space (`x` right, `y` down, `z` away from
/// the camera, so visible surfaces have `nz < 0`). Undefined pixels hold
/// `NaN` components.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<[f64; 3]>,
}

impl NormalMap {
    pub fn undefined(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            normals: vec![[f64::NAN; 3]; width * height],
        }
    }

    pub fn from_normals(width: usize, height: usize, normals: Vec<[f64; 3]>) -> Result<Self> {
        if normals.len() != width * height {
            return Err(Error::DimensionMismatch {
                what: "normal map entries",
                expected: width * height,
                got: normals.len(),
            });
        }
        Ok(Self { width, height, normals })
    }

    pub fn is_defined(&self, i: usize) -> bool {
        self.normals[i].iter().all(|v| v.is_finite())
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.normals[y * self.width + x]
    }

    /// Largest deviation from unit length over defined pixels.
    pub fn max_norm_error(&self) -> f64 {
        (0..self.normals.len())
            .filter(|&i| self.is_defined(i))
            .map(|i| (norm3(self.normals[i]) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean angle (radians) between each defined normal and the mean of
    /// its defined 4-neighbours, over pixels of `region`. Zero for a
    /// perfectly smooth field; `None` when no pixel qualifies.
    pub fn roughness(&self, region: &FaceMask) -> Option<f64> {
        let (w, h) = (self.width, self.height);
        let mut sum = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !region.get(x, y) || !self.is_defined(i) {
                    continue;
                }
                let mut acc = [0.0; 3];
                let mut k = 0;
                let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
                for (nx, ny) in nbrs {
                    if nx < w && ny < h && self.is_defined(ny * w + nx) {
                        let q = self.normals[ny * w + nx];
                        (0..3).for_each(|c| acc[c] += q[c]);
                        k += 1;
                    }
                }
                let len = norm3(acc);
                if k == 0 || len == 0.0 {
                    continue;
                }
                let p = self.normals[i];
                let cos = (p[0] * acc[0] + p[1] * acc[1] + p[2] * acc[2]) / (len * norm3(p));
                sum += cos.clamp(-1.0, 1.0).acos();
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }

    /// Text grid like [`ScalarMap::to_text`] with `nx,ny,nz` tokens.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.width, self.height);
        for row in self.normals.chunks(self.width.max(1)) {
            let line: Vec<String> = row
                .iter()
                .map(|n| format!("{},{},{}", fmt_value(n[0]), fmt_value(n[1]), fmt_value(n[2])))
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (width, height, rows) = parse_grid_header(text)?;
        let mut normals = Vec::with_capacity(width * height);
        for (i, line) in rows {
            let mut count = 0;
            for tok in line.split_whitespace() {
                let parts = tok.split(',').map(|t| parse_value(t, i)).collect::<Result<Vec<_>>>()?;
                if parts.len() != 3 {
                    return Err(Error::parse(i, format!("normal `{tok}` needs three components")));
                }
                normals.push([parts[0], parts[1], parts[2]]);
                count += 1;
            }
            if count != width {
                return Err(Error::parse(i, format!("expected {width} normals, got {count}")));
            }
        }
        Self::from_normals(width, height, normals)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_text())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&read_text(path.as_ref())?)
    }

    /// RGB preview with `(n + 1) / 2` per channel; undefined pixels black.
    pub fn save_preview(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut img = ImageRGB::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let i = y * self.width + x;
                if self.is_defined(i) {
                    let n = self.normals[i];
                    img.set_pixel(x, y, n.map(|v| (v + 1.0) / 2.0));
                }
            }
        }
        img.save_png(path)
    }
}

pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Writes the depth map as a Wavefront OBJ mesh: one vertex
/// `(x + 0.5, y + 0.5, depth)` per defined pixel and two triangles per
/// fully defined 2×2 block.
pub fn depth_to_obj(depth: &DepthMap) -> String {
    let (w, h) = (depth.width, depth.height);
    let mut index = vec![0usize; w * h];
    let mut s = String::from("# depth mesh\n");
    let mut next = 1;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if depth.is_defined(i) {
                let _ = writeln!(s, "v {} {} {}", x as f64 + 0.5, y as f64 + 0.5, depth.values[i]);
                index[i] = next;
                next += 1;
            }
        }
    }
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let (a, b, c, d) = (y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1);
            if [a, b, c, d].iter().all(|&i| index[i] > 0) {
                let _ = writeln!(s, "f {} {} {}", index[a], index[c], index[b]);
                let _ = writeln!(s, "f {} {} {}", index[b], index[c], index[d]);
            }
        }
    }
    s
}

pub fn save_obj(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    write_text(path.as_ref(), &depth_to_obj(depth))
}

fn fmt_value(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        "nan".into()
    }
}

fn parse_value(t: &str, line: usize) -> Result<f64> {
    if t == "nan" {
        return Ok(f64::NAN);
    }
    t.parse()
        .map_err(|_| Error::parse(line, format!("bad number `{t}`")))
}

type GridRows<'a> = Vec<(usize, &'a str)>;

fn parse_grid_header(text: &str) -> Result<(usize, usize, GridRows<'_>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty map file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(1, format!("bad dimension `{t}`"))))
        .collect::<Result<_>>()?;
    let [width, height] = dims[..] else {
        return Err(Error::parse(1, "header must be `width height`"));
    };
    let rows: Vec<_> = lines.collect();
    if rows.len() != height {
        return Err(Error::parse(0, format!("expected {height} rows, got {}", rows.len())));
    }
    Ok((width, height, rows))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
