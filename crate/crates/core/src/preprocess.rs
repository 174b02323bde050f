//! Text-region removal by mask-driven inpainting.
//!
//! Masked pixels are filled in increasing order of their exact Euclidean
//! distance to the nearest unmasked pixel (ties by row-major index). Each
//! pixel becomes the `1/(1+d^2)`-weighted mean of the already-known pixels in
//! its 5x5 neighbourhood, so every fill is a convex combination of original
//! values.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgcore::{load_image, quantize, RasterImage};

/// Per-pixel text flag; `true` marks a text pixel to be replaced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl TextMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimMismatch {
                expected: format!("{} flags", width * height),
                got: format!("{} flags", data.len()),
            });
        }
        if !data.is_empty() && data.iter().all(|&m| m) {
            return Err(Error::AllMasked);
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// 8-bit gray raster: 255 for text, 0 otherwise.
    pub fn to_raster(&self) -> RasterImage {
        let data = self.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
        RasterImage::new(self.width, self.height, 1, data).expect("mask dims")
    }
}

/// Sidecar mask path: `foo.png` -> `foo.mask.png`.
pub fn mask_path_for(image_path: &Path) -> PathBuf {
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    image_path.with_file_name(format!("{stem}.mask.png"))
}

/// Load a single-channel mask PNG (255 = text, 0 = keep).
///
/// Any nonzero value is treated as text.
pub fn load_mask(path: &Path, expected_dims: (usize, usize)) -> Result<TextMask> {
    let img = load_image(path)?;
    if img.channels() != 1 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            msg: "mask must be single-channel".into(),
        });
    }
    if img.dims() != expected_dims {
        return Err(Error::DimMismatch {
            expected: format!("{}x{}", expected_dims.0, expected_dims.1),
            got: format!("{}x{}", img.width(), img.height()),
        });
    }
    TextMask::new(
        img.width(),
        img.height(),
        img.data().iter().map(|&v| v != 0).collect(),
    )
}

/// Sidecar mask for `image_path` if one exists.
pub fn load_sidecar_mask(image_path: &Path, dims: (usize, usize)) -> Result<Option<TextMask>> {
    let p = mask_path_for(image_path);
    if p.exists() {
        load_mask(&p, dims).map(Some)
    } else {
        Ok(None)
    }
}

/// Squared exact Euclidean distance from every pixel to the nearest pixel
/// where `feature` is true (0 on feature pixels).
pub fn squared_edt(width: usize, height: usize, feature: &[bool]) -> Vec<f64> {
    const INF: f64 = 1e20;
    let mut grid: Vec<f64> = feature.iter().map(|&f| if f { 0.0 } else { INF }).collect();
    let n = width.max(height);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = d[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&d[..width]);
    }
    grid
}

#[inline]
fn parabola_cut(f: &[f64], q: usize, p: usize) -> f64 {
    ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
}

// Lower envelope of parabolas (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = parabola_cut(f, q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola_cut(f, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Fill masked pixels from their surroundings. Unmasked pixels are copied bit-exactly.
pub fn inpaint(img: &RasterImage, mask: &TextMask) -> Result<RasterImage> {
    if (mask.width, mask.height) != img.dims() {
        return Err(Error::DimMismatch {
            expected: format!("{}x{}", img.width(), img.height()),
            got: format!("{}x{}", mask.width, mask.height),
        });
    }
    if mask.is_empty() {
        return Ok(img.clone());
    }
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let known_src: Vec<bool> = mask.data.iter().map(|&m| !m).collect();
    let dist = squared_edt(w, h, &known_src);

    let mut order: Vec<usize> = (0..w * h).filter(|&i| mask.data[i]).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));

    let mut values: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut known = known_src;
    let mut acc = vec![0.0; c];
    for &idx in &order {
        let (x, y) = ((idx % w) as isize, (idx / w) as isize);
        let mut wsum = 0.0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for dy in -2isize..=2 {
            let ny = y + dy;
            if ny < 0 || ny >= h as isize {
                continue;
            }
            for dx in -2isize..=2 {
                let nx = x + dx;
                if nx < 0 || nx >= w as isize || (dx == 0 && dy == 0) {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if !known[n] {
                    continue;
                }
                let wt = 1.0 / (1.0 + (dx * dx + dy * dy) as f64);
                wsum += wt;
                for ch in 0..c {
                    acc[ch] += wt * values[n * c + ch];
                }
            }
        }
        // the neighbour one step toward the nearest known pixel is strictly
        // closer to it, so it is always filled before this one
        debug_assert!(wsum > 0.0);
        if wsum > 0.0 {
            for ch in 0..c {
                values[idx * c + ch] = acc[ch] / wsum;
            }
            known[idx] = true;
        }
    }

    let mut out = img.clone();
    let data = out.data_mut();
    for &idx in &order {
        for ch in 0..c {
            data[idx * c + ch] = quantize(values[idx * c + ch]);
        }
    }
    Ok(out)
}
