//! Raster containers, decoding, colour conversion, resizing and filtering.
//!
//! Pixels enter as 8-bit [`RasterImage`]s and are converted once to a
//! real-valued [`GrayImage`]. All filtering happens in real arithmetic and
//! borders are replicated (clamp-to-edge).

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// 8-bit raster, row-major and channel-interleaved. One (gray) or three (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDim(format!("{width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidDim(format!("{channels} channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimMismatch {
                expected: format!("{} samples", width * height * channels),
                got: format!("{} samples", data.len()),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&value);
        }
        Self::new(width, height, 3, data).expect("valid dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0, 0, self.width, self.height)
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// RGB view of a pixel; gray pixels are replicated.
    #[inline]
    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let p = self.pixel(x, y);
        if self.channels == 1 {
            [p[0]; 3]
        } else {
            [p[0], p[1], p[2]]
        }
    }

    /// Copy of the region `bbox`. Panics when the box exceeds the image.
    pub fn crop(&self, bbox: BBox) -> RasterImage {
        assert!(bbox.fits(self.width, self.height), "crop box out of bounds");
        let mut data = Vec::with_capacity(bbox.w * bbox.h * self.channels);
        for y in bbox.y..bbox.y + bbox.h {
            let start = (y * self.width + bbox.x) * self.channels;
            data.extend_from_slice(&self.data[start..start + bbox.w * self.channels]);
        }
        RasterImage {
            width: bbox.w,
            height: bbox.h,
            channels: self.channels,
            data,
        }
    }

    /// Three-channel copy (no-op for RGB input).
    pub fn to_rgb(&self) -> RasterImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    /// Quantize a gray image (round half away from zero, clamp to 0..=255).
    pub fn from_gray<T: Real>(img: &GrayImage<T>) -> RasterImage {
        let data = img.data().iter().map(|&v| quantize(v)).collect();
        RasterImage {
            width: img.width(),
            height: img.height(),
            channels: 1,
            data,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let dynimg = self.to_dynamic();
        let mut buf = Cursor::new(Vec::new());
        dynimg
            .write_to(&mut buf, ImageFormat::Png)
            .map_err(|e| Error::Decode {
                path: "<memory>".into(),
                msg: e.to_string(),
            })?;
        Ok(buf.into_inner())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w, h, self.data.clone()).expect("sized buffer"),
            )
        } else {
            DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w, h, self.data.clone()).expect("sized buffer"),
            )
        }
    }
}

#[inline]
pub(crate) fn quantize<T: Real>(v: T) -> u8 {
    let v = v.as_f64();
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

/// Real-valued single-channel image.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage<T = f64> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> GrayImage<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidDim(format!("{width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::DimMismatch {
                expected: format!("{} samples", width * height),
                got: format!("{} samples", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDim("non-finite sample".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    /// Sample with clamp-to-edge border replication.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> T {
        let cx = x.clamp(0, self.width as isize - 1) as usize;
        let cy = y.clamp(0, self.height as isize - 1) as usize;
        self.data[cy * self.width + cx]
    }

    pub fn crop(&self, bbox: BBox) -> GrayImage<T> {
        assert!(bbox.fits(self.width, self.height), "crop box out of bounds");
        GrayImage::from_fn(bbox.w, bbox.h, |x, y| self.get(bbox.x + x, bbox.y + y))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> GrayImage<T> {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Axis-aligned pixel rectangle `[x, x+w) x [y, y+h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub const fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x + self.w <= width && self.y + self.h <= height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn overlaps(&self, other: &BBox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }
}

/// Decode a PNG or JPEG file. Alpha is composited over white.
pub fn load_image(path: &Path) -> Result<RasterImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode { msg, .. } => Error::Decode {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

/// Decode PNG or JPEG bytes. Any other container is a decode error.
pub fn decode_image(bytes: &[u8]) -> Result<RasterImage> {
    let decode_err = |msg: String| Error::Decode {
        path: "<memory>".into(),
        msg,
    };
    let format = image::guess_format(bytes).map_err(|e| decode_err(e.to_string()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(decode_err(format!("unsupported format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| decode_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let has_alpha = img.color().has_alpha();
    let is_gray = !img.color().has_color();

    let raster = match (is_gray, has_alpha) {
        (true, false) => RasterImage::new(w, h, 1, img.into_luma8().into_raw())?,
        (true, true) => {
            let la = img.into_luma_alpha8();
            let data = la
                .pixels()
                .map(|p| over_white(p.0[0], p.0[1]))
                .collect();
            RasterImage::new(w, h, 1, data)?
        }
        (false, false) => RasterImage::new(w, h, 3, img.into_rgb8().into_raw())?,
        (false, true) => {
            let rgba = img.into_rgba8();
            let mut data = Vec::with_capacity(w * h * 3);
            for p in rgba.pixels() {
                let a = p.0[3];
                data.extend_from_slice(&[
                    over_white(p.0[0], a),
                    over_white(p.0[1], a),
                    over_white(p.0[2], a),
                ]);
            }
            RasterImage::new(w, h, 3, data)?
        }
    };
    Ok(raster)
}

#[inline]
fn over_white(c: u8, a: u8) -> u8 {
    let a = a as u32;
    ((c as u32 * a + 255 * (255 - a) + 127) / 255) as u8
}

/// Luma with weights 0.299, 0.587, 0.114. Single-channel input passes through.
pub fn to_grayscale<T: Real>(img: &RasterImage) -> GrayImage<T> {
    let (wr, wg, wb) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
    let data = if img.channels() == 1 {
        img.data().iter().map(|&v| T::lit(v as f64)).collect()
    } else {
        img.data()
            .chunks_exact(3)
            .map(|p| {
                let v = wr * T::lit(p[0] as f64) + wg * T::lit(p[1] as f64) + wb * T::lit(p[2] as f64);
                v.max(T::zero()).min(T::lit(255.0))
            })
            .collect()
    };
    GrayImage {
        width: img.width(),
        height: img.height(),
        data,
    }
}

/// Bilinear resize with half-pixel-centred sampling.
pub fn resize_bilinear<T: Real>(img: &GrayImage<T>, w: usize, h: usize) -> Result<GrayImage<T>> {
    if w == 0 || h == 0 {
        return Err(Error::InvalidDim(format!("target {w}x{h}")));
    }
    if w == img.width && h == img.height {
        return Ok(img.clone());
    }
    let xs = sample_axis::<T>(img.width, w);
    let ys = sample_axis::<T>(img.height, h);
    let mut data = Vec::with_capacity(w * h);
    for &(y0, y1, ty) in &ys {
        let row0 = &img.data[y0 * img.width..(y0 + 1) * img.width];
        let row1 = &img.data[y1 * img.width..(y1 + 1) * img.width];
        for &(x0, x1, tx) in &xs {
            let top = lerp(row0[x0], row0[x1], tx);
            let bottom = lerp(row1[x0], row1[x1], tx);
            data.push(lerp(top, bottom, ty));
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data,
    })
}

fn sample_axis<T: Real>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, T::lit(s - i0 as f64))
        })
        .collect()
}

#[inline]
fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    if a == b {
        return a;
    }
    let v = a + (b - a) * t;
    v.max(a.min(b)).min(a.max(b))
}

/// Small dense filter kernel with odd dimensions, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<T = f64> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> Kernel<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width % 2 == 0 || height % 2 == 0 {
            return Err(Error::InvalidKernel(format!("{width}x{height} has an even side")));
        }
        if data.len() != width * height {
            return Err(Error::InvalidKernel(format!(
                "{} values for a {width}x{height} kernel",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_f64(width: usize, height: usize, data: &[f64]) -> Result<Self> {
        Self::new(width, height, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Normalized `size x size` Gaussian.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        let g = gaussian_1d(size, sigma)?;
        let data = g
            .iter()
            .flat_map(|&a| g.iter().map(move |&b| T::lit(a * b)))
            .collect();
        Self::new(size, size, data)
    }

    /// 4-neighbour Laplacian.
    pub fn laplacian() -> Self {
        Self::from_f64(3, 3, &[0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0]).expect("3x3")
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_1d(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::InvalidKernel(format!("gaussian size {size} is even")));
    }
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// 2-D convolution, same-size output, clamp-to-edge borders.
///
/// The kernel is applied flipped (true convolution), so an impulse input
/// reproduces the kernel around the impulse.
pub fn convolve<T: Real>(img: &GrayImage<T>, kernel: &Kernel<T>) -> Result<GrayImage<T>> {
    if kernel.width % 2 == 0 || kernel.height % 2 == 0 {
        return Err(Error::InvalidKernel("even kernel dimension".into()));
    }
    let (w, h) = (img.width, img.height);
    let (kw, kh) = (kernel.width, kernel.height);
    let (cx, cy) = ((kw / 2) as isize, (kh / 2) as isize);
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for j in 0..kh {
                let sy = y as isize - (j as isize - cy);
                for i in 0..kw {
                    let k = kernel.data[j * kw + i];
                    if k == T::zero() {
                        continue;
                    }
                    let sx = x as isize - (i as isize - cx);
                    acc = acc + k * img.get_clamped(sx, sy);
                }
            }
            out[y * w + x] = acc;
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data: out,
    })
}

/// Separable convolution with the same 1-D taps along x then y.
pub fn convolve_separable<T: Real>(img: &GrayImage<T>, taps: &[f64]) -> Result<GrayImage<T>> {
    if taps.len() % 2 == 0 {
        return Err(Error::InvalidKernel("even tap count".into()));
    }
    let taps: Vec<T> = taps.iter().map(|&v| T::lit(v)).collect();
    let c = (taps.len() / 2) as isize;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &k) in taps.iter().enumerate() {
                acc = acc + k * img.get_clamped(x as isize - (i as isize - c), y as isize);
            }
            tmp[y * w + x] = acc;
        }
    }
    let tmp = GrayImage {
        width: w,
        height: h,
        data: tmp,
    };
    let mut out = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (j, &k) in taps.iter().enumerate() {
                acc = acc + k * tmp.get_clamped(x as isize, y as isize - (j as isize - c));
            }
            out[y * w + x] = acc;
        }
    }
    Ok(GrayImage {
        width: w,
        height: h,
        data: out,
    })
}

/// Gaussian blur via separable taps.
pub fn gaussian_blur<T: Real>(img: &GrayImage<T>, size: usize, sigma: f64) -> Result<GrayImage<T>> {
    convolve_separable(img, &gaussian_1d(size, sigma)?)
}

/// Sobel derivatives `(gx, gy)`; positive gx means intensity increases to the right.
pub fn sobel<T: Real>(img: &GrayImage<T>) -> (GrayImage<T>, GrayImage<T>) {
    let (w, h) = (img.width, img.height);
    let two = T::lit(2.0);
    let mut gx = vec![T::zero(); w * h];
    let mut gy = vec![T::zero(); w * h];
    for y in 0..h {
        for x in 0..w {
            let (xi, yi) = (x as isize, y as isize);
            let p = |dx: isize, dy: isize| img.get_clamped(xi + dx, yi + dy);
            gx[y * w + x] = (p(1, -1) + two * p(1, 0) + p(1, 1)) - (p(-1, -1) + two * p(-1, 0) + p(-1, 1));
            gy[y * w + x] = (p(-1, 1) + two * p(0, 1) + p(1, 1)) - (p(-1, -1) + two * p(0, -1) + p(1, -1));
        }
    }
    (
        GrayImage {
            width: w,
            height: h,
            data: gx,
        },
        GrayImage {
            width: w,
            height: h,
            data: gy,
        },
    )
}
