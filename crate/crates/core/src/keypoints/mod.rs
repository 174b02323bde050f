//! Oriented FAST keypoints, rotated BRIEF descriptors and the keypoint
//! distance representations built from nearest-match Hamming distances.

mod pattern;

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{gaussian_blur, resize_bilinear, GrayImage};

use pattern::ORB_PATTERN;

/// Largest distance tracked by the cumulative distribution.
pub const DIST_CAP: usize = 200;

const FAST_CIRCLE: [(isize, isize); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

const PATCH_RADIUS: isize = 15;
const HARRIS_K: f64 = 0.04;
const HARRIS_HALF: isize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbConfig {
    pub fast_threshold: f64,
    pub max_keypoints: usize,
    pub n_levels: usize,
    pub scale_factor: f64,
    pub orientation_bins: usize,
    pub descriptor_sigma: f64,
}

impl Default for OrbConfig {
    fn default() -> Self {
        Self {
            fast_threshold: 20.0,
            max_keypoints: 500,
            n_levels: 8,
            scale_factor: 1.2,
            orientation_bins: 30,
            descriptor_sigma: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Column in the pyramid level `octave`.
    pub x: usize,
    pub y: usize,
    /// Intensity-centroid angle in radians, in `[-pi, pi]`.
    pub orientation: f64,
    /// Harris corner response.
    pub response: f64,
    pub octave: usize,
}

/// 256 binary intensity tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Descriptor256(pub [u64; 4]);

impl Descriptor256 {
    pub const ZERO: Self = Self([0; 4]);
    pub const ONES: Self = Self([u64::MAX; 4]);

    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set_bit(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    #[inline]
    pub fn hamming(&self, other: &Self) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Bit `i` is bit `i % 8` of byte `i / 8`.
    pub fn to_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (w, word) in self.0.iter().enumerate() {
            out[w * 8..w * 8 + 8].copy_from_slice(&word.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8; 32]) -> Self {
        let mut words = [0u64; 4];
        for (w, word) in words.iter_mut().enumerate() {
            *word = u64::from_le_bytes(b[w * 8..w * 8 + 8].try_into().expect("8 bytes"));
        }
        Self(words)
    }
}

/// Scale pyramid with the blurred copies used for descriptor sampling.
pub struct Pyramid {
    pub levels: Vec<GrayImage<f64>>,
    pub blurred: Vec<GrayImage<f64>>,
}

impl Pyramid {
    pub fn build(img: &GrayImage<f64>, cfg: &OrbConfig) -> Result<Self> {
        let mut levels = Vec::with_capacity(cfg.n_levels);
        let mut blurred = Vec::with_capacity(cfg.n_levels);
        for l in 0..cfg.n_levels {
            let s = cfg.scale_factor.powi(l as i32);
            let w = (img.width() as f64 / s).round() as usize;
            let h = (img.height() as f64 / s).round() as usize;
            if w < 2 * PATCH_RADIUS as usize + 2 || h < 2 * PATCH_RADIUS as usize + 2 {
                break;
            }
            let level = if l == 0 { img.clone() } else { resize_bilinear(img, w, h)? };
            blurred.push(gaussian_blur(&level, 7, cfg.descriptor_sigma)?);
            levels.push(level);
        }
        Ok(Self { levels, blurred })
    }
}

/// FAST-9 corners over the pyramid, ranked by Harris response.
///
/// Images smaller than 32x32 yield no keypoints.
pub fn detect_oriented_fast(img: &GrayImage<f64>, cfg: &OrbConfig) -> Result<Vec<Keypoint>> {
    if img.width() < 32 || img.height() < 32 {
        return Ok(Vec::new());
    }
    let pyr = Pyramid::build(img, cfg)?;
    Ok(detect_in_pyramid(&pyr, cfg))
}

fn detect_in_pyramid(pyr: &Pyramid, cfg: &OrbConfig) -> Vec<Keypoint> {
    let mut all = Vec::new();
    for (octave, level) in pyr.levels.iter().enumerate() {
        all.extend(detect_level(level, octave, cfg));
    }
    all.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.octave.cmp(&b.octave))
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    all.truncate(cfg.max_keypoints);
    all
}

fn detect_level(img: &GrayImage<f64>, octave: usize, cfg: &OrbConfig) -> Vec<Keypoint> {
    let (w, h) = (img.width(), img.height());
    let margin = PATCH_RADIUS as usize + 1;
    if w <= 2 * margin || h <= 2 * margin {
        return Vec::new();
    }
    let mut score = vec![0.0f64; w * h];
    for y in margin..h - margin {
        for x in margin..w - margin {
            score[y * w + x] = fast_score(img, x, y, cfg.fast_threshold);
        }
    }
    let mut out = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let s = score[y * w + x];
            if s <= 0.0 {
                continue;
            }
            // 3x3 non-maximum suppression, earlier raster position wins ties
            let mut is_max = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let n = ((y as isize + dy) as usize) * w + (x as isize + dx) as usize;
                    let before = dy < 0 || (dy == 0 && dx < 0);
                    if score[n] > s || (before && score[n] == s) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if !is_max {
                continue;
            }
            out.push(Keypoint {
                x,
                y,
                orientation: intensity_centroid_angle(img, x, y),
                response: harris_response(img, x, y),
                octave,
            });
        }
    }
    out
}

/// FAST-9 test; returns the summed excess over the threshold of the winning
/// arc side, or 0 when the pixel is not a corner.
fn fast_score(img: &GrayImage<f64>, x: usize, y: usize, t: f64) -> f64 {
    let p = img.get(x, y);
    let mut state = [0i8; 16];
    for (k, &(dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let v = img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
        state[k] = if v > p + t {
            1
        } else if v < p - t {
            -1
        } else {
            0
        };
    }
    let arc = |sign: i8| -> bool {
        let mut run = 0;
        for k in 0..32 {
            if state[k % 16] == sign {
                run += 1;
                if run >= 9 {
                    return true;
                }
            } else {
                run = 0;
            }
        }
        false
    };
    let sum = |sign: i8| -> f64 {
        FAST_CIRCLE
            .iter()
            .enumerate()
            .filter(|(k, _)| state[*k] == sign)
            .map(|(_, &(dx, dy))| {
                let v = img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                (v - p).abs() - t
            })
            .sum()
    };
    let bright = if arc(1) { sum(1) } else { 0.0 };
    let dark = if arc(-1) { sum(-1) } else { 0.0 };
    bright.max(dark)
}

fn harris_response(img: &GrayImage<f64>, x: usize, y: usize) -> f64 {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for dy in -HARRIS_HALF..=HARRIS_HALF {
        for dx in -HARRIS_HALF..=HARRIS_HALF {
            let (px, py) = (x as isize + dx, y as isize + dy);
            let g = |ox: isize, oy: isize| img.get_clamped(px + ox, py + oy);
            let ix = (g(1, -1) + 2.0 * g(1, 0) + g(1, 1)) - (g(-1, -1) + 2.0 * g(-1, 0) + g(-1, 1));
            let iy = (g(-1, 1) + 2.0 * g(0, 1) + g(1, 1)) - (g(-1, -1) + 2.0 * g(0, -1) + g(1, -1));
            a += ix * ix;
            b += iy * iy;
            c += ix * iy;
        }
    }
    // normalize so responses are comparable to the usual 8-bit scale
    let s = 1.0 / (4.0 * 255.0 * 49.0);
    let (a, b, c) = (a * s, b * s, c * s);
    a * b - c * c - HARRIS_K * (a + b) * (a + b)
}

fn intensity_centroid_angle(img: &GrayImage<f64>, x: usize, y: usize) -> f64 {
    let (mut m01, mut m10) = (0.0, 0.0);
    let r2 = PATCH_RADIUS * PATCH_RADIUS;
    for dy in -PATCH_RADIUS..=PATCH_RADIUS {
        for dx in -PATCH_RADIUS..=PATCH_RADIUS {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = img.get_clamped(x as isize + dx, y as isize + dy);
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    m01.atan2(m10)
}

/// Descriptors for the keypoints whose rotated pattern fits in their level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor256>,
    /// Keypoints dropped because the rotated pattern left the image.
    pub dropped: usize,
}

/// Steered BRIEF over a pyramid built from `img` with the same config used for detection.
pub fn compute_rbrief(img: &GrayImage<f64>, kps: &[Keypoint], cfg: &OrbConfig) -> Result<DescriptorSet> {
    if kps.is_empty() {
        return Ok(DescriptorSet::default());
    }
    let pyr = Pyramid::build(img, cfg)?;
    Ok(describe(&pyr, kps, cfg))
}

fn rotated_patterns(bins: usize) -> Vec<Vec<[isize; 4]>> {
    (0..bins)
        .map(|b| {
            let a = b as f64 * std::f64::consts::TAU / bins as f64;
            let (s, c) = a.sin_cos();
            let rot = |x: i8, y: i8| -> (isize, isize) {
                let (x, y) = (x as f64, y as f64);
                ((c * x - s * y).round() as isize, (s * x + c * y).round() as isize)
            };
            ORB_PATTERN
                .iter()
                .map(|p| {
                    let (ax, ay) = rot(p[0], p[1]);
                    let (bx, by) = rot(p[2], p[3]);
                    [ax, ay, bx, by]
                })
                .collect()
        })
        .collect()
}

fn orientation_bin(angle: f64, bins: usize) -> usize {
    let step = std::f64::consts::TAU / bins as f64;
    let b = (angle / step).round() as isize;
    b.rem_euclid(bins as isize) as usize
}

fn describe(pyr: &Pyramid, kps: &[Keypoint], cfg: &OrbConfig) -> DescriptorSet {
    let patterns = rotated_patterns(cfg.orientation_bins);
    let described: Vec<Option<Descriptor256>> = kps
        .par_iter()
        .map(|kp| describe_one(pyr, kp, &patterns, cfg.orientation_bins))
        .collect();
    let mut out = DescriptorSet::default();
    for (kp, d) in kps.iter().zip(described) {
        match d {
            Some(d) => {
                out.keypoints.push(*kp);
                out.descriptors.push(d);
            }
            None => out.dropped += 1,
        }
    }
    out
}

fn describe_one(pyr: &Pyramid, kp: &Keypoint, patterns: &[Vec<[isize; 4]>], bins: usize) -> Option<Descriptor256> {
    let img = pyr.blurred.get(kp.octave)?;
    let pat = &patterns[orientation_bin(kp.orientation, bins)];
    let (w, h) = (img.width() as isize, img.height() as isize);
    let (cx, cy) = (kp.x as isize, kp.y as isize);
    let inside = pat.iter().all(|p| {
        [(p[0], p[1]), (p[2], p[3])]
            .iter()
            .all(|&(dx, dy)| (0..w).contains(&(cx + dx)) && (0..h).contains(&(cy + dy)))
    });
    if !inside {
        return None;
    }
    let mut d = Descriptor256::ZERO;
    for (i, p) in pat.iter().enumerate() {
        let a = img.get((cx + p[0]) as usize, (cy + p[1]) as usize);
        let b = img.get((cx + p[2]) as usize, (cy + p[3]) as usize);
        if a < b {
            d.set_bit(i);
        }
    }
    Some(d)
}

/// Detect and describe in one pass over a single pyramid.
pub fn extract(img: &GrayImage<f64>, cfg: &OrbConfig) -> Result<DescriptorSet> {
    if img.width() < 32 || img.height() < 32 {
        return Ok(DescriptorSet::default());
    }
    let pyr = Pyramid::build(img, cfg)?;
    let kps = detect_in_pyramid(&pyr, cfg);
    Ok(describe(&pyr, &kps, cfg))
}

/// Nearest-match Hamming distance of every `m` descriptor against `r`.
/// Empty when either side is empty.
pub fn match_distances(desc_m: &[Descriptor256], desc_r: &[Descriptor256]) -> Vec<u32> {
    if desc_r.is_empty() {
        return Vec::new();
    }
    desc_m
        .iter()
        .map(|a| desc_r.iter().map(|b| a.hamming(b)).min().expect("non-empty"))
        .collect()
}

/// `F[x]` = number of distances `<= x` for `x` in `0..=200`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceDistribution(pub [u32; DIST_CAP + 1]);

impl DistanceDistribution {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

pub fn distance_distribution(d: &[u32]) -> DistanceDistribution {
    let mut f = [0u32; DIST_CAP + 1];
    for &v in d {
        if (v as usize) <= DIST_CAP {
            f[v as usize] += 1;
        }
    }
    for x in 1..=DIST_CAP {
        f[x] += f[x - 1];
    }
    DistanceDistribution(f)
}

/// Population moments; empty input and zero variance give zeros for the
/// undefined entries.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentVector {
    pub mean: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

impl MomentVector {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.mean, self.variance, self.skewness, self.excess_kurtosis]
    }
}

pub fn moments(values: &[f64]) -> MomentVector {
    let n = values.len();
    if n == 0 {
        return MomentVector {
            mean: 0.0,
            variance: 0.0,
            skewness: 0.0,
            excess_kurtosis: 0.0,
        };
    }
    let nf = n as f64;
    // sorted summation keeps the result independent of input order
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in &sorted {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / nf, m3 / nf, m4 / nf);
    if m2 <= 0.0 {
        return MomentVector {
            mean,
            variance: 0.0,
            skewness: 0.0,
            excess_kurtosis: 0.0,
        };
    }
    MomentVector {
        mean,
        variance: m2,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
    }
}

/// Moments of the distance multiset.
pub fn distribution_moments(d: &[u32]) -> MomentVector {
    let v: Vec<f64> = d.iter().map(|&x| x as f64).collect();
    moments(&v)
}

/// Moments of the 201 cumulative counts themselves, the literal reading
/// of "moments of F".
pub fn cumulative_moments(f: &DistanceDistribution) -> MomentVector {
    let v: Vec<f64> = f.0.iter().map(|&x| x as f64).collect();
    moments(&v)
}

/// Fixed-threshold rule: at least `c_min` distances `<= d_max`.
pub fn threshold_match(f: &DistanceDistribution, d_max: usize, c_min: u32) -> Result<bool> {
    if d_max > DIST_CAP {
        return Err(Error::InvalidDmax(d_max));
    }
    Ok(f.0[d_max] >= c_min)
}

/// Magic bytes of the descriptor cache.
pub const CACHE_MAGIC: &[u8; 4] = b"KPD1";

/// Write descriptor records: `KPD1`, then per image a little-endian `u32`
/// id length, the UTF-8 id, a `u32` descriptor count and 32 bytes per descriptor.
pub fn write_descriptor_cache<W: Write>(out: &mut W, records: &[(String, Vec<Descriptor256>)]) -> std::io::Result<()> {
    out.write_all(CACHE_MAGIC)?;
    for (id, descs) in records {
        out.write_all(&(id.len() as u32).to_le_bytes())?;
        out.write_all(id.as_bytes())?;
        out.write_all(&(descs.len() as u32).to_le_bytes())?;
        for d in descs {
            out.write_all(&d.to_bytes())?;
        }
    }
    Ok(())
}

pub fn read_descriptor_cache<R: Read>(input: &mut R) -> Result<Vec<(String, Vec<Descriptor256>)>> {
    let mut buf = Vec::new();
    input
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("<descriptor cache>", e))?;
    let bad = |m: &str| Error::Parse(format!("descriptor cache: {m}"));
    if buf.len() < 4 || &buf[..4] != CACHE_MAGIC {
        return Err(bad("missing KPD1 header"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(bad("truncated record"));
        }
        let s = &buf[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let Ok(len) = take(4) else { break };
        let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("id is not utf-8"))?;
        let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut descs = Vec::with_capacity(count);
        for _ in 0..count {
            descs.push(Descriptor256::from_bytes(take(32)?.try_into().expect("32 bytes")));
        }
        out.push((id, descs));
    }
    Ok(out)
}
