//! Perceptual hashes and whole-image embeddings.

use std::collections::HashMap;
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{resize_bilinear, sobel, to_grayscale, GrayImage, RasterImage};

const HASH_SIDE: usize = 32;
const HASH_BLOCK: usize = 8;
/// DCT coefficients smaller than this are treated as exact zeros.
const DCT_SNAP: f64 = 1e-9;

pub const EMBED_SIDE: usize = 224;
pub const EMBED_GRID: usize = 4;
pub const EMBED_BINS: usize = 8;
pub const EMBED_DIM: usize = EMBED_GRID * EMBED_GRID * 2 * EMBED_BINS;
pub const EMBED_EPS: f64 = 1e-6;

/// 64-bit perceptual hash. Bit `i` (row-major over the 8x8 block) is the
/// `i`-th most significant bit, so the hex form reads in block order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct Hash64(pub u64);

impl Hash64 {
    pub fn bit(&self, i: usize) -> bool {
        self.0 >> (63 - i) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.0.count_ones()
    }

    pub fn to_hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

impl fmt::Display for Hash64 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl FromStr for Hash64 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 16 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(Error::Parse(format!("hash must be 16 lowercase hex digits, got `{s}`")));
        }
        u64::from_str_radix(s, 16)
            .map(Hash64)
            .map_err(|e| Error::Parse(e.to_string()))
    }
}

impl Serialize for Hash64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Hash64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn hamming(a: Hash64, b: Hash64) -> u32 {
    (a.0 ^ b.0).count_ones()
}

fn dct_matrix(n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for k in 0..n {
        let scale = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            c[k * n + i] = scale * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    c
}

/// Low-frequency `8x8` block of the orthonormal 2-D DCT-II of a 32x32 image, row-major.
pub fn dct_block(img: &GrayImage<f64>) -> Result<[f64; 64]> {
    if img.width() != HASH_SIDE || img.height() != HASH_SIDE {
        return Err(Error::DimMismatch {
            expected: "32x32".into(),
            got: format!("{}x{}", img.width(), img.height()),
        });
    }
    let n = HASH_SIDE;
    let c = dct_matrix(n);
    // rows first: t[y][v] = sum_x c[v][x] * img[y][x]
    let mut t = vec![0.0; n * HASH_BLOCK];
    for y in 0..n {
        for v in 0..HASH_BLOCK {
            t[y * HASH_BLOCK + v] = (0..n).map(|x| c[v * n + x] * img.get(x, y)).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..HASH_BLOCK {
        for v in 0..HASH_BLOCK {
            let s: f64 = (0..n).map(|y| c[u * n + y] * t[y * HASH_BLOCK + v]).sum();
            out[u * HASH_BLOCK + v] = if s.abs() < DCT_SNAP { 0.0 } else { s };
        }
    }
    Ok(out)
}

/// Bits from coefficients: strictly above the median of all 64.
pub fn hash_from_block(block: &[f64; 64]) -> Hash64 {
    let mut sorted = *block;
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[31] + sorted[32]);
    let mut h = 0u64;
    for (i, &c) in block.iter().enumerate() {
        if c > median {
            h |= 1 << (63 - i);
        }
    }
    Hash64(h)
}

pub fn phash(img: &RasterImage) -> Hash64 {
    phash_gray(&to_grayscale::<f64>(img))
}

pub fn phash_gray(gray: &GrayImage<f64>) -> Hash64 {
    let small = resize_bilinear(gray, HASH_SIDE, HASH_SIDE).expect("non-empty image");
    hash_from_block(&dct_block(&small).expect("32x32"))
}

/// Unit-norm embedding vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vec: Vec<f64>,
}

impl Embedding {
    /// L2-normalizes `vec`; a zero or non-finite vector is rejected.
    pub fn normalized(mut vec: Vec<f64>) -> Result<Self> {
        let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidDim("embedding has zero or non-finite norm".into()));
        }
        vec.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { vec })
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> f64 {
        self.vec.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim().to_string(),
            got: b.dim().to_string(),
        });
    }
    // rounding in the dot product would otherwise leave a ~1e-16 self-distance
    if a.vec == b.vec {
        return Ok(0.0);
    }
    let dot: f64 = a.vec.iter().zip(&b.vec).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

/// Grid descriptor before normalization: per cell, 8 magnitude-weighted
/// Sobel orientation bins (mean magnitude per pixel over 255) then 8
/// intensity bins (pixel fractions).
pub fn grid_descriptor(gray: &GrayImage<f64>) -> Vec<f64> {
    let img = resize_bilinear(gray, EMBED_SIDE, EMBED_SIDE).expect("non-empty image");
    let (gx, gy) = sobel(&img);
    let cell = EMBED_SIDE / EMBED_GRID;
    let per_cell = (cell * cell) as f64;
    let mut out = Vec::with_capacity(EMBED_DIM);
    for cy in 0..EMBED_GRID {
        for cx in 0..EMBED_GRID {
            let mut orient = [0.0f64; EMBED_BINS];
            let mut inten = [0usize; EMBED_BINS];
            for y in cy * cell..(cy + 1) * cell {
                for x in cx * cell..(cx + 1) * cell {
                    let (dx, dy) = (gx.get(x, y), gy.get(x, y));
                    let mag = (dx * dx + dy * dy).sqrt();
                    if mag > 0.0 {
                        let theta = dy.atan2(dx).rem_euclid(std::f64::consts::TAU);
                        let b = ((theta / std::f64::consts::TAU * EMBED_BINS as f64) as usize).min(EMBED_BINS - 1);
                        orient[b] += mag;
                    }
                    let v = img.get(x, y);
                    inten[((v / 32.0) as usize).min(EMBED_BINS - 1)] += 1;
                }
            }
            out.extend(orient.iter().map(|m| m / per_cell / 255.0));
            out.extend(inten.iter().map(|&c| c as f64 / per_cell));
        }
    }
    out
}

pub fn builtin_embedding(gray: &GrayImage<f64>) -> Embedding {
    let raw: Vec<f64> = grid_descriptor(gray).into_iter().map(|v| v + EMBED_EPS).collect();
    Embedding::normalized(raw).expect("epsilon keeps the norm positive")
}

#[derive(Deserialize)]
struct SidecarRow {
    image_id: String,
    vec: Vec<f64>,
}

/// Source of whole-image embeddings.
#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    /// Deterministic grid descriptor computed from pixels.
    BuiltIn,
    /// Externally computed vectors keyed by image id.
    Sidecar {
        name: String,
        dim: usize,
        vectors: HashMap<String, Embedding>,
    },
}

impl EmbeddingProvider {
    pub fn name(&self) -> &str {
        match self {
            EmbeddingProvider::BuiltIn => "builtin-grid",
            EmbeddingProvider::Sidecar { name, .. } => name,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::BuiltIn => EMBED_DIM,
            EmbeddingProvider::Sidecar { dim, .. } => *dim,
        }
    }

    /// Load a JSONL sidecar of `{"image_id", "vec"}` rows. Vectors that are
    /// not unit length are normalized with a warning.
    pub fn load_sidecar(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SidecarRow = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            if *dim.get_or_insert(row.vec.len()) != row.vec.len() {
                return Err(Error::DimMismatch {
                    expected: dim.unwrap_or_default().to_string(),
                    got: row.vec.len().to_string(),
                });
            }
            let norm = row.vec.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                log::warn!("embedding for `{}` has norm {norm}; normalizing", row.image_id);
            }
            vectors.insert(row.image_id, Embedding::normalized(row.vec)?);
        }
        Ok(EmbeddingProvider::Sidecar {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "sidecar".into()),
            dim: dim.unwrap_or(0),
            vectors,
        })
    }
}

/// Embedding of the image identified by `image_id`.
pub fn embed(gray: &GrayImage<f64>, image_id: &str, provider: &EmbeddingProvider) -> Result<Embedding> {
    match provider {
        EmbeddingProvider::BuiltIn => Ok(builtin_embedding(gray)),
        EmbeddingProvider::Sidecar { vectors, .. } => vectors
            .get(image_id)
            .cloned()
            .ok_or_else(|| Error::MissingEmbedding(image_id.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::decode_image;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple-sum DCT with the same coefficient snap and median rule.
    fn oracle_hash(img: &GrayImage<f64>) -> Hash64 {
        let n: f64 = 32.0;
        let alpha = |k: usize| if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        let mut coeffs = Vec::new();
        for u in 0..8 {
            for v in 0..8 {
                let mut s = 0.0;
                for y in 0..32 {
                    for x in 0..32 {
                        s += img.get(x, y)
                            * (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / 64.0).cos()
                            * (std::f64::consts::PI * (2 * x + 1) as f64 * v as f64 / 64.0).cos();
                    }
                }
                let c = alpha(u) * alpha(v) * s;
                coeffs.push(if c.abs() < 1e-9 { 0.0 } else { c });
            }
        }
        let mut sorted = coeffs.clone();
        sorted.sort_by(f64::total_cmp);
        let med = (sorted[31] + sorted[32]) / 2.0;
        let mut bits = String::new();
        for c in coeffs {
            bits.push(if c > med { '1' } else { '0' });
        }
        Hash64(u64::from_str_radix(&bits, 2).unwrap())
    }

    fn random_gray(seed: u64, w: usize, h: usize) -> GrayImage<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| rng.gen_range(0u8..=255) as f64)
    }

    #[test]
    fn constant_image_sets_only_dc() {
        for v in [1.0, 37.0, 128.0, 255.0] {
            let h = phash_gray(&GrayImage::filled(50, 40, v));
            assert_eq!(h.count_ones(), 1);
            assert!(h.bit(0));
        }
    }

    #[test]
    fn ramp_matches_oracle() {
        let ramp = GrayImage::from_fn(32, 32, |x, _| x as f64 * 8.0);
        assert_eq!(phash_gray(&ramp), oracle_hash(&ramp));
        let ramp = GrayImage::from_fn(32, 32, |x, y| (x as f64 * 7.0 + y as f64 * 0.5).min(255.0));
        assert_eq!(phash_gray(&ramp), oracle_hash(&ramp));
        for seed in 0..5 {
            let img = random_gray(seed, 32, 32);
            assert_eq!(phash_gray(&img), oracle_hash(&img));
        }
    }

    #[test]
    fn hamming_by_hand() {
        let a = Hash64(0b1011);
        assert_eq!(hamming(a, a), 0);
        assert_eq!(hamming(Hash64(0), Hash64(u64::MAX)), 64);
        assert_eq!(hamming(a, Hash64(0b0100)), 4);
        assert_eq!(hamming(Hash64(0), Hash64(0b10101)), 3);
    }

    #[test]
    fn hex_round_trip() {
        let h = Hash64(0x8000_0000_0000_00ff);
        assert_eq!(h.to_hex(), "80000000000000ff");
        assert_eq!("80000000000000ff".parse::<Hash64>().unwrap(), h);
        assert!("80000000000000FF".parse::<Hash64>().is_err());
        assert!("abc".parse::<Hash64>().is_err());
        let js = serde_json::to_string(&h).unwrap();
        assert_eq!(js, "\"80000000000000ff\"");
        assert_eq!(serde_json::from_str::<Hash64>(&js).unwrap(), h);
    }

    #[test]
    fn intensity_shift_is_stable() {
        let fixtures: Vec<GrayImage<f64>> = (0..6)
            .map(|s| {
                let base = random_gray(100 + s, 12, 12);
                // smooth structure, kept away from the clip at 255
                let big = resize_bilinear(&base, 64, 64).unwrap();
                big.map(|v| v * 0.8 + 10.0)
            })
            .chain(std::iter::once(GrayImage::from_fn(64, 64, |x, y| ((x + 2 * y) % 200) as f64)))
            .collect();
        for img in fixtures {
            let shifted = img.map(|v| v + 5.0);
            let d = hamming(phash_gray(&img), phash_gray(&shifted));
            assert!(d <= 4, "shift changed {d} bits");
        }
    }

    #[test]
    fn constant_embedding_closed_form() {
        let e = builtin_embedding(&GrayImage::filled(100, 80, 100.0));
        assert_eq!(e.dim(), EMBED_DIM);
        // 16 cells, each with intensity mass 1 in bin 3 and epsilon elsewhere
        let norm = (16.0 * (1.0 + EMBED_EPS).powi(2) + 240.0 * EMBED_EPS * EMBED_EPS).sqrt();
        for cell in 0..16 {
            for b in 0..16 {
                let want = if b == 8 + 3 { (1.0 + EMBED_EPS) / norm } else { EMBED_EPS / norm };
                let got = e.vec[cell * 16 + b];
                assert!((got - want).abs() < 1e-15, "cell {cell} bin {b}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn gradient_bins_follow_direction() {
        // intensity rises to the right: every gradient points at angle 0
        let raw = grid_descriptor(&GrayImage::from_fn(224, 224, |x, _| x as f64));
        for cell in 0..16 {
            let o = &raw[cell * 16..cell * 16 + 8];
            assert!(o[0] > 0.0);
            assert!(o[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cosine_by_hand() {
        let a = Embedding::normalized(vec![1.0, 0.0]).unwrap();
        let b = Embedding::normalized(vec![0.0, 3.0]).unwrap();
        assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(cosine_distance(&a, &b).unwrap(), 1.0);
        let c = Embedding { vec: vec![0.25, (1.0f64 - 0.0625).sqrt()] };
        assert!((cosine_distance(&a, &c).unwrap() - 0.75).abs() < 1e-12);
        let d = Embedding::normalized(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cosine_distance(&a, &d), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn reencode_gives_same_embedding() {
        let gray = random_gray(3, 90, 70);
        let raster = RasterImage::from_gray(&gray);
        let again = decode_image(&raster.encode_png().unwrap()).unwrap();
        let p = EmbeddingProvider::BuiltIn;
        let a = embed(&to_grayscale(&raster), "x", &p).unwrap();
        let b = embed(&to_grayscale(&again), "x", &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(phash(&raster), phash(&again));
    }

    #[test]
    fn sidecar_lookup_and_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        std::fs::write(
            &path,
            "{\"image_id\":\"a\",\"vec\":[3.0,4.0]}\n\n{\"image_id\":\"b\",\"vec\":[0.0,1.0]}\n",
        )
        .unwrap();
        let p = EmbeddingProvider::load_sidecar(&path).unwrap();
        assert_eq!(p.dim(), 2);
        let g = GrayImage::filled(4, 4, 0.0);
        assert_eq!(embed(&g, "a", &p).unwrap().vec, vec![0.6, 0.8]);
        assert_eq!(embed(&g, "a", &p).unwrap(), embed(&g, "a", &p).unwrap());
        assert!(matches!(embed(&g, "zzz", &p), Err(Error::MissingEmbedding(_))));

        std::fs::write(&path, "{\"image_id\":\"a\",\"vec\":[1.0]}\n{\"image_id\":\"b\",\"vec\":[0.0,1.0]}\n").unwrap();
        assert!(EmbeddingProvider::load_sidecar(&path).is_err());
    }

    proptest! {
        #[test]
        fn embedding_is_unit_norm(seed in any::<u64>(), w in 8usize..60, h in 8usize..60) {
            let e = builtin_embedding(&random_gray(seed, w, h));
            prop_assert!((e.norm() - 1.0).abs() < 1e-6);
            prop_assert!(e.vec.iter().all(|v| v.is_finite() && *v > 0.0));
        }

        #[test]
        fn hash_hamming_is_metric(a in any::<u64>(), b in any::<u64>(), c in any::<u64>()) {
            let (a, b, c) = (Hash64(a), Hash64(b), Hash64(c));
            prop_assert_eq!(hamming(a, b), hamming(b, a));
            prop_assert!(hamming(a, c) <= hamming(a, b) + hamming(b, c));
            prop_assert!(hamming(a, b) <= 64);
            prop_assert_eq!(hamming(a, b) == 0, a == b);
        }

        #[test]
        fn cosine_symmetric(x in prop::collection::vec(0.01f64..1.0, 5), y in prop::collection::vec(0.01f64..1.0, 5)) {
            let a = Embedding::normalized(x).unwrap();
            let b = Embedding::normalized(y).unwrap();
            prop_assert_eq!(cosine_distance(&a, &b).unwrap(), cosine_distance(&b, &a).unwrap());
            prop_assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
            let d = cosine_distance(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
