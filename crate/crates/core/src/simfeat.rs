//! Per-pair similarity feature vectors for the six measures.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashembed::{cosine_distance, hamming, Embedding, Hash64};
use crate::keypoints::{
    cumulative_moments, distance_distribution, distribution_moments, match_distances, Descriptor256,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    KeypointD,
    KeypointM,
    EmbedW,
    HashW,
    EmbedS,
    HashS,
}

impl Measure {
    pub const ALL: [Measure; 6] = [
        Measure::KeypointD,
        Measure::KeypointM,
        Measure::EmbedW,
        Measure::HashW,
        Measure::EmbedS,
        Measure::HashS,
    ];

    pub fn dim(self) -> usize {
        match self {
            Measure::KeypointD => 201,
            Measure::KeypointM => 4,
            Measure::EmbedW | Measure::HashW => 2,
            Measure::EmbedS | Measure::HashS => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Measure::KeypointD => "keypoint_d",
            Measure::KeypointM => "keypoint_m",
            Measure::EmbedW => "embed_w",
            Measure::HashW => "hash_w",
            Measure::EmbedS => "embed_s",
            Measure::HashS => "hash_s",
        }
    }

    /// Display name used in reports, e.g. `Embed-W`.
    pub fn label(self) -> &'static str {
        match self {
            Measure::KeypointD => "Keypoint-D",
            Measure::KeypointM => "Keypoint-M",
            Measure::EmbedW => "Embed-W",
            Measure::HashW => "Hash-W",
            Measure::EmbedS => "Embed-S",
            Measure::HashS => "Hash-S",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Measure::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown measure `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Embed,
    Hash,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Whole,
    Segment,
}

/// Which end of the distance pool gets rank 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankDirection {
    /// Rank 1 is the smallest distance.
    #[default]
    MostSimilarFirst,
    /// Rank 1 is the largest distance.
    Descending,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadMode {
    /// max - min
    #[default]
    Range,
    /// Interquartile range with linear interpolation.
    Iqr,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentSource {
    /// Moments of the distance multiset.
    #[default]
    Distances,
    /// Moments of the 201 cumulative counts.
    Cumulative,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub rank_direction: RankDirection,
    pub spread: SpreadMode,
    pub moments: MomentSource,
}

/// Hash and embedding of one image or segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub hash: Hash64,
    pub embedding: Embedding,
}

pub fn signature_distance(a: &Signature, b: &Signature, backend: Backend) -> Result<f64> {
    match backend {
        Backend::Embed => cosine_distance(&a.embedding, &b.embedding),
        Backend::Hash => Ok(hamming(a.hash, b.hash) as f64),
    }
}

/// Everything the feature extractors need from one preprocessed image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRep {
    pub id: String,
    pub whole: Signature,
    /// Non-blank segments; never empty.
    pub segments: Vec<Signature>,
    pub descriptors: Vec<Descriptor256>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityFeatures {
    pub pair_id: String,
    pub measure: Measure,
    pub features: Vec<f64>,
}

/// Competition rank of `score` within `pool`; ties share the best rank.
pub fn rank(score: f64, pool: &[f64], direction: RankDirection) -> Result<usize> {
    if !pool.contains(&score) {
        return Err(Error::ScoreNotInPool);
    }
    let better = match direction {
        RankDirection::MostSimilarFirst => pool.iter().filter(|&&v| v < score).count(),
        RankDirection::Descending => pool.iter().filter(|&&v| v > score).count(),
    };
    Ok(better + 1)
}

/// Sorted score pool with the rank lookup done by binary search.
#[derive(Clone, Debug, PartialEq)]
struct Pool(Vec<f64>);

impl Pool {
    fn new(mut v: Vec<f64>) -> Self {
        v.sort_by(f64::total_cmp);
        Self(v)
    }

    fn rank(&self, score: f64, direction: RankDirection) -> Result<usize> {
        let lo = self.0.partition_point(|&v| v < score);
        let hi = self.0.partition_point(|&v| v <= score);
        if lo == hi {
            return Err(Error::ScoreNotInPool);
        }
        Ok(match direction {
            RankDirection::MostSimilarFirst => lo + 1,
            RankDirection::Descending => self.0.len() - hi + 1,
        })
    }
}

/// Per-meme score pools against the whole reference set.
#[derive(Clone, Debug)]
pub struct RankContext {
    pub backend: Backend,
    pub granularity: Granularity,
    pools: HashMap<String, Pool>,
}

impl RankContext {
    pub fn pool(&self, meme_id: &str) -> Option<&[f64]> {
        self.pools.get(meme_id).map(|p| p.0.as_slice())
    }

    fn get(&self, meme_id: &str) -> Result<&Pool> {
        self.pools
            .get(meme_id)
            .ok_or_else(|| Error::MissingContext(meme_id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.pools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pools.is_empty()
    }
}

fn cross_scores(a: &[Signature], b: &[Signature], backend: Backend) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for sa in a {
        for sb in b {
            out.push(signature_distance(sa, sb, backend)?);
        }
    }
    Ok(out)
}

pub fn build_rank_context(
    memes: &[&ImageRep],
    refs: &[&ImageRep],
    backend: Backend,
    granularity: Granularity,
) -> Result<RankContext> {
    if refs.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    let pools = memes
        .par_iter()
        .map(|m| {
            let mut scores = Vec::new();
            for r in refs {
                match granularity {
                    Granularity::Whole => scores.push(signature_distance(&m.whole, &r.whole, backend)?),
                    Granularity::Segment => scores.extend(cross_scores(&m.segments, &r.segments, backend)?),
                }
            }
            Ok((m.id.clone(), Pool::new(scores)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankContext {
        backend,
        granularity,
        pools: pools.into_iter().collect(),
    })
}

fn whole_measure(backend: Backend) -> Measure {
    match backend {
        Backend::Embed => Measure::EmbedW,
        Backend::Hash => Measure::HashW,
    }
}

fn segment_measure(backend: Backend) -> Measure {
    match backend {
        Backend::Embed => Measure::EmbedS,
        Backend::Hash => Measure::HashS,
    }
}

/// `[sigma_w, rank_w]`.
pub fn whole_image_features(
    pair_id: &str,
    m: &ImageRep,
    r: &ImageRep,
    ctx: &RankContext,
    opts: &FeatureOptions,
) -> Result<SimilarityFeatures> {
    let pool = ctx.get(&m.id)?;
    let sigma = signature_distance(&m.whole, &r.whole, ctx.backend)?;
    let rank_w = pool.rank(sigma, opts.rank_direction)?;
    Ok(SimilarityFeatures {
        pair_id: pair_id.to_string(),
        measure: whole_measure(ctx.backend),
        features: vec![sigma, rank_w as f64],
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `[mean, min, max, spread, min_rank, max_rank, n_m, n_r]`.
pub fn segment_features(
    pair_id: &str,
    m: &ImageRep,
    r: &ImageRep,
    ctx: &RankContext,
    opts: &FeatureOptions,
) -> Result<SimilarityFeatures> {
    let pool = ctx.get(&m.id)?;
    let mut scores = cross_scores(&m.segments, &r.segments, ctx.backend)?;
    if scores.is_empty() {
        return Err(Error::EmptySample);
    }
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n as f64;
    let (min, max) = (scores[0], scores[n - 1]);
    let spread = match opts.spread {
        SpreadMode::Range => max - min,
        SpreadMode::Iqr => quantile(&scores, 0.75) - quantile(&scores, 0.25),
    };
    let ranks = [pool.rank(min, opts.rank_direction)?, pool.rank(max, opts.rank_direction)?];
    let (min_rank, max_rank) = (ranks[0].min(ranks[1]), ranks[0].max(ranks[1]));
    Ok(SimilarityFeatures {
        pair_id: pair_id.to_string(),
        measure: segment_measure(ctx.backend),
        features: vec![
            mean.clamp(min, max),
            min,
            max,
            spread,
            min_rank as f64,
            max_rank as f64,
            m.segments.len() as f64,
            r.segments.len() as f64,
        ],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeypointVariant {
    D,
    M,
}

pub fn keypoint_features(
    pair_id: &str,
    m: &ImageRep,
    r: &ImageRep,
    variant: KeypointVariant,
    opts: &FeatureOptions,
) -> SimilarityFeatures {
    let d = match_distances(&m.descriptors, &r.descriptors);
    let (measure, features) = match variant {
        KeypointVariant::D => (
            Measure::KeypointD,
            distance_distribution(&d).0.iter().map(|&c| c as f64).collect(),
        ),
        KeypointVariant::M => (
            Measure::KeypointM,
            match opts.moments {
                MomentSource::Distances => distribution_moments(&d).to_vec(),
                MomentSource::Cumulative => cumulative_moments(&distance_distribution(&d)).to_vec(),
            },
        ),
    };
    SimilarityFeatures {
        pair_id: pair_id.to_string(),
        measure,
        features,
    }
}

/// Rank contexts for the four rank-bearing measures over one task.
pub struct TaskContexts {
    pub embed_w: RankContext,
    pub hash_w: RankContext,
    pub embed_s: RankContext,
    pub hash_s: RankContext,
}

impl TaskContexts {
    pub fn build(memes: &[&ImageRep], refs: &[&ImageRep]) -> Result<Self> {
        Ok(Self {
            embed_w: build_rank_context(memes, refs, Backend::Embed, Granularity::Whole)?,
            hash_w: build_rank_context(memes, refs, Backend::Hash, Granularity::Whole)?,
            embed_s: build_rank_context(memes, refs, Backend::Embed, Granularity::Segment)?,
            hash_s: build_rank_context(memes, refs, Backend::Hash, Granularity::Segment)?,
        })
    }
}

/// Feature vector of `measure` for the pair `(m, r)`.
pub fn pair_features(
    pair_id: &str,
    measure: Measure,
    m: &ImageRep,
    r: &ImageRep,
    ctx: &TaskContexts,
    opts: &FeatureOptions,
) -> Result<SimilarityFeatures> {
    match measure {
        Measure::KeypointD => Ok(keypoint_features(pair_id, m, r, KeypointVariant::D, opts)),
        Measure::KeypointM => Ok(keypoint_features(pair_id, m, r, KeypointVariant::M, opts)),
        Measure::EmbedW => whole_image_features(pair_id, m, r, &ctx.embed_w, opts),
        Measure::HashW => whole_image_features(pair_id, m, r, &ctx.hash_w, opts),
        Measure::EmbedS => segment_features(pair_id, m, r, &ctx.embed_s, opts),
        Measure::HashS => segment_features(pair_id, m, r, &ctx.hash_s, opts),
    }
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    fingerprint: String,
    rows: usize,
}

/// Sidecar holding the fingerprint of the config a cache was built with.
pub fn cache_meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Write JSONL rows `{"pair_id", "measure", "features"}` plus the fingerprint sidecar.
pub fn write_feature_cache(path: &Path, rows: &[SimilarityFeatures], fingerprint: &str) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let meta_path = cache_meta_path(path);
    let meta = CacheMeta {
        fingerprint: fingerprint.to_string(),
        rows: rows.len(),
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&meta_path, text + "\n").map_err(|e| Error::io(meta_path, e))
}

/// Fingerprint recorded next to a cache, if there is one.
pub fn cache_fingerprint(path: &Path) -> Result<Option<String>> {
    let meta_path = cache_meta_path(path);
    if !meta_path.exists() || !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CacheMeta = serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))?;
    Ok(Some(meta.fingerprint))
}

/// Read a cache, rejecting it when its fingerprint differs from `fingerprint`.
pub fn read_feature_cache(path: &Path, fingerprint: &str) -> Result<Vec<SimilarityFeatures>> {
    match cache_fingerprint(path)? {
        None => return Err(Error::MissingFile(path.to_path_buf())),
        Some(f) if f != fingerprint => {
            return Err(Error::StaleCache(format!(
                "{} was built with config {f}, current config is {fingerprint}",
                path.display()
            )))
        }
        Some(_) => {}
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SimilarityFeatures =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if row.features.len() != row.measure.dim() {
            return Err(Error::DimMismatch {
                expected: row.measure.dim().to_string(),
                got: row.features.len().to_string(),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}
