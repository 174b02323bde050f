//! Run configuration: defaults, a `key=value` file and command-line
//! overrides, applied in that order.
//!
//! File format: one `key = value` per line, `#` starts a comment, blank
//! lines are ignored. Keys are the names listed by [`RunConfig::entries`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::cart::TreeParams;
use crate::corpus::CorpusParams;
use crate::error::{Error, Result};
use crate::keypoints::OrbConfig;
use crate::panelseg::SegmentConfig;
use crate::simfeat::{FeatureOptions, Measure, MomentSource, RankDirection, SpreadMode};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProviderChoice {
    BuiltIn,
    /// JSONL vectors keyed by image id.
    Sidecar(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlankModelChoice {
    /// `<out>/blank_model.json` when it exists, otherwise keep every segment.
    Auto,
    /// Keep every segment.
    None,
    Path(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: PathBuf,
    pub out: PathBuf,
    /// Worker threads; 0 means one per logical core.
    pub jobs: usize,
    pub n_splits: usize,
    pub test_fraction: f64,
    pub measures: Vec<Measure>,
    pub provider: ProviderChoice,
    pub blank_model: BlankModelChoice,
    pub folds: usize,
    /// Pair-classifier growth limits; the tree is never pruned.
    pub tree: TreeParams,
    pub segment: SegmentConfig,
    pub orb: OrbConfig,
    pub features: FeatureOptions,
    pub corpus_params: CorpusParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: PathBuf::from("data"),
            out: PathBuf::from("out"),
            jobs: 0,
            n_splits: 50,
            test_fraction: 0.2,
            measures: Measure::ALL.to_vec(),
            provider: ProviderChoice::BuiltIn,
            blank_model: BlankModelChoice::Auto,
            folds: 10,
            tree: TreeParams::default(),
            segment: SegmentConfig::default(),
            orb: OrbConfig::default(),
            features: FeatureOptions::default(),
            corpus_params: CorpusParams::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn rank_direction_str(d: RankDirection) -> &'static str {
    match d {
        RankDirection::MostSimilarFirst => "most_similar_first",
        RankDirection::Descending => "descending",
    }
}

fn spread_str(s: SpreadMode) -> &'static str {
    match s {
        SpreadMode::Range => "range",
        SpreadMode::Iqr => "iqr",
    }
}

fn moments_str(m: MomentSource) -> &'static str {
    match m {
        MomentSource::Distances => "distances",
        MomentSource::Cumulative => "cumulative",
    }
}

impl RunConfig {
    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let c = &mut self.corpus_params;
        match key {
            "seed" => {
                self.seed = num(key, v)?;
                c.seed = self.seed;
            }
            "corpus" => self.corpus = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "jobs" => self.jobs = num(key, v)?,
            "n_splits" => self.n_splits = num(key, v)?,
            "test_fraction" => self.test_fraction = num(key, v)?,
            "measures" => {
                self.measures = v
                    .split(',')
                    .map(|s| s.trim().parse::<Measure>().map_err(|e| Error::Config(e.to_string())))
                    .collect::<Result<_>>()?
            }
            "provider" => {
                self.provider = match v {
                    "builtin" => ProviderChoice::BuiltIn,
                    _ => match v.strip_prefix("sidecar:") {
                        Some(p) if !p.is_empty() => ProviderChoice::Sidecar(PathBuf::from(p)),
                        _ => return Err(Error::Config(format!("provider `{v}`: use builtin or sidecar:<path>"))),
                    },
                }
            }
            "blank_model" => {
                self.blank_model = match v {
                    "auto" => BlankModelChoice::Auto,
                    "none" => BlankModelChoice::None,
                    p => BlankModelChoice::Path(PathBuf::from(p)),
                }
            }
            "folds" => self.folds = num(key, v)?,
            "tree.min_samples_leaf" => self.tree.min_samples_leaf = num(key, v)?,
            "tree.max_depth" => {
                self.tree.max_depth = match v {
                    "none" => None,
                    d => Some(num(key, d)?),
                }
            }
            "segment.canny_low" => self.segment.canny_low = num(key, v)?,
            "segment.canny_high" => self.segment.canny_high = num(key, v)?,
            "segment.support" => self.segment.support = num(key, v)?,
            "segment.merge_tol" => self.segment.merge_tol = num(key, v)?,
            "segment.min_area" => self.segment.min_area = num(key, v)?,
            "segment.max_depth" => self.segment.max_depth = num(key, v)?,
            "segment.vote_band" => self.segment.vote_band = num(key, v)?,
            "orb.fast_threshold" => self.orb.fast_threshold = num(key, v)?,
            "orb.max_keypoints" => self.orb.max_keypoints = num(key, v)?,
            "orb.n_levels" => self.orb.n_levels = num(key, v)?,
            "orb.scale_factor" => self.orb.scale_factor = num(key, v)?,
            "orb.orientation_bins" => self.orb.orientation_bins = num(key, v)?,
            "orb.descriptor_sigma" => self.orb.descriptor_sigma = num(key, v)?,
            "features.rank_direction" => {
                self.features.rank_direction = match v {
                    "most_similar_first" => RankDirection::MostSimilarFirst,
                    "descending" => RankDirection::Descending,
                    _ => return Err(Error::Config(format!("`{key}`: unknown value `{v}`"))),
                }
            }
            "features.spread" => {
                self.features.spread = match v {
                    "range" => SpreadMode::Range,
                    "iqr" => SpreadMode::Iqr,
                    _ => return Err(Error::Config(format!("`{key}`: unknown value `{v}`"))),
                }
            }
            "features.moments" => {
                self.features.moments = match v {
                    "distances" => MomentSource::Distances,
                    "cumulative" => MomentSource::Cumulative,
                    _ => return Err(Error::Config(format!("`{key}`: unknown value `{v}`"))),
                }
            }
            "corpus.n_templates" => c.n_templates = num(key, v)?,
            "corpus.n_elements" => c.n_elements = num(key, v)?,
            "corpus.n_pairs" => c.n_pairs = num(key, v)?,
            "corpus.negatives" => c.negatives_per_related = num(key, v)?,
            "corpus.min_template_distance" => c.min_template_distance = num(key, v)?,
            "corpus.mm_background_prob" => c.mm_background_prob = num(key, v)?,
            "corpus.mm_paste_prob" => c.mm_paste_prob = num(key, v)?,
            "corpus.caption_prob" => c.caption_prob = num(key, v)?,
            "corpus.flip_prob" => c.flip_prob = num(key, v)?,
            "corpus.paste_scale_min" => c.paste_scale.0 = num(key, v)?,
            "corpus.paste_scale_max" => c.paste_scale.1 = num(key, v)?,
            "corpus.crop_max" => c.crop_max = num(key, v)?,
            "corpus.noise_amp" => c.noise_amp = num(key, v)?,
            "corpus.meme_scale_min" => c.meme_scale.0 = num(key, v)?,
            "corpus.meme_scale_max" => c.meme_scale.1 = num(key, v)?,
            "corpus.blank_seed" => c.blank_seed = num(key, v)?,
            "corpus.blank_segments" => c.blank_segments = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus_params;
        let s = &self.segment;
        let o = &self.orb;
        vec![
            ("seed", self.seed.to_string()),
            ("corpus", self.corpus.display().to_string()),
            ("out", self.out.display().to_string()),
            ("jobs", self.jobs.to_string()),
            ("n_splits", self.n_splits.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            (
                "measures",
                self.measures.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
            ),
            (
                "provider",
                match &self.provider {
                    ProviderChoice::BuiltIn => "builtin".into(),
                    ProviderChoice::Sidecar(p) => format!("sidecar:{}", p.display()),
                },
            ),
            (
                "blank_model",
                match &self.blank_model {
                    BlankModelChoice::Auto => "auto".into(),
                    BlankModelChoice::None => "none".into(),
                    BlankModelChoice::Path(p) => p.display().to_string(),
                },
            ),
            ("folds", self.folds.to_string()),
            ("tree.min_samples_leaf", self.tree.min_samples_leaf.to_string()),
            (
                "tree.max_depth",
                self.tree.max_depth.map_or_else(|| "none".into(), |d| d.to_string()),
            ),
            ("segment.canny_low", s.canny_low.to_string()),
            ("segment.canny_high", s.canny_high.to_string()),
            ("segment.support", s.support.to_string()),
            ("segment.merge_tol", s.merge_tol.to_string()),
            ("segment.min_area", s.min_area.to_string()),
            ("segment.max_depth", s.max_depth.to_string()),
            ("segment.vote_band", s.vote_band.to_string()),
            ("orb.fast_threshold", o.fast_threshold.to_string()),
            ("orb.max_keypoints", o.max_keypoints.to_string()),
            ("orb.n_levels", o.n_levels.to_string()),
            ("orb.scale_factor", o.scale_factor.to_string()),
            ("orb.orientation_bins", o.orientation_bins.to_string()),
            ("orb.descriptor_sigma", o.descriptor_sigma.to_string()),
            ("features.rank_direction", rank_direction_str(self.features.rank_direction).into()),
            ("features.spread", spread_str(self.features.spread).into()),
            ("features.moments", moments_str(self.features.moments).into()),
            ("corpus.n_templates", c.n_templates.to_string()),
            ("corpus.n_elements", c.n_elements.to_string()),
            ("corpus.n_pairs", c.n_pairs.to_string()),
            ("corpus.negatives", c.negatives_per_related.to_string()),
            ("corpus.min_template_distance", c.min_template_distance.to_string()),
            ("corpus.mm_background_prob", c.mm_background_prob.to_string()),
            ("corpus.mm_paste_prob", c.mm_paste_prob.to_string()),
            ("corpus.caption_prob", c.caption_prob.to_string()),
            ("corpus.flip_prob", c.flip_prob.to_string()),
            ("corpus.paste_scale_min", c.paste_scale.0.to_string()),
            ("corpus.paste_scale_max", c.paste_scale.1.to_string()),
            ("corpus.crop_max", c.crop_max.to_string()),
            ("corpus.noise_amp", c.noise_amp.to_string()),
            ("corpus.meme_scale_min", c.meme_scale.0.to_string()),
            ("corpus.meme_scale_max", c.meme_scale.1.to_string()),
            ("corpus.blank_seed", c.blank_seed.to_string()),
            ("corpus.blank_segments", c.blank_segments.to_string()),
        ]
    }

    /// Entries that can change results. Locations and worker count are left
    /// out so identical runs in different directories report identically.
    pub fn result_entries(&self) -> BTreeMap<String, String> {
        self.entries()
            .into_iter()
            .filter(|(k, _)| !matches!(*k, "corpus" | "out" | "jobs"))
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    /// Apply `key=value` lines.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then the file (if any), then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.apply_file(f)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_splits == 0 {
            return bad("n_splits must be at least 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction {} outside (0, 1)", self.test_fraction));
        }
        if self.measures.is_empty() {
            return bad("measures is empty".into());
        }
        let mut seen = self.measures.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.measures.len() {
            return bad("measures lists a measure twice".into());
        }
        if self.folds < 2 {
            return bad("folds must be at least 2".into());
        }
        if self.tree.min_samples_leaf == 0 || self.tree.max_depth == Some(0) {
            return bad("tree.min_samples_leaf and tree.max_depth must be at least 1".into());
        }
        let s = &self.segment;
        if !(s.canny_low >= 0.0 && s.canny_low <= s.canny_high) {
            return bad("segment.canny_low must be within [0, canny_high]".into());
        }
        if !(s.support > 0.0 && s.support <= 1.0) || !(0.0..1.0).contains(&s.min_area) || !(0.0..1.0).contains(&s.merge_tol) {
            return bad("segment fractions must lie in [0, 1)".into());
        }
        let o = &self.orb;
        if !(o.scale_factor > 1.0) || o.n_levels == 0 || o.max_keypoints == 0 || o.orientation_bins == 0 {
            return bad("orb settings out of range".into());
        }
        if !(o.fast_threshold > 0.0) || !(o.descriptor_sigma > 0.0) {
            return bad("orb thresholds must be positive".into());
        }
        let c = &self.corpus_params;
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !(prob(c.mm_background_prob) && prob(c.mm_paste_prob) && prob(c.caption_prob) && prob(c.flip_prob)) {
            return bad("corpus probabilities must lie in [0, 1]".into());
        }
        if !(c.paste_scale.0 > 0.0 && c.paste_scale.0 <= c.paste_scale.1) {
            return bad("corpus paste scale range is empty".into());
        }
        if !(c.meme_scale.0 > 0.0 && c.meme_scale.0 <= c.meme_scale.1) {
            return bad("corpus meme scale range is empty".into());
        }
        if !(0.0..0.25).contains(&c.crop_max) || c.noise_amp < 0.0 {
            return bad("corpus crop_max must lie in [0, 0.25) and noise_amp be non-negative".into());
        }
        Ok(())
    }
}

/// SHA-256 hex digest of `key=value` lines plus named file digests.
pub fn fingerprint(entries: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    format!("{:x}", h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
