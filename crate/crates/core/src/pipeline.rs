//! End-to-end stages driven by [`RunConfig`]: featurize, train the blank
//! filter, evaluate.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::cart::DecisionTree;
use crate::config::{file_digest, fingerprint, BlankModelChoice, ProviderChoice, RunConfig};
use crate::corpus::{load_blank_set, load_manifest, write_if_changed, BLANK_LABELS, MANIFEST};
use crate::error::{Error, Result};
use crate::evalharness::{compile_report, evaluate_measure, make_splits, EvalReport, FeatureTable, LabeledPair, MeasureResult, Task};
use crate::hashembed::{embed, phash_gray, EmbeddingProvider};
use crate::imgcore::{load_image, to_grayscale};
use crate::keypoints::{extract, write_descriptor_cache};
use crate::panelseg::{blank_features, filter_blanks, segment_panels, train_blank_filter, BlankFilter, Segment};
use crate::preprocess::{inpaint, load_sidecar_mask};
use crate::simfeat::{
    cache_fingerprint, pair_features, read_feature_cache, write_feature_cache, ImageRep, Measure, Signature,
    SimilarityFeatures, TaskContexts,
};

pub const FEATURES_FILE: &str = "features.jsonl";
pub const DESCRIPTORS_FILE: &str = "descriptors.kpd";
pub const BLANK_MODEL_FILE: &str = "blank_model.json";
pub const BLANK_CV_FILE: &str = "blank_cv.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Process exit status for an error, per the documented table.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Decode { .. } => 2,
        Error::MissingFile(_) => 3,
        Error::StaleCache(_) => 4,
        Error::IncompleteGrid(_) | Error::MissingFeatures { .. } => 5,
        Error::TooFewSamples(_) | Error::TooFewPerClass(_) | Error::EmptyData => 6,
        _ => 1,
    }
}

/// Run `f` on a pool of `jobs` threads (0: one per logical core).
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn blank_model_path(cfg: &RunConfig) -> Option<PathBuf> {
    match &cfg.blank_model {
        BlankModelChoice::None => None,
        BlankModelChoice::Path(p) => Some(p.clone()),
        BlankModelChoice::Auto => Some(cfg.out.join(BLANK_MODEL_FILE)).filter(|p| p.is_file()),
    }
}

pub fn load_blank_filter(path: &Path) -> Result<BlankFilter> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    BlankFilter::new(DecisionTree::from_json(&text)?)
}

/// Fingerprint of everything the feature cache depends on: the feature
/// settings and the bytes of the manifest, blank model and sidecar vectors.
pub fn feature_fingerprint(cfg: &RunConfig) -> Result<String> {
    let mut entries: BTreeMap<String, String> = cfg
        .result_entries()
        .into_iter()
        .filter(|(k, _)| k.starts_with("segment.") || k.starts_with("orb.") || k.starts_with("features."))
        .collect();
    entries.insert("manifest".into(), file_digest(&cfg.corpus.join(MANIFEST))?);
    entries.insert(
        "blank_model".into(),
        match blank_model_path(cfg) {
            Some(p) => file_digest(&p)?,
            None => "none".into(),
        },
    );
    entries.insert(
        "provider".into(),
        match &cfg.provider {
            ProviderChoice::BuiltIn => "builtin".into(),
            ProviderChoice::Sidecar(p) => format!("sidecar:{}", file_digest(p)?),
        },
    );
    Ok(fingerprint(&entries))
}

/// Inpaint, then compute the whole-image signature, ORB descriptors and the
/// signatures of the non-blank panels.
pub fn image_rep(root: &Path, id: &str, cfg: &RunConfig, provider: &EmbeddingProvider, filter: &BlankFilter) -> Result<ImageRep> {
    let path = root.join(id);
    let mut img = load_image(&path)?;
    if let Some(mask) = load_sidecar_mask(&path, img.dims())? {
        if !mask.is_empty() {
            img = inpaint(&img, &mask)?;
        }
    }
    let gray = to_grayscale::<f64>(&img);
    let whole = Signature {
        hash: phash_gray(&gray),
        embedding: embed(&gray, id, provider)?,
    };
    let descriptors = extract(&gray, &cfg.orb)?.descriptors;
    let segs = filter_blanks(&segment_panels(id, &img, &cfg.segment)?, filter)?;
    let segments = segs
        .segments
        .iter()
        .map(|s| {
            let g = to_grayscale::<f64>(&s.pixels);
            let b = s.bbox;
            Ok(Signature {
                hash: phash_gray(&g),
                embedding: embed(&g, &format!("{id}@{},{},{},{}", b.x, b.y, b.w, b.h), provider)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ImageRep {
        id: id.to_string(),
        whole,
        segments,
        descriptors,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheStatus {
    Computed,
    UpToDate,
}

#[derive(Clone, Debug, Serialize)]
pub struct FeaturizeSummary {
    pub status: CacheStatus,
    pub pairs: usize,
    pub images: usize,
    pub rows: usize,
    pub fingerprint: String,
}

/// Compute all six feature vectors for every manifest pair and write the
/// feature and descriptor caches under `cfg.out`. A cache built with the
/// same fingerprint is reused; a different one is an error unless `force`.
pub fn featurize(cfg: &RunConfig, force: bool) -> Result<FeaturizeSummary> {
    let pairs = load_manifest(&cfg.corpus.join(MANIFEST))?;
    let fp = feature_fingerprint(cfg)?;
    let cache = cfg.out.join(FEATURES_FILE);
    match cache_fingerprint(&cache)? {
        Some(f) if f == fp && !force => {
            let rows = read_feature_cache(&cache, &fp)?.len();
            return Ok(FeaturizeSummary {
                status: CacheStatus::UpToDate,
                pairs: pairs.len(),
                images: 0,
                rows,
                fingerprint: fp,
            });
        }
        Some(f) if f != fp && !force => {
            return Err(Error::StaleCache(format!(
                "{} was built with config {f}, current config is {fp}; rerun with --force",
                cache.display()
            )))
        }
        _ => {}
    }
    let provider = match &cfg.provider {
        ProviderChoice::BuiltIn => EmbeddingProvider::BuiltIn,
        ProviderChoice::Sidecar(p) => EmbeddingProvider::load_sidecar(p)?,
    };
    let filter = match blank_model_path(cfg) {
        Some(p) => load_blank_filter(&p)?,
        None => BlankFilter::keep_all(),
    };

    let ids: Vec<&str> = pairs
        .iter()
        .flat_map(|p| [p.m.as_str(), p.r.as_str()])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let reps: Vec<ImageRep> = ids
        .par_iter()
        .map(|id| image_rep(&cfg.corpus, id, cfg, &provider, &filter))
        .collect::<Result<_>>()?;
    let by_id: HashMap<&str, &ImageRep> = reps.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut contexts = HashMap::new();
    for task in Task::ALL {
        let tp: Vec<&LabeledPair> = pairs.iter().filter(|p| p.task == task).collect();
        if tp.is_empty() {
            continue;
        }
        let memes: Vec<&ImageRep> = tp.iter().map(|p| p.m.as_str()).collect::<BTreeSet<_>>().iter().map(|id| by_id[id]).collect();
        let refs: Vec<&ImageRep> = tp.iter().map(|p| p.r.as_str()).collect::<BTreeSet<_>>().iter().map(|id| by_id[id]).collect();
        contexts.insert(task, TaskContexts::build(&memes, &refs)?);
    }

    let rows: Vec<SimilarityFeatures> = pairs
        .par_iter()
        .map(|p| {
            Measure::ALL
                .iter()
                .map(|&m| pair_features(&p.pair_id, m, by_id[p.m.as_str()], by_id[p.r.as_str()], &contexts[&p.task], &cfg.features))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let mut kpd = Vec::new();
    let records: Vec<(String, Vec<_>)> = reps.iter().map(|r| (r.id.clone(), r.descriptors.clone())).collect();
    write_descriptor_cache(&mut kpd, &records).map_err(|e| Error::io(DESCRIPTORS_FILE, e))?;
    write_if_changed(&cfg.out.join(DESCRIPTORS_FILE), &kpd)?;
    write_feature_cache(&cache, &rows, &fp)?;
    Ok(FeaturizeSummary {
        status: CacheStatus::Computed,
        pairs: pairs.len(),
        images: reps.len(),
        rows: rows.len(),
        fingerprint: fp,
    })
}

/// Per-measure feature tables, checking that every pair has every requested measure.
pub fn feature_tables(pairs: &[LabeledPair], rows: Vec<SimilarityFeatures>, measures: &[Measure]) -> Result<HashMap<Measure, FeatureTable>> {
    let mut tables: HashMap<Measure, FeatureTable> = measures.iter().map(|&m| (m, FeatureTable::new())).collect();
    for row in rows {
        if let Some(t) = tables.get_mut(&row.measure) {
            t.insert(row.pair_id, row.features);
        }
    }
    for &m in measures {
        let t = &tables[&m];
        if let Some(p) = pairs.iter().find(|p| !t.contains_key(&p.pair_id)) {
            return Err(Error::IncompleteGrid(format!("feature cache has no {m} row for pair {}", p.pair_id)));
        }
    }
    Ok(tables)
}

/// Split-based evaluation of every requested (task, measure); writes
/// `report.json` and `report.csv` under `cfg.out`.
pub fn evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let pairs = load_manifest(&cfg.corpus.join(MANIFEST))?;
    let fp = feature_fingerprint(cfg)?;
    let rows = read_feature_cache(&cfg.out.join(FEATURES_FILE), &fp)?;
    let tables = feature_tables(&pairs, rows, &cfg.measures)?;
    let mut results = Vec::new();
    for task in Task::ALL {
        let tp: Vec<LabeledPair> = pairs.iter().filter(|p| p.task == task).cloned().collect();
        if tp.is_empty() {
            continue;
        }
        let plan = make_splits(&tp, cfg.seed, cfg.n_splits, cfg.test_fraction)?;
        for &m in &cfg.measures {
            results.push(MeasureResult {
                task,
                measure: m,
                precision: evaluate_measure(&tp, m, &tables[&m], &plan, cfg.tree)?,
            });
        }
    }
    let mut header = cfg.result_entries();
    header.insert("feature_fingerprint".into(), fp);
    let report = compile_report(&results, header)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    write_if_changed(&cfg.out.join(REPORT_JSON), report.to_json().as_bytes())?;
    write_if_changed(&cfg.out.join(REPORT_CSV), report.to_csv().as_bytes())?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct BlankSummary {
    pub segments: usize,
    pub blank: usize,
    pub alpha: f64,
    /// Mean cross-validated non-blank precision at the chosen alpha.
    pub cv_precision: f64,
    pub leaves: usize,
    pub model: PathBuf,
}

/// Train the blank filter on a labelled segment set and write the model and
/// its cross-validation table under `cfg.out`.
pub fn train_blank(cfg: &RunConfig, labels: Option<&Path>) -> Result<BlankSummary> {
    let default_labels = cfg.corpus.join(BLANK_LABELS);
    let labels_path = labels.unwrap_or(&default_labels);
    let set = load_blank_set(labels_path)?;
    if set.is_empty() {
        return Err(Error::TooFewSamples("labelled segment set is empty".into()));
    }
    let feats = set
        .par_iter()
        .map(|(id, img, _)| {
            blank_features(&Segment {
                source: id.clone(),
                bbox: img.bounds(),
                pixels: img.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let y: Vec<usize> = set.iter().map(|s| s.2).collect();
    let trained = train_blank_filter(&feats, &y, cfg.folds, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let model = cfg.out.join(BLANK_MODEL_FILE);
    write_if_changed(&model, trained.filter.tree().to_json().as_bytes())?;
    let mut csv = String::from("alpha,fold,precision\n");
    for row in &trained.cv.table {
        let s = row.score.map_or(String::new(), |v| v.to_string());
        csv.push_str(&format!("{},{},{}\n", row.alpha, row.fold, s));
    }
    write_if_changed(&cfg.out.join(BLANK_CV_FILE), csv.as_bytes())?;
    Ok(BlankSummary {
        segments: set.len(),
        blank: y.iter().filter(|&&c| c == crate::panelseg::BLANK).count(),
        alpha: trained.cv.alpha,
        cv_precision: trained.cv.best_mean,
        leaves: trained.filter.tree().n_leaves(),
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusParams};

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.corpus = dir.join("data");
        cfg.out = dir.join("out");
        cfg.n_splits = 5;
        cfg.corpus_params = CorpusParams {
            n_templates: 8,
            n_elements: 4,
            n_pairs: 25,
            blank_segments: 40,
            ..CorpusParams::default()
        };
        generate_corpus(&cfg.corpus, &cfg.corpus_params).unwrap();
        cfg
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::io("x", std::io::Error::other("boom"))), 2);
        assert_eq!(exit_code(&Error::MissingFile("x".into())), 3);
        assert_eq!(exit_code(&Error::StaleCache("x".into())), 4);
        assert_eq!(exit_code(&Error::IncompleteGrid("x".into())), 5);
        assert_eq!(exit_code(&Error::TooFewSamples("x".into())), 6);
    }

    #[test]
    fn stages_chain_and_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny(dir.path());
        let blank = train_blank(&cfg, None).unwrap();
        assert_eq!(blank.segments, 40);
        assert!(cfg.out.join(BLANK_MODEL_FILE).is_file());
        let cv = std::fs::read_to_string(cfg.out.join(BLANK_CV_FILE)).unwrap();
        let rows = cv.lines().count() - 1;
        assert_eq!(rows % cfg.folds, 0);

        let s = featurize(&cfg, false).unwrap();
        assert_eq!(s.status, CacheStatus::Computed);
        assert_eq!(s.rows, 6 * s.pairs);
        let again = featurize(&cfg, false).unwrap();
        assert_eq!(again.status, CacheStatus::UpToDate);

        let report = evaluate(&cfg).unwrap();
        assert_eq!(report.distributions.len(), 12);
        assert_eq!(report.mann_whitney.len(), 6);
        assert_eq!(report.wilcoxon.len(), 2);
        let first = std::fs::read(cfg.out.join(REPORT_JSON)).unwrap();
        evaluate(&cfg).unwrap();
        assert_eq!(std::fs::read(cfg.out.join(REPORT_JSON)).unwrap(), first);

        cfg.measures = vec![Measure::EmbedW, Measure::HashW];
        assert_eq!(evaluate(&cfg).unwrap().distributions.len(), 4);

        cfg.orb.max_keypoints = 100;
        assert!(matches!(featurize(&cfg, false), Err(Error::StaleCache(_))));
        assert!(matches!(evaluate(&cfg), Err(Error::StaleCache(_))));
        assert_eq!(featurize(&cfg, true).unwrap().status, CacheStatus::Computed);
    }

    #[test]
    fn incomplete_cache_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let pairs = load_manifest(&cfg.corpus.join(MANIFEST)).unwrap();
        let rows: Vec<SimilarityFeatures> = pairs
            .iter()
            .skip(1)
            .map(|p| SimilarityFeatures {
                pair_id: p.pair_id.clone(),
                measure: Measure::HashW,
                features: vec![0.0, 1.0],
            })
            .collect();
        assert!(matches!(
            feature_tables(&pairs, rows, &[Measure::HashW]),
            Err(Error::IncompleteGrid(_))
        ));
    }

    #[test]
    fn missing_manifest_is_missing_input() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.corpus = dir.path().join("nothing");
        cfg.out = dir.path().join("out");
        let e = featurize(&cfg, false).unwrap_err();
        assert_eq!(exit_code(&e), 3);
    }
}
