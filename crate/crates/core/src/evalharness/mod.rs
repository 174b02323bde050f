//! Split-based evaluation of the pair classifiers and the report built from it.

pub mod stats;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{fit_tree, TreeParams};
use crate::error::{Error, Result};
use crate::simfeat::Measure;

pub use stats::{mann_whitney_u, wilcoxon_signed, MwuResult, PMethod, WilcoxonResult};

/// Class indices follow the sorted class names, so `related` is 0.
pub const RELATED: usize = 0;
pub const UNRELATED: usize = 1;
pub const PAIR_CLASS_NAMES: [&str; 2] = ["related", "unrelated"];

pub const REPORT_FORMAT: &str = "memematch-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "MM")]
    Mm,
    #[serde(rename = "TM")]
    Tm,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Mm, Task::Tm];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mm => "MM",
            Task::Tm => "TM",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MM" => Ok(Task::Mm),
            "TM" => Ok(Task::Tm),
            _ => Err(Error::Parse(format!("unknown task `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Related,
    Unrelated,
}

impl Label {
    pub fn class(self) -> usize {
        match self {
            Label::Related => RELATED,
            Label::Unrelated => UNRELATED,
        }
    }
}

/// One manifest row; `m` and `r` are paths relative to the corpus root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPair {
    pub pair_id: String,
    pub m: String,
    pub r: String,
    pub label: Label,
    pub task: Task,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// Indices into the pair list, ascending.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub n_splits: usize,
    pub test_fraction: f64,
    pub splits: Vec<SplitAssignment>,
}

/// Stratified random splits; split `j` shuffles each class with the stream
/// seeded by `seed ^ j` and sends the first `round(fraction * n_class)`
/// members (at least one, at most `n_class - 1`) to the test side.
pub fn make_splits(pairs: &[LabeledPair], seed: u64, n_splits: usize, test_fraction: f64) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test fraction {test_fraction} is not in (0, 1)")));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, p) in pairs.iter().enumerate() {
        by_class[p.label.class()].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::TooFewPerClass(format!(
                "{} has {} pairs",
                PAIR_CLASS_NAMES[c],
                members.len()
            )));
        }
    }
    let splits = (0..n_splits)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ j as u64);
            let mut train = Vec::new();
            let mut test = Vec::new();
            for members in &by_class {
                let mut shuffled = members.clone();
                shuffled.shuffle(&mut rng);
                let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len() - 1);
                test.extend_from_slice(&shuffled[..n_test]);
                train.extend_from_slice(&shuffled[n_test..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            SplitAssignment { train, test }
        })
        .collect();
    Ok(SplitPlan {
        seed,
        n_splits,
        test_fraction,
        splits,
    })
}

/// Precision on the related class; `None` when nothing is predicted related.
pub fn precision_related(predictions: &[usize], truths: &[usize]) -> Result<Option<f64>> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::EmptySample);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    for (&p, &t) in predictions.iter().zip(truths) {
        if p == RELATED {
            if t == RELATED {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok((tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64))
}

/// Feature vectors of one measure keyed by pair id.
pub type FeatureTable = HashMap<String, Vec<f64>>;

/// Train an unpruned tree on each split's train side and score its test side.
pub fn evaluate_measure(
    pairs: &[LabeledPair],
    measure: Measure,
    features: &FeatureTable,
    plan: &SplitPlan,
    params: TreeParams,
) -> Result<Vec<Option<f64>>> {
    let x: Vec<&Vec<f64>> = pairs
        .iter()
        .map(|p| {
            features.get(&p.pair_id).ok_or_else(|| Error::MissingFeatures {
                pair_id: p.pair_id.clone(),
                measure: measure.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    let y: Vec<usize> = pairs.iter().map(|p| p.label.class()).collect();
    plan.splits
        .par_iter()
        .map(|split| {
            let xt: Vec<Vec<f64>> = split.train.iter().map(|&i| x[i].clone()).collect();
            let yt: Vec<usize> = split.train.iter().map(|&i| y[i]).collect();
            let tree = fit_tree(&xt, &yt, params)?;
            let preds = split
                .test
                .iter()
                .map(|&i| tree.predict(x[i]))
                .collect::<Result<Vec<_>>>()?;
            let truth: Vec<usize> = split.test.iter().map(|&i| y[i]).collect();
            precision_related(&preds, &truth)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureResult {
    pub task: Task,
    pub measure: Measure,
    pub precision: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub task: Task,
    pub measure: Measure,
    pub precision: Vec<Option<f64>>,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 with a single defined value.
    pub std: f64,
    pub median: f64,
    pub undefined_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MwuEntry {
    pub comparison: String,
    pub measure: Measure,
    pub u: f64,
    pub p_value: f64,
    pub method: PMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonEntry {
    pub comparison: String,
    pub task: Task,
    pub a: Measure,
    pub b: Measure,
    pub w_plus: f64,
    pub p_value: f64,
    pub method: Option<PMethod>,
    /// Splits where both precisions are defined and differ.
    pub n: usize,
    pub zeros: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    /// Effective run configuration.
    pub config: BTreeMap<String, String>,
    pub distributions: Vec<Distribution>,
    pub mann_whitney: Vec<MwuEntry>,
    pub wilcoxon: Vec<WilcoxonEntry>,
}

impl EvalReport {
    pub fn distribution(&self, task: Task, measure: Measure) -> Option<&Distribution> {
        self.distributions.iter().find(|d| d.task == task && d.measure == measure)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Flat `task,measure,split,precision` rows; undefined precision is empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,measure,split,precision\n");
        for d in &self.distributions {
            for (j, p) in d.precision.iter().enumerate() {
                let v = p.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{},{},{},{}\n", d.task, d.measure, j, v));
            }
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summarize(r: &MeasureResult) -> Result<Distribution> {
    let defined: Vec<f64> = r.precision.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::IncompleteGrid(format!(
            "{} / {} has no defined precision",
            r.task, r.measure
        )));
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let std = if defined.len() > 1 {
        (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(Distribution {
        task: r.task,
        measure: r.measure,
        precision: r.precision.clone(),
        mean,
        std,
        median: median(&defined),
        undefined_count: r.precision.len() - defined.len(),
    })
}

/// Segment-wise vs whole-image pairings tested within MM.
pub const SEGMENT_VS_WHOLE: [(Measure, Measure); 2] = [(Measure::EmbedS, Measure::EmbedW), (Measure::HashS, Measure::HashW)];

/// Distributions for every (task, measure), MM-vs-TM Mann-Whitney tests per
/// measure and segment-vs-whole Wilcoxon tests within MM paired by split.
pub fn compile_report(results: &[MeasureResult], config: BTreeMap<String, String>) -> Result<EvalReport> {
    let mut results: Vec<&MeasureResult> = results.iter().collect();
    results.sort_by_key(|r| (r.task, r.measure));
    let tasks: Vec<Task> = Task::ALL
        .into_iter()
        .filter(|t| results.iter().any(|r| r.task == *t))
        .collect();
    let measures: Vec<Measure> = Measure::ALL
        .into_iter()
        .filter(|m| results.iter().any(|r| r.measure == *m))
        .collect();
    let mut seen = HashSet::new();
    for r in &results {
        if !seen.insert((r.task, r.measure)) {
            return Err(Error::IncompleteGrid(format!("{} / {} given twice", r.task, r.measure)));
        }
    }
    for &t in &tasks {
        for &m in &measures {
            if !seen.contains(&(t, m)) {
                return Err(Error::IncompleteGrid(format!("{t} / {m} missing")));
            }
        }
    }
    let distributions = results.iter().map(|r| summarize(r)).collect::<Result<Vec<_>>>()?;
    let find = |t: Task, m: Measure| distributions.iter().find(|d| d.task == t && d.measure == m);

    let mut mann_whitney = Vec::new();
    if tasks.len() == 2 {
        for &m in &measures {
            let (Some(mm), Some(tm)) = (find(Task::Mm, m), find(Task::Tm, m)) else {
                continue;
            };
            let a: Vec<f64> = mm.precision.iter().flatten().copied().collect();
            let b: Vec<f64> = tm.precision.iter().flatten().copied().collect();
            let r = mann_whitney_u(&a, &b)?;
            mann_whitney.push(MwuEntry {
                comparison: format!("{m}:MM_vs_TM"),
                measure: m,
                u: r.u,
                p_value: r.p_two_sided,
                method: r.method,
            });
        }
    }

    let mut wilcoxon = Vec::new();
    for (seg, whole) in SEGMENT_VS_WHOLE {
        let (Some(s), Some(w)) = (find(Task::Mm, seg), find(Task::Mm, whole)) else {
            continue;
        };
        let (a, b): (Vec<f64>, Vec<f64>) = s
            .precision
            .iter()
            .zip(&w.precision)
            .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
            .unzip();
        let entry = match wilcoxon_signed(&a, &b) {
            Ok(r) => WilcoxonEntry {
                comparison: format!("MM:{seg}_vs_{whole}"),
                task: Task::Mm,
                a: seg,
                b: whole,
                w_plus: r.w_plus,
                p_value: r.p_two_sided,
                method: Some(r.method),
                n: r.n,
                zeros: r.zeros,
            },
            Err(Error::AllZeroDifferences) => WilcoxonEntry {
                comparison: format!("MM:{seg}_vs_{whole}"),
                task: Task::Mm,
                a: seg,
                b: whole,
                w_plus: 0.0,
                p_value: 1.0,
                method: None,
                n: 0,
                zeros: a.len(),
            },
            Err(e) => return Err(e),
        };
        wilcoxon.push(entry);
    }

    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        config,
        distributions,
        mann_whitney,
        wilcoxon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pairs(n: usize, n_related: usize) -> Vec<LabeledPair> {
        (0..n)
            .map(|i| LabeledPair {
                pair_id: format!("p{i:03}"),
                m: format!("memes/m{i}.png"),
                r: format!("refs/r{}.png", i % 7),
                label: if i < n_related { Label::Related } else { Label::Unrelated },
                task: Task::Mm,
            })
            .collect()
    }

    #[test]
    fn stratified_split_arithmetic() {
        let ps = pairs(100, 20);
        let plan = make_splits(&ps, 42, 50, 0.2).unwrap();
        assert_eq!(plan.splits.len(), 50);
        for s in &plan.splits {
            let rel = s.test.iter().filter(|&&i| ps[i].label == Label::Related).count();
            assert_eq!((rel, s.test.len()), (4, 20));
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        let distinct: HashSet<&Vec<usize>> = plan.splits.iter().map(|s| &s.test).collect();
        assert_eq!(distinct.len(), 50);
        assert_eq!(make_splits(&ps, 42, 50, 0.2).unwrap(), plan);
        assert_ne!(make_splits(&ps, 43, 50, 0.2).unwrap(), plan);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(make_splits(&pairs(10, 1), 0, 5, 0.2), Err(Error::TooFewPerClass(_))));
        assert!(make_splits(&pairs(10, 3), 0, 5, 1.0).is_err());
    }

    #[test]
    fn precision_by_hand() {
        let (r, u) = (RELATED, UNRELATED);
        assert_eq!(precision_related(&[r, r, r, r], &[r, u, r, u]).unwrap(), Some(0.5));
        assert_eq!(precision_related(&[u, u], &[r, u]).unwrap(), None);
        assert_eq!(precision_related(&[r, r, u], &[r, u, u]).unwrap(), Some(0.5));
        assert!(matches!(precision_related(&[r], &[r, u]), Err(Error::LengthMismatch(1, 2))));
    }

    #[test]
    fn separable_features_give_perfect_precision() {
        let ps = pairs(100, 20);
        let table: FeatureTable = ps
            .iter()
            .map(|p| {
                let v = if p.label == Label::Related { 1.0 } else { 5.0 };
                (p.pair_id.clone(), vec![v, 0.3])
            })
            .collect();
        let plan = make_splits(&ps, 1, 50, 0.2).unwrap();
        let got = evaluate_measure(&ps, Measure::HashW, &table, &plan, TreeParams::default()).unwrap();
        assert_eq!(got, vec![Some(1.0); 50]);
        assert_eq!(evaluate_measure(&ps, Measure::HashW, &table, &plan, TreeParams::default()).unwrap(), got);
    }

    #[test]
    fn shuffled_labels_give_prevalence() {
        let ps = pairs(500, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let table: FeatureTable = ps
            .iter()
            .map(|p| (p.pair_id.clone(), vec![rng.gen::<f64>(), rng.gen::<f64>()]))
            .collect();
        let plan = make_splits(&ps, 2, 50, 0.2).unwrap();
        let got = evaluate_measure(&ps, Measure::EmbedW, &table, &plan, TreeParams::default()).unwrap();
        let defined: Vec<f64> = got.iter().flatten().copied().collect();
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        assert!((mean - 0.2).abs() <= 0.1, "mean {mean}");
    }

    #[test]
    fn missing_features_reported() {
        let ps = pairs(10, 3);
        let plan = make_splits(&ps, 2, 2, 0.2).unwrap();
        let table = FeatureTable::new();
        assert!(matches!(
            evaluate_measure(&ps, Measure::KeypointD, &table, &plan, TreeParams::default()),
            Err(Error::MissingFeatures { .. })
        ));
    }

    fn grid(seed: u64) -> Vec<MeasureResult> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for task in Task::ALL {
            for measure in Measure::ALL {
                let precision = (0..50)
                    .map(|_| if rng.gen_bool(0.05) { None } else { Some(rng.gen::<f64>()) })
                    .collect();
                out.push(MeasureResult { task, measure, precision });
            }
        }
        out
    }

    #[test]
    fn full_grid_report_shape() {
        let mut cfg = BTreeMap::new();
        cfg.insert("seed".to_string(), "42".to_string());
        let rep = compile_report(&grid(3), cfg).unwrap();
        assert_eq!(rep.distributions.len(), 12);
        assert_eq!(rep.mann_whitney.len(), 6);
        assert_eq!(rep.wilcoxon.len(), 2);
        let back = EvalReport::from_json(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
        assert_eq!(back.to_json(), rep.to_json());
        assert_eq!(rep.to_csv().lines().count(), 1 + 12 * 50);
        for d in &rep.distributions {
            assert_eq!(d.undefined_count, d.precision.iter().filter(|p| p.is_none()).count());
        }
        assert!(rep.mann_whitney.iter().all(|m| (0.0..=1.0).contains(&m.p_value)));
    }

    #[test]
    fn report_grid_errors() {
        let mut g = grid(4);
        g[3].precision = vec![None; 50];
        assert!(matches!(compile_report(&g, BTreeMap::new()), Err(Error::IncompleteGrid(_))));
        let mut g = grid(4);
        g.remove(7);
        assert!(matches!(compile_report(&g, BTreeMap::new()), Err(Error::IncompleteGrid(_))));
        let g: Vec<MeasureResult> = grid(4)
            .into_iter()
            .filter(|r| matches!(r.measure, Measure::EmbedW | Measure::HashW))
            .collect();
        let rep = compile_report(&g, BTreeMap::new()).unwrap();
        assert_eq!((rep.distributions.len(), rep.mann_whitney.len(), rep.wilcoxon.len()), (4, 2, 0));
    }

    #[test]
    fn manifest_row_format() {
        let p = &pairs(1, 1)[0];
        let js = serde_json::to_string(p).unwrap();
        assert_eq!(
            js,
            r#"{"pair_id":"p000","m":"memes/m0.png","r":"refs/r0.png","label":"related","task":"MM"}"#
        );
        assert!(serde_json::from_str::<LabeledPair>(&js.replace("related", "maybe")).is_err());
        assert!(serde_json::from_str::<LabeledPair>(&js.replace("}", r#","extra":1}"#)).is_err());
    }

    proptest! {
        #[test]
        fn stratification_within_one(n_rel in 2usize..40, n_un in 2usize..120, frac in 0.05f64..0.6, seed in any::<u64>()) {
            let mut ps = pairs(n_rel + n_un, n_rel);
            ps.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let plan = make_splits(&ps, seed, 5, frac).unwrap();
            let overall = n_rel as f64 / (n_rel + n_un) as f64;
            for s in &plan.splits {
                let rel = s.test.iter().filter(|&&i| ps[i].label == Label::Related).count() as f64;
                prop_assert!((rel - overall * s.test.len() as f64).abs() <= 1.0 + 1e-9);
                let train: HashSet<usize> = s.train.iter().copied().collect();
                prop_assert!(s.test.iter().all(|i| !train.contains(i)));
                prop_assert_eq!(s.train.len() + s.test.len(), ps.len());
            }
        }

        #[test]
        fn evaluation_length_and_range(seed in any::<u64>()) {
            let ps = pairs(40, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let table: FeatureTable = ps.iter().map(|p| (p.pair_id.clone(), vec![rng.gen_range(0.0..3.0)])).collect();
            let plan = make_splits(&ps, seed, 7, 0.25).unwrap();
            let got = evaluate_measure(&ps, Measure::HashW, &table, &plan, TreeParams::default()).unwrap();
            prop_assert_eq!(got.len(), 7);
            prop_assert!(got.iter().flatten().all(|p| (0.0..=1.0).contains(p)));
        }
    }
}
