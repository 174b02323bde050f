//! CART classification trees with Gini splits and minimal cost-complexity
//! pruning.
//!
//! Labels are class indices `0..n_classes`. Prediction ties resolve to the
//! lower index, so callers order class names lexicographically.

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MODEL_FORMAT: &str = "memematch-cart";
pub const MODEL_VERSION: u32 = 1;

/// Cost-complexity pruning groups nodes whose weakest-link values differ by less than this.
const ALPHA_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            min_samples_leaf: 1,
            max_depth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct Node<T> {
    /// Training samples per class that reached this node.
    pub counts: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split<T> {
    pub feature: usize,
    pub threshold: T,
    pub left: usize,
    pub right: usize,
}

impl<T> Node<T> {
    pub fn is_leaf(&self) -> bool {
        self.split.is_none()
    }

    /// Majority class, lowest index on ties.
    pub fn label(&self) -> usize {
        majority(&self.counts)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

/// Binary classification tree stored as a preorder node arena (root at 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: DeserializeOwned"))]
pub struct DecisionTree<T = f64> {
    pub format: String,
    pub version: u32,
    pub n_features: usize,
    pub n_classes: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_names: Vec<String>,
    pub params: TreeParams,
    pub nodes: Vec<Node<T>>,
}

impl<T: Real> DecisionTree<T> {
    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_leaf()).count()
    }

    pub fn depth(&self) -> usize {
        fn walk<T>(nodes: &[Node<T>], i: usize) -> usize {
            match &nodes[i].split {
                None => 0,
                Some(s) => 1 + walk(nodes, s.left).max(walk(nodes, s.right)),
            }
        }
        if self.nodes.is_empty() {
            0
        } else {
            walk(&self.nodes, 0)
        }
    }

    pub fn predict(&self, x: &[T]) -> Result<usize> {
        if self.nodes.is_empty() {
            return Err(Error::ModelUntrained);
        }
        if x.len() != self.n_features {
            return Err(Error::DimMismatch {
                expected: format!("{} features", self.n_features),
                got: format!("{} features", x.len()),
            });
        }
        let mut i = 0;
        while let Some(s) = &self.nodes[i].split {
            i = if x[s.feature] <= s.threshold { s.left } else { s.right };
        }
        Ok(self.nodes[i].label())
    }

    pub fn predict_many(&self, xs: &[Vec<T>]) -> Result<Vec<usize>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn with_class_names(mut self, names: &[&str]) -> Self {
        self.class_names = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

impl<T: Real + Serialize + DeserializeOwned> DecisionTree<T> {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("tree serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tree: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        if tree.format != MODEL_FORMAT || tree.version != MODEL_VERSION {
            return Err(Error::Parse(format!(
                "unsupported model {} v{}",
                tree.format, tree.version
            )));
        }
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::ModelUntrained);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.counts.len() != self.n_classes || node.total() == 0 {
                return Err(Error::Parse(format!("node {i} has bad class counts")));
            }
            if let Some(s) = &node.split {
                if s.left <= i || s.right <= i || s.left >= n || s.right >= n {
                    return Err(Error::Parse(format!("node {i} is not in preorder")));
                }
                if s.feature >= self.n_features {
                    return Err(Error::Parse(format!("node {i} splits on a missing feature")));
                }
            }
        }
        Ok(())
    }
}

/// Grow an unpruned CART tree.
///
/// Candidate thresholds are midpoints between consecutive distinct values.
/// Among splits with equal impurity decrease the lower feature index, then
/// the lower threshold, wins. Impure nodes split even when the best decrease
/// is zero, so training data without conflicting duplicates is fit exactly.
pub fn fit_tree<T: Real>(x: &[Vec<T>], y: &[usize], params: TreeParams) -> Result<DecisionTree<T>> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyData);
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let n_features = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != n_features) {
        return Err(Error::DimMismatch {
            expected: format!("{n_features} features"),
            got: format!("{} features", row.len()),
        });
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Parse("non-finite feature value".into()));
    }
    let n_classes = (y.iter().copied().max().unwrap_or(0) + 1).max(2);
    let min_leaf = params.min_samples_leaf.max(1);

    let sorted: Vec<Vec<usize>> = (0..n_features)
        .map(|f| {
            let mut idx: Vec<usize> = (0..x.len()).collect();
            idx.sort_by(|&a, &b| {
                x[a][f]
                    .partial_cmp(&x[b][f])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();

    let mut builder = Builder {
        x,
        y,
        n_classes,
        min_leaf,
        max_depth: params.max_depth,
        nodes: Vec::new(),
        side: vec![false; x.len()],
    };
    let members: Vec<usize> = (0..x.len()).collect();
    builder.grow(&members, sorted, 0);
    Ok(DecisionTree {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        n_features,
        n_classes,
        class_names: Vec::new(),
        params,
        nodes: builder.nodes,
    })
}

struct Builder<'a, T> {
    x: &'a [Vec<T>],
    y: &'a [usize],
    n_classes: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    nodes: Vec<Node<T>>,
    side: Vec<bool>,
}

struct Candidate<T> {
    feature: usize,
    threshold: T,
    // child score sum(c_l^2)/n_l + sum(c_r^2)/n_r as an exact fraction
    num: u128,
    den: u128,
}

impl<T: Real> Builder<'_, T> {
    fn grow(&mut self, members: &[usize], sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let mut counts = vec![0usize; self.n_classes];
        for &i in members {
            counts[self.y[i]] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            counts: counts.clone(),
            split: None,
        });

        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = self.max_depth.is_some_and(|d| depth >= d);
        if pure || depth_capped || members.len() < 2 * self.min_leaf {
            return id;
        }
        let Some(best) = self.best_split(&sorted, &counts) else {
            return id;
        };

        let (f, thr) = (best.feature, best.threshold);
        for &i in members {
            self.side[i] = self.x[i][f] <= thr;
        }
        let (left_members, right_members): (Vec<usize>, Vec<usize>) =
            members.iter().partition(|&&i| self.side[i]);
        let mut left_sorted = Vec::with_capacity(sorted.len());
        let mut right_sorted = Vec::with_capacity(sorted.len());
        for list in sorted {
            let (l, r): (Vec<usize>, Vec<usize>) = list.into_iter().partition(|&i| self.side[i]);
            left_sorted.push(l);
            right_sorted.push(r);
        }
        let left = self.grow(&left_members, left_sorted, depth + 1);
        let right = self.grow(&right_members, right_sorted, depth + 1);
        self.nodes[id].split = Some(Split {
            feature: f,
            threshold: thr,
            left,
            right,
        });
        id
    }

    fn best_split(&self, sorted: &[Vec<usize>], counts: &[usize]) -> Option<Candidate<T>> {
        let n = counts.iter().sum::<usize>();
        let mut best: Option<Candidate<T>> = None;
        let mut left = vec![0usize; self.n_classes];
        for (f, order) in sorted.iter().enumerate() {
            left.iter_mut().for_each(|c| *c = 0);
            for k in 0..order.len().saturating_sub(1) {
                let i = order[k];
                left[self.y[i]] += 1;
                let nl = k + 1;
                let nr = n - nl;
                if nl < self.min_leaf {
                    continue;
                }
                if nr < self.min_leaf {
                    break;
                }
                let (a, b) = (self.x[i][f], self.x[order[k + 1]][f]);
                if !(a < b) {
                    continue;
                }
                let sl: u128 = left.iter().map(|&c| (c * c) as u128).sum();
                let sr: u128 = left
                    .iter()
                    .zip(counts)
                    .map(|(&l, &t)| ((t - l) * (t - l)) as u128)
                    .sum();
                let num = sl * nr as u128 + sr * nl as u128;
                let den = (nl * nr) as u128;
                let better = match &best {
                    None => true,
                    Some(c) => num * c.den > c.num * den,
                };
                if better {
                    best = Some(Candidate {
                        feature: f,
                        threshold: midpoint(a, b),
                        num,
                        den,
                    });
                }
            }
        }
        best
    }
}

fn midpoint<T: Real>(a: T, b: T) -> T {
    let m = a + (b - a) / T::lit(2.0);
    if m >= b || m < a {
        a
    } else {
        m
    }
}

/// Nested subtrees from minimal cost-complexity pruning, with their effective alphas.
#[derive(Clone, Debug)]
pub struct PruneSequence<T = f64> {
    pub alphas: Vec<f64>,
    pub trees: Vec<DecisionTree<T>>,
}

impl<T: Real> PruneSequence<T> {
    /// Subtree for complexity parameter `alpha`: the last tree whose alpha is `<= alpha`.
    pub fn tree_for(&self, alpha: f64) -> &DecisionTree<T> {
        let k = self
            .alphas
            .iter()
            .rposition(|&a| a <= alpha + ALPHA_EPS)
            .unwrap_or(0);
        &self.trees[k]
    }
}

/// Weakest-link pruning sequence, ending at the root leaf.
///
/// Node cost is the class-count Gini impurity weighted by the fraction of
/// training samples reaching the node.
pub fn mccp_sequence<T: Real>(tree: &DecisionTree<T>) -> PruneSequence<T> {
    let total = tree.nodes[0].total() as f64;
    let cost: Vec<f64> = tree
        .nodes
        .iter()
        .map(|n| gini(&n.counts) * n.total() as f64 / total)
        .collect();
    let mut collapsed = vec![false; tree.nodes.len()];
    let mut alphas: Vec<f64> = vec![0.0];
    let mut trees = vec![tree.clone()];

    loop {
        let links = weakest_links(tree, &collapsed, &cost);
        let Some(min_g) = links.iter().map(|&(_, g)| g).min_by(f64::total_cmp) else {
            break;
        };
        for &(node, g) in &links {
            if g <= min_g + ALPHA_EPS {
                collapsed[node] = true;
            }
        }
        let pruned = materialize(tree, &collapsed);
        let last = *alphas.last().expect("non-empty");
        if min_g <= last + ALPHA_EPS {
            *trees.last_mut().expect("non-empty") = pruned;
        } else {
            alphas.push(min_g);
            trees.push(pruned);
        }
    }
    PruneSequence { alphas, trees }
}

// (node, g(node)) for every internal node of the current pruned tree
fn weakest_links<T>(tree: &DecisionTree<T>, collapsed: &[bool], cost: &[f64]) -> Vec<(usize, f64)> {
    fn walk<T>(
        tree: &DecisionTree<T>,
        collapsed: &[bool],
        cost: &[f64],
        i: usize,
        out: &mut Vec<(usize, f64)>,
    ) -> (f64, usize) {
        match &tree.nodes[i].split {
            Some(s) if !collapsed[i] => {
                let (rl, ll) = walk(tree, collapsed, cost, s.left, out);
                let (rr, lr) = walk(tree, collapsed, cost, s.right, out);
                let (r_sub, leaves) = (rl + rr, ll + lr);
                let g = (cost[i] - r_sub) / (leaves as f64 - 1.0);
                out.push((i, g.max(0.0)));
                (r_sub, leaves)
            }
            _ => (cost[i], 1),
        }
    }
    let mut out = Vec::new();
    walk(tree, collapsed, cost, 0, &mut out);
    out
}

fn materialize<T: Real>(tree: &DecisionTree<T>, collapsed: &[bool]) -> DecisionTree<T> {
    fn copy<T: Real>(src: &[Node<T>], collapsed: &[bool], i: usize, out: &mut Vec<Node<T>>) -> usize {
        let id = out.len();
        out.push(Node {
            counts: src[i].counts.clone(),
            split: None,
        });
        if let Some(s) = &src[i].split {
            if !collapsed[i] {
                let left = copy(src, collapsed, s.left, out);
                let right = copy(src, collapsed, s.right, out);
                out[id].split = Some(Split {
                    feature: s.feature,
                    threshold: s.threshold,
                    left,
                    right,
                });
            }
        }
        id
    }
    let mut nodes = Vec::new();
    copy(&tree.nodes, collapsed, 0, &mut nodes);
    DecisionTree {
        nodes,
        ..tree.clone()
    }
}

/// What cross-validation maximizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Precision of the given class; folds with no predictions of it score 0.
    Precision(usize),
    Accuracy,
}

impl Objective {
    /// `None` when precision is undefined (nothing predicted as the class).
    pub fn score(&self, pred: &[usize], truth: &[usize]) -> Option<f64> {
        match *self {
            Objective::Precision(c) => {
                let predicted = pred.iter().filter(|&&p| p == c).count();
                if predicted == 0 {
                    return None;
                }
                let tp = pred.iter().zip(truth).filter(|(&p, &t)| p == c && t == c).count();
                Some(tp as f64 / predicted as f64)
            }
            Objective::Accuracy => {
                if pred.is_empty() {
                    return None;
                }
                let hit = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
                Some(hit as f64 / pred.len() as f64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub alpha: f64,
    pub fold: usize,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub alpha: f64,
    pub best_mean: f64,
    /// One row per (candidate alpha, fold).
    pub table: Vec<CvRow>,
}

/// Stratified k-fold assignment: each class is shuffled, the class lists are
/// concatenated, and sample `i` of that order goes to fold `i % k`.
pub fn stratified_folds(y: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_classes = y.iter().copied().max().map_or(0, |m| m + 1);
    let mut fold = vec![0; y.len()];
    let mut pos = 0;
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..y.len()).filter(|&i| y[i] == c).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            fold[i] = pos % k;
            pos += 1;
        }
    }
    fold
}

/// Choose the pruning alpha by stratified k-fold cross-validation.
///
/// Candidates are 0, the geometric midpoints of consecutive pooled per-fold
/// alphas and the largest pooled alpha. The mean objective over folds is
/// maximized; ties go to the larger alpha.
pub fn cv_select_alpha<T: Real>(
    x: &[Vec<T>],
    y: &[usize],
    k: usize,
    objective: Objective,
    params: TreeParams,
    seed: u64,
) -> Result<CvOutcome> {
    if k < 2 || x.len() < k {
        return Err(Error::TooFewSamples(format!("{} samples for {k} folds", x.len())));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let folds = stratified_folds(y, k, seed);
    let mut per_fold = Vec::with_capacity(k);
    for f in 0..k {
        let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
        for i in 0..x.len() {
            if folds[i] == f {
                vx.push(x[i].clone());
                vy.push(y[i]);
            } else {
                tx.push(x[i].clone());
                ty.push(y[i]);
            }
        }
        let tree = fit_tree(&tx, &ty, params)?;
        per_fold.push((mccp_sequence(&tree), vx, vy));
    }

    let mut pooled: Vec<f64> = per_fold.iter().flat_map(|(s, _, _)| s.alphas.clone()).collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup_by(|a, b| (*a - *b).abs() <= ALPHA_EPS);
    let mut candidates = vec![0.0];
    for w in pooled.windows(2) {
        let m = (w[0] * w[1]).sqrt();
        if m > ALPHA_EPS {
            candidates.push(m);
        }
    }
    if let Some(&last) = pooled.last() {
        if last > 0.0 {
            candidates.push(last);
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut table = Vec::with_capacity(candidates.len() * k);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for &alpha in &candidates {
        let mut sum = 0.0;
        for (f, (seq, vx, vy)) in per_fold.iter().enumerate() {
            let pred = seq.tree_for(alpha).predict_many(vx)?;
            let score = objective.score(&pred, vy);
            sum += score.unwrap_or(0.0);
            table.push(CvRow { alpha, fold: f, score });
        }
        let mean = sum / k as f64;
        if mean >= best.0 {
            best = (mean, alpha);
        }
    }
    Ok(CvOutcome {
        alpha: best.1,
        best_mean: best.0,
        table,
    })
}

/// Fit, then prune to `alpha` using the tree's own pruning sequence.
pub fn fit_pruned<T: Real>(x: &[Vec<T>], y: &[usize], params: TreeParams, alpha: f64) -> Result<DecisionTree<T>> {
    let full = fit_tree(x, y, params)?;
    Ok(mccp_sequence(&full).tree_for(alpha).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    // Independent recursive evaluator over the raw node list.
    fn walk_predict(nodes: &[Node<f64>], i: usize, x: &[f64]) -> usize {
        match &nodes[i].split {
            None => {
                let c = &nodes[i].counts;
                let max = *c.iter().max().unwrap();
                c.iter().position(|&v| v == max).unwrap()
            }
            Some(s) => {
                if x[s.feature] <= s.threshold {
                    walk_predict(nodes, s.left, x)
                } else {
                    walk_predict(nodes, s.right, x)
                }
            }
        }
    }

    // Exhaustive root split: every midpoint, weighted Gini by direct formula.
    fn brute_root_split(x: &[f64], y: &[usize]) -> Option<(f64, f64)> {
        let mut vals: Vec<f64> = x.to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let mut best: Option<(f64, f64)> = None;
        for w in vals.windows(2) {
            let t = (w[0] + w[1]) / 2.0;
            let side = |left: bool| {
                let ys: Vec<usize> = x
                    .iter()
                    .zip(y)
                    .filter(|(&v, _)| (v <= t) == left)
                    .map(|(_, &c)| c)
                    .collect();
                let n = ys.len() as f64;
                let p = ys.iter().filter(|&&c| c == 1).count() as f64 / n;
                n * (1.0 - p * p - (1.0 - p) * (1.0 - p))
            };
            let imp = side(true) + side(false);
            if best.is_none_or(|(_, b)| imp < b - 1e-9) {
                best = Some((t, imp));
            }
        }
        best
    }

    #[test]
    fn separable_pair_is_stump() {
        let t = fit_tree(&[vec![0.0], vec![1.0]], &[1, 0], TreeParams::default()).unwrap();
        assert_eq!(t.nodes.len(), 3);
        assert_eq!(t.nodes[0].split.as_ref().unwrap().threshold, 0.5);
        assert_eq!(t.predict(&[0.0]).unwrap(), 1);
        assert_eq!(t.predict(&[1.0]).unwrap(), 0);
        assert_eq!(t.predict(&[0.2]).unwrap(), 1);
    }

    #[test]
    fn pure_labels_make_leaf() {
        let t = fit_tree(&[vec![0.0], vec![1.0], vec![3.0]], &[1, 1, 1], TreeParams::default()).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict(&[100.0]).unwrap(), 1);
    }

    #[test]
    fn errors() {
        let e: Vec<Vec<f64>> = vec![];
        assert!(matches!(fit_tree(&e, &[], TreeParams::default()), Err(Error::EmptyData)));
        assert!(matches!(
            fit_tree(&[vec![0.0], vec![1.0, 2.0]], &[0, 1], TreeParams::default()),
            Err(Error::DimMismatch { .. })
        ));
        let t = fit_tree(&[vec![0.0], vec![1.0]], &[1, 0], TreeParams::default()).unwrap();
        assert!(matches!(t.predict(&[0.0, 1.0]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn xor_is_fit_exactly() {
        let x = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = vec![0, 1, 1, 0];
        let t = fit_tree(&x, &y, TreeParams::default()).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(t.predict(xi).unwrap(), yi);
        }
    }

    #[test]
    fn root_split_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..20).map(|_| rng.gen_range(0..40) as f64 / 4.0).collect();
            let y: Vec<usize> = x.iter().map(|&v| usize::from(v + rng.gen_range(-3.0..3.0) > 5.0)).collect();
            let t = fit_tree(&x.iter().map(|&v| vec![v]).collect::<Vec<_>>(), &y, TreeParams::default()).unwrap();
            match (brute_root_split(&x, &y), &t.nodes[0].split) {
                (Some((thr, _)), Some(s)) if y.iter().any(|&c| c != y[0]) => assert_eq!(s.threshold, thr),
                (_, None) => assert!(y.iter().all(|&c| c == y[0])),
                _ => {}
            }
        }
    }

    #[test]
    fn single_leaf_prune_sequence() {
        let t = fit_tree(&[vec![0.0], vec![1.0]], &[1, 1], TreeParams::default()).unwrap();
        let s = mccp_sequence(&t);
        assert_eq!(s.alphas, vec![0.0]);
        assert_eq!(s.trees, vec![t]);
    }

    #[test]
    fn stump_prune_sequence_by_hand() {
        // 4 points, 2 per class, perfectly split: R(root) = 0.5 * 4/4, R(leaves) = 0
        // g(root) = (0.5 - 0) / (2 - 1) = 0.5
        let x = vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0]];
        let y = vec![0, 0, 1, 1];
        let t = fit_tree(&x, &y, TreeParams::default()).unwrap();
        let s = mccp_sequence(&t);
        assert_eq!(s.alphas, vec![0.0, 0.5]);
        assert_eq!(s.trees[0], t);
        assert_eq!(s.trees[1].nodes.len(), 1);
    }

    #[test]
    fn separable_cv_picks_zero() {
        // classes separated by a wide gap so every fold's threshold generalizes
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![if i >= 28 { i as f64 + 100.0 } else { i as f64 }]).collect();
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 28)).collect();
        let cv = cv_select_alpha(&x, &y, 10, Objective::Precision(1), TreeParams::default(), 1).unwrap();
        assert_eq!(cv.alpha, 0.0);
        assert_eq!(cv.best_mean, 1.0);
    }

    #[test]
    fn noisy_labels_pick_positive_alpha() {
        // class follows x > 0.5 with 15% flipped labels; the full tree memorizes
        // the flips, the pruned stump generalizes
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..200 {
            let v: f64 = rng.gen();
            let mut label = usize::from(v > 0.5);
            if rng.gen::<f64>() < 0.15 {
                label = 1 - label;
            }
            x.push(vec![v, rng.gen()]);
            y.push(label);
        }
        let cv = cv_select_alpha(&x, &y, 10, Objective::Accuracy, TreeParams::default(), 5).unwrap();
        assert!(cv.alpha > 0.0, "selected {}", cv.alpha);
        let full_mean: f64 = cv
            .table
            .iter()
            .filter(|r| r.alpha == 0.0)
            .map(|r| r.score.unwrap_or(0.0))
            .sum::<f64>()
            / 10.0;
        assert!(cv.best_mean > full_mean);
    }

    #[test]
    fn folds_are_balanced_and_cover() {
        let y: Vec<usize> = (0..100).map(|i| usize::from(i % 5 == 0)).collect();
        let f = stratified_folds(&y, 10, 9);
        for k in 0..10 {
            let members: Vec<usize> = (0..100).filter(|&i| f[i] == k).collect();
            assert_eq!(members.len(), 10);
            assert_eq!(members.iter().filter(|&&i| y[i] == 1).count(), 2);
        }
        assert!(matches!(
            cv_select_alpha(&[vec![1.0]], &[0], 10, Objective::Accuracy, TreeParams::default(), 0),
            Err(Error::TooFewSamples(_))
        ));
    }

    #[test]
    fn cv_table_has_row_per_alpha_and_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.gen(), rng.gen()]).collect();
        let y: Vec<usize> = x.iter().map(|r| usize::from(r[0] + 0.3 * r[1] > 0.6)).collect();
        let cv = cv_select_alpha(&x, &y, 10, Objective::Precision(1), TreeParams::default(), 4).unwrap();
        let n_alpha = {
            let mut a: Vec<f64> = cv.table.iter().map(|r| r.alpha).collect();
            a.dedup();
            a.len()
        };
        assert_eq!(cv.table.len(), n_alpha * 10);
    }

    #[test]
    fn f32_trees_work() {
        let x: Vec<Vec<f32>> = vec![vec![0.0], vec![1.0], vec![2.0]];
        let t = fit_tree(&x, &[0, 1, 1], TreeParams::default()).unwrap();
        assert_eq!(t.predict(&[0.4f32]).unwrap(), 0);
        let back = DecisionTree::<f32>::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn untrained_model_rejected() {
        let s = r#"{"format":"memematch-cart","version":1,"n_features":1,"n_classes":2,"params":{"min_samples_leaf":1,"max_depth":null},"nodes":[]}"#;
        assert!(DecisionTree::<f64>::from_json(s).is_err());
    }

    fn arb_data() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
        (2usize..40, 1usize..4).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(-5i32..5, d), n),
                prop::collection::vec(0usize..2, n),
            )
                .prop_map(|(x, y)| {
                    (
                        x.into_iter().map(|r| r.into_iter().map(|v| v as f64 * 0.5).collect()).collect(),
                        y,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn fits_consistent_training_data((x, mut y) in arb_data()) {
            // make labels a function of the feature vector
            for i in 0..x.len() {
                if let Some(j) = (0..i).find(|&j| x[j] == x[i]) {
                    y[i] = y[j];
                }
            }
            let t = fit_tree(&x, &y, TreeParams::default()).unwrap();
            for (xi, &yi) in x.iter().zip(&y) {
                prop_assert_eq!(t.predict(xi).unwrap(), yi);
            }
        }

        #[test]
        fn predict_matches_walker((x, y) in arb_data(), probe in prop::collection::vec(-6.0f64..6.0, 3)) {
            let t = fit_tree(&x, &y, TreeParams::default()).unwrap();
            let q = &probe[..t.n_features];
            prop_assert_eq!(t.predict(q).unwrap(), walk_predict(&t.nodes, 0, q));
        }

        #[test]
        fn prune_sequence_nested((x, y) in arb_data()) {
            let t = fit_tree(&x, &y, TreeParams::default()).unwrap();
            let s = mccp_sequence(&t);
            prop_assert_eq!(s.alphas[0], 0.0);
            prop_assert!(s.alphas.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.trees.windows(2).all(|w| w[0].n_leaves() > w[1].n_leaves()));
            prop_assert_eq!(s.trees.last().unwrap().nodes.len(), 1);
            for w in s.trees.windows(2) {
                prop_assert!(is_subtree(&w[1].nodes, 0, &w[0].nodes, 0));
            }
        }

        #[test]
        fn json_round_trip_is_stable((x, y) in arb_data()) {
            let t = fit_tree(&x, &y, TreeParams::default()).unwrap().with_class_names(&["a", "b"]);
            let s = t.to_json();
            let back = DecisionTree::<f64>::from_json(&s).unwrap();
            prop_assert_eq!(back.to_json(), s);
            prop_assert_eq!(back, t);
        }
    }

    // `small` is `big` with some internal nodes turned into leaves.
    fn is_subtree(small: &[Node<f64>], i: usize, big: &[Node<f64>], j: usize) -> bool {
        if small[i].counts != big[j].counts {
            return false;
        }
        match (&small[i].split, &big[j].split) {
            (None, _) => true,
            (Some(a), Some(b)) => {
                a.feature == b.feature
                    && a.threshold == b.threshold
                    && is_subtree(small, a.left, big, b.left)
                    && is_subtree(small, a.right, big, b.right)
            }
            (Some(_), None) => false,
        }
    }
}
