//! Panel segmentation by gutter-line splitting, plus the blank-panel filter.
//!
//! Edges come from Canny; separators are axis-aligned Hough lines with near
//! full-span support. Images are cut recursively (guillotine style) and tiny
//! pieces are dropped. Blank panels are removed with a CART model over four
//! cheap texture statistics.

use std::collections::VecDeque;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::cart::{self, CvOutcome, DecisionTree, Objective, TreeParams};
use crate::error::{Error, Result};
use crate::imgcore::{
    convolve, gaussian_blur, quantize, resize_bilinear, sobel, to_grayscale, BBox, GrayImage, Kernel,
    RasterImage,
};
use crate::scalar::Real;

/// Upper end of the gradient-magnitude scale used for Canny thresholds.
pub const MAX_GRADIENT: f64 = 255.0 * 4.0;

pub const BLANK: usize = 0;
pub const NON_BLANK: usize = 1;
pub const BLANK_CLASS_NAMES: [&str; 2] = ["blank", "non-blank"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub canny_low: f64,
    pub canny_high: f64,
    /// Minimum edge support of a separator, as a fraction of the span it crosses.
    pub support: f64,
    /// Separators closer than this fraction of the image side are merged.
    pub merge_tol: f64,
    /// Pieces smaller than this fraction of the image area are discarded.
    pub min_area: f64,
    pub max_depth: usize,
    /// An edge pixel within this many pixels of a line votes for it.
    pub vote_band: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            canny_low: 40.0,
            canny_high: 120.0,
            support: 0.85,
            merge_tol: 0.02,
            min_area: 0.05,
            max_depth: 3,
            vote_band: 1,
        }
    }
}

/// Binary edge map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl EdgeMap {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&e| e).count()
    }
}

/// Canny edges: 5x5 Gaussian (sigma 1.4), Sobel, non-maximum suppression and
/// hysteresis. Magnitudes are clamped to [`MAX_GRADIENT`]; a pixel is strong
/// when its magnitude exceeds `high` and weak when it exceeds `low`.
pub fn canny<T: Real>(img: &GrayImage<T>, low: f64, high: f64) -> Result<EdgeMap> {
    if !(0.0..=MAX_GRADIENT).contains(&low) || !(0.0..=MAX_GRADIENT).contains(&high) || low > high {
        return Err(Error::InvalidThreshold(format!("low {low}, high {high}")));
    }
    let blurred = gaussian_blur(img, 5, 1.4)?;
    let (gx, gy) = sobel(&blurred);
    let (w, h) = (img.width(), img.height());
    let mag: Vec<f64> = gx
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&a, &b)| a.as_f64().hypot(b.as_f64()).min(MAX_GRADIENT))
        .collect();
    let m = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };

    // 0 = keep, 1 = weak, 2 = strong
    let mut class = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = mag[i];
            if v <= low {
                continue;
            }
            let (dx, dy) = gradient_step(gx.data()[i].as_f64(), gy.data()[i].as_f64());
            let (xi, yi) = (x as isize, y as isize);
            // ">=" behind, ">" ahead: a symmetric plateau keeps exactly one pixel
            if v >= m(xi - dx, yi - dy) && v > m(xi + dx, yi + dy) {
                class[i] = if v > high { 2 } else { 1 };
            }
        }
    }

    let mut edges = EdgeMap::empty(w, h);
    let mut queue: VecDeque<usize> = VecDeque::new();
    for (i, &c) in class.iter().enumerate() {
        if c == 2 {
            edges.data[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if class[n] == 1 && !edges.data[n] {
                    edges.data[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    Ok(edges)
}

// Gradient direction quantized to one of four neighbour offsets.
fn gradient_step(gx: f64, gy: f64) -> (isize, isize) {
    let mut angle = gy.atan2(gx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (1, 0)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (0, 1)
    } else {
        (-1, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Constant y; splits the region into top and bottom.
    Horizontal,
    /// Constant x; splits the region into left and right.
    Vertical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separator {
    pub orientation: Orientation,
    /// Absolute pixel row (horizontal) or column (vertical).
    pub position: usize,
    /// Edge support of the strongest line in the merged group.
    pub support: usize,
}

/// Separators over the whole edge map.
pub fn detect_separators(edges: &EdgeMap, cfg: &SegmentConfig) -> Vec<Separator> {
    let region = BBox::new(0, 0, edges.width, edges.height);
    let mut out = detect_in(edges, region, Orientation::Horizontal, cfg);
    out.extend(detect_in(edges, region, Orientation::Vertical, cfg));
    out
}

/// Hough accumulation at 0 and 90 degrees inside `region`.
///
/// Each line position collects one vote per crossing pixel that has an edge
/// within `vote_band` of the line. Qualifying lines are chained while their
/// gaps stay within `merge_tol` of the region side, and each chain collapses
/// to its support-weighted mean position.
pub fn detect_in(edges: &EdgeMap, region: BBox, orientation: Orientation, cfg: &SegmentConfig) -> Vec<Separator> {
    let (len, span) = match orientation {
        Orientation::Horizontal => (region.h, region.w),
        Orientation::Vertical => (region.w, region.h),
    };
    let edge_at = |along: usize, across: usize| -> bool {
        match orientation {
            Orientation::Horizontal => edges.get(region.x + across, region.y + along),
            Orientation::Vertical => edges.get(region.x + along, region.y + across),
        }
    };
    let band = cfg.vote_band as isize;
    let needed = (cfg.support * span as f64).ceil() as usize;
    let mut qualifying: Vec<(usize, usize)> = Vec::new();
    for p in 0..len {
        let lo = (p as isize - band).max(0) as usize;
        let hi = ((p as isize + band) as usize).min(len - 1);
        let support = (0..span).filter(|&c| (lo..=hi).any(|q| edge_at(q, c))).count();
        if support >= needed.max(1) {
            qualifying.push((p, support));
        }
    }

    let tol = (cfg.merge_tol * len as f64).max(1.0);
    let mut out = Vec::new();
    let mut group: Vec<(usize, usize)> = Vec::new();
    let flush = |group: &mut Vec<(usize, usize)>, out: &mut Vec<Separator>| {
        if group.is_empty() {
            return;
        }
        let total: f64 = group.iter().map(|&(_, s)| s as f64).sum();
        let mean = group.iter().map(|&(p, s)| p as f64 * s as f64).sum::<f64>() / total;
        let offset = match orientation {
            Orientation::Horizontal => region.y,
            Orientation::Vertical => region.x,
        };
        out.push(Separator {
            orientation,
            position: offset + mean.round() as usize,
            support: group.iter().map(|&(_, s)| s).max().unwrap_or(0),
        });
        group.clear();
    };
    for &(p, s) in &qualifying {
        if let Some(&(last, _)) = group.last() {
            if (p - last) as f64 > tol {
                flush(&mut group, &mut out);
            }
        }
        group.push((p, s));
    }
    flush(&mut group, &mut out);
    out
}

/// A rectangular panel cut from a source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub source: String,
    pub bbox: BBox,
    pub pixels: RasterImage,
}

/// Panels of one image, ordered top-to-bottom then left-to-right.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSet {
    pub source: String,
    pub width: usize,
    pub height: usize,
    pub segments: Vec<Segment>,
}

impl SegmentSet {
    pub fn n(&self) -> usize {
        self.segments.len()
    }

    pub fn whole(source: &str, img: &RasterImage) -> Self {
        Self {
            source: source.to_string(),
            width: img.width(),
            height: img.height(),
            segments: vec![Segment {
                source: source.to_string(),
                bbox: img.bounds(),
                pixels: img.clone(),
            }],
        }
    }
}

/// Recursive gutter splitting.
///
/// Horizontal separators are cut first; a region without any is cut at its
/// vertical separators. Recursion stops at `max_depth`. Pieces below
/// `min_area` of the image are dropped; if nothing survives, or the top
/// level has no separator, the whole image is the only segment.
pub fn segment_panels(source: &str, img: &RasterImage, cfg: &SegmentConfig) -> Result<SegmentSet> {
    let gray = to_grayscale::<f64>(img);
    let edges = canny(&gray, cfg.canny_low, cfg.canny_high)?;
    let boxes = panel_boxes(&edges, cfg);
    let segments = boxes
        .into_iter()
        .map(|b| Segment {
            source: source.to_string(),
            bbox: b,
            pixels: img.crop(b),
        })
        .collect();
    Ok(SegmentSet {
        source: source.to_string(),
        width: img.width(),
        height: img.height(),
        segments,
    })
}

/// Panel rectangles from an edge map.
pub fn panel_boxes(edges: &EdgeMap, cfg: &SegmentConfig) -> Vec<BBox> {
    let full = BBox::new(0, 0, edges.width, edges.height);
    let min_area = cfg.min_area * full.area() as f64;
    let mut out = Vec::new();
    split_region(edges, full, 0, cfg, &mut out);
    out.retain(|b| b.area() as f64 >= min_area);
    if out.is_empty() {
        out.push(full);
    }
    out.sort_by_key(|b| (b.y, b.x));
    out
}

fn split_region(edges: &EdgeMap, region: BBox, depth: usize, cfg: &SegmentConfig, out: &mut Vec<BBox>) {
    if depth >= cfg.max_depth {
        out.push(region);
        return;
    }
    let mut orientation = Orientation::Horizontal;
    let mut seps = detect_in(edges, region, orientation, cfg);
    if cuts(&seps, region, orientation).len() < 2 {
        orientation = Orientation::Vertical;
        seps = detect_in(edges, region, orientation, cfg);
    }
    let pieces = cuts(&seps, region, orientation);
    if pieces.len() < 2 {
        out.push(region);
        return;
    }
    for piece in pieces {
        split_region(edges, piece, depth + 1, cfg, out);
    }
}

fn cuts(seps: &[Separator], region: BBox, orientation: Orientation) -> Vec<BBox> {
    let (start, end) = match orientation {
        Orientation::Horizontal => (region.y, region.y + region.h),
        Orientation::Vertical => (region.x, region.x + region.w),
    };
    let mut bounds = vec![start];
    for s in seps {
        if s.position > start && s.position < end && s.position > *bounds.last().unwrap() {
            bounds.push(s.position);
        }
    }
    bounds.push(end);
    bounds
        .windows(2)
        .map(|w| match orientation {
            Orientation::Horizontal => BBox::new(region.x, w[0], region.w, w[1] - w[0]),
            Orientation::Vertical => BBox::new(w[0], region.y, w[1] - w[0], region.h),
        })
        .collect()
}

/// Texture statistics used to decide whether a panel is blank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlankFeatures {
    pub shannon_entropy: f64,
    pub aspect_ratio: f64,
    pub saliency_entropy: f64,
    pub laplacian_variance: f64,
}

impl BlankFeatures {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.shannon_entropy,
            self.aspect_ratio,
            self.saliency_entropy,
            self.laplacian_variance,
        ]
    }
}

/// Entropy in bits of a 256-bin histogram of rounded intensities.
pub fn histogram_entropy<T: Real>(img: &GrayImage<T>) -> f64 {
    let mut hist = [0usize; 256];
    for &v in img.data() {
        hist[quantize(v) as usize] += 1;
    }
    entropy_bits(&hist)
}

fn entropy_bits(hist: &[usize]) -> f64 {
    let n: usize = hist.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    let h = -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>();
    h.max(0.0)
}

/// Spectral-residual saliency of a 64x64 rescale of `img`.
pub fn spectral_residual_saliency(img: &GrayImage<f64>) -> Result<GrayImage<f64>> {
    const N: usize = 64;
    let small = resize_bilinear(img, N, N)?;
    let fft = Fft2::new(N);
    let mut spec: Vec<Complex<f64>> = small.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.forward(&mut spec);

    let log_amp = GrayImage::new(N, N, spec.iter().map(|c| (c.norm() + 1e-9).ln()).collect())?;
    let box3 = Kernel::new(3, 3, vec![1.0 / 9.0; 9])?;
    let smooth = convolve(&log_amp, &box3)?;
    for (i, c) in spec.iter_mut().enumerate() {
        let residual = log_amp.data()[i] - smooth.data()[i];
        let phase = c.arg();
        *c = Complex::from_polar(residual.exp(), phase);
    }
    fft.inverse(&mut spec);
    let energy = GrayImage::new(N, N, spec.iter().map(|c| c.norm_sqr()).collect())?;
    gaussian_blur(&energy, 2 * (3.0f64 * 2.5).ceil() as usize + 1, 2.5)
}

struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn forward(&self, data: &mut [Complex<f64>]) {
        self.run(data, &self.fwd);
    }

    fn inverse(&self, data: &mut [Complex<f64>]) {
        self.run(data, &self.inv);
        let s = 1.0 / (self.n * self.n) as f64;
        data.iter_mut().for_each(|c| *c *= s);
    }

    fn run(&self, data: &mut [Complex<f64>], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        for row in data.chunks_exact_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = data[y * n + x];
            }
            plan.process(&mut col);
            for y in 0..n {
                data[y * n + x] = col[y];
            }
        }
    }
}

/// Blank-panel features of a segment.
pub fn blank_features(seg: &Segment) -> Result<BlankFeatures> {
    let gray = to_grayscale::<f64>(&seg.pixels);
    let shannon_entropy = histogram_entropy(&gray);
    let aspect_ratio = seg.pixels.width() as f64 / seg.pixels.height() as f64;

    let sal = spectral_residual_saliency(&gray)?;
    let (_, hi) = sal.min_max();
    let saliency_entropy = if hi > 0.0 && hi.is_finite() {
        let mut hist = [0usize; 256];
        for &v in sal.data() {
            hist[quantize(v / hi * 255.0) as usize] += 1;
        }
        entropy_bits(&hist)
    } else {
        0.0
    };

    let lap = convolve(&gray, &Kernel::laplacian())?;
    let n = lap.data().len() as f64;
    let mean = lap.data().iter().sum::<f64>() / n;
    let laplacian_variance = (lap.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(0.0);

    Ok(BlankFeatures {
        shannon_entropy,
        aspect_ratio,
        saliency_entropy,
        laplacian_variance,
    })
}

/// Blank-segment classifier: a pruned CART tree over [`BlankFeatures`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlankFilter {
    tree: DecisionTree<f64>,
}

impl BlankFilter {
    pub fn new(tree: DecisionTree<f64>) -> Result<Self> {
        if tree.nodes.is_empty() || tree.n_features != 4 {
            return Err(Error::ModelUntrained);
        }
        Ok(Self { tree })
    }

    pub fn tree(&self) -> &DecisionTree<f64> {
        &self.tree
    }

    pub fn is_blank(&self, f: &BlankFeatures) -> Result<bool> {
        Ok(self.tree.predict(&f.to_vec())? == BLANK)
    }

    /// Keeps everything; for runs without a trained model.
    pub fn keep_all() -> Self {
        Self {
            tree: DecisionTree {
                format: cart::MODEL_FORMAT.into(),
                version: cart::MODEL_VERSION,
                n_features: 4,
                n_classes: 2,
                class_names: BLANK_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
                params: TreeParams::default(),
                nodes: vec![cart::Node {
                    counts: vec![0, 1],
                    split: None,
                }],
            },
        }
    }
}

/// Remove segments the model calls blank. When every segment is blank the
/// largest one (first on ties) is kept.
pub fn filter_blanks(set: &SegmentSet, model: &BlankFilter) -> Result<SegmentSet> {
    let mut keep = Vec::with_capacity(set.segments.len());
    for seg in &set.segments {
        if !model.is_blank(&blank_features(seg)?)? {
            keep.push(seg.clone());
        }
    }
    if keep.is_empty() {
        if let Some(largest) = set
            .segments
            .iter()
            .enumerate()
            .max_by_key(|(i, s)| (s.bbox.area(), std::cmp::Reverse(*i)))
            .map(|(_, s)| s.clone())
        {
            keep.push(largest);
        }
    }
    Ok(SegmentSet {
        segments: keep,
        ..set.clone()
    })
}

/// Result of training the blank filter.
#[derive(Clone, Debug)]
pub struct BlankTraining {
    pub filter: BlankFilter,
    pub cv: CvOutcome,
}

/// Cross-validate the pruning alpha for non-blank precision, then refit on all data.
pub fn train_blank_filter(features: &[BlankFeatures], labels: &[usize], folds: usize, seed: u64) -> Result<BlankTraining> {
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::TooFewSamples("blank training needs both classes".into()));
    }
    let x: Vec<Vec<f64>> = features.iter().map(|f| f.to_vec()).collect();
    let params = TreeParams::default();
    let cv = cart::cv_select_alpha(&x, labels, folds, Objective::Precision(NON_BLANK), params, seed)?;
    let tree = cart::fit_pruned(&x, labels, params, cv.alpha)?.with_class_names(&BLANK_CLASS_NAMES);
    Ok(BlankTraining {
        filter: BlankFilter::new(tree)?,
        cv,
    })
}
