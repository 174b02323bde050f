//! Seeded synthetic corpus: reference library, composited memes with text
//! masks, MM/TM pair manifests and a labelled blank-segment training set.
//!
//! Every random choice draws from a ChaCha8 stream seeded with
//! `seed ^ fnv1a64(tag)`, where `tag` names the purpose (for example
//! `template/3/0` or `MM/meme/17`). The tags are part of the on-disk
//! contract: changing one changes the corpus.

pub mod render;

use std::collections::HashSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalharness::{Label, LabeledPair, Task};
use crate::hashembed::{builtin_embedding, cosine_distance, Embedding};
use crate::imgcore::{decode_image, to_grayscale, BBox, RasterImage};
use crate::preprocess::{mask_path_for, TextMask};

use render::{add_noise, draw_text_band, render_scene, render_sprite, Canvas, Sprite};

pub const TEMPLATE_W: usize = 240;
pub const TEMPLATE_H: usize = 180;
pub const ELEMENT_SIDE: usize = 120;
pub const SPRITE_SIDE: usize = 96;

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn stream_seed(seed: u64, tag: &str) -> u64 {
    seed ^ fnv1a64(tag)
}

pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, tag))
}

/// Generator settings. The recipe mix values were tuned on seed 42; see
/// `docs/corpus-tuning.md`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub seed: u64,
    pub n_templates: usize,
    pub n_elements: usize,
    /// Pairs per task.
    pub n_pairs: usize,
    /// Unrelated pairs per related pair.
    pub negatives_per_related: usize,
    pub min_template_distance: f64,
    pub max_retries: usize,
    /// MM: chance a template reference is reused as a full background (else as a panel).
    pub mm_background_prob: f64,
    /// MM: chance an element reference is pasted onto a scene (else used as a panel).
    pub mm_paste_prob: f64,
    /// Relative weights of the two-across, two-down and 2x2 panel layouts.
    pub panel_weights: [f64; 3],
    pub paste_scale: (f64, f64),
    pub flip_prob: f64,
    pub caption_prob: f64,
    /// Largest crop per side, as a fraction of the side.
    pub crop_max: f64,
    pub brightness_max: f64,
    /// Range of the final resampling factor of every meme.
    pub meme_scale: (f64, f64),
    pub noise_amp: f64,
    pub blank_seed: u64,
    pub blank_segments: usize,
    pub blank_fraction: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            seed: 42,
            n_templates: 120,
            n_elements: 40,
            n_pairs: 600,
            negatives_per_related: 4,
            min_template_distance: 0.05,
            max_retries: 100,
            mm_background_prob: 0.3,
            mm_paste_prob: 0.5,
            panel_weights: [0.3, 0.3, 0.4],
            paste_scale: (0.5, 1.5),
            flip_prob: 0.5,
            caption_prob: 0.3,
            crop_max: 0.04,
            brightness_max: 6.0,
            meme_scale: (0.6, 1.0),
            noise_amp: 4.0,
            blank_seed: 7,
            blank_segments: 500,
            blank_fraction: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefKind {
    Template,
    Element,
}

/// Library index row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexRow {
    pub ref_id: String,
    pub kind: RefKind,
    pub path: String,
}

#[derive(Clone, Debug)]
pub struct ReferenceSpec {
    pub ref_id: String,
    pub kind: RefKind,
    /// Render seed (already derived from the run seed).
    pub seed: u64,
    pub path: String,
}

pub struct LibraryRef {
    pub spec: ReferenceSpec,
    pub image: RasterImage,
    pub embedding: Embedding,
}

pub struct Library {
    pub refs: Vec<LibraryRef>,
}

impl Library {
    pub fn get(&self, ref_id: &str) -> Option<&LibraryRef> {
        self.refs.iter().find(|r| r.spec.ref_id == ref_id)
    }

    fn of_kind(&self, kind: RefKind) -> impl Iterator<Item = &LibraryRef> {
        self.refs.iter().filter(move |r| r.spec.kind == kind)
    }
}

fn element_sprite(seed: u64) -> Sprite {
    render_sprite(&mut ChaCha8Rng::seed_from_u64(seed), SPRITE_SIDE)
}

fn render_template(seed: u64) -> Canvas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = render_scene(&mut rng, TEMPLATE_W, TEMPLATE_H, (3, 7));
    add_noise(&mut c, &mut rng, 2.0);
    c
}

fn render_element(seed: u64) -> Canvas {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let ground = render::random_color(&mut rng, 0.35, 0.75);
    let mut c = Canvas::new(ELEMENT_SIDE, ELEMENT_SIDE, ground);
    let sprite = element_sprite(seed);
    let off = (ELEMENT_SIDE - SPRITE_SIDE) / 2;
    c.paste(&sprite.canvas, Some(&sprite.alpha), off, off);
    add_noise(&mut c, &mut rng, 2.0);
    c
}

fn raster_to_canvas(img: &RasterImage) -> Canvas {
    let img = img.to_rgb();
    let mut c = Canvas::new(img.width(), img.height(), [0.0; 3]);
    for y in 0..img.height() {
        for x in 0..img.width() {
            c.set(x, y, img.rgb(x, y).map(f64::from));
        }
    }
    c
}

fn embedding_of(img: &RasterImage) -> Embedding {
    builtin_embedding(&to_grayscale::<f64>(img))
}

/// Render the reference library in memory. Templates are regenerated until
/// every pair is at least `min_template_distance` apart under the built-in embedding.
pub fn generate_references(params: &CorpusParams) -> Result<Library> {
    if params.n_templates == 0 || params.n_elements == 0 {
        return Err(Error::Config("need at least one template and one element".into()));
    }
    let first: Vec<(u64, RasterImage, Embedding)> = (0..params.n_templates)
        .into_par_iter()
        .map(|i| {
            let seed = stream_seed(params.seed, &format!("template/{i}/0"));
            let img = render_template(seed).to_raster();
            let e = embedding_of(&img);
            (seed, img, e)
        })
        .collect();
    let mut refs: Vec<LibraryRef> = Vec::with_capacity(params.n_templates + params.n_elements);
    for (i, (mut seed, mut img, mut emb)) in first.into_iter().enumerate() {
        let mut attempt = 0;
        loop {
            let clash = refs.iter().try_fold(false, |acc, r| {
                Ok::<_, Error>(acc || cosine_distance(&r.embedding, &emb)? < params.min_template_distance)
            })?;
            if !clash {
                break;
            }
            attempt += 1;
            if attempt > params.max_retries {
                return Err(Error::CollisionExhaustion(params.max_retries));
            }
            seed = stream_seed(params.seed, &format!("template/{i}/{attempt}"));
            img = render_template(seed).to_raster();
            emb = embedding_of(&img);
        }
        let ref_id = format!("template_{i:03}");
        refs.push(LibraryRef {
            spec: ReferenceSpec {
                path: format!("refs/{ref_id}.png"),
                ref_id,
                kind: RefKind::Template,
                seed,
            },
            image: img,
            embedding: emb,
        });
    }
    let elements: Vec<LibraryRef> = (0..params.n_elements)
        .into_par_iter()
        .map(|i| {
            let seed = stream_seed(params.seed, &format!("element/{i}"));
            let img = render_element(seed).to_raster();
            let ref_id = format!("element_{i:03}");
            LibraryRef {
                spec: ReferenceSpec {
                    path: format!("refs/{ref_id}.png"),
                    ref_id,
                    kind: RefKind::Element,
                    seed,
                },
                embedding: embedding_of(&img),
                image: img,
            }
        })
        .collect();
    refs.extend(elements);
    Ok(Library { refs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextStyle {
    /// White strokes with a dark outline drawn over the picture.
    Overlay,
    /// Dark strokes on a caption bar.
    Caption,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBand {
    pub bbox: BBox,
    pub style: TextStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PanelCell {
    Reference { ref_id: String },
    Distractor { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// A reference as the full background, optionally cropped and under a caption bar.
    Background {
        ref_id: String,
        crop: BBox,
        brightness: f64,
        caption_height: usize,
    },
    /// An element sprite pasted onto a fresh scene.
    Paste {
        base_seed: u64,
        ref_id: String,
        scale: f64,
        flip: bool,
        x: usize,
        y: usize,
    },
    /// Grid of panels separated by white gutters, row-major cells.
    Panels {
        rows: usize,
        cols: usize,
        cell_w: usize,
        cell_h: usize,
        gutter: usize,
        cells: Vec<PanelCell>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemeRecipe {
    pub meme_id: String,
    pub task: Task,
    pub path: String,
    pub detail_seed: u64,
    pub layout: Layout,
    /// Resampling factor applied to the composite before text is drawn.
    pub scale: f64,
    /// Uniform pixel noise amplitude.
    pub noise: f64,
    /// In final (scaled) coordinates.
    pub text_bands: Vec<TextBand>,
}

impl MemeRecipe {
    pub fn dims(&self) -> (usize, usize) {
        scaled_dims(layout_dims(&self.layout), self.scale)
    }

    /// The template the meme is built on, if any.
    pub fn base(&self) -> Option<&str> {
        match &self.layout {
            Layout::Background { ref_id, .. } => Some(ref_id),
            _ => None,
        }
    }

    /// Every library reference reused in the meme.
    pub fn references(&self) -> Vec<&str> {
        match &self.layout {
            Layout::Background { ref_id, .. } | Layout::Paste { ref_id, .. } => vec![ref_id],
            Layout::Panels { cells, .. } => cells
                .iter()
                .filter_map(|c| match c {
                    PanelCell::Reference { ref_id } => Some(ref_id.as_str()),
                    PanelCell::Distractor { .. } => None,
                })
                .collect(),
        }
    }

    /// Label of `(meme, r)` implied by the recipe under `task`.
    pub fn audit_label(&self, r: &str, task: Task) -> Label {
        let related = match task {
            Task::Tm => self.base() == Some(r),
            Task::Mm => self.references().contains(&r),
        };
        if related {
            Label::Related
        } else {
            Label::Unrelated
        }
    }
}

fn layout_dims(layout: &Layout) -> (usize, usize) {
    match layout {
        Layout::Background {
            crop, caption_height, ..
        } => (crop.w, crop.h + caption_height),
        Layout::Paste { .. } => (TEMPLATE_W, TEMPLATE_H),
        Layout::Panels {
            rows,
            cols,
            cell_w,
            cell_h,
            gutter,
            ..
        } => (cols * cell_w + (cols - 1) * gutter, rows * cell_h + (rows - 1) * gutter),
    }
}

fn scaled_dims((w, h): (usize, usize), s: f64) -> (usize, usize) {
    (((w as f64 * s).round() as usize).max(16), ((h as f64 * s).round() as usize).max(16))
}

fn scale_band(b: TextBand, s: f64, (w, h): (usize, usize)) -> TextBand {
    let x0 = (b.bbox.x as f64 * s).floor() as usize;
    let y0 = (b.bbox.y as f64 * s).floor() as usize;
    let x1 = (((b.bbox.x + b.bbox.w) as f64 * s).ceil() as usize).min(w);
    let y1 = (((b.bbox.y + b.bbox.h) as f64 * s).ceil() as usize).min(h);
    TextBand {
        bbox: BBox::new(x0, y0, x1 - x0, y1 - y0),
        style: b.style,
    }
}

fn band_height(rng: &mut ChaCha8Rng, h: usize) -> usize {
    ((h as f64 * rng.gen_range(0.1..0.14)) as usize).max(8)
}

/// Band spanning most of the width at row `y`.
fn band_at(rng: &mut ChaCha8Rng, x0: usize, w: usize, y: usize, bh: usize, style: TextStyle) -> TextBand {
    let bw = ((w as f64 * rng.gen_range(0.6..0.92)) as usize).max(16).min(w);
    let bx = x0 + rng.gen_range(0..=(w - bw));
    TextBand {
        bbox: BBox::new(bx, y, bw, bh),
        style,
    }
}

fn plan_background(rng: &mut ChaCha8Rng, r: &LibraryRef, p: &CorpusParams) -> (Layout, Vec<TextBand>) {
    let (w, h) = (r.image.width(), r.image.height());
    let mut crop = BBox::new(0, 0, w, h);
    if rng.gen_bool(0.5) {
        let side = |rng: &mut ChaCha8Rng, n: usize| (rng.gen_range(0.0..=p.crop_max) * n as f64) as usize;
        let (l, rr, t, b) = (side(rng, w), side(rng, w), side(rng, h), side(rng, h));
        crop = BBox::new(l, t, w - l - rr, h - t - b);
    }
    let brightness = rng.gen_range(-p.brightness_max..=p.brightness_max);
    let caption = rng.gen_bool(p.caption_prob);
    let mut bands = Vec::new();
    let caption_height = if caption { (crop.h as f64 * rng.gen_range(0.16..0.22)) as usize } else { 0 };
    let bh = band_height(rng, crop.h);
    if caption {
        let ch = caption_height;
        let cbh = (ch as f64 * 0.55) as usize;
        bands.push(band_at(rng, 0, crop.w, (ch - cbh) / 2, cbh, TextStyle::Caption));
        if rng.gen_bool(0.4) {
            bands.push(band_at(rng, 0, crop.w, ch + crop.h - bh - 4, bh, TextStyle::Overlay));
        }
    } else {
        let top = rng.gen_bool(0.85);
        let bottom = !top || rng.gen_bool(0.7);
        if top {
            bands.push(band_at(rng, 0, crop.w, 4, bh, TextStyle::Overlay));
        }
        if bottom {
            bands.push(band_at(rng, 0, crop.w, crop.h - bh - 4, bh, TextStyle::Overlay));
        }
    }
    (
        Layout::Background {
            ref_id: r.spec.ref_id.clone(),
            crop,
            brightness,
            caption_height,
        },
        bands,
    )
}

fn plan_paste(rng: &mut ChaCha8Rng, r: &LibraryRef, p: &CorpusParams, base_seed: u64) -> (Layout, Vec<TextBand>) {
    let bh = band_height(rng, TEMPLATE_H);
    let mut bands = vec![band_at(rng, 0, TEMPLATE_W, 4, bh, TextStyle::Overlay)];
    let bottom_band = rng.gen_bool(0.5);
    if bottom_band {
        bands.push(band_at(rng, 0, TEMPLATE_W, TEMPLATE_H - bh - 4, bh, TextStyle::Overlay));
    }
    let free_top = bh + 8;
    let free_bottom = if bottom_band { TEMPLATE_H - bh - 8 } else { TEMPLATE_H };
    let max_side = free_bottom - free_top;
    let scale = rng
        .gen_range(p.paste_scale.0..=p.paste_scale.1)
        .min(max_side as f64 / SPRITE_SIDE as f64);
    let side = (SPRITE_SIDE as f64 * scale).round() as usize;
    let x = rng.gen_range(0..=TEMPLATE_W - side);
    let y = free_top + rng.gen_range(0..=max_side - side);
    (
        Layout::Paste {
            base_seed,
            ref_id: r.spec.ref_id.clone(),
            scale,
            flip: rng.gen_bool(p.flip_prob),
            x,
            y,
        },
        bands,
    )
}

fn plan_panels(rng: &mut ChaCha8Rng, r: &LibraryRef, p: &CorpusParams, distractor: impl Fn(usize) -> u64) -> (Layout, Vec<TextBand>) {
    let total: f64 = p.panel_weights.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut which = 0;
    for (i, w) in p.panel_weights.iter().enumerate() {
        if pick < *w {
            which = i;
            break;
        }
        pick -= w;
    }
    let (rows, cols) = [(1, 2), (2, 1), (2, 2)][which];
    let (cell_w, cell_h, gutter) = (200, 150, 8);
    let n = rows * cols;
    let slot = rng.gen_range(0..n);
    let cells = (0..n)
        .map(|i| {
            if i == slot {
                PanelCell::Reference {
                    ref_id: r.spec.ref_id.clone(),
                }
            } else {
                PanelCell::Distractor { seed: distractor(i) }
            }
        })
        .collect();
    let mut bands = Vec::new();
    if rng.gen_bool(0.8) {
        let cell = rng.gen_range(0..n);
        let (cx, cy) = ((cell % cols) * (cell_w + gutter), (cell / cols) * (cell_h + gutter));
        let bh = band_height(rng, cell_h);
        let y = if rng.gen_bool(0.5) { cy + 4 } else { cy + cell_h - bh - 4 };
        bands.push(band_at(rng, cx + 2, cell_w - 4, y, bh, TextStyle::Overlay));
    }
    (
        Layout::Panels {
            rows,
            cols,
            cell_w,
            cell_h,
            gutter,
            cells,
        },
        bands,
    )
}

/// Recipe for a meme that reuses `r` as the task's related form.
fn plan_meme(meme_id: String, task: Task, r: &LibraryRef, p: &CorpusParams, idx: usize) -> MemeRecipe {
    let tag = format!("{task}/meme/{idx}");
    let mut rng = stream(p.seed, &tag);
    let distractor = |cell: usize| stream_seed(p.seed, &format!("{task}/distractor/{idx}/{cell}"));
    let (layout, text_bands) = match (task, r.spec.kind) {
        (Task::Tm, _) => plan_background(&mut rng, r, p),
        (Task::Mm, RefKind::Template) => {
            if rng.gen_bool(p.mm_background_prob) {
                plan_background(&mut rng, r, p)
            } else {
                plan_panels(&mut rng, r, p, distractor)
            }
        }
        (Task::Mm, RefKind::Element) => {
            if rng.gen_bool(p.mm_paste_prob) {
                plan_paste(&mut rng, r, p, distractor(0))
            } else {
                plan_panels(&mut rng, r, p, distractor)
            }
        }
    };
    let scale = rng.gen_range(p.meme_scale.0..=p.meme_scale.1);
    let dims = scaled_dims(layout_dims(&layout), scale);
    let text_bands = text_bands.into_iter().map(|b| scale_band(b, scale, dims)).collect();
    let dir = task.as_str().to_lowercase();
    MemeRecipe {
        path: format!("memes/{dir}/{meme_id}.png"),
        meme_id,
        task,
        detail_seed: stream_seed(p.seed, &format!("{tag}/detail")),
        layout,
        scale,
        noise: p.noise_amp,
        text_bands,
    }
}

/// Composite a recipe into pixels and its text mask.
pub fn render_meme(recipe: &MemeRecipe, library: &Library) -> Result<(RasterImage, TextMask)> {
    let lookup = |id: &str| {
        library
            .get(id)
            .ok_or_else(|| Error::Parse(format!("recipe {} names unknown reference {id}", recipe.meme_id)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.detail_seed);
    let mut canvas = match &recipe.layout {
        Layout::Background {
            ref_id,
            crop,
            brightness,
            caption_height,
        } => {
            let mut img = raster_to_canvas(&lookup(ref_id)?.image).crop(*crop);
            let b = *brightness;
            img.map(|p| p.map(|v| v + b));
            if *caption_height > 0 {
                let mut c = Canvas::new(crop.w, crop.h + caption_height, [252.0; 3]);
                c.paste(&img, None, 0, *caption_height);
                c
            } else {
                img
            }
        }
        Layout::Paste {
            base_seed,
            ref_id,
            scale,
            flip,
            x,
            y,
        } => {
            let r = lookup(ref_id)?;
            let mut base = render_scene(&mut ChaCha8Rng::seed_from_u64(*base_seed), TEMPLATE_W, TEMPLATE_H, (3, 7));
            let side = (SPRITE_SIDE as f64 * scale).round() as usize;
            let mut sprite = element_sprite(r.spec.seed).resized(side, side);
            if *flip {
                sprite = sprite.flipped();
            }
            base.paste(&sprite.canvas, Some(&sprite.alpha), *x, *y);
            base
        }
        Layout::Panels {
            cols,
            cell_w,
            cell_h,
            gutter,
            cells,
            ..
        } => {
            let (w, h) = layout_dims(&recipe.layout);
            let mut c = Canvas::new(w, h, [255.0; 3]);
            for (i, cell) in cells.iter().enumerate() {
                let content = match cell {
                    PanelCell::Reference { ref_id } => raster_to_canvas(&lookup(ref_id)?.image).resized(*cell_w, *cell_h),
                    PanelCell::Distractor { seed } => {
                        render_scene(&mut ChaCha8Rng::seed_from_u64(*seed), *cell_w, *cell_h, (3, 7))
                    }
                };
                c.paste(&content, None, (i % cols) * (cell_w + gutter), (i / cols) * (cell_h + gutter));
            }
            c
        }
    };
    let (w, h) = recipe.dims();
    if (w, h) != (canvas.w, canvas.h) {
        canvas = canvas.resized(w, h);
    }
    add_noise(&mut canvas, &mut rng, recipe.noise);
    let mut mask = vec![false; w * h];
    for band in &recipe.text_bands {
        let (fill, outline) = match band.style {
            TextStyle::Overlay => ([250.0; 3], Some([15.0; 3])),
            TextStyle::Caption => ([20.0; 3], None),
        };
        draw_text_band(&mut canvas, &mut rng, band.bbox, fill, outline);
        let b = band.bbox;
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                mask[y * w + x] = true;
            }
        }
    }
    Ok((canvas.to_raster(), TextMask::new(w, h, mask)?))
}

/// Recipes and labelled pairs for one task.
pub struct PairPlan {
    pub task: Task,
    /// Reference ids forming the task's reference set, in library order.
    pub reference_set: Vec<String>,
    pub recipes: Vec<MemeRecipe>,
    pub pairs: Vec<LabeledPair>,
}

/// The task's reference set: templates for TM; every element then
/// templates for MM; truncated to `n_refs`.
pub fn task_references(library: &Library, task: Task, n_refs: usize) -> Vec<&LibraryRef> {
    let pool: Vec<&LibraryRef> = match task {
        Task::Tm => library.of_kind(RefKind::Template).collect(),
        Task::Mm => library
            .of_kind(RefKind::Element)
            .chain(library.of_kind(RefKind::Template))
            .collect(),
    };
    pool.into_iter().take(n_refs).collect()
}

/// Plan `n_pairs` pairs at `1 : negatives_per_related`. Each reference gets
/// one related meme and one meme built from each of its most similar other
/// references (hard negatives).
pub fn generate_pairs(library: &Library, task: Task, p: &CorpusParams) -> Result<PairPlan> {
    let group = 1 + p.negatives_per_related;
    if p.n_pairs == 0 || p.n_pairs % group != 0 {
        return Err(Error::RatioInfeasible(format!(
            "{} pairs cannot be split 1:{}",
            p.n_pairs, p.negatives_per_related
        )));
    }
    let n_refs = p.n_pairs / group;
    let refs = task_references(library, task, n_refs);
    if refs.len() < n_refs || refs.len() <= p.negatives_per_related {
        return Err(Error::RatioInfeasible(format!(
            "{task} needs {n_refs} references with {} negatives each, library has {}",
            p.negatives_per_related,
            refs.len()
        )));
    }
    let prefix = task.as_str().to_lowercase();
    let mut recipes = Vec::with_capacity(p.n_pairs);
    let mut pairs = Vec::with_capacity(p.n_pairs);
    for (k, r) in refs.iter().enumerate() {
        let mut dists: Vec<(f64, usize)> = refs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(j, o)| Ok((cosine_distance(&r.embedding, &o.embedding)?, j)))
            .collect::<Result<_>>()?;
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let sources = std::iter::once(k).chain(dists.iter().take(p.negatives_per_related).map(|d| d.1));
        for (j, src) in sources.enumerate() {
            let idx = k * group + j;
            let meme_id = format!("{prefix}_{idx:04}");
            let recipe = plan_meme(meme_id.clone(), task, refs[src], p, idx);
            let label = recipe.audit_label(&r.spec.ref_id, task);
            debug_assert_eq!(label == Label::Related, j == 0);
            pairs.push(LabeledPair {
                pair_id: meme_id,
                m: recipe.path.clone(),
                r: r.spec.path.clone(),
                label,
                task,
            });
            recipes.push(recipe);
        }
    }
    Ok(PairPlan {
        task,
        reference_set: refs.iter().map(|r| r.spec.ref_id.clone()).collect(),
        recipes,
        pairs,
    })
}

/// Labelled blank-training segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentLabelRow {
    pub segment_id: String,
    pub path: String,
    /// `blank` or `non-blank`.
    pub label: String,
}

/// Blank segments are near-uniform fills (sometimes with a faint gradient)
/// under mild noise; non-blank ones are textured scenes or sprites.
pub fn render_blank_segment(seed: u64, i: usize, blank: bool) -> RasterImage {
    let mut rng = stream(seed, &format!("blank/{i}"));
    let w = rng.gen_range(24..260);
    let h = rng.gen_range(24..200);
    if blank {
        let base = if rng.gen_bool(0.4) {
            [rng.gen_range(235.0..255.0); 3]
        } else {
            render::random_color(&mut rng, 0.05, 1.0)
        };
        let mut c = Canvas::new(w, h, base);
        if rng.gen_bool(0.3) {
            let g = rng.gen_range(-12.0..12.0);
            for y in 0..h {
                for x in 0..w {
                    let t = y as f64 / h as f64 * g;
                    c.set(x, y, base.map(|v| v + t));
                }
            }
        }
        let amp = rng.gen_range(0.5..3.0);
        add_noise(&mut c, &mut rng, amp);
        c.to_raster()
    } else if rng.gen_bool(0.75) {
        let mut c = render_scene(&mut rng, w, h, (2, 6));
        add_noise(&mut c, &mut rng, 2.0);
        c.to_raster()
    } else {
        let ground = render::random_color(&mut rng, 0.3, 0.8);
        let mut c = Canvas::new(w, h, ground);
        let side = w.min(h).max(8);
        let sprite = render_sprite(&mut rng, side);
        c.paste(&sprite.canvas, Some(&sprite.alpha), (w - side) / 2, (h - side) / 2);
        add_noise(&mut c, &mut rng, 2.0);
        c.to_raster()
    }
}

fn blank_labels(p: &CorpusParams) -> Vec<bool> {
    let n_blank = (p.blank_segments as f64 * p.blank_fraction).round() as usize;
    // spread blanks evenly through the index range
    (0..p.blank_segments)
        .map(|i| (i * n_blank) / p.blank_segments != ((i + 1) * n_blank) / p.blank_segments)
        .collect()
}

/// Write `bytes` unless the file already holds them; returns whether it wrote.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("rows serialize");
        out.push(b'\n');
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub references: usize,
    pub pairs_mm: usize,
    pub pairs_tm: usize,
    pub related_mm: usize,
    pub related_tm: usize,
    pub blank_segments: usize,
    pub files_written: usize,
    pub files_unchanged: usize,
}

pub const MANIFEST: &str = "manifest.jsonl";
pub const RECIPES: &str = "recipes.jsonl";
pub const INDEX: &str = "refs/index.jsonl";
pub const BLANK_LABELS: &str = "blank_train/labels.jsonl";
pub const PARAMS_FILE: &str = "corpus.json";

/// Generate the whole corpus under `root`. Files whose bytes would not
/// change are left untouched.
pub fn generate_corpus(root: &Path, p: &CorpusParams) -> Result<CorpusSummary> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let library = generate_references(p)?;
    let plans = [generate_pairs(&library, Task::Mm, p)?, generate_pairs(&library, Task::Tm, p)?];

    let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
    let index: Vec<IndexRow> = library
        .refs
        .iter()
        .map(|r| IndexRow {
            ref_id: r.spec.ref_id.clone(),
            kind: r.spec.kind,
            path: r.spec.path.clone(),
        })
        .collect();
    files.push((root.join(INDEX), jsonl(&index)));
    let pairs: Vec<LabeledPair> = plans.iter().flat_map(|pl| pl.pairs.clone()).collect();
    files.push((root.join(MANIFEST), jsonl(&pairs)));
    let recipes: Vec<&MemeRecipe> = plans.iter().flat_map(|pl| pl.recipes.iter()).collect();
    files.push((root.join(RECIPES), jsonl(&recipes)));
    files.push((
        root.join(PARAMS_FILE),
        (serde_json::to_string_pretty(p).expect("params serialize") + "\n").into_bytes(),
    ));
    let labels = blank_labels(p);
    let label_rows: Vec<SegmentLabelRow> = labels
        .iter()
        .enumerate()
        .map(|(i, &b)| SegmentLabelRow {
            segment_id: format!("seg_{i:04}"),
            path: format!("blank_train/seg_{i:04}.png"),
            label: if b { "blank" } else { "non-blank" }.into(),
        })
        .collect();
    files.push((root.join(BLANK_LABELS), jsonl(&label_rows)));

    let mut written = 0;
    let mut unchanged = 0;
    for (path, bytes) in &files {
        if write_if_changed(path, bytes)? {
            written += 1;
        } else {
            unchanged += 1;
        }
    }
    let tally = |results: Vec<Result<usize>>| -> Result<(usize, usize)> {
        let mut w = 0;
        let mut n = 0;
        for r in results {
            w += r?;
            n += 1;
        }
        Ok((w, n))
    };

    let (w, n) = tally(
        library
            .refs
            .par_iter()
            .map(|r| Ok(write_if_changed(&root.join(&r.spec.path), &r.image.encode_png()?)? as usize))
            .collect(),
    )?;
    written += w;
    unchanged += n - w;

    let (w, n) = tally(
        recipes
            .par_iter()
            .map(|recipe| {
                let (img, mask) = render_meme(recipe, &library)?;
                let path = root.join(&recipe.path);
                let a = write_if_changed(&path, &img.encode_png()?)? as usize;
                let b = write_if_changed(&mask_path_for(&path), &mask.to_raster().encode_png()?)? as usize;
                Ok(a + b)
            })
            .collect(),
    )?;
    written += w;
    unchanged += 2 * n - w;

    let (w, n) = tally(
        label_rows
            .par_iter()
            .zip(labels.par_iter())
            .enumerate()
            .map(|(i, (row, &blank))| {
                let img = render_blank_segment(p.blank_seed, i, blank);
                Ok(write_if_changed(&root.join(&row.path), &img.encode_png()?)? as usize)
            })
            .collect(),
    )?;
    written += w;
    unchanged += n - w;

    let count = |t: Task, rel: bool| {
        pairs
            .iter()
            .filter(|x| x.task == t && (!rel || x.label == Label::Related))
            .count()
    };
    Ok(CorpusSummary {
        references: library.refs.len(),
        pairs_mm: count(Task::Mm, false),
        pairs_tm: count(Task::Tm, false),
        related_mm: count(Task::Mm, true),
        related_tm: count(Task::Tm, true),
        blank_segments: label_rows.len(),
        files_written: written,
        files_unchanged: unchanged,
    })
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Read and validate a pair manifest. Image paths are resolved against the
/// manifest's directory and must exist.
pub fn load_manifest(path: &Path) -> Result<Vec<LabeledPair>> {
    let pairs: Vec<LabeledPair> = read_jsonl(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut checked = HashSet::new();
    for p in &pairs {
        if !seen.insert(p.pair_id.as_str()) {
            return Err(Error::DuplicatePairId(p.pair_id.clone()));
        }
        for f in [&p.m, &p.r] {
            if checked.insert(f.as_str()) && !root.join(f).is_file() {
                return Err(Error::MissingFile(root.join(f)));
            }
        }
    }
    Ok(pairs)
}

pub fn load_index(root: &Path) -> Result<Vec<IndexRow>> {
    read_jsonl(&root.join(INDEX))
}

pub fn load_recipes(root: &Path) -> Result<Vec<MemeRecipe>> {
    read_jsonl(&root.join(RECIPES))
}

/// Labelled blank-training segments: images and class indices (0 blank, 1 non-blank).
pub fn load_blank_set(labels_path: &Path) -> Result<Vec<(String, RasterImage, usize)>> {
    let rows: Vec<SegmentLabelRow> = read_jsonl(labels_path)?;
    let root = labels_path.parent().and_then(Path::parent).unwrap_or(Path::new("."));
    rows.par_iter()
        .map(|r| {
            let label = match r.label.as_str() {
                "blank" => crate::panelseg::BLANK,
                "non-blank" => crate::panelseg::NON_BLANK,
                other => return Err(Error::Parse(format!("segment label `{other}`"))),
            };
            let path = root.join(&r.path);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Ok((r.segment_id.clone(), decode_image(&bytes)?, label))
        })
        .collect()
}
