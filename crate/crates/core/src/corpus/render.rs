//! Procedural drawing: scenes, sprites, glyph text.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::imgcore::{resize_bilinear, BBox, GrayImage, RasterImage};

pub type Rgb = [f64; 3];

/// Floating-point RGB canvas.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub w: usize,
    pub h: usize,
    pub px: Vec<Rgb>,
}

impl Canvas {
    pub fn new(w: usize, h: usize, c: Rgb) -> Self {
        Self { w, h, px: vec![c; w * h] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.px[y * self.w + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        self.px[y * self.w + x] = c;
    }

    pub fn fill_rect(&mut self, b: BBox, c: Rgb) {
        for y in b.y..(b.y + b.h).min(self.h) {
            for x in b.x..(b.x + b.w).min(self.w) {
                self.set(x, y, c);
            }
        }
    }

    pub fn map(&mut self, f: impl Fn(Rgb) -> Rgb) {
        self.px.iter_mut().for_each(|p| *p = f(*p));
    }

    pub fn crop(&self, b: BBox) -> Canvas {
        let mut out = Canvas::new(b.w, b.h, [0.0; 3]);
        for y in 0..b.h {
            for x in 0..b.w {
                out.set(x, y, self.get(b.x + x, b.y + y));
            }
        }
        out
    }

    pub fn flip_h(&self) -> Canvas {
        let mut out = self.clone();
        for y in 0..self.h {
            for x in 0..self.w {
                out.set(x, y, self.get(self.w - 1 - x, y));
            }
        }
        out
    }

    pub fn resized(&self, w: usize, h: usize) -> Canvas {
        let chans: Vec<GrayImage<f64>> = (0..3)
            .map(|c| {
                let g = GrayImage::from_fn(self.w, self.h, |x, y| self.get(x, y)[c]);
                resize_bilinear(&g, w, h).expect("non-empty canvas")
            })
            .collect();
        let mut out = Canvas::new(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, [chans[0].get(x, y), chans[1].get(x, y), chans[2].get(x, y)]);
            }
        }
        out
    }

    /// Paste `src` at `(x0, y0)`, blending by `alpha` (one value per source pixel) when given.
    pub fn paste(&mut self, src: &Canvas, alpha: Option<&[f64]>, x0: usize, y0: usize) {
        for y in 0..src.h {
            for x in 0..src.w {
                let (tx, ty) = (x0 + x, y0 + y);
                if tx >= self.w || ty >= self.h {
                    continue;
                }
                let a = alpha.map_or(1.0, |al| al[y * src.w + x]);
                if a <= 0.0 {
                    continue;
                }
                let s = src.get(x, y);
                let d = self.get(tx, ty);
                self.set(tx, ty, [0, 1, 2].map(|c| d[c] * (1.0 - a) + s[c] * a));
            }
        }
    }

    pub fn to_raster(&self) -> RasterImage {
        let data = self
            .px
            .iter()
            .flat_map(|p| p.map(|v| v.round().clamp(0.0, 255.0) as u8))
            .collect();
        RasterImage::new(self.w, self.h, 3, data).expect("canvas dims")
    }
}

pub fn random_color(rng: &mut ChaCha8Rng, v_lo: f64, v_hi: f64) -> Rgb {
    let h = rng.gen_range(0.0..6.0);
    let s = rng.gen_range(0.3..1.0);
    let v = rng.gen_range(v_lo..v_hi);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0f64).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Smooth lattice noise in `[0, 1]`.
pub struct ValueNoise {
    cell: f64,
    gw: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    pub fn new(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: f64) -> Self {
        let gw = (w as f64 / cell) as usize + 2;
        let gh = (h as f64 / cell) as usize + 2;
        Self {
            cell,
            gw,
            lattice: (0..gw * gh).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(fx - ix as f64), s(fy - iy as f64));
        let g = |i: usize, j: usize| self.lattice[j * self.gw + i];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bot = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

#[derive(Clone, Copy, Debug)]
enum ShapeKind {
    Ellipse,
    Rect,
    Triangle,
}

#[derive(Clone, Copy, Debug)]
enum Paint {
    Solid(Rgb),
    Stripes { a: Rgb, b: Rgb, period: f64, angle: f64 },
    Spots { a: Rgb, b: Rgb, cell: f64 },
}

impl Paint {
    fn at(&self, x: f64, y: f64) -> Rgb {
        match *self {
            Paint::Solid(c) => c,
            Paint::Stripes { a, b, period, angle } => {
                let t = x * angle.cos() + y * angle.sin();
                if (t / period).rem_euclid(1.0) < 0.5 {
                    a
                } else {
                    b
                }
            }
            Paint::Spots { a, b, cell } => {
                let (u, v) = ((x / cell).rem_euclid(1.0) - 0.5, (y / cell).rem_euclid(1.0) - 0.5);
                if u * u + v * v < 0.09 {
                    b
                } else {
                    a
                }
            }
        }
    }
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    rot: f64,
    paint: Paint,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rot.sin_cos();
        let (u, v) = ((dx * c + dy * s) / self.rx, (-dx * s + dy * c) / self.ry);
        match self.kind {
            ShapeKind::Ellipse => u * u + v * v <= 1.0,
            ShapeKind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            ShapeKind::Triangle => v <= 1.0 && v >= 2.0 * u.abs() - 1.0,
        }
    }

    fn draw(&self, canvas: &mut Canvas, alpha: Option<&mut [f64]>) {
        let r = self.rx.max(self.ry) * 1.5;
        let x0 = (self.cx - r).floor().max(0.0) as usize;
        let y0 = (self.cy - r).floor().max(0.0) as usize;
        let x1 = ((self.cx + r).ceil().max(0.0) as usize).min(canvas.w);
        let y1 = ((self.cy + r).ceil().max(0.0) as usize).min(canvas.h);
        let mut alpha = alpha;
        for y in y0..y1 {
            for x in x0..x1 {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if self.contains(fx, fy) {
                    canvas.set(x, y, self.paint.at(fx, fy));
                    if let Some(a) = alpha.as_deref_mut() {
                        a[y * canvas.w + x] = 1.0;
                    }
                }
            }
        }
    }
}

fn random_paint(rng: &mut ChaCha8Rng, palette: &[Rgb], scale: f64) -> Paint {
    let a = if rng.gen_bool(0.6) {
        palette[rng.gen_range(0..palette.len())]
    } else {
        random_color(rng, 0.1, 1.0)
    };
    let b = random_color(rng, 0.1, 1.0);
    match rng.gen_range(0..10) {
        0..=4 => Paint::Solid(a),
        5..=7 => Paint::Stripes {
            a,
            b,
            period: rng.gen_range(4.0..12.0) * scale,
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        },
        _ => Paint::Spots {
            a,
            b,
            cell: rng.gen_range(6.0..14.0) * scale,
        },
    }
}

fn random_kind(rng: &mut ChaCha8Rng) -> ShapeKind {
    match rng.gen_range(0..3) {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rect,
        _ => ShapeKind::Triangle,
    }
}

/// Full-bleed scene: noisy two-colour gradient plus several shapes.
pub fn render_scene(rng: &mut ChaCha8Rng, w: usize, h: usize, n_shapes: (usize, usize)) -> Canvas {
    let palette: Vec<Rgb> = (0..3).map(|_| random_color(rng, 0.15, 1.0)).collect();
    let coarse_cell = rng.gen_range(12.0..48.0);
    let noise = ValueNoise::new(rng, w, h, coarse_cell);
    let fine_cell = rng.gen_range(3.0..6.0);
    let fine = ValueNoise::new(rng, w, h, fine_cell);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let amp = rng.gen_range(30.0..70.0);
    let fine_amp = rng.gen_range(4.0..16.0);
    let mut canvas = Canvas::new(w, h, [0.0; 3]);
    let diag = ((w * w + h * h) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let t = (((fx - w as f64 / 2.0) * ca + (fy - h as f64 / 2.0) * sa) / diag + 0.5).clamp(0.0, 1.0);
            let n = (noise.at(fx, fy) - 0.5) * amp + (fine.at(fx, fy) - 0.5) * fine_amp;
            let c = [0, 1, 2].map(|k| palette[0][k] * (1.0 - t) + palette[1][k] * t + n);
            canvas.set(x, y, c);
        }
    }
    let count = rng.gen_range(n_shapes.0..=n_shapes.1);
    let side = w.min(h) as f64;
    for _ in 0..count {
        let shape = Shape {
            kind: random_kind(rng),
            cx: rng.gen_range(0.0..w as f64),
            cy: rng.gen_range(0.0..h as f64),
            rx: rng.gen_range(0.08..0.3) * side,
            ry: rng.gen_range(0.08..0.3) * side,
            rot: rng.gen_range(0.0..std::f64::consts::PI),
            paint: random_paint(rng, &palette, side / 180.0),
        };
        shape.draw(&mut canvas, None);
    }
    canvas
}

/// Sprite on a transparent square of side `side`, with its alpha.
pub struct Sprite {
    pub canvas: Canvas,
    pub alpha: Vec<f64>,
}

impl Sprite {
    pub fn resized(&self, side_w: usize, side_h: usize) -> Sprite {
        let a = GrayImage::from_fn(self.canvas.w, self.canvas.h, |x, y| self.alpha[y * self.canvas.w + x]);
        let a = resize_bilinear(&a, side_w, side_h).expect("non-empty sprite");
        Sprite {
            canvas: self.canvas.resized(side_w, side_h),
            alpha: a.data().to_vec(),
        }
    }

    pub fn flipped(&self) -> Sprite {
        let w = self.canvas.w;
        let mut alpha = self.alpha.clone();
        for y in 0..self.canvas.h {
            for x in 0..w {
                alpha[y * w + x] = self.alpha[y * w + (w - 1 - x)];
            }
        }
        Sprite {
            canvas: self.canvas.flip_h(),
            alpha,
        }
    }
}

/// Compact character: a body with a head, patterned parts and eyes.
pub fn render_sprite(rng: &mut ChaCha8Rng, side: usize) -> Sprite {
    let s = side as f64;
    let mut canvas = Canvas::new(side, side, [0.0; 3]);
    let mut alpha = vec![0.0; side * side];
    let palette: Vec<Rgb> = (0..3).map(|_| random_color(rng, 0.2, 1.0)).collect();
    let body = Shape {
        kind: if rng.gen_bool(0.5) { ShapeKind::Ellipse } else { ShapeKind::Rect },
        cx: s * 0.5,
        cy: s * rng.gen_range(0.55..0.65),
        rx: s * rng.gen_range(0.2..0.32),
        ry: s * rng.gen_range(0.22..0.32),
        rot: rng.gen_range(-0.3..0.3),
        paint: random_paint(rng, &palette, s / 96.0),
    };
    body.draw(&mut canvas, Some(&mut alpha));
    let head_r = s * rng.gen_range(0.13..0.2);
    let head = Shape {
        kind: ShapeKind::Ellipse,
        cx: s * 0.5 + rng.gen_range(-0.08..0.08) * s,
        cy: body.cy - body.ry - head_r * 0.6,
        rx: head_r,
        ry: head_r * rng.gen_range(0.85..1.15),
        rot: 0.0,
        paint: Paint::Solid(palette[rng.gen_range(0..3)]),
    };
    head.draw(&mut canvas, Some(&mut alpha));
    for _ in 0..rng.gen_range(2..5) {
        let part = Shape {
            kind: random_kind(rng),
            cx: s * 0.5 + rng.gen_range(-0.3..0.3) * s,
            cy: body.cy + rng.gen_range(-0.2..0.3) * s,
            rx: s * rng.gen_range(0.04..0.12),
            ry: s * rng.gen_range(0.04..0.15),
            rot: rng.gen_range(0.0..std::f64::consts::PI),
            paint: random_paint(rng, &palette, s / 96.0),
        };
        part.draw(&mut canvas, Some(&mut alpha));
    }
    // asymmetric eyes so a mirrored sprite is not a copy of itself
    let eye_r = head_r * rng.gen_range(0.2..0.3);
    for (dx, scale) in [(-0.4, 1.0), (0.35, rng.gen_range(0.6..0.9))] {
        let cx = head.cx + dx * head_r;
        let cy = head.cy - 0.1 * head_r;
        let white = Shape {
            kind: ShapeKind::Ellipse,
            cx,
            cy,
            rx: eye_r * scale,
            ry: eye_r * scale,
            rot: 0.0,
            paint: Paint::Solid([250.0, 250.0, 250.0]),
        };
        white.draw(&mut canvas, Some(&mut alpha));
        let pupil = Shape {
            rx: eye_r * scale * 0.5,
            ry: eye_r * scale * 0.5,
            cx: cx + eye_r * 0.3,
            paint: Paint::Solid([10.0, 10.0, 10.0]),
            ..white
        };
        pupil.draw(&mut canvas, Some(&mut alpha));
    }
    Sprite { canvas, alpha }
}

/// Adds uniform noise of amplitude `amp` to every channel.
pub fn add_noise(canvas: &mut Canvas, rng: &mut ChaCha8Rng, amp: f64) {
    if amp <= 0.0 {
        return;
    }
    for p in canvas.px.iter_mut() {
        let n = rng.gen_range(-amp..amp);
        *p = p.map(|v| v + n);
    }
}

/// Glyph-like strokes filling `band`: `fill` strokes with an optional one-pixel `outline`.
pub fn draw_text_band(canvas: &mut Canvas, rng: &mut ChaCha8Rng, band: BBox, fill: Rgb, outline: Option<Rgb>) {
    let gh = ((band.h as f64) * 0.7).max(4.0);
    let top = band.y as f64 + (band.h as f64 - gh) / 2.0;
    let t = (gh / 6.0).max(2.0);
    let mut x = band.x as f64 + 2.0;
    let end = (band.x + band.w) as f64 - 2.0;
    while x < end {
        let gw = gh * rng.gen_range(0.4..0.75);
        if x + gw > end {
            break;
        }
        if rng.gen_bool(0.15) {
            x += gw * 0.8;
            continue;
        }
        let strokes: [(f64, f64, f64, f64); 6] = [
            (0.0, 0.0, t, gh),
            (gw - t, 0.0, t, gh),
            (0.0, 0.0, gw, t),
            (0.0, (gh - t) / 2.0, gw, t),
            (0.0, gh - t, gw, t),
            ((gw - t) / 2.0, 0.0, t, gh),
        ];
        let picked: Vec<_> = strokes.iter().filter(|_| rng.gen_bool(0.45)).copied().collect();
        let picked = if picked.is_empty() { vec![strokes[0]] } else { picked };
        let rect = |sx: f64, sy: f64, sw: f64, shh: f64, grow: f64| {
            let x0 = (x + sx - grow).max(band.x as f64) as usize;
            let y0 = (top + sy - grow).max(band.y as f64) as usize;
            let x1 = ((x + sx + sw + grow) as usize).min(band.x + band.w);
            let y1 = ((top + sy + shh + grow) as usize).min(band.y + band.h);
            BBox::new(x0, y0, x1.saturating_sub(x0), y1.saturating_sub(y0))
        };
        if let Some(o) = outline {
            for &(sx, sy, sw, sh) in &picked {
                canvas.fill_rect(rect(sx, sy, sw, sh, 1.0), o);
            }
        }
        for &(sx, sy, sw, sh) in &picked {
            canvas.fill_rect(rect(sx, sy, sw, sh, 0.0), fill);
        }
        x += gw + t;
    }
}
