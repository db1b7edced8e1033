//! Procedural labeled videos: flat-colored shapes moving over a background,
//! with an exact per-pixel trajectory identifier for every frame.
//!
//! Label 0 is the background; labels `1..=K` name shapes in draw order, so the
//! shape drawn last wins any overlap. Masks are hard pixel sets (a pixel
//! belongs to a shape when its center lies inside the outline).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Upper bound on per-axis shape displacement between consecutive frames,
/// in pixels.
pub const MAX_SPEED: f64 = 2.0;

/// Minimum fraction of a shape's silhouette that must stay visible in every
/// frame; scenes violating it are redrawn.
pub const MIN_VISIBLE_FRACTION: f64 = 0.3;

const MAX_ATTEMPTS: u64 = 64;

const SHAPE_PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.20],
    [0.15, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.80],
    [0.10, 0.85, 0.85],
    [0.95, 0.50, 0.05],
    [0.95, 0.95, 0.95],
];

const BACKGROUND_PALETTE: [[f64; 3]; 4] = [
    [0.20, 0.20, 0.25],
    [0.35, 0.30, 0.25],
    [0.15, 0.25, 0.20],
    [0.30, 0.30, 0.30],
];

const CHECKER_CELL: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionKind {
    Static,
    Linear,
    Sinusoidal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Checker,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [Self::Flat, Self::Gradient, Self::Checker];

    pub fn index(self) -> usize {
        match self {
            Self::Flat => 0,
            Self::Gradient => 1,
            Self::Checker => 2,
        }
    }
}

/// Everything needed to render one video; the seed fixes positions, sizes,
/// colors and motion parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub shapes: Vec<(ShapeKind, MotionKind)>,
    pub background: BackgroundKind,
    /// Shape half-extent range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn shape_count(&self) -> usize {
        self.shapes.len()
    }

    /// Scene with no shapes at all.
    pub fn background_only(
        width: usize,
        height: usize,
        frames: usize,
        background: BackgroundKind,
        seed: u64,
    ) -> Self {
        Self {
            width,
            height,
            frames,
            shapes: Vec::new(),
            background,
            min_size: 1.0,
            max_size: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::invalid(
                "scene needs at least one frame and a non-empty frame",
            ));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::invalid(format!(
                "bad shape size range {}..{}",
                self.min_size, self.max_size
            )));
        }
        if !self.shapes.is_empty() && 2.0 * self.max_size > self.width.min(self.height) as f64 {
            return Err(Error::invalid(format!(
                "shape extent {} exceeds {}×{} frame",
                2.0 * self.max_size,
                self.width,
                self.height
            )));
        }
        if self.shapes.len() > SHAPE_PALETTE.len() {
            return Err(Error::invalid(format!(
                "at most {} shapes per scene",
                SHAPE_PALETTE.len()
            )));
        }
        Ok(())
    }
}

/// Rendered geometry of one shape across the video.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeTrack {
    pub kind: ShapeKind,
    pub motion: MotionKind,
    pub color: [f64; 3],
    /// Half-extents along x and y.
    pub half: (f64, f64),
    /// Center per frame, `(x, y)` in pixel units.
    pub centers: Vec<(f64, f64)>,
}

impl ShapeTrack {
    /// Whether the pixel with center `(px, py)` lies inside the outline at
    /// frame `t`.
    pub fn contains(&self, t: usize, px: f64, py: f64) -> bool {
        let (cx, cy) = self.centers[t];
        let (hx, hy) = self.half;
        match self.kind {
            ShapeKind::Disc => (px - cx).powi(2) + (py - cy).powi(2) <= hx * hx,
            ShapeKind::Rectangle => (px - cx).abs() <= hx && (py - cy).abs() <= hy,
            ShapeKind::Triangle => {
                // apex up, base at the bottom
                let dy = py - (cy - hy);
                if !(0.0..=2.0 * hy).contains(&dy) {
                    return false;
                }
                (px - cx).abs() <= hx * dy / (2.0 * hy)
            }
        }
    }

    pub fn silhouette(&self, t: usize, width: usize, height: usize) -> Vec<bool> {
        let mut m = vec![false; width * height];
        for y in 0..height {
            for x in 0..width {
                m[y * width + x] = self.contains(t, x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub spec: SceneSpec,
    /// `[T×H×W×3]`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// `T·H·W` identifiers, 0 = background.
    pub labels: Vec<u32>,
    pub tracks: Vec<ShapeTrack>,
}

impl LabeledVideo {
    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    pub fn height(&self) -> usize {
        self.spec.height
    }

    pub fn width(&self) -> usize {
        self.spec.width
    }

    /// Class used by the contrastive stand-in objective.
    pub fn scene_class(&self) -> usize {
        self.spec.background.index()
    }

    pub fn label_frame(&self, t: usize) -> &[u32] {
        let n = self.spec.width * self.spec.height;
        &self.labels[t * n..(t + 1) * n]
    }
}

fn draw_track(
    rng: &mut Rng,
    spec: &SceneSpec,
    kind: ShapeKind,
    motion: MotionKind,
    color: [f64; 3],
) -> ShapeTrack {
    let s = rng.uniform_in(spec.min_size, spec.max_size);
    let half = match kind {
        ShapeKind::Rectangle => (s, s * rng.uniform_in(0.6, 1.0)),
        _ => (s, s),
    };
    let (w, h) = (spec.width as f64, spec.height as f64);
    let (lo_x, hi_x) = (half.0, w - half.0);
    let (lo_y, hi_y) = (half.1, h - half.1);
    let steps = spec.frames.saturating_sub(1).max(1) as f64;
    let frames = spec.frames;
    let centers: Vec<(f64, f64)> = match motion {
        MotionKind::Static => {
            let c = (rng.uniform_in(lo_x, hi_x), rng.uniform_in(lo_y, hi_y));
            vec![c; frames]
        }
        MotionKind::Linear => {
            let c0 = (rng.uniform_in(lo_x, hi_x), rng.uniform_in(lo_y, hi_y));
            let mut v = (
                rng.uniform_in(-MAX_SPEED, MAX_SPEED),
                rng.uniform_in(-MAX_SPEED, MAX_SPEED),
            );
            v.0 = v.0.clamp((lo_x - c0.0) / steps, (hi_x - c0.0) / steps);
            v.1 = v.1.clamp((lo_y - c0.1) / steps, (hi_y - c0.1) / steps);
            (0..frames)
                .map(|t| (c0.0 + v.0 * t as f64, c0.1 + v.1 * t as f64))
                .collect()
        }
        MotionKind::Sinusoidal => {
            let omega = rng.uniform_in(0.3, 0.9);
            let max_amp = MAX_SPEED / omega;
            let amp = (
                rng.uniform_in(0.0, max_amp.min((hi_x - lo_x) / 2.0)),
                rng.uniform_in(0.0, max_amp.min((hi_y - lo_y) / 2.0)),
            );
            let c = (
                rng.uniform_in(lo_x + amp.0, hi_x - amp.0),
                rng.uniform_in(lo_y + amp.1, hi_y - amp.1),
            );
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            (0..frames)
                .map(|t| {
                    let a = omega * t as f64 + phase;
                    (c.0 + amp.0 * a.sin(), c.1 + amp.1 * a.cos())
                })
                .collect()
        }
    };
    ShapeTrack {
        kind,
        motion,
        color,
        half,
        centers,
    }
}

fn background_pixel(
    kind: BackgroundKind,
    colors: &[[f64; 3]; 2],
    horizontal: bool,
    x: usize,
    y: usize,
    w: usize,
    h: usize,
) -> [f64; 3] {
    match kind {
        BackgroundKind::Flat => colors[0],
        BackgroundKind::Gradient => {
            let u = if horizontal {
                (x as f64 + 0.5) / w as f64
            } else {
                (y as f64 + 0.5) / h as f64
            };
            std::array::from_fn(|c| colors[0][c] * (1.0 - u) + colors[1][c] * u)
        }
        BackgroundKind::Checker => colors[(x / CHECKER_CELL + y / CHECKER_CELL) % 2],
    }
}

/// Renders a scene. Identical specs give bit-identical videos.
pub fn generate(spec: &SceneSpec) -> Result<LabeledVideo> {
    spec.validate()?;
    let (w, h, t_len) = (spec.width, spec.height, spec.frames);
    let mut rng = Rng::keyed(spec.seed, 0);

    let bg_first = rng.below(BACKGROUND_PALETTE.len() as u64) as usize;
    let bg_second = (bg_first + 1 + rng.below(BACKGROUND_PALETTE.len() as u64 - 1) as usize)
        % BACKGROUND_PALETTE.len();
    let bg_colors = [BACKGROUND_PALETTE[bg_first], BACKGROUND_PALETTE[bg_second]];
    let horizontal = rng.below(2) == 0;

    let mut palette: Vec<usize> = (0..SHAPE_PALETTE.len()).collect();
    rng.shuffle(&mut palette);

    let mut tracks = Vec::new();
    let mut labels = Vec::new();
    for attempt in 0..MAX_ATTEMPTS {
        tracks = spec
            .shapes
            .iter()
            .zip(&palette)
            .map(|(&(kind, motion), &c)| draw_track(&mut rng, spec, kind, motion, SHAPE_PALETTE[c]))
            .collect();
        let (lab, ok) = rasterize(&tracks, w, h, t_len);
        labels = lab;
        if ok || attempt + 1 == MAX_ATTEMPTS {
            break;
        }
    }

    let mut pixels = vec![0.0; t_len * h * w * 3];
    for t in 0..t_len {
        for y in 0..h {
            for x in 0..w {
                let p = (t * h + y) * w + x;
                let rgb = match labels[p] {
                    0 => background_pixel(spec.background, &bg_colors, horizontal, x, y, w, h),
                    id => tracks[id as usize - 1].color,
                };
                // Single-precision representable, so datasets stored as f32
                // reload bit-identically.
                for (dst, v) in pixels[p * 3..p * 3 + 3].iter_mut().zip(rgb) {
                    *dst = v as f32 as f64;
                }
            }
        }
    }
    Ok(LabeledVideo {
        spec: spec.clone(),
        pixels: Tensor::new(&[t_len, h, w, 3], pixels)?,
        labels,
        tracks,
    })
}

/// Labels with occlusion, plus whether every shape keeps at least
/// [`MIN_VISIBLE_FRACTION`] of its silhouette in every frame.
fn rasterize(tracks: &[ShapeTrack], w: usize, h: usize, frames: usize) -> (Vec<u32>, bool) {
    let mut labels = vec![0u32; frames * w * h];
    let mut ok = true;
    for t in 0..frames {
        let frame = &mut labels[t * w * h..(t + 1) * w * h];
        let mut area = vec![0usize; tracks.len()];
        for (i, track) in tracks.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if track.contains(t, x as f64 + 0.5, y as f64 + 0.5) {
                        frame[y * w + x] = i as u32 + 1;
                        area[i] += 1;
                    }
                }
            }
        }
        let mut visible = vec![0usize; tracks.len()];
        for &l in frame.iter() {
            if l > 0 {
                visible[l as usize - 1] += 1;
            }
        }
        for i in 0..tracks.len() {
            if area[i] == 0 || (visible[i] as f64) < MIN_VISIBLE_FRACTION * area[i] as f64 {
                ok = false;
            }
        }
    }
    (labels, ok)
}

/// Parameters of a generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub videos: usize,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            videos: 200,
            width: 64,
            height: 64,
            frames: 8,
            min_shapes: 3,
            max_shapes: 5,
            min_size: 6.0,
            max_size: 11.0,
            seed: 7,
            holdout_fraction: 0.1,
        }
    }
}

impl DataConfig {
    /// Scene spec of video `index`.
    pub fn scene(&self, index: usize) -> SceneSpec {
        let mut rng = Rng::keyed(self.seed, 1_000_000 + index as u64);
        let count = rng.range(self.min_shapes, self.max_shapes);
        let shapes = (0..count)
            .map(|_| {
                let kind = [ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle]
                    [rng.below(3) as usize];
                let motion = [
                    MotionKind::Static,
                    MotionKind::Linear,
                    MotionKind::Sinusoidal,
                ][rng.below(3) as usize];
                (kind, motion)
            })
            .collect();
        let background = BackgroundKind::ALL[rng.below(3) as usize];
        SceneSpec {
            width: self.width,
            height: self.height,
            frames: self.frames,
            shapes,
            background,
            min_size: self.min_size,
            max_size: self.max_size,
            seed: rng.next_u64(),
        }
    }

    pub fn generate_all(&self) -> Result<Vec<LabeledVideo>> {
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::invalid(format!(
                "bad shape count range {}..={}",
                self.min_shapes, self.max_shapes
            )));
        }
        (0..self.videos).map(|i| generate(&self.scene(i))).collect()
    }
}

/// Seeded partition into `(train, validation)`, each keeping input order.
/// The validation side holds `round(len · holdout_fraction)` items.
pub fn split<T: Clone>(items: &[T], holdout_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout fraction {holdout_fraction} outside (0, 1)"
        )));
    }
    let n_val = ((items.len() as f64 * holdout_fraction).round() as usize).min(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    Rng::keyed(seed, 2).shuffle(&mut order);
    let mut is_val = vec![false; items.len()];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (item, v) in items.iter().zip(is_val) {
        if v {
            val.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, val))
}

/// Per-cell majority label on a grid `factor` times coarser; ties go to the
/// smaller label.
pub fn downsample_labels(
    labels: &[u32],
    frames: usize,
    height: usize,
    width: usize,
    factor: usize,
) -> Vec<u32> {
    let (h, w) = (height / factor, width / factor);
    let mut out = vec![0u32; frames * h * w];
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for t in 0..frames {
        for i in 0..h {
            for j in 0..w {
                counts.clear();
                for dy in 0..factor {
                    for dx in 0..factor {
                        let l = labels[(t * height + i * factor + dy) * width + j * factor + dx];
                        match counts.iter_mut().find(|(k, _)| *k == l) {
                            Some((_, c)) => *c += 1,
                            None => counts.push((l, 1)),
                        }
                    }
                }
                let best = counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|&(l, _)| l)
                    .unwrap_or(0);
                out[(t * h + i) * w + j] = best;
            }
        }
    }
    out
}

/// Binary masks, one per distinct label present, ordered by label.
pub fn region_masks(labels: &[u32]) -> (Vec<u32>, Vec<Vec<bool>>) {
    let mut ids: Vec<u32> = labels.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let masks = ids
        .iter()
        .map(|&id| labels.iter().map(|&l| l == id).collect())
        .collect();
    (ids, masks)
}

/// One stored video: pixels, per-pixel labels and its scene class.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub pixels: Tensor,
    pub labels: Vec<u32>,
    pub scene_class: usize,
}

impl From<&LabeledVideo> for VideoRecord {
    fn from(v: &LabeledVideo) -> Self {
        Self {
            pixels: v.pixels.clone(),
            labels: v.labels.clone(),
            scene_class: v.scene_class(),
        }
    }
}
