//! Synthetic ground-truth scenes: moving boxes with occlusion, entry/exit,
//! jumps and shot changes, per-identity embeddings, rendered rasters and an
//! exact flow field derived from the true motion.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::BBox;
use crate::motion::{FlowField, FlowProvider, MotionError, RasterSource};
use crate::noise::{self, Stream};
use crate::raster::Raster;
use crate::scalar::Real;
use crate::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("invalid scene configuration `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("frame {frame} out of range 1..={frames}")]
    FrameOutOfRange { frame: FrameId, frames: usize },
    #[error("could not draw {n} identity embeddings with pairwise distance >= {min}")]
    Embeddings { n: usize, min: f64 },
}

fn cfg_err(field: &'static str, msg: impl Into<String>) -> SceneError {
    SceneError::Config { field, msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// Every object moves over the whole frame.
    #[default]
    Free,
    /// The frame is split into one tile per object and each object stays in
    /// its tile, so objects never overlap.
    Tiled,
}

/// Explicit initial state of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectInit {
    pub bbox: BBox<f64>,
    pub velocity: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    /// Number of random objects; ignored when `objects` is non-empty.
    pub n_objects: usize,
    pub frames: usize,
    pub frame_w: f64,
    pub frame_h: f64,
    /// Object width range in pixels.
    pub size_range: (f64, f64),
    /// Height / width range.
    pub aspect_range: (f64, f64),
    pub velocity_x: (f64, f64),
    pub velocity_y: (f64, f64),
    /// When set, speed is drawn as a multiple of the object width with a
    /// uniformly random heading, overriding the velocity ranges.
    pub relative_speed: Option<(f64, f64)>,
    pub jitter_sigma: f64,
    pub jump_prob: f64,
    pub jump_magnitude: f64,
    pub layout: Layout,
    pub occlusions_per_object: usize,
    pub occlusion_len: (usize, usize),
    /// Probability that an object enters late, and (independently) that it
    /// exits early.
    pub entry_exit_prob: f64,
    pub shot_changes: Vec<FrameId>,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub min_identity_distance: f64,
    pub objects: Vec<ObjectInit>,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_objects: 5,
            frames: 100,
            frame_w: 640.0,
            frame_h: 480.0,
            size_range: (32.0, 96.0),
            aspect_range: (1.0, 1.0),
            velocity_x: (-2.0, 2.0),
            velocity_y: (-2.0, 2.0),
            relative_speed: None,
            jitter_sigma: 0.0,
            jump_prob: 0.0,
            jump_magnitude: 0.0,
            layout: Layout::Tiled,
            occlusions_per_object: 0,
            occlusion_len: (5, 15),
            entry_exit_prob: 0.0,
            shot_changes: Vec::new(),
            embedding_dim: 128,
            embedding_noise: 0.01,
            min_identity_distance: 1.2,
            objects: Vec::new(),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.frames == 0 {
            return Err(cfg_err("frames", "must be at least 1"));
        }
        if !(self.frame_w >= 1.0) || !self.frame_w.is_finite() {
            return Err(cfg_err("frame_w", "must be a finite number >= 1"));
        }
        if !(self.frame_h >= 1.0) || !self.frame_h.is_finite() {
            return Err(cfg_err("frame_h", "must be a finite number >= 1"));
        }
        let range_ok = |r: (f64, f64)| r.0.is_finite() && r.1.is_finite() && r.0 <= r.1;
        if !range_ok(self.size_range) || !(self.size_range.0 > 0.0) {
            return Err(cfg_err("size", "range must be positive and ordered"));
        }
        if !range_ok(self.aspect_range) || !(self.aspect_range.0 > 0.0) {
            return Err(cfg_err("aspect", "range must be positive and ordered"));
        }
        if !range_ok(self.velocity_x) {
            return Err(cfg_err("velocity_x", "range must be finite and ordered"));
        }
        if !range_ok(self.velocity_y) {
            return Err(cfg_err("velocity_y", "range must be finite and ordered"));
        }
        if let Some(r) = self.relative_speed {
            if !range_ok(r) || r.0 < 0.0 {
                return Err(cfg_err("relative_speed", "range must be nonnegative and ordered"));
            }
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(cfg_err("jitter_sigma", "must be nonnegative"));
        }
        for (field, p) in [("jump_prob", self.jump_prob), ("entry_exit_prob", self.entry_exit_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(cfg_err(field, "probability must be in [0, 1]"));
            }
        }
        if !(self.jump_magnitude >= 0.0) {
            return Err(cfg_err("jump_magnitude", "must be nonnegative"));
        }
        if self.occlusion_len.0 == 0 || self.occlusion_len.0 > self.occlusion_len.1 {
            return Err(cfg_err("occlusion_len", "range must be positive and ordered"));
        }
        if self.embedding_dim == 0 {
            return Err(cfg_err("embedding_dim", "must be at least 1"));
        }
        if !(self.embedding_noise >= 0.0) {
            return Err(cfg_err("embedding_noise", "must be nonnegative"));
        }
        if !(self.min_identity_distance >= 0.0) || self.min_identity_distance >= 2.0 {
            return Err(cfg_err("min_identity_distance", "must be in [0, 2)"));
        }
        if let Some(&f) = self.shot_changes.iter().find(|&&f| f < 2 || f as usize > self.frames) {
            return Err(cfg_err("shot_changes", format!("frame {f} outside 2..={}", self.frames)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    Occlusion,
    Exit,
    Entry,
    ShotChange,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SceneEvent {
    pub frame: FrameId,
    pub kind: EventKind,
    /// `None` for scene-wide events.
    pub object: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    /// Indexed by `frame - 1`.
    pub boxes: Vec<Option<BBox<f64>>>,
    pub visibility: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneEmbeddings {
    /// Identity base vectors; per-frame samples add seeded noise.
    Generated {
        bases: BTreeMap<u32, Vec<f64>>,
        noise: f64,
        seed: u64,
    },
    /// Explicit per-(frame, identity) vectors, e.g. read from a sidecar file.
    Table(BTreeMap<(FrameId, u32), Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthScene {
    pub frames: usize,
    pub frame_w: f64,
    pub frame_h: f64,
    pub objects: Vec<SceneObject>,
    pub embeddings: SceneEmbeddings,
    pub seed: u64,
    pub events: Vec<SceneEvent>,
}

pub fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn draw(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

/// Reflects `pos` into `[lo, hi]`, flipping `vel` on every bounce.
fn reflect(mut pos: f64, vel: &mut f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    for _ in 0..64 {
        if pos < lo {
            pos = 2.0 * lo - pos;
            *vel = -*vel;
        } else if pos > hi {
            pos = 2.0 * hi - pos;
            *vel = -*vel;
        } else {
            return pos;
        }
    }
    pos.clamp(lo, hi)
}

#[derive(Clone, Copy)]
struct Region {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

fn regions(cfg: &SceneConfig, n: usize) -> Vec<Region> {
    let whole = Region {
        x0: 0.0,
        y0: 0.0,
        x1: cfg.frame_w,
        y1: cfg.frame_h,
    };
    if cfg.layout == Layout::Free || !cfg.objects.is_empty() || n == 0 {
        return vec![whole; n];
    }
    let cols = ((n as f64 * cfg.frame_w / cfg.frame_h).sqrt().ceil() as usize).clamp(1, n);
    let rows = n.div_ceil(cols);
    let (tw, th) = (cfg.frame_w / cols as f64, cfg.frame_h / rows as f64);
    (0..n)
        .map(|i| {
            let (c, r) = ((i % cols) as f64, (i / cols) as f64);
            Region {
                x0: c * tw,
                y0: r * th,
                x1: (c + 1.0) * tw,
                y1: (r + 1.0) * th,
            }
        })
        .collect()
}

fn identity_bases(cfg: &SceneConfig, n: usize, rng: &mut ChaCha8Rng) -> Result<BTreeMap<u32, Vec<f64>>, SceneError> {
    let mut bases: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut attempts = 0;
    while bases.len() < n {
        attempts += 1;
        if attempts > 10_000 * n.max(1) {
            return Err(SceneError::Embeddings {
                n,
                min: cfg.min_identity_distance,
            });
        }
        let mut v: Vec<f64> = (0..cfg.embedding_dim).map(|_| noise::normal(rng)).collect();
        normalize(&mut v);
        let far = bases.iter().all(|b| {
            b.iter().zip(&v).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt() >= cfg.min_identity_distance
        });
        if far {
            bases.push(v);
        }
    }
    Ok(bases.into_iter().enumerate().map(|(i, v)| (i as u32 + 1, v)).collect())
}

/// Deterministic scene from `cfg` (including its seed).
pub fn generate(cfg: &SceneConfig) -> Result<GroundTruthScene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = if cfg.objects.is_empty() { cfg.n_objects } else { cfg.objects.len() };
    let t_total = cfg.frames;
    let regions = regions(cfg, n);
    let bases = identity_bases(cfg, n, &mut rng)?;
    let mut events = Vec::new();
    for &f in &cfg.shot_changes {
        events.push(SceneEvent {
            frame: f,
            kind: EventKind::ShotChange,
            object: None,
        });
    }

    let mut objects = Vec::with_capacity(n);
    for (i, region) in regions.iter().enumerate() {
        let id = i as u32 + 1;
        let (init, explicit) = match cfg.objects.get(i) {
            Some(o) => ((o.bbox.w(), o.bbox.h(), o.bbox.x(), o.bbox.y(), o.velocity), true),
            None => {
                let rw = region.x1 - region.x0;
                let rh = region.y1 - region.y0;
                let aspect = draw(&mut rng, cfg.aspect_range);
                let mut w = draw(&mut rng, cfg.size_range).min(rw);
                let mut h = w * aspect;
                if h > rh {
                    h = rh;
                    w = (h / aspect).min(rw);
                }
                let x = draw(&mut rng, (region.x0, region.x1 - w));
                let y = draw(&mut rng, (region.y0, region.y1 - h));
                let vel = match cfg.relative_speed {
                    Some(r) => {
                        let speed = draw(&mut rng, r) * w;
                        let theta = rng.random_range(0.0..TAU);
                        (speed * theta.cos(), speed * theta.sin())
                    }
                    None => (draw(&mut rng, cfg.velocity_x), draw(&mut rng, cfg.velocity_y)),
                };
                ((w, h, x, y, vel), false)
            }
        };
        let (w, h, mut x, mut y, (mut vx, mut vy)) = init;

        let (mut start, mut end) = (1usize, t_total);
        if !explicit && cfg.entry_exit_prob > 0.0 {
            if rng.random::<f64>() < cfg.entry_exit_prob {
                start = rng.random_range(1..=(t_total / 3).max(1));
            }
            if rng.random::<f64>() < cfg.entry_exit_prob {
                end = rng.random_range((2 * t_total / 3).max(start)..=t_total);
            }
        }
        if start > 1 {
            events.push(SceneEvent {
                frame: start as FrameId,
                kind: EventKind::Entry,
                object: Some(id),
            });
        }
        if end < t_total {
            events.push(SceneEvent {
                frame: end as FrameId,
                kind: EventKind::Exit,
                object: Some(id),
            });
        }

        let mut visibility = vec![0.0; t_total];
        for v in &mut visibility[start - 1..end] {
            *v = 1.0;
        }
        let mut occluded: Vec<(usize, usize)> = Vec::new();
        for _ in 0..cfg.occlusions_per_object {
            for _attempt in 0..32 {
                let len = rng.random_range(cfg.occlusion_len.0..=cfg.occlusion_len.1);
                // keep at least one visible frame before and after
                if end < start + len + 1 {
                    break;
                }
                let s = rng.random_range(start + 1..=end - len);
                let e = s + len - 1;
                if occluded.iter().all(|&(a, b)| e + 1 < a || s > b + 1) {
                    occluded.push((s, e));
                    events.push(SceneEvent {
                        frame: s as FrameId,
                        kind: EventKind::Occlusion,
                        object: Some(id),
                    });
                    break;
                }
            }
        }
        for &(s, e) in &occluded {
            for v in &mut visibility[s - 1..e] {
                *v = 0.0;
            }
        }

        let (lo_x, hi_x) = (region.x0, region.x1 - w);
        let (lo_y, hi_y) = (region.y0, region.y1 - h);
        let mut boxes = vec![None; t_total];
        for t in start..=end {
            if t > start {
                x += vx;
                y += vy;
                if cfg.jitter_sigma > 0.0 {
                    x += cfg.jitter_sigma * noise::normal(&mut rng);
                    y += cfg.jitter_sigma * noise::normal(&mut rng);
                }
                if cfg.jump_prob > 0.0 && rng.random::<f64>() < cfg.jump_prob {
                    let phi = rng.random_range(0.0..TAU);
                    x += cfg.jump_magnitude * phi.cos();
                    y += cfg.jump_magnitude * phi.sin();
                    events.push(SceneEvent {
                        frame: t as FrameId,
                        kind: EventKind::Jump,
                        object: Some(id),
                    });
                }
                if cfg.shot_changes.contains(&(t as FrameId)) {
                    x = draw(&mut rng, (lo_x, hi_x.max(lo_x)));
                    y = draw(&mut rng, (lo_y, hi_y.max(lo_y)));
                }
                if !explicit {
                    x = reflect(x, &mut vx, lo_x, hi_x);
                    y = reflect(y, &mut vy, lo_y, hi_y);
                }
            }
            boxes[t - 1] = Some(BBox::new(x, y, w, h).map_err(|e| cfg_err("size", e.to_string()))?);
        }
        objects.push(SceneObject { id, boxes, visibility });
    }
    events.sort();

    Ok(GroundTruthScene {
        frames: t_total,
        frame_w: cfg.frame_w,
        frame_h: cfg.frame_h,
        objects,
        embeddings: SceneEmbeddings::Generated {
            bases,
            noise: cfg.embedding_noise,
            seed: cfg.seed,
        },
        seed: cfg.seed,
        events,
    })
}

/// One row of a ground-truth table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRow {
    pub frame: FrameId,
    pub id: u32,
    pub bbox: BBox<f64>,
    pub visibility: f64,
}

impl GroundTruthScene {
    /// Rebuilds a scene from ground-truth rows (e.g. a MOT gt file).
    pub fn from_rows(
        frames: usize,
        frame_w: f64,
        frame_h: f64,
        rows: &[GtRow],
        embeddings: BTreeMap<(FrameId, u32), Vec<f64>>,
        seed: u64,
    ) -> Result<Self, SceneError> {
        let mut by_id: BTreeMap<u32, SceneObject> = BTreeMap::new();
        for r in rows {
            if r.frame == 0 || r.frame as usize > frames {
                return Err(SceneError::FrameOutOfRange { frame: r.frame, frames });
            }
            let o = by_id.entry(r.id).or_insert_with(|| SceneObject {
                id: r.id,
                boxes: vec![None; frames],
                visibility: vec![0.0; frames],
            });
            o.boxes[r.frame as usize - 1] = Some(r.bbox);
            o.visibility[r.frame as usize - 1] = r.visibility;
        }
        Ok(Self {
            frames,
            frame_w,
            frame_h,
            objects: by_id.into_values().collect(),
            embeddings: SceneEmbeddings::Table(embeddings),
            seed,
            events: Vec::new(),
        })
    }

    pub fn check_frame(&self, frame: FrameId) -> Result<usize, SceneError> {
        if frame == 0 || frame as usize > self.frames {
            return Err(SceneError::FrameOutOfRange {
                frame,
                frames: self.frames,
            });
        }
        Ok(frame as usize - 1)
    }

    /// Objects present and visible in `frame`, in scene order.
    pub fn visible(&self, frame: FrameId) -> impl Iterator<Item = (u32, BBox<f64>)> + '_ {
        let i = frame as usize - 1;
        self.objects.iter().filter_map(move |o| match (o.boxes.get(i), o.visibility.get(i)) {
            (Some(Some(b)), Some(&v)) if v > 0.0 => Some((o.id, *b)),
            _ => None,
        })
    }

    /// Every present box as a ground-truth row, sorted by (frame, id).
    pub fn gt_rows(&self) -> Vec<GtRow> {
        let mut rows = Vec::new();
        for t in 0..self.frames {
            for o in &self.objects {
                if let Some(b) = o.boxes[t] {
                    rows.push(GtRow {
                        frame: t as FrameId + 1,
                        id: o.id,
                        bbox: b,
                        visibility: o.visibility[t],
                    });
                }
            }
        }
        rows.sort_by_key(|r| (r.frame, r.id));
        rows
    }

    /// Appearance embedding of identity `id` as observed in `frame`.
    pub fn embedding(&self, frame: FrameId, id: u32) -> Option<Vec<f64>> {
        match &self.embeddings {
            SceneEmbeddings::Table(t) => t.get(&(frame, id)).cloned(),
            SceneEmbeddings::Generated { bases, noise: sigma, seed } => {
                let mut v = bases.get(&id)?.clone();
                if *sigma > 0.0 {
                    let mut rng = noise::rng(*seed, Stream::Embedding, &[frame as u64, id as u64]);
                    v.iter_mut().for_each(|x| *x += sigma * noise::normal(&mut rng));
                    normalize(&mut v);
                }
                Some(v)
            }
        }
    }

    pub fn identity_count(&self) -> usize {
        self.objects.len()
    }

    fn raster_dims(&self) -> (usize, usize) {
        (self.frame_w.ceil() as usize, self.frame_h.ceil() as usize)
    }
}

pub const BACKGROUND: u8 = 32;

fn texture(seed: u64, id: u32, u: i64, v: i64) -> u8 {
    let k = noise::key(seed, Stream::Texture, &[id as u64, u as u64, v as u64]);
    64 + (k % 192) as u8
}

/// Pixel index range whose centers fall inside `[lo, hi)`, clipped to `n`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
    a.min(b)..b
}

/// Grayscale rendering: each visible object is a rectangle filled with a
/// per-identity texture attached to the box, on a flat background.
pub fn render_raster(scene: &GroundTruthScene, frame: FrameId) -> Result<Raster, SceneError> {
    scene.check_frame(frame)?;
    let (w, h) = scene.raster_dims();
    let mut r = Raster::new(w, h, BACKGROUND);
    for (id, b) in scene.visible(frame) {
        for py in pixel_span(b.y(), b.bottom(), h) {
            let v = (py as f64 + 0.5 - b.y()).floor() as i64;
            for px in pixel_span(b.x(), b.right(), w) {
                let u = (px as f64 + 0.5 - b.x()).floor() as i64;
                r.set(px, py, texture(scene.seed, id, u, v));
            }
        }
    }
    Ok(r)
}

/// Exact pixel-resolution flow from `frame` to `frame + 1`: each visible
/// object's true displacement inside its box, zero elsewhere; later objects
/// overwrite earlier ones where boxes overlap.
pub fn oracle_flow(scene: &GroundTruthScene, frame: FrameId) -> Result<FlowField<f64>, SceneError> {
    let t = scene.check_frame(frame)?;
    if t + 1 >= scene.frames {
        return Err(SceneError::FrameOutOfRange {
            frame: frame + 1,
            frames: scene.frames,
        });
    }
    let (w, h) = scene.raster_dims();
    let (sx, sy) = (w as f64 / scene.frame_w, h as f64 / scene.frame_h);
    let mut dx = vec![0.0; w * h];
    let mut dy = vec![0.0; w * h];
    for o in &scene.objects {
        let (Some(a), Some(b)) = (o.boxes[t], o.boxes[t + 1]) else { continue };
        if o.visibility[t] <= 0.0 {
            continue;
        }
        let (mx, my) = ((b.x() - a.x()) * sx, (b.y() - a.y()) * sy);
        for py in pixel_span(a.y() * sy, a.bottom() * sy, h) {
            for px in pixel_span(a.x() * sx, a.right() * sx, w) {
                dx[py * w + px] = mx;
                dy[py * w + px] = my;
            }
        }
    }
    FlowField::new(w, h, dx, dy, scene.frame_w, scene.frame_h)
        .map_err(|e| SceneError::Config { field: "frame_w", msg: e.to_string() })
}

/// [`FlowProvider`] backed by [`oracle_flow`].
pub struct OracleFlow<'a> {
    pub scene: &'a GroundTruthScene,
}

impl<T: Real> FlowProvider<T> for OracleFlow<'_> {
    fn flow(&self, frame: FrameId) -> Result<FlowField<T>, MotionError> {
        let f = oracle_flow(self.scene, frame).map_err(|e| MotionError::Unavailable {
            frame,
            reason: e.to_string(),
        })?;
        if let Some(field) = (&f as &dyn std::any::Any).downcast_ref::<FlowField<T>>() {
            return Ok(field.clone());
        }
        FlowField::from_fn(f.width(), f.height(), T::lit(f.frame_w()), T::lit(f.frame_h()), |c, r| {
            let (a, b) = f.at(c, r);
            (T::lit(a), T::lit(b))
        })
    }
}

/// [`RasterSource`] rendering frames from a scene.
pub struct SceneRasters<'a> {
    pub scene: &'a GroundTruthScene,
}

impl RasterSource for SceneRasters<'_> {
    fn raster(&self, frame: FrameId) -> Result<Raster, MotionError> {
        render_raster(self.scene, frame).map_err(|e| MotionError::Unavailable {
            frame,
            reason: e.to_string(),
        })
    }
}
