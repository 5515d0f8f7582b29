//! The detector's anchor grid, tracking-anchor assignment, and aggregation
//! of per-anchor outputs into a single redetection.
//!
//! Anchor ids enumerate `(level, row, col, scale, ratio)` in that nesting
//! order, so lower levels and earlier cells always have lower ids.

use thiserror::Error;

use crate::geometry::{iou, BBox};
use crate::scalar::Real;

pub type AnchorId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("grid configuration: {0}")]
    Config(String),
    #[error("tracking anchor count must be at least 1")]
    ZeroK,
    #[error("no output for assigned anchor {0}")]
    MissingOutput(AnchorId),
    #[error("tracking anchor weights sum to zero")]
    ZeroWeight,
    #[error("invalid tracking anchor set: {0}")]
    InvalidSet(String),
}

/// One pyramid level of the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelConfig<T> {
    pub stride: T,
    pub feature_w: usize,
    pub feature_h: usize,
    pub scales: Vec<T>,
    pub aspect_ratios: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridConfig<T> {
    pub frame_w: T,
    pub frame_h: T,
    pub levels: Vec<LevelConfig<T>>,
}

/// Strides of the default pyramid.
pub const DEFAULT_STRIDES: [f64; 4] = [4.0, 8.0, 16.0, 32.0];
/// Anchor scales of the default pyramid, as multiples of the level stride.
pub const DEFAULT_SCALE_MULTIPLIERS: [f64; 2] = [6.0, 6.0 * std::f64::consts::SQRT_2];

impl<T: Real> GridConfig<T> {
    /// Builds one level per stride, with feature maps covering the frame
    /// (`ceil(frame / stride)` cells) and scales `stride * multiplier`.
    pub fn from_strides(
        frame_w: T,
        frame_h: T,
        strides: &[T],
        scale_multipliers: &[T],
        aspect_ratios: &[T],
    ) -> Self {
        let levels = strides
            .iter()
            .map(|&stride| LevelConfig {
                stride,
                feature_w: feature_cells(frame_w, stride),
                feature_h: feature_cells(frame_h, stride),
                scales: scale_multipliers.iter().map(|&m| m * stride).collect(),
                aspect_ratios: aspect_ratios.to_vec(),
            })
            .collect();
        Self { frame_w, frame_h, levels }
    }

    /// Four-level pyramid (strides 4 to 32, two scales per octave, square
    /// anchors) used when a run does not configure its own grid.
    pub fn default_for_frame(frame_w: T, frame_h: T) -> Self {
        let strides: Vec<T> = DEFAULT_STRIDES.iter().map(|&s| T::lit(s)).collect();
        let mults: Vec<T> = DEFAULT_SCALE_MULTIPLIERS.iter().map(|&m| T::lit(m)).collect();
        Self::from_strides(frame_w, frame_h, &strides, &mults, &[T::one()])
    }
}

fn feature_cells<T: Real>(frame: T, stride: T) -> usize {
    if !(stride > T::zero()) || !(frame > T::zero()) {
        return 0;
    }
    (frame / stride).ceil().to_usize().unwrap_or(0)
}

/// Position of an anchor inside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AnchorLocation {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub scale: usize,
    pub ratio: usize,
}

#[derive(Debug, Clone)]
struct LevelLayout {
    offset: usize,
    per_cell: usize,
}

/// Immutable set of prior boxes.
#[derive(Debug, Clone)]
pub struct AnchorGrid<T> {
    config: GridConfig<T>,
    layouts: Vec<LevelLayout>,
    anchors: Vec<BBox<T>>,
}

impl<T: Real> AnchorGrid<T> {
    pub fn build(config: GridConfig<T>) -> Result<Self, AnchorError> {
        if !(config.frame_w > T::zero()) || !(config.frame_h > T::zero()) {
            return Err(AnchorError::Config("frame dimensions must be positive".into()));
        }
        if config.levels.is_empty() {
            return Err(AnchorError::Config("at least one level is required".into()));
        }
        let two = T::lit(2.0);
        let half = T::lit(0.5);
        let mut anchors = Vec::new();
        let mut layouts = Vec::with_capacity(config.levels.len());
        for (li, level) in config.levels.iter().enumerate() {
            if !(level.stride > T::zero()) || !level.stride.is_finite() {
                return Err(AnchorError::Config(format!("level {li}: stride must be positive")));
            }
            if level.feature_w == 0 || level.feature_h == 0 {
                return Err(AnchorError::Config(format!("level {li}: feature map must be non-empty")));
            }
            if level.scales.is_empty() || level.scales.iter().any(|s| !(*s > T::zero())) {
                return Err(AnchorError::Config(format!("level {li}: scales must be non-empty and positive")));
            }
            if level.aspect_ratios.is_empty() || level.aspect_ratios.iter().any(|r| !(*r > T::zero())) {
                return Err(AnchorError::Config(format!(
                    "level {li}: aspect ratios must be non-empty and positive"
                )));
            }
            // w = s * sqrt(r), h = s / sqrt(r): area s^2, aspect w/h = r
            let shapes: Vec<(T, T)> = level
                .scales
                .iter()
                .flat_map(|&s| level.aspect_ratios.iter().map(move |&r| (s * r.sqrt(), s / r.sqrt())))
                .collect();
            layouts.push(LevelLayout {
                offset: anchors.len(),
                per_cell: shapes.len(),
            });
            for row in 0..level.feature_h {
                let cy = (T::count(row) + half) * level.stride;
                for col in 0..level.feature_w {
                    let cx = (T::count(col) + half) * level.stride;
                    for &(w, h) in &shapes {
                        let b = BBox::new(cx - w / two, cy - h / two, w, h)
                            .map_err(|e| AnchorError::Config(e.to_string()))?;
                        anchors.push(b);
                    }
                }
            }
        }
        Ok(Self { config, layouts, anchors })
    }

    pub fn config(&self) -> &GridConfig<T> {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn frame_w(&self) -> T {
        self.config.frame_w
    }

    pub fn frame_h(&self) -> T {
        self.config.frame_h
    }

    pub fn anchor(&self, id: AnchorId) -> Option<&BBox<T>> {
        self.anchors.get(id)
    }

    pub fn anchors(&self) -> &[BBox<T>] {
        &self.anchors
    }

    pub fn index_of(&self, loc: AnchorLocation) -> Option<AnchorId> {
        let level = self.config.levels.get(loc.level)?;
        let nr = level.aspect_ratios.len();
        if loc.row >= level.feature_h
            || loc.col >= level.feature_w
            || loc.scale >= level.scales.len()
            || loc.ratio >= nr
        {
            return None;
        }
        let layout = &self.layouts[loc.level];
        let cell = loc.row * level.feature_w + loc.col;
        Some(layout.offset + cell * layout.per_cell + loc.scale * nr + loc.ratio)
    }

    pub fn location(&self, id: AnchorId) -> Option<AnchorLocation> {
        if id >= self.anchors.len() {
            return None;
        }
        let level = self.layouts.iter().rposition(|l| l.offset <= id)?;
        let cfg = &self.config.levels[level];
        let layout = &self.layouts[level];
        let local = id - layout.offset;
        let cell = local / layout.per_cell;
        let shape = local % layout.per_cell;
        let nr = cfg.aspect_ratios.len();
        Some(AnchorLocation {
            level,
            row: cell / cfg.feature_w,
            col: cell % cfg.feature_w,
            scale: shape / nr,
            ratio: shape % nr,
        })
    }

    /// Calls `visit(id, anchor)` for every anchor that overlaps `b` with
    /// positive area. Only the cells that can intersect `b` are touched.
    pub fn for_each_overlapping(&self, b: &BBox<T>, mut visit: impl FnMut(AnchorId, &BBox<T>)) {
        for (li, level) in self.config.levels.iter().enumerate() {
            let layout = &self.layouts[li];
            for shape in 0..layout.per_cell {
                let Some((c0, c1)) = self.axis_range(li, shape, b, Axis::X) else { continue };
                let Some((r0, r1)) = self.axis_range(li, shape, b, Axis::Y) else { continue };
                for row in r0..=r1 {
                    for col in c0..=c1 {
                        let id = layout.offset + (row * level.feature_w + col) * layout.per_cell + shape;
                        let a = &self.anchors[id];
                        if a.intersection_area(b) > T::zero() {
                            visit(id, a);
                        }
                    }
                }
            }
        }
    }

    /// The `k` anchors with the highest positive IoU to `b`, sorted by IoU
    /// descending with ties going to the lower anchor id.
    pub fn top_k_by_iou(&self, b: &BBox<T>, k: usize) -> Vec<(AnchorId, T)> {
        if k == 0 {
            return Vec::new();
        }
        // IoU can never exceed min(area) / max(area); visiting shapes by that
        // bound lets the search stop once no remaining shape can compete.
        let area = b.area();
        let mut shapes: Vec<(T, usize, usize)> = Vec::new();
        for (li, layout) in self.layouts.iter().enumerate() {
            for shape in 0..layout.per_cell {
                let a = self.anchors[layout.offset + shape].area();
                shapes.push((a.min(area) / a.max(area), li, shape));
            }
        }
        shapes.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then((x.1, x.2).cmp(&(y.1, y.2))));
        let slack = T::one() + T::lit(1e-9);

        let mut candidates: Vec<(AnchorId, T)> = Vec::new();
        for (bound, li, shape) in shapes {
            if candidates.len() >= k {
                sort_by_iou(&mut candidates);
                candidates.truncate(k);
                if bound * slack < candidates[k - 1].1 {
                    break;
                }
            }
            let level = &self.config.levels[li];
            let layout = &self.layouts[li];
            // IoU for a fixed anchor shape is increasing in the product of
            // the per-axis overlaps, so the top k cells lie among the k
            // best columns and the k best rows.
            let cols = self.best_axis_cells(li, shape, b, Axis::X, k);
            if cols.is_empty() {
                continue;
            }
            let rows = self.best_axis_cells(li, shape, b, Axis::Y, k);
            for &row in &rows {
                for &col in &cols {
                    let id = layout.offset + (row * level.feature_w + col) * layout.per_cell + shape;
                    let v = iou(&self.anchors[id], b);
                    if v > T::zero() {
                        candidates.push((id, v));
                    }
                }
            }
        }
        sort_by_iou(&mut candidates);
        candidates.truncate(k);
        candidates
    }

    /// Anchor whose center is closest to the center of `b`; ties go to the
    /// lower id.
    pub fn nearest_by_center(&self, b: &BBox<T>) -> AnchorId {
        let (bx, by) = b.center();
        let half = T::lit(0.5);
        let mut best: Option<(T, AnchorId)> = None;
        for (li, level) in self.config.levels.iter().enumerate() {
            let near = |c: T, n: usize| -> Vec<usize> {
                let f = (c / level.stride - half).floor();
                let lo = if f < T::zero() { 0 } else { f.to_usize().unwrap_or(usize::MAX).min(n - 1) };
                if lo + 1 < n {
                    vec![lo, lo + 1]
                } else {
                    vec![lo]
                }
            };
            for row in near(by, level.feature_h) {
                for col in near(bx, level.feature_w) {
                    let id = self.layouts[li].offset + (row * level.feature_w + col) * self.layouts[li].per_cell;
                    let (ax, ay) = self.anchors[id].center();
                    let d = (ax - bx).powi(2) + (ay - by).powi(2);
                    let better = match best {
                        None => true,
                        Some((bd, bid)) => d < bd || (d == bd && id < bid),
                    };
                    if better {
                        best = Some((d, id));
                    }
                }
            }
        }
        best.map(|(_, id)| id).unwrap_or(0)
    }

    fn axis_range(&self, level: usize, shape: usize, b: &BBox<T>, axis: Axis) -> Option<(usize, usize)> {
        let cfg = &self.config.levels[level];
        let n = match axis {
            Axis::X => cfg.feature_w,
            Axis::Y => cfg.feature_h,
        };
        let first = &self.anchors[self.layouts[level].offset + shape];
        let (extent, lo, hi) = match axis {
            Axis::X => (first.w(), b.x(), b.right()),
            Axis::Y => (first.h(), b.y(), b.bottom()),
        };
        let half = extent / T::lit(2.0);
        // cell centers strictly inside (lo - half, hi + half), padded by one
        // cell on each side against rounding
        let start = ((lo - half) / cfg.stride - T::lit(0.5)).floor() - T::one();
        let end = ((hi + half) / cfg.stride - T::lit(0.5)).ceil() + T::one();
        let last = T::count(n - 1);
        if end < T::zero() || start > last {
            return None;
        }
        let s = if start < T::zero() { 0 } else { start.to_usize()? };
        let e = if end > last { n - 1 } else { end.to_usize()? };
        Some((s, e))
    }

    fn best_axis_cells(&self, level: usize, shape: usize, b: &BBox<T>, axis: Axis, k: usize) -> Vec<usize> {
        let Some((s, e)) = self.axis_range(level, shape, b, axis) else { return Vec::new() };
        let cfg = &self.config.levels[level];
        let layout = &self.layouts[level];
        let (stride, lo, hi) = match axis {
            Axis::X => (layout.per_cell, b.x(), b.right()),
            Axis::Y => (cfg.feature_w * layout.per_cell, b.y(), b.bottom()),
        };
        let base = layout.offset + shape;
        let overlap = |i: usize| {
            let a = &self.anchors[base + i * stride];
            match axis {
                Axis::X => a.right().min(hi) - a.x().max(lo),
                Axis::Y => a.bottom().min(hi) - a.y().max(lo),
            }
        };
        if k == 1 {
            // first index wins ties
            let mut best: Option<(usize, T)> = None;
            for i in s..=e {
                let o = overlap(i);
                if o > T::zero() && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((i, o));
                }
            }
            return best.map(|(i, _)| i).into_iter().collect();
        }
        let mut overlaps: Vec<(usize, T)> = (s..=e)
            .filter_map(|i| {
                let o = overlap(i);
                (o > T::zero()).then_some((i, o))
            })
            .collect();
        if overlaps.len() > k {
            // equal overlap means equal IoU in every row (column), and the
            // lower index has the lower id, so index order breaks ties
            overlaps.select_nth_unstable_by(k - 1, |a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            overlaps.truncate(k);
        }
        overlaps.into_iter().map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

fn sort_by_iou<T: Real>(v: &mut [(AnchorId, T)]) {
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
}

/// How tracking anchors are chosen for a predicted box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AssignStrategy {
    /// The single highest-IoU anchor, weight 1.
    #[default]
    Single,
    /// The top-K anchors by IoU, weighted by their IoU.
    Multi,
}

impl std::str::FromStr for AssignStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(Self::Single),
            "multi" => Ok(Self::Multi),
            other => Err(format!("unknown assignment strategy `{other}` (expected single|multi)")),
        }
    }
}

/// Anchors standing in for one tracked object, with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingAnchorSet<T> {
    entries: Vec<(AnchorId, T)>,
    fallback: bool,
}

impl<T: Real> TrackingAnchorSet<T> {
    /// Validates a hand-built set: non-empty, distinct ids, nonnegative
    /// finite weights with at least one positive.
    pub fn new(entries: Vec<(AnchorId, T)>) -> Result<Self, AnchorError> {
        if entries.is_empty() {
            return Err(AnchorError::InvalidSet("empty".into()));
        }
        let mut ids: Vec<_> = entries.iter().map(|e| e.0).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(AnchorError::InvalidSet("duplicate anchor id".into()));
        }
        if entries.iter().any(|e| !(e.1 >= T::zero()) || !e.1.is_finite()) {
            return Err(AnchorError::InvalidSet("weights must be finite and nonnegative".into()));
        }
        if !entries.iter().any(|e| e.1 > T::zero()) {
            return Err(AnchorError::ZeroWeight);
        }
        Ok(Self { entries, fallback: false })
    }

    pub fn entries(&self) -> &[(AnchorId, T)] {
        &self.entries
    }

    pub fn anchor_ids(&self) -> Vec<AnchorId> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// True when no anchor overlapped the predicted box and the
    /// nearest-center anchor was used instead.
    pub fn is_fallback(&self) -> bool {
        self.fallback
    }
}

pub fn assign_tracking_anchors<T: Real>(
    grid: &AnchorGrid<T>,
    predicted: &BBox<T>,
    k: usize,
    strategy: AssignStrategy,
) -> Result<TrackingAnchorSet<T>, AnchorError> {
    if k == 0 {
        return Err(AnchorError::ZeroK);
    }
    let take = match strategy {
        AssignStrategy::Single => 1,
        AssignStrategy::Multi => k,
    };
    let mut entries = grid.top_k_by_iou(predicted, take);
    if entries.is_empty() {
        return Ok(TrackingAnchorSet {
            entries: vec![(grid.nearest_by_center(predicted), T::one())],
            fallback: true,
        });
    }
    if strategy == AssignStrategy::Single {
        entries[0].1 = T::one();
    }
    Ok(TrackingAnchorSet { entries, fallback: false })
}

/// Decoded response of one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorOutput<T> {
    pub anchor_id: AnchorId,
    pub confidence: T,
    pub bbox: BBox<T>,
}

/// Aggregated redetection of one tracked object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Redetection<T> {
    pub bbox: BBox<T>,
    pub confidence: T,
}

/// Normalized weighted mean of the assigned anchors' boxes (per coordinate)
/// and confidences.
///
/// Entries are summed in ascending anchor-id order, so the result does not
/// depend on the order of the set.
pub fn aggregate_redetection<T: Real>(
    set: &TrackingAnchorSet<T>,
    outputs: &[AnchorOutput<T>],
) -> Result<Redetection<T>, AnchorError> {
    let find = |id: AnchorId| {
        outputs
            .iter()
            .find(|o| o.anchor_id == id)
            .ok_or(AnchorError::MissingOutput(id))
    };
    // a one-term mean is the term itself; skip w*v/w rounding
    if let [(id, w)] = set.entries[..] {
        if !(w > T::zero()) {
            return Err(AnchorError::ZeroWeight);
        }
        let out = find(id)?;
        return Ok(Redetection {
            bbox: out.bbox,
            confidence: out.confidence,
        });
    }
    let mut entries = set.entries.clone();
    entries.sort_unstable_by_key(|e| e.0);
    let mut total_w = T::zero();
    let mut acc = [T::zero(); 4];
    let mut conf = T::zero();
    for (id, w) in entries {
        let out = find(id)?;
        total_w = total_w + w;
        for (a, v) in acc.iter_mut().zip(out.bbox.to_array()) {
            *a = *a + w * v;
        }
        conf = conf + w * out.confidence;
    }
    if !(total_w > T::zero()) {
        return Err(AnchorError::ZeroWeight);
    }
    let bbox = BBox::new(acc[0] / total_w, acc[1] / total_w, acc[2] / total_w, acc[3] / total_w)
        .map_err(|e| AnchorError::InvalidSet(e.to_string()))?;
    Ok(Redetection {
        bbox,
        confidence: conf / total_w,
    })
}
