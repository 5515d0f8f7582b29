//! Location prediction for tracked boxes: identity and flow-assisted
//! prediction, plus a block-matching dense flow estimator.

use thiserror::Error;

use crate::geometry::BBox;
use crate::raster::Raster;
use crate::scalar::Real;
use crate::FrameId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MotionError {
    #[error("flow field: {0}")]
    InvalidField(String),
    #[error("box lies entirely outside the frame")]
    BoxOutsideFrame,
    #[error("block matching configuration: {0}")]
    Config(String),
    #[error("flow unavailable for frame {frame}: {reason}")]
    Unavailable { frame: FrameId, reason: String },
}

/// Dense displacement field between two consecutive frames.
///
/// Displacements are stored in field-cell units; sampling converts them to
/// frame pixels by the field-to-frame scale factor of each axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    width: usize,
    height: usize,
    dx: Vec<T>,
    dy: Vec<T>,
    frame_w: T,
    frame_h: T,
}

impl<T: Real> FlowField<T> {
    pub fn new(
        width: usize,
        height: usize,
        dx: Vec<T>,
        dy: Vec<T>,
        frame_w: T,
        frame_h: T,
    ) -> Result<Self, MotionError> {
        if width == 0 || height == 0 {
            return Err(MotionError::InvalidField("empty field".into()));
        }
        if dx.len() != width * height || dy.len() != width * height {
            return Err(MotionError::InvalidField(format!(
                "expected {} entries per component, got {} and {}",
                width * height,
                dx.len(),
                dy.len()
            )));
        }
        if !(frame_w > T::zero()) || !(frame_h > T::zero()) {
            return Err(MotionError::InvalidField("frame dimensions must be positive".into()));
        }
        if dx.iter().chain(dy.iter()).any(|v| !v.is_finite()) {
            return Err(MotionError::InvalidField("non-finite displacement".into()));
        }
        Ok(Self {
            width,
            height,
            dx,
            dy,
            frame_w,
            frame_h,
        })
    }

    pub fn uniform(width: usize, height: usize, frame_w: T, frame_h: T, d: (T, T)) -> Result<Self, MotionError> {
        let n = width * height;
        Self::new(width, height, vec![d.0; n], vec![d.1; n], frame_w, frame_h)
    }

    pub fn zeros(width: usize, height: usize, frame_w: T, frame_h: T) -> Result<Self, MotionError> {
        Self::uniform(width, height, frame_w, frame_h, (T::zero(), T::zero()))
    }

    /// Builds a field from a per-cell function `(col, row) -> (dx, dy)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        frame_w: T,
        frame_h: T,
        mut f: impl FnMut(usize, usize) -> (T, T),
    ) -> Result<Self, MotionError> {
        let mut dx = Vec::with_capacity(width * height);
        let mut dy = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let (a, b) = f(col, row);
                dx.push(a);
                dy.push(b);
            }
        }
        Self::new(width, height, dx, dy, frame_w, frame_h)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frame_w(&self) -> T {
        self.frame_w
    }

    pub fn frame_h(&self) -> T {
        self.frame_h
    }

    /// Raw displacement of one cell, in field units.
    pub fn at(&self, col: usize, row: usize) -> (T, T) {
        let i = row * self.width + col;
        (self.dx[i], self.dy[i])
    }

    /// Multiplies every displacement by `alpha`.
    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            dx: self.dx.iter().map(|&v| v * alpha).collect(),
            dy: self.dy.iter().map(|&v| v * alpha).collect(),
            ..self.clone()
        }
    }
}

pub fn predict_identity<T: Real>(b: &BBox<T>) -> BBox<T> {
    *b
}

/// Mean displacement (in frame pixels) over the field cells whose centers
/// fall inside `b` clipped to the frame. If the clipped box covers no cell
/// center, the single cell under its center is used.
pub fn mean_flow_in_box<T: Real>(field: &FlowField<T>, b: &BBox<T>) -> Result<(T, T), MotionError> {
    let x0 = b.x().max(T::zero());
    let y0 = b.y().max(T::zero());
    let x1 = b.right().min(field.frame_w);
    let y1 = b.bottom().min(field.frame_h);
    if !(x1 > x0) || !(y1 > y0) {
        return Err(MotionError::BoxOutsideFrame);
    }
    let sx = T::count(field.width) / field.frame_w;
    let sy = T::count(field.height) / field.frame_h;
    let cols = covered_cells(x0 * sx, x1 * sx, field.width);
    let rows = covered_cells(y0 * sy, y1 * sy, field.height);

    let (cols, rows) = match (cols, rows) {
        (Some(c), Some(r)) => (c, r),
        _ => {
            let two = T::lit(2.0);
            let nearest = |c: T, n: usize| {
                let f = c.floor();
                if f < T::zero() {
                    0
                } else {
                    f.to_usize().unwrap_or(n - 1).min(n - 1)
                }
            };
            let c = nearest((x0 + x1) / two * sx, field.width);
            let r = nearest((y0 + y1) / two * sy, field.height);
            ((c, c), (r, r))
        }
    };

    let mut sum_x = T::zero();
    let mut sum_y = T::zero();
    for row in rows.0..=rows.1 {
        let base = row * field.width;
        for i in base + cols.0..=base + cols.1 {
            sum_x = sum_x + field.dx[i];
            sum_y = sum_y + field.dy[i];
        }
    }
    let n = T::count((cols.1 - cols.0 + 1) * (rows.1 - rows.0 + 1));
    Ok((sum_x / n / sx, sum_y / n / sy))
}

/// Indices `i` whose center `i + 0.5` lies in `[lo, hi)`.
fn covered_cells<T: Real>(lo: T, hi: T, n: usize) -> Option<(usize, usize)> {
    let half = T::lit(0.5);
    let first = (lo - half).ceil().max(T::zero());
    let last = ((hi - half).ceil() - T::one()).min(T::count(n - 1));
    if last < first {
        return None;
    }
    Some((first.to_usize()?, last.to_usize()?))
}

/// Shifts `b` by the mean flow inside it; size is unchanged.
pub fn predict_flow<T: Real>(b: &BBox<T>, field: &FlowField<T>) -> Result<BBox<T>, MotionError> {
    let (dx, dy) = mean_flow_in_box(field, b)?;
    Ok(b.shift(dx, dy))
}

/// Source of dense flow between frame `t` and `t + 1`.
pub trait FlowProvider<T: Real> {
    fn flow(&self, frame: FrameId) -> Result<FlowField<T>, MotionError>;
}

/// Supplies grayscale frames to image-based flow estimators.
pub trait RasterSource {
    fn raster(&self, frame: FrameId) -> Result<Raster, MotionError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockMatchParams {
    pub block_size: usize,
    pub search_radius: usize,
    pub grid_step: usize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self {
            block_size: 16,
            search_radius: 8,
            grid_step: 8,
        }
    }
}

/// Sum of absolute differences between the `bs`-square block at `at` in
/// `prev` and the block displaced by `d` in `next`, with wraparound. Stops
/// early once the sum exceeds `bound`, returning a value above it.
fn block_sad(prev: &Raster, next: &Raster, at: (i64, i64), d: (i64, i64), bs: i64, bound: u64) -> u64 {
    let (w, h) = (prev.width() as i64, prev.height() as i64);
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x + bs <= w && y + bs <= h;
    let mut sad = 0u64;
    if inside(at.0, at.1) && inside(at.0 + d.0, at.1 + d.1) {
        let (pa, pb) = (prev.data(), next.data());
        for v in 0..bs {
            let ra = ((at.1 + v) * w + at.0) as usize;
            let rb = ((at.1 + d.1 + v) * w + at.0 + d.0) as usize;
            let n = bs as usize;
            sad += pa[ra..ra + n]
                .iter()
                .zip(&pb[rb..rb + n])
                .map(|(&a, &b)| a.abs_diff(b) as u64)
                .sum::<u64>();
            if sad > bound {
                return sad;
            }
        }
        return sad;
    }
    for v in 0..bs {
        for u in 0..bs {
            let a = prev.get_wrapped(at.0 + u, at.1 + v);
            let b = next.get_wrapped(at.0 + u + d.0, at.1 + v + d.1);
            sad += a.abs_diff(b) as u64;
        }
        if sad > bound {
            return sad;
        }
    }
    sad
}

/// Exhaustive SAD block matching on an integer search window.
///
/// The field has one cell per `grid_step x grid_step` tile. Each cell
/// matches a `block_size` block centred on its tile; samples outside the
/// frame wrap around. Ties prefer the smaller displacement, then the
/// lexicographically smaller `(dx, dy)`.
pub fn block_matching_flow<T: Real>(
    prev: &Raster,
    next: &Raster,
    params: BlockMatchParams,
) -> Result<FlowField<T>, MotionError> {
    let (w, h) = (prev.width(), prev.height());
    if next.width() != w || next.height() != h {
        return Err(MotionError::Config(format!(
            "raster sizes differ: {w}x{h} vs {}x{}",
            next.width(),
            next.height()
        )));
    }
    let BlockMatchParams {
        block_size,
        search_radius,
        grid_step,
    } = params;
    if block_size == 0 || grid_step == 0 {
        return Err(MotionError::Config("block size and grid step must be positive".into()));
    }
    if block_size > w || block_size > h {
        return Err(MotionError::Config(format!("block size {block_size} exceeds frame {w}x{h}")));
    }
    if w % grid_step != 0 || h % grid_step != 0 {
        return Err(MotionError::Config(format!("grid step {grid_step} must divide frame {w}x{h}")));
    }
    let (fw, fh) = (w / grid_step, h / grid_step);
    let r = search_radius as i64;
    let bs = block_size as i64;
    let step = T::count(grid_step);
    // candidates in tie-break order (shorter displacement first), so a
    // later candidate only wins with a strictly smaller SAD
    let mut offsets: Vec<(i64, i64)> = (-r..=r).flat_map(|a| (-r..=r).map(move |b| (a, b))).collect();
    offsets.sort_by_key(|&(a, b)| (a * a + b * b, a, b));
    let mut dx = Vec::with_capacity(fw * fh);
    let mut dy = Vec::with_capacity(fw * fh);
    for row in 0..fh {
        for col in 0..fw {
            let bx = (col * grid_step + grid_step / 2) as i64 - bs / 2;
            let by = (row * grid_step + grid_step / 2) as i64 - bs / 2;
            let mut best: Option<(u64, i64, i64)> = None;
            for &(cand_dx, cand_dy) in &offsets {
                let bound = match best {
                    Some((0, ..)) => break,
                    Some((s, ..)) => s - 1,
                    None => u64::MAX,
                };
                let sad = block_sad(prev, next, (bx, by), (cand_dx, cand_dy), bs, bound);
                if sad <= bound {
                    best = Some((sad, cand_dx, cand_dy));
                }
            }
            let (_, bdx, bdy) = best.expect("non-empty search window");
            dx.push(T::lit(bdx as f64) / step);
            dy.push(T::lit(bdy as f64) / step);
        }
    }
    FlowField::new(fw, fh, dx, dy, T::count(w), T::count(h))
}

/// Block-matching flow over rasters from a [`RasterSource`].
pub struct BlockMatchingProvider<S> {
    pub source: S,
    pub params: BlockMatchParams,
}

impl<T: Real, S: RasterSource> FlowProvider<T> for BlockMatchingProvider<S> {
    fn flow(&self, frame: FrameId) -> Result<FlowField<T>, MotionError> {
        let prev = self.source.raster(frame)?;
        let next = self.source.raster(frame + 1)?;
        block_matching_flow(&prev, &next, self.params)
    }
}
