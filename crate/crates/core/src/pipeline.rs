//! The two-stage online pipeline: tracklet generation followed by optional
//! appearance linking, one frame at a time.

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::anchors::AnchorGrid;
use crate::detector::DetectorBackend;
use crate::generator::{Generator, GeneratorConfig, GeneratorError};
use crate::geometry::BBox;
use crate::linker::{EmbeddingProvider, LinkConfig, LinkError, Linker};
use crate::motion::FlowProvider;
use crate::FrameId;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("empty frame range")]
    EmptyRange,
}

/// One output row in MOTChallenge result order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultRow {
    pub frame: FrameId,
    pub id: u32,
    pub bbox: BBox<f64>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub frame: FrameId,
    /// Active tracklets when the frame started.
    pub active_at_entry: usize,
    pub queries: usize,
    pub extended: usize,
    pub terminated: usize,
    pub born: usize,
    pub flow_fallback: bool,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    /// Sorted by `(frame, id)`.
    pub rows: Vec<ResultRow>,
    pub frames: Vec<FrameStats>,
    pub tracklets: usize,
    pub tracks: Option<usize>,
}

impl PipelineOutput {
    pub fn total_terminations(&self) -> usize {
        self.frames.iter().map(|f| f.terminated).sum()
    }
}

/// Appearance linking settings for [`run`].
pub struct Linking<'a> {
    pub config: LinkConfig,
    pub embeddings: &'a dyn EmbeddingProvider,
}

/// Runs the pipeline over `first..=last`. Emitted ids are track ids when
/// `linking` is set and tracklet ids otherwise.
pub fn run<B: DetectorBackend<f64>>(
    grid: &AnchorGrid<f64>,
    backend: B,
    cfg: GeneratorConfig,
    flow: Option<&dyn FlowProvider<f64>>,
    linking: Option<Linking<'_>>,
    first: FrameId,
    last: FrameId,
) -> Result<PipelineOutput, PipelineError> {
    if last < first {
        return Err(PipelineError::EmptyRange);
    }
    let mut gen = Generator::new(grid, backend, cfg, flow)?;
    let mut linker = match &linking {
        Some(l) => Some(Linker::new(l.config.clone())?),
        None => None,
    };
    let mut rows = Vec::new();
    let mut frames = Vec::new();
    for frame in first..=last {
        let active_at_entry = gen.active_ids().len();
        let start = Instant::now();
        let res = if frame == first { gen.init(frame)? } else { gen.step(frame)? };

        let mut ids: Vec<(u32, BBox<f64>, f64)> = Vec::with_capacity(res.extended.len() + res.born.len());
        match (&mut linker, &linking) {
            (Some(lk), Some(cfg)) => {
                for &t in &res.terminated {
                    lk.on_tracklet_terminated(t, frame)?;
                }
                let new: Vec<_> = res
                    .born
                    .iter()
                    .map(|(t, b, _)| (*t, cfg.embeddings.embed(frame, b)))
                    .collect();
                lk.observe(&new, frame)?;
                for (t, b, _) in &res.extended {
                    if lk.refresh_due(*t, frame) {
                        if let Some(e) = cfg.embeddings.embed(frame, b) {
                            lk.refresh(*t, &e)?;
                        }
                    }
                }
                for &(t, b, c) in res.extended.iter().chain(&res.born) {
                    ids.push((lk.track_of(t).expect("observed tracklet"), b, c));
                }
            }
            _ => ids.extend(res.extended.iter().chain(&res.born).copied()),
        }
        let elapsed = start.elapsed();

        rows.extend(ids.into_iter().map(|(id, bbox, confidence)| ResultRow {
            frame,
            id,
            bbox,
            confidence,
        }));
        frames.push(FrameStats {
            frame,
            active_at_entry,
            queries: res.diagnostics.queries,
            extended: res.extended.len(),
            terminated: res.terminated.len(),
            born: res.born.len(),
            flow_fallback: res.diagnostics.flow_fallback,
            elapsed,
        });
    }
    rows.sort_by_key(|r| (r.frame, r.id));
    Ok(PipelineOutput {
        rows,
        frames,
        tracklets: gen.tracklets().len(),
        tracks: linker.map(|l| l.tracks().len()),
    })
}
