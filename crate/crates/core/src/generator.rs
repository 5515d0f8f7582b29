//! Tracklet generation by redetection: every active tracklet is predicted
//! into the next frame, read back through its tracking anchors, and kept
//! alive only if the aggregated confidence clears the keep-alive threshold.

use thiserror::Error;

use crate::anchors::{aggregate_redetection, assign_tracking_anchors, AnchorError, AnchorGrid, AssignStrategy};
use crate::detector::{DetectorBackend, DetectorError};
use crate::geometry::{nms, BBox};
use crate::motion::{predict_flow, predict_identity, FlowProvider};
use crate::scalar::Real;
use crate::FrameId;

pub type TrackletId = u32;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("generator configuration: {0}")]
    Config(String),
    #[error("frame {got} out of sequence (expected {expected})")]
    Sequence { expected: FrameId, got: FrameId },
    #[error("generator was already initialized")]
    AlreadyStarted,
    #[error("step called before init")]
    NotStarted,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackletState {
    Active,
    Terminated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet<T> {
    pub id: TrackletId,
    /// One entry per consecutive frame since birth.
    pub boxes: Vec<(FrameId, BBox<T>, T)>,
    pub state: TrackletState,
    pub birth_frame: FrameId,
}

impl<T: Real> Tracklet<T> {
    pub fn last(&self) -> &(FrameId, BBox<T>, T) {
        self.boxes.last().expect("tracklets are born with one box")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub sigma_det: f64,
    pub sigma_active: f64,
    pub nms_redetect: f64,
    pub merge_iou: f64,
    pub k: usize,
    pub strategy: AssignStrategy,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            sigma_det: 0.9,
            sigma_active: 0.4,
            nms_redetect: 0.6,
            merge_iou: 0.3,
            k: 1,
            strategy: AssignStrategy::Single,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        for (name, v) in [
            ("sigma_det", self.sigma_det),
            ("sigma_active", self.sigma_active),
            ("nms_redetect", self.nms_redetect),
            ("merge_iou", self.merge_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(GeneratorError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.k == 0 {
            return Err(GeneratorError::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    /// Non-fatal configuration oddities.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.sigma_det < self.sigma_active {
            w.push(format!(
                "sigma_det {} is below sigma_active {}; fresh detections will be weaker than the keep-alive bar",
                self.sigma_det, self.sigma_active
            ));
        }
        w
    }

    /// Anchors queried per active tracklet.
    pub fn anchors_per_tracklet(&self) -> usize {
        match self.strategy {
            AssignStrategy::Single => 1,
            AssignStrategy::Multi => self.k,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Tracklets redetected through the nearest-center fallback anchor.
    pub anchor_fallback: Vec<TrackletId>,
    /// Tracklets terminated because a stronger redetection overlapped them.
    pub merged: Vec<TrackletId>,
    /// Fresh detections dropped for overlapping a tracked box.
    pub suppressed_detections: usize,
    /// Flow was requested but unavailable; identity prediction was used.
    pub flow_fallback: bool,
    pub queries: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameResult<T> {
    pub frame: FrameId,
    pub extended: Vec<(TrackletId, BBox<T>, T)>,
    pub terminated: Vec<TrackletId>,
    pub born: Vec<(TrackletId, BBox<T>, T)>,
    pub diagnostics: Diagnostics,
}

pub struct Generator<'a, T: Real, B> {
    grid: &'a AnchorGrid<T>,
    backend: B,
    flow: Option<&'a dyn FlowProvider<T>>,
    cfg: GeneratorConfig,
    tracklets: Vec<Tracklet<T>>,
    active: Vec<usize>,
    last_frame: Option<FrameId>,
    last_queries: usize,
}

impl<'a, T: Real, B: DetectorBackend<T>> Generator<'a, T, B> {
    /// `flow` enables flow-assisted prediction; `None` predicts identity.
    pub fn new(
        grid: &'a AnchorGrid<T>,
        backend: B,
        cfg: GeneratorConfig,
        flow: Option<&'a dyn FlowProvider<T>>,
    ) -> Result<Self, GeneratorError> {
        cfg.validate()?;
        Ok(Self {
            grid,
            backend,
            flow,
            cfg,
            tracklets: Vec::new(),
            active: Vec::new(),
            last_frame: None,
            last_queries: 0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    /// All tracklets ever created, indexed by `id - 1`.
    pub fn tracklets(&self) -> &[Tracklet<T>] {
        &self.tracklets
    }

    pub fn tracklet(&self, id: TrackletId) -> Option<&Tracklet<T>> {
        self.tracklets.get((id as usize).checked_sub(1)?)
    }

    pub fn active_ids(&self) -> Vec<TrackletId> {
        self.active.iter().map(|&i| self.tracklets[i].id).collect()
    }

    /// Anchor queries issued by the last `step` (0 after `init`).
    pub fn backend_query_count(&self) -> usize {
        self.last_queries
    }

    pub fn last_frame(&self) -> Option<FrameId> {
        self.last_frame
    }

    fn spawn(&mut self, frame: FrameId, bbox: BBox<T>, conf: T) -> TrackletId {
        let id = self.tracklets.len() as TrackletId + 1;
        self.tracklets.push(Tracklet {
            id,
            boxes: vec![(frame, bbox, conf)],
            state: TrackletState::Active,
            birth_frame: frame,
        });
        self.active.push(self.tracklets.len() - 1);
        id
    }

    /// Starts tracking at `frame`: one tracklet per fresh detection.
    pub fn init(&mut self, frame: FrameId) -> Result<FrameResult<T>, GeneratorError> {
        if self.last_frame.is_some() {
            return Err(GeneratorError::AlreadyStarted);
        }
        let dets = self.backend.detect(frame)?;
        let mut res = FrameResult {
            frame,
            ..FrameResult::default()
        };
        for d in dets {
            let id = self.spawn(frame, d.bbox, d.confidence);
            res.born.push((id, d.bbox, d.confidence));
        }
        self.last_frame = Some(frame);
        self.last_queries = 0;
        Ok(res)
    }

    pub fn step(&mut self, frame: FrameId) -> Result<FrameResult<T>, GeneratorError> {
        let prev = self.last_frame.ok_or(GeneratorError::NotStarted)?;
        if frame != prev + 1 {
            return Err(GeneratorError::Sequence {
                expected: prev + 1,
                got: frame,
            });
        }
        let mut res = FrameResult {
            frame,
            ..FrameResult::default()
        };

        let field = match (self.flow, self.active.is_empty()) {
            (Some(p), false) => match p.flow(prev) {
                Ok(f) => Some(f),
                Err(_) => {
                    res.diagnostics.flow_fallback = true;
                    None
                }
            },
            _ => None,
        };

        let out = self.backend.forward(frame)?;
        let sigma_active = T::lit(self.cfg.sigma_active);
        let mut alive: Vec<(usize, BBox<T>, T)> = Vec::new();
        let mut dead: Vec<usize> = Vec::new();
        for &i in &self.active {
            let t = &self.tracklets[i];
            let last = t.last().1;
            let predicted = match &field {
                Some(f) => predict_flow(&last, f).unwrap_or_else(|_| predict_identity(&last)),
                None => predict_identity(&last),
            };
            let set = assign_tracking_anchors(self.grid, &predicted, self.cfg.k, self.cfg.strategy)?;
            if set.is_fallback() {
                res.diagnostics.anchor_fallback.push(t.id);
            }
            let outputs = out.query(&set.anchor_ids())?;
            res.diagnostics.queries += outputs.len();
            let r = aggregate_redetection(&set, &outputs)?;
            if r.confidence >= sigma_active {
                alive.push((i, r.bbox, r.confidence));
            } else {
                dead.push(i);
            }
        }

        // merge overlapping redetections; equal confidences favour the older id
        let boxes: Vec<_> = alive.iter().map(|a| a.1).collect();
        let scores: Vec<_> = alive.iter().map(|a| a.2).collect();
        let kept = nms(&boxes, &scores, T::lit(self.cfg.nms_redetect)).expect("equal lengths");
        let mut survivors = Vec::new();
        for (j, &(i, b, c)) in alive.iter().enumerate() {
            if kept.is_kept(j) {
                survivors.push((i, b, c));
            } else {
                res.diagnostics.merged.push(self.tracklets[i].id);
                dead.push(i);
            }
        }

        for &(i, b, c) in &survivors {
            let t = &mut self.tracklets[i];
            t.boxes.push((frame, b, c));
            res.extended.push((t.id, b, c));
        }
        dead.sort_unstable();
        for &i in &dead {
            self.tracklets[i].state = TrackletState::Terminated;
            res.terminated.push(self.tracklets[i].id);
        }
        self.active = survivors.iter().map(|s| s.0).collect();

        let merge = T::lit(self.cfg.merge_iou);
        let fresh: Vec<_> = out
            .detections()
            .iter()
            .filter(|d| {
                let hit = survivors.iter().any(|s| s.1.iou(&d.bbox) > merge);
                if hit {
                    res.diagnostics.suppressed_detections += 1;
                }
                !hit
            })
            .copied()
            .collect();
        drop(out);
        for d in fresh {
            let id = self.spawn(frame, d.bbox, d.confidence);
            res.born.push((id, d.bbox, d.confidence));
        }
        self.active.sort_unstable();

        self.last_frame = Some(frame);
        self.last_queries = res.diagnostics.queries;
        Ok(res)
    }
}
