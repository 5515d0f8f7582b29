//! Detector backends. A backend answers, per frame, the decoded output of
//! any anchor and the frame's fresh detections.
//!
//! [`SyntheticDetector`] emulates a single-shot detector from ground truth;
//! [`ReplayDetector`] answers from a recorded text file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::str::FromStr;

use thiserror::Error;

use crate::anchors::{AnchorGrid, AnchorId, AnchorOutput};
use crate::geometry::{nms, BBox};
use crate::noise::{self, Stream};
use crate::scalar::Real;
use crate::simulator::GroundTruthScene;
use crate::FrameId;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("frame {frame} out of range 1..={frames}")]
    FrameOutOfRange { frame: FrameId, frames: usize },
    #[error("anchor {id} out of range (grid has {len} anchors)")]
    AnchorOutOfRange { id: AnchorId, len: usize },
    #[error("detector configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fresh detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub confidence: T,
}

/// Everything a backend computes for one frame: per-anchor outputs on
/// demand and the thresholded, suppressed detections.
pub struct FrameOutputs<'a, T> {
    frame: FrameId,
    len: usize,
    lookup: Box<dyn Fn(AnchorId) -> AnchorOutput<T> + 'a>,
    detections: Vec<Detection<T>>,
}

impl<'a, T: Real> FrameOutputs<'a, T> {
    pub fn new(
        frame: FrameId,
        len: usize,
        lookup: Box<dyn Fn(AnchorId) -> AnchorOutput<T> + 'a>,
        detections: Vec<Detection<T>>,
    ) -> Self {
        Self {
            frame,
            len,
            lookup,
            detections,
        }
    }

    pub fn frame(&self) -> FrameId {
        self.frame
    }

    /// Outputs for `ids`, in the given order.
    pub fn query(&self, ids: &[AnchorId]) -> Result<Vec<AnchorOutput<T>>, DetectorError> {
        ids.iter()
            .map(|&id| {
                if id >= self.len {
                    Err(DetectorError::AnchorOutOfRange { id, len: self.len })
                } else {
                    Ok((self.lookup)(id))
                }
            })
            .collect()
    }

    pub fn detections(&self) -> &[Detection<T>] {
        &self.detections
    }
}

pub trait DetectorBackend<T: Real> {
    /// Runs the detector on `frame`.
    fn forward(&self, frame: FrameId) -> Result<FrameOutputs<'_, T>, DetectorError>;

    fn query(&self, frame: FrameId, ids: &[AnchorId]) -> Result<Vec<AnchorOutput<T>>, DetectorError> {
        self.forward(frame)?.query(ids)
    }

    fn detect(&self, frame: FrameId) -> Result<Vec<Detection<T>>, DetectorError> {
        Ok(self.forward(frame)?.detections)
    }
}

impl<T: Real, B: DetectorBackend<T> + ?Sized> DetectorBackend<T> for &B {
    fn forward(&self, frame: FrameId) -> Result<FrameOutputs<'_, T>, DetectorError> {
        (**self).forward(frame)
    }
}

impl<T: Real, B: DetectorBackend<T> + ?Sized> DetectorBackend<T> for Box<B> {
    fn forward(&self, frame: FrameId) -> Result<FrameOutputs<'_, T>, DetectorError> {
        (**self).forward(frame)
    }
}

/// Maps an anchor's IoU with its object to a noise-free confidence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConfidenceModel {
    /// `min(1, gain * iou)`.
    Linear { gain: f64 },
    /// Fixed confidence for every responding anchor.
    Constant(f64),
}

impl ConfidenceModel {
    pub fn base(&self, iou: f64) -> f64 {
        match *self {
            Self::Linear { gain } => (gain * iou).min(1.0),
            Self::Constant(c) => c,
        }
    }
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self::Linear { gain: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// An anchor responds to its best object only at IoU >= this.
    pub response_iou_floor: f64,
    /// Gaussian sigma (pixels) added to each coordinate of output boxes.
    pub regression_noise_sigma: f64,
    pub confidence_model: ConfidenceModel,
    pub confidence_noise_sigma: f64,
    /// Per (frame, object) probability that the detector misses the object.
    pub dropout_prob: f64,
    /// Detection threshold applied inside `detect`.
    pub sigma_det: f64,
    /// Backend-internal NMS threshold on fresh detections.
    pub nms_threshold: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            response_iou_floor: 0.3,
            regression_noise_sigma: 0.0,
            confidence_model: ConfidenceModel::default(),
            confidence_noise_sigma: 0.02,
            dropout_prob: 0.0,
            sigma_det: 0.9,
            nms_threshold: 0.45,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(DetectorError::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        unit("response_iou_floor", self.response_iou_floor)?;
        unit("dropout_prob", self.dropout_prob)?;
        unit("sigma_det", self.sigma_det)?;
        unit("nms_threshold", self.nms_threshold)?;
        for (name, v) in [
            ("regression_noise_sigma", self.regression_noise_sigma),
            ("confidence_noise_sigma", self.confidence_noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DetectorError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        match self.confidence_model {
            ConfidenceModel::Linear { gain } if !(gain > 0.0) || !gain.is_finite() => {
                Err(DetectorError::Config(format!("confidence gain must be positive, got {gain}")))
            }
            ConfidenceModel::Constant(c) if !(0.0..=1.0).contains(&c) => {
                Err(DetectorError::Config(format!("constant confidence must be in [0, 1], got {c}")))
            }
            _ => Ok(()),
        }
    }
}

/// Ground-truth driven stand-in for a single-shot detector.
///
/// Each forward pass materializes the head output for every anchor of the
/// grid, like a network does, so a frame has a fixed cost that does not
/// depend on how many anchors are later queried. Responses to objects are
/// resolved per queried anchor. Noise is drawn per
/// (frame, object, anchor) from counter-based streams, so answers do not
/// depend on query order.
pub struct SyntheticDetector<'a, T> {
    scene: &'a GroundTruthScene,
    grid: &'a AnchorGrid<T>,
    cfg: SyntheticConfig,
}

impl<'a, T: Real> SyntheticDetector<'a, T> {
    pub fn new(scene: &'a GroundTruthScene, grid: &'a AnchorGrid<T>, cfg: SyntheticConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        Ok(Self { scene, grid, cfg })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    fn dropped(&self, frame: FrameId, id: u32) -> bool {
        self.cfg.dropout_prob > 0.0
            && noise::uniform(self.cfg.seed, Stream::Dropout, &[frame as u64, id as u64]) < self.cfg.dropout_prob
    }

    fn noisy_box(&self, b: &BBox<f64>, stream: Stream, coords: &[u64]) -> BBox<T> {
        let s = self.cfg.regression_noise_sigma;
        if s == 0.0 {
            return b.cast();
        }
        let mut rng = noise::rng(self.cfg.seed, stream, coords);
        let mut v = b.to_array();
        for c in &mut v {
            *c += s * noise::normal(&mut rng);
        }
        let w = v[2].max(1.0);
        let h = v[3].max(1.0);
        BBox::new(v[0], v[1], w, h).expect("finite noisy box").cast()
    }

    fn noisy_confidence(&self, base: f64, stream: Stream, coords: &[u64]) -> f64 {
        let s = self.cfg.confidence_noise_sigma;
        let eps = if s == 0.0 {
            0.0
        } else {
            s * noise::normal(&mut noise::rng(self.cfg.seed, stream, coords))
        };
        (base + eps).clamp(0.0, 1.0)
    }
}

impl<T: Real> DetectorBackend<T> for SyntheticDetector<'_, T> {
    fn forward(&self, frame: FrameId) -> Result<FrameOutputs<'_, T>, DetectorError> {
        self.scene.check_frame(frame).map_err(|_| DetectorError::FrameOutOfRange {
            frame,
            frames: self.scene.frames,
        })?;
        let visible: Vec<(u32, BBox<f64>, BBox<T>)> =
            self.scene.visible(frame).map(|(id, b)| (id, b, b.cast())).collect();

        // the head's output for every anchor when nothing responds
        let head: Vec<AnchorOutput<T>> = self
            .grid
            .anchors()
            .iter()
            .enumerate()
            .map(|(anchor_id, &bbox)| AnchorOutput {
                anchor_id,
                confidence: T::zero(),
                bbox,
            })
            .collect();
        let best_per_object: Vec<T> = visible
            .iter()
            .map(|(_, _, b)| self.grid.top_k_by_iou(b, 1).first().map_or(T::zero(), |e| e.1))
            .collect();

        let mut cands: Vec<Detection<T>> = Vec::new();
        for (k, (id, gt, _)) in visible.iter().enumerate() {
            if self.dropped(frame, *id) {
                continue;
            }
            let coords = [frame as u64, *id as u64];
            let base = self.cfg.confidence_model.base(best_per_object[k].as_f64());
            let c = self.noisy_confidence(base, Stream::DetectConfidence, &coords);
            if c >= self.cfg.sigma_det {
                cands.push(Detection {
                    bbox: self.noisy_box(gt, Stream::DetectBox, &coords),
                    confidence: T::lit(c),
                });
            }
        }
        let boxes: Vec<_> = cands.iter().map(|d| d.bbox).collect();
        let scores: Vec<_> = cands.iter().map(|d| d.confidence).collect();
        let kept = nms(&boxes, &scores, T::lit(self.cfg.nms_threshold)).expect("equal lengths");
        let detections = kept.kept.iter().map(|&i| cands[i]).collect();

        let floor = T::lit(self.cfg.response_iou_floor);
        let dropped: Vec<bool> = visible.iter().map(|(id, _, _)| self.dropped(frame, *id)).collect();
        let lookup = move |anchor: AnchorId| {
            let a = &head[anchor].bbox;
            let mut best: Option<(usize, T)> = None;
            for (k, (_, _, b)) in visible.iter().enumerate() {
                let v = a.iou(b);
                if v > T::zero() && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((k, v));
                }
            }
            match best {
                Some((k, v)) if v >= floor && !dropped[k] => {
                    let (id, gt, _) = &visible[k];
                    let coords = [frame as u64, *id as u64, anchor as u64];
                    let base = self.cfg.confidence_model.base(v.as_f64());
                    AnchorOutput {
                        anchor_id: anchor,
                        confidence: T::lit(self.noisy_confidence(base, Stream::AnchorConfidence, &coords)),
                        bbox: self.noisy_box(gt, Stream::AnchorBox, &coords),
                    }
                }
                _ => head[anchor],
            }
        };
        Ok(FrameOutputs::new(frame, self.grid.len(), Box::new(lookup), detections))
    }
}

/// Recorded backend outputs, keyed by frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Recording<T> {
    pub queries: BTreeMap<FrameId, BTreeMap<AnchorId, (T, BBox<T>)>>,
    pub detections: BTreeMap<FrameId, Vec<Detection<T>>>,
}

impl<T: Real> Recording<T> {
    pub fn record_query(&mut self, frame: FrameId, outputs: &[AnchorOutput<T>]) {
        let m = self.queries.entry(frame).or_default();
        for o in outputs {
            m.insert(o.anchor_id, (o.confidence, o.bbox));
        }
    }

    pub fn record_detections(&mut self, frame: FrameId, dets: &[Detection<T>]) {
        self.detections.insert(frame, dets.to_vec());
    }

    /// Serializes to the replay text format, ordered by frame, with
    /// detections before anchor rows.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# replay: Q,frame,anchor,conf,x,y,w,h | D,frame,conf,x,y,w,h\n");
        let frames: std::collections::BTreeSet<FrameId> =
            self.queries.keys().chain(self.detections.keys()).copied().collect();
        for f in frames {
            for d in self.detections.get(&f).into_iter().flatten() {
                let b = d.bbox;
                writeln!(s, "D,{f},{},{},{},{},{}", d.confidence, b.x(), b.y(), b.w(), b.h()).unwrap();
            }
            for (a, (c, b)) in self.queries.get(&f).into_iter().flatten() {
                writeln!(s, "Q,{f},{a},{c},{},{},{},{}", b.x(), b.y(), b.w(), b.h()).unwrap();
            }
        }
        s
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self, DetectorError> {
        let mut rec = Self {
            queries: BTreeMap::new(),
            detections: BTreeMap::new(),
        };
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = t.split(',').map(str::trim).collect();
            let err = |msg: String| DetectorError::Parse { line: n, msg };
            let num = |s: &str, what: &str| -> Result<T, DetectorError> {
                T::from_str(s)
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(format!("invalid {what} `{s}`")))
            };
            let int = |s: &str, what: &str| -> Result<u64, DetectorError> {
                u64::from_str(s).map_err(|_| err(format!("invalid {what} `{s}`")))
            };
            let (frame, conf, coords) = match fields.first().copied() {
                Some("Q") if fields.len() == 8 => (int(fields[1], "frame")?, fields[3], &fields[4..8]),
                Some("D") if fields.len() == 7 => (int(fields[1], "frame")?, fields[2], &fields[3..7]),
                Some("Q") | Some("D") => return Err(err(format!("wrong field count {}", fields.len()))),
                _ => return Err(err(format!("unknown record type in `{t}`"))),
            };
            let frame = FrameId::try_from(frame)
                .ok()
                .filter(|&f| f > 0)
                .ok_or_else(|| err(format!("invalid frame {frame}")))?;
            let c = num(conf, "confidence")?;
            if c < T::zero() || c > T::one() {
                return Err(err(format!("confidence {c} outside [0, 1]")));
            }
            let b = BBox::new(
                num(coords[0], "x")?,
                num(coords[1], "y")?,
                num(coords[2], "w")?,
                num(coords[3], "h")?,
            )
            .map_err(|e| err(e.to_string()))?;
            if fields[0] == "Q" {
                let a = int(fields[2], "anchor id")? as AnchorId;
                rec.queries.entry(frame).or_default().insert(a, (c, b));
            } else {
                rec.detections.entry(frame).or_default().push(Detection { bbox: b, confidence: c });
            }
        }
        Ok(rec)
    }
}

/// Backend answering from a [`Recording`]. Anchors without a recorded row
/// answer confidence 0 with their prior box.
pub struct ReplayDetector<'a, T> {
    grid: &'a AnchorGrid<T>,
    recording: Recording<T>,
}

impl<'a, T: Real> ReplayDetector<'a, T> {
    pub fn new(grid: &'a AnchorGrid<T>, recording: Recording<T>) -> Result<Self, DetectorError> {
        if let Some(&id) = recording.queries.values().flat_map(|m| m.keys()).find(|&&id| id >= grid.len()) {
            return Err(DetectorError::AnchorOutOfRange { id, len: grid.len() });
        }
        Ok(Self { grid, recording })
    }

    pub fn from_path(grid: &'a AnchorGrid<T>, path: &std::path::Path) -> Result<Self, DetectorError> {
        let f = std::fs::File::open(path)?;
        Self::new(grid, Recording::parse(std::io::BufReader::new(f))?)
    }
}

impl<T: Real> DetectorBackend<T> for ReplayDetector<'_, T> {
    fn forward(&self, frame: FrameId) -> Result<FrameOutputs<'_, T>, DetectorError> {
        let rows = self.recording.queries.get(&frame);
        let grid = self.grid;
        let lookup = move |anchor: AnchorId| match rows.and_then(|m| m.get(&anchor)) {
            Some(&(confidence, bbox)) => AnchorOutput {
                anchor_id: anchor,
                confidence,
                bbox,
            },
            None => AnchorOutput {
                anchor_id: anchor,
                confidence: T::zero(),
                bbox: grid.anchors()[anchor],
            },
        };
        let dets = self.recording.detections.get(&frame).cloned().unwrap_or_default();
        Ok(FrameOutputs::new(frame, grid.len(), Box::new(lookup), dets))
    }
}

/// Wraps a backend and records every query and detection it answers.
pub struct RecordingDetector<B, T> {
    pub inner: B,
    pub recording: std::cell::RefCell<Recording<T>>,
}

impl<B, T: Real> RecordingDetector<B, T> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recording: std::cell::RefCell::new(Recording::default()),
        }
    }

    pub fn into_recording(self) -> Recording<T> {
        self.recording.into_inner()
    }
}

impl<B: DetectorBackend<T>, T: Real> DetectorBackend<T> for RecordingDetector<B, T> {
    fn forward(&self, frame: FrameId) -> Result<FrameOutputs<'_, T>, DetectorError> {
        let out = self.inner.forward(frame)?;
        self.recording.borrow_mut().record_detections(frame, out.detections());
        let FrameOutputs {
            frame,
            len,
            lookup,
            detections,
        } = out;
        let rec = &self.recording;
        let wrapped = move |anchor: AnchorId| {
            let o = lookup(anchor);
            rec.borrow_mut().record_query(frame, std::slice::from_ref(&o));
            o
        };
        Ok(FrameOutputs::new(frame, len, Box::new(wrapped), detections))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::{GridConfig, LevelConfig};
    use crate::simulator::{generate, ObjectInit, SceneConfig};

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox<f64> {
        BBox::new(x, y, w, h).unwrap()
    }

    fn scene(objs: &[BBox<f64>], frames: usize) -> GroundTruthScene {
        generate(&SceneConfig {
            frames,
            frame_w: 128.0,
            frame_h: 128.0,
            objects: objs.iter().map(|&bbox| ObjectInit { bbox, velocity: (0.0, 0.0) }).collect(),
            ..SceneConfig::default()
        })
        .unwrap()
    }

    fn grid() -> AnchorGrid<f64> {
        AnchorGrid::build(GridConfig {
            frame_w: 128.0,
            frame_h: 128.0,
            levels: vec![LevelConfig {
                stride: 32.0,
                feature_w: 4,
                feature_h: 4,
                scales: vec![32.0],
                aspect_ratios: vec![1.0],
            }],
        })
        .unwrap()
    }

    fn exact() -> SyntheticConfig {
        SyntheticConfig {
            confidence_noise_sigma: 0.0,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn zero_noise_anchor_passes_ground_truth_through() {
        // anchor (0,0,32,32) vs object (4,0,32,32): IoU 28/36
        let s = scene(&[b(4., 0., 32., 32.)], 2);
        let g = grid();
        let d = SyntheticDetector::new(&s, &g, exact()).unwrap();
        let out = d.query(1, &[0]).unwrap();
        assert_eq!(out[0].bbox, b(4., 0., 32., 32.));
        let iou: f64 = 28.0 * 32.0 / (2.0 * 1024.0 - 28.0 * 32.0);
        assert_eq!(out[0].confidence, (1.5 * iou).min(1.0));
    }

    #[test]
    fn non_overlapping_anchor_reports_zero_and_prior() {
        let s = scene(&[b(4., 0., 32., 32.)], 2);
        let g = grid();
        let d = SyntheticDetector::new(&s, &g, exact()).unwrap();
        let far = g.anchors().len() - 1;
        let out = d.query(1, &[far]).unwrap();
        assert_eq!(out[0].confidence, 0.0);
        assert_eq!(out[0].bbox, g.anchors()[far]);
    }

    #[test]
    fn below_floor_is_silent() {
        // anchor (0,0,32,32) vs object (24,0,32,32): IoU 8/56 < 0.3
        let s = scene(&[b(24., 0., 32., 32.)], 1);
        let g = grid();
        let d = SyntheticDetector::new(&s, &g, exact()).unwrap();
        assert_eq!(d.query(1, &[0]).unwrap()[0].confidence, 0.0);
    }

    #[test]
    fn full_dropout_silences_everything() {
        let s = scene(&[b(0., 0., 32., 32.), b(64., 64., 32., 32.)], 3);
        let g = grid();
        let d = SyntheticDetector::new(&s, &g, SyntheticConfig { dropout_prob: 1.0, ..exact() }).unwrap();
        for f in 1..=3 {
            let all: Vec<_> = (0..g.len()).collect();
            assert!(d.query(f, &all).unwrap().iter().all(|o| o.confidence == 0.0));
            assert!(d.detect(f).unwrap().is_empty());
        }
    }

    #[test]
    fn constant_model_detects_every_visible_object() {
        let s = scene(&[b(0., 0., 30., 30.), b(50., 50., 20., 40.), b(90., 10., 25., 25.)], 2);
        let g = grid();
        let cfg = SyntheticConfig {
            confidence_model: ConfidenceModel::Constant(1.0),
            ..exact()
        };
        let d = SyntheticDetector::new(&s, &g, cfg).unwrap();
        let mut got: Vec<_> = d.detect(1).unwrap().iter().map(|x| x.bbox.to_array()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<_> = s.visible(1).map(|(_, b)| b.to_array()).collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn occluded_object_not_detected() {
        let mut s = scene(&[b(0., 0., 32., 32.)], 2);
        s.objects[0].visibility[1] = 0.0;
        let g = grid();
        let d = SyntheticDetector::new(&s, &g, exact()).unwrap();
        assert_eq!(d.detect(1).unwrap().len(), 1);
        assert!(d.detect(2).unwrap().is_empty());
        assert_eq!(d.query(2, &[0]).unwrap()[0].confidence, 0.0);
    }

    #[test]
    fn detections_respect_threshold_and_are_reproducible() {
        let cfg = SceneConfig { n_objects: 8, frames: 20, seed: 9, ..SceneConfig::default() };
        let s = generate(&cfg).unwrap();
        let g = AnchorGrid::build(GridConfig::default_for_frame(640.0, 480.0)).unwrap();
        let dc = SyntheticConfig { dropout_prob: 0.5, regression_noise_sigma: 2.0, seed: 5, ..SyntheticConfig::default() };
        let d1 = SyntheticDetector::new(&s, &g, dc.clone()).unwrap();
        let d2 = SyntheticDetector::new(&s, &g, dc).unwrap();
        let mut seen = 0;
        for f in 1..=20 {
            let a = d1.detect(f).unwrap();
            assert_eq!(a, d2.detect(f).unwrap());
            assert!(a.iter().all(|x| x.confidence >= 0.9 && x.confidence <= 1.0));
            seen += a.len();
        }
        assert!(seen > 20 && seen < 140, "{seen}");
    }

    #[test]
    fn query_order_does_not_matter() {
        let s = generate(&SceneConfig { n_objects: 4, frames: 3, seed: 2, ..SceneConfig::default() }).unwrap();
        let g = AnchorGrid::build(GridConfig::default_for_frame(640.0, 480.0)).unwrap();
        let d = SyntheticDetector::new(&s, &g, SyntheticConfig { regression_noise_sigma: 3.0, seed: 1, ..SyntheticConfig::default() }).unwrap();
        let (_, obj) = s.visible(2).next().unwrap();
        let ids: Vec<_> = g.top_k_by_iou(&obj, 10).into_iter().map(|e| e.0).collect();
        let fwd = d.query(2, &ids).unwrap();
        let mut rev_ids = ids.clone();
        rev_ids.reverse();
        let mut rev = d.query(2, &rev_ids).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
        assert!(fwd.iter().any(|o| o.confidence > 0.5));
    }

    #[test]
    fn regression_noise_magnitude() {
        let s = generate(&SceneConfig { n_objects: 10, frames: 200, seed: 3, ..SceneConfig::default() }).unwrap();
        let g = AnchorGrid::build(GridConfig::default_for_frame(640.0, 480.0)).unwrap();
        let sigma = 2.0;
        let cfg = SyntheticConfig {
            regression_noise_sigma: sigma,
            confidence_model: ConfidenceModel::Constant(1.0),
            confidence_noise_sigma: 0.0,
            nms_threshold: 1.0,
            ..SyntheticConfig::default()
        };
        let d = SyntheticDetector::new(&s, &g, cfg).unwrap();
        let (mut err, mut n) = (0.0, 0.0);
        for f in 1..=200 {
            let gts: Vec<_> = s.visible(f).map(|(_, b)| b).collect();
            for det in d.detect(f).unwrap() {
                let gt = gts.iter().max_by(|a, b| a.iou(&det.bbox).partial_cmp(&b.iou(&det.bbox)).unwrap()).unwrap();
                err += (det.bbox.x() - gt.x()).abs() + (det.bbox.y() - gt.y()).abs();
                n += 2.0;
            }
        }
        let expected = sigma * (2.0 / std::f64::consts::PI).sqrt();
        assert!((err / n - expected).abs() < 0.2 * expected, "{}", err / n);
    }

    #[test]
    fn out_of_range_errors() {
        let s = scene(&[b(0., 0., 32., 32.)], 2);
        let g = grid();
        let d = SyntheticDetector::new(&s, &g, exact()).unwrap();
        assert!(matches!(d.detect(3), Err(DetectorError::FrameOutOfRange { .. })));
        assert!(matches!(d.detect(0), Err(DetectorError::FrameOutOfRange { .. })));
        assert!(matches!(d.query(1, &[64]), Err(DetectorError::AnchorOutOfRange { id: 64, .. })));
        assert!(SyntheticDetector::new(&s, &g, SyntheticConfig { dropout_prob: 2.0, ..exact() }).is_err());
    }

    #[test]
    fn replay_round_trip() {
        let s = generate(&SceneConfig { n_objects: 5, frames: 6, seed: 4, ..SceneConfig::default() }).unwrap();
        let g = AnchorGrid::build(GridConfig::default_for_frame(640.0, 480.0)).unwrap();
        let syn = SyntheticDetector::new(&s, &g, SyntheticConfig { regression_noise_sigma: 1.5, seed: 8, ..SyntheticConfig::default() }).unwrap();
        let rec = RecordingDetector::new(&syn);
        let mut asked = Vec::new();
        for f in 1..=6 {
            let ids: Vec<_> = s.visible(f).flat_map(|(_, b)| g.top_k_by_iou(&b, 5)).map(|e| e.0).collect();
            rec.query(f, &ids).unwrap();
            rec.detect(f).unwrap();
            asked.push(ids);
        }
        let text = rec.into_recording().to_text();
        let replay = ReplayDetector::new(&g, Recording::parse(text.as_bytes()).unwrap()).unwrap();
        for f in 1..=6 {
            let ids = &asked[f as usize - 1];
            assert_eq!(replay.query(f, ids).unwrap(), syn.query(f, ids).unwrap());
            assert_eq!(replay.detect(f).unwrap(), syn.detect(f).unwrap());
        }
    }

    #[test]
    fn replay_examples() {
        let g = grid();
        let empty = ReplayDetector::new(&g, Recording::parse("".as_bytes()).unwrap()).unwrap();
        assert!(empty.detect(1).unwrap().is_empty() && empty.detect(50).unwrap().is_empty());
        let one = Recording::parse("# header\nQ,1,7,0.9,10,20,30,40\n".as_bytes()).unwrap();
        let r = ReplayDetector::new(&g, one).unwrap();
        let out = r.query(1, &[7, 8]).unwrap();
        assert_eq!(out[0], AnchorOutput { anchor_id: 7, confidence: 0.9, bbox: b(10., 20., 30., 40.) });
        assert_eq!(out[1].confidence, 0.0);
        assert_eq!(out[1].bbox, g.anchors()[8]);
        assert_eq!(r.query(2, &[7]).unwrap()[0].confidence, 0.0);
    }

    #[test]
    fn replay_parse_errors_carry_line_numbers() {
        let bad = "# ok\nD,1,0.95,0,0,10,10\nQ,1,3,0.5,0,0,10\n";
        match Recording::<f64>::parse(bad.as_bytes()) {
            Err(DetectorError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        for bad in ["X,1,2", "D,1,1.5,0,0,1,1", "D,0,0.5,0,0,1,1", "D,1,0.5,0,0,-1,1", "Q,1,a,0.5,0,0,1,1"] {
            assert!(matches!(Recording::<f64>::parse(bad.as_bytes()), Err(DetectorError::Parse { line: 1, .. })), "{bad}");
        }
        let g = grid();
        let rec = Recording::parse("Q,1,64,0.5,0,0,1,1".as_bytes()).unwrap();
        assert!(ReplayDetector::new(&g, rec).is_err());
    }
}
