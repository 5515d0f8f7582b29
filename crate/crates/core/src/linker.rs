//! Appearance-based linking of tracklets into long-term tracks.
//!
//! A track is either linked-active (one of its tracklets is alive) or
//! awaiting. Each frame's new tracklets are matched as one batch against the
//! awaiting tracks' bank embeddings, gated by Euclidean distance.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::assignment::hungarian;
use crate::generator::TrackletId;
use crate::geometry::BBox;
use crate::simulator::GroundTruthScene;
use crate::FrameId;

pub type TrackId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinkError {
    #[error("link configuration: {0}")]
    Config(String),
    #[error("tracklet {0} appears twice")]
    Duplicate(TrackletId),
    #[error("unknown tracklet {0}")]
    UnknownTracklet(TrackletId),
    #[error("embedding for tracklet {id}: {msg}")]
    Embedding { id: TrackletId, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkConfig {
    /// Largest Euclidean distance between unit embeddings that may link.
    pub distance_threshold: f64,
    /// Frames between embedding refreshes of a live tracklet.
    pub embedding_cadence: usize,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 0.97,
            embedding_cadence: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackState {
    LinkedActive,
    Awaiting,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: TrackId,
    /// Unit-norm running mean of the observed embeddings.
    pub bank: Option<Vec<f64>>,
    mean: Vec<f64>,
    pub sample_count: usize,
    pub state: TrackState,
    pub members: Vec<TrackletId>,
}

impl Track {
    fn add_sample(&mut self, e: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; e.len()];
        }
        self.sample_count += 1;
        let n = self.sample_count as f64;
        for (m, x) in self.mean.iter_mut().zip(e) {
            *m += (x - *m) / n;
        }
        let norm = self.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        // a mean of identical unit vectors is kept bit-exact
        self.bank = Some(if (norm - 1.0).abs() <= 1e-12 || norm == 0.0 {
            self.mean.clone()
        } else {
            self.mean.iter().map(|v| v / norm).collect()
        });
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone)]
pub struct Linker {
    cfg: LinkConfig,
    tracks: Vec<Track>,
    owner: BTreeMap<TrackletId, TrackId>,
    live: BTreeMap<TrackletId, FrameId>,
    dim: Option<usize>,
}

impl Linker {
    pub fn new(cfg: LinkConfig) -> Result<Self, LinkError> {
        if !(cfg.distance_threshold > 0.0) || !cfg.distance_threshold.is_finite() {
            return Err(LinkError::Config(format!(
                "distance_threshold must be positive, got {}",
                cfg.distance_threshold
            )));
        }
        if cfg.embedding_cadence == 0 {
            return Err(LinkError::Config("embedding_cadence must be at least 1".into()));
        }
        Ok(Self {
            cfg,
            tracks: Vec::new(),
            owner: BTreeMap::new(),
            live: BTreeMap::new(),
            dim: None,
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track(&self, id: TrackId) -> Option<&Track> {
        self.tracks.get((id as usize).checked_sub(1)?)
    }

    pub fn track_of(&self, tracklet: TrackletId) -> Option<TrackId> {
        self.owner.get(&tracklet).copied()
    }

    fn check(&mut self, id: TrackletId, e: &[f64]) -> Result<Vec<f64>, LinkError> {
        let bad = |msg: String| LinkError::Embedding { id, msg };
        if e.is_empty() || e.iter().any(|v| !v.is_finite()) {
            return Err(bad("must be non-empty and finite".into()));
        }
        match self.dim {
            Some(d) if d != e.len() => return Err(bad(format!("length {} differs from {d}", e.len()))),
            _ => self.dim = Some(e.len()),
        }
        let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(bad("zero vector".into()));
        }
        Ok(if (norm - 1.0).abs() <= 1e-12 {
            e.to_vec()
        } else {
            e.iter().map(|v| v / norm).collect()
        })
    }

    fn new_track(&mut self, tracklet: TrackletId, e: Option<&[f64]>) -> TrackId {
        let id = self.tracks.len() as TrackId + 1;
        let mut t = Track {
            id,
            bank: None,
            mean: Vec::new(),
            sample_count: 0,
            state: TrackState::LinkedActive,
            members: vec![tracklet],
        };
        if let Some(e) = e {
            t.add_sample(e);
        }
        self.tracks.push(t);
        id
    }

    /// Links this frame's new tracklets. A tracklet without an embedding
    /// always founds a new track.
    pub fn observe(
        &mut self,
        new: &[(TrackletId, Option<Vec<f64>>)],
        frame: FrameId,
    ) -> Result<BTreeMap<TrackletId, TrackId>, LinkError> {
        let mut seen = std::collections::BTreeSet::new();
        for (id, _) in new {
            if !seen.insert(*id) || self.owner.contains_key(id) {
                return Err(LinkError::Duplicate(*id));
            }
        }
        let mut cands: Vec<(TrackletId, Vec<f64>)> = Vec::new();
        let mut bare: Vec<TrackletId> = Vec::new();
        for (id, e) in new {
            match e {
                Some(e) => {
                    let e = self.check(*id, e)?;
                    cands.push((*id, e));
                }
                None => bare.push(*id),
            }
        }

        let awaiting: Vec<usize> = self
            .tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.state == TrackState::Awaiting && t.bank.is_some())
            .map(|(i, _)| i)
            .collect();
        let thr = self.cfg.distance_threshold;
        let tracks = &self.tracks;
        let a = hungarian(cands.len(), awaiting.len(), |r, c| {
            let d = distance(&cands[r].1, tracks[awaiting[c]].bank.as_ref().expect("filtered"));
            (d <= thr).then_some(d)
        });

        let mut out = BTreeMap::new();
        let mut links: Vec<Option<usize>> = vec![None; cands.len()];
        for &(r, c) in &a.pairs {
            links[r] = Some(awaiting[c]);
        }
        for ((tid, e), link) in cands.iter().zip(links) {
            let track = match link {
                Some(ti) => {
                    let t = &mut self.tracks[ti];
                    t.add_sample(e);
                    t.state = TrackState::LinkedActive;
                    t.members.push(*tid);
                    t.id
                }
                None => self.new_track(*tid, Some(e)),
            };
            out.insert(*tid, track);
        }
        for tid in bare {
            let track = self.new_track(tid, None);
            out.insert(tid, track);
        }
        for (&tid, &track) in &out {
            self.owner.insert(tid, track);
            self.live.insert(tid, frame);
        }
        Ok(out)
    }

    /// Moves the owning track to awaiting. Repeated terminations are no-ops.
    pub fn on_tracklet_terminated(&mut self, tracklet: TrackletId, _frame: FrameId) -> Result<(), LinkError> {
        let track = self.owner.get(&tracklet).ok_or(LinkError::UnknownTracklet(tracklet))?;
        if self.live.remove(&tracklet).is_some() {
            self.tracks[*track as usize - 1].state = TrackState::Awaiting;
        }
        Ok(())
    }

    /// Whether a live tracklet should have its embedding re-extracted at
    /// `frame`. Each tracklet is refreshed every `embedding_cadence` frames,
    /// phase-shifted by its id so tracklets born together do not all
    /// refresh on the same frame.
    pub fn refresh_due(&self, tracklet: TrackletId, frame: FrameId) -> bool {
        let n = self.cfg.embedding_cadence;
        self.live
            .get(&tracklet)
            .is_some_and(|&born| frame > born && ((frame - born) as usize + tracklet as usize % n).is_multiple_of(n))
    }

    /// Folds a fresh embedding of a live tracklet into its track's bank.
    pub fn refresh(&mut self, tracklet: TrackletId, embedding: &[f64]) -> Result<(), LinkError> {
        let track = *self.owner.get(&tracklet).ok_or(LinkError::UnknownTracklet(tracklet))?;
        let e = self.check(tracklet, embedding)?;
        self.tracks[track as usize - 1].add_sample(&e);
        Ok(())
    }
}

/// Appearance embeddings for boxes in a frame.
pub trait EmbeddingProvider {
    fn embed(&self, frame: FrameId, bbox: &BBox<f64>) -> Option<Vec<f64>>;
}

/// Looks up the embedding of the visible ground-truth object that overlaps
/// the box most (ties go to the earlier object).
pub struct SceneEmbedder<'a> {
    pub scene: &'a GroundTruthScene,
}

impl EmbeddingProvider for SceneEmbedder<'_> {
    fn embed(&self, frame: FrameId, bbox: &BBox<f64>) -> Option<Vec<f64>> {
        if frame == 0 || frame as usize > self.scene.frames {
            return None;
        }
        let mut best: Option<(f64, u32)> = None;
        for (id, b) in self.scene.visible(frame) {
            let v = b.iou(bbox);
            if v > 0.0 && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, id));
            }
        }
        self.scene.embedding(frame, best?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(i: usize, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn linker() -> Linker {
        Linker::new(LinkConfig::default()).unwrap()
    }

    #[test]
    fn fresh_tracklets_found_tracks() {
        let mut l = linker();
        let m = l.observe(&[(1, Some(unit(0, 4))), (2, Some(unit(1, 4)))], 1).unwrap();
        assert_eq!(m, BTreeMap::from([(1, 1), (2, 2)]));
        assert!(l.tracks().iter().all(|t| t.state == TrackState::LinkedActive));
    }

    #[test]
    fn identical_embedding_resumes_track() {
        let mut l = linker();
        let e = unit(2, 4);
        l.observe(&[(1, Some(e.clone()))], 1).unwrap();
        l.on_tracklet_terminated(1, 5).unwrap();
        assert_eq!(l.track(1).unwrap().state, TrackState::Awaiting);
        let m = l.observe(&[(2, Some(e.clone()))], 9).unwrap();
        assert_eq!(m[&2], 1);
        assert_eq!(l.track(1).unwrap().members, vec![1, 2]);
        assert_eq!(l.track(1).unwrap().bank.as_ref().unwrap(), &e);
        assert_eq!(l.track(1).unwrap().state, TrackState::LinkedActive);
    }

    #[test]
    fn opposite_embedding_is_gated_out() {
        let mut l = linker();
        let e = unit(0, 3);
        l.observe(&[(1, Some(e.clone()))], 1).unwrap();
        l.on_tracklet_terminated(1, 2).unwrap();
        let neg: Vec<f64> = e.iter().map(|v| -v).collect();
        assert_eq!(distance(&e, &neg), 2.0);
        let m = l.observe(&[(2, Some(neg))], 3).unwrap();
        assert_eq!(m[&2], 2);
        assert_eq!(l.track(1).unwrap().state, TrackState::Awaiting);
    }

    #[test]
    fn active_tracks_are_not_candidates() {
        let mut l = linker();
        let e = unit(0, 3);
        l.observe(&[(1, Some(e.clone()))], 1).unwrap();
        let m = l.observe(&[(2, Some(e))], 2).unwrap();
        assert_eq!(m[&2], 2);
    }

    #[test]
    fn termination_rules() {
        let mut l = linker();
        assert_eq!(l.on_tracklet_terminated(7, 1), Err(LinkError::UnknownTracklet(7)));
        l.observe(&[(1, Some(unit(0, 2)))], 1).unwrap();
        l.on_tracklet_terminated(1, 2).unwrap();
        l.observe(&[(2, Some(unit(0, 2)))], 3).unwrap();
        // a second termination of the old tracklet must not park the track
        l.on_tracklet_terminated(1, 4).unwrap();
        assert_eq!(l.track(1).unwrap().state, TrackState::LinkedActive);
    }

    #[test]
    fn batch_matching_is_optimal_not_greedy() {
        let mut l = linker();
        let a = vec![1.0, 0.0];
        let b = vec![0.6, 0.8];
        l.observe(&[(1, Some(a.clone())), (2, Some(b.clone()))], 1).unwrap();
        l.on_tracklet_terminated(1, 2).unwrap();
        l.on_tracklet_terminated(2, 2).unwrap();
        // tracklet 3 sits between both banks; greedy-by-row would take track 1
        let between = vec![0.8, 0.6];
        let m = l.observe(&[(3, Some(between)), (4, Some(a))], 3).unwrap();
        assert_eq!(m[&3], 2);
        assert_eq!(m[&4], 1);
    }

    #[test]
    fn input_errors() {
        let mut l = linker();
        assert_eq!(l.observe(&[(1, None), (1, None)], 1), Err(LinkError::Duplicate(1)));
        l.observe(&[(1, Some(unit(0, 3)))], 1).unwrap();
        assert_eq!(l.observe(&[(1, None)], 2), Err(LinkError::Duplicate(1)));
        assert!(matches!(l.observe(&[(2, Some(vec![1.0, 0.0]))], 2), Err(LinkError::Embedding { id: 2, .. })));
        assert!(matches!(l.observe(&[(3, Some(vec![0.0; 3]))], 2), Err(LinkError::Embedding { .. })));
        assert!(Linker::new(LinkConfig { distance_threshold: 0.0, ..LinkConfig::default() }).is_err());
        assert!(Linker::new(LinkConfig { embedding_cadence: 0, ..LinkConfig::default() }).is_err());
    }

    #[test]
    fn tracklet_without_embedding_gets_its_own_track() {
        let mut l = linker();
        l.observe(&[(1, Some(unit(0, 2)))], 1).unwrap();
        l.on_tracklet_terminated(1, 2).unwrap();
        let m = l.observe(&[(2, None)], 3).unwrap();
        assert_eq!(m[&2], 2);
        assert!(l.track(2).unwrap().bank.is_none());
    }

    #[test]
    fn refresh_cadence() {
        let mut l = Linker::new(LinkConfig { embedding_cadence: 3, ..LinkConfig::default() }).unwrap();
        l.observe(&[(1, Some(unit(0, 2))), (3, Some(unit(1, 2)))], 4).unwrap();
        let due = |t| (4..=13).filter(|&f| l.refresh_due(t, f)).collect::<Vec<FrameId>>();
        assert_eq!(due(1), vec![6, 9, 12]);
        assert_eq!(due(3), vec![7, 10, 13]);
        l.refresh(1, &[0.0, 1.0]).unwrap();
        let bank = l.track(1).unwrap().bank.clone().unwrap();
        let s = 0.5f64.sqrt();
        assert!((bank[0] - s).abs() < 1e-12 && (bank[1] - s).abs() < 1e-12);
        l.on_tracklet_terminated(1, 14).unwrap();
        assert!(!l.refresh_due(1, 16));
    }

    proptest! {
        #[test]
        fn bank_stays_unit_and_exact_for_repeats(
            v in prop::collection::vec(-1.0f64..1.0, 8),
            others in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 8), 0..6),
            repeats in 1usize..20,
        ) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-3));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let e: Vec<f64> = v.iter().map(|x| x / n).collect();
            let mut l = Linker::new(LinkConfig::default()).unwrap();
            l.observe(&[(1, Some(e.clone()))], 1).unwrap();
            for _ in 0..repeats {
                l.refresh(1, &e).unwrap();
            }
            let bank = l.track(1).unwrap().bank.clone().unwrap();
            let bn = bank.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((bn - 1.0).abs() < 1e-12);
            prop_assert!(bank.iter().zip(&e).all(|(a, b)| (a - b).abs() < 1e-15));
            for o in others {
                if o.iter().any(|x| x.abs() > 1e-3) {
                    l.refresh(1, &o).unwrap();
                    let bank = l.track(1).unwrap().bank.clone().unwrap();
                    let bn = bank.iter().map(|x| x * x).sum::<f64>().sqrt();
                    prop_assert!((bn - 1.0).abs() < 1e-9 || bn == 0.0);
                }
            }
        }
    }
}
