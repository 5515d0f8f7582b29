//! CLEAR-MOT and identity metrics over whole sequences.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::assignment::canonical_assignment;
use crate::geometry::BBox;
use crate::FrameId;

pub type EntityId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("IoU gate must be in (0, 1], got {0}")]
    Gate(f64),
    #[error("duplicate box for id {id} in frame {frame}")]
    Duplicate { frame: FrameId, id: EntityId },
}

/// Boxes keyed by `(frame, id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectorySet {
    entries: BTreeMap<(FrameId, EntityId), BBox<f64>>,
}

impl TrajectorySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, frame: FrameId, id: EntityId, b: BBox<f64>) -> Result<(), MetricsError> {
        if self.entries.insert((frame, id), b).is_some() {
            return Err(MetricsError::Duplicate { frame, id });
        }
        Ok(())
    }

    pub fn from_entries(it: impl IntoIterator<Item = (FrameId, EntityId, BBox<f64>)>) -> Result<Self, MetricsError> {
        let mut s = Self::new();
        for (f, id, b) in it {
            s.insert(f, id, b)?;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, frame: FrameId, id: EntityId) -> Option<&BBox<f64>> {
        self.entries.get(&(frame, id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (FrameId, EntityId, &BBox<f64>)> {
        self.entries.iter().map(|(&(f, id), b)| (f, id, b))
    }

    pub fn frames(&self) -> BTreeSet<FrameId> {
        self.entries.keys().map(|k| k.0).collect()
    }

    pub fn ids(&self) -> BTreeSet<EntityId> {
        self.entries.keys().map(|k| k.1).collect()
    }

    /// Boxes of one frame, sorted by id.
    pub fn frame(&self, frame: FrameId) -> Vec<(EntityId, BBox<f64>)> {
        self.entries
            .range((frame, 0)..=(frame, EntityId::MAX))
            .map(|(&(_, id), &b)| (id, b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mota: f64,
    pub idf1: f64,
    pub id_precision: f64,
    pub id_recall: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub id_switches: usize,
    pub transfers: usize,
    pub fragments: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub matches: usize,
    pub idtp: usize,
    pub gt_boxes: usize,
    pub pred_boxes: usize,
    pub gt_ids: usize,
    pub pred_ids: usize,
}

impl MetricsReport {
    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let rows: [(&str, String); 18] = [
            ("MOTA", format!("{:.4}", self.mota)),
            ("IDF1", format!("{:.4}", self.idf1)),
            ("IDP", format!("{:.4}", self.id_precision)),
            ("IDR", format!("{:.4}", self.id_recall)),
            ("Precision", format!("{:.4}", self.precision)),
            ("Recall", format!("{:.4}", self.recall)),
            ("F1", format!("{:.4}", self.f1)),
            ("IDsw", self.id_switches.to_string()),
            ("Transfer", self.transfers.to_string()),
            ("Frag", self.fragments.to_string()),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("Matches", self.matches.to_string()),
            ("IDTP", self.idtp.to_string()),
            ("GT boxes", self.gt_boxes.to_string()),
            ("Pred boxes", self.pred_boxes.to_string()),
            ("GT ids", self.gt_ids.to_string()),
            ("Pred ids", self.pred_ids.to_string()),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            s.push_str(&format!("{k:<w$}  {v:>10}\n"));
        }
        s
    }
}

/// `num / den`, with 1 when both sides are empty and 0 for any other zero
/// denominator.
fn ratio(num: usize, den: usize, both_empty: bool) -> f64 {
    if both_empty {
        1.0
    } else if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Result of the identity-level matching.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityMatch {
    /// `(gt id, pred id)` pairs with positive overlap, sorted by gt id.
    pub pairs: Vec<(EntityId, EntityId)>,
    pub idtp: usize,
}

/// Frames in which `gt` and `pred` boxes overlap with IoU at least `gate`,
/// per identity pair.
fn overlap_counts(gt: &TrajectorySet, pred: &TrajectorySet, gate: f64) -> BTreeMap<(EntityId, EntityId), i64> {
    let mut counts = BTreeMap::new();
    for f in gt.frames() {
        let ps = pred.frame(f);
        for (g, gb) in gt.frame(f) {
            for (p, pb) in &ps {
                if gb.iou(pb) >= gate {
                    *counts.entry((g, *p)).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

/// One-to-one identity matching maximizing the number of frames in which
/// matched identities overlap; ties prefer lower pred ids for lower gt ids.
pub fn match_identities_global(gt: &TrajectorySet, pred: &TrajectorySet, gate: f64) -> Result<IdentityMatch, MetricsError> {
    check_gate(gate)?;
    let counts = overlap_counts(gt, pred, gate);
    let gids: Vec<EntityId> = gt.ids().into_iter().collect();
    let pids: Vec<EntityId> = pred.ids().into_iter().collect();
    let gi: BTreeMap<EntityId, usize> = gids.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let pi: BTreeMap<EntityId, usize> = pids.iter().enumerate().map(|(i, &p)| (p, i)).collect();

    // split into groups connected by positive overlap and solve each densely
    let mut parent: Vec<usize> = (0..gids.len() + pids.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(g, p) in counts.keys() {
        let (a, b) = (find(&mut parent, gi[&g]), find(&mut parent, gids.len() + pi[&p]));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut groups: BTreeMap<usize, (Vec<EntityId>, Vec<EntityId>)> = BTreeMap::new();
    for &(g, p) in counts.keys() {
        let root = find(&mut parent, gi[&g]);
        let e = groups.entry(root).or_default();
        if !e.0.contains(&g) {
            e.0.push(g);
        }
        if !e.1.contains(&p) {
            e.1.push(p);
        }
    }

    let mut pairs = Vec::new();
    let mut idtp = 0i64;
    for (mut gs, mut ps) in groups.into_values() {
        gs.sort_unstable();
        ps.sort_unstable();
        let a = canonical_assignment(gs.len(), ps.len(), |r, c| Some(-counts.get(&(gs[r], ps[c])).copied().unwrap_or(0)), 0);
        for (r, c) in a.pairs {
            if let Some(&n) = counts.get(&(gs[r], ps[c])) {
                pairs.push((gs[r], ps[c]));
                idtp += n;
            }
        }
    }
    pairs.sort_unstable();
    Ok(IdentityMatch {
        pairs,
        idtp: idtp as usize,
    })
}

fn check_gate(gate: f64) -> Result<(), MetricsError> {
    if gate > 0.0 && gate <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::Gate(gate))
    }
}

/// Per-frame CLEAR matches, sorted by gt id, for every frame present in
/// either set.
pub fn clear_matches(gt: &TrajectorySet, pred: &TrajectorySet, gate: f64) -> Result<BTreeMap<FrameId, Vec<(EntityId, EntityId)>>, MetricsError> {
    check_gate(gate)?;
    let frames: BTreeSet<FrameId> = gt.frames().union(&pred.frames()).copied().collect();
    let mut out = BTreeMap::new();
    let mut prev: BTreeMap<EntityId, EntityId> = BTreeMap::new();
    let mut prev_frame: Option<FrameId> = None;
    for f in frames {
        let gs = gt.frame(f);
        let ps = pred.frame(f);
        let mut matched: Vec<(EntityId, EntityId)> = Vec::new();
        let contiguous = prev_frame.is_some_and(|p| p + 1 == f);
        if contiguous {
            for (g, gb) in &gs {
                if let Some(&p) = prev.get(g) {
                    if let Some((_, pb)) = ps.iter().find(|(id, _)| *id == p) {
                        if gb.iou(pb) >= gate {
                            matched.push((*g, p));
                        }
                    }
                }
            }
        }
        let rows: Vec<&(EntityId, BBox<f64>)> = gs.iter().filter(|(g, _)| !matched.iter().any(|m| m.0 == *g)).collect();
        let cols: Vec<&(EntityId, BBox<f64>)> = ps.iter().filter(|(p, _)| !matched.iter().any(|m| m.1 == *p)).collect();
        let a = canonical_assignment(
            rows.len(),
            cols.len(),
            |r, c| {
                let v = rows[r].1.iou(&cols[c].1);
                (v >= gate).then_some(1.0 - v)
            },
            1e-9,
        );
        matched.extend(a.pairs.iter().map(|&(r, c)| (rows[r].0, cols[c].0)));
        matched.sort_unstable();
        prev = matched.iter().copied().collect();
        prev_frame = Some(f);
        out.insert(f, matched);
    }
    Ok(out)
}

pub fn evaluate(gt: &TrajectorySet, pred: &TrajectorySet, gate: f64) -> Result<MetricsReport, MetricsError> {
    let per_frame = clear_matches(gt, pred, gate)?;
    let mut last_of_gt: BTreeMap<EntityId, EntityId> = BTreeMap::new();
    let mut last_of_pred: BTreeMap<EntityId, EntityId> = BTreeMap::new();
    // true = matched before and currently in a gap
    let mut gap: BTreeMap<EntityId, bool> = BTreeMap::new();
    let (mut sw, mut tr, mut frag, mut matches) = (0, 0, 0, 0);
    for (f, pairs) in &per_frame {
        matches += pairs.len();
        for &(g, p) in pairs {
            if last_of_gt.get(&g).is_some_and(|&q| q != p) {
                sw += 1;
            }
            if last_of_pred.get(&p).is_some_and(|&h| h != g) {
                tr += 1;
            }
            last_of_gt.insert(g, p);
            last_of_pred.insert(p, g);
        }
        for (g, _) in gt.frame(*f) {
            let is_matched = pairs.iter().any(|m| m.0 == g);
            match (gap.get(&g).copied(), is_matched) {
                (Some(true), true) => {
                    frag += 1;
                    gap.insert(g, false);
                }
                (_, true) => {
                    gap.insert(g, false);
                }
                (Some(false), false) => {
                    gap.insert(g, true);
                }
                _ => {}
            }
        }
    }
    let gt_boxes = gt.len();
    let pred_boxes = pred.len();
    let fp = pred_boxes - matches;
    let fn_ = gt_boxes - matches;
    let both_empty = gt_boxes == 0 && pred_boxes == 0;
    let mota = if both_empty {
        1.0
    } else {
        1.0 - (fn_ + fp + sw) as f64 / gt_boxes.max(1) as f64
    };
    let precision = ratio(matches, pred_boxes, both_empty);
    let recall = ratio(matches, gt_boxes, both_empty);
    let f1 = ratio(2 * matches, gt_boxes + pred_boxes, both_empty);
    let idm = match_identities_global(gt, pred, gate)?;
    Ok(MetricsReport {
        mota,
        idf1: ratio(2 * idm.idtp, gt_boxes + pred_boxes, both_empty),
        id_precision: ratio(idm.idtp, pred_boxes, both_empty),
        id_recall: ratio(idm.idtp, gt_boxes, both_empty),
        precision,
        recall,
        f1,
        id_switches: sw,
        transfers: tr,
        fragments: frag,
        fp,
        fn_,
        matches,
        idtp: idm.idtp,
        gt_boxes,
        pred_boxes,
        gt_ids: gt.ids().len(),
        pred_ids: pred.ids().len(),
    })
}
