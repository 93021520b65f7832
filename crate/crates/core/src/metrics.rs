//! CLEAR-MOT accuracy, identity F1 and switch counting, plus a head-body pair mismatch rate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve, CostMatrix};
use crate::geometry::BBox;
use crate::num::Scalar;
use crate::pairing::PairedDetection;
use crate::tracker::TrackRow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{set}: id {id} appears twice in frame {frame}")]
    DuplicateId { set: &'static str, frame: u32, id: u64 },
    #[error("match threshold must lie in (0, 1]")]
    Threshold,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    /// `1 - (misses + false positives + switches) / gt_count`; may be negative.
    pub mota: f64,
    pub idf1: f64,
    pub id_switches: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub matches: usize,
    pub gt_count: usize,
    pub hyp_count: usize,
    pub idtp: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pair_mismatch_rate: Option<f64>,
}

type FrameIndex = BTreeMap<u32, (Vec<usize>, Vec<usize>)>;

fn index_frames<T: Scalar>(gt: &[TrackRow<T>], hyp: &[TrackRow<T>]) -> Result<FrameIndex, MetricsError> {
    let mut frames: FrameIndex = BTreeMap::new();
    for (i, r) in gt.iter().enumerate() {
        frames.entry(r.frame).or_default().0.push(i);
    }
    for (i, r) in hyp.iter().enumerate() {
        frames.entry(r.frame).or_default().1.push(i);
    }
    for (&frame, (g, h)) in &frames {
        for (set, rows, idx) in [("gt", gt, g), ("hyp", hyp, h)] {
            let mut seen = BTreeSet::new();
            for &i in idx {
                if !seen.insert(rows[i].id) {
                    return Err(MetricsError::DuplicateId { set, frame, id: rows[i].id });
                }
            }
        }
    }
    Ok(frames)
}

/// Per-frame matching with continuity: a ground-truth object keeps last frame's
/// hypothesis while their IoU stays at or above `iou_match`; the rest are assigned by
/// minimum total `1 - IoU` among pairs with IoU >= `iou_match`.
pub fn evaluate<T: Scalar>(gt: &[TrackRow<T>], hyp: &[TrackRow<T>], iou_match: T) -> Result<EvalReport, MetricsError> {
    if !(iou_match > T::zero() && iou_match <= T::one()) {
        return Err(MetricsError::Threshold);
    }
    let frames = index_frames(gt, hyp)?;
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut report = EvalReport { gt_count: gt.len(), hyp_count: hyp.len(), ..EvalReport::default() };
    let mut overlap_frames: BTreeMap<(u64, u64), usize> = BTreeMap::new();

    for (g_idx, h_idx) in frames.values() {
        for &g in g_idx {
            for &h in h_idx {
                if gt[g].bbox.iou(&hyp[h].bbox) >= iou_match {
                    *overlap_frames.entry((gt[g].id, hyp[h].id)).or_default() += 1;
                }
            }
        }

        let mut g_done = vec![false; g_idx.len()];
        let mut h_done = vec![false; h_idx.len()];
        let mut matched = 0usize;
        for (gi, &g) in g_idx.iter().enumerate() {
            let Some(&prev) = last.get(&gt[g].id) else { continue };
            if let Some(hi) = h_idx.iter().position(|&h| hyp[h].id == prev) {
                if !h_done[hi] && gt[g].bbox.iou(&hyp[h_idx[hi]].bbox) >= iou_match {
                    g_done[gi] = true;
                    h_done[hi] = true;
                    matched += 1;
                }
            }
        }

        let open_g: Vec<usize> = (0..g_idx.len()).filter(|&i| !g_done[i]).collect();
        let open_h: Vec<usize> = (0..h_idx.len()).filter(|&i| !h_done[i]).collect();
        let cost = CostMatrix::from_fn(open_g.len(), open_h.len(), T::one() - iou_match, |r, c| {
            let v = gt[g_idx[open_g[r]]].bbox.iou(&hyp[h_idx[open_h[c]]].bbox);
            if v >= iou_match {
                T::one() - v
            } else {
                T::lit(2.0)
            }
        })
        .expect("IoU distances are finite");
        for (r, c) in solve(&cost).matches {
            let (g, h) = (&gt[g_idx[open_g[r]]], &hyp[h_idx[open_h[c]]]);
            if let Some(&prev) = last.get(&g.id) {
                if prev != h.id {
                    report.id_switches += 1;
                }
            }
            last.insert(g.id, h.id);
            matched += 1;
        }
        report.matches += matched;
        report.misses += g_idx.len() - matched;
        report.false_positives += h_idx.len() - matched;
    }

    let errors = (report.misses + report.false_positives + report.id_switches) as f64;
    report.mota = if report.gt_count == 0 && errors == 0.0 { 1.0 } else { 1.0 - errors / report.gt_count.max(1) as f64 };

    report.idtp = identity_true_positives(&overlap_frames);
    let denom = report.gt_count + report.hyp_count;
    report.idf1 = if denom == 0 { 1.0 } else { 2.0 * report.idtp as f64 / denom as f64 };
    Ok(report)
}

/// Maximum total overlap over one-to-one ground-truth to hypothesis identity mappings.
fn identity_true_positives(overlap: &BTreeMap<(u64, u64), usize>) -> usize {
    let gt_ids: Vec<u64> = overlap.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let hyp_ids: Vec<u64> = overlap.keys().map(|k| k.1).collect::<BTreeSet<_>>().into_iter().collect();
    let most = overlap.values().copied().max().unwrap_or(0);
    let cost = CostMatrix::from_fn(gt_ids.len(), hyp_ids.len(), f64::INFINITY, |r, c| {
        (most - overlap.get(&(gt_ids[r], hyp_ids[c])).copied().unwrap_or(0)) as f64
    })
    .expect("counts are finite");
    solve(&cost).matches.iter().map(|&(r, c)| overlap.get(&(gt_ids[r], hyp_ids[c])).copied().unwrap_or(0)).sum()
}

/// Ground-truth body and head of one pedestrian in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtPair<T> {
    pub frame: u32,
    pub id: u64,
    pub body: BBox<T>,
    pub head: BBox<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairMismatch {
    /// Ground-truth pairs whose body and head were both detected.
    pub eligible: usize,
    /// Of those, pairs whose parts ended up in different records.
    pub mismatched: usize,
}

impl PairMismatch {
    pub fn rate(&self) -> f64 {
        if self.eligible == 0 {
            0.0
        } else {
            self.mismatched as f64 / self.eligible as f64
        }
    }
}

fn align<T: Scalar>(gt: &[BBox<T>], det: &[BBox<T>], iou: T) -> Vec<Option<usize>> {
    let cost = CostMatrix::from_fn(gt.len(), det.len(), T::one() - iou, |r, c| {
        let v = gt[r].iou(&det[c]);
        if v >= iou && v > T::zero() {
            T::one() - v
        } else {
            T::lit(2.0)
        }
    })
    .expect("IoU distances are finite");
    let mut out = vec![None; gt.len()];
    for (r, c) in solve(&cost).matches {
        out[r] = Some(c);
    }
    out
}

/// Counts ground-truth pairs split across output records. Parts are aligned to
/// ground truth per frame by IoU >= `iou`; only pairs accepted by `include` are counted,
/// but every ground-truth box takes part in the alignment.
pub fn pair_mismatch_counts<T: Scalar>(
    gt: &[GtPair<T>],
    records: &[PairedDetection<T>],
    iou: T,
    include: impl Fn(&GtPair<T>) -> bool,
) -> PairMismatch {
    let mut by_frame: BTreeMap<u32, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, g) in gt.iter().enumerate() {
        by_frame.entry(g.frame).or_default().0.push(i);
    }
    for (i, r) in records.iter().enumerate() {
        by_frame.entry(r.frame()).or_default().1.push(i);
    }
    let mut out = PairMismatch::default();
    for (g_idx, r_idx) in by_frame.values() {
        if g_idx.is_empty() {
            continue;
        }
        let body_recs: Vec<usize> = r_idx.iter().copied().filter(|&r| records[r].body().is_some()).collect();
        let head_recs: Vec<usize> = r_idx.iter().copied().filter(|&r| records[r].head().is_some()).collect();
        let body_boxes: Vec<BBox<T>> = body_recs.iter().map(|&r| records[r].body().unwrap().bbox).collect();
        let head_boxes: Vec<BBox<T>> = head_recs.iter().map(|&r| records[r].head().unwrap().bbox).collect();
        let gt_bodies: Vec<BBox<T>> = g_idx.iter().map(|&g| gt[g].body).collect();
        let gt_heads: Vec<BBox<T>> = g_idx.iter().map(|&g| gt[g].head).collect();
        let body_of = align(&gt_bodies, &body_boxes, iou);
        let head_of = align(&gt_heads, &head_boxes, iou);
        for (k, &g) in g_idx.iter().enumerate() {
            if !include(&gt[g]) {
                continue;
            }
            if let (Some(b), Some(h)) = (body_of[k], head_of[k]) {
                out.eligible += 1;
                if body_recs[b] != head_recs[h] {
                    out.mismatched += 1;
                }
            }
        }
    }
    out
}

/// [`pair_mismatch_counts`] over all pairs at IoU 0.5, as a rate.
pub fn pair_mismatch_rate<T: Scalar>(gt: &[GtPair<T>], records: &[PairedDetection<T>]) -> f64 {
    pair_mismatch_counts(gt, records, T::lit(0.5), |_| true).rate()
}
