//! Three-stage head-body association cascade.
//!
//! Every frame the detections are split into paired body+head records, body-only records
//! and head-only records. Tracks are matched against the paired records first, the
//! leftovers against body-only records, and the leftovers of that against head-only
//! records. Unmatched tracks age and are deleted once they have gone more than `max_age`
//! frames without a match; new tracks start from unmatched paired and body-only records,
//! never from heads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve, CostMatrix};
use crate::geometry::BBox;
use crate::motion::{KalmanFilter, MotionConfig, MotionState};
use crate::num::Scalar;
use crate::pairing::{PairKind, PairedDetection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("frame {got} out of order, expected {expected}")]
    FrameOrder { expected: u32, got: u32 },
    #[error("detection from frame {got} passed to step for frame {expected}")]
    DetectionFrame { expected: u32, got: u32 },
    #[error("invalid tracker config: {0}")]
    Config(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track<T> {
    pub id: u64,
    pub body_state: MotionState<T>,
    /// Present once the track has been matched with a head at least once.
    pub head_state: Option<MotionState<T>>,
    /// Unit-norm moving average of matched embeddings.
    pub appearance: Vec<T>,
    pub frames_since_update: u32,
    pub hits: u32,
    pub status: TrackStatus,
    pub score: T,
}

impl<T: Scalar> Track<T> {
    pub fn predicted_body(&self) -> BBox<T> {
        self.body_state.to_bbox(self.score)
    }

    pub fn predicted_head(&self) -> Option<BBox<T>> {
        self.head_state.as_ref().map(|s| s.to_bbox(self.score))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig<T> {
    /// Records scoring at least this are associated in the main pass.
    pub high_conf: T,
    /// Records below this are discarded outright.
    pub low_conf: T,
    /// Largest admissible IoU distance `1 - IoU`.
    pub iou_gate: T,
    /// Weight of the IoU distance in the fused cost; the cosine distance gets the rest.
    pub fuse_lambda: T,
    pub max_age: u32,
    pub appearance_momentum: T,
    /// Run a second IoU-only pass over low-confidence records in every stage.
    pub use_low_conf_stage: bool,
    /// In the paired stage, average body and head IoU for tracks that have a head state.
    pub pair_stage_head_iou: bool,
    /// Drop all heads before association.
    pub body_only: bool,
    /// On a head-only match, translate the body state by the head filter's correction
    /// (position and velocity) instead of leaving the body to extrapolate.
    pub head_guides_body: bool,
    /// Consecutive matches needed to confirm a track.
    pub confirm_hits: u32,
    pub motion: MotionConfig<T>,
}

impl<T: Scalar> Default for TrackerConfig<T> {
    fn default() -> Self {
        Self {
            high_conf: T::lit(0.6),
            low_conf: T::lit(0.1),
            iou_gate: T::lit(0.7),
            fuse_lambda: T::lit(0.5),
            max_age: 10,
            appearance_momentum: T::lit(0.9),
            use_low_conf_stage: false,
            pair_stage_head_iou: false,
            body_only: false,
            head_guides_body: true,
            confirm_hits: 2,
            motion: MotionConfig::default(),
        }
    }
}

impl<T: Scalar> TrackerConfig<T> {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let unit = |v: T| v >= T::zero() && v <= T::one();
        if !(unit(self.low_conf) && unit(self.high_conf) && self.low_conf <= self.high_conf) {
            return Err(TrackerError::Config("need 0 <= low_conf <= high_conf <= 1"));
        }
        if !unit(self.fuse_lambda) {
            return Err(TrackerError::Config("fuse_lambda must lie in [0, 1]"));
        }
        if !unit(self.iou_gate) {
            return Err(TrackerError::Config("iou_gate must lie in [0, 1]"));
        }
        if !unit(self.appearance_momentum) {
            return Err(TrackerError::Config("appearance_momentum must lie in [0, 1]"));
        }
        if self.max_age < 1 {
            return Err(TrackerError::Config("max_age must be >= 1"));
        }
        if self.confirm_hits < 1 {
            return Err(TrackerError::Config("confirm_hits must be >= 1"));
        }
        Ok(())
    }
}

/// Cascade stage; decides which box of the record and which state of the track are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Paired body+head records.
    Pair,
    /// Body-only records.
    Body,
    /// Head-only records; only tracks with a head state take part.
    Head,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssoOutcome {
    /// `(track index, detection index)`.
    pub matches: Vec<(usize, usize)>,
    /// Candidate tracks left unmatched, in candidate order.
    pub remaining_tracks: Vec<usize>,
    /// Unmatched high-confidence detections, in input order.
    pub remaining_detections: Vec<usize>,
}

/// One emitted result row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow<T> {
    pub frame: u32,
    pub id: u64,
    pub bbox: BBox<T>,
}

pub(crate) fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    let dot: T = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: T = a.iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb: T = b.iter().map(|&x| x * x).sum::<T>().sqrt();
    if na <= T::zero() || nb <= T::zero() || a.len() != b.len() {
        return T::one();
    }
    (T::one() - dot / (na * nb)).max(T::zero()).min(T::lit(2.0))
}

fn normalized<T: Scalar>(v: &[T]) -> Vec<T> {
    let n: T = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if n > T::zero() {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn stage_iou<T: Scalar>(track: &Track<T>, det: &PairedDetection<T>, stage: Stage, config: &TrackerConfig<T>) -> T {
    match stage {
        Stage::Pair | Stage::Body => {
            let body = det.body().expect("pair/body stage records carry a body");
            let body_iou = track.predicted_body().iou(&body.bbox);
            match (stage, config.pair_stage_head_iou, track.predicted_head(), det.head()) {
                (Stage::Pair, true, Some(ph), Some(h)) => (body_iou + ph.iou(&h.bbox)) * T::lit(0.5),
                _ => body_iou,
            }
        }
        Stage::Head => {
            let head = det.head().expect("head stage records carry a head");
            track.predicted_head().map(|ph| ph.iou(&head.bbox)).unwrap_or_else(T::zero)
        }
    }
}

fn apply_match<T: Scalar>(
    track: &mut Track<T>,
    det: &PairedDetection<T>,
    stage: Stage,
    config: &TrackerConfig<T>,
    kf: &KalmanFilter<T>,
    update_appearance: bool,
) {
    if stage != Stage::Head {
        if let Some(b) = det.body() {
            track.body_state = kf.update(&track.body_state, &b.bbox);
        }
    }
    if stage != Stage::Body {
        if let Some(h) = det.head() {
            let corrected = match &track.head_state {
                Some(prior) => {
                    let post = kf.update(prior, &h.bbox);
                    if stage == Stage::Head && config.head_guides_body {
                        // Head and body move together: shift the body by the head's correction.
                        for k in [0, 1, 4, 5] {
                            track.body_state.mean[k] = track.body_state.mean[k] + post.mean[k] - prior.mean[k];
                        }
                    }
                    post
                }
                None => kf.initiate(&h.bbox),
            };
            track.head_state = Some(corrected);
        }
    }
    if update_appearance {
        let e = normalized(&det.embedding());
        if track.appearance.len() == e.len() {
            let m = config.appearance_momentum;
            let mixed: Vec<T> = track.appearance.iter().zip(&e).map(|(&a, &x)| m * a + (T::one() - m) * x).collect();
            track.appearance = normalized(&mixed);
        } else {
            track.appearance = e;
        }
    }
    track.score = det.score();
    track.frames_since_update = 0;
}

/// One association call of the cascade over `candidates` (indices into `tracks`).
///
/// High-confidence detections are matched on the fused cost
/// `lambda * (1 - IoU) + (1 - lambda) * cosine_distance`, with pairs whose IoU distance
/// exceeds `iou_gate` forbidden. Matched tracks are updated in place. With
/// `use_low_conf_stage`, still-unmatched tracks get a second IoU-only pass over the
/// low-confidence detections, whose leftovers are dropped.
pub fn associate<T: Scalar>(
    tracks: &mut [Track<T>],
    candidates: &[usize],
    detections: &[PairedDetection<T>],
    stage: Stage,
    config: &TrackerConfig<T>,
    kf: &KalmanFilter<T>,
) -> AssoOutcome {
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (i, d) in detections.iter().enumerate() {
        let s = d.score();
        if s >= config.high_conf {
            high.push(i);
        } else if s >= config.low_conf {
            low.push(i);
        }
    }
    let eligible: Vec<usize> =
        candidates.iter().copied().filter(|&t| stage != Stage::Head || tracks[t].head_state.is_some()).collect();

    let lambda = config.fuse_lambda;
    let gate = T::lit(2.0);
    let forbidden = T::lit(3.0);
    let cost = CostMatrix::from_fn(eligible.len(), high.len(), gate, |r, c| {
        let (track, det) = (&tracks[eligible[r]], &detections[high[c]]);
        let iou_distance = T::one() - stage_iou(track, det, stage, config);
        if iou_distance > config.iou_gate {
            return forbidden;
        }
        let emb_distance = cosine_distance(&track.appearance, &det.embedding());
        lambda * iou_distance + (T::one() - lambda) * emb_distance
    })
    .expect("fused costs are finite and non-negative");
    let first = solve(&cost);

    let mut matches: Vec<(usize, usize)> = Vec::new();
    for &(r, c) in &first.matches {
        let (t, d) = (eligible[r], high[c]);
        apply_match(&mut tracks[t], &detections[d], stage, config, kf, true);
        matches.push((t, d));
    }
    let unmatched: Vec<usize> = first.unmatched_rows.iter().map(|&r| eligible[r]).collect();

    if config.use_low_conf_stage && !low.is_empty() && !unmatched.is_empty() {
        let cost = CostMatrix::from_fn(unmatched.len(), low.len(), config.iou_gate, |r, c| {
            T::one() - stage_iou(&tracks[unmatched[r]], &detections[low[c]], stage, config)
        })
        .expect("IoU distances are finite and non-negative");
        let second = solve(&cost);
        for &(r, c) in &second.matches {
            let (t, d) = (unmatched[r], low[c]);
            apply_match(&mut tracks[t], &detections[d], stage, config, kf, false);
            matches.push((t, d));
        }
    }

    let matched: Vec<usize> = matches.iter().map(|&(t, _)| t).collect();
    AssoOutcome {
        remaining_tracks: candidates.iter().copied().filter(|t| !matched.contains(t)).collect(),
        remaining_detections: first.unmatched_cols.iter().map(|&c| high[c]).collect(),
        matches,
    }
}

/// Per-sequence tracker state. `step` must be called once per frame, in order.
#[derive(Debug, Clone)]
pub struct Tracker<T> {
    config: TrackerConfig<T>,
    kf: KalmanFilter<T>,
    tracks: Vec<Track<T>>,
    next_id: u64,
    last_frame: Option<u32>,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(config: TrackerConfig<T>) -> Result<Self, TrackerError> {
        config.validate()?;
        Ok(Self { kf: KalmanFilter::new(config.motion), config, tracks: Vec::new(), next_id: 1, last_frame: None })
    }

    pub fn config(&self) -> &TrackerConfig<T> {
        &self.config
    }

    /// Live (tentative or confirmed) tracks.
    pub fn tracks(&self) -> &[Track<T>] {
        &self.tracks
    }

    /// Advances one frame and returns the rows of confirmed tracks updated this frame,
    /// sorted by id. Tracks matched only through a head report their predicted body box.
    pub fn step(&mut self, frame: u32, detections: &[PairedDetection<T>]) -> Result<Vec<TrackRow<T>>, TrackerError> {
        if let Some(last) = self.last_frame {
            if frame != last + 1 {
                return Err(TrackerError::FrameOrder { expected: last + 1, got: frame });
            }
        }
        if let Some(d) = detections.iter().find(|d| d.frame() != frame) {
            return Err(TrackerError::DetectionFrame { expected: frame, got: d.frame() });
        }
        self.last_frame = Some(frame);

        let stripped: Vec<PairedDetection<T>>;
        let detections = if self.config.body_only {
            stripped = detections.iter().filter_map(PairedDetection::without_head).collect();
            &stripped[..]
        } else {
            detections
        };
        let by_kind = |kind: PairKind| detections.iter().filter(|d| d.kind() == kind).cloned().collect::<Vec<_>>();
        let (pairs, bodies, heads) = (by_kind(PairKind::Both), by_kind(PairKind::BodyOnly), by_kind(PairKind::HeadOnly));

        for track in &mut self.tracks {
            track.body_state = self.kf.predict(&track.body_state);
            track.head_state = track.head_state.as_ref().map(|s| self.kf.predict(s));
        }

        let all: Vec<usize> = (0..self.tracks.len()).collect();
        let (cfg, kf) = (&self.config, &self.kf);
        let s1 = associate(&mut self.tracks, &all, &pairs, Stage::Pair, cfg, kf);
        let s2 = associate(&mut self.tracks, &s1.remaining_tracks, &bodies, Stage::Body, cfg, kf);
        let s3 = associate(&mut self.tracks, &s2.remaining_tracks, &heads, Stage::Head, cfg, kf);

        let mut unmatched = vec![false; self.tracks.len()];
        for &t in &s3.remaining_tracks {
            unmatched[t] = true;
        }
        for (t, track) in self.tracks.iter_mut().enumerate() {
            if unmatched[t] {
                track.frames_since_update += 1;
                if track.status == TrackStatus::Tentative || track.frames_since_update > cfg.max_age {
                    track.status = TrackStatus::Removed;
                }
            } else {
                track.hits += 1;
                if track.status == TrackStatus::Tentative && track.hits >= cfg.confirm_hits {
                    track.status = TrackStatus::Confirmed;
                }
            }
        }
        self.tracks.retain(|t| t.status != TrackStatus::Removed);

        let fresh: Vec<&PairedDetection<T>> = s1
            .remaining_detections
            .iter()
            .map(|&i| &pairs[i])
            .chain(s2.remaining_detections.iter().map(|&i| &bodies[i]))
            .collect();
        for det in fresh {
            let body = det.body().expect("paired and body-only records carry a body");
            let status = if self.config.confirm_hits <= 1 { TrackStatus::Confirmed } else { TrackStatus::Tentative };
            self.tracks.push(Track {
                id: self.next_id,
                body_state: self.kf.initiate(&body.bbox),
                head_state: det.head().map(|h| self.kf.initiate(&h.bbox)),
                appearance: normalized(&det.embedding()),
                frames_since_update: 0,
                hits: 1,
                status,
                score: det.score(),
            });
            self.next_id += 1;
        }

        let mut rows: Vec<TrackRow<T>> = self
            .tracks
            .iter()
            .filter(|t| t.status == TrackStatus::Confirmed && t.frames_since_update == 0)
            .map(|t| TrackRow { frame, id: t.id, bbox: t.predicted_body() })
            .collect();
        rows.sort_by_key(|r| r.id);
        Ok(rows)
    }

    /// Runs a whole sequence given as `(frame, records)` in ascending frame order; frames
    /// missing between two entries are stepped with no detections.
    pub fn run<I>(&mut self, frames: I) -> Result<Vec<TrackRow<T>>, TrackerError>
    where
        I: IntoIterator<Item = (u32, Vec<PairedDetection<T>>)>,
    {
        let mut rows = Vec::new();
        for (frame, dets) in frames {
            if let Some(last) = self.last_frame {
                if frame <= last {
                    return Err(TrackerError::FrameOrder { expected: last + 1, got: frame });
                }
                for gap in last + 1..frame {
                    rows.extend(self.step(gap, &[])?);
                }
            }
            rows.extend(self.step(frame, &dets)?);
        }
        Ok(rows)
    }
}
