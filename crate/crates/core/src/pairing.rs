//! Per-frame grouping of body and head detections into paired records, where either part
//! may be absent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve, CostMatrix};
use crate::geometry::BBox;
use crate::num::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairingError {
    #[error("detections span several frames ({0} and {1})")]
    MixedFrames(u32, u32),
    #[error("expected a {expected:?} detection, found {found:?}")]
    WrongPart { expected: Part, found: Part },
    #[error("embedding dimension {got} differs from {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("a paired record needs at least one part")]
    Empty,
    #[error("invalid threshold: {0}")]
    Threshold(&'static str),
    #[error(transparent)]
    Assignment(#[from] crate::assignment::AssignmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Body,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub part: Part,
    pub embedding: Vec<T>,
    pub frame: u32,
}

impl<T: Scalar> Detection<T> {
    pub fn new(bbox: BBox<T>, part: Part, embedding: Vec<T>, frame: u32) -> Self {
        Self { bbox, part, embedding, frame }
    }
}

/// Which parts a [`PairedDetection`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Both,
    BodyOnly,
    HeadOnly,
}

/// Paired detections grouped by frame, ascending.
pub type FramePairs<T> = Vec<(u32, Vec<PairedDetection<T>>)>;

/// A body and/or head detection of one pedestrian in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDetection<T> {
    body: Option<Detection<T>>,
    head: Option<Detection<T>>,
}

impl<T: Scalar> PairedDetection<T> {
    pub fn new(body: Option<Detection<T>>, head: Option<Detection<T>>) -> Result<Self, PairingError> {
        if let Some(b) = &body {
            if b.part != Part::Body {
                return Err(PairingError::WrongPart { expected: Part::Body, found: b.part });
            }
        }
        if let Some(h) = &head {
            if h.part != Part::Head {
                return Err(PairingError::WrongPart { expected: Part::Head, found: h.part });
            }
        }
        match (&body, &head) {
            (None, None) => Err(PairingError::Empty),
            (Some(b), Some(h)) if b.frame != h.frame => Err(PairingError::MixedFrames(b.frame, h.frame)),
            (Some(b), Some(h)) if b.embedding.len() != h.embedding.len() => {
                Err(PairingError::Dimension { expected: b.embedding.len(), got: h.embedding.len() })
            }
            _ => Ok(Self { body, head }),
        }
    }

    pub fn body_only(body: Detection<T>) -> Result<Self, PairingError> {
        Self::new(Some(body), None)
    }

    pub fn head_only(head: Detection<T>) -> Result<Self, PairingError> {
        Self::new(None, Some(head))
    }

    pub fn body(&self) -> Option<&Detection<T>> {
        self.body.as_ref()
    }

    pub fn head(&self) -> Option<&Detection<T>> {
        self.head.as_ref()
    }

    pub fn into_parts(self) -> (Option<Detection<T>>, Option<Detection<T>>) {
        (self.body, self.head)
    }

    pub fn kind(&self) -> PairKind {
        match (&self.body, &self.head) {
            (Some(_), Some(_)) => PairKind::Both,
            (Some(_), None) => PairKind::BodyOnly,
            _ => PairKind::HeadOnly,
        }
    }

    pub fn frame(&self) -> u32 {
        self.body.as_ref().or(self.head.as_ref()).map(|d| d.frame).unwrap_or_default()
    }

    /// Confidence of the record: the larger of the part scores.
    pub fn score(&self) -> T {
        let b = self.body.as_ref().map(|d| d.bbox.score).unwrap_or_else(T::zero);
        let h = self.head.as_ref().map(|d| d.bbox.score).unwrap_or_else(T::zero);
        b.max(h)
    }

    /// Mean of the available part embeddings.
    pub fn embedding(&self) -> Vec<T> {
        match (&self.body, &self.head) {
            (Some(b), Some(h)) => {
                let half = T::lit(0.5);
                b.embedding.iter().zip(&h.embedding).map(|(&x, &y)| (x + y) * half).collect()
            }
            (Some(d), None) | (None, Some(d)) => d.embedding.clone(),
            (None, None) => unreachable!("constructor guarantees one part"),
        }
    }

    /// The record with its head removed, or `None` for a head-only record.
    pub fn without_head(&self) -> Option<Self> {
        self.body.as_ref().map(|b| Self { body: Some(b.clone()), head: None })
    }
}

fn check_inputs<T: Scalar>(bodies: &[Detection<T>], heads: &[Detection<T>]) -> Result<(), PairingError> {
    let mut frame = None;
    let mut dim = None;
    for (expected, set) in [(Part::Body, bodies), (Part::Head, heads)] {
        for d in set {
            if d.part != expected {
                return Err(PairingError::WrongPart { expected, found: d.part });
            }
            match frame {
                None => frame = Some(d.frame),
                Some(f) if f != d.frame => return Err(PairingError::MixedFrames(f, d.frame)),
                _ => {}
            }
            match dim {
                None => dim = Some(d.embedding.len()),
                Some(k) if k != d.embedding.len() => {
                    return Err(PairingError::Dimension { expected: k, got: d.embedding.len() })
                }
                _ => {}
            }
        }
    }
    Ok(())
}

fn assemble<T: Scalar>(bodies: &[Detection<T>], heads: &[Detection<T>], matches: &[(usize, usize)]) -> Vec<PairedDetection<T>> {
    let mut head_of_body = vec![None; bodies.len()];
    let mut head_used = vec![false; heads.len()];
    for &(b, h) in matches {
        head_of_body[b] = Some(h);
        head_used[h] = true;
    }
    let mut out = Vec::with_capacity(bodies.len() + heads.len() - matches.len());
    for (b, det) in bodies.iter().enumerate() {
        out.push(PairedDetection { body: Some(det.clone()), head: head_of_body[b].map(|h| heads[h].clone()) });
    }
    for (h, det) in heads.iter().enumerate() {
        if !head_used[h] {
            out.push(PairedDetection { body: None, head: Some(det.clone()) });
        }
    }
    out
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

/// Minimum total embedding distance pairing; pairs farther apart than `max_distance`
/// stay unpaired. Output: bodies in input order (with their head, if any), then the
/// unpaired heads in input order.
pub fn pair_by_embedding<T: Scalar>(
    bodies: &[Detection<T>],
    heads: &[Detection<T>],
    max_distance: T,
) -> Result<Vec<PairedDetection<T>>, PairingError> {
    check_inputs(bodies, heads)?;
    if !(max_distance >= T::zero()) {
        return Err(PairingError::Threshold("max_distance must be >= 0"));
    }
    let m = CostMatrix::from_fn(bodies.len(), heads.len(), max_distance, |b, h| {
        euclidean(&bodies[b].embedding, &heads[h].embedding)
    })?;
    Ok(assemble(bodies, heads, &solve(&m).matches))
}

/// Baseline pairing on box overlap: cost `1 - IoU(head, body)`, admissible only when
/// the boxes overlap with IoU at least `min_iou`.
pub fn pair_by_position<T: Scalar>(
    bodies: &[Detection<T>],
    heads: &[Detection<T>],
    min_iou: T,
) -> Result<Vec<PairedDetection<T>>, PairingError> {
    check_inputs(bodies, heads)?;
    if !(min_iou >= T::zero() && min_iou <= T::one()) {
        return Err(PairingError::Threshold("min_iou must lie in [0, 1]"));
    }
    let gate = T::one() - min_iou;
    let forbidden = T::lit(2.0);
    let m = CostMatrix::from_fn(bodies.len(), heads.len(), gate, |b, h| {
        let iou = heads[h].bbox.iou(&bodies[b].bbox);
        if iou > T::zero() && iou >= min_iou {
            T::one() - iou
        } else {
            forbidden
        }
    })?;
    Ok(assemble(bodies, heads, &solve(&m).matches))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairingMethod {
    Embedding,
    Position,
}

/// Threshold defaults: the embedding gate equals the default push margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig<T> {
    pub method: PairingMethod,
    pub max_distance: T,
    pub min_iou: T,
}

impl<T: Scalar> Default for PairingConfig<T> {
    fn default() -> Self {
        Self { method: PairingMethod::Embedding, max_distance: T::lit(2.0), min_iou: T::lit(0.1) }
    }
}

/// Splits one frame's detections by part and pairs them with the configured method.
pub fn pair_frame<T: Scalar>(detections: &[Detection<T>], config: &PairingConfig<T>) -> Result<Vec<PairedDetection<T>>, PairingError> {
    let (bodies, heads): (Vec<_>, Vec<_>) = detections.iter().cloned().partition(|d| d.part == Part::Body);
    match config.method {
        PairingMethod::Embedding => pair_by_embedding(&bodies, &heads, config.max_distance),
        PairingMethod::Position => pair_by_position(&bodies, &heads, config.min_iou),
    }
}
