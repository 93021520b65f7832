//! Sliding-window tiling of large frames and fusion of per-tile detections.
//!
//! A [`TilePlan`] lays square windows of several sizes over the frame. Detections made
//! inside a window are lifted back to frame coordinates with [`lift`] and deduplicated
//! per part with [`fuse`]; pairing runs afterwards on the fused set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{nms_indices, BBox};
use crate::pairing::{Detection, Part};
use crate::scenario::{gaussian, Identity, PedestrianState, ScoreModel};

/// IoU above which duplicates from overlapping windows are suppressed.
pub const FUSION_IOU: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TilingError {
    #[error("image size must be positive, got {0}x{1}")]
    Image(u32, u32),
    #[error("overlap must lie in [0, 1), got {0}")]
    Overlap(f64),
    #[error("tile scales must be positive")]
    Scale,
    #[error("unknown tile id {0}")]
    UnknownTile(usize),
    #[error("box {bbox:?} exceeds tile {tile_id} of size {size}")]
    OutsideTile { tile_id: usize, size: u32, bbox: BBox<f64> },
}

/// A square window; `x`, `y` is its top-left corner in frame pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    pub id: usize,
    pub x: u32,
    pub y: u32,
    pub size: u32,
}

impl Tile {
    /// True when `b` (tile-local) lies inside the window; touching edges count as inside.
    pub fn holds_local(&self, b: &BBox<f64>) -> bool {
        let s = self.size as f64;
        b.x >= 0.0 && b.y >= 0.0 && b.right() <= s && b.bottom() <= s
    }

    /// True when `b` (frame coordinates) lies inside the window.
    pub fn holds(&self, b: &BBox<f64>) -> bool {
        self.holds_local(&b.translated(-(self.x as f64), -(self.y as f64)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedScale {
    pub scale: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub image_width: u32,
    pub image_height: u32,
    /// Scales actually tiled, in request order.
    pub scales: Vec<u32>,
    pub overlap: f64,
    pub windows: Vec<Tile>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedScale>,
}

impl TilePlan {
    pub fn tile(&self, id: usize) -> Result<&Tile, TilingError> {
        self.windows.get(id).filter(|t| t.id == id).ok_or(TilingError::UnknownTile(id))
    }

    pub fn windows_of_scale(&self, scale: u32) -> impl Iterator<Item = &Tile> {
        self.windows.iter().filter(move |t| t.size == scale)
    }
}

/// Window origins along one axis: multiples of `stride`, with the last window moved
/// back so it ends on the image edge. A window wider than the axis sits at 0.
fn origins(length: u32, size: u32, stride: u32) -> Vec<u32> {
    if size >= length {
        return vec![0];
    }
    let mut out = vec![0];
    let mut o = 0;
    loop {
        if o + size >= length {
            break;
        }
        o += stride;
        if o + size >= length {
            out.push(length - size);
            break;
        }
        out.push(o);
    }
    out.dedup();
    out
}

/// Tiles the image at every scale with `stride = round(scale * (1 - overlap))`. Scales
/// larger than both image sides are skipped and recorded; a scale larger than just one
/// side gets a single row (or column) at origin 0 that overhangs that side.
pub fn plan(image_width: u32, image_height: u32, scales: &[u32], overlap: f64) -> Result<TilePlan, TilingError> {
    if image_width == 0 || image_height == 0 {
        return Err(TilingError::Image(image_width, image_height));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(TilingError::Overlap(overlap));
    }
    if scales.contains(&0) {
        return Err(TilingError::Scale);
    }
    let mut out = TilePlan { image_width, image_height, scales: Vec::new(), overlap, windows: Vec::new(), skipped: Vec::new() };
    for &s in scales {
        if s > image_width && s > image_height {
            log::warn!("tile scale {s} exceeds the {image_width}x{image_height} image; skipped");
            out.skipped.push(SkippedScale { scale: s, reason: format!("larger than the {image_width}x{image_height} image") });
            continue;
        }
        let stride = ((s as f64 * (1.0 - overlap)).round() as u32).max(1);
        for y in origins(image_height, s, stride) {
            for x in origins(image_width, s, stride) {
                out.windows.push(Tile { id: out.windows.len(), x, y, size: s });
            }
        }
        out.scales.push(s);
    }
    Ok(out)
}

/// A detection in tile-local coordinates, tagged with its window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileDetection {
    pub tile_id: usize,
    pub detection: Detection<f64>,
}

/// Moves tile-local detections into frame coordinates.
pub fn lift(detections: &[TileDetection], plan: &TilePlan) -> Result<Vec<Detection<f64>>, TilingError> {
    detections
        .iter()
        .map(|td| {
            let tile = plan.tile(td.tile_id)?;
            let b = &td.detection.bbox;
            if !tile.holds_local(b) {
                return Err(TilingError::OutsideTile { tile_id: tile.id, size: tile.size, bbox: *b });
            }
            let mut d = td.detection.clone();
            d.bbox = b.translated(tile.x as f64, tile.y as f64);
            Ok(d)
        })
        .collect()
}

/// Per-part NMS at `iou_threshold`: bodies first, then heads, each in descending score.
pub fn fuse_with(detections: &[Detection<f64>], iou_threshold: f64) -> Vec<Detection<f64>> {
    let mut out = Vec::new();
    for part in [Part::Body, Part::Head] {
        let same: Vec<&Detection<f64>> = detections.iter().filter(|d| d.part == part).collect();
        let boxes: Vec<BBox<f64>> = same.iter().map(|d| d.bbox).collect();
        out.extend(nms_indices(&boxes, iou_threshold).into_iter().map(|i| same[i].clone()));
    }
    out
}

/// [`fuse_with`] at [`FUSION_IOU`].
pub fn fuse(detections: &[Detection<f64>]) -> Vec<Detection<f64>> {
    fuse_with(detections, FUSION_IOU)
}

/// Synthetic detector run on one window at a time.
///
/// A window of side `s` is resized to `input_size`, so a pedestrian of body height `h`
/// appears `h * input_size / s` pixels tall; only pedestrians whose apparent height lies
/// in `apparent_range` are detected, and each part only if it lies fully inside the
/// window. Box jitter, score and embedding noise are drawn from a stream keyed by
/// (seed, frame, pedestrian, part), so one object seen by several windows yields the
/// same global box every time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowDetector {
    pub seed: u64,
    pub input_size: f64,
    pub apparent_range: [f64; 2],
    pub noise: f64,
    pub embedding_dim: usize,
    pub embedding_scale: f64,
    pub part_offset: f64,
    pub embedding_noise: f64,
    pub occlusion_visibility_threshold: f64,
    pub drop_when_occluded: f64,
    pub score_model: ScoreModel,
}

impl Default for WindowDetector {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: 256.0,
            apparent_range: [14.0, 120.0],
            noise: 0.5,
            embedding_dim: 16,
            embedding_scale: 2.0,
            part_offset: 0.1,
            embedding_noise: 0.05,
            occlusion_visibility_threshold: 0.5,
            drop_when_occluded: 0.8,
            score_model: ScoreModel::default(),
        }
    }
}

impl WindowDetector {
    /// Stream ids: frame in the high half, pedestrian id and part below. Frame 0 is
    /// reserved for per-identity anchors.
    fn stream(&self, frame: u32, id: u64, part: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((frame as u64) << 32) | ((id & 0x7fff_ffff) << 1) | part);
        rng
    }

    /// What the detector reports for one part at native resolution, before any window
    /// test; `None` when the part is dropped for occlusion.
    pub fn observe(&self, object: &PedestrianState, frame: u32, part: Part) -> Option<Detection<f64>> {
        let (bbox, vis, bit) = match part {
            Part::Body => (object.body, object.body_visibility, 0),
            Part::Head => (object.head, object.head_visibility, 1),
        };
        let mut rng = self.stream(frame, object.id, bit);
        let dropped = rng.random_bool(self.drop_when_occluded.clamp(0.0, 1.0));
        if vis <= 0.0 || (vis < self.occlusion_visibility_threshold && dropped) {
            return None;
        }
        let sm = &self.score_model;
        let score = (sm.base + sm.slope * vis + gaussian(&mut rng, sm.noise)).clamp(0.01, 1.0);
        let b = BBox {
            x: bbox.x + gaussian(&mut rng, self.noise),
            y: bbox.y + gaussian(&mut rng, self.noise),
            w: (bbox.w + gaussian(&mut rng, self.noise)).max(1.0),
            h: (bbox.h + gaussian(&mut rng, self.noise)).max(1.0),
            score,
        };
        let identity = Identity::draw(&mut self.stream(0, object.id, 0), self.embedding_dim, self.embedding_scale, self.part_offset);
        let embedding = identity.embed(part, self.embedding_noise, &mut rng);
        Some(Detection::new(b, part, embedding, frame))
    }

    /// Detections inside `window` in tile-local coordinates; with no window, every
    /// observed part in frame coordinates and no size limit.
    pub fn detect(&self, objects: &[PedestrianState], frame: u32, window: Option<&Tile>) -> Vec<Detection<f64>> {
        let mut out = Vec::new();
        for o in objects {
            if let Some(w) = window {
                let apparent = o.body.h * self.input_size / w.size as f64;
                if !(apparent >= self.apparent_range[0] && apparent <= self.apparent_range[1]) {
                    continue;
                }
            }
            for part in [Part::Body, Part::Head] {
                let Some(mut d) = self.observe(o, frame, part) else { continue };
                if let Some(w) = window {
                    if !w.holds(&d.bbox) {
                        continue;
                    }
                    d.bbox = d.bbox.translated(-(w.x as f64), -(w.y as f64));
                }
                out.push(d);
            }
        }
        out
    }

    /// Runs every window of `plan` (in parallel), lifts and fuses the results.
    pub fn detect_tiled(&self, objects: &[PedestrianState], frame: u32, plan: &TilePlan) -> Result<Vec<Detection<f64>>, TilingError> {
        let per_tile: Vec<TileDetection> = plan
            .windows
            .par_iter()
            .map(|w| self.detect(objects, frame, Some(w)).into_iter().map(|detection| TileDetection { tile_id: w.id, detection }).collect::<Vec<_>>())
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        Ok(fuse(&lift(&per_tile, plan)?))
    }
}
