//! Seeded synthetic crowd scenes with depth-ordered occlusion and a noisy detector.
//!
//! Pedestrians walk with piecewise-constant velocity inside a rectangular arena. Each
//! has a fixed depth: pedestrians whose feet start lower in the image are nearer, larger
//! and drawn in front. A part's visibility is the fraction of its box not covered by the
//! bodies of nearer pedestrians. The detector emits jittered boxes whose score grows with
//! visibility, drops heavily occluded parts at random, and attaches embeddings built
//! from a per-identity anchor so that body and head of one pedestrian land close together.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::geometry::BBox;
use crate::metrics::GtPair;
use crate::pairing::{pair_frame, Detection, FramePairs, PairedDetection, PairingConfig, PairingError, Part};
use crate::tracker::TrackRow;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Invalid(&'static str),
    #[error("arena {width}x{height} cannot hold a body of height {body_height}")]
    ArenaTooSmall { width: f64, height: f64, body_height: f64 },
}

/// Maps visibility to detector confidence: `base + slope * visibility + N(0, noise)`, clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreModel {
    pub base: f64,
    pub slope: f64,
    pub noise: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        Self { base: 0.3, slope: 0.65, noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub num_pedestrians: usize,
    pub num_frames: u32,
    /// `[width, height]` in pixels.
    pub arena: [f64; 2],
    /// Walking speed range in pixels per frame.
    pub speed_range: [f64; 2],
    /// Body height range; far pedestrians get the small end.
    pub body_size_range: [f64; 2],
    /// Body width over body height.
    pub body_aspect: f64,
    /// Head height as a fraction of body height.
    pub head_ratio: f64,
    /// Head width over head height.
    pub head_aspect: f64,
    /// Vertical velocity relative to horizontal; small values keep the walkers in lanes.
    pub vertical_fraction: f64,
    /// Per-frame probability of picking a new heading and speed.
    pub turn_probability: f64,
    pub occlusion_visibility_threshold: f64,
    /// Standard deviation of box jitter in pixels.
    pub detection_noise: f64,
    pub embedding_dim: usize,
    /// Per-component standard deviation added to each embedding.
    pub embedding_noise: f64,
    /// Norm of the per-identity anchor.
    pub embedding_scale: f64,
    /// Distance of each part's embedding from its anchor, in opposite directions.
    pub part_offset: f64,
    pub body_drop_when_occluded: f64,
    pub head_drop_when_occluded: f64,
    pub score_model: ScoreModel,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_pedestrians: 30,
            num_frames: 200,
            arena: [1280.0, 720.0],
            speed_range: [1.0, 4.0],
            body_size_range: [100.0, 200.0],
            body_aspect: 0.45,
            head_ratio: 0.25,
            head_aspect: 1.0,
            vertical_fraction: 0.15,
            turn_probability: 0.02,
            occlusion_visibility_threshold: 0.5,
            detection_noise: 1.0,
            embedding_dim: 16,
            embedding_noise: 0.05,
            embedding_scale: 2.0,
            part_offset: 0.1,
            body_drop_when_occluded: 0.8,
            head_drop_when_occluded: 0.8,
            score_model: ScoreModel::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] >= 0.0 && r[0] <= r[1];
        if self.num_pedestrians == 0 || self.num_frames == 0 || self.embedding_dim == 0 {
            return Err(ScenarioError::Invalid("counts must be >= 1"));
        }
        if !(prob(self.turn_probability)
            && prob(self.occlusion_visibility_threshold)
            && prob(self.body_drop_when_occluded)
            && prob(self.head_drop_when_occluded))
        {
            return Err(ScenarioError::Invalid("probabilities must lie in [0, 1]"));
        }
        if !(self.head_ratio > 0.0 && self.head_ratio < 0.5) {
            return Err(ScenarioError::Invalid("head_ratio must lie in (0, 0.5)"));
        }
        if !(range(self.speed_range) && range(self.body_size_range) && self.body_size_range[0] > 0.0) {
            return Err(ScenarioError::Invalid("ranges must be finite, non-negative and ordered"));
        }
        if !(self.body_aspect > 0.0 && self.head_aspect > 0.0 && self.head_aspect * self.head_ratio <= self.body_aspect) {
            return Err(ScenarioError::Invalid("aspects must be positive and the head no wider than the body"));
        }
        if !(self.vertical_fraction >= 0.0 && self.detection_noise >= 0.0 && self.embedding_noise >= 0.0) {
            return Err(ScenarioError::Invalid("noise levels must be >= 0"));
        }
        if !(self.embedding_scale >= 0.0 && self.part_offset >= 0.0) {
            return Err(ScenarioError::Invalid("embedding geometry must be >= 0"));
        }
        let s = &self.score_model;
        if !(s.base.is_finite() && s.slope.is_finite() && s.noise >= 0.0) {
            return Err(ScenarioError::Invalid("score model must be finite"));
        }
        let [w, h] = self.arena;
        let tallest = self.body_size_range[1];
        if !(w > 0.0 && h > 0.0) || tallest > h || tallest * self.body_aspect > w {
            return Err(ScenarioError::ArenaTooSmall { width: w, height: h, body_height: tallest });
        }
        Ok(())
    }

    pub fn head_box(&self, body: &BBox<f64>) -> BBox<f64> {
        let hh = self.head_ratio * body.h;
        let hw = (self.head_aspect * hh).min(body.w);
        let (cx, _) = body.center();
        BBox { x: (cx - hw / 2.0).max(body.x), y: body.y, w: hw, h: hh, score: 1.0 }
    }
}

/// One pedestrian in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PedestrianState {
    pub id: u64,
    pub body: BBox<f64>,
    pub head: BBox<f64>,
    pub body_visibility: f64,
    pub head_visibility: f64,
    /// 0 is nearest to the camera.
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: u32,
    pub objects: Vec<PedestrianState>,
}

/// Detector output for one frame; `owners[k]` is the pedestrian behind `detections[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservations {
    pub frame: u32,
    pub detections: Vec<Detection<f64>>,
    pub owners: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub arena: [f64; 2],
    pub truth: Vec<FrameTruth>,
    pub observations: Vec<FrameObservations>,
}

/// Area of `target` covered by the union of `occluders`, by coordinate compression.
pub fn covered_area(target: &BBox<f64>, occluders: &[BBox<f64>]) -> f64 {
    let clipped: Vec<[f64; 4]> = occluders
        .iter()
        .filter_map(|o| {
            let (x0, y0) = (o.x.max(target.x), o.y.max(target.y));
            let (x1, y1) = (o.right().min(target.right()), o.bottom().min(target.bottom()));
            (x1 > x0 && y1 > y0).then_some([x0, y0, x1, y1])
        })
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|r| [r[0], r[2]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut area = 0.0;
    for slab in xs.windows(2) {
        let (a, b) = (slab[0], slab[1]);
        let mut spans: Vec<(f64, f64)> = clipped.iter().filter(|r| r[0] <= a && r[2] >= b).map(|r| (r[1], r[3])).collect();
        spans.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut covered = 0.0;
        let mut reach = f64::NEG_INFINITY;
        for (lo, hi) in spans {
            let lo = lo.max(reach);
            if hi > lo {
                covered += hi - lo;
            }
            reach = reach.max(hi);
        }
        area += covered * (b - a);
    }
    area
}

/// Fraction of `target` not covered by `occluders`, in `[0, 1]`.
pub fn visibility(target: &BBox<f64>, occluders: &[BBox<f64>]) -> f64 {
    (1.0 - covered_area(target, occluders) / target.area()).clamp(0.0, 1.0)
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std > 0.0 {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    } else {
        0.0
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Per-identity embedding geometry: anchor plus a part offset direction.
#[derive(Debug, Clone)]
pub(crate) struct Identity {
    anchor: Vec<f64>,
    offset: Vec<f64>,
}

impl Identity {
    pub(crate) fn draw(rng: &mut ChaCha8Rng, dim: usize, scale: f64, part_offset: f64) -> Self {
        let anchor = unit_vector(rng, dim).into_iter().map(|x| x * scale).collect();
        let offset = unit_vector(rng, dim).into_iter().map(|x| x * part_offset).collect();
        Self { anchor, offset }
    }

    pub(crate) fn embed(&self, part: Part, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sign = if part == Part::Body { 1.0 } else { -1.0 };
        self.anchor.iter().zip(&self.offset).map(|(a, o)| a + sign * o + gaussian(rng, noise)).collect()
    }
}

/// Scripted body boxes, `paths[p][f]` for pedestrian `p` in frame `f + 1`, with the
/// depth rank of each pedestrian.
struct Paths {
    bodies: Vec<Vec<BBox<f64>>>,
    depth: Vec<usize>,
}

fn heading(rng: &mut ChaCha8Rng, spec: &ScenarioSpec) -> (f64, f64) {
    let speed = rng.random_range(spec.speed_range[0]..=spec.speed_range[1]);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    (speed * angle.cos(), speed * angle.sin() * spec.vertical_fraction)
}

fn random_walks(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Paths {
    let [aw, ah] = spec.arena;
    let [lo, hi] = spec.body_size_range;
    let mut bodies = Vec::with_capacity(spec.num_pedestrians);
    let mut nearness = Vec::with_capacity(spec.num_pedestrians);
    for _ in 0..spec.num_pedestrians {
        // Feet low in the image means near the camera, hence taller.
        let u: f64 = rng.random_range(0.0..=1.0);
        let h = (lo + (hi - lo) * u * rng.random_range(0.9..=1.0)).clamp(lo, hi);
        let w = h * spec.body_aspect;
        let mut x = rng.random_range(0.0..=(aw - w));
        let mut feet = h + u * (ah - h);
        let (mut vx, mut vy) = heading(rng, spec);
        let mut path = Vec::with_capacity(spec.num_frames as usize);
        for _ in 0..spec.num_frames {
            path.push(BBox { x, y: feet - h, w, h, score: 1.0 });
            if rng.random_bool(spec.turn_probability) {
                (vx, vy) = heading(rng, spec);
            }
            x += vx;
            feet += vy;
            if x < 0.0 || x > aw - w {
                vx = -vx;
                x = x.clamp(0.0, aw - w);
            }
            if feet < h || feet > ah {
                vy = -vy;
                feet = feet.clamp(h, ah);
            }
        }
        bodies.push(path);
        nearness.push(u);
    }
    let mut order: Vec<usize> = (0..spec.num_pedestrians).collect();
    order.sort_by(|&a, &b| nearness[b].total_cmp(&nearness[a]).then(a.cmp(&b)));
    let mut depth = vec![0; spec.num_pedestrians];
    for (rank, &p) in order.iter().enumerate() {
        depth[p] = rank;
    }
    Paths { bodies, depth }
}

fn jitter(b: &BBox<f64>, noise: f64, score: f64, rng: &mut ChaCha8Rng) -> BBox<f64> {
    BBox {
        x: b.x + gaussian(rng, noise),
        y: b.y + gaussian(rng, noise),
        w: (b.w + gaussian(rng, noise)).max(1.0),
        h: (b.h + gaussian(rng, noise)).max(1.0),
        score,
    }
}

fn observe(spec: &ScenarioSpec, paths: &Paths, rng: &mut ChaCha8Rng) -> (Vec<FrameTruth>, Vec<FrameObservations>) {
    let identities: Vec<Identity> = (0..paths.bodies.len()).map(|_| Identity::draw(rng, spec.embedding_dim, spec.embedding_scale, spec.part_offset)).collect();
    let mut by_depth: Vec<usize> = (0..paths.bodies.len()).collect();
    by_depth.sort_by_key(|&p| paths.depth[p]);
    let score_noise = Normal::new(0.0, spec.score_model.noise.max(0.0)).expect("non-negative std");
    let score = |vis: f64, rng: &mut ChaCha8Rng| {
        let s = spec.score_model.base + spec.score_model.slope * vis + score_noise.sample(rng);
        s.clamp(0.01, 1.0)
    };

    let mut truth = Vec::with_capacity(spec.num_frames as usize);
    let mut observations = Vec::with_capacity(spec.num_frames as usize);
    for f in 0..spec.num_frames as usize {
        let frame = f as u32 + 1;
        let mut objects = Vec::with_capacity(paths.bodies.len());
        let mut nearer: Vec<BBox<f64>> = Vec::new();
        for &p in &by_depth {
            let body = paths.bodies[p][f];
            let head = spec.head_box(&body);
            objects.push(PedestrianState {
                id: p as u64 + 1,
                body,
                head,
                body_visibility: visibility(&body, &nearer),
                head_visibility: visibility(&head, &nearer),
                depth: paths.depth[p],
            });
            nearer.push(body);
        }
        objects.sort_by_key(|o| o.id);

        let mut bodies = Vec::new();
        let mut heads = Vec::new();
        for o in &objects {
            let identity = &identities[o.id as usize - 1];
            for (part, bbox, vis, drop) in [
                (Part::Body, o.body, o.body_visibility, spec.body_drop_when_occluded),
                (Part::Head, o.head, o.head_visibility, spec.head_drop_when_occluded),
            ] {
                let dropped = vis <= 0.0 || (vis < spec.occlusion_visibility_threshold && rng.random_bool(drop));
                if dropped {
                    continue;
                }
                let s = score(vis, rng);
                let det = Detection::new(jitter(&bbox, spec.detection_noise, s, rng), part, identity.embed(part, spec.embedding_noise, rng), frame);
                match part {
                    Part::Body => bodies.push((det, o.id)),
                    Part::Head => heads.push((det, o.id)),
                }
            }
        }
        bodies.shuffle(rng);
        heads.shuffle(rng);
        let (detections, owners) = bodies.into_iter().chain(heads).unzip();
        truth.push(FrameTruth { frame, objects });
        observations.push(FrameObservations { frame, detections, owners });
    }
    (truth, observations)
}

/// Runs the generator; identical specs give identical scenarios.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario, ScenarioError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let paths = random_walks(spec, &mut rng);
    let (truth, observations) = observe(spec, &paths, &mut rng);
    Ok(Scenario { arena: spec.arena, truth, observations })
}

/// Two pedestrians walking toward each other on nearby lanes. The nearer one hides the
/// farther one's body for several frames while the farther head stays in view above it.
/// The farther one stops behind the nearer one, so extrapolating its last body velocity
/// through the occlusion goes wrong.
pub fn crossing_pair(seed: u64) -> Result<Scenario, ScenarioError> {
    let spec = ScenarioSpec {
        seed,
        num_pedestrians: 2,
        num_frames: 60,
        arena: [640.0, 360.0],
        body_size_range: [120.0, 130.0],
        occlusion_visibility_threshold: 0.5,
        body_drop_when_occluded: 1.0,
        head_drop_when_occluded: 1.0,
        ..ScenarioSpec::default()
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = rng.random_range(3.5..=4.5);
    let meet = rng.random_range(25.0..=30.0);
    let (near_h, far_h) = (130.0, 120.0);
    let (near_w, far_w) = (near_h * spec.body_aspect, far_h * spec.body_aspect);
    let meet_x = 320.0;
    // The hidden pedestrian stops or nearly stops once it disappears behind the other.
    let after = -speed * rng.random_range(0.0..=0.25);
    let mut near = Vec::new();
    let mut far = Vec::new();
    let mut far_cx = meet_x + speed * meet;
    let mut far_v = -speed;
    for f in 0..spec.num_frames {
        let near_cx = meet_x - speed * (meet - f as f64);
        near.push(BBox { x: near_cx - near_w / 2.0, y: 330.0 - near_h, w: near_w, h: near_h, score: 1.0 });
        far.push(BBox { x: far_cx - far_w / 2.0, y: 290.0 - far_h, w: far_w, h: far_h, score: 1.0 });
        if (far_cx - near_cx).abs() < 20.0 {
            far_v = after;
        }
        far_cx += far_v;
    }
    let paths = Paths { bodies: vec![near, far], depth: vec![0, 1] };
    let (truth, observations) = observe(&spec, &paths, &mut rng);
    Ok(Scenario { arena: spec.arena, truth, observations })
}

impl Scenario {
    pub fn num_frames(&self) -> u32 {
        self.truth.len() as u32
    }

    /// Ground-truth body rows, one per pedestrian per frame.
    pub fn body_rows(&self) -> Vec<TrackRow<f64>> {
        self.truth.iter().flat_map(|t| t.objects.iter().map(move |o| TrackRow { frame: t.frame, id: o.id, bbox: o.body })).collect()
    }

    pub fn head_rows(&self) -> Vec<TrackRow<f64>> {
        self.truth.iter().flat_map(|t| t.objects.iter().map(move |o| TrackRow { frame: t.frame, id: o.id, bbox: o.head })).collect()
    }

    pub fn gt_pairs(&self) -> Vec<GtPair<f64>> {
        self.truth
            .iter()
            .flat_map(|t| t.objects.iter().map(move |o| GtPair { frame: t.frame, id: o.id, body: o.body, head: o.head }))
            .collect()
    }

    /// Ground truth pairs whose body visibility is below `threshold`.
    pub fn occluded_ids(&self, threshold: f64) -> std::collections::BTreeSet<(u32, u64)> {
        self.truth
            .iter()
            .flat_map(|t| t.objects.iter().filter(move |o| o.body_visibility < threshold).map(move |o| (t.frame, o.id)))
            .collect()
    }

    /// Detections paired by their true owner, as a perfect pairing stage would.
    pub fn oracle_pairs(&self) -> Vec<(u32, Vec<PairedDetection<f64>>)> {
        self.observations
            .iter()
            .map(|obs| {
                let mut owners: Vec<u64> = obs.owners.clone();
                owners.sort_unstable();
                owners.dedup();
                let records = owners
                    .into_iter()
                    .map(|id| {
                        let part = |p: Part| {
                            obs.detections.iter().zip(&obs.owners).find(|(d, &o)| o == id && d.part == p).map(|(d, _)| d.clone())
                        };
                        PairedDetection::new(part(Part::Body), part(Part::Head)).expect("owner has a part")
                    })
                    .collect();
                (obs.frame, records)
            })
            .collect()
    }

    /// Pairs every frame's detections with `config`.
    pub fn paired(&self, config: &PairingConfig<f64>) -> Result<FramePairs<f64>, PairingError> {
        self.observations.iter().map(|obs| Ok((obs.frame, pair_frame(&obs.detections, config)?))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(seed: u64) -> ScenarioSpec {
        ScenarioSpec { seed, num_pedestrians: 12, num_frames: 40, arena: [640.0, 360.0], body_size_range: [60.0, 120.0], ..ScenarioSpec::default() }
    }

    #[test]
    fn noiseless_single_target_matches_truth() {
        let spec = ScenarioSpec {
            num_pedestrians: 1,
            detection_noise: 0.0,
            embedding_noise: 0.0,
            body_drop_when_occluded: 0.0,
            head_drop_when_occluded: 0.0,
            ..ScenarioSpec::default()
        };
        let s = generate(&spec).unwrap();
        for (t, obs) in s.truth.iter().zip(&s.observations) {
            let o = &t.objects[0];
            assert_eq!(obs.detections.len(), 2);
            for d in &obs.detections {
                let expected = if d.part == Part::Body { o.body } else { o.head };
                assert_eq!((d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h), (expected.x, expected.y, expected.w, expected.h));
            }
            assert_eq!((o.body_visibility, o.head_visibility), (1.0, 1.0));
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        let a = serde_json::to_string(&generate(&small(3)).unwrap()).unwrap();
        let b = serde_json::to_string(&generate(&small(3)).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate(&small(4)).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = |spec: ScenarioSpec| generate(&spec).unwrap_err();
        assert!(matches!(bad(ScenarioSpec { num_pedestrians: 0, ..small(0) }), ScenarioError::Invalid(_)));
        assert!(matches!(bad(ScenarioSpec { head_ratio: 0.5, ..small(0) }), ScenarioError::Invalid(_)));
        assert!(matches!(bad(ScenarioSpec { turn_probability: 1.5, ..small(0) }), ScenarioError::Invalid(_)));
        assert!(matches!(bad(ScenarioSpec { arena: [100.0, 100.0], ..small(0) }), ScenarioError::ArenaTooSmall { .. }));
    }

    #[test]
    fn covered_area_matches_pixel_count() {
        let t = BBox { x: 0.0, y: 0.0, w: 10.0, h: 10.0, score: 1.0 };
        let occ = [
            BBox { x: 5.0, y: 5.0, w: 10.0, h: 10.0, score: 1.0 },
            BBox { x: -3.0, y: 2.0, w: 6.0, h: 4.0, score: 1.0 },
            BBox { x: 6.0, y: 0.0, w: 2.0, h: 8.0, score: 1.0 },
        ];
        let mut count = 0;
        for i in 0..10 {
            for j in 0..10 {
                let (px, py) = (i as f64 + 0.5, j as f64 + 0.5);
                if occ.iter().any(|o| px > o.x && px < o.right() && py > o.y && py < o.bottom()) {
                    count += 1;
                }
            }
        }
        assert_eq!(covered_area(&t, &occ), count as f64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn geometry_and_visibility_invariants(seed in 0u64..1000) {
            let s = generate(&small(seed)).unwrap();
            for t in &s.truth {
                for o in &t.objects {
                    prop_assert!(o.body.contains(&o.head));
                    prop_assert!((0.0..=1.0).contains(&o.body_visibility));
                    prop_assert!((0.0..=1.0).contains(&o.head_visibility));
                    let deeper_overlap = t.objects.iter().any(|q| q.depth < o.depth && q.body.intersection_area(&o.body) > 0.0);
                    if !deeper_overlap {
                        prop_assert_eq!(o.body_visibility, 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn embedding_geometry_separates_identities() {
        let (mut same, mut n_same, mut cross, mut n_cross) = (0.0, 0, 0.0, 0);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        for seed in 0..5 {
            let s = generate(&small(seed)).unwrap();
            for obs in &s.observations {
                let items: Vec<_> = obs.detections.iter().zip(&obs.owners).collect();
                for (b, ob) in items.iter().filter(|(d, _)| d.part == Part::Body) {
                    for (h, oh) in items.iter().filter(|(d, _)| d.part == Part::Head) {
                        let d = dist(&b.embedding, &h.embedding);
                        if ob == oh {
                            same += d;
                            n_same += 1;
                        } else {
                            cross += d;
                            n_cross += 1;
                        }
                    }
                }
            }
        }
        let mean_same = same / n_same as f64;
        assert!(mean_same < 0.5, "same-identity mean {mean_same}");
        assert!(cross / n_cross as f64 > 2.0, "cross-identity mean {}", cross / n_cross as f64);
    }

    #[test]
    fn heads_are_occluded_less_than_bodies() {
        let s = generate(&ScenarioSpec { seed: 1, ..ScenarioSpec::default() }).unwrap();
        let (mut body, mut head, mut n) = (0.0, 0.0, 0.0);
        for o in s.truth.iter().flat_map(|t| &t.objects) {
            body += o.body_visibility;
            head += o.head_visibility;
            n += 1.0;
        }
        assert!(head / n > body / n, "head {} body {}", head / n, body / n);
    }

    #[test]
    fn oracle_pairs_cover_every_detection() {
        let s = generate(&small(9)).unwrap();
        for ((_, recs), obs) in s.oracle_pairs().iter().zip(&s.observations) {
            let parts: usize = recs.iter().map(|r| r.body().is_some() as usize + r.head().is_some() as usize).sum();
            assert_eq!(parts, obs.detections.len());
        }
    }

    #[test]
    fn crossing_pair_keeps_ids_only_with_heads() {
        use crate::metrics::evaluate;
        use crate::tracker::{Tracker, TrackerConfig};
        let mut body_only_switches = 0;
        for seed in 0..20 {
            let s = crossing_pair(seed).unwrap();
            let hidden = s.truth.iter().filter(|t| t.objects[1].body_visibility < 0.5).count();
            assert!(hidden >= 5, "seed {seed}: body hidden for {hidden} frames");
            assert!(s.truth.iter().all(|t| t.objects[1].head_visibility == 1.0));
            let paired = s.paired(&PairingConfig::default()).unwrap();
            let run = |body_only| {
                let rows = Tracker::new(TrackerConfig { body_only, ..TrackerConfig::default() }).unwrap().run(paired.clone()).unwrap();
                evaluate(&s.body_rows(), &rows, 0.5).unwrap()
            };
            assert_eq!(run(false).id_switches, 0, "seed {seed}");
            body_only_switches += run(true).id_switches;
        }
        assert!(body_only_switches >= 1);
    }
}
