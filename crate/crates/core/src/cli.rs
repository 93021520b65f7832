//! Command-line surface: `synth`, `tile`, `fuse`, `pair`, `track`, `eval`, `loss-check`
//! and `render`.
//!
//! Outputs are written atomically; when a command fails, every file it already wrote is
//! removed again. `HBTRACK_WORKERS` sets the size of the worker pool used for per-frame
//! and per-tile work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rayon::prelude::*;
use serde::Serialize;

use crate::aml::{self, GradientCheck, LossWeights, PairSelection};
use crate::geometry::BBox;
use crate::gigapixel::{self, TileDetection, TilePlan};
use crate::io::{self, DetectionFile, DetectionRecord};
use crate::metrics::{self, EvalReport, GtPair};
use crate::pairing::{self, PairingConfig, PairingMethod};
use crate::scenario::{self, ScenarioSpec};
use crate::tracker::{TrackRow, Tracker, TrackerConfig};

#[derive(Debug, Parser)]
#[command(name = "hbtrack", version, about = "Head-body multi-object tracking toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene: detections.jsonl, gt.txt, gt_heads.txt and spec.json.
    Synth(SynthArgs),
    /// Write a sliding-window tile plan as JSON.
    Tile(TileArgs),
    /// Lift tile-local detections to frame coordinates and deduplicate them.
    Fuse(FuseArgs),
    /// Pair body and head detections per frame.
    Pair(PairArgs),
    /// Track paired detections and write MOTChallenge results.
    Track(TrackArgs),
    /// Score results against ground truth.
    Eval(EvalArgs),
    /// Evaluate the embedding loss and check its gradients on loss batches.
    LossCheck(LossCheckArgs),
    /// Draw track boxes into one PNG per frame.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scenario spec JSON; omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long, value_delimiter = ',', default_value = "1600,3200,6400")]
    pub scales: Vec<u32>,
    #[arg(long, default_value_t = 0.3)]
    pub overlap: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub plan: PathBuf,
    /// Tile-local detections; every record needs a tile_id.
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = gigapixel::FUSION_IOU)]
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Embedding,
    Position,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Embedding)]
    pub method: MethodArg,
    /// Embedding distance gate.
    #[arg(long, default_value_t = 2.0)]
    pub max_distance: f64,
    /// Minimum head/body IoU for position pairing.
    #[arg(long, default_value_t = 0.1)]
    pub min_iou: f64,
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Paired detections (records sharing a pair_hint form one pair).
    #[arg(long)]
    pub detections: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tracker config JSON; flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub high_conf: Option<f64>,
    #[arg(long)]
    pub low_conf: Option<f64>,
    #[arg(long)]
    pub iou_gate: Option<f64>,
    #[arg(long)]
    pub fuse_lambda: Option<f64>,
    #[arg(long)]
    pub max_age: Option<u32>,
    #[arg(long)]
    pub appearance_momentum: Option<f64>,
    #[arg(long)]
    pub confirm_hits: Option<u32>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub use_low_conf_stage: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub pair_stage_head_iou: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub head_guides_body: Option<bool>,
    /// Ignore every head detection (ablation baseline).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub body_only: Option<bool>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Ground-truth head boxes; with --paired, adds the pair mismatch rate.
    #[arg(long, requires = "paired")]
    pub gt_heads: Option<PathBuf>,
    #[arg(long, requires = "gt_heads")]
    pub paired: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossCheckArgs {
    /// Loss batches, one JSON object per line.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    pub batches: Option<PathBuf>,
    /// Check this many seeded random batches instead.
    #[arg(long)]
    pub random: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Sum over all index pairs instead of same/different identity pairs.
    #[arg(long)]
    pub literal: bool,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub hinge_band: f64,
    /// Largest accepted relative gradient error; exceeding it fails the command.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Ground truth drawn in grey under the tracks.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Inclusive frame range such as `1-50`.
    #[arg(long)]
    pub frames: Option<String>,
}

/// Files written so far by a command; removed on drop unless committed.
#[derive(Default)]
struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn add(&mut self, path: &Path) {
        self.written.push(path.to_path_buf());
    }

    fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// Sizes the global worker pool from `HBTRACK_WORKERS`, once.
pub fn init_workers() {
    if let Some(n) = std::env::var("HBTRACK_WORKERS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialised");
        }
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    init_workers();
    let mut out = Outputs::default();
    match cli.command {
        Command::Synth(a) => synth(a, &mut out)?,
        Command::Tile(a) => tile(a, &mut out)?,
        Command::Fuse(a) => fuse(a, &mut out)?,
        Command::Pair(a) => pair(a, &mut out)?,
        Command::Track(a) => track(a, &mut out)?,
        Command::Eval(a) => eval(a, &mut out)?,
        Command::LossCheck(a) => loss_check(a, &mut out)?,
        Command::Render(a) => render(a, &mut out)?,
    }
    out.commit();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    execute(Cli::try_parse_from(args)?)
}

fn synth(a: SynthArgs, out: &mut Outputs) -> Result<()> {
    let mut spec: ScenarioSpec = match &a.spec {
        Some(p) => io::read_json(p)?,
        None => ScenarioSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = scenario::generate(&spec)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let records: Vec<DetectionRecord> =
        scene.observations.iter().flat_map(|o| o.detections.iter().map(|d| DetectionRecord::from_detection(d, None, None))).collect();
    let det_path = a.out.join("detections.jsonl");
    io::write_detections(&det_path, &DetectionFile::new(spec.embedding_dim, records))?;
    out.add(&det_path);

    let gt: Vec<(TrackRow<f64>, f64)> = scene
        .truth
        .iter()
        .flat_map(|t| t.objects.iter().map(move |o| (TrackRow { frame: t.frame, id: o.id, bbox: o.body }, o.body_visibility)))
        .collect();
    let heads: Vec<(TrackRow<f64>, f64)> = scene
        .truth
        .iter()
        .flat_map(|t| t.objects.iter().map(move |o| (TrackRow { frame: t.frame, id: o.id, bbox: o.head }, o.head_visibility)))
        .collect();
    for (name, rows) in [("gt.txt", &gt), ("gt_heads.txt", &heads)] {
        let p = a.out.join(name);
        io::write_ground_truth(&p, rows)?;
        out.add(&p);
    }
    let spec_path = a.out.join("spec.json");
    io::write_json(&spec_path, &spec)?;
    out.add(&spec_path);
    Ok(())
}

fn tile(a: TileArgs, out: &mut Outputs) -> Result<()> {
    let plan = gigapixel::plan(a.width, a.height, &a.scales, a.overlap)?;
    for s in &plan.skipped {
        eprintln!("warning: scale {} skipped: {}", s.scale, s.reason);
    }
    io::write_json(&a.out, &plan)?;
    out.add(&a.out);
    Ok(())
}

fn fuse(a: FuseArgs, out: &mut Outputs) -> Result<()> {
    ensure!((0.0..=1.0).contains(&a.iou), "--iou must lie in [0, 1]");
    let plan: TilePlan = io::read_json(&a.plan)?;
    let file = io::read_detections(&a.detections)?;
    let mut tiled = Vec::with_capacity(file.records.len());
    for (r, line) in file.records.iter().zip(&file.lines) {
        let Some(tile_id) = r.tile_id else { bail!("{}: line {line}: record has no tile_id", a.detections.display()) };
        tiled.push(TileDetection { tile_id, detection: r.to_detection() });
    }
    let lifted = gigapixel::lift(&tiled, &plan)?;
    let mut by_frame: BTreeMap<u32, Vec<_>> = BTreeMap::new();
    for d in lifted {
        by_frame.entry(d.frame).or_default().push(d);
    }
    let groups: Vec<_> = by_frame.into_values().collect();
    let fused: Vec<DetectionRecord> = groups
        .par_iter()
        .map(|ds| gigapixel::fuse_with(ds, a.iou).iter().map(|d| DetectionRecord::from_detection(d, None, None)).collect::<Vec<_>>())
        .collect::<Vec<_>>()
        .concat();
    io::write_detections(&a.out, &DetectionFile::new(file.embedding_dim, fused))?;
    out.add(&a.out);
    Ok(())
}

fn pair(a: PairArgs, out: &mut Outputs) -> Result<()> {
    let config = PairingConfig {
        method: match a.method {
            MethodArg::Embedding => PairingMethod::Embedding,
            MethodArg::Position => PairingMethod::Position,
        },
        max_distance: a.max_distance,
        min_iou: a.min_iou,
    };
    let file = io::read_detections(&a.detections)?;
    let frames = file.frames();
    let paired = frames
        .par_iter()
        .map(|(frame, recs)| {
            let dets: Vec<_> = recs.iter().map(|r| r.to_detection()).collect();
            Ok((*frame, pairing::pair_frame(&dets, &config)?))
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_detections(&a.out, &DetectionFile::new(file.embedding_dim, io::paired_to_records(&paired)))?;
    out.add(&a.out);
    Ok(())
}

/// Defaults, then the config file, then flags.
pub fn effective_tracker_config(a: &TrackArgs) -> Result<TrackerConfig<f64>> {
    let mut c: TrackerConfig<f64> = match &a.config {
        Some(p) => io::read_json(p)?,
        None => TrackerConfig::default(),
    };
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { c.$field = v; } )* };
    }
    apply!(high_conf, low_conf, iou_gate, fuse_lambda, max_age, appearance_momentum, confirm_hits);
    apply!(use_low_conf_stage, pair_stage_head_iou, head_guides_body, body_only);
    c.validate()?;
    Ok(c)
}

fn track(a: TrackArgs, out: &mut Outputs) -> Result<()> {
    let config = effective_tracker_config(&a)?;
    let file = io::read_detections(&a.detections)?;
    let frames = io::records_to_paired(&a.detections, &file)?;
    let rows = Tracker::new(config)?.run(frames)?;
    io::write_results(&a.out, &rows)?;
    out.add(&a.out);
    let mut echo = a.out.clone().into_os_string();
    echo.push(".config.json");
    let echo = PathBuf::from(echo);
    io::write_json(&echo, &config)?;
    out.add(&echo);
    Ok(())
}

fn gt_pairs(bodies: &[TrackRow<f64>], heads: &[TrackRow<f64>]) -> Vec<GtPair<f64>> {
    let head_of: BTreeMap<(u32, u64), BBox<f64>> = heads.iter().map(|r| ((r.frame, r.id), r.bbox)).collect();
    bodies
        .iter()
        .filter_map(|r| head_of.get(&(r.frame, r.id)).map(|&head| GtPair { frame: r.frame, id: r.id, body: r.bbox, head }))
        .collect()
}

pub fn evaluate_files(a: &EvalArgs) -> Result<EvalReport> {
    let gt = io::read_mot(&a.gt)?;
    let hyp = io::read_mot(&a.results)?;
    let mut report = metrics::evaluate(&gt, &hyp, a.iou)?;
    if let (Some(heads), Some(paired)) = (&a.gt_heads, &a.paired) {
        let heads = io::read_mot(heads)?;
        let file = io::read_detections(paired)?;
        let records: Vec<_> = io::records_to_paired(paired, &file)?.into_iter().flat_map(|(_, r)| r).collect();
        report.pair_mismatch_rate = Some(metrics::pair_mismatch_rate(&gt_pairs(&gt, &heads), &records));
    }
    Ok(report)
}

fn eval(a: EvalArgs, out: &mut Outputs) -> Result<()> {
    let report = evaluate_files(&a)?;
    match &a.out {
        Some(p) => {
            io::write_json(p, &report)?;
            out.add(p);
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BatchReport {
    index: usize,
    pull: f64,
    push: f64,
    loss: f64,
    gradient: GradientCheck,
}

#[derive(Debug, Serialize)]
struct LossReport {
    weights: LossWeights<f64>,
    step: f64,
    tolerance: f64,
    max_rel_error: f64,
    passed: bool,
    batches: Vec<BatchReport>,
}

fn loss_check(a: LossCheckArgs, out: &mut Outputs) -> Result<()> {
    let batches = match (&a.batches, a.random) {
        (Some(p), _) => io::read_loss_batches(p)?,
        (None, Some(n)) => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            (0..n).map(|_| aml::random_batch(&mut rng, 8, 16)).collect()
        }
        (None, None) => bail!("pass --batches or --random"),
    };
    let d = LossWeights::<f64>::default();
    let weights = LossWeights {
        mu: a.mu.unwrap_or(d.mu),
        beta: a.beta.unwrap_or(d.beta),
        delta: a.delta.unwrap_or(d.delta),
        sigma: a.sigma.unwrap_or(d.sigma),
        tau: a.tau.unwrap_or(d.tau),
        pairs: if a.literal { PairSelection::Unrestricted } else { PairSelection::ByIdentity },
    };
    weights.validate()?;
    let reports = batches
        .par_iter()
        .enumerate()
        .map(|(index, b)| {
            Ok(BatchReport {
                index,
                pull: aml::pull_loss(b, &weights)?,
                push: aml::push_loss(b, &weights)?,
                loss: aml::aml_loss(b, &weights)?,
                gradient: aml::gradient_check(b, &weights, a.step, a.hinge_band)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = reports.iter().map(|r| r.gradient.max_rel_error).fold(0.0, f64::max);
    let report = LossReport { weights, step: a.step, tolerance: a.tolerance, max_rel_error, passed: max_rel_error <= a.tolerance, batches: reports };
    match &a.out {
        Some(p) => {
            io::write_json(p, &report)?;
            out.add(p);
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    ensure!(report.passed, "gradient relative error {max_rel_error:e} exceeds {:e}", a.tolerance);
    Ok(())
}

fn parse_range(s: &str) -> Result<(u32, u32)> {
    let (lo, hi) = s.split_once('-').unwrap_or((s, s));
    let (lo, hi): (u32, u32) = (lo.trim().parse()?, hi.trim().parse()?);
    ensure!(lo <= hi, "empty frame range {s}");
    Ok((lo, hi))
}

fn id_color(id: u64) -> [u8; 3] {
    // Golden-ratio hue steps keep neighbouring ids apart.
    let hue = (id as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * 235.0 + 20.0) as u8, (g * 235.0 + 20.0) as u8, (b * 235.0 + 20.0) as u8]
}

fn draw_box(img: &mut image::RgbImage, b: &BBox<f64>, color: [u8; 3], thickness: i64) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (b.x.round() as i64, b.y.round() as i64);
    let (x1, y1) = (b.right().round() as i64, b.bottom().round() as i64);
    let mut put = |x: i64, y: i64| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    };
    for t in 0..thickness {
        for x in x0..=x1 {
            put(x, y0 + t);
            put(x, y1 - t);
        }
        for y in y0..=y1 {
            put(x0 + t, y);
            put(x1 - t, y);
        }
    }
}

fn render(a: RenderArgs, out: &mut Outputs) -> Result<()> {
    ensure!(a.width > 0 && a.height > 0, "image size must be positive");
    let rows = io::read_mot(&a.results)?;
    let gt = a.gt.as_deref().map(io::read_mot).transpose()?.unwrap_or_default();
    let last = rows.iter().chain(&gt).map(|r| r.frame).max().unwrap_or(0);
    let (lo, hi) = match &a.frames {
        Some(s) => parse_range(s)?,
        None => (1, last),
    };
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let group = |rs: &[TrackRow<f64>]| {
        let mut m: BTreeMap<u32, Vec<TrackRow<f64>>> = BTreeMap::new();
        for r in rs {
            m.entry(r.frame).or_default().push(*r);
        }
        m
    };
    let (tracks, truth) = (group(&rows), group(&gt));
    let frames: Vec<u32> = (lo..=hi).collect();
    let written = frames
        .par_iter()
        .map(|&f| {
            let mut img = image::RgbImage::from_pixel(a.width, a.height, image::Rgb([24, 24, 28]));
            for r in truth.get(&f).into_iter().flatten() {
                draw_box(&mut img, &r.bbox, [110, 110, 110], 1);
            }
            for r in tracks.get(&f).into_iter().flatten() {
                draw_box(&mut img, &r.bbox, id_color(r.id), 2);
            }
            let mut png = Vec::new();
            img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
            let path = a.out_dir.join(format!("frame_{f:06}.png"));
            io::write_atomic(&path, |w| w.write_all(&png))?;
            Ok(path)
        })
        .collect::<Vec<Result<PathBuf>>>();
    let mut first_err = None;
    for r in written {
        match r {
            Ok(p) => out.add(&p),
            Err(e) => first_err = first_err.or(Some(e)),
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
