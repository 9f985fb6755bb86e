//! Detector plumbing: the traits a model plugs in through, a configurable
//! oracle detector for end-to-end dry runs, whole-slide tiled inference, and
//! the plateau-droven learning-rate protocol.
//!
//! Nothing here contains a real model. The oracle reads ground truth and
//! corrupts it on purpose (misses, label confusion, box jitter, spurious
//! boxes) so that every downstream stage can be exercised with known
//! answers.

use std::cmp::Ordering;
use std::io::{self, BufRead, Write};

use image::RgbImage;
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{iou, nms, BoxF, Detection};
use crate::geometry::{Rect, ScreenMap};
use crate::model::{annotations_in, CellClass, SlideManifest};
use crate::raster::{extract_patch, GtBox, Patch, RasterError};
use crate::rng::{hash_str, keyed_rng};
use crate::sampler::{BatchSpec, LocalAnnotation, PatchSpec, SamplerIndex};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("invalid training schedule: {0}")]
    InvalidSchedule(String),
    #[error("learner failed at epoch {epoch}, batch {batch}: {message}")]
    LearnerFailure { epoch: u64, batch: u64, message: String },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("log io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed training log line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
}

/// Failure surfaced by a learner's own train step.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct LearnerError(pub String);

/// Anything that can turn a patch into detections.
///
/// Output boxes are patch-local. Implementations must be deterministic:
/// the same patch always yields the same detections, so tiled inference
/// and repeated evaluations are reproducible.
pub trait Detector {
    fn predict(&self, patch: &Patch) -> Vec<Detection>;
}

/// Anything the training protocol can drive. Kept separate from
/// [`Detector`]: the simulated learner used for schedule dry runs never
/// produces detections at all.
pub trait Learner {
    /// Consume one batch, return the mean loss over it. `patches` carries
    /// pixels when the caller materialized them; metadata-only runs pass
    /// an empty slice and the learner works from the specs.
    fn train_step(&mut self, batch: &BatchSpec, patches: &[Patch]) -> Result<f64, LearnerError>;

    fn set_learning_rate(&mut self, lr: f64);
}

// Key-path tags for the oracle's derived rng streams. Per-annotation
// streams (miss, label, score) are deliberately independent of the patch,
// so a cell straddling two inference tiles gets the same fate in both.
const MISS_TAG: u64 = 0x6d697373;
const LABEL_TAG: u64 = 0x6c6162656c;
const SCORE_TAG: u64 = 0x73636f7265;
const JITTER_TAG: u64 = 0x6a6974;
const FP_TAG: u64 = 0x6670;

/// Noise model for [`OracleDetector`]. All-zero settings reproduce the
/// ground truth exactly (scores still randomized within the TP band).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleDetectorConfig {
    /// Per-class probability of dropping a true cell, indexed by class id.
    pub miss_rate: Vec<f64>,
    /// Expected spurious detections per square pixel of patch area.
    pub false_positive_rate: f64,
    /// Uniform box translation amplitude, pixels.
    pub jitter_px: f64,
    /// Row-stochastic label confusion matrix; `None` means identity.
    pub confusion: Option<Vec<Vec<f64>>>,
    /// Side of emitted spurious boxes, pixels.
    pub fp_box_px: f64,
    pub seed: u64,
}

impl OracleDetectorConfig {
    pub fn zero_noise(seed: u64, num_classes: usize) -> Self {
        Self {
            miss_rate: vec![0.0; num_classes],
            false_positive_rate: 0.0,
            jitter_px: 0.0,
            confusion: None,
            fp_box_px: 24.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidConfig(m));
        if self.miss_rate.is_empty() {
            return bad("miss_rate must cover at least one class".into());
        }
        for (i, &m) in self.miss_rate.iter().enumerate() {
            if !(0.0..=1.0).contains(&m) {
                return bad(format!("miss_rate[{i}] = {m} outside [0, 1]"));
            }
        }
        if !self.false_positive_rate.is_finite() || self.false_positive_rate < 0.0 {
            return bad(format!("false_positive_rate = {}", self.false_positive_rate));
        }
        if !self.jitter_px.is_finite() || self.jitter_px < 0.0 {
            return bad(format!("jitter_px = {}", self.jitter_px));
        }
        if self.fp_box_px <= 0.0 || !self.fp_box_px.is_finite() {
            return bad(format!("fp_box_px = {}", self.fp_box_px));
        }
        if let Some(rows) = &self.confusion {
            let n = self.miss_rate.len();
            if rows.len() != n {
                return bad(format!("confusion has {} rows for {n} classes", rows.len()));
            }
            for (i, row) in rows.iter().enumerate() {
                if row.len() != n {
                    return bad(format!("confusion row {i} has {} entries", row.len()));
                }
                if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return bad(format!("confusion row {i} has a negative entry"));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return bad(format!("confusion row {i} sums to {sum}"));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth-reading detector with dialable noise.
///
/// Every random decision comes from an rng keyed on the config seed plus
/// the annotation id (miss, relabel, score) or the patch origin (jitter,
/// spurious boxes). Two consequences worth relying on:
///
/// * repeated calls are bit-identical, whatever the call order;
/// * the set of cells missed at rate r is a superset of the set missed at
///   any r' < r, because each cell compares one fixed uniform draw against
///   the rate. Recall therefore degrades monotonically along a miss sweep.
pub struct OracleDetector {
    cfg: OracleDetectorConfig,
    relabel: Option<Vec<WeightedIndex<f64>>>,
}

impl OracleDetector {
    pub fn new(cfg: OracleDetectorConfig) -> Result<Self, DetectorError> {
        cfg.validate()?;
        let relabel = match &cfg.confusion {
            Some(rows) => Some(
                rows.iter()
                    .map(|row| {
                        WeightedIndex::new(row.iter().copied()).map_err(|e| {
                            DetectorError::InvalidConfig(format!("confusion row: {e}"))
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        Ok(Self { cfg, relabel })
    }

    pub fn config(&self) -> &OracleDetectorConfig {
        &self.cfg
    }

    fn num_classes(&self) -> u32 {
        self.cfg.miss_rate.len() as u32
    }

    /// Predict from a bare spec, no pixels needed. `predict` delegates
    /// here; tests and metadata-only pipelines call it directly.
    pub fn predict_spec(&self, spec: &PatchSpec) -> Vec<Detection> {
        let boxes: Vec<GtBox> = spec
            .ground_truth
            .iter()
            .map(|a| GtBox {
                id: a.id,
                class: a.class,
                bbox: BoxF::new(
                    (a.cx - a.radius) as f64,
                    (a.cy - a.radius) as f64,
                    (2 * a.radius) as f64,
                    (2 * a.radius) as f64,
                ),
            })
            .collect();
        self.corrupt(&spec.slide_id, spec.x, spec.y, spec.size as f64, spec.size as f64, &boxes)
    }

    fn corrupt(
        &self,
        slide_id: &str,
        px: i64,
        py: i64,
        w: f64,
        h: f64,
        ground_truth: &[GtBox],
    ) -> Vec<Detection> {
        let seed = self.cfg.seed;
        let sid = hash_str(slide_id);
        let mut out = Vec::new();

        for b in ground_truth {
            let idx = b.class.index();
            let miss = self.cfg.miss_rate.get(idx).copied().unwrap_or(0.0);
            // Emit iff the cell's fixed draw clears the rate; see type docs.
            if keyed_rng(seed, &[MISS_TAG, b.id]).random::<f64>() < miss {
                continue;
            }

            let class = match self.relabel.as_ref().and_then(|rows| rows.get(idx)) {
                Some(row) => {
                    let mut rng = keyed_rng(seed, &[LABEL_TAG, b.id]);
                    CellClass(row.sample(&mut rng) as u32)
                }
                None => b.class,
            };

            let mut bbox = b.bbox;
            if self.cfg.jitter_px > 0.0 {
                let j = self.cfg.jitter_px;
                let mut rng = keyed_rng(seed, &[JITTER_TAG, sid, px as u64, py as u64, b.id]);
                bbox.x += rng.random_range(-j..j);
                bbox.y += rng.random_range(-j..j);
            }

            let score = 0.7 + 0.3 * keyed_rng(seed, &[SCORE_TAG, b.id]).random::<f64>();
            out.push(Detection {
                id: out.len() as u64 + 1,
                image_id: slide_id.to_string(),
                class,
                score,
                bbox,
            });
        }

        let lambda = self.cfg.false_positive_rate * w * h;
        if lambda > 0.0 {
            let mut rng = keyed_rng(seed, &[FP_TAG, sid, px as u64, py as u64]);
            let count = Poisson::new(lambda).expect("validated rate").sample(&mut rng) as u64;
            let side = self.cfg.fp_box_px;
            for _ in 0..count {
                let cx = rng.random::<f64>() * w;
                let cy = rng.random::<f64>() * h;
                let class = CellClass(rng.random_range(0..self.num_classes()));
                let score = 0.6 * rng.random::<f64>();
                out.push(Detection {
                    id: out.len() as u64 + 1,
                    image_id: slide_id.to_string(),
                    class,
                    score,
                    bbox: BoxF::new(cx - side / 2.0, cy - side / 2.0, side, side),
                });
            }
        }
        out
    }
}

impl Detector for OracleDetector {
    fn predict(&self, patch: &Patch) -> Vec<Detection> {
        // Uses the patch's own (possibly augmented) boxes, not the spec's.
        self.corrupt(
            &patch.spec.slide_id,
            patch.spec.x,
            patch.spec.y,
            patch.pixels.width() as f64,
            patch.pixels.height() as f64,
            &patch.ground_truth,
        )
    }
}

/// Same-class IoU at or above this is treated as the same cell seen from
/// two overlapping tiles.
pub const DEDUP_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct InferConfig {
    pub tile_size: i64,
    pub overlap_px: i64,
    pub nms_iou: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { tile_size: 1024, overlap_px: 256, nms_iou: 0.5 }
    }
}

/// Square tiles covering the screened area, stride `tile_size - overlap_px`,
/// clamped to slide bounds. Tiles never leave the slide; on slides smaller
/// than the tile the side shrinks to fit. Tiles that miss the screened
/// area entirely are skipped.
pub fn tile_grid(
    map: &ScreenMap,
    width: i64,
    height: i64,
    cfg: &InferConfig,
) -> Result<Vec<Rect>, DetectorError> {
    if cfg.tile_size <= 0 || cfg.overlap_px < 0 || cfg.overlap_px >= cfg.tile_size {
        return Err(DetectorError::InvalidConfig(format!(
            "tile {} / overlap {} (need 0 <= overlap < tile)",
            cfg.tile_size, cfg.overlap_px
        )));
    }
    let pieces = map.normalized();
    if pieces.is_empty() || width <= 0 || height <= 0 {
        return Ok(Vec::new());
    }
    let bx = pieces.iter().map(|r| r.x).min().unwrap().max(0);
    let by = pieces.iter().map(|r| r.y).min().unwrap().max(0);
    let bright = pieces.iter().map(Rect::right).max().unwrap().min(width);
    let bbottom = pieces.iter().map(Rect::bottom).max().unwrap().min(height);

    let side = cfg.tile_size.min(width).min(height);
    let stride = (side - cfg.overlap_px).max(1);

    let axis = |from: i64, until: i64, limit: i64| {
        let mut out = Vec::new();
        let mut v = from;
        loop {
            let origin = v.min(limit - side).max(0);
            out.push(origin);
            if origin + side >= until || origin == limit - side {
                break;
            }
            v += stride;
        }
        out
    };

    let xs = axis(bx, bright, width);
    let ys = axis(by, bbottom, height);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let t = Rect::new(x, y, side, side);
            if pieces.iter().any(|p| p.intersects(&t)) {
                tiles.push(t);
            }
        }
    }
    Ok(tiles)
}

/// Remove duplicates: walk detections by descending score (ties broken by
/// ascending id), dropping any that overlaps an already kept same-class
/// box with IoU >= `iou_threshold`. This is the cross-tile counterpart of
/// NMS, with an inclusive comparison so exact re-detections collapse.
pub fn dedup_overlaps(mut dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    let mut kept: Vec<Detection> = Vec::new();
    'next: for d in dets {
        for k in &kept {
            if k.class == d.class && iou(&k.bbox, &d.bbox) >= iou_threshold {
                continue 'next;
            }
        }
        kept.push(d);
    }
    kept
}

/// Run a detector over a whole slide: tile the screened area, predict per
/// tile in parallel, lift boxes to slide coordinates, collapse cross-tile
/// duplicates, then apply class-aware NMS. Detection ids are reassigned
/// sequentially in deterministic tile order, so the output is a pure
/// function of (detector, slide, raster, config).
pub fn infer_slide<D: Detector + Sync>(
    detector: &D,
    slide: &SlideManifest,
    raster: &RgbImage,
    cfg: &InferConfig,
) -> Result<Vec<Detection>, DetectorError> {
    let tiles = tile_grid(&slide.screen_map, slide.width, slide.height, cfg)?;
    let per_tile = tiles
        .par_iter()
        .map(|tile| {
            let spec = tile_spec(slide, *tile);
            let patch = extract_patch(raster, &spec)?;
            let mut dets = detector.predict(&patch);
            for d in &mut dets {
                d.bbox.x += tile.x as f64;
                d.bbox.y += tile.y as f64;
            }
            Ok(dets)
        })
        .collect::<Result<Vec<_>, DetectorError>>()?;

    let mut all: Vec<Detection> = per_tile.into_iter().flatten().collect();
    for (i, d) in all.iter_mut().enumerate() {
        d.id = i as u64 + 1;
    }
    let unique = dedup_overlaps(all, DEDUP_IOU);
    Ok(nms(&unique, cfg.nms_iou, true))
}

fn tile_spec(slide: &SlideManifest, tile: Rect) -> PatchSpec {
    let ground_truth = annotations_in(slide, tile)
        .map(|a| LocalAnnotation {
            id: a.id,
            cx: a.cx - tile.x,
            cy: a.cy - tile.y,
            radius: a.radius,
            class: a.class,
        })
        .collect();
    PatchSpec {
        slide_id: slide.slide_id.clone(),
        x: tile.x,
        y: tile.y,
        size: tile.w,
        seed_annotation_id: None,
        seed_class: None,
        source_tile: None,
        ground_truth,
    }
}

/// Learning-rate ladder with plateau stepping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingSchedule {
    /// Rates walked top to bottom; training starts on the first.
    pub lr_ladder: Vec<f64>,
    /// Epochs without a new best metric before stepping down one rung.
    pub plateau_patience: u32,
    /// Epochs without a new best, on the last rung, before stopping.
    pub stop_patience: u32,
    pub max_epochs: u64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self { lr_ladder: vec![1e-3, 1e-4, 1e-5], plateau_patience: 3, stop_patience: 10, max_epochs: 60 }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<(), DetectorError> {
        let bad = |m: String| Err(DetectorError::InvalidSchedule(m));
        if self.lr_ladder.is_empty() {
            return bad("lr ladder is empty".into());
        }
        if self.lr_ladder.iter().any(|&lr| !(lr > 0.0) || !lr.is_finite()) {
            return bad(format!("lr ladder {:?} has a non-positive rate", self.lr_ladder));
        }
        if self.lr_ladder.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("lr ladder {:?} is not strictly decreasing", self.lr_ladder));
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Plateau,
    MaxEpochs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedulerStep {
    /// Metric made a new best.
    Improved,
    /// No new best, within patience.
    Stalled,
    /// Patience exhausted; training continues on the returned rate.
    DropLr(f64),
    /// Patience exhausted on the final rung.
    Stop,
}

/// Tracks the best validation metric (lower is better) and decides when
/// to step the ladder or stop.
///
/// The first observed epoch sets the baseline *and* counts as one stalled
/// epoch: with a constant metric and patience 3 the first drop lands after
/// epoch 3, the second after epoch 6, and a stop patience of 10 ends the
/// run after epoch 16.
pub struct PlateauScheduler {
    ladder: Vec<f64>,
    plateau_patience: u32,
    stop_patience: u32,
    rung: usize,
    best: Option<f64>,
    best_epoch: u64,
    stalled: u32,
}

impl PlateauScheduler {
    pub fn new(schedule: &TrainingSchedule) -> Result<Self, DetectorError> {
        schedule.validate()?;
        Ok(Self {
            ladder: schedule.lr_ladder.clone(),
            plateau_patience: schedule.plateau_patience,
            stop_patience: schedule.stop_patience,
            rung: 0,
            best: None,
            best_epoch: 0,
            stalled: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.ladder[self.rung]
    }

    /// `(epoch, metric)` of the best observation so far.
    pub fn best(&self) -> Option<(u64, f64)> {
        self.best.map(|m| (self.best_epoch, m))
    }

    pub fn observe(&mut self, epoch: u64, metric: f64) -> SchedulerStep {
        match self.best {
            Some(best) if metric < best => {
                self.best = Some(metric);
                self.best_epoch = epoch;
                self.stalled = 0;
                return SchedulerStep::Improved;
            }
            Some(_) => self.stalled += 1,
            None => {
                self.best = Some(metric);
                self.best_epoch = epoch;
                self.stalled = 1;
            }
        }
        let final_rung = self.rung + 1 == self.ladder.len();
        if final_rung {
            if self.stalled >= self.stop_patience {
                SchedulerStep::Stop
            } else {
                SchedulerStep::Stalled
            }
        } else if self.stalled >= self.plateau_patience {
            self.rung += 1;
            self.stalled = 0;
            SchedulerStep::DropLr(self.lr())
        } else {
            SchedulerStep::Stalled
        }
    }
}

/// One line of the training log. `event` is empty for an ordinary epoch,
/// `best` on improvement, `lr_drop` when the ladder stepped after this
/// epoch, and `stop:plateau` / `stop:max_epochs` on the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
    pub event: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: u64,
    pub best_metric: f64,
    pub stop_reason: StopReason,
}

/// Drive a learner through sampled epochs under a plateau schedule.
///
/// `provide` materializes pixels for a batch (return an empty vec for
/// metadata-only runs); `validate` computes the monitored metric, lower
/// better, once per epoch. The whole run is a pure function of the sampler
/// stream, the schedule, and the two callbacks.
pub fn run_training_protocol<L, P, V>(
    learner: &mut L,
    sampler: &SamplerIndex,
    schedule: &TrainingSchedule,
    mut provide: P,
    mut validate: V,
) -> Result<TrainingLog, DetectorError>
where
    L: Learner,
    P: FnMut(&BatchSpec) -> Result<Vec<Patch>, DetectorError>,
    V: FnMut(&mut L, u64) -> f64,
{
    let mut scheduler = PlateauScheduler::new(schedule)?;
    learner.set_learning_rate(scheduler.lr());

    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=schedule.max_epochs {
        let lr = scheduler.lr();
        let mut loss_sum = 0.0;
        let mut batches = 0u64;
        for batch in sampler.epoch(epoch) {
            let patches = provide(&batch)?;
            let loss = learner.train_step(&batch, &patches).map_err(|e| {
                DetectorError::LearnerFailure { epoch, batch: batch.index, message: e.0 }
            })?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_metric = validate(learner, epoch);

        let step = scheduler.observe(epoch, val_metric);
        let mut events: Vec<String> = Vec::new();
        let mut stopped = false;
        match step {
            SchedulerStep::Improved => events.push("best".into()),
            SchedulerStep::Stalled => {}
            SchedulerStep::DropLr(new_lr) => {
                events.push("lr_drop".into());
                learner.set_learning_rate(new_lr);
            }
            SchedulerStep::Stop => {
                events.push("stop:plateau".into());
                stop_reason = StopReason::Plateau;
                stopped = true;
            }
        }
        if !stopped && epoch == schedule.max_epochs {
            events.push("stop:max_epochs".into());
        }
        epochs.push(EpochRecord { epoch, lr, train_loss, val_metric, event: events.join(";") });
        if stopped {
            break;
        }
    }

    let (best_epoch, best_metric) = scheduler.best().expect("at least one epoch ran");
    Ok(TrainingLog { epochs, best_epoch, best_metric, stop_reason })
}

/// One JSON object per epoch, newline separated.
pub fn write_training_log<W: Write>(mut w: W, log: &TrainingLog) -> Result<(), DetectorError> {
    for rec in &log.epochs {
        serde_json::to_writer(&mut w, rec).map_err(|e| io::Error::other(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_training_log<R: BufRead>(r: R) -> Result<Vec<EpochRecord>, DetectorError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| DetectorError::Parse { line: i + 1, source })?,
        );
    }
    Ok(out)
}

/// Stand-in learner with believable dynamics and no model inside.
///
/// Validation loss decays toward a floor that shrinks with the learning
/// rate, so a default schedule produces the expected arc: fast descent,
/// stall, ladder steps buying smaller gains, then a plateau stop. The
/// metric is snapped to a coarse grid, which turns the asymptote into a
/// genuine plateau instead of an endless trickle of record lows; seeded
/// noise only flavors the reported train loss. Deterministic throughout.
pub struct SimLearner {
    seed: u64,
    lr: f64,
    steps: u64,
}

const SIM_TAG: u64 = 0x73696d;
const SIM_GRID: f64 = 5e-4;

impl SimLearner {
    pub fn new(seed: u64) -> Self {
        Self { seed, lr: 1e-3, steps: 0 }
    }

    fn curve(&self) -> f64 {
        let decay = 0.9 * (-(self.steps as f64) / 6.0).exp();
        let floor = 0.12 + 4.0 * self.lr;
        floor + decay
    }

    /// The monitored metric; pass as the protocol's `validate` callback.
    pub fn validation_loss(&self, _epoch: u64) -> f64 {
        (self.curve() / SIM_GRID).round() * SIM_GRID
    }
}

impl Learner for SimLearner {
    fn train_step(&mut self, batch: &BatchSpec, _patches: &[Patch]) -> Result<f64, LearnerError> {
        if batch.patches.is_empty() {
            return Err(LearnerError("empty batch".into()));
        }
        self.steps += 1;
        let noise = (keyed_rng(self.seed, &[SIM_TAG, self.steps]).random::<f64>() - 0.5) * 0.01;
        Ok(self.curve() + noise)
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }
}
