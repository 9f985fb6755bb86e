//! Training-patch generators.
//!
//! Two rival strategies over the same manifest:
//!
//! * **Live sampling** picks an annotated cell and centers a patch on it at
//!   training time. Class balance comes from the batch recipe: the first K
//!   slots are seeded by K distinct classes in shuffled order, and every
//!   remaining slot draws its class with probability proportional to
//!   `1 - p_k`, so rare classes are oversampled. Seeds are pooled across all
//!   train slides; a cell is eligible only when the whole patch centered on
//!   it stays inside the screened area.
//! * **Sub-image sampling** is the classical baseline: slides are pre-tiled
//!   into fixed patches and the sampler may only ever return those tiles.
//!   Class choice follows the same recipe, then a tile containing the class
//!   is picked uniformly. Since the tile set is finite, the same regions
//!   repeat epoch after epoch; that contrast is the point.
//!
//! Every batch is a pure function of `(manifest, seed, epoch, batch)`, so
//! workers can generate any batch independently without shared state.

use std::collections::HashMap;
use std::io::{self, Write};

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Rect;
use crate::model::{
    class_frequencies, CellClass, ClassFrequencyTable, ClassRegistry, DatasetManifest,
    SlideManifest, SplitRole,
};
use crate::rng::batch_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Live,
    SubImage,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub patch_size: i64,
    pub batch_size: usize,
    pub epoch_length: u32,
    pub mode: SamplingMode,
    pub seed: u64,
    /// When set, a class without any eligible seed (or tile) is an error
    /// instead of being dropped from the rotation.
    pub strict: bool,
}

impl SamplerConfig {
    /// Sampling defaults from the manifest; batch size 16.
    pub fn from_manifest(manifest: &DatasetManifest, mode: SamplingMode) -> Self {
        SamplerConfig {
            patch_size: manifest.patch_size,
            batch_size: 16,
            epoch_length: manifest.epoch_length,
            mode,
            seed: manifest.seed,
            strict: false,
        }
    }
}

/// Annotation expressed in patch-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalAnnotation {
    pub id: u64,
    pub cx: i64,
    pub cy: i64,
    pub radius: i64,
    pub class: CellClass,
}

/// One sampled training patch plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub slide_id: String,
    /// Top-left origin in slide coordinates.
    pub x: i64,
    pub y: i64,
    pub size: i64,
    /// The cell at the patch center (live mode).
    pub seed_annotation_id: Option<u64>,
    /// The class that selected this patch, in either mode.
    pub seed_class: Option<CellClass>,
    /// The pre-extracted tile this patch coincides with (sub-image mode).
    pub source_tile: Option<Rect>,
    /// All annotations whose centers fall inside the patch.
    pub ground_truth: Vec<LocalAnnotation>,
}

impl PatchSpec {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.size, self.size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    pub epoch: u64,
    pub index: u64,
    pub patches: Vec<PatchSpec>,
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("class {label} has no eligible seed cell in any train slide")]
    NoEligibleSeeds { class: CellClass, label: String },
    #[error("class {label} does not occur in any extracted sub-image")]
    NoTileForClass { class: CellClass, label: String },
    #[error("train slides contain no usable annotations")]
    EmptyPool,
    #[error("train slides yield no sub-images at patch size {patch_size}")]
    NoTiles { patch_size: i64 },
}

/// Class distribution for the free batch slots.
///
/// Classes absent from the table get probability zero; over the present
/// classes, `P(k) = (1 - p_k) / sum_j (1 - p_j)`. When all K classes are
/// present the denominator is exactly `K - 1`. A single-class table is the
/// degenerate limit and gets probability one.
pub fn extra_class_distribution(freqs: &ClassFrequencyTable) -> Vec<f64> {
    let present: Vec<usize> =
        (0..freqs.num_classes()).filter(|&k| freqs.counts()[k] > 0).collect();
    let mut probs = vec![0.0; freqs.num_classes()];
    if present.len() == 1 {
        probs[present[0]] = 1.0;
        return probs;
    }
    let denom: f64 =
        present.iter().map(|&k| 1.0 - freqs.frequency(CellClass(k as u32))).sum();
    for &k in &present {
        probs[k] = (1.0 - freqs.frequency(CellClass(k as u32))) / denom;
    }
    probs
}

/// Number of batches needed to cover `epoch_length` patches; the final
/// batch stays full-size, so the epoch may overshoot to a batch boundary.
pub fn batches_per_epoch(epoch_length: u32, batch_size: usize) -> u64 {
    (epoch_length as u64).div_ceil(batch_size as u64)
}

#[derive(Clone)]
struct SeedRef {
    slide: u32,
    ann: u32,
}

/// Spatial bucket index over one slide's annotations, for constant-time
/// patch ground-truth queries. Bucket side equals the patch size, so a
/// query rectangle touches at most four buckets.
struct AnnotationGrid {
    cell: i64,
    buckets: HashMap<(i64, i64), Vec<u32>>,
}

impl AnnotationGrid {
    fn build(slide: &SlideManifest, cell: i64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<u32>> = HashMap::new();
        for (i, ann) in slide.annotations.iter().enumerate() {
            let key = (ann.cx.div_euclid(cell), ann.cy.div_euclid(cell));
            buckets.entry(key).or_default().push(i as u32);
        }
        AnnotationGrid { cell, buckets }
    }

    fn collect(&self, slide: &SlideManifest, rect: Rect, out: &mut Vec<LocalAnnotation>) {
        let gx0 = rect.x.div_euclid(self.cell);
        let gx1 = (rect.right() - 1).div_euclid(self.cell);
        let gy0 = rect.y.div_euclid(self.cell);
        let gy1 = (rect.bottom() - 1).div_euclid(self.cell);
        for gy in gy0..=gy1 {
            for gx in gx0..=gx1 {
                let Some(bucket) = self.buckets.get(&(gx, gy)) else { continue };
                for &i in bucket {
                    let ann = &slide.annotations[i as usize];
                    if rect.contains_point(ann.cx, ann.cy) {
                        out.push(LocalAnnotation {
                            id: ann.id,
                            cx: ann.cx - rect.x,
                            cy: ann.cy - rect.y,
                            radius: ann.radius,
                            class: ann.class,
                        });
                    }
                }
            }
        }
        // Bucket iteration order is arbitrary; fix it.
        out.sort_by_key(|a| a.id);
    }
}

/// Precomputed sampling state over the train slides of a manifest.
///
/// Building the index resolves class frequencies, eligible-seed pools, the
/// sub-image tiling, and the extra-slot distribution once; afterwards any
/// batch of any epoch can be generated independently.
pub struct SamplerIndex<'a> {
    manifest: &'a DatasetManifest,
    cfg: SamplerConfig,
    slides: Vec<&'a SlideManifest>,
    grids: Vec<AnnotationGrid>,
    /// Eligible seed cells per class id (live mode).
    seed_pools: Vec<Vec<SeedRef>>,
    /// All extracted tiles over train slides, as (slide index, rect).
    tiles: Vec<(u32, Rect)>,
    /// Tile indices containing at least one cell of the class (sub-image mode).
    tile_pools: Vec<Vec<u32>>,
    /// Classes taking part in the guaranteed slots, id order.
    active: Vec<CellClass>,
    /// Extra-slot distribution renormalized over `active`.
    weights: WeightedIndex<f64>,
    probs: Vec<f64>,
}

impl<'a> SamplerIndex<'a> {
    pub fn new(manifest: &'a DatasetManifest, cfg: SamplerConfig) -> Result<Self, SamplerError> {
        let registry = &manifest.registry;
        if cfg.batch_size == 0 {
            return Err(SamplerError::InvalidConfig("batch_size must be > 0".into()));
        }
        if cfg.mode == SamplingMode::Live && cfg.batch_size < registry.len() {
            return Err(SamplerError::InvalidConfig(format!(
                "batch_size {} is smaller than the {} registered classes",
                cfg.batch_size,
                registry.len()
            )));
        }
        if (cfg.epoch_length as usize) < cfg.batch_size {
            return Err(SamplerError::InvalidConfig(format!(
                "epoch_length {} is smaller than batch_size {}",
                cfg.epoch_length, cfg.batch_size
            )));
        }
        if cfg.patch_size <= 0 || cfg.patch_size % 2 != 0 {
            return Err(SamplerError::InvalidConfig(format!(
                "patch_size {} must be even and > 0",
                cfg.patch_size
            )));
        }

        let slides: Vec<&SlideManifest> =
            manifest.slides_with_role(SplitRole::Train).collect();
        let freqs = class_frequencies(manifest, &[SplitRole::Train])
            .map_err(|_| SamplerError::EmptyPool)?;

        let mut seed_pools: Vec<Vec<SeedRef>> = vec![Vec::new(); registry.len()];
        let mut tiles = Vec::new();
        let mut tile_pools: Vec<Vec<u32>> = vec![Vec::new(); registry.len()];
        let mut grids = Vec::with_capacity(slides.len());
        for (si, slide) in slides.iter().enumerate() {
            for (ai, ann) in slide.annotations.iter().enumerate() {
                let patch = Rect::centered_patch(ann.cx, ann.cy, cfg.patch_size);
                if slide.screen_map.covers(&patch) {
                    seed_pools[ann.class.index()]
                        .push(SeedRef { slide: si as u32, ann: ai as u32 });
                }
            }
            for tile in slide.screen_map.tile_sub_images(cfg.patch_size) {
                let ti = tiles.len() as u32;
                let mut present = vec![false; registry.len()];
                for ann in &slide.annotations {
                    if tile.contains_point(ann.cx, ann.cy) {
                        present[ann.class.index()] = true;
                    }
                }
                for (k, p) in present.iter().enumerate() {
                    if *p {
                        tile_pools[k].push(ti);
                    }
                }
                tiles.push((si as u32, tile));
            }
            grids.push(AnnotationGrid::build(slide, cfg.patch_size));
        }

        // A class joins the rotation only if it can actually be served in
        // the configured mode. In strict mode a missing class aborts;
        // otherwise its probability mass is redistributed by renormalizing
        // over the classes that remain.
        let mut active = Vec::new();
        for class in registry.classes() {
            let servable = match cfg.mode {
                SamplingMode::Live => !seed_pools[class.index()].is_empty(),
                SamplingMode::SubImage => !tile_pools[class.index()].is_empty(),
            };
            if servable {
                active.push(class);
            } else if cfg.strict {
                let label = registry.label(class).unwrap_or("unknown").to_string();
                return Err(match cfg.mode {
                    SamplingMode::Live => SamplerError::NoEligibleSeeds { class, label },
                    SamplingMode::SubImage => SamplerError::NoTileForClass { class, label },
                });
            } else {
                log::warn!(
                    "class {} has nothing to sample in {:?} mode; dropped from rotation",
                    registry.label(class).unwrap_or("unknown"),
                    cfg.mode
                );
            }
        }
        if active.is_empty() {
            return Err(match cfg.mode {
                SamplingMode::Live => SamplerError::EmptyPool,
                SamplingMode::SubImage => SamplerError::NoTiles { patch_size: cfg.patch_size },
            });
        }

        let base = extra_class_distribution(&freqs);
        let mut probs: Vec<f64> = active.iter().map(|c| base[c.index()]).collect();
        let mass: f64 = probs.iter().sum();
        if mass > 0.0 {
            for p in &mut probs {
                *p /= mass;
            }
        } else {
            // Every active class had zero base mass (single-class fallback
            // corner); sample uniformly.
            probs.fill(1.0 / active.len() as f64);
        }
        let weights = WeightedIndex::new(&probs)
            .map_err(|e| SamplerError::InvalidConfig(e.to_string()))?;

        Ok(SamplerIndex {
            manifest,
            cfg,
            slides,
            grids,
            seed_pools,
            tiles,
            tile_pools,
            active,
            weights,
            probs,
        })
    }

    pub fn cfg(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn manifest(&self) -> &DatasetManifest {
        self.manifest
    }

    /// Classes currently in rotation, with their extra-slot probabilities.
    pub fn extra_distribution(&self) -> Vec<(CellClass, f64)> {
        self.active.iter().copied().zip(self.probs.iter().copied()).collect()
    }

    /// Total number of extracted sub-images across train slides.
    pub fn tile_count(&self) -> usize {
        self.tiles.len()
    }

    pub fn batches_per_epoch(&self) -> u64 {
        batches_per_epoch(self.cfg.epoch_length, self.cfg.batch_size)
    }

    /// Generate one batch. Pure in `(seed, epoch, index)`.
    pub fn batch(&self, epoch: u64, index: u64) -> BatchSpec {
        let mut rng = batch_rng(self.cfg.seed, epoch, index);
        let k = self.active.len().min(self.cfg.batch_size);
        let mut order: Vec<usize> = (0..self.active.len()).collect();
        order.shuffle(&mut rng);

        let mut patches = Vec::with_capacity(self.cfg.batch_size);
        for slot in 0..self.cfg.batch_size {
            let class_slot =
                if slot < k { order[slot] } else { self.weights.sample(&mut rng) };
            let class = self.active[class_slot];
            let patch = match self.cfg.mode {
                SamplingMode::Live => self.live_patch(class, &mut rng),
                SamplingMode::SubImage => self.tile_patch(class, &mut rng),
            };
            patches.push(patch);
        }
        BatchSpec { epoch, index, patches }
    }

    /// All batches of one epoch, in order.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = BatchSpec> + '_ {
        (0..self.batches_per_epoch()).map(move |i| self.batch(epoch, i))
    }

    fn live_patch(&self, class: CellClass, rng: &mut impl Rng) -> PatchSpec {
        let pool = &self.seed_pools[class.index()];
        let seed = &pool[rng.random_range(0..pool.len())];
        let slide = self.slides[seed.slide as usize];
        let ann = &slide.annotations[seed.ann as usize];
        let rect = Rect::centered_patch(ann.cx, ann.cy, self.cfg.patch_size);
        debug_assert!(slide.screen_map.covers(&rect));
        let mut ground_truth = Vec::new();
        self.grids[seed.slide as usize].collect(slide, rect, &mut ground_truth);
        PatchSpec {
            slide_id: slide.slide_id.clone(),
            x: rect.x,
            y: rect.y,
            size: self.cfg.patch_size,
            seed_annotation_id: Some(ann.id),
            seed_class: Some(class),
            source_tile: None,
            ground_truth,
        }
    }

    fn tile_patch(&self, class: CellClass, rng: &mut impl Rng) -> PatchSpec {
        let pool = &self.tile_pools[class.index()];
        let ti = pool[rng.random_range(0..pool.len())];
        let (si, tile) = self.tiles[ti as usize];
        let slide = self.slides[si as usize];
        let mut ground_truth = Vec::new();
        self.grids[si as usize].collect(slide, tile, &mut ground_truth);
        PatchSpec {
            slide_id: slide.slide_id.clone(),
            x: tile.x,
            y: tile.y,
            size: self.cfg.patch_size,
            seed_annotation_id: None,
            seed_class: Some(class),
            source_tile: Some(tile),
            ground_truth,
        }
    }
}

// ---------------------------------------------------------------------------
// Patch-manifest file: one JSON record per line, one line per sampled patch.
// Coordinates follow the manifest conventions (integer pixels, origin
// top-left); ground-truth centers are patch-local.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct PatchRecord {
    pub slide_id: String,
    pub x: i64,
    pub y: i64,
    pub size: i64,
    pub epoch: u64,
    pub batch: u64,
    pub slot: usize,
    pub seed_annotation_id: Option<u64>,
    pub seed_class: Option<String>,
    pub source_tile: Option<Rect>,
    pub annotations: Vec<LocalAnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
pub struct LocalAnnotationRecord {
    pub id: u64,
    pub cx: i64,
    pub cy: i64,
    pub r: i64,
    pub class: String,
}

pub fn patch_records(batch: &BatchSpec, registry: &ClassRegistry) -> Vec<PatchRecord> {
    let label = |c: CellClass| registry.label(c).unwrap_or("unknown").to_string();
    batch
        .patches
        .iter()
        .enumerate()
        .map(|(slot, p)| PatchRecord {
            slide_id: p.slide_id.clone(),
            x: p.x,
            y: p.y,
            size: p.size,
            epoch: batch.epoch,
            batch: batch.index,
            slot,
            seed_annotation_id: p.seed_annotation_id,
            seed_class: p.seed_class.map(label),
            source_tile: p.source_tile,
            annotations: p
                .ground_truth
                .iter()
                .map(|a| LocalAnnotationRecord {
                    id: a.id,
                    cx: a.cx,
                    cy: a.cy,
                    r: a.radius,
                    class: label(a.class),
                })
                .collect(),
        })
        .collect()
}

/// Append one batch to a patch-manifest stream.
pub fn write_patch_records(
    mut w: impl Write,
    batch: &BatchSpec,
    registry: &ClassRegistry,
) -> io::Result<()> {
    for record in patch_records(batch, registry) {
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
