//! Domain types, class statistics, and the dataset manifest.
//!
//! A dataset is a set of slides, each with a screened region map and expert
//! cell annotations. Annotations are points with a radius (cytology marks
//! cell centers, not boxes); detection boxes are derived downstream as
//! axis-aligned squares of side `2 * radius` centered on the point. All
//! values are immutable after load and safe to share across workers.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Rect, ScreenMap};

/// Cell class identified by a stable integer id.
///
/// The five canonical classes always occupy ids 0-4; additional labels can
/// be registered behind them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellClass(pub u32);

impl CellClass {
    pub const EOSINOPHIL: CellClass = CellClass(0);
    pub const MAST_CELL: CellClass = CellClass(1);
    pub const NEUTROPHIL: CellClass = CellClass(2);
    pub const MACROPHAGE: CellClass = CellClass(3);
    pub const LYMPHOCYTE: CellClass = CellClass(4);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Labels of the canonical classes, in id order.
pub const CANONICAL_LABELS: [&str; 5] =
    ["eosinophil", "mast_cell", "neutrophil", "macrophage", "lymphocyte"];

/// Label registry mapping class ids to names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    labels: Vec<String>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ClassRegistry {
    /// Registry holding exactly the five canonical classes.
    pub fn canonical() -> Self {
        ClassRegistry { labels: CANONICAL_LABELS.iter().map(|s| s.to_string()).collect() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = CellClass> + '_ {
        (0..self.labels.len() as u32).map(CellClass)
    }

    pub fn label(&self, class: CellClass) -> Option<&str> {
        self.labels.get(class.index()).map(String::as_str)
    }

    pub fn id(&self, label: &str) -> Option<CellClass> {
        self.labels.iter().position(|l| l == label).map(|i| CellClass(i as u32))
    }

    /// Resolve a label, registering it with the next free id if unknown.
    pub fn resolve(&mut self, label: &str) -> CellClass {
        if let Some(c) = self.id(label) {
            return c;
        }
        self.labels.push(label.to_string());
        CellClass(self.labels.len() as u32 - 1)
    }
}

/// Expert-marked cell: a center point with a radius and a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    /// Unique 64-bit id, stable across runs.
    pub id: u64,
    /// Center x in slide pixels, origin top-left.
    pub cx: i64,
    /// Center y in slide pixels.
    pub cy: i64,
    /// Cell radius in pixels, > 0.
    pub radius: i64,
    pub class: CellClass,
    pub annotator: String,
}

impl Annotation {
    /// Detection box bridge: the axis-aligned square of side `2 * radius`
    /// centered on the annotation point.
    pub fn bounding_square(&self) -> (f64, f64, f64, f64) {
        let r = self.radius as f64;
        (self.cx as f64 - r, self.cy as f64 - r, 2.0 * r, 2.0 * r)
    }
}

/// Role of a slide in the fixed-train-set cross validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Val,
    Test,
}

/// Per-slide metadata: dimensions, screened region, annotations, split role.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideManifest {
    pub slide_id: String,
    pub width: i64,
    pub height: i64,
    pub split_role: SplitRole,
    /// Path of the slide raster (PNG), if pixels are available. Relative
    /// paths are resolved against the manifest's directory.
    pub raster_source: Option<String>,
    pub screen_map: ScreenMap,
    pub annotations: Vec<Annotation>,
}

impl SlideManifest {
    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }
}

/// Relative class frequencies over a slide selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassFrequencyTable {
    counts: Vec<u64>,
    total: u64,
}

impl ClassFrequencyTable {
    /// Build from per-class counts indexed by class id.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self, ModelError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(ModelError::EmptySelection);
        }
        Ok(ClassFrequencyTable { counts, total })
    }

    pub fn count(&self, class: CellClass) -> u64 {
        self.counts.get(class.index()).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Relative frequency p_k = count_k / total.
    pub fn frequency(&self, class: CellClass) -> f64 {
        self.count(class) as f64 / self.total as f64
    }
}

/// Dataset-level manifest: slides plus sampling defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Side of the square training patches, even and > 0.
    pub patch_size: i64,
    /// Master PRNG seed for everything sampled from this dataset.
    pub seed: u64,
    /// Training patches per epoch.
    pub epoch_length: u32,
    /// Radius assumed for annotations that do not carry one.
    pub default_radius: i64,
    pub slides: Vec<SlideManifest>,
    pub registry: ClassRegistry,
}

pub const DEFAULT_PATCH_SIZE: i64 = 1024;
pub const DEFAULT_EPOCH_LENGTH: u32 = 500;
pub const DEFAULT_RADIUS: i64 = 25;

/// Single invariant breach, with enough context to locate the offender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub slide_id: Option<String>,
    pub annotation_id: Option<u64>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.slide_id, self.annotation_id) {
            (Some(s), Some(a)) => write!(f, "slide {s}, annotation {a}: {}", self.message),
            (Some(s), None) => write!(f, "slide {s}: {}", self.message),
            _ => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("manifest validation failed with {} violation(s):\n{}", .0.len(),
            .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Violation>),
    #[error("no annotations in the selected split roles")]
    EmptySelection,
}

impl DatasetManifest {
    pub fn new(slides: Vec<SlideManifest>) -> Self {
        DatasetManifest {
            patch_size: DEFAULT_PATCH_SIZE,
            seed: 0,
            epoch_length: DEFAULT_EPOCH_LENGTH,
            default_radius: DEFAULT_RADIUS,
            slides,
            registry: ClassRegistry::canonical(),
        }
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideManifest> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn slides_with_role(&self, role: SplitRole) -> impl Iterator<Item = &SlideManifest> {
        self.slides.iter().filter(move |s| s.split_role == role)
    }

    pub fn total_annotations(&self) -> usize {
        self.slides.iter().map(|s| s.annotations.len()).sum()
    }

    /// Check every structural invariant, reporting all offenders at once.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut violations = Vec::new();
        let mut push = |slide: Option<&str>, ann: Option<u64>, msg: String| {
            violations.push(Violation {
                slide_id: slide.map(|s| s.to_string()),
                annotation_id: ann,
                message: msg,
            });
        };

        if self.slides.is_empty() {
            push(None, None, "manifest contains no slides".into());
        }
        if self.patch_size <= 0 || self.patch_size % 2 != 0 {
            push(None, None, format!("patch_size {} must be even and > 0", self.patch_size));
        }
        if self.default_radius <= 0 {
            push(None, None, format!("default_radius {} must be > 0", self.default_radius));
        }

        let mut slide_ids = HashSet::new();
        let mut ann_ids = HashSet::new();
        for slide in &self.slides {
            let sid = slide.slide_id.as_str();
            if !slide_ids.insert(sid) {
                push(Some(sid), None, "duplicate slide_id".into());
            }
            if slide.width <= 0 || slide.height <= 0 {
                push(
                    Some(sid),
                    None,
                    format!("dimensions {}x{} must be positive", slide.width, slide.height),
                );
            }
            let bounds = slide.bounds();
            for r in slide.screen_map.rects() {
                if r.w <= 0 || r.h <= 0 {
                    push(Some(sid), None, format!("screened rect {r:?} has non-positive extent"));
                } else if !bounds.contains_rect(r) {
                    push(Some(sid), None, format!("screened rect {r:?} exceeds slide bounds"));
                }
            }
            for ann in &slide.annotations {
                if !ann_ids.insert(ann.id) {
                    push(Some(sid), Some(ann.id), "duplicate annotation id".into());
                }
                if ann.radius <= 0 {
                    push(Some(sid), Some(ann.id), format!("radius {} must be > 0", ann.radius));
                }
                if !bounds.contains_point(ann.cx, ann.cy) {
                    push(
                        Some(sid),
                        Some(ann.id),
                        format!("center ({}, {}) outside slide bounds", ann.cx, ann.cy),
                    );
                } else if !slide.screen_map.contains_point(ann.cx, ann.cy) {
                    push(
                        Some(sid),
                        Some(ann.id),
                        format!("center ({}, {}) outside the screened area", ann.cx, ann.cy),
                    );
                }
                if self.registry.label(ann.class).is_none() {
                    push(Some(sid), Some(ann.id), format!("unregistered class id {}", ann.class.0));
                }
            }
        }

        if violations.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Validation(violations))
        }
    }

    /// Check the fixed-train-set cross-validation configuration: exactly one
    /// validation slide and one test slide.
    pub fn validate_cross_validation(&self) -> Result<(), ModelError> {
        let vals = self.slides_with_role(SplitRole::Val).count();
        let tests = self.slides_with_role(SplitRole::Test).count();
        if vals == 1 && tests == 1 {
            Ok(())
        } else {
            Err(ModelError::Validation(vec![Violation {
                slide_id: None,
                annotation_id: None,
                message: format!(
                    "cross validation needs exactly one val and one test slide, found {vals} val / {tests} test"
                ),
            }]))
        }
    }
}

/// Annotations whose centers fall inside `rect` (half-open, like all
/// rectangle containment here). Linear scan; fine for per-tile queries.
pub fn annotations_in<'a>(
    slide: &'a SlideManifest,
    rect: Rect,
) -> impl Iterator<Item = &'a Annotation> {
    slide.annotations.iter().filter(move |a| rect.contains_point(a.cx, a.cy))
}

/// Exact per-class annotation tallies over the slides in `roles`.
pub fn class_frequencies(
    manifest: &DatasetManifest,
    roles: &[SplitRole],
) -> Result<ClassFrequencyTable, ModelError> {
    let mut counts = vec![0u64; manifest.registry.len()];
    for slide in &manifest.slides {
        if !roles.contains(&slide.split_role) {
            continue;
        }
        for ann in &slide.annotations {
            if let Some(c) = counts.get_mut(ann.class.index()) {
                *c += 1;
            }
        }
    }
    ClassFrequencyTable::from_counts(counts)
}

// ---------------------------------------------------------------------------
// Manifest file format (UTF-8 JSON, integer pixel coordinates, origin
// top-left). Wire structs mirror the file exactly; conversion resolves class
// labels through the registry.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    patch_size: i64,
    seed: u64,
    epoch_length: u32,
    #[serde(default = "default_radius_field")]
    default_radius: i64,
    slides: Vec<SlideFile>,
}

fn default_radius_field() -> i64 {
    DEFAULT_RADIUS
}

#[derive(Serialize, Deserialize)]
struct SlideFile {
    slide_id: String,
    width: i64,
    height: i64,
    split_role: SplitRole,
    raster_source: Option<String>,
    screened: Vec<Rect>,
    annotations: Vec<AnnotationFile>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    id: u64,
    cx: i64,
    cy: i64,
    r: Option<i64>,
    class: String,
    annotator: String,
}

fn from_file(file: ManifestFile) -> DatasetManifest {
    let mut registry = ClassRegistry::canonical();
    let default_radius = file.default_radius;
    let slides = file
        .slides
        .into_iter()
        .map(|s| SlideManifest {
            screen_map: ScreenMap::new(s.slide_id.clone(), s.screened),
            slide_id: s.slide_id,
            width: s.width,
            height: s.height,
            split_role: s.split_role,
            raster_source: s.raster_source,
            annotations: s
                .annotations
                .into_iter()
                .map(|a| Annotation {
                    id: a.id,
                    cx: a.cx,
                    cy: a.cy,
                    radius: a.r.unwrap_or(default_radius),
                    class: registry.resolve(&a.class),
                    annotator: a.annotator,
                })
                .collect(),
        })
        .collect();
    DatasetManifest {
        patch_size: file.patch_size,
        seed: file.seed,
        epoch_length: file.epoch_length,
        default_radius,
        slides,
        registry,
    }
}

fn to_file(manifest: &DatasetManifest) -> ManifestFile {
    ManifestFile {
        patch_size: manifest.patch_size,
        seed: manifest.seed,
        epoch_length: manifest.epoch_length,
        default_radius: manifest.default_radius,
        slides: manifest
            .slides
            .iter()
            .map(|s| SlideFile {
                slide_id: s.slide_id.clone(),
                width: s.width,
                height: s.height,
                split_role: s.split_role,
                raster_source: s.raster_source.clone(),
                screened: s.screen_map.rects().to_vec(),
                annotations: s
                    .annotations
                    .iter()
                    .map(|a| AnnotationFile {
                        id: a.id,
                        cx: a.cx,
                        cy: a.cy,
                        r: Some(a.radius),
                        class: manifest
                            .registry
                            .label(a.class)
                            .unwrap_or("unknown")
                            .to_string(),
                        annotator: a.annotator.clone(),
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Load and validate a dataset manifest from a JSON file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    manifest_from_json(&text)
}

/// Parse and validate a manifest from its JSON text.
pub fn manifest_from_json(text: &str) -> Result<DatasetManifest, ModelError> {
    let file: ManifestFile = serde_json::from_str(text)?;
    let manifest = from_file(file);
    manifest.validate()?;
    Ok(manifest)
}

/// Canonical JSON form of a manifest. `save(load(f))` is byte-identical for
/// files already in this form.
pub fn manifest_to_json(manifest: &DatasetManifest) -> String {
    let mut s = serde_json::to_string_pretty(&to_file(manifest)).expect("manifest serializes");
    s.push('\n');
    s
}

/// Write a manifest to disk in canonical form.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let mut f = fs::File::create(path)
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    f.write_all(manifest_to_json(manifest).as_bytes())
        .map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Deterministic slide fixture: the requested class counts placed row-major
/// on a lattice inside `region`, spaced `spacing` pixels apart.
///
/// Fast path for building exact-count datasets in tests and experiments; use
/// the synthetic raster generator when pixels are needed.
pub fn lattice_slide(
    slide_id: &str,
    width: i64,
    height: i64,
    screened: Vec<Rect>,
    counts: &[(CellClass, u64)],
    region: Rect,
    spacing: i64,
    radius: i64,
    role: SplitRole,
    first_id: u64,
) -> Result<SlideManifest, ModelError> {
    assert!(spacing > 0 && radius > 0);
    let cols = region.w / spacing;
    let rows = region.h / spacing;
    let capacity = (cols * rows) as u64;
    let wanted: u64 = counts.iter().map(|(_, n)| n).sum();
    if wanted > capacity {
        return Err(ModelError::Validation(vec![Violation {
            slide_id: Some(slide_id.to_string()),
            annotation_id: None,
            message: format!("lattice region holds {capacity} cells, {wanted} requested"),
        }]));
    }
    let mut annotations = Vec::with_capacity(wanted as usize);
    let mut slot = 0u64;
    let mut id = first_id;
    for &(class, n) in counts {
        for _ in 0..n {
            let cx = region.x + (slot % cols as u64) as i64 * spacing + spacing / 2;
            let cy = region.y + (slot / cols as u64) as i64 * spacing + spacing / 2;
            annotations.push(Annotation {
                id,
                cx,
                cy,
                radius,
                class,
                annotator: "lattice".into(),
            });
            slot += 1;
            id += 1;
        }
    }
    Ok(SlideManifest {
        slide_id: slide_id.to_string(),
        width,
        height,
        split_role: role,
        raster_source: None,
        screen_map: ScreenMap::new(slide_id, screened),
        annotations,
    })
}
