//! Patch sampling and detection scoring for partially annotated
//! whole-slide images.
//!
//! The crate is organised around one idea: experts screen a slide region by
//! region, so the annotated area is a union of rectangles and everything
//! downstream (sampling, training, evaluation) must respect that boundary.
//! Modules:
//!
//! * [`geometry`]: exact integer arithmetic on screened-rectangle unions.
//! * [`model`]: slides, annotations, class statistics, the manifest format.
//! * [`sampler`]: cell-seeded class-balanced patch sampling and the
//!   extracted sub-image baseline.
//! * [`raster`]: pixel access, patch extraction, augmentation, and the
//!   synthetic slide generator.
//! * [`eval`]: detection matching, interpolated average precision, and
//!   non-maximum suppression.
//! * [`detector`]: the pluggable detector interface, a configurable oracle
//!   detector, tiled slide inference, and the training-loop simulator.
//! * [`sync`]: the annotation-server client and its on-disk cache.
//! * [`rng`]: splittable deterministic randomness used everywhere above.

pub mod detector;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod sync;

pub use geometry::{Rect, ScreenMap};
pub use model::{
    Annotation, CellClass, ClassFrequencyTable, ClassRegistry, DatasetManifest, ModelError,
    SlideManifest, SplitRole,
};
