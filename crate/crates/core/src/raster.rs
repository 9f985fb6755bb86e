//! Pixel access: patch extraction, augmentation, and a synthetic slide
//! generator that makes the whole pipeline verifiable without real
//! gigapixel scans.
//!
//! Coordinate conventions, used consistently by pixels and boxes: integer
//! pixel (row, col) has its center at continuous `(col + 0.5, row + 0.5)`;
//! rotation is about the patch center `(S/2, S/2)` with the matrix
//! `[[cos, -sin], [sin, cos]]` applied to `(x, y)` column vectors.
//!
//! Rotated patches are resampled bilinearly straight from the slide raster
//! rather than from the patch buffer, so the corners that swing into view
//! show real tissue context instead of a constant fill.

use std::collections::HashMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use thiserror::Error;

use crate::eval::BoxF;
use crate::geometry::{Rect, ScreenMap};
use crate::model::{Annotation, CellClass, SlideManifest, SplitRole};
use crate::rng::{hash_str, keyed_rng};
use crate::sampler::PatchSpec;

/// Ground-truth box attached to a patch, patch-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub id: u64,
    pub class: CellClass,
    pub bbox: BoxF,
}

/// A materialized training patch: pixels plus transformed ground truth.
#[derive(Debug, Clone)]
pub struct Patch {
    pub spec: PatchSpec,
    pub pixels: RgbImage,
    pub ground_truth: Vec<GtBox>,
    /// Boxes an augmentation clipped below the retention threshold. Kept
    /// for auditing; never trained on.
    pub dropped: Vec<GtBox>,
}

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("slide {slide_id} has no raster source (metadata-only manifest)")]
    MissingRaster { slide_id: String },
    #[error("patch {rect:?} exceeds raster bounds {width}x{height}")]
    OutOfBounds { rect: Rect, width: i64, height: i64 },
    #[error("could not place cell {placed} of {requested} for class {class} on slide {slide_id} (separation constraint)")]
    PlacementOverflow { slide_id: String, class: u32, placed: u64, requested: u64 },
    #[error("raster io: {0}")]
    Io(#[from] std::io::Error),
    #[error("raster decode: {0}")]
    Decode(#[from] image::ImageError),
}

/// Load the slide's PNG, resolving relative paths against `base`.
pub fn load_slide_raster(base: &Path, slide: &SlideManifest) -> Result<RgbImage, RasterError> {
    let source = slide
        .raster_source
        .as_deref()
        .ok_or_else(|| RasterError::MissingRaster { slide_id: slide.slide_id.clone() })?;
    let path = base.join(source);
    Ok(image::open(&path)?.to_rgb8())
}

/// Copy the patch rectangle out of the slide raster and attach the ground
/// truth carried by the spec as boxes (side `2 * radius`).
pub fn extract_patch(source: &RgbImage, spec: &PatchSpec) -> Result<Patch, RasterError> {
    let rect = spec.rect();
    let (w, h) = (source.width() as i64, source.height() as i64);
    if rect.x < 0 || rect.y < 0 || rect.right() > w || rect.bottom() > h {
        return Err(RasterError::OutOfBounds { rect, width: w, height: h });
    }
    let mut pixels = RgbImage::new(rect.w as u32, rect.h as u32);
    for row in 0..rect.h as u32 {
        for col in 0..rect.w as u32 {
            pixels.put_pixel(
                col,
                row,
                *source.get_pixel(col + rect.x as u32, row + rect.y as u32),
            );
        }
    }
    let ground_truth = spec
        .ground_truth
        .iter()
        .map(|a| {
            let r = a.radius as f64;
            GtBox {
                id: a.id,
                class: a.class,
                bbox: BoxF::new(a.cx as f64 - r, a.cy as f64 - r, 2.0 * r, 2.0 * r),
            }
        })
        .collect();
    Ok(Patch { spec: spec.clone(), pixels, ground_truth, dropped: Vec::new() })
}

/// One sampled augmentation: applied as rotation, then flips, then
/// intensity scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSpec {
    /// Degrees in [0, 90].
    pub rotation_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Multiplier in [0.8, 1.2].
    pub intensity_scale: f64,
}

impl AugmentationSpec {
    pub const IDENTITY: AugmentationSpec = AugmentationSpec {
        rotation_deg: 0.0,
        flip_h: false,
        flip_v: false,
        intensity_scale: 1.0,
    };

    /// Independent uniform draws; flips are fair coins.
    pub fn sample(rng: &mut impl Rng) -> Self {
        AugmentationSpec {
            rotation_deg: rng.random_range(0.0..=90.0),
            flip_h: rng.random::<bool>(),
            flip_v: rng.random::<bool>(),
            intensity_scale: rng.random_range(0.8..=1.2),
        }
    }
}

/// Fraction of its original area a clipped box must keep to survive.
const BOX_RETENTION: f64 = 0.25;

fn rotation_terms(deg: f64) -> (f64, f64) {
    // Exact terms at the endpoints so axis-aligned rotations stay integer
    // permutations.
    if deg == 0.0 {
        (1.0, 0.0)
    } else if deg == 90.0 {
        (0.0, 1.0)
    } else {
        let rad = deg.to_radians();
        (rad.cos(), rad.sin())
    }
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let clamp = |v: i64, hi: i64| v.clamp(0, hi - 1) as u32;
    let (x0i, y0i) = (x0 as i64, y0 as i64);
    let p00 = img.get_pixel(clamp(x0i, w), clamp(y0i, h)).0;
    let p10 = img.get_pixel(clamp(x0i + 1, w), clamp(y0i, h)).0;
    let p01 = img.get_pixel(clamp(x0i, w), clamp(y0i + 1, h)).0;
    let p11 = img.get_pixel(clamp(x0i + 1, w), clamp(y0i + 1, h)).0;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
        let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
        out[c] = top * (1.0 - ty) + bot * ty;
    }
    out
}

/// Apply an augmentation to a patch, transforming pixels and ground-truth
/// boxes by the same rigid motion. Rotation resamples from `slide`, the
/// full raster the patch was extracted from.
pub fn augment(slide: &RgbImage, patch: &Patch, aug: &AugmentationSpec) -> Patch {
    let size = patch.spec.size;
    let s = size as f64;
    let half = s / 2.0;
    let (cos_t, sin_t) = rotation_terms(aug.rotation_deg);

    // Pixels. Inverse map: output center t pulls from source position
    // C + R(-theta) (t - C), expressed in slide coordinates.
    let mut pixels = if aug.rotation_deg == 0.0 {
        patch.pixels.clone()
    } else {
        let (ox, oy) = (patch.spec.x as f64, patch.spec.y as f64);
        let mut out = RgbImage::new(size as u32, size as u32);
        for row in 0..size as u32 {
            for col in 0..size as u32 {
                let tx = col as f64 + 0.5 - half;
                let ty = row as f64 + 0.5 - half;
                let sx = half + cos_t * tx + sin_t * ty;
                let sy = half - sin_t * tx + cos_t * ty;
                let v = bilinear(slide, ox + sx, oy + sy);
                out.put_pixel(
                    col,
                    row,
                    Rgb([
                        v[0].round().clamp(0.0, 255.0) as u8,
                        v[1].round().clamp(0.0, 255.0) as u8,
                        v[2].round().clamp(0.0, 255.0) as u8,
                    ]),
                );
            }
        }
        out
    };
    if aug.flip_h {
        pixels = image::imageops::flip_horizontal(&pixels);
    }
    if aug.flip_v {
        pixels = image::imageops::flip_vertical(&pixels);
    }
    if aug.intensity_scale != 1.0 {
        for p in pixels.pixels_mut() {
            for c in &mut p.0 {
                *c = (*c as f64 * aug.intensity_scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    // Boxes follow the same motion: rotated corners re-fit as axis-aligned
    // hulls, clipped to the patch, then mirrored with the flips.
    let mut ground_truth = Vec::with_capacity(patch.ground_truth.len());
    let mut dropped = patch.dropped.clone();
    for gt in &patch.ground_truth {
        let b = gt.bbox;
        let corners = [
            (b.x, b.y),
            (b.right(), b.y),
            (b.x, b.bottom()),
            (b.right(), b.bottom()),
        ];
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (px, py) in corners {
            let dx = px - half;
            let dy = py - half;
            let rx = half + cos_t * dx - sin_t * dy;
            let ry = half + sin_t * dx + cos_t * dy;
            x0 = x0.min(rx);
            y0 = y0.min(ry);
            x1 = x1.max(rx);
            y1 = y1.max(ry);
        }
        // Clip to the patch; drop (but record) boxes reduced below the
        // retention fraction of their pre-rotation area.
        let cx0 = x0.max(0.0);
        let cy0 = y0.max(0.0);
        let cx1 = x1.min(s);
        let cy1 = y1.min(s);
        let clipped_area = (cx1 - cx0).max(0.0) * (cy1 - cy0).max(0.0);
        if clipped_area < BOX_RETENTION * b.area() {
            dropped.push(*gt);
            continue;
        }
        let mut bbox = BoxF::new(cx0, cy0, cx1 - cx0, cy1 - cy0);
        if aug.flip_h {
            bbox.x = s - bbox.x - bbox.w;
        }
        if aug.flip_v {
            bbox.y = s - bbox.y - bbox.h;
        }
        ground_truth.push(GtBox { bbox, ..*gt });
    }

    Patch { spec: patch.spec.clone(), pixels, ground_truth, dropped }
}

// ---------------------------------------------------------------------------
// Synthetic slides: colored discs on a light background, one disc per
// manifest annotation. Good enough to verify extraction, augmentation,
// inference, and scoring end to end, which is all they are for.
// ---------------------------------------------------------------------------

/// Disc styling per canonical class id (green, purple, red, yellow, blue).
const CLASS_COLORS: [[u8; 3]; 5] =
    [[46, 160, 67], [140, 60, 200], [220, 50, 47], [240, 200, 40], [38, 98, 217]];
const CLASS_RADII: [i64; 5] = [14, 16, 12, 20, 9];
const FALLBACK_COLOR: [u8; 3] = [128, 128, 128];
const FALLBACK_RADIUS: i64 = 12;
const BACKGROUND: [u8; 3] = [237, 233, 229];

pub fn class_color(class: CellClass) -> [u8; 3] {
    CLASS_COLORS.get(class.index()).copied().unwrap_or(FALLBACK_COLOR)
}

pub fn class_radius(class: CellClass) -> i64 {
    CLASS_RADII.get(class.index()).copied().unwrap_or(FALLBACK_RADIUS)
}

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub slide_id: String,
    pub width: i64,
    pub height: i64,
    pub screened: Vec<Rect>,
    /// Cells per class, indexed by class id.
    pub class_counts: Vec<u64>,
    pub seed: u64,
    pub split_role: SplitRole,
}

/// Render a synthetic slide. Cell centers are uniform over the screened
/// union, discs never overlap (separation at least the sum of the two
/// radii) and never cross the slide border. Deterministic in
/// `(seed, slide_id)`. Annotation ids count from 1, so renumber them when
/// combining several slides into one dataset.
pub fn render_synthetic_slide(
    spec: &SyntheticSpec,
) -> Result<(RgbImage, SlideManifest), RasterError> {
    let map = ScreenMap::new(spec.slide_id.clone(), spec.screened.clone());
    let mut rng = keyed_rng(spec.seed, &[0x7379_6e74_68, hash_str(&spec.slide_id)]);

    // Place large cells first; small ones fit the gaps more easily.
    let mut class_order: Vec<usize> = (0..spec.class_counts.len()).collect();
    class_order.sort_by_key(|&k| std::cmp::Reverse(class_radius(CellClass(k as u32))));

    let pieces: Vec<Rect> = map.normalized().to_vec();
    let max_radius = class_order
        .iter()
        .map(|&k| class_radius(CellClass(k as u32)))
        .max()
        .unwrap_or(FALLBACK_RADIUS);
    let grid_cell = (2 * max_radius).max(1);
    let mut occupied: HashMap<(i64, i64), Vec<(i64, i64, i64)>> = HashMap::new();
    let mut annotations: Vec<Annotation> = Vec::new();
    let mut next_id = 1u64;

    for &k in &class_order {
        let class = CellClass(k as u32);
        let radius = class_radius(class);
        let requested = spec.class_counts[k];
        // Centers must keep the whole disc on the slide.
        let placeable: Vec<Rect> = pieces
            .iter()
            .filter_map(|p| {
                p.intersection(&Rect::new(
                    radius,
                    radius,
                    spec.width - 2 * radius,
                    spec.height - 2 * radius,
                ))
            })
            .filter(|p| p.w > 0 && p.h > 0)
            .collect();
        if requested > 0 && placeable.is_empty() {
            return Err(RasterError::PlacementOverflow {
                slide_id: spec.slide_id.clone(),
                class: class.0,
                placed: 0,
                requested,
            });
        }
        let chooser = if requested > 0 {
            Some(
                WeightedIndex::new(placeable.iter().map(|p| p.area() as f64))
                    .expect("piece areas are positive"),
            )
        } else {
            None
        };

        for placed in 0..requested {
            let mut attempts = 0;
            let center = loop {
                attempts += 1;
                if attempts > 1000 {
                    return Err(RasterError::PlacementOverflow {
                        slide_id: spec.slide_id.clone(),
                        class: class.0,
                        placed,
                        requested,
                    });
                }
                let piece = &placeable[chooser.as_ref().unwrap().sample(&mut rng)];
                let cx = rng.random_range(piece.x..piece.right());
                let cy = rng.random_range(piece.y..piece.bottom());
                let gx = cx.div_euclid(grid_cell);
                let gy = cy.div_euclid(grid_cell);
                let mut clash = false;
                'near: for ny in gy - 1..=gy + 1 {
                    for nx in gx - 1..=gx + 1 {
                        let Some(cells) = occupied.get(&(nx, ny)) else { continue };
                        for &(ox, oy, orad) in cells {
                            let min_sep = radius + orad;
                            let (dx, dy) = (cx - ox, cy - oy);
                            if dx * dx + dy * dy < min_sep * min_sep {
                                clash = true;
                                break 'near;
                            }
                        }
                    }
                }
                if !clash {
                    break (cx, cy);
                }
            };
            occupied
                .entry((center.0.div_euclid(grid_cell), center.1.div_euclid(grid_cell)))
                .or_default()
                .push((center.0, center.1, radius));
            annotations.push(Annotation {
                id: next_id,
                cx: center.0,
                cy: center.1,
                radius,
                class,
                annotator: "synthetic".into(),
            });
            next_id += 1;
        }
    }

    let mut img = RgbImage::from_pixel(spec.width as u32, spec.height as u32, Rgb(BACKGROUND));
    for ann in &annotations {
        let color = Rgb(class_color(ann.class));
        let r = ann.radius;
        let fcx = ann.cx as f64 + 0.5;
        let fcy = ann.cy as f64 + 0.5;
        for y in (ann.cy - r).max(0)..=(ann.cy + r).min(spec.height - 1) {
            for x in (ann.cx - r).max(0)..=(ann.cx + r).min(spec.width - 1) {
                let dx = x as f64 + 0.5 - fcx;
                let dy = y as f64 + 0.5 - fcy;
                if dx * dx + dy * dy <= (r * r) as f64 {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }

    let manifest = SlideManifest {
        slide_id: spec.slide_id.clone(),
        width: spec.width,
        height: spec.height,
        split_role: spec.split_role,
        raster_source: None,
        screen_map: map,
        annotations,
    };
    Ok((img, manifest))
}

/// Render and save a synthetic slide as `{slide_id}.png` under `dir`,
/// returning the manifest with its raster source set.
pub fn write_synthetic_slide(
    dir: &Path,
    spec: &SyntheticSpec,
) -> Result<SlideManifest, RasterError> {
    let (img, mut manifest) = render_synthetic_slide(spec)?;
    let file = format!("{}.png", spec.slide_id);
    img.save(dir.join(&file))?;
    manifest.raster_source = Some(file);
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::LocalAnnotation;

    fn toy_spec(counts: [u64; 5]) -> SyntheticSpec {
        SyntheticSpec {
            slide_id: "toy".into(),
            width: 1024,
            height: 1024,
            screened: vec![Rect::new(0, 0, 1024, 1024)],
            class_counts: counts.to_vec(),
            seed: 7,
            split_role: SplitRole::Train,
        }
    }

    fn patch_spec(x: i64, y: i64, size: i64, gt: Vec<LocalAnnotation>) -> PatchSpec {
        PatchSpec {
            slide_id: "toy".into(),
            x,
            y,
            size,
            seed_annotation_id: None,
            seed_class: None,
            source_tile: None,
            ground_truth: gt,
        }
    }

    /// First cell far enough from the borders to center a window on it.
    fn inner_cell(manifest: &SlideManifest, margin: i64) -> &Annotation {
        manifest
            .annotations
            .iter()
            .find(|a| {
                a.cx >= margin
                    && a.cy >= margin
                    && a.cx <= manifest.width - margin
                    && a.cy <= manifest.height - margin
            })
            .expect("a cell away from the borders")
    }

    #[test]
    fn synthetic_slide_is_deterministic_and_exact() {
        let spec = toy_spec([3, 4, 5, 6, 7]);
        let (img_a, man_a) = render_synthetic_slide(&spec).unwrap();
        let (img_b, man_b) = render_synthetic_slide(&spec).unwrap();
        assert_eq!(img_a.as_raw(), img_b.as_raw());
        assert_eq!(man_a, man_b);
        assert_eq!(man_a.annotations.len(), 25);
        for k in 0..5u32 {
            let n = man_a.annotations.iter().filter(|a| a.class == CellClass(k)).count();
            assert_eq!(n as u64, spec.class_counts[k as usize]);
        }
        // Separation: sum of radii, pairwise.
        for (i, a) in man_a.annotations.iter().enumerate() {
            for b in &man_a.annotations[i + 1..] {
                let d2 = (a.cx - b.cx).pow(2) + (a.cy - b.cy).pow(2);
                let min = a.radius + b.radius;
                assert!(d2 >= min * min, "cells {} and {} overlap", a.id, b.id);
            }
        }
    }

    #[test]
    fn zero_counts_give_a_blank_slide() {
        let spec = toy_spec([0, 0, 0, 0, 0]);
        let (img, manifest) = render_synthetic_slide(&spec).unwrap();
        assert!(manifest.annotations.is_empty());
        assert!(img.pixels().all(|p| p.0 == BACKGROUND));
    }

    #[test]
    fn rendered_disc_centroids_match_manifest_centers() {
        let (img, manifest) = render_synthetic_slide(&toy_spec([4, 4, 4, 4, 4])).unwrap();
        for ann in &manifest.annotations {
            let color = class_color(ann.class);
            let r = ann.radius;
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0u32);
            for y in ann.cy - r..=ann.cy + r {
                for x in ann.cx - r..=ann.cx + r {
                    if img.get_pixel(x as u32, y as u32).0 == color {
                        sx += x as f64 + 0.5;
                        sy += y as f64 + 0.5;
                        n += 1;
                    }
                }
            }
            assert!(n > 0, "cell {} left no pixels", ann.id);
            let cx = sx / n as f64;
            let cy = sy / n as f64;
            assert!((cx - (ann.cx as f64 + 0.5)).abs() < 0.5, "cell {}", ann.id);
            assert!((cy - (ann.cy as f64 + 0.5)).abs() < 0.5, "cell {}", ann.id);
        }
    }

    #[test]
    fn overcrowded_placement_overflows() {
        let spec = SyntheticSpec {
            slide_id: "cramped".into(),
            width: 128,
            height: 128,
            screened: vec![Rect::new(0, 0, 128, 128)],
            class_counts: vec![0, 0, 0, 500, 0],
            seed: 1,
            split_role: SplitRole::Train,
        };
        match render_synthetic_slide(&spec) {
            Err(RasterError::PlacementOverflow { class: 3, requested: 500, .. }) => {}
            other => panic!("expected overflow, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn extract_copies_the_exact_window() {
        let (img, manifest) = render_synthetic_slide(&toy_spec([2, 2, 2, 2, 2])).unwrap();
        let ann = inner_cell(&manifest, 40);
        let spec = patch_spec(
            ann.cx - 32,
            ann.cy - 32,
            64,
            vec![LocalAnnotation {
                id: ann.id,
                cx: 32,
                cy: 32,
                radius: ann.radius,
                class: ann.class,
            }],
        );
        let patch = extract_patch(&img, &spec).unwrap();
        assert_eq!(patch.pixels.dimensions(), (64, 64));
        for row in 0..64u32 {
            for col in 0..64u32 {
                assert_eq!(
                    patch.pixels.get_pixel(col, row),
                    img.get_pixel(col + spec.x as u32, row + spec.y as u32)
                );
            }
        }
        assert_eq!(patch.ground_truth.len(), 1);
        let b = patch.ground_truth[0].bbox;
        let r = ann.radius as f64;
        assert_eq!((b.x, b.y, b.w, b.h), (32.0 - r, 32.0 - r, 2.0 * r, 2.0 * r));
    }

    #[test]
    fn extract_rejects_out_of_bounds_windows() {
        let (img, _) = render_synthetic_slide(&toy_spec([1, 0, 0, 0, 0])).unwrap();
        for (x, y) in [(-1, 0), (0, -1), (1024 - 63, 0), (0, 1024 - 63)] {
            let spec = patch_spec(x, y, 64, Vec::new());
            assert!(matches!(
                extract_patch(&img, &spec),
                Err(RasterError::OutOfBounds { .. })
            ));
        }
    }

    #[test]
    fn identity_augmentation_is_bit_identical() {
        let (img, manifest) = render_synthetic_slide(&toy_spec([2, 2, 2, 2, 2])).unwrap();
        let ann = inner_cell(&manifest, 80);
        let spec = patch_spec(
            ann.cx - 64,
            ann.cy - 64,
            128,
            vec![LocalAnnotation {
                id: ann.id,
                cx: 64,
                cy: 64,
                radius: ann.radius,
                class: ann.class,
            }],
        );
        let patch = extract_patch(&img, &spec).unwrap();
        let same = augment(&img, &patch, &AugmentationSpec::IDENTITY);
        assert_eq!(same.pixels.as_raw(), patch.pixels.as_raw());
        assert_eq!(same.ground_truth, patch.ground_truth);
        assert!(same.dropped.is_empty());
    }

    #[test]
    fn horizontal_flip_is_an_involution() {
        let (img, manifest) = render_synthetic_slide(&toy_spec([2, 2, 2, 2, 2])).unwrap();
        let ann = inner_cell(&manifest, 80);
        let spec = patch_spec(
            ann.cx - 64,
            ann.cy - 64,
            128,
            vec![LocalAnnotation {
                id: ann.id,
                cx: 64,
                cy: 64,
                radius: ann.radius,
                class: ann.class,
            }],
        );
        let patch = extract_patch(&img, &spec).unwrap();
        let flip = AugmentationSpec { flip_h: true, ..AugmentationSpec::IDENTITY };
        let once = augment(&img, &patch, &flip);
        // Mirror formula on the box.
        let b = patch.ground_truth[0].bbox;
        let f = once.ground_truth[0].bbox;
        assert_eq!(f.x, 128.0 - b.x - b.w);
        assert_eq!((f.y, f.w, f.h), (b.y, b.w, b.h));
        let twice = augment(&img, &once, &flip);
        assert_eq!(twice.pixels.as_raw(), patch.pixels.as_raw());
        assert_eq!(twice.ground_truth, patch.ground_truth);
    }

    #[test]
    fn quarter_turn_box_matches_the_analytic_hull() {
        let gt = vec![LocalAnnotation {
            id: 1,
            cx: 25,
            cy: 40,
            radius: 15,
            class: CellClass(0),
        }];
        // Box (10, 20, 30, 40) inside a 1024 patch; fabricate the exact box
        // through a non-square override below.
        let (img, _) = render_synthetic_slide(&SyntheticSpec {
            slide_id: "big".into(),
            width: 2048,
            height: 2048,
            screened: vec![Rect::new(0, 0, 2048, 2048)],
            class_counts: vec![0; 5],
            seed: 3,
            split_role: SplitRole::Train,
        })
        .unwrap();
        let spec = patch_spec(512, 512, 1024, gt);
        let mut patch = extract_patch(&img, &spec).unwrap();
        patch.ground_truth[0].bbox = BoxF::new(10.0, 20.0, 30.0, 40.0);
        let quarter =
            AugmentationSpec { rotation_deg: 90.0, ..AugmentationSpec::IDENTITY };
        let turned = augment(&img, &patch, &quarter);
        let b = turned.ground_truth[0].bbox;
        assert_eq!((b.x, b.y, b.w, b.h), (964.0, 10.0, 40.0, 30.0));
    }

    #[test]
    fn quarter_turn_pixels_match_the_permutation_oracle() {
        let (img, _) = render_synthetic_slide(&toy_spec([6, 6, 6, 6, 6])).unwrap();
        let spec = patch_spec(480, 480, 64, Vec::new());
        let patch = extract_patch(&img, &spec).unwrap();
        let turned = augment(
            &img,
            &patch,
            &AugmentationSpec { rotation_deg: 90.0, ..AugmentationSpec::IDENTITY },
        );
        // The analytic map sends source pixel (row, col) to
        // (row', col') = (col, S - 1 - row).
        let s = 64u32;
        for row in 0..s {
            for col in 0..s {
                let expected = patch.pixels.get_pixel(row, s - 1 - col);
                assert_eq!(turned.pixels.get_pixel(col, row), expected, "({row}, {col})");
            }
        }
    }

    #[test]
    fn rotation_drops_boxes_that_swing_off_the_patch() {
        let (img, _) = render_synthetic_slide(&toy_spec([0, 0, 0, 0, 0])).unwrap();
        let spec = patch_spec(
            256,
            256,
            512,
            vec![
                LocalAnnotation { id: 1, cx: 256, cy: 256, radius: 20, class: CellClass(0) },
                LocalAnnotation { id: 2, cx: 10, cy: 10, radius: 10, class: CellClass(1) },
            ],
        );
        let patch = extract_patch(&img, &spec).unwrap();
        let turned = augment(
            &img,
            &patch,
            &AugmentationSpec { rotation_deg: 45.0, ..AugmentationSpec::IDENTITY },
        );
        assert_eq!(turned.ground_truth.len(), 1);
        assert_eq!(turned.ground_truth[0].id, 1);
        assert_eq!(turned.dropped.len(), 1);
        assert_eq!(turned.dropped[0].id, 2);
    }

    #[test]
    fn center_boxes_survive_any_rotation() {
        let (img, _) = render_synthetic_slide(&toy_spec([0, 0, 0, 0, 0])).unwrap();
        let spec = patch_spec(
            256,
            256,
            512,
            vec![LocalAnnotation { id: 1, cx: 256, cy: 256, radius: 18, class: CellClass(2) }],
        );
        let patch = extract_patch(&img, &spec).unwrap();
        for deg in [7.5, 22.0, 45.0, 61.0, 90.0] {
            let turned = augment(
                &img,
                &patch,
                &AugmentationSpec { rotation_deg: deg, ..AugmentationSpec::IDENTITY },
            );
            assert_eq!(turned.ground_truth.len(), 1, "lost the center box at {deg} deg");
            assert!(turned.dropped.is_empty());
            let b = turned.ground_truth[0].bbox;
            assert!(b.x >= 0.0 && b.y >= 0.0 && b.right() <= 512.0 && b.bottom() <= 512.0);
        }
    }

    #[test]
    fn intensity_scaling_rounds_and_clamps() {
        let mut img = RgbImage::from_pixel(4, 4, Rgb([200, 250, 10]));
        img.put_pixel(0, 0, Rgb([0, 128, 255]));
        let patch = Patch {
            spec: patch_spec(0, 0, 4, Vec::new()),
            pixels: img.clone(),
            ground_truth: Vec::new(),
            dropped: Vec::new(),
        };
        let brighter = augment(
            &img,
            &patch,
            &AugmentationSpec { intensity_scale: 1.2, ..AugmentationSpec::IDENTITY },
        );
        assert_eq!(brighter.pixels.get_pixel(1, 1).0, [240, 255, 12]);
        assert_eq!(brighter.pixels.get_pixel(0, 0).0, [0, 154, 255]);
        let darker = augment(
            &img,
            &patch,
            &AugmentationSpec { intensity_scale: 0.8, ..AugmentationSpec::IDENTITY },
        );
        assert_eq!(darker.pixels.get_pixel(1, 1).0, [160, 200, 8]);
    }

    #[test]
    fn sampled_augmentations_stay_in_range() {
        let mut rng = keyed_rng(5, &[1]);
        for _ in 0..200 {
            let aug = AugmentationSpec::sample(&mut rng);
            assert!((0.0..=90.0).contains(&aug.rotation_deg));
            assert!((0.8..=1.2).contains(&aug.intensity_scale));
        }
    }

    #[test]
    fn write_and_reload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = toy_spec([1, 1, 1, 1, 1]);
        let manifest = write_synthetic_slide(dir.path(), &spec).unwrap();
        assert_eq!(manifest.raster_source.as_deref(), Some("toy.png"));
        let reloaded = load_slide_raster(dir.path(), &manifest).unwrap();
        let (direct, _) = render_synthetic_slide(&spec).unwrap();
        assert_eq!(reloaded.as_raw(), direct.as_raw());
    }

    #[test]
    fn missing_raster_is_reported() {
        let (_, manifest) = render_synthetic_slide(&toy_spec([0; 5])).unwrap();
        let err = load_slide_raster(Path::new("."), &manifest).unwrap_err();
        assert!(matches!(err, RasterError::MissingRaster { .. }));
    }
}
