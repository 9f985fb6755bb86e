//! Shared fixtures for the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slidesampler_core::eval::{BoxF, Detection};
use slidesampler_core::model::{lattice_slide, CellClass, DatasetManifest};
use slidesampler_core::{Rect, SplitRole};

/// Uniform 24 px boxes over a 4096 px square, the density regime where the
/// suppression grid has to earn its keep.
pub fn dense_boxes(n: usize) -> Vec<Detection> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    (0..n)
        .map(|i| Detection {
            id: i as u64 + 1,
            image_id: "bench".to_string(),
            class: CellClass(rng.random_range(0..5)),
            score: rng.random::<f64>(),
            bbox: BoxF::new(
                rng.random_range(0.0..4096.0),
                rng.random_range(0.0..4096.0),
                24.0,
                24.0,
            ),
        })
        .collect()
}

/// Four partially screened slides with 800 lattice cells each.
pub fn sampling_manifest() -> DatasetManifest {
    let counts: Vec<(CellClass, u64)> = (0..5).map(|k| (CellClass(k), 160)).collect();
    let slides = (0..4)
        .map(|i| {
            lattice_slide(
                &format!("bench-{i}"),
                6000,
                6000,
                vec![Rect::new(0, 0, 3000, 6000), Rect::new(3000, 3000, 3000, 3000)],
                &counts,
                Rect::new(600, 600, 2200, 2200),
                40,
                12,
                SplitRole::Train,
                1 + i * 10_000,
            )
            .unwrap()
        })
        .collect();
    let mut manifest = DatasetManifest::new(slides);
    manifest.patch_size = 512;
    manifest
}
