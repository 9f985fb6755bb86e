use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use slidesampler_bench::sampling_manifest;
use slidesampler_core::sampler::{SamplerConfig, SamplerIndex, SamplingMode};

fn bench_epochs(c: &mut Criterion) {
    let manifest = sampling_manifest();
    let mut group = c.benchmark_group("sampler");
    for (name, mode) in [("live", SamplingMode::Live), ("sub_image", SamplingMode::SubImage)] {
        let mut cfg = SamplerConfig::from_manifest(&manifest, mode);
        cfg.batch_size = 16;
        cfg.epoch_length = 512;
        let index = SamplerIndex::new(&manifest, cfg).unwrap();
        group.throughput(Throughput::Elements(512));
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut patches = 0usize;
                for batch in index.epoch(black_box(7)) {
                    patches += batch.patches.len();
                }
                patches
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_epochs);
criterion_main!(benches);
