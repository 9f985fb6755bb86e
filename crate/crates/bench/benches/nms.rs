use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use slidesampler_bench::dense_boxes;
use slidesampler_core::eval::{nms, nms_reference};

fn bench_nms(c: &mut Criterion) {
    let mut group = c.benchmark_group("nms");
    for n in [1_000usize, 10_000, 100_000] {
        let boxes = dense_boxes(n);
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::new("grid", n), &boxes, |b, boxes| {
            b.iter(|| nms(black_box(boxes), 0.5, true))
        });
        // The quadratic reference exists for conformance checks; past ten
        // thousand boxes it only proves the point.
        if n <= 10_000 {
            group.bench_with_input(BenchmarkId::new("quadratic", n), &boxes, |b, boxes| {
                b.iter(|| nms_reference(black_box(boxes), 0.5, true))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_nms);
criterion_main!(benches);
