use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use meshwatch_bench::{filled_store, random_series};
use meshwatch_core::datastream::{tags, Datastream, Granularity, ValueType};

fn downsample(c: &mut Criterion) {
    let mut g = c.benchmark_group("datastream");
    g.throughput(Throughput::Elements(10 * 10_000));
    g.bench_function("downsample 10 streams x 10k points", |b| {
        b.iter_batched(|| filled_store(10, 10_000, 1), |(store, _)| store.downsample_all(i64::MAX).unwrap(), BatchSize::LargeInput)
    });
    let series = random_series(10_000, 2);
    g.throughput(Throughput::Elements(series.len() as u64));
    g.bench_function("append 10k points", |b| {
        b.iter_batched(
            || {
                let store = Datastream::new();
                let id = store.ensure_stream(tags([("bench", "append")]), ValueType::Numeric, Granularity::Seconds10, None).unwrap();
                (store, id)
            },
            |(store, id)| {
                for &(t, v) in &series {
                    store.append(id, t, v).unwrap();
                }
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, downsample);
criterion_main!(benches);
