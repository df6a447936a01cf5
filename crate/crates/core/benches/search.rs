use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hilbert_core::retrieval::{EmbeddingIndex, TheoremRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIM: usize = 256;

fn index(n: usize) -> EmbeddingIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records = (0..n)
        .map(|i| TheoremRecord {
            full_name: format!("Lemma.l{i}"),
            formal_statement: format!("theorem Lemma.l{i} : True"),
            informal_description: format!("lemma {i}"),
        })
        .collect();
    let vectors = (0..n * DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    EmbeddingIndex::new(DIM, records, vectors).unwrap()
}

fn search(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let query: Vec<f32> = (0..DIM).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let mut group = c.benchmark_group("top5");
    for n in [10_000, 100_000] {
        let idx = index(n);
        group.bench_with_input(BenchmarkId::new("sequential", n), &idx, |b, idx| {
            b.iter(|| idx.search_sequential(&query, 5).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", n), &idx, |b, idx| {
            b.iter(|| idx.search_parallel(&query, 5).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, search);
criterion_main!(benches);
