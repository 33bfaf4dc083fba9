//! Sequential against rayon-parallel execution of the per-sample maps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fan_core::datagen::{Dataset, DatasetConfig};
use fan_core::eval::extract_features;
use fan_core::exec::Exec;
use fan_core::nets::{Model, NetConfig, Networks, ParamStore};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_datagen(c: &mut Criterion) {
    let mut cfg = DatasetConfig::default();
    cfg.n_train_identities = 4;
    cfg.n_eval_identities = 2;
    let mut g = c.benchmark_group("generate_dataset");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(Dataset::generate(&cfg, 1, exec).unwrap()))
        });
    }
    g.finish();
}

fn bench_features(c: &mut Criterion) {
    let net = NetConfig::default();
    let nets = Networks::new(&net).unwrap();
    let mut store = ParamStore::default();
    nets.init_model(&mut store, Model::EncH, 1).unwrap();
    let mut cfg = DatasetConfig::default();
    cfg.n_train_identities = 2;
    cfg.n_eval_identities = 1;
    let ds = Dataset::generate(&cfg, 1, Exec::Sequential).unwrap();
    let imgs: Vec<_> = ds.samples.iter().map(|s| &s.image).collect();
    let mut g = c.benchmark_group("extract_features");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(extract_features(&nets.enc_h, &store, &imgs, exec).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_datagen, bench_features);
criterion_main!(benches);
