use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sad_core::config::ExperimentConfig;
use sad_core::egraph::{NeighborStrategy, TemporalGraph};
use sad_core::model::{ModelConfig, SadModel};
use sad_core::numcore::{Tape, Tensor};
use sad_core::parallel::{self, Execution};
use sad_core::synth::{generate, SynthConfig};
use sad_core::trainer::infer_range;

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn graph() -> TemporalGraph {
    let stream = generate(&SynthConfig { seed: 1, ..Default::default() }).expect("synthetic stream");
    TemporalGraph::new(stream)
}

fn sampling(c: &mut Criterion) {
    let graph = graph();
    let events = graph.stream.events();
    let range: Vec<usize> = (events.len() / 2..events.len() / 2 + 256).collect();
    let mut group = c.benchmark_group("sample_batch_256");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                parallel::map(exec, range.clone(), |i| {
                    let e = &events[i];
                    let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                    graph.sample(e.src, e.t, 2, 20, NeighborStrategy::Recent, &mut rng).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let graph = graph();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = SadModel::new(ModelConfig::new(graph.stream.edge_feature_dim()), &mut rng).unwrap();
    let start = graph.stream.len() / 2;
    let mut group = c.benchmark_group("infer_512");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        let config = ExperimentConfig { per_hop: 10, execution: exec, ..Default::default() };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| infer_range(&graph, &model, &config, start..start + 512).unwrap())
        });
    }
    group.finish();
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut random = |r: usize, k: usize| {
        Tensor::matrix(r, k, (0..r * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let (a, w) = (random(4096, 176), random(176, 128));
    let mut group = c.benchmark_group("gemm_4096x176x128");
    for (name, exec) in POLICIES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut tape = Tape::with_execution(exec);
                let (x, y) = (tape.constant(a.clone()), tape.constant(w.clone()));
                let out = tape.matmul(x, y).unwrap();
                tape.value(out).len()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, inference, gemm);
criterion_main!(benches);
