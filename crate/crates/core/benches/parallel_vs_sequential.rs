use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pnptune::baselines::Baseline;
use pnptune::dataset::{derive_labels, MachineProfile, Task};
use pnptune::graph::{build_graph, ProgramGraph};
use pnptune::mir::Family;
use pnptune::nn::{batch_pass, init_model, Example, ModelSpec, PreparedGraph, Readout};
use pnptune::par::Execution;
use pnptune::simulator::SimParams;
use pnptune::tuner::{evaluate_baselines, generate_corpus, sweep_all, Corpus};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn graphs() -> Vec<(String, ProgramGraph)> {
    generate_corpus(&Family::ALL, &[1, 2, 3], 0)
        .unwrap()
        .into_iter()
        .map(|(id, m)| (id, build_graph(&m).unwrap()))
        .collect()
}

fn bench_sweep(c: &mut Criterion) {
    let graphs = graphs();
    let machine = MachineProfile::skylake();
    let params = SimParams { noise_sigma: 0.02, ..SimParams::default() };
    let mut group = c.benchmark_group("sweep");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(sweep_all(&graphs, &machine, &params, 0, exec)))
        });
    }
    group.finish();
}

fn bench_batch_gradient(c: &mut Criterion) {
    let corpus = Corpus::simulate(MachineProfile::skylake(), graphs(), &SimParams::default(), 0, Execution::Parallel).unwrap();
    let labeled = derive_labels(&corpus.db, &corpus.graphs, &corpus.machine, Task::FastestAtCap(150)).unwrap();
    let params = init_model(ModelSpec::new(127, 0), 0);
    let prepared: Vec<PreparedGraph> = labeled.iter().take(16).map(|e| PreparedGraph::new(&e.graph, &params.spec).unwrap()).collect();
    let batch: Vec<Example> = prepared
        .iter()
        .zip(&labeled)
        .map(|(g, e)| Example { readout: Readout::Graph(g), extras: &[], label: e.label })
        .collect();
    let mut group = c.benchmark_group("batch_gradient_16");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| black_box(batch_pass(&params, &batch, exec).unwrap())));
    }
    group.finish();
}

fn bench_baseline_folds(c: &mut Criterion) {
    let corpus = Corpus::simulate(MachineProfile::skylake(), graphs(), &SimParams::default(), 0, Execution::Parallel).unwrap();
    let tuners = [Baseline::Random(20), Baseline::HillClimb(20)];
    let mut group = c.benchmark_group("baseline_evaluation");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(evaluate_baselines(&corpus, Task::MinEdp, &tuners, 0, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep, bench_batch_gradient, bench_baseline_folds);
criterion_main!(benches);
