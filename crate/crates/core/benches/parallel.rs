//! Sequential against parallel execution for the two data-parallel kernels:
//! grid certification and Monte Carlo seed sweeps.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rg_core::bounds::{self, CertifyOptions};
use rg_core::exec::Execution;
use rg_core::model::{Plant, Spacecraft, SpacecraftParams};
use rg_core::norms::NormSpec;
use rg_core::sim::{self, GovernorChoice, Scenario};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn certify(c: &mut Criterion) {
    let plant = Spacecraft::new(SpacecraftParams::default()).unwrap();
    let spec = NormSpec::weighted(plant.lyapunov_weight().unwrap()).unwrap();
    let partition = bounds::uniform_partition(plant.command_set(), 1).unwrap();
    let mut group = c.benchmark_group("certify_spacecraft_density3");
    group.sample_size(10);
    for (name, execution) in MODES {
        let opts = CertifyOptions {
            density: 3,
            inflation: 1.05,
            execution,
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(bounds::certify(&plant, &spec, &partition, &opts).unwrap()))
        });
    }
    group.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let scenario: Scenario = serde_json::from_value(serde_json::json!({
        "model": {"kind": "example1"},
        "norm": {"kind": "l2"},
        "governor": {"s": [[1.0]]},
        "disturbance": {"bound": 0.01, "shape": "ball", "channels": [0]},
        "certification": {"density": 21},
        "reference": [{"t": 0.0, "value": [std::f64::consts::FRAC_1_SQRT_2]}],
        "v0": [0.0],
        "duration": 5.0
    }))
    .unwrap();
    let prep = scenario.prepare(Execution::Sequential).unwrap();
    let seeds: Vec<u64> = (0..16).collect();
    let mut group = c.benchmark_group("monte_carlo_example1_16_seeds");
    group.sample_size(10);
    for (name, execution) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(sim::run_seeds(&prep, GovernorChoice::RgNl, &seeds, execution)))
        });
    }
    group.finish();
}

criterion_group!(benches, certify, monte_carlo);
criterion_main!(benches);
