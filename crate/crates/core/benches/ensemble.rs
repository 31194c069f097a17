use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DVector;

use colored_sse::algebra::{c, pauli_x, pauli_z};
use colored_sse::coefficients::{ou_random_hamiltonian_model, OUModel};
use colored_sse::ensemble::{run_ensemble, EnsembleConfig};
use colored_sse::noise::TimeGrid;
use colored_sse::Execution;

fn ensemble(c_: &mut Criterion) {
    let model = ou_random_hamiltonian_model(&OUModel::new(&pauli_x(), &pauli_z(), 1.0).unwrap()).unwrap();
    let grid = TimeGrid::new(1e-3, 500).unwrap();
    let psi0 = DVector::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]) / c(2f64.sqrt(), 0.0);
    let config = EnsembleConfig::new(psi0);

    let mut group = c_.benchmark_group("ou_ensemble_1024x500");
    group.sample_size(10);
    let mut policies = vec![("sequential", Execution::Sequential)];
    if cfg!(feature = "parallel") {
        policies.push(("parallel", Execution::Parallel { workers: 0 }));
    }
    for (name, exec) in policies {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| run_ensemble(&model, &grid, 1024, 7, &config, *exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, ensemble);
criterion_main!(benches);
