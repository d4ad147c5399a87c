use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pionm::exec::Exec;
use pionm::fbsde::{simulate_paths, ValuePath};
use pionm::flow::{DensityFlow, FlowConfig};
use pionm::operator::{OperatorArch, OperatorModel};
use pionm::scenarios::obstacle_family;

const MODES: [(Exec, &str); 2] = [(Exec::Sequential, "sequential"), (Exec::Parallel, "parallel")];

fn flow_density(c: &mut Criterion) {
    let problem = obstacle_family().problem(2).unwrap();
    let flow = DensityFlow::for_problem(&problem, FlowConfig::default(), 1);
    let points = flow.push_samples(problem.steps, 4096, 2).unwrap();
    let mut group = c.benchmark_group("flow_log_density_4096");
    for (exec, name) in MODES {
        let f = flow.clone().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| f.log_density_batch(&points, problem.steps).unwrap())
        });
    }
    group.finish();
}

fn path_simulation(c: &mut Criterion) {
    let problem = obstacle_family().problem(2).unwrap();
    let flow = DensityFlow::for_problem(&problem, FlowConfig::default(), 1);
    let value = ValuePath::new(&problem, 16, 3);
    let mut group = c.benchmark_group("simulate_paths_1024");
    for (exec, name) in MODES {
        let f = flow.clone().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_paths(&problem, &f, &value, 1024, 5, 100.0).unwrap())
        });
    }
    group.finish();
}

fn operator_eval(c: &mut Criterion) {
    let family = obstacle_family();
    let problem = family.problem(0).unwrap();
    let model = OperatorModel::new(family.layout(), OperatorArch::default(), 1).unwrap();
    let queries = problem.working_box.lattice(&[40, 40]).concat();
    let mut group = c.benchmark_group("operator_eval_1600");
    group.sample_size(10);
    for (exec, name) in MODES {
        let m = model.clone().with_exec(exec);
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| m.eval(&family.codes[0], &queries).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, flow_density, path_simulation, operator_eval);
criterion_main!(benches);
