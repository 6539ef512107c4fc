use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cloudmpc::controller::{solve, CnmpcProblem, ReferenceWindow, SolverConfig};
use cloudmpc::dynamics::{estimate_present, hover_input, step, AgentState, ModelParams};
use nalgebra::Vector3;

fn line(n: usize, y: f64) -> Vec<AgentState> {
    (0..n).map(|i| AgentState::at_rest(Vector3::new(i as f64, y, 2.0))).collect()
}

fn solve_by_agents(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    group.sample_size(10);
    for n in [1, 2, 4, 8] {
        let problem = CnmpcProblem::with_model(n, ModelParams::default());
        let current = line(n, 0.0);
        let refs = ReferenceWindow::hold(&line(n, 1.0), problem.horizon_steps);
        let previous = vec![hover_input(&problem.model); n];
        let config = SolverConfig::default();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| solve(&problem, &current, &refs, &previous, None, &config).unwrap())
        });
    }
    group.finish();
}

fn dynamics(c: &mut Criterion) {
    let params = ModelParams::default();
    let mut s = AgentState::at_rest(Vector3::new(0.0, 0.0, 2.0));
    s.velocity = Vector3::new(1.0, 0.5, 0.0);
    let u = hover_input(&params);
    c.bench_function("rk4_step", |b| b.iter(|| step(&s, &u, &params, 0.01).unwrap()));
    c.bench_function("estimate_present_100ms", |b| b.iter(|| estimate_present(&s, &u, &params, 0.1).unwrap()));
}

criterion_group!(benches, solve_by_agents, dynamics);
criterion_main!(benches);
