use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cloudmpc::cluster::{reference_cluster, ClusterState};
use cloudmpc::dynamics::ControlInput;
use cloudmpc::schedmech::{reconcile, MissionState, SchedulerConfig, SchedulerState};
use cloudmpc::transport::{decode, encode, WireMessage};
use cloudmpc::AgentId;

fn reconcile_and_apply(c: &mut Criterion) {
    let mut group = c.benchmark_group("reconcile_apply");
    for n in [8, 32, 128] {
        let mission = MissionState {
            agents: (0..n).map(AgentId).collect::<BTreeSet<_>>(),
            ..MissionState::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let mut cluster = ClusterState::new(reference_cluster()).unwrap();
                let mut state = SchedulerState::new(SchedulerConfig::default()).unwrap();
                let actions = reconcile(&mission, &mut state, &cluster.view()).unwrap();
                cluster.apply(&actions)
            })
        });
    }
    group.finish();
}

fn codec(c: &mut Criterion) {
    let m = WireMessage::command(AgentId(3), 42, 1_000_000, &ControlInput::new(0.1, -0.1, 9.81));
    let frame = encode(&m);
    c.bench_function("encode_command", |b| b.iter(|| encode(&m)));
    c.bench_function("decode_command", |b| b.iter(|| decode(&frame).unwrap()));
}

criterion_group!(benches, reconcile_and_apply, codec);
criterion_main!(benches);
