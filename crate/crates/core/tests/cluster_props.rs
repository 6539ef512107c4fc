use std::collections::{BTreeMap, BTreeSet};

use cloudmpc::cluster::{
    processing_time, reference_cluster, ClusterState, DemandModel, LoadModel, PodActivity, PodPhase,
};
use cloudmpc::schedmech::{reconcile, CnmpcArgs, MissionState, ResourceModel, SchedulerConfig, SchedulerState};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Agents(usize),
    Kill(usize),
    Heal,
    LoadFactor(f64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0usize..40).prop_map(Op::Agents),
        (0usize..6).prop_map(Op::Kill),
        Just(Op::Heal),
        (0.0f64..0.9).prop_map(Op::LoadFactor),
    ]
}

struct World {
    cluster: ClusterState,
    scheduler: SchedulerState,
    mission: MissionState,
}

impl World {
    fn new(replicas: usize) -> Self {
        let config = SchedulerConfig { replicas, ..SchedulerConfig::default() };
        World {
            cluster: ClusterState::new(reference_cluster()).unwrap().with_system_pods(0.25, 128.0).unwrap(),
            scheduler: SchedulerState::new(config).unwrap(),
            mission: MissionState::default(),
        }
    }

    fn tick(&mut self) {
        let actions = reconcile(&self.mission, &mut self.scheduler, &self.cluster.view()).unwrap();
        self.cluster.apply(&actions);
        self.cluster.heal();
    }

    fn perform(&mut self, op: &Op) {
        match op {
            Op::Agents(n) => self.mission.set_desired_agents(*n),
            Op::Kill(i) => {
                let names: Vec<String> = self.cluster.deployments().keys().cloned().collect();
                if !names.is_empty() {
                    let _ = self.cluster.kill_pod(&names[i % names.len()]);
                }
            }
            Op::Heal => {
                self.cluster.heal();
            }
            Op::LoadFactor(lf) => self.mission.cnmpc_args = CnmpcArgs { load_factor: *lf, ..CnmpcArgs::default() },
        }
    }

    fn deployments_without_running_pod(&self) -> Vec<String> {
        self.cluster
            .deployments()
            .keys()
            .filter(|d| self.cluster.running_pods(d).is_empty())
            .cloned()
            .collect()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn requests_stay_within_capacity(ops in proptest::collection::vec(op(), 1..30), replicas in 1usize..3) {
        let mut w = World::new(replicas);
        for op in &ops {
            w.perform(op);
            prop_assert!(w.cluster.request_violations().is_empty(), "after {op:?}");
            w.tick();
            prop_assert!(w.cluster.request_violations().is_empty(), "after tick following {op:?}");
        }
    }

    #[test]
    fn killed_pods_are_replaced_within_one_tick(n in 1usize..30, kills in proptest::collection::vec(0usize..6, 1..6)) {
        let mut w = World::new(1);
        w.mission.set_desired_agents(n);
        w.tick();
        prop_assert!(w.deployments_without_running_pod().is_empty());
        for k in kills {
            w.perform(&Op::Kill(k));
            w.tick();
            prop_assert!(w.deployments_without_running_pod().is_empty());
        }
    }

    #[test]
    fn bounded_pods_never_exceed_limits(
        n in 1usize..40, duties in proptest::collection::vec(0.0f64..=1.0, 8), lf in 0.0f64..0.9,
    ) {
        let mut w = World::new(1);
        w.mission.set_desired_agents(n);
        w.mission.cnmpc_args.load_factor = lf;
        w.tick();
        let activity: BTreeMap<u64, PodActivity> = w
            .cluster
            .pods()
            .keys()
            .enumerate()
            .map(|(i, id)| (*id, PodActivity { duty: duties[i % duties.len()] }))
            .collect();
        w.cluster.account(&activity, &ResourceModel::default(), &DemandModel::default());
        for p in w.cluster.pods().values().filter(|p| p.phase == PodPhase::Running && !p.unbounded) {
            prop_assert!(p.cpu_usage <= p.cpu_limit + 1e-12);
            prop_assert!(p.mem_usage <= p.mem_limit + 1e-12);
        }
    }

    #[test]
    fn processing_time_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let m = LoadModel::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (tl, th) = (processing_time(lo, &m).unwrap(), processing_time(hi, &m).unwrap());
        prop_assert!(tl <= th);
        prop_assert!(tl >= m.tau_p_base && th <= m.saturation_cap);
    }

    #[test]
    fn processing_time_is_continuous(u in 0.0f64..0.999) {
        let m = LoadModel::default();
        let h = 1e-9;
        let jump = processing_time(u + h, &m).unwrap() - processing_time(u, &m).unwrap();
        prop_assert!(jump.abs() < 1e-5, "jump {jump:e} at {u}");
    }

    #[test]
    fn placement_is_deterministic(ops in proptest::collection::vec(op(), 1..20)) {
        let replay = || {
            let mut w = World::new(1);
            for op in &ops {
                w.perform(op);
                w.tick();
            }
            w.cluster.pods().values().map(|p| (p.id, p.node.clone(), p.phase)).collect::<Vec<_>>()
        };
        prop_assert_eq!(replay(), replay());
    }
}

#[test]
fn processing_time_rejects_out_of_range() {
    let m = LoadModel::default();
    assert!(processing_time(-0.01, &m).is_err());
    assert!(processing_time(1.01, &m).is_err());
    assert_eq!(processing_time(m.knee, &m).unwrap(), m.tau_p_base);
    assert_eq!(processing_time(1.0, &m).unwrap(), m.saturation_cap);
}

#[test]
fn controllers_avoid_the_system_node() {
    let mut w = World::new(1);
    w.mission.set_desired_agents(4);
    w.tick();
    let sys = w.cluster.system_node().map(str::to_string);
    assert!(sys.is_some());
    let controller_nodes: BTreeSet<Option<String>> = w
        .cluster
        .deployments()
        .keys()
        .flat_map(|d| w.cluster.running_pods(d).into_iter().map(|p| p.node.clone()).collect::<Vec<_>>())
        .collect();
    assert!(!controller_nodes.contains(&sys));
}
