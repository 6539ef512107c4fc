use std::collections::BTreeSet;

use cloudmpc::cluster::{reference_cluster, ClusterState};
use cloudmpc::schedmech::{
    compute_resources, compute_resources_exact, partition_agents, reconcile, required_cnmpcs, required_services,
    target_deployments, CnmpcArgs, MissionState, ResourceModel, SchedulerConfig, SchedulerState, SchedulingMode,
};
use cloudmpc::AgentId;
use proptest::prelude::*;

fn mission(agents: &BTreeSet<AgentId>, load_factor: f64) -> MissionState {
    MissionState {
        agents: agents.clone(),
        cnmpc_args: CnmpcArgs { load_factor, ..CnmpcArgs::default() },
        ..MissionState::default()
    }
}

fn agent_set() -> impl Strategy<Value = BTreeSet<AgentId>> {
    proptest::collection::btree_set((0u16..64).prop_map(AgentId), 0..40)
}

fn config(agent_max: usize, recreate: bool) -> SchedulerConfig {
    SchedulerConfig { agent_max, recreate, ..SchedulerConfig::default() }
}

proptest! {
    #[test]
    fn partition_is_balanced(n in 0usize..500, agent_max in 1usize..40) {
        let k = required_cnmpcs(n, agent_max);
        let sizes = partition_agents(n, k).unwrap();
        prop_assert_eq!(sizes.len(), k);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        let (lo, hi) = (sizes.iter().min().copied().unwrap_or(0), sizes.iter().max().copied().unwrap_or(0));
        prop_assert!(hi - lo <= 1);
        prop_assert!(hi <= agent_max);
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        if n > 0 {
            prop_assert!(k == 1 || n > (k - 1) * agent_max);
        }
    }

    #[test]
    fn envelope_matches_formula_and_grows(x in 1usize..100, lf in 0.0f64..0.95) {
        let args = CnmpcArgs { load_factor: lf, ..CnmpcArgs::default() };
        let model = ResourceModel::default();
        let exact = compute_resources_exact(x, &args, &model).unwrap();
        let oracle = model.a * (x - 1) as f64 / (1.0 - lf) + model.cpu_base_min;
        prop_assert!((exact.cpu_min - oracle).abs() <= 1e-12 * oracle.max(1.0));
        let e = compute_resources(x, &args, &model).unwrap();
        let e_next = compute_resources(x + 1, &args, &model).unwrap();
        prop_assert!(e.cpu_min >= exact.cpu_min - 1e-12 && e.cpu_min < exact.cpu_min + 0.1 + 1e-9);
        prop_assert!(e.cpu_min <= e.cpu_max && e.mem_min <= e.mem_max);
        prop_assert!(e_next.cpu_min >= e.cpu_min && e_next.mem_min >= e.mem_min);
        let heavier = CnmpcArgs { load_factor: (lf + 0.02).min(0.99), ..args };
        prop_assert!(compute_resources(x, &heavier, &model).unwrap().cpu_min >= e.cpu_min);
    }

    #[test]
    fn one_tick_converges_and_is_idempotent(
        first in agent_set(), second in agent_set(), agent_max in 1usize..10, recreate in any::<bool>(),
        lf in 0.0f64..0.9,
    ) {
        let cfg = config(agent_max, recreate);
        let mut cluster = ClusterState::new(reference_cluster()).unwrap();
        let mut state = SchedulerState::new(cfg.clone()).unwrap();
        for agents in [&first, &second] {
            let m = mission(agents, lf);
            let actions = reconcile(&m, &mut state, &cluster.view()).unwrap();
            prop_assert_eq!(cluster.apply(&actions), 0, "rejected actions in {:?}", actions);
            let view = cluster.view();
            let targets = target_deployments(agents, &m.cnmpc_args, &cfg).unwrap();
            let mut live: Vec<_> = view.deployments.values().cloned().collect();
            live.sort_by_key(|d| d.index);
            prop_assert_eq!(live, targets);
            prop_assert_eq!(view.services.len(), required_services(agents.len()));
            let mut fresh = SchedulerState::new(cfg.clone()).unwrap();
            prop_assert!(reconcile(&m, &mut fresh, &view).unwrap().is_empty());
            prop_assert!(reconcile(&m, &mut state, &view).unwrap().is_empty());
            let assigned: BTreeSet<AgentId> =
                view.deployments.values().flat_map(|d| d.assigned_agents.iter().copied()).collect();
            prop_assert_eq!(&assigned, agents);
        }
    }

    #[test]
    fn action_logs_are_deterministic(
        steps in proptest::collection::vec(agent_set(), 1..5), agent_max in 1usize..10, recreate in any::<bool>(),
    ) {
        let replay = || {
            let mut cluster = ClusterState::new(reference_cluster()).unwrap();
            let mut state = SchedulerState::new(config(agent_max, recreate)).unwrap();
            let mut log = Vec::new();
            for agents in &steps {
                let actions = reconcile(&mission(agents, 0.5), &mut state, &cluster.view()).unwrap();
                cluster.apply(&actions);
                log.push(serde_json::to_string(&actions).unwrap());
            }
            log
        };
        prop_assert_eq!(replay(), replay());
    }
}

#[test]
fn baseline_uses_one_unbounded_deployment() {
    let agents: BTreeSet<AgentId> = (0..12).map(AgentId).collect();
    let cfg = SchedulerConfig { mode: SchedulingMode::Baseline, ..SchedulerConfig::default() };
    let targets = target_deployments(&agents, &CnmpcArgs::default(), &cfg).unwrap();
    assert_eq!(targets.len(), 1);
    assert!(targets[0].unbounded);
    assert_eq!(targets[0].assigned_agents.len(), 12);
}

#[test]
fn fifteen_agents_split_eight_seven() {
    assert_eq!(partition_agents(15, required_cnmpcs(15, 8)).unwrap(), vec![8, 7]);
    assert_eq!(partition_agents(16, required_cnmpcs(16, 8)).unwrap(), vec![8, 8]);
    assert_eq!(partition_agents(17, required_cnmpcs(17, 8)).unwrap(), vec![6, 6, 5]);
}
