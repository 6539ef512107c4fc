//! Mission planner and the once-per-tick scheduler that turns mission state
//! into controller deployments, services and resource envelopes.

mod mission;
mod reconcile;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mission::{
    reference_window, Formation, MissionCommand, MissionState, Reference, TakeoffProfile, Waypoint,
};
pub use reconcile::{
    reconcile, required_services, service_specs, target_deployments, Action, ClusterView,
    DeploymentSpec, SchedulerConfig, SchedulerState, SchedulingMode, ServiceSpec, SHARED_SERVICE,
};

/// Controller parameters that drive both the optimizer and its resource envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnmpcArgs {
    pub horizon_steps: usize,
    pub sampling_time: f64,
    /// Hz.
    pub control_rate: f64,
    /// Normalised horizon/rate intensity in `[0, 1)`.
    pub load_factor: f64,
}

impl Default for CnmpcArgs {
    fn default() -> Self {
        CnmpcArgs {
            horizon_steps: 20,
            sampling_time: 0.05,
            control_rate: 20.0,
            load_factor: 0.5,
        }
    }
}

impl CnmpcArgs {
    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 {
            return Err(Error::contract("horizon_steps must be at least 1"));
        }
        if !(self.sampling_time > 0.0 && self.control_rate > 0.0) {
            return Err(Error::contract("sampling_time and control_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.load_factor) {
            return Err(Error::contract(format!(
                "load_factor must lie in [0, 1), got {}",
                self.load_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceModel {
    /// Cores per additional agent.
    pub a: f64,
    /// MiB per additional agent.
    pub b: f64,
    pub cpu_base_min: f64,
    pub cpu_base_max: f64,
    pub mem_base_min: f64,
    pub mem_base_max: f64,
}

impl Default for ResourceModel {
    fn default() -> Self {
        ResourceModel {
            a: 0.5,
            b: 64.0,
            cpu_base_min: 1.0,
            cpu_base_max: 2.0,
            mem_base_min: 256.0,
            mem_base_max: 512.0,
        }
    }
}

impl ResourceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::contract("resource slopes a, b must be positive"));
        }
        if !(self.cpu_base_min >= 0.0 && self.cpu_base_min <= self.cpu_base_max) {
            return Err(Error::contract("need 0 <= cpu_base_min <= cpu_base_max"));
        }
        if !(self.mem_base_min >= 0.0 && self.mem_base_min <= self.mem_base_max) {
            return Err(Error::contract("need 0 <= mem_base_min <= mem_base_max"));
        }
        Ok(())
    }
}

/// CPU (cores) and memory (MiB) bounds for one controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceEnvelope {
    pub cpu_min: f64,
    pub cpu_max: f64,
    pub mem_min: f64,
    pub mem_max: f64,
}

/// Smallest multiple of `step` not below `v`, absorbing float noise just above a multiple.
fn round_up(v: f64, step: f64) -> f64 {
    ((v / step) - 1e-9).ceil() * step
}

/// Envelope before rounding to allocation granularity.
pub fn compute_resources_exact(
    agents: usize,
    args: &CnmpcArgs,
    model: &ResourceModel,
) -> Result<ResourceEnvelope> {
    if agents == 0 {
        return Err(Error::contract("a controller needs at least one agent"));
    }
    if !(0.0..1.0).contains(&args.load_factor) {
        return Err(Error::contract(format!(
            "load_factor must lie in [0, 1), got {}",
            args.load_factor
        )));
    }
    let scale = (agents - 1) as f64 / (1.0 - args.load_factor);
    Ok(ResourceEnvelope {
        cpu_min: model.a * scale + model.cpu_base_min,
        cpu_max: model.a * scale + model.cpu_base_max,
        mem_min: model.b * scale + model.mem_base_min,
        mem_max: model.b * scale + model.mem_base_max,
    })
}

/// Envelope rounded up to 0.1 core and 1 MiB.
pub fn compute_resources(agents: usize, args: &CnmpcArgs, model: &ResourceModel) -> Result<ResourceEnvelope> {
    let e = compute_resources_exact(agents, args, model)?;
    Ok(ResourceEnvelope {
        cpu_min: round_up(e.cpu_min, 0.1),
        cpu_max: round_up(e.cpu_max, 0.1),
        mem_min: round_up(e.mem_min, 1.0),
        mem_max: round_up(e.mem_max, 1.0),
    })
}

/// Number of controllers needed so none exceeds `agent_max` agents.
pub fn required_cnmpcs(agents: usize, agent_max: usize) -> usize {
    assert!(agent_max >= 1, "agent_max must be at least 1");
    agents.div_ceil(agent_max)
}

/// Balanced group sizes: the first `n mod k` groups get one extra agent.
pub fn partition_agents(agents: usize, cnmpc_count: usize) -> Result<Vec<usize>> {
    if cnmpc_count == 0 {
        return if agents == 0 {
            Ok(Vec::new())
        } else {
            Err(Error::contract("cannot partition agents over zero controllers"))
        };
    }
    let (base, extra) = (agents / cnmpc_count, agents % cnmpc_count);
    Ok((0..cnmpc_count).map(|g| base + usize::from(g < extra)).collect())
}

/// Alternative distribution loop that seeds each group from `(n - 1) / k`, kept for
/// comparison. It under-allocates for some inputs (15 agents over 2
/// controllers yields `[7, 7]`).
pub fn partition_agents_literal(agents: usize, agent_max: usize) -> Vec<usize> {
    if agents == 0 {
        return Vec::new();
    }
    let count = required_cnmpcs(agents, agent_max);
    let whole = (agents - 1) / count;
    let mut per = whole;
    let mut per_float = (agents - 1) as f64 / count as f64;
    let mut counter = 0;
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        if per as f64 == per_float {
            per = whole;
            sizes.push(per);
        } else {
            counter += 1;
            per = whole + 1;
            per_float = (agents - counter) as f64 / count as f64;
            sizes.push(per);
            per -= 1;
        }
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn controller_counts() {
        assert_eq!(required_cnmpcs(10, 8), 2);
        assert_eq!(required_cnmpcs(21, 8), 3);
        assert_eq!(required_cnmpcs(0, 8), 0);
        assert_eq!(required_cnmpcs(8, 8), 1);
        assert_eq!(required_cnmpcs(9, 8), 2);
    }

    #[test]
    fn balanced_partitions() {
        assert_eq!(partition_agents(10, 2).unwrap(), vec![5, 5]);
        assert_eq!(partition_agents(15, 2).unwrap(), vec![8, 7]);
        assert_eq!(partition_agents(21, 3).unwrap(), vec![7, 7, 7]);
        assert_eq!(partition_agents(7, 1).unwrap(), vec![7]);
        assert!(partition_agents(3, 0).is_err());
        assert!(partition_agents(0, 0).unwrap().is_empty());
    }

    #[test]
    fn literal_loop_reproduces_its_shortfall() {
        assert_eq!(partition_agents_literal(10, 8), vec![5, 5]);
        assert_eq!(partition_agents_literal(21, 8), vec![7, 7, 7]);
        assert_eq!(partition_agents_literal(15, 8), vec![7, 7]);
    }

    #[test]
    fn resource_examples() {
        let model = ResourceModel::default();
        let args = CnmpcArgs::default();
        let one = compute_resources(1, &args, &model).unwrap();
        assert_eq!(one, ResourceEnvelope {
            cpu_min: 1.0,
            cpu_max: 2.0,
            mem_min: 256.0,
            mem_max: 512.0
        });
        let eight = compute_resources(8, &args, &model).unwrap();
        assert!((eight.cpu_min - 8.0).abs() < 1e-12);
        let (four, five) = (
            compute_resources(4, &args, &model).unwrap(),
            compute_resources(5, &args, &model).unwrap(),
        );
        assert!(five.cpu_min > four.cpu_min && five.cpu_max > four.cpu_max);
        assert!(five.mem_min > four.mem_min && five.mem_max > four.mem_max);
        let bad = CnmpcArgs {
            load_factor: 1.0,
            ..args
        };
        assert!(compute_resources(2, &bad, &model).is_err());
    }

    #[test]
    fn rounding_granularity() {
        assert_eq!(round_up(0.30000000000000004, 0.1), 0.30000000000000004);
        assert!((round_up(0.31, 0.1) - 0.4).abs() < 1e-12);
        assert_eq!(round_up(256.2, 1.0), 257.0);
        let model = ResourceModel::default();
        let args = CnmpcArgs {
            load_factor: 0.3,
            ..CnmpcArgs::default()
        };
        let e = compute_resources(3, &args, &model).unwrap();
        let x = compute_resources_exact(3, &args, &model).unwrap();
        assert!(e.cpu_min >= x.cpu_min && e.cpu_min - x.cpu_min < 0.1 + 1e-9);
        assert!(e.mem_max >= x.mem_max && e.mem_max - x.mem_max < 1.0);
    }
}
