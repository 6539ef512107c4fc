use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Processing time as a function of node CPU utilization: flat up to the
/// knee, then growing hyperbolically until the cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadModel {
    /// Seconds.
    pub tau_p_base: f64,
    pub knee: f64,
    /// Seconds.
    pub saturation_cap: f64,
    /// Utilization band the operator aims for.
    pub target_band: [f64; 2],
}

impl Default for LoadModel {
    fn default() -> Self {
        LoadModel {
            tau_p_base: 0.01,
            knee: 0.6,
            saturation_cap: 1.0,
            target_band: [0.3, 0.6],
        }
    }
}

impl LoadModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_p_base > 0.0) {
            return Err(Error::contract("tau_p_base must be positive"));
        }
        if !(0.0..1.0).contains(&self.knee) {
            return Err(Error::contract("knee must lie in [0, 1)"));
        }
        if !(self.saturation_cap >= self.tau_p_base) {
            return Err(Error::contract("saturation_cap must be at least tau_p_base"));
        }
        let [lo, hi] = self.target_band;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::contract("target_band must be an interval inside [0, 1]"));
        }
        Ok(())
    }

    pub fn in_band(&self, utilization: f64) -> bool {
        (self.target_band[0]..=self.target_band[1]).contains(&utilization)
    }
}

/// Controller processing time at node utilization `u ∈ [0, 1]`.
pub fn processing_time(u: f64, model: &LoadModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::contract(format!("utilization must lie in [0, 1], got {u}")));
    }
    if u <= model.knee {
        return Ok(model.tau_p_base);
    }
    let headroom = 1.0 - (u - model.knee) / (1.0 - model.knee);
    if headroom <= 0.0 {
        return Ok(model.saturation_cap);
    }
    Ok((model.tau_p_base / headroom).min(model.saturation_cap))
}

/// CPU demand of a controller pod. Demand starts from the envelope's lower
/// bound, scales with how often the pod actually solved, and grows with the
/// number of agent pairs the solver has to keep apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandModel {
    /// Cores used by any running pod regardless of activity.
    pub idle_floor: f64,
    /// Relative extra demand per additional agent pair, `(x − 1) / 2` pairs per agent.
    pub pair_coefficient: f64,
    /// Cores used by each system pod.
    pub system_usage: f64,
}

impl Default for DemandModel {
    fn default() -> Self {
        DemandModel {
            idle_floor: 0.05,
            pair_coefficient: 0.1,
            system_usage: 0.05,
        }
    }
}

impl DemandModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.idle_floor >= 0.0 && self.pair_coefficient >= 0.0 && self.system_usage >= 0.0) {
            return Err(Error::contract("demand model parameters must be non-negative"));
        }
        Ok(())
    }

    /// Demand in cores for `agents` agents at `duty ∈ [0, 1]` given the
    /// unrounded envelope lower bound `cpu_min`.
    pub fn controller_demand(&self, cpu_min: f64, agents: usize, duty: f64) -> f64 {
        let pairs = agents.saturating_sub(1) as f64 / 2.0;
        cpu_min * duty.clamp(0.0, 1.0) * (1.0 + self.pair_coefficient * pairs)
    }
}
