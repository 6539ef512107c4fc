use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tunnel::Direction;
use crate::AgentId;

pub const DEFAULT_BASE_PORT: u16 = 15000;
pub const BASE_PORT_ENV: &str = "CLOUDMPC_BASE_PORT";
pub const PROXY_ADDR_ENV: &str = "CLOUDMPC_PROXY_ADDR";
pub const DEFAULT_PROXY_ADDR: &str = "127.0.0.1";

/// Per-agent uplink/downlink ports derived from the live service set.
///
/// Uplink port is `base + 2·id`, downlink `base + 2·id + 1`; the shared
/// coordination service listens on `base − 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteTable {
    base_port: u16,
    routes: BTreeMap<AgentId, (u16, u16)>,
}

impl Default for RouteTable {
    fn default() -> Self {
        RouteTable::new(DEFAULT_BASE_PORT)
    }
}

impl RouteTable {
    pub fn new(base_port: u16) -> Self {
        RouteTable {
            base_port: base_port.max(1),
            routes: BTreeMap::new(),
        }
    }

    pub fn uplink_port(base: u16, agent: AgentId) -> u16 {
        base.wrapping_add(agent.0.wrapping_mul(2))
    }

    pub fn downlink_port(base: u16, agent: AgentId) -> u16 {
        Self::uplink_port(base, agent).wrapping_add(1)
    }

    pub fn for_agents(agents: impl IntoIterator<Item = AgentId>, base_port: u16) -> Self {
        let mut table = RouteTable::new(base_port);
        for a in agents {
            table.insert(a);
        }
        table
    }

    pub fn insert(&mut self, agent: AgentId) {
        let b = self.base_port;
        self.routes
            .insert(agent, (Self::uplink_port(b, agent), Self::downlink_port(b, agent)));
    }

    pub fn remove(&mut self, agent: AgentId) {
        self.routes.remove(&agent);
    }

    pub fn base_port(&self) -> u16 {
        self.base_port
    }

    pub fn shared_port(&self) -> u16 {
        self.base_port - 1
    }

    pub fn port(&self, agent: AgentId, direction: Direction) -> Option<u16> {
        self.routes.get(&agent).map(|(up, down)| match direction {
            Direction::Uplink => *up,
            Direction::Downlink => *down,
        })
    }

    pub fn agents(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.routes.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Ports are pairwise distinct and distinct from the shared port.
    pub fn ports_unique(&self) -> bool {
        let mut seen = std::collections::BTreeSet::from([self.shared_port()]);
        self.routes.values().all(|(u, d)| seen.insert(*u) && seen.insert(*d))
    }
}

/// Base port and proxy address, overridable through the environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportEnv {
    pub base_port: u16,
    pub proxy_addr: String,
}

impl TransportEnv {
    pub fn from_env() -> Self {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Self {
        TransportEnv {
            base_port: lookup(BASE_PORT_ENV)
                .and_then(|v| v.parse().ok())
                .unwrap_or(DEFAULT_BASE_PORT),
            proxy_addr: lookup(PROXY_ADDR_ENV).unwrap_or_else(|| DEFAULT_PROXY_ADDR.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn port_assignment() {
        let t = RouteTable::for_agents([AgentId(0), AgentId(3)], 15000);
        assert_eq!(t.port(AgentId(0), Direction::Uplink), Some(15000));
        assert_eq!(t.port(AgentId(0), Direction::Downlink), Some(15001));
        assert_eq!(t.port(AgentId(3), Direction::Uplink), Some(15006));
        assert_eq!(t.port(AgentId(1), Direction::Uplink), None);
        assert_eq!(t.shared_port(), 14999);
        assert!(t.ports_unique());
    }

    #[test]
    fn env_overrides() {
        let env = TransportEnv::from_lookup(|k| match k {
            BASE_PORT_ENV => Some("20000".into()),
            _ => None,
        });
        assert_eq!(env.base_port, 20000);
        assert_eq!(env.proxy_addr, DEFAULT_PROXY_ADDR);
    }
}
