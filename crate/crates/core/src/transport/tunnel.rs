use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::codec::{encode, WireMessage};
use super::routes::RouteTable;
use crate::error::{Error, Result};
use crate::AgentId;

/// Converts seconds to whole microseconds of virtual time.
pub fn to_micros(seconds: f64) -> u64 {
    (seconds * 1e6).round().max(0.0) as u64
}

pub fn to_seconds(micros: u64) -> f64 {
    micros as f64 / 1e6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Agent to cloud.
    Uplink,
    /// Cloud to agent.
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayModel {
    /// Mean uplink delay, seconds.
    pub uplink: f64,
    /// Half-width of the uniform uplink jitter, seconds.
    pub uplink_jitter: f64,
    pub downlink: f64,
    pub downlink_jitter: f64,
    pub drop_probability: f64,
    pub seed: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        DelayModel {
            uplink: 0.02,
            uplink_jitter: 0.005,
            downlink: 0.02,
            downlink_jitter: 0.005,
            drop_probability: 0.0,
            seed: 0,
        }
    }
}

impl DelayModel {
    pub fn constant(uplink: f64, downlink: f64) -> Self {
        DelayModel {
            uplink,
            uplink_jitter: 0.0,
            downlink,
            downlink_jitter: 0.0,
            drop_probability: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let delays = [self.uplink, self.uplink_jitter, self.downlink, self.downlink_jitter];
        if delays.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::contract("delays and jitter must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::contract("drop_probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A frame in flight or just delivered.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub direction: Direction,
    pub agent: AgentId,
    pub port: u16,
    pub sent_us: u64,
    pub at_us: u64,
    pub frame: Vec<u8>,
}

impl Delivery {
    pub fn delay(&self) -> f64 {
        to_seconds(self.at_us - self.sent_us)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TunnelStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub unrouted: u64,
}

/// Virtual-time tunnel: frames are queued for delivery at `send + delay`.
#[derive(Debug)]
pub struct VirtualTunnel {
    model: DelayModel,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    in_flight: BTreeMap<u64, Delivery>,
    next_id: u64,
    routes: RouteTable,
    stats: TunnelStats,
    warnings: Vec<String>,
}

impl VirtualTunnel {
    pub fn new(model: DelayModel, routes: RouteTable) -> Result<Self> {
        model.validate()?;
        Ok(VirtualTunnel {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            model,
            queue: BinaryHeap::new(),
            in_flight: BTreeMap::new(),
            next_id: 0,
            routes,
            stats: TunnelStats::default(),
            warnings: Vec::new(),
        })
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    /// Replaces delay parameters; the random stream continues.
    pub fn set_model(&mut self, model: DelayModel) -> Result<()> {
        model.validate()?;
        self.model = model;
        Ok(())
    }

    pub fn set_routes(&mut self, routes: RouteTable) {
        self.routes = routes;
    }

    pub fn routes(&self) -> &RouteTable {
        &self.routes
    }

    pub fn stats(&self) -> TunnelStats {
        self.stats
    }

    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    fn sample_delay(&mut self, direction: Direction) -> u64 {
        let (base, jitter) = match direction {
            Direction::Uplink => (self.model.uplink, self.model.uplink_jitter),
            Direction::Downlink => (self.model.downlink, self.model.downlink_jitter),
        };
        let offset = if jitter > 0.0 {
            self.rng.random_range(-jitter..=jitter)
        } else {
            0.0
        };
        to_micros((base + offset).max(0.0))
    }

    /// Sends `message` at `now_us`. Returns the delivery time, or `None` if dropped.
    pub fn send(&mut self, message: &WireMessage, direction: Direction, now_us: u64) -> Option<u64> {
        let agent = message.agent_id();
        let port = match self.routes.port(agent, direction) {
            Some(p) => p,
            None => {
                self.stats.unrouted += 1;
                self.warnings.push(format!(
                    "no {direction:?} route for agent {agent}; using shared service port"
                ));
                self.routes.shared_port()
            }
        };
        self.stats.sent += 1;
        let delay = self.sample_delay(direction);
        let dropped = self.model.drop_probability > 0.0 && self.rng.random::<f64>() < self.model.drop_probability;
        if dropped {
            self.stats.dropped += 1;
            return None;
        }
        let at_us = now_us + delay;
        let id = self.next_id;
        self.next_id += 1;
        self.queue.push(Reverse((at_us, id)));
        self.in_flight.insert(
            id,
            Delivery {
                direction,
                agent,
                port,
                sent_us: now_us,
                at_us,
                frame: encode(message),
            },
        );
        Some(at_us)
    }

    /// Pops every frame due at or before `now_us`, in delivery-time order.
    pub fn deliver_due(&mut self, now_us: u64) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(Reverse((at, id))) = self.queue.peek().copied() {
            if at > now_us {
                break;
            }
            self.queue.pop();
            if let Some(d) = self.in_flight.remove(&id) {
                self.stats.delivered += 1;
                out.push(d);
            }
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}

/// Receiver-side latest-value slots; frames with a sequence number not newer
/// than the stored one are counted stale and discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct LatestSlots<T> {
    slots: BTreeMap<AgentId, (u32, T)>,
    stale: u64,
}

impl<T> Default for LatestSlots<T> {
    fn default() -> Self {
        LatestSlots {
            slots: BTreeMap::new(),
            stale: 0,
        }
    }
}

impl<T> LatestSlots<T> {
    pub fn offer(&mut self, agent: AgentId, seq: u32, value: T) -> bool {
        match self.slots.get(&agent) {
            Some((current, _)) if *current >= seq => {
                self.stale += 1;
                false
            }
            _ => {
                self.slots.insert(agent, (seq, value));
                true
            }
        }
    }

    pub fn get(&self, agent: AgentId) -> Option<&(u32, T)> {
        self.slots.get(&agent)
    }

    pub fn remove(&mut self, agent: AgentId) {
        self.slots.remove(&agent);
    }

    pub fn stale(&self) -> u64 {
        self.stale
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::codec::HighLevelCode;

    fn routes(n: u16) -> RouteTable {
        RouteTable::for_agents((0..n).map(AgentId), 15000)
    }

    fn msg(agent: u16) -> WireMessage {
        WireMessage::HighLevel {
            agent_id: AgentId(agent),
            code: HighLevelCode::TakeOff,
        }
    }

    #[test]
    fn constant_delay_delivery_time() {
        let mut t = VirtualTunnel::new(DelayModel::constant(0.02, 0.03), routes(1)).unwrap();
        let at = t.send(&msg(0), Direction::Uplink, to_micros(1.0)).unwrap();
        assert_eq!(at, 1_020_000);
        assert!(t.deliver_due(1_019_999).is_empty());
        let d = t.deliver_due(1_020_000);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].delay(), 0.02);
        assert_eq!(d[0].port, 15000);
        let at = t.send(&msg(0), Direction::Downlink, to_micros(1.0)).unwrap();
        assert_eq!(at, 1_030_000);
    }

    #[test]
    fn full_drop() {
        let model = DelayModel {
            drop_probability: 1.0,
            ..DelayModel::default()
        };
        let mut t = VirtualTunnel::new(model, routes(2)).unwrap();
        for k in 0..100 {
            assert!(t.send(&msg(k % 2), Direction::Uplink, k as u64).is_none());
        }
        assert!(t.deliver_due(u64::MAX).is_empty());
        assert_eq!(t.stats().dropped, 100);
    }

    #[test]
    fn unrouted_goes_to_shared_with_warning() {
        let mut t = VirtualTunnel::new(DelayModel::constant(0.0, 0.0), routes(1)).unwrap();
        t.send(&msg(5), Direction::Uplink, 0).unwrap();
        let d = t.deliver_due(0);
        assert_eq!(d[0].port, t.routes().shared_port());
        assert_eq!(t.take_warnings().len(), 1);
        assert_eq!(t.stats().unrouted, 1);
    }

    #[test]
    fn same_seed_same_schedule() {
        let model = DelayModel {
            drop_probability: 0.3,
            seed: 42,
            ..DelayModel::default()
        };
        let run = || {
            let mut t = VirtualTunnel::new(model.clone(), routes(3)).unwrap();
            let sent: Vec<Option<u64>> =
                (0..200).map(|k| t.send(&msg(k % 3), Direction::Uplink, k as u64 * 1000)).collect();
            let order: Vec<(u64, AgentId)> =
                t.deliver_due(u64::MAX).into_iter().map(|d| (d.at_us, d.agent)).collect();
            (sent, order)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stale_frames_discarded() {
        let mut slots = LatestSlots::default();
        assert!(slots.offer(AgentId(0), 6, "six"));
        assert!(!slots.offer(AgentId(0), 5, "five"));
        assert_eq!(slots.get(AgentId(0)).unwrap().1, "six");
        assert_eq!(slots.stale(), 1);
    }
}
