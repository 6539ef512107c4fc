//! Agent/cloud tunnel: wire codec, virtual and real-time delivery, round-trip accounting.

pub mod codec;
pub mod routes;
pub mod rtt;
pub mod tunnel;
pub mod udp;

pub use codec::{decode, encode, DecodeError, HighLevelCode, WireMessage};
pub use routes::{RouteTable, TransportEnv};
pub use rtt::{Deadline, RttMeans, RttSample, RttTracker};
pub use tunnel::{to_micros, to_seconds, DelayModel, Delivery, Direction, LatestSlots, TunnelStats, VirtualTunnel};
