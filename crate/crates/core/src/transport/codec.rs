//! Fixed little-endian framing for the agent↔cloud datagrams.
//!
//! ```text
//! 0     1        2     3         5       9          17
//! magic version type agent_id  seq     stamp_us   payload...
//! 0xA5  0x01     1..3  u16       u32     u64        f64 x 9 | f64 x 4
//! ```
//! High-level frames carry only the agent id and a one-byte code.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AgentState, ControlInput};
use crate::AgentId;

pub const MAGIC: u8 = 0xA5;
pub const VERSION: u8 = 0x01;

pub const ODOMETRY_LEN: usize = 89;
pub const COMMAND_LEN: usize = 49;
pub const HIGH_LEVEL_LEN: usize = 6;

const HEADER_LEN: usize = 3;
const TYPE_ODOMETRY: u8 = 1;
const TYPE_COMMAND: u8 = 2;
const TYPE_HIGH_LEVEL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HighLevelCode {
    TakeOff = 1,
    SafetyLand = 2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WireMessage {
    Odometry {
        agent_id: AgentId,
        seq: u32,
        stamp_us: u64,
        position: [f64; 3],
        velocity: [f64; 3],
        orientation: [f64; 3],
    },
    Command {
        agent_id: AgentId,
        seq: u32,
        stamp_us: u64,
        roll_ref: f64,
        pitch_ref: f64,
        /// Reserved; always zero since yaw is not actuated.
        yaw_ref: f64,
        thrust: f64,
    },
    HighLevel {
        agent_id: AgentId,
        code: HighLevelCode,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame shorter than header ({0} bytes)")]
    Truncated(usize),
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("type {kind} frame must be {expected} bytes, got {actual}")]
    Length { kind: u8, expected: usize, actual: usize },
    #[error("unknown high-level code {0}")]
    BadCode(u8),
}

impl WireMessage {
    pub fn odometry(agent_id: AgentId, seq: u32, stamp_us: u64, state: &AgentState) -> Self {
        WireMessage::Odometry {
            agent_id,
            seq,
            stamp_us,
            position: state.position.into(),
            velocity: state.velocity.into(),
            orientation: state.orientation.into(),
        }
    }

    pub fn command(agent_id: AgentId, seq: u32, stamp_us: u64, input: &ControlInput) -> Self {
        WireMessage::Command {
            agent_id,
            seq,
            stamp_us,
            roll_ref: input.roll_ref,
            pitch_ref: input.pitch_ref,
            yaw_ref: 0.0,
            thrust: input.thrust,
        }
    }

    pub fn agent_id(&self) -> AgentId {
        match self {
            WireMessage::Odometry { agent_id, .. }
            | WireMessage::Command { agent_id, .. }
            | WireMessage::HighLevel { agent_id, .. } => *agent_id,
        }
    }

    pub fn seq(&self) -> Option<u32> {
        match self {
            WireMessage::Odometry { seq, .. } | WireMessage::Command { seq, .. } => Some(*seq),
            WireMessage::HighLevel { .. } => None,
        }
    }

    /// State carried by an odometry frame, timestamped from its stamp.
    pub fn to_state(&self) -> Option<AgentState> {
        match self {
            WireMessage::Odometry {
                stamp_us,
                position,
                velocity,
                orientation,
                ..
            } => Some(AgentState {
                position: Vector3::from(*position),
                velocity: Vector3::from(*velocity),
                orientation: Vector3::from(*orientation),
                timestamp: *stamp_us as f64 * 1e-6,
            }),
            _ => None,
        }
    }

    pub fn to_input(&self) -> Option<ControlInput> {
        match self {
            WireMessage::Command {
                roll_ref,
                pitch_ref,
                thrust,
                ..
            } => Some(ControlInput::new(*roll_ref, *pitch_ref, *thrust)),
            _ => None,
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            WireMessage::Odometry { .. } => ODOMETRY_LEN,
            WireMessage::Command { .. } => COMMAND_LEN,
            WireMessage::HighLevel { .. } => HIGH_LEVEL_LEN,
        }
    }
}

pub fn encode(message: &WireMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(message.encoded_len());
    out.push(MAGIC);
    out.push(VERSION);
    match message {
        WireMessage::Odometry {
            agent_id,
            seq,
            stamp_us,
            position,
            velocity,
            orientation,
        } => {
            out.push(TYPE_ODOMETRY);
            out.extend_from_slice(&agent_id.0.to_le_bytes());
            out.extend_from_slice(&seq.to_le_bytes());
            out.extend_from_slice(&stamp_us.to_le_bytes());
            for v in position.iter().chain(velocity).chain(orientation) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WireMessage::Command {
            agent_id,
            seq,
            stamp_us,
            roll_ref,
            pitch_ref,
            yaw_ref,
            thrust,
        } => {
            out.push(TYPE_COMMAND);
            out.extend_from_slice(&agent_id.0.to_le_bytes());
            out.extend_from_slice(&seq.to_le_bytes());
            out.extend_from_slice(&stamp_us.to_le_bytes());
            for v in [roll_ref, pitch_ref, yaw_ref, thrust] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        WireMessage::HighLevel { agent_id, code } => {
            out.push(TYPE_HIGH_LEVEL);
            out.extend_from_slice(&agent_id.0.to_le_bytes());
            out.push(*code as u8);
        }
    }
    debug_assert_eq!(out.len(), message.encoded_len());
    out
}

/// Sequential little-endian reader over an already length-checked frame.
struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.at..self.at + N].try_into().expect("length checked");
        self.at += N;
        out
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }

    fn vec3(&mut self) -> [f64; 3] {
        [self.f64(), self.f64(), self.f64()]
    }
}

pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated(bytes.len()));
    }
    if bytes[0] != MAGIC {
        return Err(DecodeError::BadMagic(bytes[0]));
    }
    if bytes[1] != VERSION {
        return Err(DecodeError::BadVersion(bytes[1]));
    }
    let kind = bytes[2];
    let expected = match kind {
        TYPE_ODOMETRY => ODOMETRY_LEN,
        TYPE_COMMAND => COMMAND_LEN,
        TYPE_HIGH_LEVEL => HIGH_LEVEL_LEN,
        other => return Err(DecodeError::UnknownType(other)),
    };
    if bytes.len() != expected {
        return Err(DecodeError::Length {
            kind,
            expected,
            actual: bytes.len(),
        });
    }
    let mut r = Reader {
        buf: bytes,
        at: HEADER_LEN,
    };
    let agent_id = AgentId(r.u16());
    Ok(match kind {
        TYPE_ODOMETRY => WireMessage::Odometry {
            agent_id,
            seq: r.u32(),
            stamp_us: r.u64(),
            position: r.vec3(),
            velocity: r.vec3(),
            orientation: r.vec3(),
        },
        TYPE_COMMAND => WireMessage::Command {
            agent_id,
            seq: r.u32(),
            stamp_us: r.u64(),
            roll_ref: r.f64(),
            pitch_ref: r.f64(),
            yaw_ref: r.f64(),
            thrust: r.f64(),
        },
        _ => WireMessage::HighLevel {
            agent_id,
            code: match r.take::<1>()[0] {
                1 => HighLevelCode::TakeOff,
                2 => HighLevelCode::SafetyLand,
                other => return Err(DecodeError::BadCode(other)),
            },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{hover_input, ModelParams};

    #[test]
    fn odometry_frame_size_and_header() {
        let m = WireMessage::Odometry {
            agent_id: AgentId(0),
            seq: 0,
            stamp_us: 0,
            position: [0.0; 3],
            velocity: [0.0; 3],
            orientation: [0.0; 3],
        };
        let bytes = encode(&m);
        assert_eq!(bytes.len(), 89);
        assert_eq!(&bytes[..3], &[0xA5, 0x01, 0x01]);
    }

    #[test]
    fn command_layout() {
        let hover = hover_input(&ModelParams::default());
        let bytes = encode(&WireMessage::command(AgentId(7), 3, 1_000, &hover));
        assert_eq!(bytes.len(), 49);
        assert_eq!(&bytes[3..5], &[0x07, 0x00]);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.to_input().unwrap().thrust, 9.81);
    }

    #[test]
    fn high_level_layout() {
        let m = WireMessage::HighLevel {
            agent_id: AgentId(3),
            code: HighLevelCode::SafetyLand,
        };
        assert_eq!(encode(&m), vec![0xA5, 0x01, 0x03, 0x03, 0x00, 0x02]);
    }

    #[test]
    fn decode_errors() {
        let odo = encode(&WireMessage::odometry(
            AgentId(1),
            2,
            3,
            &AgentState::at_rest(Vector3::new(1.0, 2.0, 3.0)),
        ));
        assert_eq!(
            decode(&odo[..88]),
            Err(DecodeError::Length {
                kind: 1,
                expected: 89,
                actual: 88
            })
        );
        let mut bad = odo.clone();
        bad[0] = 0xFF;
        assert_eq!(decode(&bad), Err(DecodeError::BadMagic(0xFF)));
        bad = odo.clone();
        bad[1] = 2;
        assert_eq!(decode(&bad), Err(DecodeError::BadVersion(2)));
        bad = odo;
        bad[2] = 9;
        assert_eq!(decode(&bad), Err(DecodeError::UnknownType(9)));
        assert_eq!(decode(&[0xA5]), Err(DecodeError::Truncated(1)));
        assert_eq!(
            decode(&[0xA5, 0x01, 0x03, 0x00, 0x00, 0x07]),
            Err(DecodeError::BadCode(7))
        );
    }
}
