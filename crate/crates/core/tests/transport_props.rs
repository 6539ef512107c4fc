use cloudmpc::dynamics::{AgentState, ControlInput};
use cloudmpc::transport::{
    decode, encode, to_micros, DelayModel, Direction, HighLevelCode, LatestSlots, RouteTable, VirtualTunnel,
    WireMessage,
};
use cloudmpc::AgentId;
use nalgebra::Vector3;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -1e6f64..1e6
}

fn message() -> impl Strategy<Value = WireMessage> {
    let id = any::<u16>().prop_map(AgentId);
    prop_oneof![
        (id.clone(), any::<u32>(), 0u64..u64::MAX / 2, [finite(), finite(), finite()], [finite(), finite(), finite()])
            .prop_map(|(a, seq, stamp, p, v)| {
                let mut s = AgentState::at_rest(Vector3::from(p));
                s.velocity = Vector3::from(v);
                WireMessage::odometry(a, seq, stamp, &s)
            }),
        (id.clone(), any::<u32>(), 0u64..u64::MAX / 2, finite(), finite(), finite())
            .prop_map(|(a, seq, stamp, r, p, t)| WireMessage::command(a, seq, stamp, &ControlInput::new(r, p, t))),
        (id, any::<bool>()).prop_map(|(a, takeoff)| WireMessage::HighLevel {
            agent_id: a,
            code: if takeoff { HighLevelCode::TakeOff } else { HighLevelCode::SafetyLand },
        }),
    ]
}

fn routes(n: u16) -> RouteTable {
    RouteTable::for_agents((0..n).map(AgentId), 15000)
}

fn traffic(n: usize) -> Vec<(WireMessage, u64)> {
    (0..n)
        .map(|i| {
            let m = WireMessage::command(AgentId((i % 4) as u16), i as u32, 0, &ControlInput::new(0.0, 0.0, 9.81));
            (m, i as u64 * 1000)
        })
        .collect()
}

proptest! {
    #[test]
    fn codec_round_trips(m in message()) {
        let frame = encode(&m);
        prop_assert_eq!(frame.len(), m.encoded_len());
        prop_assert_eq!(decode(&frame).unwrap(), m);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..128)) {
        if let Ok(m) = decode(&bytes) {
            prop_assert_eq!(encode(&m), bytes);
        }
    }

    #[test]
    fn constant_delay_is_exact(up in 0.0f64..0.3, down in 0.0f64..0.3, sends in proptest::collection::vec(0u64..1_000_000, 1..40)) {
        let mut tunnel = VirtualTunnel::new(DelayModel::constant(up, down), routes(4)).unwrap();
        for (i, &t) in sends.iter().enumerate() {
            let dir = if i % 2 == 0 { Direction::Uplink } else { Direction::Downlink };
            let m = WireMessage::HighLevel { agent_id: AgentId((i % 4) as u16), code: HighLevelCode::TakeOff };
            tunnel.send(&m, dir, t);
        }
        let delivered = tunnel.deliver_due(u64::MAX);
        prop_assert_eq!(delivered.len(), sends.len());
        for d in &delivered {
            let expected = match d.direction {
                Direction::Uplink => to_micros(up),
                Direction::Downlink => to_micros(down),
            };
            prop_assert_eq!(d.at_us - d.sent_us, expected);
        }
        prop_assert!(delivered.windows(2).all(|w| w[0].at_us <= w[1].at_us));
    }

    #[test]
    fn same_seed_same_delivery(seed in any::<u64>(), drop in 0.0f64..0.5, jitter in 0.0f64..0.02) {
        let model = DelayModel {
            uplink: 0.02,
            uplink_jitter: jitter,
            downlink: 0.03,
            downlink_jitter: jitter,
            drop_probability: drop,
            seed,
        };
        let run = || {
            let mut tunnel = VirtualTunnel::new(model.clone(), routes(4)).unwrap();
            let fates: Vec<Option<u64>> = traffic(60).iter().map(|(m, t)| tunnel.send(m, Direction::Downlink, *t)).collect();
            let order: Vec<(u64, Vec<u8>)> = tunnel.deliver_due(u64::MAX).into_iter().map(|d| (d.at_us, d.frame)).collect();
            (fates, order, tunnel.stats())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn accepted_seq_never_decreases(seqs in proptest::collection::vec(any::<u32>(), 1..100)) {
        let mut slots = LatestSlots::default();
        let mut high: Option<u32> = None;
        let mut stale = 0;
        for &s in &seqs {
            let accepted = slots.offer(AgentId(0), s, ());
            prop_assert_eq!(accepted, high.is_none_or(|h| s > h));
            if accepted {
                high = Some(s);
            } else {
                stale += 1;
            }
            prop_assert_eq!(slots.get(AgentId(0)).map(|(q, _)| *q), high);
        }
        prop_assert_eq!(slots.stale(), stale);
    }
}

#[test]
fn unknown_agent_uses_shared_port_with_warning() {
    let mut tunnel = VirtualTunnel::new(DelayModel::constant(0.0, 0.0), routes(2)).unwrap();
    let m = WireMessage::HighLevel { agent_id: AgentId(9), code: HighLevelCode::SafetyLand };
    assert!(tunnel.send(&m, Direction::Downlink, 0).is_some());
    let d = tunnel.deliver_due(0);
    assert_eq!(d[0].port, routes(2).shared_port());
    assert_eq!(tunnel.stats().unrouted, 1);
    assert_eq!(tunnel.take_warnings().len(), 1);
}

#[test]
fn invalid_delay_model_is_rejected() {
    let mut model = DelayModel::constant(0.01, 0.01);
    model.drop_probability = 1.5;
    assert!(VirtualTunnel::new(model, routes(1)).is_err());
    assert!(VirtualTunnel::new(DelayModel::constant(-0.1, 0.0), routes(1)).is_err());
}
