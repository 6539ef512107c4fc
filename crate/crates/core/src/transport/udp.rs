//! Real-time datagram mode: one receive thread per socket feeding a single
//! owner of the latest-state slots, plus a delay-injecting forwarder.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io;
use std::net::{IpAddr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::codec::{decode, encode, WireMessage};
use super::tunnel::LatestSlots;

const POLL: Duration = Duration::from_millis(10);
const MAX_DATAGRAM: usize = 512;

#[derive(Debug, Clone)]
pub struct Inbound {
    pub port: u16,
    pub message: WireMessage,
    pub received: Instant,
}

fn spawn_receiver(
    socket: UdpSocket,
    tx: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    decode_errors: Arc<AtomicU64>,
) -> io::Result<JoinHandle<()>> {
    socket.set_read_timeout(Some(POLL))?;
    let port = socket.local_addr()?.port();
    Ok(thread::spawn(move || {
        let mut buf = [0u8; MAX_DATAGRAM];
        while !stop.load(Ordering::Relaxed) {
            let n = match socket.recv(&mut buf) {
                Ok(n) => n,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
                Err(_) => break,
            };
            match decode(&buf[..n]) {
                Ok(message) => {
                    let inbound = Inbound {
                        port,
                        message,
                        received: Instant::now(),
                    };
                    if tx.send(inbound).is_err() {
                        break;
                    }
                }
                Err(_) => {
                    decode_errors.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    }))
}

/// Receive side of the proxy. Frames are owned by this value only; the
/// receive threads hand them over through a channel.
pub struct ReceiverSet {
    stop: Arc<AtomicBool>,
    handles: Vec<JoinHandle<()>>,
    rx: Receiver<Inbound>,
    ports: Vec<u16>,
    slots: LatestSlots<Inbound>,
    decode_errors: Arc<AtomicU64>,
}

impl ReceiverSet {
    /// Binds one socket per port; port 0 picks an ephemeral port.
    pub fn bind(addr: IpAddr, ports: &[u16]) -> io::Result<Self> {
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let decode_errors = Arc::new(AtomicU64::new(0));
        let mut handles = Vec::with_capacity(ports.len());
        let mut bound = Vec::with_capacity(ports.len());
        for &port in ports {
            let socket = UdpSocket::bind(SocketAddr::new(addr, port))?;
            bound.push(socket.local_addr()?.port());
            handles.push(spawn_receiver(socket, tx.clone(), stop.clone(), decode_errors.clone())?);
        }
        Ok(ReceiverSet {
            stop,
            handles,
            rx,
            ports: bound,
            slots: LatestSlots::default(),
            decode_errors,
        })
    }

    pub fn ports(&self) -> &[u16] {
        &self.ports
    }

    /// Moves queued frames into the slots; returns how many were accepted.
    pub fn drain(&mut self) -> usize {
        let mut accepted = 0;
        while let Ok(inbound) = self.rx.try_recv() {
            if self.offer(inbound) {
                accepted += 1;
            }
        }
        accepted
    }

    /// Blocks up to `timeout` for one frame, then drains the rest.
    pub fn wait(&mut self, timeout: Duration) -> usize {
        match self.rx.recv_timeout(timeout) {
            Ok(inbound) => usize::from(self.offer(inbound)) + self.drain(),
            Err(_) => 0,
        }
    }

    fn offer(&mut self, inbound: Inbound) -> bool {
        let agent = inbound.message.agent_id();
        let seq = inbound.message.seq().unwrap_or(u32::MAX);
        self.slots.offer(agent, seq, inbound)
    }

    pub fn slots(&self) -> &LatestSlots<Inbound> {
        &self.slots
    }

    pub fn decode_errors(&self) -> u64 {
        self.decode_errors.load(Ordering::Relaxed)
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for ReceiverSet {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

pub struct UdpSender {
    socket: UdpSocket,
}

impl UdpSender {
    pub fn bind(addr: IpAddr) -> io::Result<Self> {
        Ok(UdpSender {
            socket: UdpSocket::bind(SocketAddr::new(addr, 0))?,
        })
    }

    pub fn send(&self, message: &WireMessage, to: SocketAddr) -> io::Result<usize> {
        self.socket.send_to(&encode(message), to)
    }
}

/// Forwards every datagram received on `listen` to `target` after `delay`.
pub struct DelayProxy {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    local: SocketAddr,
}

impl DelayProxy {
    pub fn spawn(listen: SocketAddr, target: SocketAddr, delay: Duration) -> io::Result<Self> {
        let socket = UdpSocket::bind(listen)?;
        socket.set_read_timeout(Some(POLL))?;
        let local = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            let mut pending: BinaryHeap<Reverse<(Instant, u64, Vec<u8>)>> = BinaryHeap::new();
            let mut counter = 0u64;
            let mut buf = [0u8; MAX_DATAGRAM];
            while !flag.load(Ordering::Relaxed) {
                let timeout = pending
                    .peek()
                    .map(|Reverse((due, _, _))| due.saturating_duration_since(Instant::now()).min(POLL))
                    .unwrap_or(POLL)
                    .max(Duration::from_micros(100));
                let _ = socket.set_read_timeout(Some(timeout));
                match socket.recv(&mut buf) {
                    Ok(n) => {
                        pending.push(Reverse((Instant::now() + delay, counter, buf[..n].to_vec())));
                        counter += 1;
                    }
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    Err(_) => break,
                }
                let now = Instant::now();
                while pending.peek().is_some_and(|Reverse((due, _, _))| *due <= now) {
                    let Reverse((_, _, frame)) = pending.pop().expect("peeked");
                    let _ = socket.send_to(&frame, target);
                }
            }
        });
        Ok(DelayProxy {
            stop,
            handle: Some(handle),
            local,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }
}

impl Drop for DelayProxy {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;

    use super::*;
    use crate::dynamics::AgentState;
    use crate::AgentId;

    const LOCAL: IpAddr = IpAddr::V4(Ipv4Addr::LOCALHOST);

    fn odom(seq: u32) -> WireMessage {
        WireMessage::odometry(AgentId(2), seq, seq as u64, &AgentState::at_rest(nalgebra::Vector3::zeros()))
    }

    #[test]
    fn delayed_roundtrip_keeps_latest() {
        let mut rx = ReceiverSet::bind(LOCAL, &[0]).unwrap();
        let target = SocketAddr::new(LOCAL, rx.ports()[0]);
        let proxy = DelayProxy::spawn(SocketAddr::new(LOCAL, 0), target, Duration::from_millis(20)).unwrap();
        let tx = UdpSender::bind(LOCAL).unwrap();
        let start = Instant::now();
        tx.send(&odom(6), proxy.local_addr()).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while rx.slots().is_empty() && Instant::now() < deadline {
            rx.wait(Duration::from_millis(50));
        }
        let (seq, inbound) = rx.slots().get(AgentId(2)).expect("frame arrived");
        assert_eq!(*seq, 6);
        assert!(inbound.received - start >= Duration::from_millis(20));

        tx.send(&odom(5), target).unwrap();
        tx.send(&odom(7), target).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while rx.slots().get(AgentId(2)).unwrap().0 != 7 && Instant::now() < deadline {
            rx.wait(Duration::from_millis(50));
        }
        assert_eq!(rx.slots().get(AgentId(2)).unwrap().0, 7);
        assert_eq!(rx.slots().stale(), 1);
        rx.shutdown();
    }

    #[test]
    fn garbage_counted() {
        let rx = ReceiverSet::bind(LOCAL, &[0]).unwrap();
        let sock = UdpSocket::bind(SocketAddr::new(LOCAL, 0)).unwrap();
        sock.send_to(&[1, 2, 3, 4], SocketAddr::new(LOCAL, rx.ports()[0])).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while rx.decode_errors() == 0 && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        assert_eq!(rx.decode_errors(), 1);
    }
}
