use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW: usize = 50;
pub const DEFAULT_TAU_MAX: f64 = 0.1;

/// One closed-loop cycle: uplink, downlink and processing time, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RttSample {
    pub uplink: f64,
    pub downlink: f64,
    pub processing: f64,
}

impl RttSample {
    pub fn rtt(&self) -> f64 {
        self.uplink + self.downlink + self.processing
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RttMeans {
    pub uplink: f64,
    pub downlink: f64,
    pub processing: f64,
    pub rtt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Deadline {
    Ok,
    Violation { observed: f64, tau_max: f64 },
}

impl Deadline {
    pub fn is_violation(&self) -> bool {
        matches!(self, Deadline::Violation { .. })
    }
}

/// Sliding-window round-trip accounting against a latency bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RttTracker {
    window: VecDeque<RttSample>,
    window_length: usize,
    tau_max: f64,
    /// Check raw samples instead of the windowed mean.
    strict: bool,
}

impl Default for RttTracker {
    fn default() -> Self {
        RttTracker::new(DEFAULT_WINDOW, DEFAULT_TAU_MAX)
    }
}

impl RttTracker {
    pub fn new(window_length: usize, tau_max: f64) -> Self {
        let window_length = window_length.max(1);
        RttTracker {
            window: VecDeque::with_capacity(window_length),
            window_length,
            tau_max,
            strict: false,
        }
    }

    pub fn strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn record_cycle(&mut self, uplink: f64, downlink: f64, processing: f64) -> Result<()> {
        if !(uplink >= 0.0 && downlink >= 0.0 && processing >= 0.0) {
            return Err(Error::contract("rtt components must be non-negative"));
        }
        if self.window.len() == self.window_length {
            self.window.pop_front();
        }
        self.window.push_back(RttSample {
            uplink,
            downlink,
            processing,
        });
        Ok(())
    }

    pub fn latest(&self) -> Option<RttSample> {
        self.window.back().copied()
    }

    /// Means over the window; zeros when empty.
    pub fn means(&self) -> RttMeans {
        if self.window.is_empty() {
            return RttMeans::default();
        }
        let n = self.window.len() as f64;
        let mut m = RttMeans::default();
        for s in &self.window {
            m.uplink += s.uplink;
            m.downlink += s.downlink;
            m.processing += s.processing;
            m.rtt += s.rtt();
        }
        m.uplink /= n;
        m.downlink /= n;
        m.processing /= n;
        m.rtt /= n;
        m
    }

    /// `Violation` iff the windowed mean round trip exceeds `tau_max`
    /// (strict mode: iff any sample in the window does). Empty windows are `Ok`.
    pub fn check_deadline(&self) -> Deadline {
        if self.window.is_empty() {
            return Deadline::Ok;
        }
        let observed = if self.strict {
            self.window.iter().map(RttSample::rtt).fold(0.0, f64::max)
        } else {
            self.means().rtt
        };
        if observed > self.tau_max {
            Deadline::Violation {
                observed,
                tau_max: self.tau_max,
            }
        } else {
            Deadline::Ok
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_components() {
        for w in [1, 3, 50] {
            let mut t = RttTracker::new(w, 0.1);
            for _ in 0..120 {
                t.record_cycle(0.02, 0.03, 0.01).unwrap();
            }
            assert!((t.means().rtt - 0.06).abs() < 1e-15);
            assert!(t.len() <= w);
        }
    }

    #[test]
    fn two_sample_window() {
        let mut t = RttTracker::new(2, 1.0);
        t.record_cycle(0.1, 0.0, 0.0).unwrap();
        t.record_cycle(0.2, 0.0, 0.0).unwrap();
        assert!((t.means().rtt - 0.15).abs() < 1e-15);
    }

    #[test]
    fn alternating_processing_time() {
        let mut t = RttTracker::new(50, 1.0);
        for k in 0..200 {
            t.record_cycle(0.0, 0.0, if k % 2 == 0 { 0.01 } else { 0.03 }).unwrap();
        }
        assert!((t.means().processing - 0.02).abs() < 1e-12);
    }

    #[test]
    fn deadline_is_non_strict_inequality() {
        let mut t = RttTracker::new(4, 0.1);
        assert_eq!(t.check_deadline(), Deadline::Ok);
        t.record_cycle(0.05, 0.05, 0.0).unwrap();
        assert_eq!(t.means().rtt, 0.1);
        assert_eq!(t.check_deadline(), Deadline::Ok);
        let mut t = RttTracker::new(4, 0.1);
        t.record_cycle(0.1, 0.05, 0.0).unwrap();
        assert!(t.check_deadline().is_violation());
    }

    #[test]
    fn single_spike_tolerated_by_mean_not_strict() {
        let mut t = RttTracker::new(10, 0.1);
        for k in 0..10 {
            let p = if k == 5 { 0.3 } else { 0.01 };
            t.record_cycle(0.02, 0.02, p).unwrap();
        }
        assert_eq!(t.check_deadline(), Deadline::Ok);
        assert!(t.clone().strict(true).check_deadline().is_violation());
    }

    #[test]
    fn rejects_negative_component() {
        assert!(RttTracker::default().record_cycle(-0.1, 0.0, 0.0).is_err());
    }
}
