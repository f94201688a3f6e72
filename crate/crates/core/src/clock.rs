//! Injectable time sources.
//!
//! Pollers stamp snapshots and the feed simulator evaluates its script
//! through a [`Clock`], so an end-to-end run can be compressed (a 30 s poll
//! interval lasting 50 ms of real time) without touching any logic.

use std::sync::atomic::{AtomicI64, Ordering};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::model::EpochSecs;

pub trait Clock: Send + Sync {
    /// Current time in epoch seconds.
    fn now(&self) -> EpochSecs;

    /// Real time that corresponds to `secs` seconds on this clock.
    fn real_duration(&self, secs: f64) -> Duration {
        Duration::from_secs_f64(secs.max(0.0))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> EpochSecs {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs() as EpochSecs)
            .unwrap_or(0)
    }
}

/// Runs `speedup` times faster than real time, starting at `origin`.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    origin: EpochSecs,
    speedup: f64,
    started: Instant,
}

impl ScaledClock {
    pub fn new(origin: EpochSecs, speedup: f64) -> Self {
        assert!(speedup > 0.0 && speedup.is_finite(), "speedup must be positive");
        Self {
            origin,
            speedup,
            started: Instant::now(),
        }
    }

    pub fn speedup(&self) -> f64 {
        self.speedup
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> EpochSecs {
        let elapsed = self.started.elapsed().as_secs_f64() * self.speedup;
        self.origin + elapsed.round() as EpochSecs
    }

    fn real_duration(&self, secs: f64) -> Duration {
        Duration::from_secs_f64((secs / self.speedup).max(0.0))
    }
}

/// Only moves when told to. Used for lockstep replay.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(start: EpochSecs) -> Self {
        Self(AtomicI64::new(start))
    }

    pub fn set(&self, t: EpochSecs) {
        self.0.store(t, Ordering::SeqCst);
    }

    pub fn advance(&self, secs: i64) -> EpochSecs {
        self.0.fetch_add(secs, Ordering::SeqCst) + secs
    }
}

impl Clock for ManualClock {
    fn now(&self) -> EpochSecs {
        self.0.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_clock_compresses_time() {
        let c = ScaledClock::new(1_000, 600.0);
        assert_eq!(c.real_duration(30.0), Duration::from_millis(50));
        assert!(c.now() >= 1_000);
    }

    #[test]
    fn manual_clock_moves_on_demand() {
        let c = ManualClock::new(10);
        assert_eq!(c.now(), 10);
        assert_eq!(c.advance(30), 40);
        c.set(5);
        assert_eq!(c.now(), 5);
    }
}
