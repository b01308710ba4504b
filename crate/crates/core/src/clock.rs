//! Session-local monotonic clocks.
//!
//! All timestamps in the system are milliseconds since the owning session's
//! clock was created. Simulations use [`VirtualClock`], which advances
//! instantly; the live service uses [`RealClock`], which sleeps.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Milliseconds since the clock's origin. Never decreases.
    fn now_ms(&self) -> u64;

    /// Block (or, for virtual time, jump) until `ms` have elapsed.
    fn sleep_ms(&self, ms: u64);

    /// Wait until the clock reads at least `deadline_ms`.
    fn sleep_until_ms(&self, deadline_ms: u64) {
        let now = self.now_ms();
        if deadline_ms > now {
            self.sleep_ms(deadline_ms - now);
        }
    }

    /// True when `sleep_ms` does not consume wall time.
    fn is_virtual(&self) -> bool;
}

/// A clock that only moves when told to.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, ms: u64) {
        self.now.fetch_add(ms, Ordering::AcqRel);
    }

    /// Move forward to `ms` if it is in the future; never moves backwards.
    pub fn advance_to(&self, ms: u64) {
        self.now.fetch_max(ms, Ordering::AcqRel);
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::Acquire)
    }

    fn sleep_ms(&self, ms: u64) {
        self.advance(ms);
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

/// Wall-clock time measured from construction with a monotonic `Instant`.
#[derive(Debug, Clone)]
pub struct RealClock {
    origin: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }

    fn sleep_ms(&self, ms: u64) {
        std::thread::sleep(Duration::from_millis(ms));
    }

    fn sleep_until_ms(&self, deadline_ms: u64) {
        let deadline = self.origin + Duration::from_millis(deadline_ms);
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }

    fn is_virtual(&self) -> bool {
        false
    }
}
