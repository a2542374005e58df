use std::sync::Mutex;
use std::time::Duration;

use tokio::time::Instant;

/// Spaces grants evenly at `1 / rate` intervals. An idle limiter does not
/// bank unused grants, so the burst is a single request and any one-second
/// window sees at most `floor(rate) + 1` grants.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// # Panics
    /// If `per_second` is not a positive finite number.
    pub fn new(per_second: f64) -> Self {
        assert!(
            per_second.is_finite() && per_second > 0.0,
            "rate must be positive, got {per_second}"
        );
        Self {
            interval: Duration::from_secs_f64(1.0 / per_second),
            next_slot: Mutex::new(None),
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Waits for the next free slot.
    pub async fn acquire(&self) {
        let slot = {
            let mut next = self.next_slot.lock().expect("limiter lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        tokio::time::sleep_until(slot).await;
    }
}
