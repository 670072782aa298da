//! Bounded in-flight requests plus token-bucket rate limiting.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{BackendError, EmbedBackend, RetryPolicy, TextBackend, VisionBackend};

#[derive(Debug)]
struct State {
    in_flight: usize,
    tokens: f64,
    last_refill: Instant,
}

#[derive(Debug)]
pub struct Throttle {
    max_in_flight: usize,
    /// Tokens per second; `None` disables rate limiting.
    rate: Option<f64>,
    burst: f64,
    state: Mutex<State>,
    slot_freed: Condvar,
}

/// Held for the duration of one request.
pub struct Permit<'a> {
    throttle: &'a Throttle,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.throttle.state.lock().unwrap();
        s.in_flight -= 1;
        self.throttle.slot_freed.notify_one();
    }
}

impl Throttle {
    pub fn new(max_in_flight: usize, rate_per_sec: Option<f64>) -> Self {
        let burst = max_in_flight.max(1) as f64;
        Throttle {
            max_in_flight: max_in_flight.max(1),
            rate: rate_per_sec.filter(|r| *r > 0.0),
            burst,
            state: Mutex::new(State {
                in_flight: 0,
                tokens: burst,
                last_refill: Instant::now(),
            }),
            slot_freed: Condvar::new(),
        }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap().in_flight
    }

    pub fn acquire(&self) -> Permit<'_> {
        loop {
            let mut s = self.state.lock().unwrap();
            while s.in_flight >= self.max_in_flight {
                s = self.slot_freed.wait(s).unwrap();
            }
            let wait = match self.rate {
                None => Duration::ZERO,
                Some(rate) => {
                    let now = Instant::now();
                    let elapsed = now.duration_since(s.last_refill).as_secs_f64();
                    s.tokens = (s.tokens + elapsed * rate).min(self.burst);
                    s.last_refill = now;
                    if s.tokens >= 1.0 {
                        s.tokens -= 1.0;
                        Duration::ZERO
                    } else {
                        Duration::from_secs_f64((1.0 - s.tokens) / rate)
                    }
                }
            };
            if wait.is_zero() {
                s.in_flight += 1;
                return Permit { throttle: self };
            }
            drop(s);
            thread::sleep(wait);
        }
    }
}

/// A backend whose calls pass through a shared [`Throttle`].
pub struct Throttled<B> {
    inner: B,
    throttle: Arc<Throttle>,
    calls: Option<Arc<AtomicU64>>,
}

impl<B> Throttled<B> {
    pub fn new(inner: B, throttle: Arc<Throttle>) -> Self {
        Throttled {
            inner,
            throttle,
            calls: None,
        }
    }

    /// Also count every call into `calls`.
    pub fn counted(mut self, calls: Arc<AtomicU64>) -> Self {
        self.calls = Some(calls);
        self
    }

    fn enter(&self) -> Permit<'_> {
        if let Some(c) = &self.calls {
            c.fetch_add(1, Ordering::Relaxed);
        }
        self.throttle.acquire()
    }
}

impl<B: VisionBackend> VisionBackend for Throttled<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn describe(&self, image: &[u8], prompt: &str) -> Result<String, BackendError> {
        let _permit = self.enter();
        self.inner.describe(image, prompt)
    }
    fn retry_policy(&self) -> RetryPolicy {
        self.inner.retry_policy()
    }
}

impl<B: TextBackend> TextBackend for Throttled<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn generate(&self, prompt: &str) -> Result<String, BackendError> {
        let _permit = self.enter();
        self.inner.generate(prompt)
    }
    fn retry_policy(&self) -> RetryPolicy {
        self.inner.retry_policy()
    }
}

impl<B: EmbedBackend> EmbedBackend for Throttled<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let _permit = self.enter();
        self.inner.embed(text)
    }
    fn retry_policy(&self) -> RetryPolicy {
        self.inner.retry_policy()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn bounds_concurrency() {
        let t = Arc::new(Throttle::new(2, None));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let t = Arc::clone(&t);
                let peak = Arc::clone(&peak);
                thread::spawn(move || {
                    let _p = t.acquire();
                    peak.fetch_max(t.in_flight(), Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(10));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(t.in_flight(), 0);
    }

    #[test]
    fn rate_limits_after_burst() {
        let t = Throttle::new(1, Some(50.0));
        let start = Instant::now();
        for _ in 0..4 {
            drop(t.acquire());
        }
        // 1 burst token, then 3 more at 50/s -> at least ~60 ms.
        assert!(start.elapsed() >= Duration::from_millis(50), "{:?}", start.elapsed());
    }
}
