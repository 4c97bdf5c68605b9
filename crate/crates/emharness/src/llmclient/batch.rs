//! Batch execution: bounded parallelism, request rate limiting, and
//! exponential backoff on transient failures.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{ChatBackend, ClientError, CompletionRequest, CompletionResult};

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `n + 1` after `n` failed attempts: base * factor^(n-1).
    fn backoff(&self, failed_attempts: u32) -> Duration {
        let exponent = failed_attempts.saturating_sub(1) as i32;
        self.base.mul_f64(self.factor.powi(exponent))
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    /// Maximum number of in-flight requests.
    pub parallelism: usize,
    /// Upper bound on request starts per second, including retries.
    pub rate_limit_per_sec: Option<f64>,
    pub retry: RetryPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            parallelism: 1,
            rate_limit_per_sec: None,
            retry: RetryPolicy::default(),
        }
    }
}

struct RateLimiter {
    min_interval: Duration,
    next_start: Mutex<Instant>,
}

impl RateLimiter {
    fn new(rate_per_sec: Option<f64>) -> Option<Self> {
        let rate = rate_per_sec?;
        if rate <= 0.0 {
            return None;
        }
        Some(RateLimiter {
            min_interval: Duration::from_secs_f64(1.0 / rate),
            next_start: Mutex::new(Instant::now()),
        })
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next_start.lock().unwrap();
            let now = Instant::now();
            let start_at = (*next).max(now);
            *next = start_at + self.min_interval;
            start_at.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

fn complete_with_retry(
    backend: &dyn ChatBackend,
    request: &CompletionRequest,
    retry: &RetryPolicy,
    limiter: Option<&RateLimiter>,
) -> Result<CompletionResult, ClientError> {
    let max_attempts = retry.max_attempts.max(1);
    let mut attempt = 0u32;
    loop {
        if let Some(limiter) = limiter {
            limiter.acquire();
        }
        attempt += 1;
        match backend.complete(request) {
            Ok(result) => return Ok(result),
            Err(err) if err.is_transient() && attempt < max_attempts => {
                std::thread::sleep(retry.backoff(attempt));
            }
            Err(err) => return Err(err),
        }
    }
}

/// Run every request and return one result per slot in input order.
///
/// Failures stay in their slot instead of aborting the batch; transient
/// failures (rate limits, server errors, transport) are retried with
/// exponential backoff before giving up. At most `parallelism` requests are
/// in flight at once.
pub fn run_batch(
    backend: &dyn ChatBackend,
    requests: &[CompletionRequest],
    options: &BatchOptions,
) -> Vec<Result<CompletionResult, ClientError>> {
    if requests.is_empty() {
        return Vec::new();
    }
    let limiter = RateLimiter::new(options.rate_limit_per_sec);
    let workers = options.parallelism.max(1).min(requests.len());
    if workers == 1 {
        return requests
            .iter()
            .map(|r| complete_with_retry(backend, r, &options.retry, limiter.as_ref()))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<CompletionResult, ClientError>>>> =
        requests.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= requests.len() {
                    break;
                }
                let result =
                    complete_with_retry(backend, &requests[i], &options.retry, limiter.as_ref());
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::{ScriptEntry, ScriptedBackend, TokenUsage};
    use crate::promptkit::{Message, RenderedConversation};
    use std::sync::atomic::AtomicI64;

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest::new(
            "toy-model",
            RenderedConversation::new(vec![Message::user(prompt)]),
        )
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            base: Duration::from_millis(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }

    #[test]
    fn results_come_back_in_input_order() {
        let backend = ScriptedBackend::new("scripted")
            .with_entry(ScriptEntry::substring("0", "r0").with_delay(Duration::from_millis(20)))
            .with_entry(ScriptEntry::substring("1", "r1"))
            .with_entry(ScriptEntry::substring("2", "r2").with_delay(Duration::from_millis(10)))
            .with_entry(ScriptEntry::substring("3", "r3"));
        let requests: Vec<CompletionRequest> =
            (0..4).map(|i| request(&format!("prompt {i}"))).collect();
        let options = BatchOptions {
            parallelism: 4,
            ..BatchOptions::default()
        };
        let results = run_batch(&backend, &requests, &options);
        let texts: Vec<&str> = results
            .iter()
            .map(|r| r.as_ref().unwrap().text.as_str())
            .collect();
        assert_eq!(texts, ["r0", "r1", "r2", "r3"]);
    }

    #[test]
    fn per_slot_failures_do_not_abort_the_batch() {
        let backend = ScriptedBackend::new("scripted")
            .with_entry(ScriptEntry::failing("poison", "boom", false))
            .with_fallback("ok");
        let requests = vec![request("fine"), request("poison pill"), request("fine too")];
        let results = run_batch(&backend, &requests, &BatchOptions::default());
        assert!(results[0].is_ok());
        assert!(matches!(
            results[1],
            Err(ClientError::Scripted { transient: false, .. })
        ));
        assert!(results[2].is_ok());
    }

    struct FlakyBackend {
        failures_left: AtomicI64,
        attempts: AtomicUsize,
        error: fn() -> ClientError,
    }

    impl ChatBackend for FlakyBackend {
        fn id(&self) -> &str {
            "flaky"
        }

        fn complete(&self, _request: &CompletionRequest) -> Result<CompletionResult, ClientError> {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            if self.failures_left.fetch_sub(1, Ordering::SeqCst) > 0 {
                return Err((self.error)());
            }
            Ok(CompletionResult {
                text: "Yes.".into(),
                usage: TokenUsage::new(1, 1),
                latency_secs: 0.0,
                backend: "flaky".into(),
                cached: false,
            })
        }
    }

    #[test]
    fn transient_failures_are_retried_until_success() {
        let backend = FlakyBackend {
            failures_left: AtomicI64::new(2),
            attempts: AtomicUsize::new(0),
            error: || ClientError::RateLimited,
        };
        let options = BatchOptions {
            retry: fast_retry(),
            ..BatchOptions::default()
        };
        let results = run_batch(&backend, &[request("x")], &options);
        assert!(results[0].is_ok());
        assert_eq!(backend.attempts.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_stop_at_max_attempts() {
        let backend = FlakyBackend {
            failures_left: AtomicI64::new(i64::MAX),
            attempts: AtomicUsize::new(0),
            error: || ClientError::Server {
                status: 503,
                message: "down".into(),
            },
        };
        let options = BatchOptions {
            retry: fast_retry(),
            ..BatchOptions::default()
        };
        let results = run_batch(&backend, &[request("x")], &options);
        assert!(matches!(results[0], Err(ClientError::Server { .. })));
        assert_eq!(backend.attempts.load(Ordering::SeqCst), 5);
    }

    #[test]
    fn permanent_failures_are_not_retried() {
        let backend = FlakyBackend {
            failures_left: AtomicI64::new(i64::MAX),
            attempts: AtomicUsize::new(0),
            error: || ClientError::Auth { status: 401 },
        };
        let options = BatchOptions {
            retry: fast_retry(),
            ..BatchOptions::default()
        };
        let results = run_batch(&backend, &[request("x")], &options);
        assert!(matches!(results[0], Err(ClientError::Auth { status: 401 })));
        assert_eq!(backend.attempts.load(Ordering::SeqCst), 1);
    }

    struct ConcurrencyProbe {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for ConcurrencyProbe {
        fn id(&self) -> &str {
            "probe"
        }

        fn complete(&self, _request: &CompletionRequest) -> Result<CompletionResult, ClientError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(10));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(CompletionResult {
                text: "Yes.".into(),
                usage: TokenUsage::new(1, 1),
                latency_secs: 0.01,
                backend: "probe".into(),
                cached: false,
            })
        }
    }

    #[test]
    fn parallelism_bounds_in_flight_requests() {
        let backend = ConcurrencyProbe {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        };
        let requests: Vec<CompletionRequest> =
            (0..12).map(|i| request(&format!("p{i}"))).collect();
        let options = BatchOptions {
            parallelism: 3,
            ..BatchOptions::default()
        };
        let results = run_batch(&backend, &requests, &options);
        assert!(results.iter().all(Result::is_ok));
        let peak = backend.peak.load(Ordering::SeqCst);
        assert!(peak <= 3, "peak concurrency {peak} exceeded the cap");
        assert!(peak >= 2, "workers never ran concurrently");
    }

    #[test]
    fn rate_limit_spaces_out_request_starts() {
        let backend = ScriptedBackend::new("scripted").with_fallback("ok");
        let requests: Vec<CompletionRequest> =
            (0..4).map(|i| request(&format!("p{i}"))).collect();
        let options = BatchOptions {
            parallelism: 4,
            rate_limit_per_sec: Some(50.0),
            ..BatchOptions::default()
        };
        let started = Instant::now();
        let results = run_batch(&backend, &requests, &options);
        assert!(results.iter().all(Result::is_ok));
        // Four starts at 50/sec: the last one cannot begin before 60ms.
        assert!(started.elapsed() >= Duration::from_millis(55));
    }

    #[test]
    fn serial_batches_accumulate_scripted_latency() {
        let backend = ScriptedBackend::new("scripted").with_entry(
            ScriptEntry::substring("p", "ok").with_delay(Duration::from_millis(15)),
        );
        let requests: Vec<CompletionRequest> =
            (0..3).map(|i| request(&format!("p{i}"))).collect();
        let started = Instant::now();
        let results = run_batch(&backend, &requests, &BatchOptions::default());
        let wall = started.elapsed().as_secs_f64();
        let summed: f64 = results
            .iter()
            .map(|r| r.as_ref().unwrap().latency_secs)
            .sum();
        assert!(wall >= summed * 0.9);
    }
}
