//! Pluggable model backends.
//!
//! Three roles: a vision-language model that turns an image plus prompt into
//! text, a text generator, and a sentence embedder. Each role is a trait with
//! an HTTP implementation and deterministic mocks. A single call to a trait
//! method is one request; retrying is the caller's job via [`RetryPolicy`].

use std::fmt;
use std::thread;
use std::time::Duration;

use thiserror::Error;

pub mod http;
pub mod mock;
pub mod throttle;

pub use http::{HttpEmbedBackend, HttpTextBackend, HttpVisionBackend};
pub use mock::{HashEmbedder, MockTextBackend, MockVisionBackend, ScriptedText, ScriptedVision};
pub use throttle::{Throttle, Throttled};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    /// The server answered but the payload breaks the wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => {
                matches!(status, 408 | 429 | 500 | 502 | 503 | 504)
            }
            BackendError::Protocol(_) | BackendError::Exhausted { .. } => false,
        }
    }
}

/// Exponential backoff. `max_attempts` counts every call, including the first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for mocks and tests.
    pub fn immediate(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Run `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if !e.is_retryable() => return Err(e),
                Err(e) => {
                    attempt += 1;
                    if attempt >= max {
                        return Err(BackendError::Exhausted {
                            attempts: attempt,
                            last: Box::new(e),
                        });
                    }
                    let wait = self.delay(attempt - 1);
                    log::warn!("retrying after {wait:?} (attempt {attempt}/{max}): {e}");
                    if !wait.is_zero() {
                        thread::sleep(wait);
                    }
                }
            }
        }
    }
}

pub trait VisionBackend: Send + Sync {
    fn id(&self) -> &str;
    /// One request: encoded image bytes plus prompt to text.
    fn describe(&self, image: &[u8], prompt: &str) -> Result<String, BackendError>;
    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::default()
    }
}

pub trait TextBackend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &str) -> Result<String, BackendError>;
    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::default()
    }
}

pub trait EmbedBackend: Send + Sync {
    fn id(&self) -> &str;
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;
    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy::default()
    }
}

macro_rules! forward_backend {
    ($trait:ident, $method:ident ( $($arg:ident : $ty:ty),* ) -> $ret:ty) => {
        impl<T: $trait + ?Sized> $trait for &T {
            fn id(&self) -> &str { (**self).id() }
            fn $method(&self, $($arg: $ty),*) -> $ret { (**self).$method($($arg),*) }
            fn retry_policy(&self) -> RetryPolicy { (**self).retry_policy() }
        }
        impl<T: $trait + ?Sized> $trait for Box<T> {
            fn id(&self) -> &str { (**self).id() }
            fn $method(&self, $($arg: $ty),*) -> $ret { (**self).$method($($arg),*) }
            fn retry_policy(&self) -> RetryPolicy { (**self).retry_policy() }
        }
        impl<T: $trait + ?Sized> $trait for std::sync::Arc<T> {
            fn id(&self) -> &str { (**self).id() }
            fn $method(&self, $($arg: $ty),*) -> $ret { (**self).$method($($arg),*) }
            fn retry_policy(&self) -> RetryPolicy { (**self).retry_policy() }
        }
    };
}

forward_backend!(VisionBackend, describe(image: &[u8], prompt: &str) -> Result<String, BackendError>);
forward_backend!(TextBackend, generate(prompt: &str) -> Result<String, BackendError>);
forward_backend!(EmbedBackend, embed(text: &str) -> Result<Vec<f32>, BackendError>);

impl fmt::Debug for dyn VisionBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VisionBackend({})", self.id())
    }
}

impl fmt::Debug for dyn TextBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TextBackend({})", self.id())
    }
}

impl fmt::Debug for dyn EmbedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EmbedBackend({})", self.id())
    }
}
