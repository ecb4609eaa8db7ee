use std::io;
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use crate::RuntimeError;

/// Bounded exponential reconnect schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Backoff {
    pub attempts: u32,
    pub base: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff {
            attempts: 5,
            base: Duration::from_millis(100),
        }
    }
}

pub fn connect_with_backoff(endpoint: &str, backoff: Backoff) -> Result<TcpStream, RuntimeError> {
    let attempts = backoff.attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        match TcpStream::connect(endpoint) {
            Ok(stream) => {
                stream
                    .set_nodelay(true)
                    .map_err(io_err(format!("configuring {endpoint}")))?;
                return Ok(stream);
            }
            Err(e) => {
                log::debug!("connect {endpoint} attempt {}: {e}", attempt + 1);
                last = Some(e);
                if attempt + 1 < attempts {
                    thread::sleep(backoff.base * 2u32.pow(attempt));
                }
            }
        }
    }
    Err(RuntimeError::Unreachable {
        endpoint: endpoint.to_string(),
        attempts,
        source: last.unwrap(),
    })
}

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> RuntimeError {
    let context = context.into();
    move |source| RuntimeError::Io { context, source }
}
