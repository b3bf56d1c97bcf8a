use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::TeeError;
use crate::crypto::{hash_parts, Digest};
use crate::util::write_atomic;

/// SGX counters accept at most 20 increments per second.
pub const DEFAULT_MIN_INCREMENT_INTERVAL: Duration = Duration::from_millis(50);

/// 8-byte big-endian value followed by a 32-byte integrity digest.
pub const COUNTER_FILE_LEN: usize = 8 + 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CounterClock {
    /// Increments sleep on the wall clock to respect the minimum interval.
    RealTime,
    /// Increments advance a logical clock instead of sleeping.
    Virtual,
}

#[derive(Debug)]
struct CounterState {
    value: u64,
    last_real: Option<Instant>,
    virtual_now: Duration,
    last_virtual: Option<Duration>,
}

/// Platform monotonic counter. Increments are linearizable: they are
/// serialized under one lock which is also held while rate limiting.
#[derive(Debug)]
pub struct PlatformCounter {
    state: Mutex<CounterState>,
    clock: CounterClock,
    min_interval: Duration,
    path: Option<PathBuf>,
}

fn integrity_digest(value: u64) -> Digest {
    hash_parts(&[b"platform-counter:", &value.to_be_bytes()])
}

pub(crate) fn encode_counter(value: u64) -> [u8; COUNTER_FILE_LEN] {
    let mut out = [0u8; COUNTER_FILE_LEN];
    out[..8].copy_from_slice(&value.to_be_bytes());
    out[8..].copy_from_slice(integrity_digest(value).as_bytes());
    out
}

pub(crate) fn decode_counter(raw: &[u8]) -> Result<u64, TeeError> {
    if raw.len() != COUNTER_FILE_LEN {
        return Err(TeeError::CounterCorrupted(format!("length {}", raw.len())));
    }
    let value = u64::from_be_bytes(raw[..8].try_into().expect("8 bytes"));
    if raw[8..] != integrity_digest(value).0 {
        return Err(TeeError::CounterCorrupted("integrity digest mismatch".into()));
    }
    Ok(value)
}

impl PlatformCounter {
    pub fn in_memory(clock: CounterClock, min_interval: Duration) -> Self {
        Self::with_value(0, clock, min_interval, None)
    }

    fn with_value(value: u64, clock: CounterClock, min_interval: Duration, path: Option<PathBuf>) -> Self {
        Self {
            state: Mutex::new(CounterState {
                value,
                last_real: None,
                virtual_now: Duration::ZERO,
                last_virtual: None,
            }),
            clock,
            min_interval,
            path,
        }
    }

    /// Opens the persisted counter at `path`; a missing file is a fresh
    /// counter with value 0.
    pub fn open(path: impl AsRef<Path>, clock: CounterClock, min_interval: Duration) -> Result<Self, TeeError> {
        let path = path.as_ref().to_path_buf();
        let value = match std::fs::read(&path) {
            Ok(raw) => decode_counter(&raw)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        Ok(Self::with_value(value, clock, min_interval, Some(path)))
    }

    pub fn clock(&self) -> CounterClock {
        self.clock
    }

    pub fn min_interval(&self) -> Duration {
        self.min_interval
    }

    pub fn read(&self) -> u64 {
        self.state.lock().expect("counter lock").value
    }

    /// Increments and returns the new value, waiting as long as needed to
    /// keep increments at least `min_interval` apart.
    pub fn increment(&self) -> Result<u64, TeeError> {
        let mut st = self.state.lock().expect("counter lock");
        match self.clock {
            CounterClock::RealTime => {
                if let Some(last) = st.last_real {
                    let earliest = last + self.min_interval;
                    let now = Instant::now();
                    if now < earliest {
                        std::thread::sleep(earliest - now);
                    }
                }
            }
            CounterClock::Virtual => {
                if let Some(last) = st.last_virtual {
                    st.virtual_now = st.virtual_now.max(last + self.min_interval);
                }
            }
        }
        let next = st
            .value
            .checked_add(1)
            .ok_or_else(|| TeeError::CounterCorrupted("counter exhausted".into()))?;
        if let Some(path) = &self.path {
            write_atomic(path, &encode_counter(next))?;
        }
        st.value = next;
        match self.clock {
            CounterClock::RealTime => st.last_real = Some(Instant::now()),
            CounterClock::Virtual => st.last_virtual = Some(st.virtual_now),
        }
        Ok(next)
    }

    /// Logical time consumed by increments so far (virtual mode only).
    pub fn virtual_elapsed(&self) -> Duration {
        self.state.lock().expect("counter lock").virtual_now
    }

    /// Moves the logical clock forward, e.g. to model idle time.
    pub fn advance_virtual(&self, by: Duration) {
        let mut st = self.state.lock().expect("counter lock");
        st.virtual_now += by;
    }
}
