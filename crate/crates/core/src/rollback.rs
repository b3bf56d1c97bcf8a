//! Startup admission of the service against its platform counter.
//!
//! Invariants: at clean shutdown `v = c`; while running `v < c`; a startup
//! is admitted only if it observes `v = c` and its own increment yields
//! `c' = v + 1`. The counter is incremented once per admitted or racing
//! startup and never per request.

use std::fmt;

use crate::store::{EncryptedStore, Mutation, StoreError};
use crate::tee::{PlatformCounter, TeeError};

/// Process exit code for a version/counter mismatch.
pub const EXIT_VERSION_MISMATCH: i32 = 3;
/// Process exit code when another instance won the counter race.
pub const EXIT_CONCURRENT_INSTANCE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum GuardError {
    #[error("database version {version} does not match platform counter {counter} (rollback or unclean shutdown)")]
    VersionMismatch { version: u64, counter: u64 },
    #[error("counter advanced to {observed}, expected {expected}: another instance is running")]
    ConcurrentInstance { expected: u64, observed: u64 },
    #[error("shutdown already committed")]
    AlreadyCommitted,
    #[error("override requires explicit confirmation")]
    NotConfirmed,
    #[error(transparent)]
    Counter(#[from] TeeError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl GuardError {
    pub fn exit_code(&self) -> i32 {
        match self {
            GuardError::VersionMismatch { .. } => EXIT_VERSION_MISMATCH,
            GuardError::ConcurrentInstance { .. } => EXIT_CONCURRENT_INSTANCE,
            _ => 1,
        }
    }
}

/// Source of the database version `v`.
pub trait VersionSource {
    fn read_version(&self) -> u64;
    fn commit_version(&mut self, v: u64) -> Result<(), GuardError>;
}

/// Linearizable monotonic counter `c`.
pub trait MonotonicCounter {
    fn read(&self) -> u64;
    fn increment(&self) -> Result<u64, GuardError>;
}

impl MonotonicCounter for PlatformCounter {
    fn read(&self) -> u64 {
        PlatformCounter::read(self)
    }

    fn increment(&self) -> Result<u64, GuardError> {
        Ok(PlatformCounter::increment(self)?)
    }
}

impl VersionSource for EncryptedStore {
    fn read_version(&self) -> u64 {
        self.version()
    }

    fn commit_version(&mut self, v: u64) -> Result<(), GuardError> {
        Ok(self.commit(None, vec![Mutation::SetVersion { version: v }])?)
    }
}

/// Proof of admission; gates the request-serving plane.
pub struct RunningToken {
    version: u64,
    counter: u64,
    committed: bool,
}

impl fmt::Debug for RunningToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunningToken")
            .field("version", &self.version)
            .field("counter", &self.counter)
            .field("committed", &self.committed)
            .finish()
    }
}

impl RunningToken {
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn is_live(&self) -> bool {
        !self.committed
    }
}

/// The startup protocol split into its observable steps so that
/// interleavings of several instances can be explored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Startup {
    /// Database opened and `v` read.
    Loaded { version: u64 },
    /// `v = c` was observed.
    Compared { version: u64 },
    /// Counter incremented to `c'`.
    Incremented { version: u64, counter: u64 },
}

impl Startup {
    pub fn load(source: &impl VersionSource) -> Self {
        Startup::Loaded {
            version: source.read_version(),
        }
    }

    /// Advances one step. The final step returns the token.
    pub fn step(self, counter: &impl MonotonicCounter) -> Result<Result<Startup, RunningToken>, GuardError> {
        match self {
            Startup::Loaded { version } => {
                let c = counter.read();
                if c != version {
                    return Err(GuardError::VersionMismatch { version, counter: c });
                }
                Ok(Ok(Startup::Compared { version }))
            }
            Startup::Compared { version } => Ok(Ok(Startup::Incremented {
                version,
                counter: counter.increment()?,
            })),
            Startup::Incremented { version, counter: c } => {
                if c != version + 1 {
                    return Err(GuardError::ConcurrentInstance {
                        expected: version + 1,
                        observed: c,
                    });
                }
                Ok(Err(RunningToken {
                    version,
                    counter: c,
                    committed: false,
                }))
            }
        }
    }
}

pub fn startup_guard(source: &impl VersionSource, counter: &impl MonotonicCounter) -> Result<RunningToken, GuardError> {
    let mut s = Startup::load(source);
    loop {
        match s.step(counter)? {
            Ok(next) => s = next,
            Err(token) => return Ok(token),
        }
    }
}

/// Sets `v` to the current counter value. A failed commit leaves `v`
/// unchanged so the next startup refuses.
pub fn shutdown_commit(
    source: &mut impl VersionSource,
    counter: &impl MonotonicCounter,
    token: &mut RunningToken,
) -> Result<u64, GuardError> {
    if token.committed {
        return Err(GuardError::AlreadyCommitted);
    }
    let c = counter.read();
    source.commit_version(c)?;
    token.committed = true;
    Ok(c)
}

/// Accepts the current counter as the database version after an unclean
/// shutdown, recording `reason` in the audit log.
pub fn override_unclean_shutdown(
    store: &mut EncryptedStore,
    counter: &impl MonotonicCounter,
    confirm: bool,
    reason: &str,
) -> Result<u64, GuardError> {
    if !confirm {
        return Err(GuardError::NotConfirmed);
    }
    let c = counter.read();
    store.commit(
        None,
        vec![Mutation::Override {
            version: c,
            reason: format!("{reason} (previous version {})", store.version()),
        }],
    )?;
    Ok(c)
}
