//! Session graph time.

use std::fmt;
use std::ops::{Add, Sub};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

const NANOS_PER_SEC: f64 = 1e9;

/// Nanoseconds since the session epoch.
///
/// All scheduling, latency accounting and persisted records use this clock.
/// Arithmetic saturates at zero rather than going negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);
    pub const MAX: Timestamp = Timestamp(u64::MAX);

    pub const fn from_nanos(ns: u64) -> Self {
        Timestamp(ns)
    }

    pub const fn nanos(self) -> u64 {
        self.0
    }

    /// Rounds to the nearest nanosecond; negative and NaN inputs clamp to zero.
    pub fn from_secs_f64(secs: f64) -> Self {
        if !(secs > 0.0) {
            return Timestamp::ZERO;
        }
        let ns = (secs * NANOS_PER_SEC).round();
        if ns >= u64::MAX as f64 {
            Timestamp::MAX
        } else {
            Timestamp(ns as u64)
        }
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_SEC
    }

    /// Time of frame `index` for a stream starting at `self` sampled at `rate` Hz.
    ///
    /// Computed from the frame index rather than accumulated, so long streams do
    /// not drift.
    pub fn at_frame(self, index: u64, rate: f64) -> Self {
        let offset = (index as f64 * NANOS_PER_SEC / rate).round() as u64;
        Timestamp(self.0.saturating_add(offset))
    }

    /// Shift by a signed number of seconds, saturating at zero.
    pub fn offset_secs(self, secs: f64) -> Self {
        let delta = (secs * NANOS_PER_SEC).round();
        if delta >= 0.0 {
            Timestamp(self.0.saturating_add(delta as u64))
        } else {
            Timestamp(self.0.saturating_sub((-delta) as u64))
        }
    }

    /// Signed difference `self - earlier` in seconds.
    pub fn secs_since(self, earlier: Timestamp) -> f64 {
        (self.0 as i128 - earlier.0 as i128) as f64 / NANOS_PER_SEC
    }

    pub fn saturating_duration_since(self, earlier: Timestamp) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;

    fn add(self, rhs: Duration) -> Timestamp {
        let ns = u64::try_from(rhs.as_nanos()).unwrap_or(u64::MAX);
        Timestamp(self.0.saturating_add(ns))
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;

    fn sub(self, rhs: Duration) -> Timestamp {
        let ns = u64::try_from(rhs.as_nanos()).unwrap_or(u64::MAX);
        Timestamp(self.0.saturating_sub(ns))
    }
}

/// Exact decimal seconds with nanosecond digits, e.g. `100.400000000`.
impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:09}", self.0 / 1_000_000_000, self.0 % 1_000_000_000)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid timestamp {0:?}")]
pub struct ParseTimestampError(pub String);

/// Parses decimal seconds exactly, with at most nine fractional digits.
impl FromStr for Timestamp {
    type Err = ParseTimestampError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseTimestampError(s.to_string());
        let (whole, frac) = s.trim().split_once('.').unwrap_or((s.trim(), ""));
        if whole.is_empty() || frac.len() > 9 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        let secs: u64 = whole.parse().map_err(|_| err())?;
        let nanos: u64 = if frac.is_empty() { 0 } else { format!("{frac:0<9}").parse().map_err(|_| err())? };
        secs.checked_mul(1_000_000_000).and_then(|n| n.checked_add(nanos)).map(Timestamp).ok_or_else(err)
    }
}
