use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::time::Timestamp;

/// Source of graph time.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// Wall time elapsed since the clock was created.
#[derive(Debug)]
pub struct WallClock {
    epoch: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        WallClock { epoch: Instant::now() }
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for WallClock {
    fn now(&self) -> Timestamp {
        Timestamp::ZERO + self.epoch.elapsed()
    }
}

/// Graph time driven by recorded timestamps. Never moves backwards.
#[derive(Debug, Default)]
pub struct ReplayClock {
    ns: AtomicU64,
}

impl ReplayClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance_to(&self, t: Timestamp) {
        self.ns.fetch_max(t.nanos(), Ordering::AcqRel);
    }
}

impl Clock for ReplayClock {
    fn now(&self) -> Timestamp {
        Timestamp::from_nanos(self.ns.load(Ordering::Acquire))
    }
}

/// Replay rate relative to the recording.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReplaySpeed {
    Factor(f64),
    Unlimited,
}

impl ReplaySpeed {
    pub fn is_valid(&self) -> bool {
        match *self {
            ReplaySpeed::Factor(s) => s > 0.0 && s.is_finite(),
            ReplaySpeed::Unlimited => true,
        }
    }

    /// Accepts a positive number, or `inf` for as-fast-as-possible.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "inf" | "Inf" | "unlimited" | "max" => Some(ReplaySpeed::Unlimited),
            other => {
                let v: f64 = other.parse().ok()?;
                if v.is_infinite() && v > 0.0 {
                    return Some(ReplaySpeed::Unlimited);
                }
                let speed = ReplaySpeed::Factor(v);
                speed.is_valid().then_some(speed)
            }
        }
    }

    pub fn from_f64(v: f64) -> Option<Self> {
        if v.is_infinite() && v > 0.0 {
            Some(ReplaySpeed::Unlimited)
        } else {
            let s = ReplaySpeed::Factor(v);
            s.is_valid().then_some(s)
        }
    }

    pub fn as_f64(&self) -> f64 {
        match *self {
            ReplaySpeed::Factor(s) => s,
            ReplaySpeed::Unlimited => f64::INFINITY,
        }
    }
}

impl Default for ReplaySpeed {
    fn default() -> Self {
        ReplaySpeed::Factor(1.0)
    }
}

impl fmt::Display for ReplaySpeed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplaySpeed::Factor(s) => write!(f, "{s}"),
            ReplaySpeed::Unlimited => f.write_str("inf"),
        }
    }
}

/// Serialized as a number, or the string `"inf"`.
impl Serialize for ReplaySpeed {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match *self {
            ReplaySpeed::Factor(v) => s.serialize_f64(v),
            ReplaySpeed::Unlimited => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ReplaySpeed {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Num(v) => ReplaySpeed::from_f64(v),
            Repr::Text(s) => ReplaySpeed::parse(&s),
        };
        parsed.ok_or_else(|| serde::de::Error::custom("replay speed must be a positive number or \"inf\""))
    }
}

/// Sleeps so that wall time tracks graph time divided by the speed factor.
pub(crate) struct Pacer {
    speed: ReplaySpeed,
    origin: Option<(Timestamp, Instant)>,
}

impl Pacer {
    pub(crate) fn new(speed: ReplaySpeed) -> Self {
        Pacer { speed, origin: None }
    }

    pub(crate) fn pace(&mut self, t: Timestamp) {
        let ReplaySpeed::Factor(speed) = self.speed else { return };
        let (t0, w0) = *self.origin.get_or_insert((t, Instant::now()));
        let target = w0 + Duration::from_secs_f64((t.secs_since(t0) / speed).max(0.0));
        let now = Instant::now();
        // coarse sleeps only; sub-millisecond lag is absorbed on the next tick
        if target > now + Duration::from_millis(1) {
            std::thread::sleep(target - now);
        }
    }
}
