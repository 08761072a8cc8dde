//! Stand-in for a live acquisition device streaming onto the bus.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DeviceMeta, SignalChunk};
use crate::msgbus::{BusError, Graph, ReplaySpeed, TopicHandle};
use crate::time::Timestamp;

/// Transport delay added to each chunk, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterModel {
    pub latency_mean: f64,
    pub latency_sd: f64,
}

impl JitterModel {
    pub const NONE: JitterModel = JitterModel { latency_mean: 0.0, latency_sd: 0.0 };
}

/// One chunk as it reaches the bus.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    /// Sample-clock time at which the chunk's last frame was acquired.
    pub stamp: Timestamp,
    /// Graph time at which the chunk is published.
    pub delivered_at: Timestamp,
    pub chunk: SignalChunk,
}

impl Delivery {
    pub fn latency_secs(&self) -> f64 {
        self.delivered_at.secs_since(self.stamp)
    }
}

/// Replays a chunk source with seeded transport jitter.
///
/// Deliveries never overtake each other: a chunk whose jitter would land it
/// before its predecessor waits for it, as on a FIFO link.
pub struct SimulatedDevice<I> {
    meta: DeviceMeta,
    source: I,
    jitter: Option<Normal<f64>>,
    rng: ChaCha8Rng,
    last_delivery: Timestamp,
    prev_end: Option<Timestamp>,
}

impl<I: Iterator<Item = SignalChunk>> SimulatedDevice<I> {
    pub fn new(meta: DeviceMeta, source: I, jitter: JitterModel, seed: u64) -> Self {
        let jitter = if jitter.latency_sd > 0.0 {
            Normal::new(jitter.latency_mean, jitter.latency_sd).ok()
        } else {
            Normal::new(jitter.latency_mean.max(0.0), 0.0).ok()
        };
        SimulatedDevice {
            meta,
            source,
            jitter,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_delivery: Timestamp::ZERO,
            prev_end: None,
        }
    }

    pub fn meta(&self) -> &DeviceMeta {
        &self.meta
    }

    /// Publishes every chunk on `topic`, driving graph time from the delivery schedule.
    pub fn run(
        mut self,
        graph: &Graph,
        topic: &TopicHandle<SignalChunk>,
        speed: ReplaySpeed,
        mut after_publish: impl FnMut(&Delivery),
    ) -> Result<u64, BusError> {
        let mut driver = graph.replay_driver("simulated-device", speed)?;
        let mut count = 0;
        for d in self.by_ref() {
            driver.tick(d.delivered_at);
            topic.publish(d.stamp, d.chunk.clone())?;
            after_publish(&d);
            count += 1;
        }
        Ok(count)
    }
}

impl<I: Iterator<Item = SignalChunk>> Iterator for SimulatedDevice<I> {
    type Item = Delivery;

    fn next(&mut self) -> Option<Delivery> {
        let chunk = self.source.next()?;
        if let Some(end) = self.prev_end {
            if end.nanos().abs_diff(chunk.start.nanos()) > 1 {
                warn!("device source is not gap-free at chunk {}", chunk.seq);
            }
        }
        let stamp = chunk.end();
        let delay = self.jitter.map(|n| n.sample(&mut self.rng)).unwrap_or(0.0).max(0.0);
        let delivered_at = stamp.offset_secs(delay).max(self.last_delivery);
        self.last_delivery = delivered_at;
        self.prev_end = Some(stamp);
        Some(Delivery { stamp, delivered_at, chunk })
    }
}
