//! Typed publish/subscribe graph with bounded per-subscriber queues.
//!
//! Each subscriber owns a queue with its own backpressure policy, so a slow
//! observer on a topic cannot stall other consumers unless it asked for
//! `Block`. Timestamps are assigned by producers; the bus only checks that
//! they never go backwards on a topic. Topics keep no history: a new
//! subscription starts at the next published message.

mod clock;

use std::any::Any;
use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;

pub use clock::{Clock, ReplayClock, ReplaySpeed, WallClock};
pub(crate) use clock::Pacer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("topic {0:?} already exists")]
    DuplicateName(String),
    #[error("invalid topic spec: {0}")]
    InvalidSpec(String),
    #[error("timestamp {got} precedes last published {last} on {topic:?}")]
    NonMonotonicTimestamp { topic: String, last: Timestamp, got: Timestamp },
    #[error("topic {0:?} is closed")]
    TopicClosed(String),
    #[error("clock conflict: {0}")]
    ClockConflict(String),
    #[error("topic {topic:?} carries {actual:?}, not {requested:?}")]
    PayloadMismatch { topic: String, actual: PayloadKind, requested: PayloadKind },
    #[error("no topic named {0:?}")]
    UnknownTopic(String),
    #[error("graph is running and does not accept new topics")]
    GraphRunning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PayloadKind {
    SignalChunk,
    HypnogramEpoch,
    StimEvent,
    ThermalState,
    SessionEvent,
    ControlCommand,
    AudioBurst,
}

/// Types that can travel on the bus.
pub trait BusPayload: Send + Sync + 'static {
    const KIND: PayloadKind;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backpressure {
    /// Publisher waits for room.
    Block,
    /// Oldest pending message is discarded.
    DropOldest,
    /// Only the newest message is kept.
    LatestOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicSpec {
    pub name: String,
    pub payload_kind: PayloadKind,
    pub queue_capacity: usize,
    pub backpressure: Backpressure,
}

impl TopicSpec {
    pub fn new(name: impl Into<String>, payload_kind: PayloadKind, queue_capacity: usize, backpressure: Backpressure) -> Self {
        TopicSpec { name: name.into(), payload_kind, queue_capacity, backpressure }
    }

    fn validate(&self) -> Result<(), BusError> {
        if self.name.is_empty() {
            return Err(BusError::InvalidSpec("empty name".into()));
        }
        if self.name.split('/').any(str::is_empty) {
            return Err(BusError::InvalidSpec(format!("{:?} has an empty path segment", self.name)));
        }
        if self.queue_capacity == 0 {
            return Err(BusError::InvalidSpec(format!("{:?}: queue_capacity must be >= 1", self.name)));
        }
        Ok(())
    }
}

/// A published message as seen by a subscriber.
#[derive(Debug)]
pub struct Envelope<T> {
    pub at: Timestamp,
    pub seq: u64,
    pub payload: Arc<T>,
}

impl<T> Clone for Envelope<T> {
    fn clone(&self) -> Self {
        Envelope { at: self.at, seq: self.seq, payload: Arc::clone(&self.payload) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DeliveryOutcome {
    Enqueued,
    DroppedOldest,
    ReplacedLatest,
    Blocked(Duration),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PublishReceipt {
    pub seq: u64,
    pub outcomes: Vec<DeliveryOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicStats {
    pub name: String,
    pub payload_kind: PayloadKind,
    pub subscribers: usize,
    pub published_count: u64,
    pub delivered_count: u64,
    pub dropped_count: u64,
    /// Seconds of graph time between publish stamp and receipt.
    pub max_observed_latency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub topics: Vec<TopicStats>,
}

impl GraphStats {
    pub fn topic(&self, name: &str) -> Option<&TopicStats> {
        self.topics.iter().find(|t| t.name == name)
    }
}

#[derive(Default)]
struct Counters {
    published: AtomicU64,
    delivered: AtomicU64,
    dropped: AtomicU64,
    max_latency_ns: AtomicU64,
}

struct QueueState<T> {
    items: VecDeque<Envelope<T>>,
    detached: bool,
}

struct SubQueue<T> {
    id: u64,
    capacity: usize,
    policy: Backpressure,
    state: Mutex<QueueState<T>>,
    readable: Condvar,
    writable: Condvar,
}

impl<T> SubQueue<T> {
    fn push(&self, env: Envelope<T>, counters: &Counters) -> DeliveryOutcome {
        let mut st = self.state.lock().unwrap();
        match self.policy {
            Backpressure::DropOldest => {
                let outcome = if st.items.len() >= self.capacity {
                    st.items.pop_front();
                    counters.dropped.fetch_add(1, Ordering::Relaxed);
                    DeliveryOutcome::DroppedOldest
                } else {
                    DeliveryOutcome::Enqueued
                };
                st.items.push_back(env);
                self.readable.notify_one();
                outcome
            }
            Backpressure::LatestOnly => {
                let replaced = st.items.len() as u64;
                st.items.clear();
                st.items.push_back(env);
                self.readable.notify_one();
                if replaced > 0 {
                    counters.dropped.fetch_add(replaced, Ordering::Relaxed);
                    DeliveryOutcome::ReplacedLatest
                } else {
                    DeliveryOutcome::Enqueued
                }
            }
            Backpressure::Block => {
                let started = Instant::now();
                let mut waited = false;
                while st.items.len() >= self.capacity && !st.detached {
                    waited = true;
                    st = self.writable.wait(st).unwrap();
                }
                if st.detached {
                    // consumer went away while we waited; nothing to deliver to
                    return DeliveryOutcome::Blocked(started.elapsed());
                }
                st.items.push_back(env);
                self.readable.notify_one();
                if waited {
                    DeliveryOutcome::Blocked(started.elapsed())
                } else {
                    DeliveryOutcome::Enqueued
                }
            }
        }
    }
}

struct PublishState {
    last: Option<Timestamp>,
    seq: u64,
    closed: bool,
}

struct TopicCore<T> {
    spec: TopicSpec,
    clock: Arc<dyn Clock>,
    counters: Counters,
    publish: Mutex<PublishState>,
    closed: AtomicBool,
    subscribers: RwLock<Vec<Arc<SubQueue<T>>>>,
    next_sub_id: AtomicU64,
}

impl<T: BusPayload> TopicCore<T> {
    fn record_delivery(&self, env: &Envelope<T>) {
        self.counters.delivered.fetch_add(1, Ordering::Relaxed);
        let latency = self.clock.now().nanos().saturating_sub(env.at.nanos());
        self.counters.max_latency_ns.fetch_max(latency, Ordering::Relaxed);
    }
}

trait AnyTopic: Send + Sync {
    fn stats(&self) -> TopicStats;
    fn kind(&self) -> PayloadKind;
    fn close(&self);
    fn into_any(self: Arc<Self>) -> Arc<dyn Any + Send + Sync>;
}

impl<T: BusPayload> AnyTopic for TopicCore<T> {
    fn stats(&self) -> TopicStats {
        TopicStats {
            name: self.spec.name.clone(),
            payload_kind: self.spec.payload_kind,
            subscribers: self.subscribers.read().unwrap().len(),
            published_count: self.counters.published.load(Ordering::Relaxed),
            delivered_count: self.counters.delivered.load(Ordering::Relaxed),
            dropped_count: self.counters.dropped.load(Ordering::Relaxed),
            max_observed_latency: self.counters.max_latency_ns.load(Ordering::Relaxed) as f64 / 1e9,
        }
    }

    fn kind(&self) -> PayloadKind {
        self.spec.payload_kind
    }

    fn close(&self) {
        let mut p = self.publish.lock().unwrap();
        p.closed = true;
        self.closed.store(true, Ordering::Release);
        drop(p);
        for q in self.subscribers.read().unwrap().iter() {
            let _guard = q.state.lock().unwrap();
            q.readable.notify_all();
        }
    }

    fn into_any(self: Arc<Self>) -> Arc<dyn Any + Send + Sync> {
        self
    }
}

/// Publishing side of a topic. Cheap to clone.
pub struct TopicHandle<T> {
    core: Arc<TopicCore<T>>,
}

impl<T> Clone for TopicHandle<T> {
    fn clone(&self) -> Self {
        TopicHandle { core: Arc::clone(&self.core) }
    }
}

impl<T: BusPayload> TopicHandle<T> {
    pub fn name(&self) -> &str {
        &self.core.spec.name
    }

    pub fn spec(&self) -> &TopicSpec {
        &self.core.spec
    }

    pub fn publish(&self, at: Timestamp, payload: T) -> Result<PublishReceipt, BusError> {
        self.publish_arc(at, Arc::new(payload))
    }

    /// Enqueues the message to every current subscriber according to that
    /// subscriber's policy. Publishers are serialized, so every subscriber sees
    /// messages in publish order.
    pub fn publish_arc(&self, at: Timestamp, payload: Arc<T>) -> Result<PublishReceipt, BusError> {
        let core = &self.core;
        let mut p = core.publish.lock().unwrap();
        if p.closed {
            return Err(BusError::TopicClosed(core.spec.name.clone()));
        }
        if let Some(last) = p.last {
            if at < last {
                return Err(BusError::NonMonotonicTimestamp { topic: core.spec.name.clone(), last, got: at });
            }
        }
        p.last = Some(at);
        let seq = p.seq;
        p.seq += 1;
        core.counters.published.fetch_add(1, Ordering::Relaxed);
        let subs: Vec<Arc<SubQueue<T>>> = core.subscribers.read().unwrap().clone();
        let outcomes = subs
            .iter()
            .map(|q| q.push(Envelope { at, seq, payload: Arc::clone(&payload) }, &core.counters))
            .collect();
        Ok(PublishReceipt { seq, outcomes })
    }

    /// Subscribe with the topic's default policy and capacity.
    pub fn subscribe(&self) -> Result<Subscription<T>, BusError> {
        self.subscribe_with(self.core.spec.backpressure, self.core.spec.queue_capacity)
    }

    pub fn subscribe_with(&self, policy: Backpressure, capacity: usize) -> Result<Subscription<T>, BusError> {
        if capacity == 0 {
            return Err(BusError::InvalidSpec("subscription capacity must be >= 1".into()));
        }
        // holding the publish lock keeps the new queue out of any in-flight publish
        let p = self.core.publish.lock().unwrap();
        if p.closed {
            return Err(BusError::TopicClosed(self.core.spec.name.clone()));
        }
        let queue = Arc::new(SubQueue {
            id: self.core.next_sub_id.fetch_add(1, Ordering::Relaxed),
            capacity: if policy == Backpressure::LatestOnly { 1 } else { capacity },
            policy,
            state: Mutex::new(QueueState { items: VecDeque::new(), detached: false }),
            readable: Condvar::new(),
            writable: Condvar::new(),
        });
        self.core.subscribers.write().unwrap().push(Arc::clone(&queue));
        drop(p);
        Ok(Subscription { core: Arc::clone(&self.core), queue })
    }

    /// Rejects further publishes; subscribers drain what is queued and then see the end.
    pub fn close(&self) {
        AnyTopic::close(&*self.core);
    }

    pub fn stats(&self) -> TopicStats {
        AnyTopic::stats(&*self.core)
    }
}

/// Receiving side of a topic. Owned by a single consumer.
pub struct Subscription<T: BusPayload> {
    core: Arc<TopicCore<T>>,
    queue: Arc<SubQueue<T>>,
}

impl<T: BusPayload> Subscription<T> {
    fn take(&self, st: &mut QueueState<T>) -> Option<Envelope<T>> {
        let env = st.items.pop_front()?;
        self.queue.writable.notify_one();
        self.core.record_delivery(&env);
        Some(env)
    }

    /// Non-blocking receive.
    pub fn try_next(&self) -> Option<Envelope<T>> {
        let mut st = self.queue.state.lock().unwrap();
        self.take(&mut st)
    }

    /// Blocks until a message arrives; `None` once the topic is closed and drained.
    pub fn next(&self) -> Option<Envelope<T>> {
        let mut st = self.queue.state.lock().unwrap();
        loop {
            if let Some(env) = self.take(&mut st) {
                return Some(env);
            }
            if self.core.closed.load(Ordering::Acquire) {
                return None;
            }
            st = self.queue.readable.wait(st).unwrap();
        }
    }

    pub fn next_timeout(&self, timeout: Duration) -> Option<Envelope<T>> {
        let deadline = Instant::now() + timeout;
        let mut st = self.queue.state.lock().unwrap();
        loop {
            if let Some(env) = self.take(&mut st) {
                return Some(env);
            }
            let now = Instant::now();
            if now >= deadline || self.core.closed.load(Ordering::Acquire) {
                return None;
            }
            st = self.queue.readable.wait_timeout(st, deadline - now).unwrap().0;
        }
    }

    /// Everything currently pending, oldest first.
    pub fn drain(&self) -> Vec<Envelope<T>> {
        let mut st = self.queue.state.lock().unwrap();
        let mut out = Vec::with_capacity(st.items.len());
        while let Some(env) = self.take(&mut st) {
            out.push(env);
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.queue.state.lock().unwrap().items.len()
    }

    pub fn peek_oldest(&self) -> Option<Envelope<T>> {
        self.queue.state.lock().unwrap().items.front().cloned()
    }

    pub fn is_closed(&self) -> bool {
        self.core.closed.load(Ordering::Acquire)
    }

    pub fn topic_name(&self) -> &str {
        &self.core.spec.name
    }
}

impl<T: BusPayload> Drop for Subscription<T> {
    fn drop(&mut self) {
        {
            let mut st = self.queue.state.lock().unwrap();
            st.detached = true;
            self.queue.writable.notify_all();
        }
        let id = self.queue.id;
        self.core.subscribers.write().unwrap().retain(|q| q.id != id);
    }
}

enum GraphClock {
    Wall(Arc<WallClock>),
    Replay(Arc<ReplayClock>),
}

/// A set of named topics sharing one session clock.
pub struct Graph {
    clock: GraphClock,
    topics: RwLock<BTreeMap<String, Arc<dyn AnyTopic>>>,
    clock_owner: Arc<Mutex<Option<String>>>,
    running: AtomicBool,
    dynamic_topics: bool,
}

impl Graph {
    /// Graph whose time is advanced by a replay producer.
    pub fn replay() -> Self {
        Self::with_clock(GraphClock::Replay(Arc::new(ReplayClock::new())))
    }

    /// Graph on the host's monotonic clock.
    pub fn wall() -> Self {
        Self::with_clock(GraphClock::Wall(Arc::new(WallClock::new())))
    }

    fn with_clock(clock: GraphClock) -> Self {
        Graph {
            clock,
            topics: RwLock::new(BTreeMap::new()),
            clock_owner: Arc::new(Mutex::new(None)),
            running: AtomicBool::new(false),
            dynamic_topics: true,
        }
    }

    /// Whether topics may be created after `set_running(true)`.
    pub fn with_dynamic_topics(mut self, allowed: bool) -> Self {
        self.dynamic_topics = allowed;
        self
    }

    pub fn set_running(&self, running: bool) {
        self.running.store(running, Ordering::Release);
    }

    pub fn is_running(&self) -> bool {
        self.running.load(Ordering::Acquire)
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        match &self.clock {
            GraphClock::Wall(c) => c.clone(),
            GraphClock::Replay(c) => c.clone(),
        }
    }

    pub fn now(&self) -> Timestamp {
        self.clock().now()
    }

    pub fn create_topic<T: BusPayload>(&self, spec: TopicSpec) -> Result<TopicHandle<T>, BusError> {
        spec.validate()?;
        if spec.payload_kind != T::KIND {
            return Err(BusError::InvalidSpec(format!(
                "{:?} declares {:?} but is created for {:?}",
                spec.name,
                spec.payload_kind,
                T::KIND
            )));
        }
        if self.is_running() && !self.dynamic_topics {
            return Err(BusError::GraphRunning);
        }
        let mut topics = self.topics.write().unwrap();
        if topics.contains_key(&spec.name) {
            return Err(BusError::DuplicateName(spec.name));
        }
        let core = Arc::new(TopicCore::<T> {
            spec: spec.clone(),
            clock: self.clock(),
            counters: Counters::default(),
            publish: Mutex::new(PublishState { last: None, seq: 0, closed: false }),
            closed: AtomicBool::new(false),
            subscribers: RwLock::new(Vec::new()),
            next_sub_id: AtomicU64::new(0),
        });
        topics.insert(spec.name, core.clone());
        Ok(TopicHandle { core })
    }

    /// Looks up an existing topic by name.
    pub fn topic<T: BusPayload>(&self, name: &str) -> Result<TopicHandle<T>, BusError> {
        let topics = self.topics.read().unwrap();
        let any = topics.get(name).ok_or_else(|| BusError::UnknownTopic(name.to_string()))?;
        let actual = any.kind();
        let core = Arc::clone(any)
            .into_any()
            .downcast::<TopicCore<T>>()
            .map_err(|_| BusError::PayloadMismatch { topic: name.to_string(), actual, requested: T::KIND })?;
        Ok(TopicHandle { core })
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats { topics: self.topics.read().unwrap().values().map(|t| t.stats()).collect() }
    }

    pub fn close_all(&self) {
        for t in self.topics.read().unwrap().values() {
            t.close();
        }
    }

    /// Makes `producer` the graph's only source of time.
    pub fn replay_driver(&self, producer: &str, speed: ReplaySpeed) -> Result<ReplayDriver, BusError> {
        let GraphClock::Replay(clock) = &self.clock else {
            return Err(BusError::ClockConflict("graph runs on wall time".into()));
        };
        if !speed.is_valid() {
            return Err(BusError::InvalidSpec(format!("replay speed {speed:?}")));
        }
        let mut owner = self.clock_owner.lock().unwrap();
        if let Some(existing) = owner.as_ref() {
            return Err(BusError::ClockConflict(format!("{producer:?} and {existing:?} both drive the clock")));
        }
        *owner = Some(producer.to_string());
        Ok(ReplayDriver {
            clock: Arc::clone(clock),
            owner: Arc::clone(&self.clock_owner),
            pacer: Pacer::new(speed),
            ticks: 0,
            first: None,
            last: None,
            wall_start: Instant::now(),
        })
    }

    /// Advances graph time through `clock_source`, calling `step` at each stamp.
    pub fn run_replay<E>(
        &self,
        producer: &str,
        clock_source: impl IntoIterator<Item = Timestamp>,
        speed: ReplaySpeed,
        mut step: impl FnMut(Timestamp) -> Result<(), E>,
    ) -> Result<Result<ReplayReport, E>, BusError> {
        let mut driver = self.replay_driver(producer, speed)?;
        for t in clock_source {
            driver.tick(t);
            if let Err(e) = step(t) {
                return Ok(Err(e));
            }
        }
        Ok(Ok(driver.report()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub ticks: u64,
    pub first: Option<Timestamp>,
    pub last: Option<Timestamp>,
    pub wall_elapsed: Duration,
}

/// Exclusive right to advance a replay graph's clock. Released on drop.
pub struct ReplayDriver {
    clock: Arc<ReplayClock>,
    owner: Arc<Mutex<Option<String>>>,
    pacer: Pacer,
    ticks: u64,
    first: Option<Timestamp>,
    last: Option<Timestamp>,
    wall_start: Instant,
}

impl ReplayDriver {
    /// Moves graph time to `t`, sleeping first when replay is paced.
    pub fn tick(&mut self, t: Timestamp) {
        self.pacer.pace(t);
        self.clock.advance_to(t);
        self.ticks += 1;
        self.first.get_or_insert(t);
        self.last = Some(t);
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn report(&self) -> ReplayReport {
        ReplayReport { ticks: self.ticks, first: self.first, last: self.last, wall_elapsed: self.wall_start.elapsed() }
    }
}

impl Drop for ReplayDriver {
    fn drop(&mut self) {
        *self.owner.lock().unwrap() = None;
    }
}
