//! Topic delivery checked against a hand-written queue model.

use std::collections::VecDeque;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use sleeploop::msgbus::{
    Backpressure, BusError, BusPayload, DeliveryOutcome, Graph, PayloadKind, ReplaySpeed, TopicSpec,
};
use sleeploop::time::Timestamp;

#[derive(Debug, Clone, PartialEq)]
struct Msg(u64);

impl BusPayload for Msg {
    const KIND: PayloadKind = PayloadKind::StimEvent;
}

fn spec(name: &str, cap: usize, policy: Backpressure) -> TopicSpec {
    TopicSpec::new(name, PayloadKind::StimEvent, cap, policy)
}

#[derive(Debug, Clone)]
enum Op {
    Publish,
    Read(usize),
    Drain(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        5 => Just(Op::Publish),
        2 => (0usize..4).prop_map(Op::Read),
        1 => (0usize..4).prop_map(Op::Drain),
    ]
}

/// What a subscriber queue should hold after each step.
struct Model {
    policy: Backpressure,
    capacity: usize,
    items: VecDeque<u64>,
}

impl Model {
    fn push(&mut self, seq: u64) -> (DeliveryOutcome, u64) {
        match self.policy {
            Backpressure::DropOldest if self.items.len() == self.capacity => {
                self.items.pop_front();
                self.items.push_back(seq);
                (DeliveryOutcome::DroppedOldest, 1)
            }
            Backpressure::LatestOnly if !self.items.is_empty() => {
                let n = self.items.len() as u64;
                self.items.clear();
                self.items.push_back(seq);
                (DeliveryOutcome::ReplacedLatest, n)
            }
            _ => {
                self.items.push_back(seq);
                (DeliveryOutcome::Enqueued, 0)
            }
        }
    }
}

fn policy() -> impl Strategy<Value = Backpressure> {
    prop_oneof![Just(Backpressure::DropOldest), Just(Backpressure::LatestOnly)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn non_blocking_policies_match_model(
        subs in prop::collection::vec((policy(), 1usize..6), 1..4),
        ops in prop::collection::vec(op(), 0..120),
    ) {
        let graph = Graph::replay();
        let topic = graph.create_topic::<Msg>(spec("t", 8, Backpressure::DropOldest)).unwrap();
        let handles: Vec<_> = subs.iter().map(|&(p, c)| topic.subscribe_with(p, c).unwrap()).collect();
        let mut models: Vec<Model> = subs
            .iter()
            .map(|&(policy, c)| Model { policy, capacity: c, items: VecDeque::new() })
            .collect();
        let mut published = 0u64;
        let mut dropped = 0u64;
        let mut delivered = 0u64;
        let mut last_seen = vec![None::<u64>; subs.len()];

        for op in ops {
            match op {
                Op::Publish => {
                    let receipt = topic.publish(Timestamp::from_nanos(published * 10), Msg(published)).unwrap();
                    prop_assert_eq!(receipt.seq, published);
                    for (m, outcome) in models.iter_mut().zip(&receipt.outcomes) {
                        let (want, d) = m.push(published);
                        prop_assert_eq!(*outcome, want);
                        dropped += d;
                    }
                    published += 1;
                }
                Op::Read(i) | Op::Drain(i) if i >= subs.len() => {}
                Op::Read(i) => {
                    let got = handles[i].try_next().map(|e| e.payload.0);
                    prop_assert_eq!(got, models[i].items.pop_front());
                    if let Some(v) = got {
                        prop_assert!(last_seen[i] < Some(v), "reordered");
                        last_seen[i] = Some(v);
                        delivered += 1;
                    }
                }
                Op::Drain(i) => {
                    let got: Vec<u64> = handles[i].drain().iter().map(|e| e.payload.0).collect();
                    let want: Vec<u64> = models[i].items.drain(..).collect();
                    prop_assert_eq!(&got, &want);
                    prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
                    if let Some(&v) = got.last() {
                        prop_assert!(last_seen[i] < got.first().copied());
                        last_seen[i] = Some(v);
                    }
                    delivered += got.len() as u64;
                }
            }
            for (h, m) in handles.iter().zip(&models) {
                prop_assert_eq!(h.pending(), m.items.len());
                if m.policy == Backpressure::LatestOnly {
                    prop_assert!(h.pending() <= 1);
                }
            }
            let stats = topic.stats();
            prop_assert_eq!(stats.published_count, published);
            prop_assert_eq!(stats.dropped_count, dropped);
            prop_assert_eq!(stats.delivered_count, delivered);
            prop_assert!(stats.delivered_count + stats.dropped_count <= stats.published_count * subs.len() as u64);
        }
    }

    #[test]
    fn block_policy_delivers_everything_once_in_order(cap in 1usize..8, count in 0u64..400, readers in 1usize..4, pause_every in 1u64..50) {
        let graph = Graph::replay();
        let topic = graph.create_topic::<Msg>(spec("eeg/raw", cap, Backpressure::Block)).unwrap();
        let threads: Vec<_> = (0..readers)
            .map(|r| {
                let sub = topic.subscribe().unwrap();
                thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some(env) = sub.next() {
                        got.push(env.payload.0);
                        if (got.len() as u64 + r as u64) % pause_every == 0 {
                            thread::yield_now();
                        }
                    }
                    got
                })
            })
            .collect();
        for i in 0..count {
            let receipt = topic.publish(Timestamp::from_nanos(i), Msg(i)).unwrap();
            prop_assert!(receipt.outcomes.iter().all(|o| !matches!(o, DeliveryOutcome::DroppedOldest | DeliveryOutcome::ReplacedLatest)));
        }
        topic.close();
        let want: Vec<u64> = (0..count).collect();
        for t in threads {
            prop_assert_eq!(t.join().unwrap(), want.clone());
        }
        let stats = topic.stats();
        prop_assert_eq!(stats.dropped_count, 0);
        prop_assert_eq!(stats.delivered_count, count * readers as u64);
    }

    #[test]
    fn timestamps_must_not_go_backwards(stamps in prop::collection::vec(0u64..1000, 1..50)) {
        let graph = Graph::replay();
        let topic = graph.create_topic::<Msg>(spec("t", 4, Backpressure::LatestOnly)).unwrap();
        let sub = topic.subscribe().unwrap();
        let mut last = None;
        for (i, &s) in stamps.iter().enumerate() {
            let r = topic.publish(Timestamp::from_nanos(s), Msg(i as u64));
            if last.is_some_and(|l| s < l) {
                let rejected = matches!(r, Err(BusError::NonMonotonicTimestamp { .. }));
                prop_assert!(rejected);
            } else {
                prop_assert!(r.is_ok());
                last = Some(s);
            }
        }
        let env = sub.try_next().unwrap();
        prop_assert_eq!(env.at, Timestamp::from_nanos(last.unwrap()));
    }

    #[test]
    fn replay_at_any_speed_keeps_recorded_stamps(gaps in prop::collection::vec(0u64..2_000_000, 1..60), fast in any::<bool>()) {
        let stamps: Vec<Timestamp> = gaps
            .iter()
            .scan(0u64, |t, g| {
                *t += g;
                Some(Timestamp::from_nanos(*t))
            })
            .collect();
        let run = |speed: ReplaySpeed| {
            let graph = Graph::replay();
            let topic = graph.create_topic::<Msg>(spec("eeg/raw", 1024, Backpressure::DropOldest)).unwrap();
            let sub = topic.subscribe().unwrap();
            let clock = graph.clock();
            let mut seen_clock = Vec::new();
            let report = graph
                .run_replay("src", stamps.iter().copied(), speed, |t| {
                    seen_clock.push(clock.now());
                    topic.publish(t, Msg(t.nanos())).map(|_| ())
                })
                .unwrap()
                .unwrap();
            let got: Vec<Timestamp> = sub.drain().iter().map(|e| e.at).collect();
            (got, seen_clock, report.ticks)
        };
        let (a, clock_a, ticks) = run(ReplaySpeed::Unlimited);
        prop_assert_eq!(&a, &stamps);
        prop_assert_eq!(&clock_a, &stamps);
        prop_assert_eq!(ticks, stamps.len() as u64);
        let speed = if fast { ReplaySpeed::Factor(1000.0) } else { ReplaySpeed::Factor(50.0) };
        let (b, clock_b, _) = run(speed);
        prop_assert_eq!(b, a);
        prop_assert_eq!(clock_b, clock_a);
    }
}

#[test]
fn drop_oldest_65_into_64() {
    let graph = Graph::replay();
    let topic = graph.create_topic::<Msg>(spec("eeg/raw", 64, Backpressure::DropOldest)).unwrap();
    let sub = topic.subscribe().unwrap();
    for i in 1..=65 {
        topic.publish(Timestamp::from_nanos(i), Msg(i)).unwrap();
    }
    assert_eq!(topic.stats().dropped_count, 1);
    assert_eq!(sub.peek_oldest().unwrap().payload.0, 2);
}

#[test]
fn paced_replay_scales_wall_time() {
    let graph = Graph::replay();
    let stamps: Vec<Timestamp> = (0..=100).map(|i| Timestamp::from_secs_f64(i as f64 * 0.01)).collect();
    let report = graph
        .run_replay("src", stamps, ReplaySpeed::Factor(10.0), |_| Ok::<(), ()>(()))
        .unwrap()
        .unwrap();
    // one second of recording at 10x
    let wall = report.wall_elapsed.as_secs_f64();
    assert!((0.09..0.5).contains(&wall), "{wall}");
}

#[test]
fn blocked_publisher_resumes_when_reader_catches_up() {
    let graph = Graph::replay();
    let topic = graph.create_topic::<Msg>(spec("t", 1, Backpressure::Block)).unwrap();
    let sub = topic.subscribe().unwrap();
    topic.publish(Timestamp::ZERO, Msg(0)).unwrap();
    let reader = thread::spawn(move || {
        thread::sleep(Duration::from_millis(50));
        (sub.next().unwrap().payload.0, sub.next().unwrap().payload.0)
    });
    let receipt = topic.publish(Timestamp::from_nanos(1), Msg(1)).unwrap();
    match receipt.outcomes[0] {
        DeliveryOutcome::Blocked(d) => assert!(d >= Duration::from_millis(30), "{d:?}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(reader.join().unwrap(), (0, 1));
}

#[test]
fn graph_rejects_second_clock_source() {
    let graph = Arc::new(Graph::replay());
    let driver = graph.replay_driver("edf", ReplaySpeed::Unlimited).unwrap();
    assert!(matches!(graph.replay_driver("sim", ReplaySpeed::Unlimited), Err(BusError::ClockConflict(_))));
    drop(driver);
    assert!(graph.replay_driver("sim", ReplaySpeed::Unlimited).is_ok());
}
