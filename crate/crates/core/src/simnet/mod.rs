//! Deterministic discrete-event simulator.
//!
//! [`SimWorld`] couples a time-ordered queue of caller-defined events with
//! the fluid [`Network`]. Ties in the queue are broken by insertion order.

mod alloc;
mod metrics;
mod network;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use alloc::{allocate_rates, Duplex, EndpointSpec, FlowDemand, Priority};
pub use metrics::{
    fmt_s, percentile, sample_bandwidth, BandwidthSample, EndpointTimeline, MetricReport, MetricSink, SessionRecord, Summary,
};
pub use network::{Flow, FlowSpec, FlowState, Limit, NetEvent, NetEventKind, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EndpointId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(pub u32);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("event queue exceeded {0} pending events")]
    EventOverflow(usize),
    #[error("{0}")]
    Invariant(String),
}

struct Queued<E> {
    t: f64,
    seq: u64,
    ev: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, o: &Self) -> bool {
        self.seq == o.seq
    }
}

impl<E> Eq for Queued<E> {}

impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl<E> Ord for Queued<E> {
    fn cmp(&self, o: &Self) -> Ordering {
        o.t.total_cmp(&self.t).then_with(|| o.seq.cmp(&self.seq))
    }
}

pub enum Step<E> {
    Event(E),
    Net(Vec<NetEvent>),
}

pub struct SimWorld<E> {
    pub net: Network,
    pub rng: ChaCha8Rng,
    pub metrics: MetricSink,
    queue: BinaryHeap<Queued<E>>,
    seq: u64,
    max_queue: usize,
    processed: u64,
}

impl<E> SimWorld<E> {
    pub fn new(seed: u64, max_queue: usize) -> Self {
        SimWorld {
            net: Network::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            metrics: MetricSink::default(),
            queue: BinaryHeap::new(),
            seq: 0,
            max_queue,
            processed: 0,
        }
    }

    pub fn now(&self) -> f64 {
        self.net.now()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn schedule_at(&mut self, t: f64, ev: E) -> Result<(), SimError> {
        if self.queue.len() >= self.max_queue {
            return Err(SimError::EventOverflow(self.max_queue));
        }
        let t = t.max(self.now());
        self.queue.push(Queued { t, seq: self.seq, ev });
        self.seq += 1;
        Ok(())
    }

    pub fn schedule_in(&mut self, dt: f64, ev: E) -> Result<(), SimError> {
        self.schedule_at(self.now() + dt.max(0.0), ev)
    }

    /// Next event at or before `until`; network events win ties.
    pub fn step(&mut self, until: f64) -> Option<Step<E>> {
        let tn = self.net.next_event_time();
        let tq = self.queue.peek().map_or(f64::INFINITY, |q| q.t);
        if tn.min(tq) > until || (tn.is_infinite() && tq.is_infinite()) {
            if until.is_finite() && until > self.now() {
                self.net.advance_to(until);
            }
            return None;
        }
        self.processed += 1;
        if tn <= tq + 1e-9 {
            return Some(Step::Net(self.net.advance_to(tn)));
        }
        let q = self.queue.pop().expect("peeked");
        let evs = self.net.advance_to(q.t);
        debug_assert!(evs.is_empty());
        Some(Step::Event(q.ev))
    }
}

/// Drives `world` with `handler` until the queue and network are idle.
pub fn run<E>(
    world: &mut SimWorld<E>,
    until: f64,
    mut handler: impl FnMut(&mut SimWorld<E>, Step<E>) -> Result<(), SimError>,
) -> Result<(), SimError> {
    while let Some(step) = world.step(until) {
        handler(world, step)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_tie_break() {
        let mut w: SimWorld<u32> = SimWorld::new(1, 100);
        w.schedule_at(1.0, 1).unwrap();
        w.schedule_at(0.5, 0).unwrap();
        w.schedule_at(1.0, 2).unwrap();
        w.schedule_at(1.0, 3).unwrap();
        let mut seen = Vec::new();
        run(&mut w, f64::INFINITY, |_, s| {
            if let Step::Event(e) = s {
                seen.push(e);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1, 2, 3]);
    }

    #[test]
    fn overflow() {
        let mut w: SimWorld<()> = SimWorld::new(1, 2);
        w.schedule_at(1.0, ()).unwrap();
        w.schedule_at(1.0, ()).unwrap();
        assert_eq!(w.schedule_at(1.0, ()), Err(SimError::EventOverflow(2)));
    }

    #[test]
    fn empty_world_is_idle() {
        let mut w: SimWorld<()> = SimWorld::new(1, 2);
        assert!(w.step(f64::INFINITY).is_none());
        assert_eq!(w.now(), 0.0);
    }

    #[test]
    fn until_stops_early() {
        let mut w: SimWorld<u8> = SimWorld::new(1, 10);
        w.schedule_at(5.0, 1).unwrap();
        assert!(w.step(2.0).is_none());
        assert_eq!(w.now(), 2.0);
        assert!(matches!(w.step(10.0), Some(Step::Event(1))));
    }

    #[test]
    fn net_events_interleave() {
        let mut w: SimWorld<u8> = SimWorld::new(1, 10);
        let a = w.net.add_endpoint(EndpointSpec::new("a", 125e6, Duplex::Full));
        let b = w.net.add_endpoint(EndpointSpec::new("b", 125e6, Duplex::Full));
        w.net.start_flow(FlowSpec {
            src: a,
            dst: b,
            class: Priority::Startup,
            base: 0,
            end: 125_000_000,
            demote_at: None,
            limit: Limit::None,
            lag: 0,
            tag: 7,
        });
        w.schedule_at(0.5, 1).unwrap();
        w.schedule_at(2.0, 2).unwrap();
        let mut log = Vec::new();
        run(&mut w, f64::INFINITY, |w, s| {
            match s {
                Step::Event(e) => log.push((w.now(), format!("ev{e}"))),
                Step::Net(evs) => {
                    for e in evs {
                        log.push((w.now(), format!("flow{}", e.tag)));
                    }
                }
            }
            Ok(())
        })
        .unwrap();
        let names: Vec<_> = log.iter().map(|x| x.1.as_str()).collect();
        assert_eq!(names, vec!["ev1", "flow7", "ev2"]);
        assert!((log[1].0 - 1.0).abs() < 1e-9);
    }
}
