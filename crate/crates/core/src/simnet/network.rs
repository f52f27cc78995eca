//! Fluid flow engine.
//!
//! A flow moves a contiguous byte range `[base, end)` of a stream from one
//! endpoint to another. Rates are piecewise constant between allocation
//! epochs; every epoch re-runs [`allocate_rates`] over the active flows.
//! A flow can be limited by what its source already holds: a fixed position
//! or another flow (the source's own inbound stream), trailing it by `lag`
//! bytes.

use serde::Serialize;

use super::alloc::{allocate_rates, EndpointSpec, FlowDemand, Priority};
use super::{EndpointId, FlowId};

/// Sub-byte slack used when comparing stream positions.
const POS_TOL: f64 = 1.0;
/// Events closer than this to the current instant fire together.
const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Limit {
    /// Source holds the whole range.
    None,
    /// Source holds the stream up to this position and is not growing.
    Static(u64),
    /// Source holds what this flow has delivered so far (minus lag).
    Follow(FlowId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowState {
    Active,
    Done,
    Aborted,
}

#[derive(Debug, Clone)]
pub struct FlowSpec {
    pub src: EndpointId,
    pub dst: EndpointId,
    pub class: Priority,
    pub base: u64,
    pub end: u64,
    /// Position at which the flow drops to background priority.
    pub demote_at: Option<u64>,
    pub limit: Limit,
    pub lag: u64,
    pub tag: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Pending {
    Finish,
    Demote,
    CatchUp,
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub src: EndpointId,
    pub dst: EndpointId,
    pub class: Priority,
    pub base: u64,
    pub end: u64,
    pub demote_at: Option<u64>,
    pub limit: Limit,
    pub lag: u64,
    pub tag: u64,
    pub state: FlowState,
    pub started: f64,
    pub stopped: Option<f64>,
    pos: f64,
    rate: f64,
    /// `(t, position)` breakpoints; the rate between two is constant.
    history: Vec<(f64, f64)>,
    next: Option<(f64, Pending)>,
}

impl Flow {
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn pos(&self) -> f64 {
        self.pos
    }

    pub fn total(&self) -> u64 {
        self.end - self.base
    }

    pub fn history(&self) -> &[(f64, f64)] {
        &self.history
    }

    /// Bytes moved by this flow, whole bytes only.
    pub fn delivered_bytes(&self) -> u64 {
        match self.state {
            FlowState::Done => self.end - self.base,
            _ => (self.pos.floor() as u64).clamp(self.base, self.end) - self.base,
        }
    }

    /// Stream position at time `t` (clamped to the flow's lifetime).
    pub fn pos_at(&self, t: f64) -> f64 {
        let h = &self.history;
        if h.is_empty() || t <= h[0].0 {
            return self.base as f64;
        }
        let i = h.partition_point(|&(ht, _)| ht <= t);
        let (t0, p0) = h[i - 1];
        if i < h.len() {
            let (t1, p1) = h[i];
            if t1 <= t0 {
                return p1;
            }
            p0 + (p1 - p0) * (t - t0) / (t1 - t0)
        } else if self.state == FlowState::Active {
            p0 + self.rate * (t - t0)
        } else {
            p0
        }
    }

    /// First time the stream position reaches `p`, if it ever did.
    pub fn time_at(&self, p: f64) -> Option<f64> {
        let h = &self.history;
        if h.is_empty() {
            return None;
        }
        if p <= h[0].1 {
            return Some(h[0].0);
        }
        let i = h.partition_point(|&(_, hp)| hp < p);
        if i == h.len() {
            if self.state == FlowState::Active && self.rate > 0.0 {
                let (t0, p0) = h[h.len() - 1];
                return Some(t0 + (p - p0) / self.rate);
            }
            return None;
        }
        let (t1, p1) = h[i];
        let (t0, p0) = h[i - 1];
        if p1 <= p0 {
            return Some(t1);
        }
        Some(t0 + (t1 - t0) * (p - p0) / (p1 - p0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NetEventKind {
    Demoted,
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NetEvent {
    pub flow: FlowId,
    pub tag: u64,
    pub kind: NetEventKind,
}

#[derive(Debug, Clone, Default)]
pub struct Network {
    endpoints: Vec<EndpointSpec>,
    flows: Vec<Flow>,
    active: Vec<FlowId>,
    now: f64,
    dirty: bool,
    next_time: f64,
    epochs: u64,
    capacity_violations: u64,
    check_capacity: bool,
    /// Active-list position of each flow during reallocation.
    slot: Vec<usize>,
}

impl Network {
    pub fn new() -> Self {
        Network {
            next_time: f64::INFINITY,
            ..Default::default()
        }
    }

    /// Enables a per-epoch sweep asserting no endpoint is over capacity.
    pub fn set_capacity_check(&mut self, on: bool) {
        self.check_capacity = on;
    }

    pub fn add_endpoint(&mut self, spec: EndpointSpec) -> EndpointId {
        self.endpoints.push(spec);
        EndpointId((self.endpoints.len() - 1) as u32)
    }

    pub fn endpoint(&self, id: EndpointId) -> &EndpointSpec {
        &self.endpoints[id.0 as usize]
    }

    pub fn endpoints(&self) -> &[EndpointSpec] {
        &self.endpoints
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn epochs(&self) -> u64 {
        self.epochs
    }

    pub fn capacity_violations(&self) -> u64 {
        self.capacity_violations
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn flow(&self, id: FlowId) -> &Flow {
        &self.flows[id.0 as usize]
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn start_flow(&mut self, spec: FlowSpec) -> FlowId {
        assert!(spec.end >= spec.base, "flow range reversed");
        assert_ne!(spec.src, spec.dst, "flow to self");
        let id = FlowId(self.flows.len() as u32);
        let now = self.now;
        let done = spec.end == spec.base;
        self.flows.push(Flow {
            src: spec.src,
            dst: spec.dst,
            class: spec.class,
            base: spec.base,
            end: spec.end,
            demote_at: spec.demote_at.filter(|&d| d > spec.base && d < spec.end),
            limit: spec.limit,
            lag: spec.lag,
            tag: spec.tag,
            state: if done { FlowState::Done } else { FlowState::Active },
            started: now,
            stopped: if done { Some(now) } else { None },
            pos: spec.base as f64,
            rate: 0.0,
            history: vec![(now, spec.base as f64)],
            next: None,
        });
        if !done {
            self.active.push(id);
            self.dirty = true;
        }
        id
    }

    pub fn set_limit(&mut self, id: FlowId, limit: Limit) {
        let f = &mut self.flows[id.0 as usize];
        if f.limit != limit {
            f.limit = limit;
            if f.state == FlowState::Active {
                self.dirty = true;
            }
        }
    }

    /// Stops a flow at its current position.
    pub fn abort_flow(&mut self, id: FlowId) {
        let now = self.now;
        let f = &mut self.flows[id.0 as usize];
        if f.state != FlowState::Active {
            return;
        }
        f.state = FlowState::Aborted;
        f.stopped = Some(now);
        f.rate = 0.0;
        f.next = None;
        let p = f.pos;
        f.history.push((now, p));
        self.active.retain(|&a| a != id);
        self.dirty = true;
    }

    /// Time of the next internal event, reallocating first if needed.
    pub fn next_event_time(&mut self) -> f64 {
        if self.dirty {
            self.reallocate();
        }
        self.next_time
    }

    /// Advances the clock to `t`, returning the flow events due by then.
    pub fn advance_to(&mut self, t: f64) -> Vec<NetEvent> {
        if self.dirty {
            self.reallocate();
        }
        let dt = t - self.now;
        debug_assert!(dt >= -TIME_TOL, "time went backwards: {} -> {}", self.now, t);
        if dt > 0.0 {
            for &id in &self.active {
                let f = &mut self.flows[id.0 as usize];
                f.pos = (f.pos + f.rate * dt).min(f.end as f64);
            }
            self.now = t;
        }
        let mut out = Vec::new();
        if self.next_time > t + TIME_TOL {
            return out;
        }
        let mut finished = Vec::new();
        for &id in &self.active {
            let f = &mut self.flows[id.0 as usize];
            let Some((te, kind)) = f.next else { continue };
            if te > t + TIME_TOL {
                continue;
            }
            match kind {
                Pending::Finish => {
                    f.pos = f.end as f64;
                    f.state = FlowState::Done;
                    f.stopped = Some(t);
                    f.rate = 0.0;
                    f.history.push((t, f.pos));
                    finished.push(id);
                    out.push(NetEvent {
                        flow: id,
                        tag: f.tag,
                        kind: NetEventKind::Finished,
                    });
                }
                Pending::Demote => {
                    if let Some(d) = f.demote_at.take() {
                        f.pos = d as f64;
                        f.class = Priority::Background;
                        out.push(NetEvent {
                            flow: id,
                            tag: f.tag,
                            kind: NetEventKind::Demoted,
                        });
                    }
                }
                Pending::CatchUp => {}
            }
            f.next = None;
        }
        if !finished.is_empty() {
            self.active.retain(|a| !finished.contains(a));
        }
        self.dirty = true;
        out
    }

    fn limit_of(&self, f: &Flow) -> (f64, Option<usize>) {
        match f.limit {
            Limit::None => (f64::INFINITY, None),
            Limit::Static(p) => (p as f64, None),
            Limit::Follow(g) => {
                let lead = &self.flows[g.0 as usize];
                match lead.state {
                    FlowState::Done => (lead.end as f64, None),
                    FlowState::Aborted => (lead.pos - f.lag as f64, None),
                    FlowState::Active => (lead.pos - f.lag as f64, Some(g.0 as usize)),
                }
            }
        }
    }

    fn reallocate(&mut self) {
        self.dirty = false;
        self.epochs += 1;
        let n = self.active.len();
        let mut slot = std::mem::take(&mut self.slot);
        slot.resize(self.flows.len(), usize::MAX);
        for (i, id) in self.active.iter().enumerate() {
            slot[id.0 as usize] = i;
        }
        let slot_of = |g: usize| Some(slot[g]).filter(|&s| s != usize::MAX);
        let mut demands = Vec::with_capacity(n);
        let mut limits = Vec::with_capacity(n);
        for &id in &self.active {
            let f = &self.flows[id.0 as usize];
            let (lim, lead) = self.limit_of(f);
            let mut d = FlowDemand::new(f.src, f.dst, f.class);
            let blocked = lim < f.end as f64 && f.pos >= lim - POS_TOL;
            if blocked {
                // Ahead of what the source holds: wait for it to pull away.
                let ahead = f.pos > lim + POS_TOL;
                match lead.and_then(slot_of) {
                    Some(li) if !ahead => d.follows = Some(li),
                    _ => d.cap = Some(0.0),
                }
            }
            demands.push(d);
            limits.push((lim, lead.and_then(slot_of), blocked));
        }
        for id in &self.active {
            slot[id.0 as usize] = usize::MAX;
        }
        self.slot = slot;
        let rates = allocate_rates(&demands, &self.endpoints);
        if self.check_capacity {
            self.sweep_capacity(&demands, &rates);
        }
        let now = self.now;
        let mut next_time = f64::INFINITY;
        for (i, &id) in self.active.iter().enumerate() {
            let r = rates[i];
            let lead_rate = limits[i].1.map(|li| rates[li]);
            let f = &mut self.flows[id.0 as usize];
            if (r - f.rate).abs() > 1e-12 * r.abs().max(1.0) {
                let p = f.pos;
                if f.history.last().map(|h| h.0) == Some(now) {
                    f.history.last_mut().unwrap().1 = p;
                } else {
                    f.history.push((now, p));
                }
            }
            f.rate = r;
            f.next = None;
            let (lim, _, blocked) = limits[i];
            if r <= 0.0 {
                if let Some(lr) = lead_rate.filter(|&lr| lr > 0.0 && blocked && f.pos > lim + POS_TOL) {
                    let te = now + (f.pos - lim) / lr;
                    f.next = Some((te, Pending::CatchUp));
                    next_time = next_time.min(te);
                }
                continue;
            }
            let mut best = (now + (f.end as f64 - f.pos) / r, Pending::Finish);
            if let Some(d) = f.demote_at {
                let te = now + (d as f64 - f.pos).max(0.0) / r;
                if te < best.0 {
                    best = (te, Pending::Demote);
                }
            }
            if !blocked && lim.is_finite() && lim < f.end as f64 {
                let gap = lim - f.pos;
                let closing = r - lead_rate.unwrap_or(0.0);
                if closing > 0.0 {
                    let te = now + gap / closing;
                    if te < best.0 {
                        best = (te, Pending::CatchUp);
                    }
                }
            }
            f.next = Some(best);
            next_time = next_time.min(best.0);
        }
        self.next_time = next_time;
    }

    fn sweep_capacity(&mut self, demands: &[FlowDemand], rates: &[f64]) {
        let mut load = vec![0.0f64; self.endpoints.len() * 2];
        for (d, &r) in demands.iter().zip(rates) {
            let s = d.src.0 as usize;
            let t = d.dst.0 as usize;
            load[2 * s] += r;
            match self.endpoints[t].duplex {
                super::Duplex::Half => load[2 * t] += r,
                super::Duplex::Full => load[2 * t + 1] += r,
            }
        }
        for (i, e) in self.endpoints.iter().enumerate() {
            let cap = e.capacity * (1.0 + 1e-9) + 1e-6;
            if load[2 * i] > cap || load[2 * i + 1] > cap {
                self.capacity_violations += 1;
            }
        }
    }

    /// Bytes per interval bucket on each endpoint, `(inbound, outbound)`.
    pub fn bandwidth_buckets(&self, interval: f64, horizon: f64, filter: impl Fn(&Flow) -> bool) -> Vec<Vec<(f64, f64)>> {
        let n_bins = (horizon / interval).ceil().max(0.0) as usize;
        let mut bins = vec![vec![(0.0, 0.0); n_bins]; self.endpoints.len()];
        for f in self.flows.iter().filter(|f| filter(f)) {
            let mut pts = f.history.clone();
            if f.state == FlowState::Active {
                pts.push((self.now, f.pos));
            }
            for w in pts.windows(2) {
                let ((t0, p0), (t1, p1)) = (w[0], w[1]);
                if t1 <= t0 || p1 <= p0 {
                    continue;
                }
                let r = (p1 - p0) / (t1 - t0);
                let mut b = (t0 / interval).floor() as usize;
                while b < n_bins {
                    let lo = (b as f64 * interval).max(t0);
                    let hi = ((b + 1) as f64 * interval).min(t1);
                    if hi <= lo && (b + 1) as f64 * interval > t1 {
                        break;
                    }
                    let bytes = r * (hi - lo).max(0.0);
                    bins[f.dst.0 as usize][b].0 += bytes;
                    bins[f.src.0 as usize][b].1 += bytes;
                    if (b + 1) as f64 * interval >= t1 {
                        break;
                    }
                    b += 1;
                }
            }
        }
        bins
    }
}
