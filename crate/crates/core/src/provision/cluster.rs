//! The simulated platform: scheduler, workers, registry and metadata store
//! wired onto one [`SimWorld`].
//!
//! Each VM keeps one *holding* per image: the canonical-order prefix of
//! blocks it has, the stream it is receiving, and the streams it serves to
//! its children. Forwarding is expressed through flow limits: a child's
//! stream may not pass what its parent has received.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::wire::ProtocolMessage;
use super::{Phase, Policy, ProvisionError, ProvisionSession};
use crate::ftmanager::{FtManager, ProvisionPlan, Upstream};
use crate::ftree::FunctionTree;
use crate::ids::{FunctionId, ImageRef, VmId};
use crate::image::{chain_digest, ImageProfile};
use crate::simnet::{
    sample_bandwidth, Duplex, EndpointId, EndpointSpec, FlowId, FlowSpec, FlowState, Limit, MetricReport,
    NetEventKind, Priority, SessionRecord, SimWorld, Step, Summary,
};
use crate::simnet::{BandwidthSample, EndpointTimeline};

pub type SessionId = usize;
type Hid = usize;

const MANIFEST_TAG: u64 = 1 << 40;
/// The designated seeding node of the layer-tree baseline.
pub const LAYER_ROOT_VM: VmId = VmId(0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    /// Set from the scenario's top-level `policy`.
    #[serde(skip)]
    pub policy: Policy,
    pub rtt_s: f64,
    pub manifest_bytes: u64,
    pub container_start_s: f64,
    /// Decompression throughput in MB/s applied to the startup blocks
    /// before the container starts; 0 means instantaneous.
    pub decompress_mbps: f64,
    pub timeout_s: f64,
    /// Outstanding block requests per stream. Streams are modeled as
    /// continuously busy.
    pub request_window: u32,
    pub registry_gbps: f64,
    pub mds_gbps: f64,
    pub duplex: Duplex,
    pub layer_root_cost_s: f64,
    pub layer_count: u32,
    pub tracker_cost_s: f64,
    pub piece_size: u64,
    pub sample_interval_s: f64,
    pub log_messages: bool,
    pub check_capacity: bool,
    pub max_events: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            policy: Policy::FaasnetFt,
            rtt_s: 0.0005,
            manifest_bytes: 10 * 1024,
            container_start_s: 0.8,
            decompress_mbps: 0.0,
            timeout_s: 30.0,
            request_window: 16,
            registry_gbps: 10.0,
            mds_gbps: 10.0,
            duplex: Duplex::Half,
            layer_root_cost_s: 0.005,
            layer_count: 1,
            tracker_cost_s: 0.0005,
            piece_size: 512 * 1024,
            sample_interval_s: 0.1,
            log_messages: false,
            check_capacity: true,
            max_events: 10_000_000,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pos = |x: f64, n: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(format!("{n} must be positive"))
            }
        };
        pos(self.registry_gbps, "registry_gbps")?;
        pos(self.mds_gbps, "mds_gbps")?;
        pos(self.timeout_s, "timeout_s")?;
        if self.rtt_s < 0.0 || self.container_start_s < 0.0 || self.sample_interval_s < 0.0 || self.decompress_mbps < 0.0 {
            return Err("delays must be non-negative".into());
        }
        if self.request_window == 0 || self.piece_size == 0 || self.layer_count == 0 {
            return Err("request_window, piece_size and layer_count must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Src {
    Registry,
    Holding(Hid),
}

#[derive(Debug, Clone)]
struct Holding {
    vm: VmId,
    ep: EndpointId,
    img: usize,
    target: usize,
    committed: usize,
    digests: Vec<[u8; 32]>,
    inbound: Option<FlowId>,
    source: Option<Src>,
    outbound: Vec<FlowId>,
    sessions: Vec<SessionId>,
    gate: bool,
    gen: u32,
    alive: bool,
    waiting: bool,
    started: bool,
    watchdog: bool,
}

#[derive(Debug, Clone)]
enum Ev {
    PrepareArrives(SessionId),
    ManifestStart(SessionId),
    ManifestDone(SessionId),
    ReadyArrives(SessionId),
    CreateArrives(SessionId),
    CoordArrives(SessionId),
    Coordinated(SessionId),
    OpenStream(Hid, u32),
    TrackerArrives(Hid, u32),
    PieceGrant(Hid, u32),
    ContainerUp(SessionId),
    CreatedArrives,
    Fail(VmId),
    Detect(VmId),
    Timeout(SessionId, u32),
    Watchdog(Hid, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Notification {
    Started { session: SessionId, t: f64 },
    Completed { session: SessionId, t: f64 },
    Failed { session: SessionId, t: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub t: f64,
    pub from: String,
    pub to: String,
    pub msg: ProtocolMessage,
}

/// Post-run checks over everything the network carried.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Audit {
    pub sessions: usize,
    pub completed: usize,
    pub failed: usize,
    pub digest_ok: usize,
    pub registry_data_bytes: u64,
    pub mds_bytes: u64,
    pub scheduler_data_bytes: u64,
    pub scheduler_messages: u64,
    pub registry_bytes_by_vm: BTreeMap<VmId, u64>,
    /// Edges over which some block crossed twice.
    pub edge_overlaps: usize,
    /// Single-source edges that did not carry the receiver's whole prefix.
    pub edge_gaps: usize,
    pub integrity_errors: u64,
    pub capacity_violations: u64,
}

pub struct Cluster {
    cfg: ClusterConfig,
    mgr: FtManager,
    world: SimWorld<Ev>,
    images: Vec<Arc<ImageProfile>>,
    image_idx: BTreeMap<ImageRef, usize>,
    registry: EndpointId,
    mds: EndpointId,
    scheduler: EndpointId,
    aux: Option<EndpointId>,
    vm_eps: BTreeMap<VmId, EndpointId>,
    dead: BTreeSet<VmId>,
    holdings: Vec<Holding>,
    holding_of: BTreeMap<(VmId, usize), Hid>,
    by_image: Vec<Vec<Hid>>,
    sessions: Vec<ProvisionSession>,
    session_hold: Vec<Hid>,
    session_seq: Vec<u32>,
    manifest_flow: BTreeMap<SessionId, FlowId>,
    layer_trees: BTreeMap<usize, FunctionTree>,
    aux_busy_until: f64,
    notes: VecDeque<Notification>,
    log: Vec<LogEntry>,
    integrity_errors: u64,
}

impl Cluster {
    pub fn new(
        cfg: ClusterConfig,
        mgr: FtManager,
        images: Vec<ImageProfile>,
        seed: u64,
    ) -> Result<Self, ProvisionError> {
        cfg.validate().map_err(ProvisionError::Config)?;
        let mut world = SimWorld::new(seed, cfg.max_events);
        world.net.set_capacity_check(cfg.check_capacity);
        let gbps = |g: f64| g * 1e9 / 8.0;
        let registry = world
            .net
            .add_endpoint(EndpointSpec::new("registry", gbps(cfg.registry_gbps), Duplex::Full));
        let mds = world.net.add_endpoint(EndpointSpec::new("mds", gbps(cfg.mds_gbps), Duplex::Full));
        let scheduler = world
            .net
            .add_endpoint(EndpointSpec::new("scheduler", gbps(10.0), Duplex::Full));
        let aux = match cfg.policy {
            Policy::LayerTreeRoot => Some(world.net.add_endpoint(EndpointSpec::new(
                "layer_root",
                mgr.config().nic_bps(),
                cfg.duplex,
            ))),
            Policy::AllToAllTracker => Some(
                world
                    .net
                    .add_endpoint(EndpointSpec::new("tracker", gbps(10.0), Duplex::Full)),
            ),
            _ => None,
        };
        let mut image_idx = BTreeMap::new();
        let images: Vec<Arc<ImageProfile>> = images.into_iter().map(Arc::new).collect();
        let n_images = images.len();
        for (i, p) in images.iter().enumerate() {
            image_idx.insert(p.image.clone(), i);
        }
        Ok(Cluster {
            cfg,
            mgr,
            world,
            images,
            image_idx,
            registry,
            mds,
            scheduler,
            aux,
            vm_eps: BTreeMap::new(),
            dead: BTreeSet::new(),
            holdings: Vec::new(),
            holding_of: BTreeMap::new(),
            by_image: vec![Vec::new(); n_images],
            sessions: Vec::new(),
            session_hold: Vec::new(),
            session_seq: Vec::new(),
            manifest_flow: BTreeMap::new(),
            layer_trees: BTreeMap::new(),
            aux_busy_until: 0.0,
            notes: VecDeque::new(),
            log: Vec::new(),
            integrity_errors: 0,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn manager(&self) -> &FtManager {
        &self.mgr
    }

    pub fn manager_mut(&mut self) -> &mut FtManager {
        &mut self.mgr
    }

    pub fn now(&self) -> f64 {
        self.world.now()
    }

    pub fn sessions(&self) -> &[ProvisionSession] {
        &self.sessions
    }

    pub fn session(&self, id: SessionId) -> &ProvisionSession {
        &self.sessions[id]
    }

    pub fn image(&self, image: &ImageRef) -> Option<&ImageProfile> {
        self.image_idx.get(image).map(|&i| &*self.images[i])
    }

    pub fn network(&self) -> &crate::simnet::Network {
        &self.world.net
    }

    pub fn counter(&self, key: &str) -> u64 {
        self.world.metrics.counter(key)
    }

    fn d(&self) -> f64 {
        self.cfg.rtt_s / 2.0
    }

    fn lazy(&self) -> bool {
        self.cfg.policy != Policy::RegistryFullPull
    }

    fn vm_ep(&mut self, vm: VmId) -> EndpointId {
        if vm == LAYER_ROOT_VM {
            if let Some(a) = self.aux {
                return a;
            }
        }
        if let Some(&e) = self.vm_eps.get(&vm) {
            return e;
        }
        let spec = EndpointSpec::new(format!("vm{vm}"), self.mgr.config().nic_bps(), self.cfg.duplex);
        let e = self.world.net.add_endpoint(spec);
        self.vm_eps.insert(vm, e);
        e
    }

    fn ep_name(&self, e: EndpointId) -> String {
        self.world.net.endpoint(e).name.clone()
    }

    fn schedule(&mut self, dt: f64, ev: Ev) -> Result<(), ProvisionError> {
        self.world.schedule_in(dt, ev)?;
        Ok(())
    }

    fn record(&mut self, from: String, to: String, msg: ProtocolMessage) {
        if self.cfg.log_messages {
            self.log.push(LogEntry {
                t: self.world.now(),
                from,
                to,
                msg,
            });
        }
    }

    fn image_of(&self, f: &FunctionId) -> Result<usize, ProvisionError> {
        let spec = self
            .mgr
            .function(f)
            .ok_or_else(|| ProvisionError::UnknownFunction(f.clone()))?;
        self.image_idx
            .get(&spec.image)
            .copied()
            .ok_or_else(|| ProvisionError::UnknownImage(spec.image.clone()))
    }

    fn holding_for(&mut self, vm: VmId, img: usize) -> Hid {
        if let Some(&h) = self.holding_of.get(&(vm, img)) {
            return h;
        }
        let p = &self.images[img];
        let target = if self.cfg.policy == Policy::RegistryOnDemand {
            p.n_startup()
        } else {
            p.n_blocks()
        };
        let ep = self.vm_ep(vm);
        let h = self.holdings.len();
        self.holdings.push(Holding {
            vm,
            ep,
            img,
            target,
            committed: 0,
            digests: Vec::with_capacity(target),
            inbound: None,
            source: None,
            outbound: Vec::new(),
            sessions: Vec::new(),
            gate: false,
            gen: 0,
            alive: true,
            waiting: false,
            started: false,
            watchdog: false,
        });
        self.holding_of.insert((vm, img), h);
        self.by_image[img].push(h);
        self.check_gate(h);
        h
    }

    /// Scales `function` to `demand` members and starts provisioning the
    /// new ones. A partially covered deficit returns the partial plan with
    /// `exhausted` set.
    pub fn provision(&mut self, function: &FunctionId, demand: usize) -> Result<ProvisionPlan, ProvisionError> {
        let now = self.now();
        let plan = match self.mgr.scale_out(function, demand, now) {
            Ok(p) => p,
            Err(crate::ftmanager::ManagerError::PoolExhausted { plan }) => plan,
            Err(e) => return Err(e.into()),
        };
        self.drive_provision(&plan)?;
        Ok(plan)
    }

    /// Opens one session per plan entry and sends PrepareFunction to each VM.
    pub fn drive_provision(&mut self, plan: &ProvisionPlan) -> Result<Vec<SessionId>, ProvisionError> {
        let img = self.image_of(&plan.function)?;
        let image = self.images[img].image.clone();
        let now = self.now();
        let spec = self.mgr.function(&plan.function).cloned().expect("checked");
        let mut out = Vec::new();
        for e in &plan.entries {
            let sid = self.sessions.len();
            let upstream = match self.cfg.policy {
                Policy::FaasnetFt => e.upstream,
                _ => Upstream::Registry,
            };
            self.sessions.push(ProvisionSession {
                function: plan.function.clone(),
                image: image.clone(),
                vm: e.vm,
                upstream,
                phase: Phase::Created,
                blocks_received: 0,
                t_request: now,
                t_manifest_done: None,
                t_ready: None,
                t_started: None,
                t_completed: None,
                digest_ok: None,
                failure: None,
                warm: false,
            });
            let h = self.holding_for(e.vm, img);
            self.holdings[h].sessions.push(sid);
            self.session_hold.push(h);
            self.session_seq.push(0);
            self.world.metrics.add("scheduler_control_messages", 1);
            let to = self.ep_name(self.holdings[h].ep);
            self.record(
                "scheduler".into(),
                to,
                ProtocolMessage::PrepareFunction {
                    function: plan.function.to_string(),
                    image: image.to_string(),
                    memory_mb: spec.memory_mb,
                    upstream: match upstream {
                        Upstream::Registry => "registry".into(),
                        Upstream::Vm(v) => v.addr(),
                    },
                },
            );
            let d = self.d();
            self.schedule(d, Ev::PrepareArrives(sid))?;
            let t = self.cfg.timeout_s;
            self.schedule(t, Ev::Timeout(sid, 0))?;
            out.push(sid);
        }
        Ok(out)
    }

    /// Scales out with VMs that already hold the image and run the container.
    pub fn prewarm(&mut self, function: &FunctionId, demand: usize) -> Result<ProvisionPlan, ProvisionError> {
        let img = self.image_of(function)?;
        let now = self.now();
        let plan = self.mgr.scale_out(function, demand, now)?;
        let p = self.images[img].clone();
        for e in &plan.entries {
            let h = self.holding_for(e.vm, img);
            let hd = &mut self.holdings[h];
            hd.digests = (0..hd.target).map(|k| p.block_digest(p.block_at(k))).collect();
            hd.committed = hd.target;
            hd.started = true;
            let sid = self.sessions.len();
            self.sessions.push(ProvisionSession {
                function: function.clone(),
                image: p.image.clone(),
                vm: e.vm,
                upstream: e.upstream,
                phase: Phase::Completed,
                blocks_received: hd.target,
                t_request: now,
                t_manifest_done: Some(now),
                t_ready: Some(now),
                t_started: Some(now),
                t_completed: Some(now),
                digest_ok: Some(true),
                failure: None,
                warm: true,
            });
            hd.sessions.push(sid);
            self.session_hold.push(h);
            self.session_seq.push(0);
            self.check_gate(h);
        }
        Ok(plan)
    }

    /// Kills `vm` at time `at`; detection follows after the ping timeout.
    pub fn inject_failure(&mut self, vm: VmId, at: f64) -> Result<(), ProvisionError> {
        self.world.schedule_at(at, Ev::Fail(vm))?;
        Ok(())
    }

    /// Processes events up to `until`, stopping at the first notification.
    pub fn step(&mut self, until: f64) -> Result<Option<Notification>, ProvisionError> {
        loop {
            if let Some(n) = self.notes.pop_front() {
                return Ok(Some(n));
            }
            match self.world.step(until) {
                None => return Ok(None),
                Some(s) => self.handle(s)?,
            }
        }
    }

    /// Runs until nothing is left to do.
    pub fn run(&mut self) -> Result<(), ProvisionError> {
        while self.step(f64::INFINITY)?.is_some() {}
        Ok(())
    }

    fn handle(&mut self, step: Step<Ev>) -> Result<(), ProvisionError> {
        match step {
            Step::Net(evs) => {
                for e in evs {
                    if e.tag & MANIFEST_TAG != 0 {
                        let sid = (e.tag & !MANIFEST_TAG) as usize;
                        if e.kind == NetEventKind::Finished {
                            self.manifest_flow.remove(&sid);
                            let d = self.d();
                            self.schedule(d, Ev::ManifestDone(sid))?;
                        }
                        continue;
                    }
                    let h = e.tag as usize;
                    if self.holdings[h].inbound != Some(e.flow) {
                        continue;
                    }
                    match e.kind {
                        NetEventKind::Demoted => {
                            self.sync(h);
                            self.on_progress(h)?;
                        }
                        NetEventKind::Finished => self.on_stream_done(h)?,
                    }
                }
                Ok(())
            }
            Step::Event(ev) => self.on_event(ev),
        }
    }

    fn live(&self, sid: SessionId) -> bool {
        let s = &self.sessions[sid];
        !s.is_terminal() && !self.dead.contains(&s.vm)
    }

    fn on_event(&mut self, ev: Ev) -> Result<(), ProvisionError> {
        let d = self.d();
        match ev {
            Ev::PrepareArrives(sid) => {
                if self.live(sid) {
                    self.worker_on_prepare(sid)?;
                }
            }
            Ev::ManifestStart(sid) => {
                if self.live(sid) {
                    let dst = self.holdings[self.session_hold[sid]].ep;
                    let f = self.world.net.start_flow(FlowSpec {
                        src: self.mds,
                        dst,
                        class: Priority::Control,
                        base: 0,
                        end: self.cfg.manifest_bytes,
                        demote_at: None,
                        limit: Limit::None,
                        lag: 0,
                        tag: MANIFEST_TAG | sid as u64,
                    });
                    if self.world.net.flow(f).state == FlowState::Done {
                        self.schedule(d, Ev::ManifestDone(sid))?;
                    } else {
                        self.manifest_flow.insert(sid, f);
                    }
                }
            }
            Ev::ManifestDone(sid) => {
                if self.live(sid) {
                    let now = self.now();
                    let s = &mut self.sessions[sid];
                    s.t_manifest_done = Some(now);
                    s.advance(Phase::ManifestLoaded);
                    s.advance(Phase::ReadyReported);
                    s.t_ready = Some(now);
                    let msg = ProtocolMessage::WorkerReady {
                        function: s.function.to_string(),
                        vm: s.vm.0,
                    };
                    let from = self.ep_name(self.holdings[self.session_hold[sid]].ep);
                    self.record(from, "scheduler".into(), msg);
                    self.schedule(d, Ev::ReadyArrives(sid))?;
                }
            }
            Ev::ReadyArrives(sid) => {
                if self.live(sid) {
                    self.world.metrics.add("scheduler_control_messages", 2);
                    self.sessions[sid].advance(Phase::ContainerRequested);
                    self.session_seq[sid] += 1;
                    let seq = self.session_seq[sid];
                    let to = self.ep_name(self.holdings[self.session_hold[sid]].ep);
                    let msg = ProtocolMessage::CreateContainer {
                        function: self.sessions[sid].function.to_string(),
                    };
                    self.record("scheduler".into(), to, msg);
                    self.schedule(d, Ev::CreateArrives(sid))?;
                    let t = self.cfg.timeout_s;
                    self.schedule(t, Ev::Timeout(sid, seq))?;
                }
            }
            Ev::CreateArrives(sid) => {
                if self.live(sid) {
                    self.worker_on_create(sid)?;
                }
            }
            Ev::CoordArrives(sid) => {
                let start = self.now().max(self.aux_busy_until);
                let done = start + self.cfg.layer_root_cost_s * self.cfg.layer_count as f64;
                self.aux_busy_until = done;
                let wait = done - self.now() + d;
                self.schedule(wait, Ev::Coordinated(sid))?;
            }
            Ev::Coordinated(sid) => {
                if self.live(sid) {
                    self.coordinated(sid)?;
                }
            }
            Ev::OpenStream(h, gen) => {
                let hd = &self.holdings[h];
                if hd.gen == gen && hd.alive && hd.committed < hd.target && hd.inbound.is_none() {
                    self.open_stream(h)?;
                }
            }
            Ev::TrackerArrives(h, gen) => {
                if self.holdings[h].gen == gen && self.holdings[h].alive {
                    let start = self.now().max(self.aux_busy_until);
                    let done = start + self.cfg.tracker_cost_s;
                    self.aux_busy_until = done;
                    self.world.metrics.add("tracker_requests", 1);
                    let wait = done - self.now() + d;
                    self.schedule(wait, Ev::PieceGrant(h, gen))?;
                }
            }
            Ev::PieceGrant(h, gen) => {
                let hd = &self.holdings[h];
                if hd.gen == gen && hd.alive && hd.committed < hd.target && hd.inbound.is_none() {
                    self.fetch_piece(h)?;
                }
            }
            Ev::ContainerUp(sid) => {
                if self.live(sid) {
                    let now = self.now();
                    let s = &mut self.sessions[sid];
                    s.t_started = Some(now);
                    s.advance(Phase::ContainerStarted);
                    let msg = ProtocolMessage::ContainerCreated {
                        function: s.function.to_string(),
                        vm: s.vm.0,
                    };
                    self.notes.push_back(Notification::Started { session: sid, t: now });
                    let h = self.session_hold[sid];
                    let from = self.ep_name(self.holdings[h].ep);
                    self.record(from, "scheduler".into(), msg);
                    self.schedule(d, Ev::CreatedArrives)?;
                    if self.holdings[h].committed == self.holdings[h].target {
                        self.complete_session(sid);
                    }
                }
            }
            Ev::CreatedArrives => {
                self.world.metrics.add("scheduler_control_messages", 1);
            }
            Ev::Fail(vm) => self.fail_vm(vm)?,
            Ev::Detect(vm) => self.detect(vm)?,
            Ev::Timeout(sid, seq) => {
                let s = &self.sessions[sid];
                if self.session_seq[sid] == seq && self.live(sid) && s.phase < Phase::Fetching {
                    self.time_out(sid)?;
                }
            }
            Ev::Watchdog(h, seen) => {
                let hd = &self.holdings[h];
                if !hd.alive || hd.committed >= hd.target {
                    self.holdings[h].watchdog = false;
                    return Ok(());
                }
                let progress = self.progress(h);
                if progress <= seen {
                    if let Some(&sid) = self.holdings[h].sessions.iter().find(|&&s| self.live(s)) {
                        self.time_out(sid)?;
                        return Ok(());
                    }
                }
                let t = self.cfg.timeout_s;
                self.schedule(t, Ev::Watchdog(h, progress))?;
            }
        }
        Ok(())
    }

    /// Worker handling of PrepareFunction: fetch the manifest from the
    /// metadata store, then report ready.
    fn worker_on_prepare(&mut self, sid: SessionId) -> Result<(), ProvisionError> {
        let d = self.d();
        self.schedule(d, Ev::ManifestStart(sid))
    }

    /// Worker handling of CreateContainer: start fetching, or start the
    /// container at once if the startup blocks are already local.
    fn worker_on_create(&mut self, sid: SessionId) -> Result<(), ProvisionError> {
        let d = self.d();
        self.sessions[sid].advance(Phase::Fetching);
        let h = self.session_hold[sid];
        if self.holdings[h].gate {
            let t = self.start_delay(h);
            self.schedule(t, Ev::ContainerUp(sid))?;
        }
        if !self.holdings[h].started {
            self.holdings[h].started = true;
            let gen = self.holdings[h].gen;
            match self.cfg.policy {
                Policy::LayerTreeRoot => self.schedule(d, Ev::CoordArrives(sid))?,
                Policy::AllToAllTracker => self.schedule(d, Ev::TrackerArrives(h, gen))?,
                _ => self.schedule(d, Ev::OpenStream(h, gen))?,
            }
        }
        if !self.holdings[h].watchdog && self.holdings[h].committed < self.holdings[h].target {
            self.holdings[h].watchdog = true;
            let p = self.progress(h);
            let t = self.cfg.timeout_s;
            self.schedule(t, Ev::Watchdog(h, p))?;
        }
        Ok(())
    }

    fn coordinated(&mut self, sid: SessionId) -> Result<(), ProvisionError> {
        let h = self.session_hold[sid];
        let img = self.holdings[h].img;
        let vm = self.holdings[h].vm;
        if !self.holding_of.contains_key(&(LAYER_ROOT_VM, img)) {
            let r = self.holding_for(LAYER_ROOT_VM, img);
            self.holdings[r].started = true;
            let mut t = FunctionTree::new(FunctionId::new(self.images[img].image.as_str()));
            t.insert(LAYER_ROOT_VM).expect("fresh tree");
            self.layer_trees.insert(img, t);
            self.open_stream(r)?;
        }
        let tree = self.layer_trees.get_mut(&img).expect("created above");
        let parent = if tree.contains(vm) {
            tree.upstream_of(vm).ok().flatten()
        } else {
            tree.insert(vm).ok().flatten()
        };
        if let Some(p) = parent {
            self.sessions[sid].upstream = Upstream::Vm(p);
        }
        let gen = self.holdings[h].gen;
        let d = self.d();
        self.schedule(d, Ev::OpenStream(h, gen))
    }

    fn desired_source(&self, h: Hid) -> Src {
        let hd = &self.holdings[h];
        let parent = match self.cfg.policy {
            Policy::FaasnetFt => hd
                .sessions
                .first()
                .and_then(|&s| self.mgr.upstream(&self.sessions[s].function, hd.vm))
                .and_then(Upstream::vm),
            Policy::LayerTreeRoot => self
                .layer_trees
                .get(&hd.img)
                .and_then(|t| t.upstream_of(hd.vm).ok().flatten()),
            _ => None,
        };
        match parent.and_then(|p| self.holding_of.get(&(p, hd.img))) {
            Some(&s) => Src::Holding(s),
            None => Src::Registry,
        }
    }

    /// Limit a stream served by holding `s` must respect.
    fn limit_for(&self, s: Hid) -> Limit {
        let sd = &self.holdings[s];
        if sd.committed >= self.images[sd.img].n_blocks() {
            return Limit::None;
        }
        match sd.inbound {
            Some(f) if self.world.net.flow(f).state == FlowState::Active && sd.source.is_some() => {
                match self.cfg.policy {
                    Policy::AllToAllTracker => Limit::Static(self.images[sd.img].offset_of(sd.committed)),
                    _ => Limit::Follow(f),
                }
            }
            _ => Limit::Static(self.images[sd.img].offset_of(sd.committed)),
        }
    }

    fn open_stream(&mut self, h: Hid) -> Result<(), ProvisionError> {
        let src = self.desired_source(h);
        if let Src::Holding(s) = src {
            if !self.holdings[s].alive {
                // Upstream unreachable: wait for the scheduler to re-point us.
                self.holdings[h].waiting = true;
                self.world.metrics.add("upstream_unreachable", 1);
                return Ok(());
            }
        }
        let hd = &self.holdings[h];
        let p = self.images[hd.img].clone();
        let committed = hd.committed;
        let (class, demote_at) = if !self.lazy() || committed >= p.n_startup() {
            (if self.lazy() { Priority::Background } else { Priority::Startup }, None)
        } else {
            (Priority::Startup, Some(p.startup_bytes()))
        };
        let (src_ep, limit) = match src {
            Src::Registry => (self.registry, Limit::None),
            Src::Holding(s) => (self.holdings[s].ep, self.limit_for(s)),
        };
        let f = self.world.net.start_flow(FlowSpec {
            src: src_ep,
            dst: hd.ep,
            class,
            base: p.offset_of(committed),
            end: p.offset_of(hd.target),
            demote_at,
            limit,
            lag: p.max_block(),
            tag: h as u64,
        });
        let dst_name = self.ep_name(self.holdings[h].ep);
        let src_name = self.ep_name(src_ep);
        self.record(
            dst_name,
            src_name,
            ProtocolMessage::BlockRequest {
                image_id: p.image.to_string(),
                block_index: p.block_at(committed) as u64,
            },
        );
        let hd = &mut self.holdings[h];
        hd.inbound = Some(f);
        hd.source = Some(src);
        hd.waiting = false;
        if let Src::Holding(s) = src {
            self.holdings[s].outbound.push(f);
        }
        self.stream_forward(h);
        Ok(())
    }

    fn piece_end(&self, h: Hid) -> usize {
        let hd = &self.holdings[h];
        let p = &self.images[hd.img];
        let per = (self.cfg.piece_size / p.block_size).max(1) as usize;
        let bound = if hd.committed < p.n_startup() { p.n_startup() } else { hd.target };
        (hd.committed + per).min(bound).min(hd.target)
    }

    fn fetch_piece(&mut self, h: Hid) -> Result<(), ProvisionError> {
        let end = self.piece_end(h);
        let hd = &self.holdings[h];
        let img = hd.img;
        let candidates: Vec<Hid> = self.by_image[img]
            .iter()
            .copied()
            .filter(|&o| o != h && self.holdings[o].alive && self.holdings[o].committed >= end)
            .collect();
        let pick = self.world.rng.gen_range(0..=candidates.len());
        let src = candidates.get(pick).map_or(Src::Registry, |&o| Src::Holding(o));
        let p = self.images[img].clone();
        let hd = &self.holdings[h];
        let class = if hd.committed < p.n_startup() {
            Priority::Startup
        } else {
            Priority::Background
        };
        let src_ep = match src {
            Src::Registry => self.registry,
            Src::Holding(o) => self.holdings[o].ep,
        };
        let f = self.world.net.start_flow(FlowSpec {
            src: src_ep,
            dst: hd.ep,
            class,
            base: p.offset_of(hd.committed),
            end: p.offset_of(end),
            demote_at: None,
            limit: Limit::None,
            lag: p.max_block(),
            tag: h as u64,
        });
        let hd = &mut self.holdings[h];
        hd.inbound = Some(f);
        hd.source = Some(src);
        hd.waiting = false;
        if let Src::Holding(o) = src {
            self.holdings[o].outbound.push(f);
        }
        Ok(())
    }

    /// Propagates a holding's receive state to every stream it serves:
    /// blocks are forwarded as soon as they are whole.
    fn stream_forward(&mut self, h: Hid) {
        let limit = self.limit_for(h);
        let outs = std::mem::take(&mut self.holdings[h].outbound);
        let mut keep = Vec::with_capacity(outs.len());
        for f in outs {
            if self.world.net.flow(f).state == FlowState::Active {
                self.world.net.set_limit(f, limit);
                keep.push(f);
            }
        }
        self.holdings[h].outbound = keep;
    }

    /// Commits whole blocks received so far on `h` and its upstream chain.
    fn sync(&mut self, h: Hid) {
        let mut chain = vec![h];
        let mut cur = h;
        while let (Some(_), Some(Src::Holding(s))) = (self.holdings[cur].inbound, self.holdings[cur].source) {
            if chain.len() > self.holdings.len() {
                break;
            }
            chain.push(s);
            cur = s;
        }
        for &x in chain.iter().rev() {
            self.commit(x);
        }
    }

    fn commit(&mut self, h: Hid) {
        let Some(f) = self.holdings[h].inbound else { return };
        let pos = self.world.net.flow(f).pos();
        let hd = &self.holdings[h];
        let p = self.images[hd.img].clone();
        let upto = p.blocks_within(pos).min(hd.target);
        if upto <= hd.committed {
            return;
        }
        let from = hd.committed;
        let src = hd.source;
        let mut fresh = Vec::with_capacity(upto - from);
        for k in from..upto {
            let d = match src {
                Some(Src::Holding(s)) => match self.holdings[s].digests.get(k) {
                    Some(d) => *d,
                    None => {
                        self.integrity_errors += 1;
                        [0; 32]
                    }
                },
                _ => p.block_digest(p.block_at(k)),
            };
            fresh.push(d);
        }
        let hd = &mut self.holdings[h];
        hd.digests.extend(fresh);
        hd.committed = upto;
    }

    fn progress(&self, h: Hid) -> u64 {
        let hd = &self.holdings[h];
        let base = self.images[hd.img].offset_of(hd.committed);
        match hd.inbound {
            Some(f) => base.max(self.world.net.flow(f).pos() as u64),
            None => base,
        }
    }

    fn check_gate(&mut self, h: Hid) -> bool {
        let hd = &self.holdings[h];
        let p = &self.images[hd.img];
        let ready = if self.lazy() {
            hd.committed >= p.n_startup()
        } else {
            hd.committed >= p.n_blocks()
        };
        if ready && !hd.gate {
            self.holdings[h].gate = true;
            return true;
        }
        false
    }

    /// Startup decompression plus the fixed container start cost.
    fn start_delay(&self, h: Hid) -> f64 {
        let unpack = if self.cfg.decompress_mbps > 0.0 {
            self.images[self.holdings[h].img].startup_raw_bytes() as f64 / (self.cfg.decompress_mbps * 1e6)
        } else {
            0.0
        };
        self.cfg.container_start_s + unpack
    }

    fn on_progress(&mut self, h: Hid) -> Result<(), ProvisionError> {
        let committed = self.holdings[h].committed;
        for &sid in &self.holdings[h].sessions {
            self.sessions[sid].blocks_received = committed;
        }
        if self.check_gate(h) {
            let t = self.start_delay(h);
            let sids = self.holdings[h].sessions.clone();
            for sid in sids {
                if self.live(sid) && self.sessions[sid].phase == Phase::Fetching {
                    self.schedule(t, Ev::ContainerUp(sid))?;
                }
            }
        }
        if committed >= self.holdings[h].target {
            let sids = self.holdings[h].sessions.clone();
            for sid in sids {
                if self.live(sid) && self.sessions[sid].phase == Phase::ContainerStarted {
                    self.complete_session(sid);
                }
            }
        }
        Ok(())
    }

    fn on_stream_done(&mut self, h: Hid) -> Result<(), ProvisionError> {
        self.sync(h);
        let f = self.holdings[h].inbound.take().expect("finished stream");
        if let Some(Src::Holding(s)) = self.holdings[h].source {
            self.holdings[s].outbound.retain(|&o| o != f);
        }
        self.stream_forward(h);
        self.on_progress(h)?;
        let hd = &self.holdings[h];
        if self.cfg.policy == Policy::AllToAllTracker && hd.alive && hd.committed < hd.target {
            let gen = hd.gen;
            let d = self.d();
            self.schedule(d, Ev::TrackerArrives(h, gen))?;
        }
        Ok(())
    }

    fn complete_session(&mut self, sid: SessionId) {
        let h = self.session_hold[sid];
        let hd = &self.holdings[h];
        let p = &self.images[hd.img];
        let mut ok = hd.digests.len() == hd.committed;
        ok &= (0..hd.committed).all(|k| hd.digests[k] == p.block_digest(p.block_at(k)));
        if hd.target == p.n_blocks() {
            let mut by_index = vec![[0u8; 32]; p.n_blocks()];
            for k in 0..hd.committed {
                by_index[p.block_at(k)] = hd.digests[k];
            }
            ok &= chain_digest(&by_index) == p.content_digest();
        }
        let now = self.now();
        let committed = hd.committed;
        let s = &mut self.sessions[sid];
        s.blocks_received = committed;
        s.digest_ok = Some(ok);
        s.t_completed = Some(now);
        s.advance(Phase::Completed);
        self.notes.push_back(Notification::Completed { session: sid, t: now });
    }

    fn time_out(&mut self, sid: SessionId) -> Result<(), ProvisionError> {
        self.world.metrics.add("session_timeouts", 1);
        let vm = self.sessions[sid].vm;
        self.sessions[sid].failure = Some("SessionTimeout".into());
        self.fail_vm(vm)?;
        self.detect(vm)
    }

    /// Tears down a holding: its own stream stops and its children wait
    /// for a new upstream.
    fn detach_holding(&mut self, h: Hid) {
        self.sync(h);
        if let Some(f) = self.holdings[h].inbound.take() {
            self.world.net.abort_flow(f);
            if let Some(Src::Holding(s)) = self.holdings[h].source {
                self.holdings[s].outbound.retain(|&o| o != f);
            }
        }
        self.holdings[h].alive = false;
        let outs = std::mem::take(&mut self.holdings[h].outbound);
        for f in outs {
            if self.world.net.flow(f).state != FlowState::Active {
                continue;
            }
            let c = self.world.net.flow(f).tag as usize;
            self.sync(c);
            self.world.net.abort_flow(f);
            self.holdings[c].inbound = None;
            self.holdings[c].waiting = true;
            self.stream_forward(c);
        }
    }

    fn holdings_on(&self, vm: VmId) -> Vec<Hid> {
        self.holding_of
            .range((vm, 0)..=(vm, usize::MAX))
            .map(|(_, &h)| h)
            .collect()
    }

    fn fail_vm(&mut self, vm: VmId) -> Result<(), ProvisionError> {
        if !self.dead.insert(vm) {
            return Ok(());
        }
        self.world.metrics.add("vm_failures", 1);
        for h in self.holdings_on(vm) {
            self.detach_holding(h);
            let now = self.now();
            for sid in self.holdings[h].sessions.clone() {
                if !self.sessions[sid].is_terminal() {
                    let s = &mut self.sessions[sid];
                    s.failure.get_or_insert_with(|| "vm failed".into());
                    s.advance(Phase::Failed);
                    self.notes.push_back(Notification::Failed { session: sid, t: now });
                }
                if let Some(f) = self.manifest_flow.remove(&sid) {
                    self.world.net.abort_flow(f);
                }
            }
        }
        let t = self.mgr.config().failure_detection_s();
        self.schedule(t, Ev::Detect(vm))
    }

    /// Returns VMs idle past the timeout to the free pool. Their image data
    /// is discarded, so a reused VM starts cold.
    pub fn reclaim_idle(&mut self) -> Result<Vec<VmId>, ProvisionError> {
        let now = self.now();
        let vms = self.mgr.reclaim_idle(now);
        for &vm in &vms {
            for h in self.holdings_on(vm) {
                self.detach_holding(h);
                let img = self.holdings[h].img;
                self.holding_of.remove(&(vm, img));
                self.by_image[img].retain(|&o| o != h);
            }
        }
        if !vms.is_empty() {
            self.world.metrics.add("vms_reclaimed", vms.len() as u64);
            self.repoint_all()?;
        }
        Ok(vms)
    }

    fn detect(&mut self, vm: VmId) -> Result<(), ProvisionError> {
        if self.mgr.vm(vm).is_none() {
            return Ok(());
        }
        let reports = self.mgr.on_vm_failure(vm)?;
        let rotations: usize = reports.iter().map(|r| r.1.rotations.len()).sum();
        self.world.metrics.add("rebalance_rotations", rotations as u64);
        for t in self.layer_trees.values_mut() {
            let _ = t.delete(vm);
        }
        self.repoint_all()
    }

    /// Re-points every unfinished stream whose tree parent changed.
    fn repoint_all(&mut self) -> Result<(), ProvisionError> {
        let rtt = self.cfg.rtt_s;
        for h in 0..self.holdings.len() {
            let hd = &self.holdings[h];
            if !hd.alive || hd.committed >= hd.target {
                continue;
            }
            if self.cfg.policy == Policy::AllToAllTracker {
                if hd.waiting {
                    let gen = hd.gen;
                    self.schedule(rtt, Ev::TrackerArrives(h, gen))?;
                }
                continue;
            }
            let active = hd
                .inbound
                .is_some_and(|f| self.world.net.flow(f).state == FlowState::Active);
            if !active && !hd.waiting {
                continue;
            }
            let want = self.desired_source(h);
            if active && hd.source == Some(want) {
                continue;
            }
            if active {
                self.sync(h);
                let f = self.holdings[h].inbound.take().expect("active");
                self.world.net.abort_flow(f);
                if let Some(Src::Holding(s)) = self.holdings[h].source {
                    self.holdings[s].outbound.retain(|&o| o != f);
                }
                self.stream_forward(h);
            }
            self.world.metrics.add("repoints", 1);
            let hd = &mut self.holdings[h];
            hd.gen += 1;
            hd.waiting = true;
            let gen = hd.gen;
            self.schedule(rtt, Ev::OpenStream(h, gen))?;
        }
        Ok(())
    }

    /// Data flows only: everything except manifest transfers.
    fn is_data(f: &crate::simnet::Flow) -> bool {
        f.tag & MANIFEST_TAG == 0
    }

    /// Data bytes `(in, out)` through `vm`'s NIC.
    pub fn vm_data_bytes(&self, vm: VmId) -> (u64, u64) {
        let Some(&ep) = self.vm_eps.get(&vm) else { return (0, 0) };
        let mut inb = 0;
        let mut out = 0;
        for f in self.world.net.flows().iter().filter(|f| Self::is_data(f)) {
            if f.dst == ep {
                inb += f.delivered_bytes();
            }
            if f.src == ep {
                out += f.delivered_bytes();
            }
        }
        (inb, out)
    }

    pub fn vm_endpoint(&self, vm: VmId) -> Option<EndpointId> {
        self.vm_eps.get(&vm).copied()
    }

    /// First and last block arrival times at `vm` for `image`.
    pub fn stream_times(&self, vm: VmId, image: &ImageRef) -> Option<(f64, f64)> {
        let img = *self.image_idx.get(image)?;
        let p = &self.images[img];
        let &h = self.holding_of.get(&(vm, img))?;
        let ep = self.holdings[h].ep;
        let mut first = f64::INFINITY;
        let mut last = f64::NEG_INFINITY;
        for f in self.world.net.flows() {
            if f.dst != ep || f.tag != h as u64 || f.delivered_bytes() == 0 {
                continue;
            }
            let k = p.blocks_within(f.base as f64);
            if let Some(t) = f.time_at(p.offset_of(k + 1) as f64) {
                first = first.min(t);
            }
            if let Some(t) = f.stopped {
                last = last.max(t);
            }
        }
        first.is_finite().then_some((first, last))
    }

    /// Bandwidth timeline of `vm` over data flows.
    pub fn vm_bandwidth(&self, vm: VmId, interval: f64) -> Vec<BandwidthSample> {
        match self.vm_eps.get(&vm) {
            Some(&ep) => sample_bandwidth(&self.world.net, ep, interval, self.now(), Self::is_data),
            None => Vec::new(),
        }
    }

    pub fn audit(&self) -> Audit {
        let net = &self.world.net;
        let mut registry = 0;
        let mut mds = 0;
        let mut sched = 0;
        let mut by_vm = BTreeMap::new();
        let mut edges: BTreeMap<(u32, u32, usize), Vec<(usize, usize)>> = BTreeMap::new();
        let mut sources: BTreeMap<Hid, BTreeSet<u32>> = BTreeMap::new();
        for f in net.flows() {
            let b = f.delivered_bytes();
            if f.src == self.scheduler || f.dst == self.scheduler {
                sched += b;
            }
            if !Self::is_data(f) {
                if f.src == self.mds {
                    mds += b;
                }
                continue;
            }
            let h = f.tag as usize;
            let hd = &self.holdings[h];
            if f.src == self.registry {
                registry += b;
                *by_vm.entry(hd.vm).or_insert(0) += b;
            }
            let p = &self.images[hd.img];
            let lo = p.blocks_within(f.base as f64);
            let hi = p.blocks_within((f.base + b) as f64);
            if hi > lo {
                edges.entry((f.src.0, f.dst.0, hd.img)).or_default().push((lo, hi));
                sources.entry(h).or_default().insert(f.src.0);
            }
        }
        let mut overlaps = 0;
        let mut gaps = 0;
        for ((_, dst, img), mut ranges) in edges {
            ranges.sort_unstable();
            if ranges.windows(2).any(|w| w[1].0 < w[0].1) {
                overlaps += 1;
            }
            let carried: usize = ranges.iter().map(|r| r.1 - r.0).sum();
            let h = self
                .holdings
                .iter()
                .position(|hd| hd.ep.0 == dst && hd.img == img)
                .expect("flow into a holding");
            if sources.get(&h).map_or(0, |s| s.len()) == 1 && self.holdings[h].alive {
                let hd = &self.holdings[h];
                if carried != hd.committed {
                    gaps += 1;
                }
            }
        }
        let live: Vec<&ProvisionSession> = self.sessions.iter().filter(|s| !s.warm).collect();
        Audit {
            sessions: live.len(),
            completed: live.iter().filter(|s| s.phase == Phase::Completed).count(),
            failed: live.iter().filter(|s| s.phase == Phase::Failed).count(),
            digest_ok: live.iter().filter(|s| s.digest_ok == Some(true)).count(),
            registry_data_bytes: registry,
            mds_bytes: mds,
            scheduler_data_bytes: sched,
            scheduler_messages: self.counter("scheduler_control_messages"),
            registry_bytes_by_vm: by_vm,
            edge_overlaps: overlaps,
            edge_gaps: gaps,
            integrity_errors: self.integrity_errors,
            capacity_violations: net.capacity_violations(),
        }
    }

    /// Control messages sent so far, plus one BlockData per block carried.
    pub fn message_log(&self) -> Vec<LogEntry> {
        let mut out = self.log.clone();
        if !self.cfg.log_messages {
            return out;
        }
        for f in self.world.net.flows().iter().filter(|f| Self::is_data(f)) {
            let hd = &self.holdings[f.tag as usize];
            let p = &self.images[hd.img];
            let lo = p.blocks_within(f.base as f64);
            let hi = p.blocks_within((f.base + f.delivered_bytes()) as f64);
            for k in lo..hi {
                let block = p.block_at(k);
                out.push(LogEntry {
                    t: f.time_at(p.offset_of(k + 1) as f64).unwrap_or(f64::NAN),
                    from: self.ep_name(f.src),
                    to: self.ep_name(f.dst),
                    msg: ProtocolMessage::BlockData {
                        image_id: p.image.to_string(),
                        block_index: block as u64,
                        payload_len: p.compressed_len(block) as u32,
                    },
                });
            }
        }
        out.sort_by(|a, b| a.t.total_cmp(&b.t));
        out
    }

    pub fn report(&self, concurrency: usize) -> MetricReport {
        let sessions: Vec<SessionRecord> = self
            .sessions
            .iter()
            .filter(|s| !s.warm)
            .map(|s| SessionRecord {
                function_id: s.function.to_string(),
                vm_id: s.vm.0,
                t_request: s.t_request,
                t_ready: s.t_ready.unwrap_or(f64::NAN),
                t_started: s.t_started.unwrap_or(f64::NAN),
                upstream: s.upstream.to_string(),
                completed: s.phase == Phase::Completed,
                t_completed: s.t_completed.unwrap_or(f64::NAN),
            })
            .collect();
        let audit = self.audit();
        let summary = Summary::from_sessions(
            self.cfg.policy.as_str(),
            concurrency,
            &sessions,
            audit.registry_data_bytes,
            audit.mds_bytes,
        );
        let mut endpoints = Vec::new();
        let interval = self.cfg.sample_interval_s;
        if interval > 0.0 && self.now() > 0.0 {
            let bins = self.world.net.bandwidth_buckets(interval, self.now(), Self::is_data);
            let mut eps = vec![self.registry, self.mds];
            eps.extend(self.aux);
            eps.extend(self.vm_eps.values().copied());
            for ep in eps {
                endpoints.push(EndpointTimeline {
                    endpoint: self.ep_name(ep),
                    samples: bins[ep.0 as usize]
                        .iter()
                        .enumerate()
                        .map(|(i, &(a, b))| BandwidthSample {
                            t: i as f64 * interval,
                            in_bps: a / interval,
                            out_bps: b / interval,
                        })
                        .collect(),
                });
            }
        }
        let mut counters = self.world.metrics.counters().clone();
        counters.insert("allocation_epochs".into(), self.world.net.epochs());
        counters.insert("events_processed".into(), self.world.processed());
        MetricReport {
            summary,
            sessions,
            endpoints,
            counters,
        }
    }
}
