//! Runs scenarios end to end: static bursts, trace replay through the
//! autoscaler, and parameter sweeps.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::ftmanager::FtManager;
use crate::ids::{FunctionId, ImageRef};
use crate::provision::{Audit, Cluster, Notification, Policy, ProvisionError, SessionId};
use crate::scenario::{Scenario, ScenarioError, WorkloadSpec};
use crate::simnet::{fmt_s, MetricReport, Summary};
use crate::workload::{self, ArrivalMode, TraceError, TraceEvent};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Provision(#[from] ProvisionError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Sweep(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

pub const TIMELINE_HEADER: [&str; 5] = ["t", "rps", "mean_response_s", "ft_height", "active_vms"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineRow {
    pub t: u64,
    pub rps: u64,
    /// Mean response of requests arriving in this second.
    pub mean_response_s: Option<f64>,
    /// Tallest function tree at the end of the second.
    pub ft_height: u32,
    pub active_vms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayStats {
    pub requests: usize,
    pub unserved: usize,
    pub scale_outs: usize,
    pub max_containers: usize,
    pub request_duration_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutput {
    pub seed: u64,
    pub policy: Policy,
    pub report: MetricReport,
    pub audit: Audit,
    pub timeline: Vec<TimelineRow>,
    pub replay: Option<ReplayStats>,
    /// Compressed bytes each VM fetches before its container can start.
    pub startup_fetch_bytes: u64,
}

/// Resolves the seed: an explicit override wins, then the scenario's own.
pub fn effective_seed(sc: &Scenario, cli: Option<u64>) -> u64 {
    cli.or(sc.seed).unwrap_or(crate::scenario::DEFAULT_SEED)
}

fn function_name(i: usize) -> FunctionId {
    FunctionId::new(format!("f{i:03}"))
}

pub fn build_cluster(sc: &Scenario, seed: u64) -> Result<Cluster, ExperimentError> {
    sc.validate()?;
    let images = sc.build_images()?;
    let mgr = FtManager::with_vms(sc.manager.clone(), sc.vm_count);
    let mut cfg = sc.cluster.clone();
    cfg.policy = sc.policy;
    Ok(Cluster::new(cfg, mgr, images, seed)?)
}

/// Runs `sc` to completion.
pub fn run_scenario(sc: &Scenario, seed: u64) -> Result<RunOutput, ExperimentError> {
    let mut cluster = build_cluster(sc, seed)?;
    let images: Vec<ImageRef> = sc.images.iter().map(|i| ImageRef::new(i.name.clone())).collect();
    let (concurrency, timeline, replay) = match &sc.workload {
        WorkloadSpec::Burst {
            functions,
            concurrency,
            memory_mb,
        } => {
            let fns: Vec<FunctionId> = (0..*functions).map(function_name).collect();
            for (i, f) in fns.iter().enumerate() {
                cluster
                    .manager_mut()
                    .register_function(f.clone(), images[i % images.len()].clone(), *memory_mb)
                    .map_err(ProvisionError::from)?;
            }
            for f in &fns {
                cluster.provision(f, *concurrency)?;
            }
            cluster.run()?;
            (*concurrency, Vec::new(), None)
        }
        WorkloadSpec::Trace {
            path,
            rps_factor,
            duration_factor,
            request_duration_s,
            arrivals,
            headroom,
            memory_mb,
        } => {
            let p = sc.resolve(path);
            let text = fs::read_to_string(&p).map_err(|e| ExperimentError::Io {
                path: p.clone(),
                reason: e.to_string(),
            })?;
            let events = workload::scale_trace(&workload::parse_trace(&text)?, *rps_factor, *duration_factor, seed);
            let r = Replay::new(&events, *arrivals, seed, *request_duration_s, *headroom, *memory_mb);
            r.run(&mut cluster, &images)?
        }
        WorkloadSpec::Synthetic {
            burst,
            arrivals,
            headroom,
            memory_mb,
        } => {
            let events = workload::generate_burst(burst);
            let r = Replay::new(&events, *arrivals, seed, burst.mean_duration_s, *headroom, *memory_mb);
            r.run(&mut cluster, &images)?
        }
    };
    let startup_fetch_bytes = sc
        .build_images()?
        .iter()
        .map(|p| if sc.policy == Policy::RegistryFullPull { p.total_bytes() } else { p.startup_bytes() })
        .sum();
    Ok(RunOutput {
        seed,
        policy: sc.policy,
        report: cluster.report(concurrency),
        audit: cluster.audit(),
        timeline,
        replay,
        startup_fetch_bytes,
    })
}

#[derive(PartialEq)]
struct Due(f64, usize, SessionId);

impl Eq for Due {}

impl PartialOrd for Due {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Due {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then_with(|| o.1.cmp(&self.1))
    }
}

struct Req {
    t: f64,
    done: Option<f64>,
}

#[derive(Default)]
struct FnState {
    idle: Vec<SessionId>,
    queue: VecDeque<usize>,
}

/// Per-second autoscaling replay: each function keeps
/// `ceil(rps * duration * headroom)` containers, requests are served by
/// the most recently freed container and queue while none is free.
struct Replay {
    functions: Vec<FunctionId>,
    counts: Vec<Vec<u64>>,
    arrivals: Vec<(f64, usize)>,
    duration: f64,
    headroom: f64,
    memory_mb: u32,
}

/// Seconds the replay keeps draining queues past the end of the trace.
const MAX_DRAIN_S: u64 = 7200;

impl Replay {
    fn new(events: &[TraceEvent], mode: ArrivalMode, seed: u64, duration: f64, headroom: f64, memory_mb: u32) -> Self {
        let mut index = BTreeMap::new();
        let mut functions = Vec::new();
        for e in events {
            index.entry(e.function.clone()).or_insert_with(|| {
                functions.push(e.function.clone());
                functions.len() - 1
            });
        }
        let horizon = events.iter().map(|e| e.t.floor() as usize + 1).max().unwrap_or(0);
        let mut counts = vec![vec![0u64; horizon]; functions.len()];
        for e in events {
            counts[index[&e.function]][e.t.floor() as usize] += e.count;
        }
        let arrivals = workload::arrivals(events, mode, seed)
            .into_iter()
            .map(|(t, f)| (t, index[&f]))
            .collect();
        Replay {
            functions,
            counts,
            arrivals,
            duration,
            headroom,
            memory_mb,
        }
    }

    fn target(&self, f: usize, s: usize) -> usize {
        let rps = self.counts[f].get(s).copied().unwrap_or(0) as f64;
        (rps * self.duration * self.headroom - 1e-9).ceil().max(0.0) as usize
    }

    fn run(
        &self,
        cluster: &mut Cluster,
        images: &[ImageRef],
    ) -> Result<(usize, Vec<TimelineRow>, Option<ReplayStats>), ExperimentError> {
        let nf = self.functions.len();
        for (i, f) in self.functions.iter().enumerate() {
            cluster
                .manager_mut()
                .register_function(f.clone(), images[i % images.len()].clone(), self.memory_mb)
                .map_err(ProvisionError::from)?;
        }
        let mut st: Vec<FnState> = (0..nf).map(|_| FnState::default()).collect();
        let mut owner: BTreeMap<SessionId, usize> = BTreeMap::new();
        for f in 0..nf {
            let before = cluster.sessions().len();
            cluster.prewarm(&self.functions[f], self.target(f, 0))?;
            st[f].idle.extend(before..cluster.sessions().len());
        }
        let horizon = self.counts.first().map_or(0, Vec::len) as u64;
        let mut reqs: Vec<Req> = Vec::with_capacity(self.arrivals.len());
        let mut req_fn: Vec<usize> = Vec::with_capacity(self.arrivals.len());
        let mut due: BinaryHeap<Due> = BinaryHeap::new();
        let mut next = 0;
        let mut scale_outs = 0;
        let mut max_containers = 0;
        let mut snaps: Vec<(u32, usize)> = Vec::new();
        let mut s: u64 = 0;
        loop {
            let reclaimed = cluster.reclaim_idle()?;
            if !reclaimed.is_empty() {
                for fs in &mut st {
                    fs.idle.retain(|&sid| !reclaimed.contains(&cluster.session(sid).vm));
                }
            }
            for f in 0..nf {
                let want = self.target(f, s as usize);
                let have = cluster.manager().tree(&self.functions[f]).map_or(0, |t| t.len());
                if want > have {
                    let before = cluster.sessions().len();
                    cluster.provision(&self.functions[f], want)?;
                    for sid in before..cluster.sessions().len() {
                        owner.insert(sid, f);
                    }
                    scale_outs += 1;
                }
            }
            let t1 = (s + 1) as f64;
            loop {
                let ta = self.arrivals.get(next).map_or(f64::INFINITY, |a| a.0);
                let tc = due.peek().map_or(f64::INFINITY, |d| d.0);
                let tn = ta.min(tc).min(t1);
                match cluster.step(tn)? {
                    Some(Notification::Started { session, .. }) => {
                        if let Some(&f) = owner.get(&session) {
                            st[f].idle.push(session);
                            self.dispatch(cluster, &mut st[f], &mut reqs, &mut due)?;
                        }
                    }
                    Some(_) => {}
                    None if tn >= t1 => break,
                    None if tc <= ta => {
                        let Due(t, r, sid) = due.pop().expect("peeked");
                        reqs[r].done = Some(t);
                        let vm = cluster.session(sid).vm;
                        let _ = cluster.manager_mut().mark_idle(vm, t);
                        let f = req_fn[r];
                        st[f].idle.push(sid);
                        self.dispatch(cluster, &mut st[f], &mut reqs, &mut due)?;
                    }
                    None => {
                        let (t, f) = self.arrivals[next];
                        next += 1;
                        st[f].queue.push_back(reqs.len());
                        reqs.push(Req { t, done: None });
                        req_fn.push(f);
                        self.dispatch(cluster, &mut st[f], &mut reqs, &mut due)?;
                    }
                }
            }
            let mut height = 0;
            let mut containers = 0;
            for f in &self.functions {
                if let Some(t) = cluster.manager().tree(f) {
                    height = height.max(t.height());
                    containers += t.len();
                }
            }
            max_containers = max_containers.max(containers);
            snaps.push((height, cluster.manager().active_vms().count()));
            s += 1;
            let drained = next == self.arrivals.len() && due.is_empty() && st.iter().all(|f| f.queue.is_empty());
            if (s >= horizon && drained) || s >= horizon + MAX_DRAIN_S {
                break;
            }
        }
        let mut sum = vec![(0.0f64, 0usize, 0u64); snaps.len()];
        for r in &reqs {
            let k = (r.t.floor() as usize).min(snaps.len() - 1);
            sum[k].2 += 1;
            if let Some(d) = r.done {
                sum[k].0 += d - r.t;
                sum[k].1 += 1;
            }
        }
        let timeline = snaps
            .iter()
            .zip(&sum)
            .enumerate()
            .map(|(i, (&(h, vms), &(tot, n, rps)))| TimelineRow {
                t: i as u64,
                rps,
                mean_response_s: (n > 0).then(|| tot / n as f64),
                ft_height: h,
                active_vms: vms,
            })
            .collect();
        let stats = ReplayStats {
            requests: reqs.len(),
            unserved: reqs.iter().filter(|r| r.done.is_none()).count(),
            scale_outs,
            max_containers,
            request_duration_s: self.duration,
        };
        Ok((max_containers, timeline, Some(stats)))
    }

    fn dispatch(
        &self,
        cluster: &mut Cluster,
        fs: &mut FnState,
        reqs: &mut [Req],
        due: &mut BinaryHeap<Due>,
    ) -> Result<(), ExperimentError> {
        let now = cluster.now();
        while !fs.queue.is_empty() {
            let Some(sid) = fs.idle.pop() else { break };
            let vm = cluster.session(sid).vm;
            if cluster.manager().vm(vm).is_none() {
                continue;
            }
            let r = fs.queue.pop_front().expect("non-empty");
            let _ = cluster.manager_mut().mark_busy(vm, now);
            due.push(Due(now.max(reqs[r].t) + self.duration, r, sid));
        }
        Ok(())
    }
}

/// How long after `onset` per-second mean response stayed above
/// `1.1 x` the pre-onset baseline, looking no further than `until`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Recovery {
    pub onset: f64,
    pub baseline_s: f64,
    pub recovery_s: f64,
    pub peak_height: u32,
}

pub fn recovery(timeline: &[TimelineRow], onset: f64, until: f64, fallback_baseline: f64) -> Recovery {
    let o = onset.floor() as u64;
    let pre: Vec<f64> = timeline
        .iter()
        .filter(|r| r.t < o && r.t + 60 >= o)
        .filter_map(|r| r.mean_response_s)
        .collect();
    let baseline = if pre.is_empty() {
        fallback_baseline
    } else {
        pre.iter().sum::<f64>() / pre.len() as f64
    };
    let window = timeline.iter().filter(|r| r.t >= o && (r.t as f64) < until);
    let mut last_bad = None;
    let mut peak = 0;
    for r in window {
        peak = peak.max(r.ft_height);
        if r.mean_response_s.is_some_and(|m| m > 1.1 * baseline) {
            last_bad = Some(r.t);
        }
    }
    Recovery {
        onset,
        baseline_s: baseline,
        recovery_s: last_bad.map_or(0.0, |t| (t + 1) as f64 - onset),
        peak_height: peak,
    }
}

pub fn write_timeline<W: io::Write>(rows: &[TimelineRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TIMELINE_HEADER)?;
    for r in rows {
        out.write_record([
            r.t.to_string(),
            r.rps.to_string(),
            r.mean_response_s.map(fmt_s).unwrap_or_default(),
            r.ft_height.to_string(),
            r.active_vms.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    seed: u64,
    policy: Policy,
    scenario: toml::Value,
    summary: &'a Summary,
    audit: &'a Audit,
    replay: &'a Option<ReplayStats>,
    counters: &'a BTreeMap<String, u64>,
}

/// Config, seed and headline results of one run as JSON.
pub fn run_manifest(sc: &Scenario, out: &RunOutput) -> String {
    let mut echoed = sc.clone();
    echoed.seed = Some(out.seed);
    let m = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed: out.seed,
        policy: out.policy,
        scenario: toml::Value::try_from(&echoed).expect("scenario serializes"),
        summary: &out.report.summary,
        audit: &out.audit,
        replay: &out.replay,
        counters: &out.report.counters,
    };
    serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n"
}

fn io_err(path: &Path, e: impl fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes `sessions.csv`, `endpoints.csv`, `summary.csv`,
/// `run_manifest.json` and, for replays, `timeline.csv` into `dir`.
pub fn write_outputs(sc: &Scenario, out: &RunOutput, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut written = Vec::new();
    let mut csv_file = |name: &str, f: &dyn Fn(fs::File) -> csv::Result<()>| -> Result<(), ExperimentError> {
        let p = dir.join(name);
        let file = fs::File::create(&p).map_err(|e| io_err(&p, e))?;
        f(file).map_err(|e| io_err(&p, e))?;
        written.push(p);
        Ok(())
    };
    csv_file("sessions.csv", &|w| out.report.write_sessions(w))?;
    csv_file("endpoints.csv", &|w| out.report.write_endpoints(w))?;
    csv_file("summary.csv", &|w| out.report.write_summary(w))?;
    if out.replay.is_some() {
        csv_file("timeline.csv", &|w| write_timeline(&out.timeline, w))?;
    }
    let p = dir.join("run_manifest.json");
    fs::write(&p, run_manifest(sc, out)).map_err(|e| io_err(&p, e))?;
    written.push(p);
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Concurrency,
    BlockSize,
    FunctionsPerVm,
    Policy,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Concurrency => "concurrency",
            SweepAxis::BlockSize => "block_size",
            SweepAxis::FunctionsPerVm => "functions_per_vm",
            SweepAxis::Policy => "policy",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            SweepAxis::Concurrency,
            SweepAxis::BlockSize,
            SweepAxis::FunctionsPerVm,
            SweepAxis::Policy,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| format!("unknown sweep axis `{s}`"))
    }
}

/// Parses `4096`, `256K`, `1M` or `4MiB` into bytes.
pub fn parse_size(s: &str) -> Option<u64> {
    let t = s.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (num, unit) = t.split_at(split);
    let n: u64 = num.parse().ok()?;
    let mul = match unit.to_ascii_lowercase().as_str() {
        "" | "b" => 1,
        "k" | "kb" | "kib" => 1 << 10,
        "m" | "mb" | "mib" => 1 << 20,
        "g" | "gb" | "gib" => 1 << 30,
        _ => return None,
    };
    n.checked_mul(mul)
}

pub const SWEEP_EXTRA: [&str; 2] = ["startup_fetch_bytes", "latency_stddev_s"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub summary: Summary,
    pub startup_fetch_bytes: u64,
    pub latency_stddev_s: f64,
}

/// One scenario per sweep point, in row order.
pub fn sweep_scenarios(
    base: &Scenario,
    axis: SweepAxis,
    values: &[String],
    policies: &[Policy],
) -> Result<Vec<(String, Scenario)>, ExperimentError> {
    let bad = |m: String| ExperimentError::Sweep(m);
    let num = |v: &str| -> Result<usize, ExperimentError> {
        v.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| bad(format!("`{v}` is not a positive integer")))
    };
    let mut out = Vec::new();
    for v in values {
        let mut sc = base.clone();
        match axis {
            SweepAxis::Policy => {
                let p: Policy = v.parse().map_err(bad)?;
                sc.set_policy(p);
                out.push((v.clone(), sc));
                continue;
            }
            SweepAxis::Concurrency => {
                let n = num(v)?;
                match &mut sc.workload {
                    WorkloadSpec::Burst { concurrency, .. } => *concurrency = n,
                    _ => return Err(bad("concurrency sweeps need a burst workload".into())),
                }
                sc.vm_count = sc.vm_count.max(n);
            }
            SweepAxis::BlockSize => {
                let b = parse_size(v).ok_or_else(|| bad(format!("`{v}` is not a size")))?;
                for im in &mut sc.images {
                    if im.path.is_some() {
                        return Err(bad("block_size sweeps need synthetic images".into()));
                    }
                    im.block_size = b;
                }
            }
            SweepAxis::FunctionsPerVm => {
                let k = num(v)?;
                match &mut sc.workload {
                    WorkloadSpec::Burst { functions, .. } => *functions = k,
                    _ => return Err(bad("functions_per_vm sweeps need a burst workload".into())),
                }
                sc.manager.per_vm_function_cap = sc.manager.per_vm_function_cap.max(k);
                let base_imgs = sc.images.clone();
                sc.images = (0..k.max(base_imgs.len()))
                    .map(|i| {
                        let mut im = base_imgs[i % base_imgs.len()].clone();
                        if i >= base_imgs.len() || k > base_imgs.len() {
                            im.name = format!("{}-{i}", im.name);
                        }
                        im
                    })
                    .collect();
            }
        }
        for &p in policies {
            let mut s = sc.clone();
            s.set_policy(p);
            out.push((v.clone(), s));
        }
    }
    Ok(out)
}

/// Runs every sweep point, spreading independent runs over threads.
pub fn sweep(
    base: &Scenario,
    axis: SweepAxis,
    values: &[String],
    policies: &[Policy],
    seed: u64,
) -> Result<Vec<SweepRow>, ExperimentError> {
    let jobs = sweep_scenarios(base, axis, values, policies)?;
    for (_, sc) in &jobs {
        sc.validate()?;
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs.len().max(1));
    let mut results: Vec<Option<Result<SweepRow, ExperimentError>>> = (0..jobs.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots = std::sync::Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some((value, sc)) = jobs.get(i) else { break };
                let row = run_scenario(sc, seed).map(|out| SweepRow {
                    axis,
                    value: value.clone(),
                    latency_stddev_s: Summary::stddev(&out.report.sessions),
                    summary: out.report.summary,
                    startup_fetch_bytes: out.startup_fetch_bytes,
                });
                slots.lock().expect("no panics while holding the lock")[i] = Some(row);
            });
        }
    });
    results.into_iter().map(|r| r.expect("every job ran")).collect()
}

pub fn write_sweep<W: io::Write>(rows: &[SweepRow], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["axis", "value"];
    header.extend(Summary::HEADER);
    header.extend(SWEEP_EXTRA);
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.axis.to_string(), r.value.clone()];
        rec.extend(r.summary.row());
        rec.push(r.startup_fetch_bytes.to_string());
        rec.push(fmt_s(r.latency_stddev_s));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
