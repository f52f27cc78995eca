use std::collections::BTreeMap;
use std::io;

use serde::Serialize;

use super::network::{Flow, Network};
use super::EndpointId;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionRecord {
    pub function_id: String,
    pub vm_id: u64,
    pub t_request: f64,
    pub t_ready: f64,
    pub t_started: f64,
    pub upstream: String,
    pub completed: bool,
    pub t_completed: f64,
}

impl SessionRecord {
    pub fn latency(&self) -> f64 {
        self.t_started - self.t_request
    }
}

/// Collected while a run is in progress. Counters only grow.
#[derive(Debug, Clone, Default)]
pub struct MetricSink {
    pub sessions: Vec<SessionRecord>,
    counters: BTreeMap<String, u64>,
}

impl MetricSink {
    pub fn add(&mut self, key: &str, n: u64) {
        *self.counters.entry(key.to_string()).or_insert(0) += n;
    }

    pub fn counter(&self, key: &str) -> u64 {
        self.counters.get(key).copied().unwrap_or(0)
    }

    pub fn counters(&self) -> &BTreeMap<String, u64> {
        &self.counters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthSample {
    pub t: f64,
    pub in_bps: f64,
    pub out_bps: f64,
}

/// Piecewise-constant bandwidth of one endpoint at `interval` resolution.
pub fn sample_bandwidth(
    net: &Network,
    endpoint: EndpointId,
    interval: f64,
    horizon: f64,
    filter: impl Fn(&Flow) -> bool,
) -> Vec<BandwidthSample> {
    let bins = net.bandwidth_buckets(interval, horizon, filter);
    bins[endpoint.0 as usize]
        .iter()
        .enumerate()
        .map(|(i, &(inb, out))| BandwidthSample {
            t: i as f64 * interval,
            in_bps: inb / interval,
            out_bps: out / interval,
        })
        .collect()
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub policy: String,
    pub concurrency: usize,
    pub mean_provision_latency_s: f64,
    pub median_provision_latency_s: f64,
    pub p95_provision_latency_s: f64,
    pub makespan_s: f64,
    pub registry_egress_bytes: u64,
    pub mds_egress_bytes: u64,
}

impl Summary {
    pub const HEADER: [&'static str; 8] = [
        "policy",
        "concurrency",
        "mean_provision_latency_s",
        "median_provision_latency_s",
        "p95_provision_latency_s",
        "makespan_s",
        "registry_egress_bytes",
        "mds_egress_bytes",
    ];

    pub fn from_sessions(
        policy: &str,
        concurrency: usize,
        sessions: &[SessionRecord],
        registry_egress_bytes: u64,
        mds_egress_bytes: u64,
    ) -> Summary {
        let mut lat: Vec<f64> = sessions
            .iter()
            .filter(|s| s.t_started.is_finite())
            .map(SessionRecord::latency)
            .collect();
        lat.sort_by(f64::total_cmp);
        let n = lat.len();
        let mean = if n == 0 { 0.0 } else { lat.iter().sum::<f64>() / n as f64 };
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => lat[n / 2],
            _ => (lat[n / 2 - 1] + lat[n / 2]) / 2.0,
        };
        let starts = sessions.iter().map(|s| s.t_started).filter(|t| t.is_finite());
        let first = starts.clone().fold(f64::INFINITY, f64::min);
        let last = starts.fold(f64::NEG_INFINITY, f64::max);
        Summary {
            policy: policy.to_string(),
            concurrency,
            mean_provision_latency_s: mean,
            median_provision_latency_s: median,
            p95_provision_latency_s: percentile(&lat, 95.0),
            makespan_s: if n == 0 { 0.0 } else { last - first },
            registry_egress_bytes,
            mds_egress_bytes,
        }
    }

    pub fn stddev(sessions: &[SessionRecord]) -> f64 {
        let lat: Vec<f64> = sessions
            .iter()
            .filter(|s| s.t_started.is_finite())
            .map(SessionRecord::latency)
            .collect();
        if lat.len() < 2 {
            return 0.0;
        }
        let m = lat.iter().sum::<f64>() / lat.len() as f64;
        (lat.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / lat.len() as f64).sqrt()
    }

    pub fn row(&self) -> Vec<String> {
        vec![
            self.policy.clone(),
            self.concurrency.to_string(),
            fmt_s(self.mean_provision_latency_s),
            fmt_s(self.median_provision_latency_s),
            fmt_s(self.p95_provision_latency_s),
            fmt_s(self.makespan_s),
            self.registry_egress_bytes.to_string(),
            self.mds_egress_bytes.to_string(),
        ]
    }
}

pub fn fmt_s(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.6}")
    } else {
        String::new()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndpointTimeline {
    pub endpoint: String,
    pub samples: Vec<BandwidthSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub summary: Summary,
    pub sessions: Vec<SessionRecord>,
    pub endpoints: Vec<EndpointTimeline>,
    pub counters: BTreeMap<String, u64>,
}

impl MetricReport {
    pub fn empty(policy: &str) -> MetricReport {
        MetricReport {
            summary: Summary::from_sessions(policy, 0, &[], 0, 0),
            sessions: Vec::new(),
            endpoints: Vec::new(),
            counters: BTreeMap::new(),
        }
    }

    pub fn write_sessions<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "function_id",
            "vm_id",
            "t_request",
            "t_ready",
            "t_started",
            "provision_latency_s",
            "upstream",
        ])?;
        for s in &self.sessions {
            out.write_record([
                s.function_id.clone(),
                s.vm_id.to_string(),
                fmt_s(s.t_request),
                fmt_s(s.t_ready),
                fmt_s(s.t_started),
                fmt_s(s.latency()),
                s.upstream.clone(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_endpoints<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["endpoint", "t", "in_Bps", "out_Bps"])?;
        for e in &self.endpoints {
            for s in &e.samples {
                out.write_record([
                    e.endpoint.clone(),
                    format!("{:.3}", s.t),
                    format!("{:.1}", s.in_bps),
                    format!("{:.1}", s.out_bps),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary<W: io::Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Summary::HEADER)?;
        out.write_record(self.summary.row())?;
        out.flush()?;
        Ok(())
    }
}
