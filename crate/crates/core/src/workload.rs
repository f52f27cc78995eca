//! Invocation traces: CSV ingestion, scaling and synthetic bursts.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::FunctionId;

pub const TRACE_HEADER: &str = "t_s,function_id,count";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub function: FunctionId,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("line {line}: timestamp goes backwards")]
    UnsortedTrace { line: usize },
}

/// Parses a `t_s,function_id,count` trace. Rows sharing a timestamp and
/// function are merged.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, h)) if h.trim_end_matches('\r') == TRACE_HEADER => {}
        Some((_, h)) => {
            return Err(TraceError::MalformedRow {
                line: 1,
                reason: format!("expected header `{TRACE_HEADER}`, got `{h}`"),
            })
        }
    }
    let mut out: Vec<TraceEvent> = Vec::new();
    let mut at_t: BTreeMap<FunctionId, usize> = BTreeMap::new();
    let mut last_t = f64::NEG_INFINITY;
    for (i, raw) in lines {
        let line = i + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let bad = |reason: &str| TraceError::MalformedRow {
            line,
            reason: reason.to_string(),
        };
        let mut parts = row.split(',');
        let (Some(t), Some(fid), Some(count), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad("expected 3 fields"));
        };
        let t: f64 = t.trim().parse().map_err(|_| bad("bad timestamp"))?;
        if !t.is_finite() || t < 0.0 {
            return Err(bad("timestamp must be finite and non-negative"));
        }
        let fid = fid.trim();
        if fid.is_empty() {
            return Err(bad("empty function id"));
        }
        let count: u64 = count.trim().parse().map_err(|_| bad("bad count"))?;
        if count == 0 {
            return Err(bad("count must be at least 1"));
        }
        if t < last_t {
            return Err(TraceError::UnsortedTrace { line });
        }
        if t > last_t {
            at_t.clear();
            last_t = t;
        }
        let fid = FunctionId::new(fid);
        match at_t.get(&fid) {
            Some(&idx) => out[idx].count += count,
            None => {
                at_t.insert(fid.clone(), out.len());
                out.push(TraceEvent { t, function: fid, count });
            }
        }
    }
    Ok(out)
}

pub fn emit_trace(events: &[TraceEvent]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for e in events {
        s.push_str(&format!("{},{},{}\n", e.t, e.function, e.count));
    }
    s
}

/// Multiplies counts by `rps_factor` (seeded probabilistic rounding) and
/// timestamps by `duration_factor`.
pub fn scale_trace(events: &[TraceEvent], rps_factor: f64, duration_factor: f64, seed: u64) -> Vec<TraceEvent> {
    assert!(rps_factor > 0.0 && duration_factor > 0.0, "scale factors must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    events
        .iter()
        .filter_map(|e| {
            let x = e.count as f64 * rps_factor;
            let mut c = x.floor() as u64;
            if rng.gen::<f64>() < x - x.floor() {
                c += 1;
            }
            (c > 0).then(|| TraceEvent {
                t: e.t * duration_factor,
                function: e.function.clone(),
                count: c,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstSpec {
    pub base_rps: f64,
    pub peak_rps: f64,
    /// Onset of the first burst.
    pub t_burst: f64,
    pub ramp_s: f64,
    pub hold_s: f64,
    pub n_bursts: u32,
    /// Onset-to-onset spacing of consecutive bursts.
    pub inter_burst_s: f64,
    pub duration_s: f64,
    pub function: FunctionId,
    pub mean_duration_s: f64,
}

impl Default for BurstSpec {
    fn default() -> Self {
        BurstSpec {
            base_rps: 1.0,
            peak_rps: 100.0,
            t_burst: 660.0,
            ramp_s: 0.0,
            hold_s: 120.0,
            n_bursts: 2,
            inter_burst_s: 600.0,
            duration_s: 1500.0,
            function: FunctionId::new("synthetic"),
            mean_duration_s: 2.0,
        }
    }
}

impl BurstSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_rps >= 0.0 && self.peak_rps >= self.base_rps) {
            return Err("need peak_rps >= base_rps >= 0".into());
        }
        if self.ramp_s < 0.0 || self.hold_s < 0.0 || self.duration_s < 0.0 || self.t_burst < 0.0 {
            return Err("times must be non-negative".into());
        }
        if self.n_bursts > 1 && self.inter_burst_s < 2.0 * self.ramp_s + self.hold_s {
            return Err("bursts overlap".into());
        }
        if self.mean_duration_s <= 0.0 {
            return Err("mean_duration_s must be positive".into());
        }
        Ok(())
    }

    /// Instantaneous request rate.
    pub fn rate_at(&self, t: f64) -> f64 {
        let lift = self.peak_rps - self.base_rps;
        let mut r = self.base_rps;
        for j in 0..self.n_bursts {
            let u = t - (self.t_burst + j as f64 * self.inter_burst_s);
            r += lift * shape(u, self.ramp_s, self.hold_s);
        }
        r
    }

    /// Requests arriving in `[0, t)`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let lift = self.peak_rps - self.base_rps;
        let mut a = self.base_rps * t.max(0.0);
        for j in 0..self.n_bursts {
            let u = t - (self.t_burst + j as f64 * self.inter_burst_s);
            a += lift * shape_area(u, self.ramp_s, self.hold_s);
        }
        a
    }
}

fn shape(u: f64, ramp: f64, hold: f64) -> f64 {
    if u < 0.0 || u >= 2.0 * ramp + hold {
        0.0
    } else if u < ramp {
        u / ramp
    } else if u < ramp + hold {
        1.0
    } else {
        1.0 - (u - ramp - hold) / ramp
    }
}

fn shape_area(u: f64, ramp: f64, hold: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    let up = u.min(ramp);
    let mut a = if ramp > 0.0 { up * up / (2.0 * ramp) } else { 0.0 };
    if u > ramp {
        a += (u - ramp).min(hold);
    }
    if u > ramp + hold && ramp > 0.0 {
        let d = (u - ramp - hold).min(ramp);
        a += d - d * d / (2.0 * ramp);
    }
    a
}

/// One event per 1-second bucket with a nonzero count. Counts are the
/// rounded analytic integral, so their sum equals the rounded total area.
pub fn generate_burst(spec: &BurstSpec) -> Vec<TraceEvent> {
    let n = spec.duration_s.ceil() as u64;
    let mut out = Vec::new();
    let mut prev = 0u64;
    for k in 0..n {
        let hi = ((k + 1) as f64).min(spec.duration_s);
        let cum = spec.cumulative(hi).round() as u64;
        let c = cum.saturating_sub(prev);
        prev = prev.max(cum);
        if c > 0 {
            out.push(TraceEvent {
                t: k as f64,
                function: spec.function.clone(),
                count: c,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalMode {
    /// `count` evenly spaced arrivals per bucket.
    #[default]
    Uniform,
    /// Seeded random arrival instants; a Poisson process conditioned on
    /// the bucket's count.
    Poisson,
}

impl std::str::FromStr for ArrivalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(ArrivalMode::Uniform),
            "poisson" => Ok(ArrivalMode::Poisson),
            other => Err(format!("unknown arrival mode `{other}` (expected uniform or poisson)")),
        }
    }
}

/// Expands per-second events into individual arrival instants.
pub fn arrivals(events: &[TraceEvent], mode: ArrivalMode, seed: u64) -> Vec<(f64, FunctionId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for e in events {
        let c = e.count as usize;
        let mut offs: Vec<f64> = match mode {
            ArrivalMode::Uniform => (0..c).map(|i| i as f64 / c as f64).collect(),
            ArrivalMode::Poisson => (0..c).map(|_| rng.gen::<f64>()).collect(),
        };
        offs.sort_by(f64::total_cmp);
        out.extend(offs.into_iter().map(|o| (e.t + o, e.function.clone())));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}
