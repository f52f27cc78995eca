//! Max-min fair rate allocation with strict priority classes.
//!
//! Progressive filling: all unfrozen flows of a class grow together until an
//! endpoint resource saturates or a flow reaches its own cap; the flows that
//! hit the limit freeze and the rest keep growing. Lower classes only see
//! the capacity left over by higher ones. A flow may follow another flow
//! (a downstream stream that has caught up with its upstream); it then
//! never runs faster than that flow.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::EndpointId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    Control = 0,
    Startup = 1,
    Background = 2,
}

impl Priority {
    pub const ALL: [Priority; 3] = [Priority::Control, Priority::Startup, Priority::Background];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Duplex {
    /// Inbound and outbound share one NIC budget.
    #[default]
    Half,
    /// Inbound and outbound are capped independently.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndpointSpec {
    pub name: String,
    /// Bytes per second.
    pub capacity: f64,
    pub duplex: Duplex,
}

impl EndpointSpec {
    pub fn new(name: impl Into<String>, capacity: f64, duplex: Duplex) -> Self {
        EndpointSpec {
            name: name.into(),
            capacity,
            duplex,
        }
    }
}

/// One flow as seen by the allocator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowDemand {
    pub src: EndpointId,
    pub dst: EndpointId,
    pub class: Priority,
    /// Upper bound on this flow's rate; `Some(0.0)` parks the flow.
    pub cap: Option<f64>,
    /// Index of a flow in the same slice this one may not outrun.
    pub follows: Option<usize>,
}

impl FlowDemand {
    pub fn new(src: EndpointId, dst: EndpointId, class: Priority) -> Self {
        FlowDemand {
            src,
            dst,
            class,
            cap: None,
            follows: None,
        }
    }
}

/// Resource indices for an endpoint: (outbound, inbound).
fn resources(e: EndpointId, eps: &[EndpointSpec]) -> (usize, usize) {
    let i = e.0 as usize;
    match eps[i].duplex {
        Duplex::Half => (2 * i, 2 * i),
        Duplex::Full => (2 * i, 2 * i + 1),
    }
}

#[derive(PartialEq)]
struct Level(f64, usize, u32);

impl Eq for Level {}

impl PartialOrd for Level {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Level {
    // Reversed so the max-heap pops the lowest level first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

/// Computes per-flow rates (bytes/s) for `flows` over `endpoints`.
pub fn allocate_rates(flows: &[FlowDemand], endpoints: &[EndpointSpec]) -> Vec<f64> {
    let n = flows.len();
    let mut rate = vec![0.0; n];
    if n == 0 {
        return rate;
    }
    let n_res = endpoints.len() * 2;
    let mut residual = vec![0.0f64; n_res];
    for (i, e) in endpoints.iter().enumerate() {
        residual[2 * i] = e.capacity.max(0.0);
        residual[2 * i + 1] = match e.duplex {
            Duplex::Half => 0.0,
            Duplex::Full => e.capacity.max(0.0),
        };
    }

    // A follower is allocated in the lower of its own class and its leader's.
    let mut eff = vec![None::<Priority>; n];
    for i in 0..n {
        effective_class(i, flows, &mut eff, 0);
    }

    let res_of: Vec<(usize, usize)> = flows
        .iter()
        .map(|f| resources(f.src, endpoints))
        .zip(flows.iter().map(|f| resources(f.dst, endpoints)))
        .map(|((out, _), (_, inn))| (out, inn))
        .collect();

    let mut frozen = vec![false; n];
    for class in Priority::ALL {
        let members: Vec<usize> = (0..n).filter(|&i| eff[i] == Some(class)).collect();
        if members.is_empty() {
            continue;
        }
        let mut count = vec![0u32; n_res];
        let mut dependents: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut caps: Vec<(f64, usize)> = Vec::new();
        for &i in &members {
            let (a, b) = res_of[i];
            count[a] += 1;
            if b != a {
                count[b] += 1;
            }
        }
        // Members per resource, packed: resource r owns by_res[start[r]..start[r + 1]].
        let mut start = vec![0usize; n_res + 1];
        for r in 0..n_res {
            start[r + 1] = start[r] + count[r] as usize;
        }
        let mut fill = start.clone();
        let mut by_res = vec![0usize; start[n_res]];
        for &i in &members {
            let (a, b) = res_of[i];
            by_res[fill[a]] = i;
            fill[a] += 1;
            if b != a {
                by_res[fill[b]] = i;
                fill[b] += 1;
            }
            let mut cap = flows[i].cap.unwrap_or(f64::INFINITY);
            if let Some(g) = flows[i].follows {
                if eff[g] == Some(class) {
                    dependents[g].push(i);
                } else {
                    // Leader already allocated in a higher class.
                    cap = cap.min(rate[g]);
                }
            }
            if cap.is_finite() {
                caps.push((cap.max(0.0), i));
            }
        }
        caps.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        let mut consumed = vec![0.0f64; n_res];
        let mut version = vec![0u32; n_res];
        let mut heap = BinaryHeap::new();
        for r in 0..n_res {
            if count[r] > 0 {
                heap.push(Level(residual[r] / count[r] as f64, r, 0));
            }
        }
        let mut remaining = members.len();
        let mut cap_idx = 0;
        let mut stack = Vec::new();

        while remaining > 0 {
            while cap_idx < caps.len() && frozen[caps[cap_idx].1] {
                cap_idx += 1;
            }
            while let Some(top) = heap.peek() {
                if top.2 != version[top.1] || count[top.1] == 0 {
                    heap.pop();
                } else {
                    break;
                }
            }
            let res_level = heap.peek().map(|l| (l.0, l.1));
            let cap_level = caps.get(cap_idx).copied();
            let lambda = match (res_level, cap_level) {
                (None, None) => break,
                (Some((lv, r)), c) if c.is_none_or(|(cv, _)| lv <= cv) => {
                    heap.pop();
                    stack.extend(by_res[start[r]..start[r + 1]].iter().copied().filter(|&i| !frozen[i]));
                    lv
                }
                (_, Some((cv, i))) => {
                    cap_idx += 1;
                    stack.push(i);
                    cv
                }
                (Some(_), None) => unreachable!(),
            };
            while let Some(i) = stack.pop() {
                if frozen[i] {
                    continue;
                }
                frozen[i] = true;
                remaining -= 1;
                rate[i] = lambda.max(0.0);
                let (a, b) = res_of[i];
                let pair = [a, b];
                for &r in &pair[..if a == b { 1 } else { 2 }] {
                    consumed[r] += rate[i];
                    count[r] -= 1;
                    version[r] += 1;
                    if count[r] > 0 {
                        let lv = (residual[r] - consumed[r]) / count[r] as f64;
                        heap.push(Level(lv.max(lambda), r, version[r]));
                    }
                }
                stack.extend(dependents[i].iter().copied().filter(|&d| !frozen[d]));
            }
        }
        for r in 0..n_res {
            residual[r] = (residual[r] - consumed[r]).max(0.0);
        }
    }
    rate
}

fn effective_class(
    i: usize,
    flows: &[FlowDemand],
    eff: &mut [Option<Priority>],
    depth: usize,
) -> Priority {
    if let Some(c) = eff[i] {
        return c;
    }
    let own = flows[i].class;
    let c = match flows[i].follows {
        Some(g) if g != i && depth < flows.len() => own.max(effective_class(g, flows, eff, depth + 1)),
        _ => own,
    };
    eff[i] = Some(c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: f64 = 1e6;

    fn ep(name: &str, cap: f64, d: Duplex) -> EndpointSpec {
        EndpointSpec::new(name, cap, d)
    }

    fn e(i: u32) -> EndpointId {
        EndpointId(i)
    }

    #[test]
    fn empty() {
        assert!(allocate_rates(&[], &[]).is_empty());
    }

    #[test]
    fn two_flows_share_a_nic() {
        let eps = [ep("a", 125.0 * MB, Duplex::Full), ep("b", 1e12, Duplex::Full), ep("c", 1e12, Duplex::Full)];
        let flows = [
            FlowDemand::new(e(0), e(1), Priority::Startup),
            FlowDemand::new(e(0), e(2), Priority::Startup),
        ];
        let r = allocate_rates(&flows, &eps);
        assert!((r[0] - 62.5 * MB).abs() < 1e-6);
        assert!((r[1] - 62.5 * MB).abs() < 1e-6);
    }

    #[test]
    fn registry_split_evenly() {
        let mut eps = vec![ep("registry", 1000.0 * MB, Duplex::Full)];
        let mut flows = Vec::new();
        for i in 0..128 {
            eps.push(ep(&format!("vm{i}"), 125.0 * MB, Duplex::Half));
            flows.push(FlowDemand::new(e(0), e(i + 1), Priority::Startup));
        }
        let r = allocate_rates(&flows, &eps);
        for x in r {
            assert!((x - 1000.0 * MB / 128.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bottleneck_elsewhere_frees_share() {
        // Flow 0 is limited by a slow receiver; flow 1 takes the rest.
        let eps = [
            ep("src", 100.0, Duplex::Full),
            ep("slow", 10.0, Duplex::Full),
            ep("fast", 1000.0, Duplex::Full),
        ];
        let flows = [
            FlowDemand::new(e(0), e(1), Priority::Startup),
            FlowDemand::new(e(0), e(2), Priority::Startup),
        ];
        let r = allocate_rates(&flows, &eps);
        assert!((r[0] - 10.0).abs() < 1e-9);
        assert!((r[1] - 90.0).abs() < 1e-9);
    }

    #[test]
    fn strict_priority_control_first() {
        let eps = [ep("a", 100.0, Duplex::Full), ep("b", 1000.0, Duplex::Full)];
        let mut ctl = FlowDemand::new(e(0), e(1), Priority::Control);
        ctl.cap = Some(30.0);
        let flows = [
            FlowDemand::new(e(0), e(1), Priority::Background),
            ctl,
            FlowDemand::new(e(0), e(1), Priority::Startup),
        ];
        let r = allocate_rates(&flows, &eps);
        assert!((r[1] - 30.0).abs() < 1e-9);
        assert!((r[2] - 70.0).abs() < 1e-9);
        assert!(r[0].abs() < 1e-9);
    }

    #[test]
    fn control_survives_saturated_data_plane() {
        let eps = [ep("a", 100.0, Duplex::Full), ep("b", 1000.0, Duplex::Full)];
        let mut flows: Vec<_> = (0..50)
            .map(|_| FlowDemand::new(e(0), e(1), Priority::Startup))
            .collect();
        flows.push(FlowDemand::new(e(0), e(1), Priority::Control));
        let r = allocate_rates(&flows, &eps);
        assert!((r[50] - 100.0).abs() < 1e-9);
    }

    #[test]
    fn half_duplex_interior_node() {
        // parent -> node -> two children, node NIC shared by in and out.
        let eps = [
            ep("parent", 1e12, Duplex::Half),
            ep("node", 125.0 * MB, Duplex::Half),
            ep("c1", 1e12, Duplex::Half),
            ep("c2", 1e12, Duplex::Half),
        ];
        let inbound = FlowDemand::new(e(0), e(1), Priority::Startup);
        let mut o1 = FlowDemand::new(e(1), e(2), Priority::Startup);
        o1.follows = Some(0);
        let mut o2 = FlowDemand::new(e(1), e(3), Priority::Startup);
        o2.follows = Some(0);
        let r = allocate_rates(&[inbound, o1, o2], &eps);
        for x in &r {
            assert!((x - 125.0 * MB / 3.0).abs() < 1e-3, "{r:?}");
        }
    }

    #[test]
    fn full_duplex_interior_node() {
        let eps = [
            ep("parent", 125.0 * MB, Duplex::Full),
            ep("node", 125.0 * MB, Duplex::Full),
            ep("c1", 125.0 * MB, Duplex::Full),
            ep("c2", 125.0 * MB, Duplex::Full),
        ];
        let inbound = FlowDemand::new(e(0), e(1), Priority::Startup);
        let mut o1 = FlowDemand::new(e(1), e(2), Priority::Startup);
        o1.follows = Some(0);
        let mut o2 = FlowDemand::new(e(1), e(3), Priority::Startup);
        o2.follows = Some(0);
        let r = allocate_rates(&[inbound, o1, o2], &eps);
        assert!((r[0] - 125.0 * MB).abs() < 1e-3);
        assert!((r[1] - 62.5 * MB).abs() < 1e-3);
        assert!((r[2] - 62.5 * MB).abs() < 1e-3);
    }

    #[test]
    fn follower_capped_by_leader_in_higher_class() {
        let eps = [ep("a", 100.0, Duplex::Full), ep("b", 100.0, Duplex::Full), ep("c", 1000.0, Duplex::Full)];
        let mut lead = FlowDemand::new(e(0), e(1), Priority::Control);
        lead.cap = Some(5.0);
        let mut follow = FlowDemand::new(e(1), e(2), Priority::Startup);
        follow.follows = Some(0);
        let r = allocate_rates(&[lead, follow], &eps);
        assert!((r[1] - 5.0).abs() < 1e-9);
    }

    #[test]
    fn parked_flow_gets_zero() {
        let eps = [ep("a", 100.0, Duplex::Full), ep("b", 100.0, Duplex::Full)];
        let mut parked = FlowDemand::new(e(0), e(1), Priority::Startup);
        parked.cap = Some(0.0);
        let mut follower = FlowDemand::new(e(1), e(0), Priority::Startup);
        follower.follows = Some(0);
        let r = allocate_rates(&[parked, follower], &eps);
        assert_eq!(r, vec![0.0, 0.0]);
    }
}
