//! Browser bindings: an interactive function tree, a small concurrency
//! sweep and the block-size read-amplification curve. Results cross the
//! boundary as JSON strings.

use faasnet_core::experiment::run_scenario;
use faasnet_core::ftree::FunctionTree;
use faasnet_core::image::ImageProfile;
use faasnet_core::provision::Policy;
use faasnet_core::scenario::Scenario;
use faasnet_core::{ImageRef, VmId};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn err(e: impl ToString) -> JsError {
    JsError::new(&e.to_string())
}

/// One function tree edited from the page.
#[wasm_bindgen]
pub struct TreeDemo {
    tree: FunctionTree,
    next: u64,
}

#[wasm_bindgen]
impl TreeDemo {
    #[wasm_bindgen(constructor)]
    pub fn new() -> TreeDemo {
        TreeDemo {
            tree: FunctionTree::new("demo".into()),
            next: 1,
        }
    }

    /// Adds the next VM id; returns `{vm, parent}`.
    pub fn insert(&mut self) -> Result<String, JsError> {
        let vm = VmId(self.next);
        let parent = self.tree.insert(vm).map_err(err)?;
        self.next += 1;
        Ok(json!({ "vm": vm.0, "parent": parent.map(|p| p.0) }).to_string())
    }

    /// Removes `vm`; returns the rotations applied.
    pub fn delete(&mut self, vm: u32) -> Result<String, JsError> {
        let report = self.tree.delete(VmId(vm as u64)).map_err(err)?;
        serde_json::to_string(&report).map_err(err)
    }

    pub fn clear(&mut self) {
        *self = TreeDemo::new();
    }

    /// `{root, height, nodes: [{vm, parent, left, right, height}]}`.
    pub fn snapshot(&self) -> String {
        let nodes: Vec<Value> = self
            .tree
            .bfs_order()
            .into_iter()
            .filter_map(|vm| self.tree.node(vm))
            .map(|n| json!({ "vm": n.vm.0, "parent": n.parent.map(|v| v.0), "left": n.left.map(|v| v.0), "right": n.right.map(|v| v.0), "height": n.height }))
            .collect();
        json!({
            "root": self.tree.root().map(|v| v.0),
            "height": self.tree.height(),
            "nodes": nodes,
            "violations": self.tree.check_invariants(),
        })
        .to_string()
    }
}

impl Default for TreeDemo {
    fn default() -> Self {
        TreeDemo::new()
    }
}

/// Mean provisioning latency of a one-function burst at each concurrency,
/// per policy: `[{policy, concurrency, mean_s, makespan_s, registry_bytes}]`.
#[wasm_bindgen]
pub fn concurrency_sweep(image_mb: u32, registry_gbps: f64, policies: &str, concurrencies: &str) -> Result<String, JsError> {
    let policies: Vec<Policy> = policies
        .split(',')
        .map(|p| p.trim().parse::<Policy>())
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let levels: Vec<usize> = concurrencies
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let mut rows = Vec::new();
    for &p in &policies {
        for &n in &levels {
            let mut sc = Scenario::burst(p, n, n);
            sc.cluster.registry_gbps = registry_gbps;
            sc.cluster.sample_interval_s = 1.0;
            sc.images[0].size_bytes = Some(image_mb as u64 * 1_000_000);
            let out = run_scenario(&sc, 42).map_err(err)?;
            let s = &out.report.summary;
            rows.push(json!({
                "policy": p.as_str(),
                "concurrency": n,
                "mean_s": s.mean_provision_latency_s,
                "makespan_s": s.makespan_s,
                "registry_bytes": s.registry_egress_bytes,
            }));
        }
    }
    Ok(Value::Array(rows).to_string())
}

/// Bytes fetched before start at each block size, for a prefix of
/// `startup_fraction` plus `scattered` 600 kB reads spread over the image:
/// `[{block_size, fetched, total, reduction}]`.
#[wasm_bindgen]
pub fn amplification(image_mb: u32, startup_fraction: f64, scattered: u32) -> Result<String, JsError> {
    let size = image_mb as u64 * 1_000_000;
    let prefix = (startup_fraction.clamp(0.0, 1.0) * size as f64) as u64;
    let mut ranges = Vec::new();
    if prefix > 0 {
        ranges.push((0, prefix));
    }
    let read = 600_000u64.min(size);
    for k in 0..scattered as u64 {
        // Golden-ratio spacing.
        let frac = (k as f64 * 0.618_033_988_75).fract();
        ranges.push(((frac * (size - read) as f64) as u64, read));
    }
    let mut rows = Vec::new();
    for bs in [64u64 << 10, 256 << 10, 512 << 10, 1 << 20, 4 << 20] {
        let p = ImageProfile::with_ranges(ImageRef::new("demo"), size, bs, &ranges, 1.0).map_err(err)?;
        rows.push(json!({
            "block_size": bs,
            "fetched": p.startup_bytes(),
            "total": p.total_bytes(),
            "reduction": 1.0 - p.startup_bytes() as f64 / p.total_bytes() as f64,
        }));
    }
    Ok(Value::Array(rows).to_string())
}
