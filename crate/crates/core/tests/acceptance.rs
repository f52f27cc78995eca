//! Acceptance harness: one PASS/FAIL line per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use faasnet_core::blockstore::{self, Codec};
use faasnet_core::experiment::{build_cluster, recovery, run_scenario, sweep, write_sweep, write_timeline, SweepAxis};
use faasnet_core::ftree::{FunctionTree, Side};
use faasnet_core::image::ImageProfile;
use faasnet_core::provision::{Cluster, Phase, Policy, ProtocolMessage};
use faasnet_core::scenario::{ImageSpec, Scenario, WorkloadSpec};
use faasnet_core::simnet::Duplex;
use faasnet_core::workload::{ArrivalMode, BurstSpec};
use faasnet_core::{FunctionId, ImageRef, VmId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 42;
const MIB: u64 = 1 << 20;

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn c1_exhaustive_tree_ops() -> Check {
    // Breadth-first over distinct states, one level per step.
    let mut seen = BTreeSet::new();
    let mut frontier = vec![FunctionTree::new("f".into())];
    let mut transitions = 0u64;
    for _ in 0..12 {
        let mut next_frontier = Vec::new();
        for ft in &frontier {
            for id in 1..=8 {
                let vm = VmId(id);
                let mut next = ft.clone();
                if ft.contains(vm) {
                    next.delete(vm).map_err(|e| e.to_string())?;
                    let mut want: BTreeSet<VmId> = ft.vms().collect();
                    want.remove(&vm);
                    ensure(next.vms().collect::<BTreeSet<_>>() == want, format!("delete {vm} removed the wrong set"))?;
                } else {
                    next.insert(vm).map_err(|e| e.to_string())?;
                }
                transitions += 1;
                let bad = next.check_invariants();
                ensure(bad.is_empty(), format!("{bad:?}\n{}", next.to_debug_string()))?;
                if seen.insert(next.to_debug_string()) {
                    next_frontier.push(next);
                }
            }
        }
        frontier = next_frontier;
    }
    Ok(format!("{} states, {transitions} transitions", seen.len()))
}

fn c2_complete_heights() -> Check {
    let mut ft = FunctionTree::new("f".into());
    for n in 1..=1024u64 {
        ft.insert(VmId(n)).map_err(|e| e.to_string())?;
        let want = 64 - n.leading_zeros();
        ensure(ft.height() == want, format!("n={n}: height {} want {want}", ft.height()))?;
    }
    let mut t82 = FunctionTree::new("f".into());
    (1..=82).for_each(|i| {
        t82.insert(VmId(i)).unwrap();
    });
    ensure(t82.height() == 7, "82 nodes")?;
    Ok("heights 1..=1024 exact, 82 -> 7".into())
}

fn c3_golden_rotations() -> Check {
    let v = VmId;
    let mut a = FunctionTree::assemble(
        "f".into(),
        v(1),
        &[
            (v(1), Side::Left, v(2)),
            (v(1), Side::Right, v(6)),
            (v(2), Side::Left, v(3)),
            (v(2), Side::Right, v(5)),
        ],
    )
    .map_err(|e| e.to_string())?;
    a.delete(v(6)).map_err(|e| e.to_string())?;
    ensure(a.to_debug_string() == "2 - 3 1 3\n3 2 - - 1\n1 2 5 - 2\n5 1 - - 1\n", a.to_debug_string())?;
    let mut b = FunctionTree::assemble(
        "f".into(),
        v(1),
        &[(v(1), Side::Left, v(2)), (v(1), Side::Right, v(3)), (v(3), Side::Left, v(5))],
    )
    .map_err(|e| e.to_string())?;
    b.delete(v(2)).map_err(|e| e.to_string())?;
    ensure(b.to_debug_string() == "5 - 1 3 2\n1 5 - - 1\n3 5 - - 1\n", b.to_debug_string())?;
    Ok("root 2 with 1.left = 5; root 5".into())
}

fn burst_cluster(policy: Policy, n: usize, log: bool) -> Result<Cluster, String> {
    let mut sc = Scenario::burst(policy, n, n);
    sc.cluster.log_messages = log;
    let mut c = build_cluster(&sc, SEED).map_err(|e| e.to_string())?;
    c.manager_mut()
        .register_function(FunctionId::new("f000"), ImageRef::new("pytorch-758m"), 128)
        .map_err(|e| e.to_string())?;
    Ok(c)
}

fn f0() -> FunctionId {
    FunctionId::new("f000")
}

fn img() -> ImageRef {
    ImageRef::new("pytorch-758m")
}

fn sessions_csv(c: &Cluster) -> Vec<u8> {
    let mut buf = Vec::new();
    c.report(128).write_sessions(&mut buf).unwrap();
    buf
}

fn c4_streaming_integrity(c: &Cluster) -> Check {
    let a = c.audit();
    ensure(a.completed == 128 && a.digest_ok == 128, format!("{} completed, {} digests ok", a.completed, a.digest_ok))?;
    ensure(a.scheduler_data_bytes == 0, "scheduler carried data")?;
    let p = c.image(&img()).unwrap();
    let tree = c.manager().tree(&f0()).unwrap();
    let mut edges: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for e in c.message_log() {
        if let ProtocolMessage::BlockData { block_index, .. } = e.msg {
            edges.entry((e.from, e.to)).or_default().push(block_index);
        }
    }
    let mut want = BTreeSet::new();
    want.insert(("registry".to_string(), format!("vm{}", tree.root().unwrap())));
    for vm in tree.vms() {
        for ch in tree.children_of(vm).unwrap() {
            want.insert((format!("vm{vm}"), format!("vm{ch}")));
        }
    }
    ensure(edges.keys().cloned().collect::<BTreeSet<_>>() == want, "data moved over a non-tree edge")?;
    let all: Vec<u64> = (0..p.n_blocks() as u64).collect();
    for (edge, mut blocks) in edges {
        blocks.sort_unstable();
        ensure(blocks == all, format!("edge {edge:?} carried {} blocks", blocks.len()))?;
    }
    Ok(format!("{} edges x {} blocks, each once", want.len(), p.n_blocks()))
}

fn c5_registry_parsimony(c: &Cluster) -> Check {
    let a = c.audit();
    let root = c.manager().tree(&f0()).unwrap().root().unwrap();
    let total = c.image(&img()).unwrap().total_bytes();
    let want: BTreeMap<VmId, u64> = [(root, total)].into();
    ensure(a.registry_bytes_by_vm == want, format!("{:?}", a.registry_bytes_by_vm))?;
    let mut warm = burst_cluster(Policy::FaasnetFt, 128, false)?;
    warm.prewarm(&f0(), 1).map_err(|e| e.to_string())?;
    warm.provision(&f0(), 128).map_err(|e| e.to_string())?;
    warm.run().map_err(|e| e.to_string())?;
    let w = warm.audit();
    ensure(w.completed == 127 && w.registry_data_bytes == 0, format!("prewarmed egress {}", w.registry_data_bytes))?;
    Ok(format!("egress {total} B, all to the root; prewarmed root 0 B"))
}

fn c6_scalability() -> Result<(String, Vec<u8>), String> {
    let values: Vec<String> = [8, 16, 32, 64, 128].iter().map(|n| n.to_string()).collect();
    let base = Scenario::burst(Policy::FaasnetFt, 128, 8);
    let t0 = Instant::now();
    let rows = sweep(&base, SweepAxis::Concurrency, &values, &[Policy::FaasnetFt, Policy::RegistryFullPull], SEED)
        .map_err(|e| e.to_string())?;
    let wall = t0.elapsed().as_secs_f64();
    let mean = |p: Policy, n: usize| {
        rows.iter()
            .find(|r| r.summary.policy == p.as_str() && r.summary.concurrency == n)
            .map(|r| r.summary.mean_provision_latency_s)
            .unwrap()
    };
    let (ft8, ft128) = (mean(Policy::FaasnetFt, 8), mean(Policy::FaasnetFt, 128));
    let (fp8, fp128) = (mean(Policy::RegistryFullPull, 8), mean(Policy::RegistryFullPull, 128));
    let mut csv = Vec::new();
    write_sweep(&rows, &mut csv).map_err(|e| e.to_string())?;
    let msg = format!(
        "ft {ft8:.3}s -> {ft128:.3}s, full pull {fp8:.2}s -> {fp128:.2}s, speedup {:.1}x, {wall:.0}s wall",
        fp128 / ft128
    );
    ensure(ft128 <= 1.3 * ft8, &msg)?;
    ensure(fp128 >= 4.0 * fp8, &msg)?;
    ensure(fp128 >= 5.0 * ft128, &msg)?;
    ensure(wall < 120.0, &msg)?;
    Ok((msg, csv))
}

fn c7_makespan(c: &Cluster) -> Check {
    let s = c.report(128).summary;
    let mut full = Scenario::burst(Policy::FaasnetFt, 128, 128);
    full.cluster.duplex = Duplex::Full;
    let f = run_scenario(&full, SEED).map_err(|e| e.to_string())?.report.summary;
    let msg = format!(
        "span {:.3}s vs mean latency {:.3}s (full-duplex NICs, not asserted: {:.3}s vs {:.3}s)",
        s.makespan_s, s.mean_provision_latency_s, f.makespan_s, f.mean_provision_latency_s
    );
    ensure(s.makespan_s <= 0.35 * s.mean_provision_latency_s, &msg)?;
    Ok(msg)
}

fn c8_bandwidth_ratio(c: &Cluster) -> Check {
    let tree = c.manager().tree(&f0()).unwrap();
    let mut worst = f64::INFINITY;
    let mut nodes = 0;
    for vm in tree.vms() {
        if tree.children_of(vm).unwrap().len() != 2 {
            continue;
        }
        nodes += 1;
        let (inb, out) = c.vm_data_bytes(vm);
        ensure(out == 2 * inb, format!("vm{vm}: out {out} in {inb}"))?;
        let (first, last) = c.stream_times(vm, &img()).unwrap();
        let w = last - first;
        let (lo, hi) = (first + 0.25 * w, first + 0.75 * w);
        let samples = c.vm_bandwidth(vm, 0.1);
        let mid: Vec<_> = samples.iter().filter(|s| s.t >= lo && s.t + 0.1 <= hi).collect();
        ensure(!mid.is_empty(), format!("vm{vm}: no samples"))?;
        for s in mid {
            let r = s.out_bps / s.in_bps;
            worst = worst.min(r);
            ensure(r >= 1.8, format!("vm{vm} at {:.2}s: out/in {r:.3}", s.t))?;
        }
    }
    Ok(format!("{nodes} interior nodes, out = 2 x in bytes, min sampled ratio {worst:.3}"))
}

/// A 428 MB image whose startup reads are a 40 MiB prefix plus 24 scattered
/// 600 kB ranges.
fn startup_ranges(size: u64) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(428);
    let mut r = vec![(0, 40 * MIB)];
    for _ in 0..24 {
        r.push((rng.gen_range(40 * MIB..size - 600_000), 600_000));
    }
    r
}

fn c9_read_amplification() -> Check {
    let size = 428_000_000;
    let ranges = startup_ranges(size);
    let mut fetched = Vec::new();
    let mut total_512 = 0;
    for bs in [256 * 1024, 512 * 1024, MIB, 4 * MIB] {
        let p = ImageProfile::with_ranges(ImageRef::new("pystan-428m"), size, bs, &ranges, 1.0).map_err(|e| e.to_string())?;
        if bs == 512 * 1024 {
            total_512 = p.total_bytes();
        }
        fetched.push(p.startup_bytes());
    }
    ensure(fetched.windows(2).all(|w| w[0] <= w[1]), format!("{fetched:?}"))?;
    let reduction = 1.0 - fetched[1] as f64 / total_512 as f64;
    let msg = format!("fetched {fetched:?}, reduction at 512 KiB {:.1}%", 100.0 * reduction);
    ensure(reduction >= 0.80, &msg)?;
    Ok(msg)
}

fn c10_large_scale() -> Check {
    let n_images = 50;
    let mut sc = Scenario::burst(Policy::FaasnetFt, 1000, 50);
    sc.cluster.registry_gbps = 10.0;
    sc.manager.per_vm_function_cap = 3;
    sc.images = (0..n_images)
        .map(|i| ImageSpec::synthetic(&format!("img{i:02}"), 428_000_000, 0.161))
        .collect();
    sc.workload = WorkloadSpec::Burst {
        functions: n_images,
        concurrency: 50,
        memory_mb: 128,
    };
    let t0 = Instant::now();
    let mut c = build_cluster(&sc, SEED).map_err(|e| e.to_string())?;
    let fns: Vec<FunctionId> = (0..n_images).map(|i| FunctionId::new(format!("f{i:03}"))).collect();
    for (i, f) in fns.iter().enumerate() {
        c.manager_mut()
            .register_function(f.clone(), ImageRef::new(format!("img{i:02}")), 128)
            .map_err(|e| e.to_string())?;
    }
    for f in &fns {
        c.provision(f, 50).map_err(|e| e.to_string())?;
    }
    c.run().map_err(|e| e.to_string())?;
    let wall = t0.elapsed().as_secs_f64();
    let a = c.audit();
    let image_bytes = c.image(&ImageRef::new("img00")).unwrap().total_bytes();
    let mut per_vm: BTreeMap<usize, usize> = BTreeMap::new();
    for v in c.manager().active_vms() {
        *per_vm.entry(v.resident_functions.len()).or_default() += 1;
    }
    let s = c.report(50).summary;
    let msg = format!(
        "{} sessions completed, egress {} B, functions per VM {per_vm:?}, latency mean {:.2}s p95 {:.2}s (reference 5.1-8.3s), {wall:.1}s wall",
        a.completed, a.registry_data_bytes, s.mean_provision_latency_s, s.p95_provision_latency_s
    );
    ensure(a.sessions == 2500 && a.completed == 2500 && a.digest_ok == 2500, &msg)?;
    ensure(c.sessions().iter().all(|s| s.phase == Phase::Completed), &msg)?;
    ensure(a.registry_data_bytes <= n_images as u64 * image_bytes, &msg)?;
    ensure(per_vm.keys().all(|&k| k <= 3), &msg)?;
    ensure(wall < 300.0, &msg)?;
    Ok(msg)
}

fn replay_scenario(policy: Policy) -> Scenario {
    let mut sc = Scenario::burst(policy, 200, 1);
    sc.cluster.sample_interval_s = 1.0;
    sc.workload = WorkloadSpec::Synthetic {
        burst: BurstSpec {
            mean_duration_s: 1.0,
            ..BurstSpec::default()
        },
        arrivals: ArrivalMode::Uniform,
        headroom: 1.2,
        memory_mb: 128,
    };
    sc
}

fn c11_replay() -> Result<(String, Vec<u8>), String> {
    let spec = BurstSpec::default();
    let onset = spec.t_burst;
    let until = onset + spec.inter_burst_s;
    let mut rec = Vec::new();
    let mut csv = Vec::new();
    for p in [Policy::FaasnetFt, Policy::RegistryFullPull] {
        let out = run_scenario(&replay_scenario(p), SEED).map_err(|e| e.to_string())?;
        rec.push(recovery(&out.timeline, onset, until, 1.0));
        write_timeline(&out.timeline, &mut csv).map_err(|e| e.to_string())?;
    }
    let (ft, fp) = (rec[0], rec[1]);
    let msg = format!(
        "ft height {} recovery {:.0}s, full pull recovery {:.0}s ({:.1}x)",
        ft.peak_height,
        ft.recovery_s,
        fp.recovery_s,
        fp.recovery_s / ft.recovery_s
    );
    ensure(ft.peak_height == 7, &msg)?;
    ensure(fp.recovery_s >= 3.0 * ft.recovery_s, &msg)?;
    Ok((msg, csv))
}

fn c12_determinism(c4: &[u8], c6: &[u8], c11: &[u8]) -> Check {
    let mut again = burst_cluster(Policy::FaasnetFt, 128, true)?;
    again.provision(&f0(), 128).map_err(|e| e.to_string())?;
    again.run().map_err(|e| e.to_string())?;
    ensure(sessions_csv(&again) == c4, "streaming run differs")?;
    let (_, c6b) = c6_scalability()?;
    ensure(c6b == c6, "sweep differs")?;
    let (_, c11b) = c11_replay()?;
    ensure(c11b == c11, "replay differs")?;
    Ok(format!("{} + {} + {} CSV bytes identical", c4.len(), c6.len(), c11.len()))
}

fn random_input(rng: &mut ChaCha8Rng) -> Vec<u8> {
    // Log-uniform length in 1 B ..= 64 MiB.
    let len = (2f64.powf(rng.gen_range(0.0..=26.0)) as usize).clamp(1, 64 << 20);
    let mut data = vec![0u8; len];
    match rng.gen_range(0..3) {
        0 => rng.fill(&mut data[..]),
        1 => {
            let b: u8 = rng.gen();
            data.iter_mut().for_each(|x| *x = b);
        }
        _ => {
            let mut i = 0;
            while i < len {
                let run = rng.gen_range(1..4096).min(len - i);
                let b: u8 = rng.gen_range(0..8);
                data[i..i + run].iter_mut().for_each(|x| *x = b);
                i += run;
            }
        }
    }
    data
}

fn corrupt(bytes: &mut Vec<u8>, kind: usize, rng: &mut ChaCha8Rng, header_and_table: usize) {
    match kind {
        0 => bytes[0] ^= 0xff,
        1 => bytes[36 + rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8),
        2 => {
            let cut = rng.gen_range(0..bytes.len());
            bytes.truncate(cut);
        }
        3 => bytes[rng.gen_range(68..header_and_table)] ^= 1 << rng.gen_range(0..8),
        _ => {
            let i = rng.gen_range(header_and_table..bytes.len());
            bytes[i] ^= 1 << rng.gen_range(0..8);
        }
    }
}

fn c13_format_round_trip() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let sizes = [4096u32, 65536, 512 * 1024, 1 << 20, 4 << 20];
    let mut total = 0usize;
    let mut largest = 0usize;
    let inputs = 1000;
    for i in 0..inputs {
        let data = if i == 0 { vec![7u8; 64 << 20] } else { random_input(&mut rng) };
        let bs = sizes[rng.gen_range(0..sizes.len())];
        let codec = if rng.gen_bool(0.5) { Codec::Lz4 } else { Codec::Store };
        let (file, manifest) = blockstore::convert(&data, bs, codec).map_err(|e| e.to_string())?;
        let bytes = file.to_bytes();
        let back = blockstore::BlockFile::from_bytes(&bytes).map_err(|e| format!("input {i}: {e}"))?;
        let (read, _) = back.read(0, data.len() as u64).map_err(|e| e.to_string())?;
        ensure(read == data, format!("input {i}: read differs"))?;
        ensure(blockstore::verify_bytes(&bytes, &manifest), format!("input {i}: clean file fails verify"))?;
        let mut bad = bytes.clone();
        let table_end = blockstore::HEADER_LEN + 8 * file.offsets().len();
        corrupt(&mut bad, i % 5, &mut rng, table_end);
        ensure(
            !blockstore::verify_bytes(&bad, &manifest),
            format!("input {i}: corruption kind {} passed verify ({codec}, {} B)", i % 5, data.len()),
        )?;
        total += data.len();
        largest = largest.max(data.len());
    }
    Ok(format!("{inputs} inputs, {total} B, largest {largest} B; all corruptions rejected"))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, r: &Check| {
        match r {
            Ok(m) => println!("criterion {n:2} PASS  {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {n:2} FAIL  {name}: {m}");
            }
        }
    };
    report(1, "tree operations, exhaustive", &c1_exhaustive_tree_ops());
    report(2, "complete-tree heights", &c2_complete_heights());
    report(3, "golden rotations", &c3_golden_rotations());

    let base = burst_cluster(Policy::FaasnetFt, 128, true).and_then(|mut c| {
        c.provision(&f0(), 128).map_err(|e| e.to_string())?;
        c.run().map_err(|e| e.to_string())?;
        Ok(c)
    });
    let c4_csv = base.as_ref().map(sessions_csv).unwrap_or_default();
    let on_base = |f: fn(&Cluster) -> Check| base.as_ref().map_err(Clone::clone).and_then(f);
    report(4, "streaming integrity", &on_base(c4_streaming_integrity));
    report(5, "registry parsimony", &on_base(c5_registry_parsimony));
    let c6 = c6_scalability();
    report(6, "scalability shape", &c6.as_ref().map(|r| r.0.clone()).map_err(Clone::clone));
    report(7, "makespan pipeline", &on_base(c7_makespan));
    report(8, "bandwidth ratio", &on_base(c8_bandwidth_ratio));
    report(9, "read amplification", &c9_read_amplification());
    report(10, "large-scale smoke", &c10_large_scale());
    let c11 = c11_replay();
    report(11, "trace replay recovery", &c11.as_ref().map(|r| r.0.clone()).map_err(Clone::clone));
    let c12 = match (&c6, &c11) {
        (Ok((_, a)), Ok((_, b))) => c12_determinism(&c4_csv, a, b),
        _ => Err("prerequisite run failed".into()),
    };
    report(12, "determinism", &c12);
    report(13, "format round trip", &c13_format_round_trip());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
