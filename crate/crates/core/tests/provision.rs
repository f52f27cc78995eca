use faasnet_core::ftmanager::{FtManager, ManagerConfig, Upstream};
use faasnet_core::image::ImageProfile;
use faasnet_core::provision::wire::{decode_log, encode_log};
use faasnet_core::provision::{Cluster, ClusterConfig, Notification, Phase, Policy, ProtocolMessage};
use faasnet_core::{FunctionId, ImageRef, VmId};

const MIB: u64 = 1024 * 1024;

fn image(size: u64, startup: f64) -> ImageProfile {
    ImageProfile::synthetic(ImageRef::new("img"), size, 512 * 1024, startup, 1.0).unwrap()
}

fn cluster(policy: Policy, vms: usize, img: ImageProfile, tweak: impl FnOnce(&mut ClusterConfig)) -> Cluster {
    let mut m = FtManager::with_vms(ManagerConfig::default(), vms);
    m.register_function(FunctionId::new("f"), ImageRef::new("img"), 128).unwrap();
    let mut cfg = ClusterConfig {
        policy,
        ..ClusterConfig::default()
    };
    tweak(&mut cfg);
    Cluster::new(cfg, m, vec![img], 9).unwrap()
}

fn f() -> FunctionId {
    FunctionId::new("f")
}

#[test]
fn single_vm_from_registry() {
    let mut c = cluster(Policy::FaasnetFt, 1, image(8 * MIB, 0.25), |_| {});
    let plan = c.provision(&f(), 1).unwrap();
    assert_eq!(plan.entries[0].upstream, Upstream::Registry);
    c.run().unwrap();
    let s = &c.sessions()[0];
    assert_eq!(s.phase, Phase::Completed);
    assert_eq!(s.digest_ok, Some(true));
    let a = c.audit();
    assert_eq!(a.registry_data_bytes, 8 * MIB);
    assert_eq!(a.mds_bytes, 10 * 1024);
    // Prepare, manifest request, 10 KiB through the slower of MDS and NIC, reply.
    let d = 0.00025;
    let rate = f64::min(10e9, 1e9) / 8.0;
    let want = d + d + 10.0 * 1024.0 / rate + d;
    assert!((s.t_manifest_done.unwrap() - want).abs() < 1e-9, "{:?}", s.t_manifest_done);
}

#[test]
fn scheduler_stays_control_only() {
    let mut c = cluster(Policy::FaasnetFt, 128, image(64 * MIB, 0.2), |_| {});
    c.provision(&f(), 128).unwrap();
    c.run().unwrap();
    let a = c.audit();
    assert_eq!(a.completed, 128);
    assert_eq!(a.scheduler_messages, 4 * 128);
    assert_eq!(a.scheduler_data_bytes, 0);
    assert_eq!(a.mds_bytes, 128 * 10 * 1024);
    assert_eq!(a.registry_data_bytes, 64 * MIB);
    let root = c.manager().tree(&f()).unwrap().root().unwrap();
    assert_eq!(a.registry_bytes_by_vm.keys().copied().collect::<Vec<_>>(), vec![root]);
}

#[test]
fn burst_of_82_reaches_height_7() {
    let mut c = cluster(Policy::FaasnetFt, 100, image(32 * MIB, 0.2), |_| {});
    c.provision(&f(), 82).unwrap();
    c.run().unwrap();
    assert_eq!(c.manager().tree(&f()).unwrap().height(), 7);
    assert!(c.sessions().iter().all(|s| s.phase == Phase::Completed && s.digest_ok == Some(true)));
}

#[test]
fn container_waits_for_startup_blocks() {
    let img = image(40 * MIB, 0.3);
    let n_startup = img.n_startup();
    let mut c = cluster(Policy::FaasnetFt, 7, img, |_| {});
    c.provision(&f(), 7).unwrap();
    let mut started = 0;
    while let Some(n) = c.step(f64::INFINITY).unwrap() {
        if let Notification::Started { session, .. } = n {
            assert!(c.session(session).blocks_received >= n_startup);
            started += 1;
        }
    }
    assert_eq!(started, 7);
}

#[test]
fn forwarding_bytes_and_pipelining() {
    let img = image(32 * MIB, 0.25);
    let total = img.total_bytes();
    let mut c = cluster(Policy::FaasnetFt, 7, img, |_| {});
    c.provision(&f(), 7).unwrap();
    c.run().unwrap();
    let tree = c.manager().tree(&f()).unwrap().clone();
    for vm in tree.vms() {
        let (inb, out) = c.vm_data_bytes(vm);
        assert_eq!(inb, total);
        let kids = tree.children_of(vm).unwrap().len() as u64;
        assert_eq!(out, kids * total, "vm {vm}");
        if let Some(p) = tree.upstream_of(vm).unwrap() {
            let (child_first, _) = c.stream_times(vm, &ImageRef::new("img")).unwrap();
            let (parent_first, parent_last) = c.stream_times(p, &ImageRef::new("img")).unwrap();
            assert!(child_first < parent_last, "store-and-forward at vm {vm}");
            assert!(child_first > parent_first);
        }
    }
}

#[test]
fn chain_first_block_lag_is_one_block() {
    // Four VMs: 1 -> {2, 3}, 2 -> 4.
    let img = image(16 * MIB, 0.0);
    let block = img.max_block() as f64;
    let mut c = cluster(Policy::FaasnetFt, 4, img, |_| {});
    c.provision(&f(), 4).unwrap();
    c.run().unwrap();
    let img = ImageRef::new("img");
    let (t2, _) = c.stream_times(VmId(2), &img).unwrap();
    let (t4, _) = c.stream_times(VmId(4), &img).unwrap();
    // The root's half-duplex NIC carries three streams, and VM 4 trails VM 2.
    let rate = ManagerConfig::default().nic_bps() / 3.0;
    let lag = t4 - t2;
    assert!(lag > 0.0);
    assert!((lag - block / rate).abs() < 0.05 * block / rate, "lag {lag}");
}

#[test]
fn prewarmed_root_spares_the_registry() {
    let mut c = cluster(Policy::FaasnetFt, 16, image(16 * MIB, 0.2), |_| {});
    c.prewarm(&f(), 1).unwrap();
    c.provision(&f(), 16).unwrap();
    c.run().unwrap();
    let a = c.audit();
    assert_eq!(a.sessions, 15);
    assert_eq!(a.completed, 15);
    assert_eq!(a.registry_data_bytes, 0);
}

#[test]
fn every_policy_delivers_correct_images() {
    for p in Policy::ALL {
        let mut c = cluster(p, 12, image(12 * MIB, 0.3), |_| {});
        c.provision(&f(), 12).unwrap();
        c.run().unwrap();
        let a = c.audit();
        assert_eq!(a.completed, 12, "{p}");
        assert_eq!(a.digest_ok, 12, "{p}");
        assert_eq!(a.integrity_errors, 0, "{p}");
        assert_eq!(a.capacity_violations, 0, "{p}");
    }
}

#[test]
fn interior_failure_repairs_the_tree() {
    let img = image(64 * MIB, 0.2);
    let mut c = cluster(Policy::FaasnetFt, 15, img, |_| {});
    c.provision(&f(), 15).unwrap();
    c.inject_failure(VmId(2), 0.2).unwrap();
    c.run().unwrap();
    let failed: Vec<_> = c.sessions().iter().filter(|s| s.phase == Phase::Failed).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].vm, VmId(2));
    let ok = c
        .sessions()
        .iter()
        .filter(|s| s.phase == Phase::Completed && s.digest_ok == Some(true))
        .count();
    assert_eq!(ok, 14);
    let tree = c.manager().tree(&f()).unwrap();
    assert!(!tree.contains(VmId(2)));
    assert!(tree.check_invariants().is_empty());
    assert!(c.manager().check_invariants().is_empty());
    assert!(c.counter("repoints") > 0);
}

#[test]
fn upstream_dead_at_prepare_time() {
    let mut c = cluster(Policy::FaasnetFt, 7, image(16 * MIB, 0.2), |_| {});
    c.provision(&f(), 7).unwrap();
    c.inject_failure(VmId(1), 0.0).unwrap();
    c.run().unwrap();
    let done = c.sessions().iter().filter(|s| s.phase == Phase::Completed).count();
    assert_eq!(done, 6);
    assert!(c.sessions().iter().all(|s| s.vm == VmId(1) || s.digest_ok == Some(true)));
    let root = c.manager().tree(&f()).unwrap().root().unwrap();
    assert_ne!(root, VmId(1));
}

#[test]
fn control_timeout_fails_the_vm() {
    let mut c = cluster(Policy::FaasnetFt, 2, image(4 * MIB, 0.5), |cfg| cfg.timeout_s = 0.0005);
    c.provision(&f(), 2).unwrap();
    c.run().unwrap();
    for s in c.sessions() {
        assert_eq!(s.phase, Phase::Failed);
        assert_eq!(s.failure.as_deref(), Some("SessionTimeout"));
        assert!(c.manager().is_failed(s.vm));
    }
}

#[test]
fn message_log_round_trips() {
    let img = image(4 * MIB, 0.5);
    let comp = img.compressed_len(0);
    let mut c = cluster(Policy::FaasnetFt, 3, img, |cfg| cfg.log_messages = true);
    c.provision(&f(), 3).unwrap();
    c.run().unwrap();
    let log = c.message_log();
    let msgs: Vec<ProtocolMessage> = log.iter().map(|e| e.msg.clone()).collect();
    let bytes = encode_log(&msgs).unwrap();
    assert_eq!(decode_log(&bytes).unwrap(), msgs);
    let count = |name: &str| msgs.iter().filter(|m| m.name() == name).count();
    assert_eq!(count("PrepareFunction"), 3);
    assert_eq!(count("WorkerReady"), 3);
    assert_eq!(count("CreateContainer"), 3);
    assert_eq!(count("ContainerCreated"), 3);
    assert_eq!(count("BlockData"), 3 * 8);
    for m in &msgs {
        if let ProtocolMessage::BlockData { payload_len, .. } = m {
            assert_eq!(*payload_len as u64, comp);
        }
    }
    assert!(log.windows(2).all(|w| w[0].t <= w[1].t));
}

#[test]
fn reclaimed_vm_starts_cold() {
    let mut c = cluster(Policy::FaasnetFt, 1, image(4 * MIB, 0.5), |_| {});
    c.provision(&f(), 1).unwrap();
    c.run().unwrap();
    c.step(2000.0).unwrap();
    assert_eq!(c.reclaim_idle().unwrap(), vec![VmId(1)]);
    c.provision(&f(), 1).unwrap();
    c.run().unwrap();
    assert_eq!(c.sessions().len(), 2);
    assert_eq!(c.sessions()[1].phase, Phase::Completed);
    assert_eq!(c.audit().registry_data_bytes, 8 * MIB);
}

#[test]
fn finite_decompression_delays_start() {
    let img = image(8 * MIB, 0.25);
    let raw = img.startup_raw_bytes();
    assert_eq!(raw, 2 * MIB);
    let start = |mbps: f64| {
        let mut c = cluster(Policy::FaasnetFt, 1, img.clone(), |cfg| cfg.decompress_mbps = mbps);
        c.provision(&f(), 1).unwrap();
        c.run().unwrap();
        c.sessions()[0].t_started.unwrap()
    };
    let lag = start(100.0) - start(0.0);
    assert!((lag - raw as f64 / 100e6).abs() < 1e-9, "{lag}");
}
