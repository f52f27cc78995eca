use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn faasnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faasnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
policy = "faasnet_ft"
vm_count = 16

[[images]]
name = "img"
size_bytes = 16000000
startup_fraction = 0.2

[workload]
kind = "burst"
concurrency = 16
"#;

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn convert_then_verify_prints_ok() {
    let d = TempDir::new().unwrap();
    fs::write(d.path().join("zeros.bin"), vec![0u8; 1 << 20]).unwrap();
    let o = faasnet(d.path(), &["convert", "zeros.bin", "img/zeros"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("2 blocks"), "{}", stdout(&o));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("img/zeros.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["n_blocks"], 2);
    assert_eq!(m["image_id"], "zeros");
    let o = faasnet(d.path(), &["verify", "img/zeros"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "OK");
}

#[test]
fn corrupted_file_fails_verify_with_format_code() {
    let d = TempDir::new().unwrap();
    let data: Vec<u8> = (0..300_000u32).map(|i| (i * 7 % 251) as u8).collect();
    fs::write(d.path().join("a.bin"), data).unwrap();
    assert_eq!(code(&faasnet(d.path(), &["--quiet", "convert", "a.bin", "a", "--block-size", "64K"])), 0);
    let p = d.path().join("a.fnbf");
    let mut bytes = fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&p, bytes).unwrap();
    let o = faasnet(d.path(), &["verify", "a"]);
    assert_eq!(code(&o), 3);
    assert!(!stdout(&o).contains("OK"));
}

#[test]
fn missing_input_is_an_io_error() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&faasnet(d.path(), &["convert", "nope.bin", "x"])), 2);
    assert_eq!(code(&faasnet(d.path(), &["simulate", "nope.toml"])), 2);
}

#[test]
fn invalid_scenarios_exit_4() {
    let d = TempDir::new().unwrap();
    write(d.path(), "zero.toml", &SMALL.replace("vm_count = 16", "vm_count = 0"));
    write(d.path(), "typo.toml", &SMALL.replace("vm_count", "vm_cnt"));
    write(d.path(), "cap.toml", &SMALL.replace("[[images]]", "[manager]\nvm_nic_gbps = 0.0\n\n[[images]]"));
    for f in ["zero.toml", "typo.toml", "cap.toml"] {
        let o = faasnet(d.path(), &["simulate", f]);
        assert_eq!(code(&o), 4, "{f}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn event_overflow_is_a_simulation_failure() {
    let d = TempDir::new().unwrap();
    write(d.path(), "s.toml", &SMALL.replace("[[images]]", "[cluster]\nmax_events = 5\n\n[[images]]"));
    assert_eq!(code(&faasnet(d.path(), &["simulate", "s.toml"])), 5);
}

#[test]
fn simulate_writes_deterministic_outputs() {
    let d = TempDir::new().unwrap();
    write(d.path(), "s.toml", SMALL);
    for out in ["r1", "r2"] {
        let o = faasnet(d.path(), &["--out", out, "simulate", "s.toml"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["sessions.csv", "endpoints.csv", "summary.csv", "run_manifest.json"] {
        let a = fs::read(d.path().join("r1").join(f)).unwrap();
        assert_eq!(a, fs::read(d.path().join("r2").join(f)).unwrap(), "{f}");
    }
    let summary = fs::read_to_string(d.path().join("r1/summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "policy,concurrency,mean_provision_latency_s,median_provision_latency_s,p95_provision_latency_s,makespan_s,registry_egress_bytes,mds_egress_bytes"
    );
    let manifest = fs::read_to_string(d.path().join("r1/run_manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 42"));
    assert!(manifest.contains("\"vm_count\": 16"));
}

#[test]
fn seed_flag_overrides_the_scenario() {
    let d = TempDir::new().unwrap();
    write(d.path(), "s.toml", &format!("seed = 5\n{SMALL}"));
    assert_eq!(code(&faasnet(d.path(), &["--quiet", "--out", "a", "simulate", "s.toml"])), 0);
    assert_eq!(code(&faasnet(d.path(), &["--quiet", "--seed", "77", "--out", "b", "simulate", "s.toml"])), 0);
    assert!(fs::read_to_string(d.path().join("a/run_manifest.json")).unwrap().contains("\"seed\": 5"));
    assert!(fs::read_to_string(d.path().join("b/run_manifest.json")).unwrap().contains("\"seed\": 77"));
}

#[test]
fn sweep_emits_one_row_per_value_and_policy() {
    let d = TempDir::new().unwrap();
    write(d.path(), "s.toml", SMALL);
    let o = faasnet(
        d.path(),
        &["--quiet", "sweep", "s.toml", "--axis", "concurrency", "--values", "2,4,8", "--policies", "faasnet_ft,registry_on_demand"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).is_empty());
    let csv = fs::read_to_string(d.path().join("out/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("axis,value,policy,concurrency,"));
    assert!(lines[0].ends_with(",startup_fetch_bytes,latency_stddev_s"));
    assert_eq!(lines.len(), 1 + 6);
    assert!(lines[1].starts_with("concurrency,2,faasnet_ft,2,"));
    assert!(lines[2].starts_with("concurrency,2,registry_on_demand,2,"));
}

#[test]
fn block_size_sweep_fetches_more_with_bigger_blocks() {
    let d = TempDir::new().unwrap();
    let sc = SMALL
        .replace("startup_fraction = 0.2", "startup_ranges = [[0, 1000000], [5000000, 300000], [9100000, 10]]")
        .replace("concurrency = 16", "concurrency = 2");
    write(d.path(), "s.toml", &sc);
    let o = faasnet(d.path(), &["--quiet", "sweep", "s.toml", "--axis", "block_size", "--values", "256K,512K,1M,4M"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(d.path().join("out/sweep.csv")).unwrap();
    let fetched: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').nth(10).unwrap().parse().unwrap()).collect();
    assert_eq!(fetched.len(), 4);
    assert!(fetched.windows(2).all(|w| w[0] <= w[1]), "{fetched:?}");
}

#[test]
fn replay_writes_a_timeline() {
    let d = TempDir::new().unwrap();
    write(d.path(), "s.toml", SMALL);
    let mut trace = String::from("t_s,function_id,count\n");
    for t in 0..30 {
        trace.push_str(&format!("{t},app,{}\n", if (10..15).contains(&t) { 6 } else { 1 }));
    }
    write(d.path(), "t.csv", &trace);
    let o = faasnet(d.path(), &["replay", "t.csv", "s.toml"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tl = fs::read_to_string(d.path().join("out/timeline.csv")).unwrap();
    assert_eq!(tl.lines().next().unwrap(), "t,rps,mean_response_s,ft_height,active_vms");
    assert!(tl.lines().count() > 30);
}

#[test]
fn bad_trace_is_a_scenario_error() {
    let d = TempDir::new().unwrap();
    write(d.path(), "s.toml", SMALL);
    write(d.path(), "t.csv", "t_s,function_id,count\n5,app,1\n2,app,1\n");
    assert_eq!(code(&faasnet(d.path(), &["replay", "t.csv", "s.toml"])), 4);
}

#[test]
fn converted_image_drives_a_simulation() {
    let d = TempDir::new().unwrap();
    let data: Vec<u8> = (0..3_000_000u32).map(|i| (i % 97) as u8).collect();
    fs::write(d.path().join("app.tar"), data).unwrap();
    let o = faasnet(d.path(), &["--quiet", "convert", "app.tar", "app", "--startup", "0:400K"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sc = SMALL.replace("size_bytes = 16000000\nstartup_fraction = 0.2", "path = \"app\"");
    write(d.path(), "s.toml", &sc);
    let o = faasnet(d.path(), &["simulate", "s.toml"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sessions = fs::read_to_string(d.path().join("out/sessions.csv")).unwrap();
    assert_eq!(sessions.lines().count(), 17);
}
