//! `faasnet`: convert and verify block images, run provisioning scenarios,
//! sweeps and trace replays.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faasnet_core::blockstore::{self, Codec};
use faasnet_core::experiment::{self, ExperimentError, SweepAxis};
use faasnet_core::provision::{Policy, ProvisionError};
use faasnet_core::scenario::{self, Scenario, ScenarioError, WorkloadSpec};
use faasnet_core::simnet::Summary;
use faasnet_core::workload::ArrivalMode;

#[derive(Parser)]
#[command(name = "faasnet", version, about = "Function-tree container provisioning simulator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Seed for every random choice [default: the scenario's seed, else 42].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSVs and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Print nothing on success.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a file into the block format: writes <PREFIX>.fnbf and <PREFIX>.manifest.json.
    Convert {
        input: PathBuf,
        prefix: PathBuf,
        #[arg(long, default_value = "512K", value_parser = parse_size)]
        block_size: u64,
        #[arg(long, default_value = "lz4")]
        codec: Codec,
        /// Startup read range as OFFSET:LENGTH; repeatable.
        #[arg(long = "startup", value_parser = parse_range)]
        startup: Vec<(u64, u64)>,
        /// Image id recorded in the manifest [default: input file stem].
        #[arg(long)]
        image_id: Option<String>,
    },
    /// Check a converted image against its manifest; prints OK.
    Verify { prefix: PathBuf },
    /// Run a scenario to completion.
    Simulate {
        scenario: PathBuf,
        #[arg(long)]
        policy: Option<Policy>,
    },
    /// Run one scenario per value of an axis and write sweep.csv.
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values, e.g. 8,16,32 or 256K,1M.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated policies [default: the scenario's].
        #[arg(long, value_delimiter = ',')]
        policies: Vec<Policy>,
    },
    /// Replay a `t_s,function_id,count` trace through the autoscaler.
    Replay {
        trace: PathBuf,
        scenario: PathBuf,
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long)]
        arrivals: Option<ArrivalMode>,
    },
}

fn parse_size(s: &str) -> Result<u64, String> {
    experiment::parse_size(s).ok_or_else(|| format!("`{s}` is not a size"))
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let (o, l) = s.split_once(':').ok_or("expected OFFSET:LENGTH")?;
    Ok((parse_size(o)?, parse_size(l)?))
}

/// A failure with its exit code.
struct Failure(u8, String);

const IO: u8 = 2;
const FORMAT: u8 = 3;
const SCENARIO: u8 = 4;
const SIMULATION: u8 = 5;

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let code = match e {
            ScenarioError::Io { .. } => IO,
            ScenarioError::Format(_) => FORMAT,
            ScenarioError::Parse(_) | ScenarioError::Invalid(_) => SCENARIO,
        };
        Failure(code, e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Scenario(s) => s.into(),
            ExperimentError::Io { .. } => Failure(IO, e.to_string()),
            ExperimentError::Trace(_) | ExperimentError::Sweep(_) => Failure(SCENARIO, e.to_string()),
            ExperimentError::Provision(ProvisionError::Config(_)) => Failure(SCENARIO, e.to_string()),
            ExperimentError::Provision(_) => Failure(SIMULATION, e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure(IO, format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd, &cli.global) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn say(g: &Global, line: impl AsRef<str>) {
    if !g.quiet {
        println!("{}", line.as_ref());
    }
}

fn load(path: &Path, policy: Option<Policy>) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path)?;
    if let Some(p) = policy {
        sc.set_policy(p);
    }
    sc.validate()?;
    Ok(sc)
}

fn summary_line(s: &Summary) -> String {
    format!(
        "{}: {} containers, mean {:.3}s, p95 {:.3}s, makespan {:.3}s, registry egress {} B",
        s.policy, s.concurrency, s.mean_provision_latency_s, s.p95_provision_latency_s, s.makespan_s, s.registry_egress_bytes
    )
}

fn simulate(sc: &Scenario, g: &Global) -> Result<(), Failure> {
    let seed = experiment::effective_seed(sc, g.seed);
    let out = experiment::run_scenario(sc, seed)?;
    if out.audit.completed < out.audit.sessions {
        let written = experiment::write_outputs(sc, &out, &g.out)?;
        return Err(Failure(
            SIMULATION,
            format!(
                "{} of {} sessions did not complete (outputs in {})",
                out.audit.sessions - out.audit.completed,
                out.audit.sessions,
                written[0].parent().unwrap_or(&g.out).display()
            ),
        ));
    }
    experiment::write_outputs(sc, &out, &g.out)?;
    say(g, summary_line(&out.report.summary));
    if let Some(r) = &out.replay {
        say(
            g,
            format!(
                "replay: {} requests, {} unserved, {} scale-outs, peak {} containers",
                r.requests, r.unserved, r.scale_outs, r.max_containers
            ),
        );
    }
    say(g, format!("seed {seed}, outputs in {}", g.out.display()));
    Ok(())
}

fn run(cmd: Cmd, g: &Global) -> Result<(), Failure> {
    match cmd {
        Cmd::Convert {
            input,
            prefix,
            block_size,
            codec,
            startup,
            image_id,
        } => {
            let data = fs::read(&input).map_err(|e| io_failure(&input, e))?;
            let bs = u32::try_from(block_size).map_err(|_| Failure(FORMAT, format!("block size {block_size} too large")))?;
            let (file, manifest) = blockstore::convert(&data, bs, codec).map_err(|e| Failure(FORMAT, e.to_string()))?;
            let id = image_id.unwrap_or_else(|| {
                input.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
            });
            let manifest = manifest
                .with_image_id(id)
                .with_startup_ranges(startup)
                .map_err(|e| Failure(FORMAT, e.to_string()))?;
            if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            let bp = scenario::blob_path(&prefix);
            let mp = scenario::manifest_path(&prefix);
            fs::write(&bp, file.to_bytes()).map_err(|e| io_failure(&bp, e))?;
            fs::write(&mp, manifest.to_json()).map_err(|e| io_failure(&mp, e))?;
            say(
                g,
                format!(
                    "{}: {} bytes -> {} blocks of {} ({}), {} compressed bytes, {} startup blocks",
                    manifest.image_id,
                    manifest.uncompressed_size,
                    manifest.n_blocks,
                    manifest.block_size,
                    manifest.codec,
                    manifest.compressed_size(),
                    blockstore::startup_block_set(&manifest).len()
                ),
            );
            Ok(())
        }
        Cmd::Verify { prefix } => {
            let mp = scenario::manifest_path(&prefix);
            let bp = scenario::blob_path(&prefix);
            let text = fs::read_to_string(&mp).map_err(|e| io_failure(&mp, e))?;
            let manifest = blockstore::Manifest::from_json(&text).map_err(|e| Failure(FORMAT, e.to_string()))?;
            let bytes = fs::read(&bp).map_err(|e| io_failure(&bp, e))?;
            if blockstore::verify_bytes(&bytes, &manifest) {
                say(g, "OK");
                Ok(())
            } else {
                Err(Failure(FORMAT, format!("{} does not match its manifest", bp.display())))
            }
        }
        Cmd::Simulate { scenario, policy } => simulate(&load(&scenario, policy)?, g),
        Cmd::Sweep {
            scenario,
            axis,
            values,
            policies,
        } => {
            let sc = load(&scenario, None)?;
            let policies = if policies.is_empty() { vec![sc.policy] } else { policies };
            let seed = experiment::effective_seed(&sc, g.seed);
            let rows = experiment::sweep(&sc, axis, &values, &policies, seed)?;
            fs::create_dir_all(&g.out).map_err(|e| io_failure(&g.out, e))?;
            let p = g.out.join("sweep.csv");
            let f = fs::File::create(&p).map_err(|e| io_failure(&p, e))?;
            experiment::write_sweep(&rows, f).map_err(|e| Failure(IO, format!("{}: {e}", p.display())))?;
            for r in &rows {
                say(g, format!("{}={} {}", axis, r.value, summary_line(&r.summary)));
            }
            say(g, format!("seed {seed}, {} rows in {}", rows.len(), p.display()));
            Ok(())
        }
        Cmd::Replay {
            trace,
            scenario,
            policy,
            arrivals,
        } => {
            let mut sc = load(&scenario, policy)?;
            let trace = fs::canonicalize(&trace).map_err(|e| io_failure(&trace, e))?;
            let mut workload = match sc.workload {
                w @ WorkloadSpec::Trace { .. } => w,
                _ => WorkloadSpec::trace(&trace),
            };
            if let WorkloadSpec::Trace { path, arrivals: a, .. } = &mut workload {
                *path = trace;
                if let Some(m) = arrivals {
                    *a = m;
                }
            }
            sc.workload = workload;
            sc.validate()?;
            simulate(&sc, g)
        }
    }
}
