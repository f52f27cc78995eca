//! TOML scenario files: topology, images, workload and every tunable.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockstore::{self, BlockError, BlockFile, Manifest};
use crate::ftmanager::ManagerConfig;
use crate::ids::ImageRef;
use crate::image::ImageProfile;
use crate::provision::{ClusterConfig, Policy};
use crate::workload::{ArrivalMode, BurstSpec};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Format(#[from] BlockError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSpec {
    pub name: String,
    /// Uncompressed size of a synthetic image.
    #[serde(default)]
    pub size_bytes: Option<u64>,
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    /// Leading fraction of bytes read at container start.
    #[serde(default)]
    pub startup_fraction: Option<f64>,
    /// Explicit `(offset, length)` startup ranges; overrides the fraction.
    #[serde(default)]
    pub startup_ranges: Option<Vec<(u64, u64)>>,
    #[serde(default = "one")]
    pub compression_ratio: f64,
    /// Prefix of a converted image: `<path>.fnbf` and `<path>.manifest.json`.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_block_size() -> u64 {
    512 * 1024
}

fn one() -> f64 {
    1.0
}

fn default_memory() -> u32 {
    128
}

fn default_functions() -> usize {
    1
}

fn default_headroom() -> f64 {
    1.2
}

impl ImageSpec {
    pub fn synthetic(name: &str, size_bytes: u64, startup_fraction: f64) -> Self {
        ImageSpec {
            name: name.into(),
            size_bytes: Some(size_bytes),
            block_size: default_block_size(),
            startup_fraction: Some(startup_fraction),
            startup_ranges: None,
            compression_ratio: 1.0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    /// Every function scales to `concurrency` containers at t = 0.
    Burst {
        #[serde(default = "default_functions")]
        functions: usize,
        concurrency: usize,
        #[serde(default = "default_memory")]
        memory_mb: u32,
    },
    /// Replays a trace file through the autoscaler.
    Trace {
        path: PathBuf,
        #[serde(default = "one")]
        rps_factor: f64,
        #[serde(default = "one")]
        duration_factor: f64,
        #[serde(default = "default_duration")]
        request_duration_s: f64,
        #[serde(default)]
        arrivals: ArrivalMode,
        #[serde(default = "default_headroom")]
        headroom: f64,
        #[serde(default = "default_memory")]
        memory_mb: u32,
    },
    /// Replays a generated burst trace; request duration is the burst's
    /// `mean_duration_s`.
    Synthetic {
        #[serde(default)]
        burst: BurstSpec,
        #[serde(default)]
        arrivals: ArrivalMode,
        #[serde(default = "default_headroom")]
        headroom: f64,
        #[serde(default = "default_memory")]
        memory_mb: u32,
    },
}

impl WorkloadSpec {
    /// A trace replay with default scaling and request settings.
    pub fn trace(path: impl Into<PathBuf>) -> Self {
        WorkloadSpec::Trace {
            path: path.into(),
            rps_factor: 1.0,
            duration_factor: 1.0,
            request_duration_s: default_duration(),
            arrivals: ArrivalMode::default(),
            headroom: default_headroom(),
            memory_mb: default_memory(),
        }
    }
}

fn default_duration() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub policy: Policy,
    pub vm_count: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub manager: ManagerConfig,
    pub images: Vec<ImageSpec>,
    pub workload: WorkloadSpec,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Scenario {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ScenarioError> {
        let mut s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.base_dir = base_dir.into();
        s.cluster.policy = s.policy;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, dir)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// The 758 MB single-function burst used throughout the scaling runs.
    pub fn burst(policy: Policy, vm_count: usize, concurrency: usize) -> Self {
        Scenario {
            policy,
            vm_count,
            seed: None,
            cluster: ClusterConfig {
                policy,
                registry_gbps: 2.0,
                ..ClusterConfig::default()
            },
            manager: ManagerConfig::default(),
            images: vec![ImageSpec::synthetic("pytorch-758m", 758_000_000, 0.161)],
            workload: WorkloadSpec::Burst {
                functions: 1,
                concurrency,
                memory_mb: default_memory(),
            },
            base_dir: PathBuf::new(),
        }
    }

    pub fn set_policy(&mut self, policy: Policy) {
        self.policy = policy;
        self.cluster.policy = policy;
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.vm_count == 0 {
            return bad("vm_count must be positive".into());
        }
        self.cluster.validate().map_err(ScenarioError::Invalid)?;
        let m = &self.manager;
        if !(m.vm_nic_gbps > 0.0 && m.vm_nic_gbps.is_finite()) {
            return bad("manager.vm_nic_gbps must be positive".into());
        }
        if m.vm_memory_mb == 0 || m.per_vm_function_cap == 0 {
            return bad("manager.vm_memory_mb and per_vm_function_cap must be positive".into());
        }
        if !(m.ping_interval_s > 0.0) || !(m.idle_timeout_s >= 0.0) {
            return bad("manager intervals must be positive".into());
        }
        if self.images.is_empty() {
            return bad("at least one image is required".into());
        }
        let mut names = BTreeSet::new();
        for im in &self.images {
            if !names.insert(im.name.as_str()) {
                return bad(format!("duplicate image `{}`", im.name));
            }
            match &im.path {
                Some(p) => {
                    for f in [blob_path(&self.resolve(p)), manifest_path(&self.resolve(p))] {
                        if !f.exists() {
                            return bad(format!("image `{}`: {} does not exist", im.name, f.display()));
                        }
                    }
                }
                None => {
                    if im.size_bytes.unwrap_or(0) == 0 {
                        return bad(format!("image `{}` needs size_bytes or path", im.name));
                    }
                    if !blockstore::valid_block_size(im.block_size) {
                        return bad(format!("image `{}`: invalid block size {}", im.name, im.block_size));
                    }
                    if let Some(f) = im.startup_fraction {
                        if !(0.0..=1.0).contains(&f) {
                            return bad(format!("image `{}`: startup_fraction outside [0, 1]", im.name));
                        }
                    }
                    if !(im.compression_ratio > 0.0 && im.compression_ratio <= 1.0) {
                        return bad(format!("image `{}`: compression_ratio outside (0, 1]", im.name));
                    }
                }
            }
        }
        match &self.workload {
            WorkloadSpec::Burst {
                functions,
                concurrency,
                memory_mb,
            } => {
                if *functions == 0 || *concurrency == 0 || *memory_mb == 0 {
                    return bad("burst functions, concurrency and memory_mb must be positive".into());
                }
            }
            WorkloadSpec::Trace {
                path,
                rps_factor,
                duration_factor,
                request_duration_s,
                headroom,
                memory_mb,
                ..
            } => {
                if !self.resolve(path).exists() {
                    return bad(format!("trace {} does not exist", self.resolve(path).display()));
                }
                if !(*rps_factor > 0.0 && *duration_factor > 0.0 && *request_duration_s > 0.0 && *headroom > 0.0) {
                    return bad("trace factors, request_duration_s and headroom must be positive".into());
                }
                if *memory_mb == 0 {
                    return bad("memory_mb must be positive".into());
                }
            }
            WorkloadSpec::Synthetic {
                burst,
                headroom,
                memory_mb,
                ..
            } => {
                burst.validate().map_err(ScenarioError::Invalid)?;
                if !(burst.mean_duration_s > 0.0 && *headroom > 0.0) || *memory_mb == 0 {
                    return bad("mean_duration_s, headroom and memory_mb must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Block-level profiles of every image, in declaration order.
    pub fn build_images(&self) -> Result<Vec<ImageProfile>, ScenarioError> {
        self.images
            .iter()
            .map(|im| {
                let name = ImageRef::new(im.name.clone());
                match &im.path {
                    Some(p) => {
                        let (file, manifest) = load_converted(&self.resolve(p))?;
                        let manifest = manifest.with_image_id(im.name.clone());
                        Ok(ImageProfile::from_block_file(&file, &manifest)?)
                    }
                    None => {
                        let size = im.size_bytes.unwrap_or(0);
                        let p = match &im.startup_ranges {
                            Some(r) => ImageProfile::with_ranges(name, size, im.block_size, r, im.compression_ratio)?,
                            None => ImageProfile::synthetic(
                                name,
                                size,
                                im.block_size,
                                im.startup_fraction.unwrap_or(0.0),
                                im.compression_ratio,
                            )?,
                        };
                        Ok(p)
                    }
                }
            })
            .collect()
    }
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".fnbf");
    PathBuf::from(s)
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Reads `<prefix>.fnbf` and its manifest.
pub fn load_converted(prefix: &Path) -> Result<(BlockFile, Manifest), ScenarioError> {
    let io = |p: &Path, e: std::io::Error| ScenarioError::Io {
        path: p.to_path_buf(),
        reason: e.to_string(),
    };
    let bp = blob_path(prefix);
    let mp = manifest_path(prefix);
    let bytes = fs::read(&bp).map_err(|e| io(&bp, e))?;
    let text = fs::read_to_string(&mp).map_err(|e| io(&mp, e))?;
    let manifest = Manifest::from_json(&text)?;
    let file = BlockFile::from_bytes(&bytes)?;
    Ok((file, manifest))
}
