//! Container provisioning: scheduler-driven sessions, worker state machines
//! and block streaming between VMs.

mod cluster;
pub mod wire;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cluster::{Audit, Cluster, ClusterConfig, LogEntry, Notification, SessionId};
pub use wire::ProtocolMessage;

use crate::ftmanager::{ManagerError, Upstream};
use crate::ids::{FunctionId, ImageRef, VmId};
use crate::simnet::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    FaasnetFt,
    RegistryFullPull,
    RegistryOnDemand,
    LayerTreeRoot,
    AllToAllTracker,
}

impl Policy {
    pub const ALL: [Policy; 5] = [
        Policy::FaasnetFt,
        Policy::RegistryFullPull,
        Policy::RegistryOnDemand,
        Policy::LayerTreeRoot,
        Policy::AllToAllTracker,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::FaasnetFt => "faasnet_ft",
            Policy::RegistryFullPull => "registry_full_pull",
            Policy::RegistryOnDemand => "registry_on_demand",
            Policy::LayerTreeRoot => "layer_tree_root",
            Policy::AllToAllTracker => "all_to_all_tracker",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Phase {
    Created,
    ManifestLoaded,
    ReadyReported,
    ContainerRequested,
    Fetching,
    ContainerStarted,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvisionSession {
    pub function: FunctionId,
    pub image: ImageRef,
    pub vm: VmId,
    /// Upstream assigned by the plan.
    pub upstream: Upstream,
    pub phase: Phase,
    /// Canonical-order prefix of blocks held when last observed.
    pub blocks_received: usize,
    pub t_request: f64,
    pub t_manifest_done: Option<f64>,
    pub t_ready: Option<f64>,
    pub t_started: Option<f64>,
    pub t_completed: Option<f64>,
    pub digest_ok: Option<bool>,
    pub failure: Option<String>,
    /// Pre-provisioned; excluded from latency metrics.
    pub warm: bool,
}

impl ProvisionSession {
    pub(crate) fn advance(&mut self, to: Phase) {
        debug_assert!(
            to == Phase::Failed || to > self.phase,
            "illegal transition {:?} -> {:?}",
            self.phase,
            to
        );
        self.phase = to;
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, Phase::Completed | Phase::Failed)
    }

    /// Received-block bitmap over block indices.
    pub fn received_bitmap(&self, profile: &crate::image::ImageProfile) -> Vec<bool> {
        let mut bits = vec![false; profile.n_blocks()];
        for k in 0..self.blocks_received {
            bits[profile.block_at(k)] = true;
        }
        bits
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProvisionError {
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("image {0} has no profile")]
    UnknownImage(ImageRef),
    #[error("function {0} is not registered")]
    UnknownFunction(FunctionId),
    #[error("{0}")]
    Config(String),
}
