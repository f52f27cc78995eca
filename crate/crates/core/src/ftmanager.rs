//! Scheduler-side control plane.
//!
//! Keeps one [`FunctionTree`] per function, the free and active VM pools,
//! and places function containers onto VMs. Mutated only from the
//! simulation loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ftree::{FunctionTree, RebalanceReport};
use crate::ids::{FunctionId, ImageRef, VmId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManagerConfig {
    pub idle_timeout_s: f64,
    pub per_vm_function_cap: usize,
    pub ping_interval_s: f64,
    pub vm_memory_mb: u32,
    pub vm_nic_gbps: f64,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            idle_timeout_s: 900.0,
            per_vm_function_cap: 20,
            ping_interval_s: 1.0,
            vm_memory_mb: 4096,
            vm_nic_gbps: 1.0,
        }
    }
}

impl ManagerConfig {
    pub fn nic_bps(&self) -> f64 {
        self.vm_nic_gbps * 1e9 / 8.0
    }

    /// Ping interval plus one interval of silence.
    pub fn failure_detection_s(&self) -> f64 {
        2.0 * self.ping_interval_s
    }
}

/// A deployed function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunctionSpec {
    pub id: FunctionId,
    pub image: ImageRef,
    pub memory_mb: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VmState {
    pub vm: VmId,
    pub memory_capacity_mb: u32,
    pub nic_capacity_bps: f64,
    pub resident_functions: BTreeSet<FunctionId>,
    pub memory_used_mb: u32,
    pub busy_count: u32,
    pub last_active: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Upstream {
    Registry,
    Vm(VmId),
}

impl Upstream {
    pub fn vm(self) -> Option<VmId> {
        match self {
            Upstream::Registry => None,
            Upstream::Vm(v) => Some(v),
        }
    }
}

impl From<Option<VmId>> for Upstream {
    fn from(v: Option<VmId>) -> Self {
        v.map_or(Upstream::Registry, Upstream::Vm)
    }
}

impl fmt::Display for Upstream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Upstream::Registry => f.write_str("registry"),
            Upstream::Vm(v) => write!(f, "vm{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlanEntry {
    pub vm: VmId,
    pub upstream: Upstream,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProvisionPlan {
    pub function: FunctionId,
    pub entries: Vec<PlanEntry>,
    /// Set when the free pool ran dry before the deficit was covered.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManagerError {
    #[error("function {0} is already registered")]
    DuplicateFunction(FunctionId),
    #[error("function {0} is not registered")]
    UnknownFunction(FunctionId),
    #[error("vm {0} is not active")]
    UnknownVm(VmId),
    #[error("free pool exhausted after {} placements", plan.entries.len())]
    PoolExhausted { plan: ProvisionPlan },
}

#[derive(Debug, Clone)]
pub struct FtManager {
    config: ManagerConfig,
    functions: BTreeMap<FunctionId, FunctionSpec>,
    trees: BTreeMap<FunctionId, FunctionTree>,
    free_pool: VecDeque<VmId>,
    active: BTreeMap<VmId, VmState>,
    failed: BTreeSet<VmId>,
    next_vm: u64,
}

impl FtManager {
    pub fn new(config: ManagerConfig) -> Self {
        FtManager {
            config,
            functions: BTreeMap::new(),
            trees: BTreeMap::new(),
            free_pool: VecDeque::new(),
            active: BTreeMap::new(),
            failed: BTreeSet::new(),
            next_vm: 1,
        }
    }

    /// Manager with `n` fresh VMs in the free pool.
    pub fn with_vms(config: ManagerConfig, n: usize) -> Self {
        let mut m = FtManager::new(config);
        m.add_vms(n);
        m
    }

    pub fn add_vms(&mut self, n: usize) -> Vec<VmId> {
        let ids: Vec<VmId> = (0..n as u64).map(|i| VmId(self.next_vm + i)).collect();
        self.next_vm += n as u64;
        self.free_pool.extend(ids.iter().copied());
        ids
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn register_function(
        &mut self,
        id: FunctionId,
        image: ImageRef,
        memory_mb: u32,
    ) -> Result<(), ManagerError> {
        if self.functions.contains_key(&id) {
            return Err(ManagerError::DuplicateFunction(id));
        }
        assert!(memory_mb > 0, "function memory must be positive");
        self.trees.insert(id.clone(), FunctionTree::new(id.clone()));
        self.functions.insert(
            id.clone(),
            FunctionSpec {
                id,
                image,
                memory_mb,
            },
        );
        Ok(())
    }

    pub fn function(&self, id: &FunctionId) -> Option<&FunctionSpec> {
        self.functions.get(id)
    }

    pub fn functions(&self) -> impl Iterator<Item = &FunctionSpec> {
        self.functions.values()
    }

    pub fn tree(&self, id: &FunctionId) -> Option<&FunctionTree> {
        self.trees.get(id)
    }

    pub fn trees(&self) -> impl Iterator<Item = &FunctionTree> {
        self.trees.values()
    }

    pub fn free_pool(&self) -> impl Iterator<Item = VmId> + '_ {
        self.free_pool.iter().copied()
    }

    pub fn free_count(&self) -> usize {
        self.free_pool.len()
    }

    pub fn active_vms(&self) -> impl Iterator<Item = &VmState> {
        self.active.values()
    }

    pub fn vm(&self, vm: VmId) -> Option<&VmState> {
        self.active.get(&vm)
    }

    pub fn is_failed(&self, vm: VmId) -> bool {
        self.failed.contains(&vm)
    }

    /// Current stream source of `vm` for function `id`.
    pub fn upstream(&self, id: &FunctionId, vm: VmId) -> Option<Upstream> {
        let t = self.trees.get(id)?;
        t.upstream_of(vm).ok().map(Upstream::from)
    }

    /// Grows `id`'s tree to `demand` members.
    pub fn scale_out(
        &mut self,
        id: &FunctionId,
        demand: usize,
        now: f64,
    ) -> Result<ProvisionPlan, ManagerError> {
        let have = self
            .trees
            .get(id)
            .ok_or_else(|| ManagerError::UnknownFunction(id.clone()))?
            .len();
        let mut plan = ProvisionPlan {
            function: id.clone(),
            entries: Vec::new(),
            exhausted: false,
        };
        for _ in have..demand {
            let vm = match self.place_function(id) {
                Ok(vm) => vm,
                Err(ManagerError::PoolExhausted { .. }) => {
                    plan.exhausted = true;
                    return Err(ManagerError::PoolExhausted { plan });
                }
                Err(e) => return Err(e),
            };
            let mem = self.functions[id].memory_mb;
            let st = self.active.get_mut(&vm).expect("placed vm is active");
            st.resident_functions.insert(id.clone());
            st.memory_used_mb += mem;
            st.last_active = now;
            let tree = self.trees.get_mut(id).expect("checked");
            let parent = tree.insert(vm).expect("placement never repeats a vm within a tree");
            plan.entries.push(PlanEntry {
                vm,
                upstream: parent.into(),
            });
        }
        Ok(plan)
    }

    /// Picks a VM for one more container of `id`: the most loaded active VM
    /// that still fits, else the oldest free VM.
    pub fn place_function(&mut self, id: &FunctionId) -> Result<VmId, ManagerError> {
        let spec = self
            .functions
            .get(id)
            .ok_or_else(|| ManagerError::UnknownFunction(id.clone()))?;
        let cap = self.config.per_vm_function_cap;
        let best = self
            .active
            .values()
            .filter(|s| {
                !s.resident_functions.contains(id)
                    && s.resident_functions.len() < cap
                    && s.memory_used_mb + spec.memory_mb <= s.memory_capacity_mb
            })
            .max_by(|a, b| {
                a.resident_functions
                    .len()
                    .cmp(&b.resident_functions.len())
                    .then(a.memory_used_mb.cmp(&b.memory_used_mb))
                    .then(b.vm.cmp(&a.vm))
            })
            .map(|s| s.vm);
        if let Some(vm) = best {
            return Ok(vm);
        }
        if spec.memory_mb > self.config.vm_memory_mb {
            return Err(ManagerError::PoolExhausted {
                plan: ProvisionPlan {
                    function: id.clone(),
                    entries: Vec::new(),
                    exhausted: true,
                },
            });
        }
        let vm = self.free_pool.pop_front().ok_or_else(|| ManagerError::PoolExhausted {
            plan: ProvisionPlan {
                function: id.clone(),
                entries: Vec::new(),
                exhausted: true,
            },
        })?;
        self.active.insert(
            vm,
            VmState {
                vm,
                memory_capacity_mb: self.config.vm_memory_mb,
                nic_capacity_bps: self.config.nic_bps(),
                resident_functions: BTreeSet::new(),
                memory_used_mb: 0,
                busy_count: 0,
                last_active: 0.0,
            },
        );
        Ok(vm)
    }

    pub fn mark_busy(&mut self, vm: VmId, now: f64) -> Result<(), ManagerError> {
        let s = self.active.get_mut(&vm).ok_or(ManagerError::UnknownVm(vm))?;
        s.busy_count += 1;
        s.last_active = now;
        Ok(())
    }

    pub fn mark_idle(&mut self, vm: VmId, now: f64) -> Result<(), ManagerError> {
        let s = self.active.get_mut(&vm).ok_or(ManagerError::UnknownVm(vm))?;
        s.busy_count = s.busy_count.saturating_sub(1);
        s.last_active = now;
        Ok(())
    }

    pub fn touch(&mut self, vm: VmId, now: f64) {
        if let Some(s) = self.active.get_mut(&vm) {
            s.last_active = now;
        }
    }

    fn detach(&mut self, vm: VmId) -> Vec<(FunctionId, RebalanceReport)> {
        let st = self.active.remove(&vm).expect("caller checked");
        let mut out = Vec::new();
        for f in st.resident_functions {
            if let Some(t) = self.trees.get_mut(&f) {
                if let Ok(rep) = t.delete(vm) {
                    out.push((f, rep));
                }
            }
        }
        out
    }

    /// Returns every idle VM past the timeout to the free pool.
    pub fn reclaim_idle(&mut self, now: f64) -> Vec<VmId> {
        let due: Vec<VmId> = self
            .active
            .values()
            .filter(|s| s.busy_count == 0 && now - s.last_active >= self.config.idle_timeout_s)
            .map(|s| s.vm)
            .collect();
        for &vm in &due {
            self.detach(vm);
            self.free_pool.push_back(vm);
        }
        due
    }

    /// Removes a failed VM from every tree; it never returns to the pool.
    pub fn on_vm_failure(&mut self, vm: VmId) -> Result<Vec<(FunctionId, RebalanceReport)>, ManagerError> {
        if !self.active.contains_key(&vm) {
            return Err(ManagerError::UnknownVm(vm));
        }
        let reports = self.detach(vm);
        self.failed.insert(vm);
        Ok(reports)
    }

    /// Violations of the pool, placement and tree invariants.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let free: BTreeSet<VmId> = self.free_pool.iter().copied().collect();
        if free.len() != self.free_pool.len() {
            out.push("free pool holds a VM twice".to_string());
        }
        for vm in &free {
            if self.active.contains_key(vm) || self.failed.contains(vm) {
                out.push(format!("vm {vm} is in more than one pool"));
            }
        }
        for s in self.active.values() {
            if s.resident_functions.len() > self.config.per_vm_function_cap {
                out.push(format!("vm {} exceeds the function cap", s.vm));
            }
            if s.memory_used_mb > s.memory_capacity_mb {
                out.push(format!("vm {} exceeds its memory", s.vm));
            }
        }
        for t in self.trees.values() {
            for v in t.vms() {
                if !self.active.contains_key(&v) {
                    out.push(format!("tree {} holds inactive vm {v}", t.function()));
                }
            }
            let roots = t
                .vms()
                .filter(|&v| t.upstream_of(v).ok().flatten().is_none())
                .count();
            if roots > 1 {
                out.push(format!("tree {} has {roots} registry-facing nodes", t.function()));
            }
            out.extend(t.check_invariants().into_iter().map(|v| format!("{}: {v}", t.function())));
        }
        out
    }
}
