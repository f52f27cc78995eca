//! Function trees: one balanced binary overlay of VMs per function.
//!
//! Nodes carry no ordering key. Insertion fills the first open child slot in
//! breadth-first order; deletion splices the node out along its taller-child
//! spine and then restores balance bottom-up with the four classic rotations.
//! Heights count levels, so a single node has height 1.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::{self, Write as _};

use serde::Serialize;
use thiserror::Error;

pub use crate::ids::{FunctionId, VmId};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FtreeError {
    #[error("vm {0} is already in the tree")]
    DuplicateVm(VmId),
    #[error("vm {0} is not in the tree")]
    UnknownVm(VmId),
    #[error("{kind} is not applicable at pivot {pivot}")]
    InvalidRotation { kind: RotationKind, pivot: VmId },
    #[error("malformed tree: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FtNode {
    pub vm: VmId,
    pub parent: Option<VmId>,
    pub left: Option<VmId>,
    pub right: Option<VmId>,
    pub height: u32,
}

impl FtNode {
    fn leaf(vm: VmId, parent: Option<VmId>) -> Self {
        FtNode {
            vm,
            parent,
            left: None,
            right: None,
            height: 1,
        }
    }

    fn child(&self, side: Side) -> Option<VmId> {
        match side {
            Side::Left => self.left,
            Side::Right => self.right,
        }
    }

    fn child_mut(&mut self, side: Side) -> &mut Option<VmId> {
        match side {
            Side::Left => &mut self.left,
            Side::Right => &mut self.right,
        }
    }

    pub fn children(&self) -> impl Iterator<Item = VmId> {
        self.left.into_iter().chain(self.right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RotationKind {
    #[serde(rename = "left_rotate")]
    Left,
    #[serde(rename = "right_rotate")]
    Right,
    #[serde(rename = "left_right_rotate")]
    LeftRight,
    #[serde(rename = "right_left_rotate")]
    RightLeft,
}

impl fmt::Display for RotationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RotationKind::Left => "left_rotate",
            RotationKind::Right => "right_rotate",
            RotationKind::LeftRight => "left_right_rotate",
            RotationKind::RightLeft => "right_left_rotate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Rotation {
    pub kind: RotationKind,
    pub pivot: VmId,
}

/// Rotations applied by one `delete`, in application order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct RebalanceReport {
    pub rotations: Vec<Rotation>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionTree {
    function: FunctionId,
    root: Option<VmId>,
    nodes: BTreeMap<VmId, FtNode>,
}

impl FunctionTree {
    pub fn new(function: FunctionId) -> Self {
        FunctionTree {
            function,
            root: None,
            nodes: BTreeMap::new(),
        }
    }

    /// Builds a tree from explicit links without enforcing balance. Heights
    /// are recomputed; used for hand-made fixtures and counterexamples.
    pub fn assemble(
        function: FunctionId,
        root: VmId,
        links: &[(VmId, Side, VmId)],
    ) -> Result<Self, FtreeError> {
        let mut ft = FunctionTree::new(function);
        ft.root = Some(root);
        ft.nodes.insert(root, FtNode::leaf(root, None));
        for &(parent, side, child) in links {
            if ft.nodes.contains_key(&child) {
                return Err(FtreeError::DuplicateVm(child));
            }
            let p = ft
                .nodes
                .get_mut(&parent)
                .ok_or(FtreeError::UnknownVm(parent))?;
            if p.child(side).is_some() {
                return Err(FtreeError::Malformed(format!(
                    "{parent} already has a {side:?} child"
                )));
            }
            *p.child_mut(side) = Some(child);
            ft.nodes.insert(child, FtNode::leaf(child, Some(parent)));
        }
        let order = ft.bfs_order();
        for vm in order.into_iter().rev() {
            ft.fix_height(vm);
        }
        Ok(ft)
    }

    pub fn function(&self) -> &FunctionId {
        &self.function
    }

    pub fn root(&self) -> Option<VmId> {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, vm: VmId) -> bool {
        self.nodes.contains_key(&vm)
    }

    pub fn node(&self, vm: VmId) -> Option<&FtNode> {
        self.nodes.get(&vm)
    }

    pub fn vms(&self) -> impl Iterator<Item = VmId> + '_ {
        self.nodes.keys().copied()
    }

    /// Attaches `vm` under the first node, in breadth-first order, that has
    /// an open child slot (left before right). Returns the chosen parent, or
    /// `None` when `vm` became the root.
    pub fn insert(&mut self, vm: VmId) -> Result<Option<VmId>, FtreeError> {
        if self.nodes.contains_key(&vm) {
            return Err(FtreeError::DuplicateVm(vm));
        }
        let Some(root) = self.root else {
            self.root = Some(vm);
            self.nodes.insert(vm, FtNode::leaf(vm, None));
            return Ok(None);
        };
        let mut queue = VecDeque::from([root]);
        while let Some(cur) = queue.pop_front() {
            let node = &self.nodes[&cur];
            let open = if node.left.is_none() {
                Some(Side::Left)
            } else if node.right.is_none() {
                Some(Side::Right)
            } else {
                None
            };
            if let Some(side) = open {
                *self.node_mut(cur).child_mut(side) = Some(vm);
                self.nodes.insert(vm, FtNode::leaf(vm, Some(cur)));
                // Refresh heights up to the root.
                let mut report = RebalanceReport::default();
                self.retrace(Some(cur), &mut report);
                debug_assert!(report.rotations.is_empty());
                return Ok(Some(cur));
            }
            queue.extend(node.children());
        }
        unreachable!("a finite binary tree always has an open slot")
    }

    /// Removes `vm` and rebalances. A leaf is detached; an inner node is
    /// replaced by the root of its taller child subtree (ties go left), and
    /// the replacement repeats down that spine until a leaf moves up.
    pub fn delete(&mut self, vm: VmId) -> Result<RebalanceReport, FtreeError> {
        if !self.nodes.contains_key(&vm) {
            return Err(FtreeError::UnknownVm(vm));
        }
        let mut spine = vec![vm];
        loop {
            let last = *spine.last().unwrap();
            let n = &self.nodes[&last];
            let next = match (n.left, n.right) {
                (None, None) => break,
                (Some(l), None) => l,
                (None, Some(r)) => r,
                (Some(l), Some(r)) => {
                    if self.h(Some(l)) >= self.h(Some(r)) {
                        l
                    } else {
                        r
                    }
                }
            };
            spine.push(next);
        }

        // Snapshot the positions along the spine before rewiring.
        let positions: Vec<FtNode> = spine.iter().map(|v| self.nodes[v].clone()).collect();
        let k = spine.len() - 1;
        let mut deepest = positions[k].parent;

        for i in 0..k {
            let holder = spine[i + 1];
            let pos = &positions[i];
            let parent = if i == 0 { pos.parent } else { Some(spine[i]) };
            let below = if i + 1 < k { Some(spine[i + 2]) } else { None };
            let mut left = pos.left;
            let mut right = pos.right;
            if left == Some(spine[i + 1]) {
                left = below;
            } else {
                right = below;
            }
            for c in [left, right].into_iter().flatten() {
                if Some(c) != below {
                    self.node_mut(c).parent = Some(holder);
                }
            }
            let h = self.node_mut(holder);
            h.parent = parent;
            h.left = left;
            h.right = right;
            if i + 1 == k {
                deepest = Some(holder);
            }
        }

        // Hook the spine head into vm's old parent.
        let head = if k == 0 { None } else { Some(spine[1]) };
        match positions[0].parent {
            None => self.root = head,
            Some(p) => {
                let pn = self.node_mut(p);
                if pn.left == Some(vm) {
                    pn.left = head;
                } else {
                    pn.right = head;
                }
            }
        }
        self.nodes.remove(&vm);

        let mut report = RebalanceReport::default();
        self.retrace(deepest, &mut report);
        Ok(report)
    }

    pub fn rotate_left(&mut self, pivot: VmId) -> Result<(), FtreeError> {
        self.check_rotation(RotationKind::Left, pivot)?;
        let top = self.rotate_raw(pivot, Side::Left);
        self.refresh_up(self.nodes[&top].parent);
        Ok(())
    }

    pub fn rotate_right(&mut self, pivot: VmId) -> Result<(), FtreeError> {
        self.check_rotation(RotationKind::Right, pivot)?;
        let top = self.rotate_raw(pivot, Side::Right);
        self.refresh_up(self.nodes[&top].parent);
        Ok(())
    }

    pub fn rotate_left_right(&mut self, pivot: VmId) -> Result<(), FtreeError> {
        self.check_rotation(RotationKind::LeftRight, pivot)?;
        let top = self.apply_rotation(RotationKind::LeftRight, pivot);
        self.refresh_up(self.nodes[&top].parent);
        Ok(())
    }

    pub fn rotate_right_left(&mut self, pivot: VmId) -> Result<(), FtreeError> {
        self.check_rotation(RotationKind::RightLeft, pivot)?;
        let top = self.apply_rotation(RotationKind::RightLeft, pivot);
        self.refresh_up(self.nodes[&top].parent);
        Ok(())
    }

    pub fn upstream_of(&self, vm: VmId) -> Result<Option<VmId>, FtreeError> {
        self.nodes
            .get(&vm)
            .map(|n| n.parent)
            .ok_or(FtreeError::UnknownVm(vm))
    }

    pub fn children_of(&self, vm: VmId) -> Result<Vec<VmId>, FtreeError> {
        self.nodes
            .get(&vm)
            .map(|n| n.children().collect())
            .ok_or(FtreeError::UnknownVm(vm))
    }

    pub fn bfs_order(&self) -> Vec<VmId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut queue: VecDeque<VmId> = self.root.into_iter().collect();
        while let Some(cur) = queue.pop_front() {
            out.push(cur);
            if let Some(n) = self.nodes.get(&cur) {
                queue.extend(n.children());
            }
            if out.len() > self.nodes.len() {
                break; // cycle guard for malformed trees
            }
        }
        out
    }

    /// Height in levels; 0 for an empty tree.
    pub fn height(&self) -> u32 {
        self.h(self.root)
    }

    /// Edge-depth of `vm` below the root.
    pub fn depth_of(&self, vm: VmId) -> Result<u32, FtreeError> {
        let mut n = self.nodes.get(&vm).ok_or(FtreeError::UnknownVm(vm))?;
        let mut d = 0;
        while let Some(p) = n.parent {
            d += 1;
            n = &self.nodes[&p];
        }
        Ok(d)
    }

    /// Every violated structural invariant, described in plain text.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        let parentless: Vec<VmId> = self
            .nodes
            .values()
            .filter(|n| n.parent.is_none())
            .map(|n| n.vm)
            .collect();
        match self.root {
            None if !self.nodes.is_empty() => out.push("root missing in non-empty tree".into()),
            Some(r) if !self.nodes.contains_key(&r) => out.push(format!("root {r} not a node")),
            _ => {}
        }
        if !self.nodes.is_empty() && parentless.len() != 1 {
            out.push(format!("{} parentless nodes", parentless.len()));
        }
        if let (Some(r), [only]) = (self.root, parentless.as_slice()) {
            if r != *only {
                out.push(format!("root {r} differs from parentless node {only}"));
            }
        }
        for n in self.nodes.values() {
            if n.left.is_some() && n.left == n.right {
                out.push(format!("node {} lists the same child twice", n.vm));
            }
            for c in n.children() {
                match self.nodes.get(&c) {
                    None => out.push(format!("node {} has dangling child {c}", n.vm)),
                    Some(cn) if cn.parent != Some(n.vm) => {
                        out.push(format!("child {c} does not point back to {}", n.vm))
                    }
                    _ => {}
                }
            }
            if let Some(p) = n.parent {
                match self.nodes.get(&p) {
                    None => out.push(format!("node {} has dangling parent {p}", n.vm)),
                    Some(pn) if pn.left != Some(n.vm) && pn.right != Some(n.vm) => {
                        out.push(format!("parent {p} does not list {} as a child", n.vm))
                    }
                    _ => {}
                }
            }
        }
        // Reachability and acyclicity.
        let mut seen = BTreeSet::new();
        let mut stack: Vec<VmId> = self.root.into_iter().collect();
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur) {
                out.push(format!("cycle through node {cur}"));
                break;
            }
            if let Some(n) = self.nodes.get(&cur) {
                stack.extend(n.children());
            }
        }
        if seen.len() != self.nodes.len() {
            out.push(format!(
                "{} of {} nodes reachable from root",
                seen.len(),
                self.nodes.len()
            ));
        }
        if out.is_empty() {
            for n in self.nodes.values() {
                let hl = self.true_height(n.left);
                let hr = self.true_height(n.right);
                if n.height != 1 + hl.max(hr) {
                    out.push(format!(
                        "node {} stores height {} but has height {}",
                        n.vm,
                        n.height,
                        1 + hl.max(hr)
                    ));
                }
                if hl.abs_diff(hr) > 1 {
                    out.push(format!(
                        "BALANCE violated at node {}: left {hl}, right {hr}",
                        n.vm
                    ));
                }
            }
        }
        out
    }

    /// Deterministic text form: one line per node in breadth-first order,
    /// `vm parent|- left|- right|- height`.
    pub fn to_debug_string(&self) -> String {
        fn opt(v: Option<VmId>) -> String {
            v.map_or_else(|| "-".to_string(), |v| v.to_string())
        }
        let mut s = String::new();
        for vm in self.bfs_order() {
            let n = &self.nodes[&vm];
            let _ = writeln!(
                s,
                "{} {} {} {} {}",
                n.vm,
                opt(n.parent),
                opt(n.left),
                opt(n.right),
                n.height
            );
        }
        s
    }

    fn node_mut(&mut self, vm: VmId) -> &mut FtNode {
        self.nodes.get_mut(&vm).expect("node present")
    }

    fn h(&self, vm: Option<VmId>) -> u32 {
        vm.map_or(0, |v| self.nodes[&v].height)
    }

    fn true_height(&self, vm: Option<VmId>) -> u32 {
        match vm.and_then(|v| self.nodes.get(&v)) {
            None => 0,
            Some(n) => 1 + self.true_height(n.left).max(self.true_height(n.right)),
        }
    }

    fn fix_height(&mut self, vm: VmId) {
        let n = &self.nodes[&vm];
        let h = 1 + self.h(n.left).max(self.h(n.right));
        self.node_mut(vm).height = h;
    }

    fn refresh_up(&mut self, mut cur: Option<VmId>) {
        while let Some(v) = cur {
            self.fix_height(v);
            cur = self.nodes[&v].parent;
        }
    }

    fn balance(&self, vm: VmId) -> i64 {
        let n = &self.nodes[&vm];
        self.h(n.left) as i64 - self.h(n.right) as i64
    }

    /// Walks from `start` to the root fixing heights and rotating wherever
    /// the subtree heights differ by more than one.
    fn retrace(&mut self, start: Option<VmId>, report: &mut RebalanceReport) {
        let mut cur = start;
        while let Some(v) = cur {
            self.fix_height(v);
            let bal = self.balance(v);
            let top = if bal > 1 {
                let l = self.nodes[&v].left.unwrap();
                let kind = if self.balance(l) >= 0 {
                    RotationKind::Right
                } else {
                    RotationKind::LeftRight
                };
                report.rotations.push(Rotation { kind, pivot: v });
                self.apply_rotation(kind, v)
            } else if bal < -1 {
                let r = self.nodes[&v].right.unwrap();
                let kind = if self.balance(r) <= 0 {
                    RotationKind::Left
                } else {
                    RotationKind::RightLeft
                };
                report.rotations.push(Rotation { kind, pivot: v });
                self.apply_rotation(kind, v)
            } else {
                v
            };
            cur = self.nodes[&top].parent;
        }
    }

    fn check_rotation(&self, kind: RotationKind, pivot: VmId) -> Result<(), FtreeError> {
        let n = self.nodes.get(&pivot).ok_or(FtreeError::UnknownVm(pivot))?;
        let ok = match kind {
            RotationKind::Right => n.left.is_some(),
            RotationKind::Left => n.right.is_some(),
            RotationKind::LeftRight => n.left.is_some_and(|l| self.nodes[&l].right.is_some()),
            RotationKind::RightLeft => n.right.is_some_and(|r| self.nodes[&r].left.is_some()),
        };
        if ok {
            Ok(())
        } else {
            Err(FtreeError::InvalidRotation { kind, pivot })
        }
    }

    /// Applies a (possibly double) rotation at `pivot`; returns the new
    /// subtree root. Heights inside the subtree are fixed, ancestors are not.
    fn apply_rotation(&mut self, kind: RotationKind, pivot: VmId) -> VmId {
        match kind {
            RotationKind::Left => self.rotate_raw(pivot, Side::Left),
            RotationKind::Right => self.rotate_raw(pivot, Side::Right),
            RotationKind::LeftRight => {
                let l = self.nodes[&pivot].left.unwrap();
                self.rotate_raw(l, Side::Left);
                self.rotate_raw(pivot, Side::Right)
            }
            RotationKind::RightLeft => {
                let r = self.nodes[&pivot].right.unwrap();
                self.rotate_raw(r, Side::Right);
                self.rotate_raw(pivot, Side::Left)
            }
        }
    }

    /// Single rotation in direction `dir`: a right rotation lifts the left
    /// child above `pivot`, a left rotation lifts the right child.
    fn rotate_raw(&mut self, pivot: VmId, dir: Side) -> VmId {
        let up_side = match dir {
            Side::Right => Side::Left,
            Side::Left => Side::Right,
        };
        let lifted = self.nodes[&pivot].child(up_side).expect("rotation child");
        let inner = self.nodes[&lifted].child(dir);
        let parent = self.nodes[&pivot].parent;

        *self.node_mut(pivot).child_mut(up_side) = inner;
        if let Some(i) = inner {
            self.node_mut(i).parent = Some(pivot);
        }
        *self.node_mut(lifted).child_mut(dir) = Some(pivot);
        self.node_mut(pivot).parent = Some(lifted);
        self.node_mut(lifted).parent = parent;
        match parent {
            None => self.root = Some(lifted),
            Some(p) => {
                let pn = self.node_mut(p);
                if pn.left == Some(pivot) {
                    pn.left = Some(lifted);
                } else {
                    pn.right = Some(lifted);
                }
            }
        }
        self.fix_height(pivot);
        self.fix_height(lifted);
        lifted
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(n: u64) -> VmId {
        VmId(n)
    }

    fn tree_of(ids: &[u64]) -> FunctionTree {
        let mut ft = FunctionTree::new("f".into());
        for &i in ids {
            ft.insert(v(i)).unwrap();
        }
        ft
    }

    /// Right-heavy delete fixture: 1 root, 1.left = 2, 1.right = 6, 2.left = 3, 2.right = 5.
    fn left_heavy() -> FunctionTree {
        tree_of(&[1, 2, 6, 3, 5])
    }

    fn right_left() -> FunctionTree {
        FunctionTree::assemble(
            "f".into(),
            v(1),
            &[(v(1), Side::Left, v(2)), (v(1), Side::Right, v(3)), (v(3), Side::Left, v(5))],
        )
        .unwrap()
    }

    #[test]
    fn empty_tree() {
        let ft = FunctionTree::new("f1".into());
        assert_eq!(ft.len(), 0);
        assert_eq!(ft.root(), None);
        assert_eq!(ft.height(), 0);
        assert!(ft.check_invariants().is_empty());
    }

    #[test]
    fn first_insert_becomes_root() {
        let mut ft = FunctionTree::new("f1".into());
        assert_eq!(ft.insert(v(1)).unwrap(), None);
        assert_eq!(ft.root(), Some(v(1)));
        assert_eq!(ft.height(), 1);
    }

    #[test]
    fn three_nodes_two_levels() {
        assert_eq!(tree_of(&[1, 2, 3]).height(), 2);
    }

    #[test]
    fn insert_fills_right_slot_after_left() {
        let mut ft = tree_of(&[1, 2]);
        assert_eq!(ft.insert(v(3)).unwrap(), Some(v(1)));
        assert_eq!(ft.node(v(1)).unwrap().right, Some(v(3)));
    }

    #[test]
    fn seven_inserts_make_perfect_tree() {
        let ft = tree_of(&[1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(ft.height(), 3);
        assert_eq!(ft.bfs_order(), (1..=7).map(v).collect::<Vec<_>>());
        assert!(ft.check_invariants().is_empty());
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut ft = tree_of(&[1, 2]);
        assert_eq!(ft.insert(v(2)), Err(FtreeError::DuplicateVm(v(2))));
    }

    #[test]
    fn delete_unknown_rejected() {
        let mut ft = tree_of(&[1]);
        assert_eq!(ft.delete(v(9)), Err(FtreeError::UnknownVm(v(9))));
    }

    #[test]
    fn delete_right_subtree_rotates_right() {
        let mut ft = left_heavy();
        assert_eq!(ft.bfs_order(), vec![v(1), v(2), v(6), v(3), v(5)]);
        let report = ft.delete(v(6)).unwrap();
        assert_eq!(
            report.rotations,
            vec![Rotation {
                kind: RotationKind::Right,
                pivot: v(1)
            }]
        );
        assert_eq!(ft.root(), Some(v(2)));
        assert_eq!(ft.node(v(1)).unwrap().left, Some(v(5)));
        assert_eq!(ft.to_debug_string(), "2 - 3 1 3\n3 2 - - 1\n1 2 5 - 2\n5 1 - - 1\n");
    }

    #[test]
    fn delete_left_leaf_rotates_right_left() {
        let mut ft = right_left();
        let report = ft.delete(v(2)).unwrap();
        assert_eq!(
            report.rotations,
            vec![Rotation {
                kind: RotationKind::RightLeft,
                pivot: v(1)
            }]
        );
        assert_eq!(ft.to_debug_string(), "5 - 1 3 2\n1 5 - - 1\n3 5 - - 1\n");
    }

    #[test]
    fn delete_single_root_empties_tree() {
        let mut ft = tree_of(&[1]);
        assert!(ft.delete(v(1)).unwrap().rotations.is_empty());
        assert!(ft.is_empty());
        assert_eq!(ft.root(), None);
    }

    #[test]
    fn delete_inner_promotes_taller_child() {
        // 1 -> (2 -> (4, 5), 3); deleting 2 lifts 4 (tie goes left).
        let mut ft = tree_of(&[1, 2, 3, 4, 5]);
        ft.delete(v(2)).unwrap();
        assert_eq!(ft.node(v(1)).unwrap().left, Some(v(4)));
        assert_eq!(ft.node(v(4)).unwrap().right, Some(v(5)));
        assert!(ft.check_invariants().is_empty());
    }

    #[test]
    fn delete_root_promotes_spine() {
        let mut ft = tree_of(&[1, 2, 3, 4, 5, 6, 7]);
        ft.delete(v(1)).unwrap();
        assert_eq!(ft.root(), Some(v(2)));
        assert_eq!(ft.node(v(2)).unwrap().left, Some(v(4)));
        assert_eq!(ft.node(v(2)).unwrap().right, Some(v(3)));
        assert!(ft.check_invariants().is_empty());
        assert_eq!(ft.len(), 6);
    }

    #[test]
    fn rotate_right_on_left_heavy_root() {
        let mut ft = left_heavy();
        ft.rotate_right(v(1)).unwrap();
        assert_eq!(ft.root(), Some(v(2)));
        assert!(ft.check_invariants().is_empty());
    }

    #[test]
    fn rotation_and_mirror_restore_shape() {
        let ft0 = tree_of(&[1, 2, 3, 4, 5, 6, 7]);
        let mut ft = ft0.clone();
        ft.rotate_left(v(1)).unwrap();
        assert_eq!(ft.root(), Some(v(3)));
        ft.rotate_right(v(3)).unwrap();
        assert_eq!(ft, ft0);
    }

    #[test]
    fn invalid_rotation_reported() {
        let mut ft = tree_of(&[1, 2]);
        assert_eq!(
            ft.rotate_left(v(1)),
            Err(FtreeError::InvalidRotation {
                kind: RotationKind::Left,
                pivot: v(1)
            })
        );
        assert_eq!(
            ft.rotate_left_right(v(1)),
            Err(FtreeError::InvalidRotation {
                kind: RotationKind::LeftRight,
                pivot: v(1)
            })
        );
        assert_eq!(ft.rotate_right(v(7)), Err(FtreeError::UnknownVm(v(7))));
    }

    #[test]
    fn queries() {
        let ft = left_heavy();
        assert_eq!(ft.upstream_of(v(1)).unwrap(), None);
        assert_eq!(ft.upstream_of(v(5)).unwrap(), Some(v(2)));
        assert_eq!(ft.children_of(v(2)).unwrap(), vec![v(3), v(5)]);
        assert!(ft.children_of(v(6)).unwrap().is_empty());
        assert_eq!(ft.upstream_of(v(42)), Err(FtreeError::UnknownVm(v(42))));
        assert_eq!(ft.depth_of(v(5)).unwrap(), 2);
    }

    #[test]
    fn eighty_two_nodes_height_seven() {
        let ids: Vec<u64> = (1..=82).collect();
        assert_eq!(tree_of(&ids).height(), 7);
    }

    #[test]
    fn valid_tree_has_no_violations() {
        assert!(left_heavy().check_invariants().is_empty());
    }

    #[test]
    fn unbalanced_counterexample_reports_balance() {
        // 1 -> 2 -> 3 chain on the left: node 1 has left height 2, right 0.
        let ft = FunctionTree::assemble(
            "f".into(),
            v(1),
            &[(v(1), Side::Left, v(2)), (v(2), Side::Left, v(3))],
        )
        .unwrap();
        let violations = ft.check_invariants();
        assert_eq!(violations.len(), 1, "{violations:?}");
        assert!(violations[0].starts_with("BALANCE"));
    }

    #[test]
    fn corrupted_links_reported() {
        let mut ft = left_heavy();
        ft.node_mut(v(3)).parent = Some(v(1));
        assert!(!ft.check_invariants().is_empty());
    }
}
