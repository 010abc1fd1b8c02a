//! SPI tree construction and navigation.
//!
//! The tree routes query resolution: a request enters at the root and is
//! decomposed into sub-requests for child subtrees. Construction picks a
//! minimum-eccentricity root, visits the component in maximum-cardinality
//! order, and attaches each node so that the endpoints of every network arc
//! are ancestor-related in the tree. When the bushy attachment rule cannot
//! keep that promise the whole build falls back to a chain, which satisfies
//! the constraint trivially.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::network::{Network, NodeId};

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("EmptyComponent: {0}")]
    EmptyComponent(String),
}

/// Tree attachment strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeMode {
    /// Attach under the deepest visited skeleton neighbor when all visited
    /// neighbors lie on one root path; otherwise fall back to a chain.
    Bushy,
    /// Each node's tree parent is the previously visited node.
    Chain,
}

impl fmt::Display for TreeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeMode::Bushy => f.write_str("bushy"),
            TreeMode::Chain => f.write_str("chain"),
        }
    }
}

impl std::str::FromStr for TreeMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bushy" => Ok(TreeMode::Bushy),
            "chain" => Ok(TreeMode::Chain),
            other => Err(format!(
                "unknown tree mode {other:?} (expected bushy|chain)"
            )),
        }
    }
}

/// A rooted tree over the nodes of one skeleton component, satisfying the arc
/// constraint: for every network arc `(u, v)` inside the component, one
/// endpoint is a tree ancestor of the other.
///
/// Immutable after build.
#[derive(Debug, Clone)]
pub struct SpiTree {
    root: NodeId,
    parent: BTreeMap<NodeId, Option<NodeId>>,
    children: BTreeMap<NodeId, Vec<NodeId>>,
    depth: BTreeMap<NodeId, usize>,
    subtree: BTreeMap<NodeId, BTreeSet<NodeId>>,
    mcs_order: Vec<NodeId>,
    mode: TreeMode,
    fell_back: bool,
}

/// Picks the root for one connected skeleton component: the node with minimum
/// eccentricity within the component, ties broken lexicographically.
pub fn choose_root(net: &Network, component: &BTreeSet<NodeId>) -> Result<NodeId, TreeError> {
    let mut best: Option<(usize, NodeId)> = None;
    for id in component {
        let dist = net
            .skeleton_bfs(id)
            .map_err(|e| TreeError::EmptyComponent(e.to_string()))?;
        let ecc = component
            .iter()
            .filter_map(|other| dist.get(other))
            .copied()
            .max()
            .unwrap_or(0);
        match &best {
            Some((b, _)) if *b <= ecc => {}
            _ => best = Some((ecc, id.clone())),
        }
    }
    best.map(|(_, id)| id)
        .ok_or_else(|| TreeError::EmptyComponent("component has no nodes".to_string()))
}

/// Builds the SPI tree for the component containing `root`.
///
/// Nodes are visited in maximum-cardinality-search order: the next node is
/// the unvisited one with the most visited skeleton neighbors, ties broken
/// lexicographically. Chain mode attaches each node under the previously
/// visited one. Bushy mode attaches under the deepest visited neighbor, but
/// only when every visited neighbor lies on that neighbor's root path; the
/// first violation restarts the whole build in chain mode.
pub fn build_tree(net: &Network, root: &NodeId, mode: TreeMode) -> Result<SpiTree, TreeError> {
    if !net.contains(root) {
        return Err(TreeError::EmptyComponent(format!("no node named {root}")));
    }
    let component: BTreeSet<NodeId> = net
        .skeleton_bfs(root)
        .map_err(|e| TreeError::EmptyComponent(e.to_string()))?
        .into_keys()
        .collect();
    let order = mcs_order(net, root, &component);
    match mode {
        TreeMode::Chain => Ok(assemble(
            chain_parents(&order),
            order,
            TreeMode::Chain,
            false,
        )),
        TreeMode::Bushy => match bushy_parents(net, &order) {
            Some(parents) => Ok(assemble(parents, order, TreeMode::Bushy, false)),
            None => Ok(assemble(
                chain_parents(&order),
                order,
                TreeMode::Chain,
                true,
            )),
        },
    }
}

fn mcs_order(net: &Network, root: &NodeId, component: &BTreeSet<NodeId>) -> Vec<NodeId> {
    let mut visited: BTreeSet<NodeId> = BTreeSet::new();
    let mut order = vec![root.clone()];
    visited.insert(root.clone());
    while visited.len() < component.len() {
        let next = component
            .iter()
            .filter(|id| !visited.contains(*id))
            .map(|id| {
                let count = net
                    .skeleton_neighbors(id)
                    .expect("component members exist")
                    .iter()
                    .filter(|n| visited.contains(*n))
                    .count();
                (id.clone(), count)
            })
            // Max visited-neighbor count; ties go to the smaller id.
            .max_by(|(ida, ca), (idb, cb)| ca.cmp(cb).then_with(|| idb.cmp(ida)))
            .map(|(id, _)| id)
            .expect("unvisited nodes remain");
        visited.insert(next.clone());
        order.push(next);
    }
    order
}

fn chain_parents(order: &[NodeId]) -> BTreeMap<NodeId, Option<NodeId>> {
    let mut parent = BTreeMap::new();
    for (i, id) in order.iter().enumerate() {
        let p = if i == 0 {
            None
        } else {
            Some(order[i - 1].clone())
        };
        parent.insert(id.clone(), p);
    }
    parent
}

/// The bushy attachment rule; `None` means the build must fall back to chain.
fn bushy_parents(net: &Network, order: &[NodeId]) -> Option<BTreeMap<NodeId, Option<NodeId>>> {
    let root = &order[0];
    let mut parent: BTreeMap<NodeId, Option<NodeId>> = BTreeMap::new();
    let mut depth: BTreeMap<NodeId, usize> = BTreeMap::new();
    parent.insert(root.clone(), None);
    depth.insert(root.clone(), 0);
    let mut visited: BTreeSet<NodeId> = BTreeSet::new();
    visited.insert(root.clone());

    for v in &order[1..] {
        let neighbors: Vec<NodeId> = net
            .skeleton_neighbors(v)
            .expect("order members exist")
            .iter()
            .filter(|n| visited.contains(*n))
            .cloned()
            .collect();
        let attach = if neighbors.is_empty() {
            root.clone()
        } else {
            // Deepest visited neighbor; lexicographic among equals.
            let deepest = neighbors
                .iter()
                .max_by(|a, b| depth[*a].cmp(&depth[*b]).then_with(|| b.cmp(a)))
                .cloned()
                .expect("neighbors is nonempty");
            let root_path = path_to_root(&parent, &deepest);
            if neighbors.iter().all(|n| root_path.contains(n)) {
                deepest
            } else {
                return None;
            }
        };
        depth.insert(v.clone(), depth[&attach] + 1);
        parent.insert(v.clone(), Some(attach));
        visited.insert(v.clone());
    }
    Some(parent)
}

fn path_to_root(parent: &BTreeMap<NodeId, Option<NodeId>>, from: &NodeId) -> BTreeSet<NodeId> {
    let mut path = BTreeSet::new();
    let mut cur = Some(from.clone());
    while let Some(id) = cur {
        cur = parent[&id].clone();
        path.insert(id);
    }
    path
}

fn assemble(
    parent: BTreeMap<NodeId, Option<NodeId>>,
    mcs_order: Vec<NodeId>,
    mode: TreeMode,
    fell_back: bool,
) -> SpiTree {
    let root = mcs_order[0].clone();
    let mut children: BTreeMap<NodeId, Vec<NodeId>> =
        parent.keys().map(|id| (id.clone(), Vec::new())).collect();
    for (id, p) in &parent {
        if let Some(p) = p {
            children.get_mut(p).unwrap().push(id.clone());
        }
    }
    let mut depth = BTreeMap::new();
    for id in &mcs_order {
        let d = match &parent[id] {
            None => 0,
            Some(p) => depth[p] + 1,
        };
        depth.insert(id.clone(), d);
    }
    let mut subtree: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
    // Visit in reverse MCS order: children are attached to already-visited
    // nodes, so every node's children precede it here.
    for id in mcs_order.iter().rev() {
        let mut set: BTreeSet<NodeId> = BTreeSet::new();
        set.insert(id.clone());
        for c in &children[id] {
            set.extend(subtree[c].iter().cloned());
        }
        subtree.insert(id.clone(), set);
    }
    SpiTree {
        root,
        parent,
        children,
        depth,
        subtree,
        mcs_order,
        mode,
        fell_back,
    }
}

impl SpiTree {
    pub fn root(&self) -> &NodeId {
        &self.root
    }

    /// The attachment mode actually used (chain when the bushy build fell
    /// back).
    pub fn mode(&self) -> TreeMode {
        self.mode
    }

    /// True when a bushy build restarted in chain mode.
    pub fn fell_back(&self) -> bool {
        self.fell_back
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.parent.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn tree_parent(&self, id: &NodeId) -> Option<&NodeId> {
        self.parent.get(id).and_then(|p| p.as_ref())
    }

    pub fn tree_children(&self, id: &NodeId) -> &[NodeId] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn depth(&self, id: &NodeId) -> Option<usize> {
        self.depth.get(id).copied()
    }

    /// Members of the subtree rooted at `id`, including `id`.
    pub fn subtree(&self, id: &NodeId) -> &BTreeSet<NodeId> {
        &self.subtree[id]
    }

    /// The visit order the tree was built in.
    pub fn mcs_order(&self) -> &[NodeId] {
        &self.mcs_order
    }

    /// Parent map in `(node, parent)` form; the root maps to `None`.
    pub fn parent_map(&self) -> &BTreeMap<NodeId, Option<NodeId>> {
        &self.parent
    }

    /// True when `anc` is `id` itself or a tree ancestor of `id`.
    pub fn is_ancestor_or_self(&self, anc: &NodeId, id: &NodeId) -> bool {
        let mut cur = Some(id.clone());
        while let Some(c) = cur {
            if &c == anc {
                return true;
            }
            cur = self.parent.get(&c).and_then(|p| p.clone());
        }
        false
    }

    /// Network arcs inside this component whose endpoints are not
    /// ancestor-related in the tree. Empty iff the arc constraint holds.
    pub fn verify_constraint(&self, net: &Network) -> Vec<(NodeId, NodeId)> {
        let mut violations = Vec::new();
        for id in self.parent.keys() {
            let spec = match net.node(id) {
                Ok(s) => s,
                Err(_) => continue,
            };
            for (pid, _) in &spec.parents {
                if !self.contains(pid) {
                    continue;
                }
                if !self.is_ancestor_or_self(pid, id) && !self.is_ancestor_or_self(id, pid) {
                    violations.push((pid.clone(), id.clone()));
                }
            }
        }
        violations
    }
}

/// One SPI tree per skeleton component, ordered by smallest member id.
#[derive(Debug, Clone)]
pub struct SpiForest {
    trees: Vec<SpiTree>,
    tree_of: BTreeMap<NodeId, usize>,
}

impl SpiForest {
    /// Builds a tree for every component with `choose_root` + `build_tree`.
    pub fn build(net: &Network, mode: TreeMode) -> Result<Self, TreeError> {
        let mut trees = Vec::new();
        let mut tree_of = BTreeMap::new();
        for component in net.components() {
            let root = choose_root(net, &component)?;
            let tree = build_tree(net, &root, mode)?;
            for id in &component {
                tree_of.insert(id.clone(), trees.len());
            }
            trees.push(tree);
        }
        Ok(SpiForest { trees, tree_of })
    }

    pub fn trees(&self) -> &[SpiTree] {
        &self.trees
    }

    pub fn tree_of(&self, id: &NodeId) -> Option<&SpiTree> {
        self.tree_of.get(id).map(|i| &self.trees[*i])
    }
}
