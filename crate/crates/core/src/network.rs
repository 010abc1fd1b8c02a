//! Linear-Gaussian Bayesian network definition, validation, and the graph
//! queries (topological order, ancestral closure, skeleton distances) used by
//! the rest of the engine.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Tolerances;
use crate::linalg;

/// Symbolic name of a network variable-vector.
///
/// Ordering is lexicographic on the underlying string; all deterministic
/// tie-breaking in the engine relies on it.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(Arc<str>);

impl NodeId {
    pub fn new(s: impl AsRef<str>) -> Self {
        NodeId(Arc::from(s.as_ref()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

impl From<String> for NodeId {
    fn from(s: String) -> Self {
        NodeId::new(s)
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        String::deserialize(de).map(NodeId::from)
    }
}

/// Errors raised while building or querying a network.
#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("SyntaxError: {0}")]
    Syntax(String),
    #[error("ShapeError: {0}")]
    Shape(String),
    #[error("CycleError: {0}")]
    Cycle(String),
    #[error("CovarianceError: {0}")]
    Covariance(String),
    #[error("DanglingRef: {0}")]
    DanglingRef(String),
    #[error("DuplicateNode: {0}")]
    DuplicateNode(String),
    #[error("UnknownNode: {0}")]
    UnknownNode(String),
}

/// One network variable-vector: conditional mean, noise covariance, and
/// ordered parent links.
///
/// The node's value is the sum of `link · parent` over all parents plus a
/// Gaussian noise term with the given mean and covariance. Root nodes carry
/// their prior directly; non-root nodes may still carry a nonzero noise mean.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Vector length of the variable.
    pub dim: usize,
    /// Mean of the noise term (length `dim`).
    pub mean: DVector<f64>,
    /// Covariance of the noise term (`dim × dim`, symmetric PSD).
    pub noise_cov: DMatrix<f64>,
    /// Ordered `(parent_id, link)` pairs; each link is `dim × parent_dim`.
    pub parents: Vec<(NodeId, DMatrix<f64>)>,
}

impl NodeSpec {
    /// A root node with the given prior.
    pub fn root(id: impl Into<NodeId>, mean: DVector<f64>, noise_cov: DMatrix<f64>) -> Self {
        NodeSpec {
            id: id.into(),
            dim: mean.len(),
            mean,
            noise_cov,
            parents: Vec::new(),
        }
    }

    /// A node with parents; `parents` holds `(id, link)` pairs.
    pub fn with_parents(
        id: impl Into<NodeId>,
        mean: DVector<f64>,
        noise_cov: DMatrix<f64>,
        parents: Vec<(NodeId, DMatrix<f64>)>,
    ) -> Self {
        NodeSpec {
            id: id.into(),
            dim: mean.len(),
            mean,
            noise_cov,
            parents,
        }
    }

    /// Checks the per-node invariants that do not need the rest of the graph.
    fn validate_local(&self, tol: &Tolerances) -> Result<(), NetworkError> {
        let id = &self.id;
        if id.as_str().is_empty()
            || id
                .as_str()
                .chars()
                .any(|c| c.is_whitespace() || matches!(c, ',' | ';' | '=' | '|'))
        {
            return Err(NetworkError::Syntax(format!(
                "invalid node id {id:?}: ids must be nonempty and free of whitespace and ',;=|'"
            )));
        }
        if self.dim == 0 {
            return Err(NetworkError::Shape(format!("node {id} has dim 0")));
        }
        if self.mean.len() != self.dim {
            return Err(NetworkError::Shape(format!(
                "node {id}: mean has length {} but dim is {}",
                self.mean.len(),
                self.dim
            )));
        }
        if self.noise_cov.nrows() != self.dim || self.noise_cov.ncols() != self.dim {
            return Err(NetworkError::Shape(format!(
                "node {id}: cov is {}x{} but dim is {}",
                self.noise_cov.nrows(),
                self.noise_cov.ncols(),
                self.dim
            )));
        }
        let defect = linalg::symmetry_defect(&self.noise_cov);
        if defect > tol.symmetry {
            return Err(NetworkError::Covariance(format!(
                "node {id}: cov asymmetry {defect:.3e} exceeds {:.1e}",
                tol.symmetry
            )));
        }
        let min_eig = linalg::min_eigenvalue(&self.noise_cov);
        let floor = -tol.psd_slack * linalg::trace_scale(&self.noise_cov);
        if min_eig < floor {
            return Err(NetworkError::Covariance(format!(
                "node {id}: cov smallest eigenvalue {min_eig:.3e} is below {floor:.3e}"
            )));
        }
        let mut seen = BTreeSet::new();
        for (pid, link) in &self.parents {
            if pid == id {
                return Err(NetworkError::Cycle(format!(
                    "node {id} lists itself as a parent"
                )));
            }
            if !seen.insert(pid.clone()) {
                return Err(NetworkError::DanglingRef(format!(
                    "node {id} lists parent {pid} twice"
                )));
            }
            if link.nrows() != self.dim {
                return Err(NetworkError::Shape(format!(
                    "node {id}: link to {pid} has {} rows but dim is {}",
                    link.nrows(),
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Per-node eccentricity on the undirected skeleton.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Eccentricity {
    Finite(usize),
    /// Some node is unreachable on the skeleton.
    Infinite,
}

impl fmt::Display for Eccentricity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Eccentricity::Finite(d) => write!(f, "{d}"),
            Eccentricity::Infinite => f.write_str("inf"),
        }
    }
}

/// A validated linear-Gaussian Bayesian network.
///
/// Immutable after construction; derived structure (topological order,
/// per-node ancestor sets, undirected skeleton) is precomputed. Safe to share
/// across concurrent readers.
#[derive(Debug, Clone)]
pub struct Network {
    nodes: BTreeMap<NodeId, NodeSpec>,
    topo: Vec<NodeId>,
    ancestors: BTreeMap<NodeId, BTreeSet<NodeId>>,
    children: BTreeMap<NodeId, BTreeSet<NodeId>>,
    skeleton: BTreeMap<NodeId, BTreeSet<NodeId>>,
    tolerances: Tolerances,
}

impl Network {
    /// Builds and validates a network with default tolerances.
    pub fn from_nodes(nodes: Vec<NodeSpec>) -> Result<Self, NetworkError> {
        Self::from_nodes_with(nodes, Tolerances::default())
    }

    /// Builds and validates a network with explicit tolerances.
    pub fn from_nodes_with(
        nodes: Vec<NodeSpec>,
        tolerances: Tolerances,
    ) -> Result<Self, NetworkError> {
        let mut map = BTreeMap::new();
        for spec in nodes {
            spec.validate_local(&tolerances)?;
            let id = spec.id.clone();
            if map.insert(id.clone(), spec).is_some() {
                return Err(NetworkError::DuplicateNode(format!(
                    "node id {id} appears more than once"
                )));
            }
        }
        // Resolve parent references and parent-side link widths.
        for spec in map.values() {
            for (pid, link) in &spec.parents {
                let parent = map.get(pid).ok_or_else(|| {
                    NetworkError::DanglingRef(format!(
                        "node {} references unknown parent {pid}",
                        spec.id
                    ))
                })?;
                if link.ncols() != parent.dim {
                    return Err(NetworkError::Shape(format!(
                        "node {}: link to {pid} has {} columns but {pid} has dim {}",
                        spec.id,
                        link.ncols(),
                        parent.dim
                    )));
                }
            }
        }

        let mut children: BTreeMap<NodeId, BTreeSet<NodeId>> =
            map.keys().map(|id| (id.clone(), BTreeSet::new())).collect();
        let mut skeleton: BTreeMap<NodeId, BTreeSet<NodeId>> =
            map.keys().map(|id| (id.clone(), BTreeSet::new())).collect();
        for spec in map.values() {
            for (pid, _) in &spec.parents {
                children.get_mut(pid).unwrap().insert(spec.id.clone());
                skeleton.get_mut(pid).unwrap().insert(spec.id.clone());
                skeleton.get_mut(&spec.id).unwrap().insert(pid.clone());
            }
        }

        // Kahn's ordering with lexicographic tie-breaking.
        let mut indegree: BTreeMap<NodeId, usize> = map
            .iter()
            .map(|(id, spec)| (id.clone(), spec.parents.len()))
            .collect();
        let mut ready: BTreeSet<NodeId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| id.clone())
            .collect();
        let mut topo = Vec::with_capacity(map.len());
        while let Some(next) = ready.iter().next().cloned() {
            ready.remove(&next);
            for child in &children[&next] {
                let d = indegree.get_mut(child).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.insert(child.clone());
                }
            }
            topo.push(next);
        }
        if topo.len() != map.len() {
            let stuck: Vec<_> = indegree
                .iter()
                .filter(|(_, d)| **d > 0)
                .map(|(id, _)| id.to_string())
                .collect();
            return Err(NetworkError::Cycle(format!(
                "parent graph contains a cycle through {{{}}}",
                stuck.join(", ")
            )));
        }

        // Ancestor sets, built in topological order.
        let mut ancestors: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for id in &topo {
            let mut set = BTreeSet::new();
            for (pid, _) in &map[id].parents {
                set.insert(pid.clone());
                set.extend(ancestors[pid].iter().cloned());
            }
            ancestors.insert(id.clone(), set);
        }

        Ok(Network {
            nodes: map,
            topo,
            ancestors,
            children,
            skeleton,
            tolerances,
        })
    }

    /// Parses the JSON network document format with default tolerances.
    pub fn parse(document: &str) -> Result<Self, NetworkError> {
        Self::parse_with(document, Tolerances::default())
    }

    /// Parses the JSON network document format with explicit tolerances.
    pub fn parse_with(document: &str, tolerances: Tolerances) -> Result<Self, NetworkError> {
        let doc: NetworkDoc = serde_json::from_str(document)
            .map_err(|e| NetworkError::Syntax(format!("malformed network document: {e}")))?;
        let mut nodes = Vec::with_capacity(doc.nodes.len());
        for nd in doc.nodes {
            if nd.mean.len() != nd.dim {
                return Err(NetworkError::Shape(format!(
                    "node {}: mean has length {} but dim is {}",
                    nd.id,
                    nd.mean.len(),
                    nd.dim
                )));
            }
            let mean = DVector::from_vec(nd.mean);
            let noise_cov = matrix_from_rows(&nd.id, "cov", &nd.cov)?;
            let mut parents = Vec::with_capacity(nd.parents.len());
            for p in nd.parents {
                let link = matrix_from_rows(&nd.id, &format!("link to {}", p.id), &p.link)?;
                parents.push((NodeId::from(p.id), link));
            }
            nodes.push(NodeSpec {
                id: NodeId::from(nd.id),
                dim: nd.dim,
                mean,
                noise_cov,
                parents,
            });
        }
        Self::from_nodes_with(nodes, tolerances)
    }

    /// Serializes the network to the JSON document format with full
    /// round-trip precision. `parse(serialize(net))` reproduces the network
    /// bit-exactly.
    pub fn serialize(&self) -> String {
        let doc = NetworkDoc {
            nodes: self
                .nodes
                .values()
                .map(|spec| NodeDoc {
                    id: spec.id.to_string(),
                    dim: spec.dim,
                    mean: spec.mean.iter().copied().collect(),
                    cov: matrix_to_rows(&spec.noise_cov),
                    parents: spec
                        .parents
                        .iter()
                        .map(|(pid, link)| ParentDoc {
                            id: pid.to_string(),
                            link: matrix_to_rows(link),
                        })
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("network document serialization cannot fail")
    }

    pub fn tolerances(&self) -> &Tolerances {
        &self.tolerances
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of node dims.
    pub fn total_dim(&self) -> usize {
        self.nodes.values().map(|n| n.dim).sum()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &NodeId) -> Result<&NodeSpec, NetworkError> {
        self.nodes
            .get(id)
            .ok_or_else(|| NetworkError::UnknownNode(format!("no node named {id}")))
    }

    /// Node ids in lexicographic order.
    pub fn ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values()
    }

    /// Topological order of node ids: every node appears after all its
    /// parents, ties broken lexicographically.
    pub fn topological_order(&self) -> &[NodeId] {
        &self.topo
    }

    /// Strict ancestors of `id` (excludes `id` itself).
    pub fn ancestors_of(&self, id: &NodeId) -> Result<&BTreeSet<NodeId>, NetworkError> {
        self.ancestors
            .get(id)
            .ok_or_else(|| NetworkError::UnknownNode(format!("no node named {id}")))
    }

    pub fn children_of(&self, id: &NodeId) -> Result<&BTreeSet<NodeId>, NetworkError> {
        self.children
            .get(id)
            .ok_or_else(|| NetworkError::UnknownNode(format!("no node named {id}")))
    }

    /// Undirected skeleton neighbors of `id`.
    pub fn skeleton_neighbors(&self, id: &NodeId) -> Result<&BTreeSet<NodeId>, NetworkError> {
        self.skeleton
            .get(id)
            .ok_or_else(|| NetworkError::UnknownNode(format!("no node named {id}")))
    }

    /// Seed set plus all ancestors of its members; the least set containing
    /// the seed that is closed under the parent relation.
    pub fn ancestral_closure(
        &self,
        seed: &BTreeSet<NodeId>,
    ) -> Result<BTreeSet<NodeId>, NetworkError> {
        let mut out = BTreeSet::new();
        for id in seed {
            let anc = self.ancestors_of(id)?;
            out.insert(id.clone());
            out.extend(anc.iter().cloned());
        }
        Ok(out)
    }

    /// Shortest-path distances from `from` on the undirected skeleton.
    /// Unreachable nodes are absent from the map.
    pub fn skeleton_bfs(&self, from: &NodeId) -> Result<BTreeMap<NodeId, usize>, NetworkError> {
        if !self.contains(from) {
            return Err(NetworkError::UnknownNode(format!("no node named {from}")));
        }
        let mut dist = BTreeMap::new();
        dist.insert(from.clone(), 0usize);
        let mut queue = VecDeque::new();
        queue.push_back(from.clone());
        while let Some(u) = queue.pop_front() {
            let du = dist[&u];
            for v in &self.skeleton[&u] {
                if !dist.contains_key(v) {
                    dist.insert(v.clone(), du + 1);
                    queue.push_back(v.clone());
                }
            }
        }
        Ok(dist)
    }

    /// Per-node eccentricity: the maximum over other nodes of the shortest
    /// undirected path length, infinite when some node is unreachable.
    pub fn skeleton_distances(&self) -> BTreeMap<NodeId, Eccentricity> {
        let n = self.nodes.len();
        self.nodes
            .keys()
            .map(|id| {
                let dist = self.skeleton_bfs(id).expect("id comes from the node map");
                let ecc = if dist.len() < n {
                    Eccentricity::Infinite
                } else {
                    Eccentricity::Finite(dist.values().copied().max().unwrap_or(0))
                };
                (id.clone(), ecc)
            })
            .collect()
    }

    /// Connected components of the skeleton, ordered by smallest member id.
    pub fn components(&self) -> Vec<BTreeSet<NodeId>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for id in self.nodes.keys() {
            if seen.contains(id) {
                continue;
            }
            let members: BTreeSet<NodeId> = self
                .skeleton_bfs(id)
                .expect("id comes from the node map")
                .into_keys()
                .collect();
            seen.extend(members.iter().cloned());
            out.push(members);
        }
        out
    }
}

fn matrix_from_rows(
    node: &str,
    what: &str,
    rows: &[Vec<f64>],
) -> Result<DMatrix<f64>, NetworkError> {
    let nrows = rows.len();
    let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(NetworkError::Shape(format!(
            "node {node}: {what} rows have unequal lengths"
        )));
    }
    if nrows == 0 || ncols == 0 {
        return Err(NetworkError::Shape(format!("node {node}: {what} is empty")));
    }
    let mut m = DMatrix::zeros(nrows, ncols);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct NetworkDoc {
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    dim: usize,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
    #[serde(default)]
    parents: Vec<ParentDoc>,
}

#[derive(Serialize, Deserialize)]
struct ParentDoc {
    id: String,
    #[serde(rename = "B")]
    link: Vec<Vec<f64>>,
}
