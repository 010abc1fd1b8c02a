//! Goal-directed query resolution over SPI trees.
//!
//! A query `P(X | Y, E = e*)` is transformed into an `(L, M)` request — `L`
//! the set of node distributions that must be multiplied, `M` the dimensions
//! the answer must keep — and resolved recursively: each tree node asks only
//! the children whose subtrees intersect `L`, folds the returned partial
//! results with its own lifted distribution, integrates out dimensions nobody
//! needs anymore, and caches the outcome keyed by the request. Evidence is
//! applied *after* resolution, so cached values are evidence-free and survive
//! observation changes: re-answering a query under new evidence values costs
//! substitution or conditioning only, never new multiplications.
//!
//! Evidence on parentless nodes takes a substitution fast path: their priors
//! are dropped from resolution so they surface as external links, and the
//! observed value is folded into the mean with the covariance untouched.
//! All other evidence, and symbolic conditioners, go through Schur-complement
//! conditioning on the resolved joint.
//!
//! Concurrency: trees, networks, and all resolved values are immutable;
//! sub-requests for different children touch disjoint member sets and could
//! run concurrently against a cache that allows concurrent reads and
//! exclusive insertion of immutable entries (duplicate computation of a key
//! is benign because values are deterministic). This implementation runs
//! single-threaded; a session is confined to one logical owner at a time.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::network::{Network, NetworkError, NodeId};
use crate::repr::{Block, CombinedRepr, ReprError};
use crate::spi_tree::{SpiForest, SpiTree, TreeError, TreeMode};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("UnknownNode: {0}")]
    UnknownNode(String),
    #[error("InvalidQuery: {0}")]
    InvalidQuery(String),
    #[error("ShapeError: {0}")]
    Shape(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Repr(#[from] ReprError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// A conditional query: targets `X`, symbolic conditioners `Y`, and observed
/// values `E`.
#[derive(Debug, Clone, Default)]
pub struct Query {
    pub targets: BTreeSet<NodeId>,
    pub given: BTreeSet<NodeId>,
    pub evidence: BTreeMap<NodeId, DVector<f64>>,
}

impl Query {
    pub fn targets(ids: impl IntoIterator<Item = impl Into<NodeId>>) -> Self {
        Query {
            targets: ids.into_iter().map(Into::into).collect(),
            ..Query::default()
        }
    }

    pub fn given(mut self, ids: impl IntoIterator<Item = impl Into<NodeId>>) -> Self {
        self.given = ids.into_iter().map(Into::into).collect();
        self
    }

    pub fn observe(mut self, id: impl Into<NodeId>, value: DVector<f64>) -> Self {
        self.evidence.insert(id.into(), value);
        self
    }
}

/// The `(L, M)` form of a query: `L` is the ancestral closure of every
/// mentioned node (the distributions to multiply), `M` the mentioned nodes
/// themselves (the dimensions of the desired response).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmRequest {
    pub l: BTreeSet<NodeId>,
    pub m: BTreeSet<NodeId>,
}

/// Transforms a query into `(L, M)` form.
pub fn compute_lm(q: &Query, net: &Network) -> Result<LmRequest, EngineError> {
    let mut mentioned: BTreeSet<NodeId> = q.targets.clone();
    mentioned.extend(q.given.iter().cloned());
    mentioned.extend(q.evidence.keys().cloned());
    let l = net
        .ancestral_closure(&mentioned)
        .map_err(|e| EngineError::UnknownNode(e.to_string()))?;
    Ok(LmRequest { l, m: mentioned })
}

/// Operation counters for one query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    /// Pairwise representation multiplications performed.
    pub multiplications: u64,
    /// Integrations that removed at least one member.
    pub integrations: u64,
    /// Requests answered from a node cache.
    pub cache_hits: u64,
    /// Sub-requests issued to tree nodes (root requests included).
    pub subtree_requests: u64,
    /// Total entries across all node caches after the query.
    pub cache_entries: u64,
    /// Requests issued per tree node.
    pub requests_per_node: BTreeMap<NodeId, u64>,
}

/// A partially resolved product: the representation plus the set of network
/// nodes whose distributions it has absorbed (members and integrated-out
/// victims alike). The support drives the merge guard.
#[derive(Debug, Clone)]
struct Partial {
    repr: CombinedRepr,
    support: BTreeSet<NodeId>,
}

/// An ordered collection of partial results with pairwise-disjoint members
/// whose dependency digraph is acyclic.
#[derive(Debug, Clone)]
pub struct ReprSet {
    parts: Vec<Partial>,
}

impl ReprSet {
    pub fn reprs(&self) -> impl Iterator<Item = &CombinedRepr> {
        self.parts.iter().map(|p| &p.repr)
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }
}

/// Canonicalized `(L ∩ subtree, M)` request key.
type CacheKey = (Vec<NodeId>, Vec<NodeId>);

/// Per-tree-node memo of resolved requests, keyed by the canonicalized
/// `(L ∩ subtree, M)` pair. Entries are immutable and evidence-free.
#[derive(Debug, Default)]
pub struct NodeCache {
    entries: BTreeMap<NodeId, HashMap<CacheKey, Vec<Partial>>>,
    len: usize,
}

impl NodeCache {
    fn get(&self, node: &NodeId, key: &CacheKey) -> Option<&Vec<Partial>> {
        self.entries.get(node).and_then(|m| m.get(key))
    }

    fn insert(&mut self, node: &NodeId, key: CacheKey, value: Vec<Partial>) {
        let per_node = self.entries.entry(node.clone()).or_default();
        if per_node.insert(key, value).is_none() {
            self.len += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.len = 0;
    }
}

/// The answer to a query: the joint Gaussian over the targets, conditioned on
/// evidence, with one link matrix per symbolic conditioner. Member blocks are
/// laid out in lexicographic id order.
#[derive(Debug, Clone)]
pub struct QueryResult {
    pub members: Vec<Block>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub links: Vec<(NodeId, DMatrix<f64>)>,
    pub diagnostics: Diagnostics,
}

impl QueryResult {
    /// `(offset, dim)` of a member block.
    pub fn span(&self, id: &NodeId) -> Option<(usize, usize)> {
        let mut offset = 0;
        for b in &self.members {
            if &b.id == id {
                return Some((offset, b.dim));
            }
            offset += b.dim;
        }
        None
    }
}

/// An inference session: one network, one SPI forest, the node caches, and
/// the current evidence state.
#[derive(Debug)]
pub struct Session {
    net: Network,
    forest: SpiForest,
    cache: NodeCache,
    evidence: BTreeMap<NodeId, DVector<f64>>,
}

impl Session {
    pub fn new(net: Network, mode: TreeMode) -> Result<Self, EngineError> {
        let forest = SpiForest::build(&net, mode)?;
        Ok(Session {
            net,
            forest,
            cache: NodeCache::default(),
            evidence: BTreeMap::new(),
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn forest(&self) -> &SpiForest {
        &self.forest
    }

    pub fn cache_entries(&self) -> usize {
        self.cache.len()
    }

    pub fn evidence(&self) -> &BTreeMap<NodeId, DVector<f64>> {
        &self.evidence
    }

    /// Records (or overwrites) an observed value. Evidence lives in the
    /// session, never in the node caches.
    pub fn add_evidence(
        &mut self,
        id: impl Into<NodeId>,
        value: DVector<f64>,
    ) -> Result<(), EngineError> {
        let id = id.into();
        let spec = self
            .net
            .node(&id)
            .map_err(|e| EngineError::UnknownNode(e.to_string()))?;
        if value.len() != spec.dim {
            return Err(EngineError::Shape(format!(
                "evidence for {id} has length {} but the node has dim {}",
                value.len(),
                spec.dim
            )));
        }
        self.evidence.insert(id, value);
        Ok(())
    }

    /// Removes observed values. Ids must name network nodes; retracting a
    /// node that carries no evidence is a no-op.
    pub fn retract_evidence(&mut self, ids: &[NodeId]) -> Result<(), EngineError> {
        for id in ids {
            if !self.net.contains(id) {
                return Err(EngineError::UnknownNode(format!("no node named {id}")));
            }
        }
        for id in ids {
            self.evidence.remove(id);
        }
        Ok(())
    }

    pub fn clear_evidence(&mut self) {
        self.evidence.clear();
    }

    /// Answers `P(targets | given, session evidence)`.
    pub fn ask(
        &mut self,
        targets: impl IntoIterator<Item = impl Into<NodeId>>,
        given: impl IntoIterator<Item = impl Into<NodeId>>,
    ) -> Result<QueryResult, EngineError> {
        let q = Query {
            targets: targets.into_iter().map(Into::into).collect(),
            given: given.into_iter().map(Into::into).collect(),
            evidence: self.evidence.clone(),
        };
        self.answer_query(&q)
    }

    /// Answers `P(targets | session evidence)` with no symbolic conditioners.
    pub fn marginal(
        &mut self,
        targets: impl IntoIterator<Item = impl Into<NodeId>>,
    ) -> Result<QueryResult, EngineError> {
        self.ask(targets, Vec::<NodeId>::new())
    }

    /// Answers an explicit query, ignoring session evidence.
    pub fn answer_query(&mut self, q: &Query) -> Result<QueryResult, EngineError> {
        self.validate_query(q)?;
        // Evidence values win over a symbolic conditioner on the same node.
        let given: BTreeSet<NodeId> = q
            .given
            .iter()
            .filter(|id| !q.evidence.contains_key(*id))
            .cloned()
            .collect();

        let lm = compute_lm(q, &self.net)?;

        // Substitution fast path: evidence on parentless nodes is excluded
        // from resolution so it stays an external link. That is sound exactly
        // because a parentless node can never depend on the resolved noise.
        let fast_ids: BTreeSet<NodeId> = q
            .evidence
            .keys()
            .filter(|id| {
                self.net
                    .node(id)
                    .map(|n| n.parents.is_empty())
                    .unwrap_or(false)
            })
            .cloned()
            .collect();
        let l_eff: BTreeSet<NodeId> = lm.l.difference(&fast_ids).cloned().collect();

        let mut diag = Diagnostics::default();
        let mut parts: Vec<Partial> = Vec::new();
        for component in self.net.components() {
            let l_comp: BTreeSet<NodeId> = l_eff.intersection(&component).cloned().collect();
            if l_comp.is_empty() {
                continue;
            }
            let m_comp: BTreeSet<NodeId> = lm.m.intersection(&component).cloned().collect();
            let tree = self
                .forest
                .tree_of(l_comp.iter().next().expect("nonempty"))
                .expect("forest spans the network");
            let resolver = Resolver {
                net: &self.net,
                tree,
                cache: &mut self.cache,
                diag: &mut diag,
                partition: Partition::new(&l_comp),
            };
            let root = tree.root().clone();
            parts.extend(resolver.run(&root, &l_comp, &m_comp)?);
        }

        // Across components (and across independent pieces within one), the
        // parts are mutually unreferencing; stack them block-diagonally.
        let reprs: Vec<CombinedRepr> = parts.into_iter().map(|p| p.repr).collect();
        let mut joint = CombinedRepr::direct_sum(&reprs)?;

        // Fast-path evidence: substitute values into the links that actually
        // appear. Evidence on nodes no target depends on simply never shows.
        let present: BTreeMap<NodeId, DVector<f64>> = q
            .evidence
            .iter()
            .filter(|(id, _)| fast_ids.contains(*id) && joint.external(id).is_some())
            .map(|(id, v)| (id.clone(), v.clone()))
            .collect();
        joint = joint.substitute_evidence(&present)?;

        // Remaining evidence and symbolic conditioners: Schur conditioning on
        // the resolved joint.
        let member_evidence: BTreeMap<NodeId, DVector<f64>> = q
            .evidence
            .iter()
            .filter(|(id, _)| joint.contains_member(id))
            .map(|(id, v)| (id.clone(), v.clone()))
            .collect();
        let mut on: BTreeSet<NodeId> = member_evidence.keys().cloned().collect();
        on.extend(given.iter().cloned());
        joint = joint.condition(&on, &member_evidence, self.net.tolerances())?;

        let joint = joint.sort_members();
        let member_ids: BTreeSet<NodeId> = joint.member_ids().cloned().collect();
        if member_ids != q.targets {
            return Err(EngineError::Repr(ReprError::Invariant(format!(
                "resolved members {member_ids:?} do not match targets {:?}",
                q.targets
            ))));
        }

        diag.cache_entries = self.cache.len() as u64;
        Ok(QueryResult {
            members: joint.members().to_vec(),
            mean: joint.mean().clone(),
            cov: joint.noise_cov().clone(),
            links: joint.externals().to_vec(),
            diagnostics: diag,
        })
    }

    /// Resolves a raw `(L, M)` request at a tree node. `req.l` must lie
    /// inside that node's subtree.
    pub fn resolve_at(
        &mut self,
        node: &NodeId,
        req: &LmRequest,
    ) -> Result<(ReprSet, Diagnostics), EngineError> {
        let tree = self
            .forest
            .tree_of(node)
            .ok_or_else(|| EngineError::UnknownNode(format!("no node named {node}")))?;
        if !req.l.is_subset(tree.subtree(node)) {
            return Err(EngineError::InvalidQuery(format!(
                "request L is not contained in the subtree of {node}"
            )));
        }
        let mut diag = Diagnostics::default();
        let resolver = Resolver {
            net: &self.net,
            tree,
            cache: &mut self.cache,
            diag: &mut diag,
            partition: Partition::new(&req.l),
        };
        let parts = resolver.run(node, &req.l, &req.m)?;
        diag.cache_entries = self.cache.len() as u64;
        Ok((ReprSet { parts }, diag))
    }

    fn validate_query(&self, q: &Query) -> Result<(), EngineError> {
        if q.targets.is_empty() {
            return Err(EngineError::InvalidQuery(
                "query has no target nodes".to_string(),
            ));
        }
        for id in q
            .targets
            .iter()
            .chain(q.given.iter())
            .chain(q.evidence.keys())
        {
            if !self.net.contains(id) {
                return Err(EngineError::UnknownNode(format!("no node named {id}")));
            }
        }
        if let Some(id) = q.targets.iter().find(|id| q.evidence.contains_key(*id)) {
            return Err(EngineError::InvalidQuery(format!(
                "{id} is both a target and an evidence node"
            )));
        }
        if let Some(id) = q.targets.intersection(&q.given).next() {
            return Err(EngineError::InvalidQuery(format!(
                "{id} is both a target and a conditioner"
            )));
        }
        for (id, value) in &q.evidence {
            let spec = self.net.node(id)?;
            if value.len() != spec.dim {
                return Err(EngineError::Shape(format!(
                    "evidence for {id} has length {} but the node has dim {}",
                    value.len(),
                    spec.dim
                )));
            }
        }
        Ok(())
    }
}

/// The request-global grouping of resolved nodes into partial results.
///
/// Folding is sound only if contracting each partial's support in the
/// network DAG (restricted to the request's `L`) leaves an acyclic quotient:
/// a cycle would force two value blocks to depend on each other, which no
/// merge order can untangle. The partition tracks every grouping made while
/// resolving one request — across the whole tree, cache hits included — so
/// the merge guard can veto a locally harmless union that would interlock
/// with distributions joining higher up.
struct Partition {
    group_of: BTreeMap<NodeId, u32>,
    next: u32,
}

impl Partition {
    fn new(atoms: &BTreeSet<NodeId>) -> Self {
        let group_of = atoms
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        Partition {
            group_of,
            next: atoms.len() as u32,
        }
    }

    /// Unions a support set into one group (new merges and cached parts).
    fn register(&mut self, support: &BTreeSet<NodeId>) {
        let fresh = self.next;
        self.next += 1;
        for id in support {
            self.group_of.insert(id.clone(), fresh);
        }
    }

    /// True when contracting `candidate` on top of the current grouping
    /// keeps the quotient of the network DAG acyclic.
    fn contraction_stays_acyclic(&self, net: &Network, candidate: &BTreeSet<NodeId>) -> bool {
        let fresh = self.next;
        let group = |id: &NodeId| -> Option<u32> {
            if candidate.contains(id) {
                Some(fresh)
            } else {
                self.group_of.get(id).copied()
            }
        };
        // Quotient edges between distinct groups.
        let mut edges: BTreeSet<(u32, u32)> = BTreeSet::new();
        let mut nodes: BTreeSet<u32> = BTreeSet::new();
        for (id, g) in &self.group_of {
            let gv = if candidate.contains(id) { fresh } else { *g };
            nodes.insert(gv);
            for (pid, _) in &net.node(id).expect("atoms are real nodes").parents {
                if let Some(gu) = group(pid) {
                    if gu != gv {
                        edges.insert((gu, gv));
                    }
                }
            }
        }
        // Kahn's algorithm on the quotient.
        let mut indegree: BTreeMap<u32, usize> = nodes.iter().map(|g| (*g, 0)).collect();
        for (_, v) in &edges {
            *indegree.get_mut(v).expect("edge endpoints are nodes") += 1;
        }
        let mut ready: Vec<u32> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(g, _)| *g)
            .collect();
        let mut seen = 0;
        while let Some(g) = ready.pop() {
            seen += 1;
            for (u, v) in &edges {
                if *u == g {
                    let d = indegree.get_mut(v).expect("edge endpoints are nodes");
                    *d -= 1;
                    if *d == 0 {
                        ready.push(*v);
                    }
                }
            }
        }
        seen == nodes.len()
    }
}

/// One resolution pass: borrows the structure, the cache, the counters, and
/// the request-global partition.
struct Resolver<'a> {
    net: &'a Network,
    tree: &'a SpiTree,
    cache: &'a mut NodeCache,
    diag: &'a mut Diagnostics,
    partition: Partition,
}

impl Resolver<'_> {
    fn run(
        mut self,
        node: &NodeId,
        l: &BTreeSet<NodeId>,
        m: &BTreeSet<NodeId>,
    ) -> Result<Vec<Partial>, EngineError> {
        self.request(node, l, m)
    }

    /// Dimension set of a node set: the nodes plus every parent their
    /// distributions reference.
    fn dims_of(&self, set: &BTreeSet<NodeId>) -> BTreeSet<NodeId> {
        let mut out = set.clone();
        for id in set {
            let spec = self.net.node(id).expect("L contains real nodes");
            out.extend(spec.parents.iter().map(|(pid, _)| pid.clone()));
        }
        out
    }

    fn request(
        &mut self,
        node: &NodeId,
        l: &BTreeSet<NodeId>,
        m: &BTreeSet<NodeId>,
    ) -> Result<Vec<Partial>, EngineError> {
        self.diag.subtree_requests += 1;
        *self.diag.requests_per_node.entry(node.clone()).or_default() += 1;

        let key = (
            l.iter().cloned().collect::<Vec<_>>(),
            m.iter().cloned().collect::<Vec<_>>(),
        );
        if let Some(parts) = self.cache.get(node, &key) {
            self.diag.cache_hits += 1;
            let parts = parts.clone();
            for part in &parts {
                self.partition.register(&part.support);
            }
            return Ok(parts);
        }

        let mut parts: Vec<Partial> = Vec::new();
        for child in self.tree.tree_children(node) {
            let l_child: BTreeSet<NodeId> =
                l.intersection(self.tree.subtree(child)).cloned().collect();
            if l_child.is_empty() {
                continue;
            }
            // Keep dimensions that are final targets or that distributions
            // outside the child still reference.
            let l_rest: BTreeSet<NodeId> = l.difference(&l_child).cloned().collect();
            let mut wanted = m.clone();
            wanted.extend(self.dims_of(&l_rest));
            let m_child: BTreeSet<NodeId> = self
                .dims_of(&l_child)
                .intersection(&wanted)
                .cloned()
                .collect();
            parts.extend(self.request(child, &l_child, &m_child)?);
        }

        if l.contains(node) {
            let spec = self.net.node(node)?;
            parts.push(Partial {
                repr: CombinedRepr::lift(spec),
                support: BTreeSet::from([node.clone()]),
            });
        }

        let mut parts = self.fold(parts)?;

        // Integrate out members nobody needs: not requested, and not
        // referenced by any other partial still traveling up.
        for i in 0..parts.len() {
            let mut referenced: BTreeSet<NodeId> = BTreeSet::new();
            for (j, other) in parts.iter().enumerate() {
                if j != i {
                    referenced.extend(other.repr.external_ids().cloned());
                }
            }
            let victims: BTreeSet<NodeId> = parts[i]
                .repr
                .member_ids()
                .filter(|id| !m.contains(*id) && !referenced.contains(*id))
                .cloned()
                .collect();
            if !victims.is_empty() {
                parts[i].repr = parts[i].repr.integrate_out(&victims)?;
                self.diag.integrations += 1;
            }
        }
        parts.retain(|p| !p.repr.members().is_empty());
        sort_parts(&mut parts);

        self.cache.insert(node, key, parts.clone());
        Ok(parts)
    }

    /// Folds partials by multiplying referencing pairs, deferring any merge
    /// that would leave the result claiming independence it does not have.
    ///
    /// A merge of `up` and `inc` (where `inc` references a member of `up`) is
    /// performed only when:
    /// - neither side references the other's integrated-out support,
    /// - no surviving external of the result descends from the combined
    ///   support (the result's noise must stay independent of its externals),
    /// - contracting the pair keeps the local dependency digraph acyclic.
    ///
    /// Deferred pairs travel upward as a set; at the root of an ancestrally
    /// closed request every reference is eventually absorbable, so the fold
    /// completes there.
    fn fold(&mut self, mut parts: Vec<Partial>) -> Result<Vec<Partial>, EngineError> {
        sort_parts(&mut parts);
        'restart: loop {
            for up in 0..parts.len() {
                for inc in 0..parts.len() {
                    if up == inc {
                        continue;
                    }
                    if !references(&parts[inc], &parts[up]) {
                        continue;
                    }
                    if !self.merge_allowed(&parts, up, inc) {
                        continue;
                    }
                    let incoming = parts.remove(inc);
                    let up = if inc < up { up - 1 } else { up };
                    let merged = parts[up]
                        .repr
                        .multiply(&incoming.repr, self.net.tolerances())?;
                    self.diag.multiplications += 1;
                    parts[up].repr = merged;
                    parts[up].support.extend(incoming.support.iter().cloned());
                    self.partition.register(&parts[up].support);
                    sort_parts(&mut parts);
                    continue 'restart;
                }
            }
            return Ok(parts);
        }
    }

    fn merge_allowed(&self, parts: &[Partial], up: usize, inc: usize) -> bool {
        let (a, b) = (&parts[up], &parts[inc]);
        // Orientation: the upstream side must not reference the incoming
        // side, and neither may reference nodes the other has integrated out.
        // Neither case can occur while the quotient invariant holds; checked
        // anyway because multiply cannot absorb such references.
        for (eid, _) in a.repr.externals() {
            if b.support.contains(eid) {
                return false;
            }
        }
        for (eid, _) in b.repr.externals() {
            if a.support.contains(eid) && !a.repr.contains_member(eid) {
                return false;
            }
        }
        let mut union = a.support.clone();
        union.extend(b.support.iter().cloned());
        self.partition.contraction_stays_acyclic(self.net, &union)
    }
}

/// True when `inc` references a member of `up`.
fn references(inc: &Partial, up: &Partial) -> bool {
    inc.repr
        .external_ids()
        .any(|eid| up.repr.contains_member(eid))
}

fn sort_parts(parts: &mut [Partial]) {
    parts.sort_by(|a, b| {
        let ka = a.repr.member_ids().next();
        let kb = b.repr.member_ids().next();
        ka.cmp(&kb)
    });
}
