//! Dense ground-truth engine: builds the full joint Gaussian over every
//! variable by triangular solves and answers marginal/conditional queries
//! directly. Used to validate engine answers, never called by the engine
//! itself. Also hosts the seeded random-network generator for property tests
//! and the `check` command.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg;
use crate::network::{Network, NetworkError, NodeId, NodeSpec};
use crate::repr::{Block, ReprError};

/// The joint Gaussian over all variables, blocks laid out in topological
/// order.
#[derive(Debug, Clone)]
pub struct JointMoments {
    layout: Vec<Block>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl JointMoments {
    pub fn layout(&self) -> &[Block] {
        &self.layout
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// `(offset, dim)` of a block within the stacked joint.
    pub fn span(&self, id: &NodeId) -> Option<(usize, usize)> {
        let mut offset = 0;
        for b in &self.layout {
            if &b.id == id {
                return Some((offset, b.dim));
            }
            offset += b.dim;
        }
        None
    }

    fn rows_for(&self, ids: &[NodeId]) -> Result<Vec<usize>, NetworkError> {
        let mut rows = Vec::new();
        for id in ids {
            let (offset, dim) = self
                .span(id)
                .ok_or_else(|| NetworkError::UnknownNode(format!("no node named {id}")))?;
            rows.extend(offset..offset + dim);
        }
        Ok(rows)
    }
}

/// Stacks every variable in topological order, assembles the strictly block
/// lower-triangular link matrix `B` and the noise mean `w̄`, and solves
/// `(I − B)·μ = w̄` and `Σ = (I − B)⁻¹ · blockdiag(Q) · (I − B)⁻ᵀ` by
/// forward substitution. No matrix is ever inverted explicitly.
pub fn joint_moments(net: &Network) -> JointMoments {
    let order = net.topological_order();
    let mut layout = Vec::with_capacity(order.len());
    let mut offsets = BTreeMap::new();
    let mut total = 0usize;
    for id in order {
        let spec = net.node(id).expect("topological order lists real nodes");
        offsets.insert(id.clone(), total);
        layout.push(Block {
            id: id.clone(),
            dim: spec.dim,
        });
        total += spec.dim;
    }

    // M = I - B is unit lower triangular in this layout.
    let mut m = DMatrix::identity(total, total);
    let mut wbar = DVector::zeros(total);
    let mut q = DMatrix::zeros(total, total);
    for id in order {
        let spec = net.node(id).expect("topological order lists real nodes");
        let r = offsets[id];
        wbar.rows_mut(r, spec.dim).copy_from(&spec.mean);
        q.view_mut((r, r), (spec.dim, spec.dim))
            .copy_from(&spec.noise_cov);
        for (pid, link) in &spec.parents {
            let c = offsets[pid];
            let mut view = m.view_mut((r, c), (link.nrows(), link.ncols()));
            view.copy_from(&(-link));
        }
    }

    let mean = m
        .solve_lower_triangular(&wbar)
        .expect("unit lower-triangular solve cannot fail");
    // Y = (I-B)^{-1} Q ; Σ = (I-B)^{-1} Yᵀ, symmetrized.
    let y = m
        .solve_lower_triangular(&q)
        .expect("unit lower-triangular solve cannot fail");
    let z = m
        .solve_lower_triangular(&y.transpose())
        .expect("unit lower-triangular solve cannot fail");
    let cov = 0.5 * (&z + z.transpose());

    JointMoments { layout, mean, cov }
}

/// A conditioned/marginalized oracle answer over the requested targets.
#[derive(Debug, Clone)]
pub struct OracleAnswer {
    /// Target blocks in the order requested.
    pub members: Vec<Block>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Link matrices to symbolic conditioners, one per id in `given`, in the
    /// order requested; present only when `given` is nonempty.
    pub links: Vec<(NodeId, DMatrix<f64>)>,
}

/// Standard multivariate-normal marginalization and conditioning on the dense
/// joint. `targets` selects the answer blocks; `given` names symbolic
/// conditioners (returned as link matrices); `evidence` fixes values.
///
/// The conditioning tolerance is the engine-wide conditioning floor scaled by
/// the evidence block.
pub fn oracle_query(
    jm: &JointMoments,
    targets: &[NodeId],
    given: &[NodeId],
    evidence: &BTreeMap<NodeId, DVector<f64>>,
    conditioning_tol: f64,
) -> Result<OracleAnswer, ReprError> {
    let x_rows = jm
        .rows_for(targets)
        .map_err(|e| ReprError::UnknownMember(e.to_string()))?;
    // Conditioning block: symbolic ids first, then evidence ids, in the
    // caller's order.
    let mut cond_ids: Vec<NodeId> = Vec::new();
    for id in given {
        cond_ids.push(id.clone());
    }
    for id in evidence.keys() {
        if !cond_ids.contains(id) {
            cond_ids.push(id.clone());
        }
    }
    let cond_rows = jm
        .rows_for(&cond_ids)
        .map_err(|e| ReprError::UnknownMember(e.to_string()))?;

    let members: Vec<Block> = targets
        .iter()
        .map(|id| {
            let (_, dim) = jm.span(id).expect("validated above");
            Block {
                id: id.clone(),
                dim,
            }
        })
        .collect();

    if cond_rows.is_empty() {
        return Ok(OracleAnswer {
            members,
            mean: linalg::select_vec(&jm.mean, &x_rows),
            cov: linalg::select_sub(&jm.cov, &x_rows, &x_rows),
            links: Vec::new(),
        });
    }

    let sigma_ee = linalg::select_sub(&jm.cov, &cond_rows, &cond_rows);
    let min_eig = linalg::min_eigenvalue(&sigma_ee);
    let floor = conditioning_tol * linalg::trace_scale(&sigma_ee);
    if min_eig <= floor {
        return Err(ReprError::DegenerateEvidence(format!(
            "evidence block smallest eigenvalue {min_eig:.3e} is not above {floor:.3e}"
        )));
    }
    let chol = Cholesky::new(0.5 * (&sigma_ee + sigma_ee.transpose())).ok_or_else(|| {
        ReprError::DegenerateEvidence("evidence block is not positive definite".to_string())
    })?;

    let sigma_xe = linalg::select_sub(&jm.cov, &x_rows, &cond_rows);
    let k = chol.solve(&sigma_xe.transpose()).transpose();
    let schur = linalg::select_sub(&jm.cov, &x_rows, &x_rows) - &k * sigma_xe.transpose();
    let cov = 0.5 * (&schur + schur.transpose());

    // shift = e* − μ_E on evidence blocks, −μ_E on symbolic ones.
    let mut shift = -linalg::select_vec(&jm.mean, &cond_rows);
    let mut links = Vec::new();
    let mut cond_offset = 0usize;
    for id in &cond_ids {
        let (_, dim) = jm.span(id).expect("validated above");
        if let Some(value) = evidence.get(id) {
            if value.len() != dim {
                return Err(ReprError::Shape(format!(
                    "evidence for {id} has length {} but the block has dim {dim}",
                    value.len()
                )));
            }
            for (i, v) in value.iter().enumerate() {
                shift[cond_offset + i] += v;
            }
        } else {
            links.push((id.clone(), k.columns(cond_offset, dim).into_owned()));
        }
        cond_offset += dim;
    }
    let mean = linalg::select_vec(&jm.mean, &x_rows) + &k * shift;

    Ok(OracleAnswer {
        members,
        mean,
        cov,
        links,
    })
}

/// Deterministic random network: a DAG drawn from a random topological order
/// with up to `max_parents` earlier nodes as parents, link entries uniform in
/// [-2, 2], noise covariances `A·Aᵀ + 0.1·I` (strictly positive definite)
/// with `A` entries uniform in [-1, 1], and means uniform in [-3, 3].
pub fn random_network(seed: u64, n_nodes: usize, max_parents: usize, max_dim: usize) -> Network {
    assert!(n_nodes > 0 && max_dim > 0, "sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random topological order over zero-padded ids.
    let mut order: Vec<usize> = (0..n_nodes).collect();
    for i in (1..n_nodes).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let id_of = |i: usize| NodeId::from(format!("v{i:02}"));

    let mut dims = vec![0usize; n_nodes];
    let mut specs = Vec::with_capacity(n_nodes);
    for (pos, &node) in order.iter().enumerate() {
        let dim = rng.random_range(1..=max_dim);
        dims[node] = dim;

        let n_parents = rng.random_range(0..=max_parents.min(pos));
        // Sample distinct predecessors from the order prefix.
        let mut available: Vec<usize> = order[..pos].to_vec();
        let mut parents = Vec::with_capacity(n_parents);
        for _ in 0..n_parents {
            let pick = rng.random_range(0..available.len());
            let parent = available.swap_remove(pick);
            let link = DMatrix::from_fn(dim, dims[parent], |_, _| rng.random_range(-2.0..=2.0));
            parents.push((id_of(parent), link));
        }
        parents.sort_by(|a, b| a.0.cmp(&b.0));

        let mean = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..=3.0));
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..=1.0));
        let p = &a * a.transpose();
        let noise_cov = 0.5 * (&p + p.transpose()) + 0.1 * DMatrix::identity(dim, dim);

        specs.push(NodeSpec::with_parents(
            id_of(node),
            mean,
            noise_cov,
            parents,
        ));
    }

    Network::from_nodes(specs).expect("generated networks are valid by construction")
}

/// A random query drawn against `net`: 1–2 targets, at most one symbolic
/// conditioner, and up to two evidence assignments on the remaining nodes.
/// Deterministic in the rng state.
pub fn random_query(
    net: &Network,
    rng: &mut ChaCha8Rng,
) -> (
    BTreeSet<NodeId>,
    BTreeSet<NodeId>,
    BTreeMap<NodeId, DVector<f64>>,
) {
    fn draw(pool: &mut Vec<NodeId>, rng: &mut ChaCha8Rng) -> NodeId {
        let i = rng.random_range(0..pool.len());
        pool.swap_remove(i)
    }

    let mut pool: Vec<NodeId> = net.ids().cloned().collect();

    let n_targets = 1 + rng.random_range(0..=1usize.min(pool.len() - 1));
    let mut targets = BTreeSet::new();
    for _ in 0..n_targets {
        targets.insert(draw(&mut pool, rng));
    }

    let mut given = BTreeSet::new();
    if !pool.is_empty() && rng.random_range(0..3u8) == 0 {
        given.insert(draw(&mut pool, rng));
    }

    let mut evidence = BTreeMap::new();
    let n_evidence = rng.random_range(0..=2usize.min(pool.len()));
    for _ in 0..n_evidence {
        let id = draw(&mut pool, rng);
        let dim = net.node(&id).expect("drawn from net").dim;
        let mut value = DVector::zeros(dim);
        for i in 0..dim {
            value[i] = rng.random_range(-3.0..=3.0);
        }
        evidence.insert(id, value);
    }

    (targets, given, evidence)
}
