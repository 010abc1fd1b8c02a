//! The "generalized distribution" value type and the three closed-form
//! operations the engine is built on: multiplication (node combination),
//! integration (slot deletion), and evidence substitution, plus Gaussian
//! conditioning on member variables.
//!
//! A [`CombinedRepr`] describes a stacked vector of member variables as
//!
//! ```text
//! members = mean + Σ_e K_e · e + w,      w ~ Normal(0, noise_cov)
//! ```
//!
//! where each `e` is an external (unresolved) variable entering through its
//! link matrix `K_e`, and `w` is independent of all externals. Lifting a
//! network node produces the single-member case; multiplication stacks two
//! representations into one while routing the incoming side's dependence on
//! upstream members through an implicit linear relation, so the influence of
//! shared ancestors accumulates across all connecting paths by composition.
//!
//! All values are immutable; every operation returns a new value. Safe to
//! share and send between threads.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, DMatrix, DVector};
use thiserror::Error;

use crate::config::Tolerances;
use crate::linalg;
use crate::network::{NodeId, NodeSpec};

/// Errors raised by operations on combined representations.
#[derive(Debug, Error)]
pub enum ReprError {
    #[error("CombinabilityError: {0}")]
    Combinability(String),
    #[error("MemberClash: {0}")]
    MemberClash(String),
    #[error("UnknownMember: {0}")]
    UnknownMember(String),
    #[error("UnknownExternal: {0}")]
    UnknownExternal(String),
    #[error("ShapeError: {0}")]
    Shape(String),
    #[error("DegenerateEvidence: {0}")]
    DegenerateEvidence(String),
    #[error("ExternalsPresent: {0}")]
    ExternalsPresent(String),
    #[error("InvariantViolation: {0}")]
    Invariant(String),
}

/// One contiguous block of a stacked member vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub id: NodeId,
    pub dim: usize,
}

/// A generalized Gaussian distribution over an ordered list of member blocks,
/// conditional on its external variables.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedRepr {
    members: Vec<Block>,
    mean: DVector<f64>,
    noise_cov: DMatrix<f64>,
    externals: Vec<(NodeId, DMatrix<f64>)>,
}

impl CombinedRepr {
    /// The zero-dimensional representation; the identity for [`multiply`].
    ///
    /// [`multiply`]: CombinedRepr::multiply
    pub fn empty() -> Self {
        CombinedRepr {
            members: Vec::new(),
            mean: DVector::zeros(0),
            noise_cov: DMatrix::zeros(0, 0),
            externals: Vec::new(),
        }
    }

    /// Builds a representation from parts, checking all invariants.
    pub fn new(
        members: Vec<Block>,
        mean: DVector<f64>,
        noise_cov: DMatrix<f64>,
        externals: Vec<(NodeId, DMatrix<f64>)>,
        tol: &Tolerances,
    ) -> Result<Self, ReprError> {
        let repr = CombinedRepr {
            members,
            mean,
            noise_cov,
            externals,
        };
        repr.validate(tol)?;
        Ok(repr)
    }

    /// Wraps a single network node: one member block, the node's noise
    /// moments, and one external link per parent.
    pub fn lift(node: &NodeSpec) -> Self {
        CombinedRepr {
            members: vec![Block {
                id: node.id.clone(),
                dim: node.dim,
            }],
            mean: node.mean.clone(),
            noise_cov: node.noise_cov.clone(),
            externals: node.parents.clone(),
        }
    }

    pub fn members(&self) -> &[Block] {
        &self.members
    }

    pub fn member_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.members.iter().map(|b| &b.id)
    }

    pub fn contains_member(&self, id: &NodeId) -> bool {
        self.members.iter().any(|b| &b.id == id)
    }

    /// `(offset, dim)` of a member block within the stacked vector.
    pub fn member_span(&self, id: &NodeId) -> Option<(usize, usize)> {
        let mut offset = 0;
        for b in &self.members {
            if &b.id == id {
                return Some((offset, b.dim));
            }
            offset += b.dim;
        }
        None
    }

    pub fn total_dim(&self) -> usize {
        self.members.iter().map(|b| b.dim).sum()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn externals(&self) -> &[(NodeId, DMatrix<f64>)] {
        &self.externals
    }

    pub fn external(&self, id: &NodeId) -> Option<&DMatrix<f64>> {
        self.externals
            .iter()
            .find(|(eid, _)| eid == id)
            .map(|(_, k)| k)
    }

    pub fn external_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.externals.iter().map(|(id, _)| id)
    }

    /// Checks structural and numeric invariants: distinct member ids disjoint
    /// from external ids, exact block partition, symmetric PSD noise
    /// covariance, and consistent external link shapes.
    pub fn validate(&self, tol: &Tolerances) -> Result<(), ReprError> {
        let dim = self.total_dim();
        if self.mean.len() != dim {
            return Err(ReprError::Shape(format!(
                "mean has length {} but member blocks cover {}",
                self.mean.len(),
                dim
            )));
        }
        if self.noise_cov.nrows() != dim || self.noise_cov.ncols() != dim {
            return Err(ReprError::Shape(format!(
                "noise_cov is {}x{} but member blocks cover {}",
                self.noise_cov.nrows(),
                self.noise_cov.ncols(),
                dim
            )));
        }
        let mut member_ids = BTreeSet::new();
        for b in &self.members {
            if b.dim == 0 {
                return Err(ReprError::Shape(format!("member {} has dim 0", b.id)));
            }
            if !member_ids.insert(b.id.clone()) {
                return Err(ReprError::MemberClash(format!(
                    "member {} appears twice",
                    b.id
                )));
            }
        }
        let mut external_ids = BTreeSet::new();
        for (id, k) in &self.externals {
            if member_ids.contains(id) {
                return Err(ReprError::MemberClash(format!(
                    "{id} is both a member and an external"
                )));
            }
            if !external_ids.insert(id.clone()) {
                return Err(ReprError::Invariant(format!("external {id} appears twice")));
            }
            if k.nrows() != dim {
                return Err(ReprError::Shape(format!(
                    "external {id} link has {} rows but member blocks cover {}",
                    k.nrows(),
                    dim
                )));
            }
        }
        let defect = linalg::symmetry_defect(&self.noise_cov);
        if defect > tol.symmetry {
            return Err(ReprError::Invariant(format!(
                "noise_cov asymmetry {defect:.3e} exceeds {:.1e}",
                tol.symmetry
            )));
        }
        let min_eig = linalg::min_eigenvalue(&self.noise_cov);
        let floor = -tol.psd_slack * linalg::trace_scale(&self.noise_cov);
        if min_eig < floor {
            return Err(ReprError::Invariant(format!(
                "noise_cov smallest eigenvalue {min_eig:.3e} is below {floor:.3e}"
            )));
        }
        Ok(())
    }

    /// Combines two representations into one over the concatenated members.
    ///
    /// The incoming side's external links into `self`'s members are assembled
    /// into an implicit relation `T` over the upstream member vector; the
    /// result's mean is `[m_up ; T·m_up + m_in]`, its noise covariance is
    ///
    /// ```text
    /// [ Q_up       Q_up·Tᵀ            ]
    /// [ T·Q_up     T·Q_up·Tᵀ + Q_in   ]
    /// ```
    ///
    /// and upstream external links `K_e` extend with rows `T·K_e` for the
    /// incoming block. Incoming externals that do not name an upstream member
    /// pass through with zero rows for the upstream block; when both sides
    /// link to the same external, the stacked contributions are added.
    ///
    /// The orientation precondition requires that no upstream external names
    /// an incoming member; the caller is responsible for ordering merges so
    /// this holds.
    pub fn multiply(&self, incoming: &CombinedRepr, tol: &Tolerances) -> Result<Self, ReprError> {
        for b in &incoming.members {
            if self.contains_member(&b.id) {
                return Err(ReprError::MemberClash(format!(
                    "member {} present on both sides of a multiply",
                    b.id
                )));
            }
        }
        for (eid, _) in &self.externals {
            if incoming.contains_member(eid) {
                return Err(ReprError::Combinability(format!(
                    "upstream references incoming member {eid}; the pair is not combinable in this orientation"
                )));
            }
        }

        let up_dim = self.total_dim();
        let in_dim = incoming.total_dim();

        // Assemble T: incoming's links into upstream members, zero columns
        // for members the incoming side does not reference.
        let mut t = DMatrix::zeros(in_dim, up_dim);
        let mut passthrough: Vec<(NodeId, DMatrix<f64>)> = Vec::new();
        for (eid, k) in &incoming.externals {
            if let Some((offset, dim)) = self.member_span(eid) {
                t.view_mut((0, offset), (in_dim, dim)).copy_from(k);
            } else {
                passthrough.push((eid.clone(), k.clone()));
            }
        }

        let mut mean = DVector::zeros(up_dim + in_dim);
        mean.rows_mut(0, up_dim).copy_from(&self.mean);
        mean.rows_mut(up_dim, in_dim)
            .copy_from(&(&t * &self.mean + &incoming.mean));

        let cross = &t * &self.noise_cov; // in_dim × up_dim
        let mut noise_cov = DMatrix::zeros(up_dim + in_dim, up_dim + in_dim);
        noise_cov
            .view_mut((0, 0), (up_dim, up_dim))
            .copy_from(&self.noise_cov);
        noise_cov
            .view_mut((0, up_dim), (up_dim, in_dim))
            .copy_from(&cross.transpose());
        noise_cov
            .view_mut((up_dim, 0), (in_dim, up_dim))
            .copy_from(&cross);
        noise_cov
            .view_mut((up_dim, up_dim), (in_dim, in_dim))
            .copy_from(&(&cross * t.transpose() + &incoming.noise_cov));

        let mut externals: Vec<(NodeId, DMatrix<f64>)> = self
            .externals
            .iter()
            .map(|(eid, k)| (eid.clone(), linalg::vstack(k, &(&t * k))))
            .collect();
        for (eid, k) in passthrough {
            let extended = linalg::vstack(&DMatrix::zeros(up_dim, k.ncols()), &k);
            match externals.iter_mut().find(|(id, _)| id == &eid) {
                Some((_, existing)) => {
                    if existing.ncols() != extended.ncols() {
                        return Err(ReprError::Shape(format!(
                            "external {eid} appears with widths {} and {}",
                            existing.ncols(),
                            extended.ncols()
                        )));
                    }
                    *existing += extended;
                }
                None => externals.push((eid, extended)),
            }
        }

        let mut members = self.members.clone();
        members.extend(incoming.members.iter().cloned());

        let out = CombinedRepr {
            members,
            mean,
            noise_cov,
            externals,
        };
        out.validate(tol)?;
        Ok(out)
    }

    /// Marginalizes the victims out by deleting their slots: member blocks,
    /// mean rows, covariance rows and columns, and external link rows. The
    /// survivors describe exactly the Gaussian marginal over the remaining
    /// members.
    pub fn integrate_out(&self, victims: &BTreeSet<NodeId>) -> Result<Self, ReprError> {
        for v in victims {
            if !self.contains_member(v) {
                return Err(ReprError::UnknownMember(format!(
                    "cannot integrate out {v}: not a member"
                )));
            }
        }
        if victims.is_empty() {
            return Ok(self.clone());
        }
        let mut keep_rows = Vec::new();
        let mut members = Vec::new();
        let mut offset = 0;
        for b in &self.members {
            if !victims.contains(&b.id) {
                keep_rows.extend(offset..offset + b.dim);
                members.push(b.clone());
            }
            offset += b.dim;
        }
        let mean = linalg::select_vec(&self.mean, &keep_rows);
        let noise_cov = linalg::select_sub(&self.noise_cov, &keep_rows, &keep_rows);
        // A fully integrated representation carries no information; drop the
        // zero-row links so it is the exact multiplicative identity.
        let externals = if members.is_empty() {
            Vec::new()
        } else {
            self.externals
                .iter()
                .map(|(id, k)| (id.clone(), linalg::select_rows(k, &keep_rows)))
                .collect()
        };
        Ok(CombinedRepr {
            members,
            mean,
            noise_cov,
            externals,
        })
    }

    /// Substitutes observed values for external variables: each substituted
    /// external's link is removed and `K_E · E*` is added to the mean. The
    /// noise covariance is returned bit-identical.
    pub fn substitute_evidence(
        &self,
        values: &BTreeMap<NodeId, DVector<f64>>,
    ) -> Result<Self, ReprError> {
        let mut out = self.clone();
        for (id, value) in values {
            let pos = out
                .externals
                .iter()
                .position(|(eid, _)| eid == id)
                .ok_or_else(|| {
                    ReprError::UnknownExternal(format!("{id} is not an external of this value"))
                })?;
            let (_, k) = &out.externals[pos];
            if k.ncols() != value.len() {
                return Err(ReprError::Shape(format!(
                    "evidence for {id} has length {} but the link expects {}",
                    value.len(),
                    k.ncols()
                )));
            }
            out.mean += k * value;
            out.externals.remove(pos);
        }
        Ok(out)
    }

    /// Conditions a fully resolved joint (no externals) on member variables.
    ///
    /// Members named in `on` are removed; the survivors get the conditional
    /// mean `μ_X + Σ_XE Σ_EE⁻¹ (e* − μ_E)` and Schur-complement covariance
    /// `Σ_XX − Σ_XE Σ_EE⁻¹ Σ_EX`. Ids in `on` without a value in `values`
    /// are conditioned symbolically: they reappear as externals with their
    /// column block of `K = Σ_XE Σ_EE⁻¹`, and the mean absorbs `−K·μ_E` for
    /// those blocks.
    pub fn condition(
        &self,
        on: &BTreeSet<NodeId>,
        values: &BTreeMap<NodeId, DVector<f64>>,
        tol: &Tolerances,
    ) -> Result<Self, ReprError> {
        if !self.externals.is_empty() {
            let names: Vec<_> = self.external_ids().map(NodeId::to_string).collect();
            return Err(ReprError::ExternalsPresent(format!(
                "cannot condition while externals remain: {{{}}}",
                names.join(", ")
            )));
        }
        for id in on {
            if !self.contains_member(id) {
                return Err(ReprError::UnknownMember(format!(
                    "cannot condition on {id}: not a member"
                )));
            }
        }
        for id in values.keys() {
            if !on.contains(id) {
                return Err(ReprError::UnknownMember(format!(
                    "value supplied for {id}, which is not being conditioned on"
                )));
            }
        }
        if on.is_empty() {
            return Ok(self.clone());
        }

        let mut keep_rows = Vec::new();
        let mut cond_rows = Vec::new();
        let mut keep_members = Vec::new();
        let mut cond_blocks: Vec<(Block, usize)> = Vec::new(); // (block, offset within cond rows)
        let mut offset = 0;
        for b in &self.members {
            if on.contains(&b.id) {
                cond_blocks.push((b.clone(), cond_rows.len()));
                cond_rows.extend(offset..offset + b.dim);
            } else {
                keep_members.push(b.clone());
                keep_rows.extend(offset..offset + b.dim);
            }
            offset += b.dim;
        }

        let sigma_ee = linalg::select_sub(&self.noise_cov, &cond_rows, &cond_rows);
        let min_eig = linalg::min_eigenvalue(&sigma_ee);
        let floor = tol.conditioning * linalg::trace_scale(&sigma_ee);
        if min_eig <= floor {
            return Err(ReprError::DegenerateEvidence(format!(
                "evidence block smallest eigenvalue {min_eig:.3e} is not above {floor:.3e}"
            )));
        }
        let chol = Cholesky::new(0.5 * (&sigma_ee + sigma_ee.transpose())).ok_or_else(|| {
            ReprError::DegenerateEvidence("evidence block is not positive definite".to_string())
        })?;

        let sigma_xe = linalg::select_sub(&self.noise_cov, &keep_rows, &cond_rows);
        // K = Σ_XE Σ_EE⁻¹, via Σ_EE Kᵀ = Σ_EX.
        let k = chol.solve(&sigma_xe.transpose()).transpose();

        let sigma_xx = linalg::select_sub(&self.noise_cov, &keep_rows, &keep_rows);
        let schur = &sigma_xx - &k * sigma_xe.transpose();
        let noise_cov = 0.5 * (&schur + schur.transpose());

        // Shift vector: e* − μ_E on valued blocks, −μ_E on symbolic ones.
        let mu_e = linalg::select_vec(&self.mean, &cond_rows);
        let mut shift = -mu_e;
        let mut externals = Vec::new();
        for (block, cond_offset) in &cond_blocks {
            if let Some(value) = values.get(&block.id) {
                if value.len() != block.dim {
                    return Err(ReprError::Shape(format!(
                        "evidence for {} has length {} but the block has dim {}",
                        block.id,
                        value.len(),
                        block.dim
                    )));
                }
                for (i, x) in value.iter().enumerate() {
                    shift[cond_offset + i] += x;
                }
            } else {
                externals.push((
                    block.id.clone(),
                    k.columns(*cond_offset, block.dim).into_owned(),
                ));
            }
        }

        let mean = linalg::select_vec(&self.mean, &keep_rows) + &k * shift;

        let out = CombinedRepr {
            members: keep_members,
            mean,
            noise_cov,
            externals,
        };
        out.validate(tol)?;
        Ok(out)
    }

    /// Joins independent representations (disjoint members, typically from
    /// different skeleton components) into one block-diagonal value. Links to
    /// a shared external are column-merged by addition.
    pub fn direct_sum(parts: &[CombinedRepr]) -> Result<Self, ReprError> {
        let total: usize = parts.iter().map(|p| p.total_dim()).sum();
        let mut members = Vec::new();
        let mut seen = BTreeSet::new();
        let mut mean = DVector::zeros(total);
        let mut noise_cov = DMatrix::zeros(total, total);
        let mut externals: Vec<(NodeId, DMatrix<f64>)> = Vec::new();
        let mut offset = 0;
        for part in parts {
            for b in &part.members {
                if !seen.insert(b.id.clone()) {
                    return Err(ReprError::MemberClash(format!(
                        "member {} appears in more than one part",
                        b.id
                    )));
                }
            }
            let dim = part.total_dim();
            members.extend(part.members.iter().cloned());
            mean.rows_mut(offset, dim).copy_from(&part.mean);
            noise_cov
                .view_mut((offset, offset), (dim, dim))
                .copy_from(&part.noise_cov);
            for (eid, k) in &part.externals {
                let mut extended = DMatrix::zeros(total, k.ncols());
                extended
                    .view_mut((offset, 0), (dim, k.ncols()))
                    .copy_from(k);
                match externals.iter_mut().find(|(id, _)| id == eid) {
                    Some((_, existing)) => *existing += extended,
                    None => externals.push((eid.clone(), extended)),
                }
            }
            offset += dim;
        }
        Ok(CombinedRepr {
            members,
            mean,
            noise_cov,
            externals,
        })
    }

    /// Reorders member blocks lexicographically by id (the canonical layout
    /// used for presenting and comparing results). External link order is
    /// canonicalized the same way.
    pub fn sort_members(&self) -> Self {
        let mut order: Vec<usize> = (0..self.members.len()).collect();
        order.sort_by(|&a, &b| self.members[a].id.cmp(&self.members[b].id));
        let mut offsets = Vec::with_capacity(self.members.len());
        let mut offset = 0;
        for b in &self.members {
            offsets.push(offset);
            offset += b.dim;
        }
        let mut rows = Vec::with_capacity(self.total_dim());
        let mut members = Vec::with_capacity(self.members.len());
        for &i in &order {
            let b = &self.members[i];
            rows.extend(offsets[i]..offsets[i] + b.dim);
            members.push(b.clone());
        }
        let mut externals: Vec<(NodeId, DMatrix<f64>)> = self
            .externals
            .iter()
            .map(|(id, k)| (id.clone(), linalg::select_rows(k, &rows)))
            .collect();
        externals.sort_by(|a, b| a.0.cmp(&b.0));
        CombinedRepr {
            members,
            mean: linalg::select_vec(&self.mean, &rows),
            noise_cov: linalg::select_sub(&self.noise_cov, &rows, &rows),
            externals,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Network;

    fn tol() -> Tolerances {
        Tolerances::default()
    }

    fn desk() -> Network {
        Network::parse(include_str!("../tests/data/desk.json")).unwrap()
    }

    fn lift_of(net: &Network, id: &str) -> CombinedRepr {
        CombinedRepr::lift(net.node(&id.into()).unwrap())
    }

    fn set(names: &[&str]) -> BTreeSet<NodeId> {
        names.iter().map(|s| NodeId::from(*s)).collect()
    }

    #[test]
    fn lift_copies_fields() {
        let net = desk();
        let a1 = lift_of(&net, "a1");
        assert_eq!(a1.members().len(), 1);
        assert_eq!(a1.mean().as_slice(), &[1.0]);
        assert_eq!(a1.noise_cov()[(0, 0)], 1.0);
        assert!(a1.externals().is_empty());

        let c1 = lift_of(&net, "c1");
        assert_eq!(c1.mean().as_slice(), &[0.0]);
        assert_eq!(c1.noise_cov()[(0, 0)], 0.5);
        assert_eq!(c1.external(&"a1".into()).unwrap()[(0, 0)], 2.0);

        let c2 = lift_of(&net, "c2");
        assert_eq!(c2.externals().len(), 2);
        assert_eq!(c2.external(&"c1".into()).unwrap()[(0, 0)], 1.0);
        assert_eq!(c2.external(&"a2".into()).unwrap()[(0, 0)], 3.0);
    }

    #[test]
    fn multiply_c1_c2_matches_hand_values() {
        let net = desk();
        let prod = lift_of(&net, "c1")
            .multiply(&lift_of(&net, "c2"), &tol())
            .unwrap();
        let ids: Vec<_> = prod.member_ids().map(NodeId::as_str).collect();
        assert_eq!(ids, ["c1", "c2"]);
        assert_eq!(prod.mean().as_slice(), &[0.0, 0.0]);
        let q = prod.noise_cov();
        assert_eq!(q[(0, 0)], 0.5);
        assert_eq!(q[(0, 1)], 0.5);
        assert_eq!(q[(1, 0)], 0.5);
        assert_eq!(q[(1, 1)], 1.5);
        let ka1 = prod.external(&"a1".into()).unwrap();
        assert_eq!(ka1.as_slice(), &[2.0, 2.0]);
        let ka2 = prod.external(&"a2".into()).unwrap();
        assert_eq!(ka2.as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn multiply_a1_c1_resolves_the_link() {
        let net = desk();
        let prod = lift_of(&net, "a1")
            .multiply(&lift_of(&net, "c1"), &tol())
            .unwrap();
        assert!(prod.externals().is_empty());
        assert_eq!(prod.mean().as_slice(), &[1.0, 2.0]);
        let q = prod.noise_cov();
        assert_eq!(q[(0, 0)], 1.0);
        assert_eq!(q[(0, 1)], 2.0);
        assert_eq!(q[(1, 0)], 2.0);
        assert_eq!(q[(1, 1)], 4.5);
    }

    #[test]
    fn multiply_by_empty_is_identity() {
        let net = desk();
        let r = lift_of(&net, "c1");
        let right = r.multiply(&CombinedRepr::empty(), &tol()).unwrap();
        assert_eq!(right, r);
        let left = CombinedRepr::empty().multiply(&r, &tol()).unwrap();
        assert_eq!(left, r);
    }

    #[test]
    fn multiply_rejects_member_clash_and_bad_orientation() {
        let net = desk();
        let c1 = lift_of(&net, "c1");
        let err = c1.multiply(&c1, &tol()).unwrap_err();
        assert!(matches!(err, ReprError::MemberClash(_)), "{err}");

        // c1 references a1, so with c1 upstream and a1 incoming the
        // orientation precondition fails.
        let a1 = lift_of(&net, "a1");
        let err = c1.multiply(&a1, &tol()).unwrap_err();
        assert!(matches!(err, ReprError::Combinability(_)), "{err}");
    }

    #[test]
    fn dimension_additivity() {
        let net = desk();
        let a = lift_of(&net, "c1");
        let b = lift_of(&net, "c2");
        let prod = a.multiply(&b, &tol()).unwrap();
        assert_eq!(prod.total_dim(), a.total_dim() + b.total_dim());
    }

    #[test]
    fn integrate_out_keeps_the_right_slots() {
        let net = desk();
        let prod = lift_of(&net, "c1")
            .multiply(&lift_of(&net, "c2"), &tol())
            .unwrap();
        let reduced = prod.integrate_out(&set(&["c1"])).unwrap();
        let ids: Vec<_> = reduced.member_ids().map(NodeId::as_str).collect();
        assert_eq!(ids, ["c2"]);
        assert_eq!(reduced.mean().as_slice(), &[0.0]);
        assert_eq!(reduced.noise_cov()[(0, 0)], 1.5);
        assert_eq!(reduced.external(&"a1".into()).unwrap().as_slice(), &[2.0]);
        assert_eq!(reduced.external(&"a2".into()).unwrap().as_slice(), &[3.0]);
    }

    #[test]
    fn integrate_out_empty_set_is_identity() {
        let net = desk();
        let r = lift_of(&net, "c2");
        assert_eq!(r.integrate_out(&BTreeSet::new()).unwrap(), r);
    }

    #[test]
    fn integrate_out_everything_gives_empty() {
        let net = desk();
        let r = lift_of(&net, "c2");
        let empty = r.integrate_out(&set(&["c2"])).unwrap();
        assert_eq!(empty.total_dim(), 0);
        assert!(empty.members().is_empty());
        assert!(empty.externals().is_empty());
    }

    #[test]
    fn integrate_out_unknown_member_errors() {
        let net = desk();
        let err = lift_of(&net, "c2")
            .integrate_out(&set(&["a1"]))
            .unwrap_err();
        assert!(matches!(err, ReprError::UnknownMember(_)), "{err}");
    }

    #[test]
    fn integration_commutes_bit_for_bit() {
        let net = desk();
        let prod = lift_of(&net, "c1")
            .multiply(&lift_of(&net, "c2"), &tol())
            .unwrap();
        let one_by_one = prod
            .integrate_out(&set(&["c1"]))
            .unwrap()
            .integrate_out(&set(&["c2"]))
            .unwrap();
        let both = prod.integrate_out(&set(&["c1", "c2"])).unwrap();
        assert_eq!(one_by_one, both);
    }

    #[test]
    fn substitution_shifts_mean_and_preserves_covariance_bits() {
        let mut values = BTreeMap::new();
        values.insert(NodeId::from("a2"), DVector::from_row_slice(&[2.0]));
        let repr = CombinedRepr::new(
            vec![Block {
                id: "c2".into(),
                dim: 1,
            }],
            DVector::from_row_slice(&[2.0]),
            DMatrix::from_row_slice(1, 1, &[5.5]),
            vec![("a2".into(), DMatrix::from_row_slice(1, 1, &[3.0]))],
            &tol(),
        )
        .unwrap();
        let subst = repr.substitute_evidence(&values).unwrap();
        assert_eq!(subst.mean().as_slice(), &[8.0]);
        assert!(subst.externals().is_empty());
        assert_eq!(
            subst.noise_cov()[(0, 0)].to_bits(),
            repr.noise_cov()[(0, 0)].to_bits()
        );

        // Empty substitution is the identity.
        assert_eq!(repr.substitute_evidence(&BTreeMap::new()).unwrap(), repr);

        // Zero evidence removes the link and leaves the mean unchanged.
        let mut zero = BTreeMap::new();
        zero.insert(NodeId::from("a2"), DVector::from_row_slice(&[0.0]));
        let z = repr.substitute_evidence(&zero).unwrap();
        assert_eq!(z.mean().as_slice(), &[2.0]);
        assert!(z.externals().is_empty());
    }

    #[test]
    fn substitution_errors() {
        let net = desk();
        let c2 = lift_of(&net, "c2");
        let mut unknown = BTreeMap::new();
        unknown.insert(NodeId::from("zz"), DVector::from_row_slice(&[1.0]));
        assert!(matches!(
            c2.substitute_evidence(&unknown).unwrap_err(),
            ReprError::UnknownExternal(_)
        ));
        let mut bad_shape = BTreeMap::new();
        bad_shape.insert(NodeId::from("a2"), DVector::from_row_slice(&[1.0, 2.0]));
        assert!(matches!(
            c2.substitute_evidence(&bad_shape).unwrap_err(),
            ReprError::Shape(_)
        ));
    }

    fn a1_c1_joint() -> CombinedRepr {
        // Joint over (a1, c1) from the worked example.
        CombinedRepr::new(
            vec![
                Block {
                    id: "a1".into(),
                    dim: 1,
                },
                Block {
                    id: "c1".into(),
                    dim: 1,
                },
            ],
            DVector::from_row_slice(&[1.0, 2.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.5]),
            vec![],
            &tol(),
        )
        .unwrap()
    }

    #[test]
    fn condition_with_value_matches_hand_schur() {
        let joint = a1_c1_joint();
        let mut values = BTreeMap::new();
        values.insert(NodeId::from("c1"), DVector::from_row_slice(&[2.0]));
        let cond = joint.condition(&set(&["c1"]), &values, &tol()).unwrap();
        assert_eq!(cond.members().len(), 1);
        assert!((cond.mean()[0] - 1.0).abs() < 1e-12);
        assert!((cond.noise_cov()[(0, 0)] - 1.0 / 9.0).abs() < 1e-12);
        assert!(cond.externals().is_empty());
    }

    #[test]
    fn condition_on_empty_set_is_identity() {
        let joint = a1_c1_joint();
        let same = joint
            .condition(&BTreeSet::new(), &BTreeMap::new(), &tol())
            .unwrap();
        assert_eq!(same, joint);
    }

    #[test]
    fn symbolic_condition_creates_external_link() {
        let joint = a1_c1_joint();
        let cond = joint
            .condition(&set(&["c1"]), &BTreeMap::new(), &tol())
            .unwrap();
        let ids: Vec<_> = cond.member_ids().map(NodeId::as_str).collect();
        assert_eq!(ids, ["a1"]);
        let k = cond.external(&"c1".into()).unwrap();
        assert!((k[(0, 0)] - 4.0 / 9.0).abs() < 1e-12);
        assert!((cond.mean()[0] - 1.0 / 9.0).abs() < 1e-12);
        assert!((cond.noise_cov()[(0, 0)] - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn condition_on_every_member_leaves_an_empty_value() {
        let joint = a1_c1_joint();
        let mut values = BTreeMap::new();
        values.insert(NodeId::from("a1"), DVector::from_row_slice(&[1.0]));
        values.insert(NodeId::from("c1"), DVector::from_row_slice(&[2.0]));
        let cond = joint
            .condition(&set(&["a1", "c1"]), &values, &tol())
            .unwrap();
        assert_eq!(cond.total_dim(), 0);
        assert!(cond.members().is_empty());
        assert!(cond.externals().is_empty());
    }

    #[test]
    fn condition_rejects_externals_and_degenerate_blocks() {
        let net = desk();
        let c2 = lift_of(&net, "c2");
        let err = c2
            .condition(&set(&["c2"]), &BTreeMap::new(), &tol())
            .unwrap_err();
        assert!(matches!(err, ReprError::ExternalsPresent(_)), "{err}");

        // Deterministic member: conditioning on it is degenerate.
        let degenerate = CombinedRepr::new(
            vec![
                Block {
                    id: "x".into(),
                    dim: 1,
                },
                Block {
                    id: "y".into(),
                    dim: 1,
                },
            ],
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            vec![],
            &tol(),
        )
        .unwrap();
        let mut values = BTreeMap::new();
        values.insert(NodeId::from("y"), DVector::from_row_slice(&[0.0]));
        let err = degenerate
            .condition(&set(&["y"]), &values, &tol())
            .unwrap_err();
        assert!(matches!(err, ReprError::DegenerateEvidence(_)), "{err}");
    }

    #[test]
    fn direct_sum_is_block_diagonal() {
        let net = desk();
        let a1 = lift_of(&net, "a1");
        let a2 = lift_of(&net, "a2");
        let joined = CombinedRepr::direct_sum(&[a1, a2]).unwrap();
        assert_eq!(joined.total_dim(), 2);
        assert_eq!(joined.mean().as_slice(), &[1.0, 0.0]);
        assert_eq!(joined.noise_cov()[(0, 1)], 0.0);
        assert_eq!(joined.noise_cov()[(1, 1)], 2.0);
    }

    #[test]
    fn sort_members_permutes_consistently() {
        let net = desk();
        let a1 = lift_of(&net, "a1");
        let c1 = lift_of(&net, "c1");
        let joint = a1.multiply(&c1, &tol()).unwrap();
        let reversed = CombinedRepr::new(
            vec![
                Block {
                    id: "c1".into(),
                    dim: 1,
                },
                Block {
                    id: "a1".into(),
                    dim: 1,
                },
            ],
            DVector::from_row_slice(&[2.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[4.5, 2.0, 2.0, 1.0]),
            vec![],
            &tol(),
        )
        .unwrap();
        let sorted = reversed.sort_members();
        assert_eq!(sorted, joint.sort_members());
    }
}
