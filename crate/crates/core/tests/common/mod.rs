#![allow(dead_code)]

//! Shared helpers for integration tests.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};

use gspi::repr::CombinedRepr;
use gspi::{Network, NodeId, Tolerances};

pub fn desk_network() -> Network {
    Network::parse(include_str!("../data/desk.json")).unwrap()
}

pub fn desk_json_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/desk.json")
}

pub fn max_abs_diff_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "vector sizes differ");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn max_abs_diff_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "matrix shapes differ");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Folds the lifted distributions of `order` left to right with plain
/// representation multiplication. Every prefix of a topological order is a
/// valid fold; nodes excluded from `order` stay external.
pub fn fold_in_order(net: &Network, order: &[NodeId]) -> CombinedRepr {
    let tol = Tolerances::default();
    let mut acc = CombinedRepr::empty();
    for id in order {
        let lift = CombinedRepr::lift(net.node(id).unwrap());
        acc = acc.multiply(&lift, &tol).unwrap();
    }
    acc
}

/// Sum over all directed paths `root → … → member` of the right-to-left
/// products of per-arc link matrices; the independent check for folded
/// external links. Returns `None` when no path exists.
pub fn path_sum(net: &Network, root: &NodeId, member: &NodeId) -> Option<DMatrix<f64>> {
    let member_dim = net.node(member).unwrap().dim;
    let root_dim = net.node(root).unwrap().dim;
    let mut total: Option<DMatrix<f64>> = None;
    // DFS over parent links from `member` back to `root`, accumulating the
    // product member-side first.
    fn visit(
        net: &Network,
        root: &NodeId,
        at: &NodeId,
        acc: &DMatrix<f64>,
        total: &mut Option<DMatrix<f64>>,
    ) {
        if at == root {
            match total {
                Some(t) => *t += acc,
                None => *total = Some(acc.clone()),
            }
            return;
        }
        for (pid, link) in &net.node(at).unwrap().parents {
            let next = acc * link;
            visit(net, root, pid, &next, total);
        }
    }
    let identity = DMatrix::identity(member_dim, member_dim);
    visit(net, root, member, &identity, &mut total);
    total.inspect(|t| {
        assert_eq!(t.ncols(), root_dim);
    })
}

/// All distinct valid topological orders? Too many; instead: a deterministic
/// family of valid topological orders obtained by rotating tie choices.
pub fn some_topological_orders(net: &Network, variants: usize) -> Vec<Vec<NodeId>> {
    let mut out = Vec::new();
    for v in 0..variants {
        let mut indegree: BTreeMap<NodeId, usize> = net
            .nodes()
            .map(|n| (n.id.clone(), n.parents.len()))
            .collect();
        let mut ready: Vec<NodeId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| id.clone())
            .collect();
        let mut order = Vec::new();
        let mut step = 0usize;
        while !ready.is_empty() {
            ready.sort();
            let pick = (v + step) % ready.len();
            let next = ready.remove(pick);
            step += 1;
            for child in net.children_of(&next).unwrap() {
                let d = indegree.get_mut(child).unwrap();
                *d -= 1;
                if *d == 0 {
                    ready.push(child.clone());
                }
            }
            order.push(next);
        }
        if !out.contains(&order) {
            out.push(order);
        }
    }
    out
}

pub fn ids(names: &[&str]) -> BTreeSet<NodeId> {
    names.iter().map(|s| NodeId::from(*s)).collect()
}
