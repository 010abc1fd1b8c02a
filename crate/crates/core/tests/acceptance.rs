//! Acceptance suite: one test per release criterion, each printing a
//! `criterion N (<name>): PASS/FAIL` line. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::collections::BTreeMap;
use std::process::Command;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{
    desk_json_path, desk_network, fold_in_order, max_abs_diff_mat, max_abs_diff_vec, path_sum,
};
use gspi::cli::ResultDoc;
use gspi::engine::compute_lm;
use gspi::oracle::{self, joint_moments, oracle_query, random_network};
use gspi::repr::CombinedRepr;
use gspi::spi_tree::{build_tree, choose_root};
use gspi::{NodeId, Query, Session, Tolerances, TreeMode};

fn pass(n: u32, name: &str, detail: &str) {
    println!("criterion {n} ({name}): PASS {detail}");
}

fn vec1(x: f64) -> DVector<f64> {
    DVector::from_row_slice(&[x])
}

/// Criterion 1: engine mean/covariance match the dense oracle within 1e-8
/// max-abs over >= 100 seeded random networks x >= 5 random queries each.
#[test]
fn criterion_1_oracle_equivalence() {
    const TOL: f64 = 1e-8;
    let mut max_dev = 0.0f64;
    let mut total = 0u64;
    for seed in 0..100u64 {
        let net = random_network(seed, 12, 3, 3);
        let jm = joint_moments(&net);
        let mut session = Session::new(net.clone(), TreeMode::Bushy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a);
        for _ in 0..5 {
            let (targets, given, evidence) = oracle::random_query(&net, &mut rng);
            let q = Query {
                targets,
                given,
                evidence,
            };
            let res = session.answer_query(&q).unwrap();
            let target_order: Vec<NodeId> = res.members.iter().map(|b| b.id.clone()).collect();
            let given_order: Vec<NodeId> = res.links.iter().map(|(id, _)| id.clone()).collect();
            let ans = oracle_query(&jm, &target_order, &given_order, &q.evidence, 1e-10).unwrap();
            let mut dev = max_abs_diff_vec(&res.mean, &ans.mean);
            dev = dev.max(max_abs_diff_mat(&res.cov, &ans.cov));
            for (id, k) in &res.links {
                let (_, ko) = ans.links.iter().find(|(oid, _)| oid == id).unwrap();
                dev = dev.max(max_abs_diff_mat(k, ko));
            }
            assert!(
                dev < TOL,
                "criterion 1 (oracle equivalence): FAIL seed {seed} deviation {dev:.3e}"
            );
            max_dev = max_dev.max(dev);
            total += 1;
        }
    }
    pass(
        1,
        "oracle equivalence",
        &format!("{total} queries over 100 networks, max deviation {max_dev:.3e} < 1e-8"),
    );
}

/// Criterion 2: the worked two-node combination has external links
/// [2; 2] and [0; 3], covariance in the exact combined block form, and
/// integrating the upstream member leaves exactly the [2], [3], [1.5] slots.
#[test]
fn criterion_2_worked_example() {
    let net = desk_network();
    let tol = Tolerances::default();
    let c1 = CombinedRepr::lift(net.node(&"c1".into()).unwrap());
    let c2 = CombinedRepr::lift(net.node(&"c2".into()).unwrap());
    let prod = c1.multiply(&c2, &tol).unwrap();

    let ka1 = prod.external(&"a1".into()).unwrap();
    let ka2 = prod.external(&"a2".into()).unwrap();
    assert_eq!(ka1.as_slice(), &[2.0, 2.0]);
    assert_eq!(ka2.as_slice(), &[0.0, 3.0]);

    // Exact block form with the desk numbers: T = 1, Q_c1 = 0.5, Q_c2 = 1.
    let (t, q_c1, q_c2) = (1.0f64, 0.5f64, 1.0f64);
    let q = prod.noise_cov();
    assert_eq!(q[(0, 0)], q_c1);
    assert_eq!(q[(0, 1)], q_c1 * t);
    assert_eq!(q[(1, 0)], t * q_c1);
    assert_eq!(q[(1, 1)], t * q_c1 * t + q_c2);

    let reduced = prod
        .integrate_out(&["c1".into()].into_iter().collect())
        .unwrap();
    assert_eq!(reduced.external(&"a1".into()).unwrap().as_slice(), &[2.0]);
    assert_eq!(reduced.external(&"a2".into()).unwrap().as_slice(), &[3.0]);
    assert_eq!(reduced.noise_cov()[(0, 0)], 1.5);
    assert_eq!(reduced.mean().as_slice(), &[0.0]);

    pass(
        2,
        "worked example",
        "K_a1=[2;2], K_a2=[0;3], Q=[[0.5,0.5],[0.5,1.5]]; integration keeps [2],[3],[1.5]",
    );
}

/// Criterion 3: substitution removes exactly the substituted links, shifts
/// the mean by K_E·E*, leaves the covariance bit-identical, and agrees with
/// Schur conditioning within 1e-9 for evidence on parentless nodes.
#[test]
fn criterion_3_substitution_contract() {
    let net = desk_network();
    // Resolve c2 with a2 left external: fold a1, c1, c2 and keep c2 only.
    let order: Vec<NodeId> = ["a1", "c1", "c2"]
        .iter()
        .map(|s| NodeId::from(*s))
        .collect();
    let folded = fold_in_order(&net, &order);
    let marginal = folded
        .integrate_out(&["a1".into(), "c1".into()].into_iter().collect())
        .unwrap();
    assert_eq!(marginal.mean().as_slice(), &[2.0]);
    assert_eq!(marginal.noise_cov()[(0, 0)], 5.5);
    assert_eq!(marginal.external(&"a2".into()).unwrap().as_slice(), &[3.0]);

    let mut values = BTreeMap::new();
    values.insert(NodeId::from("a2"), vec1(2.0));
    let substituted = marginal.substitute_evidence(&values).unwrap();
    assert_eq!(substituted.mean().as_slice(), &[8.0]);
    assert!(substituted.externals().is_empty());
    assert_eq!(
        substituted.noise_cov()[(0, 0)].to_bits(),
        marginal.noise_cov()[(0, 0)].to_bits(),
        "covariance must be bit-identical"
    );

    // Removes exactly the substituted link: c2 alone references both c1 and
    // a2; substituting a2 must leave the c1 link in place.
    let c2_alone = CombinedRepr::lift(net.node(&"c2".into()).unwrap());
    let mut one = BTreeMap::new();
    one.insert(NodeId::from("a2"), vec1(1.0));
    let after = c2_alone.substitute_evidence(&one).unwrap();
    assert!(after.external(&"a2".into()).is_none());
    assert!(after.external(&"c1".into()).is_some());

    // Engine substitution path vs dense Schur conditioning on a root.
    let mut session = Session::new(net.clone(), TreeMode::Bushy).unwrap();
    session.add_evidence("a2", vec1(2.0)).unwrap();
    let res = session.ask(["c2"], [] as [&str; 0]).unwrap();
    assert!((res.mean[0] - 8.0).abs() < 1e-9);
    assert!((res.cov[(0, 0)] - 5.5).abs() < 1e-9);
    let jm = joint_moments(&net);
    let mut e = BTreeMap::new();
    e.insert(NodeId::from("a2"), vec1(2.0));
    let schur = oracle_query(&jm, &["c2".into()], &[], &e, 1e-10).unwrap();
    assert!((res.mean[0] - schur.mean[0]).abs() < 1e-9);
    assert!((res.cov[(0, 0)] - schur.cov[(0, 0)]).abs() < 1e-9);

    // The same agreement across random networks with root evidence.
    let mut max_dev = 0.0f64;
    let mut cases = 0;
    for seed in 200..260u64 {
        let net = random_network(seed, 10, 3, 2);
        let roots: Vec<NodeId> = net
            .nodes()
            .filter(|s| s.parents.is_empty())
            .map(|s| s.id.clone())
            .collect();
        let Some(root) = roots.first() else { continue };
        let Some(target) = net
            .ids()
            .find(|id| *id != root && net.ancestors_of(id).unwrap().contains(root))
        else {
            continue;
        };
        let value = DVector::from_fn(net.node(root).unwrap().dim, |i, _| 0.5 + i as f64);
        let mut session = Session::new(net.clone(), TreeMode::Bushy).unwrap();
        let q = Query::targets([target.as_str()]).observe(root.as_str(), value.clone());
        let res = session.answer_query(&q).unwrap();
        let jm = joint_moments(&net);
        let mut e = BTreeMap::new();
        e.insert(root.clone(), value);
        let schur = oracle_query(&jm, std::slice::from_ref(target), &[], &e, 1e-10).unwrap();
        let dev =
            max_abs_diff_vec(&res.mean, &schur.mean).max(max_abs_diff_mat(&res.cov, &schur.cov));
        assert!(dev < 1e-9, "root-evidence agreement failed: {dev:.3e}");
        max_dev = max_dev.max(dev);
        cases += 1;
    }
    assert!(cases > 20, "too few root-evidence cases: {cases}");

    pass(
        3,
        "substitution contract",
        &format!(
            "mean 8, variance 5.5, covariance bit-identical; {cases} random root-evidence cases agree with Schur within {max_dev:.3e}"
        ),
    );
}

/// Criterion 4: the query transformation reproduces the worked example:
/// targets {a1, c2} yield L = {a1, a2, c1, c2} and M = {a1, c2} exactly.
#[test]
fn criterion_4_lm_transformation() {
    let net = desk_network();
    let lm = compute_lm(&Query::targets(["a1", "c2"]), &net).unwrap();
    let l: Vec<&str> = lm.l.iter().map(NodeId::as_str).collect();
    let m: Vec<&str> = lm.m.iter().map(NodeId::as_str).collect();
    assert_eq!(l, ["a1", "a2", "c1", "c2"]);
    assert_eq!(m, ["a1", "c2"]);
    pass(4, "L/M transformation", "L={a1,a2,c1,c2}, M={a1,c2}");
}

/// Criterion 5: repeating a query costs zero multiplications and hits the
/// cache; changing only evidence values costs zero multiplications; a query
/// that does not touch a subtree issues zero requests to it.
#[test]
fn criterion_5_goal_directedness_and_incrementality() {
    let net = desk_network();
    let mut session = Session::new(net, TreeMode::Bushy).unwrap();

    let first = session.ask(["a1", "c2"], [] as [&str; 0]).unwrap();
    assert!(first.diagnostics.multiplications > 0);
    let repeat = session.ask(["a1", "c2"], [] as [&str; 0]).unwrap();
    assert_eq!(repeat.diagnostics.multiplications, 0);
    assert!(repeat.diagnostics.cache_hits >= 1);

    session.add_evidence("a2", vec1(2.0)).unwrap();
    let with_e = session.ask(["c2"], [] as [&str; 0]).unwrap();
    assert!((with_e.mean[0] - 8.0).abs() < 1e-9);
    session.add_evidence("a2", vec1(3.0)).unwrap();
    let changed = session.ask(["c2"], [] as [&str; 0]).unwrap();
    assert_eq!(changed.diagnostics.multiplications, 0);
    assert!((changed.mean[0] - 11.0).abs() < 1e-9);
    assert!((changed.cov[(0, 0)] - 5.5).abs() < 1e-9);

    // The desk tree roots at c1 with children a1 and c2; a query for a1
    // alone must not touch the c2 subtree.
    let solo = session.ask(["a1"], [] as [&str; 0]).unwrap();
    assert!(!solo
        .diagnostics
        .requests_per_node
        .contains_key(&"c2".into()));
    assert!(!solo
        .diagnostics
        .requests_per_node
        .contains_key(&"a2".into()));

    pass(
        5,
        "goal-directedness and incrementality",
        "repeat: 0 multiplications, cache hit; evidence change: 0 multiplications; untouched subtree: 0 requests",
    );
}

/// Criterion 6: over >= 200 random networks and both modes, built trees pass
/// constraint verification with zero violations; the chosen root minimizes
/// eccentricity; the diamond skeleton falls back to a chain.
#[test]
fn criterion_6_tree_validity() {
    let mut checked = 0u32;
    for seed in 0..220u64 {
        let net = random_network(seed, 11, 3, 2);
        for mode in [TreeMode::Bushy, TreeMode::Chain] {
            for component in net.components() {
                let root = choose_root(&net, &component).unwrap();
                let ecc_of = |id: &NodeId| {
                    let dist = net.skeleton_bfs(id).unwrap();
                    component
                        .iter()
                        .filter_map(|o| dist.get(o))
                        .copied()
                        .max()
                        .unwrap_or(0)
                };
                let min_ecc = component.iter().map(&ecc_of).min().unwrap();
                assert_eq!(ecc_of(&root), min_ecc, "root is not minimum-eccentricity");
                let tree = build_tree(&net, &root, mode).unwrap();
                let violations = tree.verify_constraint(&net);
                assert!(
                    violations.is_empty(),
                    "seed {seed} mode {mode}: violations {violations:?}"
                );
                checked += 1;
            }
        }
    }

    // Diamond: d's visited neighbors sit on different branches, forcing the
    // documented whole-build fallback to chain mode.
    let diamond = gspi::Network::parse(
        r#"{ "nodes": [
            { "id": "a", "dim": 1, "mean": [0.0], "cov": [[1.0]], "parents": [] },
            { "id": "b", "dim": 1, "mean": [0.0], "cov": [[1.0]],
              "parents": [ { "id": "a", "B": [[1.0]] } ] },
            { "id": "c", "dim": 1, "mean": [0.0], "cov": [[1.0]],
              "parents": [ { "id": "a", "B": [[1.0]] } ] },
            { "id": "d", "dim": 1, "mean": [0.0], "cov": [[1.0]],
              "parents": [ { "id": "b", "B": [[1.0]] }, { "id": "c", "B": [[1.0]] } ] }
        ] }"#,
    )
    .unwrap();
    let root = choose_root(&diamond, &diamond.ids().cloned().collect()).unwrap();
    let tree = build_tree(&diamond, &root, TreeMode::Bushy).unwrap();
    assert!(tree.fell_back(), "diamond must trigger the chain fallback");
    assert_eq!(tree.mode(), TreeMode::Chain);
    assert!(tree.verify_constraint(&diamond).is_empty());

    pass(
        6,
        "tree validity",
        &format!("{checked} trees verified with zero violations; diamond fell back to chain"),
    );
}

/// Criterion 7: chain-mode and bushy-mode trees agree within 1e-9 across the
/// randomized suite.
#[test]
fn criterion_7_tree_shape_independence() {
    let mut max_dev = 0.0f64;
    let mut total = 0u64;
    for seed in 0..100u64 {
        let net = random_network(seed, 10, 3, 3);
        let mut bushy = Session::new(net.clone(), TreeMode::Bushy).unwrap();
        let mut chain = Session::new(net.clone(), TreeMode::Chain).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0f0f_f0f0);
        for _ in 0..3 {
            let (targets, given, evidence) = oracle::random_query(&net, &mut rng);
            let q = Query {
                targets,
                given,
                evidence,
            };
            let a = bushy.answer_query(&q).unwrap();
            let b = chain.answer_query(&q).unwrap();
            let dev = max_abs_diff_vec(&a.mean, &b.mean).max(max_abs_diff_mat(&a.cov, &b.cov));
            assert!(dev < 1e-9, "seed {seed}: tree-shape deviation {dev:.3e}");
            max_dev = max_dev.max(dev);
            total += 1;
        }
    }
    pass(
        7,
        "tree-shape independence",
        &format!("{total} queries, max chain-vs-bushy deviation {max_dev:.3e} < 1e-9"),
    );
}

/// Criterion 8: folded external links equal explicit directed-path
/// enumeration sums on random DAGs with <= 7 nodes, within 1e-10.
#[test]
fn criterion_8_path_sum_equivalence() {
    let mut pairs = 0u64;
    let mut max_dev = 0.0f64;
    for n in 2..=7usize {
        for seed in 0..40u64 {
            let net = random_network(seed.wrapping_mul(31).wrapping_add(n as u64), n, 3, 2);
            let roots: Vec<NodeId> = net
                .nodes()
                .filter(|s| s.parents.is_empty())
                .map(|s| s.id.clone())
                .collect();
            let non_roots: Vec<NodeId> = net
                .topological_order()
                .iter()
                .filter(|id| !roots.contains(id))
                .cloned()
                .collect();
            if non_roots.is_empty() {
                continue;
            }
            let folded = fold_in_order(&net, &non_roots);
            for root in &roots {
                for member in &non_roots {
                    let expected = path_sum(&net, root, member);
                    let (offset, dim) = folded.member_span(member).unwrap();
                    match (folded.external(root), expected) {
                        (Some(k), Some(sum)) => {
                            let block = k.rows(offset, dim).into_owned();
                            let dev = max_abs_diff_mat(&block, &sum);
                            assert!(dev < 1e-10, "path-sum deviation {dev:.3e}");
                            max_dev = max_dev.max(dev);
                            pairs += 1;
                        }
                        (Some(k), None) => {
                            assert!(k.rows(offset, dim).iter().all(|x| *x == 0.0));
                        }
                        (None, None) => {}
                        (None, Some(_)) => panic!("missing link for a connected pair"),
                    }
                }
            }
        }
    }
    assert!(pairs > 100, "too few path-sum pairs exercised: {pairs}");
    pass(
        8,
        "path-sum equivalence",
        &format!("{pairs} root/member pairs, max deviation {max_dev:.3e} < 1e-10"),
    );
}

/// Criterion 9: machine output parses back to bit-equal moments, repeated
/// invocations are byte-identical, and the documented exit codes appear for
/// each error class.
#[test]
fn criterion_9_cli_round_trip() {
    let bin = env!("CARGO_BIN_EXE_gspi");
    let desk = desk_json_path();
    let desk = desk.to_str().unwrap();

    let run = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .env_remove("GSPI_TOL")
            .output()
            .expect("binary runs")
    };

    // Determinism: byte-identical machine output across runs.
    let args = [
        "query",
        "--network",
        desk,
        "--target",
        "a1,c2",
        "--format",
        "machine",
    ];
    let out1 = run(&args);
    let out2 = run(&args);
    assert!(out1.status.success());
    assert_eq!(
        out1.stdout, out2.stdout,
        "machine output must be byte-identical"
    );

    // Round-trip: parsed document equals the in-memory result bit-for-bit.
    let doc: ResultDoc = serde_json::from_slice(&out1.stdout).unwrap();
    let mut session = Session::new(desk_network(), TreeMode::Bushy).unwrap();
    let res = session.ask(["a1", "c2"], [] as [&str; 0]).unwrap();
    for (i, x) in res.mean.iter().enumerate() {
        assert_eq!(doc.mean[i].to_bits(), x.to_bits());
    }
    for i in 0..res.cov.nrows() {
        for j in 0..res.cov.ncols() {
            assert_eq!(doc.cov[i][j].to_bits(), res.cov[(i, j)].to_bits());
        }
    }

    // Exit code 0: success paths.
    assert_eq!(run(&["validate", "--network", desk]).status.code(), Some(0));
    assert_eq!(run(&["tree", "--network", desk]).status.code(), Some(0));

    // Exit code 1 with the error class named: DanglingRef.
    let bad = std::env::temp_dir().join("gspi_accept_dangling.json");
    std::fs::write(
        &bad,
        r#"{ "nodes": [ { "id": "c1", "dim": 1, "mean": [0.0], "cov": [[1.0]],
             "parents": [ { "id": "zz", "B": [[1.0]] } ] } ] }"#,
    )
    .unwrap();
    let out = run(&["validate", "--network", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DanglingRef"));

    // Exit code 1: UnknownNode and InvalidQuery from the query path.
    let out = run(&["query", "--network", desk, "--target", "zz"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnknownNode"));
    let out = run(&[
        "query",
        "--network",
        desk,
        "--target",
        "c2",
        "--evidence",
        "c2=1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("InvalidQuery"));

    // Exit code 1: DegenerateEvidence. s copies r deterministically, so
    // conditioning on both pins a singular block.
    let degen = std::env::temp_dir().join("gspi_accept_degenerate.json");
    std::fs::write(
        &degen,
        r#"{ "nodes": [
            { "id": "r", "dim": 1, "mean": [0.0], "cov": [[1.0]], "parents": [] },
            { "id": "s", "dim": 1, "mean": [0.0], "cov": [[0.0]],
              "parents": [ { "id": "r", "B": [[1.0]] } ] },
            { "id": "t", "dim": 1, "mean": [0.0], "cov": [[1.0]],
              "parents": [ { "id": "s", "B": [[1.0]] } ] }
        ] }"#,
    )
    .unwrap();
    let out = run(&[
        "query",
        "--network",
        degen.to_str().unwrap(),
        "--target",
        "t",
        "--given",
        "r,s",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("DegenerateEvidence"));
    // Evidence on the deterministic node alone is fine: it inherits its
    // parent's variance in the joint.
    let out = run(&[
        "query",
        "--network",
        degen.to_str().unwrap(),
        "--target",
        "t",
        "--evidence",
        "s=1",
    ]);
    assert_eq!(out.status.code(), Some(0));

    // Exit code 2: check failing an absurdly tight tolerance; 0 otherwise.
    let out = run(&[
        "check",
        "--seeds",
        "3",
        "--queries",
        "3",
        "--nodes",
        "8",
        "--tol",
        "1e-300",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["check", "--seeds", "3", "--queries", "3", "--nodes", "8"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max deviation"));

    pass(
        9,
        "CLI round-trip",
        "bit-equal parse-back, byte-identical reruns, exit codes 0/1/2 observed",
    );
}
