use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cvx_attn::heads::{Activation, HeadKind, HeadSpec};
use cvx_attn::io::{read_variables, write_variables, VariableSet};
use cvx_attn::linalg::Mat;
use cvx_attn::nonconvex::{Neuron, NonconvexWeights};

fn cvxattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvxattn")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_classes(dir: &Path, seed: u64) -> PathBuf {
    let p = dir.join(format!("classes{seed}.cvx"));
    let o = cvxattn(&["gen-data", "gaussian_classes(k=3, sep=5)", "--n", "30", "--s", "3", "--d", "4", "--seed", &seed.to_string(), "--out", s(&p)]);
    assert!(o.status.success(), "{}", stderr(&o));
    p
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn ball_rows(csv: &str) -> Vec<[f64; 4]> {
    csv.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let label = if f[3] == "extreme" { 1.0 } else { 0.0 };
            [f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), label]
        })
        .collect()
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(gen_classes(dir.path(), 4)).unwrap();
    let other = dir.path().join("again");
    std::fs::create_dir(&other).unwrap();
    let b = std::fs::read(gen_classes(&other, 4)).unwrap();
    let c = std::fs::read(gen_classes(dir.path(), 5)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn config_errors_name_the_line_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "seed = 1\n[head]\nkidn = mixer\n");
    let o = cvxattn(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn training_twice_gives_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_classes(dir.path(), 1);
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("seed = 3\n[head]\nkind = mixer\nbeta = 1e-3\n[data]\npath = {}\n", s(&data)));
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let o = cvxattn(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        reports.push(std::fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn huge_beta_gives_zero_weights_that_map_to_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_classes(dir.path(), 2);
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("[head]\nkind = mlp\nbeta = 1e9\n[data]\npath = {}\n", s(&data)));
    let out = dir.path().join("out");
    let o = cvxattn(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["reg"].as_f64(), Some(0.0));
    // Ten samples per class; a constant predictor gets exactly one class right.
    let top1 = report["metrics"]["top1"].as_f64().unwrap();
    assert!((top1 - 1.0 / 3.0).abs() < 1e-12, "top-1 {top1}");

    let mapped = dir.path().join("mapped.bin");
    let o = cvxattn(&["map", "to-nonconvex", "--config", s(&cfg), "--in", s(&out.join("variables.bin")), "--out", s(&mapped)]);
    assert!(o.status.success(), "{}", stderr(&o));
    match read_variables(&mapped).unwrap() {
        VariableSet::Nonconvex { weights, .. } => assert_eq!(weights.frob_sq(), 0.0),
        other => panic!("expected weights, got {other:?}"),
    }
}

#[test]
fn attention_round_trip_keeps_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_classes(dir.path(), 3);
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("[head]\nkind = sa\nbeta = 1e-2\n[solver]\nmax_iters = 300\n[data]\npath = {}\n", s(&data)));
    let out = dir.path().join("out");
    assert!(cvxattn(&["train", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let nc = dir.path().join("nc.bin");
    let back = dir.path().join("back.bin");
    for (dir_name, input, output) in [("to-nonconvex", out.join("variables.bin"), nc.clone()), ("to-convex", nc.clone(), back.clone())] {
        let o = cvxattn(&["map", dir_name, "--config", s(&cfg), "--in", s(&input), "--out", s(&output)]);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = stdout(&o);
        let field = |key: &str| -> f64 { text.lines().find(|l| l.starts_with(key)).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap() };
        let (c, n) = (field("convex"), field("nonconvex"));
        assert!((c - n).abs() <= 1e-9 * c.abs().max(1.0), "{dir_name}: {c} vs {n}");
    }
}

#[test]
fn relu_pattern_miss_lists_the_available_patterns() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_classes(dir.path(), 6);
    let spec = HeadSpec::new(HeadKind::Mlp, Activation::Relu, 0.1);
    let neurons = [[1.0, 0.0, 0.0, 0.0], [-1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0]]
        .iter()
        .map(|w| Neuron { group: 0, gate: None, w1: Mat::from_column_slice(4, 1, w), w2: Mat::from_element(3, 1, 0.5) })
        .collect();
    let weights = NonconvexWeights { neurons, gates: vec![] };
    let input = dir.path().join("w.bin");
    write_variables(&input, &VariableSet::Nonconvex { spec, weights }).unwrap();
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("[solver]\nbudget = 1\n[data]\npath = {}\n", s(&data)));
    let o = cvxattn(&["map", "to-convex", "--mode", "sampled", "--config", s(&cfg), "--in", s(&input), "--out", s(&dir.path().join("x.bin"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("available"), "{err}");
    assert!(err.lines().any(|l| l.trim().chars().all(|ch| ch == '0' || ch == '1') && !l.trim().is_empty()), "{err}");
}

#[test]
fn zero_ball_samples_give_a_header_only_csv() {
    let o = cvxattn(&["ball", "--count", "0"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "z1,z2,z4,label");
}

#[test]
fn unconstrained_ball_stays_inside_the_nuclear_ball() {
    let o = cvxattn(&["ball", "--k", "none", "--count", "300", "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = ball_rows(&stdout(&o));
    assert_eq!(rows.len(), 300);
    for [z1, z2, z4, _] in rows {
        // Nuclear norm of [[z1, z2], [0, z4]] from its Frobenius norm and determinant.
        let nuc = (z1 * z1 + z2 * z2 + z4 * z4 + 2.0 * (z1 * z4).abs()).sqrt();
        assert!(nuc <= 1.0 + 1e-9, "{nuc}");
    }
}

#[test]
fn identity_cone_extremes_are_nonnegative_rank_one() {
    let o = cvxattn(&["ball", "--k", "I", "--count", "300", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = ball_rows(&stdout(&o));
    let extremes: Vec<_> = rows.iter().filter(|r| r[3] == 1.0).collect();
    assert!(!extremes.is_empty());
    for [z1, z2, z4, _] in extremes {
        // u v^T with u >= 0 on the slice Z[1,0] = 0: either u = e1 (z4 = 0) or
        // v = +-e2 (z1 = 0, and z2, z4 share the sign of v).
        assert!((z1 * z4).abs() <= 1e-9, "{z1} {z2} {z4}");
        assert!(z2 * z4 >= -1e-12, "{z1} {z2} {z4}");
        let nuc = (z1 * z1 + z2 * z2 + z4 * z4).sqrt();
        assert!((nuc - 1.0).abs() <= 1e-9, "{nuc}");
    }
}

#[test]
fn enumeration_stays_within_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_classes(dir.path(), 7);
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("[head]\nkind = mlp\n[data]\npath = {}\n", s(&data)));
    let o = cvxattn(&["enumerate", "--config", s(&cfg)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let groups: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    for g in groups.as_array().unwrap() {
        let count = g["count"].as_u64().unwrap() as usize;
        assert!(count as f64 <= g["bound"].as_f64().unwrap());
        let mut pats: Vec<&str> = g["patterns"].as_array().unwrap().iter().map(|p| p.as_str().unwrap()).collect();
        assert_eq!(pats.len(), count);
        pats.sort();
        pats.dedup();
        assert_eq!(pats.len(), count);
    }
}

#[test]
fn verify_exit_code_follows_the_checks() {
    let o = cvxattn(&["verify", "prox", "--seeds", "20"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
    assert_eq!(cvxattn(&["verify", "nonsense"]).status.code(), Some(2));
}

#[test]
fn named_preset_warns_about_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_classes(dir.path(), 8);
    let cfg = write_cfg(dir.path(), "run.cfg", &format!("[head]\nkind = mixer\n[solver]\nmax_iters = 50\n[data]\npath = {}\n", s(&data)));
    let o = cvxattn(&["train", "--preset", "paper", "--config", s(&cfg), "--out", s(&dir.path().join("out"))]);
    assert!(stderr(&o).contains("cosine"), "{}", stderr(&o));
}
