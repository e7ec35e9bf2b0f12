// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedbench")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_partition_classify() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = fedbench(&["generate", "--samples", "40", "--features-a", "2", "--features-b", "1", "--seed", "3", "--out", path(d)]);
    assert!(out.status.success(), "{out:?}");
    for f in ["party_a.csv", "party_b.csv", "pooled.csv"] {
        assert!(d.join(f).exists());
    }
    let header = fs::read_to_string(d.join("pooled.csv")).unwrap();
    assert!(header.starts_with("id,a0,a1,b0,label"));

    let out = fedbench(&["classify", path(&d.join("party_a.csv")), path(&d.join("party_b.csv"))]);
    assert_eq!(stdout(&out).trim(), "vertical");

    let hdir = d.join("h");
    let out = fedbench(&["partition", "--mode", "hfl", "--input", path(&d.join("pooled.csv")), "--clients", "4", "--out", path(&hdir)]);
    assert!(out.status.success(), "{out:?}");
    let clients: Vec<String> = (0..4).map(|k| path(&hdir.join(format!("client_{k}.csv"))).to_string()).collect();
    let mut args = vec!["classify"];
    args.extend(clients.iter().map(String::as_str));
    assert_eq!(stdout(&fedbench(&args)).trim(), "horizontal");

    let vdir = d.join("v");
    let out = fedbench(&["partition", "--mode", "vfl", "--input", path(&d.join("pooled.csv")), "--features-a", "0,2", "--out", path(&vdir)]);
    assert!(out.status.success(), "{out:?}");
    let a = fs::read_to_string(vdir.join("party_a.csv")).unwrap();
    assert!(a.starts_with("id,a0,b0\n"));

    // The same partition twice shares both ids and schema.
    let pooled = d.join("pooled.csv");
    assert_eq!(fedbench(&["classify", path(&pooled), path(&pooled)]).status.code(), Some(2));
}

#[test]
fn run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("hfl.toml");
    fs::write(
        &cfg,
        "[experiment]\nmode = \"hfl\"\nscheme = \"none\"\nseed = 1\n\
         [data]\nn_samples = 80\nfeature_scale = \"standardized\"\n\
         [hyperparams]\nlearning_rate = 0.1\nmax_iters = 10\n\
         [hfl]\nclients = 3\n",
    )
    .unwrap();
    let out_dir = d.join("out");
    let out = fedbench(&["run", "--config", path(&cfg), "--scheme", "pairwise", "--out", path(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("hfl experiment, scheme pairwise, seed 1"));
    let kv = fs::read_to_string(out_dir.join("report.txt")).unwrap();
    assert!(kv.contains("scheme = pairwise\n") && kv.contains("rounds = 10\n"));
    let dump = fs::read_to_string(out_dir.join("transcript.txt")).unwrap();
    assert!(!dump.is_empty());

    let out = fedbench(&["report", path(&out_dir.join("report.txt"))]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("delta_loss = |v_fed - v_sum| holds"));

    let tampered = d.join("bad.txt");
    let line = kv.lines().find(|l| l.starts_with("delta_loss")).unwrap();
    fs::write(&tampered, kv.replace(line, "delta_loss = 123.0")).unwrap();
    assert_eq!(fedbench(&["report", path(&tampered)]).status.code(), Some(2));

    let t = d.join("seeded.txt");
    let out = fedbench(&["run", "--config", path(&cfg), "--seed", "5", "--transcript", path(&t)]);
    assert!(out.status.success());
    assert!(t.exists());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[experiment]\nmode = \"vfl\"\nscheme = \"pairwise\"\n").unwrap();
    assert_eq!(fedbench(&["run", "--config", path(&cfg)]).status.code(), Some(2));
    fs::write(&cfg, "[data]\nunknown_key = 1\n").unwrap();
    assert_eq!(fedbench(&["run", "--config", path(&cfg)]).status.code(), Some(2));
    let missing = dir.path().join("missing.toml");
    assert_eq!(fedbench(&["run", "--config", path(&missing)]).status.code(), Some(2));
    assert_eq!(fedbench(&["run", "--mode", "tfl", "--config", path(&cfg)]).status.code(), Some(2));
    assert_eq!(fedbench(&["frobnicate"]).status.code(), Some(2));
}
