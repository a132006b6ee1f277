use std::path::Path;
use std::process::{Command, Output};

fn mmae(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmae"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = mmae(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth_small(dir: &Path) {
    ok(&["synth", "--classes", "4", "--size", "32", "--count", "80", "--seed", "3", "--out", "d"], dir);
}

#[test]
fn synth_writes_triplets_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--classes", "4", "--size", "32", "--count", "400", "--seed", "7", "--out", "d"], tmp.path());
    let manifest = std::fs::read_to_string(tmp.path().join("d/manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(manifest.lines().next(), Some("path,label,split"));
    assert_eq!(rows.len(), 400);
    for row in &rows {
        let rel = row.split(',').next().unwrap();
        let abs = tmp.path().join("d").join(rel);
        assert!(abs.exists());
        let stem = abs.file_stem().unwrap().to_str().unwrap().to_string();
        assert!(abs.with_file_name(format!("{stem}_H.png")).exists());
        assert!(abs.with_file_name(format!("{stem}_E.png")).exists());
    }
    let test_rows = rows.iter().filter(|r| r.ends_with(",test")).count();
    assert_eq!(test_rows, 100);
    assert!(tmp.path().join("d/config.toml").exists());
}

#[test]
fn maskplan_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &["maskplan", "--alphas", "8,1,1", "--budget", "190", "--grid", "14", "--trials", "10000", "--out", "m"],
        tmp.path(),
    );
    let stats = std::fs::read_to_string(tmp.path().join("m/stats.txt")).unwrap();
    let field = |k: &str| -> f64 {
        stats
            .lines()
            .find_map(|l| l.strip_prefix(k).map(|v| v.trim().parse().unwrap()))
            .unwrap()
    };
    assert_eq!(field("duplicates "), 0.0);
    assert_eq!(field("budget_mismatches "), 0.0);
    assert!((field("mean_rgb_fraction ") - 0.80).abs() <= 0.01);
    assert!(tmp.path().join("m/plan.txt").exists());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["maskplan", "--set", "maskplan.nope=1", "--out", "x"],
        vec!["maskplan", "--alphas", "1,2", "--out", "x"],
        vec!["pretrain", "--out", "x"],
        vec!["bogus-command"],
    ] {
        let out = mmae(&args, tmp.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    std::fs::write(tmp.path().join("bad.toml"), "[pretrain]\nepoch = 3\n").unwrap();
    let out = mmae(&["maskplan", "--config", "bad.toml", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mmae(&["pretrain", "--data", "missing", "--out", "x"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    synth_small(tmp.path());
    let out = mmae(&["finetune", "--data", "d", "--ckpt", "nope.ckpt", "--out", "f"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergent_pretraining_saves_last_good_state() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    let out = mmae(
        &["pretrain", "--data", "d", "--epochs", "2", "--set", "pretrain.base_lr=1e200", "--out", "r"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical fault"));
    assert!(tmp.path().join("r/last_good.ckpt").exists());
    assert!(!tmp.path().join("r/final.ckpt").exists());
}

#[test]
fn pipeline_composes_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_small(dir);
    ok(&["pretrain", "--data", "d", "--epochs", "2", "--seed", "3", "--out", "r"], dir);
    let loss = std::fs::read_to_string(dir.join("r/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(dir.join("r/checkpoints/epoch_0002.ckpt").exists());

    ok(
        &["finetune", "--data", "d", "--ckpt", "r/final.ckpt", "--n-labeled", "40", "--set", "finetune.epochs=2", "--out", "f"],
        dir,
    );
    let eval = std::fs::read_to_string(dir.join("f/eval.csv")).unwrap();
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines[0], "fold,accuracy");
    assert_eq!(lines.len(), 6);
    for (i, l) in lines[1..].iter().enumerate() {
        let (fold, acc) = l.split_once(',').unwrap();
        assert_eq!(fold, (i + 1).to_string());
        assert!((0.0..=1.0).contains(&acc.parse::<f64>().unwrap()));
    }
    assert!(std::fs::read_to_string(dir.join("f/report.txt")).unwrap().starts_with("accuracy "));

    ok(&["knn", "--data", "d", "--ckpt", "r/final.ckpt", "--k", "5", "--out", "k"], dir);
    assert_eq!(std::fs::read_to_string(dir.join("k/eval.csv")).unwrap().lines().count(), 2);
    let out = mmae(&["knn", "--data", "d", "--ckpt", "r/final.ckpt", "--k", "1000", "--out", "k2"], dir);
    assert_eq!(out.status.code(), Some(2));

    ok(&["attnmap", "--data", "d", "--ckpt", "r/final.ckpt", "--layer", "1", "--out", "a"], dir);
    let maps = std::fs::read_dir(dir.join("a"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(maps, 4 * 2);

    ok(&["embed", "--data", "d", "--ckpt", "r/final.ckpt", "--out", "e"], dir);
    let emb = std::fs::read_to_string(dir.join("e/embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 81);
    assert_eq!(emb.lines().next().unwrap().split(',').count(), 3 + 32);
}

#[test]
fn runs_reproduce_from_the_saved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_small(dir);
    ok(&["pretrain", "--data", "d", "--epochs", "2", "--seed", "11", "--out", "r1"], dir);
    ok(&["pretrain", "--config", "r1/config.toml", "--out", "r2"], dir);
    ok(&["pretrain", "--config", "r1/config.toml", "--sequential", "--out", "r3"], dir);
    let a = std::fs::read(dir.join("r1/final.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("r2/final.ckpt")).unwrap());
    assert_eq!(a, std::fs::read(dir.join("r3/final.ckpt")).unwrap());
    assert_eq!(
        std::fs::read_to_string(dir.join("r1/config.toml")).unwrap(),
        std::fs::read_to_string(dir.join("r2/config.toml")).unwrap()
    );

    // resuming from the epoch-1 checkpoint lands on the same final state
    ok(
        &["pretrain", "--config", "r1/config.toml", "--resume", "r1/checkpoints/epoch_0001.ckpt", "--out", "r4"],
        dir,
    );
    assert_eq!(a, std::fs::read(dir.join("r4/final.ckpt")).unwrap());

    ok(&["pretrain", "--config", "r1/config.toml", "--seed", "12", "--out", "r5"], dir);
    assert_ne!(a, std::fs::read(dir.join("r5/final.ckpt")).unwrap());
}
