use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 6] = ["--set", "train.epochs=2", "--set", "train.scenes_per_epoch=3", "--set", "eval.test_scenes=20"];

fn quest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quest")).args(args).output().expect("binary runs")
}

fn run(args: &[&str], out: &Path) -> Output {
    let mut all: Vec<&str> = args.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    all.extend(TINY);
    quest(&all)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

/// CSV data rows, without the header and the trailing comment.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).filter(|l| !l.starts_with('#')).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn col(row: &[String], i: usize) -> f64 {
    row[i].parse().unwrap()
}

#[test]
fn zero_epochs_writes_initial_checkpoint_and_empty_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = quest(&["train", "--out", dir.path().to_str().unwrap(), "--set", "train.epochs=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("quest.qcp").exists());
    assert!(dir.path().join("quest.manifest.toml").exists());
    let trace = std::fs::read_to_string(dir.path().join("quest_loss.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "epoch,loss");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("# config_hash="));
}

#[test]
fn training_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(code(&run(&["train", "--mode", "quest"], d.path())), 0);
    }
    let read = |d: &tempfile::TempDir, f: &str| std::fs::read(d.path().join(f)).unwrap();
    assert_eq!(read(&a, "quest.qcp"), read(&b, "quest.qcp"));
    assert_eq!(read(&a, "quest_loss.csv"), read(&b, "quest_loss.csv"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--set", "train.nonsense=1"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown config key"));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", bad.to_str().unwrap()], dir.path())), 2);
    assert_eq!(code(&run(&["train", "--config", "/nonexistent/cfg.toml"], dir.path())), 2);
    assert_eq!(code(&run(&["train", "--set", "channel.dropout_ratio=1.5"], dir.path())), 2);
    assert_eq!(code(&run(&["train", "--mode", "telepathy"], dir.path())), 2);
    // clap usage errors share the code
    assert_eq!(code(&quest(&["train", "--no-such-flag"])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = quest(&[
        "train",
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "train.lr=1e200",
        "--set",
        "train.grad_clip=0",
        "--set",
        "train.epochs=50",
        "--set",
        "train.scenes_per_epoch=2",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn missing_checkpoints_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    for verb in ["eval", "sweep-threshold", "sweep-dropout"] {
        let o = run(&[verb], dir.path());
        assert_eq!(code(&o), 4, "{verb}: {}", stderr(&o));
        assert!(stderr(&o).contains("missing checkpoint"));
    }
    let o = run(&["gen-scenes", "--packets", "--checkpoint", "/nonexistent.qcp"], dir.path());
    assert_eq!(code(&o), 4);
}

#[test]
fn eval_and_sweeps_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--mode", "all"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = run(&["eval"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text, std::fs::read_to_string(dir.path().join("eval.csv")).unwrap());
    assert!(text.lines().last().unwrap().starts_with("# config_hash="));
    let eval = rows(&text);
    let modes: Vec<&str> = eval.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(modes, ["vehicle_only", "result_coop", "quest_f", "quest"]);
    assert_eq!(col(&eval[0], 6), 0.0);
    for r in &eval {
        assert!(col(r, 3) <= col(r, 2), "AP@0.5 above AP@0.3 in {r:?}");
    }
    let quest_row = &eval[3];

    let o = run(&["sweep-threshold", "--thresholds", "0.0,0.3,0.6,0.9"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let sweep = rows(&stdout(&o));
    assert_eq!(sweep.len(), 4);
    let bytes: Vec<f64> = sweep.iter().map(|r| col(r, 3)).collect();
    assert!(bytes.windows(2).all(|w| w[1] <= w[0]), "{bytes:?}");
    assert_eq!(bytes[0], bytes.iter().cloned().fold(0.0, f64::max));
    // the 0.3 row reproduces the eval row at the configured threshold
    assert_eq!(sweep[1][1], quest_row[2]);
    assert_eq!(col(&sweep[1], 3), col(quest_row, 6));

    let o = run(&["sweep-dropout", "--ratios", "0,0.2,0.5,1"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let drop = rows(&stdout(&o));
    assert_eq!(drop[0][1], quest_row[2]);
    assert_eq!(drop[0][2], quest_row[3]);
    let b0 = col(&drop[0], 3);
    for r in &drop[1..3] {
        let p = col(r, 0);
        let expected = (1.0 - p) * b0;
        assert!((col(r, 3) - expected).abs() <= 0.05 * expected, "ratio {p}: {} vs {expected}", col(r, 3));
    }
    assert_eq!(col(&drop[3], 4), 0.0);
}

#[test]
fn packets_inspect_and_corruption_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gen-scenes", "--count", "3", "--packets"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let packet = dir.path().join("scene_0001.qstr");
    assert!(dir.path().join("scene_0002.txt").exists());

    let o = quest(&["codec-inspect", packet.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("crc") && text.contains("OK"), "{text}");
    assert!(text.contains("feature_dim 32"));

    let mut bytes = std::fs::read(&packet).unwrap();
    bytes[90] ^= 0x10;
    let flipped = dir.path().join("flipped.qstr");
    std::fs::write(&flipped, &bytes).unwrap();
    let o = quest(&["codec-inspect", flipped.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("CrcMismatch"));

    let truncated = dir.path().join("truncated.qstr");
    std::fs::write(&truncated, &bytes[..bytes.len() - 9]).unwrap();
    let o = quest(&["codec-inspect", truncated.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("TruncatedPacket"));
}
