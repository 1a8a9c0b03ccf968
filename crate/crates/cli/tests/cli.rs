use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn fraudsys(args: &[&str], dir: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_fraudsys"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn keygen_prints_a_fresh_hex_key() {
    let dir = tempfile::tempdir().unwrap();
    let a = stdout(&fraudsys(&["keygen"], dir.path()));
    let b = stdout(&fraudsys(&["keygen"], dir.path()));
    assert_eq!(a.trim().len(), 64);
    assert!(a.trim().chars().all(|c| c.is_ascii_hexdigit()));
    assert_ne!(a, b);
}

#[test]
fn generate_train_replay_report_payout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "sim", "generate", "--workers", "2", "--accounts", "6", "--subjects", "20", "--honest", "80", "--seed", "3",
        "--out", "log.csv",
    ];
    fraudsys(&args, d);
    let log = std::fs::read_to_string(d.join("log.csv")).unwrap();
    assert!(log.starts_with("timestamp,user_id,device_model,subject_id,category,label,worker_id,account_created\n"));
    let again = stdout(&fraudsys(
        &["sim", "generate", "--workers", "2", "--accounts", "6", "--subjects", "20", "--honest", "80", "--seed", "3"],
        d,
    ));
    assert_eq!(again, log);

    let trained = stdout(&fraudsys(&["train", "log.csv", "--out", "model.knn", "--folds", "4"], d));
    assert!(trained.contains("4-fold cv: accuracy"), "{trained}");
    assert!(d.join("model.knn").metadata().unwrap().len() > 0);

    let summary = stdout(&fraudsys(&["sim", "replay", "log.csv", "--out", "rep", "--maxf", "43200", "--seed", "2"], d));
    assert!(summary.contains("rows replayed"), "{summary}");
    for f in ["records.csv", "daily.csv", "rank.csv", "honest_hist.csv", "report.json", "summary.txt"] {
        assert!(d.join("rep").join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["penalty"]["maxf"], 43_200.0);
    assert_eq!(report["config"]["seed"], 2);

    assert_eq!(stdout(&fraudsys(&["sim", "report", "rep"], d)), summary);
    let pay = stdout(&fraudsys(&["sim", "payout", "--report", "rep"], d));
    assert!(pay.contains("mining payout       $3.67/day"), "{pay}");
}

#[test]
fn payout_from_a_given_average() {
    let dir = tempfile::tempdir().unwrap();
    let pay = stdout(&fraudsys(&["sim", "payout", "--avg-hours", "15.34", "--price", "2"], dir.path()));
    assert!(pay.contains("fraud payout        $3.13/day"), "{pay}");
    assert!(pay.contains("fraud pays more     no"), "{pay}");
}

#[test]
fn plot_penalty_emits_three_curves() {
    let dir = tempfile::tempdir().unwrap();
    let csv = stdout(&fraudsys(&["plot-penalty", "--points", "5"], dir.path()));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "r,logistic,exponential,logarithmic");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0.000000,2.000000,"));
    assert!(lines[3].starts_with("0.500000,300.000000,"));
}

#[test]
fn bench_prints_an_appendable_profile_row() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["bench", "--seconds", "0.2", "--model-name", "test box", "--cpu-class", "desktop", "--sequential"];
    let row = stdout(&fraudsys(&args, dir.path()));
    let fields: Vec<&str> = row.trim().split(',').collect();
    assert_eq!(fields[..2], ["test box", "desktop"]);
    assert!(fields[2].parse::<f64>().unwrap() > 1000.0);
}

#[test]
fn serve_answers_json_lines_on_stdio() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_fraudsys"))
        .args(["serve", "--stdio"])
        .env("FRAUDSYS_KEY", "11".repeat(32))
        .env("RUST_LOG", "warn")
        .current_dir(dir.path())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    writeln!(stdin, r#"{{"op":"register_user","user_id":"u"}}"#).unwrap();
    writeln!(stdin, r#"{{"op":"register_user","user_id":"u"}}"#).unwrap();
    writeln!(stdin, r#"{{"op":"stats"}}"#).unwrap();
    drop(stdin);
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let replies: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(replies.len(), 3);
    assert_eq!(replies[0]["ok"], true);
    assert_eq!(replies[1]["error"]["code"], "conflict");
    assert_eq!(replies[2]["result"]["users"], 1);
}

#[test]
fn serve_without_a_key_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fraudsys"))
        .args(["serve", "--stdio"])
        .env_remove("FRAUDSYS_KEY")
        .current_dir(dir.path())
        .stdin(Stdio::null())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("FRAUDSYS_KEY"));
}
