//! Runs the `pime` binary and checks its files and exit codes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pime::model::Checkpoint;
use pime::trainer::{TrainConfig, TrainState};

fn pime(args: &[&str]) -> Output {
    pime_env(args, None)
}

fn pime_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pime"));
    cmd.args(args).env_remove("PIME_SEED");
    if let Some(s) = seed {
        cmd.env("PIME_SEED", s);
    }
    cmd.output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = pime(args);
    assert!(
        out.status.success(),
        "pime {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn small_dataset(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["synth", "--out", out.to_str().unwrap(), "--subjects-per-class", "6"];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn trained(dir: &Path, data: &Path, epochs: &str) -> PathBuf {
    let run = dir.join(format!("run{epochs}"));
    ok(&[
        "train", "--dataset", &p(data), "--out", &p(&run), "--preset", "tiny", "--epochs", epochs,
        "--folds", "1", "--batch-size", "4", "--seed", "3",
    ]);
    run
}

#[test]
fn synth_writes_files_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["synth", "--out", &p(&dir.path().join("a"))]);
    assert!(stdout.contains("planted regions: [2, 7, 11, 16]"));
    let csvs = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 100);
    assert!(dir.path().join("a/index.json").exists());

    ok(&["synth", "--out", &p(&dir.path().join("b"))]);
    let read = |d: &str, f: &str| fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("a", "index.json"), read("b", "index.json"));
    assert_eq!(read("a", "sub-0000.csv"), read("b", "sub-0000.csv"));

    ok(&["synth", "--out", &p(&dir.path().join("c")), "--seed", "99"]);
    assert_ne!(read("a", "sub-0000.csv"), read("c", "sub-0000.csv"));

    // The environment seed is the default; an explicit flag wins over it.
    let env = pime_env(&["synth", "--out", &p(&dir.path().join("d"))], Some("99"));
    assert!(env.status.success());
    assert_eq!(read("c", "sub-0000.csv"), read("d", "sub-0000.csv"));
    let flag = pime_env(
        &["synth", "--out", &p(&dir.path().join("e")), "--seed", "7"],
        Some("99"),
    );
    assert!(flag.status.success());
    assert_eq!(read("a", "sub-0000.csv"), read("e", "sub-0000.csv"));
}

#[test]
fn spec_file_is_merged_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"regions": 12, "planted_regions": [1, 3], "subjects_per_class": 2}"#).unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--out", &p(&out), "--spec", &p(&spec), "--timepoints", "40"]);
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["regions"], 12);
    assert_eq!(cfg["timepoints"], 40);
    assert_eq!(cfg["effect_size"], 2.0);
}

#[test]
fn train_zero_epochs_saves_initial_params() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data", &[]);
    let run = trained(dir.path(), &data, "0");
    let ckpt = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    let cfg: TrainConfig =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    let fresh = TrainState::new(&cfg, 20, 2).unwrap();
    assert_eq!(ckpt.to_params().unwrap(), fresh.params);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1);
}

#[test]
fn train_history_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data", &[]);
    let run = trained(dir.path(), &data, "4");
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 4);
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["epochs"], 4);
    assert_eq!(cfg["latent_dim"], 8);

    let metrics = ok(&[
        "eval", "--checkpoint", &p(&run.join("checkpoint.json")), "--dataset", &p(&data),
        "--folds", "3", "--out", &p(&dir.path().join("metrics.json")),
    ]);
    let m: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert!(m["accuracy"].as_f64().is_some());
    assert_eq!(m["folds"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("metrics.json").exists());

    // Stopping after 2 epochs and resuming to 4 matches the straight run.
    let split = dir.path().join("split");
    ok(&[
        "train", "--dataset", &p(&data), "--out", &p(&split), "--preset", "tiny", "--epochs", "2",
        "--folds", "1", "--batch-size", "4", "--seed", "3",
    ]);
    ok(&["train", "--dataset", &p(&data), "--out", &p(&split), "--resume", "--epochs", "4"]);
    let a = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    let b = Checkpoint::load(&split.join("checkpoint.json")).unwrap();
    assert_eq!(a.params, b.params);
}

#[test]
fn train_with_folds_writes_cv_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data", &[]);
    let run = dir.path().join("cv");
    ok(&[
        "train", "--dataset", &p(&data), "--out", &p(&run), "--preset", "tiny", "--epochs", "2",
        "--folds", "3",
    ]);
    let cv: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("cv.json")).unwrap()).unwrap();
    assert_eq!(cv["folds"].as_array().unwrap().len(), 3);
}

#[test]
fn region_count_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data", &[]);
    let other = small_dataset(dir.path(), "other", &["--regions", "12", "--planted", "1,2"]);
    let run = trained(dir.path(), &data, "1");
    let out = pime(&["eval", "--checkpoint", &p(&run.join("checkpoint.json")), "--dataset", &p(&other)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("20 regions"));
}

#[test]
fn explain_outputs_and_stability_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data", &[]);
    let run = trained(dir.path(), &data, "3");
    let ck = p(&run.join("checkpoint.json"));
    let mut freq = Vec::new();
    for seed in ["1", "2"] {
        let out = dir.path().join(format!("ex{seed}"));
        ok(&["explain", "--checkpoint", &ck, "--dataset", &p(&data), "--out", &p(&out), "--seed", seed]);
        assert_eq!(fs::read_dir(out.join("explanations")).unwrap().count(), 12);
        let table = fs::read_to_string(out.join("frequency.csv")).unwrap();
        let counts: Vec<usize> = table
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        freq.push(p(&out.join("frequency.csv")));
    }
    let st = dir.path().join("st");
    ok(&["stability", &freq[0], &freq[1], &freq[0], "--out", &p(&st)]);
    let dice = fs::read_to_string(st.join("dice.csv")).unwrap();
    let rows: Vec<Vec<f64>> = dice
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for i in 0..3 {
        assert_eq!(rows[i][i], 1.0);
        for j in 0..3 {
            assert_eq!(rows[i][j], rows[j][i]);
        }
    }
    assert_eq!(rows[0][2], 1.0);
}

#[test]
fn explain_single_subject_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data", &[]);
    let run = trained(dir.path(), &data, "2");
    let labels = dir.path().join("labels.txt");
    fs::write(&labels, (0..20).map(|i| format!("ROI{i}\n")).collect::<String>()).unwrap();
    let out = dir.path().join("one");
    ok(&[
        "explain", "--checkpoint", &p(&run.join("checkpoint.json")), "--dataset", &p(&data),
        "--out", &p(&out), "--subjects", "sub-0003", "--labels", &p(&labels),
    ]);
    let files: Vec<_> = fs::read_dir(out.join("explanations")).unwrap().collect();
    assert_eq!(files.len(), 1);
    let e: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out.join("explanations/sub-0003.json")).unwrap(),
    )
    .unwrap();
    let mut retained: Vec<u64> = e["retained_final"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert_eq!(retained.len(), 4);
    assert_eq!(e["subject_id"], "sub-0003");
    assert_eq!(e["retained_names"][0], format!("ROI{}", retained[0]));
    let table = fs::read_to_string(out.join("frequency.csv")).unwrap();
    let mut regions: Vec<u64> = table
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f[2], "1");
            assert_eq!(f[3], format!("ROI{}", f[1]));
            f[1].parse().unwrap()
        })
        .collect();
    regions.sort_unstable();
    retained.sort_unstable();
    assert_eq!(regions, retained);
}

#[test]
fn explain_target_size_on_large_atlas() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(
        dir.path(),
        "big",
        &["--regions", "116", "--timepoints", "80", "--planted", "3,40,77,101"],
    );
    let run = trained(dir.path(), &data, "1");
    let out = dir.path().join("ex");
    ok(&[
        "explain", "--checkpoint", &p(&run.join("checkpoint.json")), "--dataset", &p(&data),
        "--out", &p(&out), "--target-size", "10", "--subjects", "sub-0000,sub-0011",
    ]);
    for id in ["sub-0000", "sub-0011"] {
        let e: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(out.join(format!("explanations/{id}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(e["retained_final"].as_array().unwrap().len(), 10);
        assert_eq!(e["trajectory"].as_array().unwrap().len(), 106);
    }
}

#[test]
fn explain_rejects_untrained_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data", &[]);
    let run = trained(dir.path(), &data, "0");
    let ck = run.join("checkpoint.json");
    let args = |ck: &Path| {
        vec![
            "explain".to_string(), "--checkpoint".into(), p(ck), "--dataset".into(), p(&data),
            "--out".into(), p(&dir.path().join("ex")),
        ]
    };
    let a = args(&ck);
    let out = pime(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("untrained"));

    let corrupt = dir.path().join("corrupt.json");
    let text = fs::read_to_string(&ck).unwrap();
    fs::write(&corrupt, &text[..text.len() / 2]).unwrap();
    let a = args(&corrupt);
    let out = pime(&a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stability_on_fixture_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    fs::write(&a, "5,20,22,59,62,92,147,197,199,111\n").unwrap();
    fs::write(&b, "5 20 22 59 62\n92 147 197 199 121\n").unwrap();
    let st = dir.path().join("st");
    ok(&["stability", &p(&a), &p(&b), "--out", &p(&st)]);
    let dice = fs::read_to_string(st.join("dice.csv")).unwrap();
    let row: Vec<&str> = dice.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1..], ["1", "0.9"]);
    let jac = fs::read_to_string(st.join("jaccard.csv")).unwrap();
    let v: f64 = jac.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert!((v - 9.0 / 11.0).abs() < 1e-12);

    ok(&["stability", &p(&a), &p(&a), "--out", &p(&st)]);
    let dice = fs::read_to_string(st.join("dice.csv")).unwrap();
    assert!(dice.lines().skip(1).all(|l| l.split(',').skip(1).all(|v| v == "1")));
}

#[test]
fn gradcheck_reports_every_term() {
    let stdout = ok(&["gradcheck", "--graphs", "4"]);
    for term in ["ce", "cluster", "separation", "ib", "consistency", "sparsity", "diversity"] {
        assert_eq!(
            stdout.lines().filter(|l| l.split_whitespace().next() == Some(term)).count(),
            1,
            "{term}"
        );
    }
    assert!(stdout.contains("all 7 terms pass"));
}

#[test]
fn exit_codes() {
    assert_eq!(pime(&["bogus"]).status.code(), Some(1));
    assert_eq!(pime(&["train"]).status.code(), Some(1));
    assert_eq!(pime(&["--help"]).status.code(), Some(0));
    assert_eq!(pime(&["--version"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = pime(&["eval", "--checkpoint", &p(&missing), "--dataset", &p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let bad = pime(&["synth", "--out", &p(&missing), "--planted", "40"]);
    assert_eq!(bad.status.code(), Some(1));
    let env = pime_env(&["synth", "--out", &p(&missing)], Some("abc"));
    assert_eq!(env.status.code(), Some(1));
}
