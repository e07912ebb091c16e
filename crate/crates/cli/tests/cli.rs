use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vtg_core::datastore::{write_feature_file, write_manifest, FeatureMatrix, ManifestRecord};
use vtg_core::pipeline::read_predictions;

fn vtg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtg"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn vtg")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = vtg(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "num_videos=4",
    "--set",
    "video_length_features=240",
    "--set",
    "dim=16",
    "--set",
    "queries_per_video=2",
];

fn synth(dir: &Path, out: &str, seed: u64) {
    let seed = format!("noise_seed={seed}");
    let mut args = vec!["synth", "--out", out, "--set", &seed];
    args.extend_from_slice(&SMALL);
    ok(&args, dir);
}

const QUICK: [&str; 4] = ["--set", "scorer_epochs=10", "--set", "adapter_epochs=2"];

fn train(dir: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--manifest", "train/manifest.jsonl", "--out", "ck"];
    args.extend_from_slice(&QUICK);
    args.extend_from_slice(extra);
    ok(&args, dir);
}

#[test]
fn synth_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", 7);
    synth(tmp.path(), "b", 7);
    for rel in [
        "manifest.jsonl",
        "videos/v0000.cfv",
        "queries/v0000_q00.cfv",
        "manifest.jsonl.config",
    ] {
        let a = fs::read(tmp.path().join("a").join(rel)).unwrap();
        let b = fs::read(tmp.path().join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel}");
    }
    assert!(
        ok(&["validate", "--manifest", "a/manifest.jsonl"], tmp.path())
            .starts_with("ok: 4 videos, 8 queries")
    );
}

#[test]
fn invalid_inputs_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = vtg(&["synth", "--out", "x", "--set", "dim=0"], tmp.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(!bad.stderr.is_empty());
    let missing = vtg(
        &["train", "--manifest", "nope.jsonl", "--out", "ck"],
        tmp.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(vtg(&["frobnicate"], tmp.path()).status.code(), Some(2));
    synth(tmp.path(), "train", 1);
    let unknown = vtg(
        &[
            "train",
            "--manifest",
            "train/manifest.jsonl",
            "--out",
            "ck",
            "--set",
            "bogus=1",
        ],
        tmp.path(),
    );
    assert_eq!(unknown.status.code(), Some(2));
    let no_ckpt = vtg(
        &[
            "ground",
            "--manifest",
            "train/manifest.jsonl",
            "--checkpoints",
            "none",
            "--out",
            "p.jsonl",
        ],
        tmp.path(),
    );
    assert_eq!(no_ckpt.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("m.jsonl"), "{not json}\n").unwrap();
    assert_eq!(
        vtg(&["validate", "--manifest", "m.jsonl"], tmp.path())
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn train_ground_eval_ablate_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "train", 1);
    synth(dir, "test", 2);
    train(dir, &["--with-ablation", "--lambda-con", "0.5"]);
    for f in ["adapter.ckpt", "scorer.ckpt", "scorer_nocon.ckpt"] {
        assert!(dir.join("ck").join(f).is_file(), "{f}");
        assert!(
            dir.join("ck").join(format!("{f}.config")).is_file(),
            "{f}.config"
        );
    }
    let side = fs::read_to_string(dir.join("ck/scorer.ckpt.config")).unwrap();
    assert!(side.contains("lambda_con = 0.5") && side.contains("seed = 0"));
    let side = fs::read_to_string(dir.join("ck/scorer_nocon.ckpt.config")).unwrap();
    assert!(side.contains("lambda_con = 0"));

    let ground = [
        "ground",
        "--manifest",
        "test/manifest.jsonl",
        "--checkpoints",
        "ck",
        "--out",
    ];
    ok(&[&ground[..], &["p1.jsonl"]].concat(), dir);
    ok(&[&ground[..], &["p2.jsonl"]].concat(), dir);
    let p1 = fs::read(dir.join("p1.jsonl")).unwrap();
    assert_eq!(p1, fs::read(dir.join("p2.jsonl")).unwrap());
    assert!(dir.join("p1.jsonl.config").is_file());
    let preds = read_predictions(dir.join("p1.jsonl")).unwrap();
    let mut by_query: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for p in &preds {
        by_query.entry(p.query_id.clone()).or_default().push(p.rank);
    }
    assert_eq!(by_query.len(), 8);
    for ranks in by_query.values() {
        assert!(!ranks.is_empty() && ranks.len() <= 5);
        assert_eq!(*ranks, (1..=ranks.len()).collect::<Vec<_>>());
    }

    let out = ok(
        &[
            "eval",
            "--manifest",
            "test/manifest.jsonl",
            "--predictions",
            "p1.jsonl",
            "--out",
            "r.json",
        ],
        dir,
    );
    assert!(out.contains("R1@0.3"));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["nms_iou_threshold"], "0.5");
    assert_eq!(report["query_count"], 8);

    ok(
        &[
            "ablate",
            "--manifest",
            "test/manifest.jsonl",
            "--checkpoints",
            "ck",
            "--out",
            "a.csv",
        ],
        dir,
    );
    let csv = fs::read_to_string(dir.join("a.csv")).unwrap();
    let variants: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        variants,
        ["full", "-adapter", "-fusion", "-con", "baseline"]
    );

    ok(
        &[
            "bench",
            "--manifest",
            "test/manifest.jsonl",
            "--checkpoints",
            "ck",
            "--k-sweep",
            "1,5,10,all",
            "--warmups",
            "1",
            "--repetitions",
            "2",
            "--out",
            "b.csv",
        ],
        dir,
    );
    let csv = fs::read_to_string(dir.join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("k,windows_processed,"));
    assert!(fs::read_to_string(dir.join("b.csv.config"))
        .unwrap()
        .contains("bench_repetitions = 2"));
}

#[test]
fn external_scores_skip_the_scorer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir, "test", 3);
    // one proposal per query in window 0, covering its first 4 seconds
    let manifest = fs::read_to_string(dir.join("test/manifest.jsonl")).unwrap();
    let mut rows = String::new();
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        rows.push_str(&format!(
            "{{\"query_id\":{},\"window_index\":0,\"start_sec\":0.0,\"end_sec\":4.0,\"score\":0.9}}\n",
            v["query_id"]
        ));
    }
    fs::write(dir.join("ext.jsonl"), rows).unwrap();
    ok(
        &[
            "ground",
            "--manifest",
            "test/manifest.jsonl",
            "--external-scores",
            "ext.jsonl",
            "--set",
            "top_k_windows=all",
            "--out",
            "p.jsonl",
        ],
        dir,
    );
    let preds = read_predictions(dir.join("p.jsonl")).unwrap();
    assert_eq!(preds.len(), 8);
    assert!(preds
        .iter()
        .all(|p| p.rank == 1 && p.start_sec == 0.0 && p.end_sec == 4.0));
}

#[test]
fn eval_two_query_example() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let video = FeatureMatrix::new(2, vec![0.5; 2 * 100]).unwrap();
    write_feature_file(dir.join("v.cfv"), &video).unwrap();
    let query = FeatureMatrix::new(2, vec![1.0, 0.0]).unwrap();
    write_feature_file(dir.join("q.cfv"), &query).unwrap();
    let rec = |id: &str| ManifestRecord {
        query_id: id.into(),
        video_id: "v".into(),
        query_feature_file: "q.cfv".into(),
        video_feature_file: "v.cfv".into(),
        gt_start_sec: 0.0,
        gt_end_sec: 10.0,
        fps: 1.0,
    };
    write_manifest(dir.join("m.jsonl"), &[rec("q1"), rec("q2")]).unwrap();
    // q1 top-1 IoU 0.4; q2 top-1 IoU 0.2 with a rank-3 hit at IoU 0.6
    let preds = [
        ("q1", 1, 0.0, 4.0),
        ("q2", 1, 0.0, 2.0),
        ("q2", 2, 50.0, 60.0),
        ("q2", 3, 0.0, 6.0),
    ];
    let text: String = preds
        .iter()
        .map(|(q, r, s, e)| {
            format!("{{\"query_id\":\"{q}\",\"rank\":{r},\"start_sec\":{s},\"end_sec\":{e},\"score\":1.0}}\n")
        })
        .collect();
    fs::write(dir.join("p.jsonl"), text).unwrap();
    let out = ok(
        &[
            "eval",
            "--manifest",
            "m.jsonl",
            "--predictions",
            "p.jsonl",
            "--out",
            "r.csv",
        ],
        dir,
    );
    assert!(out.contains("R1@0.3 = 50.00"), "{out}");
    assert!(out.contains("R5@0.3 = 100.00"), "{out}");
    assert!(dir.join("r.csv.config").is_file());
}
