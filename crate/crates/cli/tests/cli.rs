use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecgx_core::formats::{encode_npy, export, parse_wfdb, ExportFormat, ExportView};
use ecgx_core::signal::{normalize, NormalizationOptions};
use ecgx_core::synth::{random_ecg, BeatShape};
use ecgx_exchange::test_server::TestDavServer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn ecgx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgx"))
        .args(args)
        .env_remove("EXCHANGE_URL")
        .env_remove("RUST_LOG")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ecgx(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_matches_golden_files() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for sub in ["", "convert", "analyze", "finetune", "predict", "eval", "sync", "serve"] {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub, "--help"] };
        let text = String::from_utf8(ok(&args).stdout).unwrap();
        let file = golden.join(format!("{}.txt", if sub.is_empty() { "ecgx" } else { sub }));
        if update {
            std::fs::write(&file, &text).unwrap();
        } else {
            let want = std::fs::read_to_string(&file).unwrap_or_else(|_| panic!("missing {}", file.display()));
            assert_eq!(text, want, "help for `{sub}` changed; rerun with UPDATE_GOLDEN=1 if intended");
        }
    }
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(code(&ecgx(&["convert"])), 1);
    assert_eq!(code(&ecgx(&["eval", "--truth", "a.json"])), 1);
    assert_eq!(code(&ecgx(&["frobnicate"])), 1);
    assert_eq!(code(&ecgx(&["--version"])), 0);
}

#[test]
fn convert_wfdb_matches_library_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.npy"), dir.path().join("b.npy"));
    let hea = fixture("rec500.hea");
    ok(&["convert", "--in", s(&hea), "--out", s(&a)]);
    ok(&["convert", "--in", s(&hea), "--out", s(&b)]);
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(x, y);

    let raw = parse_wfdb(&std::fs::read(&hea).unwrap(), &std::fs::read(fixture("rec500.dat")).unwrap()).unwrap();
    let ecg = normalize(&raw, &NormalizationOptions::default()).unwrap();
    assert_eq!(x, export(&ExportView::Standard(&ecg), ExportFormat::Npy).unwrap());

    // The extension picks the format; --to overrides it.
    let csv = dir.path().join("c.csv");
    ok(&["convert", "--in", s(&hea), "--out", s(&csv)]);
    assert_eq!(std::fs::read(&csv).unwrap(), export(&ExportView::Standard(&ecg), ExportFormat::Csv).unwrap());
    let forced = dir.path().join("d.csv");
    ok(&["convert", "--in", s(&hea), "--out", s(&forced), "--to", "json"]);
    let doc: Value = serde_json::from_slice(&std::fs::read(&forced).unwrap()).unwrap();
    assert!(doc.is_object());
}

#[test]
fn convert_errors() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"\x00\x01 not an ecg").unwrap();
    let out = ecgx(&["convert", "--in", s(&junk), "--out", s(&dir.path().join("x.npy"))]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[unknown_format]"));

    let truncated = dir.path().join("t.npy");
    std::fs::write(&truncated, &std::fs::read(fixture("rec500_8lead.npz")).unwrap()[..40]).unwrap();
    let out = ecgx(&["convert", "--in", s(&truncated), "--format", "npy", "--rate", "500", "--out", s(&dir.path().join("x.npy"))]);
    assert_eq!(code(&out), 2);

    let missing = dir.path().join("missing.hea");
    assert_eq!(code(&ecgx(&["convert", "--in", s(&missing), "--out", s(&dir.path().join("x.npy"))])), 2);
}

#[test]
fn analyze_views() {
    let hea = fixture("rec500.hea");
    let fid = stdout_json(&ok(&["analyze", "--in", s(&hea)]));
    assert!(fid.is_object());
    let qrs = stdout_json(&ok(&["analyze", "--in", s(&hea), "--view", "qrs"]));
    assert_eq!(qrs["view"], "qrs");
    let peaks = qrs["r_peaks"].as_array().unwrap().len();
    assert!(peaks > 0);
    assert!(qrs["windows"].as_array().unwrap().len() <= peaks);
    for view in ["median", "aligned"] {
        assert!(stdout_json(&ok(&["analyze", "--in", s(&hea), "--view", view])).is_object());
    }
    assert_eq!(code(&ecgx(&["analyze", "--in", s(&hea), "--view", "qrs", "--to", "csv"])), 1);
}

/// Writes `n` recordings per shape as 100 Hz `.npy` files plus a label file.
fn dataset(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = serde_json::Map::new();
    for i in 0..n {
        for shape in BeatShape::ALL {
            let name = format!("{}-{i:02}.npy", shape.name());
            std::fs::write(dir.join(&name), encode_npy(random_ecg(shape, &mut rng).ecg.samples())).unwrap();
            labels.insert(name, json!([shape.name()]));
        }
    }
    let path = dir.join("labels.json");
    std::fs::write(&path, serde_json::to_vec(&labels).unwrap()).unwrap();
    path
}

fn finetune_args<'a>(data: &'a Path, labels: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec!["finetune", "--data", s(data), "--labels", s(labels), "--rate", "100", "--model", "base", "--out", s(out), "--lr", "0.01"]
}

#[test]
fn finetune_predict_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dataset(dir.path(), 10, 7);
    let model = dir.path().join("cli-model.ecgx");

    let mut one = finetune_args(dir.path(), &labels, &model);
    one.extend(["--epochs", "1"]);
    let report = stdout_json(&ok(&one));
    assert_eq!(report["losses"]["train_loss_per_epoch"].as_array().unwrap().len(), 1);

    let mut bad = finetune_args(dir.path(), &labels, &model);
    bad.extend(["--gamma", "0"]);
    let out = ecgx(&bad);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));

    let mut full = finetune_args(dir.path(), &labels, &model);
    full.extend(["--epochs", "60", "--patience", "60"]);
    let first = ok(&full);
    let payload = std::fs::read(&model).unwrap();
    let manifest = std::fs::read(dir.path().join("cli-model.manifest.json")).unwrap();
    // Same seed, same bytes.
    let second = ok(&full);
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(payload, std::fs::read(&model).unwrap());
    assert_eq!(manifest, std::fs::read(dir.path().join("cli-model.manifest.json")).unwrap());
    let m: Value = serde_json::from_slice(&manifest).unwrap();
    assert_eq!((m["name"].as_str(), m["version"].as_str()), (Some("cli-model"), Some("1")));

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut args = vec!["predict".to_string(), "--model".into(), s(&model).into(), "--rate".into(), "100".into(), "--in".into()];
    let mut expected = Vec::new();
    for (i, shape) in BeatShape::ALL.into_iter().cycle().take(9).enumerate() {
        let p = dir.path().join(format!("probe-{i}.npy"));
        std::fs::write(&p, encode_npy(random_ecg(shape, &mut rng).ecg.samples())).unwrap();
        args.push(s(&p).into());
        expected.push(shape.name());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let table = stdout_json(&ok(&args));
    assert_eq!(table["model"], "cli-model@1");
    let rows = table["rows"].as_array().unwrap();
    let correct = rows.iter().zip(&expected).filter(|(r, e)| r["predicted"] == **e).count();
    assert!(correct >= 8, "{correct}/9 correct");
    for r in rows {
        let sum: f64 = r["probabilities"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    // Too few examples of a class is an operation failure.
    let small = tempfile::tempdir().unwrap();
    let labels = dataset(small.path(), 1, 3);
    let out = ecgx(&finetune_args(small.path(), &labels, &small.path().join("m.ecgx")));
    assert_eq!(code(&out), 2);
}

#[test]
#[allow(clippy::approx_constant)]
fn eval_modes() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, v: Value| {
        let p = dir.path().join(name);
        std::fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
        p
    };
    let truth = write("truth.json", json!({ "r1": ["a"], "r2": ["b"], "r3": ["a", "b"] }));
    let perfect = write("pred.json", json!({ "r3": ["b", "a"], "r1": ["a"], "r2": ["b"] }));
    let r = stdout_json(&ok(&["eval", "--truth", s(&truth), "--pred", s(&perfect)]));
    assert_eq!(r["macro_f1"], 1.0);
    assert_eq!(r["n_samples"], 3);

    let probs = write("probs.json", json!({ "r1": { "a": 0.9, "b": 0.1 }, "r2": { "a": 0.2, "b": 0.8 }, "r3": { "a": 0.7, "b": 0.6 } }));
    let r = stdout_json(&ok(&["eval", "--truth", s(&truth), "--pred", s(&probs)]));
    assert_eq!(r["n_samples"], 3);
    assert!(r.to_string().contains("1.0"));

    let short = write("short.json", json!([["a"], ["b"]]));
    let arr = write("arr.json", json!([["a"], ["b"], ["a"]]));
    assert_eq!(code(&ecgx(&["eval", "--truth", s(&arr), "--pred", s(&short)])), 2);

    // Codes that map to the same class count as agreeing.
    let icd_truth = write("icd_truth.json", json!([["I21.0"], ["I44.7"]]));
    let icd_pred = write("icd_pred.json", json!([["I21.4"], ["I44.7"]]));
    let table = dir.path().join("maps.txt");
    std::fs::write(&table, "[icd10.coarse]\nicd10,I21,MI\nicd10,I44,BBB\n").unwrap();
    let r = stdout_json(&ok(&["eval", "--truth", s(&icd_truth), "--pred", s(&icd_pred), "--labelmap", "icd10.coarse", "--labelmap-file", s(&table)]));
    assert_eq!(r["macro_f1"], 1.0);
    let r = stdout_json(&ok(&["eval", "--truth", s(&icd_truth), "--pred", s(&icd_pred)]));
    assert!(r["macro_f1"].as_f64().unwrap() < 1.0);

    // A published robustness column.
    let scores = write("scores.json", json!([0.335, 0.371, 0.432, 0.753, 0.566, 0.730, 0.825, 0.739, 0.750]));
    let r = stdout_json(&ok(&["eval", "--scores", s(&scores)]));
    for (key, want) in [("average", 0.611), ("median", 0.730), ("iqr", 0.318), ("cv", 0.308)] {
        assert!((r[key].as_f64().unwrap() - want).abs() <= 0.0015, "{key}: {}", r[key]);
    }
}

#[test]
fn sync_publish_and_predict_from_cache() {
    let dir = tempfile::tempdir().unwrap();
    let labels = dataset(dir.path(), 8, 11);
    let model = dir.path().join("shared.ecgx");
    let mut args = finetune_args(dir.path(), &labels, &model);
    args.extend(["--epochs", "30"]);
    ok(&args);

    let mut dav = TestDavServer::start();
    let url = dav.url();
    let (a, b) = (dir.path().join("cache-a"), dir.path().join("cache-b"));
    let published = stdout_json(&ok(&["sync", "--cache", s(&a), "--url", &url, "--publish", s(&model)]));
    assert_eq!(published["model"], "shared@1");
    let summary = stdout_json(&ok(&["sync", "--cache", s(&b), "--url", &url]));
    assert!(summary.to_string().contains("shared@1"));
    let listing = stdout_json(&ok(&["sync", "--cache", s(&b), "--url", &url, "--list"]));
    assert!(listing["models"].as_array().is_some_and(|m| !m.is_empty()));

    let probe = dir.path().join("normal-00.npy");
    let table = stdout_json(&ok(&["predict", "--cache", s(&b), "--model", "shared", "--rate", "100", "--in", s(&probe)]));
    assert_eq!(table["model"], "shared@1");

    dav.stop();
    let out = ecgx(&["sync", "--cache", s(&b), "--url", &url]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error["));
}
