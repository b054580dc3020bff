mod common;

use std::time::Duration;

use common::*;
use ecgx_core::synth::BeatShape;
use ndarray::Array2;
use serde_json::{json, Value};

#[test]
fn upload_views_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(dir.path(), 1));
    let ecg = synthetic(BeatShape::Normal, 60.0);
    let id = svc.upload_matrix(&ecg, "NORM");
    let again = svc.upload_matrix(&ecg, "NORM");
    assert_ne!(id, again, "identical uploads are not deduplicated");

    let meta: Value = svc.get(&format!("/recordings/{id}")).json().unwrap();
    assert_eq!(meta["format"], "npy");
    assert_eq!(meta["labels"], json!(["NORM"]));
    assert_eq!(svc.get("/recordings").json::<Value>().unwrap()["recordings"].as_array().unwrap().len(), 2);

    let raw: Value = svc.get(&format!("/recordings/{id}/views/raw")).json().unwrap();
    let rows = raw["samples"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 1000));

    // 200 ms before and 400 ms after the R peak at 100 Hz
    let median: Value = svc.get(&format!("/recordings/{id}/views/median")).json().unwrap();
    let rows = median["samples"].as_array().unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 60));

    let fid: Value = svc.get(&format!("/recordings/{id}/views/fiducials")).json().unwrap();
    assert_eq!(fid["r_peaks"].as_array().unwrap().len(), 10);
    let qrs: Value = svc.get(&format!("/recordings/{id}/views/qrs")).json().unwrap();
    assert_eq!(qrs["windows"][0].as_array().unwrap().len(), 12);
    let aligned: Value = svc.get(&format!("/recordings/{id}/views/aligned")).json().unwrap();
    assert_eq!(aligned["samples"].as_array().unwrap().len(), 12);

    expect_error(svc.get("/recordings/nope/views/raw"), 404, "not_found");
    expect_error(svc.get(&format!("/recordings/{id}/views/spectrum")), 404, "not_found");

    let flat = svc.upload_matrix(&Array2::zeros((12, 1000)), "");
    let e = expect_error(svc.get(&format!("/recordings/{flat}/views/qrs")), 422, "analysis_failed");
    assert_eq!(e["cause"], "no_beats_found");
    assert_eq!(svc.get(&format!("/recordings/{flat}/views/raw")).status(), 200);

    let mut corrupt = ecgx_core::formats::encode_npy(&ecg);
    corrupt.truncate(200);
    let e = expect_error(svc.upload("bad.npy", corrupt, &[]), 400, "parse_failed");
    assert_eq!(e["cause"], "truncated_input");
    expect_error(svc.upload("mystery.bin", vec![1, 2, 3], &[]), 400, "parse_failed");
    expect_error(svc.upload("x.npy", vec![1], &[("format", "bogus")]), 400, "invalid_request");

    let r = svc.http.delete(svc.url(&format!("/recordings/{again}"))).send().unwrap();
    assert_eq!(r.status(), 204);
    expect_error(svc.get(&format!("/recordings/{again}/views/median")), 404, "not_found");
    expect_error(svc.http.delete(svc.url(&format!("/recordings/{again}"))).send().unwrap(), 404, "not_found");

    // errors raised outside the handlers keep the JSON shape
    expect_error(svc.get("/nowhere"), 404, "not_found");
    expect_error(svc.http.put(svc.url("/recordings")).send().unwrap(), 405, "method_not_allowed");
    expect_error(svc.http.post(svc.url("/finetune")).body("{").send().unwrap(), 400, "invalid_request");
    let health: Value = svc.get("/health").json().unwrap();
    assert_eq!(health["status"], "ok");
}

#[test]
fn upload_size_cap() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(ecgx_service::ServiceConfig { max_upload_mb: 1, ..config(dir.path(), 1) });
    expect_error(svc.upload("big.npy", vec![0u8; 2 << 20], &[]), 413, "payload_too_large");
}

#[test]
fn finetune_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(dir.path(), 2));
    let (ids, labels) = svc.upload_dataset(&[BeatShape::Normal, BeatShape::InvertedT], 15, 3);

    let job = svc.submit(json!({ "model": "median-beat", "name": "t-wave", "recordings": ids, "labels": labels }));
    let early = svc.get(&format!("/finetune/{job}/report"));
    if early.status() == 409 {
        expect_error(early, 409, "not_ready");
    }
    let done = svc.wait_terminal(&job, Duration::from_secs(120));
    assert_eq!(done["state"], "succeeded", "{done}");
    assert_eq!(done["model"], "t-wave@1");
    let report: Value = svc.get(&format!("/finetune/{job}/report")).json().unwrap();
    let mut keys: Vec<_> = report.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["base_model", "eval_f1", "label_distribution", "losses", "n_samples"]);
    assert_eq!(report["n_samples"], 30);
    assert_eq!(report["label_distribution"], json!({"inverted_t": 15, "normal": 15}));
    assert_eq!(report["base_model"], "median-beat");

    let table: Value = svc.post("/predict", &json!({ "recordings": ids, "model": "t-wave" })).json().unwrap();
    assert_eq!(table["model"], "t-wave@1");
    assert_eq!(table["class_names"], json!(["inverted_t", "normal"]));
    let rows = table["rows"].as_array().unwrap();
    let mut correct = 0;
    for (row, label) in rows.iter().zip(&labels) {
        let p: Vec<f64> = row["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (v, b) in p.iter().zip(row["buckets"].as_array().unwrap()) {
            let want = if *v < 0.3 { "low" } else if *v >= 0.7 { "high" } else { "mid" };
            assert_eq!(b, want);
        }
        correct += usize::from(row["predicted"] == label.as_str());
    }
    assert_eq!(correct, labels.len());

    // the name is now taken
    let dup = svc.post("/finetune", &json!({ "model": "median-beat", "name": "t-wave", "recordings": ids, "labels": labels }));
    expect_error(dup, 409, "conflict");
    let models: Value = svc.get("/models").json().unwrap();
    assert_eq!(models["configured"], false);
    assert_eq!(models["models"][0]["state"], "local_only");

    expect_error(svc.post("/predict", &json!({ "recordings": ids, "model": "absent" })), 404, "not_found");
    expect_error(svc.post("/predict", &json!({ "recordings": ["nope"], "model": "t-wave" })), 404, "not_found");
}

#[test]
fn submission_validation() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(dir.path(), 1));
    let (ids, labels) = svc.upload_dataset(&[BeatShape::Normal, BeatShape::WideQrs], 6, 5);
    let single: Vec<&str> = vec!["NORM"; ids.len()];
    let e = expect_error(svc.post("/finetune", &json!({ "model": "b", "recordings": ids, "labels": single })), 400, "label_validation");
    assert_eq!(e["cause"], "too_few_classes");
    let e = expect_error(svc.post("/finetune", &json!({ "model": "b", "recordings": ids[..4], "labels": labels[..4] })), 400, "label_validation");
    assert_eq!(e["cause"], "too_few_samples");
    expect_error(svc.post("/finetune", &json!({ "model": "b", "recordings": ids, "labels": labels[..3] })), 400, "label_validation");
    expect_error(svc.post("/finetune", &json!({ "model": "b", "recordings": ["missing"], "labels": ["x"] })), 404, "not_found");
    expect_error(
        svc.post("/finetune", &json!({ "model": "b", "recordings": ids, "labels": labels, "config": { "gamma": 2.0 } })),
        400,
        "invalid_config",
    );
    let e = expect_error(
        svc.post("/finetune", &json!({ "model": "b", "recordings": ids, "labels": labels, "config": { "mode": "full" } })),
        400,
        "invalid_config",
    );
    assert_eq!(e["cause"], "unsupported_at_desk_scale");
    expect_error(svc.post("/finetune", &json!({ "model": "b", "name": "../x", "recordings": ids, "labels": labels })), 400, "invalid_request");
    expect_error(svc.post("/finetune", &json!({ "model": "", "recordings": ids, "labels": labels })), 400, "invalid_request");
    expect_error(svc.get("/finetune/nope/status"), 404, "not_found");

    // labels stored at upload are used when none are given
    let job = svc.submit(json!({ "model": "b", "recordings": ids, "config": quick_config(5) }));
    assert_eq!(svc.wait_terminal(&job, Duration::from_secs(60))["state"], "succeeded");
}

#[test]
fn queue_cancel_and_failure() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(dir.path(), 1));
    let (mut ids, mut labels) = svc.upload_dataset(&[BeatShape::Normal, BeatShape::InvertedT], 5, 7);

    let running = svc.submit(json!({ "model": "b", "recordings": ids, "labels": labels, "config": endless_config() }));
    let queued = svc.submit(json!({ "model": "b", "recordings": ids, "labels": labels, "config": quick_config(3) }));
    assert_eq!(svc.status(&queued)["state"], "queued");
    expect_error(svc.get(&format!("/finetune/{queued}/report")), 409, "not_ready");
    let c: Value = svc.post(&format!("/finetune/{queued}/cancel"), &json!({})).json().unwrap();
    assert_eq!(c["state"], "cancelled");
    expect_error(svc.post(&format!("/finetune/{queued}/cancel"), &json!({})), 409, "invalid_state");

    // a recording without beats makes the job fail when it embeds
    ids.push(svc.upload_matrix(&Array2::zeros((12, 1000)), "normal"));
    labels.push("normal".into());
    let failing = svc.submit(json!({ "model": "b", "recordings": ids, "labels": labels, "config": quick_config(3) }));

    while svc.status(&running)["progress"]["epoch"].as_u64().unwrap() == 0 {
        std::thread::sleep(Duration::from_millis(10));
    }
    svc.post(&format!("/finetune/{running}/cancel"), &json!({}));
    let r = svc.wait_terminal(&running, Duration::from_secs(30));
    assert_eq!(r["state"], "cancelled");

    let f = svc.wait_terminal(&failing, Duration::from_secs(30));
    assert_eq!(f["state"], "failed");
    assert_eq!(f["error"]["code"], "no_beats_found");
    assert!(f["error"]["message"].as_str().unwrap().contains("no beats"));
    expect_error(svc.get(&format!("/finetune/{failing}/report")), 409, "not_ready");

    let q = svc.status(&queued);
    assert_eq!((q["state"].as_str(), q["progress"]["epoch"].as_u64()), (Some("cancelled"), Some(0)), "never ran");
    let listed: Value = svc.get("/finetune").json().unwrap();
    let order: Vec<&str> = listed["jobs"].as_array().unwrap().iter().map(|j| j["id"].as_str().unwrap()).collect();
    assert_eq!(order, [running.as_str(), queued.as_str(), failing.as_str()]);
}
