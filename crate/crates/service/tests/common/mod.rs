#![allow(dead_code)]

use std::time::{Duration, Instant};

use ecgx_core::formats::encode_npy;
use ecgx_core::synth::{random_ecg, synthetic_ecg, BeatShape, EcgSpec};
use ecgx_service::{ErrorBody, ErrorCode, ServerHandle, ServiceConfig};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::{multipart, Client, Response};
use serde_json::{json, Value};

pub struct Service {
    pub handle: ServerHandle,
    pub http: Client,
    pub base: String,
}

pub fn config(dir: &std::path::Path, workers: usize) -> ServiceConfig {
    ServiceConfig { data_dir: dir.to_path_buf(), port: 0, workers, ..ServiceConfig::default() }
}

impl Service {
    pub fn start(cfg: ServiceConfig) -> Service {
        let handle = ServerHandle::start(cfg).expect("service starts");
        let base = handle.base_url();
        Service { handle, http: Client::builder().timeout(Duration::from_secs(120)).build().unwrap(), base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> Response {
        self.http.get(self.url(path)).send().unwrap()
    }

    pub fn post(&self, path: &str, body: &Value) -> Response {
        self.http.post(self.url(path)).json(body).send().unwrap()
    }

    pub fn upload(&self, name: &str, bytes: Vec<u8>, extra: &[(&str, &str)]) -> Response {
        let mut form = multipart::Form::new().part("file", multipart::Part::bytes(bytes).file_name(name.to_string()));
        for (k, v) in extra {
            form = form.text(k.to_string(), v.to_string());
        }
        self.http.post(self.url("/recordings")).multipart(form).send().unwrap()
    }

    /// Uploads a 100 Hz matrix as `.npy` and returns the new id.
    pub fn upload_matrix(&self, m: &Array2<f64>, labels: &str) -> String {
        let r = self.upload("ecg.npy", encode_npy(m), &[("rate_hz", "100"), ("labels", labels)]);
        assert_eq!(r.status(), 201, "{}", r.text().unwrap());
        r.json::<Value>().unwrap()["id"].as_str().unwrap().to_string()
    }

    /// Uploads `n` recordings of each shape, labelled with the shape name.
    pub fn upload_dataset(&self, shapes: &[BeatShape], n: usize, seed: u64) -> (Vec<String>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            for &shape in shapes {
                let ecg = random_ecg(shape, &mut rng).ecg;
                ids.push(self.upload_matrix(ecg.samples(), shape.name()));
                labels.push(shape.name().to_string());
                let _ = i;
            }
        }
        (ids, labels)
    }

    pub fn status(&self, job: &str) -> Value {
        let r = self.get(&format!("/finetune/{job}/status"));
        assert_eq!(r.status(), 200);
        r.json().unwrap()
    }

    pub fn wait_terminal(&self, job: &str, limit: Duration) -> Value {
        let start = Instant::now();
        loop {
            let s = self.status(job);
            if ["succeeded", "failed", "cancelled"].contains(&s["state"].as_str().unwrap()) {
                return s;
            }
            assert!(start.elapsed() < limit, "job {job} still {s}");
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn submit(&self, body: Value) -> String {
        let r = self.post("/finetune", &body);
        assert_eq!(r.status(), 202, "{}", r.text().unwrap());
        r.json::<Value>().unwrap()["job_id"].as_str().unwrap().to_string()
    }
}

/// Checks status and a closed-set error code; returns the error detail.
pub fn expect_error(r: Response, status: u16, code: &str) -> Value {
    assert_eq!(r.status().as_u16(), status);
    assert!(r.headers()["content-type"].to_str().unwrap().starts_with("application/json"));
    let text = r.text().unwrap();
    let body: ErrorBody = serde_json::from_str(&text).unwrap_or_else(|e| panic!("error body {text}: {e}"));
    assert!(ErrorCode::ALL.contains(&body.error.code));
    assert_eq!(body.error.code.as_str(), code, "{text}");
    serde_json::from_str::<Value>(&text).unwrap()["error"].clone()
}

pub fn synthetic(shape: BeatShape, bpm: f64) -> Array2<f64> {
    synthetic_ecg(&EcgSpec { shape, bpm, ..EcgSpec::default() }).ecg.samples().clone()
}

/// Small, fast training settings.
pub fn quick_config(max_epochs: usize) -> Value {
    json!({ "max_epochs": max_epochs, "lr": 0.01, "patience": max_epochs, "batch_size": 16 })
}

/// Training that only ends when cancelled.
pub fn endless_config() -> Value {
    json!({ "max_epochs": 100_000_000, "lr": 1e-6, "patience": 100_000_000 })
}
