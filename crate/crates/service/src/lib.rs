//! HTTP service over the ECG platform: recording ingestion, analysis views,
//! fine-tune jobs, prediction and the model registry, all under `/api/v1`.
//!
//! Everything lives below one data directory:
//!
//! ```text
//! <data_dir>/recordings/<id>.npy, <id>.json
//! <data_dir>/jobs/<id>.json
//! <data_dir>/registry-cache/{local,remote}/
//! ```

pub mod api;
pub mod config;
pub mod error;
pub mod jobs;
pub mod store;

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use chrono::Utc;
use ecgx_core::finetune::{train_head_with, EpochProgress};
use ecgx_core::TrainingReport;
use ecgx_exchange::{head_kind, save_model, ExchangeError, ModelCache, ModelManifest, WebDavClient};
use parking_lot::Mutex;

pub use api::router;
pub use config::{ConfigError, ExchangeConfig, ServiceConfig};
pub use error::{ApiError, ErrorBody, ErrorCode};
pub use jobs::{JobManager, JobRecord, JobSpec, JobState, Progress, RESTART_CODE};
pub use store::{RecordingMeta, RecordingStore, Upload, View};

/// Version given to models trained by the service.
pub const TRAINED_VERSION: &str = "1";

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!("tmp-{}", uuid::Uuid::new_v4().simple()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}

/// Shared state behind every request.
pub struct App {
    pub config: ServiceConfig,
    pub recordings: Arc<RecordingStore>,
    pub models: Arc<ModelCache>,
    pub jobs: JobManager,
    pub exchange: Option<WebDavClient>,
    publishing: Mutex<BTreeSet<String>>,
    /// Serializes the name check and enqueue of fine-tune submissions.
    pub(crate) submit_lock: Mutex<()>,
}

impl App {
    pub fn open(config: ServiceConfig) -> Result<Arc<App>, StartError> {
        config.validate().map_err(|e| StartError(e.to_string()))?;
        let dir = &config.data_dir;
        let io = |what: &str, e: &dyn std::fmt::Display| StartError(format!("{what} in {}: {e}", dir.display()));
        let recordings = Arc::new(RecordingStore::open(dir.join("recordings")).map_err(|e| io("cannot open recordings", &e))?);
        let models = Arc::new(ModelCache::open(dir.join("registry-cache")).map_err(|e| io("cannot open model cache", &e))?);
        let exchange = match &config.exchange {
            Some(ex) => Some(WebDavClient::new(&ex.dav()).map_err(|e| StartError(e.to_string()))?),
            None => None,
        };
        let trainer = Arc::new(ServiceTrainer { recordings: recordings.clone(), models: models.clone() });
        let jobs = JobManager::open(dir.join("jobs"), config.workers, trainer).map_err(|e| io("cannot open jobs", &e))?;
        Ok(Arc::new(App { config, recordings, models, jobs, exchange, publishing: Mutex::default(), submit_lock: Mutex::default() }))
    }

    pub(crate) fn publishing(&self) -> BTreeSet<String> {
        self.publishing.lock().clone()
    }

    /// Marks `stem` as being published while `f` runs.
    pub(crate) fn while_publishing<T>(&self, stem: &str, f: impl FnOnce() -> T) -> T {
        self.publishing.lock().insert(stem.to_string());
        let out = f();
        self.publishing.lock().remove(stem);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct StartError(pub String);

struct ServiceTrainer {
    recordings: Arc<RecordingStore>,
    models: Arc<ModelCache>,
}

impl jobs::Trainer for ServiceTrainer {
    fn run(&self, spec: &JobSpec, on_epoch: &mut dyn FnMut(&EpochProgress) -> bool) -> Result<(String, TrainingReport), jobs::JobFailure> {
        let embeddings = spec
            .recordings
            .iter()
            .map(|id| self.recordings.embedding(id).map(|e| e.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let (head, report) = train_head_with(&embeddings, &spec.labels, &spec.model, &spec.config, on_epoch)?;
        let payload = save_model(&head);
        let manifest =
            ModelManifest::describe(&spec.name, TRAINED_VERSION, head_kind(&head), head.class_names().to_vec(), &payload, Utc::now());
        self.models.insert_local(&payload, &manifest).map_err(|e: ExchangeError| jobs::JobFailure { code: e.code().into(), message: e.to_string() })?;
        Ok((manifest.stem(), report))
    }
}

/// A server running on its own thread; dropping it shuts it down.
pub struct ServerHandle {
    addr: SocketAddr,
    app: Arc<App>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    /// Binds `config.bind:config.port` (port 0 picks a free one) and serves in the background.
    pub fn start(config: ServiceConfig) -> Result<ServerHandle, StartError> {
        let listener = std::net::TcpListener::bind((config.bind.as_str(), config.port))
            .map_err(|e| StartError(format!("cannot bind {}:{}: {e}", config.bind, config.port)))?;
        listener.set_nonblocking(true).map_err(|e| StartError(e.to_string()))?;
        let addr = listener.local_addr().map_err(|e| StartError(e.to_string()))?;
        let app = App::open(config)?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let router = router(app.clone());
        let thread = std::thread::Builder::new()
            .name("http".into())
            .spawn(move || {
                let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
                rt.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
                    let stop = async {
                        let _ = rx.await;
                    };
                    if let Err(e) = axum::serve(listener, router).with_graceful_shutdown(stop).await {
                        log::error!("server stopped: {e}");
                    }
                });
            })
            .map_err(|e| StartError(e.to_string()))?;
        Ok(ServerHandle { addr, app, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `http://host:port/api/v1`.
    pub fn base_url(&self) -> String {
        format!("http://{}/api/v1", self.addr)
    }

    pub fn app(&self) -> &Arc<App> {
        &self.app
    }

    /// Stops accepting requests and halts the workers. Jobs still running are
    /// left as they are on disk, exactly as after a crash.
    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        self.app.jobs.shutdown();
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves in the foreground until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), StartError> {
    let addr = format!("{}:{}", config.bind, config.port);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| StartError(format!("cannot bind {addr}: {e}")))?;
    let app = tokio::task::spawn_blocking(move || App::open(config)).await.map_err(|e| StartError(e.to_string()))??;
    log::info!("listening on http://{}/api/v1", listener.local_addr().map_err(|e| StartError(e.to_string()))?);
    let stop = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    let result = axum::serve(listener, router(app.clone())).with_graceful_shutdown(stop).await;
    tokio::task::spawn_blocking(move || app.jobs.shutdown()).await.map_err(|e| StartError(e.to_string()))?;
    result.map_err(|e| StartError(e.to_string()))
}
