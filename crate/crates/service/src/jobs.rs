//! Fine-tune jobs: a persisted state machine fed to a bounded FIFO worker pool.
//!
//! Reads take an `Arc` snapshot of the record; all writes go through one mutex so the
//! on-disk log and the in-memory map change together. Cancellation is a flag the
//! training loop checks after every epoch.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar};
use std::thread::JoinHandle;

use chrono::{DateTime, Utc};
use ecgx_core::finetune::{EpochProgress, FineTuneConfig, FineTuneError};
use ecgx_core::TrainingReport;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ErrorCode};
use crate::write_atomic;

/// Error code stored on jobs that were queued or running when the service stopped.
pub const RESTART_CODE: &str = "interrupted_by_restart";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Succeeded | JobState::Failed | JobState::Cancelled)
    }

    /// The declared order: queued → running → {succeeded | failed | cancelled}, with
    /// a queued job allowed to be cancelled before it runs.
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!((self, next), (Queued, Running) | (Queued, Cancelled) | (Running, Succeeded) | (Running, Failed) | (Running, Cancelled))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub max_epochs: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFailure {
    pub code: String,
    pub message: String,
}

/// What a job trains on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Base model whose encoder produces the embeddings.
    pub model: String,
    /// Name of the trained model in the local registry.
    pub name: String,
    pub recordings: Vec<String>,
    pub labels: Vec<Vec<String>>,
    pub config: FineTuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    /// Submission order; the queue is FIFO on this.
    pub seq: u64,
    pub state: JobState,
    pub spec: JobSpec,
    pub progress: Progress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<TrainingReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<JobFailure>,
    /// `name@version` of the stored model once succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_stem: Option<String>,
    #[serde(default)]
    pub interrupted_by_restart: bool,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

/// Work a job needs done; implemented by the service over its recording store and model cache.
pub trait Trainer: Send + Sync + 'static {
    /// Trains and stores the model, returning its stem with the report.
    fn run(&self, spec: &JobSpec, on_epoch: &mut dyn FnMut(&EpochProgress) -> bool) -> Result<(String, TrainingReport), JobFailure>;
}

impl From<FineTuneError> for JobFailure {
    fn from(e: FineTuneError) -> Self {
        JobFailure { code: e.code().into(), message: e.to_string() }
    }
}

impl From<ApiError> for JobFailure {
    fn from(e: ApiError) -> Self {
        JobFailure { code: e.cause.clone().unwrap_or_else(|| e.code.as_str().into()), message: e.message }
    }
}

struct Queue {
    ids: VecDeque<String>,
    stopping: bool,
}

struct Shared {
    dir: PathBuf,
    jobs: RwLock<BTreeMap<String, Arc<JobRecord>>>,
    writer: Mutex<()>,
    cancel: Mutex<HashMap<String, Arc<AtomicBool>>>,
    queue: std::sync::Mutex<Queue>,
    wake: Condvar,
    /// Set on shutdown: running jobs stop without persisting, as after a crash.
    halted: AtomicBool,
    next_seq: AtomicU64,
    trainer: Arc<dyn Trainer>,
}

pub struct JobManager {
    shared: Arc<Shared>,
    workers: Mutex<Vec<JoinHandle<()>>>,
}

impl JobManager {
    /// Loads `dir`, fails every job left queued or running, and starts `workers` threads.
    pub fn open(dir: impl Into<PathBuf>, workers: usize, trainer: Arc<dyn Trainer>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut jobs = BTreeMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            match std::fs::read(&path).map_err(|e| e.to_string()).and_then(|b| serde_json::from_slice::<JobRecord>(&b).map_err(|e| e.to_string())) {
                Ok(j) => {
                    jobs.insert(j.id.clone(), j);
                }
                Err(e) => log::warn!("skipping job record {}: {e}", path.display()),
            }
        }
        let next_seq = jobs.values().map(|j| j.seq + 1).max().unwrap_or(0);
        for j in jobs.values_mut().filter(|j| !j.state.is_terminal()) {
            j.state = JobState::Failed;
            j.interrupted_by_restart = true;
            j.error = Some(JobFailure { code: RESTART_CODE.into(), message: "the service restarted before this job finished".into() });
            j.updated_at = Utc::now();
            write_atomic(&dir.join(format!("{}.json", j.id)), &serde_json::to_vec_pretty(j).expect("job serializes"))?;
        }
        let shared = Arc::new(Shared {
            dir,
            jobs: RwLock::new(jobs.into_iter().map(|(k, v)| (k, Arc::new(v))).collect()),
            writer: Mutex::new(()),
            cancel: Mutex::default(),
            queue: std::sync::Mutex::new(Queue { ids: VecDeque::new(), stopping: false }),
            wake: Condvar::new(),
            halted: AtomicBool::new(false),
            next_seq: AtomicU64::new(next_seq),
            trainer,
        });
        let handles = (0..workers.max(1))
            .map(|i| {
                let s = shared.clone();
                std::thread::Builder::new().name(format!("finetune-{i}")).spawn(move || worker(&s)).expect("spawn worker")
            })
            .collect();
        Ok(JobManager { shared, workers: Mutex::new(handles) })
    }

    pub fn submit(&self, spec: JobSpec) -> Result<Arc<JobRecord>, ApiError> {
        let now = Utc::now();
        let record = JobRecord {
            id: uuid::Uuid::new_v4().to_string(),
            seq: self.shared.next_seq.fetch_add(1, Ordering::SeqCst),
            state: JobState::Queued,
            progress: Progress { max_epochs: spec.config.max_epochs, ..Progress::default() },
            spec,
            report: None,
            error: None,
            model_stem: None,
            interrupted_by_restart: false,
            created_at: now,
            updated_at: now,
        };
        let id = record.id.clone();
        self.shared.cancel.lock().insert(id.clone(), Arc::default());
        let snapshot = self.shared.put(record).map_err(ApiError::internal)?;
        let mut q = self.shared.queue.lock().unwrap();
        q.ids.push_back(id);
        drop(q);
        self.shared.wake.notify_one();
        Ok(snapshot)
    }

    pub fn get(&self, id: &str) -> Option<Arc<JobRecord>> {
        self.shared.jobs.read().get(id).cloned()
    }

    /// All jobs in submission order.
    pub fn list(&self) -> Vec<Arc<JobRecord>> {
        let mut all: Vec<_> = self.shared.jobs.read().values().cloned().collect();
        all.sort_by_key(|j| j.seq);
        all
    }

    /// Whether a non-failed job already claims `name` for its model.
    pub fn name_taken(&self, name: &str) -> bool {
        self.shared
            .jobs
            .read()
            .values()
            .any(|j| j.spec.name == name && matches!(j.state, JobState::Queued | JobState::Running | JobState::Succeeded))
    }

    /// Queued jobs are cancelled at once; running ones stop after their current epoch.
    pub fn cancel(&self, id: &str) -> Result<Arc<JobRecord>, ApiError> {
        let job = self.get(id).ok_or_else(|| ApiError::not_found(format!("job {id}")))?;
        if job.state.is_terminal() {
            return Err(ApiError::new(ErrorCode::InvalidState, format!("job {id} is already {:?}", job.state).to_lowercase()));
        }
        if let Some(flag) = self.shared.cancel.lock().get(id) {
            flag.store(true, Ordering::SeqCst);
        }
        // Try the queued → cancelled edge directly; a worker may have claimed it meanwhile.
        let _ = self.shared.transition(id, JobState::Queued, JobState::Cancelled, |_| {});
        Ok(self.get(id).expect("job exists"))
    }

    pub fn counts(&self) -> BTreeMap<JobState, usize> {
        let mut out = BTreeMap::new();
        for j in self.shared.jobs.read().values() {
            *out.entry(j.state).or_default() += 1;
        }
        out
    }

    /// Stops the workers. Running jobs are abandoned without writing their final
    /// state, so the next start marks them as interrupted.
    pub fn shutdown(&self) {
        self.shared.halted.store(true, Ordering::SeqCst);
        self.shared.queue.lock().unwrap().stopping = true;
        self.shared.wake.notify_all();
        for h in self.workers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for JobManager {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Shared {
    fn persist(&self, j: &JobRecord) -> std::io::Result<()> {
        write_atomic(&self.dir.join(format!("{}.json", j.id)), &serde_json::to_vec_pretty(j).expect("job serializes"))
    }

    fn put(&self, j: JobRecord) -> std::io::Result<Arc<JobRecord>> {
        let _w = self.writer.lock();
        self.persist(&j)?;
        let snap = Arc::new(j);
        self.jobs.write().insert(snap.id.clone(), snap.clone());
        Ok(snap)
    }

    /// Applies `edit` and moves `from` → `to`; refuses when the job is not in `from`.
    fn transition(&self, id: &str, from: JobState, to: JobState, edit: impl FnOnce(&mut JobRecord)) -> Result<(), JobState> {
        debug_assert!(from.can_become(to));
        let _w = self.writer.lock();
        let current = self.jobs.read().get(id).cloned().expect("job exists");
        if current.state != from {
            return Err(current.state);
        }
        let mut next = (*current).clone();
        edit(&mut next);
        next.state = to;
        next.updated_at = Utc::now();
        if let Err(e) = self.persist(&next) {
            log::error!("cannot persist job {id}: {e}");
        }
        self.jobs.write().insert(id.to_string(), Arc::new(next));
        if to.is_terminal() {
            self.cancel.lock().remove(id);
        }
        Ok(())
    }

    /// Progress is kept in memory only; epochs only move forward.
    fn progress(&self, id: &str, p: &EpochProgress) {
        let _w = self.writer.lock();
        let Some(current) = self.jobs.read().get(id).cloned() else { return };
        if current.state != JobState::Running || p.epochs_done < current.progress.epoch {
            return;
        }
        let mut next = (*current).clone();
        next.progress = Progress { epoch: p.epochs_done, max_epochs: p.max_epochs, train_loss: Some(p.train_loss), val_loss: Some(p.val_loss) };
        next.updated_at = Utc::now();
        self.jobs.write().insert(id.to_string(), Arc::new(next));
    }
}

fn worker(s: &Shared) {
    loop {
        let id = {
            let mut q = s.queue.lock().unwrap();
            loop {
                if q.stopping {
                    return;
                }
                if let Some(id) = q.ids.pop_front() {
                    break id;
                }
                q = s.wake.wait(q).unwrap();
            }
        };
        if s.transition(&id, JobState::Queued, JobState::Running, |_| {}).is_err() {
            continue; // cancelled while queued
        }
        let flag = s.cancel.lock().get(&id).cloned().unwrap_or_default();
        let spec = s.jobs.read().get(&id).expect("job exists").spec.clone();
        let result = s.trainer.run(&spec, &mut |p| {
            s.progress(&id, p);
            !flag.load(Ordering::SeqCst) && !s.halted.load(Ordering::SeqCst)
        });
        if s.halted.load(Ordering::SeqCst) {
            return;
        }
        let outcome = match result {
            Ok((stem, report)) => s.transition(&id, JobState::Running, JobState::Succeeded, |j| {
                j.model_stem = Some(stem);
                j.report = Some(report);
            }),
            Err(f) if f.code == FineTuneError::Cancelled.code() => s.transition(&id, JobState::Running, JobState::Cancelled, |_| {}),
            Err(f) => s.transition(&id, JobState::Running, JobState::Failed, |j| j.error = Some(f)),
        };
        if let Err(state) = outcome {
            log::error!("job {id} left running in unexpected state {state:?}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use JobState::*;

    #[test]
    fn only_declared_transitions() {
        let all = [Queued, Running, Succeeded, Failed, Cancelled];
        let allowed: Vec<_> = all.iter().flat_map(|&a| all.iter().map(move |&b| (a, b))).filter(|(a, b)| a.can_become(*b)).collect();
        assert_eq!(allowed, [(Queued, Running), (Queued, Cancelled), (Running, Succeeded), (Running, Failed), (Running, Cancelled)]);
        assert!(all.iter().filter(|s| s.is_terminal()).all(|s| all.iter().all(|n| !s.can_become(*n))));
    }

    struct Sleepy;

    impl Trainer for Sleepy {
        fn run(&self, spec: &JobSpec, on_epoch: &mut dyn FnMut(&EpochProgress) -> bool) -> Result<(String, TrainingReport), JobFailure> {
            for e in 1..=spec.config.max_epochs {
                std::thread::sleep(std::time::Duration::from_millis(2));
                if !on_epoch(&EpochProgress { epochs_done: e, max_epochs: spec.config.max_epochs, train_loss: 1.0, val_loss: 1.0 }) {
                    return Err(FineTuneError::Cancelled.into());
                }
            }
            Err(JobFailure { code: "test".into(), message: "no report in this test".into() })
        }
    }

    fn spec(epochs: usize) -> JobSpec {
        JobSpec {
            model: "base".into(),
            name: "m".into(),
            recordings: vec![],
            labels: vec![],
            config: FineTuneConfig { max_epochs: epochs, ..Default::default() },
        }
    }

    fn wait_terminal(m: &JobManager, id: &str) -> Arc<JobRecord> {
        for _ in 0..2000 {
            let j = m.get(id).unwrap();
            if j.state.is_terminal() {
                return j;
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        panic!("job {id} did not finish");
    }

    #[test]
    fn fifo_cancel_and_restart_marker() {
        let dir = std::env::temp_dir().join(format!("ecgx-jobs-{}", uuid::Uuid::new_v4()));
        let m = JobManager::open(&dir, 1, Arc::new(Sleepy)).unwrap();
        let long = m.submit(spec(100_000)).unwrap();
        let queued = m.submit(spec(1)).unwrap();
        assert_eq!(m.cancel(&queued.id).unwrap().state, Cancelled);
        while m.get(&long.id).unwrap().progress.epoch == 0 {
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
        let failing = m.submit(spec(3)).unwrap();
        let waiting = m.submit(spec(100_000)).unwrap();
        m.cancel(&long.id).unwrap();
        assert_eq!(wait_terminal(&m, &long.id).state, Cancelled);
        let f = wait_terminal(&m, &failing.id);
        assert_eq!((f.state, f.progress.epoch), (Failed, 3));
        assert_eq!(f.error.as_ref().unwrap().code, "test");
        assert!(m.cancel(&failing.id).is_err_and(|e| e.code == ErrorCode::InvalidState));
        assert_eq!(m.get(&queued.id).unwrap().progress.epoch, 0);
        while m.get(&waiting.id).unwrap().state != Running {
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
        let pending = m.submit(spec(1)).unwrap();
        m.shutdown();
        drop(m);

        let again = JobManager::open(&dir, 1, Arc::new(Sleepy)).unwrap();
        for id in [&waiting.id, &pending.id] {
            let j = again.get(id).unwrap();
            assert_eq!(j.state, Failed);
            assert!(j.interrupted_by_restart);
            assert_eq!(j.error.as_ref().unwrap().code, RESTART_CODE);
        }
        assert_eq!(again.get(&long.id).unwrap().state, Cancelled);
        let next = again.submit(spec(1)).unwrap();
        assert!(next.seq > pending.seq);
        drop(again);
        std::fs::remove_dir_all(dir).unwrap();
    }
}
