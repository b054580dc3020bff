//! Recordings on disk: `recordings/<id>.npy` holds the normalized 12 × 1000 signal,
//! `recordings/<id>.json` its metadata. Derived views and embeddings are cached in
//! memory and dropped when the recording is deleted.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use ecgx_core::analysis::{detect_rpeaks, extract_qrs_windows, median_beat, rlign_transform, BeatWindow, RlignOptions};
use ecgx_core::finetune::embed;
use ecgx_core::formats::{self, encode_npy, export, parse_npy, ExportFormat, ExportView, ParseOptions};
use ecgx_core::signal::{normalize, NormalizationOptions, SourceFormat, StandardEcg};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{ApiError, ErrorCode};
use crate::write_atomic;

/// Width of the windows returned by the `qrs` view.
pub const QRS_WINDOW_MS: f64 = 200.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub id: String,
    pub filename: String,
    pub format: SourceFormat,
    pub warnings: Vec<String>,
    #[serde(default)]
    pub labels: Vec<String>,
    pub source_rate_hz: f64,
    pub source_leads: usize,
    pub created_at: DateTime<Utc>,
}

/// One uploaded file plus the optional companions of a multi-file format.
#[derive(Debug, Clone, Default)]
pub struct Upload {
    pub filename: String,
    pub bytes: Vec<u8>,
    /// WFDB signal file accompanying a `.hea` header.
    pub signal: Option<Vec<u8>>,
    pub format_hint: Option<String>,
    pub rate_hz: Option<f64>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Raw,
    Qrs,
    Median,
    Aligned,
    Fiducials,
}

impl View {
    pub const ALL: [View; 5] = [View::Raw, View::Qrs, View::Median, View::Aligned, View::Fiducials];

    pub fn name(self) -> &'static str {
        match self {
            View::Raw => "raw",
            View::Qrs => "qrs",
            View::Median => "median",
            View::Aligned => "aligned",
            View::Fiducials => "fiducials",
        }
    }

    pub fn from_name(s: &str) -> Option<View> {
        View::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Rendered JSON bodies keyed by recording and view.
type ViewCache = HashMap<(String, View), Arc<Vec<u8>>>;

pub struct RecordingStore {
    dir: PathBuf,
    index: RwLock<BTreeMap<String, RecordingMeta>>,
    ecgs: Mutex<HashMap<String, Arc<StandardEcg>>>,
    views: Mutex<ViewCache>,
    embeddings: Mutex<HashMap<String, Arc<Vec<f64>>>>,
}

impl RecordingStore {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut index = BTreeMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let meta: RecordingMeta = match std::fs::read(&path).map_err(|e| e.to_string()).and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string())) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("skipping recording metadata {}: {e}", path.display());
                    continue;
                }
            };
            if dir.join(format!("{}.npy", meta.id)).is_file() {
                index.insert(meta.id.clone(), meta);
            } else {
                log::warn!("recording {} has no signal file, skipped", meta.id);
            }
        }
        Ok(RecordingStore { dir, index: RwLock::new(index), ecgs: Mutex::default(), views: Mutex::default(), embeddings: Mutex::default() })
    }

    fn signal_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.npy"))
    }

    fn meta_path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Detect, parse, normalize and persist. Identical uploads get distinct ids.
    pub fn ingest(&self, up: Upload) -> Result<RecordingMeta, ApiError> {
        let parse_err = |e: formats::FormatError| ApiError::new(ErrorCode::ParseFailed, e.to_string()).caused_by(e.code());
        let format = match up.format_hint.as_deref().filter(|h| !h.is_empty()) {
            Some(h) => SourceFormat::from_name(h)
                .ok_or_else(|| ApiError::new(ErrorCode::InvalidRequest, format!("unknown format hint {h:?}")))?,
            None => formats::detect_format(&up.bytes, &up.filename).map_err(parse_err)?.format,
        };
        let opts = ParseOptions { sampling_rate_hz: up.rate_hz };
        let raw = if format == SourceFormat::Wfdb {
            let dat = up.signal.as_deref().ok_or_else(|| {
                ApiError::new(ErrorCode::InvalidRequest, "WFDB uploads need the header as `file` and the signal as `signal`")
            })?;
            formats::parse_wfdb(&up.bytes, dat).map_err(parse_err)?
        } else {
            formats::parse_bytes(format, &up.bytes, &opts).map_err(parse_err)?
        };
        let ecg = normalize(&raw, &NormalizationOptions::default())
            .map_err(|e| ApiError::new(ErrorCode::NormalizeFailed, e.to_string()).caused_by(e.code()))?;
        let labels: Vec<String> = up.labels.iter().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
        let meta = RecordingMeta {
            id: uuid::Uuid::new_v4().to_string(),
            filename: up.filename,
            format,
            warnings: formats::warnings(&raw),
            labels,
            source_rate_hz: raw.sampling_rate_hz,
            source_leads: raw.n_leads(),
            created_at: Utc::now(),
        };
        write_atomic(&self.signal_path(&meta.id), &encode_npy(ecg.samples())).map_err(ApiError::internal)?;
        let doc = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
        write_atomic(&self.meta_path(&meta.id), &doc).map_err(ApiError::internal)?;
        self.ecgs.lock().insert(meta.id.clone(), Arc::new(ecg));
        self.index.write().insert(meta.id.clone(), meta.clone());
        Ok(meta)
    }

    pub fn list(&self) -> Vec<RecordingMeta> {
        let mut all: Vec<_> = self.index.read().values().cloned().collect();
        all.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        all
    }

    pub fn get(&self, id: &str) -> Result<RecordingMeta, ApiError> {
        self.index.read().get(id).cloned().ok_or_else(|| ApiError::not_found(format!("recording {id}")))
    }

    pub fn len(&self) -> usize {
        self.index.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn delete(&self, id: &str) -> Result<(), ApiError> {
        if self.index.write().remove(id).is_none() {
            return Err(ApiError::not_found(format!("recording {id}")));
        }
        self.ecgs.lock().remove(id);
        self.embeddings.lock().remove(id);
        self.views.lock().retain(|(rid, _), _| rid != id);
        for p in [self.meta_path(id), self.signal_path(id)] {
            if let Err(e) = std::fs::remove_file(&p) {
                log::warn!("cannot remove {}: {e}", p.display());
            }
        }
        Ok(())
    }

    pub fn ecg(&self, id: &str) -> Result<Arc<StandardEcg>, ApiError> {
        self.get(id)?;
        if let Some(e) = self.ecgs.lock().get(id) {
            return Ok(e.clone());
        }
        let ecg = Arc::new(load_signal(&self.signal_path(id))?);
        self.ecgs.lock().insert(id.to_string(), ecg.clone());
        Ok(ecg)
    }

    /// JSON body of one view, computed once per recording.
    pub fn view(&self, id: &str, view: View) -> Result<Arc<Vec<u8>>, ApiError> {
        let key = (id.to_string(), view);
        if let Some(v) = self.views.lock().get(&key) {
            return Ok(v.clone());
        }
        let ecg = self.ecg(id)?;
        let body = Arc::new(compute_view(&ecg, view)?);
        // A concurrent delete may have happened meanwhile; do not resurrect its entry.
        if self.index.read().contains_key(id) {
            self.views.lock().insert(key, body.clone());
        }
        Ok(body)
    }

    pub fn embedding(&self, id: &str) -> Result<Arc<Vec<f64>>, ApiError> {
        if let Some(e) = self.embeddings.lock().get(id) {
            return Ok(e.clone());
        }
        let ecg = self.ecg(id)?;
        let e = Arc::new(embed(&ecg).map_err(|e| {
            ApiError::new(ErrorCode::AnalysisFailed, format!("recording {id}: {e}")).caused_by(e.code())
        })?);
        self.embeddings.lock().insert(id.to_string(), e.clone());
        Ok(e)
    }
}

fn load_signal(path: &Path) -> Result<StandardEcg, ApiError> {
    let bytes = std::fs::read(path).map_err(ApiError::internal)?;
    let opts = ParseOptions { sampling_rate_hz: Some(StandardEcg::RATE_HZ) };
    let rec = parse_npy(&bytes, &opts).map_err(ApiError::internal)?;
    StandardEcg::new(rec.samples, StandardEcg::RATE_HZ).map_err(ApiError::internal)
}

fn compute_view(ecg: &StandardEcg, view: View) -> Result<Vec<u8>, ApiError> {
    let analysis = |e: ecgx_core::AnalysisError| ApiError::new(ErrorCode::AnalysisFailed, e.to_string()).caused_by(e.code());
    let json = |v: ExportView<'_>| export(&v, ExportFormat::Json).map_err(ApiError::internal);
    if view == View::Raw {
        return json(ExportView::Standard(ecg));
    }
    let fid = detect_rpeaks(ecg).map_err(analysis)?;
    match view {
        View::Raw => unreachable!("handled above"),
        View::Fiducials => json(ExportView::Fiducials(&fid)),
        View::Median => json(ExportView::MedianBeats(&median_beat(ecg, &fid, &BeatWindow::default()).map_err(analysis)?)),
        View::Aligned => json(ExportView::Aligned(&rlign_transform(ecg, &fid, &RlignOptions::default()).map_err(analysis)?)),
        View::Qrs => {
            let windows: Vec<Vec<Vec<f64>>> = extract_qrs_windows(ecg, &fid, QRS_WINDOW_MS)
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect();
            let doc = json!({
                "view": "qrs",
                "rate_hz": ecg.rate_hz(),
                "window_ms": QRS_WINDOW_MS,
                "r_peaks": fid.r_peaks,
                "windows": windows,
            });
            Ok(serde_json::to_vec(&doc).expect("finite windows serialize"))
        }
    }
}
