use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use ecgx_core::finetune::Head;
use serde::{Deserialize, Serialize};

use crate::manifest::{sha256_hex, validate_manifest, ModelManifest};
use crate::payload::load_model;
use crate::registry::{list_remote, publish, RemoteListing};
use crate::webdav::WebDavClient;
use crate::ExchangeError;

const REMOTE_DIR: &str = "remote";
const LOCAL_DIR: &str = "local";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedModel {
    pub manifest: ModelManifest,
    pub payload_path: PathBuf,
    /// Downloaded by `sync` rather than produced on this machine.
    pub from_remote: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncFailure {
    pub model: String,
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncSummary {
    pub downloaded: Vec<String>,
    pub unchanged: Vec<String>,
    pub failed: Vec<SyncFailure>,
    pub warnings: Vec<String>,
}

/// On-disk model store: `remote/` mirrors the registry, `local/` holds models
/// produced here. Files are written through a temp file and renamed into place,
/// payload before manifest, and never deleted.
#[derive(Debug)]
pub struct ModelCache {
    root: PathBuf,
    writer: Mutex<()>,
}

impl ModelCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ExchangeError> {
        let root = root.into();
        fs::create_dir_all(root.join(REMOTE_DIR))?;
        fs::create_dir_all(root.join(LOCAL_DIR))?;
        Ok(ModelCache { root, writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Every model with a valid manifest and a payload file, one per stem
    /// (a downloaded copy wins over a local one), sorted by stem.
    pub fn models(&self) -> Result<Vec<CachedModel>, ExchangeError> {
        let mut out: std::collections::BTreeMap<String, CachedModel> = Default::default();
        for (dir, from_remote) in [(LOCAL_DIR, false), (REMOTE_DIR, true)] {
            for m in scan(&self.root.join(dir), from_remote)? {
                out.insert(m.manifest.stem(), m);
            }
        }
        Ok(out.into_values().collect())
    }

    /// `name@version`, or `name` for its most recent version.
    pub fn find(&self, selector: &str) -> Result<CachedModel, ExchangeError> {
        let models = self.models()?;
        let hit = match selector.split_once('@') {
            Some(_) => models.into_iter().find(|m| m.manifest.stem() == selector),
            None => models
                .into_iter()
                .filter(|m| m.manifest.name == selector)
                .max_by(|a, b| (a.manifest.created_at, &a.manifest.version).cmp(&(b.manifest.created_at, &b.manifest.version))),
        };
        hit.ok_or_else(|| ExchangeError::NotFound(format!("model {selector}")))
    }

    /// Payload bytes, verified against the manifest hash.
    pub fn read_payload(&self, model: &CachedModel) -> Result<Vec<u8>, ExchangeError> {
        let bytes = fs::read(&model.payload_path)?;
        let actual = sha256_hex(&bytes);
        if actual != model.manifest.sha256 {
            return Err(ExchangeError::HashMismatch { expected: model.manifest.sha256.clone(), actual });
        }
        Ok(bytes)
    }

    pub fn load_head(&self, selector: &str) -> Result<(ModelManifest, Head), ExchangeError> {
        let m = self.find(selector)?;
        if !m.manifest.kind.is_native() {
            return Err(ExchangeError::NotExecutable(m.manifest.kind.name().into()));
        }
        let head = load_model(&self.read_payload(&m)?, &m.manifest)?;
        Ok((m.manifest, head))
    }

    /// Stores a model produced on this machine.
    pub fn insert_local(&self, payload: &[u8], manifest: &ModelManifest) -> Result<CachedModel, ExchangeError> {
        manifest.check()?;
        let actual = sha256_hex(payload);
        if actual != manifest.sha256 {
            return Err(ExchangeError::HashMismatch { expected: manifest.sha256.clone(), actual });
        }
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        if self.models()?.iter().any(|m| m.manifest.stem() == manifest.stem()) {
            return Err(ExchangeError::Conflict(manifest.stem()));
        }
        self.write_pair(LOCAL_DIR, payload, manifest, false)
    }

    /// Downloads every remote model that is missing here or whose cached copy no
    /// longer matches. A download whose hash disagrees with its manifest is dropped
    /// and reported; the cached copy stays as it was.
    pub fn sync(&self, client: &WebDavClient) -> Result<SyncSummary, ExchangeError> {
        let listing = list_remote(client)?;
        self.sync_listing(client, &listing)
    }

    pub fn sync_listing(&self, client: &WebDavClient, listing: &RemoteListing) -> Result<SyncSummary, ExchangeError> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut summary = SyncSummary { warnings: listing.warnings.clone(), ..Default::default() };
        let local = self.models()?;
        for entry in &listing.entries {
            let m = &entry.manifest;
            let stem = m.stem();
            let current = local.iter().find(|c| c.manifest == *m).is_some_and(|c| self.read_payload(c).is_ok());
            if current {
                summary.unchanged.push(stem);
                continue;
            }
            let fetched = client.get(&m.payload_file()).and_then(|bytes| {
                let actual = sha256_hex(&bytes);
                if actual == m.sha256 {
                    Ok(bytes)
                } else {
                    Err(ExchangeError::HashMismatch { expected: m.sha256.clone(), actual })
                }
            });
            match fetched.and_then(|bytes| self.write_pair(REMOTE_DIR, &bytes, m, true)) {
                Ok(_) => summary.downloaded.push(stem),
                Err(e @ ExchangeError::Unreachable(_)) | Err(e @ ExchangeError::AuthFailed) => return Err(e),
                Err(e) => {
                    log::warn!("sync {stem}: {e}");
                    summary.failed.push(SyncFailure { model: stem, code: e.code().into(), message: e.to_string() });
                }
            }
        }
        Ok(summary)
    }

    /// Publishes a cached model to the registry.
    pub fn publish(&self, client: &WebDavClient, selector: &str) -> Result<String, ExchangeError> {
        let m = self.find(selector)?;
        let bytes = self.read_payload(&m)?;
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        publish(client, &bytes, &m.manifest)
    }

    fn write_pair(&self, dir: &str, payload: &[u8], m: &ModelManifest, from_remote: bool) -> Result<CachedModel, ExchangeError> {
        let dir = self.root.join(dir);
        let payload_path = dir.join(m.payload_file());
        write_atomic(&dir, &payload_path, payload)?;
        write_atomic(&dir, &dir.join(m.manifest_file()), &m.to_json())?;
        Ok(CachedModel { manifest: m.clone(), payload_path, from_remote })
    }
}

fn write_atomic(dir: &Path, path: &Path, bytes: &[u8]) -> Result<(), ExchangeError> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| ExchangeError::Io(e.to_string()))?;
    Ok(())
}

fn scan(dir: &Path, from_remote: bool) -> Result<Vec<CachedModel>, ExchangeError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.ends_with(".manifest.json") {
            continue;
        }
        let manifest = match fs::read(&path).map_err(ExchangeError::from).and_then(|d| validate_manifest(&d)) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("ignoring {}: {e}", path.display());
                continue;
            }
        };
        let payload_path = dir.join(manifest.payload_file());
        if manifest.manifest_file() == name && payload_path.is_file() {
            out.push(CachedModel { manifest, payload_path, from_remote });
        }
    }
    Ok(out)
}
