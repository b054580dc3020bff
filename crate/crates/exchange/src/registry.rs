use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::cache::CachedModel;
use crate::manifest::{sha256_hex, validate_manifest, ModelManifest};
use crate::webdav::WebDavClient;
use crate::ExchangeError;

const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryState {
    RemoteOnly,
    Cached,
    LocalOnly,
    Publishing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub manifest: ModelManifest,
    /// Payload path on the server, when the model exists there.
    pub remote_path: Option<String>,
    pub local_path: Option<PathBuf>,
    pub state: EntryState,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemoteListing {
    pub entries: Vec<RegistryEntry>,
    /// Files that could not be paired with a valid manifest.
    pub warnings: Vec<String>,
}

impl RemoteListing {
    pub fn find(&self, name: &str, version: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.manifest.name == name && e.manifest.version == version)
    }
}

/// Lists the collection and pairs each payload with its sidecar manifest.
pub fn list_remote(client: &WebDavClient) -> Result<RemoteListing, ExchangeError> {
    let members = client.list()?;
    let files: BTreeMap<&str, &crate::DavEntry> = members.iter().filter(|m| !m.is_collection).map(|m| (m.name.as_str(), m)).collect();
    let mut out = RemoteListing::default();
    let mut paired = BTreeSet::new();
    for &file in files.keys().filter(|f| f.ends_with(MANIFEST_SUFFIX)) {
        let stem = &file[..file.len() - MANIFEST_SUFFIX.len()];
        let manifest = match client.get(file).and_then(|doc| validate_manifest(&doc)) {
            Ok(m) => m,
            Err(e) => {
                out.warnings.push(format!("{file}: {e}"));
                continue;
            }
        };
        if manifest.stem() != stem {
            out.warnings.push(format!("{file}: describes {} and is ignored", manifest.stem()));
            continue;
        }
        let payload = manifest.payload_file();
        let Some(p) = files.get(payload.as_str()) else {
            out.warnings.push(format!("{file}: payload {payload} is missing"));
            continue;
        };
        paired.insert(payload);
        out.entries.push(RegistryEntry { manifest, remote_path: Some(p.href.clone()), local_path: None, state: EntryState::RemoteOnly });
    }
    for file in files.keys().filter(|f| !f.ends_with(MANIFEST_SUFFIX) && !paired.contains(**f)) {
        out.warnings.push(format!("{file}: no manifest, skipped"));
    }
    Ok(out)
}

/// Uploads payload then manifest, so a listing never sees a manifest without its payload.
pub fn publish(client: &WebDavClient, payload: &[u8], manifest: &ModelManifest) -> Result<String, ExchangeError> {
    manifest.check()?;
    let actual = sha256_hex(payload);
    if actual != manifest.sha256 {
        return Err(ExchangeError::HashMismatch { expected: manifest.sha256.clone(), actual });
    }
    let members = client.list()?;
    let taken = |f: &str| members.iter().any(|m| m.name == f);
    if taken(&manifest.payload_file()) || taken(&manifest.manifest_file()) {
        return Err(ExchangeError::Conflict(manifest.stem()));
    }
    client.put(&manifest.payload_file(), payload.to_vec())?;
    client.put(&manifest.manifest_file(), manifest.to_json())?;
    Ok(client.url_for(&manifest.payload_file()).path().to_string())
}

/// Combines cache contents with an optional remote listing (absent when offline).
///
/// Locally trained models that also appear remotely, or that were downloaded, are
/// `cached`; `publishing` marks stems in `in_flight`.
pub fn merge_entries(local: &[CachedModel], remote: Option<&RemoteListing>, in_flight: &BTreeSet<String>) -> Vec<RegistryEntry> {
    let mut by_stem: BTreeMap<String, RegistryEntry> = BTreeMap::new();
    if let Some(r) = remote {
        for e in &r.entries {
            by_stem.insert(e.manifest.stem(), e.clone());
        }
    }
    for m in local {
        let stem = m.manifest.stem();
        let remote_entry = by_stem.remove(&stem);
        let on_remote = remote_entry.as_ref().is_some_and(|e| e.manifest.sha256 == m.manifest.sha256);
        let state = if on_remote || (remote.is_none() && m.from_remote) { EntryState::Cached } else { EntryState::LocalOnly };
        by_stem.insert(
            stem,
            RegistryEntry {
                manifest: m.manifest.clone(),
                remote_path: remote_entry.and_then(|e| e.remote_path),
                local_path: Some(m.payload_path.clone()),
                state,
            },
        );
    }
    for (stem, e) in by_stem.iter_mut() {
        if in_flight.contains(stem) {
            e.state = EntryState::Publishing;
        }
    }
    by_stem.into_values().collect()
}
