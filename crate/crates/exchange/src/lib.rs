//! Model exchange.
//!
//! Models travel as a payload file plus a JSON sidecar manifest
//! (`<name>@<version>.ecgx` next to `<name>@<version>.manifest.json`). Heads trained
//! locally use the native payload format in [`payload`]; externally produced ONNX
//! graphs are stored and listed but never executed.
//!
//! The remote side is any WebDav collection that answers depth-1 `PROPFIND`, `GET`
//! and `PUT`. [`ModelCache`] mirrors it on disk and keeps working offline.

mod cache;
mod error;
pub mod manifest;
pub mod payload;
mod registry;
#[cfg(feature = "test-server")]
pub mod test_server;
pub mod webdav;

pub use cache::{CachedModel, ModelCache, SyncFailure, SyncSummary};
pub use error::ExchangeError;
pub use manifest::{sha256_hex, validate_ident, validate_manifest, InputSpec, ModelKind, ModelManifest, MAX_OPSET};
pub use payload::{decode_head, head_kind, load_model, save_model};
pub use registry::{list_remote, merge_entries, publish, EntryState, RegistryEntry, RemoteListing};
pub use webdav::{DavConfig, DavEntry, WebDavClient};
