//! In-memory WebDav collection served on a loopback port, for tests.
//!
//! Serves one flat collection at `/models/` with depth-1 `PROPFIND`, `GET`, `PUT`
//! and `DELETE`, optionally behind Basic auth.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use base64::Engine;
use percent_encoding::{percent_decode_str, utf8_percent_encode};

use crate::webdav::SEGMENT;

const COLLECTION: &str = "/models/";

type Files = Arc<Mutex<BTreeMap<String, Vec<u8>>>>;

#[derive(Clone)]
struct Shared {
    files: Files,
    credentials: Option<(String, String)>,
    requests: Arc<AtomicUsize>,
}

pub struct TestDavServer {
    addr: SocketAddr,
    shared: Shared,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestDavServer {
    pub fn start() -> Self {
        Self::spawn(None)
    }

    pub fn with_credentials(user: &str, pass: &str) -> Self {
        Self::spawn(Some((user.into(), pass.into())))
    }

    fn spawn(credentials: Option<(String, String)>) -> Self {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        std_listener.set_nonblocking(true).expect("nonblocking socket");
        let addr = std_listener.local_addr().expect("bound address");
        let shared = Shared { files: Files::default(), credentials, requests: Arc::default() };
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = Router::new().fallback(handle).with_state(shared.clone());
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().expect("runtime");
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("tokio listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("test server runs");
            });
        });
        TestDavServer { addr, shared, shutdown: Some(tx), thread: Some(thread) }
    }

    /// Collection URL, with trailing slash.
    pub fn url(&self) -> String {
        format!("http://{}{COLLECTION}", self.addr)
    }

    pub fn file(&self, name: &str) -> Option<Vec<u8>> {
        self.shared.files.lock().unwrap().get(name).cloned()
    }

    pub fn put_file(&self, name: &str, bytes: Vec<u8>) {
        self.shared.files.lock().unwrap().insert(name.into(), bytes);
    }

    pub fn remove_file(&self, name: &str) -> Option<Vec<u8>> {
        self.shared.files.lock().unwrap().remove(name)
    }

    pub fn file_names(&self) -> Vec<String> {
        self.shared.files.lock().unwrap().keys().cloned().collect()
    }

    /// Flips one bit of a stored file.
    pub fn flip_bit(&self, name: &str, byte: usize) {
        let mut files = self.shared.files.lock().unwrap();
        let f = files.get_mut(name).expect("file exists");
        f[byte] ^= 1;
    }

    /// Requests received so far.
    pub fn request_count(&self) -> usize {
        self.shared.requests.load(Ordering::SeqCst)
    }

    /// Stops serving; later requests see a closed port.
    pub fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for TestDavServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn authorized(shared: &Shared, headers: &HeaderMap) -> bool {
    let Some((user, pass)) = &shared.credentials else { return true };
    let expected = base64::engine::general_purpose::STANDARD.encode(format!("{user}:{pass}"));
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Basic "))
        .is_some_and(|v| v.trim() == expected)
}

fn multistatus(files: &BTreeMap<String, Vec<u8>>, only: Option<&str>) -> String {
    let mut xml = String::from("<?xml version=\"1.0\" encoding=\"utf-8\"?>\n<D:multistatus xmlns:D=\"DAV:\">\n");
    if only.is_none() {
        xml.push_str(&format!(
            "<D:response><D:href>{COLLECTION}</D:href><D:propstat><D:prop><D:resourcetype><D:collection/></D:resourcetype></D:prop><D:status>HTTP/1.1 200 OK</D:status></D:propstat></D:response>\n"
        ));
    }
    for (name, bytes) in files.iter().filter(|(n, _)| only.is_none_or(|o| o == n.as_str())) {
        xml.push_str(&format!(
            "<D:response><D:href>{COLLECTION}{}</D:href><D:propstat><D:prop><D:resourcetype/><D:getcontentlength>{}</D:getcontentlength></D:prop><D:status>HTTP/1.1 200 OK</D:status></D:propstat></D:response>\n",
            utf8_percent_encode(name, SEGMENT),
            bytes.len()
        ));
    }
    xml.push_str("</D:multistatus>\n");
    xml
}

async fn handle(State(shared): State<Shared>, req: Request) -> Response {
    shared.requests.fetch_add(1, Ordering::SeqCst);
    if !authorized(&shared, req.headers()) {
        return (StatusCode::UNAUTHORIZED, [(header::WWW_AUTHENTICATE, "Basic realm=\"models\"")]).into_response();
    }
    let path = percent_decode_str(req.uri().path()).decode_utf8_lossy().into_owned();
    let member = match path.strip_prefix(COLLECTION) {
        Some("") => None,
        Some(rest) if !rest.contains('/') => Some(rest.to_string()),
        _ if path == COLLECTION.trim_end_matches('/') => None,
        _ => return StatusCode::NOT_FOUND.into_response(),
    };
    let method = req.method().clone();
    let xml = |body: String| (StatusCode::MULTI_STATUS, [(header::CONTENT_TYPE, "application/xml; charset=utf-8")], body).into_response();
    match (method.as_str(), member) {
        ("PROPFIND", None) => {
            if req.headers().get("Depth").and_then(|v| v.to_str().ok()) == Some("infinity") {
                return StatusCode::FORBIDDEN.into_response();
            }
            xml(multistatus(&shared.files.lock().unwrap(), None))
        }
        ("PROPFIND", Some(name)) => {
            let files = shared.files.lock().unwrap();
            if files.contains_key(&name) {
                xml(multistatus(&files, Some(&name)))
            } else {
                StatusCode::NOT_FOUND.into_response()
            }
        }
        (_, Some(name)) if method == Method::GET => match shared.files.lock().unwrap().get(&name) {
            Some(bytes) => (StatusCode::OK, Body::from(bytes.clone())).into_response(),
            None => StatusCode::NOT_FOUND.into_response(),
        },
        (_, Some(name)) if method == Method::PUT => {
            let Ok(bytes) = to_bytes(req.into_body(), usize::MAX).await else {
                return StatusCode::BAD_REQUEST.into_response();
            };
            let replaced = shared.files.lock().unwrap().insert(name, bytes.to_vec()).is_some();
            if replaced {
                StatusCode::NO_CONTENT.into_response()
            } else {
                StatusCode::CREATED.into_response()
            }
        }
        (_, Some(name)) if method == Method::DELETE => match shared.files.lock().unwrap().remove(&name) {
            Some(_) => StatusCode::NO_CONTENT.into_response(),
            None => StatusCode::NOT_FOUND.into_response(),
        },
        _ => StatusCode::METHOD_NOT_ALLOWED.into_response(),
    }
}
