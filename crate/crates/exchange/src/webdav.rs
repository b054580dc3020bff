//! Minimal WebDav client: depth-1 `PROPFIND`, `GET` and `PUT` with Basic auth.

use std::time::Duration;

use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, CONTROLS};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::{Method, StatusCode, Url};
use serde::{Deserialize, Serialize};

use crate::ExchangeError;

/// Characters escaped inside one path segment.
pub(crate) const SEGMENT: &AsciiSet = &CONTROLS.add(b' ').add(b'"').add(b'#').add(b'%').add(b'/').add(b'<').add(b'>').add(b'?').add(b'`').add(b'{').add(b'}');

const PROPFIND_BODY: &str = r#"<?xml version="1.0" encoding="utf-8"?>
<d:propfind xmlns:d="DAV:"><d:prop><d:resourcetype/><d:getcontentlength/></d:prop></d:propfind>"#;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DavConfig {
    /// Collection URL; a trailing slash is added when missing.
    pub url: String,
    pub user: Option<String>,
    pub pass: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

impl DavConfig {
    pub fn new(url: &str) -> Self {
        DavConfig { url: url.into(), user: None, pass: None, timeout_secs: default_timeout() }
    }

    pub fn with_credentials(mut self, user: &str, pass: &str) -> Self {
        self.user = Some(user.into());
        self.pass = Some(pass.into());
        self
    }
}

/// One member of the listed collection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DavEntry {
    /// Decoded last path segment.
    pub name: String,
    /// Server path as returned in the listing.
    pub href: String,
    pub is_collection: bool,
    pub size: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct WebDavClient {
    base: Url,
    user: Option<String>,
    pass: Option<String>,
    http: Client,
}

impl WebDavClient {
    pub fn new(cfg: &DavConfig) -> Result<Self, ExchangeError> {
        let mut url = cfg.url.clone();
        if !url.ends_with('/') {
            url.push('/');
        }
        let base = Url::parse(&url).map_err(|e| ExchangeError::Unreachable(format!("bad registry url {url:?}: {e}")))?;
        let http = Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| ExchangeError::Unreachable(e.to_string()))?;
        Ok(WebDavClient { base, user: cfg.user.clone(), pass: cfg.pass.clone(), http })
    }

    pub fn base_url(&self) -> &Url {
        &self.base
    }

    /// URL of a member file.
    pub fn url_for(&self, name: &str) -> Url {
        let seg = utf8_percent_encode(name, SEGMENT).to_string();
        self.base.join(&seg).expect("encoded segment joins")
    }

    fn request(&self, method: Method, url: Url) -> RequestBuilder {
        let rb = self.http.request(method, url);
        match &self.user {
            Some(u) => rb.basic_auth(u, self.pass.as_deref()),
            None => rb,
        }
    }

    fn send(&self, rb: RequestBuilder) -> Result<Response, ExchangeError> {
        let resp = rb.send().map_err(|e| ExchangeError::Unreachable(e.to_string()))?;
        if resp.status() == StatusCode::UNAUTHORIZED {
            return Err(ExchangeError::AuthFailed);
        }
        Ok(resp)
    }

    /// Members of the collection, excluding the collection itself.
    pub fn list(&self) -> Result<Vec<DavEntry>, ExchangeError> {
        let method = Method::from_bytes(b"PROPFIND").expect("valid method");
        let resp = self.send(
            self.request(method, self.base.clone())
                .header("Depth", "1")
                .header("Content-Type", "application/xml; charset=utf-8")
                .body(PROPFIND_BODY),
        )?;
        match resp.status() {
            StatusCode::MULTI_STATUS => {}
            StatusCode::NOT_FOUND => return Err(ExchangeError::NotFound(self.base.to_string())),
            s => return Err(ExchangeError::ProtocolError(format!("PROPFIND answered {s}, expected 207"))),
        }
        let text = resp.text().map_err(|e| ExchangeError::Unreachable(e.to_string()))?;
        parse_multistatus(&text, self.base.path())
    }

    pub fn get(&self, name: &str) -> Result<Vec<u8>, ExchangeError> {
        let resp = self.send(self.request(Method::GET, self.url_for(name)))?;
        match resp.status() {
            StatusCode::OK => Ok(resp.bytes().map_err(|e| ExchangeError::Unreachable(e.to_string()))?.to_vec()),
            StatusCode::NOT_FOUND => Err(ExchangeError::NotFound(name.into())),
            s => Err(ExchangeError::ProtocolError(format!("GET {name} answered {s}"))),
        }
    }

    pub fn put(&self, name: &str, bytes: Vec<u8>) -> Result<(), ExchangeError> {
        let resp = self.send(self.request(Method::PUT, self.url_for(name)).body(bytes))?;
        match resp.status() {
            StatusCode::OK | StatusCode::CREATED | StatusCode::NO_CONTENT => Ok(()),
            StatusCode::CONFLICT | StatusCode::PRECONDITION_FAILED => Err(ExchangeError::Conflict(name.into())),
            s => Err(ExchangeError::ProtocolError(format!("PUT {name} answered {s}"))),
        }
    }
}

/// Reads a `207 Multi-Status` body. `collection_path` is skipped in the output.
pub fn parse_multistatus(xml: &str, collection_path: &str) -> Result<Vec<DavEntry>, ExchangeError> {
    let doc = roxmltree::Document::parse(xml).map_err(|e| ExchangeError::ProtocolError(format!("multistatus body: {e}")))?;
    let dav = |n: &roxmltree::Node, local: &str| n.is_element() && n.tag_name().name() == local && n.tag_name().namespace() == Some("DAV:");
    let own = decode(collection_path);
    let own = trim_slash(&own);
    let mut out = Vec::new();
    for resp in doc.descendants().filter(|n| dav(n, "response")) {
        let href = resp
            .children()
            .find(|n| dav(n, "href"))
            .and_then(|n| n.text())
            .ok_or_else(|| ExchangeError::ProtocolError("response without href".into()))?
            .trim()
            .to_string();
        // Servers may answer with absolute URLs.
        let path = Url::parse(&href).map(|u| u.path().to_string()).unwrap_or_else(|_| href.clone());
        let decoded = decode(&path);
        if trim_slash(&decoded) == own {
            continue;
        }
        let is_collection = resp.descendants().any(|n| dav(&n, "resourcetype") && n.children().any(|c| dav(&c, "collection")));
        let size = resp.descendants().find(|n| dav(n, "getcontentlength")).and_then(|n| n.text()).and_then(|t| t.trim().parse().ok());
        let name = trim_slash(&decoded).rsplit('/').next().unwrap_or_default().to_string();
        out.push(DavEntry { name, href, is_collection, size });
    }
    Ok(out)
}

fn decode(s: &str) -> String {
    percent_decode_str(s).decode_utf8_lossy().into_owned()
}

fn trim_slash(s: &str) -> &str {
    s.trim_end_matches('/')
}
