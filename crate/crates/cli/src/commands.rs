use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use ecgx_core::analysis::{detect_rpeaks, extract_qrs_windows, median_beat, rlign_transform, BeatWindow, RlignOptions};
use ecgx_core::finetune::{embed, predict, train_head, FineTuneConfig, HeadKind};
use ecgx_core::formats::{self, export, ExportFormat, ExportView, FormatError, ParseOptions};
use ecgx_core::metrics::{aggregate, evaluate_dataset, f1_scores, LabelMapSet};
use ecgx_core::signal::{normalize, NormalizationOptions, SourceFormat};
use ecgx_core::{RawRecording, StandardEcg};
use ecgx_exchange::{
    head_kind, list_remote, load_model, merge_entries, save_model, validate_ident, validate_manifest, DavConfig, ExchangeError, ModelCache,
    ModelManifest, WebDavClient,
};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{AnalysisView, AnalyzeArgs, Cli, Command, ConvertArgs, EvalArgs, FinetuneArgs, HeadArg, InputArgs, OutFormat, PredictArgs, ServeArgs, SyncArgs};

/// Version given to models trained from the command line.
const TRAINED_VERSION: &str = "1";
const QRS_WINDOW_MS: f64 = 200.0;

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
    usage: bool,
}

impl CliError {
    fn usage(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), message: message.into(), usage: true }
    }

    fn op(code: &str, message: impl std::fmt::Display) -> Self {
        CliError { code: code.into(), message: message.to_string(), usage: false }
    }

    pub fn exit_code(&self) -> u8 {
        if self.usage {
            1
        } else {
            2
        }
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::op(e.code(), &e)
            }
        }
    )*};
}

coded!(
    FormatError,
    ecgx_core::SignalError,
    ecgx_core::AnalysisError,
    ecgx_core::FineTuneError,
    ecgx_core::MetricsError,
    ExchangeError
);

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::op("io_error", format!("{}: {e}", path.display()))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| io_error(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn print_json(v: &impl serde::Serialize) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v).map_err(|e| CliError::op("io_error", e))?;
    writeln!(out).map_err(|e| CliError::op("io_error", e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Convert(a) => convert(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Finetune(a) => finetune(&a, cli.seed),
        Command::Predict(a) => predict_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Sync(a) => sync(&a),
        Command::Serve(a) => serve(&a),
    }
}

/// Where a recording comes from and how to read it.
struct Source<'a> {
    path: &'a Path,
    format: Option<&'a str>,
    signal: Option<&'a Path>,
    rate: Option<f64>,
}

impl<'a> From<&'a InputArgs> for Source<'a> {
    fn from(a: &'a InputArgs) -> Self {
        Source { path: &a.input, format: a.format.as_deref(), signal: a.signal.as_deref(), rate: a.rate }
    }
}

fn load(src: &Source<'_>) -> Result<RawRecording, CliError> {
    let bytes = read(src.path)?;
    let name = src.path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let format = match src.format {
        Some(f) => SourceFormat::from_name(f).ok_or_else(|| CliError::usage("unknown_format", format!("unknown format {f:?}")))?,
        None => match formats::detect_format(&bytes, name) {
            Ok(d) => d.format,
            Err(FormatError::UnknownFormat) => {
                return Err(CliError::usage("unknown_format", format!("cannot tell the format of {}; pass --format", src.path.display())))
            }
            Err(e) => return Err(e.into()),
        },
    };
    let opts = ParseOptions { sampling_rate_hz: src.rate };
    if format != SourceFormat::Wfdb {
        return Ok(formats::parse_bytes(format, &bytes, &opts)?);
    }
    let is_dat = src.path.extension().is_some_and(|e| e.eq_ignore_ascii_case("dat"));
    let (header, dat) = if is_dat {
        (read(&src.path.with_extension("hea"))?, bytes)
    } else {
        let dat = src.signal.map(Path::to_path_buf).unwrap_or_else(|| src.path.with_extension("dat"));
        (bytes, read(&dat)?)
    };
    Ok(formats::parse_wfdb(&header, &dat)?)
}

fn load_standard(src: &Source<'_>, no_baseline: bool, no_clip: bool) -> Result<StandardEcg, CliError> {
    let raw = load(src)?;
    for w in formats::warnings(&raw) {
        log::warn!("{}: {w}", src.path.display());
    }
    let opts = NormalizationOptions { enable_baseline_removal: !no_baseline, enable_clipping: !no_clip, ..Default::default() };
    Ok(normalize(&raw, &opts)?)
}

fn export_format(f: OutFormat) -> ExportFormat {
    match f {
        OutFormat::Csv => ExportFormat::Csv,
        OutFormat::Npy => ExportFormat::Npy,
        OutFormat::Json => ExportFormat::Json,
    }
}

fn convert(a: &ConvertArgs) -> Result<(), CliError> {
    let ecg = load_standard(&(&a.input).into(), a.input.no_baseline, a.input.no_clip)?;
    let format = match a.to {
        Some(f) => export_format(f),
        None => a.out.extension().and_then(|e| e.to_str()).and_then(ExportFormat::from_name).unwrap_or(ExportFormat::Npy),
    };
    write(&a.out, &export(&ExportView::Standard(&ecg), format)?)?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<(), CliError> {
    let ecg = load_standard(&(&a.input).into(), a.input.no_baseline, a.input.no_clip)?;
    let fid = detect_rpeaks(&ecg)?;
    let format = export_format(a.to);
    let bytes = match a.view {
        AnalysisView::Fiducials => {
            if format == ExportFormat::Npy {
                return Err(CliError::usage("unsupported_combination", "fiducials export as json or csv"));
            }
            export(&ExportView::Fiducials(&fid), format)?
        }
        AnalysisView::Median => export(&ExportView::MedianBeats(&median_beat(&ecg, &fid, &BeatWindow::default())?), format)?,
        AnalysisView::Aligned => export(&ExportView::Aligned(&rlign_transform(&ecg, &fid, &RlignOptions::default())?), format)?,
        AnalysisView::Qrs => {
            if format != ExportFormat::Json {
                return Err(CliError::usage("unsupported_combination", "qrs windows export as json only"));
            }
            let windows: Vec<Vec<Vec<f64>>> = extract_qrs_windows(&ecg, &fid, QRS_WINDOW_MS)
                .iter()
                .map(|w| w.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect();
            let doc = json!({ "view": "qrs", "rate_hz": ecg.rate_hz(), "window_ms": QRS_WINDOW_MS, "r_peaks": fid.r_peaks, "windows": windows });
            serde_json::to_vec(&doc).expect("finite windows serialize")
        }
    };
    match &a.out {
        Some(p) => write(p, &bytes),
        None => std::io::stdout().lock().write_all(&bytes).map_err(|e| CliError::op("io_error", e)),
    }
}

/// `<dir>/<stem>.manifest.json` for a payload at `<dir>/<stem>.<ext>`.
fn manifest_path(payload: &Path) -> PathBuf {
    let stem = payload.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    payload.with_file_name(format!("{stem}.manifest.json"))
}

/// Creation time for manifests; `SOURCE_DATE_EPOCH` pins it for reproducible output.
fn created_at() -> DateTime<Utc> {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|s| DateTime::from_timestamp(s, 0))
        .unwrap_or_else(Utc::now)
}

fn finetune(a: &FinetuneArgs, seed: u64) -> Result<(), CliError> {
    let mut cfg: FineTuneConfig = match &a.config {
        Some(p) => serde_json::from_slice(&read(p)?).map_err(|e| CliError::usage("invalid_config", format!("{}: {e}", p.display())))?,
        None => FineTuneConfig::default(),
    };
    cfg.seed = seed;
    cfg.max_epochs = a.epochs.unwrap_or(cfg.max_epochs);
    cfg.gamma = a.gamma.unwrap_or(cfg.gamma);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.patience = a.patience.unwrap_or(cfg.patience);
    cfg.lr = a.lr.or(cfg.lr);
    cfg.head = match a.head {
        HeadArg::Linear => HeadKind::Linear,
        HeadArg::Mlp => HeadKind::Mlp { hidden: a.hidden },
    };
    cfg.validate().map_err(|e| CliError::usage(e.code(), e.to_string()))?;
    let name = match &a.name {
        Some(n) => n.clone(),
        None => a.out.file_stem().and_then(|s| s.to_str()).unwrap_or_default().split('@').next().unwrap_or_default().to_string(),
    };
    validate_ident("name", &name).map_err(|e| CliError::usage("invalid_name", e.to_string()))?;

    let table: BTreeMap<String, Vec<String>> =
        serde_json::from_slice(&read(&a.labels)?).map_err(|e| CliError::usage("invalid_labels", format!("{}: {e}", a.labels.display())))?;
    let mut embeddings = Vec::with_capacity(table.len());
    let mut labels = Vec::with_capacity(table.len());
    for (file, classes) in &table {
        let path = a.data.join(file);
        let src = Source { path: &path, format: None, signal: None, rate: a.rate };
        let ecg = load_standard(&src, false, false).map_err(|e| CliError { message: format!("{file}: {}", e.message), ..e })?;
        embeddings.push(embed(&ecg).map_err(|e| CliError::op(e.code(), format!("{file}: {e}")))?);
        labels.push(classes.clone());
    }
    log::info!("training on {} recordings", embeddings.len());
    let (head, report) = train_head(&embeddings, &labels, &a.model, &cfg)?;
    let payload = save_model(&head);
    let manifest = ModelManifest::describe(&name, TRAINED_VERSION, head_kind(&head), head.class_names().to_vec(), &payload, created_at());
    write(&a.out, &payload)?;
    write(&manifest_path(&a.out), &manifest.to_json())?;
    print_json(&report)
}

fn load_head(a: &PredictArgs) -> Result<(ModelManifest, ecgx_core::finetune::Head), CliError> {
    if let Some(dir) = &a.cache {
        return Ok(ModelCache::open(dir)?.load_head(&a.model)?);
    }
    let payload_path = PathBuf::from(&a.model);
    let payload = read(&payload_path)?;
    let manifest = validate_manifest(&read(&manifest_path(&payload_path))?)?;
    let head = load_model(&payload, &manifest)?;
    Ok((manifest, head))
}

fn predict_cmd(a: &PredictArgs) -> Result<(), CliError> {
    let (manifest, head) = load_head(a)?;
    let mut embeddings = Vec::with_capacity(a.inputs.len());
    for p in &a.inputs {
        let src = Source { path: p, format: a.format.as_deref(), signal: None, rate: a.rate };
        embeddings.push(embed(&load_standard(&src, false, false)?)?);
    }
    let probs = predict(&head, &embeddings)?;
    let classes = head.class_names();
    let rows: Vec<Value> = a
        .inputs
        .iter()
        .zip(&probs)
        .map(|(p, row)| {
            let best = row.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).map_or(0, |(i, _)| i);
            json!({ "file": p.display().to_string(), "probabilities": row, "predicted": classes[best] })
        })
        .collect();
    print_json(&json!({ "model": manifest.stem(), "class_names": classes, "rows": rows }))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Row {
    Labels(Vec<String>),
    Probs(BTreeMap<String, f64>),
}

/// Rows keyed by id (objects) or by position (arrays).
fn read_rows(path: &Path) -> Result<Vec<(String, Row)>, CliError> {
    let v: Value = serde_json::from_slice(&read(path)?).map_err(|e| CliError::op("invalid_input", format!("{}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::op("invalid_input", format!("{}: {e}", path.display()));
    match v {
        Value::Object(m) => m.into_iter().map(|(k, v)| Ok((k, serde_json::from_value(v).map_err(bad)?))).collect(),
        Value::Array(a) => a.into_iter().enumerate().map(|(i, v)| Ok((i.to_string(), serde_json::from_value(v).map_err(bad)?))).collect(),
        _ => Err(CliError::op("invalid_input", format!("{}: expected a JSON object or array", path.display()))),
    }
}

fn read_scores(path: &Path) -> Result<Vec<f64>, CliError> {
    let bytes = read(path)?;
    if let Ok(v) = serde_json::from_slice::<Vec<f64>>(&bytes) {
        return Ok(v);
    }
    String::from_utf8_lossy(&bytes)
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| CliError::op("invalid_input", format!("{}: `{t}` is not a number", path.display()))))
        .collect()
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    if let Some(p) = &a.scores {
        let values = read_scores(p)?;
        let s = aggregate(&values)?;
        return print_json(&json!({ "n": values.len(), "average": s.average, "median": s.median, "iqr": s.iqr, "cv": s.cv }));
    }
    let (Some(truth_path), Some(pred_path)) = (&a.truth, &a.pred) else {
        return Err(CliError::usage("invalid_request", "eval needs --truth with --pred, or --scores"));
    };
    let mut truth = read_rows(truth_path)?;
    let mut pred = read_rows(pred_path)?;
    let keyed = truth.iter().any(|(k, _)| k.parse::<usize>().is_err()) || pred.iter().any(|(k, _)| k.parse::<usize>().is_err());
    if keyed {
        truth.sort_by(|x, y| x.0.cmp(&y.0));
        pred.sort_by(|x, y| x.0.cmp(&y.0));
        if truth.len() == pred.len() && truth.iter().zip(&pred).any(|(t, p)| t.0 != p.0) {
            let missing: Vec<&str> = truth.iter().map(|t| t.0.as_str()).filter(|k| !pred.iter().any(|p| p.0 == *k)).collect();
            return Err(CliError::op("key_mismatch", format!("predictions lack ids {missing:?}")));
        }
    }
    let maps = a
        .labelmap
        .as_deref()
        .map(|sel| {
            let set = match &a.labelmap_file {
                Some(p) => LabelMapSet::from_path(p)?,
                None => LabelMapSet::builtin(),
            };
            set.select(sel)?;
            Ok::<_, CliError>((set, sel))
        })
        .transpose()?;
    let map_codes = |codes: &[String]| -> Vec<String> {
        match &maps {
            Some((set, sel)) => set.map_labels(sel, codes).expect("selector checked").into_iter().collect(),
            None => codes.iter().map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect(),
        }
    };
    let truth_sets: Vec<Vec<String>> = truth
        .iter()
        .map(|(k, r)| match r {
            Row::Labels(l) => Ok(map_codes(l)),
            Row::Probs(_) => Err(CliError::usage("invalid_input", format!("truth row {k} must list labels"))),
        })
        .collect::<Result<_, _>>()?;
    let all_probs = pred.iter().all(|(_, r)| matches!(r, Row::Probs(_)));
    let all_labels = pred.iter().all(|(_, r)| matches!(r, Row::Labels(_)));
    if !(all_probs || all_labels) {
        return Err(CliError::usage("invalid_input", "prediction rows mix label lists and probability maps"));
    }
    // A mapped class takes the highest probability among the codes mapping to it.
    let prob_rows: Vec<BTreeMap<String, f64>> = pred
        .iter()
        .filter_map(|(_, r)| match r {
            Row::Probs(m) => Some(m.iter().fold(BTreeMap::new(), |mut acc: BTreeMap<String, f64>, (code, &p)| {
                for class in map_codes(std::slice::from_ref(code)) {
                    let e = acc.entry(class).or_insert(p);
                    *e = e.max(p);
                }
                acc
            })),
            Row::Labels(_) => None,
        })
        .collect();
    let label_rows: Vec<Vec<String>> = pred
        .iter()
        .filter_map(|(_, r)| match r {
            Row::Labels(l) => Some(map_codes(l)),
            Row::Probs(_) => None,
        })
        .collect();
    let classes: Vec<String> = truth_sets
        .iter()
        .flatten()
        .chain(label_rows.iter().flatten())
        .chain(prob_rows.iter().flat_map(|m| m.keys()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if all_probs && !pred.is_empty() {
        let rows: Vec<Vec<f64>> = prob_rows.iter().map(|m| classes.iter().map(|c| m.get(c).copied().unwrap_or(0.0)).collect()).collect();
        print_json(&evaluate_dataset(&truth_sets, &rows, &classes, a.threshold)?)
    } else {
        let report = f1_scores(&truth_sets, &label_rows, &classes)?;
        let mut v = serde_json::to_value(&report).expect("report serializes");
        v["n_samples"] = json!(truth_sets.len());
        print_json(&v)
    }
}

fn sync(a: &SyncArgs) -> Result<(), CliError> {
    let cfg = DavConfig { url: a.url.clone(), user: a.user.clone(), pass: a.pass.clone(), timeout_secs: 30 };
    let client = WebDavClient::new(&cfg)?;
    let cache = ModelCache::open(&a.cache)?;
    if a.list {
        let remote = list_remote(&client)?;
        let entries = merge_entries(&cache.models()?, Some(&remote), &BTreeSet::new());
        return print_json(&json!({ "models": entries, "warnings": remote.warnings }));
    }
    if let Some(sel) = &a.publish {
        let model = match Path::new(sel) {
            p if p.is_file() => {
                let manifest = validate_manifest(&read(&manifest_path(p))?)?;
                cache.insert_local(&read(p)?, &manifest)?
            }
            _ => cache.find(sel)?,
        };
        let path = cache.publish(&client, &model.manifest.stem())?;
        return print_json(&json!({ "model": model.manifest.stem(), "path": path }));
    }
    let summary = cache.sync(&client)?;
    print_json(&summary)?;
    match summary.failed.first() {
        Some(f) => Err(CliError::op(&f.code, format!("{} model(s) failed verification, first {}: {}", summary.failed.len(), f.model, f.message))),
        None => Ok(()),
    }
}

fn serve(a: &ServeArgs) -> Result<(), CliError> {
    let mut cfg = ecgx_service::ServiceConfig::load(a.config.as_deref()).map_err(|e| CliError::usage("invalid_config", e.to_string()))?;
    if let Some(d) = &a.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(b) = &a.bind {
        cfg.bind = b.clone();
    }
    cfg.port = a.port.unwrap_or(cfg.port);
    cfg.workers = a.workers.unwrap_or(cfg.workers);
    cfg.validate().map_err(|e| CliError::usage("invalid_config", e.to_string()))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| CliError::op("internal", e))?;
    rt.block_on(ecgx_service::serve(cfg)).map_err(|e| CliError::op("start_failed", e))
}
