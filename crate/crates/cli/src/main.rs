//! `ecgx`: the processing pipeline from the command line.
//!
//! Reports go to stdout and logs to stderr. Exit codes: 0 on success, 1 for usage
//! errors (bad flags, invalid settings, unknown format), 2 when the operation fails.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ecgx", version, about = "ECG conversion, analysis, fine-tuning and model exchange")]
struct Cli {
    /// Seed for every randomised step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a recording, normalize it and export the standard 12 x 1000 signal.
    Convert(ConvertArgs),
    /// Run beat analysis on a recording and export one view.
    Analyze(AnalyzeArgs),
    /// Train a classification head on labelled recordings; prints the report.
    Finetune(FinetuneArgs),
    /// Class probabilities for recordings; prints a table.
    Predict(PredictArgs),
    /// F1 scores of predictions against ground truth, or robustness statistics of scores.
    Eval(EvalArgs),
    /// Synchronise a local model cache with a WebDav registry.
    Sync(SyncArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Csv,
    Npy,
    Json,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Input recording; a WFDB `.hea` header picks up the `.dat` next to it.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Source format, when the content and extension do not tell
    /// (csv, npy, npz, dicom, mat, xml, json, wfdb).
    #[arg(long, value_name = "F")]
    format: Option<String>,
    /// WFDB signal file, when it is not next to the header.
    #[arg(long, value_name = "FILE")]
    signal: Option<PathBuf>,
    /// Sampling rate for formats that do not record one.
    #[arg(long, value_name = "HZ")]
    rate: Option<f64>,
    /// Skip baseline-wander removal.
    #[arg(long)]
    no_baseline: bool,
    /// Skip quantile clipping.
    #[arg(long)]
    no_clip: bool,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output file.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Output format; defaults to the extension of --out, else npy.
    #[arg(long, value_enum)]
    to: Option<OutFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AnalysisView {
    Fiducials,
    Qrs,
    Median,
    Aligned,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Which view to export.
    #[arg(long, value_enum, default_value = "fiducials")]
    view: AnalysisView,
    /// Output format (qrs and fiducials support json and csv).
    #[arg(long, value_enum, default_value = "json")]
    to: OutFormat,
    /// Output file; stdout when absent.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    Linear,
    Mlp,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    /// Directory holding the recordings named in the label file.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    /// JSON object mapping file names to arrays of class names.
    #[arg(long, value_name = "FILE")]
    labels: PathBuf,
    /// Sampling rate in Hz for recordings whose format does not carry one.
    #[arg(long, value_name = "HZ")]
    rate: Option<f64>,
    /// Base model name recorded in the report.
    #[arg(long, value_name = "NAME")]
    model: String,
    /// Model payload to write; the manifest goes next to it as `<stem>.manifest.json`.
    #[arg(long, value_name = "MODEL")]
    out: PathBuf,
    /// Name of the trained model; defaults to the file stem of --out.
    #[arg(long, value_name = "NAME")]
    name: Option<String>,
    /// Maximum number of epochs.
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Per-epoch learning-rate decay factor, in (0, 1].
    #[arg(long, value_name = "G")]
    gamma: Option<f64>,
    /// Mini-batch size.
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Initial learning rate; the learning-rate finder picks one when absent.
    #[arg(long, value_name = "LR")]
    lr: Option<f64>,
    /// Epochs without validation improvement before stopping.
    #[arg(long, value_name = "N")]
    patience: Option<usize>,
    /// Head architecture.
    #[arg(long, value_enum, default_value = "linear")]
    head: HeadArg,
    /// Hidden width of the mlp head.
    #[arg(long, value_name = "N", default_value_t = 64)]
    hidden: usize,
    /// JSON file with further training settings; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Model payload (manifest next to it), or `name[@version]` with --cache.
    #[arg(long, value_name = "MODEL")]
    model: String,
    /// Model cache directory to resolve --model in.
    #[arg(long, value_name = "DIR")]
    cache: Option<PathBuf>,
    /// Recordings to classify.
    #[arg(long = "in", value_name = "FILE", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Source format for all inputs.
    #[arg(long, value_name = "F")]
    format: Option<String>,
    /// Sampling rate for formats that do not record one.
    #[arg(long, value_name = "HZ")]
    rate: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["truth", "scores"]))]
struct EvalArgs {
    /// Ground truth: a JSON object of id -> labels, or an array of label arrays.
    #[arg(long, value_name = "FILE", requires = "pred")]
    truth: Option<PathBuf>,
    /// Predictions in the same shape; rows may also map class -> probability.
    #[arg(long, value_name = "FILE")]
    pred: Option<PathBuf>,
    /// Map codes through a label map (icd10, physionet, edms, ptbxl or `vocab.name`) first.
    #[arg(long, value_name = "MAP")]
    labelmap: Option<String>,
    /// Label map table to use instead of the built-in one.
    #[arg(long, value_name = "FILE")]
    labelmap_file: Option<PathBuf>,
    /// Probability at or above which a class counts as predicted.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Per-task scores to summarise (average, median, IQR, CV): a JSON array or
    /// numbers separated by whitespace or commas.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["truth", "pred", "labelmap"])]
    scores: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SyncArgs {
    /// Local model cache directory.
    #[arg(long, value_name = "DIR")]
    cache: PathBuf,
    /// Registry collection URL [env: EXCHANGE_URL].
    #[arg(long, value_name = "URL", env = "EXCHANGE_URL", hide_env = true)]
    url: String,
    /// Registry user [env: EXCHANGE_USER].
    #[arg(long, env = "EXCHANGE_USER", hide_env = true)]
    user: Option<String>,
    /// Registry password [env: EXCHANGE_PASS].
    #[arg(long, env = "EXCHANGE_PASS", hide_env = true, hide_env_values = true)]
    pass: Option<String>,
    /// Publish a cached model (`name[@version]`) or a payload file with its manifest, instead of downloading.
    #[arg(long, value_name = "MODEL")]
    publish: Option<String>,
    /// Only list local and remote entries.
    #[arg(long, conflicts_with = "publish")]
    list: bool,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// TOML configuration file; environment variables override it.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Data directory.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    /// Address to bind.
    #[arg(long)]
    bind: Option<String>,
    /// Port to listen on.
    #[arg(long)]
    port: Option<u16>,
    /// Fine-tune worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            ExitCode::from(e.exit_code())
        }
    }
}
