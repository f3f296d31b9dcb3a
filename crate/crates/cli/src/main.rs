//! `signdet`: capture, label, split, train, evaluate and run the detector.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;

/// Error reported to the user as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn config(message: String) -> Self {
        CliError {
            code: 1,
            kind: "ConfigError".into(),
            message,
        }
    }

    pub fn validation(message: String) -> Self {
        CliError {
            code: 1,
            kind: "ValidationError".into(),
            message,
        }
    }

    pub fn io(message: String) -> Self {
        CliError {
            code: 2,
            kind: "IoError".into(),
            message,
        }
    }

    fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind,
            "exit_code": self.code,
            "message": self.message,
        })
        .to_string()
    }
}

impl From<signdet::Error> for CliError {
    fn from(e: signdet::Error) -> Self {
        CliError {
            code: if e.is_validation() { 1 } else { 2 },
            kind: e.kind().to_string(),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::io(e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "signdet", version, about = "Sign-language detection pipeline")]
struct Cli {
    /// Pipeline configuration file (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Record a timed capture session into one folder per label.
    Capture(CaptureArgs),
    /// Write the label map file.
    MakeLabelMap(LabelMapArgs),
    /// Split the image tree per label into train and validation lists.
    Split(SplitArgs),
    /// Encode the split's annotated images into record files.
    MakeRecords,
    /// Train the detector, resuming from the latest checkpoint if present.
    Train(TrainArgs),
    /// Score the latest checkpoint on the validation records.
    Eval(EvalArgs),
    /// Run the detector over a frame source and print JSON lines.
    Detect(DetectArgs),
    /// Serve the annotation HTTP API over the dataset root.
    ServeAnnotator(ServeArgs),
    /// Generate a synthetic annotated shape dataset.
    GenSynthetic(GenArgs),
    /// Print the effective configuration as TOML.
    ShowConfig,
}

#[derive(Args, Debug)]
pub struct CaptureArgs {
    /// Replay frames from this directory instead of the synthetic camera.
    #[arg(long, value_name = "DIR")]
    pub from_dir: Option<PathBuf>,
    /// Use a simulated clock so the session finishes instantly.
    #[arg(long)]
    pub simulate_clock: bool,
    /// Synthetic frame size as WIDTHxHEIGHT.
    #[arg(long, default_value = "640x480", value_parser = parse_size)]
    pub frame_size: (usize, usize),
    /// Seed for the synthetic camera.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the session manifest (default: `<dataset root>.manifest.json`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LabelMapArgs {
    /// Comma-separated label names (default: capture.labels).
    #[arg(long, value_delimiter = ',', conflicts_with = "classes")]
    pub labels: Option<Vec<String>>,
    /// Use the first N letters A, B, C, ...
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Training fraction (default: split.ratio).
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Shuffle seed (default: split.seed).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Total step count (default: train.steps).
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Replay image files from this directory.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    pub source: Option<PathBuf>,
    /// Use N frames from the synthetic camera instead.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Loop the replayed directory until this many frames were processed.
    #[arg(long)]
    pub limit: Option<u64>,
    /// Seed for the synthetic camera.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
    /// Listen on all interfaces instead of loopback (keeps the port).
    #[arg(long)]
    pub lan: bool,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("{s:?} is not WIDTHxHEIGHT"))?;
    let w = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    Ok((w, h))
}

fn run(cli: Cli) -> CliResult {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Capture(a) => commands::capture(&cfg, &a),
        Command::MakeLabelMap(a) => commands::make_label_map(&cfg, &a),
        Command::Split(a) => commands::split(&cfg, &a),
        Command::MakeRecords => commands::make_records(&cfg),
        Command::Train(a) => commands::train(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Detect(a) => commands::detect(&cfg, &a),
        Command::ServeAnnotator(a) => commands::serve(&cfg, &a),
        Command::GenSynthetic(a) => commands::gen_synthetic(&cfg, &a),
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // help and version requests
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = CliError {
                code: 1,
                kind: "UsageError".into(),
                message: e
                    .to_string()
                    .lines()
                    .next()
                    .unwrap_or_default()
                    .trim_start_matches("error: ")
                    .to_string(),
            };
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.code)
        }
    }
}
