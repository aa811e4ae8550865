//! `gss` command-line driver.
//!
//! Exit codes: 0 success, 1 runtime failure (including any failed segment),
//! 2 usage errors such as bad flags, missing manifests or a malformed bench
//! spec. Verbosity comes from `GSS_LOG` (`error` … `trace`, default `warn`).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Deserialize;

use crate::config::{BatchMode, EnhanceConfig};
use crate::error::Error;
use crate::manifests::{
    load_recordings, load_segments, save_segments, validate_segments, Recording, Segment,
    SegmentFormat,
};
use crate::scheduler::run_pipeline;
use crate::synthbench::{generate, run_bench, write_bench_csv, BenchSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gss", version, about = "Guided source separation for multi-channel meeting audio")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance every segment and write one WAV per segment plus summary.json.
    Enhance(EnhanceArgs),
    /// Expand cut lines with supervisions into one segment per supervision.
    TrimToSegments(TrimArgs),
    /// Run a synthetic parameter grid and write bench.csv.
    Bench(BenchArgs),
    /// Parse and cross-check manifests without touching audio.
    ValidateManifests(ValidateArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Recordings manifest (JSON lines, optionally gzipped).
    pub recordings: PathBuf,
    /// Segments manifest (JSON lines or RTTM, optionally gzipped).
    pub segments: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub flags: EnhanceFlags,
}

#[derive(Debug, Args, Clone)]
pub struct EnhanceFlags {
    #[arg(long, default_value_t = 50.0)]
    pub max_batch_duration: f64,
    #[arg(long, default_value_t = 15.0)]
    pub context_duration: f64,
    #[arg(long, default_value_t = 20)]
    pub bss_iterations: usize,
    #[arg(long)]
    pub no_wpe: bool,
    #[arg(long)]
    pub no_noise_class: bool,
    /// Comma-separated channel indices, e.g. `0,1,2,3`.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long)]
    pub one_per_batch: bool,
    /// Audio loader threads; 0 loads on the compute thread.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl EnhanceFlags {
    pub fn to_config(&self) -> EnhanceConfig {
        let mut cfg = EnhanceConfig {
            use_wpe: !self.no_wpe,
            noise_class: !self.no_noise_class,
            context_duration: self.context_duration,
            max_batch_duration: self.max_batch_duration,
            mode: if self.one_per_batch { BatchMode::OnePerBatch } else { BatchMode::SuperSegment },
            channels: self.channels.clone(),
            workers: self.workers,
            seed: self.seed,
            ..EnhanceConfig::default()
        };
        cfg.bss.iterations = self.bss_iterations;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct TrimArgs {
    pub recordings: PathBuf,
    /// Cut lines with `supervisions`, or plain segment lines.
    pub cuts: PathBuf,
    /// Output segments manifest.
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Bench spec (JSON).
    pub spec: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub recordings: PathBuf,
    pub segments: Option<PathBuf>,
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Spec(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult = std::result::Result<i32, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("gss: {}", e.message);
            e.code
        }
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("GSS_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp_millis().try_init();
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Enhance(a) => cmd_enhance(&a),
        Command::TrimToSegments(a) => cmd_trim_to_segments(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::ValidateManifests(a) => cmd_validate(&a),
    }
}

fn require_file(path: &Path, what: &str) -> std::result::Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{what} not found: {}", path.display())))
    }
}

fn check_flags(flags: &EnhanceFlags) -> std::result::Result<(), CliError> {
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if !positive(flags.max_batch_duration) {
        return Err(CliError::usage("--max-batch-duration must be positive"));
    }
    if !(flags.context_duration >= 0.0 && flags.context_duration.is_finite()) {
        return Err(CliError::usage("--context-duration must be non-negative"));
    }
    if flags.bss_iterations == 0 {
        return Err(CliError::usage("--bss-iterations must be at least 1"));
    }
    Ok(())
}

fn check_channels(cfg: &EnhanceConfig, recordings: &[Recording]) -> std::result::Result<(), CliError> {
    let Some(sel) = &cfg.channels else { return Ok(()) };
    for rec in recordings {
        if let Some(&bad) = sel.iter().find(|&&c| c >= rec.channel_count()) {
            return Err(CliError::usage(format!(
                "--channels: channel {bad} not available in recording {} ({} channels)",
                rec.id,
                rec.channel_count()
            )));
        }
    }
    Ok(())
}

pub fn cmd_enhance(a: &EnhanceArgs) -> CliResult {
    require_file(&a.recordings, "recordings manifest")?;
    require_file(&a.segments, "segments manifest")?;
    check_flags(&a.flags)?;
    let cfg = a.flags.to_config();
    cfg.validate()?;
    let recordings = load_recordings(&a.recordings)?;
    let load = load_segments(&a.segments, SegmentFormat::from_path(&a.segments))?;
    check_channels(&cfg, &recordings)?;
    info!(
        "enhancing {} segments from {} recordings ({} skipped)",
        load.segments.len(),
        recordings.len(),
        load.skipped
    );
    let summary = run_pipeline(&recordings, &load.segments, &cfg, &a.out_dir)?;
    println!(
        "{} of {} segments enhanced in {:.2}s (RTF {:.3}); summary at {}",
        summary.segments_succeeded,
        summary.segments_total,
        summary.runtime.wall_seconds,
        summary.runtime.real_time_factor,
        a.out_dir.join("summary.json").display()
    );
    for f in &summary.failures {
        eprintln!("gss: segment {} failed: {}", f.segment_id, f.error);
    }
    Ok(if summary.segments_failed == 0 { EXIT_OK } else { EXIT_FAILURE })
}

#[derive(Debug, Deserialize)]
struct Supervision {
    #[serde(default)]
    id: Option<String>,
    speaker: String,
    start: f64,
    duration: f64,
}

#[derive(Debug, Deserialize)]
struct Cut {
    recording_id: String,
    #[serde(default)]
    start: f64,
    supervisions: Vec<Supervision>,
}

/// Expands cut lines into segments. Supervision times are relative to the
/// cut start. Lines without `supervisions` must already be segments and are
/// passed through unchanged.
pub fn expand_cuts(path: &Path) -> crate::Result<Vec<Segment>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(parse_err)?;
        if value.get("supervisions").is_none() {
            out.push(serde_json::from_value::<Segment>(value).map_err(parse_err)?);
            continue;
        }
        let cut: Cut = serde_json::from_value(value).map_err(parse_err)?;
        for sup in cut.supervisions {
            let start = cut.start + sup.start;
            let id = sup.id.unwrap_or_else(|| {
                Segment::canonical_id(&cut.recording_id, &sup.speaker, start, sup.duration)
            });
            out.push(Segment {
                id,
                recording_id: cut.recording_id.clone(),
                speaker: sup.speaker,
                start,
                duration: sup.duration,
            });
        }
    }
    Ok(out)
}

fn read_text(path: &Path) -> crate::Result<String> {
    use std::io::Read;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut s = String::new();
        flate2::read::MultiGzDecoder::new(&bytes[..])
            .read_to_string(&mut s)
            .map_err(|e| Error::io(path, e))?;
        Ok(s)
    } else {
        String::from_utf8(bytes).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

pub fn cmd_trim_to_segments(a: &TrimArgs) -> CliResult {
    require_file(&a.recordings, "recordings manifest")?;
    require_file(&a.cuts, "cuts manifest")?;
    let recordings = load_recordings(&a.recordings)?;
    let segments = expand_cuts(&a.cuts)?;
    validate_segments(&recordings, &segments)?;
    save_segments(&a.output, &segments)?;
    println!("{} segments written to {}", segments.len(), a.output.display());
    Ok(EXIT_OK)
}

pub fn cmd_bench(a: &BenchArgs) -> CliResult {
    require_file(&a.spec, "bench spec")?;
    let text = std::fs::read_to_string(&a.spec).map_err(|e| CliError::from(Error::io(&a.spec, e)))?;
    let spec = BenchSpec::from_json(&text)?;
    let mix = generate(&spec.mixture)?;
    let rows = run_bench(&spec, &mix)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::from(Error::io(&a.out_dir, e)))?;
    let csv = a.out_dir.join("bench.csv");
    write_bench_csv(&csv, &rows)?;
    println!("{} grid points written to {}", rows.len(), csv.display());
    Ok(EXIT_OK)
}

pub fn cmd_validate(a: &ValidateArgs) -> CliResult {
    require_file(&a.recordings, "recordings manifest")?;
    let recordings = load_recordings(&a.recordings)?;
    let mut line = format!("{} recordings", recordings.len());
    if let Some(seg_path) = &a.segments {
        require_file(seg_path, "segments manifest")?;
        let load = load_segments(seg_path, SegmentFormat::from_path(seg_path))?;
        validate_segments(&recordings, &load.segments)?;
        line += &format!(", {} segments ({} skipped)", load.segments.len(), load.skipped);
    }
    println!("ok: {line}");
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("gss").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn enhance_defaults_map_to_config_defaults() {
        let Command::Enhance(a) = parse(&["enhance", "r.jsonl", "s.jsonl", "--out-dir", "o"]).command else {
            panic!("wrong subcommand");
        };
        assert_eq!(a.flags.to_config(), EnhanceConfig::default());
    }

    #[test]
    fn every_flag_lands_in_the_config() {
        let Command::Enhance(a) = parse(&[
            "enhance", "r", "s", "--out-dir", "o",
            "--max-batch-duration", "30", "--context-duration", "5", "--bss-iterations", "7",
            "--no-wpe", "--no-noise-class", "--channels", "0,2", "--one-per-batch",
            "--workers", "3", "--seed", "9",
        ])
        .command
        else {
            panic!("wrong subcommand");
        };
        let cfg = a.flags.to_config();
        assert_eq!(cfg.max_batch_duration, 30.0);
        assert_eq!(cfg.context_duration, 5.0);
        assert_eq!(cfg.bss.iterations, 7);
        assert!(!cfg.use_wpe && !cfg.noise_class);
        assert_eq!(cfg.channels, Some(vec![0, 2]));
        assert_eq!(cfg.mode, BatchMode::OnePerBatch);
        assert_eq!((cfg.workers, cfg.seed), (3, 9));
    }

    #[test]
    fn bad_flags_are_usage_errors() {
        assert_eq!(run(["gss", "enhance", "r", "s"]), EXIT_USAGE);
        assert_eq!(run(["gss", "enhance", "r", "s", "--out-dir", "o", "--workers", "x"]), EXIT_USAGE);
        assert_eq!(run(["gss", "frobnicate"]), EXIT_USAGE);
        let flags = EnhanceFlags {
            max_batch_duration: 0.0,
            ..match parse(&["enhance", "r", "s", "--out-dir", "o"]).command {
                Command::Enhance(a) => a.flags,
                _ => unreachable!(),
            }
        };
        assert_eq!(check_flags(&flags).unwrap_err().code, EXIT_USAGE);
    }

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(CliError::from(Error::Spec("x".into())).code, EXIT_USAGE);
        assert_eq!(CliError::from(Error::Pipeline("x".into())).code, EXIT_FAILURE);
    }
}
