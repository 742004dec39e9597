//! The `powersgd` command line: `ratio`, `train` and `verify`.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 failed verification,
//! 3 diverged training run (partial output is still written).

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::compressors::CompressorKind;
use crate::error::{Error, Result};
use crate::models::{compression_ratio, format_dims, ModelCatalog, RatioReport};
use crate::train::{self, Record, RunConfig, TaskKind};
use crate::verify::{self, Suite, SuiteReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VERIFY_FAILED: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const TRAIN_SCHEMA: &str = "powersgd.train.v1";
pub const RATIO_SCHEMA: &str = "powersgd.ratio.v1";

#[derive(Debug, Parser)]
#[command(name = "powersgd", version, about = "Low-rank gradient compression simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-parameter and total compression ratios for a model catalog.
    Ratio(RatioArgs),
    /// Simulated data-parallel training; writes a loss/traffic curve.
    Train(TrainArgs),
    /// Run self-check suites (`all` runs every suite).
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
    /// Aligned text (ratio only).
    Table,
}

#[derive(Debug, Args)]
pub struct RatioArgs {
    /// Built-in catalog (`resnet18`, `lstm`) or a catalog file.
    #[arg(long, default_value = "resnet18")]
    pub catalog: String,
    #[arg(long, default_value = "powersgd")]
    pub compressor: String,
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `least-squares`, `mlp` or `catalog-only`.
    #[arg(long, default_value = "least-squares")]
    pub task: String,
    #[arg(long, default_value = "powersgd")]
    pub compressor: String,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Force error feedback on or off (default: on except Signum/Atomo).
    #[arg(long)]
    pub error_feedback: Option<bool>,
    #[arg(long, default_value_t = 16)]
    pub shards: usize,
    /// Samples per shard per step; 0 uses whole shards.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    /// `OUTxIN` for least squares, `INxHIDDENxOUT` for the MLP.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for gradient evaluation; results do not change.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(required = true)]
    pub suites: Vec<String>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl TrainArgs {
    pub fn to_config(&self) -> Result<RunConfig> {
        let task: TaskKind = self.task.parse()?;
        let defaults = RunConfig::default();
        let dims = match &self.dims {
            Some(d) => parse_dims(d)?,
            None if task == TaskKind::Mlp => vec![16, 32, 8],
            None => defaults.dims,
        };
        Ok(RunConfig {
            task,
            compressor: self.compressor.parse()?,
            rank: self.rank,
            workers: self.workers,
            steps: self.steps,
            learning_rate: self.lr,
            momentum: self.momentum,
            seed: self.seed,
            error_feedback: self.error_feedback,
            shards: self.shards,
            batch_per_shard: (self.batch > 0).then_some(self.batch),
            samples: self.samples,
            dims,
            noise: self.noise,
        })
    }
}

fn parse_dims(s: &str) -> Result<Vec<usize>> {
    s.split(['x', 'X'])
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("dims `{s}`: {e}")))
        })
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if e.use_stderr() { stderr } else { stdout };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Ratio(a) => cmd_ratio(&a, stdout),
        Command::Train(a) => cmd_train(&a, stdout, stderr),
        Command::Verify(a) => cmd_verify(&a, stdout),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
    }
}

fn with_output<F>(out: &Option<PathBuf>, stdout: &mut dyn Write, f: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    match out {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => f(stdout),
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn json_error(e: serde_json::Error) -> Error {
    Error::Io(e.to_string())
}

#[derive(Debug, Serialize)]
struct RatioLine {
    name: String,
    tensor_shape: String,
    matrix_shape: String,
    uncompressed_kb: u128,
    ratio: String,
    ratio_at_rank: String,
}

fn ratio_lines(rep: &RatioReport) -> Vec<RatioLine> {
    let mut lines: Vec<RatioLine> = rep
        .rows
        .iter()
        .map(|r| RatioLine {
            name: r.name.clone(),
            tensor_shape: format_dims(&r.tensor_shape),
            matrix_shape: format!("{}x{}", r.matrix_shape.0, r.matrix_shape.1),
            uncompressed_kb: r.uncompressed_kib(),
            ratio: rep.row_display(r).to_string(),
            ratio_at_rank: format!(
                "{}×",
                crate::models::round_half_up(r.uncompressed_bits as u128, r.payload_bits as u128)
            ),
        })
        .collect();
    lines.push(RatioLine {
        name: "bias vectors (total)".into(),
        tensor_shape: String::new(),
        matrix_shape: String::new(),
        uncompressed_kb: rep.bias_kib(),
        ratio: "none".into(),
        ratio_at_rank: "1×".into(),
    });
    lines.push(RatioLine {
        name: "total".into(),
        tensor_shape: String::new(),
        matrix_shape: String::new(),
        uncompressed_kb: crate::models::round_half_up(rep.total_uncompressed_bits() as u128, 8 * 1024),
        ratio: rep.total_display().to_string(),
        ratio_at_rank: format!("{}×", rep.total_ratio_rounded()),
    });
    lines
}

pub fn write_ratio(rep: &RatioReport, format: Format, w: &mut dyn Write) -> Result<()> {
    let lines = ratio_lines(rep);
    match format {
        Format::Csv => {
            writeln!(w, "# schema={RATIO_SCHEMA} catalog={} compressor={} rank={}", rep.catalog, rep.compressor, rep.rank)?;
            let mut csv = csv::Writer::from_writer(w);
            for l in &lines {
                csv.serialize(l).map_err(csv_error)?;
            }
            csv.flush()?;
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Doc<'a> {
                schema: &'a str,
                catalog: &'a str,
                compressor: CompressorKind,
                rank: usize,
                total_ratio: f64,
                total_mb: u128,
                rows: &'a [RatioLine],
            }
            let doc = Doc {
                schema: RATIO_SCHEMA,
                catalog: &rep.catalog,
                compressor: rep.compressor,
                rank: rep.rank,
                total_ratio: rep.total_ratio(),
                total_mb: rep.total_mib(),
                rows: &lines,
            };
            serde_json::to_writer_pretty(&mut *w, &doc).map_err(json_error)?;
            writeln!(w)?;
        }
        Format::Table => {
            writeln!(w, "{} / {} / rank {}", rep.catalog, rep.compressor, rep.rank)?;
            let header = ["Parameter", "Tensor shape", "Matrix shape", "Uncompressed", "Ratio", "At rank"];
            let n = lines.len();
            let cells: Vec<[String; 6]> = lines
                .iter()
                .enumerate()
                .map(|(i, l)| {
                    let size = if i + 1 == n {
                        format!("{} MB", rep.total_mib())
                    } else {
                        format!("{} KB", l.uncompressed_kb)
                    };
                    [
                        l.name.clone(),
                        l.tensor_shape.clone(),
                        l.matrix_shape.clone(),
                        size,
                        l.ratio.clone(),
                        l.ratio_at_rank.clone(),
                    ]
                })
                .collect();
            let mut widths = header.map(|h| h.chars().count());
            for row in &cells {
                for (wd, c) in widths.iter_mut().zip(row) {
                    *wd = (*wd).max(c.chars().count());
                }
            }
            let line = |w: &mut dyn Write, row: &[String]| -> io::Result<()> {
                let mut s = String::new();
                for (i, (c, wd)) in row.iter().zip(widths).enumerate() {
                    let pad = wd - c.chars().count();
                    if i < 3 {
                        s.push_str(c);
                        s.push_str(&" ".repeat(pad));
                    } else {
                        s.push_str(&" ".repeat(pad));
                        s.push_str(c);
                    }
                    if i + 1 < row.len() {
                        s.push_str("  ");
                    }
                }
                writeln!(w, "{}", s.trim_end())
            };
            line(w, &header.map(String::from))?;
            for row in &cells {
                line(w, row)?;
            }
        }
    }
    Ok(())
}

fn cmd_ratio(a: &RatioArgs, stdout: &mut dyn Write) -> Result<i32> {
    let catalog = ModelCatalog::resolve(&a.catalog)?;
    let kind: CompressorKind = a.compressor.parse()?;
    if a.rank == 0 {
        return Err(Error::contract("ratio", "rank must be at least 1"));
    }
    let rep = compression_ratio(&catalog, kind, a.rank);
    with_output(&a.out, stdout, |w| write_ratio(&rep, a.format, w))?;
    Ok(EXIT_OK)
}

pub fn write_train_csv(records: &[Record], w: &mut dyn Write) -> Result<()> {
    writeln!(w, "# schema={TRAIN_SCHEMA}")?;
    let mut csv = csv::Writer::from_writer(w);
    for r in records {
        csv.serialize(r).map_err(csv_error)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_train_json(
    config: &RunConfig,
    records: &[Record],
    failure: Option<&Error>,
    w: &mut dyn Write,
) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        schema: &'a str,
        config: &'a RunConfig,
        records: &'a [Record],
        failure: Option<String>,
    }
    let doc = Doc {
        schema: TRAIN_SCHEMA,
        config,
        records,
        failure: failure.map(ToString::to_string),
    };
    serde_json::to_writer_pretty(&mut *w, &doc).map_err(json_error)?;
    writeln!(w)?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let config = a.to_config()?;
    if a.format == Format::Table {
        return Err(Error::contract("train", "table output is only available for ratio"));
    }
    let outcome = train::with_threads(a.threads, || train::run(&config))??;
    with_output(&a.out, stdout, |w| match a.format {
        Format::Json => write_train_json(&config, &outcome.records, outcome.failure.as_ref(), w),
        _ => write_train_csv(&outcome.records, w),
    })?;
    match &outcome.failure {
        Some(e) => {
            writeln!(stderr, "error: {e}")?;
            Ok(EXIT_DIVERGED)
        }
        None => Ok(EXIT_OK),
    }
}

fn cmd_verify(a: &VerifyArgs, stdout: &mut dyn Write) -> Result<i32> {
    let suites: Vec<Suite> = if a.suites.iter().any(|s| s == "all") {
        Suite::ALL.to_vec()
    } else {
        a.suites.iter().map(|s| s.parse()).collect::<Result<_>>()?
    };
    let reports: Vec<SuiteReport> = train::with_threads(a.threads, || {
        suites.iter().map(|&s| verify::run_suite(s)).collect::<Result<Vec<_>>>()
    })??;
    let mut failed = Vec::new();
    for r in &reports {
        write!(stdout, "{r}")?;
        if !r.passed() {
            failed.push(r.suite.id());
        }
    }
    if failed.is_empty() {
        writeln!(stdout, "all {} suites passed", reports.len())?;
        Ok(EXIT_OK)
    } else {
        writeln!(stdout, "failed suites: {}", failed.join(", "))?;
        Ok(EXIT_VERIFY_FAILED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn call(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(
            std::iter::once("powersgd").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(call(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(call(&["ratio", "--catalog", "vgg"]).0, EXIT_USAGE);
        assert_eq!(call(&["ratio", "--compressor", "zip"]).0, EXIT_USAGE);
        assert_eq!(call(&["train", "--task", "catalog-only"]).0, EXIT_USAGE);
        assert_eq!(call(&["verify", "nope"]).0, EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = call(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("ratio"));
    }

    #[test]
    fn dims_parse() {
        assert_eq!(parse_dims("40x40").unwrap(), vec![40, 40]);
        assert!(parse_dims("4xq").is_err());
    }
}
