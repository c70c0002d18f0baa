use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{debug, info};
use rayon::prelude::*;

use heed_core::geometry::{Bvh, TriangleMesh};
use heed_core::metrics::{compare_reports, format_comparison, GainBaseline, MetricsReport};
use heed_core::session::{metrics_from_trace, replay, run_session, ExperimentFile, SessionConfig, SessionError, Trace};
use heed_core::voxel::{dims_for_resolution, padded_bounds, VoxelGrid};

#[derive(Parser)]
#[command(name = "heed", version, about = "Collaborative attention engine driver")]
struct Cli {
    /// Report format on stdout.
    #[arg(long, value_enum, default_value_t = Format::Kv, global = true)]
    format: Format,
    /// Suppress normal stdout output; exit status still reports the result.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Kv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Best,
    Mean,
}

impl From<Baseline> for GainBaseline {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Best => GainBaseline::Best,
            Baseline::Mean => GainBaseline::Mean,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Voxelize an OBJ mesh and export the grid.
    Voxelize {
        mesh: PathBuf,
        /// Longest-axis resolution `N`, or explicit `NX,NY,NZ`.
        #[arg(long, default_value = "64")]
        dims: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every session in a config file, writing traces and reports.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-execute a trace and print its report. Fails if it differs from
    /// the stored report (`--expect`, or `<trace stem>.report` beside it).
    Replay {
        trace: PathBuf,
        #[arg(long)]
        expect: Option<PathBuf>,
    },
    /// Compute a report from a trace's recorded events.
    Metrics {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Baseline::Best)]
        gain_baseline: Baseline,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-metric deltas between two reports.
    Compare { a: PathBuf, b: PathBuf },
    /// Run every session of a config for seeds `seed..seed+N` and write one
    /// CSV row per (session, seed).
    Sweep {
        config: PathBuf,
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    /// Bad input: exit 2.
    Invalid(String),
    /// Exit 1.
    Internal(String),
}

impl From<SessionError> for CliError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::Attention(_) | SessionError::Sync(_) | SessionError::Metrics(_) => {
                CliError::Internal(e.to_string())
            }
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))
}

enum Dims {
    Longest(usize),
    Explicit([usize; 3]),
}

fn parse_dims(s: &str) -> Result<Dims> {
    let bad = || CliError::Invalid(format!("--dims expects N or NX,NY,NZ, got `{s}`"));
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if parts.contains(&0) {
        return Err(bad());
    }
    match parts[..] {
        [n] => Ok(Dims::Longest(n)),
        [x, y, z] => Ok(Dims::Explicit([x, y, z])),
        _ => Err(bad()),
    }
}

fn load_trace(path: &Path) -> Result<Trace> {
    Trace::parse(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

fn load_experiment(path: &Path) -> Result<ExperimentFile> {
    ExperimentFile::parse_toml(&read(path)?).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

/// Reads a `key=value` report or a CSV with a header and one data row.
fn load_report(path: &Path) -> Result<MetricsReport> {
    let text = read(path)?;
    let invalid = |e: String| CliError::Invalid(format!("{}: {e}", path.display()));
    let first = text.lines().find(|l| !l.trim().is_empty() && !l.starts_with('#')).unwrap_or("");
    if first.contains('=') {
        return MetricsReport::from_kv(&text).map_err(|e| invalid(e.to_string()));
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = rdr.headers().map_err(|e| invalid(e.to_string()))?.iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>().map_err(|e| invalid(e.to_string()))?;
    let [row] = &rows[..] else {
        return Err(invalid(format!("expected one report row, found {}", rows.len())));
    };
    let row: Vec<String> = row.iter().map(str::to_string).collect();
    MetricsReport::from_csv_record(&header, &row).map_err(|e| invalid(e.to_string()))
}

fn csv_text(records: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let internal = |e: String| CliError::Internal(e);
    let mut w = csv::Writer::from_writer(Vec::new());
    for rec in records {
        w.write_record(&rec).map_err(|e| internal(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| internal(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| internal(e.to_string()))
}

/// CSV text with `label` and `seed` columns ahead of the report fields.
fn reports_csv(rows: &[(String, u64, MetricsReport)]) -> Result<String> {
    let head = rows.first().map(|(_, _, r)| {
        let mut h = vec!["label".to_string(), "seed".to_string()];
        h.extend(r.csv_header());
        h
    });
    let body = rows.iter().map(|(label, seed, r)| {
        let mut rec = vec![label.clone(), seed.to_string()];
        rec.extend(r.csv_row());
        rec
    });
    csv_text(head.into_iter().chain(body))
}

fn render_reports(format: Format, rows: &[(String, u64, MetricsReport)]) -> Result<String> {
    match format {
        Format::Csv => reports_csv(rows),
        Format::Kv => Ok(rows
            .iter()
            .map(|(label, seed, r)| format!("# {label} seed={seed}\n{}", r.to_kv()))
            .collect::<Vec<_>>()
            .join("\n")),
    }
}

fn render_report(format: Format, r: &MetricsReport) -> Result<String> {
    match format {
        Format::Kv => Ok(r.to_kv()),
        Format::Csv => csv_text([r.csv_header(), r.csv_row()]),
    }
}

struct Out {
    quiet: bool,
}

impl Out {
    fn print(&self, text: &str) -> Result<()> {
        if self.quiet {
            return Ok(());
        }
        let mut stdout = std::io::stdout().lock();
        stdout
            .write_all(text.as_bytes())
            .and_then(|_| stdout.flush())
            .map_err(|e| CliError::Internal(format!("stdout: {e}")))
    }
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_+.".contains(c) { c } else { '_' })
        .collect()
}

fn execute(cli: Cli) -> Result<()> {
    let out = Out { quiet: cli.quiet };
    match cli.command {
        Command::Voxelize { mesh, dims, out: dest } => {
            let dims = parse_dims(&dims)?;
            let mesh = TriangleMesh::parse_obj(&read(&mesh)?).map_err(|e| CliError::Invalid(e.to_string()))?;
            let bvh = Bvh::build(&mesh).map_err(|e| CliError::Invalid(e.to_string()))?;
            let bounds = padded_bounds(&mesh.aabb());
            let dims = match dims {
                Dims::Longest(n) => dims_for_resolution(&bounds, n),
                Dims::Explicit(d) => d,
            };
            let grid = VoxelGrid::voxelize_in(&mesh, &bvh, bounds, dims).map_err(|e| CliError::Invalid(e.to_string()))?;
            info!("{} triangles -> {} active of {} voxels", mesh.triangle_count(), grid.active_count(), grid.len());
            let text = grid.export_text();
            match dest {
                Some(p) => write(&p, &text),
                None => out.print(&text),
            }
        }
        Command::Run { config, out: dir } => {
            let file = load_experiment(&config)?;
            fs::create_dir_all(&dir).map_err(|e| CliError::Internal(format!("cannot create {}: {e}", dir.display())))?;
            let mut rows = Vec::new();
            for cfg in file.sessions() {
                let label = cfg.display_label();
                info!("running {label} (seed {})", cfg.seed);
                let res = run_session(&cfg)?;
                let stem = file_stem(&label);
                write(&dir.join(format!("{stem}.trace")), &res.trace.to_text())?;
                write(&dir.join(format!("{stem}.report")), &res.report.to_kv())?;
                rows.push((label, cfg.seed, res.report));
            }
            write(&dir.join("reports.csv"), &reports_csv(&rows)?)?;
            out.print(&render_reports(cli.format, &rows)?)
        }
        Command::Replay { trace: path, expect } => {
            let trace = load_trace(&path)?;
            let report = replay(&trace)?;
            let stored = expect.or_else(|| Some(path.with_extension("report")).filter(|p| p.exists()));
            if let Some(p) = stored {
                let want = load_report(&p)?;
                if want != report {
                    let diff: Vec<_> = compare_reports(&want, &report)
                        .into_iter()
                        .filter(|r| r.1.map(f64::to_bits) != r.2.map(f64::to_bits))
                        .collect();
                    return Err(CliError::Invalid(format!(
                        "replayed report differs from {}\n{}",
                        p.display(),
                        format_comparison(&diff)
                    )));
                }
                debug!("replay matches {}", p.display());
            }
            out.print(&render_report(cli.format, &report)?)
        }
        Command::Metrics {
            trace,
            gain_baseline,
            out: dest,
        } => {
            let trace = load_trace(&trace)?;
            let report = metrics_from_trace(&trace, gain_baseline.into())?;
            let text = render_report(cli.format, &report)?;
            match dest {
                Some(p) => write(&p, &text),
                None => out.print(&text),
            }
        }
        Command::Compare { a, b } => {
            let (ra, rb) = (load_report(&a)?, load_report(&b)?);
            if ra.fields().len() != rb.fields().len() {
                return Err(CliError::Invalid("reports have different team sizes".into()));
            }
            out.print(&format_comparison(&compare_reports(&ra, &rb)))
        }
        Command::Sweep { config, seeds, out: dest } => {
            if seeds == 0 {
                return Err(CliError::Invalid("--seeds must be >= 1".into()));
            }
            let file = load_experiment(&config)?;
            let jobs: Vec<(u64, SessionConfig)> = (0..seeds)
                .flat_map(|i| {
                    file.sessions().into_iter().map(move |mut cfg| {
                        cfg.seed = cfg.seed.wrapping_add(i);
                        (i, cfg)
                    })
                })
                .collect();
            info!("sweep: {} sessions", jobs.len());
            let rows: Vec<(String, u64, MetricsReport)> = jobs
                .par_iter()
                .map(|(_, cfg)| run_session(cfg).map(|r| (cfg.display_label(), cfg.seed, r.report)))
                .collect::<std::result::Result<_, _>>()?;
            let text = reports_csv(&rows)?;
            match dest {
                Some(p) => write(&p, &text),
                None => out.print(&text),
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HEED_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| execute(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(CliError::Invalid(m))) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Ok(Err(CliError::Internal(m))) => {
            eprintln!("internal error: {m}");
            ExitCode::from(1)
        }
        Err(_) => ExitCode::from(1),
    }
}
