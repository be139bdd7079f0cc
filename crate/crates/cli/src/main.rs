mod relative;
mod render;

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robomem_core::ingest::{generate_scenario, ingest_stream, read_feed, write_feed, GroundTruth, IngestOptions, ScenarioConfig};
use robomem_core::query::{execute, parse_query, plan, QueryContext, QueryError};
use robomem_core::refine::{run_refinement_pass, RefinePolicy};
use robomem_core::reprocess::{run_reprocess, OracleReprocessor, DEFAULT_BUDGET};
use robomem_core::store::MigrationPolicy;
use robomem_core::{Answer, EntityRef, QueryAst, Store, StoreOptions, Timestamp, MICROS_PER_DAY};
use serde_json::json;

#[derive(Parser)]
#[command(name = "robomem", version, about = "Long-term memory store for a home robot's perception feed")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = "ROBOMEM_STORE")]
    store: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Human)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Human,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Create an empty store.
    Init {
        /// Refuse appends once segments would exceed this many bytes.
        #[arg(long)]
        max_bytes: Option<u64>,
    },
    /// Generate a synthetic feed and its ground truth.
    Gen {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 37.0)]
        minutes: f64,
        #[arg(long, default_value_t = 6.0)]
        fps: f64,
        /// Feed output (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth output; defaults to the feed path with a .truth.json suffix.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Leave activity records out of the feed, so activity queries need reprocessing.
        #[arg(long)]
        no_activities: bool,
        #[arg(long, default_value_t = 0.9)]
        recall: f64,
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
        /// Scenario start, ISO-8601.
        #[arg(long)]
        start: Option<String>,
    },
    /// Append a feed to the store.
    Ingest {
        /// Feed file, or - for stdin.
        feed: PathBuf,
        /// Run a refinement pass every N frames (0 disables refinement).
        #[arg(long, default_value_t = 360)]
        refine_every: u64,
    },
    /// Fold unattributed detections into tracks.
    Refine,
    /// Summarize old detections and activities into coarser tiers.
    Migrate {
        /// Reference time, ISO-8601; defaults to the wall clock.
        #[arg(long)]
        now: Option<String>,
        #[arg(long, default_value_t = 7.0)]
        hot_days: f64,
        #[arg(long, default_value_t = 90.0)]
        warm_days: f64,
    },
    /// Answer one query.
    Query {
        query: String,
        /// Anchor for relative ranges and existence decay, ISO-8601; defaults to the wall clock.
        #[arg(long)]
        now: Option<String>,
        /// Most frames a reprocess request may ask for.
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// `none`, or a ground-truth file to reprocess against when the store cannot answer.
        #[arg(long, default_value = "none")]
        reprocess: String,
    },
    /// Time label probes against the store.
    Bench {
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print store statistics.
    Stats,
}

/// Exit code 2 for anything the user typed wrong, 1 for everything else.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<robomem_core::Error> for Failure {
    fn from(e: robomem_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let format = cli.format;
    let store_dir = || cli.store.clone().ok_or_else(|| Failure::Usage("error: no store given; pass --store or set ROBOMEM_STORE".into()));
    match cli.command {
        Command::Init { max_bytes } => {
            let dir = store_dir()?;
            let store = Store::init_with(&dir, StoreOptions { max_bytes, ..Default::default() })?;
            emit(format, &json!({ "store": dir, "bytes_on_disk": store.stats()?.bytes_on_disk }), || {
                format!("initialized store at {}", dir.display())
            })
        }
        Command::Gen {
            seed,
            minutes,
            fps,
            out,
            truth,
            no_activities,
            recall,
            label_noise,
            start,
        } => {
            let mut cfg = ScenarioConfig {
                duration_minutes: minutes,
                fps,
                emit_activities: !no_activities,
                detection_recall: recall,
                label_noise,
                ..ScenarioConfig::standard(seed)
            };
            if let Some(s) = start {
                cfg.start = parse_instant(&s, "--start")?;
            }
            cfg.validate().map_err(|e| Failure::Usage(format!("error: {e}")))?;
            let (gt, records) = generate_scenario(&cfg)?;
            let truth_path = truth.unwrap_or_else(|| with_suffix(&out, ".truth.json"));
            let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            write_feed(&mut w, &records)?;
            w.flush()?;
            let tw = BufWriter::new(File::create(&truth_path).with_context(|| format!("creating {}", truth_path.display()))?);
            serde_json::to_writer(tw, &gt).context("writing ground truth")?;
            emit(
                format,
                &json!({ "feed": out, "truth": truth_path, "frames": gt.frames.len(), "records": records.len() }),
                || format!("wrote {} frames ({} records) to {}, ground truth to {}", gt.frames.len(), records.len(), out.display(), truth_path.display()),
            )
        }
        Command::Ingest { feed, refine_every } => {
            let mut store = open(&store_dir()?, false)?;
            let source: Box<dyn BufRead> = if feed.as_os_str() == "-" {
                Box::new(BufReader::new(io::stdin()))
            } else {
                Box::new(BufReader::new(File::open(&feed).with_context(|| format!("opening {}", feed.display()))?))
            };
            let opts = IngestOptions {
                refine_every: (refine_every > 0).then_some(refine_every),
                ..Default::default()
            };
            let report = ingest_stream(read_feed(source), &mut store, &opts)?;
            for e in &report.errors {
                eprintln!("rejected record {}: {}", e.index, e.reason);
            }
            let stats = store.stats()?;
            emit(format, &json!({ "report": report, "bytes_per_frame": stats.bytes_per_frame }), || {
                render::ingest(&report, stats.bytes_per_frame)
            })
        }
        Command::Refine => {
            let mut store = open(&store_dir()?, false)?;
            let report = run_refinement_pass(&mut store, &RefinePolicy::default())?;
            emit(format, &report, || render::refinement(&report))
        }
        Command::Migrate { now, hot_days, warm_days } => {
            let mut store = open(&store_dir()?, false)?;
            let now = now_or_wall_clock(now.as_deref())?;
            let policy = MigrationPolicy {
                hot_window_micros: days_to_micros(hot_days),
                warm_window_micros: days_to_micros(warm_days),
                ..Default::default()
            };
            policy.validate().map_err(|e| Failure::Usage(format!("error: {e}")))?;
            let report = store.migrate_tiers(now, &policy)?;
            emit(format, &report, || render::migration(&report))
        }
        Command::Query {
            query,
            now,
            budget,
            reprocess,
        } => run_query_command(&store_dir()?, format, &query, now.as_deref(), budget, &reprocess),
        Command::Bench { probes, seed } => bench(&store_dir()?, format, probes, seed),
        Command::Stats => {
            let store = open(&store_dir()?, true)?;
            let stats = store.stats()?;
            let snap = store.snapshot();
            let manifest = store.manifest();
            let summaries = snap.all_detection_summaries().count() + snap.all_activity_summaries().count();
            let value = json!({
                "stats": stats,
                "generation": manifest.generation,
                "segments": manifest.segments.len(),
                "tiers": manifest.tiers,
                "last_ingest": manifest.last_ingest,
                "activities": snap.activities().len(),
                "summaries": summaries,
                "coverage_ranges": snap.coverage().len(),
            });
            emit(format, &value, || {
                let mut s = format!(
                    "{} frames, {} detections, {} tracks, {} activities, {} summaries\n{} bytes on disk in {} segments ({:.1} bytes/frame)",
                    stats.frames,
                    stats.detections,
                    stats.tracks,
                    snap.activities().len(),
                    summaries,
                    stats.bytes_on_disk,
                    manifest.segments.len(),
                    stats.bytes_per_frame
                );
                if let Some(t) = manifest.tiers.hot_boundary {
                    s.push_str(&format!("\nraw detections start at {t}"));
                }
                if let Some(i) = &manifest.last_ingest {
                    s.push_str(&format!("\nlast ingest: {} frames at {:.0} frames/s", i.frames, i.rate_fps));
                }
                s
            })
        }
    }
}

fn emit<T: serde::Serialize + ?Sized>(format: Format, value: &T, human: impl FnOnce() -> String) -> Outcome {
    let mut out = io::stdout().lock();
    match format {
        Format::Json => serde_json::to_writer(&mut out, value).map_err(anyhow::Error::from)?,
        Format::Human => out.write_all(human().as_bytes())?,
    }
    out.write_all(b"\n")?;
    Ok(())
}

fn open(dir: &Path, read_only: bool) -> Result<Store, Failure> {
    let opts = if read_only { StoreOptions::read_only() } else { StoreOptions::default() };
    Store::open(dir, opts).map_err(|e| match e {
        robomem_core::Error::NoStore(_) => {
            Failure::Runtime(anyhow::anyhow!("{e}; create one with `robomem init --store {}`", dir.display()))
        }
        other => other.into(),
    })
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_instant(text: &str, flag: &str) -> Result<Timestamp, Failure> {
    Timestamp::parse(text).map_err(|e| Failure::Usage(format!("error: {flag} {text:?} is not an ISO-8601 timestamp: {e}")))
}

fn now_or_wall_clock(now: Option<&str>) -> Result<Timestamp, Failure> {
    match now {
        Some(s) => parse_instant(s, "--now"),
        None => Ok(Timestamp::from_micros(chrono::Utc::now().timestamp_micros())),
    }
}

fn days_to_micros(days: f64) -> i64 {
    (days * MICROS_PER_DAY as f64).round() as i64
}

/// Error text with a caret under byte `position` of `text`.
fn caret(text: &str, position: usize, message: &str) -> String {
    let col = text[..position.min(text.len())].chars().count();
    format!("error: {message}\n  {text}\n  {}^", " ".repeat(col))
}

fn run_query_command(
    dir: &Path,
    format: Format,
    text: &str,
    now: Option<&str>,
    budget: usize,
    reprocess: &str,
) -> Outcome {
    if budget == 0 {
        return Err(Failure::Usage("error: --budget must be at least 1".into()));
    }
    let anchor = now_or_wall_clock(now)?;
    let resolved = relative::resolve(text, anchor).map_err(|e| Failure::Usage(caret(text, e.position, &e.message)))?;
    let ast = parse_query(&resolved).map_err(|e| {
        let shown = if resolved == text { text.to_owned() } else { resolved.clone() };
        Failure::Usage(match &e {
            QueryError::Syntax { position, .. } => caret(&shown, *position, &e.to_string()),
            QueryError::Semantic { .. } => format!("error: {e}\n  {shown}"),
        })
    })?;
    let truth: Option<GroundTruth> = match reprocess {
        "none" => None,
        path => {
            let f = File::open(path).with_context(|| format!("opening ground truth {path}"))?;
            Some(serde_json::from_reader(BufReader::new(f)).with_context(|| format!("reading ground truth {path}"))?)
        }
    };
    let mut store = open(dir, truth.is_none())?;
    let ctx = QueryContext {
        now: now.map(|_| anchor),
        budget,
        ..Default::default()
    };

    let started = Instant::now();
    let p = plan(&ast);
    let mut answer = execute(&p, &store.snapshot(), &ctx)?;
    let mut elapsed = started.elapsed().as_secs_f64();
    let mut reprocessed = None;
    if let (Answer::NeedsReprocess { request, .. }, Some(truth)) = (&answer, truth) {
        let mut oracle = OracleReprocessor::new(truth);
        let report = run_reprocess(&mut store, request, &mut oracle, &ctx.refine)?;
        let again = Instant::now();
        answer = execute(&p, &store.snapshot(), &ctx)?;
        elapsed = again.elapsed().as_secs_f64();
        reprocessed = Some(report);
    }

    let value = json!({
        "query": ast.to_string(),
        "answer": answer,
        "elapsed_ms": elapsed * 1e3,
        "reprocess": reprocessed,
    });
    emit(format, &value, || {
        let mut s = String::new();
        if let Some(r) = &reprocessed {
            s.push_str(&format!(
                "reprocessed {} frames: {} detections and {} activities added\n",
                r.frames_requested, r.detections_added, r.activities_added
            ));
        }
        s.push_str(&render::answer(&answer));
        s.push_str(&format!("\nanswered in {:.4} ms", elapsed * 1e3));
        s
    })
}

fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    Some(sorted[idx])
}

fn bench(dir: &Path, format: Format, probes: usize, seed: u64) -> Outcome {
    let store = open(dir, true)?;
    let snap = store.snapshot();
    let stats = store.stats()?;
    let labels = snap.detected_labels();
    let ctx = QueryContext::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lat = Vec::new();
    let suite = Instant::now();
    if let (false, Some(span)) = (labels.is_empty(), snap.span()) {
        for i in 0..probes {
            let (label, kind) = &labels[rng.random_range(0..labels.len())];
            let entity = EntityRef::new(*kind, label);
            let q = if i % 2 == 0 {
                QueryAst::LastSeen { entity }
            } else {
                let a = rng.random_range(span.from.as_micros()..=span.to.as_micros());
                let b = rng.random_range(span.from.as_micros()..=span.to.as_micros());
                QueryAst::Present {
                    entity,
                    range: robomem_core::TimeRange {
                        from: Timestamp::from_micros(a.min(b)),
                        to: Timestamp::from_micros(a.max(b)),
                    },
                }
            };
            let text = q.to_string();
            let t = Instant::now();
            let ast = parse_query(&text).map_err(|e| anyhow::anyhow!("{e}"))?;
            std::hint::black_box(execute(&plan(&ast), &snap, &ctx)?);
            lat.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    let suite_seconds = suite.elapsed().as_secs_f64();
    lat.sort_by(f64::total_cmp);
    let p50 = percentile(&lat, 0.5);
    let p99 = percentile(&lat, 0.99);
    let ingest_fps = store.manifest().last_ingest.as_ref().map(|i| i.rate_fps);
    let value = json!({
        "probes": lat.len(),
        "p50_ms": p50,
        "p99_ms": p99,
        "probe_seconds": suite_seconds,
        "ingest_rate_fps": ingest_fps,
        "bytes_per_frame": stats.bytes_per_frame,
        "bytes_on_disk": stats.bytes_on_disk,
        "frames": stats.frames,
    });
    let cell = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
    emit(format, &value, || {
        format!(
            "{:<22}{}\n{:<22}{}\n{:<22}{}\n{:<22}{}\n{:<22}{}\n{:<22}{:.1}\n{:<22}{}",
            "probes",
            lat.len(),
            "p50 latency (ms)",
            cell(p50, 4),
            "p99 latency (ms)",
            cell(p99, 4),
            "probe run (s)",
            cell(Some(suite_seconds), 3),
            "ingest rate (fps)",
            cell(ingest_fps, 0),
            "bytes/frame",
            stats.bytes_per_frame,
            "bytes on disk",
            stats.bytes_on_disk
        )
    })
}
