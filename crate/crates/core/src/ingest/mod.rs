//! Feed parsing, synthetic scenarios, and the streaming append loop.

mod feed;
mod scenario;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{InvalidRecord, Record, TimeRange, Timestamp};
use crate::refine::{run_refinement_pass, RefinePolicy, RefinementReport};
use crate::store::{Coverage, IngestStamp, Store};

pub use feed::{feed_line, parse_feed_line, read_feed, write_feed};
pub use scenario::{
    generate_scenario, GroundTruth, PersonTruth, ScenarioConfig, ScheduledActivity,
    OBJECT_VOCABULARY, PERSON_VOCABULARY,
};

#[derive(Clone, Debug)]
pub struct IngestOptions {
    /// Run a refinement pass after every this many frames; `None` disables it.
    pub refine_every: Option<u64>,
    pub refine_policy: RefinePolicy,
    /// Mark the feed's span as covered by activity recognition when the feed
    /// carried activity records.
    pub mark_activity_coverage: bool,
    /// How many rejected records to keep verbatim in the report.
    pub max_reported_errors: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            refine_every: None,
            refine_policy: RefinePolicy::default(),
            mark_activity_coverage: true,
            max_reported_errors: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    /// 0-based position in the source.
    pub index: u64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub frames: u64,
    pub detections: u64,
    pub activities: u64,
    pub rejected: u64,
    pub rejected_frames: u64,
    pub errors: Vec<RejectedRecord>,
    pub elapsed_seconds: f64,
    pub rate_fps: f64,
    pub refinement: RefinementReport,
}

/// Appends every valid record from `source` in order. A bad record is
/// rejected and counted; the rest of the stream still goes in. Ends with a
/// checkpoint, so everything accepted is durable on return.
pub fn ingest_stream(
    source: impl IntoIterator<Item = Result<Record>>,
    store: &mut Store,
    opts: &IngestOptions,
) -> Result<IngestReport> {
    if store.is_read_only() {
        return Err(Error::ReadOnly);
    }
    if opts.refine_every.is_some() {
        opts.refine_policy.validate()?;
    }
    let started = Instant::now();
    let mut report = IngestReport::default();
    let mut current_frame: Option<u64> = None;
    let mut span: Option<(Timestamp, Timestamp)> = None;
    let mut saw_activity = false;
    let mut since_refine = 0u64;

    for (index, item) in source.into_iter().enumerate() {
        let outcome = item.and_then(|record| {
            let is_frame = matches!(record, Record::Frame(_));
            let result = append_one(store, &record, current_frame);
            if result.is_err() && is_frame {
                report.rejected_frames += 1;
            }
            result.map(|()| record)
        });
        let record = match outcome {
            Ok(r) => r,
            Err(e @ (Error::Io(_) | Error::StorageFull { .. } | Error::ReadOnly)) => return Err(e),
            Err(e) => {
                report.rejected += 1;
                if report.errors.len() < opts.max_reported_errors {
                    report.errors.push(RejectedRecord {
                        index: index as u64,
                        reason: e.to_string(),
                    });
                }
                continue;
            }
        };
        match &record {
            Record::Frame(fm) => {
                current_frame = Some(fm.frame_id);
                widen(&mut span, fm.ts, fm.ts);
                report.frames += 1;
                since_refine += 1;
                if opts.refine_every.is_some_and(|k| since_refine >= k.max(1)) {
                    let r = run_refinement_pass(store, &opts.refine_policy)?;
                    report.refinement.absorb(r);
                    since_refine = 0;
                }
            }
            Record::Detection(_) => report.detections += 1,
            Record::Activity(a) => {
                widen(&mut span, a.start, a.end);
                saw_activity = true;
                report.activities += 1;
            }
        }
    }

    if report.frames + report.detections + report.activities == 0 {
        report.elapsed_seconds = started.elapsed().as_secs_f64();
        return Ok(report);
    }
    if saw_activity && opts.mark_activity_coverage {
        if let Some((from, to)) = span {
            store.mark_coverage(Coverage {
                subject: None,
                activity: None,
                range: TimeRange { from, to },
            })?;
        }
    }
    if opts.refine_every.is_some() {
        let r = run_refinement_pass(store, &opts.refine_policy)?;
        report.refinement.absorb(r);
    }
    store.checkpoint()?;
    report.elapsed_seconds = started.elapsed().as_secs_f64();
    report.rate_fps = if report.elapsed_seconds > 0.0 {
        report.frames as f64 / report.elapsed_seconds
    } else {
        0.0
    };
    store.record_ingest(IngestStamp {
        frames: report.frames,
        elapsed_seconds: report.elapsed_seconds,
        rate_fps: report.rate_fps,
    })?;
    Ok(report)
}

fn widen(span: &mut Option<(Timestamp, Timestamp)>, start: Timestamp, end: Timestamp) {
    *span = Some(match *span {
        None => (start, end),
        Some((a, b)) => (a.min(start), b.max(end)),
    });
}

fn append_one(store: &mut Store, record: &Record, current_frame: Option<u64>) -> Result<()> {
    if let Record::Detection(d) = record {
        if current_frame != Some(d.frame_id) {
            let reason = if store.snapshot().frame(d.frame_id).is_some() {
                "does not follow its frame"
            } else {
                "unknown frame"
            };
            return Err(InvalidRecord::new("frame_id", reason).into());
        }
    }
    store.append(record)
}
