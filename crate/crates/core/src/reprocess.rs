//! Budgeted re-analysis of archived frames when stored data cannot answer a
//! query, and the merge of the results back into the store.

use std::io::{self, BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{feed_line, read_feed, GroundTruth, OBJECT_VOCABULARY, PERSON_VOCABULARY};
use crate::model::{
    validate_feed_record, ActivityEvent, Detection, EntityKind, FrameMeta, LocationEstimate, Provenance, QueryAst,
    Record, ReprocessRequest, TimeRange,
};
use crate::refine::{run_refinement_pass, RefinePolicy, RefinementReport};
use crate::store::{Coverage, Order, Snapshot, Store};

pub const DEFAULT_BUDGET: usize = 256;

/// Spread of the oracle's activity locations; it knows where each one happened.
const ORACLE_LOC_SIGMA_M: f64 = 0.5;

/// Picks at most `budget` frames to re-analyse. With a label, candidates are
/// frames holding that label (raw sightings, plus every frame inside a
/// summarized sighting span); without one, every frame in `range`. Oversized
/// candidate sets are thinned to evenly spaced picks that keep both ends.
pub fn select_frames(
    snap: &Snapshot,
    query: &QueryAst,
    predicate_label: Option<&str>,
    range: TimeRange,
    budget: usize,
) -> Result<ReprocessRequest> {
    if budget == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    let mut candidates: Vec<u64> = match predicate_label {
        Some(label) => {
            let mut ids: Vec<u64> = snap
                .find_by_label(label, range, Order::Asc, None)
                .into_iter()
                .filter(|s| !s.coarse)
                .map(|s| s.frame.frame_id)
                .collect();
            for s in snap.detection_summaries(label, None, range) {
                if let Some((lo, hi)) = range.clip(s.first_ts, s.last_ts) {
                    ids.extend(snap.frames_in_range(TimeRange { from: lo, to: hi }));
                }
            }
            ids.sort_unstable();
            ids.dedup();
            ids
        }
        None => snap.frames_in_range(range),
    };
    if candidates.len() > budget {
        candidates = downsample(&candidates, budget);
    }
    Ok(ReprocessRequest {
        query: query.clone(),
        predicate_label: predicate_label.map(str::to_owned),
        range,
        frame_ids: candidates,
        budget,
    })
}

/// `budget` picks at rounded positions `i·(n−1)/(budget−1)`; a budget of one
/// keeps the latest.
pub fn downsample<T: Copy>(sorted: &[T], budget: usize) -> Vec<T> {
    let n = sorted.len();
    if n <= budget {
        return sorted.to_vec();
    }
    if budget == 1 {
        return vec![sorted[n - 1]];
    }
    let (span, steps) = ((n - 1) as u128, (budget - 1) as u128);
    (0..budget as u128)
        .map(|i| sorted[((i * span + steps / 2) / steps) as usize])
        .collect()
}

/// Re-analyses a set of archived frames. Implementations may sit behind a
/// process boundary; see [`write_request`] and [`read_response`].
pub trait Reprocessor {
    fn reprocess(
        &mut self,
        request: &ReprocessRequest,
        frames: &[FrameMeta],
    ) -> std::result::Result<Vec<Record>, String>;
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReprocessReport {
    pub frames_requested: u64,
    pub records_added: u64,
    pub detections_added: u64,
    pub activities_added: u64,
    pub coverage_marked: bool,
    pub refinement: RefinementReport,
}

/// Runs `reprocessor` over the request and commits its output. Output is
/// validated in full before anything is written, so a failing or misbehaving
/// reprocessor leaves the store untouched.
pub fn run_reprocess(
    store: &mut Store,
    request: &ReprocessRequest,
    reprocessor: &mut dyn Reprocessor,
    policy: &RefinePolicy,
) -> Result<ReprocessReport> {
    if store.is_read_only() {
        return Err(Error::ReadOnly);
    }
    if request.frame_ids.len() > request.budget.max(1) {
        return Err(Error::InvalidArgument("request exceeds its budget".into()));
    }
    if request.frame_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("request frame ids must be strictly increasing".into()));
    }
    let snap = store.snapshot();
    let mut frames = Vec::with_capacity(request.frame_ids.len());
    for &id in &request.frame_ids {
        let fm = snap.frame(id).ok_or(Error::UnknownFrame(id))?;
        if !request.range.contains(fm.ts) {
            return Err(Error::InvalidArgument(format!("frame {id} lies outside the request range")));
        }
        frames.push(fm);
    }

    let output = reprocessor
        .reprocess(request, &frames)
        .map_err(Error::ReprocessorFailure)?;
    let records = check_output(request, &frames, output)?;

    let mut report = ReprocessReport {
        frames_requested: frames.len() as u64,
        ..Default::default()
    };
    for r in &records {
        store.append(r)?;
        report.records_added += 1;
        match r {
            Record::Detection(_) => report.detections_added += 1,
            Record::Activity(_) => report.activities_added += 1,
            Record::Frame(_) => {}
        }
    }
    if let Some((activity, subject)) = request.query.activity() {
        store.mark_coverage(Coverage {
            subject: subject.map(str::to_owned),
            activity: Some(activity.to_owned()),
            range: request.range,
        })?;
        report.coverage_marked = true;
    }
    store.flush()?;
    report.refinement = run_refinement_pass(store, policy)?;
    Ok(report)
}

fn check_output(request: &ReprocessRequest, frames: &[FrameMeta], output: Vec<Record>) -> Result<Vec<Record>> {
    let fail = |why: String| Err(Error::ReprocessorFailure(why));
    let span = match (frames.iter().map(|f| f.ts).min(), frames.iter().map(|f| f.ts).max()) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let mut out = Vec::with_capacity(output.len());
    for record in output {
        let record = match record {
            Record::Frame(fm) => return fail(format!("returned a frame record ({})", fm.frame_id)),
            Record::Detection(d) => {
                if request.frame_ids.binary_search(&d.frame_id).is_err() {
                    return fail(format!("detection references unrequested frame {}", d.frame_id));
                }
                Record::Detection(Detection {
                    provenance: Provenance::Reprocessed,
                    ..d
                })
            }
            Record::Activity(a) => {
                let inside = span.is_some_and(|(lo, hi)| lo <= a.start && a.end <= hi);
                if !inside {
                    return fail(format!(
                        "activity {} {}..{} lies outside the requested frames",
                        a.name, a.start, a.end
                    ));
                }
                Record::Activity(ActivityEvent {
                    provenance: Provenance::Reprocessed,
                    ..a
                })
            }
        };
        if let Err(e) = validate_feed_record(&record) {
            return fail(e.to_string());
        }
        out.push(record);
    }
    Ok(out)
}

/// Stand-in for re-running perception: answers from the scenario's ground
/// truth, optionally degraded by the same recall and label-noise knobs as the
/// live feed.
///
/// Detections are returned only for the request's predicate label. For an
/// activity query, each selected frame where the activity is in progress
/// contributes the gap to the next selected frame (the last frame contributes
/// nothing), and consecutive contributions from one scheduled occurrence are
/// joined into a single event located at the scheduled spot.
pub struct OracleReprocessor {
    truth: GroundTruth,
    pub recall: f64,
    pub label_noise: f64,
    rng: ChaCha8Rng,
}

impl OracleReprocessor {
    pub fn new(truth: GroundTruth) -> Self {
        OracleReprocessor::noisy(truth, 1.0, 0.0, 0)
    }

    pub fn noisy(truth: GroundTruth, recall: f64, label_noise: f64, seed: u64) -> Self {
        OracleReprocessor {
            truth,
            recall,
            label_noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    fn detections(&mut self, label: &str, frames: &[FrameMeta], out: &mut Vec<Record>) {
        for fm in frames {
            let Some(idx) = self.truth.frame_index(fm.frame_id) else {
                continue;
            };
            for (seen, kind) in &self.truth.visible[idx] {
                if seen != label {
                    continue;
                }
                let keep: f64 = self.rng.random();
                let noise: f64 = self.rng.random();
                if keep >= self.recall {
                    continue;
                }
                let mut emitted = seen.clone();
                if noise < self.label_noise {
                    let vocab = match kind {
                        EntityKind::Object => OBJECT_VOCABULARY,
                        EntityKind::Person => PERSON_VOCABULARY,
                    };
                    let others: Vec<&&str> = vocab.iter().filter(|l| **l != seen).collect();
                    if let Some(other) = others.choose(&mut self.rng) {
                        emitted = other.to_string();
                    }
                }
                out.push(Record::Detection(Detection {
                    frame_id: fm.frame_id,
                    label: emitted,
                    kind: *kind,
                    confidence: 1.0,
                    provenance: Provenance::Reprocessed,
                }));
            }
        }
    }

    fn activities(&mut self, name: &str, subject: Option<&str>, frames: &[FrameMeta], out: &mut Vec<Record>) {
        let mut sorted: Vec<FrameMeta> = frames.to_vec();
        sorted.sort_by_key(|f| f.ts);
        // (schedule index, run start, run end)
        let mut runs: Vec<(usize, FrameMeta, FrameMeta)> = Vec::new();
        for (i, fm) in sorted.iter().enumerate() {
            let next = sorted.get(i + 1).copied().unwrap_or(*fm);
            let active = self.truth.activities.iter().enumerate().filter(|(_, a)| {
                a.name == name
                    && subject.is_none_or(|s| s == a.subject)
                    && a.start <= fm.ts
                    && fm.ts < a.end
            });
            for (k, _) in active {
                if self.rng.random::<f64>() >= self.recall {
                    continue;
                }
                match runs.iter_mut().rev().find(|(rk, _, end)| *rk == k && end.frame_id == fm.frame_id) {
                    Some(run) => run.2 = next,
                    None => runs.push((k, *fm, next)),
                }
            }
        }
        for (k, start, end) in runs {
            let a = &self.truth.activities[k];
            out.push(Record::Activity(ActivityEvent {
                subject: a.subject.clone(),
                name: a.name.clone(),
                start: start.ts,
                end: end.ts,
                loc: Some(LocationEstimate::isotropic(a.location, ORACLE_LOC_SIGMA_M)),
                prob: 1.0,
                provenance: Provenance::Reprocessed,
            }));
        }
    }
}

impl Reprocessor for OracleReprocessor {
    fn reprocess(
        &mut self,
        request: &ReprocessRequest,
        frames: &[FrameMeta],
    ) -> std::result::Result<Vec<Record>, String> {
        let mut out = Vec::new();
        if let Some(label) = &request.predicate_label {
            self.detections(label, frames, &mut out);
        }
        if let Some((name, subject)) = request.query.activity() {
            self.activities(name, subject, frames, &mut out);
        }
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
struct RequestHeader<'a> {
    #[serde(rename = "type")]
    tag: &'a str,
    #[serde(flatten)]
    request: ReprocessRequest,
}

/// Writes a request as JSONL: one `{"type":"request",...}` line followed by
/// the selected frames in feed form.
pub fn write_request(out: &mut impl Write, request: &ReprocessRequest, frames: &[FrameMeta]) -> io::Result<()> {
    let header = RequestHeader {
        tag: "request",
        request: request.clone(),
    };
    serde_json::to_writer(&mut *out, &header)?;
    out.write_all(b"\n")?;
    for fm in frames {
        out.write_all(feed_line(&Record::Frame(*fm)).as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_request(input: impl BufRead) -> Result<(ReprocessRequest, Vec<FrameMeta>)> {
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Parse {
            line_no: 1,
            reason: "empty request".into(),
        })??;
    let header: RequestHeader = serde_json::from_str(&first).map_err(|e| Error::Parse {
        line_no: 1,
        reason: e.to_string(),
    })?;
    if header.tag != "request" {
        return Err(Error::Parse {
            line_no: 1,
            reason: format!("expected a request header, found type {}", header.tag),
        });
    }
    let rest: Vec<String> = lines.collect::<io::Result<_>>()?;
    let mut frames = Vec::new();
    for (i, line) in rest.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match crate::ingest::parse_feed_line(line, i + 2)? {
            Record::Frame(fm) => frames.push(fm),
            _ => {
                return Err(Error::Parse {
                    line_no: i + 2,
                    reason: "only frame records may follow a request header".into(),
                })
            }
        }
    }
    Ok((header.request, frames))
}

/// Response lines use the feed format (detections and activities).
pub fn write_response(out: &mut impl Write, records: &[Record]) -> io::Result<()> {
    crate::ingest::write_feed(out, records)
}

pub fn read_response(input: impl BufRead) -> Result<Vec<Record>> {
    read_feed(input).collect()
}
