use std::sync::{Arc, Mutex};

use crate::model::{
    ActivityEvent, Detection, EntityKind, FrameMeta, Provenance, TimeRange, Timestamp, Track,
};
use crate::store::state::StoreState;
use crate::store::{ActivitySummary, Coverage, DetectionSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Asc,
    Desc,
}

/// One label hit. `coarse` hits are synthesized from a tier summary's first or
/// last sighting rather than read from a raw detection.
#[derive(Clone, Debug, PartialEq)]
pub struct Sighting {
    pub frame: FrameMeta,
    pub detection: Detection,
    pub coarse: bool,
}

/// What a traced snapshot touched, for checking that queries stay in range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReadTrace {
    Frame(Timestamp),
    Span { start: Timestamp, end: Timestamp },
}

/// Immutable view of the store at one point in time.
#[derive(Clone)]
pub struct Snapshot {
    state: Arc<StoreState>,
    trace: Option<Arc<Mutex<Vec<ReadTrace>>>>,
}

impl std::fmt::Debug for Snapshot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Snapshot")
            .field("frames", &self.state.frames.len())
            .field("detections", &self.state.detections.len())
            .finish()
    }
}

impl Snapshot {
    pub(crate) fn new(state: Arc<StoreState>) -> Self {
        Snapshot { state, trace: None }
    }

    /// A copy of this snapshot that records every frame and span it reads.
    pub fn traced(&self) -> Snapshot {
        Snapshot {
            state: self.state.clone(),
            trace: Some(Arc::new(Mutex::new(Vec::new()))),
        }
    }

    pub fn take_trace(&self) -> Vec<ReadTrace> {
        self.trace
            .as_ref()
            .map(|t| std::mem::take(&mut *t.lock().unwrap()))
            .unwrap_or_default()
    }

    pub(crate) fn note(&self, t: ReadTrace) {
        if let Some(trace) = &self.trace {
            trace.lock().unwrap().push(t);
        }
    }

    pub fn frame_count(&self) -> usize {
        self.state.frames.len()
    }

    pub fn detection_count(&self) -> usize {
        self.state.detections.len()
    }

    pub fn frame(&self, frame_id: u64) -> Option<FrameMeta> {
        self.state.frame(frame_id).copied()
    }

    /// Timestamps of the first and last stored frame.
    pub fn span(&self) -> Option<TimeRange> {
        let first = self.state.frames.first()?;
        let last = self.state.frames.last()?;
        TimeRange::new(first.ts, last.ts)
    }

    /// Frames whose timestamp lies in `range`, ascending.
    pub fn frame_metas_in_range(&self, range: TimeRange) -> &[FrameMeta] {
        let frames = &self.state.frames;
        let lo = frames.partition_point(|f| f.ts < range.from);
        let hi = frames.partition_point(|f| f.ts <= range.to);
        &frames[lo..hi.max(lo)]
    }

    pub fn frames_in_range(&self, range: TimeRange) -> Vec<u64> {
        self.frame_metas_in_range(range)
            .iter()
            .map(|f| {
                self.note(ReadTrace::Frame(f.ts));
                f.frame_id
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.state.labels.iter().map(|(_, n)| n.to_owned()).collect()
    }

    /// Labels that have at least one hot detection or summary, with their kind.
    pub fn detected_labels(&self) -> Vec<(String, EntityKind)> {
        let mut out: Vec<(String, EntityKind)> = Vec::new();
        for row in &self.state.detections {
            let name = self.state.labels.name(row.label).unwrap_or_default();
            if !out.iter().any(|(l, k)| l == name && *k == row.kind) {
                out.push((name.to_owned(), row.kind));
            }
        }
        for s in self.state.det_summaries.values() {
            if !out.iter().any(|(l, k)| *l == s.label && *k == s.kind) {
                out.push((s.label.clone(), s.kind));
            }
        }
        out.sort();
        out
    }

    /// Sightings of `label` whose frame time lies in `range`, ordered by time
    /// and truncated to `limit`. Raw hot-tier detections come first-class;
    /// summarized ranges contribute their first and last sightings flagged coarse.
    pub fn find_by_label(
        &self,
        label: &str,
        range: TimeRange,
        order: Order,
        limit: Option<usize>,
    ) -> Vec<Sighting> {
        self.find_by_label_kind(label, None, range, order, limit)
    }

    pub fn find_by_label_kind(
        &self,
        label: &str,
        kind: Option<EntityKind>,
        range: TimeRange,
        order: Order,
        limit: Option<usize>,
    ) -> Vec<Sighting> {
        let limit = limit.unwrap_or(usize::MAX);
        let mut hits: Vec<(u32, Sighting)> = Vec::new();
        if limit == 0 {
            return Vec::new();
        }
        let state = &*self.state;
        if let Some(list) = state.labels.id(label).and_then(|id| state.postings.get(&id)) {
            let lo = list.partition_point(|p| p.ts < range.from);
            let hi = list.partition_point(|p| p.ts <= range.to).max(lo);
            let window = &list[lo..hi];
            let iter: Box<dyn Iterator<Item = _>> = match order {
                Order::Asc => Box::new(window.iter()),
                Order::Desc => Box::new(window.iter().rev()),
            };
            for p in iter {
                if hits.len() >= limit {
                    break;
                }
                let row = &state.detections[p.det as usize];
                if kind.is_some_and(|k| k != row.kind) {
                    continue;
                }
                self.note(ReadTrace::Frame(p.ts));
                if let Some(frame) = state.frame(p.frame_id) {
                    let sighting = Sighting {
                        frame: *frame,
                        detection: state.detection(p.det as usize),
                        coarse: false,
                    };
                    hits.push((p.det, sighting));
                }
            }
        }

        for s in self.detection_summaries(label, kind, range) {
            for (fid, ts) in [(s.first_frame, s.first_ts), (s.last_frame, s.last_ts)] {
                if !range.contains(ts) {
                    continue;
                }
                if hits.iter().any(|(_, h)| h.coarse && h.frame.frame_id == fid) {
                    continue;
                }
                if let Some(frame) = state.frame(fid) {
                    hits.push((u32::MAX, Sighting {
                        frame: *frame,
                        detection: Detection {
                            frame_id: fid,
                            label: s.label.clone(),
                            kind: s.kind,
                            confidence: s.noisy_or,
                            provenance: Provenance::Ingested,
                        },
                        coarse: true,
                    }));
                }
            }
        }
        hits.sort_by_key(|(det, h)| (h.frame.ts, h.frame.frame_id, *det));
        if order == Order::Desc {
            hits.reverse();
        }
        hits.truncate(limit);
        hits.into_iter().map(|(_, h)| h).collect()
    }

    /// Tier summaries for `label` whose sighting span intersects `range`.
    pub fn detection_summaries(
        &self,
        label: &str,
        kind: Option<EntityKind>,
        range: TimeRange,
    ) -> Vec<&DetectionSummary> {
        let out: Vec<&DetectionSummary> = self
            .state
            .det_summaries
            .values()
            .filter(|s| s.label == label && kind.is_none_or(|k| k == s.kind))
            .filter(|s| range.intersects(s.first_ts, s.last_ts))
            .collect();
        for s in &out {
            self.note(ReadTrace::Span {
                start: s.first_ts,
                end: s.last_ts,
            });
        }
        out
    }

    pub fn all_detection_summaries(&self) -> impl Iterator<Item = &DetectionSummary> {
        self.state.det_summaries.values()
    }

    pub fn activities(&self) -> &[ActivityEvent] {
        &self.state.activities
    }

    /// Activity events named `name` (and by `subject`, when given) that overlap `range`.
    pub fn activities_matching(
        &self,
        name: &str,
        subject: Option<&str>,
        range: TimeRange,
    ) -> Vec<&ActivityEvent> {
        let out: Vec<&ActivityEvent> = self
            .state
            .activities
            .iter()
            .filter(|a| a.name == name && subject.is_none_or(|s| s == a.subject))
            .filter(|a| range.intersects(a.start, a.end))
            .collect();
        for a in &out {
            self.note(ReadTrace::Span {
                start: a.start,
                end: a.end,
            });
        }
        out
    }

    pub fn activity_summaries_matching(
        &self,
        name: &str,
        subject: Option<&str>,
        range: TimeRange,
    ) -> Vec<&ActivitySummary> {
        let out: Vec<&ActivitySummary> = self
            .state
            .act_summaries
            .values()
            .filter(|s| s.name == name && subject.is_none_or(|x| x == s.subject))
            .filter(|s| {
                let end = s.bucket_start.plus_micros(s.tier.bucket_micros());
                range.intersects(s.bucket_start, end)
            })
            .collect();
        for s in &out {
            self.note(ReadTrace::Span {
                start: s.bucket_start,
                end: s.bucket_start.plus_micros(s.tier.bucket_micros()),
            });
        }
        out
    }

    pub fn all_activity_summaries(&self) -> impl Iterator<Item = &ActivitySummary> {
        self.state.act_summaries.values()
    }

    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.state.tracks.values()
    }

    pub fn track(&self, id: u64) -> Option<&Track> {
        self.state.tracks.get(&id)
    }

    pub fn tracks_for(&self, label: &str, kind: EntityKind) -> impl Iterator<Item = &Track> {
        let label = label.to_owned();
        self.state
            .tracks
            .values()
            .filter(move |t| t.label == label && t.kind == kind)
    }

    pub fn coverage(&self) -> &[Coverage] {
        &self.state.coverage
    }

    /// True when coverage entries applicable to `(subject, activity)` jointly
    /// span all of `range`. A subject-specific entry never covers a query
    /// about any subject.
    pub fn is_covered(&self, subject: Option<&str>, activity: &str, range: TimeRange) -> bool {
        let mut spans: Vec<TimeRange> = self
            .state
            .coverage
            .iter()
            .filter(|c| c.activity.as_deref().is_none_or(|a| a == activity))
            .filter(|c| match (&c.subject, subject) {
                (None, _) => true,
                (Some(cs), Some(qs)) => cs == qs,
                (Some(_), None) => false,
            })
            .map(|c| c.range)
            .collect();
        spans.sort_by_key(|r| r.from);
        let mut reached = range.from;
        let mut started = false;
        for span in spans {
            if span.to < reached {
                continue;
            }
            if span.from > reached {
                return false;
            }
            started = true;
            reached = span.to;
            if reached >= range.to {
                return true;
            }
        }
        started && reached >= range.to
    }

    pub fn refine_watermark(&self) -> u64 {
        self.state.refine_watermark
    }
}
