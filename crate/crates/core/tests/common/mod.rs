//! Reference implementations used as test oracles. Everything here works
//! straight off the raw feed with plain loops and recomputes from scratch;
//! none of it calls into the engine's store, refine or query code.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use robomem_core::ingest::{ingest_stream, IngestOptions};
use robomem_core::{
    ActivityEvent, Answer, Bucket, BucketSeconds, Detection, EntityKind, FrameMeta, Pose,
    Provenance, QueryAst, Record, Store, Timestamp,
};

pub const SIGMA: f64 = 2.0;
pub const MAX_GAP_S: f64 = 5.0;
pub const MAX_MAHALANOBIS: f64 = 3.0;
pub const MERGE_GAP_S: f64 = 60.0;
pub const BUDGET: usize = 256;
pub const CELL_M: f64 = 1.0;

/// Tolerance for comparing fused means, covariances and probabilities.
pub const LOC_TOL: f64 = 1e-9;

/// 2019-06-01T00:00:00Z
pub const T0: Timestamp = Timestamp::from_secs(1_559_347_200);

pub fn at(secs: i64) -> Timestamp {
    T0.plus_micros(secs * 1_000_000)
}

pub fn frame(id: u64, secs: i64, x: f64, y: f64) -> Record {
    Record::Frame(FrameMeta {
        frame_id: id,
        ts: at(secs),
        pose: Pose::planar(x, y, 0.0),
    })
}

pub fn sighting(id: u64, label: &str, kind: EntityKind, conf: f64) -> Record {
    Record::Detection(Detection::new(id, label, kind, conf))
}

pub fn activity(subject: &str, name: &str, from_s: i64, to_s: i64, loc: Option<[f64; 2]>) -> Record {
    Record::Activity(ActivityEvent {
        subject: subject.into(),
        name: name.into(),
        start: at(from_s),
        end: at(to_s),
        loc: loc.map(|p| robomem_core::LocationEstimate::isotropic(p, 1.0)),
        prob: 1.0,
        provenance: Provenance::Ingested,
    })
}

/// Fresh store holding `records`, refined once at the end.
pub fn store_with(records: Vec<Record>) -> (tempfile::TempDir, Store) {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::init(dir.path()).unwrap();
    let report = ingest_stream(
        records.into_iter().map(Ok),
        &mut store,
        &IngestOptions {
            refine_every: Some(u64::MAX),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(report.rejected, 0, "{:?}", report.errors);
    (dir, store)
}

type Mat = [[f64; 2]; 2];

fn inv(m: Mat) -> Mat {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]]
}

/// Batch Gaussian fusion: precision-weighted average of the given points,
/// each with isotropic variance `SIGMA²`.
pub fn batch_fuse(points: &[[f64; 2]]) -> ([f64; 2], Mat) {
    let w = 1.0 / (SIGMA * SIGMA);
    let mut info = [[0.0; 2]; 2];
    let mut vec = [0.0; 2];
    for p in points {
        info[0][0] += w;
        info[1][1] += w;
        vec[0] += w * p[0];
        vec[1] += w * p[1];
    }
    let cov = inv(info);
    let mean = [
        cov[0][0] * vec[0] + cov[0][1] * vec[1],
        cov[1][0] * vec[0] + cov[1][1] * vec[1],
    ];
    (mean, cov)
}

#[derive(Clone, Debug)]
pub struct NaiveTrack {
    pub id: u64,
    pub label: String,
    pub kind: EntityKind,
    /// (ts, frame_id, pose xy, confidence) of every attributed detection, in attribution order.
    pub members: Vec<(Timestamp, u64, [f64; 2], f64)>,
}

impl NaiveTrack {
    pub fn fused(&self) -> ([f64; 2], Mat) {
        let pts: Vec<[f64; 2]> = self.members.iter().map(|m| m.2).collect();
        batch_fuse(&pts)
    }

    /// Presence intervals rebuilt from member times.
    pub fn intervals(&self) -> Vec<(Timestamp, Timestamp)> {
        let mut ts: Vec<Timestamp> = self.members.iter().map(|m| m.0).collect();
        ts.sort();
        let mut out: Vec<(Timestamp, Timestamp)> = Vec::new();
        for t in ts {
            match out.last_mut() {
                Some(last) if last.1.seconds_until(t) <= MERGE_GAP_S => last.1 = t,
                _ => out.push((t, t)),
            }
        }
        out
    }

    pub fn last_seen(&self) -> Timestamp {
        self.members.iter().map(|m| m.0).max().unwrap()
    }

    pub fn existence(&self) -> f64 {
        let mut miss = 1.0;
        for m in &self.members {
            miss *= 1.0 - m.3;
        }
        1.0 - miss
    }

    fn gap_to(&self, ts: Timestamp) -> f64 {
        self.intervals()
            .iter()
            .map(|&(a, b)| {
                if ts < a {
                    ts.seconds_until(a)
                } else if ts > b {
                    b.seconds_until(ts)
                } else {
                    0.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Sequential nearest-neighbour tracker that refits each track from all of
/// its members before every decision.
pub fn naive_tracks(frames: &[FrameMeta], detections: &[Detection]) -> Vec<NaiveTrack> {
    let index: HashMap<u64, FrameMeta> = frames.iter().map(|f| (f.frame_id, *f)).collect();
    let frame_of = |id: u64| index.get(&id).copied();
    let mut tracks: Vec<NaiveTrack> = Vec::new();
    for d in detections {
        let Some(fm) = frame_of(d.frame_id) else { continue };
        let p = [fm.pose.x, fm.pose.y];
        let mut best: Option<(f64, usize)> = None;
        for (i, t) in tracks.iter().enumerate() {
            if t.label != d.label || t.kind != d.kind {
                continue;
            }
            if t.members.iter().any(|m| m.1 == fm.frame_id) {
                continue;
            }
            if t.gap_to(fm.ts) > MAX_GAP_S {
                continue;
            }
            let (mean, cov) = t.fused();
            let s = [[cov[0][0] + SIGMA * SIGMA, cov[0][1]], [cov[1][0], cov[1][1] + SIGMA * SIGMA]];
            let si = inv(s);
            let dx = [p[0] - mean[0], p[1] - mean[1]];
            let d2 = dx[0] * (si[0][0] * dx[0] + si[0][1] * dx[1]) + dx[1] * (si[1][0] * dx[0] + si[1][1] * dx[1]);
            let dist = d2.max(0.0).sqrt();
            if dist > MAX_MAHALANOBIS {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bi)) => dist < bd || (dist == bd && t.id < tracks[bi].id),
            };
            if better {
                best = Some((dist, i));
            }
        }
        let member = (fm.ts, fm.frame_id, p, d.confidence);
        match best {
            Some((_, i)) => tracks[i].members.push(member),
            None => {
                let id = tracks.len() as u64;
                tracks.push(NaiveTrack {
                    id,
                    label: d.label.clone(),
                    kind: d.kind,
                    members: vec![member],
                });
            }
        }
    }
    tracks
}

/// Brute-force query evaluator over a raw feed.
pub struct FeedOracle {
    pub frames: Vec<FrameMeta>,
    pub detections: Vec<Detection>,
    pub activities: Vec<ActivityEvent>,
    pub tracks: Vec<NaiveTrack>,
    /// Span marked covered by activity recognition at ingest, if the feed had activities.
    pub covered: Option<(Timestamp, Timestamp)>,
    by_id: HashMap<u64, usize>,
}

impl FeedOracle {
    /// Mirrors what a clean ingest keeps: frames with strictly increasing ids,
    /// detections directly after their own frame.
    pub fn from_feed(records: &[Record]) -> Self {
        let mut frames: Vec<FrameMeta> = Vec::new();
        let mut detections = Vec::new();
        let mut activities = Vec::new();
        for r in records {
            match r {
                Record::Frame(fm) => {
                    if frames.last().is_none_or(|l| l.frame_id < fm.frame_id && l.ts <= fm.ts) {
                        frames.push(*fm);
                    }
                }
                Record::Detection(d) => {
                    if frames.last().is_some_and(|l| l.frame_id == d.frame_id) {
                        detections.push(d.clone());
                    }
                }
                Record::Activity(a) => activities.push(a.clone()),
            }
        }
        let covered = if activities.is_empty() {
            None
        } else {
            let mut lo = Timestamp::MAX;
            let mut hi = Timestamp::MIN;
            for f in &frames {
                lo = lo.min(f.ts);
                hi = hi.max(f.ts);
            }
            for a in &activities {
                lo = lo.min(a.start);
                hi = hi.max(a.end);
            }
            Some((lo, hi))
        };
        let tracks = naive_tracks(&frames, &detections);
        let by_id = frames.iter().enumerate().map(|(i, f)| (f.frame_id, i)).collect();
        FeedOracle {
            frames,
            detections,
            activities,
            tracks,
            covered,
            by_id,
        }
    }

    fn ts_of(&self, frame_id: u64) -> Timestamp {
        self.frame(frame_id).ts
    }

    fn frame(&self, frame_id: u64) -> FrameMeta {
        self.frames[self.by_id[&frame_id]]
    }

    pub fn answer(&self, q: &QueryAst) -> Answer {
        match q {
            QueryAst::LastSeen { entity } => self.last_seen(&entity.label, entity.kind),
            QueryAst::Present { entity, range } => self.present(&entity.label, entity.kind, range.from, range.to),
            QueryAst::Did { activity, subject, range } => {
                if let Some(esc) = self.escalation(q, activity, subject.as_deref(), range.from, range.to) {
                    return esc;
                }
                let segs = self.elementary(activity, subject.as_deref(), range.from, range.to);
                let micros: i64 = segs.iter().map(|s| s.1.as_micros() - s.0.as_micros()).sum();
                let hits: Vec<&ActivityEvent> = self
                    .matching(activity, subject.as_deref())
                    .filter(|e| overlap(e.start, e.end, range.from, range.to) > 0)
                    .collect();
                Answer::Bool {
                    value: micros > 0,
                    prob: hits.iter().map(|e| e.prob).fold(0.0, f64::max),
                    supporting_frames: Vec::new(),
                    count: hits.len() as u64,
                    coarse: false,
                }
            }
            QueryAst::Duration {
                activity,
                subject,
                range,
                bucket,
            } => {
                if let Some(esc) = self.escalation(q, activity, subject.as_deref(), range.from, range.to) {
                    return esc;
                }
                let segs = self.elementary(activity, subject.as_deref(), range.from, range.to);
                let total: i64 = segs.iter().map(|s| s.1.as_micros() - s.0.as_micros()).sum();
                let mut per: BTreeMap<i64, i64> = BTreeMap::new();
                if let Some(b) = bucket {
                    let w = match b {
                        Bucket::Hour => 3_600_000_000i64,
                        Bucket::Day => 86_400_000_000i64,
                    };
                    for (a, z) in &segs {
                        // walk one microsecond-exact bucket at a time
                        let mut at = a.as_micros();
                        while at < z.as_micros() {
                            let start = at.div_euclid(w) * w;
                            let end = (start + w).min(z.as_micros());
                            *per.entry(start).or_default() += end - at;
                            at = end;
                        }
                    }
                }
                Answer::Duration {
                    total_seconds: total as f64 / 1e6,
                    per_bucket: per
                        .into_iter()
                        .filter(|(_, m)| *m > 0)
                        .map(|(b, m)| BucketSeconds {
                            bucket_start: Timestamp::from_micros(b),
                            seconds: m as f64 / 1e6,
                        })
                        .collect(),
                    coarse: false,
                }
            }
            QueryAst::WhereMost { activity, subject, range } => {
                if let Some(esc) = self.escalation(q, activity, subject.as_deref(), range.from, range.to) {
                    return esc;
                }
                self.where_most(activity, subject.as_deref(), range.from, range.to)
            }
        }
    }

    fn last_seen(&self, label: &str, kind: EntityKind) -> Answer {
        // latest by (ts, frame, append position)
        let mut best: Option<(Timestamp, u64, usize)> = None;
        for (i, d) in self.detections.iter().enumerate() {
            if d.label != label || d.kind != kind {
                continue;
            }
            let key = (self.ts_of(d.frame_id), d.frame_id, i);
            if best.is_none_or(|b| key > b) {
                best = Some(key);
            }
        }
        let Some((ts, frame_id, i)) = best else {
            return Answer::NotFound { coarse: false };
        };
        let track = self
            .tracks
            .iter()
            .filter(|t| t.label == label && t.kind == kind && t.last_seen() == ts)
            .min_by_key(|t| t.id);
        let (mean, cov, confidence) = match track {
            Some(t) => {
                let (m, c) = t.fused();
                (m, c, t.existence())
            }
            None => {
                let f = self.frame(frame_id);
                ([f.pose.x, f.pose.y], [[SIGMA * SIGMA, 0.0], [0.0, SIGMA * SIGMA]], self.detections[i].confidence)
            }
        };
        let loc = robomem_core::LocationEstimate {
            mean,
            cov: robomem_core::Cov2::new(cov[0][0], cov[0][1], cov[1][1]),
        };
        Answer::Location {
            loc,
            ts,
            frame_id,
            confidence,
            coarse: false,
        }
    }

    fn present(&self, label: &str, kind: EntityKind, from: Timestamp, to: Timestamp) -> Answer {
        if !self.frames.iter().any(|f| from <= f.ts && f.ts <= to) {
            return Answer::NotFound { coarse: false };
        }
        let mut frames = Vec::new();
        let mut miss = 1.0;
        let mut count = 0;
        for d in &self.detections {
            let ts = self.ts_of(d.frame_id);
            if d.label == label && d.kind == kind && from <= ts && ts <= to {
                frames.push(d.frame_id);
                miss *= 1.0 - d.confidence;
                count += 1;
            }
        }
        frames.sort();
        frames.dedup();
        Answer::Bool {
            value: count > 0,
            prob: 1.0 - miss,
            supporting_frames: frames,
            count,
            coarse: false,
        }
    }

    fn matching<'a>(&'a self, activity: &'a str, subject: Option<&'a str>) -> impl Iterator<Item = &'a ActivityEvent> {
        self.activities
            .iter()
            .filter(move |e| e.name == activity && subject.is_none_or(|s| s == e.subject))
    }

    fn escalation(&self, q: &QueryAst, activity: &str, subject: Option<&str>, from: Timestamp, to: Timestamp) -> Option<Answer> {
        let any = self.matching(activity, subject).any(|e| e.start <= to && e.end >= from);
        let covered = self.covered.is_some_and(|(lo, hi)| lo <= from && to <= hi);
        if any || covered {
            return None;
        }
        let all: Vec<u64> = self
            .frames
            .iter()
            .filter(|f| from <= f.ts && f.ts <= to)
            .map(|f| f.frame_id)
            .collect();
        let picked: Vec<u64> = if all.len() <= BUDGET {
            all
        } else {
            let n = all.len();
            (0..BUDGET)
                .map(|i| all[(i as f64 * (n - 1) as f64 / (BUDGET - 1) as f64).round() as usize])
                .collect()
        };
        Some(Answer::NeedsReprocess {
            request: robomem_core::ReprocessRequest {
                query: q.clone(),
                predicate_label: None,
                range: robomem_core::TimeRange { from, to },
                frame_ids: picked,
                budget: BUDGET,
            },
            coarse: false,
        })
    }

    /// Elementary segments of `[from, to]` during which at least one matching
    /// event is running, counted once per subject.
    fn elementary(&self, activity: &str, subject: Option<&str>, from: Timestamp, to: Timestamp) -> Vec<(Timestamp, Timestamp)> {
        let events: Vec<&ActivityEvent> = self.matching(activity, subject).collect();
        let mut subjects: Vec<&str> = events.iter().map(|e| e.subject.as_str()).collect();
        subjects.sort();
        subjects.dedup();
        let mut out = Vec::new();
        for s in subjects {
            let mine: Vec<(Timestamp, Timestamp)> = events
                .iter()
                .filter(|e| e.subject == s)
                .map(|e| (e.start.max(from), e.end.min(to)))
                .filter(|(a, b)| a < b)
                .collect();
            out.extend(covered_segments(&mine));
        }
        out
    }

    fn where_most(&self, activity: &str, subject: Option<&str>, from: Timestamp, to: Timestamp) -> Answer {
        // (subject, cell) -> clipped spans
        let mut spans: BTreeMap<(String, (i64, i64)), Vec<(Timestamp, Timestamp)>> = BTreeMap::new();
        for e in self.matching(activity, subject) {
            let (a, b) = (e.start.max(from), e.end.min(to));
            if a >= b {
                continue;
            }
            let mean = match e.loc {
                Some(l) => l.mean,
                None => {
                    let pts: Vec<[f64; 2]> = self
                        .detections
                        .iter()
                        .filter(|d| d.label == e.subject && d.kind == EntityKind::Person)
                        .map(|d| self.frame(d.frame_id))
                        .filter(|f| a <= f.ts && f.ts <= b)
                        .map(|f| [f.pose.x, f.pose.y])
                        .collect();
                    if pts.is_empty() {
                        continue;
                    }
                    batch_fuse(&pts).0
                }
            };
            let cell = ((mean[0] / CELL_M).floor() as i64, (mean[1] / CELL_M).floor() as i64);
            spans.entry((e.subject.clone(), cell)).or_default().push((a, b));
        }
        let mut per_cell: BTreeMap<(i64, i64), i64> = BTreeMap::new();
        for ((_, cell), list) in spans {
            let m: i64 = covered_segments(&list).iter().map(|(a, b)| b.as_micros() - a.as_micros()).sum();
            *per_cell.entry(cell).or_default() += m;
        }
        let max = per_cell.values().copied().max().unwrap_or(0);
        if max <= 0 {
            return Answer::NotFound { coarse: false };
        }
        let cell = per_cell.iter().filter(|(_, m)| **m == max).map(|(c, _)| *c).min().unwrap();
        Answer::Place {
            cell,
            cell_center: [(cell.0 as f64 + 0.5) * CELL_M, (cell.1 as f64 + 0.5) * CELL_M],
            seconds: max as f64 / 1e6,
            coarse: false,
        }
    }
}

fn overlap(a: Timestamp, b: Timestamp, from: Timestamp, to: Timestamp) -> i64 {
    let lo = a.max(from);
    let hi = b.min(to);
    (hi.as_micros() - lo.as_micros()).max(0)
}

/// Cuts the timeline at every endpoint and keeps the pieces some span covers.
fn covered_segments(spans: &[(Timestamp, Timestamp)]) -> Vec<(Timestamp, Timestamp)> {
    let mut cuts: Vec<Timestamp> = spans.iter().flat_map(|&(a, b)| [a, b]).collect();
    cuts.sort();
    cuts.dedup();
    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if spans.iter().any(|&(s, e)| s <= a && b <= e) {
            out.push((a, b));
        }
    }
    out
}

/// Compares two answers field by field: exact for everything discrete and for
/// durations, `LOC_TOL` for fused locations and probabilities.
pub fn answers_match(engine: &Answer, oracle: &Answer) -> Result<(), String> {
    let close = |a: f64, b: f64| (a - b).abs() <= LOC_TOL;
    match (engine, oracle) {
        (
            Answer::Location { loc: l1, ts: t1, frame_id: f1, confidence: c1, coarse: k1 },
            Answer::Location { loc: l2, ts: t2, frame_id: f2, confidence: c2, coarse: k2 },
        ) => {
            let ok = t1 == t2
                && f1 == f2
                && k1 == k2
                && close(*c1, *c2)
                && close(l1.mean[0], l2.mean[0])
                && close(l1.mean[1], l2.mean[1])
                && close(l1.cov.xx, l2.cov.xx)
                && close(l1.cov.xy, l2.cov.xy)
                && close(l1.cov.yy, l2.cov.yy);
            ok.then_some(()).ok_or_else(|| format!("{engine:?} != {oracle:?}"))
        }
        (
            Answer::Bool { value: v1, prob: p1, supporting_frames: s1, count: n1, coarse: k1 },
            Answer::Bool { value: v2, prob: p2, supporting_frames: s2, count: n2, coarse: k2 },
        ) => (v1 == v2 && s1 == s2 && n1 == n2 && k1 == k2 && close(*p1, *p2))
            .then_some(())
            .ok_or_else(|| format!("{engine:?} != {oracle:?}")),
        _ => (engine == oracle).then_some(()).ok_or_else(|| format!("{engine:?} != {oracle:?}")),
    }
}
