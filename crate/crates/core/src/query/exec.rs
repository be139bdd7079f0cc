use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::{
    cell_center, grid_cell, Answer, Bucket, BucketSeconds, EntityKind, LocationEstimate, QueryAst,
    TimeRange, Timestamp, MICROS_PER_SEC,
};
use crate::refine::{existence_probability, fuse_all, RefinePolicy};
use crate::reprocess::select_frames;
use crate::store::{ActivitySummary, DetectionSummary, Order, Sighting, Snapshot};
use crate::model::{ActivityEvent, ReprocessRequest, Track};

use super::plan::{plan, Plan, PlanStep, Reducer};
use super::parse_query;

#[derive(Clone, Debug)]
pub struct QueryContext {
    /// Reference time for existence decay; defaults to the newest stored frame.
    pub now: Option<Timestamp>,
    /// Frame budget for reprocess requests.
    pub budget: usize,
    pub refine: RefinePolicy,
    pub grid_cell_m: f64,
}

impl Default for QueryContext {
    fn default() -> Self {
        QueryContext {
            now: None,
            budget: 256,
            refine: RefinePolicy::default(),
            grid_cell_m: 1.0,
        }
    }
}

/// Parses, plans and executes `text` against `snap`.
pub fn run_query(text: &str, snap: &Snapshot, ctx: &QueryContext) -> Result<Answer> {
    let ast = parse_query(text)?;
    execute(&plan(&ast), snap, ctx)
}

#[derive(Default)]
struct Gathered<'a> {
    sightings: Vec<Sighting>,
    summaries: Vec<&'a DetectionSummary>,
    track: Option<&'a Track>,
    frames_in_range: usize,
    events: Vec<&'a ActivityEvent>,
    act_summaries: Vec<&'a ActivitySummary>,
    escalate: Option<ReprocessRequest>,
}

pub fn execute(plan: &Plan, snap: &Snapshot, ctx: &QueryContext) -> Result<Answer> {
    let mut g = Gathered::default();
    for step in &plan.steps {
        match step {
            PlanStep::LabelProbe {
                label,
                kind,
                range,
                order,
                limit,
            } => {
                g.sightings = snap.find_by_label_kind(
                    label,
                    Some(*kind),
                    range.unwrap_or(TimeRange::all()),
                    *order,
                    *limit,
                );
            }
            PlanStep::SummaryRead { label, kind, range } => {
                g.summaries = snap.detection_summaries(label, Some(*kind), *range);
            }
            PlanStep::TrackLookup { label, kind } => {
                if let Some(latest) = g.sightings.first() {
                    let ts = latest.frame.ts;
                    g.track = snap
                        .tracks_for(label, *kind)
                        .filter(|t| t.last_seen() == ts)
                        .min_by_key(|t| t.track_id);
                }
            }
            PlanStep::FrameCoverage { range } => {
                g.frames_in_range = snap.frames_in_range(*range).len();
            }
            PlanStep::ActivityScan {
                activity,
                subject,
                range,
            } => {
                g.events = snap.activities_matching(activity, subject.as_deref(), *range);
            }
            PlanStep::ActivitySummaryRead {
                activity,
                subject,
                range,
            } => {
                g.act_summaries = snap.activity_summaries_matching(activity, subject.as_deref(), *range);
            }
            PlanStep::EscalateIfUncovered {
                activity,
                subject,
                range,
            } => {
                if g.events.is_empty()
                    && g.act_summaries.is_empty()
                    && !snap.is_covered(subject.as_deref(), activity, *range)
                {
                    g.escalate = Some(select_frames(snap, &plan.query, None, *range, ctx.budget)?);
                }
            }
        }
    }
    if let Some(request) = g.escalate {
        return Ok(Answer::NeedsReprocess {
            request,
            coarse: false,
        });
    }
    Ok(match (&plan.query, plan.reducer) {
        (QueryAst::LastSeen { .. }, _) => latest(&g, snap, ctx),
        (QueryAst::Present { range, .. }, _) => present(&g, *range),
        (QueryAst::Did { range, .. }, _) => did(&g, *range),
        (QueryAst::Duration { range, .. }, Reducer::SumByBucket(bucket)) => duration(&g, *range, bucket),
        (QueryAst::Duration { range, .. }, _) => duration(&g, *range, None),
        (QueryAst::WhereMost { range, .. }, _) => where_most(&g, snap, ctx, *range)?,
    })
}

fn latest(g: &Gathered, snap: &Snapshot, ctx: &QueryContext) -> Answer {
    let Some(s) = g.sightings.first() else {
        return Answer::NotFound { coarse: false };
    };
    let (loc, confidence) = match g.track {
        Some(t) => {
            let now = ctx.now.or_else(|| snap.span().map(|r| r.to)).unwrap_or(s.frame.ts);
            (t.loc, existence_probability(t, now, &ctx.refine))
        }
        None if s.coarse => {
            let summary = snap
                .all_detection_summaries()
                .filter(|x| x.label == s.detection.label && x.kind == s.detection.kind)
                .find(|x| x.last_frame == s.frame.frame_id || x.first_frame == s.frame.frame_id);
            match summary {
                Some(x) => (x.loc, x.noisy_or),
                None => (pose_estimate(s, &ctx.refine), s.detection.confidence),
            }
        }
        None => (pose_estimate(s, &ctx.refine), s.detection.confidence),
    };
    Answer::Location {
        loc,
        ts: s.frame.ts,
        frame_id: s.frame.frame_id,
        confidence,
        coarse: s.coarse,
    }
}

fn pose_estimate(s: &Sighting, policy: &RefinePolicy) -> LocationEstimate {
    LocationEstimate::isotropic([s.frame.pose.x, s.frame.pose.y], policy.obs_sigma_m)
}

fn present(g: &Gathered, range: TimeRange) -> Answer {
    if g.frames_in_range == 0 {
        return Answer::NotFound { coarse: false };
    }
    let mut frames: Vec<u64> = Vec::new();
    let mut miss = 1.0;
    let mut count = 0u64;
    for s in g.sightings.iter().filter(|s| !s.coarse) {
        frames.push(s.frame.frame_id);
        miss *= 1.0 - s.detection.confidence;
        count += 1;
    }
    for x in &g.summaries {
        for (fid, ts) in [(x.first_frame, x.first_ts), (x.last_frame, x.last_ts)] {
            if range.contains(ts) {
                frames.push(fid);
            }
        }
        miss *= 1.0 - x.noisy_or;
        count += x.count;
    }
    frames.sort_unstable();
    frames.dedup();
    Answer::Bool {
        value: count > 0,
        prob: (1.0 - miss).clamp(0.0, 1.0),
        supporting_frames: frames,
        count,
        coarse: !g.summaries.is_empty(),
    }
}

/// Share of a summary's seconds falling in `[lo, hi]`, assuming they spread
/// evenly over the summary's bucket.
fn summary_share(s: &ActivitySummary, lo: Timestamp, hi: Timestamp) -> i64 {
    let width = s.tier.bucket_micros();
    let bucket = TimeRange {
        from: s.bucket_start,
        to: s.bucket_start.plus_micros(width),
    };
    let ov = bucket.overlap_micros(lo, hi);
    (s.micros as i128 * ov as i128 / width as i128) as i64
}

/// Sorted, merged union of intervals; touching intervals merge.
fn union(mut spans: Vec<(Timestamp, Timestamp)>) -> Vec<(Timestamp, Timestamp)> {
    spans.sort();
    let mut out: Vec<(Timestamp, Timestamp)> = Vec::with_capacity(spans.len());
    for (lo, hi) in spans {
        match out.last_mut() {
            Some(last) if lo <= last.1 => last.1 = last.1.max(hi),
            _ => out.push((lo, hi)),
        }
    }
    out
}

/// Event spans clipped to `range`, unioned per subject. Zero-length pieces drop out.
fn subject_unions(events: &[&ActivityEvent], range: TimeRange) -> Vec<(Timestamp, Timestamp)> {
    let mut by_subject: BTreeMap<&str, Vec<(Timestamp, Timestamp)>> = BTreeMap::new();
    for e in events {
        if let Some((lo, hi)) = range.clip(e.start, e.end) {
            if hi > lo {
                by_subject.entry(&e.subject).or_default().push((lo, hi));
            }
        }
    }
    by_subject.into_values().flat_map(union).collect()
}

fn did(g: &Gathered, range: TimeRange) -> Answer {
    let mut micros: i64 = subject_unions(&g.events, range)
        .iter()
        .map(|(lo, hi)| hi.as_micros() - lo.as_micros())
        .sum();
    let mut prob: f64 = 0.0;
    let mut count = 0u64;
    for e in &g.events {
        if range.overlap_micros(e.start, e.end) > 0 {
            prob = prob.max(e.prob);
            count += 1;
        }
    }
    let mut coarse = false;
    for s in &g.act_summaries {
        let share = summary_share(s, range.from, range.to);
        if share > 0 {
            micros += share;
            prob = prob.max(s.max_prob);
            count += 1;
            coarse = true;
        }
    }
    Answer::Bool {
        value: micros > 0,
        prob,
        supporting_frames: Vec::new(),
        count,
        coarse,
    }
}

/// Splits `[lo, hi]` at bucket boundaries.
fn pieces(lo: Timestamp, hi: Timestamp, width: i64) -> impl Iterator<Item = (Timestamp, Timestamp, Timestamp)> {
    let mut at = lo;
    std::iter::from_fn(move || {
        if at >= hi {
            return None;
        }
        let bucket = at.floor_to(width);
        let end = bucket.plus_micros(width).min(hi);
        let piece = (bucket, at, end);
        at = end;
        Some(piece)
    })
}

fn duration(g: &Gathered, range: TimeRange, bucket: Option<Bucket>) -> Answer {
    let width = bucket.map_or(i64::MAX, Bucket::width_micros);
    let mut per: BTreeMap<Timestamp, i64> = BTreeMap::new();
    let mut total = 0i64;
    for (lo, hi) in subject_unions(&g.events, range) {
        total += hi.as_micros() - lo.as_micros();
        if bucket.is_some() {
            for (b, a, z) in pieces(lo, hi, width) {
                *per.entry(b).or_default() += z.as_micros() - a.as_micros();
            }
        }
    }
    let mut coarse = false;
    for s in &g.act_summaries {
        let Some((lo, hi)) = range.clip(s.bucket_start, s.bucket_start.plus_micros(s.tier.bucket_micros())) else {
            continue;
        };
        if bucket.is_some() {
            for (b, a, z) in pieces(lo, hi, width) {
                let share = summary_share(s, a, z);
                if share > 0 {
                    *per.entry(b).or_default() += share;
                    total += share;
                    coarse = true;
                }
            }
        } else {
            let share = summary_share(s, lo, hi);
            if share > 0 {
                total += share;
                coarse = true;
            }
        }
    }
    Answer::Duration {
        total_seconds: total as f64 / MICROS_PER_SEC as f64,
        per_bucket: per
            .into_iter()
            .filter(|(_, m)| *m > 0)
            .map(|(b, m)| BucketSeconds {
                bucket_start: b,
                seconds: m as f64 / MICROS_PER_SEC as f64,
            })
            .collect(),
        coarse,
    }
}

/// Fused position of `subject`'s raw person sightings in `[lo, hi]`.
pub(crate) fn subject_location(
    snap: &Snapshot,
    subject: &str,
    lo: Timestamp,
    hi: Timestamp,
    policy: &RefinePolicy,
) -> Result<Option<LocationEstimate>> {
    let sightings = snap.find_by_label_kind(subject, Some(EntityKind::Person), TimeRange { from: lo, to: hi }, Order::Asc, None);
    let obs: Vec<LocationEstimate> = sightings
        .iter()
        .filter(|s| !s.coarse)
        .map(|s| pose_estimate(s, policy))
        .collect();
    fuse_all(&obs)
}

fn where_most(g: &Gathered, snap: &Snapshot, ctx: &QueryContext, range: TimeRange) -> Result<Answer> {
    let mut spans: BTreeMap<(&str, (i64, i64)), Vec<(Timestamp, Timestamp)>> = BTreeMap::new();
    for e in &g.events {
        let Some((lo, hi)) = range.clip(e.start, e.end) else {
            continue;
        };
        if hi <= lo {
            continue;
        }
        let loc = match e.loc {
            Some(l) => Some(l),
            None => subject_location(snap, &e.subject, lo, hi, &ctx.refine)?,
        };
        if let Some(l) = loc {
            spans
                .entry((&e.subject, grid_cell(l.mean, ctx.grid_cell_m)))
                .or_default()
                .push((lo, hi));
        }
    }
    let mut per_cell: BTreeMap<(i64, i64), i64> = BTreeMap::new();
    for ((_, cell), list) in spans {
        let m: i64 = union(list).iter().map(|(a, b)| b.as_micros() - a.as_micros()).sum();
        *per_cell.entry(cell).or_default() += m;
    }
    let mut coarse = false;
    for s in &g.act_summaries {
        let Some(cell) = s.cell else { continue };
        let share = summary_share(s, range.from, range.to);
        if share > 0 {
            *per_cell.entry(cell).or_default() += share;
            coarse = true;
        }
    }
    // BTreeMap iterates cells in ascending order, so the first maximum wins ties.
    let mut best: Option<((i64, i64), i64)> = None;
    for (cell, m) in per_cell {
        if m > 0 && best.is_none_or(|(_, bm)| m > bm) {
            best = Some((cell, m));
        }
    }
    Ok(match best {
        Some((cell, m)) => Answer::Place {
            cell,
            cell_center: cell_center(cell, ctx.grid_cell_m),
            seconds: m as f64 / MICROS_PER_SEC as f64,
            coarse,
        },
        None => Answer::NotFound { coarse },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: i64) -> Timestamp {
        Timestamp::from_secs(s)
    }

    #[test]
    fn union_merges_touching() {
        let u = union(vec![(t(5), t(9)), (t(0), t(2)), (t(2), t(3)), (t(8), t(12))]);
        assert_eq!(u, vec![(t(0), t(3)), (t(5), t(12))]);
    }

    #[test]
    fn pieces_split_on_boundaries() {
        let p: Vec<_> = pieces(t(3000), t(7300), 3600 * MICROS_PER_SEC).collect();
        assert_eq!(p, vec![(t(0), t(3000), t(3600)), (t(3600), t(3600), t(7200)), (t(7200), t(7200), t(7300))]);
    }
}
