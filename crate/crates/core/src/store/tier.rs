//! Tiered retention: raw detections and activities older than the hot window
//! become hourly summaries; hourly summaries older than the warm window roll
//! up into daily ones. Frames are kept in every tier.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    grid_cell, EntityKind, FrameMeta, LocationEstimate, Timestamp, MICROS_PER_DAY,
};
use crate::refine::{observation_at, InfoAccumulator};
use crate::store::state::{ActSummaryKey, DetSummaryKey, StoreState};
use crate::store::{ActivitySummary, DetectionSummary, Store, Tier, TierBoundaries};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MigrationPolicy {
    pub hot_window_micros: i64,
    pub warm_window_micros: i64,
    /// Per-axis sigma of the pose-anchored observation behind each summarized detection.
    pub obs_sigma_m: f64,
    pub grid_cell_m: f64,
}

impl Default for MigrationPolicy {
    fn default() -> Self {
        MigrationPolicy {
            hot_window_micros: 7 * MICROS_PER_DAY,
            warm_window_micros: 90 * MICROS_PER_DAY,
            obs_sigma_m: 2.0,
            grid_cell_m: 1.0,
        }
    }
}

impl MigrationPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.hot_window_micros <= 0 || self.warm_window_micros < self.hot_window_micros {
            return Err(Error::InvalidArgument(
                "tier windows must satisfy 0 < hot <= warm".into(),
            ));
        }
        if !(self.obs_sigma_m > 0.0 && self.obs_sigma_m.is_finite()) {
            return Err(Error::InvalidArgument("obs_sigma_m must be positive".into()));
        }
        if !(self.grid_cell_m > 0.0 && self.grid_cell_m.is_finite()) {
            return Err(Error::InvalidArgument("grid_cell_m must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub detections_summarized: u64,
    pub activities_summarized: u64,
    pub hourly_summaries: u64,
    pub hourly_rolled_up: u64,
    pub daily_summaries: u64,
    pub bytes_before: u64,
    pub bytes_after: u64,
    pub hot_boundary: Option<Timestamp>,
    pub warm_boundary: Option<Timestamp>,
}

impl MigrationReport {
    pub fn is_noop(&self) -> bool {
        self.detections_summarized == 0 && self.activities_summarized == 0 && self.hourly_rolled_up == 0
    }
}

#[derive(Clone, Copy)]
struct Endpoint {
    ts: Timestamp,
    frame: u64,
}

struct DetAcc {
    first: Endpoint,
    last: Endpoint,
    count: u64,
    info: InfoAccumulator,
    miss: f64,
}

impl DetAcc {
    fn new(at: Endpoint) -> Self {
        DetAcc {
            first: at,
            last: at,
            count: 0,
            info: InfoAccumulator::default(),
            miss: 1.0,
        }
    }

    fn extend(&mut self, first: Endpoint, last: Endpoint) {
        if (first.ts, first.frame) < (self.first.ts, self.first.frame) {
            self.first = first;
        }
        if (last.ts, last.frame) > (self.last.ts, self.last.frame) {
            self.last = last;
        }
    }

    fn absorb(&mut self, s: &DetectionSummary) -> Result<()> {
        self.extend(
            Endpoint {
                ts: s.first_ts,
                frame: s.first_frame,
            },
            Endpoint {
                ts: s.last_ts,
                frame: s.last_frame,
            },
        );
        self.count += s.count;
        // a fused estimate carries the summed precision of its inputs
        self.info.add(&s.loc)?;
        self.miss *= 1.0 - s.noisy_or;
        Ok(())
    }

    fn finish(self, tier: Tier, bucket_start: Timestamp, label: String, kind: EntityKind) -> Result<DetectionSummary> {
        Ok(DetectionSummary {
            tier,
            bucket_start,
            label,
            kind,
            first_frame: self.first.frame,
            last_frame: self.last.frame,
            first_ts: self.first.ts,
            last_ts: self.last.ts,
            count: self.count,
            loc: self.info.estimate().ok_or(Error::NonSpd)?,
            noisy_or: (1.0 - self.miss).clamp(0.0, 1.0),
        })
    }
}

impl Store {
    /// Summarizes data older than the hot window and rolls hourly summaries
    /// older than the warm window into daily ones. Refuses to run with
    /// unflushed writes. Returns a no-op report when nothing is eligible.
    pub fn migrate_tiers(&mut self, now: Timestamp, policy: &MigrationPolicy) -> Result<MigrationReport> {
        policy.validate()?;
        if self.is_read_only() {
            return Err(Error::ReadOnly);
        }
        if self.has_pending_writes() {
            return Err(Error::MigrationConflict(
                "unflushed writes are pending; flush before migrating".into(),
            ));
        }
        let hot_cut = now.minus_micros(policy.hot_window_micros);
        let warm_cut = now.minus_micros(policy.warm_window_micros);
        let mut report = MigrationReport {
            bytes_before: self.stats()?.bytes_on_disk,
            hot_boundary: Some(hot_cut),
            warm_boundary: Some(warm_cut),
            ..Default::default()
        };

        let state = self.state();
        let mut next = plan_migration(state, hot_cut, warm_cut, policy, &mut report)?;
        if report.is_noop() {
            report.bytes_after = report.bytes_before;
            return Ok(report);
        }
        next.rebuild_postings().map_err(Error::InvalidArgument)?;
        self.rewrite(
            next,
            TierBoundaries {
                hot_boundary: Some(hot_cut),
                warm_boundary: Some(warm_cut),
            },
        )?;
        report.bytes_after = self.stats()?.bytes_on_disk;
        Ok(report)
    }
}

fn plan_migration(
    state: &StoreState,
    hot_cut: Timestamp,
    warm_cut: Timestamp,
    policy: &MigrationPolicy,
    report: &mut MigrationReport,
) -> Result<StoreState> {
    let mut next = state.clone();

    // Hot detections -> hourly summaries.
    let mut hourly: BTreeMap<DetSummaryKey, DetAcc> = BTreeMap::new();
    let mut kept = Vec::with_capacity(state.detections.len());
    let mut removed_below_watermark = 0u64;
    for (idx, row) in state.detections.iter().enumerate() {
        let fm: &FrameMeta = state
            .frame(row.frame_id)
            .ok_or(Error::UnknownFrame(row.frame_id))?;
        if fm.ts >= hot_cut {
            kept.push(*row);
            continue;
        }
        if (idx as u64) < state.refine_watermark {
            removed_below_watermark += 1;
        }
        let label = state.labels.name(row.label).unwrap_or_default().to_owned();
        let key = (Tier::Warm, label, row.kind, fm.ts.floor_to(Tier::Warm.bucket_micros()));
        let at = Endpoint {
            ts: fm.ts,
            frame: fm.frame_id,
        };
        let acc = hourly.entry(key).or_insert_with(|| DetAcc::new(at));
        acc.extend(at, at);
        acc.count += 1;
        acc.info.add(&observation_at(fm, policy.obs_sigma_m))?;
        acc.miss *= 1.0 - row.confidence;
        report.detections_summarized += 1;
    }
    next.detections = kept;
    next.refine_watermark = state.refine_watermark - removed_below_watermark;

    let new_hourly_count: u64 = hourly.values().map(|a| a.count).sum();
    if new_hourly_count != report.detections_summarized {
        return Err(Error::MigrationConflict("detection count not conserved".into()));
    }
    for (key, acc) in hourly {
        let merged = match next.det_summaries.remove(&key) {
            Some(existing) => {
                let mut acc = acc;
                acc.absorb(&existing)?;
                acc
            }
            None => acc,
        };
        let (tier, label, kind, bucket) = key.clone();
        next.det_summaries.insert(key, merged.finish(tier, bucket, label, kind)?);
        report.hourly_summaries += 1;
    }

    // Hot activities -> hourly per-cell seconds.
    let mut kept_acts = Vec::with_capacity(state.activities.len());
    for a in &state.activities {
        if a.end >= hot_cut {
            kept_acts.push(a.clone());
            continue;
        }
        report.activities_summarized += 1;
        let loc = match &a.loc {
            Some(l) => Some(*l),
            None => locate_subject(state, &a.subject, a.start, a.end, policy.obs_sigma_m)?,
        };
        let cell = loc.map(|l| grid_cell(l.mean, policy.grid_cell_m));
        let width = Tier::Warm.bucket_micros();
        let mut bucket = a.start.floor_to(width);
        while bucket < a.end {
            let bucket_end = bucket.plus_micros(width);
            let lo = a.start.max(bucket);
            let hi = a.end.min(bucket_end);
            let micros = hi.as_micros() - lo.as_micros();
            if micros > 0 {
                add_activity(
                    &mut next.act_summaries,
                    (Tier::Warm, a.subject.clone(), a.name.clone(), bucket, cell),
                    micros,
                    a.prob,
                );
            }
            bucket = bucket_end;
        }
    }
    next.activities = kept_acts;

    // Hourly -> daily.
    let day = Tier::Cold.bucket_micros();
    let hour = Tier::Warm.bucket_micros();
    let stale: Vec<DetSummaryKey> = next
        .det_summaries
        .keys()
        .filter(|(t, _, _, b)| *t == Tier::Warm && b.plus_micros(hour) <= warm_cut)
        .cloned()
        .collect();
    let mut daily: BTreeMap<DetSummaryKey, DetAcc> = BTreeMap::new();
    let mut rolled_count = 0u64;
    for key in stale {
        let s = next.det_summaries.remove(&key).expect("listed key");
        rolled_count += s.count;
        let dkey = (Tier::Cold, s.label.clone(), s.kind, s.bucket_start.floor_to(day));
        let at = Endpoint {
            ts: s.first_ts,
            frame: s.first_frame,
        };
        daily.entry(dkey).or_insert_with(|| DetAcc::new(at)).absorb(&s)?;
        report.hourly_rolled_up += 1;
    }
    let daily_count: u64 = daily.values().map(|a| a.count).sum();
    if daily_count != rolled_count {
        return Err(Error::MigrationConflict("summary count not conserved".into()));
    }
    for (key, acc) in daily {
        let merged = match next.det_summaries.remove(&key) {
            Some(existing) => {
                let mut acc = acc;
                acc.absorb(&existing)?;
                acc
            }
            None => acc,
        };
        let (tier, label, kind, bucket) = key.clone();
        next.det_summaries.insert(key, merged.finish(tier, bucket, label, kind)?);
        report.daily_summaries += 1;
    }

    let stale_acts: Vec<ActSummaryKey> = next
        .act_summaries
        .keys()
        .filter(|(t, _, _, b, _)| *t == Tier::Warm && b.plus_micros(hour) <= warm_cut)
        .cloned()
        .collect();
    for key in stale_acts {
        let s = next.act_summaries.remove(&key).expect("listed key");
        add_activity(
            &mut next.act_summaries,
            (Tier::Cold, s.subject, s.name, s.bucket_start.floor_to(day), s.cell),
            s.micros,
            s.max_prob,
        );
        report.hourly_rolled_up += 1;
    }
    Ok(next)
}

fn add_activity(map: &mut BTreeMap<ActSummaryKey, ActivitySummary>, key: ActSummaryKey, micros: i64, prob: f64) {
    let entry = map.entry(key.clone()).or_insert_with(|| ActivitySummary {
        tier: key.0,
        bucket_start: key.3,
        subject: key.1.clone(),
        name: key.2.clone(),
        cell: key.4,
        micros: 0,
        max_prob: 0.0,
    });
    entry.micros += micros;
    entry.max_prob = entry.max_prob.max(prob);
}

/// Fused position of `subject`'s person detections inside `[start, end]`.
pub(crate) fn locate_subject(
    state: &StoreState,
    subject: &str,
    start: Timestamp,
    end: Timestamp,
    sigma: f64,
) -> Result<Option<LocationEstimate>> {
    let Some(id) = state.labels.id(subject) else {
        return Ok(None);
    };
    let Some(list) = state.postings.get(&id) else {
        return Ok(None);
    };
    let lo = list.partition_point(|p| p.ts < start);
    let hi = list.partition_point(|p| p.ts <= end).max(lo);
    let mut acc = InfoAccumulator::default();
    for p in &list[lo..hi] {
        if state.detections[p.det as usize].kind != EntityKind::Person {
            continue;
        }
        if let Some(fm) = state.frame(p.frame_id) {
            acc.add(&observation_at(fm, sigma))?;
        }
    }
    Ok(acc.estimate())
}
