//! Background refinement ("clean-up") of stored detections: association into
//! tracks, Gaussian location fusion, presence intervals and existence belief.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Cov2, Detection, EntityKind, FrameMeta, LocationEstimate, PresenceInterval, Timestamp, Track,
    MICROS_PER_DAY,
};
use crate::store::Store;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinePolicy {
    /// Per-axis standard deviation of a detection's position about the robot.
    pub obs_sigma_m: f64,
    pub assoc_max_gap_s: f64,
    pub assoc_max_mahalanobis: f64,
    pub interval_merge_gap_s: f64,
    pub existence_decay_per_day: f64,
}

impl Default for RefinePolicy {
    fn default() -> Self {
        RefinePolicy {
            obs_sigma_m: 2.0,
            assoc_max_gap_s: 5.0,
            assoc_max_mahalanobis: 3.0,
            interval_merge_gap_s: 60.0,
            existence_decay_per_day: 0.0,
        }
    }
}

impl RefinePolicy {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("obs_sigma_m", self.obs_sigma_m),
            ("assoc_max_gap_s", self.assoc_max_gap_s),
            ("assoc_max_mahalanobis", self.assoc_max_mahalanobis),
            ("interval_merge_gap_s", self.interval_merge_gap_s),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.existence_decay_per_day) {
            return Err(Error::InvalidArgument(
                "existence_decay_per_day must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub tracks_created: u64,
    pub tracks_updated: u64,
    pub observations_fused: u64,
    pub intervals_merged: u64,
}

impl RefinementReport {
    pub fn is_empty(&self) -> bool {
        *self == RefinementReport::default()
    }

    pub fn absorb(&mut self, other: RefinementReport) {
        self.tracks_created += other.tracks_created;
        self.tracks_updated += other.tracks_updated;
        self.observations_fused += other.observations_fused;
        self.intervals_merged += other.intervals_merged;
    }
}

/// The robot's planar position at the frame, with isotropic uncertainty.
pub fn observation_from_detection(
    d: &Detection,
    fm: &FrameMeta,
    policy: &RefinePolicy,
) -> Result<LocationEstimate> {
    if d.frame_id != fm.frame_id {
        return Err(Error::FrameMismatch {
            detection: d.frame_id,
            frame: fm.frame_id,
        });
    }
    Ok(observation_at(fm, policy.obs_sigma_m))
}

pub(crate) fn observation_at(fm: &FrameMeta, sigma: f64) -> LocationEstimate {
    LocationEstimate::isotropic([fm.pose.x, fm.pose.y], sigma)
}

/// Product of two Gaussians, computed in information form.
pub fn fuse(prior: &LocationEstimate, obs: &LocationEstimate) -> Result<LocationEstimate> {
    let mut acc = InfoAccumulator::default();
    acc.add(prior)?;
    acc.add(obs)?;
    acc.estimate().ok_or(Error::NonSpd)
}

/// Running sum of precision matrices and information vectors.
#[derive(Clone, Copy, Debug)]
pub struct InfoAccumulator {
    precision: Cov2,
    info: [f64; 2],
    count: u64,
}

impl Default for InfoAccumulator {
    fn default() -> Self {
        InfoAccumulator {
            precision: Cov2::new(0.0, 0.0, 0.0),
            info: [0.0, 0.0],
            count: 0,
        }
    }
}

impl InfoAccumulator {
    pub fn add(&mut self, est: &LocationEstimate) -> Result<()> {
        if !est.cov.is_spd() {
            return Err(Error::NonSpd);
        }
        let p = est.cov.inverse().ok_or(Error::NonSpd)?;
        let v = p.mul_vec(est.mean);
        self.precision = self.precision.add(&p);
        self.info[0] += v[0];
        self.info[1] += v[1];
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn estimate(&self) -> Option<LocationEstimate> {
        if self.count == 0 {
            return None;
        }
        let cov = self.precision.inverse()?;
        let mean = cov.mul_vec(self.info);
        LocationEstimate::new(mean, cov).ok()
    }
}

/// Fuses any number of estimates; `None` for an empty input.
pub fn fuse_all<'a>(estimates: impl IntoIterator<Item = &'a LocationEstimate>) -> Result<Option<LocationEstimate>> {
    let mut acc = InfoAccumulator::default();
    for e in estimates {
        acc.add(e)?;
    }
    Ok(acc.estimate())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Association {
    Existing { track_id: u64, distance: f64 },
    New,
}

impl Association {
    pub fn track_id(&self) -> Option<u64> {
        match self {
            Association::Existing { track_id, .. } => Some(*track_id),
            Association::New => None,
        }
    }
}

/// Picks the open track that a detection belongs to. A track qualifies when
/// it has the same label and kind, was observed within `assoc_max_gap_s` of the
/// frame, has not already taken a detection from this frame, and lies within
/// `assoc_max_mahalanobis` of the observation. Ties go to the smaller
/// distance, then the smaller track id.
pub fn associate<'a>(
    d: &Detection,
    fm: &FrameMeta,
    open_tracks: impl IntoIterator<Item = &'a Track>,
    policy: &RefinePolicy,
) -> Association {
    let obs = observation_at(fm, policy.obs_sigma_m);
    let mut best: Option<(f64, u64)> = None;
    for t in open_tracks {
        if t.label != d.label || t.kind != d.kind {
            continue;
        }
        if t.last_seen() < fm.ts.minus_micros(secs_to_micros(policy.assoc_max_gap_s)) {
            continue;
        }
        if t.time_gap_seconds(fm.ts) > policy.assoc_max_gap_s {
            continue;
        }
        if t.intervals.iter().any(|iv| iv_has_frame(iv, fm)) {
            continue;
        }
        let Some(dist) = t.loc.mahalanobis(obs.mean, &obs.cov) else {
            continue;
        };
        if dist > policy.assoc_max_mahalanobis {
            continue;
        }
        let better = match best {
            None => true,
            Some((bd, bid)) => dist < bd || (dist == bd && t.track_id < bid),
        };
        if better {
            best = Some((dist, t.track_id));
        }
    }
    match best {
        Some((distance, track_id)) => Association::Existing { track_id, distance },
        None => Association::New,
    }
}

// Only interval endpoints record frame ids. Detections arrive in frame order,
// so a track that already took one from this frame has it as an endpoint.
fn iv_has_frame(iv: &PresenceInterval, fm: &FrameMeta) -> bool {
    iv.first_frame == fm.frame_id || iv.last_frame == fm.frame_id
}

fn secs_to_micros(s: f64) -> i64 {
    (s * 1e6).round() as i64
}

/// Adds one sighting to a sorted, disjoint interval list, bridging any
/// neighbours closer than `merge_gap_s`. Returns true when the sighting joined
/// an existing interval.
pub fn add_sighting(
    intervals: &mut Vec<PresenceInterval>,
    ts: Timestamp,
    frame_id: u64,
    merge_gap_s: f64,
) -> bool {
    let gap = secs_to_micros(merge_gap_s);
    let mut new = PresenceInterval {
        start: ts,
        end: ts,
        first_frame: frame_id,
        last_frame: frame_id,
    };
    // Intervals whose end is at least (ts - gap) and whose start is at most (ts + gap).
    let lo = intervals.partition_point(|iv| iv.end < ts.minus_micros(gap));
    let hi = intervals.partition_point(|iv| iv.start <= ts.plus_micros(gap));
    if lo >= hi {
        intervals.insert(lo, new);
        return false;
    }
    for iv in &intervals[lo..hi] {
        if (iv.start, iv.first_frame) < (new.start, new.first_frame) {
            new.start = iv.start;
            new.first_frame = iv.first_frame;
        }
        if (iv.end, iv.last_frame) > (new.end, new.last_frame) {
            new.end = iv.end;
            new.last_frame = iv.last_frame;
        }
    }
    intervals.splice(lo..hi, std::iter::once(new));
    true
}

/// Noisy-OR existence belief, decayed by whole or fractional days since the
/// track was last seen.
pub fn existence_probability(track: &Track, now: Timestamp, policy: &RefinePolicy) -> f64 {
    let days = ((now.as_micros() - track.last_seen().as_micros()) as f64 / MICROS_PER_DAY as f64).max(0.0);
    let decay = (1.0 - policy.existence_decay_per_day).powf(days);
    (track.existence_prob * decay).clamp(0.0, 1.0)
}

pub(crate) fn noisy_or(p: f64, confidence: f64) -> f64 {
    1.0 - (1.0 - p) * (1.0 - confidence)
}

/// Attributes every detection appended since the last pass to a track and
/// persists the touched tracks. A second pass with no new detections is a no-op.
pub fn run_refinement_pass(store: &mut Store, policy: &RefinePolicy) -> Result<RefinementReport> {
    policy.validate()?;
    if store.is_read_only() {
        return Err(Error::ReadOnly);
    }
    let state = store.state();
    let start = state.refine_watermark as usize;
    let end = state.detections.len();
    if start >= end {
        return Ok(RefinementReport::default());
    }

    let mut tracks: BTreeMap<u64, Track> = BTreeMap::new();
    let mut by_key: HashMap<(String, EntityKind), Vec<u64>> = HashMap::new();
    for t in state.tracks.values() {
        by_key.entry((t.label.clone(), t.kind)).or_default().push(t.track_id);
    }
    let mut next_id = state.next_track_id;
    let mut created = BTreeSet::new();
    let mut updated = BTreeSet::new();
    let mut report = RefinementReport::default();

    for idx in start..end {
        let det = state.detection(idx);
        let Some(fm) = state.frame(det.frame_id).copied() else {
            continue;
        };
        let key = (det.label.clone(), det.kind);
        let ids = by_key.entry(key).or_default();
        for id in ids.iter() {
            if !tracks.contains_key(id) {
                tracks.insert(*id, state.tracks[id].clone());
            }
        }
        let assoc = associate(&det, &fm, ids.iter().map(|id| &tracks[id]), policy);
        let obs = observation_at(&fm, policy.obs_sigma_m);
        match assoc {
            Association::Existing { track_id, .. } => {
                let t = tracks.get_mut(&track_id).expect("candidate track");
                t.loc = fuse(&t.loc, &obs)?;
                t.observation_count += 1;
                t.existence_prob = noisy_or(t.existence_prob, det.confidence);
                if add_sighting(&mut t.intervals, fm.ts, fm.frame_id, policy.interval_merge_gap_s) {
                    report.intervals_merged += 1;
                }
                report.observations_fused += 1;
                if !created.contains(&track_id) {
                    updated.insert(track_id);
                }
            }
            Association::New => {
                let track_id = next_id;
                next_id += 1;
                tracks.insert(
                    track_id,
                    Track {
                        track_id,
                        label: det.label.clone(),
                        kind: det.kind,
                        loc: obs,
                        intervals: vec![PresenceInterval {
                            start: fm.ts,
                            end: fm.ts,
                            first_frame: fm.frame_id,
                            last_frame: fm.frame_id,
                        }],
                        observation_count: 1,
                        existence_prob: det.confidence.clamp(0.0, 1.0),
                    },
                );
                ids.push(track_id);
                created.insert(track_id);
            }
        }
    }

    report.tracks_created = created.len() as u64;
    report.tracks_updated = updated.len() as u64;
    for id in created.iter().chain(updated.iter()) {
        store.put_track(&tracks[id])?;
    }
    store.put_refine_state(end as u64, next_id)?;
    store.checkpoint()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Pose;

    fn frame(id: u64, secs: i64, x: f64, y: f64) -> FrameMeta {
        FrameMeta {
            frame_id: id,
            ts: Timestamp::from_secs(secs),
            pose: Pose::planar(x, y, 0.0),
        }
    }

    fn iso(mean: [f64; 2], var: f64) -> LocationEstimate {
        LocationEstimate::new(mean, Cov2::isotropic(var)).unwrap()
    }

    fn track(id: u64, label: &str, mean: [f64; 2], last_secs: i64) -> Track {
        Track {
            track_id: id,
            label: label.into(),
            kind: EntityKind::Object,
            loc: iso(mean, 4.0),
            intervals: vec![PresenceInterval {
                start: Timestamp::from_secs(last_secs),
                end: Timestamp::from_secs(last_secs),
                first_frame: 0,
                last_frame: 0,
            }],
            observation_count: 1,
            existence_prob: 1.0,
        }
    }

    #[test]
    fn observation_is_pose_with_isotropic_cov() {
        let policy = RefinePolicy::default();
        let d = Detection::new(3, "remote", EntityKind::Object, 0.9);
        let obs = observation_from_detection(&d, &frame(3, 0, 0.0, 0.0), &policy).unwrap();
        assert_eq!(obs.mean, [0.0, 0.0]);
        assert_eq!(obs.cov, Cov2::isotropic(4.0));
        let obs = observation_from_detection(&d, &frame(3, 0, 3.0, -1.0), &policy).unwrap();
        assert_eq!(obs.mean, [3.0, -1.0]);
        assert_eq!(obs.cov, Cov2::isotropic(4.0));
        let unit = RefinePolicy {
            obs_sigma_m: 1.0,
            ..policy.clone()
        };
        let obs = observation_from_detection(&d, &frame(3, 0, 0.0, 0.0), &unit).unwrap();
        assert_eq!(obs.cov, Cov2::isotropic(1.0));
        assert!(matches!(
            observation_from_detection(&d, &frame(4, 0, 0.0, 0.0), &policy),
            Err(Error::FrameMismatch { .. })
        ));
    }

    #[test]
    fn fuse_examples() {
        let f = fuse(&iso([0.0, 0.0], 2.0), &iso([0.0, 0.0], 2.0)).unwrap();
        assert!((f.cov.xx - 1.0).abs() < 1e-12 && (f.cov.yy - 1.0).abs() < 1e-12 && f.cov.xy == 0.0);
        let f = fuse(&iso([0.0, 0.0], 2.0), &iso([2.0, 0.0], 2.0)).unwrap();
        assert!((f.mean[0] - 1.0).abs() < 1e-12 && f.mean[1].abs() < 1e-12);
        assert!((f.cov.xx - 1.0).abs() < 1e-12);
        let mut acc = iso([1.0, 1.0], 3.0);
        for _ in 1..6 {
            acc = fuse(&acc, &iso([1.0, 1.0], 3.0)).unwrap();
        }
        assert!((acc.cov.xx - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_rejects_non_spd() {
        let bad = LocationEstimate {
            mean: [0.0, 0.0],
            cov: Cov2::new(1.0, 2.0, 1.0),
        };
        assert!(matches!(fuse(&bad, &iso([0.0, 0.0], 1.0)), Err(Error::NonSpd)));
    }

    #[test]
    fn associate_cases() {
        let policy = RefinePolicy::default();
        let d = Detection::new(10, "remote", EntityKind::Object, 1.0);
        let fm = frame(10, 100, 0.0, 0.0);
        assert_eq!(associate(&d, &fm, [], &policy), Association::New);

        let near = track(4, "remote", [0.0, 0.0], 99);
        assert_eq!(
            associate(&d, &fm, [&near], &policy),
            Association::Existing {
                track_id: 4,
                distance: 0.0
            }
        );

        // innovation variance 4 + 4 = 8 per axis, so an offset of sqrt(8)*k gives distance k
        let s = 8f64.sqrt();
        let one = track(9, "remote", [s, 0.0], 99);
        let two = track(2, "remote", [2.0 * s, 0.0], 99);
        match associate(&d, &fm, [&two, &one], &policy) {
            Association::Existing { track_id, distance } => {
                assert_eq!(track_id, 9);
                assert!((distance - 1.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }

        let stale = track(5, "remote", [0.0, 0.0], 90);
        assert_eq!(associate(&d, &fm, [&stale], &policy), Association::New);
        let other_label = track(6, "cup", [0.0, 0.0], 99);
        assert_eq!(associate(&d, &fm, [&other_label], &policy), Association::New);
    }

    #[test]
    fn association_tie_goes_to_smaller_id() {
        let policy = RefinePolicy::default();
        let d = Detection::new(10, "remote", EntityKind::Object, 1.0);
        let fm = frame(10, 100, 0.0, 0.0);
        let a = track(8, "remote", [1.0, 0.0], 99);
        let b = track(3, "remote", [0.0, 1.0], 99);
        assert_eq!(associate(&d, &fm, [&a, &b], &policy).track_id(), Some(3));
    }

    #[test]
    fn sightings_merge_within_gap() {
        let mut ivs = Vec::new();
        // sighted every 2 s over 10 s
        for (i, s) in (0..=10).step_by(2).enumerate() {
            add_sighting(&mut ivs, Timestamp::from_secs(s), i as u64, 60.0);
        }
        assert_eq!(ivs.len(), 1);
        assert_eq!((ivs[0].start, ivs[0].end), (Timestamp::from_secs(0), Timestamp::from_secs(10)));
        assert_eq!((ivs[0].first_frame, ivs[0].last_frame), (0, 5));

        add_sighting(&mut ivs, Timestamp::from_secs(120), 50, 60.0);
        assert_eq!(ivs.len(), 2);
        // an out-of-order sighting between them bridges both
        assert!(add_sighting(&mut ivs, Timestamp::from_secs(65), 20, 60.0));
        assert_eq!(ivs.len(), 1);
        assert_eq!(ivs[0].last_frame, 50);
    }

    #[test]
    fn existence_examples() {
        let mut t = track(1, "remote", [0.0, 0.0], 0);
        t.existence_prob = 1.0;
        let policy = RefinePolicy::default();
        assert_eq!(existence_probability(&t, Timestamp::from_secs(0), &policy), 1.0);

        t.existence_prob = noisy_or(noisy_or(0.0, 0.5), 0.5);
        assert!((existence_probability(&t, Timestamp::from_secs(0), &policy) - 0.75).abs() < 1e-12);

        t.existence_prob = 1.0;
        let decaying = RefinePolicy {
            existence_decay_per_day: 0.5,
            ..policy
        };
        let now = Timestamp::from_micros(2 * MICROS_PER_DAY);
        assert!((existence_probability(&t, now, &decaying) - 0.25).abs() < 1e-12);
    }
}
