//! Domain types shared by every module. Everything here is a plain value:
//! no I/O, cheap to clone, `Send + Sync`.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MICROS_PER_SEC: i64 = 1_000_000;
pub const MICROS_PER_HOUR: i64 = 3_600 * MICROS_PER_SEC;
pub const MICROS_PER_DAY: i64 = 24 * MICROS_PER_HOUR;

/// UTC wall-clock instant with microsecond resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const MIN: Timestamp = Timestamp(i64::MIN);
    pub const MAX: Timestamp = Timestamp(i64::MAX);

    pub const fn from_micros(micros: i64) -> Self {
        Timestamp(micros)
    }

    pub const fn from_secs(secs: i64) -> Self {
        Timestamp(secs * MICROS_PER_SEC)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    pub fn parse(text: &str) -> Result<Self, chrono::ParseError> {
        let dt = DateTime::parse_from_rfc3339(text)?;
        Ok(Timestamp(dt.with_timezone(&Utc).timestamp_micros()))
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::from_timestamp_micros(self.0).unwrap_or_default()
    }

    pub fn plus_micros(self, delta: i64) -> Self {
        Timestamp(self.0.saturating_add(delta))
    }

    pub fn minus_micros(self, delta: i64) -> Self {
        Timestamp(self.0.saturating_sub(delta))
    }

    /// Signed seconds from `self` to `later`.
    pub fn seconds_until(self, later: Timestamp) -> f64 {
        (later.0 - self.0) as f64 / MICROS_PER_SEC as f64
    }

    /// Start of the bucket of width `width_micros` (epoch-aligned) holding this instant.
    pub fn floor_to(self, width_micros: i64) -> Self {
        Timestamp(self.0.div_euclid(width_micros) * width_micros)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match DateTime::from_timestamp_micros(self.0) {
            Some(dt) => f.write_str(&dt.to_rfc3339_opts(SecondsFormat::AutoSi, true)),
            None => write!(f, "@{}us", self.0),
        }
    }
}

impl FromStr for Timestamp {
    type Err = chrono::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Timestamp::parse(s)
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Timestamp::parse(&text).map_err(serde::de::Error::custom)
    }
}

/// Closed time interval `[from, to]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeRange {
    pub from: Timestamp,
    pub to: Timestamp,
}

impl TimeRange {
    pub fn new(from: Timestamp, to: Timestamp) -> Option<Self> {
        (from <= to).then_some(TimeRange { from, to })
    }

    pub const fn all() -> Self {
        TimeRange {
            from: Timestamp::MIN,
            to: Timestamp::MAX,
        }
    }

    pub fn contains(&self, ts: Timestamp) -> bool {
        self.from <= ts && ts <= self.to
    }

    pub fn intersects(&self, start: Timestamp, end: Timestamp) -> bool {
        start <= self.to && end >= self.from
    }

    /// Length in microseconds of `[start, end] ∩ self`, zero when disjoint.
    pub fn overlap_micros(&self, start: Timestamp, end: Timestamp) -> i64 {
        let lo = start.max(self.from);
        let hi = end.min(self.to);
        if hi > lo {
            hi.as_micros() - lo.as_micros()
        } else {
            0
        }
    }

    pub fn clip(&self, start: Timestamp, end: Timestamp) -> Option<(Timestamp, Timestamp)> {
        let lo = start.max(self.from);
        let hi = end.min(self.to);
        (lo <= hi).then_some((lo, hi))
    }
}

/// Maps any angle in degrees onto `[-180, 180)`.
pub fn normalize_degrees(angle: f64) -> f64 {
    // in-range angles pass through bit-exact
    if (-180.0..180.0).contains(&angle) {
        return angle;
    }
    let wrapped = (angle + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// Robot pose: position in meters, orientation in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose {
    /// Builds a pose with angles wrapped onto `[-180, 180)`.
    pub fn new(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Pose {
            x,
            y,
            z,
            roll: normalize_degrees(roll),
            pitch: normalize_degrees(pitch),
            yaw: normalize_degrees(yaw),
        }
    }

    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Pose::new(x, y, 0.0, 0.0, 0.0, yaw)
    }

    pub fn normalized(self) -> Self {
        Pose::new(self.x, self.y, self.z, self.roll, self.pitch, self.yaw)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    #[serde(rename = "f")]
    pub frame_id: u64,
    pub ts: Timestamp,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Object,
    Person,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Object => "object",
            EntityKind::Person => "person",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a record came from: the live feed or an on-demand re-analysis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Ingested,
    Reprocessed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_id: u64,
    pub label: String,
    pub kind: EntityKind,
    pub confidence: f64,
    #[serde(default)]
    pub provenance: Provenance,
}

impl Detection {
    pub fn new(frame_id: u64, label: &str, kind: EntityKind, confidence: f64) -> Self {
        Detection {
            frame_id,
            label: fold_label(label),
            kind,
            confidence,
            provenance: Provenance::Ingested,
        }
    }
}

/// Labels are compared case-insensitively; the stored form is lowercase.
pub fn fold_label(label: &str) -> String {
    label.trim().to_lowercase()
}

/// Symmetric 2×2 matrix (m²), stored as its three distinct entries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub const fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Cov2 { xx, xy, yy }
    }

    pub const fn isotropic(variance: f64) -> Self {
        Cov2 {
            xx: variance,
            xy: 0.0,
            yy: variance,
        }
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    /// True when a Cholesky factorization exists.
    pub fn is_spd(&self) -> bool {
        if !(self.xx.is_finite() && self.xy.is_finite() && self.yy.is_finite()) || self.xx <= 0.0 {
            return false;
        }
        let l21 = self.xy / self.xx.sqrt();
        self.yy - l21 * l21 > 0.0
    }

    pub fn inverse(&self) -> Option<Cov2> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        Some(Cov2 {
            xx: self.yy / det,
            xy: -self.xy / det,
            yy: self.xx / det,
        })
    }

    pub fn add(&self, other: &Cov2) -> Cov2 {
        Cov2 {
            xx: self.xx + other.xx,
            xy: self.xy + other.xy,
            yy: self.yy + other.yy,
        }
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [self.xx * v[0] + self.xy * v[1], self.xy * v[0] + self.yy * v[1]]
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> (f64, f64) {
        let half_trace = 0.5 * (self.xx + self.yy);
        let half_diff = 0.5 * (self.xx - self.yy);
        let radius = (half_diff * half_diff + self.xy * self.xy).sqrt();
        (half_trace - radius, half_trace + radius)
    }

    pub fn to_array(self) -> [[f64; 2]; 2] {
        [[self.xx, self.xy], [self.xy, self.yy]]
    }
}

impl Serialize for Cov2 {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Cov2 {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let m = <[[f64; 2]; 2]>::deserialize(deserializer)?;
        if (m[0][1] - m[1][0]).abs() > 1e-9 {
            return Err(serde::de::Error::custom("covariance is not symmetric"));
        }
        Ok(Cov2::new(m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]))
    }
}

/// Gaussian belief over a planar position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationEstimate {
    pub mean: [f64; 2],
    pub cov: Cov2,
}

impl LocationEstimate {
    pub fn new(mean: [f64; 2], cov: Cov2) -> Result<Self, crate::Error> {
        if !mean.iter().all(|v| v.is_finite()) || !cov.is_spd() {
            return Err(crate::Error::NonSpd);
        }
        Ok(LocationEstimate { mean, cov })
    }

    pub fn isotropic(mean: [f64; 2], sigma: f64) -> Self {
        LocationEstimate {
            mean,
            cov: Cov2::isotropic(sigma * sigma),
        }
    }

    /// Mahalanobis distance of `point` under `cov + extra`.
    pub fn mahalanobis(&self, point: [f64; 2], extra: &Cov2) -> Option<f64> {
        let inv = self.cov.add(extra).inverse()?;
        let d = [point[0] - self.mean[0], point[1] - self.mean[1]];
        let w = inv.mul_vec(d);
        let d2 = d[0] * w[0] + d[1] * w[1];
        (d2 >= 0.0).then(|| d2.sqrt())
    }
}

/// Index of the `cell_m`-sized grid cell holding `point`. The grid is anchored
/// at the world origin.
pub fn grid_cell(point: [f64; 2], cell_m: f64) -> (i64, i64) {
    (
        (point[0] / cell_m).floor() as i64,
        (point[1] / cell_m).floor() as i64,
    )
}

pub fn cell_center(cell: (i64, i64), cell_m: f64) -> [f64; 2] {
    [(cell.0 as f64 + 0.5) * cell_m, (cell.1 as f64 + 0.5) * cell_m]
}

/// One contiguous stretch during which a track was being observed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceInterval {
    pub start: Timestamp,
    pub end: Timestamp,
    pub first_frame: u64,
    pub last_frame: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub label: String,
    pub kind: EntityKind,
    pub loc: LocationEstimate,
    pub intervals: Vec<PresenceInterval>,
    pub observation_count: u64,
    /// Noisy-OR of attributed detection confidences, before any age decay.
    pub existence_prob: f64,
}

impl Track {
    pub fn last_seen(&self) -> Timestamp {
        self.intervals.last().map(|iv| iv.end).unwrap_or(Timestamp::MIN)
    }

    pub fn last_frame(&self) -> Option<u64> {
        self.intervals.last().map(|iv| iv.last_frame)
    }

    /// Seconds between `ts` and the nearest observed interval, zero when inside one.
    pub fn time_gap_seconds(&self, ts: Timestamp) -> f64 {
        self.intervals
            .iter()
            .map(|iv| {
                if ts < iv.start {
                    ts.seconds_until(iv.start)
                } else if ts > iv.end {
                    iv.end.seconds_until(ts)
                } else {
                    0.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityEvent {
    pub subject: String,
    pub name: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub loc: Option<LocationEstimate>,
    pub prob: f64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub label: String,
}

impl EntityRef {
    pub fn new(kind: EntityKind, label: &str) -> Self {
        EntityRef {
            kind,
            label: fold_label(label),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bucket {
    Hour,
    Day,
}

impl Bucket {
    pub fn width_micros(self) -> i64 {
        match self {
            Bucket::Hour => MICROS_PER_HOUR,
            Bucket::Day => MICROS_PER_DAY,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Bucket::Hour => "hour",
            Bucket::Day => "day",
        }
    }
}

/// Parsed query, one of the five supported forms.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "query", rename_all = "snake_case")]
pub enum QueryAst {
    LastSeen {
        entity: EntityRef,
    },
    Present {
        entity: EntityRef,
        range: TimeRange,
    },
    Did {
        activity: String,
        subject: Option<String>,
        range: TimeRange,
    },
    Duration {
        activity: String,
        subject: Option<String>,
        range: TimeRange,
        bucket: Option<Bucket>,
    },
    WhereMost {
        activity: String,
        subject: Option<String>,
        range: TimeRange,
    },
}

impl QueryAst {
    pub fn range(&self) -> Option<TimeRange> {
        match self {
            QueryAst::LastSeen { .. } => None,
            QueryAst::Present { range, .. }
            | QueryAst::Did { range, .. }
            | QueryAst::Duration { range, .. }
            | QueryAst::WhereMost { range, .. } => Some(*range),
        }
    }

    /// `(activity, subject)` for the three activity forms.
    pub fn activity(&self) -> Option<(&str, Option<&str>)> {
        match self {
            QueryAst::Did {
                activity, subject, ..
            }
            | QueryAst::Duration {
                activity, subject, ..
            }
            | QueryAst::WhereMost {
                activity, subject, ..
            } => Some((activity.as_str(), subject.as_deref())),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketSeconds {
    pub bucket_start: Timestamp,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "answer", rename_all = "snake_case")]
pub enum Answer {
    Location {
        loc: LocationEstimate,
        ts: Timestamp,
        frame_id: u64,
        confidence: f64,
        coarse: bool,
    },
    Bool {
        value: bool,
        prob: f64,
        supporting_frames: Vec<u64>,
        /// Number of sightings or activity events backing the answer.
        count: u64,
        coarse: bool,
    },
    Duration {
        total_seconds: f64,
        per_bucket: Vec<BucketSeconds>,
        coarse: bool,
    },
    Place {
        cell: (i64, i64),
        cell_center: [f64; 2],
        seconds: f64,
        coarse: bool,
    },
    NotFound {
        coarse: bool,
    },
    NeedsReprocess {
        request: ReprocessRequest,
        coarse: bool,
    },
}

impl Answer {
    pub fn coarse(&self) -> bool {
        match self {
            Answer::Location { coarse, .. }
            | Answer::Bool { coarse, .. }
            | Answer::Duration { coarse, .. }
            | Answer::Place { coarse, .. }
            | Answer::NotFound { coarse }
            | Answer::NeedsReprocess { coarse, .. } => *coarse,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Answer::Location { .. } => "location",
            Answer::Bool { .. } => "bool",
            Answer::Duration { .. } => "duration",
            Answer::Place { .. } => "place",
            Answer::NotFound { .. } => "not_found",
            Answer::NeedsReprocess { .. } => "needs_reprocess",
        }
    }
}

/// Budgeted set of archived frames to hand to a reprocessor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReprocessRequest {
    pub query: QueryAst,
    pub predicate_label: Option<String>,
    pub range: TimeRange,
    pub frame_ids: Vec<u64>,
    pub budget: usize,
}

/// Anything that can arrive on the perception feed.
#[derive(Clone, Debug, PartialEq)]
pub enum Record {
    Frame(FrameMeta),
    Detection(Detection),
    Activity(ActivityEvent),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid record: {field}: {reason}")]
pub struct InvalidRecord {
    pub field: &'static str,
    pub reason: String,
}

impl InvalidRecord {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        InvalidRecord {
            field,
            reason: reason.into(),
        }
    }
}

fn check_unit(field: &'static str, value: f64) -> Result<(), InvalidRecord> {
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(InvalidRecord::new(field, "out of [0,1]"))
    }
}

fn check_label(field: &'static str, label: &str) -> Result<(), InvalidRecord> {
    if label.is_empty() {
        Err(InvalidRecord::new(field, "empty"))
    } else if label != fold_label(label) {
        Err(InvalidRecord::new(field, "not case-folded"))
    } else {
        Ok(())
    }
}

fn check_angle(field: &'static str, value: f64) -> Result<(), InvalidRecord> {
    if !value.is_finite() {
        Err(InvalidRecord::new(field, "not finite"))
    } else if !(-180.0..180.0).contains(&value) {
        Err(InvalidRecord::new(field, "outside [-180, 180)"))
    } else {
        Ok(())
    }
}

/// Checks the self-contained invariants of a feed record. Referential checks
/// (does the frame exist?) happen at ingest time against the store.
pub fn validate_feed_record(record: &Record) -> Result<(), InvalidRecord> {
    match record {
        Record::Frame(fm) => {
            let p = &fm.pose;
            for (field, v) in [("pose.x", p.x), ("pose.y", p.y), ("pose.z", p.z)] {
                if !v.is_finite() {
                    return Err(InvalidRecord::new(field, "not finite"));
                }
            }
            check_angle("pose.roll", p.roll)?;
            check_angle("pose.pitch", p.pitch)?;
            check_angle("pose.yaw", p.yaw)
        }
        Record::Detection(d) => {
            check_label("label", &d.label)?;
            check_unit("confidence", d.confidence)
        }
        Record::Activity(a) => {
            check_label("subject", &a.subject)?;
            check_label("name", &a.name)?;
            if a.start > a.end {
                return Err(InvalidRecord::new("end", "before start"));
            }
            check_unit("prob", a.prob)?;
            if let Some(loc) = &a.loc {
                if !loc.cov.is_spd() || !loc.mean.iter().all(|v| v.is_finite()) {
                    return Err(InvalidRecord::new("loc", "covariance not positive-definite"));
                }
            }
            Ok(())
        }
    }
}
