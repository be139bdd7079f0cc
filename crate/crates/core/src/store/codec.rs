//! Binary record encoding for segment files.
//!
//! Every record is framed as
//!
//! ```text
//! [4] payload length, u32 LE
//! [1] tag
//! [n] payload
//! [4] crc32 over length, tag and payload
//! ```
//!
//! Strings never appear inline in hot records; they are interned through
//! `Label` records which always precede their first use in segment order.

use crate::model::{
    ActivityEvent, Cov2, EntityKind, FrameMeta, LocationEstimate, Pose, PresenceInterval,
    Provenance, TimeRange, Timestamp, Track,
};
use crate::store::{ActivitySummary, Coverage, DetRow, DetectionSummary, LabelTable, Tier};

pub(crate) const FRAME_OVERHEAD: usize = 4 + 1 + 4;
/// Upper bound on a single record payload; anything larger is treated as corruption.
pub(crate) const MAX_PAYLOAD: usize = 16 << 20;

const TAG_LABEL: u8 = 1;
const TAG_FRAME: u8 = 2;
const TAG_DETECTION: u8 = 3;
const TAG_ACTIVITY: u8 = 4;
const TAG_TRACK: u8 = 5;
const TAG_DET_SUMMARY: u8 = 6;
const TAG_ACT_SUMMARY: u8 = 7;
const TAG_COVERAGE: u8 = 8;
const TAG_REFINE_STATE: u8 = 9;

const NO_LABEL: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum StoredRecord {
    Label { id: u32, name: String },
    Frame(FrameMeta),
    Detection(DetRow),
    Activity(ActivityEvent),
    Track(Track),
    DetSummary(DetectionSummary),
    ActSummary(ActivitySummary),
    Coverage(Coverage),
    RefineState { watermark: u64, next_track_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct DecodeError(pub String);

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fn ts(&mut self, v: Timestamp) {
        self.i64(v.as_micros());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn loc(&mut self, loc: &LocationEstimate) {
        self.f64(loc.mean[0]);
        self.f64(loc.mean[1]);
        self.f64(loc.cov.xx);
        self.f64(loc.cov.xy);
        self.f64(loc.cov.yy);
    }
    fn label(&mut self, labels: &LabelTable, name: &str) {
        self.u32(labels.id(name).expect("label interned before encode"));
    }
    fn opt_label(&mut self, labels: &LabelTable, name: Option<&str>) {
        match name {
            Some(n) => self.label(labels, n),
            None => self.u32(NO_LABEL),
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(DecodeError("payload truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn i64(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f64, DecodeError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
    fn ts(&mut self) -> Result<Timestamp, DecodeError> {
        Ok(Timestamp::from_micros(self.i64()?))
    }
    fn string(&mut self) -> Result<String, DecodeError> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError("label is not utf-8".into()))
    }
    fn loc(&mut self) -> Result<LocationEstimate, DecodeError> {
        let mean = [self.f64()?, self.f64()?];
        let cov = Cov2::new(self.f64()?, self.f64()?, self.f64()?);
        Ok(LocationEstimate { mean, cov })
    }
    fn label(&mut self, labels: &LabelTable) -> Result<String, DecodeError> {
        let id = self.u32()?;
        labels
            .name(id)
            .map(str::to_owned)
            .ok_or_else(|| DecodeError(format!("undefined label id {id}")))
    }
    fn opt_label(&mut self, labels: &LabelTable) -> Result<Option<String>, DecodeError> {
        let id = self.u32()?;
        if id == NO_LABEL {
            return Ok(None);
        }
        labels
            .name(id)
            .map(|s| Some(s.to_owned()))
            .ok_or_else(|| DecodeError(format!("undefined label id {id}")))
    }
    fn finish(self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(DecodeError("trailing bytes in payload".into()))
        }
    }
}

fn kind_code(kind: EntityKind) -> u8 {
    match kind {
        EntityKind::Object => 0,
        EntityKind::Person => 1,
    }
}

fn kind_from(code: u8) -> Result<EntityKind, DecodeError> {
    match code {
        0 => Ok(EntityKind::Object),
        1 => Ok(EntityKind::Person),
        other => Err(DecodeError(format!("bad entity kind {other}"))),
    }
}

fn prov_code(p: Provenance) -> u8 {
    match p {
        Provenance::Ingested => 0,
        Provenance::Reprocessed => 1,
    }
}

fn prov_from(code: u8) -> Result<Provenance, DecodeError> {
    match code {
        0 => Ok(Provenance::Ingested),
        1 => Ok(Provenance::Reprocessed),
        other => Err(DecodeError(format!("bad provenance {other}"))),
    }
}

fn tier_code(t: Tier) -> u8 {
    match t {
        Tier::Warm => 1,
        Tier::Cold => 2,
    }
}

fn tier_from(code: u8) -> Result<Tier, DecodeError> {
    match code {
        1 => Ok(Tier::Warm),
        2 => Ok(Tier::Cold),
        other => Err(DecodeError(format!("bad tier {other}"))),
    }
}

/// Appends one framed record to `out`.
pub(crate) fn encode(record: &StoredRecord, labels: &LabelTable, out: &mut Vec<u8>) {
    let mut e = Enc(Vec::with_capacity(64));
    let tag = match record {
        StoredRecord::Label { id, name } => {
            e.u32(*id);
            e.bytes(name.as_bytes());
            TAG_LABEL
        }
        StoredRecord::Frame(fm) => {
            e.u64(fm.frame_id);
            e.ts(fm.ts);
            e.f64(fm.pose.x);
            e.f64(fm.pose.y);
            e.f32(fm.pose.z);
            e.f32(fm.pose.roll);
            e.f32(fm.pose.pitch);
            e.f32(fm.pose.yaw);
            TAG_FRAME
        }
        StoredRecord::Detection(d) => {
            e.u64(d.frame_id);
            e.u32(d.label);
            e.u8(kind_code(d.kind) | (prov_code(d.provenance) << 1));
            e.f64(d.confidence);
            TAG_DETECTION
        }
        StoredRecord::Activity(a) => {
            e.label(labels, &a.subject);
            e.label(labels, &a.name);
            e.ts(a.start);
            e.ts(a.end);
            e.f64(a.prob);
            e.u8(prov_code(a.provenance));
            match &a.loc {
                Some(loc) => {
                    e.u8(1);
                    e.loc(loc);
                }
                None => e.u8(0),
            }
            TAG_ACTIVITY
        }
        StoredRecord::Track(t) => {
            e.u64(t.track_id);
            e.label(labels, &t.label);
            e.u8(kind_code(t.kind));
            e.loc(&t.loc);
            e.u64(t.observation_count);
            e.f64(t.existence_prob);
            e.u32(t.intervals.len() as u32);
            for iv in &t.intervals {
                e.ts(iv.start);
                e.ts(iv.end);
                e.u64(iv.first_frame);
                e.u64(iv.last_frame);
            }
            TAG_TRACK
        }
        StoredRecord::DetSummary(s) => {
            e.u8(tier_code(s.tier));
            e.ts(s.bucket_start);
            e.label(labels, &s.label);
            e.u8(kind_code(s.kind));
            e.u64(s.first_frame);
            e.u64(s.last_frame);
            e.ts(s.first_ts);
            e.ts(s.last_ts);
            e.u64(s.count);
            e.loc(&s.loc);
            e.f64(s.noisy_or);
            TAG_DET_SUMMARY
        }
        StoredRecord::ActSummary(s) => {
            e.u8(tier_code(s.tier));
            e.ts(s.bucket_start);
            e.label(labels, &s.subject);
            e.label(labels, &s.name);
            match s.cell {
                Some((i, j)) => {
                    e.u8(1);
                    e.i64(i);
                    e.i64(j);
                }
                None => e.u8(0),
            }
            e.i64(s.micros);
            e.f64(s.max_prob);
            TAG_ACT_SUMMARY
        }
        StoredRecord::Coverage(c) => {
            e.opt_label(labels, c.subject.as_deref());
            e.opt_label(labels, c.activity.as_deref());
            e.ts(c.range.from);
            e.ts(c.range.to);
            TAG_COVERAGE
        }
        StoredRecord::RefineState {
            watermark,
            next_track_id,
        } => {
            e.u64(*watermark);
            e.u64(*next_track_id);
            TAG_REFINE_STATE
        }
    };
    let payload = e.0;
    let start = out.len();
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.push(tag);
    out.extend_from_slice(&payload);
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
}

/// Outcome of reading one framed record from a byte slice.
pub(crate) enum Framed<'a> {
    Record { tag: u8, payload: &'a [u8], len: usize },
    /// Not enough bytes for a full record: a torn tail.
    Incomplete,
    Corrupt(String),
}

pub(crate) fn read_frame(buf: &[u8]) -> Framed<'_> {
    if buf.len() < FRAME_OVERHEAD {
        return Framed::Incomplete;
    }
    let n = u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize;
    if n > MAX_PAYLOAD {
        return Framed::Corrupt(format!("payload length {n} exceeds limit"));
    }
    let total = FRAME_OVERHEAD + n;
    if buf.len() < total {
        return Framed::Incomplete;
    }
    let stored = u32::from_le_bytes(buf[5 + n..total].try_into().unwrap());
    if crc32fast::hash(&buf[..5 + n]) != stored {
        return Framed::Corrupt("checksum mismatch".into());
    }
    Framed::Record {
        tag: buf[4],
        payload: &buf[5..5 + n],
        len: total,
    }
}

/// Decodes a payload. `Label` records are returned as-is; the caller must
/// register them in `labels` before decoding later records.
pub(crate) fn decode(tag: u8, payload: &[u8], labels: &LabelTable) -> Result<StoredRecord, DecodeError> {
    let mut d = Dec {
        buf: payload,
        pos: 0,
    };
    let rec = match tag {
        TAG_LABEL => StoredRecord::Label {
            id: d.u32()?,
            name: d.string()?,
        },
        TAG_FRAME => {
            let frame_id = d.u64()?;
            let ts = d.ts()?;
            let x = d.f64()?;
            let y = d.f64()?;
            let z = d.f32()?;
            let roll = d.f32()?;
            let pitch = d.f32()?;
            let yaw = d.f32()?;
            StoredRecord::Frame(FrameMeta {
                frame_id,
                ts,
                pose: Pose::new(x, y, z, roll, pitch, yaw),
            })
        }
        TAG_DETECTION => {
            let frame_id = d.u64()?;
            let label = d.u32()?;
            if labels.name(label).is_none() {
                return Err(DecodeError(format!("undefined label id {label}")));
            }
            let flags = d.u8()?;
            let confidence = d.f64()?;
            StoredRecord::Detection(DetRow {
                frame_id,
                label,
                kind: kind_from(flags & 1)?,
                provenance: prov_from(flags >> 1)?,
                confidence,
            })
        }
        TAG_ACTIVITY => {
            let subject = d.label(labels)?;
            let name = d.label(labels)?;
            let start = d.ts()?;
            let end = d.ts()?;
            let prob = d.f64()?;
            let provenance = prov_from(d.u8()?)?;
            let loc = match d.u8()? {
                0 => None,
                _ => Some(d.loc()?),
            };
            StoredRecord::Activity(ActivityEvent {
                subject,
                name,
                start,
                end,
                loc,
                prob,
                provenance,
            })
        }
        TAG_TRACK => {
            let track_id = d.u64()?;
            let label = d.label(labels)?;
            let kind = kind_from(d.u8()?)?;
            let loc = d.loc()?;
            let observation_count = d.u64()?;
            let existence_prob = d.f64()?;
            let n = d.u32()? as usize;
            if n > payload.len() / 32 {
                return Err(DecodeError("interval count exceeds payload".into()));
            }
            let mut intervals = Vec::with_capacity(n);
            for _ in 0..n {
                intervals.push(PresenceInterval {
                    start: d.ts()?,
                    end: d.ts()?,
                    first_frame: d.u64()?,
                    last_frame: d.u64()?,
                });
            }
            StoredRecord::Track(Track {
                track_id,
                label,
                kind,
                loc,
                intervals,
                observation_count,
                existence_prob,
            })
        }
        TAG_DET_SUMMARY => StoredRecord::DetSummary(DetectionSummary {
            tier: tier_from(d.u8()?)?,
            bucket_start: d.ts()?,
            label: d.label(labels)?,
            kind: kind_from(d.u8()?)?,
            first_frame: d.u64()?,
            last_frame: d.u64()?,
            first_ts: d.ts()?,
            last_ts: d.ts()?,
            count: d.u64()?,
            loc: d.loc()?,
            noisy_or: d.f64()?,
        }),
        TAG_ACT_SUMMARY => {
            let tier = tier_from(d.u8()?)?;
            let bucket_start = d.ts()?;
            let subject = d.label(labels)?;
            let name = d.label(labels)?;
            let cell = match d.u8()? {
                0 => None,
                _ => Some((d.i64()?, d.i64()?)),
            };
            StoredRecord::ActSummary(ActivitySummary {
                tier,
                bucket_start,
                subject,
                name,
                cell,
                micros: d.i64()?,
                max_prob: d.f64()?,
            })
        }
        TAG_COVERAGE => {
            let subject = d.opt_label(labels)?;
            let activity = d.opt_label(labels)?;
            let from = d.ts()?;
            let to = d.ts()?;
            let range = TimeRange::new(from, to).ok_or_else(|| DecodeError("inverted coverage range".into()))?;
            StoredRecord::Coverage(Coverage {
                subject,
                activity,
                range,
            })
        }
        TAG_REFINE_STATE => StoredRecord::RefineState {
            watermark: d.u64()?,
            next_track_id: d.u64()?,
        },
        other => return Err(DecodeError(format!("unknown record tag {other}"))),
    };
    d.finish()?;
    Ok(rec)
}

pub(crate) fn put_varint(out: &mut Vec<u8>, mut v: u64) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

pub(crate) fn get_varint(buf: &[u8], pos: &mut usize) -> Option<u64> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *buf.get(*pos)?;
        *pos += 1;
        v |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Some(v);
        }
    }
    None
}

pub(crate) fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

pub(crate) fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}
