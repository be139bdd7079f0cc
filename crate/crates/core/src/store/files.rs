//! On-disk artifacts other than record payloads: manifest, segment headers,
//! and the derived index files.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Timestamp;
use crate::store::codec::{get_varint, put_varint, unzigzag, zigzag};
use crate::store::state::{Posting, StoreState};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "MANIFEST";
pub const LOCK_FILE: &str = "LOCK";
pub const SEGMENT_DIR: &str = "segments";
pub const INDEX_DIR: &str = "index";
pub const LABELS_INDEX: &str = "labels.idx";
pub const TIME_INDEX: &str = "time.idx";

pub(crate) const SEGMENT_MAGIC: &[u8; 6] = b"RMSEG\0";
pub(crate) const SEGMENT_HEADER_LEN: usize = 8;
const SEGMENT_VERSION: u16 = 1;

const LABELS_MAGIC: &[u8; 8] = b"RMIDXL\0\0";
const TIME_MAGIC: &[u8; 8] = b"RMIDXT\0\0";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TierBoundaries {
    /// Raw detections older than this were summarized hourly.
    pub hot_boundary: Option<Timestamp>,
    /// Hourly summaries older than this were rolled into daily ones.
    pub warm_boundary: Option<Timestamp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestStamp {
    pub frames: u64,
    pub elapsed_seconds: f64,
    pub rate_fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generation: u64,
    pub segments: Vec<u32>,
    pub next_segment: u32,
    pub tiers: TierBoundaries,
    pub last_ingest: Option<IngestStamp>,
}

impl Default for Manifest {
    fn default() -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            generation: 0,
            segments: Vec::new(),
            next_segment: 0,
            tiers: TierBoundaries::default(),
            last_ingest: None,
        }
    }
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST_FILE);
        let text = match fs::read(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NoStore(root.to_path_buf()))
            }
            Err(e) => return Err(e.into()),
        };
        let value: serde_json::Value = serde_json::from_slice(&text)?;
        let found = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(u64::MAX);
        if found > u64::from(FORMAT_VERSION) {
            return Err(Error::UnsupportedVersion {
                found: found.min(u64::from(u32::MAX)) as u32,
                supported: FORMAT_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        write_atomic(&root.join(MANIFEST_FILE), &bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Some(dir) = path.parent() {
        // Directory fsync is best-effort; not every platform allows it.
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

pub(crate) fn segment_path(root: &Path, no: u32) -> PathBuf {
    root.join(SEGMENT_DIR).join(format!("{no:04}.seg"))
}

pub(crate) fn segment_header() -> [u8; SEGMENT_HEADER_LEN] {
    let mut h = [0u8; SEGMENT_HEADER_LEN];
    h[..6].copy_from_slice(SEGMENT_MAGIC);
    h[6..].copy_from_slice(&SEGMENT_VERSION.to_le_bytes());
    h
}

pub(crate) fn create_segment(root: &Path, no: u32) -> Result<File> {
    fs::create_dir_all(root.join(SEGMENT_DIR))?;
    let mut f = OpenOptions::new()
        .create(true)
        .truncate(true)
        .write(true)
        .read(true)
        .open(segment_path(root, no))?;
    f.write_all(&segment_header())?;
    f.sync_all()?;
    Ok(f)
}

/// Identifies the exact segment contents an index file was derived from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct IndexStamp {
    pub generation: u64,
    pub segments: Vec<(u32, u64)>,
}

impl IndexStamp {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.generation.to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for (no, len) in &self.segments {
            out.extend_from_slice(&no.to_le_bytes());
            out.extend_from_slice(&len.to_le_bytes());
        }
    }

    fn decode(buf: &[u8], pos: &mut usize) -> Option<IndexStamp> {
        let generation = u64::from_le_bytes(buf.get(*pos..*pos + 8)?.try_into().ok()?);
        *pos += 8;
        let n = u32::from_le_bytes(buf.get(*pos..*pos + 4)?.try_into().ok()?) as usize;
        *pos += 4;
        let mut segments = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let no = u32::from_le_bytes(buf.get(*pos..*pos + 4)?.try_into().ok()?);
            let len = u64::from_le_bytes(buf.get(*pos + 4..*pos + 12)?.try_into().ok()?);
            *pos += 12;
            segments.push((no, len));
        }
        Some(IndexStamp {
            generation,
            segments,
        })
    }
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

fn unseal(bytes: &[u8]) -> Option<&[u8]> {
    if bytes.len() < 4 {
        return None;
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    (crc32fast::hash(body) == u32::from_le_bytes(crc.try_into().ok()?)).then_some(body)
}

fn header(magic: &[u8; 8], stamp: &IndexStamp) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    stamp.encode(&mut out);
    out
}

fn open_body<'a>(bytes: &'a [u8], magic: &[u8; 8], stamp: &IndexStamp) -> Option<(&'a [u8], usize)> {
    let body = unseal(bytes)?;
    if body.get(..8)? != magic {
        return None;
    }
    let version = u32::from_le_bytes(body.get(8..12)?.try_into().ok()?);
    if version != FORMAT_VERSION {
        return None;
    }
    let mut pos = 12;
    let found = IndexStamp::decode(body, &mut pos)?;
    (found == *stamp).then_some((body, pos))
}

/// Writes `index/labels.idx` and `index/time.idx`, or removes them when the
/// store holds no frames.
pub(crate) fn write_indexes(root: &Path, stamp: &IndexStamp, state: &StoreState) -> Result<()> {
    let dir = root.join(INDEX_DIR);
    if state.frames.is_empty() && state.detections.is_empty() {
        for name in [LABELS_INDEX, TIME_INDEX] {
            match fs::remove_file(dir.join(name)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e.into()),
                _ => {}
            }
        }
        let _ = fs::remove_dir(&dir);
        return Ok(());
    }
    fs::create_dir_all(&dir)?;

    let mut out = header(LABELS_MAGIC, stamp);
    let mut labels: Vec<_> = state.postings.iter().collect();
    labels.sort_by_key(|(id, _)| **id);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for (id, list) in labels {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        let (mut prev_frame, mut prev_det) = (0u64, 0i64);
        for p in list {
            put_varint(&mut out, p.frame_id - prev_frame);
            put_varint(&mut out, zigzag(i64::from(p.det) - prev_det));
            prev_frame = p.frame_id;
            prev_det = i64::from(p.det);
        }
    }
    write_atomic(&dir.join(LABELS_INDEX), &seal(out))?;

    let mut out = header(TIME_MAGIC, stamp);
    out.extend_from_slice(&(state.frames.len() as u64).to_le_bytes());
    let (mut prev_ts, mut prev_frame) = (0i64, 0u64);
    for f in &state.frames {
        put_varint(&mut out, zigzag(f.ts.as_micros().wrapping_sub(prev_ts)));
        put_varint(&mut out, f.frame_id - prev_frame);
        prev_ts = f.ts.as_micros();
        prev_frame = f.frame_id;
    }
    write_atomic(&dir.join(TIME_INDEX), &seal(out))
}

/// Loads label postings if `labels.idx` matches `stamp` and agrees with the
/// decoded detections; `None` means the caller must rebuild.
pub(crate) fn load_label_postings(
    root: &Path,
    stamp: &IndexStamp,
    state: &StoreState,
) -> Option<HashMap<u32, Vec<Posting>>> {
    let bytes = fs::read(root.join(INDEX_DIR).join(LABELS_INDEX)).ok()?;
    let (body, mut pos) = open_body(&bytes, LABELS_MAGIC, stamp)?;
    let n_labels = u32::from_le_bytes(body.get(pos..pos + 4)?.try_into().ok()?);
    pos += 4;
    let mut postings = HashMap::new();
    let mut total = 0usize;
    for _ in 0..n_labels {
        let id = u32::from_le_bytes(body.get(pos..pos + 4)?.try_into().ok()?);
        let count = u32::from_le_bytes(body.get(pos + 4..pos + 8)?.try_into().ok()?) as usize;
        pos += 8;
        let mut list = Vec::with_capacity(count.min(state.detections.len()));
        let (mut frame_id, mut det) = (0u64, 0i64);
        for _ in 0..count {
            frame_id = frame_id.checked_add(get_varint(body, &mut pos)?)?;
            det += unzigzag(get_varint(body, &mut pos)?);
            let row = state.detections.get(usize::try_from(det).ok()?)?;
            if row.label != id || row.frame_id != frame_id {
                return None;
            }
            let ts = state.frame(frame_id)?.ts;
            list.push(Posting {
                ts,
                frame_id,
                det: det as u32,
            });
        }
        total += list.len();
        postings.insert(id, list);
    }
    (pos == body.len() && total == state.detections.len()).then_some(postings)
}

/// Reads `time.idx` back as `(ts, frame_id)` pairs; used by integrity checks.
pub fn read_time_index(root: &Path) -> Result<Vec<(Timestamp, u64)>> {
    let path = root.join(INDEX_DIR).join(TIME_INDEX);
    let bytes = fs::read(&path)?;
    let corrupt = || Error::CorruptIndex {
        path: path.clone(),
        reason: "malformed time index".into(),
    };
    let body = unseal(&bytes).ok_or_else(corrupt)?;
    if body.get(..8) != Some(TIME_MAGIC.as_slice()) {
        return Err(corrupt());
    }
    let mut pos = 12;
    IndexStamp::decode(body, &mut pos).ok_or_else(corrupt)?;
    let n = u64::from_le_bytes(
        body.get(pos..pos + 8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(corrupt)?,
    );
    pos += 8;
    let mut out = Vec::new();
    let (mut ts, mut frame) = (0i64, 0u64);
    for _ in 0..n {
        ts = ts.wrapping_add(unzigzag(get_varint(body, &mut pos).ok_or_else(corrupt)?));
        frame += get_varint(body, &mut pos).ok_or_else(corrupt)?;
        out.push((Timestamp::from_micros(ts), frame));
    }
    Ok(out)
}

pub(crate) fn dir_size(path: &Path) -> Result<u64> {
    let mut total = 0;
    let entries = match fs::read_dir(path) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let entry = entry?;
        let meta = entry.metadata()?;
        if meta.is_dir() {
            total += dir_size(&entry.path())?;
        } else {
            total += meta.len();
        }
    }
    Ok(total)
}
