//! Durable storage: append-only checksummed segments are the source of truth;
//! label postings and the time index are derived and can be rebuilt.
//!
//! Layout under the store root:
//!
//! ```text
//! MANIFEST            versioned JSON: live segments, tier boundaries
//! LOCK                advisory writer lock
//! segments/NNNN.seg   framed records (see `codec`)
//! index/labels.idx    label -> (frame_id, detection) postings
//! index/time.idx      ts -> frame_id
//! ```

mod codec;
mod files;
mod read;
mod state;
mod tier;

use std::fs::{self, File, OpenOptions};
use std::io::{Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    validate_feed_record, ActivityEvent, EntityKind, LocationEstimate, Record, TimeRange,
    Timestamp, Track,
};

use codec::{Framed, StoredRecord};
use files::{IndexStamp, SEGMENT_HEADER_LEN, SEGMENT_MAGIC};
pub(crate) use state::{DetRow, LabelTable, StoreState};

pub use files::{
    read_time_index, IngestStamp, Manifest, TierBoundaries, FORMAT_VERSION, INDEX_DIR,
    LABELS_INDEX, LOCK_FILE, MANIFEST_FILE, SEGMENT_DIR, TIME_INDEX,
};
pub use read::{Order, ReadTrace, Sighting, Snapshot};
pub use tier::{MigrationPolicy, MigrationReport};

/// Retention tier of a summary record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    /// Hourly summaries.
    Warm,
    /// Daily summaries.
    Cold,
}

impl Tier {
    pub fn bucket_micros(self) -> i64 {
        match self {
            Tier::Warm => crate::model::MICROS_PER_HOUR,
            Tier::Cold => crate::model::MICROS_PER_DAY,
        }
    }
}

/// Sightings of one label within one hour (warm) or day (cold) bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub tier: Tier,
    pub bucket_start: Timestamp,
    pub label: String,
    pub kind: EntityKind,
    pub first_frame: u64,
    pub last_frame: u64,
    pub first_ts: Timestamp,
    pub last_ts: Timestamp,
    pub count: u64,
    pub loc: LocationEstimate,
    /// Noisy-OR of the summarized confidences.
    pub noisy_or: f64,
}

/// Activity seconds of one `(subject, name)` within a bucket, split by grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivitySummary {
    pub tier: Tier,
    pub bucket_start: Timestamp,
    pub subject: String,
    pub name: String,
    pub cell: Option<(i64, i64)>,
    pub micros: i64,
    pub max_prob: f64,
}

/// A span over which activity recognition is known to have run. `None`
/// fields are wildcards.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub subject: Option<String>,
    pub activity: Option<String>,
    pub range: TimeRange,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreStats {
    pub bytes_on_disk: u64,
    pub frames: u64,
    pub detections: u64,
    pub tracks: u64,
    pub bytes_per_frame: f64,
}

#[derive(Clone, Debug)]
pub struct StoreOptions {
    pub read_only: bool,
    /// Refuse appends once segment bytes would exceed this.
    pub max_bytes: Option<u64>,
    pub segment_max_records: u32,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            read_only: false,
            max_bytes: None,
            segment_max_records: 1 << 16,
        }
    }
}

impl StoreOptions {
    pub fn read_only() -> Self {
        StoreOptions {
            read_only: true,
            ..Default::default()
        }
    }
}

/// Position and kind of one framed record inside a segment file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordSpan {
    pub offset: u64,
    pub len: u64,
    pub tag: u8,
}

#[derive(Clone, Debug)]
pub struct SegmentReport {
    pub records: Vec<RecordSpan>,
    /// Bytes up to the end of the last intact record.
    pub valid_len: u64,
    pub file_len: u64,
    pub problem: Option<String>,
}

/// Walks a segment file's framing and checksums without decoding payloads.
pub fn inspect_segment(path: &Path) -> Result<SegmentReport> {
    let bytes = fs::read(path)?;
    let mut report = SegmentReport {
        records: Vec::new(),
        valid_len: 0,
        file_len: bytes.len() as u64,
        problem: None,
    };
    if bytes.len() < SEGMENT_HEADER_LEN || &bytes[..6] != SEGMENT_MAGIC {
        report.problem = Some("missing or short header".into());
        return Ok(report);
    }
    let mut pos = SEGMENT_HEADER_LEN;
    report.valid_len = pos as u64;
    while pos < bytes.len() {
        match codec::read_frame(&bytes[pos..]) {
            Framed::Record { tag, len, .. } => {
                report.records.push(RecordSpan {
                    offset: pos as u64,
                    len: len as u64,
                    tag,
                });
                pos += len;
                report.valid_len = pos as u64;
            }
            Framed::Incomplete => {
                report.problem = Some(format!("torn record at offset {pos}"));
                break;
            }
            Framed::Corrupt(why) => {
                report.problem = Some(format!("{why} at offset {pos}"));
                break;
            }
        }
    }
    Ok(report)
}

/// Tag byte used for frame records, exposed for tooling built on `inspect_segment`.
pub const FRAME_RECORD_TAG: u8 = 2;
/// Tag byte used for detection records.
pub const DETECTION_RECORD_TAG: u8 = 3;

struct ActiveSegment {
    no: u32,
    file: File,
    len: u64,
    records: u32,
}

/// Handle on a store directory. A writable handle holds the advisory lock;
/// any number of read-only handles may coexist with it.
pub struct Store {
    root: PathBuf,
    opts: StoreOptions,
    manifest: Manifest,
    state: Arc<StoreState>,
    active: Option<ActiveSegment>,
    pending: Vec<u8>,
    pending_records: u32,
    segment_bytes: u64,
    index_dirty: bool,
    _lock: Option<File>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .field("read_only", &self.opts.read_only)
            .field("frames", &self.state.frames.len())
            .finish()
    }
}

impl Store {
    /// Creates an empty store (a manifest only). Opens it if one already exists.
    pub fn init(root: impl AsRef<Path>) -> Result<Store> {
        Store::init_with(root, StoreOptions::default())
    }

    pub fn init_with(root: impl AsRef<Path>, opts: StoreOptions) -> Result<Store> {
        let root = root.as_ref();
        fs::create_dir_all(root)?;
        if !root.join(MANIFEST_FILE).exists() {
            Manifest::default().save(root)?;
        }
        Store::open(root, opts)
    }

    pub fn open(root: impl AsRef<Path>, opts: StoreOptions) -> Result<Store> {
        let root = root.as_ref().to_path_buf();
        let manifest = Manifest::load(&root)?;
        let lock = if opts.read_only {
            None
        } else {
            let f = OpenOptions::new()
                .create(true)
                .truncate(false)
                .write(true)
                .open(root.join(LOCK_FILE))?;
            match f.try_lock() {
                Ok(()) => Some(f),
                Err(std::fs::TryLockError::WouldBlock) => return Err(Error::Locked(root)),
                Err(std::fs::TryLockError::Error(e)) => return Err(e.into()),
            }
        };

        if !opts.read_only {
            remove_orphans(&root, &manifest)?;
        }

        let mut state = StoreState::default();
        let mut segment_bytes = 0u64;
        let mut stamp_segments = Vec::with_capacity(manifest.segments.len());
        let mut tail = (SEGMENT_HEADER_LEN as u64, 0u32);
        for (i, &no) in manifest.segments.iter().enumerate() {
            let is_last = i + 1 == manifest.segments.len();
            let path = files::segment_path(&root, no);
            let (valid, records) = load_segment(&path, &mut state, is_last, opts.read_only)?;
            segment_bytes += valid;
            stamp_segments.push((no, valid));
            if is_last {
                tail = (valid, records);
            }
        }

        let stamp = IndexStamp {
            generation: manifest.generation,
            segments: stamp_segments,
        };
        let index_dirty = match files::load_label_postings(&root, &stamp, &state) {
            Some(postings) => {
                state.postings = postings;
                false
            }
            None => {
                state
                    .rebuild_postings()
                    .map_err(|reason| Error::CorruptSegment {
                        path: root.join(SEGMENT_DIR),
                        offset: 0,
                        reason,
                    })?;
                !state.frames.is_empty()
            }
        };

        let active = match (opts.read_only, manifest.segments.last()) {
            (false, Some(&no)) => {
                let mut file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .open(files::segment_path(&root, no))?;
                file.seek(SeekFrom::Start(tail.0))?;
                Some(ActiveSegment {
                    no,
                    file,
                    len: tail.0,
                    records: tail.1,
                })
            }
            _ => None,
        };

        let mut store = Store {
            root,
            opts,
            manifest,
            state: Arc::new(state),
            active,
            pending: Vec::new(),
            pending_records: 0,
            segment_bytes,
            index_dirty,
            _lock: lock,
        };
        if store.index_dirty && !store.opts.read_only {
            store.write_indexes()?;
        }
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn is_read_only(&self) -> bool {
        self.opts.read_only
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Consistent read view; later writes to this handle do not affect it.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot::new(self.state.clone())
    }

    pub(crate) fn state(&self) -> &StoreState {
        &self.state
    }

    /// Validates and appends one feed record. Frames must arrive with strictly
    /// increasing ids and non-decreasing timestamps; detections must refer to
    /// a stored frame.
    pub fn append(&mut self, record: &Record) -> Result<()> {
        self.check_writable()?;
        validate_feed_record(record)?;
        match record {
            Record::Frame(fm) => {
                if let Some(last) = self.state.last_frame() {
                    if fm.frame_id <= last.frame_id || fm.ts < last.ts {
                        return Err(Error::OutOfOrderFrame {
                            frame_id: fm.frame_id,
                        });
                    }
                }
                self.push(StoredRecord::Frame(*fm))
            }
            Record::Detection(d) => {
                if self.state.frame(d.frame_id).is_none() {
                    return Err(Error::UnknownFrame(d.frame_id));
                }
                let label = self.intern(&d.label)?;
                self.push(StoredRecord::Detection(DetRow {
                    frame_id: d.frame_id,
                    label,
                    kind: d.kind,
                    provenance: d.provenance,
                    confidence: d.confidence,
                }))
            }
            Record::Activity(a) => self.append_activity(a),
        }
    }

    pub(crate) fn append_activity(&mut self, a: &ActivityEvent) -> Result<()> {
        self.check_writable()?;
        self.intern(&a.subject)?;
        self.intern(&a.name)?;
        self.push(StoredRecord::Activity(a.clone()))
    }

    pub(crate) fn put_track(&mut self, track: &Track) -> Result<()> {
        self.check_writable()?;
        self.intern(&track.label)?;
        self.push(StoredRecord::Track(track.clone()))
    }

    pub(crate) fn put_refine_state(&mut self, watermark: u64, next_track_id: u64) -> Result<()> {
        self.check_writable()?;
        self.push(StoredRecord::RefineState {
            watermark,
            next_track_id,
        })
    }

    /// Records that activity recognition has covered `range` for the given
    /// subject/activity (`None` = all).
    pub fn mark_coverage(&mut self, coverage: Coverage) -> Result<()> {
        self.check_writable()?;
        if let Some(s) = &coverage.subject {
            self.intern(s)?;
        }
        if let Some(a) = &coverage.activity {
            self.intern(a)?;
        }
        self.push(StoredRecord::Coverage(coverage))
    }

    pub fn record_ingest(&mut self, stamp: IngestStamp) -> Result<()> {
        self.check_writable()?;
        self.manifest.last_ingest = Some(stamp);
        self.manifest.save(&self.root)
    }

    fn check_writable(&self) -> Result<()> {
        if self.opts.read_only {
            Err(Error::ReadOnly)
        } else {
            Ok(())
        }
    }

    fn intern(&mut self, name: &str) -> Result<u32> {
        if let Some(id) = self.state.labels.id(name) {
            return Ok(id);
        }
        let id = self.state.labels.len() as u32;
        self.push(StoredRecord::Label {
            id,
            name: name.to_owned(),
        })?;
        Ok(id)
    }

    fn push(&mut self, record: StoredRecord) -> Result<()> {
        let active_records = self.active.as_ref().map_or(0, |a| a.records);
        if active_records + self.pending_records >= self.opts.segment_max_records.max(1) {
            self.flush()?;
            self.rotate()?;
        }
        let before = self.pending.len();
        codec::encode(&record, &self.state.labels, &mut self.pending);
        let added = (self.pending.len() - before) as u64;
        if let Some(limit) = self.opts.max_bytes {
            let header = if self.active.is_none() {
                SEGMENT_HEADER_LEN as u64
            } else {
                0
            };
            if self.segment_bytes + (before as u64) + added + header > limit {
                self.pending.truncate(before);
                return Err(Error::StorageFull { limit });
            }
        }
        let state = Arc::make_mut(&mut self.state);
        if let Err(reason) = state.apply(record, true) {
            self.pending.truncate(before);
            return Err(Error::InvalidArgument(reason));
        }
        self.pending_records += 1;
        self.index_dirty = true;
        Ok(())
    }

    fn rotate(&mut self) -> Result<()> {
        let no = self.manifest.next_segment;
        let file = files::create_segment(&self.root, no)?;
        self.manifest.next_segment += 1;
        self.manifest.segments.push(no);
        self.manifest.save(&self.root)?;
        self.segment_bytes += SEGMENT_HEADER_LEN as u64;
        self.active = Some(ActiveSegment {
            no,
            file,
            len: SEGMENT_HEADER_LEN as u64,
            records: 0,
        });
        Ok(())
    }

    /// True when appended records are buffered but not yet on disk.
    pub fn has_pending_writes(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Writes buffered records to the active segment and syncs it.
    pub fn flush(&mut self) -> Result<()> {
        if self.pending.is_empty() {
            return Ok(());
        }
        self.check_writable()?;
        if self.active.is_none() {
            self.rotate()?;
        }
        let active = self.active.as_mut().expect("active segment");
        active.file.write_all(&self.pending)?;
        active.file.sync_data()?;
        active.len += self.pending.len() as u64;
        active.records += self.pending_records;
        self.segment_bytes += self.pending.len() as u64;
        self.pending.clear();
        self.pending_records = 0;
        Ok(())
    }

    /// Flushes and persists the derived index files.
    pub fn checkpoint(&mut self) -> Result<()> {
        self.flush()?;
        if self.index_dirty && !self.opts.read_only {
            self.write_indexes()?;
        }
        Ok(())
    }

    /// Drops buffered, unflushed records as a crash would. Only what was
    /// flushed survives a reopen.
    pub fn abandon(mut self) {
        self.pending.clear();
        self.pending_records = 0;
    }

    fn stamp(&self) -> IndexStamp {
        let mut segments: Vec<(u32, u64)> = Vec::with_capacity(self.manifest.segments.len());
        for &no in &self.manifest.segments {
            let len = match &self.active {
                Some(a) if a.no == no => a.len,
                _ => fs::metadata(files::segment_path(&self.root, no))
                    .map(|m| m.len())
                    .unwrap_or(0),
            };
            segments.push((no, len));
        }
        IndexStamp {
            generation: self.manifest.generation,
            segments,
        }
    }

    fn write_indexes(&mut self) -> Result<()> {
        let stamp = self.stamp();
        files::write_indexes(&self.root, &stamp, &self.state)?;
        self.index_dirty = false;
        Ok(())
    }

    /// Sizes reflect on-disk state; call after `checkpoint` for exact numbers.
    pub fn stats(&self) -> Result<StoreStats> {
        let mut bytes = 0;
        let manifest = self.root.join(MANIFEST_FILE);
        if let Ok(m) = fs::metadata(&manifest) {
            bytes += m.len();
        }
        bytes += files::dir_size(&self.root.join(SEGMENT_DIR))?;
        bytes += files::dir_size(&self.root.join(INDEX_DIR))?;
        let frames = self.state.frames.len() as u64;
        Ok(StoreStats {
            bytes_on_disk: bytes,
            frames,
            detections: self.state.detections.len() as u64,
            tracks: self.state.tracks.len() as u64,
            bytes_per_frame: bytes as f64 / frames.max(1) as f64,
        })
    }

    /// Replaces the whole segment set with a compacted rewrite of `next`.
    pub(crate) fn rewrite(&mut self, next: StoreState, tiers: TierBoundaries) -> Result<()> {
        self.check_writable()?;
        self.flush()?;
        let records = next.to_records();
        let old_segments = std::mem::take(&mut self.manifest.segments);
        self.active = None;

        let max = self.opts.segment_max_records.max(1) as usize;
        let mut new_segments = Vec::new();
        let mut total = 0u64;
        let mut last: Option<ActiveSegment> = None;
        for chunk in records.chunks(max) {
            let no = self.manifest.next_segment;
            self.manifest.next_segment += 1;
            let mut file = files::create_segment(&self.root, no)?;
            let mut buf = Vec::new();
            for rec in chunk {
                codec::encode(rec, &next.labels, &mut buf);
            }
            file.write_all(&buf)?;
            file.sync_all()?;
            let len = (SEGMENT_HEADER_LEN + buf.len()) as u64;
            total += len;
            new_segments.push(no);
            last = Some(ActiveSegment {
                no,
                file,
                len,
                records: chunk.len() as u32,
            });
        }
        self.manifest.segments = new_segments;
        self.manifest.generation += 1;
        self.manifest.tiers = tiers;
        self.manifest.save(&self.root)?;
        for no in old_segments {
            let _ = fs::remove_file(files::segment_path(&self.root, no));
        }
        self.active = last;
        self.segment_bytes = total;
        self.state = Arc::new(next);
        self.index_dirty = true;
        self.write_indexes()
    }
}

impl Drop for Store {
    fn drop(&mut self) {
        if !self.pending.is_empty() && !self.opts.read_only {
            if let Err(e) = self.flush() {
                tracing::warn!("flush on drop failed: {e}");
            }
        }
    }
}

fn remove_orphans(root: &Path, manifest: &Manifest) -> Result<()> {
    let dir = root.join(SEGMENT_DIR);
    let entries = match fs::read_dir(&dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e.into()),
    };
    for entry in entries {
        let path = entry?.path();
        let live = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u32>().ok())
            .is_some_and(|no| manifest.segments.contains(&no))
            && path.extension().is_some_and(|e| e == "seg");
        if !live {
            tracing::info!("removing orphan segment file {}", path.display());
            fs::remove_file(&path)?;
        }
    }
    Ok(())
}

/// Replays one segment into `state`, returning its valid length and record
/// count. A torn or
/// corrupt tail is tolerated only in the last segment, which is truncated
/// back to the last intact record when writable.
fn load_segment(
    path: &Path,
    state: &mut StoreState,
    is_last: bool,
    read_only: bool,
) -> Result<(u64, u32)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound && is_last => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let corrupt = |offset: usize, reason: String| Error::CorruptSegment {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };

    if bytes.len() < SEGMENT_HEADER_LEN || &bytes[..6] != SEGMENT_MAGIC {
        let torn_header = bytes.len() < SEGMENT_HEADER_LEN
            && files::segment_header().starts_with(&bytes);
        if is_last && torn_header {
            if !read_only {
                let mut f = OpenOptions::new().create(true).truncate(true).write(true).open(path)?;
                f.write_all(&files::segment_header())?;
                f.sync_all()?;
            }
            return Ok((SEGMENT_HEADER_LEN as u64, 0));
        }
        return Err(corrupt(0, "bad segment header".into()));
    }

    let mut pos = SEGMENT_HEADER_LEN;
    let mut records = 0u32;
    let mut problem = None;
    while pos < bytes.len() {
        match codec::read_frame(&bytes[pos..]) {
            Framed::Record { tag, payload, len } => {
                let record = match codec::decode(tag, payload, &state.labels) {
                    Ok(r) => r,
                    Err(e) => {
                        problem = Some(e.0);
                        break;
                    }
                };
                if let Err(reason) = state.apply(record, false) {
                    problem = Some(reason);
                    break;
                }
                pos += len;
                records += 1;
            }
            Framed::Incomplete => {
                problem = Some("torn record".to_owned());
                break;
            }
            Framed::Corrupt(why) => {
                problem = Some(why);
                break;
            }
        }
    }
    if let Some(reason) = problem {
        if !is_last {
            return Err(corrupt(pos, reason));
        }
        tracing::warn!(
            "{}: discarding {} bytes after offset {pos}: {reason}",
            path.display(),
            bytes.len() - pos
        );
        if !read_only {
            let f = OpenOptions::new().write(true).open(path)?;
            f.set_len(pos as u64)?;
            f.sync_all()?;
        }
    }
    Ok((pos as u64, records))
}

#[cfg(test)]
mod tests;
