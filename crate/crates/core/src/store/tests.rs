use super::*;
use crate::model::{Detection, FrameMeta, Pose, Provenance};

fn frame(id: u64) -> Record {
    Record::Frame(FrameMeta {
        frame_id: id,
        ts: Timestamp::from_secs(1_000 + id as i64),
        pose: Pose::planar(id as f64 * 0.1, 1.0, 0.0),
    })
}

fn det(id: u64, label: &str) -> Record {
    Record::Detection(Detection::new(id, label, EntityKind::Object, 0.75))
}

fn fill(store: &mut Store, frames: u64) {
    for i in 0..frames {
        store.append(&frame(i)).unwrap();
        store.append(&det(i, if i % 2 == 0 { "cup" } else { "remote" })).unwrap();
    }
}

#[test]
fn append_flush_reopen() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut store = Store::init(dir.path()).unwrap();
        fill(&mut store, 10);
        store.checkpoint().unwrap();
    }
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let snap = store.snapshot();
    assert_eq!(snap.frame_count(), 10);
    assert_eq!(snap.detection_count(), 10);
    let cups = snap.find_by_label("cup", TimeRange::all(), Order::Asc, None);
    assert_eq!(cups.iter().map(|s| s.frame.frame_id).collect::<Vec<_>>(), vec![0, 2, 4, 6, 8]);
    let last = snap.find_by_label("remote", TimeRange::all(), Order::Desc, Some(1));
    assert_eq!(last[0].frame.frame_id, 9);
    assert_eq!(last[0].detection.provenance, Provenance::Ingested);
}

#[test]
fn unflushed_records_do_not_survive_a_crash() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::init(dir.path()).unwrap();
    fill(&mut store, 5);
    store.flush().unwrap();
    store.append(&frame(5)).unwrap();
    store.abandon();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    assert_eq!(store.snapshot().frame_count(), 5);
}

#[test]
fn read_only_refuses_writes_and_shares_with_writer() {
    let dir = tempfile::tempdir().unwrap();
    let mut writer = Store::init(dir.path()).unwrap();
    fill(&mut writer, 3);
    writer.checkpoint().unwrap();
    let mut reader = Store::open(dir.path(), StoreOptions::read_only()).unwrap();
    assert_eq!(reader.snapshot().frame_count(), 3);
    assert!(matches!(reader.append(&frame(3)), Err(Error::ReadOnly)));
    assert!(matches!(
        Store::open(dir.path(), StoreOptions::default()),
        Err(Error::Locked(_))
    ));
}

#[test]
fn empty_store_is_just_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::init(dir.path()).unwrap();
    let manifest_len = fs::metadata(dir.path().join(MANIFEST_FILE)).unwrap().len();
    assert_eq!(store.stats().unwrap().bytes_on_disk, manifest_len);
}

#[test]
fn frames_must_increase() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::init(dir.path()).unwrap();
    store.append(&frame(4)).unwrap();
    assert!(matches!(store.append(&frame(4)), Err(Error::OutOfOrderFrame { frame_id: 4 })));
    assert!(matches!(store.append(&frame(2)), Err(Error::OutOfOrderFrame { frame_id: 2 })));
    assert!(matches!(store.append(&det(9, "cup")), Err(Error::UnknownFrame(9))));
}

#[test]
fn index_files_are_rebuilt_when_missing_or_damaged() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut store = Store::init(dir.path()).unwrap();
        fill(&mut store, 20);
        store.checkpoint().unwrap();
    }
    let labels = dir.path().join(INDEX_DIR).join(LABELS_INDEX);
    let mut bytes = fs::read(&labels).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&labels, bytes).unwrap();
    fs::remove_file(dir.path().join(INDEX_DIR).join(TIME_INDEX)).unwrap();

    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let cups = store.snapshot().find_by_label("cup", TimeRange::all(), Order::Asc, None);
    assert_eq!(cups.len(), 10);
    assert!(dir.path().join(INDEX_DIR).join(TIME_INDEX).exists());
}

#[test]
fn torn_tail_is_truncated_on_open() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut store = Store::init(dir.path()).unwrap();
        fill(&mut store, 4);
        store.checkpoint().unwrap();
    }
    let seg = files::segment_path(dir.path(), 0);
    let report = inspect_segment(&seg).unwrap();
    let last = report.records.last().unwrap();
    let cut = last.offset + last.len / 2;
    OpenOptions::new().write(true).open(&seg).unwrap().set_len(cut).unwrap();

    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    assert_eq!(fs::metadata(&seg).unwrap().len(), last.offset);
    assert_eq!(store.snapshot().detection_count(), 3);
}

#[test]
fn corruption_in_an_earlier_segment_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let opts = StoreOptions {
        segment_max_records: 4,
        ..Default::default()
    };
    {
        let mut store = Store::init_with(dir.path(), opts.clone()).unwrap();
        fill(&mut store, 6);
        store.checkpoint().unwrap();
        assert!(store.manifest().segments.len() > 1);
    }
    let seg = files::segment_path(dir.path(), 0);
    let mut bytes = fs::read(&seg).unwrap();
    let n = bytes.len();
    bytes[n - 6] ^= 0x01;
    fs::write(&seg, bytes).unwrap();
    assert!(matches!(
        Store::open(dir.path(), opts),
        Err(Error::CorruptSegment { .. })
    ));
}

#[test]
fn storage_limit_is_enforced() {
    let dir = tempfile::tempdir().unwrap();
    let opts = StoreOptions {
        max_bytes: Some(300),
        ..Default::default()
    };
    let mut store = Store::init_with(dir.path(), opts).unwrap();
    let mut hit = false;
    for i in 0..100 {
        match store.append(&frame(i)) {
            Ok(()) => {}
            Err(Error::StorageFull { limit: 300 }) => {
                hit = true;
                break;
            }
            Err(e) => panic!("{e}"),
        }
    }
    assert!(hit);
    store.flush().unwrap();
    assert!(files::dir_size(&dir.path().join(SEGMENT_DIR)).unwrap() <= 300);
}

#[test]
fn newer_format_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    drop(Store::init(dir.path()).unwrap());
    let path = dir.path().join(MANIFEST_FILE);
    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    m["format_version"] = serde_json::json!(FORMAT_VERSION + 1);
    fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    assert!(matches!(
        Store::open(dir.path(), StoreOptions::read_only()),
        Err(Error::UnsupportedVersion { .. })
    ));
}

#[test]
fn orphan_segments_are_removed() {
    let dir = tempfile::tempdir().unwrap();
    {
        let mut store = Store::init(dir.path()).unwrap();
        fill(&mut store, 2);
        store.checkpoint().unwrap();
    }
    let orphan = files::segment_path(dir.path(), 77);
    fs::write(&orphan, files::segment_header()).unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    assert!(!orphan.exists());
    assert_eq!(store.snapshot().frame_count(), 2);
}

#[test]
fn snapshots_are_isolated_from_later_writes() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::init(dir.path()).unwrap();
    fill(&mut store, 3);
    let snap = store.snapshot();
    fill_from(&mut store, 3, 6);
    assert_eq!(snap.frame_count(), 3);
    assert_eq!(store.snapshot().frame_count(), 6);
}

fn fill_from(store: &mut Store, from: u64, to: u64) {
    for i in from..to {
        store.append(&frame(i)).unwrap();
    }
}

#[test]
fn migration_refuses_pending_writes() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::init(dir.path()).unwrap();
    fill(&mut store, 3);
    assert!(matches!(
        store.migrate_tiers(Timestamp::from_secs(1_000_000_000), &MigrationPolicy::default()),
        Err(Error::MigrationConflict(_))
    ));
}

#[test]
fn migration_summarizes_and_keeps_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = Store::init(dir.path()).unwrap();
    fill(&mut store, 40);
    store.checkpoint().unwrap();
    let now = Timestamp::from_secs(1_000 + 8 * 86_400);
    let report = store.migrate_tiers(now, &MigrationPolicy::default()).unwrap();
    assert_eq!(report.detections_summarized, 40);
    let snap = store.snapshot();
    assert_eq!(snap.frame_count(), 40);
    assert_eq!(snap.detection_count(), 0);
    let total: u64 = snap.all_detection_summaries().map(|s| s.count).sum();
    assert_eq!(total, 40);
    let last = snap.find_by_label("remote", TimeRange::all(), Order::Desc, Some(1));
    assert!(last[0].coarse);
    assert_eq!(last[0].frame.frame_id, 39);

    // nothing more to do at the same instant
    let again = store.migrate_tiers(now, &MigrationPolicy::default()).unwrap();
    assert!(again.is_noop());
    drop(store);
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    assert_eq!(store.snapshot().all_detection_summaries().map(|s| s.count).sum::<u64>(), 40);
}
