use std::collections::{BTreeMap, HashMap};

use crate::model::{
    ActivityEvent, Detection, EntityKind, FrameMeta, Provenance, Timestamp, Track,
};
use crate::store::codec::StoredRecord;
use crate::store::{ActivitySummary, Coverage, DetectionSummary, Tier};

/// Interned label strings. Ids are dense and never reused.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct LabelTable {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl LabelTable {
    pub fn id(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    /// Returns the id and whether it was newly assigned.
    #[cfg(test)]
    pub fn intern(&mut self, name: &str) -> (u32, bool) {
        if let Some(id) = self.ids.get(name) {
            return (*id, false);
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        (id, true)
    }

    /// Registers a label read back from disk under its recorded id.
    pub fn define(&mut self, id: u32, name: String) -> Result<(), String> {
        match self.names.len().cmp(&(id as usize)) {
            std::cmp::Ordering::Equal => {
                self.ids.insert(name.clone(), id);
                self.names.push(name);
                Ok(())
            }
            std::cmp::Ordering::Greater if self.names[id as usize] == name => Ok(()),
            _ => Err(format!("label id {id} defined out of sequence")),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.names.iter().enumerate().map(|(i, n)| (i as u32, n.as_str()))
    }
}

/// Hot-tier detection as held in memory and on disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct DetRow {
    pub frame_id: u64,
    pub label: u32,
    pub kind: EntityKind,
    pub provenance: Provenance,
    pub confidence: f64,
}

/// One entry in a label's postings list. Lists are sorted by `(frame_id, det)`,
/// which is also timestamp order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Posting {
    pub ts: Timestamp,
    pub frame_id: u64,
    pub det: u32,
}

pub(crate) type DetSummaryKey = (Tier, String, EntityKind, Timestamp);
pub(crate) type ActSummaryKey = (Tier, String, String, Timestamp, Option<(i64, i64)>);

#[derive(Clone, Debug, Default)]
pub(crate) struct StoreState {
    pub labels: LabelTable,
    pub frames: Vec<FrameMeta>,
    pub detections: Vec<DetRow>,
    pub postings: HashMap<u32, Vec<Posting>>,
    pub tracks: BTreeMap<u64, Track>,
    pub activities: Vec<ActivityEvent>,
    pub det_summaries: BTreeMap<DetSummaryKey, DetectionSummary>,
    pub act_summaries: BTreeMap<ActSummaryKey, ActivitySummary>,
    pub coverage: Vec<Coverage>,
    /// Number of detections (in append order) already attributed to tracks.
    pub refine_watermark: u64,
    pub next_track_id: u64,
}

impl StoreState {
    pub fn frame_pos(&self, frame_id: u64) -> Option<usize> {
        self.frames.binary_search_by_key(&frame_id, |f| f.frame_id).ok()
    }

    pub fn frame(&self, frame_id: u64) -> Option<&FrameMeta> {
        self.frame_pos(frame_id).map(|i| &self.frames[i])
    }

    pub fn last_frame(&self) -> Option<&FrameMeta> {
        self.frames.last()
    }

    pub fn detection(&self, idx: usize) -> Detection {
        let row = &self.detections[idx];
        Detection {
            frame_id: row.frame_id,
            label: self.labels.name(row.label).unwrap_or_default().to_owned(),
            kind: row.kind,
            confidence: row.confidence,
            provenance: row.provenance,
        }
    }

    /// Applies a decoded record. When `index` is false, postings are left for
    /// a later bulk build.
    pub fn apply(&mut self, record: StoredRecord, index: bool) -> Result<(), String> {
        match record {
            StoredRecord::Label { id, name } => self.labels.define(id, name)?,
            StoredRecord::Frame(fm) => match self.frames.last() {
                Some(last) if last.frame_id >= fm.frame_id => {
                    let pos = self.frames.partition_point(|f| f.frame_id < fm.frame_id);
                    if self.frames.get(pos).map(|f| f.frame_id) == Some(fm.frame_id) {
                        return Err(format!("duplicate frame {}", fm.frame_id));
                    }
                    self.frames.insert(pos, fm);
                }
                _ => self.frames.push(fm),
            },
            StoredRecord::Detection(row) => {
                let idx = self.detections.len() as u32;
                self.detections.push(row);
                if index {
                    let ts = self
                        .frame(row.frame_id)
                        .map(|f| f.ts)
                        .ok_or_else(|| format!("detection references unknown frame {}", row.frame_id))?;
                    insert_posting(
                        self.postings.entry(row.label).or_default(),
                        Posting {
                            ts,
                            frame_id: row.frame_id,
                            det: idx,
                        },
                    );
                }
            }
            StoredRecord::Activity(a) => self.activities.push(a),
            StoredRecord::Track(t) => {
                self.next_track_id = self.next_track_id.max(t.track_id + 1);
                self.tracks.insert(t.track_id, t);
            }
            StoredRecord::DetSummary(s) => {
                self.det_summaries
                    .insert((s.tier, s.label.clone(), s.kind, s.bucket_start), s);
            }
            StoredRecord::ActSummary(s) => {
                self.act_summaries.insert(
                    (s.tier, s.subject.clone(), s.name.clone(), s.bucket_start, s.cell),
                    s,
                );
            }
            StoredRecord::Coverage(c) => self.coverage.push(c),
            StoredRecord::RefineState {
                watermark,
                next_track_id,
            } => {
                self.refine_watermark = watermark;
                self.next_track_id = self.next_track_id.max(next_track_id);
            }
        }
        Ok(())
    }

    pub fn rebuild_postings(&mut self) -> Result<(), String> {
        let mut postings: HashMap<u32, Vec<Posting>> = HashMap::new();
        for (idx, row) in self.detections.iter().enumerate() {
            let ts = self
                .frame(row.frame_id)
                .map(|f| f.ts)
                .ok_or_else(|| format!("detection references unknown frame {}", row.frame_id))?;
            postings.entry(row.label).or_default().push(Posting {
                ts,
                frame_id: row.frame_id,
                det: idx as u32,
            });
        }
        for list in postings.values_mut() {
            list.sort_by_key(|p| (p.frame_id, p.det));
        }
        self.postings = postings;
        Ok(())
    }

    /// Records that reproduce this state when replayed in order.
    pub fn to_records(&self) -> Vec<StoredRecord> {
        let mut out = Vec::with_capacity(
            self.labels.len() + self.frames.len() + self.detections.len() + self.tracks.len() + 8,
        );
        out.extend(self.labels.iter().map(|(id, name)| StoredRecord::Label {
            id,
            name: name.to_owned(),
        }));
        out.extend(self.frames.iter().copied().map(StoredRecord::Frame));
        out.extend(self.detections.iter().copied().map(StoredRecord::Detection));
        out.extend(self.activities.iter().cloned().map(StoredRecord::Activity));
        out.extend(self.tracks.values().cloned().map(StoredRecord::Track));
        out.extend(self.det_summaries.values().cloned().map(StoredRecord::DetSummary));
        out.extend(self.act_summaries.values().cloned().map(StoredRecord::ActSummary));
        out.extend(self.coverage.iter().cloned().map(StoredRecord::Coverage));
        out.push(StoredRecord::RefineState {
            watermark: self.refine_watermark,
            next_track_id: self.next_track_id,
        });
        out
    }
}

fn insert_posting(list: &mut Vec<Posting>, p: Posting) {
    match list.last() {
        Some(last) if (last.frame_id, last.det) > (p.frame_id, p.det) => {
            let pos = list.partition_point(|q| (q.frame_id, q.det) < (p.frame_id, p.det));
            list.insert(pos, p);
        }
        _ => list.push(p),
    }
}
