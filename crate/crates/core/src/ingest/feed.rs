//! Line-delimited JSON feed: one `{"type": ...}` object per line.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    fold_label, validate_feed_record, ActivityEvent, Detection, EntityKind, FrameMeta,
    LocationEstimate, Pose, Provenance, Record, Timestamp,
};

#[derive(Serialize, Deserialize)]
struct PoseLine {
    x: f64,
    y: f64,
    z: f64,
    roll: f64,
    pitch: f64,
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum FeedLine {
    Frame {
        f: u64,
        ts: Timestamp,
        pose: PoseLine,
    },
    Detection {
        f: u64,
        label: String,
        kind: EntityKind,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        conf: Option<f64>,
    },
    Activity {
        subject: String,
        name: String,
        start: Timestamp,
        end: Timestamp,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        conf: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        loc: Option<LocationEstimate>,
    },
}

/// Parses and validates one feed line. Labels are case-folded, angles wrapped
/// onto `[-180, 180)` and a missing `conf` reads as 1.0.
pub fn parse_feed_line(line: &str, line_no: usize) -> Result<Record> {
    let parsed: FeedLine = serde_json::from_str(line).map_err(|e| Error::Parse {
        line_no,
        reason: e.to_string(),
    })?;
    let record = match parsed {
        FeedLine::Frame { f, ts, pose } => Record::Frame(FrameMeta {
            frame_id: f,
            ts,
            pose: Pose::new(pose.x, pose.y, pose.z, pose.roll, pose.pitch, pose.yaw),
        }),
        FeedLine::Detection {
            f,
            label,
            kind,
            conf,
        } => Record::Detection(Detection {
            frame_id: f,
            label: fold_label(&label),
            kind,
            confidence: conf.unwrap_or(1.0),
            provenance: Provenance::Ingested,
        }),
        FeedLine::Activity {
            subject,
            name,
            start,
            end,
            conf,
            loc,
        } => Record::Activity(ActivityEvent {
            subject: fold_label(&subject),
            name: fold_label(&name),
            start,
            end,
            loc: match loc {
                Some(l) => Some(LocationEstimate::new(l.mean, l.cov).map_err(|_| Error::Parse {
                    line_no,
                    reason: "activity loc must have a finite mean and an SPD covariance".into(),
                })?),
                None => None,
            },
            prob: conf.unwrap_or(1.0),
            provenance: Provenance::Ingested,
        }),
    };
    validate_feed_record(&record)?;
    Ok(record)
}

/// Serializes a record in feed form. Provenance is not part of the feed and
/// is dropped.
pub fn feed_line(record: &Record) -> String {
    let line = match record {
        Record::Frame(fm) => FeedLine::Frame {
            f: fm.frame_id,
            ts: fm.ts,
            pose: PoseLine {
                x: fm.pose.x,
                y: fm.pose.y,
                z: fm.pose.z,
                roll: fm.pose.roll,
                pitch: fm.pose.pitch,
                yaw: fm.pose.yaw,
            },
        },
        Record::Detection(d) => FeedLine::Detection {
            f: d.frame_id,
            label: d.label.clone(),
            kind: d.kind,
            conf: Some(d.confidence),
        },
        Record::Activity(a) => FeedLine::Activity {
            subject: a.subject.clone(),
            name: a.name.clone(),
            start: a.start,
            end: a.end,
            conf: Some(a.prob),
            loc: a.loc,
        },
    };
    serde_json::to_string(&line).expect("feed lines always serialize")
}

pub fn write_feed<'a>(out: &mut impl Write, records: impl IntoIterator<Item = &'a Record>) -> io::Result<()> {
    for r in records {
        out.write_all(feed_line(r).as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Lazily parses a feed, skipping blank lines. Line numbers are 1-based.
pub fn read_feed(input: impl BufRead) -> impl Iterator<Item = Result<Record>> {
    input.lines().enumerate().filter_map(|(i, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(parse_feed_line(&l, i + 1)),
        Err(e) => Some(Err(e.into())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_line() {
        let r = parse_feed_line(
            r#"{"type":"frame","f":1,"ts":"2019-06-01T00:00:00Z","pose":{"x":0,"y":0,"z":0,"roll":0,"pitch":0,"yaw":0}}"#,
            1,
        )
        .unwrap();
        assert_eq!(
            r,
            Record::Frame(FrameMeta {
                frame_id: 1,
                ts: Timestamp::parse("2019-06-01T00:00:00Z").unwrap(),
                pose: Pose::default(),
            })
        );
    }

    #[test]
    fn detection_label_is_folded() {
        let r = parse_feed_line(r#"{"type":"detection","f":1,"label":"Remote","kind":"object","conf":0.9}"#, 1).unwrap();
        match r {
            Record::Detection(d) => {
                assert_eq!(d.label, "remote");
                assert_eq!(d.confidence, 0.9);
            }
            other => panic!("{other:?}"),
        }
        let r = parse_feed_line(r#"{"type":"detection","f":1,"label":"cup","kind":"object"}"#, 1).unwrap();
        assert!(matches!(r, Record::Detection(d) if d.confidence == 1.0));
    }

    #[test]
    fn missing_ts_is_a_parse_error() {
        let e = parse_feed_line(r#"{"type":"frame","f":1}"#, 7).unwrap_err();
        assert!(matches!(e, Error::Parse { line_no: 7, .. }), "{e}");
    }

    #[test]
    fn unknown_type_rejected() {
        let e = parse_feed_line(r#"{"type":"audio","f":1}"#, 1).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
    }

    #[test]
    fn bad_confidence_is_invalid_record() {
        let e = parse_feed_line(r#"{"type":"detection","f":1,"label":"cup","kind":"object","conf":1.2}"#, 1).unwrap_err();
        match e {
            Error::InvalidRecord(ir) => {
                assert_eq!(ir.field, "confidence");
                assert_eq!(ir.reason, "out of [0,1]");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn yaw_is_wrapped() {
        let r = parse_feed_line(
            r#"{"type":"frame","f":2,"ts":"2019-06-01T00:00:01Z","pose":{"x":1,"y":2,"z":0,"roll":0,"pitch":0,"yaw":270}}"#,
            1,
        )
        .unwrap();
        assert!(matches!(r, Record::Frame(fm) if fm.pose.yaw == -90.0));
    }

    #[test]
    fn feed_line_reparses() {
        let line = r#"{"type":"activity","subject":"dad","name":"walk","start":"2019-06-01T00:00:00Z","end":"2019-06-01T00:10:00Z","conf":0.5}"#;
        let r = parse_feed_line(line, 1).unwrap();
        assert_eq!(parse_feed_line(&feed_line(&r), 1).unwrap(), r);
    }
}
