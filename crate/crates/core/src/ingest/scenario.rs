//! Deterministic synthetic household: a robot wanders a rectangular room,
//! objects sit still, people move about or stay put while doing an activity.
//! The robot perceives everything within `view_radius_m` of itself.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    fold_label, ActivityEvent, Detection, EntityKind, FrameMeta, Pose, Provenance, Record,
    TimeRange, Timestamp, MICROS_PER_SEC,
};

pub const OBJECT_VOCABULARY: &[&str] = &[
    "remote", "cup", "book", "phone", "keys", "glasses", "wallet", "pillbox", "bottle", "laptop",
    "plate", "umbrella",
];

/// The first name is the resident, present throughout; the rest are visitors.
pub const PERSON_VOCABULARY: &[&str] = &["patient", "dad", "ifrah", "steve", "grandson", "nurse"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledActivity {
    pub subject: String,
    pub name: String,
    pub start: Timestamp,
    pub end: Timestamp,
    /// Where the subject stays while the activity lasts.
    pub location: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub duration_minutes: f64,
    pub fps: f64,
    /// Room extent `[width, height]` in meters, anchored at the origin.
    pub world: [f64; 2],
    pub n_objects: usize,
    pub n_persons: usize,
    pub detection_recall: f64,
    pub label_noise: f64,
    /// `None` draws a schedule from the seed.
    pub activity_schedule: Option<Vec<ScheduledActivity>>,
    /// Whether activity records appear in the feed.
    pub emit_activities: bool,
    pub start: Timestamp,
    pub view_radius_m: f64,
    pub robot_speed_mps: f64,
    pub person_speed_mps: f64,
    /// Objects placed explicitly, in addition to `n_objects` random ones.
    pub fixed_objects: Vec<(String, [f64; 2])>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            duration_minutes: 37.0,
            fps: 6.0,
            world: [10.0, 8.0],
            n_objects: 8,
            n_persons: 3,
            detection_recall: 0.9,
            label_noise: 0.0,
            activity_schedule: None,
            emit_activities: true,
            start: Timestamp::from_secs(1_559_347_200), // 2019-06-01T00:00:00Z
            view_radius_m: 2.0,
            robot_speed_mps: 0.4,
            person_speed_mps: 0.3,
            fixed_objects: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    /// 37 minutes at 6 FPS: 13320 frames.
    pub fn standard(seed: u64) -> Self {
        ScenarioConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(Error::InvalidArgument(why.to_owned()));
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad("fps must be positive");
        }
        if !(self.duration_minutes > 0.0 && self.duration_minutes.is_finite()) {
            return bad("duration_minutes must be positive");
        }
        if !(0.0..=1.0).contains(&self.detection_recall) || !(0.0..=1.0).contains(&self.label_noise) {
            return bad("detection_recall and label_noise must lie in [0, 1]");
        }
        if !(self.world[0] > 0.0 && self.world[1] > 0.0) {
            return bad("world extent must be positive");
        }
        if self.n_objects > OBJECT_VOCABULARY.len() {
            return bad("n_objects exceeds the object vocabulary");
        }
        if self.n_persons > PERSON_VOCABULARY.len() {
            return bad("n_persons exceeds the person vocabulary");
        }
        if !(self.view_radius_m > 0.0) {
            return bad("view_radius_m must be positive");
        }
        if let Some(schedule) = &self.activity_schedule {
            if schedule.iter().any(|a| a.end < a.start) {
                return bad("scheduled activity ends before it starts");
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> u64 {
        (self.duration_minutes * 60.0 * self.fps).round() as u64
    }

    pub fn frame_ts(&self, i: u64) -> Timestamp {
        self.start
            .plus_micros((i as f64 * MICROS_PER_SEC as f64 / self.fps).round() as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonTruth {
    pub name: String,
    /// Span during which the person is in the room.
    pub present: TimeRange,
    /// Position per frame; `None` while absent.
    pub positions: Vec<Option<[f64; 2]>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: ScenarioConfig,
    pub frames: Vec<FrameMeta>,
    pub objects: Vec<(String, [f64; 2])>,
    pub persons: Vec<PersonTruth>,
    pub activities: Vec<ScheduledActivity>,
    /// Entities within view range at each frame, before recall thinning.
    pub visible: Vec<Vec<(String, EntityKind)>>,
}

impl GroundTruth {
    pub fn frame_index(&self, frame_id: u64) -> Option<usize> {
        self.frames.binary_search_by_key(&frame_id, |f| f.frame_id).ok()
    }

    pub fn person_position(&self, name: &str, frame_idx: usize) -> Option<[f64; 2]> {
        self.persons
            .iter()
            .find(|p| p.name == name)
            .and_then(|p| p.positions.get(frame_idx).copied().flatten())
    }

    /// Scheduled activity `(subject, name)` in progress at `ts`, if any.
    pub fn activity_at(&self, subject: &str, name: &str, ts: Timestamp) -> Option<&ScheduledActivity> {
        self.activities
            .iter()
            .find(|a| a.subject == subject && a.name == name && a.start <= ts && ts < a.end)
    }

    pub fn activities_at(&self, ts: Timestamp) -> impl Iterator<Item = &ScheduledActivity> {
        self.activities.iter().filter(move |a| a.start <= ts && ts < a.end)
    }
}

fn uniform_point(rng: &mut ChaCha8Rng, world: [f64; 2]) -> [f64; 2] {
    [rng.random_range(0.0..world[0]), rng.random_range(0.0..world[1])]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Random-waypoint walker. `heading` is in degrees and keeps its last value
/// while the walker pauses on a waypoint.
struct Walker {
    pos: [f64; 2],
    target: [f64; 2],
    heading: f64,
}

impl Walker {
    fn new(rng: &mut ChaCha8Rng, world: [f64; 2]) -> Self {
        Walker {
            pos: uniform_point(rng, world),
            target: uniform_point(rng, world),
            heading: 0.0,
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng, world: [f64; 2], step_m: f64) {
        let d = dist(self.pos, self.target);
        if d <= step_m {
            self.pos = self.target;
            self.target = uniform_point(rng, world);
            return;
        }
        let dx = (self.target[0] - self.pos[0]) / d;
        let dy = (self.target[1] - self.pos[1]) / d;
        self.pos = [self.pos[0] + dx * step_m, self.pos[1] + dy * step_m];
        self.heading = dy.atan2(dx).to_degrees();
    }
}

fn auto_schedule(rng: &mut ChaCha8Rng, cfg: &ScenarioConfig, persons: &[PersonTruth]) -> Vec<ScheduledActivity> {
    let Some(resident) = persons.first() else {
        return Vec::new();
    };
    let total = cfg.duration_minutes * 60.0;
    let at = |frac: f64| cfg.start.plus_micros((frac * total * MICROS_PER_SEC as f64).round() as i64);
    let bed = uniform_point(rng, cfg.world);
    let med = uniform_point(rng, cfg.world);
    let walk = uniform_point(rng, cfg.world);
    let mut out = vec![
        ScheduledActivity {
            subject: resident.name.clone(),
            name: "sleep".into(),
            start: at(0.05),
            end: at(0.30),
            location: bed,
        },
        ScheduledActivity {
            subject: resident.name.clone(),
            name: "take_medicine".into(),
            start: at(0.40),
            end: at(0.43),
            location: med,
        },
        ScheduledActivity {
            subject: resident.name.clone(),
            name: "walk".into(),
            start: at(0.55),
            end: at(0.70),
            location: walk,
        },
    ];
    if let Some(visitor) = persons.get(1) {
        let start = visitor.present.from.max(at(0.75));
        let end = visitor.present.to.min(at(0.85));
        if start < end {
            out.push(ScheduledActivity {
                subject: visitor.name.clone(),
                name: "walk".into(),
                start,
                end,
                location: uniform_point(rng, cfg.world),
            });
        }
    }
    out
}

/// Builds the ground truth and the feed it produces. Identical configs give
/// identical output.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<(GroundTruth, Vec<Record>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.frame_count();
    let end_ts = cfg.frame_ts(n.saturating_sub(1));

    let mut objects: Vec<(String, [f64; 2])> = OBJECT_VOCABULARY
        .choose_multiple(&mut rng, cfg.n_objects)
        .map(|l| (l.to_string(), uniform_point(&mut rng, cfg.world)))
        .collect();
    objects.sort_by(|a, b| a.0.cmp(&b.0));
    objects.extend(cfg.fixed_objects.iter().map(|(l, p)| (fold_label(l), *p)));

    let mut persons: Vec<PersonTruth> = Vec::with_capacity(cfg.n_persons);
    for (i, name) in PERSON_VOCABULARY.iter().take(cfg.n_persons).enumerate() {
        let present = if i == 0 {
            TimeRange::new(cfg.start, end_ts).expect("ordered")
        } else {
            let a: f64 = rng.random_range(0.0..0.6);
            let b: f64 = rng.random_range(a + 0.2..1.0);
            let span = (end_ts.as_micros() - cfg.start.as_micros()) as f64;
            let from = cfg.start.plus_micros((a * span) as i64);
            let to = cfg.start.plus_micros((b * span) as i64);
            TimeRange::new(from, to.max(from)).expect("ordered")
        };
        persons.push(PersonTruth {
            name: name.to_string(),
            present,
            positions: Vec::with_capacity(n as usize),
        });
    }

    let activities = match &cfg.activity_schedule {
        Some(s) => s
            .iter()
            .map(|a| ScheduledActivity {
                subject: fold_label(&a.subject),
                name: fold_label(&a.name),
                ..a.clone()
            })
            .collect(),
        None => auto_schedule(&mut rng, cfg, &persons),
    };

    let dt = 1.0 / cfg.fps;
    let mut robot = Walker::new(&mut rng, cfg.world);
    let mut walkers: Vec<Walker> = persons.iter().map(|_| Walker::new(&mut rng, cfg.world)).collect();
    let mut frames = Vec::with_capacity(n as usize);
    let mut visible = Vec::with_capacity(n as usize);
    let mut records = Vec::with_capacity(n as usize * 3);
    let mut pending_acts: Vec<&ScheduledActivity> = if cfg.emit_activities {
        let mut v: Vec<&ScheduledActivity> = activities.iter().collect();
        v.sort_by_key(|a| (a.end, a.start));
        v
    } else {
        Vec::new()
    };
    let obj_labels: Vec<&str> = OBJECT_VOCABULARY.to_vec();
    let person_labels: Vec<&str> = PERSON_VOCABULARY.to_vec();

    for i in 0..n {
        let ts = cfg.frame_ts(i);
        if i > 0 {
            robot.step(&mut rng, cfg.world, cfg.robot_speed_mps * dt);
        }
        let fm = FrameMeta {
            frame_id: i,
            ts,
            pose: Pose::planar(robot.pos[0], robot.pos[1], robot.heading),
        };
        frames.push(fm);
        records.push(Record::Frame(fm));

        let mut seen: Vec<(String, EntityKind)> = Vec::new();
        for (label, pos) in &objects {
            if dist(robot.pos, *pos) <= cfg.view_radius_m {
                seen.push((label.clone(), EntityKind::Object));
            }
        }
        for (p, w) in persons.iter_mut().zip(walkers.iter_mut()) {
            if !p.present.contains(ts) {
                p.positions.push(None);
                continue;
            }
            let busy = activities
                .iter()
                .find(|a| a.subject == p.name && a.start <= ts && ts < a.end);
            let pos = match busy {
                Some(a) => {
                    w.pos = a.location;
                    a.location
                }
                None => {
                    w.step(&mut rng, cfg.world, cfg.person_speed_mps * dt);
                    w.pos
                }
            };
            p.positions.push(Some(pos));
            if dist(robot.pos, pos) <= cfg.view_radius_m {
                seen.push((p.name.clone(), EntityKind::Person));
            }
        }

        for (label, kind) in &seen {
            // every draw happens regardless of outcome so recall and noise settings do not shift the stream
            let keep: f64 = rng.random();
            let conf: f64 = rng.random_range(0.5..1.0);
            let noise: f64 = rng.random();
            if keep >= cfg.detection_recall {
                continue;
            }
            let mut label = label.clone();
            if noise < cfg.label_noise {
                let vocab = match kind {
                    EntityKind::Object => &obj_labels,
                    EntityKind::Person => &person_labels,
                };
                if let Some(other) = vocab.iter().filter(|l| **l != label).collect::<Vec<_>>().choose(&mut rng) {
                    label = other.to_string();
                }
            }
            records.push(Record::Detection(Detection {
                frame_id: i,
                label,
                kind: *kind,
                confidence: (conf * 1000.0).round() / 1000.0,
                provenance: Provenance::Ingested,
            }));
        }
        visible.push(seen);

        while let Some(a) = pending_acts.first() {
            if a.end > ts {
                break;
            }
            records.push(Record::Activity(activity_record(a)));
            pending_acts.remove(0);
        }
    }
    for a in pending_acts {
        records.push(Record::Activity(activity_record(a)));
    }

    let truth = GroundTruth {
        config: cfg.clone(),
        frames,
        objects,
        persons,
        activities,
        visible,
    };
    Ok((truth, records))
}

fn activity_record(a: &ScheduledActivity) -> ActivityEvent {
    ActivityEvent {
        subject: a.subject.clone(),
        name: a.name.clone(),
        start: a.start,
        end: a.end,
        loc: None,
        prob: 1.0,
        provenance: Provenance::Ingested,
    }
}
