use serde::{Deserialize, Serialize};

use crate::model::{Bucket, EntityKind, QueryAst, TimeRange};
use crate::store::Order;

/// One store operation. Each step reads only what its own fields name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "step", rename_all = "snake_case")]
pub enum PlanStep {
    /// Postings scan for a label, optionally bounded in time.
    LabelProbe {
        label: String,
        kind: EntityKind,
        range: Option<TimeRange>,
        #[serde(with = "order_serde")]
        order: Order,
        limit: Option<usize>,
    },
    /// Warm/cold detection summaries intersecting the range.
    SummaryRead {
        label: String,
        kind: EntityKind,
        range: TimeRange,
    },
    /// Refined track whose last sighting matches the probe result.
    TrackLookup { label: String, kind: EntityKind },
    /// Frames stored in the range, to tell "not seen" from "not recorded".
    FrameCoverage { range: TimeRange },
    ActivityScan {
        activity: String,
        subject: Option<String>,
        range: TimeRange,
    },
    ActivitySummaryRead {
        activity: String,
        subject: Option<String>,
        range: TimeRange,
    },
    /// Ends the plan with a reprocess request when the scans found nothing
    /// and no recognizer has covered the range.
    EscalateIfUncovered {
        activity: String,
        subject: Option<String>,
        range: TimeRange,
    },
}

mod order_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::store::Order;

    pub fn serialize<S: Serializer>(o: &Order, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match o {
            Order::Asc => "asc",
            Order::Desc => "desc",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Order, D::Error> {
        match String::deserialize(d)?.as_str() {
            "asc" => Ok(Order::Asc),
            "desc" => Ok(Order::Desc),
            other => Err(serde::de::Error::custom(format!("unknown order {other}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reducer", content = "bucket", rename_all = "snake_case")]
pub enum Reducer {
    Latest,
    Exists,
    SumByBucket(Option<Bucket>),
    ArgmaxByCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub query: QueryAst,
    pub steps: Vec<PlanStep>,
    pub reducer: Reducer,
}

impl Plan {
    pub fn ends_in_escalation(&self) -> bool {
        matches!(self.steps.last(), Some(PlanStep::EscalateIfUncovered { .. }))
    }
}

pub fn plan(ast: &QueryAst) -> Plan {
    let (steps, reducer) = match ast {
        QueryAst::LastSeen { entity } => (
            vec![
                PlanStep::LabelProbe {
                    label: entity.label.clone(),
                    kind: entity.kind,
                    range: None,
                    order: Order::Desc,
                    limit: Some(1),
                },
                PlanStep::TrackLookup {
                    label: entity.label.clone(),
                    kind: entity.kind,
                },
            ],
            Reducer::Latest,
        ),
        QueryAst::Present { entity, range } => (
            vec![
                PlanStep::FrameCoverage { range: *range },
                PlanStep::LabelProbe {
                    label: entity.label.clone(),
                    kind: entity.kind,
                    range: Some(*range),
                    order: Order::Asc,
                    limit: None,
                },
                PlanStep::SummaryRead {
                    label: entity.label.clone(),
                    kind: entity.kind,
                    range: *range,
                },
            ],
            Reducer::Exists,
        ),
        QueryAst::Did {
            activity,
            subject,
            range,
        } => (activity_steps(activity, subject, *range), Reducer::Exists),
        QueryAst::Duration {
            activity,
            subject,
            range,
            bucket,
        } => (
            activity_steps(activity, subject, *range),
            Reducer::SumByBucket(*bucket),
        ),
        QueryAst::WhereMost {
            activity,
            subject,
            range,
        } => (activity_steps(activity, subject, *range), Reducer::ArgmaxByCell),
    };
    Plan {
        query: ast.clone(),
        steps,
        reducer,
    }
}

fn activity_steps(activity: &str, subject: &Option<String>, range: TimeRange) -> Vec<PlanStep> {
    vec![
        PlanStep::ActivityScan {
            activity: activity.to_owned(),
            subject: subject.clone(),
            range,
        },
        PlanStep::ActivitySummaryRead {
            activity: activity.to_owned(),
            subject: subject.clone(),
            range,
        },
        PlanStep::EscalateIfUncovered {
            activity: activity.to_owned(),
            subject: subject.clone(),
            range,
        },
    ]
}
