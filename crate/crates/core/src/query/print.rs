use std::fmt;

use crate::model::{EntityRef, QueryAst, TimeRange};

struct Quoted<'a>(&'a str);

impl fmt::Display for Quoted<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("\"")?;
        for c in self.0.chars() {
            match c {
                '"' => f.write_str("\\\"")?,
                '\\' => f.write_str("\\\\")?,
                c => write!(f, "{c}")?,
            }
        }
        f.write_str("\"")
    }
}

struct Entity<'a>(&'a EntityRef);

impl fmt::Display for Entity<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.0.kind, Quoted(&self.0.label))
    }
}

struct Range<'a>(&'a TimeRange);

impl fmt::Display for Range<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FROM {} TO {}", self.0.from, self.0.to)
    }
}

fn activity_args(
    f: &mut fmt::Formatter<'_>,
    activity: &str,
    subject: &Option<String>,
    range: &TimeRange,
) -> fmt::Result {
    write!(f, " activity={}", Quoted(activity))?;
    if let Some(s) = subject {
        write!(f, " subject={}", Quoted(s))?;
    }
    write!(f, " {}", Range(range))
}

/// Canonical DSL text; parsing it yields the same query.
impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryAst::LastSeen { entity } => write!(f, "LAST_SEEN {}", Entity(entity)),
            QueryAst::Present { entity, range } => {
                write!(f, "PRESENT {} {}", Entity(entity), Range(range))
            }
            QueryAst::Did {
                activity,
                subject,
                range,
            } => {
                f.write_str("DID")?;
                activity_args(f, activity, subject, range)
            }
            QueryAst::Duration {
                activity,
                subject,
                range,
                bucket,
            } => {
                f.write_str("DURATION")?;
                activity_args(f, activity, subject, range)?;
                if let Some(b) = bucket {
                    write!(f, " BY {}", b.as_str())?;
                }
                Ok(())
            }
            QueryAst::WhereMost {
                activity,
                subject,
                range,
            } => {
                f.write_str("WHERE_MOST")?;
                activity_args(f, activity, subject, range)
            }
        }
    }
}
