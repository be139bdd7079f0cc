//! The query DSL: parsing, canonical printing, planning and execution.
//!
//! ```text
//! LAST_SEEN object="remote"
//! PRESENT person="steve" FROM 2019-06-01T00:00:00Z TO 2019-06-02T00:00:00Z
//! DID activity="take_medicine" subject="dad" FROM ... TO ...
//! DURATION activity="sleep" FROM ... TO ... BY hour
//! WHERE_MOST activity="walk" subject="patient" FROM ... TO ...
//! ```

mod exec;
mod parse;
mod plan;
mod print;

use thiserror::Error;

pub use exec::{execute, run_query, QueryContext};
pub use parse::parse_query;
pub use plan::{plan, Plan, PlanStep, Reducer};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum QueryError {
    /// `position` is a byte offset into the query text.
    #[error("syntax error at byte {position}: expected {expected}")]
    Syntax { position: usize, expected: String },
    #[error("invalid query: {reason}")]
    Semantic { reason: String },
}
