//! Long-term memory for a home robot's perception feed.
//!
//! Frames (pose + time) and symbolic detections are appended to a compact,
//! crash-safe store. A background pass folds detections into tracks with
//! fused locations and presence intervals. A small query language answers
//! "where did I last see X", "was X here", and activity questions. When the
//! stored data cannot answer an activity question, it asks for a budgeted
//! re-analysis of archived frames.
//!
//! ```no_run
//! use robomem_core::{ingest, query, Store};
//!
//! let mut store = Store::init("/tmp/robomem")?;
//! let (_truth, records) = ingest::generate_scenario(&ingest::ScenarioConfig::standard(42))?;
//! ingest::ingest_stream(records.into_iter().map(Ok), &mut store, &Default::default())?;
//! let answer = query::run_query(r#"LAST_SEEN object="remote""#, &store.snapshot(), &Default::default())?;
//! println!("{}", serde_json::to_string(&answer)?);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod error;
pub mod ingest;
pub mod model;
pub mod query;
pub mod refine;
pub mod reprocess;
pub mod store;

pub use error::{Error, Result};
pub use model::*;
pub use store::{Snapshot, Store, StoreOptions};
