//! Human-readable renderings. JSON output goes straight through serde.

use std::fmt::Write;

use robomem_core::ingest::IngestReport;
use robomem_core::refine::RefinementReport;
use robomem_core::store::MigrationReport;
use robomem_core::Answer;

const SHOWN_FRAMES: usize = 10;

fn coarse_tag(coarse: bool) -> &'static str {
    if coarse {
        " (summary-based)"
    } else {
        ""
    }
}

fn hms(seconds: f64) -> String {
    let s = seconds.round() as i64;
    format!("{}h{:02}m{:02}s", s / 3600, s % 3600 / 60, s % 60)
}

pub fn answer(a: &Answer) -> String {
    let mut out = String::new();
    match a {
        Answer::Location {
            loc,
            ts,
            frame_id,
            confidence,
            coarse,
        } => {
            let (big, small) = loc.cov.eigenvalues();
            let _ = write!(
                out,
                "last seen at ({:.2}, {:.2}) ±{:.2} m, {ts} (frame {frame_id}), confidence {confidence:.3}{}",
                loc.mean[0],
                loc.mean[1],
                big.max(small).sqrt(),
                coarse_tag(*coarse)
            );
        }
        Answer::Bool {
            value,
            prob,
            supporting_frames,
            count,
            coarse,
        } => {
            let _ = write!(
                out,
                "{} (p={prob:.3}, {count} supporting records){}",
                if *value { "yes" } else { "no" },
                coarse_tag(*coarse)
            );
            if !supporting_frames.is_empty() {
                let shown: Vec<String> = supporting_frames.iter().take(SHOWN_FRAMES).map(u64::to_string).collect();
                let more = supporting_frames.len().saturating_sub(SHOWN_FRAMES);
                let _ = write!(out, "\n  frames: {}", shown.join(", "));
                if more > 0 {
                    let _ = write!(out, " and {more} more");
                }
            }
        }
        Answer::Duration {
            total_seconds,
            per_bucket,
            coarse,
        } => {
            let _ = write!(out, "{} ({total_seconds} s){}", hms(*total_seconds), coarse_tag(*coarse));
            for b in per_bucket {
                let _ = write!(out, "\n  {}  {}", b.bucket_start, hms(b.seconds));
            }
        }
        Answer::Place {
            cell,
            cell_center,
            seconds,
            coarse,
        } => {
            let _ = write!(
                out,
                "cell ({}, {}) centred at ({:.1}, {:.1}), {} there{}",
                cell.0,
                cell.1,
                cell_center[0],
                cell_center[1],
                hms(*seconds),
                coarse_tag(*coarse)
            );
        }
        Answer::NotFound { coarse } => {
            let _ = write!(out, "not found{}", coarse_tag(*coarse));
        }
        Answer::NeedsReprocess { request, .. } => {
            let _ = write!(
                out,
                "needs reprocessing: {} frames selected (budget {}) between {} and {}\n  rerun with --reprocess <truth.json> to answer it",
                request.frame_ids.len(),
                request.budget,
                request.range.from,
                request.range.to
            );
        }
    }
    out
}

pub fn refinement(r: &RefinementReport) -> String {
    format!(
        "refinement: {} tracks created, {} updated, {} observations fused, {} interval merges",
        r.tracks_created, r.tracks_updated, r.observations_fused, r.intervals_merged
    )
}

pub fn ingest(r: &IngestReport, bytes_per_frame: f64) -> String {
    let mut out = format!(
        "ingested {} frames, {} detections, {} activities in {:.2} s ({:.0} frames/s), {bytes_per_frame:.1} bytes/frame",
        r.frames, r.detections, r.activities, r.elapsed_seconds, r.rate_fps
    );
    if r.rejected > 0 {
        let _ = write!(out, "\nrejected {} records ({} frames)", r.rejected, r.rejected_frames);
    }
    let _ = write!(out, "\n{}", refinement(&r.refinement));
    out
}

pub fn migration(r: &MigrationReport) -> String {
    if r.is_noop() {
        return "nothing old enough to migrate".into();
    }
    format!(
        "summarized {} detections and {} activities into {} hourly summaries; rolled {} hourly into {} daily\nbytes on disk {} -> {}",
        r.detections_summarized,
        r.activities_summarized,
        r.hourly_summaries,
        r.hourly_rolled_up,
        r.daily_summaries,
        r.bytes_before,
        r.bytes_after
    )
}
