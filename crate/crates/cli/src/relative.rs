//! Relative time in query text, rewritten to absolute timestamps before the
//! engine sees it. The engine itself only understands explicit ranges.
//!
//! * `FROM now-3d TO now`: `now`, optionally `±N` with unit `s`, `m`, `h`, `d`
//!   or `w`, wherever a timestamp is expected.
//! * `YESTERDAY`, `TODAY`, `PAST_HOUR`, `PAST_DAY`, `PAST_WEEK`,
//!   `PAST_MONTH` (30 days) stand in for a whole `FROM .. TO ..` clause.
//!   Days are UTC days.

use robomem_core::{Timestamp, MICROS_PER_DAY, MICROS_PER_HOUR, MICROS_PER_SEC};

#[derive(Debug, PartialEq)]
pub struct RelativeError {
    pub position: usize,
    pub message: String,
}

/// Byte span and text of each bare word outside quoted strings.
fn words(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'"' => {
                i += 1;
                while i < bytes.len() && bytes[i] != b'"' {
                    i += if bytes[i] == b'\\' { 2 } else { 1 };
                }
                i += 1;
            }
            b'=' => i += 1,
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'=' && bytes[i] != b'"' {
                    i += 1;
                }
                out.push((start, i));
            }
        }
    }
    out
}

fn shorthand(word: &str, now: Timestamp) -> Option<(Timestamp, Timestamp)> {
    let midnight = now.floor_to(MICROS_PER_DAY);
    Some(match word {
        "TODAY" => (midnight, now),
        "YESTERDAY" => (midnight.minus_micros(MICROS_PER_DAY), midnight.minus_micros(1)),
        "PAST_HOUR" => (now.minus_micros(MICROS_PER_HOUR), now),
        "PAST_DAY" => (now.minus_micros(MICROS_PER_DAY), now),
        "PAST_WEEK" => (now.minus_micros(7 * MICROS_PER_DAY), now),
        "PAST_MONTH" => (now.minus_micros(30 * MICROS_PER_DAY), now),
        _ => return None,
    })
}

/// `now`, `now-90m`, `now+1d`. `None` when the word is not relative at all.
fn relative_instant(word: &str, now: Timestamp) -> Option<Result<Timestamp, String>> {
    let rest = word.strip_prefix("now")?;
    if rest.is_empty() {
        return Some(Ok(now));
    }
    let parse = || -> Result<Timestamp, String> {
        let sign = match rest.as_bytes()[0] {
            b'-' => -1,
            b'+' => 1,
            _ => return Err("expected now, now-N<unit> or now+N<unit>".into()),
        };
        let body = &rest[1..];
        let split = body.find(|c: char| !c.is_ascii_digit()).ok_or("missing unit (s, m, h, d or w)")?;
        let n: i64 = body[..split].parse().map_err(|_| "missing amount".to_string())?;
        let unit = match &body[split..] {
            "s" => MICROS_PER_SEC,
            "m" => 60 * MICROS_PER_SEC,
            "h" => MICROS_PER_HOUR,
            "d" => MICROS_PER_DAY,
            "w" => 7 * MICROS_PER_DAY,
            other => return Err(format!("unknown unit {other:?}; use s, m, h, d or w")),
        };
        let delta = n.checked_mul(unit).ok_or("offset out of range")?;
        Ok(now.plus_micros(sign * delta))
    };
    Some(parse())
}

/// Rewrites relative ranges in `text` against `now`. Text without relative
/// parts comes back unchanged.
pub fn resolve(text: &str, now: Timestamp) -> Result<String, RelativeError> {
    let spans = words(text);
    let mut out = String::with_capacity(text.len() + 64);
    let mut copied = 0;
    for (k, &(start, end)) in spans.iter().enumerate() {
        let word = &text[start..end];
        let replacement = if let Some((from, to)) = shorthand(word, now) {
            Some(format!("FROM {from} TO {to}"))
        } else {
            let after_keyword = k > 0 && matches!(&text[spans[k - 1].0..spans[k - 1].1], "FROM" | "TO");
            match relative_instant(word, now) {
                Some(Ok(ts)) if after_keyword => Some(ts.to_string()),
                Some(Err(message)) if after_keyword => {
                    return Err(RelativeError {
                        position: start,
                        message,
                    })
                }
                _ => None,
            }
        };
        if let Some(r) = replacement {
            out.push_str(&text[copied..start]);
            out.push_str(&r);
            copied = end;
        }
    }
    out.push_str(&text[copied..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn now() -> Timestamp {
        Timestamp::parse("2019-06-02T15:30:00Z").unwrap()
    }

    #[test]
    fn yesterday_is_the_previous_utc_day() {
        let q = resolve(r#"PRESENT person="steve" YESTERDAY"#, now()).unwrap();
        assert_eq!(
            q,
            r#"PRESENT person="steve" FROM 2019-06-01T00:00:00Z TO 2019-06-01T23:59:59.999999Z"#
        );
    }

    #[test]
    fn now_offsets() {
        let q = resolve(r#"DID activity="walk" FROM now-90m TO now"#, now()).unwrap();
        assert_eq!(q, r#"DID activity="walk" FROM 2019-06-02T14:00:00Z TO 2019-06-02T15:30:00Z"#);
        let e = resolve(r#"DID activity="walk" FROM now-3y TO now"#, now()).unwrap_err();
        assert_eq!(e.position, 25);
    }

    #[test]
    fn quoted_text_and_absolute_queries_are_left_alone() {
        let q = r#"LAST_SEEN object="now YESTERDAY \" TODAY""#;
        assert_eq!(resolve(q, now()).unwrap(), q);
        let q = r#"PRESENT object="cup" FROM 2019-06-01T00:00:00Z TO 2019-06-02T00:00:00Z"#;
        assert_eq!(resolve(q, now()).unwrap(), q);
    }
}
