//! Retired-instruction trace format.
//!
//! One record per line: `CYCLE PC RAW NPC`, CYCLE in decimal, the rest in
//! `0x`-prefixed hex. `#` starts a comment line; blank lines are ignored.

use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::is_compressed;

/// Records that may retire in the same cycle (one per commit port).
pub const COMMIT_PORTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cycle: u64,
    pub pc: u64,
    /// Full 32-bit encoding, or a compressed parcel in the low half.
    pub raw: u32,
    /// Address of the next retired instruction.
    pub npc: u64,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: more than {COMMIT_PORTS} commits in cycle {cycle}")]
    TooManyCommits { line: usize, cycle: u64 },
    #[error("line {line}: cycle {cycle} is before previous cycle {previous}")]
    DecreasingCycle {
        line: usize,
        cycle: u64,
        previous: u64,
    },
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

fn parse_hex(field: &str, what: &str, line: usize) -> Result<u64, TraceError> {
    let digits = field
        .strip_prefix("0x")
        .or_else(|| field.strip_prefix("0X"))
        .ok_or_else(|| TraceError::Malformed {
            line,
            reason: format!("{what} `{field}` is missing the 0x prefix"),
        })?;
    u64::from_str_radix(digits, 16).map_err(|e| TraceError::Malformed {
        line,
        reason: format!("bad {what} `{field}`: {e}"),
    })
}

fn parse_line(text: &str, line: usize) -> Result<TraceRecord, TraceError> {
    let fields: Vec<&str> = text.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(TraceError::Malformed {
            line,
            reason: format!("expected 4 fields, found {}", fields.len()),
        });
    }
    let cycle = fields[0]
        .parse::<u64>()
        .map_err(|e| TraceError::Malformed {
            line,
            reason: format!("bad cycle `{}`: {e}", fields[0]),
        })?;
    let pc = parse_hex(fields[1], "pc", line)?;
    let raw = parse_hex(fields[2], "raw", line)?;
    let npc = parse_hex(fields[3], "npc", line)?;

    let raw = u32::try_from(raw).map_err(|_| TraceError::Malformed {
        line,
        reason: format!("raw `{}` is wider than 32 bits", fields[2]),
    })?;
    if is_compressed(raw) && raw > 0xffff {
        return Err(TraceError::Malformed {
            line,
            reason: format!("compressed raw `{}` has bits set above bit 15", fields[2]),
        });
    }
    if pc & 1 != 0 {
        return Err(TraceError::Malformed {
            line,
            reason: format!("pc {pc:#x} is not 2-byte aligned"),
        });
    }
    Ok(TraceRecord {
        cycle,
        pc,
        raw,
        npc,
    })
}

/// Validates ordering as records arrive.
#[derive(Debug, Default)]
struct CycleCheck {
    last: Option<(u64, usize)>,
}

impl CycleCheck {
    fn accept(&mut self, cycle: u64, line: usize) -> Result<(), TraceError> {
        self.last = match self.last {
            Some((previous, _)) if cycle < previous => {
                return Err(TraceError::DecreasingCycle {
                    line,
                    cycle,
                    previous,
                })
            }
            Some((previous, count)) if cycle == previous => {
                if count == COMMIT_PORTS {
                    return Err(TraceError::TooManyCommits { line, cycle });
                }
                Some((cycle, count + 1))
            }
            _ => Some((cycle, 1)),
        };
        Ok(())
    }
}

pub fn parse_trace<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut records = Vec::new();
    let mut check = CycleCheck::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let rec = parse_line(text, line_no)?;
        check.accept(rec.cycle, line_no)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn parse_trace_str(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    parse_trace(text.as_bytes())
}

pub fn serialize_trace(records: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 40);
    for r in records {
        let _ = writeln!(out, "{} {:#x} {:#010x} {:#x}", r.cycle, r.pc, r.raw, r.npc);
    }
    out
}

/// Groups consecutive records sharing a cycle index. Yields index ranges.
pub fn cycle_groups(records: &[TraceRecord]) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= records.len() {
            return None;
        }
        let cycle = records[start].cycle;
        let mut end = start + 1;
        while end < records.len() && records[end].cycle == cycle {
            end += 1;
        }
        let range = start..end;
        start = end;
        Some(range)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_example_line() {
        let recs = parse_trace_str("10 0x80000000 0x008000EF 0x80000008\n").unwrap();
        assert_eq!(
            recs,
            vec![TraceRecord {
                cycle: 10,
                pc: 0x8000_0000,
                raw: 0x0080_00EF,
                npc: 0x8000_0008
            }]
        );
    }

    #[test]
    fn skips_comments_and_blanks() {
        let text = "# comment\n\n   \n1 0x0 0x13 0x4\n  # indented comment\n";
        assert_eq!(parse_trace_str(text).unwrap().len(), 1);
    }

    #[test]
    fn rejects_third_commit_in_cycle() {
        let text = "7 0x0 0x13 0x4\n7 0x4 0x13 0x8\n7 0x8 0x13 0xc\n";
        let err = parse_trace_str(text).unwrap_err();
        assert_eq!(err.to_string(), "line 3: more than 2 commits in cycle 7");
    }

    #[test]
    fn rejects_decreasing_cycle() {
        let err = parse_trace_str("5 0x0 0x13 0x4\n4 0x4 0x13 0x8\n").unwrap_err();
        assert!(matches!(
            err,
            TraceError::DecreasingCycle {
                line: 2,
                cycle: 4,
                previous: 5
            }
        ));
    }

    #[test]
    fn reports_malformed_line_number() {
        let err = parse_trace_str("1 0x0 0x13 0x4\n2 0x4 zz 0x8\n").unwrap_err();
        assert!(
            matches!(err, TraceError::Malformed { line: 2, .. }),
            "{err}"
        );
        let err = parse_trace_str("1 0x0 0x13\n").unwrap_err();
        assert!(matches!(err, TraceError::Malformed { line: 1, .. }));
        let err = parse_trace_str("1 0x1 0x13 0x4\n").unwrap_err();
        assert!(err.to_string().contains("aligned"));
        let err = parse_trace_str("1 0x0 0x18082 0x4\n").unwrap_err();
        assert!(err.to_string().contains("above bit 15"));
        let err = parse_trace_str("x 0x0 0x13 0x4\n").unwrap_err();
        assert!(err.to_string().contains("bad cycle"));
        let err = parse_trace_str("1 0 0x13 0x4\n").unwrap_err();
        assert!(err.to_string().contains("prefix"));
    }

    #[test]
    fn groups_by_cycle() {
        let recs = parse_trace_str("1 0x0 0x13 0x4\n1 0x4 0x13 0x8\n3 0x8 0x13 0xc\n").unwrap();
        let groups: Vec<_> = cycle_groups(&recs).collect();
        assert_eq!(groups, vec![0..2, 2..3]);
    }

    fn record_strategy() -> impl Strategy<Value = (u64, u64, u32, u64)> {
        (
            0u64..3,
            any::<u64>().prop_map(|pc| pc & !1),
            prop_oneof![
                any::<u16>().prop_map(|r| u32::from(r & !3 | 1)),
                any::<u32>().prop_map(|r| r | 3)
            ],
            any::<u64>(),
        )
    }

    proptest! {
        #[test]
        fn serialize_round_trips(steps in prop::collection::vec(record_strategy(), 0..64)) {
            // Cycle deltas of 0 are allowed at most once in a row.
            let mut records = Vec::new();
            let mut cycle = 0u64;
            let mut same = 1;
            for (delta, pc, raw, npc) in steps {
                let delta = if delta == 0 && same == COMMIT_PORTS { 1 } else { delta };
                if records.is_empty() || delta > 0 { same = 1 } else { same += 1 }
                cycle += if records.is_empty() { 0 } else { delta };
                records.push(TraceRecord { cycle, pc, raw, npc });
            }
            let text = serialize_trace(&records);
            prop_assert_eq!(parse_trace_str(&text).unwrap(), records);
        }
    }
}
