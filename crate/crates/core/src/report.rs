//! Text and JSON rendering of simulation reports.
//!
//! The text table has one row per configuration: total cycles, retired
//! control-flow events and slowdown as an integer percent. A dash stands in
//! for a slowdown that is undefined: no events, empty baseline, or a halted
//! run. JSON carries the full [`SimReport`] including the exact ratio.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::sim::{SimReport, REPORT_SCHEMA};

pub const DASH: &str = "\u{2013}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Text,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            other => Err(format!("unknown format `{other}` (expected text or json)")),
        }
    }
}

/// Several reports in one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub schema: u32,
    pub reports: Vec<SimReport>,
}

/// Slowdown cell as printed in the table.
pub fn slowdown_cell(report: &SimReport) -> String {
    match report.slowdown {
        Some(s) if report.cf_event_count > 0 && report.halted.is_none() => {
            format!("{}%", s.rounded())
        }
        _ => DASH.to_owned(),
    }
}

const HEADER: [&str; 8] = [
    "profile", "mode", "depth", "bus", "baseline", "cycles", "cf", "slowdown",
];

fn row(r: &SimReport) -> [String; 8] {
    let c = &r.config;
    [
        c.profile.clone(),
        c.latency_mode.to_string(),
        c.queue_depth.to_string(),
        c.bus_width_bits.to_string(),
        r.baseline_cycles.to_string(),
        r.cfi_cycles.to_string(),
        r.cf_event_count.to_string(),
        slowdown_cell(r),
    ]
}

fn table(reports: &[SimReport]) -> String {
    let rows: Vec<[String; 8]> = reports.iter().map(row).collect();
    let mut widths = HEADER.map(|h| h.chars().count());
    for r in &rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let mut text = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - cell.chars().count();
            // names left-aligned, numbers right-aligned
            if i < 2 {
                text.push_str(cell);
                text.extend(std::iter::repeat_n(' ', pad));
            } else {
                text.extend(std::iter::repeat_n(' ', pad));
                text.push_str(cell);
            }
            if i + 1 < cells.len() {
                text.push_str("  ");
            }
        }
        out.push_str(text.trim_end());
        out.push('\n');
    };
    line(&HEADER.map(String::from));
    for r in &rows {
        line(r);
    }
    out
}

fn details(out: &mut String, r: &SimReport) {
    let k = &r.events_by_kind;
    let _ = writeln!(
        out,
        "[{}] retired {} | calls {} returns {} indirect {} swaps {} | stalls: queue-full {} dual-commit {} | max queue {}",
        r.config.profile,
        r.retired_instructions,
        k.call,
        k.ret,
        k.indirect_jump,
        k.coroutine_swap,
        r.stalls.queue_full,
        r.stalls.dual_control_flow_commit,
        r.max_queue_occupancy,
    );
    for v in &r.violations {
        let _ = writeln!(
            out,
            "[{}] violation at record {} (pc {:#x}, {}), cycle {}: {}",
            r.config.profile, v.trace_index, v.pc, v.kind, v.cycle, v.detail
        );
    }
    if let Some(h) = r.halted {
        let _ = writeln!(
            out,
            "[{}] halted at cycle {} with {} queued logs and {} records unretired",
            r.config.profile, h.cycle, h.queue_residue, h.unretired
        );
    }
}

pub fn emit_report(report: &SimReport, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Text => emit_reports(std::slice::from_ref(report), Format::Text),
    }
}

pub fn emit_reports(reports: &[SimReport], format: Format) -> String {
    match format {
        Format::Json => {
            let set = ReportSet {
                schema: REPORT_SCHEMA,
                reports: reports.to_vec(),
            };
            let mut s = serde_json::to_string_pretty(&set).expect("report serializes");
            s.push('\n');
            s
        }
        Format::Text => {
            let mut out = table(reports);
            for r in reports {
                details(&mut out, r);
            }
            out
        }
    }
}
