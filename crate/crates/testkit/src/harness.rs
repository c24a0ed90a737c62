//! Cross-checks of a simulator run against the reference models.

use rot_cfi::mailbox::ProtocolMonitor;
use rot_cfi::policy::CheckDetail;
use rot_cfi::sim::{run_traced, SimConfig};
use rot_cfi::LatencyMode;

use crate::{oracle, records, reference_violations, GtRecord, OracleParams, RefVerdict};

pub fn oracle_params(config: &SimConfig) -> OracleParams {
    OracleParams {
        depth: config.queue_depth,
        call_cycles: config.profile.call_cycles,
        return_cycles: config.profile.return_cycles,
        averaged: config.latency_mode == LatencyMode::Averaged,
        bus_width_bits: u64::from(config.bus_width_bits),
        transfer_cost_per_beat: config.transfer_cost_per_beat,
    }
}

fn expect<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: simulator {got:?}, reference {want:?}"))
    }
}

/// Runs `trace` under `config` (which must not halt) and compares every
/// observable with the recurrence oracle, the reference stack and the
/// mailbox grammar.
pub fn check_run(trace: &[GtRecord], config: &SimConfig) -> Result<(), String> {
    let recs = records(trace);
    let (report, detail) = run_traced(&recs, config).map_err(|e| e.to_string())?;
    let o = oracle(trace, &oracle_params(config));

    expect("baseline", report.baseline_cycles, o.baseline_cycles)?;
    expect("cfi cycles", report.cfi_cycles, o.cfi_cycles)?;
    expect("queue-full stalls", report.stalls.queue_full, o.queue_full)?;
    expect(
        "dual-commit stalls",
        report.stalls.dual_control_flow_commit,
        o.dual,
    )?;
    expect("max occupancy", report.max_queue_occupancy, o.max_occupancy)?;
    expect("retired", report.retired_instructions, trace.len() as u64)?;
    let retired: Vec<u64> = detail
        .retired_at
        .iter()
        .map(|r| r.expect("every record retires"))
        .collect();
    expect("retire cycles", retired, o.retired_at.clone())?;
    let pushed: Vec<u64> = detail.logs.iter().map(|l| l.pushed_at).collect();
    let popped: Vec<u64> = detail
        .logs
        .iter()
        .map(|l| l.popped_at.expect("popped"))
        .collect();
    let done: Vec<u64> = detail
        .logs
        .iter()
        .map(|l| l.completed_at.expect("completed"))
        .collect();
    expect("push cycles", pushed, o.pushed_at)?;
    expect("pop cycles", popped, o.popped_at)?;
    expect("completion cycles", done, o.completed_at)?;

    let summary = ProtocolMonitor::check(
        &detail.events,
        rot_cfi::commit_stage::transfer_beats(config.bus_width_bits),
    )
    .map_err(|e| e.to_string())?;
    expect("doorbells", summary.doorbells, report.cf_event_count)?;
    expect("report doorbells", report.doorbells, report.cf_event_count)?;
    expect("checks", report.checks_completed, report.cf_event_count)?;

    let want: Vec<(usize, CheckDetail)> = reference_violations(trace)
        .into_iter()
        .map(|(i, v)| {
            let d = match v {
                RefVerdict::Mismatch { expected, observed } => {
                    CheckDetail::ReturnMismatch { expected, observed }
                }
                RefVerdict::Underflow => CheckDetail::StackUnderflow,
                RefVerdict::Ok => unreachable!(),
            };
            (i, d)
        })
        .collect();
    let got: Vec<(usize, CheckDetail)> = report
        .violations
        .iter()
        .map(|v| (v.trace_index, v.detail))
        .collect();
    expect("violations", got, want)?;
    Ok(())
}
