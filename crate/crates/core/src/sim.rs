//! Trace-driven replay of the protected SoC.
//!
//! Each simulated cycle runs three phases: the log writer and RoT settle,
//! the commit stage retires what it can, and the back end settles again.
//! Settling repeats writer and RoT steps until neither makes progress, so a
//! log pushed in a cycle can be popped in that same cycle and a writer that
//! reads a verdict can start on the next log immediately.
//!
//! Per log `k` with service time `S_k = beats × transfer_cost + cost(kind)`:
//! `pop_k = max(push_k, done_{k-1})`, `done_k = pop_k + S_k`, and `push_k`
//! waits for `pop_{k-depth}`. Cycles the core spends waiting are added to a
//! running delay that shifts every later trace cycle.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commit_log::{make_commit_log, CommitLog};
use crate::commit_stage::{
    filter_ports, transfer_beats, CfiQueue, CfiViolation, LogWriter, QueuedLog, StallReason,
    WriterEvent,
};
use crate::decode::{ControlFlowKind, DecodeError, Xlen};
use crate::mailbox::{Mailbox, MailboxError, MailboxEvent, ProtocolMonitor, ProtocolViolation};
use crate::policy::{
    CheckDetail, CheckResult, PolicyEngine, PolicyError, PolicyParams, PolicyRegistry,
    ShadowStackPolicy,
};
use crate::profile::{FirmwareProfile, LatencyMode};
use crate::trace::{cycle_groups, TraceRecord, COMMIT_PORTS};

pub const REPORT_SCHEMA: u32 = 1;
pub const BUS_WIDTHS: [u32; 3] = [32, 64, 128];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub profile: FirmwareProfile,
    pub queue_depth: usize,
    pub bus_width_bits: u32,
    pub transfer_cost_per_beat: u64,
    pub latency_mode: LatencyMode,
    pub halt_on_violation: bool,
    pub xlen: Xlen,
    pub policy: String,
    pub policy_params: PolicyParams,
}

impl SimConfig {
    pub fn new(profile: FirmwareProfile, queue_depth: usize) -> Self {
        Self {
            profile,
            queue_depth,
            bus_width_bits: 64,
            transfer_cost_per_beat: 0,
            latency_mode: LatencyMode::PerKind,
            halt_on_violation: false,
            xlen: Xlen::Rv64,
            policy: ShadowStackPolicy::NAME.into(),
            policy_params: PolicyParams {
                key_seed: Some(0),
                ..PolicyParams::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.queue_depth == 0 {
            return Err(SimError::Config("queue depth must be at least 1".into()));
        }
        if !BUS_WIDTHS.contains(&self.bus_width_bits) {
            return Err(SimError::Config(format!(
                "bus width {} is not one of 32, 64, 128",
                self.bus_width_bits
            )));
        }
        self.policy_params
            .shadow_stack
            .validate()
            .map_err(|e| SimError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn summary(&self) -> ConfigSummary {
        ConfigSummary {
            profile: self.profile.name.clone(),
            queue_depth: self.queue_depth,
            bus_width_bits: self.bus_width_bits,
            transfer_cost_per_beat: self.transfer_cost_per_beat,
            latency_mode: self.latency_mode,
            halt_on_violation: self.halt_on_violation,
            policy: self.policy.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("trace record {index}: {reason}")]
    Trace { index: usize, reason: String },
    #[error("trace record {index}: {source}")]
    Decode { index: usize, source: DecodeError },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Mailbox(#[from] MailboxError),
    #[error("mailbox protocol broken: {0}")]
    Protocol(#[from] ProtocolViolation),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub profile: String,
    pub queue_depth: usize,
    pub bus_width_bits: u32,
    pub transfer_cost_per_beat: u64,
    pub latency_mode: LatencyMode,
    pub halt_on_violation: bool,
    pub policy: String,
}

/// `100 × (cfi − baseline) / baseline`, kept exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slowdown {
    pub numerator: u64,
    pub denominator: u64,
    pub percent: f64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Slowdown {
    pub fn new(baseline: u64, cfi: u64) -> Option<Self> {
        if baseline == 0 {
            return None;
        }
        let num = 100 * (cfi - baseline);
        let g = gcd(num, baseline).max(1);
        let (numerator, denominator) = (num / g, baseline / g);
        Some(Self {
            numerator,
            denominator,
            percent: numerator as f64 / denominator as f64,
        })
    }

    /// Integer percent, halves rounded up.
    pub fn rounded(&self) -> u64 {
        (2 * self.numerator + self.denominator) / (2 * self.denominator)
    }

    pub fn is_zero(&self) -> bool {
        self.numerator == 0
    }
}

impl PartialOrd for Slowdown {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        let lhs = u128::from(self.numerator) * u128::from(other.denominator);
        let rhs = u128::from(other.numerator) * u128::from(self.denominator);
        Some(lhs.cmp(&rhs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KindCounts {
    pub call: u64,
    #[serde(rename = "return")]
    pub ret: u64,
    pub indirect_jump: u64,
    pub coroutine_swap: u64,
}

impl KindCounts {
    pub fn add(&mut self, kind: ControlFlowKind) {
        match kind {
            ControlFlowKind::Call => self.call += 1,
            ControlFlowKind::Return => self.ret += 1,
            ControlFlowKind::IndirectJump => self.indirect_jump += 1,
            ControlFlowKind::CoroutineSwap => self.coroutine_swap += 1,
            ControlFlowKind::NotControlFlow => {}
        }
    }

    pub fn total(&self) -> u64 {
        self.call + self.ret + self.indirect_jump + self.coroutine_swap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StallCounts {
    pub queue_full: u64,
    pub dual_control_flow_commit: u64,
}

impl StallCounts {
    pub fn total(&self) -> u64 {
        self.queue_full + self.dual_control_flow_commit
    }

    fn add(&mut self, reason: StallReason, cycles: u64) {
        match reason {
            StallReason::QueueFull => self.queue_full += cycles,
            StallReason::DualControlFlowCommit => self.dual_control_flow_commit += cycles,
            StallReason::None => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub trace_index: usize,
    /// Cycle at which the host read the failing verdict.
    pub cycle: u64,
    pub pc: u64,
    pub kind: ControlFlowKind,
    pub detail: CheckDetail,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HaltInfo {
    pub cycle: u64,
    /// Logs still queued when the exception was taken.
    pub queue_residue: usize,
    /// Trace records that never retired.
    pub unretired: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema: u32,
    pub config: ConfigSummary,
    pub retired_instructions: u64,
    pub baseline_cycles: u64,
    pub cfi_cycles: u64,
    /// `None` when the baseline is zero or the run halted.
    pub slowdown: Option<Slowdown>,
    pub cf_event_count: u64,
    pub events_by_kind: KindCounts,
    pub stalls: StallCounts,
    pub checks_completed: u64,
    pub doorbells: u64,
    pub max_queue_occupancy: usize,
    pub violations: Vec<ViolationRecord>,
    pub halted: Option<HaltInfo>,
}

/// Cycle stamps of one log on its way through the back end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LogTiming {
    pub trace_index: usize,
    pub pushed_at: u64,
    pub popped_at: Option<u64>,
    pub doorbell_at: Option<u64>,
    pub completed_at: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SimTrace {
    pub events: Vec<MailboxEvent>,
    pub logs: Vec<LogTiming>,
    /// Retirement cycle per trace record; `None` if the run halted first.
    pub retired_at: Vec<Option<u64>>,
}

/// Checks the ordering and port limits a hand-built trace must respect.
pub fn validate_trace(records: &[TraceRecord]) -> Result<(), SimError> {
    let mut prev: Option<u64> = None;
    let mut in_cycle = 0;
    for (index, r) in records.iter().enumerate() {
        match prev {
            Some(p) if r.cycle < p => {
                return Err(SimError::Trace {
                    index,
                    reason: format!("cycle {} is before previous cycle {p}", r.cycle),
                })
            }
            Some(p) if r.cycle == p => in_cycle += 1,
            _ => in_cycle = 1,
        }
        if in_cycle > COMMIT_PORTS {
            return Err(SimError::Trace {
                index,
                reason: format!("more than {COMMIT_PORTS} commits in cycle {}", r.cycle),
            });
        }
        prev = Some(r.cycle);
    }
    Ok(())
}

/// Commit log and dual-commit flag for every record.
fn filter_trace(
    records: &[TraceRecord],
    xlen: Xlen,
) -> Result<Vec<(Option<CommitLog>, bool)>, SimError> {
    let mut out = vec![(None, false); records.len()];
    for group in cycle_groups(records) {
        let start = group.start;
        for index in group.clone() {
            make_commit_log(&records[index], xlen)
                .map_err(|source| SimError::Decode { index, source })?;
        }
        let filtered = filter_ports(&records[group], xlen).expect("every record decoded above");
        for (n, (port, log)) in filtered.logs.into_iter().enumerate() {
            let deferred = n > 0 && filtered.stall == StallReason::DualControlFlowCommit;
            out[start + port] = (Some(log), deferred);
        }
    }
    Ok(out)
}

struct Rot {
    engine: PolicyEngine,
    due: Option<u64>,
    in_flight: Option<CheckResult>,
    verdicts: VecDeque<CheckResult>,
}

impl Rot {
    fn step(&mut self, now: u64, mailbox: &mut Mailbox) -> Result<bool, SimError> {
        if let Some(due) = self.due {
            if now < due {
                return Ok(false);
            }
            let result = self.in_flight.take().expect("a check is in flight");
            mailbox.rot_write_result(result.violation, now)?;
            self.verdicts.push_back(result);
            self.due = None;
            return Ok(true);
        }
        if !mailbox.doorbell() {
            return Ok(false);
        }
        let log = mailbox.rot_read_log(now)?;
        let result = self.engine.handle_event(&log)?;
        self.due = Some(now + result.cost_cycles);
        self.in_flight = Some(result);
        Ok(true)
    }
}

struct Engine<'a> {
    records: &'a [TraceRecord],
    logs: Vec<(Option<CommitLog>, bool)>,
    halt_on_violation: bool,
    queue: CfiQueue<QueuedLog>,
    writer: LogWriter,
    mailbox: Mailbox,
    monitor: ProtocolMonitor,
    rot: Rot,
    keep_trace: bool,
    trace: SimTrace,
    log_slot: Vec<usize>,

    next: usize,
    delay: u64,
    deferral_paid: bool,
    queue_blocked: bool,
    last_retire: u64,
    last_host_read: u64,
    report: SimReport,
}

impl<'a> Engine<'a> {
    fn settle(&mut self, now: u64) -> Result<Option<CfiViolation>, SimError> {
        loop {
            let mut progress = false;
            if let Some(event) = self.writer.step(now, &mut self.queue, &mut self.mailbox)? {
                progress = true;
                if let Some(v) = self.on_writer_event(event, now)? {
                    self.drain_events()?;
                    return Ok(Some(v));
                }
            }
            progress |= self.rot.step(now, &mut self.mailbox)?;
            if !progress {
                self.drain_events()?;
                return Ok(None);
            }
        }
    }

    fn drain_events(&mut self) -> Result<(), SimError> {
        for event in self.mailbox.take_events() {
            self.monitor.observe(&event)?;
            if self.keep_trace {
                self.trace.events.push(event);
            }
        }
        Ok(())
    }

    fn timing(&mut self, trace_index: usize) -> Option<&mut LogTiming> {
        let slot = *self.log_slot.get(trace_index)?;
        self.trace.logs.get_mut(slot)
    }

    fn on_writer_event(
        &mut self,
        event: WriterEvent,
        now: u64,
    ) -> Result<Option<CfiViolation>, SimError> {
        match event {
            WriterEvent::Popped(entry) => {
                if let Some(t) = self.timing(entry.trace_index) {
                    t.popped_at = Some(now);
                }
            }
            WriterEvent::DoorbellRung => {
                let index = self.writer.current().expect("log in flight").trace_index;
                if let Some(t) = self.timing(index) {
                    t.doorbell_at = Some(now);
                }
            }
            WriterEvent::BeatWritten { .. } | WriterEvent::CompletionSeen => {}
            WriterEvent::Verdict { entry, violation } => {
                self.last_host_read = now;
                self.report.checks_completed += 1;
                if let Some(t) = self.timing(entry.trace_index) {
                    t.completed_at = Some(now);
                }
                let result = self
                    .rot
                    .verdicts
                    .pop_front()
                    .expect("verdict matches a RoT result");
                debug_assert_eq!(result.violation, violation);
                if violation {
                    let rec = &self.records[entry.trace_index];
                    self.report.violations.push(ViolationRecord {
                        trace_index: entry.trace_index,
                        cycle: now,
                        pc: rec.pc,
                        kind: entry.log.kind,
                        detail: result.detail,
                    });
                    if self.halt_on_violation {
                        return Ok(Some(CfiViolation { entry, cycle: now }));
                    }
                }
            }
        }
        Ok(None)
    }

    fn retire(&mut self, index: usize, now: u64) {
        self.report.retired_instructions += 1;
        self.last_retire = now;
        if self.keep_trace {
            self.trace.retired_at[index] = Some(now);
        }
        self.next += 1;
        self.deferral_paid = false;
    }

    fn stall(&mut self, reason: StallReason) {
        self.delay += 1;
        self.report.stalls.add(reason, 1);
    }

    /// Retires records due at `now` until one has to wait.
    fn commit(&mut self, now: u64) {
        self.queue_blocked = false;
        while self.next < self.records.len() {
            let index = self.next;
            let base = self.records[index].cycle + self.delay;
            if base > now {
                return;
            }
            debug_assert_eq!(base, now);
            let (log, deferred) = self.logs[index];
            let Some(log) = log else {
                self.retire(index, now);
                continue;
            };
            if deferred && !self.deferral_paid {
                // The port rule costs this cycle, but a full queue would have
                // refused the log anyway and takes precedence.
                self.deferral_paid = true;
                self.stall(if self.queue.is_full() {
                    StallReason::QueueFull
                } else {
                    StallReason::DualControlFlowCommit
                });
                return;
            }
            if self
                .queue
                .push(QueuedLog {
                    log,
                    trace_index: index,
                })
                .is_err()
            {
                self.queue_blocked = true;
                self.stall(StallReason::QueueFull);
                return;
            }
            self.report.max_queue_occupancy = self.report.max_queue_occupancy.max(self.queue.len());
            self.report.events_by_kind.add(log.kind);
            self.report.cf_event_count += 1;
            if self.keep_trace {
                self.log_slot[index] = self.trace.logs.len();
                self.trace.logs.push(LogTiming {
                    trace_index: index,
                    pushed_at: now,
                    ..LogTiming::default()
                });
            }
            self.retire(index, now);
        }
    }

    fn finished(&self) -> bool {
        self.next == self.records.len()
            && self.queue.is_empty()
            && self.writer.is_idle()
            && self.rot.due.is_none()
    }

    /// Next cycle at which anything can change. Cycles skipped while the
    /// head record waits for a queue slot are charged to the queue.
    fn advance(&mut self, now: u64) -> u64 {
        let back_end = [
            self.writer.next_event(now),
            self.rot.due.filter(|&d| d > now),
        ]
        .into_iter()
        .flatten()
        .min();
        if self.queue_blocked {
            let next = back_end.expect("a full queue implies a busy back end");
            let skipped = next - now - 1;
            self.delay += skipped;
            self.report.stalls.add(StallReason::QueueFull, skipped);
            return next;
        }
        let front = self.records.get(self.next).map(|r| r.cycle + self.delay);
        [front, back_end]
            .into_iter()
            .flatten()
            .min()
            .expect("unfinished run has a next event")
    }

    fn run(mut self) -> Result<(SimReport, SimTrace), SimError> {
        let Some(first) = self.records.first() else {
            return self.finish(None);
        };
        let mut now = first.cycle;
        loop {
            if let Some(v) = self.settle(now)? {
                return self.finish(Some(v));
            }
            self.commit(now);
            if let Some(v) = self.settle(now)? {
                return self.finish(Some(v));
            }
            if self.finished() {
                return self.finish(None);
            }
            now = self.advance(now);
        }
    }

    fn finish(mut self, halt: Option<CfiViolation>) -> Result<(SimReport, SimTrace), SimError> {
        let summary = self.monitor.summary();
        if halt.is_none() {
            self.monitor.clone().finish()?;
        }
        let r = &mut self.report;
        r.doorbells = summary.doorbells;
        r.baseline_cycles = self.records.last().map_or(0, |rec| rec.cycle);
        match halt {
            Some(v) => {
                r.cfi_cycles = v.cycle;
                r.halted = Some(HaltInfo {
                    cycle: v.cycle,
                    queue_residue: self.queue.len(),
                    unretired: self.records.len() - self.next,
                });
                r.slowdown = None;
            }
            None => {
                r.cfi_cycles = self.last_retire.max(self.last_host_read);
                r.slowdown = Slowdown::new(r.baseline_cycles, r.cfi_cycles);
            }
        }
        Ok((self.report, self.trace))
    }
}

fn simulate(
    records: &[TraceRecord],
    config: &SimConfig,
    registry: &PolicyRegistry,
    keep_trace: bool,
) -> Result<(SimReport, SimTrace), SimError> {
    config.validate()?;
    validate_trace(records)?;
    let logs = filter_trace(records, config.xlen)?;
    let policy = registry.create(&config.policy, &config.policy_params)?;
    let engine = PolicyEngine::new(policy, config.profile.clone(), config.latency_mode);
    let beats = transfer_beats(config.bus_width_bits);
    let trace = SimTrace {
        retired_at: if keep_trace {
            vec![None; records.len()]
        } else {
            Vec::new()
        },
        ..SimTrace::default()
    };
    Engine {
        records,
        logs,
        halt_on_violation: config.halt_on_violation,
        queue: CfiQueue::new(config.queue_depth),
        writer: LogWriter::new(config.bus_width_bits, config.transfer_cost_per_beat),
        mailbox: Mailbox::new(),
        monitor: ProtocolMonitor::new(beats),
        rot: Rot {
            engine,
            due: None,
            in_flight: None,
            verdicts: VecDeque::new(),
        },
        keep_trace,
        trace,
        log_slot: if keep_trace {
            vec![usize::MAX; records.len()]
        } else {
            Vec::new()
        },
        next: 0,
        delay: 0,
        deferral_paid: false,
        queue_blocked: false,
        last_retire: 0,
        last_host_read: 0,
        report: SimReport {
            schema: REPORT_SCHEMA,
            config: config.summary(),
            retired_instructions: 0,
            baseline_cycles: 0,
            cfi_cycles: 0,
            slowdown: None,
            cf_event_count: 0,
            events_by_kind: KindCounts::default(),
            stalls: StallCounts::default(),
            checks_completed: 0,
            doorbells: 0,
            max_queue_occupancy: 0,
            violations: Vec::new(),
            halted: None,
        },
    }
    .run()
}

/// Replays `records` under `config` with the built-in policies.
pub fn run(records: &[TraceRecord], config: &SimConfig) -> Result<SimReport, SimError> {
    run_with(records, config, &PolicyRegistry::with_builtins())
}

pub fn run_with(
    records: &[TraceRecord],
    config: &SimConfig,
    registry: &PolicyRegistry,
) -> Result<SimReport, SimError> {
    simulate(records, config, registry, false).map(|(report, _)| report)
}

/// Like [`run`], also returning the mailbox event log and per-log timings.
pub fn run_traced(
    records: &[TraceRecord],
    config: &SimConfig,
) -> Result<(SimReport, SimTrace), SimError> {
    simulate(records, config, &PolicyRegistry::with_builtins(), true)
}

/// Runs every config on its own thread. Results keep the order of `configs`.
pub fn compare_profiles(
    records: &[TraceRecord],
    configs: &[SimConfig],
) -> Vec<Result<SimReport, SimError>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| s.spawn(move || run(records, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("simulation thread panicked"))
            .collect()
    })
}
