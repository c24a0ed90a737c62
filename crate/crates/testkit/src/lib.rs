//! Reference models for the test suites.
//!
//! Nothing here calls into the simulator's decoder, queue or engine: traces
//! carry ground-truth kinds chosen at generation time, timing comes from a
//! closed recurrence, and the shadow stack is a plain vector.

use rand::Rng;
use rot_cfi::TraceRecord;

pub mod harness;
pub mod rvc;
pub mod spill;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Plain,
    Call,
    Return,
    Indirect,
    Swap,
}

/// Encodings with known classification: `(raw, byte length, kind)`.
pub const CALLS: [(u32, u64); 3] = [(0x0003_00E7, 4), (0x9302, 2), (0x0080_00EF, 4)];
pub const RETURNS: [(u32, u64); 3] = [(0x0000_8067, 4), (0x8082, 2), (0x0002_8067, 4)];
pub const INDIRECT: [(u32, u64); 2] = [(0x0003_0067, 4), (0x8582, 2)];
pub const SWAP: (u32, u64) = (0x0002_80E7, 4);
/// Plain instructions; the last field is true for those jumping to themselves.
pub const FILLERS: [(u32, u64, bool); 7] = [
    (0x13, 4, false),
    (0x0001, 2, false),
    (0x0505, 2, false),
    (0x63, 4, true),
    (0x6f, 4, true),
    (0xa001, 2, true),
    (0x2b7, 4, false),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtRecord {
    pub record: TraceRecord,
    pub kind: Kind,
}

/// Shape of a random trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceShape {
    pub len: usize,
    /// Probability that a record is control flow.
    pub cf_density: f64,
    /// Probability that a record shares a cycle with its predecessor.
    pub dual: f64,
    /// Idle cycles between commit cycles are drawn from `0..=max_gap`, with
    /// an occasional long pause.
    pub max_gap: u64,
    pub long_gap: u64,
    /// Probability a return goes somewhere other than its call site.
    pub corrupt: f64,
}

impl TraceShape {
    pub fn random(rng: &mut impl Rng, max_len: usize) -> Self {
        Self {
            len: rng.gen_range(1..=max_len),
            cf_density: rng.gen_range(0.0..=1.0),
            dual: rng.gen_range(0.0..0.6),
            max_gap: rng.gen_range(0..8),
            long_gap: rng.gen_range(0..2000),
            corrupt: if rng.gen_bool(0.3) {
                rng.gen_range(0.0..0.05)
            } else {
                0.0
            },
        }
    }
}

pub fn random_trace(rng: &mut impl Rng, shape: &TraceShape) -> Vec<GtRecord> {
    let mut out = Vec::with_capacity(shape.len);
    let mut stack: Vec<u64> = Vec::new();
    let mut pc: u64 = 0x4000_0000;
    let mut cycle: u64 = rng.gen_range(0..4);
    let mut in_cycle = 0;
    for _ in 0..shape.len {
        if in_cycle > 0 && (in_cycle == 2 || !rng.gen_bool(shape.dual)) {
            let pause = if rng.gen_ratio(1, 200) {
                shape.long_gap
            } else {
                0
            };
            cycle += 1 + rng.gen_range(0..=shape.max_gap) + pause;
            in_cycle = 0;
        }
        in_cycle += 1;
        let far = 0x4000_0000 + 2 * rng.gen_range(0..0x10_0000u64);
        let (raw, npc, kind) = if rng.gen_bool(shape.cf_density) {
            match rng.gen_range(0..8) {
                0..=2 => {
                    let (raw, len) = CALLS[rng.gen_range(0..CALLS.len())];
                    stack.push(pc + len);
                    let target = if raw == 0x0080_00EF { pc + 8 } else { far };
                    (raw, target, Kind::Call)
                }
                3..=5 => {
                    let (raw, _) = RETURNS[rng.gen_range(0..RETURNS.len())];
                    let honest = stack.pop();
                    let target = match honest {
                        Some(t) if !rng.gen_bool(shape.corrupt) => t,
                        _ => far,
                    };
                    (raw, target, Kind::Return)
                }
                6 => {
                    let (raw, _) = INDIRECT[rng.gen_range(0..INDIRECT.len())];
                    (raw, far, Kind::Indirect)
                }
                _ => {
                    let target = stack.pop().unwrap_or(far);
                    stack.push(pc + SWAP.1);
                    (SWAP.0, target, Kind::Swap)
                }
            }
        } else {
            let (raw, len, self_loop) = FILLERS[rng.gen_range(0..FILLERS.len())];
            (raw, if self_loop { pc } else { pc + len }, Kind::Plain)
        };
        out.push(GtRecord {
            record: TraceRecord {
                cycle,
                pc,
                raw,
                npc,
            },
            kind,
        });
        pc = npc;
    }
    out
}

pub fn records(trace: &[GtRecord]) -> Vec<TraceRecord> {
    trace.iter().map(|g| g.record).collect()
}

/// Timing parameters for [`oracle`].
#[derive(Debug, Clone, Copy)]
pub struct OracleParams {
    pub depth: usize,
    pub call_cycles: u64,
    pub return_cycles: u64,
    pub averaged: bool,
    pub bus_width_bits: u64,
    pub transfer_cost_per_beat: u64,
}

impl OracleParams {
    pub fn service(&self, kind: Kind) -> u64 {
        let beats = 224u64.div_ceil(self.bus_width_bits);
        let check = if self.averaged {
            (self.call_cycles + self.return_cycles).div_ceil(2)
        } else {
            match kind {
                Kind::Call | Kind::Indirect => self.call_cycles,
                Kind::Return | Kind::Swap => self.return_cycles,
                Kind::Plain => unreachable!("plain instructions are not checked"),
            }
        };
        beats * self.transfer_cost_per_beat + check
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OracleResult {
    pub baseline_cycles: u64,
    pub cfi_cycles: u64,
    pub retired_at: Vec<u64>,
    pub pushed_at: Vec<u64>,
    pub popped_at: Vec<u64>,
    pub completed_at: Vec<u64>,
    pub queue_full: u64,
    pub dual: u64,
    pub max_occupancy: usize,
}

/// Replays a trace through the queue recurrence:
/// `push_k = max(attempt_k, pop_{k-depth})`,
/// `pop_k = max(push_k, done_{k-1})`, `done_k = pop_k + S_k`.
pub fn oracle(trace: &[GtRecord], p: &OracleParams) -> OracleResult {
    let mut r = OracleResult::default();
    let mut delay = 0;
    let mut prev_cycle = None;
    let mut cf_in_cycle = 0;
    for g in trace {
        if prev_cycle != Some(g.record.cycle) {
            cf_in_cycle = 0;
        }
        prev_cycle = Some(g.record.cycle);
        let base = g.record.cycle + delay;
        if g.kind == Kind::Plain {
            r.retired_at.push(base);
            continue;
        }
        cf_in_cycle += 1;
        let attempt = if cf_in_cycle == 2 { base + 1 } else { base };
        let k = r.pushed_at.len();
        let slot = if k >= p.depth {
            r.popped_at[k - p.depth]
        } else {
            0
        };
        let push = attempt.max(slot);
        if attempt > base {
            // The deferral cycle counts as queue-full when log k - depth is
            // still queued as record k commits: not yet popped, or pushed by
            // the partner this cycle and popped only after the commit.
            let full = k >= p.depth && {
                let j = k - p.depth;
                r.popped_at[j] > base || (r.popped_at[j] == base && r.pushed_at[j] == base)
            };
            if full {
                r.queue_full += 1;
            } else {
                r.dual += 1;
            }
        }
        r.queue_full += push - attempt;
        delay += push - base;
        let pop = push.max(r.completed_at.last().copied().unwrap_or(0));
        r.pushed_at.push(push);
        r.popped_at.push(pop);
        r.completed_at.push(pop + p.service(g.kind));
        r.retired_at.push(push);
    }
    // Occupancy just after each push: earlier logs popped in or before the
    // push cycle have left. Pops are nondecreasing, so one cursor suffices.
    let mut popped = 0;
    for (k, &push) in r.pushed_at.iter().enumerate() {
        while popped < k && r.popped_at[popped] <= push {
            popped += 1;
        }
        r.max_occupancy = r.max_occupancy.max(k + 1 - popped);
    }
    r.baseline_cycles = trace.last().map_or(0, |g| g.record.cycle);
    r.cfi_cycles = r
        .retired_at
        .last()
        .copied()
        .unwrap_or(0)
        .max(r.completed_at.last().copied().unwrap_or(0));
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefVerdict {
    Ok,
    Mismatch { expected: u64, observed: u64 },
    Underflow,
}

/// Unbounded return-address stack.
#[derive(Debug, Clone, Default)]
pub struct RefShadowStack {
    entries: Vec<u64>,
}

impl RefShadowStack {
    pub fn depth(&self) -> usize {
        self.entries.len()
    }

    pub fn push(&mut self, addr: u64) {
        self.entries.push(addr);
    }

    pub fn pop(&mut self) -> Option<u64> {
        self.entries.pop()
    }

    fn check(&mut self, observed: u64) -> RefVerdict {
        match self.entries.pop() {
            None => RefVerdict::Underflow,
            Some(expected) if expected == observed => RefVerdict::Ok,
            Some(expected) => RefVerdict::Mismatch { expected, observed },
        }
    }

    /// Verdict for one ground-truth record.
    pub fn observe(&mut self, g: &GtRecord) -> RefVerdict {
        let len = if g.record.raw & 0b11 == 0b11 { 4 } else { 2 };
        match g.kind {
            Kind::Call => {
                self.push(g.record.pc + len);
                RefVerdict::Ok
            }
            Kind::Return => self.check(g.record.npc),
            Kind::Swap => {
                let v = self.check(g.record.npc);
                self.push(g.record.pc + len);
                v
            }
            Kind::Plain | Kind::Indirect => RefVerdict::Ok,
        }
    }
}

/// Indices and verdicts of every failing check, in trace order.
pub fn reference_violations(trace: &[GtRecord]) -> Vec<(usize, RefVerdict)> {
    let mut stack = RefShadowStack::default();
    trace
        .iter()
        .enumerate()
        .filter_map(|(i, g)| match stack.observe(g) {
            RefVerdict::Ok => None,
            v => Some((i, v)),
        })
        .collect()
}
