//! Shadow-stack workloads and tamper trials against the spill region.

use rand::seq::SliceRandom;
use rand::Rng;
use rot_cfi::policy::{MacKey, PopOutcome, ShadowStack, ShadowStackConfig, SpillMemory};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackOp {
    Push(u64),
    Pop,
}

/// Random push/pop mix biased toward growth so spills happen.
pub fn random_workload(rng: &mut impl Rng, len: usize) -> Vec<StackOp> {
    let mut next = 0x1000u64;
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.6) {
                next += 4;
                StackOp::Push(next)
            } else {
                StackOp::Pop
            }
        })
        .collect()
}

/// Pop results of `ops` on a stack with the given geometry.
pub fn replay(ops: &[StackOp], config: ShadowStackConfig, key_seed: u64) -> Vec<PopOutcome> {
    let mut stack = ShadowStack::new(config, MacKey::from_seed(key_seed)).expect("valid geometry");
    let mut mem = SpillMemory::new();
    let mut out = Vec::new();
    for op in ops {
        match *op {
            StackOp::Push(a) => stack.push(a, &mut mem).expect("unbounded spill region"),
            StackOp::Pop => out.push(stack.pop(&mut mem)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tamper {
    EntryBit,
    TagBit,
    FrameSwap,
    FrameReplay,
}

impl Tamper {
    pub const ALL: [Tamper; 4] = [
        Tamper::EntryBit,
        Tamper::TagBit,
        Tamper::FrameSwap,
        Tamper::FrameReplay,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialOutcome {
    pub tamper: Tamper,
    pub detected: bool,
    /// A popped value differed from the honest reference.
    pub consumed_corrupt: bool,
    pub frames_at_tamper: u64,
}

/// Builds a spilled stack, corrupts the spill region once, then drains.
pub fn tamper_trial(rng: &mut impl Rng, tamper: Tamper) -> TrialOutcome {
    let capacity = rng.gen_range(2..=8);
    let config = ShadowStackConfig {
        capacity,
        frame_size: rng.gen_range(1..=capacity),
    };
    let mut stack = ShadowStack::new(config, MacKey::from_seed(rng.gen())).expect("valid geometry");
    let mut mem = SpillMemory::new();
    let mut reference: Vec<u64> = Vec::new();
    let mut next = 0x8000u64;
    let mut push = |stack: &mut ShadowStack, mem: &mut SpillMemory, reference: &mut Vec<u64>| {
        next += 4;
        stack.push(next, mem).expect("unbounded spill region");
        reference.push(next);
    };

    let min_frames = if tamper == Tamper::FrameSwap { 2 } else { 1 };
    while stack.spilled_frames() < min_frames + rng.gen_range(0..3) {
        push(&mut stack, &mut mem, &mut reference);
        if rng.gen_bool(0.2) && stack.on_chip().len() > 1 {
            stack.pop(&mut mem);
            reference.pop();
        }
    }

    if tamper == Tamper::FrameReplay {
        // Capture the newest frame, pull it back on chip, consume one of its
        // entries, then push until the same slot is rewritten.
        let slot = stack.spilled_frames() as usize - 1;
        let stale = mem.frames()[slot].clone();
        while stack.spilled_frames() as usize > slot {
            assert!(matches!(stack.pop(&mut mem), PopOutcome::Value(_)));
            reference.pop();
        }
        while stack.spilled_frames() as usize <= slot {
            push(&mut stack, &mut mem, &mut reference);
        }
        assert_ne!(mem.frames()[slot], stale);
        mem.frames_mut()[slot] = stale;
    } else {
        let frames = mem.frames_mut();
        let slot = rng.gen_range(0..frames.len());
        match tamper {
            Tamper::EntryBit => {
                let e = rng.gen_range(0..frames[slot].entries.len());
                frames[slot].entries[e] ^= 1 << rng.gen_range(0..64);
            }
            Tamper::TagBit => {
                let b = rng.gen_range(0..frames[slot].tag.len());
                frames[slot].tag[b] ^= 1 << rng.gen_range(0..8);
            }
            Tamper::FrameSwap => {
                let mut slots: Vec<usize> = (0..frames.len()).collect();
                slots.shuffle(rng);
                frames.swap(slots[0], slots[1]);
            }
            Tamper::FrameReplay => unreachable!(),
        }
    }

    let frames_at_tamper = stack.spilled_frames();
    let mut outcome = TrialOutcome {
        tamper,
        detected: false,
        consumed_corrupt: false,
        frames_at_tamper,
    };
    loop {
        match stack.pop(&mut mem) {
            PopOutcome::Value(v) => {
                if reference.pop() != Some(v) {
                    outcome.consumed_corrupt = true;
                }
            }
            PopOutcome::Tampered(_) => {
                outcome.detected = true;
                return outcome;
            }
            PopOutcome::Underflow => return outcome,
        }
    }
}
