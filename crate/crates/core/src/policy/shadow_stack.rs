//! Shadow stack with bounded on-chip storage.
//!
//! When the private storage is full, the oldest `frame_size` entries are
//! moved to untrusted main memory under a chained tag. The chain head never
//! leaves the stack, so any change to a spilled frame, its tag, its position
//! or its freshness is caught when the frame comes back.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::mac::{MacKey, Tag, GENESIS_TAG};
use super::CheckDetail;
use crate::commit_log::CommitLog;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShadowStackConfig {
    /// On-chip entries.
    pub capacity: usize,
    /// Entries moved per spill.
    pub frame_size: usize,
}

impl Default for ShadowStackConfig {
    fn default() -> Self {
        Self::with_capacity(1024)
    }
}

impl ShadowStackConfig {
    /// Half-stack spills.
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity,
            frame_size: (capacity / 2).max(1),
        }
    }

    /// Never spills.
    pub fn unbounded() -> Self {
        Self {
            capacity: usize::MAX,
            frame_size: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SpillError> {
        if self.capacity == 0 || self.frame_size == 0 || self.frame_size > self.capacity {
            return Err(SpillError::BadConfig(*self));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpillFrame {
    pub entries: Vec<u64>,
    pub frame_index: u64,
    pub tag: Tag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum SpillError {
    #[error("spill region exhausted after {0} frames")]
    Exhausted(usize),
    #[error("invalid shadow stack geometry {0:?}")]
    BadConfig(ShadowStackConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("spilled frame {frame_index} failed authentication")]
pub struct TamperDetected {
    pub frame_index: u64,
}

/// Untrusted main-memory region receiving spilled frames. Slot `i` holds
/// frame `i`. Everything here is attacker-writable.
#[derive(Debug, Clone, Default)]
pub struct SpillMemory {
    frames: Vec<SpillFrame>,
    capacity: Option<usize>,
}

impl SpillMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(frames: usize) -> Self {
        Self {
            frames: Vec::new(),
            capacity: Some(frames),
        }
    }

    pub fn frames(&self) -> &[SpillFrame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut Vec<SpillFrame> {
        &mut self.frames
    }

    fn has_room(&self, slot: usize) -> bool {
        self.capacity.is_none_or(|cap| slot < cap)
    }

    fn store(&mut self, slot: usize, frame: SpillFrame) {
        self.frames.truncate(slot);
        self.frames.push(frame);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopOutcome {
    Value(u64),
    Underflow,
    Tampered(TamperDetected),
}

#[derive(Debug, Clone)]
pub struct ShadowStack {
    config: ShadowStackConfig,
    on_chip: Vec<u64>,
    spilled_frames: u64,
    chain_tag: Tag,
    key: MacKey,
}

impl ShadowStack {
    pub fn new(config: ShadowStackConfig, key: MacKey) -> Result<Self, SpillError> {
        config.validate()?;
        Ok(Self {
            config,
            on_chip: Vec::new(),
            spilled_frames: 0,
            chain_tag: GENESIS_TAG,
            key,
        })
    }

    pub fn config(&self) -> ShadowStackConfig {
        self.config
    }

    pub fn on_chip(&self) -> &[u64] {
        &self.on_chip
    }

    pub fn spilled_frames(&self) -> u64 {
        self.spilled_frames
    }

    pub fn chain_tag(&self) -> &Tag {
        &self.chain_tag
    }

    /// Entries on chip plus entries held in spilled frames.
    pub fn depth(&self) -> u64 {
        self.on_chip.len() as u64 + self.spilled_frames * self.config.frame_size as u64
    }

    pub fn top(&self) -> Option<u64> {
        self.on_chip.last().copied()
    }

    /// Moves the oldest `frame_size` on-chip entries to `mem`.
    pub fn spill_frame(&mut self, mem: &mut SpillMemory) -> Result<(), SpillError> {
        let slot = self.spilled_frames as usize;
        if !mem.has_room(slot) {
            return Err(SpillError::Exhausted(slot));
        }
        debug_assert!(self.on_chip.len() >= self.config.frame_size);
        let entries: Vec<u64> = self.on_chip.drain(..self.config.frame_size).collect();
        let frame_index = self.spilled_frames;
        let tag = self.key.frame_tag(&entries, frame_index, &self.chain_tag);
        mem.store(
            slot,
            SpillFrame {
                entries,
                frame_index,
                tag,
            },
        );
        self.chain_tag = tag;
        self.spilled_frames += 1;
        Ok(())
    }

    /// Brings the most recent frame back on chip after verifying it against
    /// the private chain head. On failure the spilled history is dropped.
    pub fn restore_frame(&mut self, mem: &mut SpillMemory) -> Result<(), TamperDetected> {
        debug_assert!(self.on_chip.is_empty() && self.spilled_frames > 0);
        let frame_index = self.spilled_frames - 1;
        let slot = frame_index as usize;
        let verified = self.verify_slot(mem, slot, frame_index);
        match verified {
            Some(prev) => {
                let frame = &mem.frames[slot];
                self.on_chip.extend_from_slice(&frame.entries);
                mem.frames.truncate(slot);
                self.chain_tag = prev;
                self.spilled_frames -= 1;
                Ok(())
            }
            None => {
                mem.frames.clear();
                self.spilled_frames = 0;
                self.chain_tag = GENESIS_TAG;
                Err(TamperDetected { frame_index })
            }
        }
    }

    /// Returns the authenticated previous chain tag when the frame in `slot`
    /// is genuine and current.
    fn verify_slot(&self, mem: &SpillMemory, slot: usize, frame_index: u64) -> Option<Tag> {
        let frame = mem.frames.get(slot)?;
        let prev = if slot == 0 {
            GENESIS_TAG
        } else {
            mem.frames.get(slot - 1)?.tag
        };
        let genuine = frame.frame_index == frame_index
            && frame.entries.len() == self.config.frame_size
            && self
                .key
                .verify(&frame.entries, frame_index, &prev, &self.chain_tag)
            && self
                .key
                .verify(&frame.entries, frame_index, &prev, &frame.tag);
        genuine.then_some(prev)
    }

    pub fn push(&mut self, addr: u64, mem: &mut SpillMemory) -> Result<(), SpillError> {
        if self.on_chip.len() == self.config.capacity {
            self.spill_frame(mem)?;
        }
        self.on_chip.push(addr);
        Ok(())
    }

    pub fn pop(&mut self, mem: &mut SpillMemory) -> PopOutcome {
        if self.on_chip.is_empty() {
            if self.spilled_frames == 0 {
                return PopOutcome::Underflow;
            }
            if let Err(t) = self.restore_frame(mem) {
                return PopOutcome::Tampered(t);
            }
        }
        match self.on_chip.pop() {
            Some(v) => PopOutcome::Value(v),
            None => PopOutcome::Underflow,
        }
    }

    /// Pushes the fall-through address.
    pub fn on_call(&mut self, log: &CommitLog, mem: &mut SpillMemory) -> Result<(), SpillError> {
        self.push(log.next_addr, mem)
    }

    /// Pops and compares against the observed target.
    pub fn on_return(&mut self, log: &CommitLog, mem: &mut SpillMemory) -> CheckDetail {
        match self.pop(mem) {
            PopOutcome::Value(expected) if expected == log.target_addr => CheckDetail::Ok,
            PopOutcome::Value(expected) => CheckDetail::ReturnMismatch {
                expected,
                observed: log.target_addr,
            },
            PopOutcome::Underflow => CheckDetail::StackUnderflow,
            PopOutcome::Tampered(t) => CheckDetail::TamperDetected {
                frame_index: t.frame_index,
            },
        }
    }
}
