//! CFI mailbox shared between the host commit stage and the RoT.
//!
//! Four 64-bit data registers hold one commit log. The host writes the log
//! in bus-width chunks; the final chunk raises the doorbell. The RoT reads
//! the log, writes the verdict into `data[0]` and raises completion, which
//! the host consumes before it may write the next log.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commit_log::{CommitLog, UnpackError};

pub const MAILBOX_WORDS: usize = 4;
pub const MAILBOX_BITS: u32 = 64 * MAILBOX_WORDS as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MailboxEventKind {
    ChunkWrite { beat: u32 },
    Doorbell,
    RotRead,
    RotWriteResult { violation: bool },
    Completion,
    HostRead { violation: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailboxEvent {
    pub cycle: u64,
    #[serde(flatten)]
    pub kind: MailboxEventKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MailboxError {
    #[error("chunk write while a check is pending")]
    WriteWhilePending,
    #[error("chunk [{offset}, +{width}) does not fit the data registers")]
    BadChunk { offset: u32, width: u32 },
    #[error("RoT read without a pending doorbell")]
    ReadWithoutDoorbell,
    #[error("RoT result written without a log having been read")]
    ResultWithoutRead,
    #[error("host read without completion")]
    ReadWithoutCompletion,
    #[error("mailbox holds an invalid log: {0}")]
    Unpack(#[from] UnpackError),
}

#[derive(Debug, Clone)]
pub struct Mailbox {
    data: [u64; MAILBOX_WORDS],
    doorbell: bool,
    completion: bool,
    ready: bool,
    transfer_open: bool,
    awaiting_result: bool,
    beat: u32,
    events: Vec<MailboxEvent>,
}

impl Default for Mailbox {
    fn default() -> Self {
        Self::new()
    }
}

impl Mailbox {
    pub fn new() -> Self {
        Self {
            data: [0; MAILBOX_WORDS],
            doorbell: false,
            completion: false,
            ready: true,
            transfer_open: false,
            awaiting_result: false,
            beat: 0,
            events: Vec::new(),
        }
    }

    pub fn data(&self) -> &[u64; MAILBOX_WORDS] {
        &self.data
    }

    pub fn doorbell(&self) -> bool {
        self.doorbell
    }

    pub fn completion(&self) -> bool {
        self.completion
    }

    /// Host may start writing the next log.
    pub fn ready(&self) -> bool {
        self.ready
    }

    pub fn events(&self) -> &[MailboxEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<MailboxEvent> {
        std::mem::take(&mut self.events)
    }

    fn log(&mut self, cycle: u64, kind: MailboxEventKind) {
        self.events.push(MailboxEvent { cycle, kind });
    }

    fn begin_chunk(&mut self) -> Result<(), MailboxError> {
        if self.doorbell || self.completion || !(self.ready || self.transfer_open) {
            return Err(MailboxError::WriteWhilePending);
        }
        if self.ready {
            self.ready = false;
            self.transfer_open = true;
            self.beat = 0;
            self.data = [0; MAILBOX_WORDS];
        }
        Ok(())
    }

    fn finish_chunk(&mut self, is_last: bool, cycle: u64) {
        let beat = self.beat;
        self.beat += 1;
        self.log(cycle, MailboxEventKind::ChunkWrite { beat });
        if is_last {
            self.transfer_open = false;
            self.doorbell = true;
            self.log(cycle, MailboxEventKind::Doorbell);
        }
    }

    /// Writes one 64-bit data register.
    pub fn write_chunk(
        &mut self,
        index: usize,
        value: u64,
        is_last: bool,
        cycle: u64,
    ) -> Result<(), MailboxError> {
        if index >= MAILBOX_WORDS {
            return Err(MailboxError::BadChunk {
                offset: index as u32 * 64,
                width: 64,
            });
        }
        self.begin_chunk()?;
        self.data[index] = value;
        self.finish_chunk(is_last, cycle);
        Ok(())
    }

    /// Writes `width` bits (32, 64 or 128, naturally aligned) at bit `offset`
    /// of the register file, least significant word first.
    pub fn write_slice(
        &mut self,
        offset: u32,
        width: u32,
        value: u128,
        is_last: bool,
        cycle: u64,
    ) -> Result<(), MailboxError> {
        let aligned = matches!(width, 32 | 64 | 128) && offset.is_multiple_of(width);
        if !aligned || offset + width > MAILBOX_BITS {
            return Err(MailboxError::BadChunk { offset, width });
        }
        self.begin_chunk()?;
        let mut bit = offset;
        while bit < offset + width {
            let word = (bit / 64) as usize;
            let shift = bit % 64;
            let take = (64 - shift).min(offset + width - bit);
            let mask = if take == 64 {
                u64::MAX
            } else {
                ((1u64 << take) - 1) << shift
            };
            let part = ((value >> (bit - offset)) as u64) << shift;
            self.data[word] = (self.data[word] & !mask) | (part & mask);
            bit += take;
        }
        self.finish_chunk(is_last, cycle);
        Ok(())
    }

    /// RoT side: acknowledge the doorbell and fetch the log.
    pub fn rot_read_log(&mut self, cycle: u64) -> Result<CommitLog, MailboxError> {
        if !self.doorbell {
            return Err(MailboxError::ReadWithoutDoorbell);
        }
        self.doorbell = false;
        self.awaiting_result = true;
        self.log(cycle, MailboxEventKind::RotRead);
        Ok(CommitLog::unpack(&self.data)?)
    }

    /// RoT side: publish the verdict and raise completion.
    pub fn rot_write_result(&mut self, violation: bool, cycle: u64) -> Result<(), MailboxError> {
        if !self.awaiting_result {
            return Err(MailboxError::ResultWithoutRead);
        }
        self.awaiting_result = false;
        self.data[0] = u64::from(violation);
        self.log(cycle, MailboxEventKind::RotWriteResult { violation });
        self.completion = true;
        self.log(cycle, MailboxEventKind::Completion);
        Ok(())
    }

    /// Host side: consume completion and read the verdict.
    pub fn host_read_result(&mut self, cycle: u64) -> Result<bool, MailboxError> {
        if !self.completion {
            return Err(MailboxError::ReadWithoutCompletion);
        }
        let violation = self.data[0] != 0;
        self.completion = false;
        self.ready = true;
        self.log(cycle, MailboxEventKind::HostRead { violation });
        Ok(violation)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("mailbox event {index} at cycle {cycle}: expected {expected}, saw {seen:?}")]
pub struct ProtocolViolation {
    pub index: usize,
    pub cycle: u64,
    pub expected: &'static str,
    pub seen: Option<MailboxEventKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProtocolSummary {
    pub doorbells: u64,
    pub completed_checks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Expect {
    Chunk(u32),
    RotRead,
    RotWriteResult,
    Completion,
    HostRead,
}

/// Checks an event stream against
/// `(chunk{beats}, doorbell, rot-read, rot-write-result, completion, host-read)*`.
#[derive(Debug, Clone)]
pub struct ProtocolMonitor {
    beats: u32,
    expect: Expect,
    doorbell_pending: bool,
    verdict: Option<bool>,
    seen: usize,
    summary: ProtocolSummary,
}

impl ProtocolMonitor {
    pub fn new(beats: u32) -> Self {
        assert!(beats > 0);
        Self {
            beats,
            expect: Expect::Chunk(0),
            doorbell_pending: false,
            verdict: None,
            seen: 0,
            summary: ProtocolSummary::default(),
        }
    }

    fn expected(&self) -> &'static str {
        match self.expect {
            Expect::Chunk(0) => "first chunk write",
            Expect::Chunk(_) if self.doorbell_pending => "doorbell",
            Expect::Chunk(_) => "next chunk write",
            Expect::RotRead => "rot read",
            Expect::RotWriteResult => "rot write result",
            Expect::Completion => "completion",
            Expect::HostRead => "host read",
        }
    }

    pub fn observe(&mut self, event: &MailboxEvent) -> Result<(), ProtocolViolation> {
        use MailboxEventKind as K;
        let next = match (self.expect, event.kind) {
            (Expect::Chunk(n), K::ChunkWrite { beat }) if !self.doorbell_pending && beat == n => {
                if n + 1 == self.beats {
                    self.doorbell_pending = true;
                }
                Some(Expect::Chunk(n + 1))
            }
            (Expect::Chunk(_), K::Doorbell) if self.doorbell_pending => {
                self.doorbell_pending = false;
                self.summary.doorbells += 1;
                Some(Expect::RotRead)
            }
            (Expect::RotRead, K::RotRead) => Some(Expect::RotWriteResult),
            (Expect::RotWriteResult, K::RotWriteResult { violation }) => {
                self.verdict = Some(violation);
                Some(Expect::Completion)
            }
            (Expect::Completion, K::Completion) => Some(Expect::HostRead),
            (Expect::HostRead, K::HostRead { violation }) if self.verdict == Some(violation) => {
                self.verdict = None;
                self.summary.completed_checks += 1;
                Some(Expect::Chunk(0))
            }
            _ => None,
        };
        match next {
            Some(next) => {
                self.expect = next;
                self.seen += 1;
                Ok(())
            }
            None => Err(ProtocolViolation {
                index: self.seen,
                cycle: event.cycle,
                expected: self.expected(),
                seen: Some(event.kind),
            }),
        }
    }

    /// True when the stream stopped between two complete exchanges.
    pub fn is_quiescent(&self) -> bool {
        self.expect == Expect::Chunk(0)
    }

    pub fn summary(&self) -> ProtocolSummary {
        self.summary
    }

    /// Requires the stream to end on an exchange boundary.
    pub fn finish(self) -> Result<ProtocolSummary, ProtocolViolation> {
        if self.is_quiescent() {
            Ok(self.summary)
        } else {
            Err(ProtocolViolation {
                index: self.seen,
                cycle: u64::MAX,
                expected: self.expected(),
                seen: None,
            })
        }
    }

    pub fn check(
        events: &[MailboxEvent],
        beats: u32,
    ) -> Result<ProtocolSummary, ProtocolViolation> {
        let mut monitor = Self::new(beats);
        for event in events {
            monitor.observe(event)?;
        }
        monitor.finish()
    }
}
