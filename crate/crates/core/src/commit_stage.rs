//! Host-side CFI hardware: per-port filters, the CFI queue with its stall
//! rules, and the log writer that moves queued logs into the mailbox.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::commit_log::{make_commit_log, CommitLog, COMMIT_LOG_BITS};
use crate::decode::{DecodeError, Xlen};
use crate::mailbox::{Mailbox, MailboxError};
use crate::trace::TraceRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StallReason {
    #[default]
    None,
    QueueFull,
    DualControlFlowCommit,
}

/// Bounded FIFO between the filters and the log writer.
#[derive(Debug, Clone)]
pub struct CfiQueue<T> {
    depth: usize,
    entries: VecDeque<T>,
}

impl<T> CfiQueue<T> {
    pub fn new(depth: usize) -> Self {
        assert!(depth > 0, "queue depth must be positive");
        Self {
            depth,
            entries: VecDeque::with_capacity(depth),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.depth
    }

    /// Appends when there is room. A full queue hands the item back; the
    /// caller stalls the commit stage with [`StallReason::QueueFull`].
    pub fn push(&mut self, item: T) -> Result<(), T> {
        if self.is_full() {
            return Err(item);
        }
        self.entries.push_back(item);
        Ok(())
    }

    pub fn pop(&mut self) -> Option<T> {
        self.entries.pop_front()
    }
}

/// Logs produced by one commit cycle, tagged with their port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutput {
    pub logs: Vec<(usize, CommitLog)>,
    pub stall: StallReason,
}

/// Runs both CFI filters over the records retired in one cycle. When both
/// ports retire control flow the second log has to wait a cycle.
pub fn filter_ports(records: &[TraceRecord], xlen: Xlen) -> Result<FilterOutput, DecodeError> {
    debug_assert!(records.len() <= crate::trace::COMMIT_PORTS);
    let mut logs = Vec::with_capacity(records.len());
    for (port, rec) in records.iter().enumerate() {
        if let Some(log) = make_commit_log(rec, xlen)? {
            logs.push((port, log));
        }
    }
    let stall = if logs.len() > 1 {
        StallReason::DualControlFlowCommit
    } else {
        StallReason::None
    };
    Ok(FilterOutput { logs, stall })
}

/// Bus transactions needed for one log.
pub fn transfer_beats(bus_width_bits: u32) -> u32 {
    COMMIT_LOG_BITS.div_ceil(bus_width_bits)
}

/// `(bit offset, width)` of each beat in the mailbox register image.
///
/// Wide buses cover the image in order. A 32-bit bus sends exactly the
/// seven payload words and skips the upper half of the encoding register,
/// which only carries the optional kind tag.
pub fn chunk_layout(bus_width_bits: u32) -> Vec<(u32, u32)> {
    let w = bus_width_bits;
    match w {
        32 => [0, 32, 64, 128, 160, 192, 224]
            .iter()
            .map(|&o| (o, 32))
            .collect(),
        _ => (0..transfer_beats(w)).map(|b| (b * w, w)).collect(),
    }
}

fn image_slice(image: &[u64; 4], offset: u32, width: u32) -> u128 {
    let lo = u128::from(image[(offset / 64) as usize]);
    let value = if width == 128 {
        lo | u128::from(image[(offset / 64) as usize + 1]) << 64
    } else {
        lo >> (offset % 64)
    };
    if width == 128 {
        value
    } else {
        value & ((1u128 << width) - 1)
    }
}

/// A log in flight, remembered with the trace record it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueuedLog {
    pub log: CommitLog,
    pub trace_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogWriterState {
    Idle,
    Transfer {
        beats_remaining: u32,
        next_beat_at: u64,
    },
    WaitCompletion,
    ReadResult,
}

/// What one call to [`LogWriter::step`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriterEvent {
    Popped(QueuedLog),
    BeatWritten {
        beat: u32,
    },
    DoorbellRung,
    CompletionSeen,
    /// The check for `entry` finished. A violation raises the CFI exception.
    Verdict {
        entry: QueuedLog,
        violation: bool,
    },
}

/// Raised by the log writer when the RoT flags an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CfiViolation {
    pub entry: QueuedLog,
    pub cycle: u64,
}

#[derive(Debug, Clone)]
pub struct LogWriter {
    state: LogWriterState,
    layout: Vec<(u32, u32)>,
    transfer_cost_per_beat: u64,
    current: Option<QueuedLog>,
    image: [u64; 4],
}

impl LogWriter {
    pub fn new(bus_width_bits: u32, transfer_cost_per_beat: u64) -> Self {
        Self {
            state: LogWriterState::Idle,
            layout: chunk_layout(bus_width_bits),
            transfer_cost_per_beat,
            current: None,
            image: [0; 4],
        }
    }

    pub fn state(&self) -> LogWriterState {
        self.state
    }

    pub fn beats(&self) -> u32 {
        self.layout.len() as u32
    }

    pub fn is_idle(&self) -> bool {
        self.state == LogWriterState::Idle
    }

    pub fn current(&self) -> Option<&QueuedLog> {
        self.current.as_ref()
    }

    /// Earliest future cycle at which the writer acts on its own.
    pub fn next_event(&self, now: u64) -> Option<u64> {
        match self.state {
            LogWriterState::Transfer { next_beat_at, .. } if next_beat_at > now => {
                Some(next_beat_at)
            }
            _ => None,
        }
    }

    /// Performs at most one state transition. `Ok(None)` means the writer
    /// is blocked for the rest of this cycle.
    pub fn step(
        &mut self,
        now: u64,
        queue: &mut CfiQueue<QueuedLog>,
        mailbox: &mut Mailbox,
    ) -> Result<Option<WriterEvent>, MailboxError> {
        match self.state {
            LogWriterState::Idle => {
                if !mailbox.ready() {
                    return Ok(None);
                }
                let Some(entry) = queue.pop() else {
                    return Ok(None);
                };
                self.image = entry.log.pack();
                self.current = Some(entry);
                self.state = LogWriterState::Transfer {
                    beats_remaining: self.beats(),
                    next_beat_at: now + self.transfer_cost_per_beat,
                };
                Ok(Some(WriterEvent::Popped(entry)))
            }
            LogWriterState::Transfer {
                beats_remaining,
                next_beat_at,
            } => {
                if now < next_beat_at {
                    return Ok(None);
                }
                let beat = self.beats() - beats_remaining;
                let (offset, width) = self.layout[beat as usize];
                let is_last = beats_remaining == 1;
                mailbox.write_slice(
                    offset,
                    width,
                    image_slice(&self.image, offset, width),
                    is_last,
                    now,
                )?;
                if is_last {
                    self.state = LogWriterState::WaitCompletion;
                    Ok(Some(WriterEvent::DoorbellRung))
                } else {
                    self.state = LogWriterState::Transfer {
                        beats_remaining: beats_remaining - 1,
                        next_beat_at: now + self.transfer_cost_per_beat,
                    };
                    Ok(Some(WriterEvent::BeatWritten { beat }))
                }
            }
            LogWriterState::WaitCompletion => {
                if !mailbox.completion() {
                    return Ok(None);
                }
                self.state = LogWriterState::ReadResult;
                Ok(Some(WriterEvent::CompletionSeen))
            }
            LogWriterState::ReadResult => {
                let violation = mailbox.host_read_result(now)?;
                let entry = self
                    .current
                    .take()
                    .expect("a log is in flight while reading a result");
                self.state = LogWriterState::Idle;
                Ok(Some(WriterEvent::Verdict { entry, violation }))
            }
        }
    }
}
