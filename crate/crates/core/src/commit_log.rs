use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{self, instruction_length, ControlFlowKind, DecodeError, Xlen};
use crate::trace::TraceRecord;

/// Architectural payload width: pc, encoding, next and target address.
pub const COMMIT_LOG_BITS: u32 = 64 + 32 + 64 + 64;

/// Metadata for one retired control-flow instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CommitLog {
    pub pc: u64,
    /// Uncompressed encoding.
    pub encoding: u32,
    /// Fall-through address, `pc` plus the instruction length.
    pub next_addr: u64,
    /// Where control actually went.
    pub target_addr: u64,
    pub kind: ControlFlowKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum UnpackError {
    #[error("unknown kind tag {0}")]
    UnknownKind(u8),
    #[error("kind tag says {tagged} but the encoding decodes as {decoded}")]
    KindMismatch {
        tagged: ControlFlowKind,
        decoded: ControlFlowKind,
    },
    #[error("encoding {0:#010x} is not a monitored control-flow instruction")]
    NotControlFlow(u32),
}

impl CommitLog {
    /// Mailbox register image: `[pc, encoding | tag << 32, next_addr, target_addr]`.
    pub fn pack(&self) -> [u64; 4] {
        [
            self.pc,
            u64::from(self.encoding) | u64::from(self.kind.tag()) << 32,
            self.next_addr,
            self.target_addr,
        ]
    }

    /// Rebuilds a log from a register image. The kind comes from decoding the
    /// encoding; a non-zero tag must agree with it.
    pub fn unpack(words: &[u64; 4]) -> Result<Self, UnpackError> {
        let encoding = words[1] as u32;
        let tag = ((words[1] >> 32) & 0xf) as u8;
        let decoded = decode::classify(encoding);
        if !decoded.is_monitored() {
            return Err(UnpackError::NotControlFlow(encoding));
        }
        if tag != 0 {
            let tagged = ControlFlowKind::from_tag(tag).ok_or(UnpackError::UnknownKind(tag))?;
            if tagged != decoded {
                return Err(UnpackError::KindMismatch { tagged, decoded });
            }
        }
        Ok(CommitLog {
            pc: words[0],
            encoding,
            next_addr: words[2],
            target_addr: words[3],
            kind: decoded,
        })
    }
}

/// Filters one retired instruction. `None` when it is not monitored.
pub fn make_commit_log(rec: &TraceRecord, xlen: Xlen) -> Result<Option<CommitLog>, DecodeError> {
    let (encoding, kind) = decode::decode(rec.raw, xlen)?;
    if !kind.is_monitored() {
        return Ok(None);
    }
    Ok(Some(CommitLog {
        pc: rec.pc,
        encoding,
        next_addr: rec.pc.wrapping_add(instruction_length(rec.raw)),
        target_addr: rec.npc,
        kind,
    }))
}
