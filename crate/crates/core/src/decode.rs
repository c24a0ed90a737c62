//! Instruction length, RVC expansion and control-flow classification.
//!
//! Only the parts of the RISC-V encoding space that matter for control-flow
//! monitoring are decoded. Compressed instructions outside the jump forms are
//! left unexpanded: they can never produce a commit log.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const OPCODE_JAL: u32 = 0b110_1111;
const OPCODE_JALR: u32 = 0b110_0111;

/// Base integer width of the traced hart. Selects the meaning of the
/// quadrant-1 `funct3 = 001` slot (`c.jal` on RV32, `c.addiw` on RV64).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Xlen {
    #[serde(rename = "32")]
    Rv32,
    #[default]
    #[serde(rename = "64")]
    Rv64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlFlowKind {
    Call,
    Return,
    IndirectJump,
    CoroutineSwap,
    NotControlFlow,
}

impl ControlFlowKind {
    pub const MONITORED: [ControlFlowKind; 4] = [
        ControlFlowKind::Call,
        ControlFlowKind::Return,
        ControlFlowKind::IndirectJump,
        ControlFlowKind::CoroutineSwap,
    ];

    pub fn is_monitored(self) -> bool {
        self != ControlFlowKind::NotControlFlow
    }

    /// 4-bit tag stored next to the encoding in the mailbox image.
    pub fn tag(self) -> u8 {
        match self {
            ControlFlowKind::NotControlFlow => 0,
            ControlFlowKind::Call => 1,
            ControlFlowKind::Return => 2,
            ControlFlowKind::IndirectJump => 3,
            ControlFlowKind::CoroutineSwap => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ControlFlowKind::NotControlFlow,
            1 => ControlFlowKind::Call,
            2 => ControlFlowKind::Return,
            3 => ControlFlowKind::IndirectJump,
            4 => ControlFlowKind::CoroutineSwap,
            _ => return None,
        })
    }
}

impl fmt::Display for ControlFlowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlFlowKind::Call => "call",
            ControlFlowKind::Return => "return",
            ControlFlowKind::IndirectJump => "indirect-jump",
            ControlFlowKind::CoroutineSwap => "coroutine-swap",
            ControlFlowKind::NotControlFlow => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("illegal compressed instruction {0:#06x}")]
    Illegal(u16),
    #[error("reserved compressed encoding {0:#06x}")]
    Reserved(u16),
}

/// Returns 2 for compressed encodings, 4 otherwise.
pub fn instruction_length(raw: u32) -> u64 {
    if raw & 0b11 == 0b11 {
        4
    } else {
        2
    }
}

pub fn is_compressed(raw: u32) -> bool {
    instruction_length(raw) == 2
}

fn is_link(reg: u32) -> bool {
    reg == 1 || reg == 5
}

/// Classifies a 32-bit encoding using the link-register hint convention.
///
/// `jalr` with the same link register as destination and source is a plain
/// push (the tail of `auipc ra; jalr ra`), so it classifies as a call.
pub fn classify(encoding: u32) -> ControlFlowKind {
    let rd = (encoding >> 7) & 0x1f;
    match encoding & 0x7f {
        OPCODE_JAL if is_link(rd) => ControlFlowKind::Call,
        OPCODE_JALR if (encoding >> 12) & 0x7 == 0 => {
            let rs1 = (encoding >> 15) & 0x1f;
            match (is_link(rd), is_link(rs1)) {
                (true, true) if rd == rs1 => ControlFlowKind::Call,
                (true, true) => ControlFlowKind::CoroutineSwap,
                (true, false) => ControlFlowKind::Call,
                (false, true) => ControlFlowKind::Return,
                (false, false) => ControlFlowKind::IndirectJump,
            }
        }
        _ => ControlFlowKind::NotControlFlow,
    }
}

/// Expands the compressed jump forms (`c.j`, `c.jal`, `c.jr`, `c.jalr`) to
/// their 32-bit equivalents.
///
/// Returns `Ok(None)` for every other compressed instruction, which cannot be
/// a monitored control transfer. The all-zero parcel and `c.jr x0` are
/// rejected.
pub fn expand_compressed(raw: u16, xlen: Xlen) -> Result<Option<u32>, DecodeError> {
    if raw == 0 {
        return Err(DecodeError::Illegal(raw));
    }
    let raw32 = u32::from(raw);
    let funct3 = (raw32 >> 13) & 0x7;
    match raw32 & 0b11 {
        0b01 => match funct3 {
            0b101 => Ok(Some(encode_jal(0, cj_offset(raw)))),
            0b001 if xlen == Xlen::Rv32 => Ok(Some(encode_jal(1, cj_offset(raw)))),
            _ => Ok(None),
        },
        0b10 if funct3 == 0b100 => {
            let bit12 = (raw32 >> 12) & 1;
            let rs1 = (raw32 >> 7) & 0x1f;
            let rs2 = (raw32 >> 2) & 0x1f;
            match (bit12, rs1, rs2) {
                (0, 0, 0) => Err(DecodeError::Reserved(raw)),
                (0, rs1, 0) => Ok(Some(encode_jalr(0, rs1, 0))),
                // c.ebreak
                (1, 0, 0) => Ok(None),
                (1, rs1, 0) => Ok(Some(encode_jalr(1, rs1, 0))),
                // c.mv / c.add
                _ => Ok(None),
            }
        }
        _ => Ok(None),
    }
}

/// Sign-extended byte offset of a CJ-format instruction.
fn cj_offset(raw: u16) -> i32 {
    let r = u32::from(raw);
    let imm = ((r >> 12) & 1) << 11
        | ((r >> 11) & 1) << 4
        | ((r >> 9) & 0b11) << 8
        | ((r >> 8) & 1) << 10
        | ((r >> 7) & 1) << 6
        | ((r >> 6) & 1) << 7
        | ((r >> 3) & 0b111) << 1
        | ((r >> 2) & 1) << 5;
    ((imm << 20) as i32) >> 20
}

/// `jal rd, offset`. The offset must be even and fit in 21 signed bits.
pub fn encode_jal(rd: u32, offset: i32) -> u32 {
    debug_assert!(offset % 2 == 0 && (-(1 << 20)..(1 << 20)).contains(&offset));
    let imm = offset as u32;
    ((imm >> 20) & 1) << 31
        | ((imm >> 1) & 0x3ff) << 21
        | ((imm >> 11) & 1) << 20
        | ((imm >> 12) & 0xff) << 12
        | (rd & 0x1f) << 7
        | OPCODE_JAL
}

/// `jalr rd, offset(rs1)` with a 12-bit signed offset.
pub fn encode_jalr(rd: u32, rs1: u32, offset: i32) -> u32 {
    debug_assert!((-2048..2048).contains(&offset));
    ((offset as u32) & 0xfff) << 20 | (rs1 & 0x1f) << 15 | (rd & 0x1f) << 7 | OPCODE_JALR
}

/// Expands `raw` if compressed and classifies the result. Returns the 32-bit
/// encoding the commit log would carry together with its kind.
pub fn decode(raw: u32, xlen: Xlen) -> Result<(u32, ControlFlowKind), DecodeError> {
    if is_compressed(raw) {
        match expand_compressed(raw as u16, xlen)? {
            Some(expanded) => Ok((expanded, classify(expanded))),
            None => Ok((raw, ControlFlowKind::NotControlFlow)),
        }
    } else {
        Ok((raw, classify(raw)))
    }
}
