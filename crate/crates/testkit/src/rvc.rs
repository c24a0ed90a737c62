//! Frozen reference-disassembler sweep of the compressed jump encodings.

use rot_cfi::{ControlFlowKind, Xlen};

const CSV: &str = include_str!("../../core/tests/data/rvc_oracle.csv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RvcRow {
    pub xlen: Xlen,
    pub raw: u16,
    pub mnemonic: String,
    pub expanded: u32,
    pub kind: ControlFlowKind,
}

fn hex(field: &str) -> u64 {
    u64::from_str_radix(field.trim_start_matches("0x"), 16).expect("hex field")
}

pub fn rows() -> Vec<RvcRow> {
    let mut lines = CSV.lines();
    assert_eq!(lines.next(), Some("xlen,raw16,mnemonic,expanded32,kind"));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            RvcRow {
                xlen: match f[0] {
                    "32" => Xlen::Rv32,
                    "64" => Xlen::Rv64,
                    other => panic!("bad xlen {other}"),
                },
                raw: hex(f[1]) as u16,
                mnemonic: f[2].to_owned(),
                expanded: hex(f[3]) as u32,
                kind: match f[4] {
                    "Call" => ControlFlowKind::Call,
                    "Return" => ControlFlowKind::Return,
                    "IndirectJump" => ControlFlowKind::IndirectJump,
                    "CoroutineSwap" => ControlFlowKind::CoroutineSwap,
                    "NotControlFlow" => ControlFlowKind::NotControlFlow,
                    other => panic!("bad kind {other}"),
                },
            }
        })
        .collect()
}
