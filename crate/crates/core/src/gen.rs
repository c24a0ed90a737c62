//! Synthetic trace generators, looked up by name.
//!
//! Every generator emits a parseable trace whose returns land on the
//! address pushed by the matching call, except `burst`, which is a stream of
//! bare returns meant for timing studies.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{decode, encode_jal, encode_jalr, instruction_length, ControlFlowKind, Xlen};
use crate::trace::TraceRecord;

const RA: u32 = 1;
const T0: u32 = 5;
const T1: u32 = 6;
const ADDI: u32 = 0x0000_0013;
const C_NOP: u32 = 0x0001;
const RET: u32 = 0x0000_8067;
const C_RET: u32 = 0x8082;
/// `c.jalr t1`
const C_JALR_T1: u32 = 0x9302;
/// `c.jr t1`
const C_JR_T1: u32 = 0x8302;
const JAL_RANGE: i64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenError {
    #[error("unknown generator `{0}`")]
    Unknown(String),
    #[error("{0}")]
    Param(String),
}

/// Knobs shared by all generators; each reads the ones it needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub n: u64,
    pub depth: u32,
    pub width: u32,
    /// Cycle spacing. For `random` the largest idle gap.
    pub gap: u64,
    pub seed: u64,
    /// Percent of records that are control flow (`random`).
    pub density: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            n: 100,
            depth: 3,
            width: 2,
            gap: 1,
            seed: 0,
            density: 25,
        }
    }
}

pub trait TraceGenerator: Send + Sync {
    fn name(&self) -> &'static str;
    fn summary(&self) -> &'static str;
    fn generate(&self, params: &GenParams) -> Result<Vec<TraceRecord>, GenError>;
}

fn param(ok: bool, msg: impl FnOnce() -> String) -> Result<(), GenError> {
    if ok {
        Ok(())
    } else {
        Err(GenError::Param(msg()))
    }
}

/// Call encoding from `pc` to `target`: `jal ra` when in range, else an
/// indirect `jalr ra, 0(t1)`.
fn call_to(pc: u64, target: u64) -> u32 {
    let offset = target as i64 - pc as i64;
    if (-JAL_RANGE..JAL_RANGE).contains(&offset) {
        encode_jal(RA, offset as i32)
    } else {
        encode_jalr(RA, T1, 0)
    }
}

/// Appends records at a fixed cycle spacing, linking each `npc` to the
/// following record's `pc`.
struct Emitter {
    records: Vec<TraceRecord>,
    cycle: u64,
    gap: u64,
}

impl Emitter {
    fn new(start: u64, gap: u64) -> Self {
        Self {
            records: Vec::new(),
            cycle: start,
            gap,
        }
    }

    fn emit(&mut self, pc: u64, raw: u32, npc: u64) {
        self.records.push(TraceRecord {
            cycle: self.cycle,
            pc,
            raw,
            npc,
        });
        self.cycle += self.gap;
    }
}

/// Complete call tree: every function calls `width` children down to
/// `depth` levels, so it makes `width + width² + … + width^depth` calls.
pub struct Balanced;

impl Balanced {
    const BASE: u64 = 0x1_0000;

    /// Entry filler, one slot per child call, then the return.
    fn frame_bytes(width: u32) -> u64 {
        4 * (u64::from(width) + 2)
    }

    fn walk(
        out: &mut Emitter,
        next_id: &mut u64,
        width: u32,
        levels: u32,
        entry: u64,
        ret_to: Option<u64>,
    ) {
        let frame = Self::frame_bytes(width);
        let children = if levels == 0 { 0 } else { u64::from(width) };
        let first_child = *next_id;
        *next_id += children;
        let mut pc = entry;
        out.emit(pc, ADDI, pc + 4);
        pc += 4;
        for child in first_child..first_child + children {
            let callee = Self::BASE + child * frame;
            out.emit(pc, call_to(pc, callee), callee);
            Self::walk(out, next_id, width, levels - 1, callee, Some(pc + 4));
            pc += 4;
        }
        match ret_to {
            Some(addr) => out.emit(pc, RET, addr),
            None => out.emit(pc, ADDI, pc + 4),
        }
    }
}

impl TraceGenerator for Balanced {
    fn name(&self) -> &'static str {
        "balanced"
    }

    fn summary(&self) -> &'static str {
        "well-nested call tree (--depth, --width, --gap)"
    }

    fn generate(&self, p: &GenParams) -> Result<Vec<TraceRecord>, GenError> {
        param(p.width >= 1 && p.width <= 64, || {
            format!("width {} is not in 1..=64", p.width)
        })?;
        param(p.depth <= 256, || format!("depth {} exceeds 256", p.depth))?;
        param(p.gap >= 1, || "gap must be at least 1".into())?;
        let calls: u64 = (1..=p.depth)
            .map(|l| u64::from(p.width).saturating_pow(l))
            .fold(0, u64::saturating_add);
        param(calls <= 1 << 20, || {
            format!("a tree of {calls} calls is too large")
        })?;
        let mut out = Emitter::new(1, p.gap);
        Self::walk(&mut out, &mut 1, p.width, p.depth, Self::BASE, None);
        Ok(out.records)
    }
}

/// `n` returns on consecutive cycles starting at cycle 1.
pub struct Burst;

impl TraceGenerator for Burst {
    fn name(&self) -> &'static str {
        "burst"
    }

    fn summary(&self) -> &'static str {
        "back-to-back returns on consecutive cycles (--n)"
    }

    fn generate(&self, p: &GenParams) -> Result<Vec<TraceRecord>, GenError> {
        param(p.n >= 1, || "n must be at least 1".into())?;
        let mut out = Emitter::new(1, 1);
        for k in 0..p.n {
            let pc = 0x2_0000 + 8 * k;
            out.emit(pc, RET, pc + 8);
        }
        Ok(out.records)
    }
}

/// `n` call/return pairs, one event every `gap` cycles, then one plain
/// instruction `gap` cycles after the last return.
pub struct Gap;

impl TraceGenerator for Gap {
    fn name(&self) -> &'static str {
        "gap"
    }

    fn summary(&self) -> &'static str {
        "call/return pairs separated by idle cycles (--n, --gap)"
    }

    fn generate(&self, p: &GenParams) -> Result<Vec<TraceRecord>, GenError> {
        param(p.n >= 1, || "n must be at least 1".into())?;
        param(p.gap >= 1, || "gap must be at least 1".into())?;
        const SITE: u64 = 0x1_0000;
        const CALLEE: u64 = 0x3_0000;
        let mut out = Emitter::new(p.gap, p.gap);
        for k in 0..p.n {
            let pc = SITE + 4 * k;
            out.emit(pc, call_to(pc, CALLEE), CALLEE);
            out.emit(CALLEE, RET, pc + 4);
        }
        let tail = SITE + 4 * p.n;
        out.emit(tail, ADDI, tail + 4);
        Ok(out.records)
    }
}

/// Random program walk with mixed encodings, dual commits and idle gaps.
/// Returns and coroutine swaps always target the top of the live stack.
pub struct Random;

impl TraceGenerator for Random {
    fn name(&self) -> &'static str {
        "random"
    }

    fn summary(&self) -> &'static str {
        "seeded random walk with well-matched returns (--n, --seed, --density, --gap)"
    }

    fn generate(&self, p: &GenParams) -> Result<Vec<TraceRecord>, GenError> {
        param(p.density <= 100, || {
            format!("density {} exceeds 100", p.density)
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let mut stack: Vec<u64> = Vec::new();
        let mut records = Vec::with_capacity(p.n as usize);
        let mut pc: u64 = 0x1_0000;
        let mut cycle = 1;
        let mut in_cycle = 0;
        for _ in 0..p.n {
            if in_cycle == 2 || (in_cycle == 1 && rng.gen_ratio(3, 4)) {
                cycle += rng.gen_range(1..=p.gap.max(1));
                in_cycle = 0;
            }
            in_cycle += 1;
            let target = 0x1_0000 + 2 * rng.gen_range(0..0x4_0000u64);
            let (raw, npc) = if rng.gen_range(0..100) < p.density {
                match rng.gen_range(0..10) {
                    0..=3 => {
                        let raw = match rng.gen_range(0..3) {
                            0 => call_to(pc, target),
                            1 => encode_jalr(RA, T1, 0),
                            _ => C_JALR_T1,
                        };
                        stack.push(pc + instruction_length(raw));
                        (raw, target)
                    }
                    4..=7 if !stack.is_empty() => {
                        let raw = if rng.gen_bool(0.5) { RET } else { C_RET };
                        (raw, stack.pop().unwrap())
                    }
                    8 if !stack.is_empty() => {
                        let raw = encode_jalr(RA, T0, 0);
                        let to = stack.pop().unwrap();
                        stack.push(pc + 4);
                        (raw, to)
                    }
                    _ => {
                        let raw = if rng.gen_bool(0.5) {
                            encode_jalr(0, T1, 0)
                        } else {
                            C_JR_T1
                        };
                        (raw, target)
                    }
                }
            } else {
                let raw = if rng.gen_bool(0.5) { ADDI } else { C_NOP };
                (raw, pc + instruction_length(raw))
            };
            records.push(TraceRecord {
                cycle,
                pc,
                raw,
                npc,
            });
            pc = npc;
        }
        Ok(records)
    }
}

#[derive(Clone)]
pub struct GeneratorRegistry {
    generators: BTreeMap<&'static str, std::sync::Arc<dyn TraceGenerator>>,
}

impl Default for GeneratorRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl GeneratorRegistry {
    pub fn empty() -> Self {
        Self {
            generators: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(Balanced);
        reg.register(Burst);
        reg.register(Gap);
        reg.register(Random);
        reg
    }

    pub fn register(&mut self, generator: impl TraceGenerator + 'static) {
        self.generators
            .insert(generator.name(), std::sync::Arc::new(generator));
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn TraceGenerator> {
        self.generators.values().map(|g| g.as_ref())
    }

    pub fn get(&self, name: &str) -> Option<&dyn TraceGenerator> {
        self.generators.get(name).map(|g| g.as_ref())
    }

    pub fn generate(&self, name: &str, params: &GenParams) -> Result<Vec<TraceRecord>, GenError> {
        self.get(name)
            .ok_or_else(|| GenError::Unknown(name.into()))?
            .generate(params)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttackError {
    #[error("record index {index} is past the end of a {len}-record trace")]
    OutOfRange { index: usize, len: usize },
    #[error("record {index} is {kind}, not a return")]
    NotReturn { index: usize, kind: ControlFlowKind },
}

/// Redirects the return at `index` to a different, still aligned address.
pub fn corrupt_return_at(
    records: &mut [TraceRecord],
    index: usize,
    xlen: Xlen,
) -> Result<u64, AttackError> {
    let len = records.len();
    let rec = records
        .get_mut(index)
        .ok_or(AttackError::OutOfRange { index, len })?;
    let kind = decode(rec.raw, xlen).map_or(ControlFlowKind::NotControlFlow, |(_, k)| k);
    if kind != ControlFlowKind::Return {
        return Err(AttackError::NotReturn { index, kind });
    }
    rec.npc ^= 0x40;
    Ok(rec.npc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commit_log::make_commit_log;
    use crate::trace::{parse_trace_str, serialize_trace};

    fn kinds(records: &[TraceRecord]) -> Vec<ControlFlowKind> {
        records
            .iter()
            .map(|r| decode(r.raw, Xlen::Rv64).unwrap().1)
            .collect()
    }

    fn is_well_nested(records: &[TraceRecord]) -> bool {
        let mut stack = Vec::new();
        for r in records {
            let Some(log) = make_commit_log(r, Xlen::Rv64).unwrap() else {
                continue;
            };
            match log.kind {
                ControlFlowKind::Call => stack.push(log.next_addr),
                ControlFlowKind::Return => {
                    if stack.pop() != Some(log.target_addr) {
                        return false;
                    }
                }
                ControlFlowKind::CoroutineSwap => {
                    if stack.pop() != Some(log.target_addr) {
                        return false;
                    }
                    stack.push(log.next_addr);
                }
                _ => {}
            }
        }
        true
    }

    fn control_flow_continuity(records: &[TraceRecord]) -> bool {
        records.windows(2).all(|w| w[0].npc == w[1].pc)
    }

    #[test]
    fn balanced_two_by_two() {
        let p = GenParams {
            depth: 2,
            width: 2,
            ..GenParams::default()
        };
        let t = Balanced.generate(&p).unwrap();
        let k = kinds(&t);
        assert_eq!(k.iter().filter(|&&k| k == ControlFlowKind::Call).count(), 6);
        assert_eq!(
            k.iter().filter(|&&k| k == ControlFlowKind::Return).count(),
            6
        );
        assert!(is_well_nested(&t));
        assert!(control_flow_continuity(&t));
        assert_eq!(parse_trace_str(&serialize_trace(&t)).unwrap(), t);
    }

    #[test]
    fn balanced_shapes() {
        for depth in 0..4 {
            for width in 1..4 {
                let t = Balanced
                    .generate(&GenParams {
                        depth,
                        width,
                        ..GenParams::default()
                    })
                    .unwrap();
                let calls: u64 = (1..=depth).map(|l| u64::from(width).pow(l)).sum();
                let k = kinds(&t);
                assert_eq!(
                    k.iter().filter(|&&k| k == ControlFlowKind::Call).count() as u64,
                    calls
                );
                assert!(is_well_nested(&t), "depth {depth} width {width}");
                assert!(control_flow_continuity(&t));
            }
        }
    }

    #[test]
    fn burst_is_consecutive_returns() {
        let t = Burst
            .generate(&GenParams {
                n: 3,
                ..GenParams::default()
            })
            .unwrap();
        assert_eq!(t.iter().map(|r| r.cycle).collect::<Vec<_>>(), [1, 2, 3]);
        assert!(kinds(&t).iter().all(|&k| k == ControlFlowKind::Return));
    }

    #[test]
    fn gap_layout() {
        let t = Gap
            .generate(&GenParams {
                n: 100,
                gap: 1000,
                ..GenParams::default()
            })
            .unwrap();
        assert_eq!(t.len(), 201);
        assert_eq!(t[0].cycle, 1000);
        assert_eq!(t[199].cycle, 200_000);
        assert_eq!(t[200].cycle, 201_000);
        assert!(is_well_nested(&t));
    }

    #[test]
    fn random_is_seeded_and_well_nested() {
        let p = GenParams {
            n: 2000,
            seed: 9,
            density: 60,
            gap: 3,
            ..GenParams::default()
        };
        let a = Random.generate(&p).unwrap();
        assert_eq!(a, Random.generate(&p).unwrap());
        assert_ne!(a, Random.generate(&GenParams { seed: 10, ..p }).unwrap());
        assert!(is_well_nested(&a));
        assert!(control_flow_continuity(&a));
        assert!(crate::sim::validate_trace(&a).is_ok());
        assert!(a.windows(2).any(|w| w[0].cycle == w[1].cycle));
    }

    #[test]
    fn corrupting_returns() {
        let mut t = Balanced
            .generate(&GenParams {
                depth: 2,
                width: 2,
                ..GenParams::default()
            })
            .unwrap();
        assert!(matches!(
            corrupt_return_at(&mut t, 0, Xlen::Rv64),
            Err(AttackError::NotReturn { .. })
        ));
        assert!(matches!(
            corrupt_return_at(&mut t, 999, Xlen::Rv64),
            Err(AttackError::OutOfRange { .. })
        ));
        let ret = kinds(&t)
            .iter()
            .position(|&k| k == ControlFlowKind::Return)
            .unwrap();
        let before = t[ret].npc;
        let after = corrupt_return_at(&mut t, ret, Xlen::Rv64).unwrap();
        assert_ne!(before, after);
        assert_eq!(after % 2, 0);
        assert!(!is_well_nested(&t));
    }

    #[test]
    fn registry_lookup() {
        let reg = GeneratorRegistry::with_builtins();
        assert_eq!(
            reg.iter().map(|g| g.name()).collect::<Vec<_>>(),
            ["balanced", "burst", "gap", "random"]
        );
        assert!(matches!(
            reg.generate("fractal", &GenParams::default()),
            Err(GenError::Unknown(_))
        ));
        assert!(matches!(
            reg.generate(
                "gap",
                &GenParams {
                    gap: 0,
                    ..GenParams::default()
                }
            ),
            Err(GenError::Param(_))
        ));
    }
}
