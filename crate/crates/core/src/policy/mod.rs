//! RoT firmware model: CFI policies and the engine that charges their cost.
//!
//! Policies implement [`CfiPolicy`] and are looked up by name in a
//! [`PolicyRegistry`]. The engine dispatches each commit log to the active
//! policy and attaches the check latency from the firmware profile.

pub mod mac;
pub mod shadow_stack;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commit_log::CommitLog;
use crate::decode::ControlFlowKind;
use crate::profile::{FirmwareProfile, LatencyMode};

pub use mac::{MacKey, Tag};
pub use shadow_stack::{
    PopOutcome, ShadowStack, ShadowStackConfig, SpillError, SpillFrame, SpillMemory, TamperDetected,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CheckDetail {
    Ok,
    ReturnMismatch { expected: u64, observed: u64 },
    StackUnderflow,
    TamperDetected { frame_index: u64 },
}

impl CheckDetail {
    pub fn is_violation(&self) -> bool {
        *self != CheckDetail::Ok
    }
}

impl fmt::Display for CheckDetail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckDetail::Ok => f.write_str("ok"),
            CheckDetail::ReturnMismatch { expected, observed } => {
                write!(
                    f,
                    "return mismatch: expected {expected:#x}, observed {observed:#x}"
                )
            }
            CheckDetail::StackUnderflow => f.write_str("shadow stack underflow"),
            CheckDetail::TamperDetected { frame_index } => {
                write!(f, "spilled frame {frame_index} failed authentication")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub violation: bool,
    pub cost_cycles: u64,
    pub detail: CheckDetail,
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Spill(#[from] SpillError),
    #[error("unknown policy `{0}`")]
    Unknown(String),
}

/// A control-flow integrity policy running on the RoT.
pub trait CfiPolicy: Send {
    fn name(&self) -> &str;

    /// Updates policy state for one event and returns the verdict.
    fn check(&mut self, log: &CommitLog) -> Result<CheckDetail, PolicyError>;
}

/// Settings shared by the built-in policy factories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub shadow_stack: ShadowStackConfig,
    /// Frames the spill region can hold; `None` is unbounded.
    pub spill_frames: Option<usize>,
    /// Fixes the session key; `None` draws a fresh one.
    pub key_seed: Option<u64>,
}

impl PolicyParams {
    pub fn key(&self) -> MacKey {
        self.key_seed.map_or_else(MacKey::random, MacKey::from_seed)
    }
}

/// Return-address protection.
#[derive(Debug)]
pub struct ShadowStackPolicy {
    stack: ShadowStack,
    memory: SpillMemory,
}

impl ShadowStackPolicy {
    pub const NAME: &'static str = "shadow-stack";

    pub fn new(params: &PolicyParams) -> Result<Self, PolicyError> {
        let stack = ShadowStack::new(params.shadow_stack, params.key())?;
        let memory = params
            .spill_frames
            .map_or_else(SpillMemory::new, SpillMemory::with_capacity);
        Ok(Self { stack, memory })
    }

    pub fn stack(&self) -> &ShadowStack {
        &self.stack
    }

    pub fn memory_mut(&mut self) -> &mut SpillMemory {
        &mut self.memory
    }
}

impl CfiPolicy for ShadowStackPolicy {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn check(&mut self, log: &CommitLog) -> Result<CheckDetail, PolicyError> {
        Ok(match log.kind {
            ControlFlowKind::Call => {
                self.stack.on_call(log, &mut self.memory)?;
                CheckDetail::Ok
            }
            ControlFlowKind::Return => self.stack.on_return(log, &mut self.memory),
            ControlFlowKind::CoroutineSwap => {
                let detail = self.stack.on_return(log, &mut self.memory);
                self.stack.on_call(log, &mut self.memory)?;
                detail
            }
            // Forward edges are logged but not checked.
            ControlFlowKind::IndirectJump | ControlFlowKind::NotControlFlow => CheckDetail::Ok,
        })
    }
}

pub type PolicyFactory = fn(&PolicyParams) -> Result<Box<dyn CfiPolicy>, PolicyError>;

#[derive(Debug, Clone)]
pub struct PolicyRegistry {
    factories: BTreeMap<&'static str, PolicyFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(ShadowStackPolicy::NAME, |p| {
            Ok(Box::new(ShadowStackPolicy::new(p)?))
        });
        reg
    }

    pub fn register(&mut self, name: &'static str, factory: PolicyFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn create(
        &self,
        name: &str,
        params: &PolicyParams,
    ) -> Result<Box<dyn CfiPolicy>, PolicyError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| PolicyError::Unknown(name.into()))?;
        factory(params)
    }
}

/// Policy plus the cost model of the firmware running it.
pub struct PolicyEngine {
    policy: Box<dyn CfiPolicy>,
    profile: FirmwareProfile,
    mode: LatencyMode,
}

impl fmt::Debug for PolicyEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PolicyEngine")
            .field("policy", &self.policy.name())
            .field("profile", &self.profile.name)
            .field("mode", &self.mode)
            .finish()
    }
}

impl PolicyEngine {
    pub fn new(policy: Box<dyn CfiPolicy>, profile: FirmwareProfile, mode: LatencyMode) -> Self {
        Self {
            policy,
            profile,
            mode,
        }
    }

    pub fn policy_name(&self) -> &str {
        self.policy.name()
    }

    pub fn handle_event(&mut self, log: &CommitLog) -> Result<CheckResult, PolicyError> {
        let detail = self.policy.check(log)?;
        Ok(CheckResult {
            violation: detail.is_violation(),
            cost_cycles: self.profile.latency(log.kind, self.mode),
            detail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(profile: FirmwareProfile) -> PolicyEngine {
        let params = PolicyParams {
            key_seed: Some(3),
            ..Default::default()
        };
        let policy = PolicyRegistry::with_builtins()
            .create("shadow-stack", &params)
            .unwrap();
        PolicyEngine::new(policy, profile, LatencyMode::PerKind)
    }

    fn log(kind: ControlFlowKind, pc: u64, target: u64) -> CommitLog {
        let encoding = match kind {
            ControlFlowKind::Call => 0x0080_00EF,
            ControlFlowKind::Return => 0x0000_8067,
            ControlFlowKind::IndirectJump => 0x0003_0067,
            _ => 0x0002_80E7,
        };
        CommitLog {
            pc,
            encoding,
            next_addr: pc + 4,
            target_addr: target,
            kind,
        }
    }

    #[test]
    fn irq_costs_per_kind() {
        let mut e = engine(FirmwareProfile::irq());
        let call = e
            .handle_event(&log(ControlFlowKind::Call, 0x100, 0x800))
            .unwrap();
        assert_eq!(
            call,
            CheckResult {
                violation: false,
                cost_cycles: 258,
                detail: CheckDetail::Ok
            }
        );
        let ret = e
            .handle_event(&log(ControlFlowKind::Return, 0x900, 0x104))
            .unwrap();
        assert_eq!(
            ret,
            CheckResult {
                violation: false,
                cost_cycles: 276,
                detail: CheckDetail::Ok
            }
        );
    }

    #[test]
    fn mismatch_is_violation() {
        let mut e = engine(FirmwareProfile::polling());
        e.handle_event(&log(ControlFlowKind::Call, 0x100, 0x800))
            .unwrap();
        let ret = e
            .handle_event(&log(ControlFlowKind::Return, 0x900, 0x200))
            .unwrap();
        assert!(ret.violation);
        assert_eq!(
            ret.detail,
            CheckDetail::ReturnMismatch {
                expected: 0x104,
                observed: 0x200
            }
        );
        assert_eq!(ret.cost_cycles, 121);
    }

    #[test]
    fn indirect_jump_unchecked() {
        let mut e = engine(FirmwareProfile::optimized());
        let r = e
            .handle_event(&log(ControlFlowKind::IndirectJump, 0x100, 0x1234))
            .unwrap();
        assert_eq!(
            r,
            CheckResult {
                violation: false,
                cost_cycles: 64,
                detail: CheckDetail::Ok
            }
        );
    }

    #[test]
    fn coroutine_swap_pops_then_pushes() {
        let mut e = engine(FirmwareProfile::optimized());
        e.handle_event(&log(ControlFlowKind::Call, 0x100, 0x800))
            .unwrap();
        // yield back to the caller's continuation, leaving our own
        let swap = e
            .handle_event(&log(ControlFlowKind::CoroutineSwap, 0x800, 0x104))
            .unwrap();
        assert_eq!(swap.detail, CheckDetail::Ok);
        assert_eq!(swap.cost_cycles, 82);
        let back = e
            .handle_event(&log(ControlFlowKind::Return, 0x108, 0x804))
            .unwrap();
        assert_eq!(back.detail, CheckDetail::Ok);
        let under = e
            .handle_event(&log(ControlFlowKind::Return, 0x108, 0x804))
            .unwrap();
        assert_eq!(under.detail, CheckDetail::StackUnderflow);
    }

    #[test]
    fn unknown_policy() {
        let err = PolicyRegistry::with_builtins().create("jump-table", &PolicyParams::default());
        assert!(matches!(err, Err(PolicyError::Unknown(_))));
    }
}
