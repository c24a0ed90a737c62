//! Trace-driven model of control-flow integrity enforced by a Root of Trust.
//!
//! Retired instructions from a host core are filtered into commit logs,
//! queued, shipped through a mailbox, and checked by RoT firmware whose
//! per-check cost comes from a [`profile::FirmwareProfile`]. The simulator
//! measures how much the checks slow the host down.

pub mod commit_log;
pub mod commit_stage;
pub mod decode;
pub mod gen;
pub mod mailbox;
pub mod policy;
pub mod profile;
pub mod report;
pub mod sim;
pub mod trace;

pub use commit_log::CommitLog;
pub use decode::{ControlFlowKind, Xlen};
pub use policy::{CfiPolicy, CheckDetail, PolicyEngine, PolicyRegistry};
pub use profile::{FirmwareProfile, LatencyMode, ProfileRegistry};
pub use report::{emit_report, emit_reports, Format};
pub use sim::{compare_profiles, run, run_traced, SimConfig, SimError, SimReport};
pub use trace::{parse_trace, parse_trace_str, serialize_trace, TraceRecord};
