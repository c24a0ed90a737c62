//! Firmware cost profiles.
//!
//! A profile gives the number of RoT cycles one check takes for each kind of
//! control-flow event, together with the measured breakdown those totals come
//! from. The three built-ins are the interrupt-driven firmware, the polling
//! firmware, and the polling firmware on a low-latency RoT interconnect.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::ControlFlowKind;

/// Directory searched for `<name>.toml` profile tables.
pub const PROFILE_DIR_ENV: &str = "ROT_CFI_SIM_PROFILE_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Irq,
    Polling,
    Optimized,
    Custom,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Irq => "irq",
            Variant::Polling => "polling",
            Variant::Optimized => "optimized",
            Variant::Custom => "custom",
        })
    }
}

/// One table cell pair. `None` is a dash: the category does not exist for
/// this firmware (no interrupt path when polling).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cell {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instructions: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cycles: Option<u64>,
}

impl Cell {
    const DASH: Cell = Cell {
        instructions: None,
        cycles: None,
    };

    const fn new(instructions: u64, cycles: u64) -> Self {
        Cell {
            instructions: Some(instructions),
            cycles: Some(cycles),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Categories {
    #[serde(default)]
    pub logic: Cell,
    #[serde(default)]
    pub mem_rot: Cell,
    #[serde(default)]
    pub mem_soc: Cell,
}

impl Categories {
    pub fn cells(&self) -> [(Category, Cell); 3] {
        [
            (Category::Logic, self.logic),
            (Category::MemRot, self.mem_rot),
            (Category::MemSoc, self.mem_soc),
        ]
    }

    fn cycles(&self) -> u64 {
        self.cells().iter().filter_map(|(_, c)| c.cycles).sum()
    }

    fn instructions(&self) -> u64 {
        self.cells()
            .iter()
            .filter_map(|(_, c)| c.instructions)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Logic,
    MemRot,
    MemSoc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Interrupt entry/exit bookkeeping.
    Irq,
    /// The policy itself, including mailbox accesses.
    Cfi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Call,
    Return,
}

/// Cost split of one operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OpBreakdown {
    #[serde(default)]
    pub irq: Categories,
    #[serde(default)]
    pub cfi: Categories,
}

impl OpBreakdown {
    pub fn domain(&self, domain: Domain) -> &Categories {
        match domain {
            Domain::Irq => &self.irq,
            Domain::Cfi => &self.cfi,
        }
    }

    pub fn total_cycles(&self) -> u64 {
        self.irq.cycles() + self.cfi.cycles()
    }

    pub fn total_instructions(&self) -> u64 {
        self.irq.instructions() + self.cfi.instructions()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Breakdown {
    pub call: OpBreakdown,
    #[serde(rename = "return")]
    pub ret: OpBreakdown,
}

impl Breakdown {
    pub fn op(&self, op: Op) -> &OpBreakdown {
        match op {
            Op::Call => &self.call,
            Op::Return => &self.ret,
        }
    }
}

/// Per-access costs of the RoT microarchitecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UnitCosts {
    pub rot_mem_cycles_per_access: u64,
    pub soc_mem_cycles_per_access: u64,
    /// Doorbell to first ISR instruction. Zero when the firmware polls.
    #[serde(default)]
    pub irq_wakeup_cycles: u64,
    /// Scratchpad accesses spent saving and restoring context around the ISR.
    #[serde(default)]
    pub irq_context_accesses: u64,
}

impl UnitCosts {
    /// Fixed cost of entering and leaving the interrupt handler.
    pub fn irq_entry_exit_cycles(&self) -> u64 {
        self.irq_wakeup_cycles + self.irq_context_accesses * self.rot_mem_cycles_per_access
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareProfile {
    pub name: String,
    pub variant: Variant,
    pub call_cycles: u64,
    pub return_cycles: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<Breakdown>,
    #[serde(default)]
    pub units: UnitCosts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatencyMode {
    /// Calls and returns are charged their own totals.
    #[default]
    PerKind,
    /// Every event is charged the call/return mean.
    Averaged,
}

impl fmt::Display for LatencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LatencyMode::PerKind => "per-kind",
            LatencyMode::Averaged => "averaged",
        })
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile `{name}`: {op:?} total is {declared} but its breakdown sums to {summed}")]
    Inconsistent {
        name: String,
        op: Op,
        declared: u64,
        summed: u64,
    },
    #[error("unknown profile `{0}`")]
    Unknown(String),
    #[error("reading profile {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing profile {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
}

impl FirmwareProfile {
    pub fn irq() -> Self {
        // Interrupt path is identical for calls and returns.
        let irq = Categories {
            logic: Cell::new(8, 59),
            mem_rot: Cell::new(14, 74),
            mem_soc: Cell::new(2, 22),
        };
        Self {
            name: "irq".into(),
            variant: Variant::Irq,
            call_cycles: 258,
            return_cycles: 276,
            breakdown: Some(Breakdown {
                call: OpBreakdown {
                    irq,
                    cfi: cfi_call(28, 48),
                },
                ret: OpBreakdown {
                    irq,
                    cfi: cfi_return(28, 48),
                },
            }),
            units: UnitCosts {
                rot_mem_cycles_per_access: 5,
                soc_mem_cycles_per_access: 12,
                irq_wakeup_cycles: 45,
                irq_context_accesses: 12,
            },
        }
    }

    pub fn polling() -> Self {
        Self {
            name: "polling".into(),
            variant: Variant::Polling,
            call_cycles: 103,
            return_cycles: 121,
            breakdown: Some(Breakdown {
                call: OpBreakdown {
                    irq: no_irq(),
                    cfi: cfi_call(28, 48),
                },
                ret: OpBreakdown {
                    irq: no_irq(),
                    cfi: cfi_return(28, 48),
                },
            }),
            units: UnitCosts {
                rot_mem_cycles_per_access: 5,
                soc_mem_cycles_per_access: 12,
                irq_wakeup_cycles: 0,
                irq_context_accesses: 0,
            },
        }
    }

    pub fn optimized() -> Self {
        Self {
            name: "optimized".into(),
            variant: Variant::Optimized,
            call_cycles: 64,
            return_cycles: 82,
            breakdown: Some(Breakdown {
                call: OpBreakdown {
                    irq: no_irq(),
                    cfi: cfi_call(5, 32),
                },
                ret: OpBreakdown {
                    irq: no_irq(),
                    cfi: cfi_return(5, 32),
                },
            }),
            units: UnitCosts {
                rot_mem_cycles_per_access: 1,
                soc_mem_cycles_per_access: 8,
                irq_wakeup_cycles: 0,
                irq_context_accesses: 0,
            },
        }
    }

    pub fn builtins() -> [FirmwareProfile; 3] {
        [Self::irq(), Self::polling(), Self::optimized()]
    }

    /// Both kinds charged the same latency; no breakdown.
    pub fn uniform(name: &str, cycles: u64) -> Self {
        Self {
            name: name.into(),
            variant: Variant::Custom,
            call_cycles: cycles,
            return_cycles: cycles,
            breakdown: None,
            units: UnitCosts::default(),
        }
    }

    /// Call/return mean, rounded half up.
    pub fn average_latency(&self) -> u64 {
        (self.call_cycles + self.return_cycles).div_ceil(2)
    }

    /// Check latency for one event kind.
    pub fn cost_of(&self, kind: ControlFlowKind) -> u64 {
        match kind {
            ControlFlowKind::Call | ControlFlowKind::IndirectJump => self.call_cycles,
            ControlFlowKind::Return | ControlFlowKind::CoroutineSwap => self.return_cycles,
            ControlFlowKind::NotControlFlow => 0,
        }
    }

    pub fn latency(&self, kind: ControlFlowKind, mode: LatencyMode) -> u64 {
        match (mode, kind) {
            (_, ControlFlowKind::NotControlFlow) => 0,
            (LatencyMode::PerKind, _) => self.cost_of(kind),
            (LatencyMode::Averaged, _) => self.average_latency(),
        }
    }

    /// Checks that declared totals equal the breakdown sums.
    pub fn validate(&self) -> Result<(), ProfileError> {
        let Some(b) = &self.breakdown else {
            return Ok(());
        };
        for (op, declared) in [
            (Op::Call, self.call_cycles),
            (Op::Return, self.return_cycles),
        ] {
            let summed = b.op(op).total_cycles();
            if summed != declared {
                return Err(ProfileError::Inconsistent {
                    name: self.name.clone(),
                    op,
                    declared,
                    summed,
                });
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ProfileError> {
        let profile: FirmwareProfile =
            toml::from_str(text).map_err(|source| ProfileError::Parse {
                path: path.to_owned(),
                source,
            })?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ProfileError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profiles always serialize")
    }
}

fn no_irq() -> Categories {
    Categories {
        logic: Cell::DASH,
        mem_rot: Cell::DASH,
        mem_soc: Cell::DASH,
    }
}

// The policy issues 5 scratchpad and 4 SoC accesses for either operation;
// only the logic differs between call and return.
fn cfi_call(mem_rot_cycles: u64, mem_soc_cycles: u64) -> Categories {
    Categories {
        logic: Cell::new(15, 27),
        mem_rot: Cell::new(5, mem_rot_cycles),
        mem_soc: Cell::new(4, mem_soc_cycles),
    }
}

fn cfi_return(mem_rot_cycles: u64, mem_soc_cycles: u64) -> Categories {
    Categories {
        logic: Cell::new(25, 45),
        mem_rot: Cell::new(5, mem_rot_cycles),
        mem_soc: Cell::new(4, mem_soc_cycles),
    }
}

/// Where a reconstructed cycle count came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellSource {
    /// Accesses times the per-access cost.
    Derived,
    /// Logic cycles depend on the pipeline and are carried over as measured.
    Measured,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DerivedCell {
    pub op: Op,
    pub domain: Domain,
    pub category: Category,
    pub instructions: u64,
    pub reconstructed: u64,
    pub table: u64,
    pub source: CellSource,
    /// Reconstruction minus table value.
    pub deviation: i64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DerivedTotals {
    pub profile: String,
    pub irq_entry_exit_cycles: u64,
    pub cells: Vec<DerivedCell>,
    pub call_cycles: u64,
    pub return_cycles: u64,
}

impl DerivedTotals {
    pub fn cell(&self, op: Op, domain: Domain, category: Category) -> Option<&DerivedCell> {
        self.cells
            .iter()
            .find(|c| c.op == op && c.domain == domain && c.category == category)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &DerivedCell> {
        self.cells.iter().filter(|c| c.flagged)
    }
}

/// Rebuilds the cycle cells of a profile from its instruction counts and unit
/// costs. Memory cells are accesses times per-access cost; logic cells are
/// taken as measured. Cells deviating from the table by more than
/// `tolerance_pct` percent are flagged. The table stays authoritative.
pub fn derive_profile_totals(profile: &FirmwareProfile, tolerance_pct: u64) -> DerivedTotals {
    let units = profile.units;
    let mut cells = Vec::new();
    let mut totals = BTreeMap::new();
    if let Some(b) = &profile.breakdown {
        for op in [Op::Call, Op::Return] {
            let mut sum = 0;
            for domain in [Domain::Irq, Domain::Cfi] {
                for (category, cell) in b.op(op).domain(domain).cells() {
                    let (Some(instructions), Some(table)) = (cell.instructions, cell.cycles) else {
                        continue;
                    };
                    let (reconstructed, source) = match category {
                        Category::Logic => (table, CellSource::Measured),
                        Category::MemRot => (
                            instructions * units.rot_mem_cycles_per_access,
                            CellSource::Derived,
                        ),
                        Category::MemSoc => (
                            instructions * units.soc_mem_cycles_per_access,
                            CellSource::Derived,
                        ),
                    };
                    let deviation = reconstructed as i64 - table as i64;
                    let flagged = deviation.unsigned_abs() * 100 > tolerance_pct * table;
                    sum += reconstructed;
                    cells.push(DerivedCell {
                        op,
                        domain,
                        category,
                        instructions,
                        reconstructed,
                        table,
                        source,
                        deviation,
                        flagged,
                    });
                }
            }
            totals.insert(op, sum);
        }
    }
    DerivedTotals {
        profile: profile.name.clone(),
        irq_entry_exit_cycles: units.irq_entry_exit_cycles(),
        cells,
        call_cycles: totals
            .get(&Op::Call)
            .copied()
            .unwrap_or(profile.call_cycles),
        return_cycles: totals
            .get(&Op::Return)
            .copied()
            .unwrap_or(profile.return_cycles),
    }
}

/// Named profiles. Built-ins first, then `.toml` files: a literal path, or
/// `<name>.toml` under [`PROFILE_DIR_ENV`].
#[derive(Debug, Clone)]
pub struct ProfileRegistry {
    profiles: BTreeMap<String, FirmwareProfile>,
    search_dir: Option<PathBuf>,
}

impl Default for ProfileRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ProfileRegistry {
    pub fn empty() -> Self {
        Self {
            profiles: BTreeMap::new(),
            search_dir: None,
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        for p in FirmwareProfile::builtins() {
            reg.register(p);
        }
        reg
    }

    /// Built-ins plus the directory named by the environment, if any.
    pub fn from_env() -> Self {
        let mut reg = Self::with_builtins();
        reg.search_dir = std::env::var_os(PROFILE_DIR_ENV).map(PathBuf::from);
        reg
    }

    pub fn with_search_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.search_dir = Some(dir.into());
        self
    }

    pub fn register(&mut self, profile: FirmwareProfile) {
        self.profiles.insert(profile.name.clone(), profile);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&FirmwareProfile> {
        self.profiles.get(name)
    }

    pub fn resolve(&self, name_or_path: &str) -> Result<FirmwareProfile, ProfileError> {
        if let Some(p) = self.get(&name_or_path.to_ascii_lowercase()) {
            return Ok(p.clone());
        }
        let path = Path::new(name_or_path);
        if path.is_file() {
            return FirmwareProfile::load(path);
        }
        if let Some(dir) = &self.search_dir {
            let candidate = dir.join(format!("{name_or_path}.toml"));
            if candidate.is_file() {
                return FirmwareProfile::load(&candidate);
            }
        }
        Err(ProfileError::Unknown(name_or_path.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_totals() {
        let [irq, poll, opt] = FirmwareProfile::builtins();
        assert_eq!((irq.call_cycles, irq.return_cycles), (258, 276));
        assert_eq!((poll.call_cycles, poll.return_cycles), (103, 121));
        assert_eq!((opt.call_cycles, opt.return_cycles), (64, 82));
        for p in [&irq, &poll, &opt] {
            p.validate().unwrap();
        }
        assert_eq!(irq.average_latency(), 267);
        assert_eq!(poll.average_latency(), 112);
        assert_eq!(opt.average_latency(), 73);
    }

    #[test]
    fn cost_by_kind() {
        let irq = FirmwareProfile::irq();
        assert_eq!(irq.cost_of(ControlFlowKind::Call), 258);
        assert_eq!(irq.cost_of(ControlFlowKind::Return), 276);
        assert_eq!(irq.cost_of(ControlFlowKind::IndirectJump), 258);
        assert_eq!(irq.cost_of(ControlFlowKind::CoroutineSwap), 276);
        assert_eq!(irq.cost_of(ControlFlowKind::NotControlFlow), 0);
        let poll = FirmwareProfile::polling();
        assert_eq!(poll.cost_of(ControlFlowKind::Call), 103);
        assert_eq!(poll.cost_of(ControlFlowKind::Return), 121);
        let opt = FirmwareProfile::optimized();
        assert_eq!(opt.cost_of(ControlFlowKind::Call), 64);
        assert_eq!(opt.cost_of(ControlFlowKind::Return), 82);
        assert_eq!(
            opt.latency(ControlFlowKind::Call, LatencyMode::Averaged),
            73
        );
        assert_eq!(
            opt.latency(ControlFlowKind::NotControlFlow, LatencyMode::Averaged),
            0
        );
    }

    #[test]
    fn irq_split_matches_table() {
        let b = FirmwareProfile::irq().breakdown.unwrap();
        assert_eq!(b.call.irq.cycles(), 155);
        assert_eq!(b.call.cfi.cycles(), 103);
        assert_eq!(b.ret.cfi.cycles(), 121);
        assert_eq!(b.call.total_instructions(), 48);
        assert_eq!(b.ret.total_instructions(), 58);
    }

    #[test]
    fn irq_overhead_is_105() {
        let units = FirmwareProfile::irq().units;
        assert_eq!(units.irq_entry_exit_cycles(), 45 + 12 * 5);
        assert_eq!(units.irq_entry_exit_cycles(), 105);
        assert_eq!(FirmwareProfile::polling().units.irq_entry_exit_cycles(), 0);
    }

    #[test]
    fn optimized_derivation_is_exact() {
        let d = derive_profile_totals(&FirmwareProfile::optimized(), 0);
        let rot = d.cell(Op::Call, Domain::Cfi, Category::MemRot).unwrap();
        assert_eq!((rot.instructions, rot.reconstructed, rot.table), (5, 5, 5));
        let soc = d.cell(Op::Call, Domain::Cfi, Category::MemSoc).unwrap();
        assert_eq!((soc.instructions, soc.reconstructed), (4, 32));
        assert_eq!(d.call_cycles, 27 + 5 + 32);
        assert_eq!(d.call_cycles, 64);
        assert_eq!(d.return_cycles, 82);
        assert_eq!(d.flagged().count(), 0);
    }

    #[test]
    fn irq_derivation_flags_scratchpad_cell() {
        // 5 accesses at 5 cycles against a measured 28.
        let d = derive_profile_totals(&FirmwareProfile::irq(), 10);
        let rot = d.cell(Op::Call, Domain::Cfi, Category::MemRot).unwrap();
        assert_eq!((rot.reconstructed, rot.deviation), (25, -3));
        assert!(rot.flagged);
        let soc = d.cell(Op::Call, Domain::Cfi, Category::MemSoc).unwrap();
        assert_eq!(soc.deviation, 0);
        assert!(!soc.flagged);
        assert_eq!(d.irq_entry_exit_cycles, 105);
    }

    #[test]
    fn inconsistent_file_is_rejected() {
        let mut p = FirmwareProfile::optimized();
        p.call_cycles = 65;
        let text = p.to_toml();
        let err = FirmwareProfile::from_toml_str(&text, Path::new("x.toml")).unwrap_err();
        assert!(matches!(
            err,
            ProfileError::Inconsistent {
                op: Op::Call,
                declared: 65,
                summed: 64,
                ..
            }
        ));
    }

    #[test]
    fn toml_round_trip_keeps_dashes() {
        let p = FirmwareProfile::polling();
        let back = FirmwareProfile::from_toml_str(&p.to_toml(), Path::new("p.toml")).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.breakdown.unwrap().call.irq.logic, Cell::DASH);
    }

    #[test]
    fn minimal_custom_profile() {
        let text = "name = \"fast\"\nvariant = \"custom\"\ncall_cycles = 10\nreturn_cycles = 12\n";
        let p = FirmwareProfile::from_toml_str(text, Path::new("fast.toml")).unwrap();
        assert_eq!(p.cost_of(ControlFlowKind::Return), 12);
        assert_eq!(p.average_latency(), 11);
    }

    #[test]
    fn registry_resolution() {
        let dir = std::env::temp_dir().join(format!("rot-cfi-profiles-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut custom = FirmwareProfile::uniform("tiny", 3);
        custom.name = "tiny".into();
        std::fs::write(dir.join("tiny.toml"), custom.to_toml()).unwrap();

        let reg = ProfileRegistry::with_builtins().with_search_dir(&dir);
        assert_eq!(reg.resolve("IRQ").unwrap().call_cycles, 258);
        assert_eq!(reg.resolve("tiny").unwrap().call_cycles, 3);
        let path = dir.join("tiny.toml");
        assert_eq!(reg.resolve(path.to_str().unwrap()).unwrap().name, "tiny");
        assert!(matches!(reg.resolve("nope"), Err(ProfileError::Unknown(_))));
        assert_eq!(
            reg.names().collect::<Vec<_>>(),
            ["irq", "optimized", "polling"]
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
