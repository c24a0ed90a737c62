//! `rot-cfi-sim`: inspect traces, replay them under RoT CFI enforcement,
//! compare firmware profiles and demonstrate attack detection.
//!
//! Exit status: 0 on success, 2 on a usage or input error, 3 when a run ends
//! with a CFI violation, 1 on an internal failure.

mod config;

use std::fs::File;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rot_cfi::decode::decode;
use rot_cfi::gen::{corrupt_return_at, GenParams, GeneratorRegistry};
use rot_cfi::policy::ShadowStackConfig;
use rot_cfi::profile::{derive_profile_totals, FirmwareProfile, ProfileRegistry, PROFILE_DIR_ENV};
use rot_cfi::report::{emit_report, emit_reports, Format};
use rot_cfi::sim::{compare_profiles, run, KindCounts, SimConfig, SimError, SimReport};
use rot_cfi::{parse_trace, serialize_trace, ControlFlowKind, LatencyMode, TraceRecord, Xlen};
use serde::Serialize;

use crate::config::FileConfig;

const EXIT_INTERNAL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_VIOLATION: u8 = 3;

#[derive(Parser)]
#[command(
    name = "rot-cfi-sim",
    version,
    about = "Trace-driven simulator for Root-of-Trust control-flow integrity"
)]
struct Cli {
    /// TOML file with default settings; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the control-flow events in a trace.
    Classify(ClassifyArgs),
    /// Replay a trace under one configuration.
    Simulate(SimulateArgs),
    /// Replay a trace under several profiles and queue depths.
    Compare(CompareArgs),
    /// Corrupt one return target and check that it is caught.
    Attack(AttackArgs),
    /// Print the firmware cost profiles.
    Profiles(ProfilesArgs),
    /// Rebuild profile cycle counts from per-access costs.
    Derive(DeriveArgs),
    /// Emit a synthetic trace.
    Gen(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Json,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => Format::Text,
            FormatArg::Json => Format::Json,
        }
    }
}

#[derive(Args)]
struct OutputFlags {
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args)]
struct SimFlags {
    /// Data bus width in bits: 32, 64 or 128.
    #[arg(long)]
    bus_width: Option<u32>,
    /// Cycles per bus beat when moving a log into the mailbox.
    #[arg(long)]
    transfer_cost: Option<u64>,
    /// Charge every check the call/return mean.
    #[arg(long)]
    averaged: bool,
    /// Stop at the first violation.
    #[arg(long)]
    halt_on_violation: bool,
    /// Seed for the spill-authentication key.
    #[arg(long)]
    seed: Option<u64>,
    /// On-chip shadow stack entries.
    #[arg(long)]
    stack_capacity: Option<usize>,
    /// Base integer width of the traced core: 32 or 64.
    #[arg(long)]
    xlen: Option<u32>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    xlen: Option<u32>,
    #[command(flatten)]
    out: OutputFlags,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    trace: PathBuf,
    /// irq, polling, optimized, or a profile file.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    queue_depth: Option<usize>,
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    out: OutputFlags,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Repeatable; defaults to the three built-ins.
    #[arg(long)]
    profile: Vec<String>,
    /// Repeatable; defaults to 1 and 8.
    #[arg(long)]
    queue_depth: Vec<usize>,
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    out: OutputFlags,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Record index of the return whose target is corrupted.
    #[arg(long, value_name = "K")]
    corrupt_return_at: usize,
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    queue_depth: Option<usize>,
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    out: OutputFlags,
}

#[derive(Args)]
struct ProfilesArgs {
    /// Also print the per-category breakdown.
    #[arg(long)]
    breakdown: bool,
    #[command(flatten)]
    out: OutputFlags,
}

#[derive(Args)]
struct DeriveArgs {
    /// Repeatable; defaults to the three built-ins.
    #[arg(long)]
    profile: Vec<String>,
    /// Flag cells deviating from the table by more than this percentage.
    #[arg(long, default_value_t = 10)]
    tolerance: u64,
    #[command(flatten)]
    out: OutputFlags,
}

#[derive(Args)]
struct GenArgs {
    /// balanced, burst, gap or random.
    pattern: String,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    depth: Option<u32>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    gap: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Percent of control-flow records (random).
    #[arg(long)]
    density: Option<u32>,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error paired with the exit status it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        let error = error.into();
        let internal = matches!(
            error.downcast_ref::<SimError>(),
            Some(SimError::Mailbox(_) | SimError::Protocol(_) | SimError::Policy(_))
        );
        Failure {
            code: if internal { EXIT_INTERNAL } else { EXIT_USAGE },
            error,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

struct Env {
    file: FileConfig,
    profiles: ProfileRegistry,
}

impl Env {
    fn format(&self, out: &OutputFlags) -> anyhow::Result<Format> {
        match (out.format, &self.file.format) {
            (Some(f), _) => Ok(f.into()),
            (None, Some(f)) => f.parse().map_err(|e: String| anyhow!(e)),
            (None, None) => Ok(Format::Text),
        }
    }

    fn xlen(&self, flag: Option<u32>) -> anyhow::Result<Xlen> {
        match flag.or(self.file.xlen).unwrap_or(64) {
            32 => Ok(Xlen::Rv32),
            64 => Ok(Xlen::Rv64),
            other => bail!("xlen {other} is not 32 or 64"),
        }
    }

    fn profile(&self, flag: Option<&str>) -> anyhow::Result<FirmwareProfile> {
        let name = flag.or(self.file.profile.as_deref()).unwrap_or("optimized");
        Ok(self.profiles.resolve(name)?)
    }

    /// Everything but the profile and depth, validated.
    fn base_config(&self, flags: &SimFlags) -> anyhow::Result<SimConfig> {
        let f = &self.file;
        let mut c = SimConfig::new(FirmwareProfile::uniform("unset", 0), 1);
        c.bus_width_bits = flags.bus_width.or(f.bus_width).unwrap_or(64);
        c.transfer_cost_per_beat = flags.transfer_cost.or(f.transfer_cost).unwrap_or(0);
        if flags.averaged || f.averaged == Some(true) {
            c.latency_mode = LatencyMode::Averaged;
        }
        c.halt_on_violation = flags.halt_on_violation || f.halt_on_violation == Some(true);
        c.xlen = self.xlen(flags.xlen)?;
        c.policy_params.key_seed = Some(flags.seed.or(f.seed).unwrap_or(0));
        if let Some(cap) = flags.stack_capacity.or(f.stack_capacity) {
            c.policy_params.shadow_stack = ShadowStackConfig::with_capacity(cap);
        }
        c.validate()?;
        Ok(c)
    }

    fn single_config(
        &self,
        profile: Option<&str>,
        depth: Option<usize>,
        flags: &SimFlags,
    ) -> anyhow::Result<SimConfig> {
        let mut c = self.base_config(flags)?;
        c.queue_depth = depth.or(self.file.queue_depth).unwrap_or(1);
        c.validate()?;
        c.profile = self.profile(profile)?;
        Ok(c)
    }
}

fn read_trace(path: &Path) -> anyhow::Result<Vec<TraceRecord>> {
    let file = File::open(path).with_context(|| format!("opening trace {}", path.display()))?;
    parse_trace(BufReader::new(file)).with_context(|| format!("reading trace {}", path.display()))
}

fn print(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    print(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

fn violation_status(reports: &[SimReport]) -> u8 {
    if reports.iter().any(|r| !r.violations.is_empty()) {
        EXIT_VIOLATION
    } else {
        0
    }
}

#[derive(Serialize)]
struct ClassifiedEvent {
    index: usize,
    cycle: u64,
    pc: u64,
    encoding: u32,
    kind: ControlFlowKind,
    target: u64,
}

#[derive(Serialize)]
struct Classification {
    event_count: u64,
    events_by_kind: KindCounts,
    events: Vec<ClassifiedEvent>,
}

fn classify(ctx: &Env, args: &ClassifyArgs) -> CliResult<u8> {
    let format = ctx.format(&args.out)?;
    let xlen = ctx.xlen(args.xlen)?;
    let records = read_trace(&args.trace)?;
    let mut out = Classification {
        event_count: 0,
        events_by_kind: KindCounts::default(),
        events: Vec::new(),
    };
    for (index, r) in records.iter().enumerate() {
        let (encoding, kind) =
            decode(r.raw, xlen).with_context(|| format!("trace record {index}"))?;
        if kind.is_monitored() {
            out.events_by_kind.add(kind);
            out.events.push(ClassifiedEvent {
                index,
                cycle: r.cycle,
                pc: r.pc,
                encoding,
                kind,
                target: r.npc,
            });
        }
    }
    out.event_count = out.events.len() as u64;
    match format {
        Format::Json => print_json(&out)?,
        Format::Text => {
            let mut text = String::from("index\tcycle\tpc\tencoding\tkind\ttarget\n");
            for e in &out.events {
                text.push_str(&format!(
                    "{}\t{}\t{:#x}\t{:#010x}\t{}\t{:#x}\n",
                    e.index, e.cycle, e.pc, e.encoding, e.kind, e.target
                ));
            }
            let k = out.events_by_kind;
            text.push_str(&format!(
                "{} events: {} calls, {} returns, {} indirect jumps, {} coroutine swaps\n",
                out.event_count, k.call, k.ret, k.indirect_jump, k.coroutine_swap
            ));
            print(&text)?;
        }
    }
    Ok(0)
}

fn simulate(ctx: &Env, args: &SimulateArgs) -> CliResult<u8> {
    let format = ctx.format(&args.out)?;
    let config = ctx.single_config(args.profile.as_deref(), args.queue_depth, &args.sim)?;
    let records = read_trace(&args.trace)?;
    let report = run(&records, &config)?;
    print(&emit_report(&report, format))?;
    Ok(violation_status(std::slice::from_ref(&report)))
}

fn compare(ctx: &Env, args: &CompareArgs) -> CliResult<u8> {
    let format = ctx.format(&args.out)?;
    let base = ctx.base_config(&args.sim)?;
    let depths = match (&args.queue_depth[..], &ctx.file.queue_depths) {
        ([], Some(d)) => d.clone(),
        ([], None) => vec![1, 8],
        (d, _) => d.to_vec(),
    };
    let names: Vec<String> = match (&args.profile[..], &ctx.file.profiles) {
        ([], Some(p)) => p.clone(),
        ([], None) => FirmwareProfile::builtins()
            .iter()
            .map(|p| p.name.clone())
            .collect(),
        (p, _) => p.to_vec(),
    };
    let mut configs = Vec::new();
    for &depth in &depths {
        let mut c = base.clone();
        c.queue_depth = depth;
        c.validate()?;
        configs.push(c);
    }
    let profiles = names
        .iter()
        .map(|n| ctx.profile(Some(n)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut configs: Vec<SimConfig> = configs
        .into_iter()
        .flat_map(|c| {
            profiles.iter().map(move |p| SimConfig {
                profile: p.clone(),
                ..c.clone()
            })
        })
        .collect();
    // Deterministic order independent of flag order: depth, then cheapest profile first.
    configs.sort_by(|a, b| {
        (a.queue_depth, a.profile.average_latency(), &a.profile.name).cmp(&(
            b.queue_depth,
            b.profile.average_latency(),
            &b.profile.name,
        ))
    });
    configs.dedup_by(|a, b| a.queue_depth == b.queue_depth && a.profile.name == b.profile.name);
    let records = read_trace(&args.trace)?;
    let reports = compare_profiles(&records, &configs)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    print(&emit_reports(&reports, format))?;
    Ok(violation_status(&reports))
}

fn attack(ctx: &Env, args: &AttackArgs) -> CliResult<u8> {
    let format = ctx.format(&args.out)?;
    let config = ctx.single_config(args.profile.as_deref(), args.queue_depth, &args.sim)?;
    let mut records = read_trace(&args.trace)?;
    let k = args.corrupt_return_at;
    let original = records.get(k).map(|r| r.npc);
    let forged = corrupt_return_at(&mut records, k, config.xlen)?;
    eprintln!(
        "injected: return at record {k} redirected from {:#x} to {forged:#x}",
        original.unwrap_or_default()
    );
    let report = run(&records, &config)?;
    print(&emit_report(&report, format))?;
    match report.violations.iter().find(|v| v.trace_index == k) {
        Some(v) => eprintln!("detected: record {k} at cycle {}: {}", v.cycle, v.detail),
        None => eprintln!("warning: corruption at record {k} was not reported"),
    }
    Ok(violation_status(std::slice::from_ref(&report)))
}

/// Built-ins plus every `.toml` table in the profile directory.
fn all_profiles() -> anyhow::Result<Vec<FirmwareProfile>> {
    let mut out: Vec<FirmwareProfile> = FirmwareProfile::builtins().into();
    if let Some(dir) = std::env::var_os(PROFILE_DIR_ENV) {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
            .with_context(|| format!("listing {}", Path::new(&dir).display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "toml"))
            .collect();
        paths.sort();
        for p in paths {
            out.push(FirmwareProfile::load(&p)?);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct ProfileRow {
    #[serde(flatten)]
    profile: FirmwareProfile,
    average_cycles: u64,
}

fn profiles(ctx: &Env, args: &ProfilesArgs) -> CliResult<u8> {
    let format = ctx.format(&args.out)?;
    let all = all_profiles()?;
    match format {
        Format::Json => {
            let rows: Vec<ProfileRow> = all
                .into_iter()
                .map(|p| ProfileRow {
                    average_cycles: p.average_latency(),
                    profile: p,
                })
                .collect();
            print_json(&rows)?;
        }
        Format::Text => {
            let mut text = format!(
                "{:<12} {:<10} {:>6} {:>7} {:>8}\n",
                "profile", "variant", "call", "return", "average"
            );
            for p in &all {
                text.push_str(&format!(
                    "{:<12} {:<10} {:>6} {:>7} {:>8}\n",
                    p.name,
                    p.variant.to_string(),
                    p.call_cycles,
                    p.return_cycles,
                    p.average_latency()
                ));
            }
            if args.breakdown {
                for p in &all {
                    let Some(b) = &p.breakdown else { continue };
                    text.push_str(&format!("\n{}\n", p.name));
                    for (op, ob) in [("call", &b.call), ("return", &b.ret)] {
                        for (domain, cats) in [("irq", &ob.irq), ("cfi", &ob.cfi)] {
                            for (cat, cell) in cats.cells() {
                                let show =
                                    |v: Option<u64>| v.map_or("-".to_owned(), |v| v.to_string());
                                text.push_str(&format!(
                                    "  {op:<7} {domain:<4} {:<8} instr {:>3} cycles {:>3}\n",
                                    format!("{cat:?}").to_lowercase(),
                                    show(cell.instructions),
                                    show(cell.cycles)
                                ));
                            }
                        }
                        text.push_str(&format!("  {op:<7} total {:>27}\n", ob.total_cycles()));
                    }
                }
            }
            print(&text)?;
        }
    }
    Ok(0)
}

fn derive(ctx: &Env, args: &DeriveArgs) -> CliResult<u8> {
    let format = ctx.format(&args.out)?;
    let profiles: Vec<FirmwareProfile> = if args.profile.is_empty() {
        FirmwareProfile::builtins().into()
    } else {
        args.profile
            .iter()
            .map(|n| ctx.profile(Some(n)))
            .collect::<anyhow::Result<_>>()?
    };
    let derived: Vec<_> = profiles
        .iter()
        .map(|p| derive_profile_totals(p, args.tolerance))
        .collect();
    match format {
        Format::Json => print_json(&derived)?,
        Format::Text => {
            let mut text = String::new();
            for (p, d) in profiles.iter().zip(&derived) {
                let u = p.units;
                text.push_str(&format!("{}\n", d.profile));
                if d.irq_entry_exit_cycles > 0 {
                    text.push_str(&format!(
                        "  interrupt entry/exit: {} cycles ({} wake-up + {} accesses x {})\n",
                        d.irq_entry_exit_cycles,
                        u.irq_wakeup_cycles,
                        u.irq_context_accesses,
                        u.rot_mem_cycles_per_access
                    ));
                }
                for c in &d.cells {
                    text.push_str(&format!(
                        "  {:<7} {:<4} {:<8} instr {:>3}  table {:>3}  derived {:>3}  {:?}{}\n",
                        format!("{:?}", c.op).to_lowercase(),
                        format!("{:?}", c.domain).to_lowercase(),
                        format!("{:?}", c.category).to_lowercase(),
                        c.instructions,
                        c.table,
                        c.reconstructed,
                        c.source,
                        if c.flagged {
                            format!("  FLAGGED ({:+})", c.deviation)
                        } else {
                            String::new()
                        }
                    ));
                }
                text.push_str(&format!(
                    "  totals: call {} (table {}), return {} (table {})\n",
                    d.call_cycles, p.call_cycles, d.return_cycles, p.return_cycles
                ));
            }
            print(&text)?;
        }
    }
    Ok(0)
}

fn generate(ctx: &Env, args: &GenArgs) -> CliResult<u8> {
    let d = GenParams::default();
    let params = GenParams {
        n: args.n.unwrap_or(d.n),
        depth: args.depth.unwrap_or(d.depth),
        width: args.width.unwrap_or(d.width),
        gap: args
            .gap
            .unwrap_or(if args.pattern == "gap" { 1000 } else { d.gap }),
        seed: args.seed.or(ctx.file.seed).unwrap_or(d.seed),
        density: args.density.unwrap_or(d.density),
    };
    let records = GeneratorRegistry::with_builtins().generate(&args.pattern, &params)?;
    let text = format!(
        "# gen {} n={} depth={} width={} gap={} seed={} density={}\n{}",
        args.pattern,
        params.n,
        params.depth,
        params.width,
        params.gap,
        params.seed,
        params.density,
        serialize_trace(&records)
    );
    match &args.out {
        Some(path) => {
            std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?
        }
        None => print(&text)?,
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> CliResult<u8> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let ctx = Env {
        file,
        profiles: ProfileRegistry::from_env(),
    };
    match &cli.command {
        Command::Classify(a) => classify(&ctx, a),
        Command::Simulate(a) => simulate(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Profiles(a) => profiles(&ctx, a),
        Command::Derive(a) => derive(&ctx, a),
        Command::Gen(a) => generate(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}
