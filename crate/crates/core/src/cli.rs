//! Command-line front end.
//!
//! Exit status: 0 success, 1 usage error (bad flags, missing input file,
//! unwritable output), 2 malformed input, 3 analysis error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::callgraph::PathLimits;
use crate::cve::{load_cve_dataset, mitigation_report, seeded_dataset};
use crate::disasm::parse_disassembly;
use crate::pipeline::{analyze_library, target_syscalls};
use crate::profilegen::{
    combine_mappings, generate_profile, load_trace, ApiSyscallMapping, ProfileOptions,
    ProfileSidecar, SeccompProfile, TraceSummary,
};
use crate::srcfacts::load_source_facts;
use crate::sysnum::{load_syscall_table, SyscallTable};
use crate::verifier::{
    locate_functions, parse_memory_map, run_event_trace, Policy, Verifier, VerifyError,
    DEFAULT_SCAN_LIMIT,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_ANALYSIS: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "syslimit",
    version,
    about = "Derive and verify per-binary syscall allowlists"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the API-to-syscall mapping of a library
    Analyze(AnalyzeArgs),
    /// Generate a Seccomp profile and suspicious-syscall sidecar for a target
    Profile(ProfileArgs),
    /// Replay syscall events through the verifier
    Verify(VerifyArgs),
    /// Report the CVEs mitigated by a profile
    Cve(CveArgs),
    /// Merge strace logs into a trace summary
    TraceMerge(TraceMergeArgs),
}

#[derive(Debug, Args)]
pub struct TableArg {
    /// Syscall table in syscall_64.tbl format (defaults to the bundled x86_64 table)
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Library disassembly
    #[arg(long)]
    pub disasm: PathBuf,
    /// Source facts (JSON)
    #[arg(long)]
    pub facts: PathBuf,
    #[command(flatten)]
    pub table: TableArg,
    /// Mapping output
    #[arg(long)]
    pub out: PathBuf,
    /// Library name recorded in the mapping (defaults to the disassembly file stem)
    #[arg(long)]
    pub library_name: Option<String>,
    #[arg(long, default_value_t = PathLimits::default().max_paths)]
    pub max_paths: usize,
    #[arg(long, default_value_t = PathLimits::default().max_len)]
    pub max_path_len: usize,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Target binary disassembly
    #[arg(long)]
    pub target: PathBuf,
    /// Library mapping (repeatable)
    #[arg(long = "mapping", required = true)]
    pub mappings: Vec<PathBuf>,
    #[command(flatten)]
    pub table: TableArg,
    /// strace log (repeatable)
    #[arg(long = "trace")]
    pub traces: Vec<PathBuf>,
    /// Trace summary produced by trace-merge
    #[arg(long)]
    pub trace_summary: Option<PathBuf>,
    /// Docker-compatible profile output
    #[arg(long)]
    pub out: PathBuf,
    /// Sidecar output (defaults to <out stem>.sidecar.json)
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Fail on unknown APIs and unresolved syscall sites
    #[arg(long)]
    pub strict: bool,
    /// Traced invocations for a syscall to count as frequent
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PolicyArg {
    Indirect,
    Rare,
}

impl From<PolicyArg> for Policy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Indirect => Policy::IndirectOnly,
            PolicyArg::Rare => Policy::RareOnly,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Sidecar written by `profile`
    #[arg(long)]
    pub sidecar: PathBuf,
    /// Library mapping (repeatable; defaults to the files the sidecar names)
    #[arg(long = "mapping")]
    pub mappings: Vec<PathBuf>,
    #[arg(long)]
    pub memory_map: PathBuf,
    #[arg(long)]
    pub events: PathBuf,
    #[arg(long, value_enum, default_value = "indirect")]
    pub policy: PolicyArg,
    /// Process tag of the target
    #[arg(long)]
    pub target_tag: String,
    #[command(flatten)]
    pub table: TableArg,
    #[arg(long, default_value_t = DEFAULT_SCAN_LIMIT)]
    pub scan_limit: usize,
    /// Verdict log output
    #[arg(long)]
    pub out: PathBuf,
    /// Summary output (printed to stdout when absent)
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CveArgs {
    /// CVE dataset (defaults to the bundled seed dataset)
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Docker profile written by `profile`
    #[arg(long)]
    pub profile: PathBuf,
    #[command(flatten)]
    pub table: TableArg,
    /// Reject dataset syscalls missing from the table
    #[arg(long)]
    pub strict: bool,
    /// Report output (printed to stdout when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceMergeArgs {
    /// strace logs
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Display) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.to_string(),
        }
    }

    fn parse(path: &Path, err: impl Display) -> Self {
        CliError {
            code: EXIT_PARSE,
            message: format!("{}: {err}", path.display()),
        }
    }

    fn analysis(err: impl Display) -> Self {
        CliError {
            code: EXIT_ANALYSIS,
            message: err.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Runs the tool on `args` (including the program name) and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Profile(a) => cmd_profile(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Cve(a) => cmd_cve(&a),
        Command::TraceMerge(a) => cmd_trace_merge(&a),
    }
}

fn read_input(path: &Path) -> CliResult<String> {
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "input file {} does not exist",
            path.display()
        )));
    }
    fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn load_table(arg: &TableArg) -> CliResult<SyscallTable> {
    match &arg.table {
        Some(path) => load_syscall_table(&read_input(path)?).map_err(|e| CliError::parse(path, e)),
        None => Ok(SyscallTable::x86_64()),
    }
}

fn load_mapping(path: &Path) -> CliResult<ApiSyscallMapping> {
    ApiSyscallMapping::from_json(&read_input(path)?).map_err(|e| CliError::parse(path, e))
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    // check every input exists before parsing any of them
    for path in [&args.disasm, &args.facts]
        .into_iter()
        .chain(args.table.table.as_ref())
    {
        read_input(path)?;
    }
    let library = args.library_name.clone().unwrap_or_else(|| {
        args.disasm
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "library".to_string())
    });
    let unit = parse_disassembly(&library, &read_input(&args.disasm)?)
        .map_err(|e| CliError::parse(&args.disasm, e))?;
    let facts = load_source_facts(&read_input(&args.facts)?)
        .map_err(|e| CliError::parse(&args.facts, e))?;
    let table = load_table(&args.table)?;
    let limits = PathLimits {
        max_len: args.max_path_len,
        max_paths: args.max_paths,
    };
    let mapping = analyze_library(&unit, &facts, &table, limits).map_err(CliError::analysis)?;
    for (api, rec) in &mapping.apis {
        if rec.unresolved_sites > 0 {
            eprintln!(
                "warning: API `{api}` reaches {} unresolved syscall site(s)",
                rec.unresolved_sites
            );
        }
        if rec.path_budget_exceeded {
            eprintln!("warning: API `{api}`: secure path enumeration hit its budget");
        }
    }
    write_output(&args.out, &mapping.to_json())
}

fn default_sidecar(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.sidecar.json"))
}

pub fn cmd_profile(args: &ProfileArgs) -> CliResult<()> {
    let inputs = [&args.target]
        .into_iter()
        .chain(&args.mappings)
        .chain(&args.traces)
        .chain(args.trace_summary.as_ref())
        .chain(args.table.table.as_ref());
    for path in inputs {
        read_input(path)?;
    }
    let table = load_table(&args.table)?;
    let unit = parse_disassembly("target", &read_input(&args.target)?)
        .map_err(|e| CliError::parse(&args.target, e))?;
    let mappings = args
        .mappings
        .iter()
        .map(|p| load_mapping(p))
        .collect::<CliResult<Vec<_>>>()?;
    let apis = combine_mappings(&mappings).map_err(CliError::analysis)?;

    let mut trace: Option<TraceSummary> = None;
    if let Some(path) = &args.trace_summary {
        let summary: TraceSummary =
            serde_json::from_str(&read_input(path)?).map_err(|e| CliError::parse(path, e))?;
        trace
            .get_or_insert_with(TraceSummary::default)
            .merge(&summary);
    }
    for path in &args.traces {
        trace
            .get_or_insert_with(TraceSummary::default)
            .merge(&load_trace(&read_input(path)?));
    }

    let target = target_syscalls(&unit, &table);
    let options = ProfileOptions {
        strict: args.strict,
        min_count: args.min_count,
        ..Default::default()
    };
    let outcome = generate_profile(&apis, &target, &table, trace.as_ref(), options)
        .map_err(CliError::analysis)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let sidecar = ProfileSidecar::new(
        &outcome.profile,
        &target,
        args.mappings
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    );
    write_output(&args.out, &outcome.profile.to_docker_json())?;
    let sidecar_path = args
        .sidecar
        .clone()
        .unwrap_or_else(|| default_sidecar(&args.out));
    write_output(&sidecar_path, &sidecar.to_json())
}

pub fn cmd_verify(args: &VerifyArgs) -> CliResult<()> {
    for path in [&args.sidecar, &args.memory_map, &args.events]
        .into_iter()
        .chain(&args.mappings)
        .chain(args.table.table.as_ref())
    {
        read_input(path)?;
    }
    let sidecar: ProfileSidecar = serde_json::from_str(&read_input(&args.sidecar)?)
        .map_err(|e| CliError::parse(&args.sidecar, e))?;
    let mapping_paths: Vec<PathBuf> = if args.mappings.is_empty() {
        sidecar.mapping_files.iter().map(PathBuf::from).collect()
    } else {
        args.mappings.clone()
    };
    if mapping_paths.is_empty() {
        return Err(CliError::usage(
            "no mapping files given and none named by the sidecar",
        ));
    }
    let mappings = mapping_paths
        .iter()
        .map(|p| load_mapping(p))
        .collect::<CliResult<Vec<_>>>()?;
    let apis = combine_mappings(&mappings).map_err(CliError::analysis)?;
    let table = load_table(&args.table)?;
    let map = parse_memory_map(&read_input(&args.memory_map)?)
        .map_err(|e| CliError::parse(&args.memory_map, e))?;

    let offsets: BTreeMap<String, _> = mappings
        .iter()
        .map(|m| (m.library.clone(), m.functions.clone()))
        .collect();
    let functions = locate_functions(&map, &offsets).map_err(CliError::analysis)?;

    let mut verifier = Verifier::from_parts(
        &args.target_tag,
        args.policy.into(),
        &sidecar,
        &apis,
        &table,
        map,
        functions,
    );
    verifier.scan_limit = args.scan_limit;

    let log = run_event_trace(&read_input(&args.events)?, &verifier).map_err(|e| match e {
        VerifyError::MalformedEvent { .. } => CliError::parse(&args.events, e),
        other => CliError::analysis(other),
    })?;
    write_output(&args.out, &log.render())?;
    match &args.summary {
        Some(path) => write_output(path, &log.render_summary()),
        None => {
            print!("{}", log.render_summary());
            Ok(())
        }
    }
}

pub fn cmd_cve(args: &CveArgs) -> CliResult<()> {
    for path in [&args.profile]
        .into_iter()
        .chain(&args.dataset)
        .chain(args.table.table.as_ref())
    {
        read_input(path)?;
    }
    let table = load_table(&args.table)?;
    let records = match &args.dataset {
        Some(path) => load_cve_dataset(&read_input(path)?, args.strict.then_some(&table))
            .map_err(|e| CliError::parse(path, e))?,
        None => seeded_dataset(),
    };
    let allowed = SeccompProfile::allowed_from_docker_json(&read_input(&args.profile)?)
        .map_err(|e| CliError::parse(&args.profile, e))?;
    let blocked = table.names().difference(&allowed).cloned().collect();
    let report = mitigation_report(&records, &blocked);
    match &args.out {
        Some(path) => write_output(path, &report.to_json()),
        None => {
            print!("{}", report.to_json());
            Ok(())
        }
    }
}

pub fn cmd_trace_merge(args: &TraceMergeArgs) -> CliResult<()> {
    let mut summary = TraceSummary::default();
    for path in &args.traces {
        summary.merge(&load_trace(&read_input(path)?));
    }
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    write_output(&args.out, &json)
}
