//! API-to-syscall mapping construction and Seccomp profile generation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::callgraph::{
    enumerate_secure_paths, reachable_syscalls, CallGraph, GraphError, PathLimits,
};
use crate::disasm::DisasmUnit;
use crate::sysnum::{ResolvedSyscallSite, SyscallTable};

pub const MAPPING_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProfileError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("API `{0}` is exported by more than one function or library")]
    DuplicateApi(String),
    #[error("imported API `{0}` has no mapping")]
    UnknownApi(String),
    #[error("{0} contributes syscall sites whose number could not be resolved")]
    UnresolvedSites(String),
    #[error("syscall `{0}` is not in the syscall table")]
    UnknownSyscall(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallRecord {
    pub syscall: String,
    pub tainted: bool,
    /// Function names from the API to the syscall-invoking function.
    pub paths: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiRecord {
    /// Graph node that implements the API, e.g. `read@@GLIBC_2.2.5`.
    pub function: String,
    pub syscalls: Vec<SyscallRecord>,
    pub unresolved_sites: usize,
    #[serde(default)]
    pub path_budget_exceeded: bool,
}

impl ApiRecord {
    pub fn syscall(&self, name: &str) -> Option<&SyscallRecord> {
        self.syscalls.iter().find(|s| s.syscall == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionSpan {
    pub name: String,
    pub start: u64,
    pub end: u64,
}

/// The mapping document for one library: its function layout (needed to
/// locate functions at run time) and one record per exported API.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSyscallMapping {
    pub version: u32,
    pub library: String,
    pub functions: Vec<FunctionSpan>,
    pub apis: BTreeMap<String, ApiRecord>,
}

impl ApiSyscallMapping {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("mapping serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Exported APIs of a unit keyed by API name.
pub fn exported_apis(unit: &DisasmUnit) -> Result<BTreeMap<String, String>, ProfileError> {
    let mut apis = BTreeMap::new();
    for f in unit.api_exports() {
        let api = f.api_name.clone().expect("exports carry an api name");
        if apis.insert(api.clone(), f.canonical_name.clone()).is_some() {
            return Err(ProfileError::DuplicateApi(api));
        }
    }
    Ok(apis)
}

/// One record per API in `apis` (API name to graph node).
pub fn build_mapping(
    graph: &CallGraph,
    sites: &[ResolvedSyscallSite],
    apis: &BTreeMap<String, String>,
    limits: PathLimits,
) -> Result<BTreeMap<String, ApiRecord>, ProfileError> {
    let mut out = BTreeMap::new();
    for (api, node) in apis {
        let reach = reachable_syscalls(graph, node, sites)?;
        let mut budget_exceeded = false;
        let mut syscalls = Vec::with_capacity(reach.syscalls.len());
        for (name, &tainted) in &reach.syscalls {
            let mut paths = BTreeSet::new();
            for host in &reach.hosts[name] {
                let found = enumerate_secure_paths(graph, node, name, host, limits)?;
                budget_exceeded |= found.budget_exceeded || found.length_pruned;
                paths.extend(found.paths.into_iter().map(|p| p.functions));
            }
            syscalls.push(SyscallRecord {
                syscall: name.clone(),
                tainted,
                paths: paths.into_iter().collect(),
            });
        }
        out.insert(
            api.clone(),
            ApiRecord {
                function: node.clone(),
                syscalls,
                unresolved_sites: reach.unresolved_sites,
                path_budget_exceeded: budget_exceeded,
            },
        );
    }
    Ok(out)
}

/// Combines per-library mappings; an API exported by two libraries is an error.
pub fn combine_mappings(
    mappings: &[ApiSyscallMapping],
) -> Result<BTreeMap<String, ApiRecord>, ProfileError> {
    let mut out = BTreeMap::new();
    for m in mappings {
        for (api, rec) in &m.apis {
            if out.insert(api.clone(), rec.clone()).is_some() {
                return Err(ProfileError::DuplicateApi(api.clone()));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum DefaultAction {
    #[default]
    Errno,
    Kill,
}

impl DefaultAction {
    pub fn seccomp_name(self) -> &'static str {
        match self {
            DefaultAction::Errno => "SCMP_ACT_ERRNO",
            DefaultAction::Kill => "SCMP_ACT_KILL",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeccompProfile {
    pub allowed: BTreeSet<String>,
    pub blocked: BTreeSet<String>,
    pub suspicious_indirect: BTreeSet<String>,
    pub suspicious_rare: BTreeSet<String>,
    pub default_action: DefaultAction,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DockerProfile {
    default_action: String,
    architectures: Vec<String>,
    syscalls: Vec<DockerRule>,
}

#[derive(Serialize, Deserialize)]
struct DockerRule {
    names: Vec<String>,
    action: String,
}

impl SeccompProfile {
    /// Docker-compatible profile JSON.
    pub fn to_docker_json(&self) -> String {
        let doc = DockerProfile {
            default_action: self.default_action.seccomp_name().to_string(),
            architectures: vec!["SCMP_ARCH_X86_64".to_string()],
            syscalls: vec![DockerRule {
                names: self.allowed.iter().cloned().collect(),
                action: "SCMP_ACT_ALLOW".to_string(),
            }],
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("profile serializes");
        s.push('\n');
        s
    }

    /// Reads back the allowed set of a Docker profile; `blocked` is the rest of `table`.
    pub fn allowed_from_docker_json(text: &str) -> Result<BTreeSet<String>, serde_json::Error> {
        let doc: DockerProfile = serde_json::from_str(text)?;
        Ok(doc
            .syscalls
            .into_iter()
            .filter(|r| r.action == "SCMP_ACT_ALLOW")
            .flat_map(|r| r.names)
            .collect())
    }
}

/// Companion to the Docker profile listing the syscalls that need run-time
/// verification, and what the verifier needs to find their secure paths.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSidecar {
    pub suspicious_indirect: Vec<String>,
    pub suspicious_rare: Vec<String>,
    pub imported_apis: Vec<String>,
    pub embedded_syscalls: Vec<String>,
    pub mapping_files: Vec<String>,
}

impl ProfileSidecar {
    pub fn new(
        profile: &SeccompProfile,
        target: &TargetSyscalls,
        mapping_files: Vec<String>,
    ) -> Self {
        ProfileSidecar {
            suspicious_indirect: profile.suspicious_indirect.iter().cloned().collect(),
            suspicious_rare: profile.suspicious_rare.iter().cloned().collect(),
            imported_apis: target.imported_apis.iter().cloned().collect(),
            embedded_syscalls: target.embedded.iter().cloned().collect(),
            mapping_files,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("sidecar serializes");
        s.push('\n');
        s
    }
}

/// Per-syscall invocation counts merged over one or more traces.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub counts: BTreeMap<String, u64>,
    pub runs: usize,
}

impl TraceSummary {
    pub fn merge(&mut self, other: &TraceSummary) {
        for (name, n) in &other.counts {
            *self.counts.entry(name.clone()).or_default() += n;
        }
        self.runs += other.runs;
    }

    pub fn count(&self, name: &str) -> u64 {
        self.counts.get(name).copied().unwrap_or(0)
    }
}

/// Reads one strace-style log. The syscall name of a line is its maximal
/// leading `[a-z0-9_]+` token; lines without one are skipped.
pub fn load_trace(text: &str) -> TraceSummary {
    let mut summary = TraceSummary {
        runs: 1,
        ..Default::default()
    };
    for line in text.lines() {
        let end = line
            .find(|c: char| !(c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_'))
            .unwrap_or(line.len());
        if end > 0 {
            *summary.counts.entry(line[..end].to_string()).or_default() += 1;
        }
    }
    summary
}

/// What a target binary needs: library APIs it imports and syscalls it
/// issues itself.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TargetSyscalls {
    pub imported_apis: BTreeSet<String>,
    pub embedded: BTreeSet<String>,
    /// Embedded syscall sites whose number could not be resolved.
    pub embedded_unresolved: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileOptions {
    /// Fail on unknown APIs and unresolved sites instead of warning.
    pub strict: bool,
    /// Traced invocations needed for a syscall to count as frequent.
    pub min_count: u64,
    pub default_action: DefaultAction,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            strict: false,
            min_count: 1,
            default_action: DefaultAction::Errno,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileOutcome {
    pub profile: SeccompProfile,
    pub warnings: Vec<String>,
}

/// Partitions `table` into allowed and blocked syscalls for a target.
///
/// In non-strict mode an unknown imported API is skipped with a warning, and
/// an API (or the target itself) with unresolved syscall sites allows the
/// whole table.
pub fn generate_profile(
    apis: &BTreeMap<String, ApiRecord>,
    target: &TargetSyscalls,
    table: &SyscallTable,
    trace: Option<&TraceSummary>,
    options: ProfileOptions,
) -> Result<ProfileOutcome, ProfileError> {
    let mut warnings = Vec::new();
    // syscall -> tainted for every contributing API so far
    let mut from_apis: BTreeMap<String, bool> = BTreeMap::new();
    let mut full_allow = false;

    for api in &target.imported_apis {
        let Some(record) = apis.get(api) else {
            if options.strict {
                return Err(ProfileError::UnknownApi(api.clone()));
            }
            warnings.push(format!("imported API `{api}` has no mapping; skipped"));
            continue;
        };
        if record.unresolved_sites > 0 {
            if options.strict {
                return Err(ProfileError::UnresolvedSites(format!("API `{api}`")));
            }
            warnings.push(format!(
                "API `{api}` reaches {} unresolved syscall site(s); allowing the full table",
                record.unresolved_sites
            ));
            full_allow = true;
        }
        if record.path_budget_exceeded {
            warnings.push(format!(
                "API `{api}`: secure path enumeration hit its budget"
            ));
        }
        for s in &record.syscalls {
            if !table.contains_name(&s.syscall) {
                return Err(ProfileError::UnknownSyscall(s.syscall.clone()));
            }
            from_apis
                .entry(s.syscall.clone())
                .and_modify(|t| *t &= s.tainted)
                .or_insert(s.tainted);
        }
    }

    for name in &target.embedded {
        if !table.contains_name(name) {
            return Err(ProfileError::UnknownSyscall(name.clone()));
        }
    }
    if target.embedded_unresolved > 0 {
        if options.strict {
            return Err(ProfileError::UnresolvedSites(
                "the target binary".to_string(),
            ));
        }
        warnings.push(format!(
            "target has {} unresolved embedded syscall site(s); allowing the full table",
            target.embedded_unresolved
        ));
        full_allow = true;
    }

    let mut allowed: BTreeSet<String> = from_apis.keys().cloned().collect();
    allowed.extend(target.embedded.iter().cloned());
    if full_allow {
        allowed.extend(table.names());
    }
    let blocked: BTreeSet<String> = table.names().difference(&allowed).cloned().collect();

    let suspicious_indirect = from_apis
        .iter()
        .filter(|(name, &tainted)| tainted && !target.embedded.contains(*name))
        .map(|(name, _)| name.clone())
        .collect();
    let suspicious_rare = match trace {
        Some(trace) => allowed
            .iter()
            .filter(|s| trace.count(s) < options.min_count.max(1))
            .cloned()
            .collect(),
        None => BTreeSet::new(),
    };

    Ok(ProfileOutcome {
        profile: SeccompProfile {
            allowed,
            blocked,
            suspicious_indirect,
            suspicious_rare,
            default_action: options.default_action,
        },
        warnings,
    })
}
