//! Trace-driven model of the run-time verification module.
//!
//! Each event carries the registers and the raw user stack captured when a
//! syscall is intercepted. Suspicious syscalls from the target process are
//! allowed only if the invocation path recovered from the stack contains one
//! of the statically derived secure paths.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profilegen::{ApiRecord, FunctionSpan, ProfileSidecar};
use crate::sysnum::SyscallTable;

pub const DEFAULT_SCAN_LIMIT: usize = 512;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerifyError {
    #[error("memory map line {line}: {message}")]
    MalformedMap { line: usize, message: String },
    #[error("memory regions `{0}` and `{1}` overlap")]
    OverlappingRegions(String, String),
    #[error("library `{0}` has no function offset table")]
    MissingOffsets(String),
    #[error("function `{function}` [{start:#x}, {end:#x}) exceeds the {size:#x}-byte region of `{library}`")]
    RegionOverflow {
        library: String,
        function: String,
        start: u64,
        end: u64,
        size: u64,
    },
    #[error("event line {line}: {message}")]
    MalformedEvent { line: usize, message: String },
    #[error("event names unknown syscall `{0}`")]
    UnknownSyscallName(String),
}

/// Half-open address range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddrRange {
    pub lo: u64,
    pub hi: u64,
}

impl AddrRange {
    pub fn contains(&self, addr: u64) -> bool {
        self.lo <= addr && addr < self.hi
    }

    fn overlaps(&self, other: &AddrRange) -> bool {
        self.lo < other.hi && other.lo < self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryRegion {
    pub name: String,
    pub base: u64,
    pub size: u64,
}

impl LibraryRegion {
    pub fn range(&self) -> AddrRange {
        AddrRange {
            lo: self.base,
            hi: self.base + self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMap {
    pub libraries: Vec<LibraryRegion>,
    pub stack: AddrRange,
    pub code_segment: AddrRange,
}

fn parse_hex(token: &str) -> Option<u64> {
    let digits = token
        .strip_prefix("0x")
        .or_else(|| token.strip_prefix("0X"))
        .unwrap_or(token);
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// Parses `lib <name> <base> <size>`, `stack <lo> <hi>` and `code <lo> <hi>`
/// lines. Blank lines and `#` comments are ignored.
pub fn parse_memory_map(text: &str) -> Result<MemoryMap, VerifyError> {
    let mut libraries: Vec<LibraryRegion> = Vec::new();
    let mut stack = None;
    let mut code = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let bad = |message: &str| VerifyError::MalformedMap {
            line,
            message: message.to_string(),
        };
        let fields: Vec<&str> = content.split_whitespace().collect();
        match fields.as_slice() {
            ["lib", name, base, size] => {
                let base = parse_hex(base).ok_or_else(|| bad("bad base address"))?;
                let size = parse_hex(size).ok_or_else(|| bad("bad size"))?;
                if size == 0 || base.checked_add(size).is_none() {
                    return Err(bad("empty or wrapping library region"));
                }
                if libraries.iter().any(|l| l.name == *name) {
                    return Err(bad("library listed twice"));
                }
                libraries.push(LibraryRegion {
                    name: name.to_string(),
                    base,
                    size,
                });
            }
            [kind @ ("stack" | "code"), lo, hi] => {
                let lo = parse_hex(lo).ok_or_else(|| bad("bad low address"))?;
                let hi = parse_hex(hi).ok_or_else(|| bad("bad high address"))?;
                if lo >= hi {
                    return Err(bad("range must satisfy lo < hi"));
                }
                let slot = if *kind == "stack" {
                    &mut stack
                } else {
                    &mut code
                };
                if slot.replace(AddrRange { lo, hi }).is_some() {
                    return Err(bad("range given twice"));
                }
            }
            _ => return Err(bad("unrecognised line")),
        }
    }
    let missing = |what: &str| VerifyError::MalformedMap {
        line: 0,
        message: format!("no {what} range"),
    };
    let map = MemoryMap {
        libraries,
        stack: stack.ok_or_else(|| missing("stack"))?,
        code_segment: code.ok_or_else(|| missing("code"))?,
    };

    let mut regions: Vec<(String, AddrRange)> = map
        .libraries
        .iter()
        .map(|l| (format!("lib {}", l.name), l.range()))
        .collect();
    regions.push(("stack".into(), map.stack));
    regions.push(("code".into(), map.code_segment));
    for (i, (a, ra)) in regions.iter().enumerate() {
        for (b, rb) in &regions[i + 1..] {
            if ra.overlaps(rb) {
                return Err(VerifyError::OverlappingRegions(a.clone(), b.clone()));
            }
        }
    }
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionAddress {
    pub library: String,
    pub name: String,
    pub start: u64,
    pub end: u64,
}

/// Absolute function ranges of every loaded library.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FunctionAddressTable {
    /// Per-library order as supplied.
    pub entries: Vec<FunctionAddress>,
    /// Indices into `entries` sorted by start address.
    by_start: Vec<usize>,
}

impl FunctionAddressTable {
    /// `[min start, max end)` over all functions.
    pub fn span(&self) -> Option<AddrRange> {
        let lo = self.entries.iter().map(|e| e.start).min()?;
        let hi = self.entries.iter().map(|e| e.end).max()?;
        Some(AddrRange { lo, hi })
    }

    pub fn find(&self, addr: u64) -> Option<&FunctionAddress> {
        let idx = self
            .by_start
            .partition_point(|&i| self.entries[i].start <= addr);
        let candidate = &self.entries[*self.by_start.get(idx.checked_sub(1)?)?];
        (addr < candidate.end).then_some(candidate)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Rebases each library's static function offsets onto its load address.
pub fn locate_functions(
    map: &MemoryMap,
    offsets: &BTreeMap<String, Vec<FunctionSpan>>,
) -> Result<FunctionAddressTable, VerifyError> {
    let mut entries = Vec::new();
    for lib in &map.libraries {
        let spans = offsets
            .get(&lib.name)
            .ok_or_else(|| VerifyError::MissingOffsets(lib.name.clone()))?;
        for span in spans {
            if span.start >= span.end || span.end > lib.size {
                return Err(VerifyError::RegionOverflow {
                    library: lib.name.clone(),
                    function: span.name.clone(),
                    start: span.start,
                    end: span.end,
                    size: lib.size,
                });
            }
            entries.push(FunctionAddress {
                library: lib.name.clone(),
                name: span.name.clone(),
                start: lib.base + span.start,
                end: lib.base + span.end,
            });
        }
    }
    let mut by_start: Vec<usize> = (0..entries.len()).collect();
    by_start.sort_by_key(|&i| (entries[i].start, entries[i].end));
    Ok(FunctionAddressTable { entries, by_start })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallEvent {
    /// Identifies the invoking process.
    pub process_tag: String,
    pub syscall_name: String,
    pub rip: u64,
    pub rsp: u64,
    /// Words read upward from `rsp`.
    pub stack_words: Vec<u64>,
}

impl SyscallEvent {
    /// Parses `<tag> <syscall> rip=<hex> rsp=<hex> stack=<hex>[,<hex>...]`.
    pub fn parse(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [tag, name, rip, rsp, stack] = fields.as_slice() else {
            return Err(format!("expected 5 fields, found {}", fields.len()));
        };
        let field = |token: &str, key: &str| -> Result<String, String> {
            token
                .strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| format!("expected `{key}=`, found `{token}`"))
        };
        let hex = |s: &str| parse_hex(s).ok_or_else(|| format!("bad hex word `{s}`"));
        let stack = field(stack, "stack")?;
        let stack_words = if stack.is_empty() {
            Vec::new()
        } else {
            stack.split(',').map(hex).collect::<Result<_, _>>()?
        };
        Ok(SyscallEvent {
            process_tag: tag.to_string(),
            syscall_name: name.to_string(),
            rip: hex(&field(rip, "rip")?)?,
            rsp: hex(&field(rsp, "rsp")?)?,
            stack_words,
        })
    }
}

/// Recovers the invocation path from a stack snapshot, innermost frame first.
///
/// Words inside the span of known functions append the function containing
/// them; the first word inside the code segment ends the scan; anything else
/// is skipped. The function containing `rip` is prepended.
pub fn reconstruct_path(
    event: &SyscallEvent,
    table: &FunctionAddressTable,
    map: &MemoryMap,
) -> Vec<String> {
    let mut path = Vec::new();
    if let Some(f) = table.find(event.rip) {
        path.push(f.name.clone());
    }
    let Some(span) = table.span() else {
        return path;
    };
    for &word in &event.stack_words {
        if span.contains(word) {
            if let Some(f) = table.find(word) {
                path.push(f.name.clone());
            }
        } else if map.code_segment.contains(word) {
            break;
        }
    }
    path
}

/// Whether `needle` occurs in `haystack` in order, not necessarily contiguously.
pub fn is_subsequence<T: PartialEq>(needle: &[T], haystack: &[T]) -> bool {
    let mut rest = haystack.iter();
    needle.iter().all(|n| rest.any(|h| h == n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reason {
    NotTarget,
    NotSuspicious,
    CacheHit,
    PathMatched,
    RspOutOfRange,
    RipOutOfRange,
    NoPathMatch,
}

impl Reason {
    pub fn decision(self) -> Decision {
        match self {
            Reason::RspOutOfRange | Reason::RipOutOfRange | Reason::NoPathMatch => Decision::Deny,
            _ => Decision::Allow,
        }
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub reason: Reason,
    pub reconstructed_path: Vec<String>,
}

impl Verdict {
    fn new(reason: Reason, reconstructed_path: Vec<String>) -> Self {
        Verdict {
            decision: reason.decision(),
            reason,
            reconstructed_path,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// Verify syscalls reachable only through indirect calls.
    #[default]
    IndirectOnly,
    /// Verify syscalls not seen in the dynamic traces.
    RareOnly,
}

/// (process tag, syscall) pairs already verified.
#[derive(Debug, Default)]
pub struct VerdictCache {
    inner: RwLock<BTreeSet<(String, String)>>,
}

impl VerdictCache {
    pub fn contains(&self, tag: &str, syscall: &str) -> bool {
        self.inner
            .read()
            .expect("verdict cache poisoned")
            .contains(&(tag.to_string(), syscall.to_string()))
    }

    fn insert(&self, tag: &str, syscall: &str) {
        self.inner
            .write()
            .expect("verdict cache poisoned")
            .insert((tag.to_string(), syscall.to_string()));
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("verdict cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything `verify_event` consults.
#[derive(Debug)]
pub struct Verifier {
    pub target_tag: String,
    pub policy: Policy,
    pub suspicious_indirect: BTreeSet<String>,
    pub suspicious_rare: BTreeSet<String>,
    /// Secure paths per syscall, API first.
    pub secure_paths: BTreeMap<String, Vec<Vec<String>>>,
    /// Syscalls the target issues from its own code segment.
    pub embedded: BTreeSet<String>,
    pub known_syscalls: BTreeSet<String>,
    pub map: MemoryMap,
    pub functions: FunctionAddressTable,
    pub scan_limit: usize,
    pub cache: VerdictCache,
}

impl Verifier {
    /// Assembles a verifier from the profile sidecar and library mappings.
    /// Secure paths come from the APIs the sidecar lists as imported, or from
    /// every API when it lists none.
    pub fn from_parts(
        target_tag: &str,
        policy: Policy,
        sidecar: &ProfileSidecar,
        apis: &BTreeMap<String, ApiRecord>,
        table: &SyscallTable,
        map: MemoryMap,
        functions: FunctionAddressTable,
    ) -> Self {
        let imported: BTreeSet<&str> = sidecar.imported_apis.iter().map(String::as_str).collect();
        let mut secure_paths: BTreeMap<String, BTreeSet<Vec<String>>> = BTreeMap::new();
        for (api, record) in apis {
            if !imported.is_empty() && !imported.contains(api.as_str()) {
                continue;
            }
            for s in &record.syscalls {
                secure_paths
                    .entry(s.syscall.clone())
                    .or_default()
                    .extend(s.paths.iter().cloned());
            }
        }
        Verifier {
            target_tag: target_tag.to_string(),
            policy,
            suspicious_indirect: sidecar.suspicious_indirect.iter().cloned().collect(),
            suspicious_rare: sidecar.suspicious_rare.iter().cloned().collect(),
            secure_paths: secure_paths
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            embedded: sidecar.embedded_syscalls.iter().cloned().collect(),
            known_syscalls: table.names(),
            map,
            functions,
            scan_limit: DEFAULT_SCAN_LIMIT,
            cache: VerdictCache::default(),
        }
    }

    fn suspicious(&self) -> &BTreeSet<String> {
        match self.policy {
            Policy::IndirectOnly => &self.suspicious_indirect,
            Policy::RareOnly => &self.suspicious_rare,
        }
    }

    pub fn verify_event(&self, event: &SyscallEvent) -> Result<Verdict, VerifyError> {
        let syscall = event.syscall_name.as_str();
        if !self.known_syscalls.contains(syscall) {
            return Err(VerifyError::UnknownSyscallName(syscall.to_string()));
        }
        if event.process_tag != self.target_tag {
            return Ok(Verdict::new(Reason::NotTarget, Vec::new()));
        }
        if !self.suspicious().contains(syscall) {
            return Ok(Verdict::new(Reason::NotSuspicious, Vec::new()));
        }
        if self.cache.contains(&event.process_tag, syscall) {
            return Ok(Verdict::new(Reason::CacheHit, Vec::new()));
        }
        if !self.map.stack.contains(event.rsp) {
            return Ok(Verdict::new(Reason::RspOutOfRange, Vec::new()));
        }
        let rip_in_code = self.map.code_segment.contains(event.rip);
        if !rip_in_code && self.functions.find(event.rip).is_none() {
            return Ok(Verdict::new(Reason::RipOutOfRange, Vec::new()));
        }

        let scanned;
        let event = if event.stack_words.len() > self.scan_limit {
            scanned = SyscallEvent {
                stack_words: event.stack_words[..self.scan_limit].to_vec(),
                ..event.clone()
            };
            &scanned
        } else {
            event
        };
        let path = reconstruct_path(event, &self.functions, &self.map);

        let library_match = self.secure_paths.get(syscall).is_some_and(|paths| {
            paths.iter().any(|p| {
                let innermost_first: Vec<&String> = p.iter().rev().collect();
                let observed: Vec<&String> = path.iter().collect();
                is_subsequence(&innermost_first, &observed)
            })
        });
        let embedded_match = rip_in_code && self.embedded.contains(syscall);

        if library_match || embedded_match {
            self.cache.insert(&event.process_tag, syscall);
            Ok(Verdict::new(Reason::PathMatched, path))
        } else {
            Ok(Verdict::new(Reason::NoPathMatch, path))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerdictLog {
    pub verdicts: Vec<Verdict>,
    pub summary: BTreeMap<Reason, usize>,
}

impl VerdictLog {
    /// One `<index> <decision> <reason> path=<f1>,<f2>,...` line per event.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.verdicts.iter().enumerate() {
            out.push_str(&format!(
                "{i} {} {} path={}\n",
                v.decision,
                v.reason,
                v.reconstructed_path.join(",")
            ));
        }
        out
    }

    pub fn render_summary(&self) -> String {
        let mut out = String::new();
        let allow: usize = self
            .verdicts
            .iter()
            .filter(|v| v.decision == Decision::Allow)
            .count();
        out.push_str(&format!(
            "events={} allow={} deny={}\n",
            self.verdicts.len(),
            allow,
            self.verdicts.len() - allow
        ));
        for (reason, n) in &self.summary {
            out.push_str(&format!("{reason}={n}\n"));
        }
        out
    }
}

/// Parses an event file (blank lines and `#` comments skipped).
pub fn parse_events(text: &str) -> Result<Vec<SyscallEvent>, VerifyError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| {
            SyscallEvent::parse(l).map_err(|message| VerifyError::MalformedEvent {
                line: i + 1,
                message,
            })
        })
        .collect()
}

/// Verifies every event of `text` in order.
pub fn run_event_trace(text: &str, verifier: &Verifier) -> Result<VerdictLog, VerifyError> {
    let events = parse_events(text)?;
    let mut log = VerdictLog::default();
    for event in &events {
        let verdict = verifier.verify_event(event)?;
        *log.summary.entry(verdict.reason).or_default() += 1;
        log.verdicts.push(verdict);
    }
    Ok(log)
}
