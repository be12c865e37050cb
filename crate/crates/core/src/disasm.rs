//! Parser for a constrained, objdump-like textual disassembly format.
//!
//! A document is a sequence of function blocks:
//!
//! ```text
//! 0000000000001130 <read@@GLIBC_2.2.5>:
//!     1130:    mov    $0x0,%eax
//!     1135:    syscall
//! ```
//!
//! Header lines open a function, indented instruction lines belong to the most
//! recent header. A single tab separates an instruction's address from its
//! mnemonic. Anything else (apart from blank lines) is rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

static HEADER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^([0-9a-f]{1,16}) <([^>]+)>:$").unwrap());

static INSN_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s+([0-9a-f]+):\t([a-z0-9.]+)(\s+(\S+(\s*,\s*\S+)*))?(\s+<([^>]+)>)?$").unwrap()
});

/// Symbol suffix that marks a versioned library export.
pub const API_MARKER: &str = "@@";
/// Suffix carried by PLT stubs in a linked executable.
pub const PLT_SUFFIX: &str = "@plt";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DisasmError {
    #[error("line {line}: malformed function header `{text}`")]
    MalformedHeader { line: usize, text: String },
    #[error("line {line}: unrecognised line `{text}`")]
    MalformedLine { line: usize, text: String },
    #[error(
        "line {line}: instruction at {address:#x} does not follow {previous:#x} in `{function}`"
    )]
    AddressOrder {
        line: usize,
        function: String,
        address: u64,
        previous: u64,
    },
    #[error("functions `{first}` and `{second}` overlap")]
    OverlappingFunctions { first: String, second: String },
    #[error("line {line}: function `{name}` defined twice")]
    DuplicateFunction { line: usize, name: String },
    #[error("line {line}: direct call target {address:#x} has no symbol and matches no function")]
    UnresolvedCallTarget { line: usize, address: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: String,
    pub operands: Vec<String>,
    /// The `<name>` annotation, if the line carried one.
    pub symbol: Option<String>,
}

impl Instruction {
    pub fn is_call(&self) -> bool {
        matches!(self.mnemonic.as_str(), "call" | "callq")
    }

    pub fn is_syscall(&self) -> bool {
        self.mnemonic == "syscall"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub canonical_name: String,
    pub start: u64,
    /// Exclusive.
    pub end: u64,
    pub is_api_export: bool,
    pub api_name: Option<String>,
    pub instructions: Vec<Instruction>,
}

impl FunctionRecord {
    fn new(canonical_name: String, start: u64) -> Self {
        let api_name = canonical_name
            .find(API_MARKER)
            .map(|idx| canonical_name[..idx].to_string());
        FunctionRecord {
            is_api_export: api_name.is_some(),
            api_name,
            canonical_name,
            start,
            end: start + 1,
            instructions: Vec::new(),
        }
    }

    pub fn contains(&self, address: u64) -> bool {
        self.start <= address && address < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CallKind {
    Direct,
    Indirect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallSite {
    pub caller: String,
    pub site_address: u64,
    pub kind: CallKind,
    /// Present exactly for direct calls.
    pub target: Option<String>,
    pub site_id: String,
}

/// Builds the `caller#ordinal` key shared with source facts.
pub fn site_id(caller: &str, ordinal: usize) -> String {
    format!("{caller}#{ordinal}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyscallSite {
    pub function: String,
    pub site_address: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisasmUnit {
    pub unit_name: String,
    pub functions: Vec<FunctionRecord>,
    pub callsites: Vec<CallSite>,
    pub syscall_sites: Vec<SyscallSite>,
}

impl DisasmUnit {
    pub fn function(&self, name: &str) -> Option<&FunctionRecord> {
        self.functions.iter().find(|f| f.canonical_name == name)
    }

    pub fn api_exports(&self) -> impl Iterator<Item = &FunctionRecord> {
        self.functions.iter().filter(|f| f.is_api_export)
    }
}

/// Parses SDIS text into a [`DisasmUnit`] named `unit_name`.
pub fn parse_disassembly(unit_name: &str, text: &str) -> Result<DisasmUnit, DisasmError> {
    let mut functions: Vec<FunctionRecord> = Vec::new();
    let mut names: BTreeMap<String, usize> = BTreeMap::new();
    // Direct calls written without a symbol comment, resolved once all headers are known.
    let mut pending_targets: Vec<(usize, usize, u64, usize)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        // objdump pads short instructions with trailing spaces
        let line = raw.trim_end();
        if line.trim().is_empty() {
            continue;
        }

        if !line.starts_with(char::is_whitespace) {
            let caps = HEADER_RE
                .captures(line)
                .ok_or_else(|| DisasmError::MalformedHeader {
                    line: lineno,
                    text: line.to_string(),
                })?;
            let start =
                u64::from_str_radix(&caps[1], 16).map_err(|_| DisasmError::MalformedHeader {
                    line: lineno,
                    text: line.to_string(),
                })?;
            let name = caps[2].to_string();
            if names.insert(name.clone(), functions.len()).is_some() {
                return Err(DisasmError::DuplicateFunction { line: lineno, name });
            }
            functions.push(FunctionRecord::new(name, start));
            continue;
        }

        let caps = INSN_RE
            .captures(line)
            .ok_or_else(|| DisasmError::MalformedLine {
                line: lineno,
                text: line.to_string(),
            })?;
        let func_idx = functions.len().wrapping_sub(1);
        let Some(func) = functions.last_mut() else {
            return Err(DisasmError::MalformedLine {
                line: lineno,
                text: line.to_string(),
            });
        };
        let address =
            u64::from_str_radix(&caps[1], 16).map_err(|_| DisasmError::MalformedLine {
                line: lineno,
                text: line.to_string(),
            })?;
        let previous = func.instructions.last().map(|i| i.address);
        let in_order = match previous {
            Some(prev) => address > prev,
            None => address >= func.start,
        };
        if !in_order {
            return Err(DisasmError::AddressOrder {
                line: lineno,
                function: func.canonical_name.clone(),
                address,
                previous: previous.unwrap_or(func.start),
            });
        }
        let operands = caps
            .get(4)
            .map(|m| split_operands(m.as_str()))
            .unwrap_or_default();
        let insn = Instruction {
            address,
            mnemonic: caps[2].to_string(),
            operands,
            symbol: caps.get(7).map(|m| m.as_str().to_string()),
        };
        if insn.is_call()
            && insn.symbol.is_none()
            && insn.operands.first().is_some_and(|op| !op.starts_with('*'))
        {
            if let Some(target) = parse_hex(&insn.operands[0]) {
                pending_targets.push((func_idx, func.instructions.len(), target, lineno));
            }
        }
        func.end = address + 1;
        func.instructions.push(insn);
    }

    for (fidx, iidx, target, line) in pending_targets {
        let name = functions
            .iter()
            .find(|f| f.start == target)
            .map(|f| f.canonical_name.clone())
            .ok_or(DisasmError::UnresolvedCallTarget {
                line,
                address: target,
            })?;
        functions[fidx].instructions[iidx].symbol = Some(name);
    }

    check_disjoint(&functions)?;

    let mut callsites = Vec::new();
    let mut syscall_sites = Vec::new();
    for func in &functions {
        let mut ordinal = 0;
        for insn in &func.instructions {
            if insn.is_syscall() {
                syscall_sites.push(SyscallSite {
                    function: func.canonical_name.clone(),
                    site_address: insn.address,
                });
            }
            if !insn.is_call() {
                continue;
            }
            let Some(kind) = classify_call(insn) else {
                continue;
            };
            let target = match kind {
                CallKind::Direct => insn.symbol.as_deref().map(strip_symbol_offset),
                CallKind::Indirect => None,
            };
            callsites.push(CallSite {
                caller: func.canonical_name.clone(),
                site_address: insn.address,
                kind,
                target,
                site_id: site_id(&func.canonical_name, ordinal),
            });
            ordinal += 1;
        }
    }

    Ok(DisasmUnit {
        unit_name: unit_name.to_string(),
        functions,
        callsites,
        syscall_sites,
    })
}

fn classify_call(insn: &Instruction) -> Option<CallKind> {
    let op = insn.operands.first()?;
    if op.starts_with('*') {
        Some(CallKind::Indirect)
    } else if parse_hex(op).is_some() && insn.symbol.is_some() {
        Some(CallKind::Direct)
    } else {
        None
    }
}

fn check_disjoint(functions: &[FunctionRecord]) -> Result<(), DisasmError> {
    let mut sorted: Vec<&FunctionRecord> = functions.iter().collect();
    sorted.sort_by_key(|f| (f.start, f.end));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(DisasmError::OverlappingFunctions {
                first: pair[0].canonical_name.clone(),
                second: pair[1].canonical_name.clone(),
            });
        }
    }
    Ok(())
}

/// Splits an operand field on commas that are not inside parentheses,
/// so `0x8(%rax,%rbx,4),%ecx` yields two operands.
fn split_operands(field: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for ch in field.chars() {
        match ch {
            '(' => {
                depth += 1;
                current.push(ch);
            }
            ')' => {
                depth -= 1;
                current.push(ch);
            }
            ',' if depth == 0 => {
                out.push(current.trim().to_string());
                current.clear();
            }
            _ => current.push(ch),
        }
    }
    if !current.trim().is_empty() {
        out.push(current.trim().to_string());
    }
    out
}

fn parse_hex(token: &str) -> Option<u64> {
    let digits = token.strip_prefix("0x").unwrap_or(token);
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

/// `helper+0x10` names the function `helper`.
fn strip_symbol_offset(symbol: &str) -> String {
    match symbol.rfind("+0x") {
        Some(idx) => symbol[..idx].to_string(),
        None => symbol.to_string(),
    }
}

/// Names of library APIs the unit calls through its PLT.
pub fn extract_plt_imports(unit: &DisasmUnit) -> BTreeSet<String> {
    unit.callsites
        .iter()
        .filter(|c| c.kind == CallKind::Direct)
        .filter_map(|c| c.target.as_deref()?.strip_suffix(PLT_SUFFIX))
        .map(str::to_string)
        .collect()
}
