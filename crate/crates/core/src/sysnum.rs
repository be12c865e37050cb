//! Syscall numbering: the number/name table and the backward data-flow
//! resolver that recovers the accumulator value at a `syscall` instruction.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disasm::{DisasmUnit, FunctionRecord, Instruction, SyscallSite};

const SEEDED_X86_64: &str = include_str!("../data/syscall_64.tbl");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TableError {
    #[error("line {line}: syscall number {number} already assigned")]
    DuplicateNumber { line: usize, number: u32 },
    #[error("line {line}: syscall `{name}` listed twice for abi `{abi}`")]
    DuplicateName {
        line: usize,
        name: String,
        abi: String,
    },
    #[error("line {line}: malformed row `{text}`")]
    MalformedRow { line: usize, text: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub number: u32,
    pub abi: String,
    pub name: String,
}

/// Bidirectional syscall number/name registry in `syscall_64.tbl` row shape.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyscallTable {
    by_number: BTreeMap<u32, TableEntry>,
    by_name: BTreeMap<String, u32>,
}

impl SyscallTable {
    /// The bundled x86_64 table: 335 entries, numbers 0 through 334.
    pub fn x86_64() -> Self {
        load_syscall_table(SEEDED_X86_64).expect("bundled syscall table is well formed")
    }

    pub fn name(&self, number: u32) -> Option<&str> {
        self.by_number.get(&number).map(|e| e.name.as_str())
    }

    pub fn number(&self, name: &str) -> Option<u32> {
        self.by_name.get(name).copied()
    }

    pub fn contains_name(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.by_name.keys().cloned().collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &TableEntry> {
        self.by_number.values()
    }

    pub fn len(&self) -> usize {
        self.by_number.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_number.is_empty()
    }
}

/// Parses `<num> <abi> <name> [<entry>]` rows; `#` comments and blank lines are skipped.
pub fn load_syscall_table(text: &str) -> Result<SyscallTable, TableError> {
    let mut table = SyscallTable::default();
    let mut names_per_abi: BTreeSet<(String, String)> = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        let malformed = || TableError::MalformedRow {
            line,
            text: raw.to_string(),
        };
        if !(3..=4).contains(&fields.len()) {
            return Err(malformed());
        }
        let number: u32 = fields[0].parse().map_err(|_| malformed())?;
        let (abi, name) = (fields[1].to_string(), fields[2].to_string());
        if table.by_number.contains_key(&number) {
            return Err(TableError::DuplicateNumber { line, number });
        }
        if !names_per_abi.insert((abi.clone(), name.clone())) {
            return Err(TableError::DuplicateName { line, name, abi });
        }
        // the same name under a second abi keeps its first number
        table.by_name.entry(name.clone()).or_insert(number);
        table
            .by_number
            .insert(number, TableEntry { number, abi, name });
    }
    Ok(table)
}

/// Register file cell. 64- and 32-bit names of one register share a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Reg {
    Rax,
    Rbx,
    Rcx,
    Rdx,
    Rsi,
    Rdi,
    Rbp,
    Rsp,
    R(u8),
}

/// How an operand names a general-purpose register.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegWidth {
    /// 32- or 64-bit name: a full write of the tracked cell.
    Full,
    /// 8- or 16-bit name: a partial write, which the resolver does not model.
    Partial,
}

/// Parses `%eax`, `%r9d`, `%al`, etc. Non-GPR registers yield `None`.
pub fn parse_register(operand: &str) -> Option<(Reg, RegWidth)> {
    use RegWidth::*;
    let name = operand.strip_prefix('%')?;
    let legacy = |s: &str| -> Option<Reg> {
        Some(match s {
            "ax" => Reg::Rax,
            "bx" => Reg::Rbx,
            "cx" => Reg::Rcx,
            "dx" => Reg::Rdx,
            "si" => Reg::Rsi,
            "di" => Reg::Rdi,
            "bp" => Reg::Rbp,
            "sp" => Reg::Rsp,
            _ => return None,
        })
    };
    if let Some(rest) = name.strip_prefix('r').or_else(|| name.strip_prefix('e')) {
        if let Some(reg) = legacy(rest) {
            return Some((reg, Full));
        }
    }
    if let Some(reg) = legacy(name) {
        return Some((reg, Partial));
    }
    let byte = match name {
        "al" | "ah" => Some(Reg::Rax),
        "bl" | "bh" => Some(Reg::Rbx),
        "cl" | "ch" => Some(Reg::Rcx),
        "dl" | "dh" => Some(Reg::Rdx),
        "sil" => Some(Reg::Rsi),
        "dil" => Some(Reg::Rdi),
        "bpl" => Some(Reg::Rbp),
        "spl" => Some(Reg::Rsp),
        _ => None,
    };
    if let Some(reg) = byte {
        return Some((reg, Partial));
    }
    let digits_end = name
        .strip_prefix('r')?
        .find(|c: char| !c.is_ascii_digit())
        .map(|i| i + 1)
        .unwrap_or(name.len());
    let n: u8 = name[1..digits_end].parse().ok()?;
    if !(8..=15).contains(&n) {
        return None;
    }
    match &name[digits_end..] {
        "" | "d" => Some((Reg::R(n), Full)),
        "w" | "b" => Some((Reg::R(n), Partial)),
        _ => None,
    }
}

/// Parses an AT&T immediate (`$0x3`, `$3`, `$-1`) modulo 2^32.
pub fn parse_immediate(operand: &str) -> Option<u32> {
    let body = operand.strip_prefix('$')?;
    let (negative, body) = match body.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, body),
    };
    let magnitude = match body.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok()?,
        None => body.parse::<u64>().ok()?,
    };
    let value = magnitude as u32;
    Some(if negative {
        value.wrapping_neg()
    } else {
        value
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Imm(u32),
    Reg(Reg),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Mov,
    Add,
    Sub,
}

/// One instruction of the modelled subset: `op src, dst` on full-width registers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Transfer {
    op: Op,
    src: Source,
    dst: Reg,
}

fn decode_transfer(insn: &Instruction) -> Option<Transfer> {
    let op = match insn.mnemonic.as_str() {
        "mov" | "movl" | "movq" => Op::Mov,
        "add" | "addl" | "addq" => Op::Add,
        "sub" | "subl" | "subq" => Op::Sub,
        _ => return None,
    };
    let [src, dst] = insn.operands.as_slice() else {
        return None;
    };
    let (dst, RegWidth::Full) = parse_register(dst)? else {
        return None;
    };
    let src = match parse_immediate(src) {
        Some(v) => Source::Imm(v),
        None => match parse_register(src)? {
            (reg, RegWidth::Full) => Source::Reg(reg),
            (_, RegWidth::Partial) => return None,
        },
    };
    Some(Transfer { op, src, dst })
}

/// Registers an instruction outside the modelled subset may write. Bare
/// register operands count as written; memory operands only read their
/// address registers. Some mnemonics write fixed registers implicitly.
fn clobbers(insn: &Instruction) -> BTreeSet<Reg> {
    let mut out: BTreeSet<Reg> = insn
        .operands
        .iter()
        .filter_map(|op| parse_register(op.trim_start_matches('*')).map(|(r, _)| r))
        .collect();
    let m = insn.mnemonic.as_str();
    let implicit: &[Reg] = if m == "syscall" || m == "sysenter" {
        &[Reg::Rax, Reg::Rcx, Reg::R(11)]
    } else if matches!(
        m,
        "cltq" | "cwtl" | "cbtw" | "cltd" | "cqto" | "cqo" | "cdq" | "cdqe"
    ) || m.starts_with("mul")
        || m.starts_with("imul")
        || m.starts_with("div")
        || m.starts_with("idiv")
        || m.starts_with("rdtsc")
        || m == "cpuid"
        || m.starts_with("cmpxchg")
        || m.starts_with("lods")
        || matches!(m, "in" | "inb" | "inw" | "inl" | "int" | "int3")
        || m.starts_with("rdpid")
        || m == "xgetbv"
    {
        &[Reg::Rax, Reg::Rbx, Reg::Rcx, Reg::Rdx]
    } else if m.starts_with("movs")
        || m.starts_with("stos")
        || m.starts_with("scas")
        || m.starts_with("cmps")
        || m.starts_with("rep")
        || m.starts_with("loop")
    {
        &[Reg::Rax, Reg::Rcx, Reg::Rsi, Reg::Rdi]
    } else if m.starts_with("push")
        || m.starts_with("pop")
        || m.starts_with("ret")
        || m == "leave"
        || m == "enter"
    {
        &[Reg::Rsp, Reg::Rbp]
    } else {
        &[]
    };
    out.extend(implicit.iter().copied());
    out
}

/// Recovers the syscall number at `site` inside `function`.
///
/// Walks backward from the `syscall` instruction collecting the definitions
/// that feed the accumulator, then evaluates that slice forward. Constant
/// loads, register-to-register moves and `add`/`sub` are modelled; any other
/// write to a register the chain depends on, a call, or reaching the function
/// entry with a dependency still open gives `None`.
pub fn resolve_number(function: &FunctionRecord, site: &SyscallSite) -> Option<u32> {
    let pos = function
        .instructions
        .iter()
        .position(|i| i.address == site.site_address && i.is_syscall())?;
    resolve_before(&function.instructions[..pos])
}

/// Resolver core over the instructions preceding a `syscall`.
pub(crate) fn resolve_before(prefix: &[Instruction]) -> Option<u32> {
    let mut live: BTreeSet<Reg> = BTreeSet::from([Reg::Rax]);
    let mut slice: Vec<Transfer> = Vec::new();

    for insn in prefix.iter().rev() {
        if live.is_empty() {
            break;
        }
        if insn.is_call() {
            return None;
        }
        match decode_transfer(insn) {
            Some(t) if live.contains(&t.dst) => {
                slice.push(t);
                if t.op == Op::Mov {
                    live.remove(&t.dst);
                }
                if let Source::Reg(r) = t.src {
                    live.insert(r);
                }
            }
            Some(_) => {}
            None => {
                if clobbers(insn).iter().any(|r| live.contains(r)) {
                    return None;
                }
            }
        }
    }
    if !live.is_empty() {
        return None;
    }

    let mut regs: BTreeMap<Reg, u32> = BTreeMap::new();
    for t in slice.iter().rev() {
        let src = match t.src {
            Source::Imm(v) => v,
            Source::Reg(r) => *regs.get(&r)?,
        };
        let value = match t.op {
            Op::Mov => src,
            Op::Add => regs.get(&t.dst)?.wrapping_add(src),
            Op::Sub => regs.get(&t.dst)?.wrapping_sub(src),
        };
        regs.insert(t.dst, value);
    }
    regs.get(&Reg::Rax).copied()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSyscallSite {
    pub site: SyscallSite,
    pub number: Option<u32>,
    /// Present when the number resolved and the table names it.
    pub name: Option<String>,
}

/// Resolves every syscall site of a unit against `table`.
pub fn resolve_unit(unit: &DisasmUnit, table: &SyscallTable) -> Vec<ResolvedSyscallSite> {
    unit.syscall_sites
        .iter()
        .map(|site| {
            let number = unit
                .function(&site.function)
                .and_then(|f| resolve_number(f, site));
            ResolvedSyscallSite {
                site: site.clone(),
                number,
                name: number.and_then(|n| table.name(n)).map(str::to_string),
            }
        })
        .collect()
}
