//! Independent oracles and random input generators shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use syslimit::callgraph::{CallGraph, Edge};
use syslimit::disasm::{parse_disassembly, CallKind, SyscallSite};
use syslimit::sysnum::{resolve_unit, ResolvedSyscallSite, SyscallTable};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn node(i: usize) -> String {
    format!("f{i:02}")
}

// ---------------------------------------------------------------- graphs

pub const SYSCALL_POOL: &[&str] = &[
    "read", "write", "open", "close", "ioctl", "mmap", "kill", "lseek",
];

#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize, CallKind)>,
    /// Host node and syscall name; `None` marks an unresolved site.
    pub sites: Vec<(usize, Option<&'static str>)>,
}

impl RandomGraph {
    pub fn generate(rng: &mut impl Rng, max_nodes: usize) -> Self {
        let n = rng.gen_range(1..=max_nodes);
        let density = rng.gen_range(0.02..0.2);
        let indirect_share = rng.gen_range(0.0..0.6);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in 0..n {
                if rng.gen_bool(density) {
                    let kind = if rng.gen_bool(indirect_share) {
                        CallKind::Indirect
                    } else {
                        CallKind::Direct
                    };
                    edges.push((a, b, kind));
                    if rng.gen_bool(0.05) {
                        let other = match kind {
                            CallKind::Direct => CallKind::Indirect,
                            CallKind::Indirect => CallKind::Direct,
                        };
                        edges.push((a, b, other));
                    }
                }
            }
        }
        let mut sites = Vec::new();
        for host in 0..n {
            while rng.gen_bool(0.3) {
                let name = if rng.gen_bool(0.1) {
                    None
                } else {
                    Some(*SYSCALL_POOL.choose(rng).unwrap())
                };
                sites.push((host, name));
            }
        }
        RandomGraph { n, edges, sites }
    }

    pub fn call_graph(&self) -> CallGraph {
        let mut g = CallGraph {
            nodes: (0..self.n).map(node).collect(),
            edges: BTreeSet::new(),
        };
        for (k, &(a, b, kind)) in self.edges.iter().enumerate() {
            g.add_edge(Edge {
                caller: node(a),
                callee: node(b),
                kind,
                site_id: format!("{}#{k}", node(a)),
            });
        }
        g
    }

    pub fn resolved_sites(&self) -> Vec<ResolvedSyscallSite> {
        self.sites
            .iter()
            .enumerate()
            .map(|(k, &(host, name))| ResolvedSyscallSite {
                site: SyscallSite {
                    function: node(host),
                    site_address: 0x1000 + k as u64,
                },
                number: name.map(|_| 0),
                name: name.map(str::to_string),
            })
            .collect()
    }

    pub fn has_direct(&self, a: usize, b: usize) -> bool {
        self.edges
            .iter()
            .any(|&(x, y, k)| x == a && y == b && k == CallKind::Direct)
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.iter().any(|&(x, y, _)| x == a && y == b)
    }
}

/// Reflexive-transitive closure by Floyd-Warshall over the selected edges.
pub fn closure(n: usize, edges: &[(usize, usize, CallKind)], direct_only: bool) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; n]; n];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b, kind) in edges {
        if !direct_only || kind == CallKind::Direct {
            r[a][b] = true;
        }
    }
    for k in 0..n {
        let via = r[k].clone();
        for row in r.iter_mut() {
            if row[k] {
                for (cell, &step) in row.iter_mut().zip(&via) {
                    *cell |= step;
                }
            }
        }
    }
    r
}

/// Syscall name to taint, plus the unresolved-site count, for one API.
pub fn expected_reachability(g: &RandomGraph, api: usize) -> (BTreeMap<String, bool>, usize) {
    let any = closure(g.n, &g.edges, false);
    let direct = closure(g.n, &g.edges, true);
    let mut out: BTreeMap<String, bool> = BTreeMap::new();
    let mut unresolved = 0;
    for &(host, name) in &g.sites {
        if !any[api][host] {
            continue;
        }
        match name {
            Some(name) => {
                let certified = direct[api][host];
                let e = out.entry(name.to_string()).or_insert(true);
                *e = *e && !certified;
            }
            None => unresolved += 1,
        }
    }
    (out, unresolved)
}

/// Every simple path from `from` to `to` with its taint, sorted by names.
pub fn all_simple_paths(g: &RandomGraph, from: usize, to: usize) -> Vec<(Vec<String>, bool)> {
    fn go(
        g: &RandomGraph,
        cur: usize,
        to: usize,
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur == to {
            out.push(path.clone());
            return;
        }
        for next in 0..g.n {
            if g.has_edge(cur, next) && !path.contains(&next) {
                path.push(next);
                go(g, next, to, path, out);
                path.pop();
            }
        }
    }
    let mut raw = Vec::new();
    go(g, from, to, &mut vec![from], &mut raw);
    let mut out: Vec<(Vec<String>, bool)> = raw
        .into_iter()
        .map(|p| {
            let tainted = p.windows(2).any(|w| !g.has_direct(w[0], w[1]));
            (p.into_iter().map(node).collect(), tainted)
        })
        .collect();
    out.sort();
    out
}

/// Taint by exhaustive path search: some syscall is untainted iff an
/// all-direct simple path reaches one of its hosts.
pub fn taint_by_paths(g: &RandomGraph, api: usize) -> BTreeMap<String, bool> {
    let mut out: BTreeMap<String, bool> = BTreeMap::new();
    for &(host, name) in &g.sites {
        let Some(name) = name else { continue };
        let paths = all_simple_paths(g, api, host);
        if paths.is_empty() {
            continue;
        }
        let certified = paths.iter().any(|(_, t)| !t);
        let e = out.entry(name.to_string()).or_insert(true);
        *e = *e && !certified;
    }
    out
}

// ------------------------------------------------------ syscall numbers

pub const REGS: &[(&str, &str, &str)] = &[
    ("%eax", "%rax", "%al"),
    ("%ebx", "%rbx", "%bl"),
    ("%ecx", "%rcx", "%cl"),
    ("%edx", "%rdx", "%dl"),
    ("%esi", "%rsi", "%sil"),
    ("%edi", "%rdi", "%dil"),
    ("%r8d", "%r8", "%r8b"),
    ("%r9d", "%r9", "%r9b"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Mov,
    Add,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Imm(u32),
    Reg(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unsupported {
    PartialMov,
    Xor,
    Pop,
    Lea,
    Call,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenInsn {
    Op {
        op: ArithOp,
        src: Src,
        dst: usize,
        wide: bool,
    },
    Unsupported {
        kind: Unsupported,
        reg: usize,
    },
    Nop,
}

impl GenInsn {
    pub fn random_supported(
        rng: &mut impl Rng,
        nregs: usize,
        imm: &mut impl FnMut(&mut dyn rand::RngCore) -> u32,
    ) -> Self {
        let op = *[ArithOp::Mov, ArithOp::Mov, ArithOp::Add, ArithOp::Sub]
            .choose(rng)
            .unwrap();
        let src = if rng.gen_bool(0.5) {
            Src::Imm(imm(rng))
        } else {
            Src::Reg(rng.gen_range(0..nregs))
        };
        GenInsn::Op {
            op,
            src,
            dst: rng.gen_range(0..nregs),
            wide: rng.gen_bool(0.5),
        }
    }

    pub fn render(&self, rng: &mut impl Rng) -> String {
        match *self {
            GenInsn::Op { op, src, dst, wide } => {
                let base = match op {
                    ArithOp::Mov => "mov",
                    ArithOp::Add => "add",
                    ArithOp::Sub => "sub",
                };
                let suffix = match rng.gen_range(0..2) {
                    0 => "",
                    _ if wide => "q",
                    _ => "l",
                };
                let reg = |r: usize| if wide { REGS[r].1 } else { REGS[r].0 };
                let src = match src {
                    Src::Imm(v) => render_imm(v, rng),
                    Src::Reg(r) => reg(r).to_string(),
                };
                format!("{base}{suffix:<3} {src},{}", reg(dst))
            }
            GenInsn::Unsupported { kind, reg } => match kind {
                Unsupported::PartialMov => format!("mov    $0x1,{}", REGS[reg].2),
                Unsupported::Xor => format!("xor    {0},{0}", REGS[reg].0),
                Unsupported::Pop => format!("pop    {}", REGS[reg].1),
                Unsupported::Lea => format!("lea    0x8(%rsp),{}", REGS[reg].0),
                Unsupported::Call => "callq  *0x10(%r12)".to_string(),
            },
            GenInsn::Nop => "nop".to_string(),
        }
    }
}

fn render_imm(v: u32, rng: &mut impl Rng) -> String {
    match rng.gen_range(0..3) {
        0 => format!("${v}"),
        1 if v > 0x8000_0000 => format!("$-0x{:x}", v.wrapping_neg()),
        _ => format!("$0x{v:x}"),
    }
}

/// Forward interpreter. Registers start undefined; unsupported writes and
/// calls make their destinations undefined; reading undefined is undefined.
pub fn interpret(program: &[GenInsn]) -> Option<u32> {
    let mut regs: Vec<Option<u32>> = vec![None; REGS.len()];
    for insn in program {
        match *insn {
            GenInsn::Op { op, src, dst, .. } => {
                let s = match src {
                    Src::Imm(v) => Some(v),
                    Src::Reg(r) => regs[r],
                };
                regs[dst] = match op {
                    ArithOp::Mov => s,
                    ArithOp::Add => regs[dst].zip(s).map(|(a, b)| a.wrapping_add(b)),
                    ArithOp::Sub => regs[dst].zip(s).map(|(a, b)| a.wrapping_sub(b)),
                };
            }
            GenInsn::Unsupported {
                kind: Unsupported::Call,
                ..
            } => regs.iter_mut().for_each(|r| *r = None),
            GenInsn::Unsupported { reg, .. } => regs[reg] = None,
            GenInsn::Nop => {}
        }
    }
    regs[0]
}

/// SDIS text of one function `f` made of `program` followed by a syscall.
pub fn program_sdis(program: &[GenInsn], rng: &mut impl Rng) -> String {
    let mut text = String::from("0000000000001000 <f>:\n");
    let mut addr = 0x1000u64;
    for insn in program {
        writeln!(text, "    {addr:x}:\t{}", insn.render(rng)).unwrap();
        addr += 4;
    }
    writeln!(text, "    {addr:x}:\tsyscall").unwrap();
    writeln!(text, "    {:x}:\tret", addr + 2).unwrap();
    text
}

/// Runs the library resolver on `program` through the SDIS parser.
pub fn resolve_program(program: &[GenInsn], rng: &mut impl Rng) -> Option<u32> {
    let text = program_sdis(program, rng);
    let unit = parse_disassembly("gen", &text).expect("generated SDIS parses");
    let sites = resolve_unit(&unit, &SyscallTable::x86_64());
    assert_eq!(sites.len(), 1);
    sites[0].number
}

pub fn random_imm(rng: &mut dyn rand::RngCore) -> u32 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(0..16),
        1 => rng.gen_range(0..335),
        2 => u32::MAX - rng.gen_range(0..16),
        _ => rng.gen(),
    }
}

pub fn random_program(rng: &mut impl Rng, max_len: usize) -> Vec<GenInsn> {
    let len = rng.gen_range(0..=max_len);
    let nregs = rng.gen_range(1..=REGS.len());
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.05) {
                GenInsn::Nop
            } else {
                GenInsn::random_supported(rng, nregs, &mut random_imm)
            }
        })
        .collect()
}

pub fn random_unsupported(rng: &mut impl Rng) -> GenInsn {
    let kind = *[
        Unsupported::PartialMov,
        Unsupported::Xor,
        Unsupported::Pop,
        Unsupported::Lea,
        Unsupported::Call,
    ]
    .choose(rng)
    .unwrap();
    GenInsn::Unsupported {
        kind,
        reg: rng.gen_range(0..REGS.len()),
    }
}

// ---------------------------------------------------------- source facts

pub const TYPE_POOL: &[&str] = &[
    "int",
    "long",
    "char *",
    "const char *",
    "FILE *",
    "void *",
    "size_t",
    "struct stat *",
];

fn spaced(t: &str, rng: &mut impl Rng) -> String {
    if !rng.gen_bool(0.3) {
        return t.to_string();
    }
    let inner = t.split(' ').collect::<Vec<_>>().join("   ");
    format!(" {inner}  ")
}

/// Random raw facts: the JSON handed to the loader plus the pieces a
/// brute-force resolver needs.
#[derive(Debug, Clone)]
pub struct RandomFacts {
    pub functions: Vec<String>,
    /// alias -> target (possibly another alias)
    pub aliases: BTreeMap<String, String>,
    pub address_taken: Vec<String>,
    pub signatures: Vec<(String, Vec<String>)>,
    pub sites: Vec<(String, String, Vec<String>)>,
}

impl RandomFacts {
    pub fn generate(rng: &mut impl Rng, max_functions: usize) -> Self {
        let n = rng.gen_range(1..=max_functions);
        let pool = &TYPE_POOL[..rng.gen_range(1..=TYPE_POOL.len())];
        let functions: Vec<String> = (0..n).map(node).collect();
        let mut aliases = BTreeMap::new();
        for f in &functions {
            if rng.gen_bool(0.3) {
                let a = format!("__{f}");
                aliases.insert(a.clone(), f.clone());
                if rng.gen_bool(0.3) {
                    aliases.insert(format!("__{f}_alias"), a);
                }
            }
        }
        let spell = |f: &String, rng: &mut ChaCha8Rng| -> String {
            let names: Vec<&String> = std::iter::once(f)
                .chain(
                    aliases
                        .iter()
                        .filter(|(_, t)| resolve_alias(&aliases, t) == *f)
                        .map(|(a, _)| a),
                )
                .collect();
            (*names.choose(rng).unwrap()).clone()
        };
        let mut inner = ChaCha8Rng::seed_from_u64(rng.gen());
        let mut address_taken = Vec::new();
        for f in &functions {
            if inner.gen_bool(0.6) {
                address_taken.push(spell(f, &mut inner));
            }
        }
        let mut signatures = Vec::new();
        for f in &functions {
            if inner.gen_bool(0.85) {
                let len = inner.gen_range(0..=3);
                let mut sig: Vec<String> = (0..len)
                    .map(|_| spaced(pool.choose(&mut inner).unwrap(), &mut inner))
                    .collect();
                if inner.gen_bool(0.2) {
                    sig.push("...".to_string());
                }
                signatures.push((spell(f, &mut inner), sig));
            }
        }
        let sites = (0..inner.gen_range(1..=10))
            .map(|k| {
                let caller = functions.choose(&mut inner).unwrap().clone();
                let len = inner.gen_range(0..=4);
                let params = (0..len)
                    .map(|_| spaced(pool.choose(&mut inner).unwrap(), &mut inner))
                    .collect();
                (format!("{caller}#{k}"), caller, params)
            })
            .collect();
        RandomFacts {
            functions,
            aliases,
            address_taken,
            signatures,
            sites,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "address_taken": self.address_taken,
            "signatures": self.signatures.iter().map(|(f, p)| serde_json::json!({"function": f, "param_types": p})).collect::<Vec<_>>(),
            "indirect_sites": self.sites.iter().map(|(id, c, p)| serde_json::json!({"site_id": id, "caller": c, "param_types": p})).collect::<Vec<_>>(),
            "aliases": self.aliases.iter().map(|(a, t)| serde_json::json!({"alias": a, "canonical": t})).collect::<Vec<_>>(),
        })
        .to_string()
    }

    /// Brute force: every (site, function) pair tested independently.
    pub fn brute_force(&self) -> BTreeMap<String, BTreeSet<String>> {
        let canon_tokens = |v: &Vec<String>| -> Vec<String> {
            v.iter()
                .map(|t| t.split_whitespace().collect::<Vec<_>>().join(" "))
                .collect()
        };
        let taken: BTreeSet<String> = self
            .address_taken
            .iter()
            .map(|a| resolve_alias(&self.aliases, a))
            .collect();
        let sigs: BTreeMap<String, Vec<String>> = self
            .signatures
            .iter()
            .map(|(f, p)| (resolve_alias(&self.aliases, f), canon_tokens(p)))
            .collect();
        let mut out = BTreeMap::new();
        for (id, _, params) in &self.sites {
            let params = canon_tokens(params);
            let mut hits = BTreeSet::new();
            for f in &self.functions {
                if !taken.contains(f) {
                    continue;
                }
                let Some(sig) = sigs.get(f) else { continue };
                let ok = if sig.last().map(String::as_str) == Some("...") {
                    let fixed = &sig[..sig.len() - 1];
                    params.len() >= fixed.len() && (0..fixed.len()).all(|i| params[i] == fixed[i])
                } else {
                    *sig == params
                };
                if ok {
                    hits.insert(f.clone());
                }
            }
            out.insert(id.clone(), hits);
        }
        out
    }
}

pub fn resolve_alias(aliases: &BTreeMap<String, String>, name: &str) -> String {
    let mut cur = name.to_string();
    while let Some(next) = aliases.get(&cur) {
        cur = next.clone();
    }
    cur
}

// -------------------------------------------------------------- fixtures

pub fn fixture(path: &str) -> String {
    let full = format!("{}/fixtures/{path}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read_to_string(&full).unwrap_or_else(|e| panic!("{full}: {e}"))
}

pub fn fixture_path(path: &str) -> String {
    format!("{}/fixtures/{path}", env!("CARGO_MANIFEST_DIR"))
}
