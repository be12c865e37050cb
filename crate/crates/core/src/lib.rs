//! Static derivation of a binary's dependent syscalls and trace-driven
//! verification of suspicious syscall invocations.
//!
//! The static side parses disassembly ([`disasm`]), joins it with
//! source-level facts about indirect calls ([`srcfacts`]), builds the merged
//! call graph ([`callgraph`]), names each `syscall` site ([`sysnum`]) and
//! turns the resulting API-to-syscall mapping into a Seccomp profile
//! ([`profilegen`]). The dynamic side ([`verifier`]) replays intercepted
//! syscall events against the secure paths found statically. [`cve`] counts
//! the vulnerabilities a profile's blocked set mitigates.

pub mod callgraph;
pub mod cli;
pub mod cve;
pub mod disasm;
pub mod pipeline;
pub mod profilegen;
pub mod srcfacts;
pub mod sysnum;
pub mod verifier;

pub use callgraph::{CallGraph, PathLimits, SecurePath};
pub use disasm::{parse_disassembly, DisasmUnit};
pub use profilegen::{ApiSyscallMapping, SeccompProfile, TraceSummary};
pub use srcfacts::{load_source_facts, SourceFacts};
pub use sysnum::SyscallTable;
pub use verifier::{Policy, Verdict, Verifier};
