//! CVE-to-syscall dataset and mitigation accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sysnum::SyscallTable;

const SEED: &str = include_str!("../data/cve_seed.tsv");

static CVE_ID: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^CVE-\d{4}-\d{4,}$").unwrap());

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CveError {
    #[error("line {line}: malformed CVE id `{id}`")]
    MalformedCveId { line: usize, id: String },
    #[error("line {line}: unknown syscall `{name}`")]
    UnknownSyscall { line: usize, name: String },
    #[error("line {line}: malformed row")]
    MalformedRow { line: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CveRecord {
    pub id: String,
    pub syscalls: BTreeSet<String>,
    pub note: String,
}

impl CveRecord {
    pub fn is_synthetic(&self) -> bool {
        self.note.contains("synthetic=true")
    }
}

/// Loads `<CVE-id>\t<syscall[,syscall...]>\t[note]` rows, merging rows that
/// share an id. With `strict` set, every syscall must be in that table.
/// Records come back sorted by id.
pub fn load_cve_dataset(
    text: &str,
    strict: Option<&SyscallTable>,
) -> Result<Vec<CveRecord>, CveError> {
    let mut records: BTreeMap<String, CveRecord> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = raw.splitn(3, '\t');
        let id = fields.next().unwrap_or("").trim();
        let syscalls_field = fields.next().ok_or(CveError::MalformedRow { line })?;
        let note = fields.next().unwrap_or("").trim();
        if !CVE_ID.is_match(id) {
            return Err(CveError::MalformedCveId {
                line,
                id: id.to_string(),
            });
        }
        let syscalls: BTreeSet<String> = syscalls_field
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if syscalls.is_empty() {
            return Err(CveError::MalformedRow { line });
        }
        if let Some(table) = strict {
            if let Some(name) = syscalls.iter().find(|s| !table.contains_name(s)) {
                return Err(CveError::UnknownSyscall {
                    line,
                    name: name.clone(),
                });
            }
        }
        let record = records.entry(id.to_string()).or_insert_with(|| CveRecord {
            id: id.to_string(),
            syscalls: BTreeSet::new(),
            note: String::new(),
        });
        record.syscalls.extend(syscalls);
        if record.note.is_empty() {
            record.note = note.to_string();
        }
    }
    Ok(records.into_values().collect())
}

/// The bundled top-20 dataset.
pub fn seeded_dataset() -> Vec<CveRecord> {
    load_cve_dataset(SEED, Some(&SyscallTable::x86_64()))
        .expect("bundled CVE dataset is well formed")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub mitigated_ids: BTreeSet<String>,
    pub count: usize,
    /// Blocked syscall to the number of CVEs that list it.
    pub per_syscall: BTreeMap<String, usize>,
}

impl MitigationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// A CVE is mitigated when any syscall it lists is blocked.
pub fn mitigation_report(records: &[CveRecord], blocked: &BTreeSet<String>) -> MitigationReport {
    let mut report = MitigationReport::default();
    for r in records {
        let mut hit = false;
        for s in r.syscalls.iter().filter(|s| blocked.contains(*s)) {
            *report.per_syscall.entry(s.clone()).or_default() += 1;
            hit = true;
        }
        if hit {
            report.mitigated_ids.insert(r.id.clone());
        }
    }
    report.count = report.mitigated_ids.len();
    report
}
