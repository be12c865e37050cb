//! Glue between the analysis stages.

use crate::callgraph::{build_direct_fcg, build_indirect_edges, merge, PathLimits};
use crate::disasm::{extract_plt_imports, DisasmUnit};
use crate::profilegen::{
    build_mapping, exported_apis, ApiSyscallMapping, FunctionSpan, ProfileError, TargetSyscalls,
    MAPPING_VERSION,
};
use crate::srcfacts::SourceFacts;
use crate::sysnum::{resolve_unit, SyscallTable};

/// Library disassembly plus source facts to an API-to-syscall mapping.
pub fn analyze_library(
    unit: &DisasmUnit,
    facts: &SourceFacts,
    table: &SyscallTable,
    limits: PathLimits,
) -> Result<ApiSyscallMapping, ProfileError> {
    let direct = build_direct_fcg(unit);
    let graph = merge(&direct, &build_indirect_edges(facts))?;
    let sites = resolve_unit(unit, table);
    let apis = exported_apis(unit)?;
    Ok(ApiSyscallMapping {
        version: MAPPING_VERSION,
        library: unit.unit_name.clone(),
        functions: unit
            .functions
            .iter()
            .map(|f| FunctionSpan {
                name: f.canonical_name.clone(),
                start: f.start,
                end: f.end,
            })
            .collect(),
        apis: build_mapping(&graph, &sites, &apis, limits)?,
    })
}

/// Imported APIs and embedded syscalls of a target binary.
pub fn target_syscalls(unit: &DisasmUnit, table: &SyscallTable) -> TargetSyscalls {
    let mut target = TargetSyscalls {
        imported_apis: extract_plt_imports(unit),
        ..Default::default()
    };
    for site in resolve_unit(unit, table) {
        match site.name {
            Some(name) => {
                target.embedded.insert(name);
            }
            None => target.embedded_unresolved += 1,
        }
    }
    target
}
