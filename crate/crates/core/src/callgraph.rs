//! Function call graph: direct edges from disassembly, indirect edges from
//! resolved source facts, per-API reachability with indirect taint, and
//! bounded enumeration of the simple paths that make up secure paths.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disasm::{CallKind, DisasmUnit};
use crate::srcfacts::{resolve_indirect_targets, SourceFacts};
use crate::sysnum::ResolvedSyscallSite;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("indirect edge from unknown caller `{caller}` (site {site_id})")]
    UnknownCaller { caller: String, site_id: String },
    #[error("unknown API `{0}`")]
    UnknownApi(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub caller: String,
    pub callee: String,
    pub kind: CallKind,
    pub site_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<Edge>,
}

impl CallGraph {
    pub fn add_edge(&mut self, edge: Edge) {
        self.nodes.insert(edge.caller.clone());
        self.nodes.insert(edge.callee.clone());
        self.edges.insert(edge);
    }

    /// Adjacency view with names interned to dense indices.
    pub fn index(&self) -> GraphIndex<'_> {
        GraphIndex::new(self)
    }
}

pub fn build_direct_fcg(unit: &DisasmUnit) -> CallGraph {
    let mut graph = CallGraph {
        nodes: unit
            .functions
            .iter()
            .map(|f| f.canonical_name.clone())
            .collect(),
        edges: BTreeSet::new(),
    };
    for site in &unit.callsites {
        if let (CallKind::Direct, Some(target)) = (site.kind, &site.target) {
            graph.add_edge(Edge {
                caller: site.caller.clone(),
                callee: target.clone(),
                kind: CallKind::Direct,
                site_id: site.site_id.clone(),
            });
        }
    }
    graph
}

pub fn build_indirect_edges(facts: &SourceFacts) -> BTreeSet<Edge> {
    facts
        .indirect_sites
        .iter()
        .flat_map(|site| {
            resolve_indirect_targets(site, facts)
                .into_iter()
                .map(move |callee| Edge {
                    caller: site.caller.clone(),
                    callee,
                    kind: CallKind::Indirect,
                    site_id: site.site_id.clone(),
                })
        })
        .collect()
}

/// Unions the indirect edges into the direct graph. Every indirect caller
/// must already be a node; callees that are not yet nodes are added.
pub fn merge(direct: &CallGraph, indirect: &BTreeSet<Edge>) -> Result<CallGraph, GraphError> {
    let mut graph = direct.clone();
    for edge in indirect {
        if !direct.nodes.contains(&edge.caller) {
            return Err(GraphError::UnknownCaller {
                caller: edge.caller.clone(),
                site_id: edge.site_id.clone(),
            });
        }
        graph.add_edge(edge.clone());
    }
    Ok(graph)
}

pub struct GraphIndex<'g> {
    names: Vec<&'g str>,
    ids: BTreeMap<&'g str, usize>,
    /// Per node: (neighbor, has_direct_edge), sorted by neighbor name.
    succ: Vec<Vec<(usize, bool)>>,
    pred: Vec<Vec<usize>>,
}

impl<'g> GraphIndex<'g> {
    fn new(graph: &'g CallGraph) -> Self {
        let names: Vec<&str> = graph.nodes.iter().map(String::as_str).collect();
        let ids: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let mut merged: Vec<BTreeMap<usize, bool>> = vec![BTreeMap::new(); names.len()];
        for e in &graph.edges {
            let (a, b) = (ids[e.caller.as_str()], ids[e.callee.as_str()]);
            let direct = merged[a].entry(b).or_insert(false);
            *direct |= e.kind == CallKind::Direct;
        }
        // node ids follow name order, so BTreeMap iteration is already sorted by name
        let succ: Vec<Vec<(usize, bool)>> = merged
            .into_iter()
            .map(|m| m.into_iter().collect())
            .collect();
        let mut pred = vec![Vec::new(); names.len()];
        for (a, out) in succ.iter().enumerate() {
            for &(b, _) in out {
                pred[b].push(a);
            }
        }
        GraphIndex {
            names,
            ids,
            succ,
            pred,
        }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &'g str {
        self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Breadth-first reachability from `start`, optionally over direct edges only.
    pub fn bfs(&self, start: usize, direct_only: bool) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(node) = queue.pop_front() {
            for &(next, direct) in &self.succ[node] {
                if (direct || !direct_only) && !seen[next] {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
        }
        seen
    }

    /// Edge count of the shortest path from each node to `target` that
    /// avoids every node marked in `blocked`.
    fn distances_to(&self, target: usize, blocked: &[bool]) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.len()];
        let mut queue = VecDeque::from([target]);
        dist[target] = Some(0);
        while let Some(node) = queue.pop_front() {
            let d = dist[node].map(|d| d + 1);
            for &p in &self.pred[node] {
                if dist[p].is_none() && !blocked[p] {
                    dist[p] = d;
                    queue.push_back(p);
                }
            }
        }
        dist
    }
}

/// Syscalls reachable from one API.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reachability {
    /// Syscall name to taint. Tainted means no all-direct path reaches any host of it.
    pub syscalls: BTreeMap<String, bool>,
    /// Reachable sites whose syscall could not be named.
    pub unresolved_sites: usize,
    /// Reachable host functions per syscall name.
    pub hosts: BTreeMap<String, BTreeSet<String>>,
}

pub fn reachable_syscalls(
    graph: &CallGraph,
    api: &str,
    sites: &[ResolvedSyscallSite],
) -> Result<Reachability, GraphError> {
    let index = graph.index();
    let start = index
        .id(api)
        .ok_or_else(|| GraphError::UnknownApi(api.to_string()))?;
    let any = index.bfs(start, false);
    let direct = index.bfs(start, true);

    let mut out = Reachability::default();
    for site in sites {
        let Some(host) = index.id(&site.site.function) else {
            continue;
        };
        if !any[host] {
            continue;
        }
        match &site.name {
            Some(name) => {
                let tainted = !direct[host];
                out.syscalls
                    .entry(name.clone())
                    .and_modify(|t| *t &= tainted)
                    .or_insert(tainted);
                out.hosts
                    .entry(name.clone())
                    .or_default()
                    .insert(site.site.function.clone());
            }
            None => out.unresolved_sites += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathLimits {
    /// Maximum nodes per path.
    pub max_len: usize,
    pub max_paths: usize,
}

impl Default for PathLimits {
    fn default() -> Self {
        PathLimits {
            max_len: 64,
            max_paths: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SecurePath {
    pub api: String,
    pub syscall_name: String,
    /// From the API (first) to the syscall-invoking function (last).
    pub functions: Vec<String>,
    /// Some hop along the path exists only as an indirect edge.
    pub tainted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathEnumeration {
    pub paths: Vec<SecurePath>,
    /// More than `max_paths` simple paths exist; `paths` holds the first `max_paths`.
    pub budget_exceeded: bool,
    /// Some simple path was dropped for exceeding `max_len`.
    pub length_pruned: bool,
}

/// All simple paths from `api` to `host`, in lexicographic order of node names.
pub fn enumerate_secure_paths(
    graph: &CallGraph,
    api: &str,
    syscall_name: &str,
    host: &str,
    limits: PathLimits,
) -> Result<PathEnumeration, GraphError> {
    let index = graph.index();
    let start = index
        .id(api)
        .ok_or_else(|| GraphError::UnknownApi(api.to_string()))?;
    let mut out = PathEnumeration::default();
    let Some(target) = index.id(host) else {
        return Ok(out);
    };
    let Some(shortest) = index.distances_to(target, &vec![false; index.len()])[start] else {
        return Ok(out);
    };
    if limits.max_paths == 0 || shortest + 1 > limits.max_len {
        out.budget_exceeded = limits.max_paths == 0;
        out.length_pruned = shortest + 1 > limits.max_len;
        return Ok(out);
    }

    let mut walker = PathWalker {
        index: &index,
        target,
        limits,
        on_path: vec![false; index.len()],
        stack: vec![start],
        hop_tainted: Vec::new(),
        found: Vec::new(),
        budget_exceeded: false,
        length_pruned: false,
    };
    walker.on_path[start] = true;
    walker.walk(start);

    out.budget_exceeded = walker.budget_exceeded;
    out.length_pruned = walker.length_pruned;
    out.paths = walker
        .found
        .into_iter()
        .map(|(nodes, tainted)| SecurePath {
            api: api.to_string(),
            syscall_name: syscall_name.to_string(),
            functions: nodes
                .into_iter()
                .map(|n| index.name(n).to_string())
                .collect(),
            tainted,
        })
        .collect();
    Ok(out)
}

struct PathWalker<'a, 'g> {
    index: &'a GraphIndex<'g>,
    target: usize,
    limits: PathLimits,
    on_path: Vec<bool>,
    stack: Vec<usize>,
    hop_tainted: Vec<bool>,
    found: Vec<(Vec<usize>, bool)>,
    budget_exceeded: bool,
    length_pruned: bool,
}

impl PathWalker<'_, '_> {
    /// Returns false once the path budget is exhausted.
    fn walk(&mut self, node: usize) -> bool {
        if node == self.target {
            if self.found.len() == self.limits.max_paths {
                self.budget_exceeded = true;
                return false;
            }
            let tainted = self.hop_tainted.iter().any(|&t| t);
            self.found.push((self.stack.clone(), tainted));
            return true;
        }
        // every branch taken below completes at least one path, so work
        // stays proportional to the paths produced
        let dist = self.index.distances_to(self.target, &self.on_path);
        for &(next, direct) in &self.index.succ[node] {
            if self.on_path[next] {
                continue;
            }
            let Some(d) = dist[next] else {
                continue;
            };
            if self.stack.len() + 1 + d > self.limits.max_len {
                self.length_pruned = true;
                continue;
            }
            self.on_path[next] = true;
            self.stack.push(next);
            self.hop_tainted.push(!direct);
            let keep_going = self.walk(next);
            self.hop_tainted.pop();
            self.stack.pop();
            self.on_path[next] = false;
            if !keep_going {
                return false;
            }
        }
        true
    }
}
