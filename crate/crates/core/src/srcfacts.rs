//! Source-level facts and the two-layer indirect call resolver.
//!
//! Layer one restricts candidates to address-taken functions; layer two keeps
//! only those whose parameter list matches the callsite's parameter list.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Trailing token marking a variadic signature.
pub const VARIADIC: &str = "...";

#[derive(Debug, Error)]
pub enum FactsError {
    #[error("alias cycle through `{0}`")]
    AliasCycle(String),
    #[error("conflicting signatures for `{function}`: {first} vs {second}")]
    DuplicateSignature {
        function: String,
        first: TypeSignature,
        second: TypeSignature,
    },
    #[error("malformed facts record: {0}")]
    MalformedRecord(String),
}

/// An ordered list of whitespace-canonicalized type tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TypeSignature(Vec<String>);

impl TypeSignature {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        TypeSignature(
            tokens
                .into_iter()
                .map(|t| canonical_type(t.as_ref()))
                .collect(),
        )
    }

    pub fn params(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_variadic(&self) -> bool {
        self.0.last().is_some_and(|t| t == VARIADIC)
    }

    /// Whether a callee with this signature may be the target of a callsite
    /// passing `site` arguments.
    pub fn accepts(&self, site: &TypeSignature) -> bool {
        if self.is_variadic() {
            let fixed = &self.0[..self.0.len() - 1];
            site.0.len() >= fixed.len() && site.0[..fixed.len()] == *fixed
        } else {
            self.0 == site.0
        }
    }
}

impl From<Vec<String>> for TypeSignature {
    fn from(v: Vec<String>) -> Self {
        TypeSignature::new(v)
    }
}

impl From<TypeSignature> for Vec<String> {
    fn from(s: TypeSignature) -> Self {
        s.0
    }
}

impl fmt::Display for TypeSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.0.join(", "))
    }
}

/// Collapses whitespace runs to one space and trims the ends.
pub fn canonical_type(token: &str) -> String {
    token.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndirectSite {
    pub site_id: String,
    pub caller: String,
    pub param_types: TypeSignature,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceFacts {
    pub address_taken: BTreeSet<String>,
    pub indirect_sites: Vec<IndirectSite>,
    pub signatures: BTreeMap<String, TypeSignature>,
    /// Closed: every value is a canonical name that is not itself an alias.
    pub aliases: BTreeMap<String, String>,
}

impl SourceFacts {
    pub fn canonical<'a>(&'a self, name: &'a str) -> &'a str {
        self.aliases.get(name).map(String::as_str).unwrap_or(name)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFacts {
    #[serde(default)]
    address_taken: Vec<String>,
    #[serde(default)]
    indirect_sites: Vec<IndirectSite>,
    #[serde(default)]
    signatures: Vec<RawSignature>,
    #[serde(default)]
    aliases: Vec<RawAlias>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSignature {
    function: String,
    param_types: TypeSignature,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAlias {
    alias: String,
    canonical: String,
}

/// Loads a JSON facts document, closing aliases and canonicalizing names.
/// Blank input is an empty document.
pub fn load_source_facts(text: &str) -> Result<SourceFacts, FactsError> {
    if text.trim().is_empty() {
        return Ok(SourceFacts::default());
    }
    let raw: RawFacts =
        serde_json::from_str(text).map_err(|e| FactsError::MalformedRecord(e.to_string()))?;

    let mut direct: BTreeMap<String, String> = BTreeMap::new();
    for RawAlias { alias, canonical } in raw.aliases {
        require_name(&alias, "alias")?;
        require_name(&canonical, "alias canonical")?;
        if let Some(prev) = direct.get(&alias) {
            if *prev != canonical {
                return Err(FactsError::MalformedRecord(format!(
                    "alias `{alias}` maps to both `{prev}` and `{canonical}`"
                )));
            }
        }
        direct.insert(alias, canonical);
    }
    let aliases = close_aliases(&direct)?;
    let canon = |name: &str| {
        aliases
            .get(name)
            .cloned()
            .unwrap_or_else(|| name.to_string())
    };

    let mut address_taken = BTreeSet::new();
    for name in &raw.address_taken {
        require_name(name, "address_taken entry")?;
        address_taken.insert(canon(name));
    }

    let mut signatures: BTreeMap<String, TypeSignature> = BTreeMap::new();
    for RawSignature {
        function,
        param_types,
    } in raw.signatures
    {
        require_name(&function, "signature function")?;
        let function = canon(&function);
        match signatures.get(&function) {
            Some(existing) if *existing != param_types => {
                return Err(FactsError::DuplicateSignature {
                    function,
                    first: existing.clone(),
                    second: param_types,
                });
            }
            _ => {
                signatures.insert(function, param_types);
            }
        }
    }

    let mut seen_sites = BTreeSet::new();
    let mut indirect_sites = Vec::with_capacity(raw.indirect_sites.len());
    for site in raw.indirect_sites {
        require_name(&site.site_id, "site_id")?;
        require_name(&site.caller, "caller")?;
        if !seen_sites.insert(site.site_id.clone()) {
            return Err(FactsError::MalformedRecord(format!(
                "duplicate site_id `{}`",
                site.site_id
            )));
        }
        indirect_sites.push(IndirectSite {
            caller: canon(&site.caller),
            ..site
        });
    }

    Ok(SourceFacts {
        address_taken,
        indirect_sites,
        signatures,
        aliases,
    })
}

fn require_name(name: &str, what: &str) -> Result<(), FactsError> {
    if name.trim().is_empty() {
        Err(FactsError::MalformedRecord(format!("empty {what}")))
    } else {
        Ok(())
    }
}

fn close_aliases(
    direct: &BTreeMap<String, String>,
) -> Result<BTreeMap<String, String>, FactsError> {
    let mut closed = BTreeMap::new();
    for start in direct.keys() {
        let mut current = start;
        let mut steps = 0;
        while let Some(next) = direct.get(current) {
            current = next;
            steps += 1;
            if steps > direct.len() {
                return Err(FactsError::AliasCycle(start.clone()));
            }
        }
        closed.insert(start.clone(), current.clone());
    }
    Ok(closed)
}

/// Candidate targets of an indirect callsite: address-taken functions whose
/// recorded signature accepts the site's parameter types.
pub fn resolve_indirect_targets(site: &IndirectSite, facts: &SourceFacts) -> BTreeSet<String> {
    facts
        .address_taken
        .iter()
        .filter(|f| {
            facts
                .signatures
                .get(*f)
                .is_some_and(|sig| sig.accepts(&site.param_types))
        })
        .cloned()
        .collect()
}
