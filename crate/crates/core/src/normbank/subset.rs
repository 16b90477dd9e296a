use std::fmt;

use crate::error::{invalid, Result};

/// Largest supported domain count (subset bitmasks are `u32`).
pub const MAX_DOMAINS: usize = 32;

/// Nonempty set of source-domain indices, stored as a bitmask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DomainSubset(u32);

impl DomainSubset {
    pub fn new(bits: u32, n_domains: usize) -> Result<Self> {
        if n_domains == 0 || n_domains > MAX_DOMAINS {
            return invalid(format!("domain count {n_domains} outside 1..={MAX_DOMAINS}"));
        }
        if bits == 0 {
            return invalid("domain subset must be nonempty");
        }
        if n_domains < MAX_DOMAINS && bits >> n_domains != 0 {
            return invalid(format!(
                "domain subset {bits:#b} has members outside 0..{n_domains}"
            ));
        }
        Ok(Self(bits))
    }

    pub fn from_members(members: &[usize], n_domains: usize) -> Result<Self> {
        let mut bits = 0u32;
        for &m in members {
            if m >= n_domains || m >= MAX_DOMAINS {
                return invalid(format!("domain {m} outside 0..{n_domains}"));
            }
            bits |= 1 << m;
        }
        Self::new(bits, n_domains)
    }

    pub fn singleton(domain: usize) -> Self {
        assert!(domain < MAX_DOMAINS);
        Self(1 << domain)
    }

    pub fn full(n_domains: usize) -> Self {
        assert!((1..=MAX_DOMAINS).contains(&n_domains));
        Self(if n_domains == 32 { u32::MAX } else { (1u32 << n_domains) - 1 })
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, domain: usize) -> bool {
        domain < MAX_DOMAINS && self.0 & (1 << domain) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_singleton(self) -> bool {
        self.len() == 1
    }

    pub fn lowest(self) -> usize {
        self.0.trailing_zeros() as usize
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..MAX_DOMAINS).filter(move |&d| self.contains(d))
    }

    pub fn is_disjoint(self, other: Self) -> bool {
        self.0 & other.0 == 0
    }

    /// Identifier used in parameter names, e.g. `d0_2`.
    pub fn key(self) -> String {
        let parts: Vec<String> = self.members().map(|m| m.to_string()).collect();
        format!("d{}", parts.join("_"))
    }

    /// Inverse of [`DomainSubset::key`].
    pub fn parse_key(key: &str, n_domains: usize) -> Result<Self> {
        let Some(body) = key.strip_prefix('d') else {
            return invalid(format!("bad subset key {key:?}"));
        };
        let members = body
            .split('_')
            .map(str::parse::<usize>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| crate::Error::Invalid(format!("bad subset key {key:?}")))?;
        Self::from_members(&members, n_domains)
    }
}

impl fmt::Display for DomainSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.members().map(|m| m.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Disjoint cover of all `n_domains` source domains, groups ordered by their
/// lowest member.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Partition {
    groups: Vec<DomainSubset>,
    n_domains: usize,
}

impl Partition {
    pub fn new(mut groups: Vec<DomainSubset>, n_domains: usize) -> Result<Self> {
        if groups.is_empty() {
            return invalid("partition needs at least one group");
        }
        let mut union = 0u32;
        for g in &groups {
            DomainSubset::new(g.bits(), n_domains)?;
            if union & g.bits() != 0 {
                return invalid(format!("partition groups overlap at {g}"));
            }
            union |= g.bits();
        }
        if union != DomainSubset::full(n_domains).bits() {
            return invalid("partition does not cover every domain");
        }
        groups.sort_by_key(|g| g.lowest());
        Ok(Self { groups, n_domains })
    }

    pub fn all_singletons(n_domains: usize) -> Self {
        Self {
            groups: (0..n_domains).map(DomainSubset::singleton).collect(),
            n_domains,
        }
    }

    pub fn whole(n_domains: usize) -> Self {
        Self {
            groups: vec![DomainSubset::full(n_domains)],
            n_domains,
        }
    }

    pub fn groups(&self) -> &[DomainSubset] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn group_of(&self, domain: usize) -> Option<DomainSubset> {
        self.groups.iter().copied().find(|g| g.contains(domain))
    }

    pub fn is_all_singletons(&self) -> bool {
        self.groups.iter().all(|g| g.is_singleton())
    }

    /// Ordering key: more groups first, then lexicographic bitmasks.
    pub(crate) fn canonical_key(&self) -> (std::cmp::Reverse<usize>, Vec<u32>) {
        (
            std::cmp::Reverse(self.groups.len()),
            self.groups.iter().map(|g| g.bits()).collect(),
        )
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.groups.iter().map(ToString::to_string).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}
