use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use super::subset::{DomainSubset, Partition, MAX_DOMAINS};
use crate::error::{invalid, Error, Result};

fn canonical_sort(parts: &mut Vec<Partition>) {
    parts.sort_by_key(Partition::canonical_key);
    parts.dedup();
}

/// The all-singletons partition plus, for each domain `i`, the two-group
/// partition `{all but i, {i}}`. For two domains the complements coincide
/// with the singletons and only one partition remains.
pub fn enumerate_reduced_combinations(n_domains: usize) -> Result<Vec<Partition>> {
    if !(2..=MAX_DOMAINS).contains(&n_domains) {
        return invalid(format!(
            "reduced combinations need 2..={MAX_DOMAINS} domains, got {n_domains}"
        ));
    }
    let full = DomainSubset::full(n_domains);
    let mut parts = vec![Partition::all_singletons(n_domains)];
    for i in 0..n_domains {
        let single = DomainSubset::singleton(i);
        let rest = DomainSubset::new(full.bits() & !single.bits(), n_domains)?;
        parts.push(Partition::new(vec![rest, single], n_domains)?);
    }
    canonical_sort(&mut parts);
    Ok(parts)
}

/// Every partition made of one merged group of size `2..=N-1` plus
/// singletons, together with the all-singletons partition:
/// `1 + sum_{k=2}^{N-1} C(N, k)` partitions.
pub fn enumerate_full_combinations(n_domains: usize) -> Result<Vec<Partition>> {
    if !(3..=20).contains(&n_domains) {
        return invalid(format!(
            "full combinations need 3..=20 domains, got {n_domains}"
        ));
    }
    let mut parts = vec![Partition::all_singletons(n_domains)];
    for bits in 1u32..(1 << n_domains) {
        let size = bits.count_ones() as usize;
        if size < 2 || size > n_domains - 1 {
            continue;
        }
        let merged = DomainSubset::new(bits, n_domains)?;
        let mut groups = vec![merged];
        groups.extend(
            (0..n_domains)
                .filter(|&d| !merged.contains(d))
                .map(DomainSubset::singleton),
        );
        parts.push(Partition::new(groups, n_domains)?);
    }
    canonical_sort(&mut parts);
    Ok(parts)
}

/// Which family of sub-batch combinations the auxiliary path draws from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CombinationScheme {
    /// N + 1 partitions.
    #[default]
    Reduced,
    /// All single-merge partitions.
    Full,
}

impl CombinationScheme {
    pub fn partitions(self, n_domains: usize) -> Result<Vec<Partition>> {
        match self {
            Self::Reduced => enumerate_reduced_combinations(n_domains),
            Self::Full => enumerate_full_combinations(n_domains),
        }
    }
}

impl fmt::Display for CombinationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Reduced => "reduced",
            Self::Full => "full",
        })
    }
}

impl FromStr for CombinationScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reduced" => Ok(Self::Reduced),
            "full" => Ok(Self::Full),
            _ => invalid(format!("unknown combination scheme {s:?}")),
        }
    }
}

/// Union of groups over `partitions`: the bank units they need.
pub fn required_subsets(partitions: &[Partition]) -> BTreeSet<DomainSubset> {
    partitions
        .iter()
        .flat_map(|p| p.groups().iter().copied())
        .collect()
}
