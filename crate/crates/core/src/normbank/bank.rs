use std::collections::BTreeMap;

use super::subset::{DomainSubset, Partition};
use super::unit::{BNUnit, BatchMoments, Mode};

/// Train-mode moments of one group, to be folded into that unit's running
/// statistics.
pub type GroupMoments<S> = (DomainSubset, BatchMoments<S>);
use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;

/// BN units keyed by domain subset. Each subset owns exactly one unit, so
/// every partition that mentions a subset reaches the same parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BNBank<S> {
    n_domains: usize,
    channels: usize,
    units: BTreeMap<DomainSubset, BNUnit<S>>,
}

impl<S: Scalar> BNBank<S> {
    pub fn new(
        n_domains: usize,
        channels: usize,
        subsets: impl IntoIterator<Item = DomainSubset>,
        momentum: S,
        eps: S,
    ) -> Result<Self> {
        let mut bank = Self {
            n_domains,
            channels,
            units: BTreeMap::new(),
        };
        for s in subsets {
            bank.insert(s, BNUnit::new(channels, momentum, eps)?)?;
        }
        Ok(bank)
    }

    pub fn n_domains(&self) -> usize {
        self.n_domains
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Adds (or replaces) the unit for `subset`.
    pub fn insert(&mut self, subset: DomainSubset, unit: BNUnit<S>) -> Result<()> {
        DomainSubset::new(subset.bits(), self.n_domains)?;
        if unit.channels() != self.channels {
            return invalid(format!(
                "unit has {} channels, bank expects {}",
                unit.channels(),
                self.channels
            ));
        }
        self.units.insert(subset, unit);
        Ok(())
    }

    pub fn get(&self, subset: DomainSubset) -> Result<&BNUnit<S>> {
        self.units
            .get(&subset)
            .ok_or_else(|| Error::MissingUnit(subset.to_string()))
    }

    pub fn get_mut(&mut self, subset: DomainSubset) -> Result<&mut BNUnit<S>> {
        self.units
            .get_mut(&subset)
            .ok_or_else(|| Error::MissingUnit(subset.to_string()))
    }

    pub fn contains(&self, subset: DomainSubset) -> bool {
        self.units.contains_key(&subset)
    }

    pub fn subsets(&self) -> impl Iterator<Item = DomainSubset> + '_ {
        self.units.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (DomainSubset, &BNUnit<S>)> {
        self.units.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (DomainSubset, &mut BNUnit<S>)> {
        self.units.iter_mut().map(|(k, v)| (*k, v))
    }

    /// Tape parameter prefix for the unit of `subset` under `prefix`.
    pub fn unit_name(prefix: &str, subset: DomainSubset) -> String {
        format!("{prefix}.{}", subset.key())
    }

    /// Normalizes each partition group's rows with that group's unit, using
    /// statistics of those rows only, and reassembles rows in input order.
    /// Returns the per-group train-mode moments without applying them.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        prefix: &str,
        partition: &Partition,
        x: Var,
        domain_ids: &[usize],
        mode: Mode,
    ) -> Result<(Var, Vec<GroupMoments<S>>)> {
        let total = tape.shape(x).first().copied().unwrap_or(0);
        let groups = group_rows(partition, domain_ids, self.n_domains, total)?;
        let mut parts = Vec::with_capacity(groups.len());
        let mut updates = Vec::new();
        for (subset, rows) in groups {
            if rows.is_empty() {
                if mode == Mode::Train {
                    return Err(Error::DegenerateSubBatch {
                        subset: subset.to_string(),
                        rows: 0,
                    });
                }
                continue;
            }
            if mode == Mode::Train && rows.len() < 2 {
                return Err(Error::DegenerateSubBatch {
                    subset: subset.to_string(),
                    rows: rows.len(),
                });
            }
            let unit = self.get(subset)?;
            let xs = tape.index_rows(x, &rows)?;
            let (y, m) = unit.forward(tape, &Self::unit_name(prefix, subset), xs, mode)?;
            if let Some(m) = m {
                updates.push((subset, m));
            }
            parts.push((y, rows));
        }
        let out = tape.assemble_rows(&parts, total)?;
        Ok((out, updates))
    }

    pub fn apply_updates(&mut self, updates: &[GroupMoments<S>]) -> Result<()> {
        for (s, m) in updates {
            self.get_mut(*s)?.update_running(m);
        }
        Ok(())
    }
}

/// Splits row indices by partition group; groups keep partition order and
/// rows keep input order.
pub fn group_rows(
    partition: &Partition,
    domain_ids: &[usize],
    n_domains: usize,
    total_rows: usize,
) -> Result<Vec<(DomainSubset, Vec<usize>)>> {
    if partition.n_domains() != n_domains {
        return invalid(format!(
            "partition over {} domains used with {} domains",
            partition.n_domains(),
            n_domains
        ));
    }
    if domain_ids.len() != total_rows {
        return Err(Error::Shape {
            op: "partitioned_forward",
            lhs: vec![total_rows],
            rhs: vec![domain_ids.len()],
        });
    }
    let mut groups: Vec<(DomainSubset, Vec<usize>)> =
        partition.groups().iter().map(|&g| (g, Vec::new())).collect();
    for (row, &d) in domain_ids.iter().enumerate() {
        let slot = groups
            .iter_mut()
            .find(|(g, _)| g.contains(d))
            .ok_or_else(|| Error::Invalid(format!("domain id {d} not covered by {partition}")))?;
        slot.1.push(row);
    }
    Ok(groups)
}

/// Partition-wise batch normalization that also applies the running-statistics
/// updates to the bank in train mode.
pub fn partitioned_forward<S: Scalar>(
    tape: &mut Tape<S>,
    bank: &mut BNBank<S>,
    prefix: &str,
    partition: &Partition,
    features: Var,
    domain_ids: &[usize],
    mode: Mode,
) -> Result<Var> {
    let (y, updates) = bank.forward(tape, prefix, partition, features, domain_ids, mode)?;
    bank.apply_updates(&updates)?;
    Ok(y)
}
