//! Partition-aware batch normalization: per-subset units, the BN bank,
//! optimized (batch + instance) normalization, and combination enumeration.

mod bank;
mod combos;
mod stats;
mod subset;
mod unit;

pub use bank::{group_rows, partitioned_forward, BNBank};
pub use combos::{
    enumerate_full_combinations, enumerate_reduced_combinations, required_subsets,
    CombinationScheme,
};
pub use stats::{compute_batch_stats, ChannelStats};
pub use subset::{DomainSubset, Partition, MAX_DOMAINS};
pub use unit::{
    bn_forward, on_forward, BNUnit, BatchMoments, Mode, ONUnit, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
