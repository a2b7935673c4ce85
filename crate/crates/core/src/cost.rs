//! Closed-form deployment costs of table replication.
//!
//! With `S` GB of tables replicated `M` times over `T` ranks, each rank holds
//! `S (M - 1) / T` GB more than under full model parallelism, and a ring
//! all-reduce of that overhead at `B_sync` GB/s takes twice as long as sending
//! it once.

use crate::error::{Error, Result};
use crate::fmt::g9;
use crate::topology::BandwidthModel;

/// A deployment: sizes in GB, bandwidth in GB/s.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusterSpec {
    pub total_gpus: usize,
    pub groups: usize,
    pub table_size_gb: f64,
    pub sync_bw_gb_s: f64,
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.total_gpus == 0 || self.groups == 0 || self.total_gpus % self.groups != 0 {
            return Err(Error::Config(format!(
                "{} groups must divide {} GPUs",
                self.groups, self.total_gpus
            )));
        }
        if !(self.table_size_gb > 0.0 && self.table_size_gb.is_finite()) {
            return Err(Error::Config("table size must be positive".into()));
        }
        if !(self.sync_bw_gb_s > 0.0 && self.sync_bw_gb_s.is_finite()) {
            return Err(Error::Config("sync bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Default sync bandwidth for `groups`: the intra-host rate when a
    /// replica's peers fit on one host, the inter-host rate otherwise.
    pub fn default_sync_bw_gb_s(groups: usize, bandwidth: &BandwidthModel) -> f64 {
        let bw = if groups <= bandwidth.ranks_per_host {
            bandwidth.bw_intra
        } else {
            bandwidth.bw_inter
        };
        bw / 1e9
    }
}

/// Per-rank costs of replication.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostEstimate {
    pub mem_overhead_gb: f64,
    pub sync_latency_s: f64,
    /// `sync_latency_s` plus the ring's `2 alpha (M - 1)` hop latency.
    pub sync_latency_with_alpha_s: f64,
}

/// `S (M - 1) / T`
pub fn memory_overhead(table_size_gb: f64, groups: usize, total_gpus: usize) -> f64 {
    table_size_gb * (groups as f64 - 1.0) / total_gpus as f64
}

/// `2 S (M - 1) / (T B_sync)`, computed as `2 * memory_overhead / B_sync`.
pub fn sync_latency(table_size_gb: f64, groups: usize, total_gpus: usize, sync_bw_gb_s: f64) -> f64 {
    2.0 * memory_overhead(table_size_gb, groups, total_gpus) / sync_bw_gb_s
}

/// QPS speed-up divided by the GPU-count multiplier.
pub fn qps_scaling_factor(qps_base: f64, gpus_base: f64, qps_new: f64, gpus_new: f64) -> Result<f64> {
    if !(qps_base > 0.0 && gpus_base > 0.0 && qps_new > 0.0 && gpus_new > 0.0) {
        return Err(Error::Config("QPS and GPU counts must be positive".into()));
    }
    Ok((qps_new / qps_base) / (gpus_new / gpus_base))
}

pub fn estimate(spec: &ClusterSpec, alpha_s: f64) -> Result<CostEstimate> {
    spec.validate()?;
    let mem = memory_overhead(spec.table_size_gb, spec.groups, spec.total_gpus);
    let lat = sync_latency(spec.table_size_gb, spec.groups, spec.total_gpus, spec.sync_bw_gb_s);
    Ok(CostEstimate {
        mem_overhead_gb: mem,
        sync_latency_s: lat,
        sync_latency_with_alpha_s: lat + 2.0 * alpha_s * (spec.groups as f64 - 1.0),
    })
}

pub const COST_CSV_HEADER: &str =
    "groups,total_gpus,table_size_gb,sync_bw_gb_s,mem_overhead_gb,sync_latency_s,sync_latency_with_alpha_s";

pub fn cost_csv_row(spec: &ClusterSpec, est: &CostEstimate) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        spec.groups,
        spec.total_gpus,
        g9(spec.table_size_gb),
        g9(spec.sync_bw_gb_s),
        g9(est.mem_overhead_gb),
        g9(est.sync_latency_s),
        g9(est.sync_latency_with_alpha_s)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_costs_nothing() {
        assert_eq!(memory_overhead(1700.0, 1, 1024), 0.0);
        assert_eq!(sync_latency(1700.0, 1, 1024, 100.0), 0.0);
        let spec = ClusterSpec {
            total_gpus: 8,
            groups: 1,
            table_size_gb: 10.0,
            sync_bw_gb_s: 1.0,
        };
        let e = estimate(&spec, 5e-6).unwrap();
        assert_eq!((e.mem_overhead_gb, e.sync_latency_with_alpha_s), (0.0, 0.0));
    }

    #[test]
    fn hand_examples() {
        assert!((memory_overhead(1700.0, 4, 1024) - 4.98).abs() < 0.01);
        // 5 GB of overhead over 100 GB/s.
        assert!((sync_latency(500.0, 2, 100, 100.0) - 0.1).abs() < 1e-12);
        assert_eq!(memory_overhead(64.0, 4, 32), 2.0 * memory_overhead(64.0, 4, 64));
        assert_eq!(qps_scaling_factor(1.0, 1.0, 4.0, 4.0).unwrap(), 1.0);
        assert!(qps_scaling_factor(0.0, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn default_bandwidth_follows_host_boundary() {
        let bw = BandwidthModel::default();
        assert_eq!(ClusterSpec::default_sync_bw_gb_s(4, &bw), 175.0);
        assert_eq!(ClusterSpec::default_sync_bw_gb_s(16, &bw), 25.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = ClusterSpec {
            total_gpus: 10,
            groups: 4,
            table_size_gb: 1.0,
            sync_bw_gb_s: 1.0,
        };
        assert!(spec.validate().unwrap_err().is_config());
    }
}
