//! Shard placement within one parallelism group.
//!
//! The same plan is used by every group, so shard `j` of a table always lives
//! on local rank `j` and cross-group sync is a per-local-rank peer all-reduce.

use std::fmt::Write as _;
use std::ops::Range;

use crate::data::{FeatureSpec, ZipfSampler};
use crate::error::{Error, Result};
use crate::fmt::g9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    TableWise,
    RowWise,
}

impl Strategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table-wise" | "table_wise" | "tablewise" => Ok(Strategy::TableWise),
            "row-wise" | "row_wise" | "rowwise" => Ok(Strategy::RowWise),
            other => Err(Error::Config(format!(
                "unknown sharding strategy {other:?} (expected table-wise or row-wise)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::TableWise => "table-wise",
            Strategy::RowWise => "row-wise",
        }
    }
}

/// Sizing and demand of one table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableLoadProfile {
    pub table_id: u32,
    pub num_rows: u64,
    pub size_bytes: u64,
    pub expected_lookups: f64,
}

impl TableLoadProfile {
    /// Profile of a synthetic feature: every sample draws `ids_per_sample`
    /// IDs, so the expected lookups per batch are `batch * ids_per_sample`.
    pub fn from_feature(spec: &FeatureSpec, dim: usize, batch: usize) -> Self {
        Self {
            table_id: spec.table_id,
            num_rows: spec.num_ids,
            size_bytes: spec.num_ids * (dim as u64 + 1) * 4,
            expected_lookups: (batch * spec.ids_per_sample) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanEntry {
    pub table_id: u32,
    pub rows: Range<u64>,
    pub local_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardingPlan {
    pub entries: Vec<PlanEntry>,
    pub ranks_per_group: usize,
}

/// Split `rows` into `n` contiguous ranges whose sizes differ by at most one.
pub fn even_ranges(rows: u64, n: usize) -> Vec<Range<u64>> {
    let n = n as u64;
    (0..n).map(|j| (j * rows / n)..((j + 1) * rows / n)).collect()
}

/// Table-wise: longest-processing-time-first bin packing on expected lookups.
/// Row-wise: every table split into `n` even ranges, range `j` on rank `j`.
/// Ties go to the lower table id, then the lower rank.
pub fn plan_greedy(profiles: &[TableLoadProfile], n: usize, strategy: Strategy) -> Result<ShardingPlan> {
    if n == 0 {
        return Err(Error::Config("ranks per group must be at least 1".into()));
    }
    if profiles.is_empty() {
        return Err(Error::Config("no tables to plan".into()));
    }
    let mut entries = Vec::new();
    match strategy {
        Strategy::TableWise => {
            let mut order: Vec<&TableLoadProfile> = profiles.iter().collect();
            order.sort_by(|a, b| {
                b.expected_lookups
                    .total_cmp(&a.expected_lookups)
                    .then(a.table_id.cmp(&b.table_id))
            });
            let mut load = vec![0.0f64; n];
            for p in order {
                let rank = (0..n)
                    .min_by(|&a, &b| load[a].total_cmp(&load[b]).then(a.cmp(&b)))
                    .unwrap();
                load[rank] += p.expected_lookups;
                entries.push(PlanEntry {
                    table_id: p.table_id,
                    rows: 0..p.num_rows,
                    local_rank: rank,
                });
            }
        }
        Strategy::RowWise => {
            for p in profiles {
                for (rank, rows) in even_ranges(p.num_rows, n).into_iter().enumerate() {
                    if !rows.is_empty() {
                        entries.push(PlanEntry {
                            table_id: p.table_id,
                            rows,
                            local_rank: rank,
                        });
                    }
                }
            }
        }
    }
    entries.sort_by_key(|e| (e.table_id, e.rows.start));
    Ok(ShardingPlan {
        entries,
        ranks_per_group: n,
    })
}

impl ShardingPlan {
    pub fn entries_for(&self, table_id: u32) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(move |e| e.table_id == table_id)
    }

    /// Check that every table's shards tile `[0, rows)` and that ranks are in
    /// range.
    pub fn validate(&self, profiles: &[TableLoadProfile]) -> Result<()> {
        for p in profiles {
            let mut ranges: Vec<&Range<u64>> = self.entries_for(p.table_id).map(|e| &e.rows).collect();
            ranges.sort_by_key(|r| r.start);
            let mut next = 0;
            for r in ranges {
                if r.start != next {
                    return Err(Error::Config(format!(
                        "plan for table {} has a gap or overlap at row {next}",
                        p.table_id
                    )));
                }
                next = r.end;
            }
            if next != p.num_rows {
                return Err(Error::Config(format!(
                    "plan for table {} covers {next} of {} rows",
                    p.table_id, p.num_rows
                )));
            }
        }
        if let Some(e) = self.entries.iter().find(|e| e.local_rank >= self.ranks_per_group) {
            return Err(Error::Config(format!(
                "plan assigns table {} to local rank {} of {}",
                e.table_id, e.local_rank, self.ranks_per_group
            )));
        }
        Ok(())
    }

    /// Expected lookups per rank, assuming IDs are uniform within a table.
    pub fn rank_loads(&self, profiles: &[TableLoadProfile]) -> Vec<f64> {
        let mut loads = vec![0.0; self.ranks_per_group];
        for e in &self.entries {
            if let Some(p) = profiles.iter().find(|p| p.table_id == e.table_id) {
                let frac = (e.rows.end - e.rows.start) as f64 / p.num_rows.max(1) as f64;
                loads[e.local_rank] += p.expected_lookups * frac;
            }
        }
        loads
    }

    /// Expected lookups per rank using each table's Zipf mass per row range.
    pub fn rank_loads_zipf(&self, specs: &[FeatureSpec], samplers: &[ZipfSampler], batch: usize) -> Vec<f64> {
        let mut loads = vec![0.0; self.ranks_per_group];
        for e in &self.entries {
            if let Some(i) = specs.iter().position(|s| s.table_id == e.table_id) {
                let mass = samplers[i].range_mass(e.rows.start, e.rows.end);
                loads[e.local_rank] += mass * (batch * specs[i].ids_per_sample) as f64;
            }
        }
        loads
    }

    pub fn rank_bytes(&self, profiles: &[TableLoadProfile]) -> Vec<u64> {
        let mut bytes = vec![0u64; self.ranks_per_group];
        for e in &self.entries {
            if let Some(p) = profiles.iter().find(|p| p.table_id == e.table_id) {
                bytes[e.local_rank] +=
                    p.size_bytes * (e.rows.end - e.rows.start) / p.num_rows.max(1);
            }
        }
        bytes
    }

    /// `table_id,row_lo,row_hi,local_rank`
    pub fn to_csv(&self) -> String {
        let mut s = String::from("table_id,row_lo,row_hi,local_rank\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{}", e.table_id, e.rows.start, e.rows.end, e.local_rank);
        }
        s
    }
}

/// Max over mean. Errors when the mean is zero.
pub fn imbalance_ratio(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Undefined("imbalance ratio of an empty list"));
    }
    if values.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Undefined("imbalance ratio needs nonnegative values"));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return Err(Error::Undefined("imbalance ratio of all-zero loads"));
    }
    let max = values.iter().copied().fold(f64::MIN, f64::max);
    if values.iter().all(|&v| v == max) {
        return Ok(1.0);
    }
    Ok(max / mean)
}

/// Ratios above 2 mean the slowest rank takes more than twice the average.
pub const STRAGGLER_THRESHOLD: f64 = 2.0;

pub fn straggler_label(ratio: f64) -> &'static str {
    if ratio > STRAGGLER_THRESHOLD {
        "severe straggler"
    } else {
        "balanced"
    }
}

/// One summary line: per-rank load extremes, ratio and its label.
pub fn summary_line(loads: &[f64]) -> Result<String> {
    let ratio = imbalance_ratio(loads)?;
    let max = loads.iter().copied().fold(f64::MIN, f64::max);
    let mean = loads.iter().sum::<f64>() / loads.len() as f64;
    Ok(format!(
        "# ranks={} max_load={} mean_load={} imbalance_ratio={} ({})",
        loads.len(),
        g9(max),
        g9(mean),
        g9(ratio),
        straggler_label(ratio)
    ))
}

/// Parse a profile manifest with header `table_id,size_bytes,lookups` and an
/// optional fourth `rows` column. Without it, rows are `size_bytes / (4 * dim)`.
pub fn parse_profiles(text: &str, dim: usize) -> Result<Vec<TableLoadProfile>> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Config("profile manifest is empty".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let has_rows = match header.as_slice() {
        ["table_id", "size_bytes", "lookups"] => false,
        ["table_id", "size_bytes", "lookups", "rows"] => true,
        _ => {
            return Err(Error::Config(format!(
                "profile manifest header must be table_id,size_bytes,lookups[,rows], got {}",
                header.join(",")
            )))
        }
    };
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| Error::Config(format!("profile row {}: {what}: {line}", i + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != header.len() {
            return Err(bad("wrong column count"));
        }
        let table_id: u32 = cols[0].parse().map_err(|_| bad("bad table_id"))?;
        let size_bytes: u64 = cols[1].parse().map_err(|_| bad("bad size_bytes"))?;
        let lookups: f64 = cols[2].parse().map_err(|_| bad("bad lookups"))?;
        if !(lookups >= 0.0) {
            return Err(bad("lookups must be nonnegative"));
        }
        let num_rows = if has_rows {
            cols[3].parse().map_err(|_| bad("bad rows"))?
        } else {
            (size_bytes / (4 * dim.max(1) as u64)).max(1)
        };
        out.push(TableLoadProfile {
            table_id,
            num_rows,
            size_bytes,
            expected_lookups: lookups,
        });
    }
    if out.is_empty() {
        return Err(Error::Config("profile manifest has no tables".into()));
    }
    Ok(out)
}
