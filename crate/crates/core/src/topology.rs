//! Virtual cluster layout: `T` ranks split into `M` parallelism groups of
//! `N = T / M` consecutive ranks. Each group holds one complete replica of the
//! embedding tables, model-parallel across its `N` ranks.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Topology {
    ranks: usize,
    groups: usize,
}

impl Topology {
    pub fn new(ranks: usize, groups: usize) -> Result<Self> {
        if ranks == 0 || groups == 0 {
            return Err(Error::Topology("ranks and groups must be positive".into()));
        }
        if ranks % groups != 0 {
            return Err(Error::Topology(format!(
                "{groups} groups do not divide {ranks} ranks"
            )));
        }
        Ok(Self { ranks, groups })
    }

    /// `T`
    pub fn ranks(&self) -> usize {
        self.ranks
    }

    /// `M`
    pub fn groups(&self) -> usize {
        self.groups
    }

    /// `N = T / M`
    pub fn ranks_per_group(&self) -> usize {
        self.ranks / self.groups
    }

    pub fn group_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_group()
    }

    pub fn local_rank_of(&self, rank: usize) -> usize {
        rank % self.ranks_per_group()
    }

    pub fn rank_of(&self, group: usize, local_rank: usize) -> usize {
        debug_assert!(group < self.groups && local_rank < self.ranks_per_group());
        group * self.ranks_per_group() + local_rank
    }

    /// Global ranks of one group, ascending.
    pub fn group_ranks(&self, group: usize) -> Vec<usize> {
        (0..self.ranks_per_group())
            .map(|l| self.rank_of(group, l))
            .collect()
    }

    /// Ranks holding the same shard in every group, in ascending group order.
    pub fn peers(&self, local_rank: usize) -> Vec<usize> {
        (0..self.groups).map(|g| self.rank_of(g, local_rank)).collect()
    }

    /// `M = 1`: every rank shares one replica, i.e. classic full model parallelism.
    pub fn is_full_model_parallel(&self) -> bool {
        self.groups == 1
    }
}

/// Alpha-beta link model. Times are seconds, bandwidths bytes per second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandwidthModel {
    pub alpha: f64,
    pub bw_intra: f64,
    pub bw_inter: f64,
    pub ranks_per_host: usize,
}

impl Default for BandwidthModel {
    fn default() -> Self {
        let bw_inter = 25.0e9;
        Self {
            alpha: 5.0e-6,
            bw_inter,
            bw_intra: 7.0 * bw_inter,
            ranks_per_host: 8,
        }
    }
}

impl BandwidthModel {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !(positive(self.alpha) && positive(self.bw_intra) && positive(self.bw_inter))
            || self.ranks_per_host == 0
        {
            return Err(Error::Config(
                "bandwidth model values must be positive".into(),
            ));
        }
        if self.bw_intra < self.bw_inter {
            return Err(Error::Config(
                "intra-host bandwidth must be at least the inter-host bandwidth".into(),
            ));
        }
        Ok(())
    }

    pub fn host_of(&self, rank: usize) -> usize {
        rank / self.ranks_per_host
    }

    /// Bandwidth available to a collective over `participants`: intra-host when
    /// they all share one host.
    pub fn bandwidth_for(&self, participants: &[usize]) -> f64 {
        match participants.first() {
            Some(&first) if participants.iter().all(|&r| self.host_of(r) == self.host_of(first)) => {
                self.bw_intra
            }
            Some(_) => self.bw_inter,
            None => self.bw_intra,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_groups_of_two() {
        let t = Topology::new(4, 2).unwrap();
        assert_eq!(t.group_ranks(0), vec![0, 1]);
        assert_eq!(t.group_ranks(1), vec![2, 3]);
        assert_eq!(t.peers(1), vec![1, 3]);
        for r in 0..4 {
            assert_eq!(t.rank_of(t.group_of(r), t.local_rank_of(r)), r);
        }
    }

    #[test]
    fn groups_must_divide_ranks() {
        assert!(Topology::new(6, 4).is_err());
        assert!(Topology::new(0, 1).is_err());
        assert!(Topology::new(8, 0).is_err());
        assert!(Topology::new(8, 8).unwrap().ranks_per_group() == 1);
    }

    #[test]
    fn host_aligned_peers_use_intra_bandwidth() {
        let bw = BandwidthModel::default();
        assert_eq!(bw.bandwidth_for(&[0, 3, 7]), bw.bw_intra);
        assert_eq!(bw.bandwidth_for(&[0, 8]), bw.bw_inter);
        assert_eq!(bw.bw_intra, 7.0 * bw.bw_inter);
    }
}
