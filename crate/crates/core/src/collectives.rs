//! In-process collectives with alpha-beta latency accounting.
//!
//! "Latency" here is the output of an analytic model, not wall time. Data
//! movement is real: blobs are routed between virtual ranks in memory, and
//! reductions run in a fixed order so results never depend on scheduling.

use crate::error::{Error, Result};
use crate::topology::{BandwidthModel, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CollectiveKind {
    AllToAll,
    AllReduce,
}

/// Traffic of one collective call.
///
/// `bytes_sent` and `bytes_received` count wire traffic only; blocks a rank
/// addresses to itself are reported separately in `self_bytes`.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectiveTrace {
    pub kind: CollectiveKind,
    /// Global ranks, index-aligned with the byte vectors.
    pub participants: Vec<usize>,
    pub bytes_sent: Vec<u64>,
    pub bytes_received: Vec<u64>,
    pub self_bytes: Vec<u64>,
    pub latency_s: f64,
}

impl CollectiveTrace {
    pub fn total_sent(&self) -> u64 {
        self.bytes_sent.iter().sum()
    }

    pub fn total_received(&self) -> u64 {
        self.bytes_received.iter().sum()
    }

    /// Payload a participant emitted, including its self-addressed block.
    pub fn volume(&self, index: usize) -> u64 {
        self.bytes_sent[index] + self.self_bytes[index]
    }

    fn empty(kind: CollectiveKind, participants: Vec<usize>) -> Self {
        let n = participants.len();
        Self {
            kind,
            participants,
            bytes_sent: vec![0; n],
            bytes_received: vec![0; n],
            self_bytes: vec![0; n],
            latency_s: 0.0,
        }
    }
}

/// Blobs delivered to each destination, indexed `[dst][src]`.
pub type Delivered = Vec<Vec<Vec<u8>>>;

/// All-to-all among the ranks of one group.
///
/// `payloads[src][dst]` is what local rank `src` addresses to local rank
/// `dst`. Each destination receives its blobs in ascending source order. The
/// latency is `alpha * (N - 1) + max per-rank wire bytes / bandwidth`.
pub fn route_all_to_all(
    topology: &Topology,
    group: usize,
    payloads: Vec<Vec<Vec<u8>>>,
    bandwidth: &BandwidthModel,
) -> Result<(Delivered, CollectiveTrace)> {
    let n = topology.ranks_per_group();
    if group >= topology.groups() {
        return Err(Error::Shape(format!(
            "group {group} out of range for {} groups",
            topology.groups()
        )));
    }
    if payloads.len() != n || payloads.iter().any(|row| row.len() != n) {
        return Err(Error::Shape(format!(
            "all-to-all payload matrix must be {n}x{n}"
        )));
    }
    let participants = topology.group_ranks(group);
    let mut trace = CollectiveTrace::empty(CollectiveKind::AllToAll, participants);

    let mut delivered: Delivered = (0..n).map(|_| Vec::with_capacity(n)).collect();
    for (src, row) in payloads.into_iter().enumerate() {
        for (dst, blob) in row.into_iter().enumerate() {
            let len = blob.len() as u64;
            if src == dst {
                trace.self_bytes[src] += len;
            } else {
                trace.bytes_sent[src] += len;
                trace.bytes_received[dst] += len;
            }
            // Sources are visited in ascending order, so each destination's
            // list ends up ordered by source.
            delivered[dst].push(blob);
        }
    }

    let max_bytes = trace
        .bytes_sent
        .iter()
        .zip(&trace.bytes_received)
        .map(|(s, r)| (*s).max(*r))
        .max()
        .unwrap_or(0);
    if n > 1 {
        let bw = bandwidth.bandwidth_for(&trace.participants);
        trace.latency_s = bandwidth.alpha * (n - 1) as f64 + max_bytes as f64 / bw;
    }
    Ok((delivered, trace))
}

/// Element-wise mean of `replicas`, summed in slice order with 64-bit
/// accumulation. Bit-identical for any caller that presents replicas in the
/// same order.
pub fn mean_reduce(replicas: &[&[f32]]) -> Result<Vec<f32>> {
    let first = replicas
        .first()
        .ok_or(Error::Undefined("mean of zero replicas"))?;
    let len = first.len();
    if replicas.iter().any(|r| r.len() != len) {
        return Err(Error::Shape("replica lengths differ".into()));
    }
    let mut acc = vec![0.0f64; len];
    for r in replicas {
        for (a, &x) in acc.iter_mut().zip(r.iter()) {
            *a += x as f64;
        }
    }
    let m = replicas.len() as f64;
    Ok(acc.into_iter().map(|a| (a / m) as f32).collect())
}

/// Ring all-reduce traffic and latency for `bytes` per participant among the
/// peers of `local_rank`:
/// `2 * bytes * (M - 1) / (M * bw) + 2 * alpha * (M - 1)`.
pub fn all_reduce_trace(
    topology: &Topology,
    local_rank: usize,
    bytes: u64,
    bandwidth: &BandwidthModel,
) -> CollectiveTrace {
    let participants = topology.peers(local_rank);
    let m = participants.len() as u64;
    let mut trace = CollectiveTrace::empty(CollectiveKind::AllReduce, participants);
    if m > 1 {
        let per_rank = 2 * bytes * (m - 1) / m;
        trace.bytes_sent.fill(per_rank);
        trace.bytes_received.fill(per_rank);
        let bw = bandwidth.bandwidth_for(&trace.participants);
        let mf = m as f64;
        trace.latency_s = 2.0 * bytes as f64 * (mf - 1.0) / (mf * bw)
            + 2.0 * bandwidth.alpha * (mf - 1.0);
    }
    trace
}

/// Mean all-reduce across the `M` replicas of the shard held by `local_rank`.
///
/// `replicas[m]` is group `m`'s copy. Summation runs in ascending group order,
/// so every replica receives the same bit pattern.
pub fn all_reduce_mean_across_groups(
    topology: &Topology,
    local_rank: usize,
    replicas: &[Vec<f32>],
    bandwidth: &BandwidthModel,
) -> Result<(Vec<f32>, CollectiveTrace)> {
    if replicas.len() != topology.groups() {
        return Err(Error::Shape(format!(
            "expected {} replicas, got {}",
            topology.groups(),
            replicas.len()
        )));
    }
    if local_rank >= topology.ranks_per_group() {
        return Err(Error::Shape(format!("local rank {local_rank} out of range")));
    }
    let views: Vec<&[f32]> = replicas.iter().map(Vec::as_slice).collect();
    let synced = mean_reduce(&views)?;
    let bytes = (synced.len() * std::mem::size_of::<f32>()) as u64;
    Ok((synced, all_reduce_trace(topology, local_rank, bytes, bandwidth)))
}

/// Communication kernels of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    LookupAllToAll,
    GradAllToAll,
    TableAllReduce,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::LookupAllToAll => "lookup_a2a",
            Kernel::GradAllToAll => "grad_a2a",
            Kernel::TableAllReduce => "table_allreduce",
        }
    }
}

/// Max-over-ranks cost of each kernel in one step; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLatency {
    pub lookup_a2a: f64,
    pub grad_a2a: f64,
    pub table_allreduce: f64,
    pub compute: f64,
    pub total: f64,
}

impl std::ops::AddAssign for StepLatency {
    fn add_assign(&mut self, o: Self) {
        self.lookup_a2a += o.lookup_a2a;
        self.grad_a2a += o.grad_a2a;
        self.table_allreduce += o.table_allreduce;
        self.compute += o.compute;
        self.total += o.total;
    }
}

impl StepLatency {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            lookup_a2a: self.lookup_a2a * k,
            grad_a2a: self.grad_a2a * k,
            table_allreduce: self.table_allreduce * k,
            compute: self.compute * k,
            total: self.total * k,
        }
    }
}

/// Serial kernel model: each kernel costs its slowest participant, and the
/// step costs the sum over kernels.
pub fn simulate_step_latency(
    traces: &[(Kernel, CollectiveTrace)],
    per_rank_compute: &[f64],
) -> StepLatency {
    let mut out = StepLatency::default();
    for (kernel, trace) in traces {
        let slot = match kernel {
            Kernel::LookupAllToAll => &mut out.lookup_a2a,
            Kernel::GradAllToAll => &mut out.grad_a2a,
            Kernel::TableAllReduce => &mut out.table_allreduce,
        };
        *slot = slot.max(trace.latency_s);
    }
    out.compute = per_rank_compute.iter().copied().fold(0.0, f64::max);
    out.total = out.lookup_a2a + out.grad_a2a + out.table_allreduce + out.compute;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bw() -> BandwidthModel {
        BandwidthModel::default()
    }

    fn blobs(n: usize, f: impl Fn(usize, usize) -> Vec<u8>) -> Vec<Vec<Vec<u8>>> {
        (0..n).map(|s| (0..n).map(|d| f(s, d)).collect()).collect()
    }

    #[test]
    fn single_rank_group_keeps_payload_local() {
        let topo = Topology::new(4, 4).unwrap();
        let (out, trace) = route_all_to_all(&topo, 2, vec![vec![vec![1, 2, 3]]], &bw()).unwrap();
        assert_eq!(out, vec![vec![vec![1, 2, 3]]]);
        assert_eq!(trace.total_sent(), 0);
        assert_eq!(trace.self_bytes, vec![3]);
        assert_eq!(trace.latency_s, 0.0);
        assert_eq!(trace.participants, vec![2]);
    }

    #[test]
    fn groups_are_isolated() {
        // 4 ranks in 2 groups: group 1 is ranks {2, 3}; only they appear.
        let topo = Topology::new(4, 2).unwrap();
        let payloads = blobs(2, |s, d| vec![(10 * s + d) as u8]);
        let (out, trace) = route_all_to_all(&topo, 1, payloads, &bw()).unwrap();
        assert_eq!(trace.participants, vec![2, 3]);
        assert!(!trace.participants.contains(&1));
        assert_eq!(out[0], vec![vec![0], vec![10]]);
        assert_eq!(out[1], vec![vec![1], vec![11]]);
    }

    #[test]
    fn wrong_matrix_shape_is_rejected() {
        let topo = Topology::new(4, 2).unwrap();
        let bad = blobs(3, |_, _| vec![]);
        assert!(route_all_to_all(&topo, 0, bad, &bw()).is_err());
        let ragged = vec![vec![vec![]], vec![vec![], vec![]]];
        assert!(route_all_to_all(&topo, 0, ragged, &bw()).is_err());
    }

    #[test]
    fn a2a_latency_formula() {
        let topo = Topology::new(4, 1).unwrap();
        let model = bw();
        let payloads = blobs(4, |s, d| vec![0u8; if s == 0 && d != 0 { 100 } else { 10 }]);
        let (_, trace) = route_all_to_all(&topo, 0, payloads, &model).unwrap();
        // rank 0 sends 300 wire bytes, the largest volume.
        let expected = model.alpha * 3.0 + 300.0 / model.bw_intra;
        assert!((trace.latency_s - expected).abs() < 1e-18);
    }

    #[test]
    fn mean_of_two() {
        let topo = Topology::new(2, 2).unwrap();
        let (v, trace) =
            all_reduce_mean_across_groups(&topo, 0, &[vec![1.0], vec![3.0]], &bw()).unwrap();
        assert_eq!(v, vec![2.0]);
        assert_eq!(trace.participants, vec![0, 1]);
    }

    #[test]
    fn mean_of_four_scalars() {
        let topo = Topology::new(4, 4).unwrap();
        let replicas = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let (v, _) = all_reduce_mean_across_groups(&topo, 0, &replicas, &bw()).unwrap();
        // Oracle: (1 + 2 + 3 + 4) / 4.
        assert_eq!(v, vec![2.5]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let topo = Topology::new(2, 2).unwrap();
        assert!(all_reduce_mean_across_groups(&topo, 0, &[vec![1.0], vec![1.0, 2.0]], &bw()).is_err());
    }

    #[test]
    fn all_reduce_latency_matches_ring_formula() {
        let topo = Topology::new(8, 4).unwrap();
        let model = bw();
        let t = all_reduce_trace(&topo, 1, 1000, &model);
        let expected = 2.0 * 1000.0 * 3.0 / (4.0 * model.bw_intra) + 2.0 * model.alpha * 3.0;
        assert!((t.latency_s - expected).abs() < 1e-18);
        assert_eq!(t.participants, vec![1, 3, 5, 7]);
        let single = all_reduce_trace(&Topology::new(8, 1).unwrap(), 0, 1000, &model);
        assert_eq!(single.latency_s, 0.0);
    }

    #[test]
    fn step_latency_takes_maxima_and_sums() {
        let topo = Topology::new(4, 2).unwrap();
        let model = bw();
        let (_, a) = route_all_to_all(&topo, 0, blobs(2, |_, _| vec![0; 64]), &model).unwrap();
        let (_, b) = route_all_to_all(&topo, 1, blobs(2, |_, _| vec![0; 128]), &model).unwrap();
        let traces = vec![(Kernel::LookupAllToAll, a.clone()), (Kernel::LookupAllToAll, b.clone())];
        let lat = simulate_step_latency(&traces, &[1e-3, 2e-3, 0.5e-3, 0.0]);
        assert_eq!(lat.lookup_a2a, b.latency_s);
        assert_eq!(lat.table_allreduce, 0.0);
        assert_eq!(lat.compute, 2e-3);
        assert_eq!(lat.total, b.latency_s + 2e-3);

        let idle = simulate_step_latency(&[], &[4e-3, 1e-3]);
        assert_eq!(idle.total, 4e-3);
    }

    #[test]
    fn more_groups_trade_a2a_for_allreduce() {
        // Fixed global traffic: a 64 KiB per-rank lookup volume at M = 1
        // shrinks to 1/M of that per rank, while the replica sync grows.
        let model = bw();
        let table_bytes = 1u64 << 24;
        let mut last: Option<StepLatency> = None;
        for m in [1usize, 2, 4, 8] {
            let topo = Topology::new(8, m).unwrap();
            let n = topo.ranks_per_group();
            let per_pair = (65536 / m / n.max(1)) as usize;
            let (_, a2a) =
                route_all_to_all(&topo, 0, blobs(n, |_, _| vec![0; per_pair]), &model).unwrap();
            let shard_bytes = table_bytes / n as u64;
            let ar = all_reduce_trace(&topo, 0, shard_bytes, &model);
            let lat = simulate_step_latency(
                &[(Kernel::LookupAllToAll, a2a), (Kernel::TableAllReduce, ar)],
                &[],
            );
            if m == 1 {
                assert_eq!(lat.table_allreduce, 0.0);
            }
            if let Some(prev) = last {
                assert!(lat.lookup_a2a <= prev.lookup_a2a);
                assert!(lat.table_allreduce >= prev.table_allreduce);
            }
            last = Some(lat);
        }
    }

    proptest! {
        #[test]
        fn a2a_conserves_bytes(sizes in proptest::collection::vec(0usize..50, 16)) {
            let topo = Topology::new(8, 2).unwrap();
            let payloads = blobs(4, |s, d| vec![7u8; sizes[s * 4 + d]]);
            let total: usize = sizes.iter().sum();
            let (out, trace) = route_all_to_all(&topo, 1, payloads, &bw()).unwrap();
            prop_assert_eq!(trace.total_sent(), trace.total_received());
            let self_total: u64 = trace.self_bytes.iter().sum();
            prop_assert_eq!((trace.total_sent() + self_total) as usize, total);
            let delivered: usize = out.iter().flatten().map(Vec::len).sum();
            prop_assert_eq!(delivered, total);
            for (dst, from) in out.iter().enumerate() {
                for (src, blob) in from.iter().enumerate() {
                    prop_assert_eq!(blob.len(), sizes[src * 4 + dst]);
                }
            }
        }

        #[test]
        fn mean_of_equal_replicas_is_identity(x in proptest::collection::vec(-1e30f32..1e30, 1..20), m in 1usize..9) {
            let views: Vec<&[f32]> = (0..m).map(|_| x.as_slice()).collect();
            let y = mean_reduce(&views).unwrap();
            prop_assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
