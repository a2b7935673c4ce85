//! Synthetic click-through data.
//!
//! Every sample is drawn from its own counter-keyed stream, identified by
//! `(seed, step, global sample index)`. A rank's batch for a step is the
//! contiguous slice of global indices `rank * batch .. (rank + 1) * batch`,
//! so the global batch for a step does not depend on how ranks are grouped.
//!
//! Labels come from a fixed logistic ground-truth model over the same IDs and
//! dense features the model sees, which makes normalized entropy a meaningful
//! learnability signal.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Lane};
use crate::topology::Topology;

/// One sparse categorical feature and its embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub table_id: u32,
    pub num_ids: u64,
    pub zipf_exponent: f64,
    /// IDs drawn per sample (pooling fan-in).
    pub ids_per_sample: usize,
}

impl FeatureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids == 0 {
            return Err(Error::Config(format!(
                "table {}: num_ids must be at least 1",
                self.table_id
            )));
        }
        if !(self.zipf_exponent >= 0.0) || !self.zipf_exponent.is_finite() {
            return Err(Error::Config(format!(
                "table {}: zipf_exponent must be a finite nonnegative number",
                self.table_id
            )));
        }
        Ok(())
    }
}

/// Inverse-CDF Zipf sampler over `[0, n)`; ID `k` has weight `(k + 1)^-s`.
#[derive(Clone, Debug)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(num_ids: u64, exponent: f64) -> Self {
        assert!(num_ids >= 1);
        let mut cdf = Vec::with_capacity(num_ids as usize);
        let mut acc = 0.0f64;
        for k in 1..=num_ids {
            acc += (k as f64).powf(-exponent);
            cdf.push(acc);
        }
        let total = acc;
        for c in &mut cdf {
            *c /= total;
        }
        // Guard against the last entry rounding below 1.
        *cdf.last_mut().unwrap() = 1.0;
        Self { cdf }
    }

    pub fn num_ids(&self) -> u64 {
        self.cdf.len() as u64
    }

    /// Probability of ID `k`.
    pub fn pmf(&self, k: u64) -> f64 {
        let k = k as usize;
        if k == 0 {
            self.cdf[0]
        } else {
            self.cdf[k] - self.cdf[k - 1]
        }
    }

    /// Probability mass of the half-open ID range.
    pub fn range_mass(&self, lo: u64, hi: u64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let upper = self.cdf[hi as usize - 1];
        let lower = if lo == 0 { 0.0 } else { self.cdf[lo as usize - 1] };
        upper - lower
    }

    pub fn cdf(&self) -> &[f64] {
        &self.cdf
    }

    /// Map a uniform draw in `[0, 1)` to an ID.
    #[inline]
    pub fn quantile(&self, u: f64) -> u64 {
        self.cdf.partition_point(|&c| c <= u) as u64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        self.quantile(rng.random::<f64>())
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `ids[f]` is the ID list for feature `f`.
    pub ids: Vec<Vec<u64>>,
    pub dense: Vec<f32>,
    pub label: u8,
}

/// The slice of a step's global batch owned by one rank.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub samples: Vec<Sample>,
    pub rank: usize,
    pub step: u64,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Scales of the labeling model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelScales {
    /// Standard deviation of the total sparse contribution to the logit.
    pub sparse: f64,
    /// Standard deviation of the dense contribution to the logit.
    pub dense: f64,
    pub bias: f64,
}

impl Default for LabelScales {
    fn default() -> Self {
        Self {
            sparse: 1.5,
            dense: 0.5,
            bias: -1.0,
        }
    }
}

/// Fixed logistic model that produces the labels.
#[derive(Clone, Debug)]
pub struct GroundTruthModel {
    /// `contributions[f][id]` is the logit contribution of one occurrence of `id`.
    pub contributions: Vec<Vec<f32>>,
    pub dense_weights: Vec<f64>,
    pub bias: f64,
}

impl GroundTruthModel {
    pub fn new(seed: u64, specs: &[FeatureSpec], dense_dim: usize, scales: LabelScales) -> Self {
        let fan_in: usize = specs.iter().map(|s| s.ids_per_sample).sum::<usize>().max(1);
        let per_id = scales.sparse / (fan_in as f64).sqrt();
        let contributions = specs
            .iter()
            .map(|spec| {
                let mut rng = rng::stream(seed, Lane::GroundTruth, &[0, spec.table_id as u64]);
                (0..spec.num_ids)
                    .map(|_| (per_id * rng.sample::<f64, _>(StandardNormal)) as f32)
                    .collect()
            })
            .collect();
        let mut rng = rng::stream(seed, Lane::GroundTruth, &[1]);
        let per_dense = if dense_dim == 0 {
            0.0
        } else {
            scales.dense / (dense_dim as f64).sqrt()
        };
        let dense_weights = (0..dense_dim)
            .map(|_| per_dense * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            contributions,
            dense_weights,
            bias: scales.bias,
        }
    }

    pub fn logit(&self, ids: &[Vec<u64>], dense: &[f32]) -> f64 {
        let mut z = self.bias;
        for (f, list) in ids.iter().enumerate() {
            for &id in list {
                z += self.contributions[f][id as usize] as f64;
            }
        }
        for (w, x) in self.dense_weights.iter().zip(dense) {
            z += w * *x as f64;
        }
        z
    }

    pub fn probability(&self, ids: &[Vec<u64>], dense: &[f32]) -> f64 {
        sigmoid(self.logit(ids, dense))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Holds the precomputed samplers and labeling model for one data seed.
#[derive(Clone, Debug)]
pub struct Generator {
    seed: u64,
    specs: Vec<FeatureSpec>,
    samplers: Vec<ZipfSampler>,
    truth: GroundTruthModel,
    dense_dim: usize,
}

impl Generator {
    pub fn new(
        seed: u64,
        specs: Vec<FeatureSpec>,
        dense_dim: usize,
        scales: LabelScales,
    ) -> Result<Self> {
        for spec in &specs {
            spec.validate()?;
        }
        let samplers = specs
            .iter()
            .map(|s| ZipfSampler::new(s.num_ids, s.zipf_exponent))
            .collect();
        let truth = GroundTruthModel::new(seed, &specs, dense_dim, scales);
        Ok(Self {
            seed,
            specs,
            samplers,
            truth,
            dense_dim,
        })
    }

    pub fn specs(&self) -> &[FeatureSpec] {
        &self.specs
    }

    pub fn samplers(&self) -> &[ZipfSampler] {
        &self.samplers
    }

    pub fn truth(&self) -> &GroundTruthModel {
        &self.truth
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_dim
    }

    fn sample_from(&self, lane: Lane, step: u64, index: u64) -> Sample {
        let mut rng = rng::stream(self.seed, lane, &[step, index]);
        let ids: Vec<Vec<u64>> = self
            .specs
            .iter()
            .zip(&self.samplers)
            .map(|(spec, sampler)| {
                (0..spec.ids_per_sample)
                    .map(|_| sampler.sample(&mut rng))
                    .collect()
            })
            .collect();
        let dense: Vec<f32> = (0..self.dense_dim)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let p = self.truth.probability(&ids, &dense);
        let label = u8::from(rng.random::<f64>() < p);
        Sample { ids, dense, label }
    }

    /// The training sample with global index `index` at `step`.
    pub fn train_sample(&self, step: u64, index: u64) -> Sample {
        self.sample_from(Lane::TrainSample, step, index)
    }

    /// A rank's share of the global batch at `step`.
    pub fn gen_batch(&self, step: u64, rank: usize, batch_size: usize) -> MiniBatch {
        let first = (rank * batch_size) as u64;
        let samples = (0..batch_size as u64)
            .map(|i| self.train_sample(step, first + i))
            .collect();
        MiniBatch {
            samples,
            rank,
            step,
        }
    }

    /// One batch per rank of `topology`; together they form the global batch.
    pub fn global_batch(&self, step: u64, topology: &Topology, per_rank: usize) -> Vec<MiniBatch> {
        (0..topology.ranks())
            .map(|rank| self.gen_batch(step, rank, per_rank))
            .collect()
    }

    /// Held-out samples from a lane disjoint from training.
    pub fn eval_samples(&self, count: usize) -> Vec<Sample> {
        (0..count as u64)
            .map(|i| self.sample_from(Lane::EvalSample, 0, i))
            .collect()
    }
}

/// Stateless form of [`Generator::gen_batch`].
pub fn gen_batch(
    global_seed: u64,
    step: u64,
    rank: usize,
    specs: &[FeatureSpec],
    batch_size: usize,
) -> Result<MiniBatch> {
    let gen = Generator::new(global_seed, specs.to_vec(), 8, LabelScales::default())?;
    Ok(gen.gen_batch(step, rank, batch_size))
}

/// Stateless form of [`Generator::global_batch`].
pub fn global_batch(
    global_seed: u64,
    step: u64,
    topology: &Topology,
    specs: &[FeatureSpec],
    per_rank_batch: usize,
) -> Result<Vec<MiniBatch>> {
    let gen = Generator::new(global_seed, specs.to_vec(), 8, LabelScales::default())?;
    Ok(gen.global_batch(step, topology, per_rank_batch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(num_ids: u64, s: f64, k: usize) -> FeatureSpec {
        FeatureSpec {
            table_id: 0,
            num_ids,
            zipf_exponent: s,
            ids_per_sample: k,
        }
    }

    // Wilson-Hilferty upper quantile of chi-square with `df` degrees of freedom.
    fn chi2_critical(df: f64, z: f64) -> f64 {
        let a = 2.0 / (9.0 * df);
        df * (1.0 - a + z * a.sqrt()).powi(3)
    }

    #[test]
    fn exponent_zero_is_uniform() {
        let n_ids = 100u64;
        let gen = Generator::new(3, vec![spec(n_ids, 0.0, 1)], 0, LabelScales::default()).unwrap();
        let n = 100_000u64;
        let mut counts = vec![0u64; n_ids as usize];
        for i in 0..n {
            counts[gen.train_sample(0, i).ids[0][0] as usize] += 1;
        }
        let expected = n as f64 / n_ids as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // alpha = 0.01
        assert!(chi2 < chi2_critical((n_ids - 1) as f64, 2.326), "chi2 = {chi2}");
    }

    #[test]
    fn head_frequency_matches_harmonic_number() {
        // Oracle: H_1000 by direct summation.
        let h1000: f64 = (1..=1000).map(|k| 1.0 / k as f64).sum();
        let p0 = 1.0 / h1000;
        assert!((p0 - 0.1336).abs() < 1e-4);

        let sampler = ZipfSampler::new(1000, 1.0);
        let n = 1_000_000u64;
        let mut rng = rng::stream(11, Lane::Aux, &[]);
        let hits = (0..n).filter(|_| sampler.sample(&mut rng) == 0).count();
        let freq = hits as f64 / n as f64;
        let sd = (p0 * (1.0 - p0) / n as f64).sqrt();
        assert!((freq - p0).abs() < 3.0 * sd, "freq {freq} vs {p0}");
    }

    #[test]
    fn zipf_matches_power_law_ks() {
        let s = 1.2;
        let n_ids = 500u64;
        let sampler = ZipfSampler::new(n_ids, s);
        let norm: f64 = (1..=n_ids).map(|k| (k as f64).powf(-s)).sum();
        let n = 1_000_000usize;
        let mut counts = vec![0u64; n_ids as usize];
        let mut rng = rng::stream(5, Lane::Aux, &[1]);
        for _ in 0..n {
            counts[sampler.sample(&mut rng) as usize] += 1;
        }
        let (mut emp, mut theo, mut d) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..n_ids as usize {
            emp += counts[k] as f64 / n as f64;
            theo += ((k + 1) as f64).powf(-s) / norm;
            d = d.max((emp - theo).abs());
        }
        // alpha = 0.01
        assert!(d < 1.628 / (n as f64).sqrt(), "KS distance {d}");
    }

    #[test]
    fn batches_are_deterministic() {
        let specs = vec![spec(50, 1.0, 3), spec(7, 0.5, 1)];
        let a = gen_batch(9, 4, 2, &specs, 16).unwrap();
        let b = gen_batch(9, 4, 2, &specs, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
        for s in &a.samples {
            assert!(s.ids[0].iter().all(|&id| id < 50));
            assert!(s.ids[1].iter().all(|&id| id < 7));
            assert_eq!(s.ids[0].len(), 3);
            assert_eq!(s.dense.len(), 8);
        }
        let c = gen_batch(9, 5, 2, &specs, 16).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn single_rank_holds_the_global_batch() {
        let specs = vec![spec(20, 1.0, 2)];
        let topo = Topology::new(1, 1).unwrap();
        let batches = global_batch(1, 0, &topo, &specs, 8).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0], gen_batch(1, 0, 0, &specs, 8).unwrap());
    }

    #[test]
    fn grouping_does_not_change_the_data() {
        let specs = vec![spec(1000, 1.0, 2), spec(1000, 0.0, 1)];
        let flat = global_batch(2, 3, &Topology::new(4, 1).unwrap(), &specs, 8).unwrap();
        let grouped = global_batch(2, 3, &Topology::new(4, 4).unwrap(), &specs, 8).unwrap();
        let collect = |bs: &[MiniBatch]| {
            let mut v: Vec<String> = bs
                .iter()
                .flat_map(|b| b.samples.iter().map(|s| format!("{s:?}")))
                .collect();
            v.sort();
            v
        };
        let a = collect(&flat);
        assert_eq!(a.len(), 32);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 32, "samples must be distinct");
        assert_eq!(a, collect(&grouped));
    }

    #[test]
    fn range_mass_sums_to_one() {
        let z = ZipfSampler::new(97, 1.1);
        let total = z.range_mass(0, 40) + z.range_mass(40, 97);
        assert!((total - 1.0).abs() < 1e-12);
        assert!((z.range_mass(3, 4) - z.pmf(3)).abs() < 1e-15);
    }
}
