//! How fast the row moment grows when the gradient averages a group batch
//! instead of the global batch.
//!
//! With per-sample gradients `mu + noise` (noise i.i.d. with per-coordinate
//! variance `sigma^2`), a mean over `b` samples has
//! `E|g|^2 = |mu|^2 + dim * sigma^2 / b`. A group of `b` samples therefore
//! grows `v` faster than the full batch of `M * b` samples by
//!
//! ```text
//! (|mu|^2 + dim sigma^2 / b) / (|mu|^2 + dim sigma^2 / (M b))   in [1, M]
//! ```
//!
//! That ratio is the natural moment scaling factor: it is `M` for pure noise,
//! `1` for a noise-free gradient, and increases with the noise-to-signal
//! ratio in between. Recommending it as `c` is this crate's instantiation of
//! the qualitative rule "c in (0, M], larger for noisier gradients"; the rule
//! itself gives only the range and direction.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::rng::{self, Lane};

/// Gaussian per-sample gradient model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientNoiseModel {
    /// Mean per-sample gradient; its length is the dimension.
    pub mu: Vec<f64>,
    pub sigma: f64,
    /// Samples per group batch.
    pub batch: usize,
}

impl GradientNoiseModel {
    /// `mu` pointing along the first axis with norm `mu_norm`.
    pub fn isotropic(mu_norm: f64, sigma: f64, dim: usize, batch: usize) -> Self {
        let mut mu = vec![0.0; dim];
        if dim > 0 {
            mu[0] = mu_norm;
        }
        Self { mu, sigma, batch }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn signal(&self) -> f64 {
        self.mu.iter().map(|m| m * m).sum()
    }

    /// `dim * sigma^2 / b`, the noise energy of one group-mean gradient.
    pub fn group_noise(&self) -> f64 {
        self.dim() as f64 * self.sigma * self.sigma / self.batch.max(1) as f64
    }

    /// `dim * sigma^2 / (b |mu|^2)`; infinite for a zero mean.
    pub fn noise_to_signal(&self) -> f64 {
        self.group_noise() / self.signal()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementReport {
    pub ratio_estimate: f64,
    pub std_error: f64,
    pub trials: u64,
    pub groups: usize,
}

impl IncrementReport {
    pub const CSV_HEADER: &'static str = "groups,trials,ratio_estimate,std_error";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.groups,
            self.trials,
            crate::fmt::g9(self.ratio_estimate),
            crate::fmt::g9(self.std_error)
        )
    }
}

/// `E|g_group|^2 / E|g_full|^2` in closed form. Both terms vanish only for the
/// degenerate zero model, where the ratio is taken as 1.
pub fn closed_form_ratio(model: &GradientNoiseModel, groups: usize) -> f64 {
    let signal = model.signal();
    let noise = model.group_noise();
    let num = signal + noise;
    let den = signal + noise / groups as f64;
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Recommended moment scaling factor, always in `(0, M]`.
pub fn recommend_c(model: &GradientNoiseModel, groups: usize) -> f64 {
    let m = groups.max(1) as f64;
    closed_form_ratio(model, groups).clamp(f64::MIN_POSITIVE, m)
}

const BLOCK: u64 = 1024;

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    a: f64,
    b: f64,
    aa: f64,
    bb: f64,
    ab: f64,
}

impl Moments {
    fn push(&mut self, a: f64, b: f64) {
        self.n += 1.0;
        self.a += a;
        self.b += b;
        self.aa += a * a;
        self.bb += b * b;
        self.ab += a * b;
    }

    fn merge(mut self, o: Moments) -> Moments {
        self.n += o.n;
        self.a += o.a;
        self.b += o.b;
        self.aa += o.aa;
        self.bb += o.bb;
        self.ab += o.ab;
        self
    }
}

/// Group-mean gradients of one trial: `g_m = mu + sigma / sqrt(b) * z_m`.
/// Sampling the mean directly is exact for Gaussian per-sample noise.
fn trial_norms(model: &GradientNoiseModel, groups: usize, seed: u64, trial: u64, per_group: &mut [f64]) -> f64 {
    let mut rng = rng::stream(seed, Lane::MonteCarlo, &[trial]);
    let dim = model.dim();
    let scale = model.sigma / (model.batch.max(1) as f64).sqrt();
    let mut zsum = vec![0.0f64; dim];
    for slot in per_group.iter_mut().take(groups) {
        let mut norm = 0.0;
        for (k, zs) in zsum.iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *zs += z;
            let g = model.mu[k] + scale * z;
            norm += g * g;
        }
        *slot = norm;
    }
    // The full-batch gradient is the mean of the M group means.
    let m = groups as f64;
    zsum.iter()
        .zip(&model.mu)
        .map(|(zs, mu)| {
            let g = mu + scale * (zs / m);
            g * g
        })
        .sum()
}

/// Monte Carlo estimate of `E|g_group|^2 / E|g_full|^2`, where `g_group`
/// averages `b` samples and `g_full` averages all `M * b` samples of the same
/// trial. Trials use counter-keyed streams and are reduced in fixed blocks, so
/// the report does not depend on the thread count.
pub fn estimate_increment_ratio(model: &GradientNoiseModel, groups: usize, trials: u64, seed: u64) -> IncrementReport {
    let groups = groups.max(1);
    let blocks = trials.div_ceil(BLOCK);
    let partials: Vec<Moments> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut acc = Moments::default();
            let mut per_group = vec![0.0; groups];
            for t in blk * BLOCK..((blk + 1) * BLOCK).min(trials) {
                let full = trial_norms(model, groups, seed, t, &mut per_group);
                acc.push(per_group[0], full);
            }
            acc
        })
        .collect();
    let m = partials.into_iter().fold(Moments::default(), Moments::merge);
    ratio_report(m, groups, trials)
}

fn ratio_report(m: Moments, groups: usize, trials: u64) -> IncrementReport {
    if m.n == 0.0 {
        return IncrementReport {
            ratio_estimate: f64::NAN,
            std_error: f64::NAN,
            trials,
            groups,
        };
    }
    let n = m.n;
    let (ma, mb) = (m.a / n, m.b / n);
    let ratio = ma / mb;
    let var_a = (m.aa / n - ma * ma).max(0.0);
    let var_b = (m.bb / n - mb * mb).max(0.0);
    let cov = m.ab / n - ma * mb;
    // Delta method for a ratio of means.
    let var_r = if mb > 0.0 {
        (var_a / (mb * mb) - 2.0 * ma * cov / mb.powi(3) + ma * ma * var_b / mb.powi(4)) / n
    } else {
        0.0
    };
    IncrementReport {
        ratio_estimate: ratio,
        std_error: var_r.max(0.0).sqrt(),
        trials,
        groups,
    }
}

/// Mean and variance of one group's moment increment `|g_m|^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IncrementStats {
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
}

/// Per-group increment statistics over `trials` independent steps, one
/// independent batch per group.
pub fn group_increment_stats(model: &GradientNoiseModel, groups: usize, trials: u64, seed: u64) -> Vec<IncrementStats> {
    let groups = groups.max(1);
    let blocks = trials.div_ceil(BLOCK);
    let partials: Vec<Vec<(f64, f64)>> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut sums = vec![(0.0, 0.0); groups];
            let mut per_group = vec![0.0; groups];
            for t in blk * BLOCK..((blk + 1) * BLOCK).min(trials) {
                trial_norms(model, groups, seed, t, &mut per_group);
                for (s, &x) in sums.iter_mut().zip(&per_group) {
                    s.0 += x;
                    s.1 += x * x;
                }
            }
            sums
        })
        .collect();
    let mut totals = vec![(0.0, 0.0); groups];
    for p in partials {
        for (t, s) in totals.iter_mut().zip(p) {
            t.0 += s.0;
            t.1 += s.1;
        }
    }
    let n = trials as f64;
    totals
        .into_iter()
        .map(|(s, ss)| {
            let mean = s / n;
            IncrementStats {
                mean,
                variance: ((ss / n - mean * mean) * n / (n - 1.0).max(1.0)).max(0.0),
                count: trials,
            }
        })
        .collect()
}

/// Welch's t statistic for two independent samples.
pub fn welch_t(a: &IncrementStats, b: &IncrementStats) -> f64 {
    let se = (a.variance / a.count as f64 + b.variance / b.count as f64).sqrt();
    if se == 0.0 {
        0.0
    } else {
        (a.mean - b.mean) / se
    }
}
