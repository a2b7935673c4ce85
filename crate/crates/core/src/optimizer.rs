//! Row-wise sparse AdaGrad with a moment scaling factor, and plain SGD.
//!
//! Per row `i` with group-level gradient `g`:
//!
//! ```text
//! v' = v + |g|^2
//! w' = w - eta / (sqrt(v' / c) + eps) * g
//! ```
//!
//! `c = 1` is the standard row-wise AdaGrad. Under `M` replica groups each
//! group's gradient averages fewer samples, so `v` grows faster than it would
//! with one replica; `c > 1` undoes the resulting step-size shrinkage.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    RowwiseAdagrad,
    Sgd,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rowwise-adagrad" | "rowwise_adagrad" | "adagrad" => Ok(Variant::RowwiseAdagrad),
            "sgd" => Ok(Variant::Sgd),
            other => Err(Error::Config(format!(
                "unknown optimizer variant {other:?} (expected rowwise-adagrad or sgd)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::RowwiseAdagrad => "rowwise-adagrad",
            Variant::Sgd => "sgd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub eps: f64,
    /// Moment scaling factor; the useful range is `(0, M]`.
    pub c: f64,
    pub variant: Variant,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            eps: 1e-8,
            c: 1.0,
            variant: Variant::RowwiseAdagrad,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.eta) {
            return Err(Error::Config(format!("optimizer.eta must be positive, got {}", self.eta)));
        }
        if !positive(self.eps) {
            return Err(Error::Config(format!("optimizer.eps must be positive, got {}", self.eps)));
        }
        if !positive(self.c) {
            return Err(Error::Config(format!("optimizer.c must be positive, got {}", self.c)));
        }
        Ok(())
    }
}

/// Group-level gradient of one row.
#[derive(Clone, Debug, PartialEq)]
pub struct RowGradient {
    pub row: u64,
    pub vector: Vec<f64>,
    /// Number of sample occurrences that contributed.
    pub sample_count: u32,
}

/// Sums per-sample row gradients and divides by the group batch size.
///
/// Contributions must be added in a fixed order (ascending source rank, then
/// sample order) for results to be reproducible bit for bit.
#[derive(Clone, Debug)]
pub struct RowGradAccumulator {
    dim: usize,
    /// Row to slot in `sums` and `counts`.
    slots: BTreeMap<u64, usize>,
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl RowGradAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            slots: BTreeMap::new(),
            sums: Vec::new(),
            counts: Vec::new(),
        }
    }

    #[inline]
    pub fn add(&mut self, row: u64, grad: &[f32]) {
        let next = self.counts.len();
        let slot = *self.slots.entry(row).or_insert(next);
        if slot == next {
            self.sums.resize(self.sums.len() + self.dim, 0.0);
            self.counts.push(0);
        }
        let acc = &mut self.sums[slot * self.dim..(slot + 1) * self.dim];
        for (a, &g) in acc.iter_mut().zip(grad) {
            *a += g as f64;
        }
        self.counts[slot] += 1;
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Row gradients in ascending row order.
    pub fn finish(self, group_batch_size: usize) -> Result<Vec<RowGradient>> {
        if group_batch_size == 0 {
            return Err(Error::Undefined("group gradient over an empty batch"));
        }
        let scale = group_batch_size as f64;
        Ok(self
            .slots
            .iter()
            .map(|(&row, &slot)| RowGradient {
                row,
                vector: self.sums[slot * self.dim..(slot + 1) * self.dim]
                    .iter()
                    .map(|s| s / scale)
                    .collect(),
                sample_count: self.counts[slot],
            })
            .collect())
    }
}

/// `g = (1 / group_batch_size) * sum of per-sample row gradients`.
///
/// `per_rank_row_grads[n]` lists the `(row, per-sample gradient)` pairs
/// computed on local rank `n`. Rows that appear nowhere get no entry.
pub fn aggregate_group_gradient(
    per_rank_row_grads: &[Vec<(u64, Vec<f32>)>],
    group_batch_size: usize,
) -> Result<Vec<RowGradient>> {
    let dim = per_rank_row_grads
        .iter()
        .flatten()
        .map(|(_, g)| g.len())
        .next()
        .unwrap_or(0);
    let mut acc = RowGradAccumulator::new(dim);
    for rank in per_rank_row_grads {
        for (row, g) in rank {
            if g.len() != dim {
                return Err(Error::Shape("row gradients have different lengths".into()));
            }
            acc.add(*row, g);
        }
    }
    acc.finish(group_batch_size)
}

/// `eta / (sqrt(v / c) + eps)`
#[inline]
pub fn effective_lr(v: f64, cfg: &OptimizerConfig) -> f64 {
    cfg.eta / ((v / cfg.c).sqrt() + cfg.eps)
}

/// One moment-scaled row-wise AdaGrad step, in place. The new moment is
/// stored as `f32` and that stored value sets the step size.
pub fn adagrad_row_update(w: &mut [f32], v: &mut f32, g: &RowGradient, cfg: &OptimizerConfig) -> Result<()> {
    if g.vector.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient { row: g.row });
    }
    if !(*v >= 0.0) {
        return Err(Error::NegativeMoment(*v as f64));
    }
    let norm2: f64 = g.vector.iter().map(|x| x * x).sum();
    *v = (*v as f64 + norm2) as f32;
    let lr = effective_lr(*v as f64, cfg);
    for (x, gi) in w.iter_mut().zip(&g.vector) {
        *x = (*x as f64 - lr * gi) as f32;
    }
    Ok(())
}

/// Pure form of [`adagrad_row_update`]: returns `(w', v')`.
pub fn adagrad_row_step(w: &[f32], v: f32, g: &RowGradient, cfg: &OptimizerConfig) -> Result<(Vec<f32>, f32)> {
    let mut w = w.to_vec();
    let mut v = v;
    adagrad_row_update(&mut w, &mut v, g, cfg)?;
    Ok((w, v))
}

/// `w' = w - eta * g`, in place.
pub fn sgd_row_update(w: &mut [f32], g: &RowGradient, cfg: &OptimizerConfig) -> Result<()> {
    if g.vector.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient { row: g.row });
    }
    for (x, gi) in w.iter_mut().zip(&g.vector) {
        *x = (*x as f64 - cfg.eta * gi) as f32;
    }
    Ok(())
}

pub fn sgd_row_step(w: &[f32], g: &RowGradient, cfg: &OptimizerConfig) -> Result<Vec<f32>> {
    let mut w = w.to_vec();
    sgd_row_update(&mut w, g, cfg)?;
    Ok(w)
}

/// Apply whichever variant `cfg` selects. SGD leaves the moment untouched.
pub fn row_update(w: &mut [f32], v: &mut f32, g: &RowGradient, cfg: &OptimizerConfig) -> Result<()> {
    match cfg.variant {
        Variant::RowwiseAdagrad => adagrad_row_update(w, v, g, cfg),
        Variant::Sgd => sgd_row_update(w, g, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grad(v: &[f64]) -> RowGradient {
        RowGradient {
            row: 0,
            vector: v.to_vec(),
            sample_count: 1,
        }
    }

    fn cfg(eta: f64, c: f64) -> OptimizerConfig {
        OptimizerConfig {
            eta,
            eps: 1e-8,
            c,
            variant: Variant::RowwiseAdagrad,
        }
    }

    #[test]
    fn single_sample_is_divided_by_batch() {
        let g = aggregate_group_gradient(&[vec![(5, vec![2.0, -4.0])]], 4).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].row, 5);
        assert_eq!(g[0].vector, vec![0.5, -1.0]);
    }

    #[test]
    fn two_ranks_same_row() {
        // (1 + 3) / 4 = 1
        let g = aggregate_group_gradient(
            &[vec![(2, vec![1.0, 0.0])], vec![(2, vec![3.0, 0.0])]],
            4,
        )
        .unwrap();
        assert_eq!(g[0].vector, vec![1.0, 0.0]);
        assert_eq!(g[0].sample_count, 2);
    }

    #[test]
    fn untouched_rows_have_no_entry() {
        let g = aggregate_group_gradient(&[vec![(1, vec![1.0])], vec![(7, vec![1.0])]], 2).unwrap();
        let rows: Vec<u64> = g.iter().map(|r| r.row).collect();
        assert_eq!(rows, vec![1, 7]);
        assert!(aggregate_group_gradient(&[vec![(1, vec![1.0])]], 0).is_err());
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let w = vec![0.3f32, -0.7];
        let (w2, v2) = adagrad_row_step(&w, 2.5, &grad(&[0.0, 0.0]), &cfg(0.1, 4.0)).unwrap();
        assert_eq!(w2, w);
        assert_eq!(v2, 2.5);
    }

    #[test]
    fn scaled_step_by_hand() {
        // v' = 4; c = 4 gives eta / (1 + eps) ~ 0.1, c = 1 gives ~ 0.05.
        let w = vec![1.0f32, 1.0];
        let g = grad(&[2.0, 0.0]);
        let (w4, v4) = adagrad_row_step(&w, 0.0, &g, &cfg(0.1, 4.0)).unwrap();
        assert_eq!(v4, 4.0);
        assert!((w4[0] as f64 - 0.8).abs() < 1e-7);
        assert_eq!(w4[1], 1.0);
        let (w1, _) = adagrad_row_step(&w, 0.0, &g, &cfg(0.1, 1.0)).unwrap();
        assert!((w1[0] as f64 - 0.9).abs() < 1e-7);
        let step4 = 1.0 - w4[0] as f64;
        let step1 = 1.0 - w1[0] as f64;
        assert!((step4 / step1 - 2.0).abs() < 1e-6);
    }

    #[test]
    fn effective_lr_examples() {
        let c = cfg(0.1, 4.0);
        assert!((effective_lr(0.0, &c) - 0.1 / 1e-8).abs() < 1e-3);
        assert!((effective_lr(4.0, &c) - 0.1).abs() < 1e-8);
    }

    #[test]
    fn sgd_examples() {
        let c = OptimizerConfig {
            eta: 1.0,
            variant: Variant::Sgd,
            ..OptimizerConfig::default()
        };
        assert_eq!(sgd_row_step(&[1.0, 1.0], &grad(&[1.0, 0.0]), &c).unwrap(), vec![0.0, 1.0]);
        assert_eq!(sgd_row_step(&[0.5, 2.0], &grad(&[0.0, 0.0]), &c).unwrap(), vec![0.5, 2.0]);
    }

    #[test]
    fn nonfinite_gradient_is_rejected() {
        let w = [0.0f32];
        assert!(matches!(
            adagrad_row_step(&w, 0.0, &grad(&[f64::NAN]), &cfg(0.1, 1.0)),
            Err(Error::NonFiniteGradient { .. })
        ));
        assert!(adagrad_row_step(&w, 0.0, &grad(&[f64::INFINITY]), &cfg(0.1, 1.0)).is_err());
    }

    #[test]
    fn unit_c_matches_textbook_adagrad() {
        // eta / (sqrt(v) + eps) with v accumulated over steps.
        let c = cfg(0.05, 1.0);
        let grads = [[0.3, -0.1], [0.0, 0.2], [-0.5, 0.4]];
        let (mut w, mut v) = (vec![0.1f32, 0.2], 0.0f32);
        let (mut w_ref, mut v_ref) = ([0.1f32, 0.2], 0.0f32);
        for g in &grads {
            adagrad_row_update(&mut w, &mut v, &grad(g), &c).unwrap();
            v_ref = (v_ref as f64 + g[0] * g[0] + g[1] * g[1]) as f32;
            let lr = 0.05 / ((v_ref as f64).sqrt() + 1e-8);
            for k in 0..2 {
                w_ref[k] = (w_ref[k] as f64 - lr * g[k]) as f32;
            }
        }
        assert_eq!(w, w_ref.to_vec());
        assert_eq!(v, v_ref);
    }

    proptest! {
        #[test]
        fn larger_c_means_larger_lr(v in 1e-6f64..1e6, c1 in 0.01f64..10.0, dc in 0.01f64..10.0) {
            let a = effective_lr(v, &cfg(0.1, c1));
            let b = effective_lr(v, &cfg(0.1, c1 + dc));
            prop_assert!(b > a);
        }

        #[test]
        fn moment_never_decreases(steps in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..20)) {
            let c = cfg(0.1, 2.0);
            let (mut w, mut v) = (vec![0.0f32; 3], 0.0f32);
            for g in &steps {
                let before = v;
                adagrad_row_update(&mut w, &mut v, &grad(g), &c).unwrap();
                prop_assert!(v >= before);
            }
        }
    }
}
