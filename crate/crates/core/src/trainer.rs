//! The toy DLRM training loop under two-dimensional sparse parallelism.
//!
//! Each step, every group runs on its own replica of the tables:
//!
//! 1. owners pool the rows they hold for every sample of the group batch and
//!    send the partial pools to the requesting rank (lookup all-to-all);
//! 2. each rank runs the dense towers on its samples;
//! 3. each rank returns the pooled-embedding gradients to the owners (gradient
//!    all-to-all), which average them over the group batch into row
//!    gradients and apply the moment-scaled row-wise update to their replica;
//! 4. dense gradients are averaged over all ranks and applied once;
//! 5. on sync steps every replica's touched rows, weights then moments, are
//!    replaced by their mean across groups.
//!
//! Only rows touched since the last sync can differ between replicas, and the
//! mean of identical `f32` values is exact, so syncing the touched rows gives
//! the same bits as averaging whole shards.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::collectives::{
    all_reduce_trace, route_all_to_all, simulate_step_latency, CollectiveTrace, Kernel, StepLatency,
};
use crate::data::{sigmoid, Generator, MiniBatch, Sample};
use crate::embedding::{init_table, EmbeddingTable, TableShard};
use crate::error::{Error, Result};
use crate::fmt::g9;
use crate::model::{apply_dense_sgd, logistic_loss, reduce_rank_grads, DenseGrads, DenseModel, ModelDims};
use crate::optimizer::{effective_lr, row_update, OptimizerConfig, RowGradAccumulator};
use crate::planner::{plan_greedy, ShardingPlan, Strategy, TableLoadProfile};
use crate::topology::{BandwidthModel, Topology};

/// Simulated compute time of one rank in one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ComputeCost {
    pub per_sample_s: f64,
    pub per_lookup_s: f64,
}

impl Default for ComputeCost {
    fn default() -> Self {
        Self {
            per_sample_s: 1e-6,
            per_lookup_s: 2e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub topology: Topology,
    pub per_rank_batch: usize,
    pub steps: u64,
    /// Steps between cross-group syncs; 1 syncs after every step.
    pub sync_interval: u64,
    pub optimizer: OptimizerConfig,
    /// Learning rate of the plain SGD step on the dense towers.
    pub dense_eta: f64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_samples: usize,
    pub threads: usize,
    pub strategy: Strategy,
    pub bandwidth: BandwidthModel,
    pub compute: ComputeCost,
    pub dims: ModelDims,
    pub model_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.bandwidth.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.per_rank_batch == 0 {
            return bad("data.per_rank_batch must be at least 1");
        }
        if self.sync_interval == 0 {
            return bad("run.sync_interval must be at least 1");
        }
        if self.threads == 0 {
            return bad("run.threads must be at least 1");
        }
        if !(self.dense_eta > 0.0 && self.dense_eta.is_finite()) {
            return bad("optimizer.dense_eta must be positive");
        }
        if self.dims.dim == 0 || self.dims.tables == 0 {
            return bad("model needs at least one table and a positive dimension");
        }
        Ok(())
    }

    pub fn global_batch(&self) -> usize {
        self.per_rank_batch * self.topology.ranks()
    }

    pub fn group_batch(&self) -> usize {
        self.per_rank_batch * self.topology.ranks_per_group()
    }
}

/// Normalized entropy of a set of predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NEReport {
    pub ne: f64,
    pub baseline_ctr: f64,
    pub eval_samples: usize,
    /// Relative gap to a baseline run, `(ne - ne_base) / ne_base`; positive
    /// means worse. NaN until compared.
    pub ne_gap: f64,
}

/// NE gaps at or above this relative size are significant.
pub const NE_SIGNIFICANCE: f64 = 0.0002;

impl NEReport {
    pub fn with_baseline(mut self, baseline_ne: f64) -> Self {
        self.ne_gap = (self.ne - baseline_ne) / baseline_ne;
        self
    }

    pub fn gap_is_significant(&self) -> bool {
        self.ne_gap.abs() >= NE_SIGNIFICANCE
    }
}

/// Mean log loss of `probs` divided by the entropy of always predicting the
/// observed click rate.
pub fn evaluate_ne(probs: &[f64], labels: &[u8]) -> Result<NEReport> {
    if probs.len() != labels.len() {
        return Err(Error::Shape("probabilities and labels differ in length".into()));
    }
    if probs.is_empty() {
        return Err(Error::Undefined("normalized entropy of an empty eval set"));
    }
    let n = probs.len() as f64;
    let ctr = labels.iter().map(|&y| y as f64).sum::<f64>() / n;
    if ctr <= 0.0 || ctr >= 1.0 {
        return Err(Error::Undefined("normalized entropy needs both labels present"));
    }
    let tiny = 1e-15;
    let mut ce = 0.0;
    for (&p, &y) in probs.iter().zip(labels) {
        let p = p.clamp(tiny, 1.0 - tiny);
        ce -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    ce /= n;
    let h = -(ctr * ctr.ln() + (1.0 - ctr) * (1.0 - ctr).ln());
    Ok(NEReport {
        ne: ce / h,
        baseline_ctr: ctr,
        eval_samples: probs.len(),
        ne_gap: f64::NAN,
    })
}

/// Click probability of each sample under full tables and dense towers.
pub fn predict(tables: &[EmbeddingTable], dense: &DenseModel<f32>, samples: &[Sample]) -> Vec<f64> {
    let dim = dense.dims.dim;
    let mut ws = dense.workspace();
    let mut pooled = vec![0.0f32; dense.dims.pooled_len()];
    let mut acc = vec![0.0f64; dim];
    samples
        .iter()
        .map(|s| {
            for (t, table) in tables.iter().enumerate() {
                acc.fill(0.0);
                for &id in &s.ids[t] {
                    for (a, &w) in acc.iter_mut().zip(table.row(id)) {
                        *a += w as f64;
                    }
                }
                for (p, a) in pooled[t * dim..(t + 1) * dim].iter_mut().zip(&acc) {
                    *p = *a as f32;
                }
            }
            sigmoid(dense.forward(&pooled, &s.dense, &mut ws) as f64)
        })
        .collect()
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub ne: f64,
    pub eff_lr_p50: f64,
    pub eff_lr_p99: f64,
    pub v_mean: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,loss,ne,eff_lr_p50,eff_lr_p99,v_mean";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            g9(self.loss),
            g9(self.ne),
            g9(self.eff_lr_p50),
            g9(self.eff_lr_p99),
            g9(self.v_mean)
        )
    }
}

/// Metrics CSV with the config hash on the first line.
pub fn metrics_csv(config_hash: &str, rows: &[MetricsRow]) -> String {
    let mut s = format!("# config_hash={config_hash}\n{}\n", MetricsRow::CSV_HEADER);
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Effective learning-rate percentiles over trained rows (`v > 0`) and the
/// mean moment over all rows. Rows with `v = 0` have never been updated and
/// are left out of the percentiles; with none trained they are NaN.
pub fn moment_summary(tables: &[EmbeddingTable], cfg: &OptimizerConfig) -> (f64, f64, f64) {
    let mut lrs = Vec::new();
    let mut v_sum = 0.0;
    let mut count = 0usize;
    for t in tables {
        for &v in t.moments() {
            v_sum += v as f64;
            count += 1;
            if v > 0.0 {
                lrs.push(effective_lr(v as f64, cfg));
            }
        }
    }
    lrs.sort_by(f64::total_cmp);
    let pct = |q: f64| {
        if lrs.is_empty() {
            f64::NAN
        } else {
            let idx = ((q * lrs.len() as f64).ceil() as usize).clamp(1, lrs.len()) - 1;
            lrs[idx]
        }
    };
    (pct(0.5), pct(0.99), v_sum / count.max(1) as f64)
}

/// A training implementation the metrics driver can step.
pub trait Engine {
    /// Run one step and return the summed training loss over the global batch.
    fn train_step(&mut self, step: u64) -> Result<f64>;
    /// Bring replicas to consensus at the end of a run.
    fn finish(&mut self) -> Result<()>;
    /// Full tables of the replica used for evaluation.
    fn tables(&self) -> Result<Vec<EmbeddingTable>>;
    fn dense(&self) -> &DenseModel<f32>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub ne: NEReport,
}

/// Train for `cfg.steps` steps, evaluating on `eval_set` at the configured
/// cadence and once at the end.
pub fn drive<E: Engine>(engine: &mut E, cfg: &TrainConfig, eval_set: &[Sample]) -> Result<RunOutput> {
    let labels: Vec<u8> = eval_set.iter().map(|s| s.label).collect();
    let mut metrics = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut last = None;
    for step in 0..cfg.steps {
        let loss = engine.train_step(step)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("summed batch loss is {loss}"),
            });
        }
        loss_sum += loss;
        loss_count += cfg.global_batch();
        let done = step + 1;
        let at_end = done == cfg.steps;
        if at_end {
            engine.finish()?;
        }
        if at_end || (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
            let tables = engine.tables()?;
            let probs = predict(&tables, engine.dense(), eval_set);
            let report = evaluate_ne(&probs, &labels)?;
            let (p50, p99, v_mean) = moment_summary(&tables, &cfg.optimizer);
            metrics.push(MetricsRow {
                step: done,
                loss: loss_sum / loss_count as f64,
                ne: report.ne,
                eff_lr_p50: p50,
                eff_lr_p99: p99,
                v_mean,
            });
            loss_sum = 0.0;
            loss_count = 0;
            last = Some(report);
        }
    }
    let ne = match last {
        Some(r) => r,
        None => {
            engine.finish()?;
            let probs = predict(&engine.tables()?, engine.dense(), eval_set);
            evaluate_ne(&probs, &labels)?
        }
    };
    Ok(RunOutput { metrics, ne })
}

/// Write `table_<id>.bin` per table and `dense.bin` into `dir`.
pub fn save_checkpoint(dir: &Path, tables: &[EmbeddingTable], dense: &DenseModel<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in tables {
        let mut buf = Vec::new();
        t.write_checkpoint(&mut buf)?;
        crate::files::write_atomic(&dir.join(format!("table_{}.bin", t.table_id)), &buf)?;
    }
    crate::files::write_atomic(&dir.join("dense.bin"), &dense.to_bytes())
}

/// Read tables `0..tables` and the dense blob written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path, tables: usize) -> Result<(Vec<EmbeddingTable>, Vec<u8>)> {
    let mut out = Vec::with_capacity(tables);
    for t in 0..tables {
        let path = dir.join(format!("table_{t}.bin"));
        let bytes = std::fs::read(&path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let table = EmbeddingTable::read_checkpoint(&bytes[..])?;
        if table.table_id != t as u32 {
            return Err(Error::Checkpoint(format!(
                "{} holds table {}",
                path.display(),
                table.table_id
            )));
        }
        out.push(table);
    }
    let path = dir.join("dense.bin");
    let dense = std::fs::read(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok((out, dense))
}

/// Initial tables: one per feature, `num_ids` rows, `Uniform(+-1/sqrt(D))`.
pub fn initial_tables(gen: &Generator, dim: usize, seed: u64) -> Vec<EmbeddingTable> {
    gen.specs()
        .iter()
        .map(|s| init_table(s.table_id, s.num_ids, dim, seed))
        .collect()
}

/// Load profiles of the generator's features, used to build the plan.
pub fn feature_profiles(gen: &Generator, dim: usize, batch: usize) -> Vec<TableLoadProfile> {
    gen.specs()
        .iter()
        .zip(gen.samplers())
        .map(|(s, z)| {
            let mut p = TableLoadProfile::from_feature(s, dim, batch);
            // Table-wise placement balances on the Zipf-weighted demand.
            p.expected_lookups = z.range_mass(0, s.num_ids) * p.expected_lookups;
            p
        })
        .collect()
}

/// Check that the generator's features line up with the model and that table
/// ids are `0..tables` in order.
pub(crate) fn check_features(gen: &Generator, dims: &ModelDims) -> Result<()> {
    if gen.specs().len() != dims.tables {
        return Err(Error::Config(format!(
            "{} features configured but the model has {} tables",
            gen.specs().len(),
            dims.tables
        )));
    }
    if gen.dense_dim() != dims.dense_features {
        return Err(Error::Config(format!(
            "data.dense_dim = {} but the dense arch takes {}",
            gen.dense_dim(),
            dims.dense_features
        )));
    }
    if let Some((i, s)) = gen.specs().iter().enumerate().find(|(i, s)| s.table_id != *i as u32) {
        return Err(Error::Config(format!("feature {i} has table id {}", s.table_id)));
    }
    Ok(())
}

/// Accumulated accounting of a 2D run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub steps: u64,
    pub samples: u64,
    /// Sum over steps of the per-step kernel breakdown.
    pub latency: StepLatency,
    /// Rows served per global rank.
    pub lookups: Vec<u64>,
    /// Lookup all-to-all payload per global rank, self block included.
    pub lookup_bytes: Vec<u64>,
    /// Largest per-rank footprint of table shards, moments and dense state.
    pub peak_mem_bytes: u64,
}

impl RunStats {
    /// Global samples per simulated second.
    pub fn qps_sim(&self) -> f64 {
        self.samples as f64 / self.latency.total
    }

    /// Max-over-mean of the rows each rank served.
    pub fn imbalance_ratio(&self) -> Result<f64> {
        let loads: Vec<f64> = self.lookups.iter().map(|&l| l as f64).collect();
        crate::planner::imbalance_ratio(&loads)
    }

    /// Largest per-rank lookup all-to-all payload per step.
    pub fn lookup_bytes_per_rank_step(&self) -> f64 {
        let max = self.lookup_bytes.iter().copied().max().unwrap_or(0);
        max as f64 / self.steps.max(1) as f64
    }
}

/// Static shard layout shared by all groups.
#[derive(Clone, Debug)]
struct Layout {
    plan: ShardingPlan,
    /// Table index of every plan entry.
    entry_table: Vec<usize>,
    /// Entries held by each local rank, in plan order.
    held: Vec<Vec<usize>>,
    /// Per table, `(row_lo, entry)` sorted by `row_lo`.
    by_row: Vec<Vec<(u64, usize)>>,
}

impl Layout {
    fn new(plan: ShardingPlan, tables: usize) -> Self {
        let entry_table: Vec<usize> = plan.entries.iter().map(|e| e.table_id as usize).collect();
        let mut held = vec![Vec::new(); plan.ranks_per_group];
        let mut by_row = vec![Vec::new(); tables];
        for (i, e) in plan.entries.iter().enumerate() {
            held[e.local_rank].push(i);
            by_row[e.table_id as usize].push((e.rows.start, i));
        }
        for v in &mut by_row {
            v.sort_unstable();
        }
        Self {
            plan,
            entry_table,
            held,
            by_row,
        }
    }

    fn entry_of(&self, table: usize, row: u64) -> usize {
        let v = &self.by_row[table];
        let i = v.partition_point(|&(lo, _)| lo <= row) - 1;
        v[i].1
    }
}

/// What one group produced in one step.
struct GroupOut {
    loss: Vec<f64>,
    lookups: Vec<u64>,
    lookup: CollectiveTrace,
    grad: CollectiveTrace,
    touched: Vec<(usize, u64)>,
}

fn floats(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()))
}

fn push_floats(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f32>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// The per-rank dense pass: forward, loss and backward over one rank's
/// samples. Returns the summed loss; parameter gradients are summed into
/// `grads` and `dpooled` receives one pooled-gradient block per sample.
fn dense_pass(
    dense: &DenseModel<f32>,
    batch: &MiniBatch,
    pooled: &[f32],
    grads: &mut DenseGrads<f32>,
    dpooled: &mut [f32],
) -> f64 {
    let p = dense.dims.pooled_len();
    let mut ws = dense.workspace();
    let mut loss = 0.0;
    for (i, s) in batch.samples.iter().enumerate() {
        let logit = dense.forward(&pooled[i * p..(i + 1) * p], &s.dense, &mut ws);
        loss += logistic_loss(logit as f64, s.label);
        let dlogit = (sigmoid(logit as f64) - s.label as f64) as f32;
        dense.backward(dlogit, &mut ws, grads, &mut dpooled[i * p..(i + 1) * p]);
    }
    loss
}

struct StepCtx<'a> {
    cfg: &'a TrainConfig,
    layout: &'a Layout,
    dense: &'a DenseModel<f32>,
    batches: &'a [MiniBatch],
}

impl StepCtx<'_> {
    fn group_step(
        &self,
        group: usize,
        shards: &mut [TableShard],
        grads: &mut [DenseGrads<f32>],
    ) -> Result<GroupOut> {
        let topo = &self.cfg.topology;
        let n = topo.ranks_per_group();
        let dim = self.cfg.dims.dim;
        let p = self.cfg.dims.pooled_len();
        let layout = self.layout;
        let batch_of = |local: usize| &self.batches[topo.rank_of(group, local)];

        // Lookup all-to-all: owner `o` sends requester `r` one partial pool per
        // (sample, held entry).
        let mut lookups = vec![0u64; n];
        let mut acc = vec![0.0f64; dim];
        let mut payloads = Vec::with_capacity(n);
        for (o, held) in layout.held.iter().enumerate() {
            let mut row = Vec::with_capacity(n);
            for r in 0..n {
                let batch = batch_of(r);
                let mut blob = Vec::with_capacity(batch.len() * held.len() * dim * 4);
                for s in &batch.samples {
                    for &e in held {
                        let ids = &s.ids[layout.entry_table[e]];
                        let shard = &shards[e];
                        lookups[o] += ids.iter().filter(|&&id| shard.contains(id)).count() as u64;
                        acc.fill(0.0);
                        shard.pool_partial(ids, &mut acc);
                        push_floats(&mut blob, acc.iter().map(|&a| a as f32));
                    }
                }
                row.push(blob);
            }
            payloads.push(row);
        }
        let (delivered, lookup) = route_all_to_all(topo, group, payloads, &self.cfg.bandwidth)?;

        // Requesters sum the partials over owners in ascending order, then run
        // the dense towers.
        let per_rank: Vec<(Vec<f32>, f64)> = delivered
            .into_par_iter()
            .zip(grads.par_iter_mut())
            .enumerate()
            .map(|(r, (from, grads))| {
                let batch = batch_of(r);
                let b = batch.len();
                let mut pooled64 = vec![0.0f64; b * p];
                for (o, blob) in from.iter().enumerate() {
                    let mut xs = floats(blob);
                    for i in 0..b {
                        for &e in &layout.held[o] {
                            let base = i * p + layout.entry_table[e] * dim;
                            for slot in &mut pooled64[base..base + dim] {
                                *slot += xs.next().unwrap() as f64;
                            }
                        }
                    }
                }
                let pooled: Vec<f32> = pooled64.iter().map(|&x| x as f32).collect();
                grads.zero();
                let mut dpooled = vec![0.0f32; b * p];
                let loss = dense_pass(self.dense, batch, &pooled, grads, &mut dpooled);
                (dpooled, loss)
            })
            .collect();

        // Gradient all-to-all: requester `r` returns to owner `o` the pooled
        // gradient of every (sample, entry held by `o`).
        let payloads: Vec<Vec<Vec<u8>>> = per_rank
            .iter()
            .enumerate()
            .map(|(r, (dpooled, _))| {
                let b = batch_of(r).len();
                layout
                    .held
                    .iter()
                    .map(|held| {
                        let mut blob = Vec::with_capacity(b * held.len() * dim * 4);
                        for i in 0..b {
                            for &e in held {
                                let base = i * p + layout.entry_table[e] * dim;
                                push_floats(&mut blob, dpooled[base..base + dim].iter().copied());
                            }
                        }
                        blob
                    })
                    .collect()
            })
            .collect();
        let (delivered, grad) = route_all_to_all(topo, group, payloads, &self.cfg.bandwidth)?;

        // Owners: sum per-sample row gradients in (source, sample) order,
        // divide by the group batch and update their replica.
        let group_batch = self.cfg.group_batch();
        let mut touched = Vec::new();
        let mut slice = vec![0.0f32; dim];
        for (o, from) in delivered.iter().enumerate() {
            let held = &layout.held[o];
            let mut accs: Vec<RowGradAccumulator> = held.iter().map(|_| RowGradAccumulator::new(dim)).collect();
            for (r, blob) in from.iter().enumerate() {
                let mut xs = floats(blob);
                for s in &batch_of(r).samples {
                    for (k, &e) in held.iter().enumerate() {
                        for x in slice.iter_mut() {
                            *x = xs.next().unwrap();
                        }
                        for &id in &s.ids[layout.entry_table[e]] {
                            if shards[e].contains(id) {
                                accs[k].add(id, &slice);
                            }
                        }
                    }
                }
            }
            for (acc, &e) in accs.into_iter().zip(held) {
                for g in acc.finish(group_batch)? {
                    let (w, v) = shards[e].row_mut(g.row)?;
                    row_update(w, v, &g, &self.cfg.optimizer)?;
                    touched.push((layout.entry_table[e], g.row));
                }
            }
        }

        Ok(GroupOut {
            loss: per_rank.into_iter().map(|(_, l)| l).collect(),
            lookups,
            lookup,
            grad,
            touched,
        })
    }
}

/// One trace CSV line: `step,kernel,rank,bytes,latency_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub kernel: &'static str,
    pub rank: usize,
    pub bytes: u64,
    pub latency_s: f64,
}

impl TraceRecord {
    pub const CSV_HEADER: &'static str = "step,kernel,rank,bytes,latency_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step,
            self.kernel,
            self.rank,
            self.bytes,
            g9(self.latency_s)
        )
    }
}

/// The 2D trainer: `M` replicas of the tables, each sharded over the `N`
/// ranks of its group, and one copy of the data-parallel dense towers.
pub struct Trainer {
    cfg: TrainConfig,
    gen: Generator,
    layout: Layout,
    /// `replicas[group][entry]`
    replicas: Vec<Vec<TableShard>>,
    dense: DenseModel<f32>,
    /// Per-rank dense gradients, reused across steps.
    rank_grads: Vec<DenseGrads<f32>>,
    summed: Vec<f64>,
    /// Rows touched since the last sync, per table, with a membership mask.
    dirty: Vec<Vec<u64>>,
    dirty_mask: Vec<Vec<bool>>,
    stats: RunStats,
    pool: Arc<rayon::ThreadPool>,
    trace: Option<Box<dyn Write + Send>>,
}

impl Trainer {
    /// Fresh tables and dense towers from `cfg.model_seed`.
    pub fn new(cfg: TrainConfig, gen: Generator) -> Result<Self> {
        let tables = initial_tables(&gen, cfg.dims.dim, cfg.model_seed);
        let dense = DenseModel::new(cfg.dims, cfg.model_seed);
        Self::with_state(cfg, gen, tables, dense)
    }

    /// Start from the given tables and dense towers; every group receives a
    /// copy of the tables.
    pub fn with_state(
        cfg: TrainConfig,
        gen: Generator,
        tables: Vec<EmbeddingTable>,
        dense: DenseModel<f32>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_features(&gen, &cfg.dims)?;
        if tables.len() != cfg.dims.tables
            || tables
                .iter()
                .zip(gen.specs())
                .any(|(t, s)| t.rows() != s.num_ids || t.dim() != cfg.dims.dim)
        {
            return Err(Error::Checkpoint("tables do not match the configured features".into()));
        }
        if dense.dims != cfg.dims {
            return Err(Error::Checkpoint("dense towers do not match the configured model".into()));
        }
        let topo = cfg.topology;
        let profiles = feature_profiles(&gen, cfg.dims.dim, cfg.group_batch());
        let plan = plan_greedy(&profiles, topo.ranks_per_group(), cfg.strategy)?;
        plan.validate(&profiles)?;
        let layout = Layout::new(plan, cfg.dims.tables);
        let shards: Vec<TableShard> = layout
            .plan
            .entries
            .iter()
            .map(|e| tables[e.table_id as usize].shard(e.rows.clone()))
            .collect::<Result<_>>()?;
        let replicas = vec![shards; topo.groups()];

        let dense_bytes = 4 * 2 * dense.num_params() as u64;
        let peak = layout
            .held
            .iter()
            .map(|held| held.iter().map(|&e| replicas[0][e].size_bytes()).sum::<u64>())
            .max()
            .unwrap_or(0)
            + dense_bytes;
        let stats = RunStats {
            lookups: vec![0; topo.ranks()],
            lookup_bytes: vec![0; topo.ranks()],
            peak_mem_bytes: peak,
            ..RunStats::default()
        };
        let pool = Arc::new(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?,
        );
        Ok(Self {
            dirty: vec![Vec::new(); cfg.dims.tables],
            dirty_mask: tables.iter().map(|t| vec![false; t.rows() as usize]).collect(),
            cfg,
            gen,
            layout,
            replicas,
            rank_grads: vec![dense.grads(); topo.ranks()],
            summed: Vec::new(),
            dense,
            stats,
            pool,
            trace: None,
        })
    }

    /// Stream per-rank kernel records to `out` as CSV.
    pub fn set_trace(&mut self, mut out: Box<dyn Write + Send>) -> Result<()> {
        writeln!(out, "{}", TraceRecord::CSV_HEADER)?;
        self.trace = Some(out);
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &ShardingPlan {
        &self.layout.plan
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn generator(&self) -> &Generator {
        &self.gen
    }

    /// Shards of one group, in plan order.
    pub fn replica(&self, group: usize) -> &[TableShard] {
        &self.replicas[group]
    }

    /// Full tables assembled from one group's shards.
    pub fn group_tables(&self, group: usize) -> Result<Vec<EmbeddingTable>> {
        (0..self.cfg.dims.tables)
            .map(|t| {
                let parts: Vec<&TableShard> = self.layout.by_row[t]
                    .iter()
                    .map(|&(_, e)| &self.replicas[group][e])
                    .collect();
                EmbeddingTable::from_shards(&parts)
            })
            .collect()
    }

    /// Largest absolute weight or moment difference between any replica and
    /// group 0.
    pub fn replica_discrepancy(&self) -> f64 {
        let mut worst = 0.0f64;
        for other in &self.replicas[1..] {
            for (a, b) in self.replicas[0].iter().zip(other) {
                for (x, y) in a.weights().iter().zip(b.weights()).chain(a.moments().iter().zip(b.moments())) {
                    worst = worst.max((*x as f64 - *y as f64).abs());
                }
            }
        }
        worst
    }

    /// True when every replica is bitwise identical to group 0.
    pub fn replicas_identical(&self) -> bool {
        self.replicas[1..].iter().all(|r| {
            r.iter().zip(&self.replicas[0]).all(|(a, b)| {
                a.weights().iter().map(|x| x.to_bits()).eq(b.weights().iter().map(|x| x.to_bits()))
                    && a.moments().iter().map(|x| x.to_bits()).eq(b.moments().iter().map(|x| x.to_bits()))
            })
        })
    }

    fn emit(&mut self, step: u64, kernel: Kernel, trace: &CollectiveTrace) -> Result<()> {
        if let Some(out) = self.trace.as_mut() {
            for (i, &rank) in trace.participants.iter().enumerate() {
                let rec = TraceRecord {
                    step,
                    kernel: kernel.name(),
                    rank,
                    bytes: trace.volume(i),
                    latency_s: trace.latency_s,
                };
                writeln!(out, "{}", rec.csv_row())?;
            }
        }
        Ok(())
    }

    /// Average every touched row across groups, weights then moments, and
    /// return the all-reduce traces of the sync.
    fn sync(&mut self) -> Vec<CollectiveTrace> {
        let m = self.cfg.topology.groups();
        let dim = self.cfg.dims.dim;
        let mut acc = vec![0.0f64; dim];
        for t in 0..self.dirty.len() {
            for &row in &self.dirty[t] {
                let e = self.layout.entry_of(t, row);
                acc.fill(0.0);
                let mut v = 0.0f64;
                for g in 0..m {
                    let shard = &self.replicas[g][e];
                    for (a, &x) in acc.iter_mut().zip(shard.row(row).unwrap()) {
                        *a += x as f64;
                    }
                    v += shard.moment(row).unwrap() as f64;
                }
                let v = (v / m as f64) as f32;
                for g in 0..m {
                    let (w, mv) = self.replicas[g][e].row_mut(row).unwrap();
                    for (x, a) in w.iter_mut().zip(&acc) {
                        *x = (a / m as f64) as f32;
                    }
                    *mv = v;
                }
                self.dirty_mask[t][row as usize] = false;
            }
            self.dirty[t].clear();
        }
        let topo = self.cfg.topology;
        self.layout
            .held
            .iter()
            .enumerate()
            .map(|(n, held)| {
                let bytes = held.iter().map(|&e| self.replicas[0][e].size_bytes()).sum();
                all_reduce_trace(&topo, n, bytes, &self.cfg.bandwidth)
            })
            .collect()
    }

    fn record_sync(&mut self, step: u64) -> Result<f64> {
        let traces = self.sync();
        let mut worst = 0.0f64;
        for t in &traces {
            worst = worst.max(t.latency_s);
            self.emit(step, Kernel::TableAllReduce, t)?;
        }
        Ok(worst)
    }

    fn step_inner(&mut self, step: u64) -> Result<f64> {
        let topo = self.cfg.topology;
        let batches = self.gen.global_batch(step, &topo, self.cfg.per_rank_batch);
        let ctx = StepCtx {
            cfg: &self.cfg,
            layout: &self.layout,
            dense: &self.dense,
            batches: &batches,
        };
        let outs: Vec<GroupOut> = self
            .replicas
            .par_iter_mut()
            .zip(self.rank_grads.par_chunks_mut(topo.ranks_per_group()))
            .enumerate()
            .map(|(g, (shards, grads))| ctx.group_step(g, shards, grads))
            .collect::<Result<_>>()?;

        let mut loss = 0.0;
        let mut traces = Vec::with_capacity(2 * outs.len());
        let mut compute = Vec::with_capacity(topo.ranks());
        for (g, out) in outs.into_iter().enumerate() {
            for (local, (&l, &lk)) in out.loss.iter().zip(&out.lookups).enumerate() {
                let rank = topo.rank_of(g, local);
                loss += l;
                self.stats.lookups[rank] += lk;
                self.stats.lookup_bytes[rank] += out.lookup.volume(local);
                compute.push(
                    self.cfg.compute.per_sample_s * self.cfg.per_rank_batch as f64
                        + self.cfg.compute.per_lookup_s * lk as f64,
                );
            }
            if topo.groups() > 1 {
                for (t, row) in out.touched {
                    let mask = &mut self.dirty_mask[t][row as usize];
                    if !*mask {
                        *mask = true;
                        self.dirty[t].push(row);
                    }
                }
            }
            traces.push((Kernel::LookupAllToAll, out.lookup));
            traces.push((Kernel::GradAllToAll, out.grad));
        }

        reduce_rank_grads(&self.rank_grads, &mut self.summed);
        apply_dense_sgd(&mut self.dense, &self.summed, self.cfg.global_batch(), self.cfg.dense_eta);

        for (k, t) in &traces {
            self.emit(step, *k, t)?;
        }
        if topo.groups() > 1 && (step + 1) % self.cfg.sync_interval == 0 {
            for t in self.sync() {
                self.emit(step, Kernel::TableAllReduce, &t)?;
                traces.push((Kernel::TableAllReduce, t));
            }
        }
        if let Some(out) = self.trace.as_mut() {
            for (rank, &c) in compute.iter().enumerate() {
                let rec = TraceRecord {
                    step,
                    kernel: "compute",
                    rank,
                    bytes: 0,
                    latency_s: c,
                };
                writeln!(out, "{}", rec.csv_row())?;
            }
        }
        self.stats.latency += simulate_step_latency(&traces, &compute);
        self.stats.steps += 1;
        self.stats.samples += self.cfg.global_batch() as u64;
        Ok(loss)
    }
}

impl Engine for Trainer {
    fn train_step(&mut self, step: u64) -> Result<f64> {
        let pool = Arc::clone(&self.pool);
        pool.install(|| self.step_inner(step))
    }

    /// A final sync when the last step was not a sync step.
    fn finish(&mut self) -> Result<()> {
        if self.dirty.iter().any(|d| !d.is_empty()) {
            let step = self.stats.steps;
            let worst = self.record_sync(step)?;
            self.stats.latency.table_allreduce += worst;
            self.stats.latency.total += worst;
        }
        if let Some(out) = self.trace.as_mut() {
            out.flush()?;
        }
        Ok(())
    }

    fn tables(&self) -> Result<Vec<EmbeddingTable>> {
        self.group_tables(0)
    }

    fn dense(&self) -> &DenseModel<f32> {
        &self.dense
    }
}
