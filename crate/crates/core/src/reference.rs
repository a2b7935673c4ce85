//! Full model parallelism without groups or collectives.
//!
//! One copy of every shard, pooled and updated in place. The pooling and
//! gradient accumulation orders are the ones a single group uses, so with
//! `M = 1` the 2D trainer must reproduce this path bit for bit.

use crate::data::Generator;
use crate::embedding::{EmbeddingTable, TableShard};
use crate::error::{Error, Result};
use crate::model::{apply_dense_sgd, logistic_loss, reduce_rank_grads, DenseModel};
use crate::optimizer::{RowGradAccumulator, Variant};
use crate::planner::{plan_greedy, ShardingPlan};
use crate::trainer::{check_features, feature_profiles, initial_tables, Engine, TrainConfig};

pub struct ReferenceTrainer {
    cfg: TrainConfig,
    gen: Generator,
    plan: ShardingPlan,
    shards: Vec<TableShard>,
    /// Per table, entry indices ordered by `(local_rank, row_lo)`.
    pool_order: Vec<Vec<usize>>,
    dense: DenseModel<f32>,
}

impl ReferenceTrainer {
    pub fn new(cfg: TrainConfig, gen: Generator) -> Result<Self> {
        let tables = initial_tables(&gen, cfg.dims.dim, cfg.model_seed);
        let dense = DenseModel::new(cfg.dims, cfg.model_seed);
        Self::with_state(cfg, gen, tables, dense)
    }

    /// The plan is built for all `T` ranks as one group; `cfg.topology`'s
    /// group count is ignored.
    pub fn with_state(
        cfg: TrainConfig,
        gen: Generator,
        tables: Vec<EmbeddingTable>,
        dense: DenseModel<f32>,
    ) -> Result<Self> {
        cfg.validate()?;
        check_features(&gen, &cfg.dims)?;
        let ranks = cfg.topology.ranks();
        let batch = cfg.per_rank_batch * ranks;
        let profiles = feature_profiles(&gen, cfg.dims.dim, batch);
        let plan = plan_greedy(&profiles, ranks, cfg.strategy)?;
        let shards = plan
            .entries
            .iter()
            .map(|e| tables[e.table_id as usize].shard(e.rows.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut pool_order = vec![Vec::new(); cfg.dims.tables];
        for (i, e) in plan.entries.iter().enumerate() {
            pool_order[e.table_id as usize].push(i);
        }
        for order in &mut pool_order {
            order.sort_by_key(|&i| (plan.entries[i].local_rank, plan.entries[i].rows.start));
        }
        Ok(Self {
            cfg,
            gen,
            plan,
            shards,
            pool_order,
            dense,
        })
    }

    /// The single-group plan over all ranks.
    pub fn plan(&self) -> &ShardingPlan {
        &self.plan
    }

    fn owner(&self, table: usize, id: u64) -> usize {
        *self.pool_order[table]
            .iter()
            .find(|&&e| self.plan.entries[e].rows.contains(&id))
            .expect("plan covers every row")
    }
}

impl Engine for ReferenceTrainer {
    fn train_step(&mut self, step: u64) -> Result<f64> {
        let dim = self.cfg.dims.dim;
        let p = self.cfg.dims.pooled_len();
        let b = self.cfg.per_rank_batch;
        let ranks = self.cfg.topology.ranks();
        let global = b * ranks;

        let mut accs: Vec<RowGradAccumulator> =
            self.shards.iter().map(|_| RowGradAccumulator::new(dim)).collect();
        let mut rank_grads = Vec::with_capacity(ranks);
        let mut loss = 0.0;
        let mut part = vec![0.0f64; dim];
        let mut sum = vec![0.0f64; dim];
        let mut pooled = vec![0.0f32; p];
        let mut dpooled = vec![0.0f32; p];
        let mut ws = self.dense.workspace();
        for rank in 0..ranks {
            let batch = self.gen.gen_batch(step, rank, b);
            let mut grads = self.dense.grads();
            let mut rank_loss = 0.0;
            for s in &batch.samples {
                for t in 0..self.cfg.dims.tables {
                    sum.fill(0.0);
                    for &e in &self.pool_order[t] {
                        part.fill(0.0);
                        self.shards[e].pool_partial(&s.ids[t], &mut part);
                        for (a, &x) in sum.iter_mut().zip(&part) {
                            *a += (x as f32) as f64;
                        }
                    }
                    for (o, &a) in pooled[t * dim..(t + 1) * dim].iter_mut().zip(&sum) {
                        *o = a as f32;
                    }
                }
                let logit = self.dense.forward(&pooled, &s.dense, &mut ws);
                rank_loss += logistic_loss(logit as f64, s.label);
                let prob = crate::data::sigmoid(logit as f64);
                let dlogit = (prob - s.label as f64) as f32;
                self.dense.backward(dlogit, &mut ws, &mut grads, &mut dpooled);
                for t in 0..self.cfg.dims.tables {
                    for &id in &s.ids[t] {
                        let e = self.owner(t, id);
                        accs[e].add(id, &dpooled[t * dim..(t + 1) * dim]);
                    }
                }
            }
            loss += rank_loss;
            rank_grads.push(grads);
        }

        let cfg = self.cfg.optimizer;
        for (e, acc) in accs.into_iter().enumerate() {
            for g in acc.finish(global)? {
                if g.vector.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient { row: g.row });
                }
                let (w, v) = self.shards[e].row_mut(g.row)?;
                let lr = match cfg.variant {
                    Variant::RowwiseAdagrad => {
                        let norm2: f64 = g.vector.iter().map(|x| x * x).sum();
                        *v = (*v as f64 + norm2) as f32;
                        cfg.eta / ((*v as f64 / cfg.c).sqrt() + cfg.eps)
                    }
                    Variant::Sgd => cfg.eta,
                };
                for (x, gi) in w.iter_mut().zip(&g.vector) {
                    *x = (*x as f64 - lr * gi) as f32;
                }
            }
        }

        let mut summed = Vec::new();
        reduce_rank_grads(&rank_grads, &mut summed);
        apply_dense_sgd(&mut self.dense, &summed, global, self.cfg.dense_eta);
        Ok(loss)
    }

    fn finish(&mut self) -> Result<()> {
        Ok(())
    }

    fn tables(&self) -> Result<Vec<EmbeddingTable>> {
        (0..self.cfg.dims.tables)
            .map(|t| {
                let parts: Vec<&TableShard> = self.pool_order[t].iter().map(|&e| &self.shards[e]).collect();
                EmbeddingTable::from_shards(&parts)
            })
            .collect()
    }

    fn dense(&self) -> &DenseModel<f32> {
        &self.dense
    }
}
