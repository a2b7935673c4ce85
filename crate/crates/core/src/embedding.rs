//! Embedding tables, row-range shards, sum pooling and sparse row updates.
//!
//! Weights and per-row second moments are stored as `f32`; every reduction
//! (pooling, update arithmetic) accumulates in `f64` and rounds once on store.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Lane};

pub const CHECKPOINT_VERSION: u32 = 1;

/// A full table: `rows x dim` weights plus one moment per row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub table_id: u32,
    rows: u64,
    dim: usize,
    weights: Vec<f32>,
    moments: Vec<f32>,
}

/// Contiguous rows `[lo, hi)` of one table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableShard {
    pub table_id: u32,
    lo: u64,
    hi: u64,
    dim: usize,
    weights: Vec<f32>,
    moments: Vec<f32>,
}

/// Sum of the looked-up rows for one sample and one feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding {
    pub feature_id: u32,
    pub vector: Vec<f32>,
}

/// Weights drawn from `Uniform(-1/sqrt(D), 1/sqrt(D))`, one stream per row;
/// moments start at zero.
pub fn init_table(table_id: u32, rows: u64, dim: usize, seed: u64) -> EmbeddingTable {
    assert!(rows >= 1 && dim >= 1, "table must have at least one row and column");
    let bound = 1.0 / (dim as f64).sqrt();
    let mut weights = Vec::with_capacity(rows as usize * dim);
    for row in 0..rows {
        let mut rng = rng::stream(seed, Lane::EmbeddingInit, &[table_id as u64, row]);
        weights.extend((0..dim).map(|_| rng.random_range(-bound..bound) as f32));
    }
    EmbeddingTable {
        table_id,
        rows,
        dim,
        weights,
        moments: vec![0.0; rows as usize],
    }
}

impl EmbeddingTable {
    pub fn zeros(table_id: u32, rows: u64, dim: usize) -> Self {
        Self {
            table_id,
            rows,
            dim,
            weights: vec![0.0; rows as usize * dim],
            moments: vec![0.0; rows as usize],
        }
    }

    pub fn from_parts(table_id: u32, dim: usize, weights: Vec<f32>, moments: Vec<f32>) -> Result<Self> {
        if dim == 0 || weights.len() != moments.len() * dim || moments.is_empty() {
            return Err(Error::Shape(format!(
                "table {table_id}: {} weights and {} moments do not form a dim-{dim} table",
                weights.len(),
                moments.len()
            )));
        }
        if let Some(&v) = moments.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::NegativeMoment(v as f64));
        }
        Ok(Self {
            table_id,
            rows: moments.len() as u64,
            dim,
            weights,
            moments,
        })
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: u64) -> &[f32] {
        let i = i as usize;
        &self.weights[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn moments(&self) -> &[f32] {
        &self.moments
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    /// Copy out rows `range` as a shard.
    pub fn shard(&self, range: Range<u64>) -> Result<TableShard> {
        if range.start > range.end || range.end > self.rows {
            return Err(Error::Shape(format!(
                "shard {}..{} outside table {} with {} rows",
                range.start, range.end, self.table_id, self.rows
            )));
        }
        let (lo, hi) = (range.start as usize, range.end as usize);
        Ok(TableShard {
            table_id: self.table_id,
            lo: range.start,
            hi: range.end,
            dim: self.dim,
            weights: self.weights[lo * self.dim..hi * self.dim].to_vec(),
            moments: self.moments[lo..hi].to_vec(),
        })
    }

    /// Reassemble a table from shards that exactly cover `[0, R)`.
    pub fn from_shards(shards: &[&TableShard]) -> Result<Self> {
        let first = shards
            .first()
            .ok_or(Error::Shape("no shards to assemble".into()))?;
        let mut sorted: Vec<&TableShard> = shards.to_vec();
        sorted.sort_by_key(|s| (s.lo, s.hi));
        let mut next = 0;
        let mut weights = Vec::new();
        let mut moments = Vec::new();
        for s in &sorted {
            if s.table_id != first.table_id || s.dim != first.dim || s.lo != next {
                return Err(Error::Shape(format!(
                    "shards of table {} do not tile the row space",
                    first.table_id
                )));
            }
            next = s.hi;
            weights.extend_from_slice(&s.weights);
            moments.extend_from_slice(&s.moments);
        }
        Self::from_parts(first.table_id, first.dim, weights, moments)
    }

    /// Write the table in the little-endian checkpoint layout: a header of
    /// `table_id: u32, rows: u64, dim: u32, version: u32`, then row-major
    /// weights, then moments, all `f32`.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(20 + 4 * (self.weights.len() + self.moments.len()));
        buf.extend_from_slice(&self.table_id.to_le_bytes());
        buf.extend_from_slice(&self.rows.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for v in &self.moments {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < 20 {
            return Err(Error::Checkpoint("truncated header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let table_id = u32_at(0);
        let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
        let dim = u32_at(12) as usize;
        let version = u32_at(16);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n_weights = (rows as usize)
            .checked_mul(dim)
            .ok_or_else(|| Error::Checkpoint("table too large".into()))?;
        let expected = 20 + 4 * (n_weights + rows as usize);
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "table {table_id}: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let floats: Vec<f32> = bytes[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (w, v) = floats.split_at(n_weights);
        Self::from_parts(table_id, dim, w.to_vec(), v.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl TableShard {
    pub fn range(&self) -> Range<u64> {
        self.lo..self.hi
    }

    pub fn contains(&self, row: u64) -> bool {
        self.lo <= row && row < self.hi
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> u64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        self.hi == self.lo
    }

    /// Bytes of weights plus moments.
    pub fn size_bytes(&self) -> u64 {
        4 * (self.weights.len() + self.moments.len()) as u64
    }

    fn offset(&self, row: u64) -> Result<usize> {
        if !self.contains(row) {
            return Err(Error::RowOutOfShard {
                table: self.table_id,
                row,
                range: self.range(),
            });
        }
        Ok((row - self.lo) as usize)
    }

    pub fn row(&self, row: u64) -> Result<&[f32]> {
        let i = self.offset(row)?;
        Ok(&self.weights[i * self.dim..(i + 1) * self.dim])
    }

    pub fn moment(&self, row: u64) -> Result<f32> {
        Ok(self.moments[self.offset(row)?])
    }

    /// Mutable weights and moment of one row.
    pub fn row_mut(&mut self, row: u64) -> Result<(&mut [f32], &mut f32)> {
        let i = self.offset(row)?;
        let dim = self.dim;
        Ok((&mut self.weights[i * dim..(i + 1) * dim], &mut self.moments[i]))
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn moments(&self) -> &[f32] {
        &self.moments
    }

    /// Add the rows of every ID in `ids` that falls inside this shard to `acc`,
    /// in list order. IDs owned by other shards are skipped.
    #[inline]
    pub fn pool_partial(&self, ids: &[u64], acc: &mut [f64]) {
        for &id in ids {
            if self.contains(id) {
                let i = (id - self.lo) as usize;
                let row = &self.weights[i * self.dim..(i + 1) * self.dim];
                for (a, &w) in acc.iter_mut().zip(row) {
                    *a += w as f64;
                }
            }
        }
    }
}

/// Sum-pool each sample's ID list over a set of shards of one table.
///
/// Every ID must fall inside one of the presented shards; an empty list pools
/// to the zero vector.
pub fn lookup_and_pool(shards: &[&TableShard], id_lists: &[Vec<u64>]) -> Result<Vec<PooledEmbedding>> {
    let first = shards
        .first()
        .ok_or(Error::Shape("lookup needs at least one shard".into()))?;
    let dim = first.dim;
    let table = first.table_id;
    let mut out = Vec::with_capacity(id_lists.len());
    let mut acc = vec![0.0f64; dim];
    for ids in id_lists {
        acc.fill(0.0);
        for &id in ids {
            let shard = shards.iter().find(|s| s.contains(id)).ok_or_else(|| {
                let lo = shards.iter().map(|s| s.lo).min().unwrap_or(0);
                let hi = shards.iter().map(|s| s.hi).max().unwrap_or(0);
                Error::IdOutOfRange {
                    table,
                    id,
                    range: lo..hi,
                }
            })?;
            for (a, &w) in acc.iter_mut().zip(shard.row(id)?) {
                *a += w as f64;
            }
        }
        out.push(PooledEmbedding {
            feature_id: table,
            vector: acc.iter().map(|&a| a as f32).collect(),
        });
    }
    Ok(out)
}

/// `weights[row] += delta`, `moments[row] = new_moment`. Other rows are not
/// touched.
pub fn apply_row_update(shard: &mut TableShard, row: u64, delta: &[f64], new_moment: f64) -> Result<()> {
    if !(new_moment >= 0.0) {
        return Err(Error::NegativeMoment(new_moment));
    }
    if delta.len() != shard.dim {
        return Err(Error::Shape(format!(
            "delta has {} entries, table dim is {}",
            delta.len(),
            shard.dim
        )));
    }
    let (w, v) = shard.row_mut(row)?;
    for (x, d) in w.iter_mut().zip(delta) {
        *x = (*x as f64 + d) as f32;
    }
    *v = new_moment as f32;
    Ok(())
}
