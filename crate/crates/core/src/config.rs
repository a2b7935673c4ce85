//! Experiment configuration: a flat `dotted.key = value` text format.
//!
//! ```text
//! # comment
//! topology.ranks = 8
//! topology.groups = 4
//! data.seed = 7
//! optimizer.eta = 0.5
//! run.steps = 1000
//! ```
//!
//! Unknown keys are rejected, missing required keys are reported together,
//! and the resolved configuration (every key with its default filled in) is
//! hashed with SHA-256 so that each artifact records exactly what produced it.
//! Worker threads, the output directory and the reference-path switch are
//! command-line options, not keys: they never change results.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::data::{FeatureSpec, Generator, LabelScales};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::optimizer::{OptimizerConfig, Variant};
use crate::planner::Strategy;
use crate::topology::{BandwidthModel, Topology};
use crate::trainer::{ComputeCost, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Uint,
    Float,
    Variant,
    Strategy,
}

/// `(key, kind, default)`; `None` marks a required key.
const KEYS: &[(&str, Kind, Option<&str>)] = &[
    ("topology.ranks", Kind::Uint, None),
    ("topology.groups", Kind::Uint, None),
    ("data.seed", Kind::Uint, None),
    ("data.per_rank_batch", Kind::Uint, Some("2")),
    ("data.tables", Kind::Uint, Some("8")),
    ("data.num_ids", Kind::Uint, Some("10000")),
    ("data.zipf_exponent", Kind::Float, Some("1.0")),
    ("data.ids_per_sample", Kind::Uint, Some("2")),
    ("data.dense_dim", Kind::Uint, Some("8")),
    ("data.sparse_signal", Kind::Float, Some("1.5")),
    ("data.dense_signal", Kind::Float, Some("0.5")),
    ("data.label_bias", Kind::Float, Some("-1.0")),
    ("model.dim", Kind::Uint, Some("16")),
    ("model.dense_hidden", Kind::Uint, Some("32")),
    ("model.over_hidden", Kind::Uint, Some("64")),
    // Defaults to data.seed.
    ("model.seed", Kind::Uint, Some("")),
    ("optimizer.variant", Kind::Variant, Some("rowwise-adagrad")),
    ("optimizer.eta", Kind::Float, None),
    ("optimizer.eps", Kind::Float, Some("1e-8")),
    ("optimizer.c", Kind::Float, Some("1.0")),
    // Defaults to optimizer.eta.
    ("optimizer.dense_eta", Kind::Float, Some("")),
    ("run.steps", Kind::Uint, None),
    ("run.sync_interval", Kind::Uint, Some("1")),
    ("run.eval_every", Kind::Uint, Some("0")),
    ("run.eval_samples", Kind::Uint, Some("100000")),
    ("plan.strategy", Kind::Strategy, Some("row-wise")),
    ("bandwidth.alpha_s", Kind::Float, Some("5e-6")),
    ("bandwidth.inter_bytes_per_s", Kind::Float, Some("2.5e10")),
    ("bandwidth.intra_factor", Kind::Float, Some("7.0")),
    ("bandwidth.ranks_per_host", Kind::Uint, Some("8")),
    ("cost.compute_per_sample_s", Kind::Float, Some("1e-6")),
    ("cost.compute_per_lookup_s", Kind::Float, Some("2e-9")),
];

/// Per-table overrides: `data.table.<i>.<field>`.
const TABLE_FIELDS: &[(&str, Kind)] = &[
    ("num_ids", Kind::Uint),
    ("zipf_exponent", Kind::Float),
    ("ids_per_sample", Kind::Uint),
];

/// Sweepable axes and the keys they set.
pub const SWEEP_AXES: &[(&str, &str)] = &[
    ("c", "optimizer.c"),
    ("M", "topology.groups"),
    ("T", "topology.ranks"),
    ("sync_interval", "run.sync_interval"),
];

pub fn axis_key(axis: &str) -> Result<&'static str> {
    SWEEP_AXES
        .iter()
        .find(|(a, k)| *a == axis || *k == axis)
        .map(|(_, k)| *k)
        .ok_or_else(|| {
            let names: Vec<&str> = SWEEP_AXES.iter().map(|(a, _)| *a).collect();
            Error::Config(format!("unknown sweep axis {axis:?} (expected one of {})", names.join(", ")))
        })
}

fn kind_of(key: &str) -> Option<Kind> {
    if let Some((_, k, _)) = KEYS.iter().find(|(name, _, _)| *name == key) {
        return Some(*k);
    }
    let rest = key.strip_prefix("data.table.")?;
    let (idx, field) = rest.split_once('.')?;
    idx.parse::<usize>().ok()?;
    TABLE_FIELDS.iter().find(|(f, _)| *f == field).map(|(_, k)| *k)
}

/// Canonical spelling of a value, so that `1`, `1.0` and `1e0` hash alike.
fn canonical(key: &str, kind: Kind, value: &str) -> Result<String> {
    let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {value:?}"));
    Ok(match kind {
        Kind::Uint => value.parse::<u64>().map_err(|_| bad("a nonnegative integer"))?.to_string(),
        Kind::Float => {
            let x = value.parse::<f64>().map_err(|_| bad("a number"))?;
            if !x.is_finite() {
                return Err(bad("a finite number"));
            }
            format!("{x:?}")
        }
        Kind::Variant => Variant::parse(value)?.name().to_string(),
        Kind::Strategy => Strategy::parse(value)?.name().to_string(),
    })
}

/// Key-value pairs as written, before defaults are applied.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if raw.entries.contains_key(k) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            raw.entries.insert(k.to_string(), v.to_string());
        }
        Ok(raw)
    }

    /// Apply a `KEY=VALUE` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not KEY=VALUE")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Fill defaults, check every key and build the typed configuration.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| kind_of(k).is_none())
            .map(String::as_str)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let missing: Vec<&str> = KEYS
            .iter()
            .filter(|(k, _, d)| d.is_none() && !self.entries.contains_key(*k))
            .map(|(k, _, _)| *k)
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
        }

        let mut values = BTreeMap::new();
        for (key, value) in &self.entries {
            values.insert(key.clone(), canonical(key, kind_of(key).unwrap(), value)?);
        }
        for (key, kind, default) in KEYS {
            if let Some(d) = default.filter(|d| !d.is_empty()) {
                if !values.contains_key(*key) {
                    values.insert(key.to_string(), canonical(key, *kind, d)?);
                }
            }
        }
        for (key, from) in [("model.seed", "data.seed"), ("optimizer.dense_eta", "optimizer.eta")] {
            if !values.contains_key(key) {
                let v = values[from].clone();
                values.insert(key.to_string(), v);
            }
        }
        ExperimentConfig::build(self.clone(), values)
    }
}

/// A fully resolved and validated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    raw: RawConfig,
    values: BTreeMap<String, String>,
    pub data_seed: u64,
    pub specs: Vec<FeatureSpec>,
    pub dense_dim: usize,
    pub scales: LabelScales,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        RawConfig::parse(text)?.resolve()
    }

    fn build(raw: RawConfig, values: BTreeMap<String, String>) -> Result<Self> {
        let uint = |k: &str| values[k].parse::<u64>().unwrap();
        let usz = |k: &str| uint(k) as usize;
        let float = |k: &str| values[k].parse::<f64>().unwrap();

        let topology = Topology::new(usz("topology.ranks"), usz("topology.groups"))?;
        let tables = usz("data.tables");
        for key in values.keys() {
            if let Some(rest) = key.strip_prefix("data.table.") {
                let idx: usize = rest.split('.').next().unwrap().parse().unwrap();
                if idx >= tables {
                    return Err(Error::Config(format!("{key}: only {tables} tables are configured")));
                }
            }
        }
        let specs: Vec<FeatureSpec> = (0..tables)
            .map(|i| {
                let field = |f: &str, base: &str| {
                    let k = format!("data.table.{i}.{f}");
                    values.get(&k).unwrap_or(&values[base]).clone()
                };
                FeatureSpec {
                    table_id: i as u32,
                    num_ids: field("num_ids", "data.num_ids").parse().unwrap(),
                    zipf_exponent: field("zipf_exponent", "data.zipf_exponent").parse().unwrap(),
                    ids_per_sample: field("ids_per_sample", "data.ids_per_sample").parse().unwrap(),
                }
            })
            .collect();
        for s in &specs {
            s.validate()?;
        }

        let inter = float("bandwidth.inter_bytes_per_s");
        let train = TrainConfig {
            topology,
            per_rank_batch: usz("data.per_rank_batch"),
            steps: uint("run.steps"),
            sync_interval: uint("run.sync_interval"),
            optimizer: OptimizerConfig {
                eta: float("optimizer.eta"),
                eps: float("optimizer.eps"),
                c: float("optimizer.c"),
                variant: Variant::parse(&values["optimizer.variant"])?,
            },
            dense_eta: float("optimizer.dense_eta"),
            eval_every: uint("run.eval_every"),
            eval_samples: usz("run.eval_samples"),
            threads: 1,
            strategy: Strategy::parse(&values["plan.strategy"])?,
            bandwidth: BandwidthModel {
                alpha: float("bandwidth.alpha_s"),
                bw_inter: inter,
                bw_intra: inter * float("bandwidth.intra_factor"),
                ranks_per_host: usz("bandwidth.ranks_per_host"),
            },
            compute: ComputeCost {
                per_sample_s: float("cost.compute_per_sample_s"),
                per_lookup_s: float("cost.compute_per_lookup_s"),
            },
            dims: ModelDims {
                tables,
                dim: usz("model.dim"),
                dense_features: usz("data.dense_dim"),
                dense_hidden: usz("model.dense_hidden"),
                over_hidden: usz("model.over_hidden"),
            },
            model_seed: uint("model.seed"),
        };
        train.validate()?;
        if train.steps == 0 {
            return Err(Error::Config("run.steps must be at least 1".into()));
        }
        if train.eval_samples == 0 {
            return Err(Error::Config("run.eval_samples must be at least 1".into()));
        }
        let scales = LabelScales {
            sparse: float("data.sparse_signal"),
            dense: float("data.dense_signal"),
            bias: float("data.label_bias"),
        };
        Ok(Self {
            raw,
            data_seed: uint("data.seed"),
            dense_dim: usz("data.dense_dim"),
            specs,
            scales,
            train,
            values,
        })
    }

    /// A copy with one key changed, re-resolved.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        let mut raw = self.raw.clone();
        raw.set(key, value);
        raw.resolve()
    }

    pub fn raw(&self) -> &RawConfig {
        &self.raw
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every resolved key, sorted, one `key = value` per line.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// SHA-256 of [`resolved_text`](Self::resolved_text), hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn generator(&self) -> Result<Generator> {
        Generator::new(self.data_seed, self.specs.clone(), self.dense_dim, self.scales)
    }
}
