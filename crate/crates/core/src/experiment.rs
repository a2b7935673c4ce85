//! Runs, sweeps and their artifacts.
//!
//! A run directory holds:
//!
//! | file | contents |
//! |---|---|
//! | `config.txt` | the resolved configuration, one `key = value` per line |
//! | `metrics.csv` | `# config_hash=...` then `step,loss,ne,eff_lr_p50,eff_lr_p99,v_mean` |
//! | `plan.csv` | the sharding plan of one group |
//! | `ne.csv` | `config_hash,ne,baseline_ctr,eval_samples,ne_gap` |
//! | `summary.csv` | simulated throughput, memory, imbalance and kernel latencies |
//! | `trace.csv` | per-rank kernel records, when tracing is on |
//!
//! Every file is written to a temp sibling and renamed into place.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::config::{axis_key, ExperimentConfig};
use crate::error::{Error, Result};
use crate::files::{write_atomic, AtomicFile};
use crate::fmt::g9;
use crate::model::DenseModel;
use crate::reference::ReferenceTrainer;
use crate::trainer::{drive, load_checkpoint, metrics_csv, save_checkpoint, Engine, NEReport, RunStats, Trainer};

/// Settings that change how a run executes but never what it computes.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; 0 means one.
    pub threads: usize,
    /// Train on the single-copy full model-parallel path instead.
    pub reference: bool,
    /// Stream the kernel trace to this path.
    pub trace: Option<PathBuf>,
    pub save: Option<PathBuf>,
    pub load: Option<PathBuf>,
}

/// Everything a run produced, in memory.
#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub config_hash: String,
    pub resolved_config: String,
    pub metrics_csv: String,
    pub plan_csv: String,
    pub ne: NEReport,
    /// Simulated accounting; the reference path has none.
    pub stats: Option<RunStats>,
}

pub const NE_CSV_HEADER: &str = "config_hash,ne,baseline_ctr,eval_samples,ne_gap";

impl RunArtifact {
    pub fn ne_csv(&self) -> String {
        format!(
            "{NE_CSV_HEADER}\n{},{},{},{},{}\n",
            self.config_hash,
            g9(self.ne.ne),
            g9(self.ne.baseline_ctr),
            self.ne.eval_samples,
            g9(self.ne.ne_gap)
        )
    }

    /// `key,value` lines of the simulated accounting.
    pub fn summary_csv(&self) -> Option<String> {
        let s = self.stats.as_ref()?;
        let mut out = format!("key,value\nconfig_hash,{}\n", self.config_hash);
        let imbalance = s.imbalance_ratio().map(g9).unwrap_or_else(|_| "nan".into());
        let rows = [
            ("steps", s.steps.to_string()),
            ("qps_sim", g9(s.qps_sim())),
            ("peak_mem_sim_bytes", s.peak_mem_bytes.to_string()),
            ("imbalance_ratio", imbalance),
            ("lookup_a2a_bytes_per_rank", g9(s.lookup_bytes_per_rank_step())),
            ("latency_sim_lookup_a2a_s", g9(s.latency.lookup_a2a)),
            ("latency_sim_grad_a2a_s", g9(s.latency.grad_a2a)),
            ("latency_sim_table_allreduce_s", g9(s.latency.table_allreduce)),
            ("latency_sim_compute_s", g9(s.latency.compute)),
            ("latency_sim_total_s", g9(s.latency.total)),
        ];
        for (k, v) in rows {
            out.push_str(&format!("{k},{v}\n"));
        }
        Some(out)
    }

    /// Write every in-memory artifact into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join("config.txt"), self.resolved_config.as_bytes())?;
        write_atomic(&dir.join("metrics.csv"), self.metrics_csv.as_bytes())?;
        write_atomic(&dir.join("plan.csv"), self.plan_csv.as_bytes())?;
        write_atomic(&dir.join("ne.csv"), self.ne_csv().as_bytes())?;
        if let Some(summary) = self.summary_csv() {
            write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;
        }
        Ok(())
    }
}

/// Lets the trainer own a writer that the caller commits afterwards.
struct Shared(Arc<Mutex<AtomicFile>>);

impl Write for Shared {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.lock().unwrap().write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().unwrap().flush()
    }
}

fn initial_state(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<Option<(Vec<crate::embedding::EmbeddingTable>, DenseModel<f32>)>> {
    let Some(dir) = &opts.load else {
        return Ok(None);
    };
    let (tables, dense) = load_checkpoint(dir, cfg.train.dims.tables)?;
    let mut model = DenseModel::new(cfg.train.dims, cfg.train.model_seed);
    model.load_bytes(&dense)?;
    let dense = model;
    Ok(Some((tables, dense)))
}

/// Train one configuration and return its artifacts. The trace, if asked
/// for, is streamed to disk and committed only when the run succeeds.
pub fn run_train(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunArtifact> {
    let mut train = cfg.train.clone();
    train.threads = opts.threads.max(1);
    let gen = cfg.generator()?;
    let eval = gen.eval_samples(train.eval_samples);
    let state = initial_state(cfg, opts)?;
    let hash = cfg.hash();

    if opts.reference {
        let mut engine = match state {
            Some((t, d)) => ReferenceTrainer::with_state(train.clone(), gen, t, d)?,
            None => ReferenceTrainer::new(train.clone(), gen)?,
        };
        let out = drive(&mut engine, &train, &eval)?;
        if let Some(dir) = &opts.save {
            save_checkpoint(dir, &engine.tables()?, engine.dense())?;
        }
        return Ok(RunArtifact {
            metrics_csv: metrics_csv(&hash, &out.metrics),
            plan_csv: engine.plan().to_csv(),
            config_hash: hash,
            resolved_config: cfg.resolved_text(),
            ne: out.ne,
            stats: None,
        });
    }

    let mut engine = match state {
        Some((t, d)) => Trainer::with_state(train.clone(), gen, t, d)?,
        None => Trainer::new(train.clone(), gen)?,
    };
    let trace = match &opts.trace {
        Some(path) => {
            let file = Arc::new(Mutex::new(AtomicFile::create(path)?));
            engine.set_trace(Box::new(Shared(Arc::clone(&file))))?;
            Some(file)
        }
        None => None,
    };
    let out = drive(&mut engine, &train, &eval)?;
    if let Some(dir) = &opts.save {
        save_checkpoint(dir, &engine.tables()?, engine.dense())?;
    }
    let artifact = RunArtifact {
        metrics_csv: metrics_csv(&hash, &out.metrics),
        plan_csv: engine.plan().to_csv(),
        config_hash: hash,
        resolved_config: cfg.resolved_text(),
        ne: out.ne,
        stats: Some(engine.stats().clone()),
    };
    drop(engine);
    if let Some(file) = trace {
        let file = Arc::try_unwrap(file)
            .map_err(|_| Error::Config("trace writer still shared".into()))?
            .into_inner()
            .unwrap();
        file.commit()?;
    }
    Ok(artifact)
}

/// One row of a sweep comparison.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    /// Means over seeds.
    pub final_ne: f64,
    pub ne_gap_vs_m1: f64,
    pub qps_sim: f64,
    pub peak_mem_sim: f64,
    pub imbalance_ratio: f64,
    pub lookup_a2a_bytes_per_rank: f64,
}

pub const SWEEP_CSV_HEADER: &str =
    "value,final_ne,ne_gap_vs_M1,qps_sim,peak_mem_sim,imbalance_ratio,lookup_a2a_bytes_per_rank";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.value,
            g9(self.final_ne),
            g9(self.ne_gap_vs_m1),
            g9(self.qps_sim),
            g9(self.peak_mem_sim),
            g9(self.imbalance_ratio),
            g9(self.lookup_a2a_bytes_per_rank)
        )
    }
}

pub fn sweep_csv(config_hash: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("# config_hash={config_hash}\n{SWEEP_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// The configuration a sweep point runs: `axis = value` at seed offset `k`.
pub fn sweep_point(cfg: &ExperimentConfig, axis: &str, value: &str, k: u64) -> Result<ExperimentConfig> {
    let key = axis_key(axis)?;
    let seed = cfg.data_seed + k;
    let mut point = cfg.with(key, value)?.with("data.seed", &seed.to_string())?;
    if cfg.raw().get("model.seed").is_some() {
        point = point.with("model.seed", &(cfg.train.model_seed + k).to_string())?;
    }
    Ok(point)
}

/// The baseline a point is compared against: one group, `c = 1`.
pub fn baseline_of(point: &ExperimentConfig) -> Result<ExperimentConfig> {
    point.with("topology.groups", "1")?.with("optimizer.c", "1")
}

/// Run `axis` over `values` for `seeds` consecutive seeds starting at the
/// configured one. Point artifacts go to `out/<axis>=<value>/seed<k>`,
/// baselines to `out/baseline/<hash prefix>`, and the comparison CSV to
/// `out/comparison.csv`.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: &str,
    values: &[String],
    seeds: u64,
    out: &Path,
    opts: &RunOptions,
) -> Result<Vec<SweepRow>> {
    let key = axis_key(axis)?;
    if values.is_empty() || seeds == 0 {
        return Err(Error::Config("a sweep needs at least one value and one seed".into()));
    }
    let opts = RunOptions {
        trace: None,
        save: None,
        ..opts.clone()
    };
    let mut baselines: std::collections::BTreeMap<String, f64> = Default::default();
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let n = seeds as f64;
        let mut row = SweepRow {
            value: value.clone(),
            final_ne: 0.0,
            ne_gap_vs_m1: 0.0,
            qps_sim: 0.0,
            peak_mem_sim: 0.0,
            imbalance_ratio: 0.0,
            lookup_a2a_bytes_per_rank: 0.0,
        };
        for k in 0..seeds {
            let point = sweep_point(cfg, key, value, k)?;
            let base = baseline_of(&point)?;
            let base_hash = base.hash();
            let base_ne = match baselines.get(&base_hash) {
                Some(&ne) => ne,
                None => {
                    let art = run_train(&base, &opts)?;
                    art.write(&out.join("baseline").join(&base_hash[..12]))?;
                    baselines.insert(base_hash, art.ne.ne);
                    art.ne.ne
                }
            };
            let mut art = run_train(&point, &opts)?;
            art.ne = art.ne.with_baseline(base_ne);
            art.write(&out.join(format!("{axis}={value}")).join(format!("seed{k}")))?;
            let stats = art.stats.as_ref().expect("2D runs keep stats");
            row.final_ne += art.ne.ne / n;
            row.ne_gap_vs_m1 += art.ne.ne_gap / n;
            row.qps_sim += stats.qps_sim() / n;
            row.peak_mem_sim += stats.peak_mem_bytes as f64 / n;
            row.imbalance_ratio += stats.imbalance_ratio()? / n;
            row.lookup_a2a_bytes_per_rank += stats.lookup_bytes_per_rank_step() / n;
        }
        rows.push(row);
    }
    write_atomic(&out.join("comparison.csv"), sweep_csv(&cfg.hash(), &rows).as_bytes())?;
    Ok(rows)
}
