//! Command-line front end. Exit codes: 0 success, 1 configuration or input
//! error, 2 numerical abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use sparse2d::config::{ExperimentConfig, RawConfig};
use sparse2d::cost::{cost_csv_row, estimate, ClusterSpec, COST_CSV_HEADER};
use sparse2d::experiment::{run_train, sweep, RunArtifact, RunOptions, SWEEP_CSV_HEADER};
use sparse2d::files::write_atomic;
use sparse2d::fmt::g9;
use sparse2d::moments::{estimate_increment_ratio, GradientNoiseModel, IncrementReport};
use sparse2d::planner::{parse_profiles, plan_greedy, summary_line, Strategy};
use sparse2d::topology::BandwidthModel;
use sparse2d::trainer::feature_profiles;
use sparse2d::Error;

#[derive(Parser)]
#[command(name = "sparse2d", version, about = "2D sparse parallelism simulator")]
struct Cli {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sets data.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and write metrics, plan and NE artifacts.
    Train {
        /// Use the single-copy full model-parallel path.
        #[arg(long)]
        reference: bool,
        /// Save final tables and dense towers here.
        #[arg(long)]
        save: Option<PathBuf>,
        /// Start from a saved checkpoint.
        #[arg(long)]
        load: Option<PathBuf>,
    },
    /// Shard tables over ranks and report the load balance.
    Plan {
        /// CSV with `table_id,size_bytes,lookups[,rows]`; defaults to the
        /// configured features.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        ranks: Option<usize>,
        #[arg(long, default_value = "row-wise")]
        strategy: String,
        /// Embedding dimension used to derive rows from bytes.
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
    /// Memory overhead and sync latency of replication.
    Cost {
        #[arg(long)]
        total_gpus: usize,
        /// Comma-separated group counts.
        #[arg(long, value_delimiter = ',', required = true)]
        groups: Vec<usize>,
        #[arg(long)]
        table_size_gb: f64,
        /// GB/s; defaults by whether a replica's peers share a host.
        #[arg(long)]
        sync_bw: Option<f64>,
        /// Per-hop latency in seconds.
        #[arg(long, default_value_t = 5e-6)]
        alpha: f64,
    },
    /// Monte Carlo check of the moment increment ratio.
    VerifyProp1 {
        #[arg(long)]
        groups: usize,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0.0)]
        mu_norm: f64,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
    },
    /// Train with kernel tracing and print the simulated latency summary.
    Simulate {
        /// Defaults to `<out>/trace.csv`.
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Run one config key over several values and compare against one group.
    Sweep {
        /// One of c, M, T, sync_interval.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut raw = RawConfig::parse(&text)?;
    for pair in &cli.set {
        raw.set_pair(pair)?;
    }
    if let Some(seed) = cli.seed {
        raw.set("data.seed", &seed.to_string());
    }
    Ok(raw.resolve()?)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn report(art: &RunArtifact, dir: &Path) {
    println!("config_hash={}", art.config_hash);
    println!("final_ne={}", g9(art.ne.ne));
    if let Some(s) = &art.stats {
        println!("qps_sim={}", g9(s.qps_sim()));
    }
    println!("artifacts={}", dir.display());
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.cmd {
        Cmd::Train { reference, save, load } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli);
            let opts = RunOptions {
                threads: cli.threads,
                reference: *reference,
                save: save.clone(),
                load: load.clone(),
                trace: None,
            };
            let art = run_train(&cfg, &opts)?;
            art.write(&dir)?;
            report(&art, &dir);
        }
        Cmd::Simulate { trace_out } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli);
            let opts = RunOptions {
                threads: cli.threads,
                trace: Some(trace_out.clone().unwrap_or_else(|| dir.join("trace.csv"))),
                ..RunOptions::default()
            };
            let art = run_train(&cfg, &opts)?;
            art.write(&dir)?;
            print!("{}", art.summary_csv().unwrap_or_default());
        }
        Cmd::Plan {
            profiles,
            ranks,
            strategy,
            dim,
        } => {
            let strategy = Strategy::parse(strategy)?;
            let (profiles, ranks) = match profiles {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                    let ranks = ranks.ok_or_else(|| Error::Config("--ranks is required with --profiles".into()))?;
                    (parse_profiles(&text, *dim)?, ranks)
                }
                None => {
                    let cfg = load_config(cli)?;
                    let gen = cfg.generator()?;
                    let t = &cfg.train;
                    let n = ranks.unwrap_or(t.topology.ranks_per_group());
                    (feature_profiles(&gen, t.dims.dim, t.group_batch()), n)
                }
            };
            let plan = plan_greedy(&profiles, ranks, strategy)?;
            let csv = plan.to_csv();
            let summary = summary_line(&plan.rank_loads(&profiles))?;
            match &cli.out {
                Some(dir) => write_atomic(&dir.join("plan.csv"), csv.as_bytes())?,
                None => print!("{csv}"),
            }
            println!("{summary}");
        }
        Cmd::Cost {
            total_gpus,
            groups,
            table_size_gb,
            sync_bw,
            alpha,
        } => {
            let bw = BandwidthModel::default();
            let mut csv = format!("{COST_CSV_HEADER}\n");
            for &m in groups {
                let spec = ClusterSpec {
                    total_gpus: *total_gpus,
                    groups: m,
                    table_size_gb: *table_size_gb,
                    sync_bw_gb_s: sync_bw.unwrap_or_else(|| ClusterSpec::default_sync_bw_gb_s(m, &bw)),
                };
                csv.push_str(&cost_csv_row(&spec, &estimate(&spec, *alpha)?));
                csv.push('\n');
            }
            if let Some(dir) = &cli.out {
                write_atomic(&dir.join("cost.csv"), csv.as_bytes())?;
            }
            print!("{csv}");
        }
        Cmd::VerifyProp1 {
            groups,
            trials,
            mu_norm,
            sigma,
            dim,
            batch,
        } => {
            if *groups == 0 || *trials == 0 || *dim == 0 || *batch == 0 {
                return Err(Error::Config("groups, trials, dim and batch must be positive".into()).into());
            }
            if !(*mu_norm >= 0.0 && *sigma >= 0.0) {
                return Err(Error::Config("mu-norm and sigma must be nonnegative".into()).into());
            }
            let model = GradientNoiseModel::isotropic(*mu_norm, *sigma, *dim, *batch);
            let rep = estimate_increment_ratio(&model, *groups, *trials, cli.seed.unwrap_or(0));
            println!("{}\n{}", IncrementReport::CSV_HEADER, rep.csv_row());
        }
        Cmd::Sweep { axis, values, seeds } => {
            let cfg = load_config(cli)?;
            let dir = out_dir(cli);
            let opts = RunOptions {
                threads: cli.threads,
                ..RunOptions::default()
            };
            let rows = sweep(&cfg, axis, values, *seeds, &dir, &opts)?;
            println!("{SWEEP_CSV_HEADER}");
            for r in rows {
                println!("{}", r.csv_row());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_numerical() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli).context("sparse2d") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
