//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparse2d::config::ExperimentConfig;
use sparse2d::cost::{memory_overhead, qps_scaling_factor, sync_latency};
use sparse2d::embedding::EmbeddingTable;
use sparse2d::experiment::{baseline_of, run_train, RunOptions};
use sparse2d::model::{DenseModel, ModelDims};
use sparse2d::moments::{estimate_increment_ratio, recommend_c, GradientNoiseModel};
use sparse2d::planner::{imbalance_ratio, plan_greedy, Strategy, TableLoadProfile};
use sparse2d::reference::ReferenceTrainer;
use sparse2d::trainer::{Engine, Trainer};

struct Verdict {
    ok: bool,
    detail: String,
}

fn verdict(ok: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        ok,
        detail: detail.into(),
    }
}

fn config(extra: &str) -> ExperimentConfig {
    let base = "topology.ranks = 8\n\
                topology.groups = 1\n\
                data.seed = 11\n\
                optimizer.eta = 0.05\n\
                run.steps = 100\n\
                run.eval_samples = 2000\n";
    let mut raw = sparse2d::config::RawConfig::parse(base).unwrap();
    for line in extra.lines().map(str::trim).filter(|l| !l.is_empty()) {
        raw.set_pair(line).unwrap();
    }
    raw.resolve().unwrap()
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().unwrap().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    files.sort();
    files
}

/// Train with M = 1 on both paths and compare metrics and checkpoints.
fn c1_m1_equivalence() -> Verdict {
    let cfg = config("run.steps = 1000\nrun.eval_every = 250");
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("2d"), tmp.path().join("ref"));
    let two_d = run_train(
        &cfg,
        &RunOptions {
            save: Some(a.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let reference = run_train(
        &cfg,
        &RunOptions {
            reference: true,
            save: Some(b.clone()),
            ..RunOptions::default()
        },
    )
    .unwrap();
    let metrics_same = two_d.metrics_csv == reference.metrics_csv;
    let ckpt_same = read_dir_bytes(&a) == read_dir_bytes(&b);
    verdict(
        metrics_same && ckpt_same,
        format!("metrics identical: {metrics_same}, checkpoints identical: {ckpt_same}"),
    )
}

fn max_weight_diff(a: &[EmbeddingTable], b: &[EmbeddingTable], da: &DenseModel<f32>, db: &DenseModel<f32>) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.weights().iter().zip(y.weights()) {
            worst = worst.max((*p as f64 - *q as f64).abs());
        }
    }
    for (p, q) in da.params().zip(db.params()) {
        worst = worst.max((*p as f64 - *q as f64).abs());
    }
    worst
}

/// 2D SGD against single-copy full-batch SGD.
fn c2_sgd_oracle() -> Verdict {
    let mut details = Vec::new();
    let mut ok = true;
    for m in [2, 4] {
        let cfg = config(&format!(
            "topology.groups = {m}\noptimizer.variant = sgd\nrun.sync_interval = 1\noptimizer.eta = 0.5"
        ));
        let gen = cfg.generator().unwrap();
        let mut two_d = Trainer::new(cfg.train.clone(), gen.clone()).unwrap();
        let mut reference = ReferenceTrainer::new(cfg.train.clone(), gen).unwrap();
        for step in 0..100 {
            two_d.train_step(step).unwrap();
            reference.train_step(step).unwrap();
        }
        two_d.finish().unwrap();
        let diff = max_weight_diff(
            &two_d.tables().unwrap(),
            &reference.tables().unwrap(),
            two_d.dense(),
            reference.dense(),
        );
        ok &= diff <= 1e-5;
        details.push(format!("M={m} max|dw|={diff:.3e}"));
    }
    verdict(ok, details.join(", "))
}

fn c3_moment_inflation_monte_carlo() -> Verdict {
    let mut ok = true;
    let mut details = Vec::new();
    for m in [2usize, 4, 8] {
        let model = GradientNoiseModel::isotropic(0.0, 1.0, 16, 32);
        let r = estimate_increment_ratio(&model, m, 100_000, 1);
        let rel = (r.ratio_estimate / m as f64 - 1.0).abs();
        ok &= rel <= 0.05;
        details.push(format!("M={m} ratio={:.4}", r.ratio_estimate));
    }
    let model = GradientNoiseModel::isotropic(1.5, 0.0, 16, 32);
    let r = estimate_increment_ratio(&model, 4, 100_000, 2);
    ok &= r.ratio_estimate == 1.0;
    details.push(format!("sigma=0 ratio={}", r.ratio_estimate));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::INFINITY;
    for i in 0..20 {
        let mu = rng.random_range(0.0..2.0);
        let sigma = rng.random_range(0.0..3.0);
        let m = [2, 4, 8][i % 3];
        let model = GradientNoiseModel::isotropic(mu, sigma, 16, 32);
        let r = estimate_increment_ratio(&model, m, 100_000, 100 + i as u64);
        let margin = r.ratio_estimate - (1.0 - 3.0 * r.std_error);
        worst = worst.min(margin);
    }
    ok &= worst >= 0.0;
    details.push(format!("randomized min margin={worst:.4}"));
    verdict(ok, details.join(", "))
}

fn c4_recommended_c_range() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut in_range = true;
    for _ in 0..1000 {
        let m = rng.random_range(1..=16);
        let dim = rng.random_range(1..=32);
        let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let model = GradientNoiseModel {
            mu,
            sigma: rng.random_range(0.0..5.0),
            batch: rng.random_range(1..=64),
        };
        let c = recommend_c(&model, m);
        in_range &= c > 0.0 && c <= m as f64;
    }
    let at_zero_mu = (1..=16).all(|m| recommend_c(&GradientNoiseModel::isotropic(0.0, 1.3, 8, 16), m) == m as f64);
    let at_zero_sigma = (1..=16).all(|m| recommend_c(&GradientNoiseModel::isotropic(0.7, 0.0, 8, 16), m) == 1.0);
    verdict(
        in_range && at_zero_mu && at_zero_sigma,
        format!("in (0, M]: {in_range}, mu=0 gives M: {at_zero_mu}, sigma=0 gives 1: {at_zero_sigma}"),
    )
}

/// The toy model and schedule the NE-gap criterion runs on.
pub const NE_GAP_CONFIG: &str = "\
topology.ranks = 8
topology.groups = 4
data.tables = 4
data.num_ids = 10000
data.per_rank_batch = 2
model.dim = 8
model.dense_hidden = 16
model.over_hidden = 16
optimizer.eta = 0.2
optimizer.dense_eta = 0.05
run.steps = 200000
run.eval_samples = 20000
";

fn c5_ne_gap_direction() -> Verdict {
    let start = Instant::now();
    let mut gap = [0.0f64; 2];
    let seeds = [1u64, 2, 3];
    for seed in seeds {
        let mut raw = sparse2d::config::RawConfig::parse(NE_GAP_CONFIG).unwrap();
        raw.set("data.seed", &seed.to_string());
        let c4 = raw.resolve().unwrap().with("optimizer.c", "4").unwrap();
        let c1 = c4.with("optimizer.c", "1").unwrap();
        let base = baseline_of(&c1).unwrap();
        let opts = RunOptions::default();
        let ne_base = run_train(&base, &opts).unwrap().ne.ne;
        for (k, cfg) in [&c1, &c4].into_iter().enumerate() {
            let ne = run_train(cfg, &opts).unwrap().ne.with_baseline(ne_base).ne_gap;
            gap[k] += ne / seeds.len() as f64;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = gap[0] > 0.0 && gap[1] < gap[0] && gap[1] <= 0.0005 && secs < 600.0;
    verdict(
        ok,
        format!(
            "mean gap c=1 {:.4}%, c=4 {:.4}%, {secs:.0}s",
            gap[0] * 100.0,
            gap[1] * 100.0
        ),
    )
}

fn c6_scaling_golden() -> Verdict {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scaling.csv")).unwrap();
    let mut ok = true;
    let mut details = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        let f = |i: usize| c[i].parse::<f64>().unwrap();
        let pct = 100.0 * qps_scaling_factor(f(2), f(1), f(4), f(3)).unwrap();
        let within = (pct - f(5)).abs() <= 0.5;
        ok &= within;
        if !within {
            details.push(format!("{} {} GPUs: {pct:.2}% vs {}%", c[0], c[3], c[5]));
        }
    }
    if details.is_empty() {
        details.push("all cells within 0.5 pp".into());
    }
    verdict(ok, details.join(", "))
}

fn c7_cost_formulas() -> Verdict {
    let mem = memory_overhead(1700.0, 4, 1024);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut identity = true;
    for _ in 0..100 {
        let t = 1usize << rng.random_range(0..13);
        let m = 1usize << rng.random_range(0..=t.trailing_zeros());
        let s = rng.random_range(1.0..5000.0);
        let b = rng.random_range(1.0..500.0);
        identity &= sync_latency(s, m, t, b) == 2.0 * memory_overhead(s, m, t) / b;
    }
    let ok = (mem - 4.98).abs() <= 0.01 && identity;
    verdict(ok, format!("overhead={mem:.4} GB, identity holds: {identity}"))
}

fn c8_traffic_scaling() -> Verdict {
    let bytes = |m: usize| {
        let cfg = config(&format!("topology.groups = {m}\ndata.zipf_exponent = 0\ndata.num_ids = 4096"));
        let mut t = Trainer::new(cfg.train.clone(), cfg.generator().unwrap()).unwrap();
        for step in 0..5 {
            t.train_step(step).unwrap();
        }
        t.stats().lookup_bytes.clone()
    };
    let one = bytes(1);
    let mut ok = true;
    let mut details = Vec::new();
    for m in [2usize, 4] {
        let b = bytes(m);
        let exact = one.iter().zip(&b).all(|(x, y)| *x == m as u64 * *y);
        ok &= exact;
        details.push(format!("M={m}: rank 0 {} vs {} bytes", b[0], one[0]));
    }
    verdict(ok, details.join(", "))
}

fn brute_force_max(loads: &[f64], n: usize) -> f64 {
    let k = loads.len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; k];
    loop {
        let mut bins = vec![0.0f64; n];
        for (i, &r) in assign.iter().enumerate() {
            bins[r] += loads[i];
        }
        best = best.min(bins.iter().copied().fold(0.0, f64::max));
        let mut i = 0;
        while i < k {
            assign[i] += 1;
            if assign[i] < n {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
        if i == k {
            return best;
        }
    }
}

fn profiles(loads: &[f64]) -> Vec<TableLoadProfile> {
    loads
        .iter()
        .enumerate()
        .map(|(i, &l)| TableLoadProfile {
            table_id: i as u32,
            num_rows: 100,
            size_bytes: 6800,
            expected_lookups: l,
        })
        .collect()
}

fn c9_imbalance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bound_ok = true;
    let mut instances = 0;
    for n in 1..=3usize {
        for k in 1..=10usize {
            for _ in 0..10 {
                let loads: Vec<f64> = (0..k).map(|_| rng.random_range(1..100) as f64).collect();
                let p = profiles(&loads);
                let plan = plan_greedy(&p, n, Strategy::TableWise).unwrap();
                let ratio = imbalance_ratio(&plan.rank_loads(&p)).unwrap();
                let mean = loads.iter().sum::<f64>() / n as f64;
                let opt = brute_force_max(&loads, n) / mean;
                bound_ok &= ratio <= opt * (4.0 / 3.0 - 1.0 / (3.0 * n as f64)) + 1e-12;
                instances += 1;
            }
        }
    }

    let n = 8;
    let zipf: Vec<f64> = (0..64).map(|i| 1e4 / (i as f64 + 1.0)).collect();
    let p = profiles(&zipf);
    let plan = plan_greedy(&p, n, Strategy::TableWise).unwrap();
    let lpt = imbalance_ratio(&plan.rank_loads(&p)).unwrap();
    let mut random = 0.0;
    for _ in 0..100 {
        let mut bins = vec![0.0f64; n];
        for &l in &zipf {
            bins[rng.random_range(0..n)] += l;
        }
        random += imbalance_ratio(&bins).unwrap() / 100.0;
    }
    verdict(
        bound_ok && lpt < random,
        format!("LPT bound on {instances} instances: {bound_ok}, zipf-64 LPT {lpt:.4} vs random {random:.4}"),
    )
}

/// Loss of one sample as a function of the rows it looks up and the dense
/// parameters, all in f64.
fn sample_loss(rows: &[Vec<f64>], ids: &[Vec<usize>], dense_x: &[f64], label: f64, model: &DenseModel<f64>) -> f64 {
    let d = model.dims.dim;
    let mut pooled = vec![0.0; model.dims.pooled_len()];
    for (t, list) in ids.iter().enumerate() {
        for &id in list {
            for k in 0..d {
                pooled[t * d + k] += rows[t][id * d + k];
            }
        }
    }
    let mut ws = model.workspace();
    let z = model.forward(&pooled, dense_x, &mut ws);
    sparse2d::model::logistic_loss(z, label as u8)
}

fn c10_gradient_check() -> Verdict {
    let dims = ModelDims {
        tables: 2,
        dim: 4,
        dense_features: 3,
        dense_hidden: 5,
        over_hidden: 6,
    };
    let model = DenseModel::<f64>::new(dims, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let rows: Vec<Vec<f64>> = (0..2).map(|_| (0..5 * 4).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
    let ids = vec![vec![1usize, 3, 3], vec![0usize, 4]];
    let dense_x = [0.4, -0.7, 1.1];
    let label = 1.0;

    let mut pooled = vec![0.0; dims.pooled_len()];
    for (t, list) in ids.iter().enumerate() {
        for &id in list {
            for k in 0..4 {
                pooled[t * 4 + k] += rows[t][id * 4 + k];
            }
        }
    }
    let mut ws = model.workspace();
    let z = model.forward(&pooled, &dense_x, &mut ws);
    let dlogit = sparse2d::data::sigmoid(z) - label;
    let mut grads = model.grads();
    let mut dpooled = vec![0.0; dims.pooled_len()];
    model.backward(dlogit, &mut ws, &mut grads, &mut dpooled);

    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
    let h = 1e-6;
    let mut worst_sparse = 0.0f64;
    for t in 0..2 {
        for id in 0..5 {
            let hits = ids[t].iter().filter(|&&i| i == id).count() as f64;
            for k in 0..4 {
                let analytic = hits * dpooled[t * 4 + k];
                let (mut a, mut b) = (rows.clone(), rows.clone());
                a[t][id * 4 + k] += h;
                b[t][id * 4 + k] -= h;
                let fd = (sample_loss(&a, &ids, &dense_x, label, &model) - sample_loss(&b, &ids, &dense_x, label, &model))
                    / (2.0 * h);
                if analytic != 0.0 || fd.abs() > 1e-10 {
                    worst_sparse = worst_sparse.max(rel(analytic, fd));
                }
            }
        }
    }
    let analytic: Vec<f64> = grads.iter().copied().collect();
    let mut worst_dense = 0.0f64;
    for (k, &g) in analytic.iter().enumerate() {
        let (mut a, mut b) = (model.clone(), model.clone());
        *a.params_mut().nth(k).unwrap() += h;
        *b.params_mut().nth(k).unwrap() -= h;
        let fd = (sample_loss(&rows, &ids, &dense_x, label, &a) - sample_loss(&rows, &ids, &dense_x, label, &b)) / (2.0 * h);
        if g != 0.0 || fd.abs() > 1e-10 {
            worst_dense = worst_dense.max(rel(g, fd));
        }
    }
    verdict(
        worst_sparse <= 1e-4 && worst_dense <= 1e-4,
        format!("max rel err sparse {worst_sparse:.2e}, dense {worst_dense:.2e}"),
    )
}

/// Artifacts of representative runs under two thread counts.
fn c11_determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut details = Vec::new();
    let cases = [
        ("m1", config("run.steps = 300\nrun.eval_every = 100"), false),
        ("m1-ref", config("run.steps = 300"), true),
        ("m4-sgd", config("topology.groups = 4\noptimizer.variant = sgd"), false),
        (
            "ne-gap",
            ExperimentConfig::parse(&format!("{NE_GAP_CONFIG}data.seed = 1\noptimizer.c = 4\n"))
                .unwrap()
                .with("run.steps", "3000")
                .unwrap(),
            false,
        ),
    ];
    for (name, cfg, reference) in cases {
        let mut seen = Vec::new();
        for threads in [1usize, 3] {
            let dir = tmp.path().join(format!("{name}-{threads}"));
            let opts = RunOptions {
                threads,
                reference,
                trace: (!reference).then(|| dir.join("trace.csv")),
                save: Some(dir.join("ckpt")),
                ..RunOptions::default()
            };
            run_train(&cfg, &opts).unwrap().write(&dir).unwrap();
            let mut files = read_dir_bytes(&dir);
            files.extend(read_dir_bytes(&dir.join("ckpt")));
            seen.push(files);
        }
        let same = seen[0] == seen[1];
        ok &= same;
        details.push(format!("{name}: {}", if same { "identical" } else { "differs" }));
    }
    let model = GradientNoiseModel::isotropic(0.3, 1.0, 16, 32);
    let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
    let a = pool(1).install(|| estimate_increment_ratio(&model, 4, 20_000, 5));
    let b = pool(3).install(|| estimate_increment_ratio(&model, 4, 20_000, 5));
    ok &= a == b;
    details.push(format!("moment check: {}", if a == b { "identical" } else { "differs" }));
    verdict(ok, details.join(", "))
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Verdict); 11] = [
        ("1 M=1 bitwise equivalence", c1_m1_equivalence),
        ("2 SGD oracle", c2_sgd_oracle),
        ("3 moment inflation Monte Carlo", c3_moment_inflation_monte_carlo),
        ("4 recommended c range", c4_recommended_c_range),
        ("5 NE-gap direction", c5_ne_gap_direction),
        ("6 scaling golden values", c6_scaling_golden),
        ("7 cost formulas", c7_cost_formulas),
        ("8 traffic scaling", c8_traffic_scaling),
        ("9 imbalance", c9_imbalance),
        ("10 gradient check", c10_gradient_check),
        ("11 determinism", c11_determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if let Some(pat) = &filter {
            if name.split(' ').next() != Some(pat.as_str()) {
                continue;
            }
        }
        let t = Instant::now();
        let v = f();
        println!(
            "criterion {name}: {} ({}; {:.1}s)",
            if v.ok { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.ok);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
