//! Command-line harness: data generation, the fit/evaluate pipeline as
//! separate steps, configured sweeps and the acceptance suite.
//!
//! Exit codes: 0 on success, 1 when a check fails, 2 on usage or input
//! errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;

use scaffolding::calibrate::{fit_binned, split, BinnedPredictor, PredictorFile};
use scaffolding::datagen::{Dataset, DatasetMeta};
use scaffolding::experiments::acceptance::{self, Criterion};
use scaffolding::experiments::{generate_datasets, run_sweep, ExperimentConfig};
use scaffolding::metrics::{calibration_report, mse_vs_truth};
use scaffolding::scaffold::{build_partition, QuantileMode, ReprFn, ScaffoldPartition};
use scaffolding::{io, Seed};

#[derive(Parser, Debug)]
#[command(name = "scaffolding", version, about = "Scaffolding-set calibration pipeline and experiments")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", env = "SCAFFOLDING_OUT")]
    out: Option<PathBuf>,
    /// Seed; for config-driven commands it replaces the seed list.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "INT")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw the datasets described by a config.
    Generate,
    /// Build a quantile partition on the D1 side of a split.
    Partition {
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
        /// Representation file (JSON).
        #[arg(long, value_name = "PATH", conflicts_with = "coords")]
        repr: Option<PathBuf>,
        /// Coordinate projection, e.g. `0,1`.
        #[arg(long, value_delimiter = ',', value_name = "LIST")]
        coords: Option<Vec<usize>>,
        /// Branches per coordinate.
        #[arg(long, short = 'b')]
        b: usize,
        /// Fraction of the data used to build cells.
        #[arg(long, default_value_t = 0.5)]
        pi: f64,
        #[arg(long, value_enum, default_value = "conditional")]
        mode: Mode,
    },
    /// Fit per-cell means on the D2 side of the split recorded with a partition.
    Calibrate {
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        partition: PathBuf,
        /// Must match the recorded split when given.
        #[arg(long)]
        pi: Option<f64>,
    },
    /// Calibration report of a predictor on fresh data.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        predictor: PathBuf,
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
    },
    /// Run a configured sweep.
    Sweep,
    /// Run the acceptance suite.
    Accept {
        /// Criteria to run, e.g. `1,3` (default: all).
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<u8>>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Conditional,
    GlobalGrid,
}

impl From<Mode> for QuantileMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Conditional => QuantileMode::Conditional,
            Mode::GlobalGrid => QuantileMode::GlobalGrid,
        }
    }
}

/// Split and representation recorded next to a partition, so calibration
/// uses the complementary side of the same split.
#[derive(serde::Serialize, serde::Deserialize, Debug, PartialEq)]
struct PartitionRecord {
    config_hash: String,
    seed: u64,
    pi: f64,
    dataset_hash: String,
    n_d1: usize,
    b: usize,
    h: ReprFn,
}

enum Outcome {
    Pass,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn need<'a, T>(v: &'a Option<T>, flag: &str) -> anyhow::Result<&'a T> {
    v.as_ref().ok_or_else(|| anyhow!("this command needs {flag}"))
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let path = need(&cli.config, "--config")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

/// `--out`, else the config's `out_dir`.
fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> anyhow::Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
        .ok_or_else(|| anyhow!("this command needs --out"))?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    match &cli.command {
        Command::Generate => generate(cli),
        Command::Partition {
            data,
            repr,
            coords,
            b,
            pi,
            mode,
        } => partition(cli, data, repr.as_deref(), coords.as_deref(), *b, *pi, (*mode).into()),
        Command::Calibrate { data, partition, pi } => calibrate(cli, data, partition, *pi),
        Command::Evaluate { predictor, data } => evaluate(cli, predictor, data),
        Command::Sweep => sweep(cli),
        Command::Accept { only } => accept(cli, only.as_deref()),
    }
}

fn generate(cli: &Cli) -> anyhow::Result<Outcome> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, Some(&cfg))?;
    let hash = cfg.hash();
    for (name, data, spec, law) in generate_datasets(&cfg)? {
        let path = dir.join(format!("{name}.csv"));
        let meta = DatasetMeta {
            spec_hash: spec.as_ref().map(|s| s.hash_hex()),
            law: law.as_ref().map(|l| l.describe()),
            config_hash: Some(hash.clone()),
            ..data.meta()
        };
        data.save(&path, &meta)?;
        if let Some(spec) = spec {
            io::write_json(&dir.join(format!("{name}.spec.json")), &spec)?;
        }
        println!("{}", path.display());
    }
    Ok(Outcome::Pass)
}

fn partition(
    cli: &Cli,
    data_path: &Path,
    repr: Option<&Path>,
    coords: Option<&[usize]>,
    b: usize,
    pi: f64,
    mode: QuantileMode,
) -> anyhow::Result<Outcome> {
    let dir = out_dir(cli, None)?;
    let seed = cli.seed.unwrap_or(0);
    let data = Dataset::load(data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let h = match (repr, coords) {
        (Some(p), _) => io::read_json::<ReprFn>(p)?,
        (None, Some(c)) => ReprFn::coordinates(data.dim(), c)?,
        (None, None) => bail!("partition needs --repr or --coords"),
    };
    if h.d() != data.dim() {
        bail!("representation takes {} inputs but the data has {} columns", h.d(), data.dim());
    }
    let (d1, _) = split(&data, pi, Seed(seed))?;
    let part = build_partition(&h, &d1, b, mode)?;
    let dataset_hash = io::hash_file(data_path)?;
    let record = PartitionRecord {
        config_hash: io::hash_of(&json!({"b": b, "pi": pi, "seed": seed, "mode": mode, "h": &h, "data": &dataset_hash})),
        seed,
        pi,
        dataset_hash,
        n_d1: d1.len(),
        b,
        h,
    };
    let path = dir.join("partition.json");
    part.save(&path)?;
    io::write_json(&dir.join("partition.meta.json"), &record)?;
    println!("{} ({} cells, {} points in D1)", path.display(), part.k(), d1.len());
    Ok(Outcome::Pass)
}

fn calibrate(cli: &Cli, data_path: &Path, part_path: &Path, pi: Option<f64>) -> anyhow::Result<Outcome> {
    let dir = out_dir(cli, None)?;
    let part = ScaffoldPartition::load(part_path)?;
    let meta_path = part_path.with_file_name("partition.meta.json");
    let record: PartitionRecord =
        io::read_json(&meta_path).with_context(|| format!("reading split record {}", meta_path.display()))?;
    let dataset_hash = io::hash_file(data_path)?;
    if dataset_hash != record.dataset_hash {
        bail!("{} is not the dataset the partition was built on", data_path.display());
    }
    if pi.is_some_and(|p| p != record.pi) || cli.seed.is_some_and(|s| s != record.seed) {
        bail!("--pi/--seed differ from the recorded split (pi = {}, seed = {})", record.pi, record.seed);
    }
    let data = Dataset::load(data_path)?;
    let (_, d2) = split(&data, record.pi, Seed(record.seed))?;
    let pred = fit_binned(&part, &record.h, &d2)?;
    let path = dir.join("predictor.json");
    let part_ref = std::fs::canonicalize(part_path)?.display().to_string();
    pred.save(&path, &part_ref)?;
    io::write_json(
        &dir.join("predictor.meta.json"),
        &json!({"config_hash": record.config_hash, "seed": record.seed, "pi": record.pi, "n_d2": d2.len()}),
    )?;
    println!("{} ({} cells, {} points in D2)", path.display(), pred.values().len(), d2.len());
    Ok(Outcome::Pass)
}

fn load_predictor(path: &Path) -> anyhow::Result<(BinnedPredictor, serde_json::Value)> {
    let file: PredictorFile = io::read_json(path)?;
    let mut part_path = PathBuf::from(&file.partition_ref);
    if part_path.is_relative() {
        part_path = path.parent().unwrap_or(Path::new(".")).join(part_path);
    }
    let part = ScaffoldPartition::load(&part_path).with_context(|| format!("loading {}", part_path.display()))?;
    let meta = path.with_file_name("predictor.meta.json");
    let meta = if meta.exists() { io::read_json(&meta)? } else { json!({}) };
    Ok((BinnedPredictor::from_file(file, part)?, meta))
}

fn evaluate(cli: &Cli, pred_path: &Path, data_path: &Path) -> anyhow::Result<Outcome> {
    let dir = out_dir(cli, None)?;
    let (pred, meta) = load_predictor(pred_path)?;
    let fresh = Dataset::load(data_path)?;
    let report = calibration_report(&pred, &fresh)?;
    let mse = mse_vs_truth(&pred, &fresh).ok();
    let config_hash = meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or("none").to_string();
    let seed = meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let fresh_hash = io::hash_file(data_path)?;
    io::write_json(
        &dir.join("report.json"),
        &json!({"config_hash": config_hash, "seed": seed, "fresh_hash": fresh_hash, "mse_vs_truth": mse, "report": report}),
    )?;
    report.write_csv(
        &dir.join("report.csv"),
        &[format!("config_hash={config_hash} seed={seed} fresh_hash={fresh_hash}")],
    )?;
    println!("max_gap {:.6}  alpha_hat {:.6}  n_eval {}", report.max_gap, report.alpha_hat, report.n_eval);
    if let Some(m) = mse {
        println!("mse_vs_truth {m:.6}");
    }
    Ok(Outcome::Pass)
}

fn sweep(cli: &Cli) -> anyhow::Result<Outcome> {
    let cfg = load_config(cli)?;
    let dir = out_dir(cli, Some(&cfg))?;
    let res = run_sweep(&cfg)?;
    res.save(&dir)?;
    println!("{} rows -> {}", res.rows.len(), dir.join("results.csv").display());
    for m in &res.summary.means {
        println!("n={:<8} b={:<3} mean {}={:.6}", m.n, m.b, res.summary.primary, m.mean);
    }
    for f in &res.summary.rate_fits {
        println!("b={}: slope {:.4}, r^2 {:.4}", f.b, f.fit.slope, f.fit.r_squared);
    }
    Ok(Outcome::Pass)
}

fn accept(cli: &Cli, only: Option<&[u8]>) -> anyhow::Result<Outcome> {
    let ids: Vec<Criterion> = match only {
        None => Criterion::ALL.to_vec(),
        Some(list) => list
            .iter()
            .map(|&i| Criterion::from_id(i).ok_or_else(|| anyhow!("no criterion {i} (valid: 1-8)")))
            .collect::<anyhow::Result<_>>()?,
    };
    let mut all_pass = true;
    let mut outcomes = Vec::new();
    for c in ids {
        let o = acceptance::run(c);
        println!("{}", o.line());
        all_pass &= o.passed;
        outcomes.push(o);
    }
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
        io::write_json(&dir.join("acceptance.json"), &outcomes)?;
    }
    Ok(if all_pass { Outcome::Pass } else { Outcome::CheckFailed })
}
