//! `tgpssm` command-line front end: training, prior sampling, evaluation,
//! data generation and EKF filtering.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use tgpssm::autodiff::Matrix;
use tgpssm::config::RunConfig;
use tgpssm::data::{self, LORENZ_DT};
use tgpssm::eval::{self, MetricReport, TransitionCurve};
use tgpssm::experiment::{self, Metrics};
use tgpssm::model::fmt17;
use tgpssm::training::{Checkpoint, Learner};
use tgpssm::Error;

/// Default output root when `--out` is not given.
const OUTPUT_ROOT_VAR: &str = "TGPSSM_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "tgpssm", version, about = "Transformed Gaussian process state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run per seed; writes config.toml, log.jsonl and checkpoint.json.
    Train(RunArgs),
    /// Draw trajectories from the model prior (initial or checkpointed parameters).
    SamplePrior(SampleArgs),
    /// Evaluate trained (or untrained) runs; writes metrics.json and plot CSVs.
    Evaluate(EvalArgs),
    /// Generate a benchmark dataset as CSV files.
    GenerateData(GenArgs),
    /// Filter a simulated Lorenz sequence with the EKF under the true model.
    FilterEkf(EkfArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Preset name or path to a TOML configuration.
    #[arg(long)]
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds, run in parallel.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Run directory (single seed) or parent of `seed_<n>` directories.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Sample through the inducing outputs instead of exact sequential conditioning.
    #[arg(long)]
    sparse: bool,
    /// Use parameters from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Evaluate freshly initialized parameters instead of checkpoints.
    #[arg(long)]
    untrained: bool,
    /// Checkpoint to evaluate (single seed); defaults to the run directory's.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "generator")]
struct GenKind {
    #[arg(long)]
    kink: bool,
    #[arg(long)]
    kink_step: bool,
    #[arg(long)]
    lorenz: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    kind: GenKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    num_sequences: usize,
    /// Steps per sequence (default 20 for kink data, 2000 for Lorenz).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = LORENZ_DT)]
    dt: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EkfArgs {
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = LORENZ_DT)]
    dt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Parse { .. } | Error::Shape(_) | Error::EmptyDataset | Error::DegenerateChannel(_) | Error::Io(_) | Error::Json(_) => 2,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

impl RunArgs {
    fn seeds(&self, base: &RunConfig) -> Vec<u64> {
        match (&self.seeds, self.seed) {
            (Some(s), _) => s.clone(),
            (None, Some(s)) => vec![s],
            (None, None) => vec![base.seed],
        }
    }

    /// Configuration with flag overrides applied.
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn base_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.output_dir.clone().unwrap_or_else(|| output_root().join(&cfg.name))
    }

    fn run_dir(&self, cfg: &RunConfig, seed: u64, multi: bool) -> PathBuf {
        let base = self.base_dir(cfg);
        if multi || self.out.is_none() {
            base.join(format!("seed_{seed}"))
        } else {
            base
        }
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(f, value).map_err(Error::from)?;
    Ok(())
}

fn persist_config(dir: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn train_one(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    persist_config(dir, cfg)?;
    let log_path = dir.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let split = experiment::prepare_data(cfg)?;
    let result = experiment::train(cfg, &split, |rec| {
        serde_json::to_writer(&mut log, rec)?;
        writeln!(log)?;
        Ok(())
    });
    log.flush()?;
    match result {
        Ok((learner, _)) => {
            write_json(&dir.join("checkpoint.json"), &learner.checkpoint(&cfg.train))?;
            eprintln!("{}: trained {} epochs", dir.display(), learner.epoch);
            Ok(())
        }
        Err(e) => {
            let mut f: Failure = e.into();
            f.message = format!("{} (log: {})", f.message, log_path.display());
            Err(f)
        }
    }
}

fn cmd_train(args: &RunArgs) -> CliResult<()> {
    let base = args.resolve()?;
    let seeds = args.seeds(&base);
    let multi = seeds.len() > 1;
    let results: Vec<CliResult<()>> = seeds
        .par_iter()
        .map(|&s| {
            let cfg = base.with_seed(s);
            train_one(&cfg, &args.run_dir(&base, s, multi))
        })
        .collect();
    worst(results)
}

/// Combined failure carrying the highest exit code, if any run failed.
fn worst(results: Vec<CliResult<()>>) -> CliResult<()> {
    let failures: Vec<Failure> = results.into_iter().filter_map(|r| r.err()).collect();
    match failures.iter().map(|f| f.code).max() {
        None => Ok(()),
        Some(code) => Err(Failure { code, message: failures.iter().map(|f| f.message.as_str()).collect::<Vec<_>>().join("\n") }),
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Learner> {
    let text = fs::read_to_string(path).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Failure { code: 2, message: format!("{}: {e}", path.display()) })?;
    Ok(Learner::restore(&ck)?)
}

fn cmd_sample_prior(args: &SampleArgs) -> CliResult<()> {
    let cfg = args.run.resolve()?;
    let seed = args.run.seed.unwrap_or(cfg.seed);
    let learner = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => Learner::new(&cfg.model, seed)?,
    };
    let values = learner.model.values(&learner.store);
    let dir = args.run.run_dir(&cfg, seed, false).join("prior_samples");
    persist_config(&dir, &cfg)?;
    for k in 0..args.samples {
        let draw_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
        let traj = if args.sparse { values.sample_prior_sparse(args.steps, draw_seed)? } else { values.sample_prior_exact(args.steps, draw_seed)? };
        traj.write_csv(BufWriter::new(File::create(dir.join(format!("trajectory_{k:03}.csv")))?))?;
    }
    eprintln!("{}: {} trajectories", dir.display(), args.samples);
    Ok(())
}

fn evaluate_one(cfg: &RunConfig, dir: &Path, args: &EvalArgs) -> CliResult<Metrics> {
    let learner = if args.untrained {
        Learner::new(&cfg.model, cfg.seed)?
    } else {
        let path = args.checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.json"));
        load_checkpoint(&path)?
    };
    let split = experiment::prepare_data(cfg)?;
    let metrics = experiment::evaluate(cfg, &learner, &split)?;
    fs::create_dir_all(dir)?;
    if let Some((f, grid)) = experiment::reference_transition(&cfg.dataset.source) {
        let curve = TransitionCurve::compute(&learner.model.values(&learner.store), f, &grid)?;
        curve.write_csv(BufWriter::new(File::create(dir.join("transition_curve.csv"))?))?;
    }
    if let Some(seq) = split.train.sequences.first() {
        let states = eval::posterior_mean_states(&learner.store, &learner.vs, seq)?;
        let states = match &split.stats {
            Some(st) if states.ncols() == st.y.mean.len() => data::destandardize(&states, &st.y),
            _ => states,
        };
        let mut w = BufWriter::new(File::create(dir.join("posterior_states.csv"))?);
        write_rows(&mut w, "x", &states)?;
    }
    write_json(&dir.join(if args.untrained { "metrics_untrained.json" } else { "metrics.json" }), &metrics)?;
    Ok(metrics)
}

fn write_rows<W: Write>(w: &mut W, prefix: &str, m: &Matrix) -> CliResult<()> {
    let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=m.ncols()).map(|i| format!("{prefix}_{i}"))).collect();
    writeln!(w, "{}", header.join(","))?;
    for t in 0..m.nrows() {
        let row: Vec<String> = std::iter::once(t.to_string()).chain(m.row(t).iter().map(|v| fmt17(*v))).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

fn cmd_evaluate(args: &EvalArgs) -> CliResult<()> {
    let base = args.run.resolve()?;
    let seeds = args.run.seeds(&base);
    let multi = seeds.len() > 1;
    if multi && args.checkpoint.is_some() {
        return Err(Failure { code: 2, message: "--checkpoint applies to a single seed".into() });
    }
    let results: Vec<CliResult<Metrics>> = seeds.par_iter().map(|&s| evaluate_one(&base.with_seed(s), &args.run.run_dir(&base, s, multi), args)).collect();
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(m) => metrics.push(m),
            Err(f) => failures.push(Err(f)),
        }
    }
    worst(failures)?;

    let fp = eval::fingerprint(&base.to_toml()?);
    let mut reports = Vec::new();
    let mut add = |name: &str, pick: &dyn Fn(&Metrics) -> Option<f64>| {
        let vals: Option<Vec<f64>> = metrics.iter().map(pick).collect();
        if let Some(v) = vals {
            reports.push(MetricReport::new(name, &seeds, &v, &fp));
        }
    };
    add("transition_mse", &|m| m.transition_mse);
    add("state_mse", &|m| m.state_mse);
    add("observation_mse", &|m| m.observation_mse);
    add("forecast_rmse", &|m| m.forecast_rmse);
    add("elbo", &|m| Some(m.elbo.total));
    let dir = args.run.base_dir(&base);
    fs::create_dir_all(&dir)?;
    write_json(&dir.join(if args.untrained { "report_untrained.json" } else { "report.json" }), &reports)?;
    for r in &reports {
        println!("{} mean {} std {} over {} seed(s)", r.metric, fmt17(r.mean), fmt17(r.std), r.seeds.len());
    }
    Ok(())
}

fn cmd_generate(args: &GenArgs) -> CliResult<()> {
    let (name, ds) = if args.kind.kink {
        ("kink", data::gen_kink(args.num_sequences, args.steps.unwrap_or(20), args.seed)?)
    } else if args.kind.kink_step {
        ("kink_step", data::gen_kink_step(args.num_sequences, args.steps.unwrap_or(20), args.seed)?)
    } else {
        ("lorenz", data::gen_lorenz(args.steps.unwrap_or(2000), args.dt, args.seed)?)
    };
    let dir = args.out.clone().unwrap_or_else(|| output_root().join("data").join(format!("{name}_seed_{}", args.seed)));
    ds.export_dir(&dir)?;
    eprintln!("{}: {} sequence(s)", dir.display(), ds.len());
    Ok(())
}

fn cmd_filter_ekf(args: &EkfArgs) -> CliResult<()> {
    let raw = data::gen_lorenz(args.steps, args.dt, args.seed)?;
    let (report, out) = experiment::lorenz_ekf(&raw, args.dt)?;
    let dir = args.out.clone().unwrap_or_else(|| output_root().join("ekf").join(format!("seed_{}", args.seed)));
    fs::create_dir_all(&dir)?;
    write_rows(&mut BufWriter::new(File::create(dir.join("filtered_states.csv"))?), "x", &out.mean_matrix())?;
    write_json(&dir.join("ekf.json"), &report)?;
    println!("state mse {} observation mse {}", fmt17(report.state_mse), fmt17(report.observation_mse));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::SamplePrior(a) => cmd_sample_prior(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::GenerateData(a) => cmd_generate(a),
        Command::FilterEkf(a) => cmd_filter_ekf(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
