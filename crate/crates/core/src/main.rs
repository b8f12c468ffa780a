use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use snpeb::io::{
    fit_prior, load_observations, read_prior, run_test, write_prior, write_results_csv, InputFormat, Pooling,
    RunConfig, TestMethod,
};
use snpeb::sim::{run_monte_carlo, MonteCarloConfig, SimDesign};
use snpeb::{EmConfig, PriorKind, Result};

#[derive(Parser)]
#[command(name = "snpeb", version, about = "Empirical Bayes shrinkage and testing for normal means")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a prior and write it as prior.json.
    Fit(RunArgs),
    /// Fit (or load) a prior, test every hypothesis and write results.csv and summary.json.
    Test(TestArgs),
    /// Run a Monte Carlo design and write metrics.json and metrics.csv.
    Simulate(SimArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Snp,
    Dnp,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "yz-csv")]
    format: InputFormat,
    #[arg(long, value_enum, default_value = "printed")]
    pooling: Pooling,
    #[arg(long, value_enum, default_value = "snp")]
    prior: PriorArg,
    #[arg(long, default_value_t = 400)]
    grid_size: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "neb-opt")]
    method: TestMethod,
    #[arg(long, default_value_t = 1.0)]
    null_sd: f64,
    #[arg(long, default_value_t = 0.5)]
    storey_lambda: f64,
    /// Accepted for a uniform interface; fitting and testing are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Use this prior instead of fitting one.
    #[arg(long)]
    prior_file: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 0.95)]
    w: f64,
    #[arg(long = "V", default_value_t = 2.0)]
    v: f64,
    #[arg(long, default_value_t = 1.5)]
    u: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    grid_size: usize,
    /// Comma-separated nominal levels.
    #[arg(long, value_delimiter = ',', default_value = "0.05")]
    alpha: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    storey_lambda: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

impl RunArgs {
    fn config(&self) -> RunConfig {
        RunConfig {
            prior_kind: match self.prior {
                PriorArg::Snp => PriorKind::Snp,
                PriorArg::Dnp => PriorKind::Dnp,
            },
            grid_size: self.grid_size,
            alpha: self.alpha,
            em: EmConfig::default(),
            method: self.method,
            null_sd: self.null_sd,
            storey_lambda: self.storey_lambda,
            ci_alpha: 0.05,
            format: self.format,
            pooling: self.pooling,
        }
    }
}

#[derive(Serialize)]
struct SavedConfig<'a, T: Serialize> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<&'a Path>,
    seed: u64,
    config: T,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn save_config<T: Serialize>(dir: &Path, cfg: &SavedConfig<'_, T>) -> Result<()> {
    serde_json::to_writer_pretty(create(dir, "config.json")?, cfg)?;
    Ok(())
}

fn fit(args: &RunArgs) -> Result<()> {
    let cfg = args.config();
    cfg.validate()?;
    let data = load_observations(&args.input, cfg.format, cfg.pooling)?;
    fs::create_dir_all(&args.out_dir)?;
    let (prior, trace) = fit_prior(&cfg, &data)?;
    write_prior(&prior, Some(&trace), create(&args.out_dir, "prior.json")?)?;
    save_config(
        &args.out_dir,
        &SavedConfig { command: "fit", input: Some(&args.input), seed: args.seed, config: &cfg },
    )
}

fn test(args: &TestArgs) -> Result<()> {
    let run = &args.run;
    let mut cfg = run.config();
    cfg.validate()?;
    let data = load_observations(&run.input, cfg.format, cfg.pooling)?;
    let prior = match &args.prior_file {
        Some(path) => {
            let p = read_prior(path)?;
            cfg.prior_kind = p.kind();
            p
        }
        None => fit_prior(&cfg, &data)?.0,
    };
    fs::create_dir_all(&run.out_dir)?;
    let out = run_test(&cfg, &data, &prior)?;
    write_results_csv(&out.rows, create(&run.out_dir, "results.csv")?)?;
    serde_json::to_writer_pretty(create(&run.out_dir, "summary.json")?, &out.summary)?;
    if args.prior_file.is_none() {
        write_prior(&prior, None, create(&run.out_dir, "prior.json")?)?;
    }
    save_config(
        &run.out_dir,
        &SavedConfig { command: "test", input: Some(&run.input), seed: run.seed, config: &cfg },
    )
}

fn simulate(args: &SimArgs) -> Result<()> {
    let design = SimDesign { n: args.n, w: args.w, v: args.v, u: args.u, seed: args.seed, reps: args.reps };
    let cfg = MonteCarloConfig {
        grid_size: args.grid_size,
        storey_lambda: args.storey_lambda,
        alphas: args.alpha.clone(),
        ..MonteCarloConfig::default()
    };
    design.validate()?;
    cfg.validate()?;
    fs::create_dir_all(&args.out_dir)?;
    let report = run_monte_carlo(&design, &cfg)?;
    report.write_json(create(&args.out_dir, "metrics.json")?)?;
    report.write_long_csv(create(&args.out_dir, "metrics.csv")?)?;
    #[derive(Serialize)]
    struct Sim<'a> {
        design: &'a SimDesign,
        monte_carlo: &'a MonteCarloConfig,
    }
    save_config(
        &args.out_dir,
        &SavedConfig {
            command: "simulate",
            input: None,
            seed: args.seed,
            config: Sim { design: &design, monte_carlo: &cfg },
        },
    )
}

#[derive(Serialize)]
struct ErrorReport {
    error: &'static str,
    message: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Test(a) => test(a),
        Command::Simulate(a) => simulate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport { error: e.kind(), message: e.to_string() };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
