//! `hdsmc` command-line driver.
//!
//! Every subcommand reads an optional TOML config, applies flag overrides,
//! runs, writes CSVs and a manifest to the output directory, and prints a
//! short summary. Exit codes: 0 success, 1 I/O, 2 configuration or usage,
//! 3 numerical precision.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::SystemTime;

use clap::{Parser, Subcommand, ValueEnum};
use hdsmc::experiments::{
    profile_table, run_critical_scaling, run_ess_convergence, run_mc_error, run_resampling_study, run_single,
    run_times, write_outputs, ExperimentConfig, KernelChoice, ProfileSource, Table,
};
use hdsmc::SmcError;

#[derive(Parser)]
#[command(name = "hdsmc", version, about = "Tempered SMC for high-dimensional product targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment config; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true, env = "SMC_SEED")]
    seed: Option<u64>,

    /// Output directory (default: config output_dir, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Dimensions, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    d: Option<Vec<usize>>,

    /// Particle counts, comma separated.
    #[arg(long = "n-particles", global = true, value_delimiter = ',')]
    n_particles: Option<Vec<usize>>,

    /// Step-count exponents for `scaling`, comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    delta: Option<Vec<f64>>,

    /// ESS thresholds a_k as fractions of N, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    a: Option<Vec<f64>>,

    #[arg(long, global = true)]
    phi0: Option<f64>,

    #[arg(long, global = true, value_enum)]
    kernel: Option<KernelArg>,

    #[arg(long, global = true)]
    replicates: Option<usize>,

    /// Built-in target name.
    #[arg(long, global = true)]
    target: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Single runs: per-step traces and a summary per replicate.
    Run,
    /// Terminal ESS against the limiting ε_N law, per d.
    EssConvergence,
    /// Terminal ESS/N under p = d^(1+δ) steps.
    Scaling,
    /// RMSE of a marginal estimate against N and d.
    McError,
    /// Resampling counts and times against theoretical times.
    Resampling,
    /// Estimate (or evaluate) the variance profile σ²_{φ0:t}.
    VarianceProfile,
    /// Limiting resampling times, plus finite-d times when --d is given.
    Times,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Rwm,
    Perfect,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Run => "run",
            Command::EssConvergence => "ess-convergence",
            Command::Scaling => "scaling",
            Command::McError => "mc-error",
            Command::Resampling => "resampling",
            Command::VarianceProfile => "variance-profile",
            Command::Times => "times",
        }
    }
}

fn build_config(cli: &Cli) -> hdsmc::Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        c.seed = seed;
    }
    if let Some(d) = &cli.d {
        c.dims = d.clone();
    }
    if let Some(n) = &cli.n_particles {
        c.n_particles = n.clone();
    }
    if let Some(delta) = &cli.delta {
        c.deltas = delta.clone();
    }
    if let Some(a) = &cli.a {
        c.policy.thresholds = a.clone();
    }
    if let Some(phi0) = cli.phi0 {
        c.schedule.phi0 = phi0;
    }
    if let Some(k) = cli.kernel {
        c.kernel.kind = match k {
            KernelArg::Rwm => KernelChoice::Rwm,
            KernelArg::Perfect => KernelChoice::Perfect,
        };
    }
    if let Some(r) = cli.replicates {
        c.replicates = r;
    }
    if let Some(t) = &cli.target {
        c.target = t.clone();
    }
    if let Some(out) = &cli.out {
        c.output_dir = Some(out.clone());
    }
    if c.output_dir.is_none() {
        c.output_dir = Some(PathBuf::from("out"));
    }
    c.validate()?;
    Ok(c)
}

fn execute(cli: &Cli) -> hdsmc::Result<()> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| SmcError::Config(format!("thread pool: {e}")))?;
    }
    let mut config = build_config(cli)?;
    if matches!(cli.command, Command::VarianceProfile) && config.profile.source == ProfileSource::Auto {
        // this command exists to estimate; the closed form is opt-in
        config.profile.source = ProfileSource::Estimated;
    }
    let started = SystemTime::now();
    let tables: Vec<Table> = match cli.command {
        Command::Run => {
            let tables = run_single(&config)?;
            for row in &tables[0].rows {
                println!("seed={} d={} N={} terminal_ess={} n_resamples={}", row[0], row[1], row[2], row[3], row[4]);
            }
            tables
        }
        Command::EssConvergence => {
            let report = run_ess_convergence(&config)?;
            for c in &report.cells {
                println!("d={} N={} sigma2={} ks={:.4} p={:.3}", c.d, c.n, c.sigma2, c.ks, c.p_value);
            }
            report.tables(&config)
        }
        Command::Scaling => {
            let report = run_critical_scaling(&config)?;
            for c in &report.cells {
                println!("delta={} d={} N={} mean_ess_fraction={:.4} se={:.4}", c.delta, c.d, c.n, c.mean(), c.std_error());
            }
            report.tables(&config)
        }
        Command::McError => {
            let report = run_mc_error(&config)?;
            for s in &report.slopes {
                println!("policy={} d={} slope={:.3} se={:.3}", s.policy, s.d, s.slope, s.slope_se);
            }
            report.tables()
        }
        Command::Resampling => {
            let report = run_resampling_study(&config)?;
            for c in &report.cells {
                println!(
                    "d={} N={} modal_count={} theoretical_count={} coincidence={:.3}",
                    c.d,
                    c.n,
                    c.modal_count(),
                    c.theory.len(),
                    c.coincidence_frequency()
                );
            }
            report.tables()
        }
        Command::VarianceProfile => {
            let profile = config.build_profile()?;
            println!("sigma2({}:1)={}", profile.phi0(), profile.total());
            vec![profile_table(&profile)]
        }
        Command::Times => {
            let report = run_times(&config, cli.d.is_some())?;
            for t in &report.limit {
                println!("t_{}={:.6}", t.k, t.t);
            }
            println!("m*={}", report.limit.len());
            for (d, times) in report.finite.iter().flatten() {
                for t in times {
                    println!("d={d} t_{}={:.6}", t.k, t.t);
                }
            }
            report.tables()
        }
    };
    let dir = config.output_dir.clone().expect("set by build_config");
    let written = write_outputs(&dir, cli.command.name(), &config, &tables, started)?;
    eprintln!("wrote {} files to {}", written.len(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
