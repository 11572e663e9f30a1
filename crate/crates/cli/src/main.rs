use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use vgloo::ecm::{fit, initialize, EcmConfig, FixedMask, Termination};
use vgloo::report::fit_report;
use vgloo::study::{emit_qq, run_rate_study_with_threads, write_pairs_csv, write_study_outputs, StudySpec, DEFAULT_QQ_MC_SIZE};
use vgloo::{Dataset, Error, VgParams};

const EXIT_INPUT: u8 = 2;
const EXIT_MAX_ITER: u8 = 3;
const EXIT_DEGENERATE: u8 = 4;

#[derive(Parser)]
#[command(name = "vgloo", version, about = "Leave-one-out likelihood fitting of the skewed variance-gamma distribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit all parameters to a CSV data file (one observation per row).
    Fit(FitArgs),
    /// Draw a seeded sample and write it as CSV.
    Sample(SampleArgs),
    /// Run the convergence-rate simulation study.
    RateStudy(StudyArgs),
    /// Pair sorted samples with Monte Carlo quantiles of a symmetric VG.
    Qq(QqArgs),
}

#[derive(Args)]
struct FitArgs {
    input: PathBuf,
    /// Start from the coordinatewise median and scaled MAD.
    #[arg(long)]
    robust_init: bool,
    #[arg(long, default_value_t = EcmConfig::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = EcmConfig::default().max_iter)]
    max_iter: usize,
    /// Number of nearest observations tried by the local point search.
    #[arg(long, default_value_t = EcmConfig::default().m_search)]
    m: usize,
    #[arg(long, default_value_t = EcmConfig::default().nu_min)]
    nu_min: f64,
    #[arg(long, default_value_t = EcmConfig::default().nu_max)]
    nu_max: f64,
    /// Comma list of blocks held at their starting values (mu, sigma, gamma, nu).
    #[arg(long, default_value = "")]
    fix: String,
    /// Skip one header row.
    #[arg(long)]
    skip_header: bool,
    /// Report file (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Location, comma separated (its length sets the dimension).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "0")]
    mu: Vec<f64>,
    /// Scale matrix entries, row-major and comma separated (sigma^2 when d = 1).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    sigma: Option<Vec<f64>>,
    /// Skewness, comma separated (zeros when absent).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    gamma: Option<Vec<f64>>,
    #[arg(long)]
    nu: f64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.5,1")]
    nu_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "500,1000,2000,4000")]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Monte Carlo size of the fitted side of the Q-Q data.
    #[arg(long, default_value_t = DEFAULT_QQ_MC_SIZE)]
    qq_mc_size: usize,
    #[arg(long)]
    out_dir: PathBuf,
    /// Worker threads (all cores when absent); output does not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct QqArgs {
    /// One-column CSV of samples.
    samples_csv: PathBuf,
    /// Scale of the fitted symmetric VG (square root of its sigma^2).
    #[arg(long)]
    sigma: f64,
    #[arg(long)]
    nu: f64,
    #[arg(long, default_value_t = DEFAULT_QQ_MC_SIZE)]
    mc_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    skip_header: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Degenerate(_) | Error::Init(_) => EXIT_DEGENERATE,
        _ => EXIT_INPUT,
    }
}

fn check_output(path: &Option<PathBuf>) -> vgloo::Result<()> {
    if let Some(p) = path {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(Error::Input(format!("output directory {} does not exist", parent.display())));
        }
    }
    Ok(())
}

fn open_output(path: &Option<PathBuf>) -> vgloo::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn run_fit(args: FitArgs) -> vgloo::Result<u8> {
    check_output(&args.out)?;
    let data = Dataset::read_csv_path(&args.input, args.skip_header)?;
    let cfg = EcmConfig {
        tol: args.tol,
        max_iter: args.max_iter,
        m_search: args.m,
        nu_min: args.nu_min,
        nu_max: args.nu_max,
        fixed: FixedMask::parse(&args.fix)?,
        ..EcmConfig::default()
    };
    cfg.validate()?;
    if data.n() < data.dim() + 2 {
        return Err(Error::Input(format!(
            "need at least d + 2 = {} observations, got {}",
            data.dim() + 2,
            data.n()
        )));
    }
    let init = initialize(&data, args.robust_init)?;
    let result = fit(&data, &cfg, Some(init))?;
    let mut out = open_output(&args.out)?;
    out.write_all(fit_report(&result).as_bytes())?;
    out.flush()?;
    Ok(match result.termination {
        Termination::Converged => 0,
        Termination::MaxIter => EXIT_MAX_ITER,
    })
}

fn run_sample(args: SampleArgs) -> vgloo::Result<u8> {
    check_output(&args.out)?;
    let d = args.mu.len();
    let sigma = match args.sigma {
        Some(v) if v.len() == d * d => DMatrix::from_row_slice(d, d, &v),
        Some(v) => return Err(Error::Input(format!("--sigma needs {} entries, got {}", d * d, v.len()))),
        None => DMatrix::identity(d, d),
    };
    let gamma = match args.gamma {
        Some(v) if v.len() == d => DVector::from_vec(v),
        Some(v) => return Err(Error::Input(format!("--gamma needs {d} entries, got {}", v.len()))),
        None => DVector::zeros(d),
    };
    let params = VgParams::new(DVector::from_vec(args.mu), sigma, gamma, args.nu)?;
    let data = params.sample(args.n, &mut ChaCha8Rng::seed_from_u64(args.seed));
    data.write_csv(open_output(&args.out)?)?;
    Ok(0)
}

fn run_study(args: StudyArgs) -> vgloo::Result<u8> {
    let spec = StudySpec {
        qq_mc_size: args.qq_mc_size,
        ..StudySpec::new(args.nu_grid, args.n_grid, args.replicates, args.seed)
    };
    spec.validate()?;
    std::fs::create_dir_all(&args.out_dir)?;
    let threads = args.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = run_rate_study_with_threads(&spec, threads)?;
    let files = write_study_outputs(&result, &args.out_dir)?;

    let failures: Vec<_> = result
        .cells
        .iter()
        .filter(|c| !c.failures.is_empty() || c.scaled_fit_error.is_some())
        .map(|c| json!({ "nu": c.nu, "n": c.n, "failed_replicates": c.failures, "scaled_fit_error": c.scaled_fit_error }))
        .collect();
    let manifest = json!({
        "tool": "vgloo",
        "version": env!("CARGO_PKG_VERSION"),
        "spec": spec,
        "location_fit": { "tol": EcmConfig::default().tol, "max_iter": EcmConfig::default().max_iter, "m_search": EcmConfig::default().m_search },
        "scaled_fit_nu_cap": vgloo::study::SCALED_FIT_NU_CAP,
        "files": files,
        "failures": failures,
    });
    let mut f = BufWriter::new(File::create(args.out_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest).map_err(|e| Error::Input(e.to_string()))?;
    writeln!(f)?;
    f.flush()?;

    let attempted = spec.replicates * result.cells.len();
    if result.total_failures() == attempted {
        log::error!("every replicate failed");
        return Ok(EXIT_DEGENERATE);
    }
    Ok(0)
}

fn run_qq(args: QqArgs) -> vgloo::Result<u8> {
    check_output(&args.out)?;
    let data = Dataset::read_csv_path(&args.samples_csv, args.skip_header)?;
    if data.dim() != 1 {
        return Err(Error::Input(format!("samples file must have one column, got {}", data.dim())));
    }
    let pairs = emit_qq(data.values(), args.sigma, args.nu, args.mc_size, &mut ChaCha8Rng::seed_from_u64(args.seed))?;
    write_pairs_csv(("theoretical", "empirical"), &pairs, open_output(&args.out)?)?;
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Sample(a) => run_sample(a),
        Command::RateStudy(a) => run_study(a),
        Command::Qq(a) => run_qq(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
