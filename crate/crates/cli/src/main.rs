use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msc_core::baseline::BaselineConfig;
use msc_core::bench::{run_bench, BenchConfig, Suite};
use msc_core::io::{locations_path, read_dataset, read_matrix, write_dataset, write_matrix, ModelFile, PgmImage, TruthFile};
use msc_core::patches::{denoise_baseline, denoise_msc, DenoiseConfig};
use msc_core::spatial::KernelFamily;
use msc_core::synth::{mse, psnr, simulate_gaussian, simulate_poisson, subspace_distance, SimSpec};
use msc_core::{fit_msc, DataKind, FitConfig, ModelFamily, MscError, RcSchedule};

#[derive(Parser)]
#[command(name = "msc", version, about = "Model-based sparse coding")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a sparse mixture dataset with its ground truth.
    Simulate(SimulateArgs),
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Denoise a grayscale PGM image patch by patch.
    Denoise(DenoiseArgs),
    /// Run a dictionary-recovery benchmark suite.
    Bench(BenchArgs),
    /// Compare dictionaries or images.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimFamilyArg {
    Gaussian,
    Spatial,
    Poisson,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    family: SimFamilyArg,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long = "K")]
    k: usize,
    #[arg(long)]
    d: usize,
    /// Signal-to-noise ratio (Gaussian families, default 2).
    #[arg(long)]
    snr: Option<f64>,
    /// Correlation decay (spatial family, default 0.04).
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    kernel: Option<String>,
    /// Keep Poisson coefficients unscaled.
    #[arg(long)]
    raw_scale: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// gaussian, spatial, poisson, binomial or binomial:<trials>.
    #[arg(long)]
    family: String,
    #[arg(long = "K")]
    k: usize,
    #[arg(long, default_value_t = 3)]
    dmax: usize,
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    c0: Option<f64>,
    #[arg(long)]
    cmin: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Fit every level up to --dmax instead of stopping when BIC rises.
    #[arg(long)]
    fixed_d: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    locations: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    /// CSV of per-iteration log-likelihood and per-level BIC.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DenoiseMethod {
    Msc,
    OmpAls,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    patch: usize,
    #[arg(long, default_value_t = 3)]
    stride: usize,
    #[arg(long = "K", default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    dmax: usize,
    /// exp, gauss, ar, or none for uncorrelated noise.
    #[arg(long, default_value = "exp")]
    kernel: String,
    /// Known noise standard deviation.
    #[arg(long)]
    sigma_known: Option<f64>,
    /// Reconstruct from the most probable component only.
    #[arg(long)]
    hard: bool,
    #[arg(long, value_enum, default_value = "msc")]
    method: DenoiseMethod,
    /// Choose the sparsity by BIC instead of fitting exactly --dmax.
    #[arg(long)]
    select_d: bool,
    #[arg(long, default_value_t = 20)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    /// gaussian-fig1 or poisson-fig1.
    #[arg(long)]
    suite: String,
    #[arg(long)]
    replicates: Option<usize>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Start from the reduced design (m = 40) instead of m = 100.
    #[arg(long)]
    scaled: bool,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "truth_dict", conflicts_with_all = ["reference", "test"])]
    model: Option<PathBuf>,
    /// Dictionary file with one atom per row.
    #[arg(long)]
    truth_dict: Option<PathBuf>,
    #[arg(long = "ref", requires = "test")]
    reference: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<MscError> for Failure {
    fn from(e: MscError) -> Self {
        match e {
            MscError::NumericFailure(_) | MscError::DegenerateSignal { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Usage(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn parse<T: std::str::FromStr<Err = MscError>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(Failure::from)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().expect("thread pool is built once");
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Denoise(a) => denoise(a),
        Command::Bench(a) => bench(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn simulate(a: SimulateArgs) -> CmdResult {
    if a.n == 0 || a.m == 0 || a.k == 0 || a.d == 0 {
        return usage("--n, --m, --K and --d must be positive");
    }
    let spec = match a.family {
        SimFamilyArg::Poisson => {
            if a.snr.is_some() || a.omega.is_some() || a.kernel.is_some() {
                return usage("--snr, --omega and --kernel do not apply to --family poisson");
            }
            SimSpec { raw_scale: a.raw_scale, ..SimSpec::poisson(a.n, a.m, a.k, a.d, a.seed) }
        }
        SimFamilyArg::Gaussian => {
            if a.omega.is_some() || a.kernel.is_some() {
                return usage("--omega and --kernel need --family spatial");
            }
            if a.raw_scale {
                return usage("--raw-scale applies to --family poisson only");
            }
            SimSpec::gaussian(a.n, a.m, a.k, a.d, a.snr.unwrap_or(2.0), a.seed)
        }
        SimFamilyArg::Spatial => {
            if a.raw_scale {
                return usage("--raw-scale applies to --family poisson only");
            }
            let kernel: KernelFamily = parse(a.kernel.as_deref().unwrap_or("exp"))?;
            SimSpec::gaussian(a.n, a.m, a.k, a.d, a.snr.unwrap_or(2.0), a.seed)
                .with_spatial(kernel, a.omega.unwrap_or(0.04))
        }
    };
    let (data, truth) = match a.family {
        SimFamilyArg::Poisson => simulate_poisson(&spec)?,
        _ => simulate_gaussian(&spec)?,
    };
    fs::create_dir_all(&a.out).map_err(MscError::from)?;
    let data_path = a.out.join("data.csv");
    let dict_path = a.out.join("truth_dict.csv");
    let truth_path = a.out.join("truth.json");
    write_dataset(&data_path, &data)?;
    write_matrix(&dict_path, &truth.dictionary.atoms().transpose())?;
    fs::write(&truth_path, TruthFile::from(&truth).to_json()?).map_err(MscError::from)?;
    println!("seed={}", a.seed);
    println!("data={}", data_path.display());
    if data.locations().is_some() {
        println!("locations={}", locations_path(&data_path).display());
    }
    println!("truth_dict={}", dict_path.display());
    println!("truth={}", truth_path.display());
    Ok(())
}

fn fit(a: FitArgs) -> CmdResult {
    let family: ModelFamily = parse(&a.family)?;
    if family == ModelFamily::SpatialGaussian && a.locations.is_none() {
        return usage("--family spatial needs --locations");
    }
    let kind = match family {
        ModelFamily::ExpFamily(spec) => DataKind::Counts { trials: spec.trials() },
        _ => DataKind::Real,
    };
    let data = read_dataset(&a.data, a.locations.as_deref(), kind)?;
    let mut cfg = FitConfig::new(family, a.k, a.dmax);
    if let Some(k) = &a.kernel {
        cfg.kernel = parse(k)?;
    }
    if let Some(c0) = a.c0 {
        cfg.rejection = if c0 == 0.0 { RcSchedule::disabled() } else { RcSchedule { c0, ..cfg.rejection } };
    }
    if let Some(cmin) = a.cmin {
        cfg.rejection.c_min = cmin;
    }
    if let Some(tol) = a.tol {
        cfg.tol = tol;
    }
    if let Some(it) = a.max_iter {
        cfg.max_iter = it;
    }
    cfg.stop_on_bic = !a.fixed_d;
    cfg.seed = a.seed;
    let result = fit_msc(&data, &cfg)?;
    ModelFile::from_fit(&result, &cfg).write(&a.out_model)?;
    if let Some(path) = &a.trace {
        let mut out = String::from("kind,d,iteration,value\n");
        for level in &result.levels {
            for (it, ll) in level.trace.iter().enumerate() {
                writeln!(out, "loglik,{},{},{}", level.d, it, ll).unwrap();
            }
        }
        for level in &result.levels {
            writeln!(out, "bic,{},,{}", level.d, level.bic).unwrap();
        }
        fs::write(path, out).map_err(MscError::from)?;
    }
    println!("chosen_d={}", result.chosen_d);
    for level in &result.levels {
        println!("bic[{}]={}", level.d, level.bic);
    }
    println!("components={}", result.state.supports.len());
    println!("model={}", a.out_model.display());
    Ok(())
}

fn denoise(a: DenoiseArgs) -> CmdResult {
    let img = PgmImage::read(&a.input)?;
    if a.patch > img.width.min(img.height) {
        return usage(format!("patch size {} exceeds the {}x{} image", a.patch, img.width, img.height));
    }
    let noisy = img.to_matrix();
    let out = match a.method {
        DenoiseMethod::Msc => {
            let kernel = match a.kernel.as_str() {
                "none" => None,
                k => Some(parse::<KernelFamily>(k)?),
            };
            let cfg = DenoiseConfig {
                patch: a.patch,
                stride: a.stride,
                n_atoms: a.k,
                d_max: a.dmax,
                kernel,
                hard: a.hard,
                sigma2: a.sigma_known.map(|s| s * s),
                select_d: a.select_d,
                max_iter: a.max_iter,
                seed: a.seed,
                ..DenoiseConfig::default()
            };
            let res = denoise_msc(&noisy, &cfg)?;
            println!("patches={}", res.n_patches);
            println!("chosen_d={}", res.fit.chosen_d);
            res.image
        }
        DenoiseMethod::OmpAls => {
            let cfg = BaselineConfig { seed: a.seed, ..BaselineConfig::new(a.k, a.dmax) };
            denoise_baseline(&noisy, a.patch, a.stride, &cfg)?
        }
    };
    PgmImage::from_matrix(&out).write(&a.out)?;
    println!("out={}", a.out.display());
    Ok(())
}

fn timing_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.timing.csv"))
}

fn bench(a: BenchArgs) -> CmdResult {
    let suite: Suite = parse(&a.suite)?;
    let mut cfg = if a.scaled { BenchConfig::scaled(suite) } else { BenchConfig::paper(suite) };
    if suite == Suite::PoissonFig1 && (a.snr.is_some() || a.omega.is_some()) {
        return usage("--snr and --omega do not apply to poisson-fig1");
    }
    cfg.replicates = a.replicates.unwrap_or(cfg.replicates);
    cfg.sizes = a.sizes.unwrap_or(cfg.sizes);
    cfg.m = a.m.unwrap_or(cfg.m);
    cfg.k = a.k.unwrap_or(cfg.k);
    cfg.d = a.d.unwrap_or(cfg.d);
    cfg.snr = a.snr.unwrap_or(cfg.snr);
    cfg.omega = a.omega.unwrap_or(cfg.omega);
    cfg.max_iter = a.max_iter.unwrap_or(cfg.max_iter);
    cfg.seed = a.seed;
    let report = run_bench(&cfg)?;
    fs::write(&a.out, report.to_csv()).map_err(MscError::from)?;
    let timing = timing_path(&a.out);
    fs::write(&timing, report.timing_csv()).map_err(MscError::from)?;
    for ((method, n), med) in report.medians() {
        println!("median[{method},{n}]={med:.6}");
    }
    println!("report={}", a.out.display());
    println!("timing={}", timing.display());
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    match (a.model, a.truth_dict, a.reference, a.test) {
        (model, Some(truth), None, None) => {
            let truth = read_matrix(&truth)?.transpose();
            let est = match model {
                Some(path) => ModelFile::read(&path)?.dictionary()?.atoms().clone(),
                None => return usage("--truth-dict needs --model"),
            };
            if est.nrows() != truth.nrows() {
                return usage(format!("model atoms have length {} but truth atoms have length {}", est.nrows(), truth.nrows()));
            }
            println!("subspace_distance={:.6}", subspace_distance(&est, &truth)?);
            Ok(())
        }
        (None, None, Some(reference), Some(test)) => {
            let (r, t) = (PgmImage::read(&reference)?, PgmImage::read(&test)?);
            if (r.width, r.height) != (t.width, t.height) {
                return usage(format!("images differ in size: {}x{} vs {}x{}", r.width, r.height, t.width, t.height));
            }
            let (rv, tv) = (r.to_f64(), t.to_f64());
            println!("mse={:.6}", mse(&rv, &tv)?);
            let p = psnr(&rv, &tv, 255.0)?;
            if p.is_infinite() {
                println!("psnr=inf");
            } else {
                println!("psnr={p:.6}");
            }
            Ok(())
        }
        _ => usage("use either --model with --truth-dict, or --ref with --test"),
    }
}
