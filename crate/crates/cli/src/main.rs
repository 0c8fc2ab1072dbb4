use clap::{Args, Parser, Subcommand, ValueEnum};
use ganinv_core::inversion::{ConstraintPolicy, InversionConfig, Optimizer, Reduction};
use ganinv_core::io::parse_arch_config;
use ganinv_core::nn::BnMode;
use ganinv_core::pipeline::{
    gradient_audit, run_generate, run_invert, run_metrics, run_train, seeded_network, GenerateJob, InvertJob,
    ParamSampling, TrainJob, GRADCHECK_TOLERANCE,
};
use ganinv_core::prior::PriorSpec;
use ganinv_core::train::{AdamConfig, TrainConfig};
use ganinv_core::Error;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Recover GAN latent codes for images by gradient descent.
#[derive(Parser, Debug)]
#[command(name = "ganinv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a generator/discriminator pair on an IDX image file.
    Train(TrainArgs),
    /// Recover latent codes for a batch of images.
    Invert(InvertArgs),
    /// Sample the prior and render generator outputs as a PGM grid.
    Generate(GenerateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Recompute the mean absolute pixel error of an inversion output directory.
    Metrics(MetricsArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_name = "CFG")]
    arch_g: PathBuf,
    #[arg(long, value_name = "CFG")]
    arch_d: PathBuf,
    #[arg(long, value_name = "IDX")]
    data: PathBuf,
    /// Use only the first N images of the data file.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = AdamConfig::GAN.lr)]
    lr: f64,
    /// uniform:a,b or normal:mu,sigma
    #[arg(long, default_value = "uniform:-1,1")]
    prior: PriorSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator weight file; siblings get .disc, .loss.csv and .config.json.
    #[arg(long, value_name = "WEIGHTS")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BnArg {
    Batch,
    Fixed,
}

impl From<BnArg> for BnMode {
    fn from(b: BnArg) -> Self {
        match b {
            BnArg::Batch => BnMode::BatchStats,
            BnArg::Fixed => BnMode::FixedStats,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

/// `none`, `clip`, `reg` (weights 1,1) or `reg:g1,g2`.
fn parse_constraint(s: &str) -> Result<ConstraintPolicy, String> {
    match s {
        "none" => Ok(ConstraintPolicy::None),
        "clip" => Ok(ConstraintPolicy::Clip),
        "reg" => Ok(ConstraintPolicy::StatsRegularize {
            gamma1: 1.0,
            gamma2: 1.0,
        }),
        _ => {
            let bad = || format!("expected none, clip, reg or reg:g1,g2, got {s:?}");
            let (g1, g2) = s.strip_prefix("reg:").and_then(|r| r.split_once(',')).ok_or_else(bad)?;
            Ok(ConstraintPolicy::StatsRegularize {
                gamma1: g1.trim().parse().map_err(|_| bad())?,
                gamma2: g2.trim().parse().map_err(|_| bad())?,
            })
        }
    }
}

#[derive(Args, Debug)]
struct InvertArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_name = "CFG")]
    arch_g: PathBuf,
    #[arg(long, value_name = "IDX")]
    images: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    offset: usize,
    #[arg(long, default_value = "uniform:-1,1")]
    prior: PriorSpec,
    /// none, clip, reg or reg:g1,g2
    #[arg(long, default_value = "none", value_parser = parse_constraint)]
    constraint: ConstraintPolicy,
    /// Batch-norm statistics; defaults to batch when the generator has batch norm.
    #[arg(long, value_enum)]
    bn: Option<BnArg>,
    #[arg(long, value_enum, default_value = "adam")]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = AdamConfig::INVERSION.lr)]
    alpha: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    /// Sum per-image losses instead of averaging over the batch.
    #[arg(long)]
    per_sample: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_name = "CFG")]
    arch_g: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value = "uniform:-1,1")]
    prior: PriorSpec,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "fixed")]
    bn: BnArg,
    #[arg(long, value_name = "PGM")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_name = "CFG")]
    arch_g: PathBuf,
    /// Audit these weights instead of a seeded random initialization.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Parameter coordinates checked per tensor; 0 checks every coordinate.
    #[arg(long, default_value_t = 8)]
    param_samples: usize,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long, value_name = "IDX")]
    targets: PathBuf,
    #[arg(long, value_name = "DIR")]
    recon_dir: PathBuf,
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::Config(_)) { 2 } else { 1 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    })
}

fn train(a: TrainArgs) -> Result<(), Failure> {
    let job = TrainJob {
        arch_g: read_text(&a.arch_g)?,
        arch_d: read_text(&a.arch_d)?,
        data: a.data,
        data_limit: a.limit,
        train: TrainConfig {
            iterations: a.iters,
            batch_size: a.batch,
            adam: AdamConfig {
                lr: a.lr,
                ..AdamConfig::GAN
            },
            prior: a.prior,
            seed: a.seed,
        },
        out: a.out,
    };
    job.train.validate()?;
    let summary = run_train(&job, |r| {
        if r.iteration % 25 == 0 || r.iteration + 1 == a.iters {
            eprintln!(
                "iter {:4}  d_loss {:.4}  g_loss {:.4}  D(x) {:.3}  D(G(z)) {:.3}",
                r.iteration, r.d_loss, r.g_loss, r.d_real, r.d_fake
            );
        }
    })?;
    if let Some(last) = summary.history.last() {
        println!("final d_loss {} g_loss {}", last.d_loss, last.g_loss);
    }
    println!("generator weights: {}", job.out.display());
    println!("discriminator weights: {}", job.discriminator_path().display());
    Ok(())
}

fn invert(a: InvertArgs) -> Result<(), Failure> {
    let inversion = InversionConfig {
        alpha: a.alpha,
        optimizer: match a.optimizer {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adam => {
                let d = AdamConfig::INVERSION;
                Optimizer::Adam {
                    beta1: d.beta1,
                    beta2: d.beta2,
                    eps: d.eps,
                }
            }
        },
        policy: a.constraint,
        bn_mode: a.bn.map(BnMode::from),
        reduction: if a.per_sample {
            Reduction::PerSample
        } else {
            Reduction::Mean
        },
        max_iters: a.iters,
        tol: a.tol,
        patience: a.patience,
        restarts: a.restarts,
        seed: a.seed,
    };
    inversion.validate(&a.prior)?;
    let job = InvertJob {
        weights: a.weights,
        arch_g: read_text(&a.arch_g)?,
        images: a.images,
        count: a.count,
        offset: a.offset,
        prior: a.prior,
        inversion,
        out_dir: a.out_dir,
    };
    let s = run_invert(&job, |v| {
        if v.iteration % 100 == 0 {
            eprintln!("restart {} iter {:4}  loss {:.6}", v.restart, v.iteration, v.loss);
        }
    })?;
    println!("mean absolute pixel error {}", s.mean_mae);
    println!(
        "iterations {}  converged {}  restart {}  bn {:?}",
        s.iterations_used, s.converged, s.restart_index_chosen, s.bn_mode
    );
    println!("outputs in {}", job.out_dir.display());
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let job = GenerateJob {
        weights: a.weights,
        arch_g: read_text(&a.arch_g)?,
        count: a.count,
        prior: a.prior,
        seed: a.seed,
        bn_mode: a.bn.into(),
        out: a.out,
    };
    run_generate(&job)?;
    println!("wrote {}", job.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let arch = parse_arch_config(&read_text(&a.arch_g)?)?;
    let net = match &a.weights {
        Some(w) => ganinv_core::io::load_weights(w, &arch)?,
        None => seeded_network(&arch, a.seed)?,
    };
    let sampling = match a.param_samples {
        0 => ParamSampling::All,
        k => ParamSampling::PerTensor(k),
    };
    let r = gradient_audit(&net, a.batch, sampling, a.seed)?;
    println!(
        "input gradient: {} coordinates, max relative error {:e}",
        r.input_coords, r.input_max_rel_err
    );
    if let Some(p) = r.param_max_rel_err {
        println!(
            "parameter gradient: {} coordinates, max relative error {p:e}",
            r.param_coords
        );
    }
    if r.kink_skipped > 0 {
        println!(
            "{} coordinates skipped: perturbation crossed a relu kink",
            r.kink_skipped
        );
    }
    println!(
        "max relative error {:e} (tolerance {GRADCHECK_TOLERANCE:e})",
        r.max_rel_err()
    );
    if r.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            message: "gradient check failed".into(),
        })
    }
}

fn metrics(a: MetricsArgs) -> Result<(), Failure> {
    let m = run_metrics(&a.targets, &a.recon_dir)?;
    println!("images {} (offset {})", m.count, m.offset);
    println!("mean absolute pixel error {}", m.mean_mae);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(a) => train(a),
        Command::Invert(a) => invert(a),
        Command::Generate(a) => generate(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Metrics(a) => metrics(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
