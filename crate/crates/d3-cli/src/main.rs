//! `d3`: dictionary learning, patch denoising, stability metrics, parameter
//! sweeps and a small attack harness, all driven by one settings struct.
//! Values resolve as defaults < config file < flags; `--dump-settings`
//! prints the result of that resolution and exits.

use clap::{Args, Parser, Subcommand};

use std::env;
use std::path::PathBuf;

use d3_cli::commands;
use d3_cli::settings::RunConfig;
use d3_core::Result;

#[derive(Parser)]
#[command(name = "d3", version, about = "Patch-based image denoising defense toolkit")]
struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Base seed every derived RNG stream starts from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 sizes the pool automatically. The D3_THREADS
    /// environment variable sits between the config file and this flag.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print the fully resolved settings as TOML and exit.
    #[arg(long, global = true)]
    dump_settings: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a dictionary stack from a corpus directory.
    Learn(LearnArgs),
    /// Run the denoising transform over an image or a directory.
    Denoise(DenoiseArgs),
    /// Matching rate and reconstruction error of a dictionary.
    Metrics(MetricsArgs),
    /// Metrics along one axis (kappa, patch or epsilon); writes CSV and SVG.
    Sweep(SweepArgs),
    /// Train or load a toy classifier and measure attack accuracy with and
    /// without the defense.
    AttackEval(AttackEvalArgs),
    /// Print a dictionary's header and per-level atom-norm statistics.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct LearnArgs {
    /// Directory of training images.
    #[arg(long, value_name = "DIR")]
    corpus: Option<String>,
    /// Atoms per level.
    #[arg(long)]
    eta: Option<usize>,
    /// Number of levels (= maximum pursuit depth).
    #[arg(long)]
    kappa: Option<usize>,
    /// Patch side length in pixels.
    #[arg(long, alias = "patch-size")]
    patch: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Admission threshold on the relative one-atom residual, in (0, 1).
    #[arg(long, alias = "epsilon")]
    eps: Option<f64>,
    /// Candidate-draw budget per level; 0 means 200 * eta.
    #[arg(long)]
    max_attempts: Option<usize>,
    /// uniform, gradmag, or dir:PATH with precomputed maps.
    #[arg(long)]
    saliency: Option<String>,
    /// Output dictionary file.
    #[arg(long, value_name = "FILE")]
    out: Option<String>,
    /// Also write the JSON build report here.
    #[arg(long, value_name = "FILE")]
    report: Option<String>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long, value_name = "FILE")]
    dict: Option<String>,
    /// Image file or directory.
    #[arg(long, value_name = "PATH")]
    input: Option<String>,
    /// Output file (directory when the input is one).
    #[arg(long, value_name = "PATH")]
    output: Option<String>,
    /// Pursuit depth; 0 uses the dictionary's level count.
    #[arg(long)]
    sparsity: Option<usize>,
    /// Window step; 0 means max(1, patch/4).
    #[arg(long)]
    stride: Option<usize>,
    /// Randomized atom selection instead of plain argmax.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    randomize: Option<bool>,
    #[arg(long)]
    subsample_fraction: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, value_name = "FILE")]
    dict: Option<String>,
    /// Directory of clean images.
    #[arg(long, value_name = "DIR")]
    clean: Option<String>,
    /// Directory of perturbed partners paired by file stem; when absent,
    /// Gaussian noise at --noise-budget is generated instead.
    #[arg(long, value_name = "DIR")]
    noisy: Option<String>,
    #[arg(long)]
    noise_budget: Option<f64>,
    /// Patch-match tolerance of the matching rate.
    #[arg(long)]
    delta: Option<f64>,
    /// Cap on evaluated image pairs.
    #[arg(long)]
    sample: Option<usize>,
    /// Also report MR under randomized selection.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    randomized_mr: Option<bool>,
    #[arg(long)]
    sparsity: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, value_name = "FILE")]
    out_json: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// kappa, patch or epsilon.
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values, e.g. 1,2,3,4,5.
    #[arg(long)]
    values: Option<String>,
    #[arg(long, value_name = "DIR")]
    corpus: Option<String>,
    #[arg(long, alias = "patch-size")]
    patch: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    eta: Option<usize>,
    #[arg(long)]
    kappa: Option<usize>,
    #[arg(long, alias = "epsilon")]
    eps: Option<f64>,
    #[arg(long)]
    max_attempts: Option<usize>,
    #[arg(long)]
    saliency: Option<String>,
    #[arg(long)]
    noise_budget: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, value_name = "FILE")]
    csv: Option<String>,
    #[arg(long, value_name = "FILE")]
    svg: Option<String>,
}

#[derive(Args)]
struct AttackEvalArgs {
    #[arg(long, value_name = "FILE")]
    dict: Option<String>,
    /// Saved classifier; when absent one is trained on transformed data.
    #[arg(long, value_name = "FILE")]
    model: Option<String>,
    #[arg(long, value_name = "FILE")]
    save_model: Option<String>,
    /// synth, or cifar:DIR with CIFAR-10 format .bin batches.
    #[arg(long)]
    data: Option<String>,
    /// fgsm or deepfool.
    #[arg(long)]
    attack: Option<String>,
    /// black, grey or white.
    #[arg(long)]
    threat: Option<String>,
    /// Relative l2 perturbation budget.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    overshoot: Option<f64>,
    /// Randomized defense at evaluation time.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    randomize: Option<bool>,
    #[arg(long)]
    subsample_fraction: Option<f64>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    sparsity: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// linear or mlp:H.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Images per class of the synthetic task.
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long, value_name = "FILE")]
    out_json: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long, value_name = "FILE")]
    dict: Option<String>,
    /// JSON instead of the text listing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    json: Option<bool>,
}

macro_rules! overlay {
    ($dst:expr, $($field:ident <- $src:expr),+ $(,)?) => {
        $(if let Some(v) = $src.clone() { $dst.$field = v; })+
    };
}

fn apply_flags(cfg: &mut RunConfig, cmd: &Command) {
    match cmd {
        Command::Learn(a) => {
            let s = &mut cfg.learn;
            overlay!(*s,
                corpus <- a.corpus, eta <- a.eta, kappa <- a.kappa,
                patch_size <- a.patch, channels <- a.channels, epsilon <- a.eps,
                max_attempts <- a.max_attempts, saliency <- a.saliency,
                out <- a.out, report <- a.report,
            );
        }
        Command::Denoise(a) => {
            let s = &mut cfg.denoise;
            overlay!(*s,
                dict <- a.dict, input <- a.input, output <- a.output,
                sparsity <- a.sparsity, stride <- a.stride,
                randomize <- a.randomize,
                subsample_fraction <- a.subsample_fraction, top_k <- a.top_k,
            );
        }
        Command::Metrics(a) => {
            let s = &mut cfg.metrics;
            overlay!(*s,
                dict <- a.dict, clean <- a.clean, noisy <- a.noisy,
                noise_budget <- a.noise_budget, delta <- a.delta,
                sample <- a.sample, randomized_mr <- a.randomized_mr,
                sparsity <- a.sparsity, stride <- a.stride,
                out_json <- a.out_json,
            );
        }
        Command::Sweep(a) => {
            let s = &mut cfg.sweep;
            overlay!(*s,
                axis <- a.axis, values <- a.values, corpus <- a.corpus,
                patch_size <- a.patch, channels <- a.channels,
                eta <- a.eta, kappa <- a.kappa, epsilon <- a.eps,
                max_attempts <- a.max_attempts, saliency <- a.saliency,
                noise_budget <- a.noise_budget, delta <- a.delta,
                sample <- a.sample, csv <- a.csv, svg <- a.svg,
            );
        }
        Command::AttackEval(a) => {
            let s = &mut cfg.attack_eval;
            overlay!(*s,
                dict <- a.dict, model <- a.model, save_model <- a.save_model,
                data <- a.data, attack <- a.attack, threat <- a.threat,
                budget <- a.budget, max_iter <- a.max_iter,
                overshoot <- a.overshoot, randomize <- a.randomize,
                subsample_fraction <- a.subsample_fraction, top_k <- a.top_k,
                sparsity <- a.sparsity, stride <- a.stride, arch <- a.arch,
                epochs <- a.epochs, lr <- a.lr, n_per_class <- a.n_per_class,
                train_fraction <- a.train_fraction, out_json <- a.out_json,
            );
        }
        Command::Inspect(a) => {
            let s = &mut cfg.inspect;
            overlay!(*s, dict <- a.dict, json <- a.json);
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(text) = env::var("D3_THREADS") {
        cfg.global.threads = text.parse().map_err(|e| {
            d3_core::D3Error::Format(format!("D3_THREADS '{text}': {e}"))
        })?;
    }
    if let Some(t) = cli.threads {
        cfg.global.threads = t;
    }
    if let Some(s) = cli.seed {
        cfg.global.seed = s;
    }
    if let Some(cmd) = &cli.command {
        apply_flags(&mut cfg, cmd);
    }
    cfg.resolve();

    if cfg.global.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.global.threads)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }

    if cli.dump_settings {
        print!("{}", cfg.dump());
        return Ok(0);
    }
    let Some(cmd) = &cli.command else {
        use clap::CommandFactory;
        Cli::command().print_help().ok();
        return Ok(2);
    };
    match cmd {
        Command::Learn(_) => commands::learn(&cfg)?,
        Command::Denoise(_) => commands::denoise(&cfg)?,
        Command::Metrics(_) => commands::run_metrics(&cfg)?,
        Command::Sweep(_) => commands::sweep(&cfg)?,
        Command::AttackEval(_) => commands::attack_eval(&cfg)?,
        Command::Inspect(_) => commands::inspect(&cfg)?,
    }
    Ok(0)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
