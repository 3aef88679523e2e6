//! `nael` command-line interface: dataset generation, staged training,
//! evaluation, single-record inference, gradient-map export, and the static
//! FLOPs report.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use nael::cli::{
    checkpoint_path, env_seed, exit_code, hex, load_model, parse_freq, read_iq_f32,
    require_checkpoint, Stage,
};
use nael::dataset::{generate_dataset, Dataset, DatasetSpec};
use nael::error::{NaelError, Result};
use nael::eval::{
    evaluate, scenario_suite, scenario_summary_csv, DEFAULT_SCENARIO_PER_CLASS,
    DEFAULT_SCENARIO_SNRS,
};
use nael::model::{
    arn_marginal_flops, base_flops, gradient_map_csv, write_gradient_map_pgm, NaelModel,
    NetworkConfig,
};
use nael::nn::flops::FlopsReport;
use nael::tfa::{cwd, normalize_tfi, Tfi};
use nael::training::{label_nan_dataset, train_arn, train_nan, train_prn, TrainConfig};
use nael::waveform::{center_shift, ModulationScheme};

#[derive(Parser)]
#[command(name = "nael", version, about = "Noise-aware ensemble learning for LPI radar modulation recognition")]
struct Cli {
    /// Cap the worker-thread count (outputs are identical at any setting).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset artifacts.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train one network stage (nan and arn require a trained prn).
    Train(TrainArgs),
    /// Evaluate on a stored dataset or on fresh fixed-SNR scenarios.
    Eval(EvalArgs),
    /// Classify a single stored record or raw IQ capture.
    Infer(InferArgs),
    /// Export the gradient map of one record as CSV and portable graymap.
    Explain(ExplainArgs),
    /// Print the static per-network FLOPs breakdown.
    Flops,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Generate a simulated dataset.
    Gen(GenArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Records per modulation scheme.
    #[arg(long, default_value_t = 500)]
    per_class: usize,
    /// Master seed (default: NAEL_SEED env var, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 10e6)]
    fs: f64,
    /// Samples per signal.
    #[arg(long, default_value_t = 1024)]
    signal_len: usize,
    /// Lower SNR bound, dB.
    #[arg(long, default_value_t = -15.0, allow_hyphen_values = true)]
    snr_min: f64,
    /// Upper SNR bound, dB (equal bounds pin the SNR).
    #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
    snr_max: f64,
    /// Output dataset file.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Network {
    Prn,
    Nan,
    Arn,
}

#[derive(Args)]
struct TrainArgs {
    /// Stage to train.
    network: Network,
    /// Training dataset file.
    #[arg(long)]
    dataset: PathBuf,
    /// Directory holding stage checkpoints and history CSVs.
    #[arg(long, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for init and shuffles (default: NAEL_SEED env var, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Stored dataset to evaluate; omit to run the fixed-SNR scenario suite.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    /// Directory for the emitted CSVs.
    #[arg(long, default_value = "eval-out")]
    out_dir: PathBuf,
    /// Scenario SNRs in dB (comma separated); default -4,-15,-17.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snr: Vec<f64>,
    /// Records per class in each generated scenario set.
    #[arg(long, default_value_t = DEFAULT_SCENARIO_PER_CLASS)]
    per_class: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 10e6)]
    fs: f64,
    #[arg(long, default_value_t = 1024)]
    signal_len: usize,
    /// Routing policy: adaptive NAN gating (auto), PRN only (prn), or
    /// ARN on every record (arn).
    #[arg(long, default_value = "auto")]
    route: Route,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Route {
    Auto,
    Prn,
    Arn,
}

#[derive(Args)]
struct InferArgs {
    /// Stored dataset to draw the record from.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Record index within the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Raw capture: interleaved little-endian f32 I/Q pairs.
    #[arg(long)]
    iq: Option<PathBuf>,
    /// Sampling rate of the raw capture, Hz (required with --iq).
    #[arg(long)]
    fs: Option<f64>,
    /// Frequency shift applied to the raw capture before the transform;
    /// accepts hertz or fs-relative notation such as "fs/8".
    #[arg(long, allow_hyphen_values = true)]
    shift: Option<String>,
    #[arg(long, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Class whose gradient map to export; default: the predicted class.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value = "checkpoints")]
    checkpoint_dir: PathBuf,
    /// Output prefix; writes <prefix>.csv and <prefix>.pgm.
    #[arg(short, long)]
    output: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Dataset { command: DatasetCommand::Gen(args) } => cmd_dataset_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Flops => cmd_flops(),
    }
}

fn seed_or_env(flag: Option<u64>) -> Result<u64> {
    match flag {
        Some(s) => Ok(s),
        None => env_seed(),
    }
}

fn cmd_dataset_gen(args: GenArgs) -> Result<()> {
    let spec = DatasetSpec {
        per_class: args.per_class,
        fs: args.fs,
        signal_len: args.signal_len,
        snr_range: (args.snr_min, args.snr_max),
        master_seed: seed_or_env(args.seed)?,
        ..DatasetSpec::default()
    };
    spec.validate()?;
    let dataset = generate_dataset(&spec)?;
    dataset.save(&args.output)?;
    let digest = Sha256::digest(std::fs::read(&args.output)?);
    println!(
        "wrote {} records to {} (sha256 {})",
        dataset.records.len(),
        args.output.display(),
        hex(&digest)
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let seed = seed_or_env(args.seed)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        batch_size: args.batch_size.unwrap_or(defaults.batch_size),
        lr: args.lr.unwrap_or(defaults.lr),
        seed,
    };
    let dataset = Dataset::load(&args.dataset)?;
    std::fs::create_dir_all(&args.checkpoint_dir)?;
    let net_config = NetworkConfig::default();
    let mut model = NaelModel::new(&net_config, seed)?;

    let (stage, history) = match args.network {
        Network::Prn => {
            let history = train_prn(&mut model.prn, &dataset, &cfg)?;
            model.prn.to_checkpoint().save(&checkpoint_path(&args.checkpoint_dir, Stage::Prn))?;
            (Stage::Prn, history)
        }
        Network::Nan => {
            let ck = require_checkpoint(&args.checkpoint_dir, Stage::Prn)?;
            model.prn.load_checkpoint(&ck)?;
            let maps = label_nan_dataset(&mut model.prn, &dataset)?;
            let history = train_nan(&mut model.nan, &maps, &cfg)?;
            model.nan.to_checkpoint().save(&checkpoint_path(&args.checkpoint_dir, Stage::Nan))?;
            (Stage::Nan, history)
        }
        Network::Arn => {
            let ck = require_checkpoint(&args.checkpoint_dir, Stage::Prn)?;
            model.prn.load_checkpoint(&ck)?;
            let history = train_arn(&mut model.arn, &mut model.prn, &dataset, &cfg)?;
            model.arn.to_checkpoint().save(&checkpoint_path(&args.checkpoint_dir, Stage::Arn))?;
            (Stage::Arn, history)
        }
    };

    let csv_path = args.checkpoint_dir.join(format!("history_{}.csv", stage.name()));
    std::fs::write(&csv_path, history.to_csv("train"))?;
    println!(
        "trained {} for {} epochs: loss {:.6}, accuracy {:.4} ({} and {} written)",
        stage.name(),
        cfg.epochs,
        history.final_loss(),
        history.final_accuracy(),
        checkpoint_path(&args.checkpoint_dir, stage).display(),
        csv_path.display()
    );
    Ok(())
}

fn load_full_model(dir: &std::path::Path) -> Result<NaelModel> {
    load_model(&NetworkConfig::default(), 0, dir, &[Stage::Prn, Stage::Nan, Stage::Arn])
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    // forced routes only touch the networks they exercise
    let stages: &[Stage] = match args.route {
        Route::Auto => &[Stage::Prn, Stage::Nan, Stage::Arn],
        Route::Prn => &[Stage::Prn],
        Route::Arn => &[Stage::Prn, Stage::Arn],
    };
    let mut model = load_model(&NetworkConfig::default(), 0, &args.checkpoint_dir, stages)?;
    model.nan_override = match args.route {
        Route::Auto => None,
        Route::Prn => Some(nael::model::NanOverride::AlwaysReliable),
        Route::Arn => Some(nael::model::NanOverride::AlwaysUnreliable),
    };
    std::fs::create_dir_all(&args.out_dir)?;
    match args.dataset {
        Some(path) => {
            let dataset = Dataset::load(&path)?;
            let (report, confusion) = evaluate(&mut model, &dataset)?;
            std::fs::write(args.out_dir.join("report.csv"), report.to_csv())?;
            std::fs::write(args.out_dir.join("confusion.csv"), confusion.to_csv())?;
            println!(
                "pcc {:.2}% | mean {:.3} MFLOPs | arn rate {:.4} ({}/{}) | {:.1}s",
                report.pcc,
                report.mean_mflops,
                report.arn_rate,
                report.arn_activations,
                report.total,
                report.runtime_seconds
            );
        }
        None => {
            let snrs =
                if args.snr.is_empty() { DEFAULT_SCENARIO_SNRS.to_vec() } else { args.snr };
            let template = DatasetSpec {
                fs: args.fs,
                signal_len: args.signal_len,
                ..DatasetSpec::default()
            };
            let seed = seed_or_env(args.seed)?;
            let scenarios =
                scenario_suite(&mut model, &template, &snrs, args.per_class, seed)?;
            std::fs::write(
                args.out_dir.join("scenario_summary.csv"),
                scenario_summary_csv(&scenarios),
            )?;
            for s in &scenarios {
                let tag = format!("{}", s.snr_db).replace('-', "m").replace('.', "p");
                std::fs::write(
                    args.out_dir.join(format!("report_{tag}.csv")),
                    s.report.to_csv(),
                )?;
                std::fs::write(
                    args.out_dir.join(format!("confusion_{tag}.csv")),
                    s.confusion.to_csv(),
                )?;
                println!(
                    "{:>7} dB | pcc {:.2}% | mean {:.3} MFLOPs | arn rate {:.4}",
                    s.snr_db, s.report.pcc, s.report.mean_mflops, s.report.arn_rate
                );
            }
        }
    }
    Ok(())
}

fn infer_tfi(args: &InferArgs) -> Result<Tfi> {
    match (&args.dataset, &args.iq) {
        (Some(path), None) => {
            let dataset = Dataset::load(path)?;
            let record = dataset.records.get(args.index).ok_or_else(|| {
                NaelError::Parameter(format!(
                    "index {} out of range for {} records",
                    args.index,
                    dataset.records.len()
                ))
            })?;
            Ok(record.tfi.clone())
        }
        (None, Some(path)) => {
            let fs = args.fs.ok_or_else(|| {
                NaelError::Parameter("--fs is required with --iq".into())
            })?;
            if !(fs > 0.0) {
                return Err(NaelError::Parameter("fs must be positive".into()));
            }
            let mut signal = read_iq_f32(path, fs)?;
            if let Some(shift) = &args.shift {
                let f = parse_freq(shift, fs)?;
                signal = center_shift(&signal, f);
            }
            normalize_tfi(&cwd(&signal, &Default::default())?)
        }
        _ => Err(NaelError::Parameter(
            "provide exactly one input: --dataset with --index, or --iq".into(),
        )),
    }
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let tfi = infer_tfi(&args)?;
    let mut model = load_full_model(&args.checkpoint_dir)?;
    let decision = model.nael_infer(&tfi)?;
    let name = ModulationScheme::from_class_index(decision.predicted_class)
        .map(|s| s.name())
        .unwrap_or("unknown");
    let verdict = if decision.used_arn { "unreliable" } else { "reliable" };
    println!(
        "class {name} | nan verdict {verdict} (p_rel {:.4}, p_unrel {:.4}) | {} flops",
        decision.nan_probs.0, decision.nan_probs.1, decision.flops_spent
    );
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    let dataset = Dataset::load(&args.dataset)?;
    let record = dataset.records.get(args.index).ok_or_else(|| {
        NaelError::Parameter(format!(
            "index {} out of range for {} records",
            args.index,
            dataset.records.len()
        ))
    })?;
    let mut model =
        load_model(&NetworkConfig::default(), 0, &args.checkpoint_dir, &[Stage::Prn])?;
    let fwd = model.prn_forward(&record.tfi)?;
    let class = args.class.unwrap_or_else(|| nael::model::argmax(&fwd.probs));
    if class >= model.config.num_classes {
        return Err(NaelError::Parameter(format!(
            "class {} out of range (0..{})",
            class, model.config.num_classes
        )));
    }
    let map = model.gradient_map_for(class)?;
    let csv_path = args.output.with_extension("csv");
    let pgm_path = args.output.with_extension("pgm");
    std::fs::write(&csv_path, gradient_map_csv(&map))?;
    let mut pgm = std::fs::File::create(&pgm_path)?;
    write_gradient_map_pgm(&map, &mut pgm)?;
    let name = ModulationScheme::from_class_index(class).map(|s| s.name()).unwrap_or("unknown");
    println!(
        "gradient map for class {name}: f_max row {} -> {} and {}",
        map.f_max,
        csv_path.display(),
        pgm_path.display()
    );
    Ok(())
}

fn print_report(title: &str, report: &FlopsReport) {
    println!("{title}:");
    for (name, count) in &report.entries {
        println!("  {name:<28} {count:>12}");
    }
    println!("  {:<28} {:>12} ({:.3} MFLOPs)", "total", report.total(), report.total_mflops());
}

fn cmd_flops() -> Result<()> {
    let config = NetworkConfig::default();
    config.validate()?;
    let base = base_flops(&config);
    let marginal = arn_marginal_flops(&config);
    print_report("base path (PRN + gradient map + NAN)", &base);
    print_report("ARN marginal path", &marginal);
    println!(
        "always-ARN total: {} ({:.3} MFLOPs)",
        base.total() + marginal.total(),
        (base.total() + marginal.total()) as f64 / 1e6
    );
    Ok(())
}
