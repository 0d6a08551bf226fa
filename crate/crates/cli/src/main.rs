#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::{Array1, ArrayView2};
use varcon::data::{load_dataset_csv, LabeledDataset};
use varcon::gradient::{run_grad_check_with, sample_grad_z, AnalyticRoutines, GradCheckConfig};
use varcon::objective::SampleTerms;
use varcon::run::{
    embed_dataset, evaluate_embeddings, export_embeddings, load_embeddings, prepare_data, run_training,
    Checkpoint, EvalMode, EvalParams, RunConfig,
};
use varcon::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFICATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Failure classified by exit code.
enum Failure {
    Config(String),
    Verification(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "varcon", version, about = "Train and evaluate variational supervised contrastive encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder and write metrics, checkpoint and summary.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare analytic gradients with finite differences on seeded probes.
    GradCheck(GradCheckArgs),
    /// Write a `label,z0,...` CSV of embeddings from a checkpoint.
    ExportEmbeddings(ExportArgs),
    /// Evaluate embeddings with KNN, Ward clustering or few-shot KNN.
    Eval(EvalArgs),
}

macro_rules! config_args {
    ($($field:ident),* $(,)?) => {
        /// Run configuration: an optional file plus one flag per key.
        #[derive(Args, Default)]
        struct ConfigArgs {
            /// `key = value` configuration file applied before the flags.
            #[arg(long = "config", value_name = "FILE")]
            config_file: Option<PathBuf>,
            $(
                #[arg(long, value_name = "VALUE")]
                $field: Option<String>,
            )*
        }

        impl ConfigArgs {
            fn overrides(&self) -> Vec<(&'static str, &str)> {
                let mut out = Vec::new();
                $(
                    if let Some(v) = &self.$field {
                        out.push((stringify!($field), v.as_str()));
                    }
                )*
                out
            }
        }
    };
}

config_args!(
    dataset,
    num_classes,
    per_class,
    input_dim,
    separation,
    cifar_dir,
    cifar_train_limit,
    cifar_val_limit,
    val_fraction,
    loss,
    tau1,
    epsilon_init,
    epsilon_min,
    epsilon_max,
    epsilon_lr_scale,
    leave_one_out,
    batch_size,
    epochs,
    warmup_epochs,
    base_lr,
    momentum,
    weight_decay,
    balanced_batches,
    hidden_dims,
    embed_dim,
    flip_prob,
    crop_padding,
    jitter_strength,
    seed,
    data_seed,
    aug_seed,
    knn_k,
    output_dir,
    record_wall_clock,
);

impl ConfigArgs {
    /// Defaults, then the file, then flags, then the output-directory
    /// environment override.
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut config = match &self.config_file {
            Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))?,
            None => RunConfig::default(),
        };
        for (key, value) in self.overrides() {
            config.set(key, value).map_err(|e| Failure::Config(e.to_string()))?;
        }
        config.apply_env_overrides();
        for warning in config.validate()? {
            eprintln!("warning: {warning}");
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Central-difference step.
    #[arg(long, default_value_t = varcon::gradient::DEFAULT_FD_STEP)]
    h: f64,
    #[arg(long, default_value_t = varcon::gradient::DEFAULT_GRAD_TOLERANCE)]
    tolerance: f64,
    /// Scale the analytic embedding gradient by 1.001 to exercise the detector.
    #[arg(long, hide = true)]
    corrupt_analytic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    All,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset CSV (`label,x0,...`); defaults to the configured dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Which part of the configured dataset to export.
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Knn,
    Cluster,
    Fewshot,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Reference embedding dump; used with `--queries`.
    #[arg(long, conflicts_with = "checkpoint")]
    refs: Option<PathBuf>,
    /// Query embedding dump; defaults to `--refs`.
    #[arg(long, requires = "refs")]
    queries: Option<PathBuf>,
    /// Embed the configured train (references) and validation (queries) sets.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Neighbors for KNN; defaults to `knn_k`.
    #[arg(long)]
    k: Option<usize>,
    /// Ward cut; defaults to the number of query classes.
    #[arg(long)]
    num_clusters: Option<usize>,
    /// Few-shot references per class.
    #[arg(long, default_value_t = 5)]
    shots: usize,
    #[arg(long, default_value_t = varcon::eval::DEFAULT_FEW_SHOT_REPEATS)]
    repeats: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config } => train(&config),
        Command::GradCheck(args) => grad_check(&args),
        Command::ExportEmbeddings(args) => export(&args),
        Command::Eval(args) => eval(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(EXIT_VERIFICATION)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn train(args: &ConfigArgs) -> Result<(), Failure> {
    let config = args.resolve()?;
    let outcome = run_training(&config)?;
    println!("{}", serde_json::to_string(&outcome.summary).map_err(|e| Failure::Runtime(e.to_string()))?);
    Ok(())
}

fn corrupted_grad_z(terms: &SampleTerms, centroids: ArrayView2<'_, f64>) -> Array1<f64> {
    sample_grad_z(terms, centroids) * 1.001
}

fn grad_check(args: &GradCheckArgs) -> Result<(), Failure> {
    if args.probes == 0 || !(args.h > 0.0) || !(args.tolerance > 0.0) {
        return Err(Failure::Config("probes, h and tolerance must be positive".into()));
    }
    let config = GradCheckConfig {
        probes: args.probes,
        seed: args.seed,
        step: args.h,
        tolerance: args.tolerance,
    };
    let mut routines = AnalyticRoutines::default();
    if args.corrupt_analytic {
        routines.grad_z = corrupted_grad_z;
    }
    let report = run_grad_check_with(&config, routines)?;
    println!("{}", serde_json::to_string(&report).map_err(|e| Failure::Runtime(e.to_string()))?);
    eprintln!(
        "probes {}: max rel error dz {:.3e}, deps {:.3e}; tangent residual {:.3e}; idempotence {:.3e}",
        report.z.num_probes,
        report.z.max_rel_error,
        report.epsilon.max_rel_error,
        report.max_tangent_residual,
        report.max_idempotence_error
    );
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check exceeded tolerance {:e} (worst probe seed {})",
            report.tolerance, report.z.worst_instance_seed
        )))
    }
}

fn configured_split(config: &RunConfig, split: Split) -> Result<LabeledDataset, Failure> {
    let (train, val) = prepare_data(config)?;
    Ok(match split {
        Split::Train => train,
        Split::Val => val,
        Split::All => train.concat(&val)?,
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(path)?)
}

fn export(args: &ExportArgs) -> Result<(), Failure> {
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let dataset = match &args.data {
        Some(path) => load_dataset_csv(path)?,
        None => configured_split(&args.config.resolve()?, args.split)?,
    };
    match &args.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            export_embeddings(&checkpoint, &dataset, BufWriter::new(file))?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            export_embeddings(&checkpoint, &dataset, &mut lock)?;
            lock.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<(), Failure> {
    let config = args.config.resolve()?;
    let (refs, queries) = match (&args.refs, &args.checkpoint) {
        (Some(refs_path), None) => {
            let refs = load_embeddings(refs_path)?;
            let queries = match &args.queries {
                Some(q) => load_embeddings(q)?,
                None => refs.clone(),
            };
            (refs, queries)
        }
        (None, Some(path)) => {
            let checkpoint = load_checkpoint(path)?;
            let (train, val) = prepare_data(&config)?;
            (
                embed_dataset(&checkpoint.encoder, &train)?,
                embed_dataset(&checkpoint.encoder, &val)?,
            )
        }
        _ => return Err(Failure::Config("eval needs either --refs or --checkpoint".into())),
    };
    let mode = match args.mode {
        Mode::Knn => EvalMode::Knn,
        Mode::Cluster => EvalMode::Cluster,
        Mode::Fewshot => EvalMode::FewShot,
    };
    let params = EvalParams {
        k: args.k.unwrap_or(config.knn_k),
        num_clusters: args.num_clusters,
        per_class: args.shots,
        repeats: args.repeats,
        seed: config.seed,
    };
    let report = evaluate_embeddings(mode, &refs, &queries, params)?;
    println!("{}", report.to_json()?);
    Ok(())
}
