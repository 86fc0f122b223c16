use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use grassflow::bench::{scaling_report, BenchConfig, Mechanism};
use grassflow::checks::{causality_suite, geometry_suite, gradient_suite, SuiteReport};
use grassflow::model::{generate, param_count, LanguageModel, ModelConfig, PRESETS};
use grassflow::trainer::{
    decode, encode, evaluate, load_checkpoint, load_corpus, save_checkpoint, train, AdamConfig, TrainConfig,
    LOG_HEADER,
};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK: u8 = 3;

/// Attention-free Grassmann language models and a causal attention baseline.
#[derive(Debug, Parser)]
#[command(name = "grassflow", version)]
struct Cli {
    /// Seed for every random choice: initialization, batching, dropout,
    /// sampling and benchmark inputs.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a byte-level model on a text file.
    Train(TrainArgs),
    /// Report validation perplexity of a checkpoint.
    Eval(EvalArgs),
    /// Continue a prompt with a trained model.
    Generate(GenerateArgs),
    /// Time both mixing kernels across sequence lengths.
    Bench(BenchArgs),
    /// Run the geometry, gradient and causality suites (all when no flag is given).
    Check(CheckArgs),
    /// Print the parameter count breakdown of a configuration.
    Params(ModelSource),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ModelSource {
    /// Named configuration.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
    preset: Option<String>,
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ModelSource {
    fn load(&self) -> grassflow::Result<ModelConfig> {
        let config = match (&self.preset, &self.config) {
            (Some(name), _) => ModelConfig::preset(name)?,
            (None, Some(path)) => ModelConfig::from_text(&std::fs::read_to_string(path)?)?,
            (None, None) => unreachable!("clap requires one source"),
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// UTF-8 text corpus, read as bytes.
    #[arg(long)]
    data: PathBuf,
    /// Fraction of the corpus used for training; the rest is validation.
    #[arg(long, default_value_t = 0.9)]
    split: f64,
    /// Tokens per sequence; defaults to the model's max_len.
    #[arg(long)]
    block_size: Option<usize>,
    /// Sequences per batch.
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelSource,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for best.grfl, final.grfl, train.log and config.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    /// Additional validation every N optimizer steps (0: only at epoch ends).
    #[arg(long, default_value_t = 0)]
    eval_interval: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 200)]
    max_new: usize,
    /// 0 picks the most likely byte at every step.
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Comma-separated, strictly increasing sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    lengths: Vec<usize>,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    r: usize,
    /// Comma-separated pair offsets.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,12,16")]
    offsets: Vec<usize>,
    /// Timed runs per grid point (at least 5).
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Finite-difference gradient suite.
    #[arg(long)]
    gradcheck: bool,
    /// Plücker geometry suite.
    #[arg(long)]
    geometry: bool,
    /// Causal masking suite.
    #[arg(long)]
    causality: bool,
    /// Random draws per geometry property.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Randomized gradient-check instances.
    #[arg(long, default_value_t = 104)]
    instances: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: Cli) -> grassflow::Result<ExitCode> {
    let seed = cli.seed;
    match cli.command {
        Command::Train(args) => run_train(args, seed),
        Command::Eval(args) => run_eval(args),
        Command::Generate(args) => run_generate(args, seed),
        Command::Bench(args) => run_bench(args, seed),
        Command::Check(args) => run_check(args, seed),
        Command::Params(source) => {
            let config = source.load()?;
            println!("{}", param_count(&config));
            println!("tie_lm_head = {}", config.tie_lm_head);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_train(args: TrainArgs, seed: u64) -> grassflow::Result<ExitCode> {
    let config = args.model.load()?;
    let block_size = args.data.block_size.unwrap_or(config.max_len);
    let corpus = load_corpus(&args.data.data, args.data.split, block_size)?;
    let tc = TrainConfig {
        block_size,
        batch_size: args.data.batch_size,
        epochs: args.epochs,
        optimizer: AdamConfig {
            lr: args.lr,
            clip: (args.clip > 0.0).then_some(args.clip),
            ..AdamConfig::default()
        },
        seed,
        eval_interval: args.eval_interval,
    };
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.txt"), config.to_text())?;
    let mut model = LanguageModel::<f32>::init(config, seed)?;
    eprintln!(
        "{} model, {} parameters, {} training / {} validation bytes",
        model.config.block_kind,
        model.num_params(),
        corpus.train().len(),
        corpus.valid().len()
    );

    let log_path = args.out.join("train.log");
    let mut lines = format!("{LOG_HEADER}\n");
    std::fs::write(&log_path, &lines)?;
    println!("{LOG_HEADER}");
    let mut write_error = None;
    let log = train(&mut model, &corpus, &tc, Some(&args.out.join("best.grfl")), &mut |entry| {
        println!("{entry}");
        lines.push_str(&format!("{entry}\n"));
        if let Err(e) = std::fs::write(&log_path, &lines) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e.into());
    }
    save_checkpoint(&model, args.out.join("final.grfl"))?;
    eprintln!(
        "initial val_ppl {:.4}, best val_ppl {:.4} after {} of {} steps",
        log.initial_val_ppl, log.best_val_ppl, log.best_step, log.steps
    );
    Ok(ExitCode::SUCCESS)
}

fn run_eval(args: EvalArgs) -> grassflow::Result<ExitCode> {
    let model = load_checkpoint(&args.ckpt)?;
    let block_size = args.data.block_size.unwrap_or(model.config.max_len);
    let corpus = load_corpus(&args.data.data, args.data.split, block_size)?;
    let ppl = evaluate(&model, corpus.valid(), block_size, args.data.batch_size)?;
    println!("val_ppl,{ppl}");
    Ok(ExitCode::SUCCESS)
}

fn run_generate(args: GenerateArgs, seed: u64) -> grassflow::Result<ExitCode> {
    let model = load_checkpoint(&args.ckpt)?;
    let prompt = encode(&args.prompt);
    let out = generate(&model, &prompt, args.max_new, args.temperature, seed)?;
    println!("{}", decode(&out)?);
    Ok(ExitCode::SUCCESS)
}

fn run_bench(args: BenchArgs, seed: u64) -> grassflow::Result<ExitCode> {
    let cfg = BenchConfig {
        d: args.d,
        r: args.r,
        offsets: args.offsets,
        repeats: args.repeats,
        seed,
        ..BenchConfig::default()
    };
    let report = scaling_report(&args.lengths, &Mechanism::ALL, &cfg)?;
    let csv = report.to_csv();
    write_file(&args.out, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn run_check(args: CheckArgs, seed: u64) -> grassflow::Result<ExitCode> {
    let all = !(args.gradcheck || args.geometry || args.causality);
    let mut reports: Vec<SuiteReport> = Vec::new();
    if all || args.geometry {
        reports.push(geometry_suite(args.trials, seed)?);
    }
    if all || args.gradcheck {
        reports.push(gradient_suite(args.instances, seed)?);
    }
    if all || args.causality {
        reports.push(causality_suite(seed)?);
    }
    for r in &reports {
        print!("{r}");
    }
    Ok(if reports.iter().all(SuiteReport::passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_CHECK)
    })
}

fn write_file(path: &Path, contents: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)
}
