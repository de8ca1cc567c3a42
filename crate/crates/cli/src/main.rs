use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reactnet::arch::{build_network, build_network_for, Network, Scale, Variant};
use reactnet::gradcheck::run_grad_check;
use reactnet::inspect::{activation_histograms, coefficient_summaries, histograms_csv, summaries_text};
use reactnet::opscount::{count_ops, OpTally, BOPS_PER_OP};
use reactnet::train::{
    evaluate, load, make_batch, metrics_csv, restore_network, restore_normalization,
    train_teacher, train_two_step, Checkpoint, DatasetKind, Normalization, Split, TaskData, TrainConfig,
};
use reactnet::FloatTensor;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const CHECKPOINT_FILE: &str = "checkpoint.rakt";
const METRICS_FILE: &str = "metrics.csv";
const TEACHER_FILE: &str = "teacher.rakt";
const TEACHER_METRICS_FILE: &str = "teacher_metrics.csv";

#[derive(Parser)]
#[command(name = "reactnet", version, about = "Train, evaluate and analyze 1-bit ReActNet models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a binary network with the two-step schedule, or its real-valued teacher.
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint.
    Eval(EvalArgs),
    /// BOPs / FLOPs / OPs of a variant.
    CountOps(CountOpsArgs),
    /// Finite-difference check of every gradient.
    GradCheck(GradCheckArgs),
    /// Activation coefficient summaries and sign-input histograms.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    /// mnist or cifar10
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding the dataset files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Optimizer steps per training step.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// distributional or ce
    #[arg(long)]
    loss: Option<String>,
    /// Teacher checkpoint for the distributional loss. Without it a teacher
    /// is trained first and saved next to the student.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Train the real-valued teacher instead of the binary network.
    #[arg(long)]
    teacher_only: bool,
    /// Extra key=value settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    settings: Vec<String>,
    /// Output directory for the checkpoint and metrics CSV.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long)]
    data_dir: PathBuf,
    /// test or train
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluate only the first N examples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct CountOpsArgs {
    #[arg(long, default_value = "reactnet-a")]
    variant: String,
    /// Square input side. Defaults to 224 at imagenet scale and 32 at desk scale.
    #[arg(long)]
    input_size: Option<usize>,
    /// imagenet or desk
    #[arg(long, default_value = "imagenet")]
    scale: String,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long)]
    classes: Option<usize>,
    /// Print one line per layer before the totals.
    #[arg(long)]
    per_layer: bool,
    /// Also run one instrumented 1-bit forward pass and print its counts.
    #[arg(long)]
    measure: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Histogram CSV destination; printed to stdout when absent.
    #[arg(long)]
    histograms: Option<PathBuf>,
    /// Take histogram inputs from this dataset's test split instead of
    /// seeded uniform noise.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value = "mnist")]
    dataset: String,
    #[arg(long, default_value_t = 16)]
    samples: usize,
    #[arg(long, default_value_t = 60)]
    bins: usize,
    /// Histogram range is -R..R.
    #[arg(long, default_value_t = 3.0)]
    range: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<reactnet::Error> for Failure {
    fn from(e: reactnet::Error) -> Self {
        match e {
            reactnet::Error::Config(_) | reactnet::Error::UnknownVariant(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CountOps(a) => cmd_count_ops(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
            TrainConfig::parse(&text)?
        }
        None => TrainConfig::default(),
    };
    let mut set = |k: &str, v: Option<String>| -> CliResult<()> {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
        Ok(())
    };
    set("variant", a.variant.clone())?;
    set("dataset", a.dataset.clone())?;
    set("data_dir", a.data_dir.as_ref().map(|p| p.display().to_string()))?;
    set("steps", a.steps.map(|v| v.to_string()))?;
    set("seed", a.seed.map(|v| v.to_string()))?;
    set("batch_size", a.batch_size.map(|v| v.to_string()))?;
    set("initial_lr", a.lr.map(|v| v.to_string()))?;
    set("loss", a.loss.clone())?;
    set("teacher", a.teacher.as_ref().map(|p| p.display().to_string()))?;
    for kv in &a.settings {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_run(dir: &Path, ckpt: &Checkpoint, csv: &str, ckpt_name: &str, csv_name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(ckpt_name);
    ckpt.save(&path)?;
    fs::write(dir.join(csv_name), csv)?;
    Ok(path)
}

fn cmd_train(a: TrainArgs) -> CliResult<ExitCode> {
    let cfg = train_config(&a)?;
    let dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Failure::Usage("no dataset path: pass --data-dir or set data_dir in the config".into()))?;
    require_dir(&dir)?;
    let data = TaskData::new(load(cfg.dataset, &dir, Split::Train)?, load(cfg.dataset, &dir, Split::Test)?)?;
    let data = data.limited(&cfg);
    if a.teacher_only {
        let out = train_teacher(&cfg, &data)?;
        let path = write_run(&a.out, &out.checkpoint, &metrics_csv(&out.metrics), CHECKPOINT_FILE, METRICS_FILE)?;
        println!("teacher accuracy={:.6} checkpoint={}", out.final_accuracy, path.display());
        return Ok(ExitCode::SUCCESS);
    }
    let teacher = match (&cfg.teacher, cfg.loss) {
        (Some(p), _) => Some(restore_network(&Checkpoint::load(p)?)?),
        (None, reactnet::loss::LossKind::Distributional) => {
            let out = train_teacher(&cfg, &data)?;
            let path = write_run(&a.out, &out.checkpoint, &metrics_csv(&out.metrics), TEACHER_FILE, TEACHER_METRICS_FILE)?;
            println!("teacher accuracy={:.6} checkpoint={}", out.final_accuracy, path.display());
            Some(out.network)
        }
        (None, _) => None,
    };
    let out = train_two_step(&cfg, teacher.as_ref(), &data)?;
    let path = write_run(&a.out, &out.checkpoint, &metrics_csv(&out.metrics), CHECKPOINT_FILE, METRICS_FILE)?;
    println!("accuracy={:.6} checkpoint={}", out.final_accuracy, path.display());
    Ok(ExitCode::SUCCESS)
}

fn require_dir(dir: &Path) -> CliResult<()> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("dataset directory {} does not exist", dir.display())))
    }
}

fn load_checkpoint(path: &Path) -> CliResult<(Network, Option<Normalization>)> {
    let c = Checkpoint::load(path)?;
    let net = restore_network(&c)?;
    Ok((net, restore_normalization(&c).ok()))
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "test" => Ok(Split::Test),
        "train" => Ok(Split::Train),
        other => Err(Failure::Usage(format!("unknown split `{other}` (test, train)"))),
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult<ExitCode> {
    let kind = DatasetKind::parse(&a.dataset)?;
    let split = parse_split(&a.split)?;
    require_dir(&a.data_dir)?;
    let (net, norm) = load_checkpoint(&a.checkpoint)?;
    let mut data = load(kind, &a.data_dir, split)?;
    if let Some(n) = a.limit {
        data = data.truncated(n);
    }
    let norm = norm.unwrap_or_else(|| Normalization::fit(&data));
    println!("accuracy={:.6}", evaluate(&net, &data, &norm)?);
    Ok(ExitCode::SUCCESS)
}

fn cmd_count_ops(a: CountOpsArgs) -> CliResult<ExitCode> {
    let variant = Variant::parse(&a.variant)?;
    let scale = Scale::parse(&a.scale).map_err(|e| Failure::Usage(e.to_string()))?;
    let spec = match (a.input_size, a.classes) {
        (None, None) if a.channels == 3 => build_network(variant, scale),
        _ => {
            let base = build_network(variant, scale);
            let size = a.input_size.unwrap_or(base.input_shape[1]);
            build_network_for(variant, scale, [a.channels, size, size], a.classes.unwrap_or(base.num_classes))
        }
    };
    spec.validate()?;
    let report = count_ops(&spec)?;
    if a.per_layer {
        print!("{}", report.to_text());
    }
    println!("{}", report.totals_line());
    if a.measure {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        let mut net = Network::new(&spec, &mut rng)?;
        if net.is_binary() {
            net.set_binary_weights(true);
        }
        let [c, h, w] = spec.input_shape;
        let x = FloatTensor::from_fn(&[1, c, h, w], |_| rng.gen_range(-1.0..1.0));
        let tally = OpTally::new();
        net.forward_counted(&x, Some(&tally))?;
        let ops = tally.binary() as f64 / BOPS_PER_OP as f64 + tally.real() as f64;
        println!("MEASURED BOPS={} FLOPS={} OPS={ops:.6e}", tally.binary(), tally.real());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(a: GradCheckArgs) -> CliResult<ExitCode> {
    let report = run_grad_check(a.seed)?;
    print!("{}", report.to_text());
    if report.passed() {
        println!("grad-check: all within tolerance");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("grad-check: FAILED");
        Ok(ExitCode::from(1))
    }
}

fn cmd_inspect(a: InspectArgs) -> CliResult<ExitCode> {
    if a.samples == 0 {
        return Err(Failure::Usage("--samples must be positive".into()));
    }
    let (net, norm) = load_checkpoint(&a.checkpoint)?;
    print!("{}", summaries_text(&coefficient_summaries(&net)));
    let [c, h, w] = net.spec().input_shape;
    let x = match &a.data_dir {
        Some(dir) => {
            require_dir(dir)?;
            let data = load(DatasetKind::parse(&a.dataset)?, dir, Split::Test)?;
            let norm = norm.unwrap_or_else(|| Normalization::fit(&data));
            let idx: Vec<usize> = (0..a.samples.min(data.len())).collect();
            make_batch(&data, &idx, &norm, None).0
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            FloatTensor::from_fn(&[a.samples, c, h, w], |_| rng.gen_range(-2.0..2.0))
        }
    };
    let hists = activation_histograms(&net, &x, -a.range, a.range, a.bins)?;
    let csv = histograms_csv(&hists);
    match &a.histograms {
        Some(p) => {
            fs::write(p, csv)?;
            println!("histograms={}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}
