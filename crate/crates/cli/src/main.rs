mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use config::RunArgs;
use qcnn::data::{load_idx, load_mnist, split_paths, Dataset, Split};
use qcnn::harness::{evaluate, train, MetricsLog, RunMode, RunSummary};
use qcnn::net::{Checkpoint, Network, Normalization};
use qcnn::rng::{substream, StreamKey};
use qcnn::runtime::{average_reports, layer_report, CostReport};
use qcnn::sampling_tree::SamplingTree;
use qcnn::tensor::Tensor3;
use qcnn::tomography::{sample_count, tomography_with_threshold, DEFAULT_SIGN_THRESHOLD};
use qcnn::{QcnnError, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "qcnn",
    version,
    about = "Emulated quantum convolutional network: training, evaluation and benchmarks"
)]
struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on MNIST and write metrics and a model file
    Train(RunCmd),
    /// Evaluate a saved model on the MNIST test split
    Eval(RunCmd),
    /// Tomography trials on random unit vectors, one CSV row per trial
    TomoBench(TomoArgs),
    /// Sampling-tree distribution and consistency check
    TreeBench(TreeArgs),
    /// Cost model report for each convolution layer of a saved model
    Estimate(EstimateCmd),
}

#[derive(Args)]
struct RunCmd {
    /// TOML file with run settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct TomoArgs {
    #[arg(long, default_value_t = 100)]
    dim: usize,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sign decision threshold
    #[arg(long, default_value_t = DEFAULT_SIGN_THRESHOLD)]
    threshold: f64,
    /// CSV destination (stdout if absent)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TreeArgs {
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 10_000)]
    updates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Args)]
struct EstimateCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunArgs,
    /// Test images the statistics are averaged over
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = qcnn::runtime::DEFAULT_P_GRID)]
    p_grid: usize,
    #[arg(long, value_enum, default_value = "json")]
    format: ReportFormat,
}

fn exit_code(e: &QcnnError) -> u8 {
    match e {
        QcnnError::Io(_)
        | QcnnError::Parse { .. }
        | QcnnError::Checkpoint(_)
        | QcnnError::Json(_)
        | QcnnError::Csv(_)
        | QcnnError::DimensionMismatch(_) => EXIT_DATA,
        QcnnError::Numeric(_) | QcnnError::EmptyDistribution => EXIT_NUMERIC,
        QcnnError::InvalidParameter(_) | QcnnError::IndexOutOfRange { .. } => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::TomoBench(a) => cmd_tomo(a),
        Command::TreeBench(a) => cmd_tree(a),
        Command::Estimate(c) => cmd_estimate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn limit(ds: Dataset, n: Option<usize>) -> Dataset {
    match n {
        Some(n) => ds.truncate(n),
        None => ds,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| QcnnError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn cmd_train(c: RunCmd) -> Result<()> {
    let args = RunArgs::resolve(c.run, c.config.as_deref())?;
    let mode = match args.mode {
        Some(config::ModeArg::Classical) => RunMode::ClassicalTrain,
        _ => RunMode::QuantumTrain,
    };
    let mut cfg = args.run_config(mode)?;
    cfg.metrics_path.get_or_insert_with(|| PathBuf::from("metrics.csv"));
    cfg.checkpoint_path.get_or_insert_with(|| PathBuf::from("model.json"));

    let (train_set, test_set, norm) = load_mnist(&cfg.data_dir, None)?;
    let (train_set, test_set) = (limit(train_set, cfg.train_limit), limit(test_set, cfg.test_limit));
    info!("loaded {} training and {} test images", train_set.len(), test_set.len());

    let started = Instant::now();
    let out = train(&cfg, &train_set, &test_set)?;
    let metrics = cfg.metrics_path.as_deref().expect("set above");
    out.log.write_csv(create(metrics)?)?;
    let ckpt = cfg.checkpoint_path.as_deref().expect("set above");
    Checkpoint::from_network(&out.network, norm).save(ckpt)?;

    let summary = RunSummary::new(&cfg, &out.log, out.test_loss, out.test_accuracy, started.elapsed().as_secs_f64());
    println!("{}", summary.to_line());
    Ok(())
}

fn load_model(path: Option<&Path>) -> Result<(Network, Normalization)> {
    let path = path.ok_or_else(|| QcnnError::InvalidParameter("--checkpoint is required".into()))?;
    Checkpoint::load(path)?.into_network()
}

fn load_test(dir: &Path, norm: Normalization, n: Option<usize>) -> Result<Dataset> {
    let (images, labels) = split_paths(dir, Split::Test);
    Ok(limit(load_idx(images, labels, Some(norm))?.0, n))
}

fn cmd_eval(c: RunCmd) -> Result<()> {
    let args = RunArgs::resolve(c.run, c.config.as_deref())?;
    let cfg = args.run_config(RunMode::WeightTransferEval)?;
    let (network, norm) = load_model(cfg.checkpoint_path.as_deref())?;
    let test_set = load_test(&cfg.data_dir, norm, cfg.test_limit)?;
    let started = Instant::now();
    let (loss, acc) = evaluate(&network, &test_set, &cfg)?;
    let summary = RunSummary::new(&cfg, &MetricsLog::default(), loss, acc, started.elapsed().as_secs_f64());
    println!("{}", summary.to_line());
    Ok(())
}

fn random_unit<R: Rng>(d: usize, rng: &mut R) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Serialize)]
struct TomoRow {
    trial: usize,
    samples: usize,
    linf_error: f64,
    bound: f64,
    within_bound: bool,
}

fn cmd_tomo(a: TomoArgs) -> Result<()> {
    let samples = sample_count(a.dim, a.delta)?;
    let bound = (1.0 + 2f64.sqrt()) * a.delta;
    let sink: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut out = csv::Writer::from_writer(sink);
    let mut ok = 0;
    for trial in 0..a.trials {
        let mut rng = substream(a.seed, &[trial as u64]);
        let x = random_unit(a.dim, &mut rng);
        let r = tomography_with_threshold(&x, a.delta, a.threshold, &mut rng)?;
        let err = r.linf_error(&x);
        ok += usize::from(err <= bound);
        out.serialize(TomoRow { trial, samples, linf_error: err, bound, within_bound: err <= bound })?;
    }
    out.flush()?;
    eprintln!("{ok}/{} trials within {bound:.4} ({samples} samples per round)", a.trials);
    Ok(())
}

#[derive(Serialize)]
struct TreeReport {
    dim: usize,
    draws: usize,
    total_variation: f64,
    updates: usize,
    consistent: bool,
}

fn cmd_tree(a: TreeArgs) -> Result<()> {
    let mut rng = substream(a.seed, &[]);
    let v: Vec<f64> = (0..a.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tree = SamplingTree::from_values(&v)?;
    let mut counts = vec![0usize; a.dim];
    for _ in 0..a.draws {
        counts[tree.sample(&mut rng)?] += 1;
    }
    let total = tree.squared_norm();
    let tv = 0.5
        * counts.iter().zip(&v).map(|(&c, x)| (c as f64 / a.draws.max(1) as f64 - x * x / total).abs()).sum::<f64>();
    let mut t = SamplingTree::new(a.dim)?;
    for _ in 0..a.updates {
        t.update(rng.gen_range(0..a.dim), rng.gen_range(-1.0..1.0))?;
    }
    let report = TreeReport {
        dim: a.dim,
        draws: a.draws,
        total_variation: tv,
        updates: a.updates,
        consistent: t.is_consistent(),
    };
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct CostRow {
    layer: usize,
    m: f64,
    mean_activation: f64,
    cap: f64,
    sigma: f64,
    epsilon: f64,
    delta: f64,
    eta: f64,
    classical_forward: f64,
    quantum_forward: f64,
    quantum_forward_sampled_form: f64,
    quantum_inspired: f64,
    quantum_backprop: Option<f64>,
    speedup_quantum: f64,
    speedup_inspired: f64,
}

impl From<&CostReport> for CostRow {
    fn from(r: &CostReport) -> Self {
        Self {
            layer: r.layer,
            m: r.m,
            mean_activation: r.mean_activation,
            cap: r.cap,
            sigma: r.sigma,
            epsilon: r.epsilon,
            delta: r.delta,
            eta: r.eta,
            classical_forward: r.classical_forward,
            quantum_forward: r.quantum_forward,
            quantum_forward_sampled_form: r.quantum_forward_sampled_form,
            quantum_inspired: r.quantum_inspired,
            quantum_backprop: r.quantum_backprop,
            speedup_quantum: r.speedup_quantum,
            speedup_inspired: r.speedup_inspired,
        }
    }
}

fn cmd_estimate(c: EstimateCmd) -> Result<()> {
    let args = RunArgs::resolve(c.run, c.config.as_deref())?;
    let cfg = args.run_config(RunMode::WeightTransferEval)?;
    let (network, norm) = load_model(cfg.checkpoint_path.as_deref())?;
    let test_set = load_test(&cfg.data_dir, norm, Some(c.batch.max(1)))?;
    let noise = cfg.effective_noise();
    let key = StreamKey::new(noise.seed, [0, 0, 0]);
    let images: Vec<&Tensor3> = test_set.images.iter().collect();
    let ids: Vec<u64> = (0..images.len() as u64).collect();
    let trace = network.forward_batch(&images, &ids, &noise, &key)?;
    let (_, upstream) = network.backward(&trace, &test_set.labels, &ids, &noise, &key, true)?;

    let mut reports = Vec::new();
    for l in 0..network.arch.convs.len() {
        let layer_cfg = network.arch.layer_config(l, &noise);
        let per_image = trace
            .convs
            .iter()
            .zip(&upstream)
            .map(|(t, u)| layer_report(l, &t[l], &network.params.convs[l], &layer_cfg, Some(&u[l]), c.p_grid))
            .collect::<Result<Vec<_>>>()?;
        reports.push(average_reports(&per_image)?);
    }

    let stdout = io::stdout();
    match c.format {
        ReportFormat::Json => {
            let mut w = stdout.lock();
            for r in &reports {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(stdout.lock());
            for r in &reports {
                w.serialize(CostRow::from(r))?;
            }
            w.flush()?;
        }
    }
    eprintln!("{}", qcnn::runtime::POLYLOG_NOTE);
    Ok(())
}
