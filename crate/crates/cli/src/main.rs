//! `kaf-oneshot` command-line runner.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 training
//! divergence, 3 failed self-check.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kaf_oneshot::checks::{gradcheck_suite, psdcheck, CheckKind, DEFAULT_SEEDS, GRADCHECK_TOLERANCE};
use kaf_oneshot::data::{load_dataset, sample_pairs, Dataset, DatasetKind, OmniglotSplit};
use kaf_oneshot::kaf::PSD_TOLERANCE;
use kaf_oneshot::layer::{Activation, AlphaInitKind};
use kaf_oneshot::metrics::{similarity_report, write_similarity_csv};
use kaf_oneshot::models::{load_checkpoint, save_checkpoint, Model, ModelKind};
use kaf_oneshot::training::{
    embed_dataset, eval_nway, eval_silhouette, train_matching, train_siamese, OptimizerKind, TrainConfig,
};
use kaf_oneshot::Error;
use serde::Serialize;

const EXIT_CONFIG: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "kaf-oneshot", version, about = "Kernel activation functions for one-shot metric learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a Siamese or matching model and write checkpoint.json, loss_curve.csv and metrics.json.
    Train(TrainArgs),
    /// N-way K-shot accuracy of a checkpoint's matching head.
    EvalOneshot(EvalOneshotArgs),
    /// Silhouette score of a checkpoint's embeddings, clustered by label.
    EvalSilhouette(CheckpointData),
    /// Write embeddings.csv for a dataset split.
    Embed(EmbedArgs),
    /// Write similarity.csv with the dissimilarity of sampled image pairs.
    Similarity(SimilarityArgs),
    /// Compare every analytic gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Smallest Gram-matrix eigenvalue of KAF dictionaries.
    Psdcheck(PsdcheckArgs),
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dataset(s: &str) -> Result<DatasetKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_check(s: &str) -> Result<CheckKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Background,
    Evaluation,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Siamese,
    Matching,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Elu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Part {
    /// The `--subset` training images.
    Train,
    /// Everything outside the training subset.
    Test,
    All,
}

/// Where images come from and how they are split.
#[derive(Debug, Clone, Args)]
struct DataArgs {
    /// mnist, att, omniglot or synthetic [default: synthetic]
    #[arg(long, value_parser = parse_dataset)]
    dataset: Option<DatasetKind>,
    /// Directory holding the dataset files (not needed for synthetic)
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Omniglot split to read
    #[arg(long, value_enum, default_value = "background")]
    split: SplitArg,
    /// Train on this many seeded-shuffled images; the rest is held out [default: all images, no hold-out]
    #[arg(long)]
    subset: Option<usize>,
    /// Seed for the subset shuffle, initialization and sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON training config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// siamese or matching [default: matching for omniglot, siamese otherwise]
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// relu, kaf or kaf2d [default: relu]
    #[arg(long, value_parser = parse_activation)]
    activation: Option<Activation>,
    /// [default: 10]
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate [default: 0.0005]
    #[arg(long)]
    lr: Option<f64>,
    /// Contrastive margin [default: 2]
    #[arg(long)]
    margin: Option<f64>,
    /// Pairs per Siamese step [default: 32]
    #[arg(long)]
    batch: Option<usize>,
    /// Optimizer steps per epoch [default: max(1, N / batch)]
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// [default: adam]
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Global gradient-norm clip, 0 disables [default: 5]
    #[arg(long)]
    clip: Option<f64>,
    /// KAF dictionary size [default: 20]
    #[arg(long = "D")]
    dict_size: Option<usize>,
    /// KAF dictionary spans [-bound, bound] [default: 3]
    #[arg(long)]
    bound: Option<f64>,
    /// KAF mixing-coefficient init [default: random]
    #[arg(long, value_enum)]
    alpha_init: Option<InitArg>,
    /// Classes per matching episode [default: 5]
    #[arg(long)]
    nway: Option<usize>,
    /// Support images per class [default: 1]
    #[arg(long)]
    kshot: Option<usize>,
    /// Query images per training episode [default: 5]
    #[arg(long)]
    queries: Option<usize>,
    /// Evaluation episodes for the final matching accuracy
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

#[derive(Debug, Args)]
struct CheckpointData {
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct EvalOneshotArgs {
    #[command(flatten)]
    inner: CheckpointData,
    #[arg(long, default_value_t = 5)]
    nway: usize,
    #[arg(long, default_value_t = 1)]
    kshot: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[command(flatten)]
    inner: CheckpointData,
    /// Which images to embed
    #[arg(long, value_enum, default_value = "all")]
    part: Part,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimilarityArgs {
    #[command(flatten)]
    inner: CheckpointData,
    /// Number of pairs (half similar, half dissimilar)
    #[arg(long, default_value_t = 100)]
    pairs: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Random instances per layer kind
    #[arg(long, default_value_t = DEFAULT_SEEDS)]
    seeds: usize,
    /// Test hook: corrupt the analytic gradient of this layer kind
    #[arg(long, value_parser = parse_check, hide = true)]
    corrupt: Option<CheckKind>,
}

#[derive(Debug, Args)]
struct PsdcheckArgs {
    /// Comma-separated dictionary sizes
    #[arg(long = "D", default_value = "2,5,10,20")]
    sizes: String,
    /// Dictionaries span [-bound, bound]
    #[arg(long, default_value_t = 3.0)]
    bound: f64,
}

/// Why a command stopped.
#[derive(Debug)]
enum Failure {
    Config(String),
    Diverged(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { .. } => Failure::Diverged(e.to_string()),
            other => Failure::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

impl DataArgs {
    fn kind(&self) -> DatasetKind {
        self.dataset.unwrap_or(DatasetKind::Synthetic)
    }

    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn omniglot_split(&self) -> OmniglotSplit {
        match self.split {
            SplitArg::Background => OmniglotSplit::Background,
            SplitArg::Evaluation => OmniglotSplit::Evaluation,
        }
    }

    fn load(&self, kind: DatasetKind) -> Result<Dataset, Failure> {
        Ok(load_dataset(kind, self.data_dir.as_deref(), self.omniglot_split())?)
    }

    /// `(train, held_out)`; without `--subset` both are the full dataset.
    fn split(&self, ds: Dataset, subset: Option<usize>, seed: u64) -> Result<(Dataset, Dataset), Failure> {
        match subset {
            Some(n) => Ok(ds.shuffled_split(n, seed)?),
            None => Ok((ds.clone(), ds)),
        }
    }

    fn part(&self, part: Part) -> Result<Dataset, Failure> {
        let ds = self.load(self.kind())?;
        let (train, held) = self.split(ds.clone(), self.subset, self.seed())?;
        Ok(match part {
            Part::Train => train,
            Part::Test => held,
            Part::All => ds,
        })
    }
}

fn read_config(path: &Path) -> Result<TrainConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Flag > config file > default.
fn resolve_config(args: &TrainArgs) -> Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr => $field:expr) => {
            if let Some(v) = $flag {
                $field = v;
            }
        };
    }
    set!(args.activation => cfg.activation);
    set!(args.epochs => cfg.epochs);
    set!(args.lr => cfg.lr);
    set!(args.margin => cfg.margin);
    set!(args.batch => cfg.batch_size);
    set!(args.data.seed => cfg.seed);
    set!(args.dict_size => cfg.kaf.size);
    set!(args.bound => cfg.kaf.bound);
    set!(args.nway => cfg.n_way);
    set!(args.kshot => cfg.k_shot);
    set!(args.queries => cfg.queries);
    if let Some(s) = args.steps_per_epoch {
        cfg.steps_per_epoch = Some(s);
    }
    if let Some(o) = args.optimizer {
        cfg.optimizer = match o {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        };
    }
    if let Some(i) = args.alpha_init {
        cfg.kaf.init = match i {
            InitArg::Random => AlphaInitKind::Random,
            InitArg::Elu => AlphaInitKind::Elu,
        };
    }
    if let Some(c) = args.clip {
        cfg.clip_norm = (c != 0.0).then_some(c);
    }
    if let Some(d) = args.data.dataset {
        cfg.dataset.name = d.name().into();
    }
    if args.data.subset.is_some() {
        cfg.dataset.subset = args.data.subset;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> CmdResult {
    let cfg = resolve_config(args)?;
    let kind: DatasetKind = cfg.dataset.name.parse()?;
    let ds = args.data.load(kind)?;
    let (train, held) = args.data.split(ds, cfg.dataset.subset, cfg.seed)?;
    let model_kind = match args.model {
        Some(ModelArg::Siamese) => ModelKind::Siamese,
        Some(ModelArg::Matching) => ModelKind::Matching,
        None if kind == DatasetKind::Omniglot => ModelKind::Matching,
        None => ModelKind::Siamese,
    };
    let (model, mut record) = match model_kind {
        ModelKind::Siamese => train_siamese(&train, &cfg)?,
        ModelKind::Matching => train_matching(&train, &cfg, cfg.n_way, cfg.k_shot)?,
    };
    match model_kind {
        ModelKind::Siamese => {
            let s = eval_silhouette(&model, &held)?;
            record.metrics.insert("silhouette".into(), s);
        }
        ModelKind::Matching => {
            let acc = eval_nway(&model, &held, cfg.n_way, cfg.k_shot, args.trials, cfg.seed)?;
            record.metrics.insert(format!("accuracy_{}way_{}shot", cfg.n_way, cfg.k_shot), acc);
        }
    }
    fs::create_dir_all(&args.out)?;
    save_checkpoint(&model, &args.out.join("checkpoint.json"))?;
    record.write_to(&args.out)?;
    let last = record.epoch_losses.last().copied().unwrap_or(f64::NAN);
    let metrics: Vec<String> = record.metrics.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
    println!(
        "trained {} {} for {} epochs ({} steps): final loss {last:.6}, {}",
        cfg.activation,
        match model_kind {
            ModelKind::Siamese => "siamese",
            ModelKind::Matching => "matching",
        },
        cfg.epochs,
        record.steps,
        metrics.join(", ")
    );
    let counts: Vec<String> = train.class_counts().iter().map(|(c, n)| format!("{c}:{n}")).collect();
    println!("training images per class: {}", counts.join(" "));
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model, Failure> {
    if !path.is_file() {
        return Err(Failure::Config(format!("checkpoint {} not found", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

#[derive(Serialize)]
struct OneshotResult {
    accuracy: f64,
    nway: usize,
    kshot: usize,
    trials: usize,
}

fn cmd_eval_oneshot(args: &EvalOneshotArgs) -> CmdResult {
    let model = load_model(&args.inner.checkpoint)?;
    let ds = args.inner.data.part(Part::Test)?;
    let accuracy = eval_nway(&model, &ds, args.nway, args.kshot, args.trials, args.inner.data.seed())?;
    let out = OneshotResult {
        accuracy,
        nway: args.nway,
        kshot: args.kshot,
        trials: args.trials,
    };
    println!("{}", serde_json::to_string(&out).map_err(Error::from)?);
    Ok(())
}

fn cmd_eval_silhouette(args: &CheckpointData) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let ds = args.data.part(Part::Test)?;
    let doc = serde_json::json!({
        "silhouette": eval_silhouette(&model, &ds)?,
        "images": ds.len(),
        "class_counts": ds.class_counts(),
    });
    println!("{doc}");
    Ok(())
}

fn cmd_embed(args: &EmbedArgs) -> CmdResult {
    let model = load_model(&args.inner.checkpoint)?;
    let ds = args.inner.data.part(args.part)?;
    let emb = embed_dataset(&model, &ds)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("embeddings.csv");
    let mut out = BufWriter::new(File::create(&path)?);
    let e = emb.shape()[1];
    let cols: Vec<String> = (0..e).map(|k| format!("e{k}")).collect();
    writeln!(out, "id,label,{}", cols.join(","))?;
    for i in 0..ds.len() {
        let row: Vec<String> = emb.item(i).iter().map(f64::to_string).collect();
        writeln!(out, "{i},{},{}", ds.labels[i], row.join(","))?;
    }
    out.flush()?;
    println!("wrote {} rows to {}", ds.len(), path.display());
    Ok(())
}

fn cmd_similarity(args: &SimilarityArgs) -> CmdResult {
    let model = load_model(&args.inner.checkpoint)?;
    let ds = args.inner.data.part(Part::Test)?;
    let batch = sample_pairs(&ds, args.pairs, args.inner.data.seed())?;
    let pairs: Vec<_> = batch
        .indices
        .iter()
        .map(|&(a, b)| (ds.images.select(&[a]), ds.images.select(&[b])))
        .collect();
    let scores = similarity_report(&pairs, &model)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join("similarity.csv");
    let mut out = BufWriter::new(File::create(&path)?);
    write_similarity_csv(&mut out, &scores)?;
    out.flush()?;
    println!("wrote {} pairs to {}", scores.len(), path.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult {
    let reports = gradcheck_suite(args.seeds, args.corrupt)?;
    let mut failures = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<13} max_rel_err={:.3e} seeds={} {verdict}", r.kind.name(), r.max_error, r.seeds);
        if !r.passed() {
            failures.push(format!(
                "{}: relative error {:.3e} >= {GRADCHECK_TOLERANCE:e} at {} element {} (seed {})",
                r.kind, r.max_error, r.worst_tensor, r.worst_index, r.worst_seed
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures.join("\n")))
    }
}

fn parse_sizes(s: &str) -> Result<Vec<usize>, Failure> {
    let sizes: Result<Vec<usize>, _> = s.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match sizes {
        Ok(v) if !v.is_empty() && v.iter().all(|&d| d > 0) => Ok(v),
        _ => Err(Failure::Config(format!(
            "invalid --D list '{s}': expected comma-separated positive integers"
        ))),
    }
}

fn cmd_psdcheck(args: &PsdcheckArgs) -> CmdResult {
    let sizes = parse_sizes(&args.sizes)?;
    let reports = psdcheck(&sizes, args.bound)?;
    let mut bad = Vec::new();
    for r in &reports {
        println!("D={:<3} lambda_min={:.6e}", r.size, r.min_eigenvalue);
        if !r.passed() {
            bad.push(format!("D={}: lambda_min {:e} < {PSD_TOLERANCE:e}", r.size, r.min_eigenvalue));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(bad.join("\n")))
    }
}

fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::EvalOneshot(a) => cmd_eval_oneshot(a),
        Command::EvalSilhouette(a) => cmd_eval_silhouette(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Similarity(a) => cmd_similarity(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Psdcheck(a) => cmd_psdcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DIVERGED)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed:\n{msg}");
            ExitCode::from(EXIT_CHECK)
        }
    }
}
