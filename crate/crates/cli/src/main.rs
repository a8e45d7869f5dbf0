use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use finegate::doc_query::Interaction;
use finegate::harness::data::{DatasetFiles, Encoder, RawExample, Task};
use finegate::harness::gate_report::gate_report;
use finegate::harness::synth::{self, SynthConfig, SynthTask};
use finegate::harness::{checkpoint, evaluate, train, Dataset, OptimizerConfig, TrainConfig};
use finegate::reader::{Example, Model};
use finegate::token_repr::CombinerKind;
use finegate::Execution;

#[derive(Parser)]
#[command(name = "finegate", version, about = "Fine-grained gated readers: data, training, evaluation")]
struct Cli {
    /// Run on one thread even when built with parallel support.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate(GenerateArgs),
    /// Train a model and save the best-dev checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Export learned gate statistics of a fine-grained gate model.
    GateReport(GateReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// cloze_morph, span_morph or tag_pred
    #[arg(long)]
    task: SynthTask,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    dev: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Share of cloze training queries about an irregular noun.
    #[arg(long, default_value_t = 0.15)]
    irregular_rate: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// cloze, span or tags; must match the dataset.
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, default_value = "finegate")]
    combiner: CombinerKind,
    #[arg(long, default_value = "fg")]
    interaction: Interaction,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// RNN hidden size per direction.
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Word embedding and character representation size.
    #[arg(long, default_value_t = 16)]
    embed: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    /// Use plain SGD instead of Adam.
    #[arg(long)]
    sgd: bool,
    #[arg(long, default_value_t = 10.0)]
    clip: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Stop after this many epochs without dev improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// Keep word embeddings at their initial values.
    #[arg(long)]
    fixed_embeddings: bool,
    /// Half-width of the uniform word embedding initialization.
    #[arg(long, default_value_t = 0.1)]
    embed_init: f64,
    /// Checkpoint path; the epoch history goes to `<out>.history.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// train or dev
    #[arg(long, default_value = "dev")]
    split: String,
    /// Also write metrics as CSV to this path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct GateReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory whose tokens are scored.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
    /// Feature table CSV; the token table goes to `<stem>.tokens.csv` beside it.
    #[arg(long)]
    out: PathBuf,
    /// Tokens listed from each end of the ranking.
    #[arg(long, default_value_t = 50)]
    top: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a, exec),
        Command::Eval(a) => run_eval(a, exec),
        Command::GateReport(a) => run_gate_report(a, exec),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let config = SynthConfig {
        irregular_rate: a.irregular_rate,
        ..SynthConfig::new(a.train, a.dev, a.seed)
    };
    let files = synth::generate(a.task, &config)?;
    synth::validate(&files)?;
    files
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    println!(
        "wrote {} ({} train, {} dev, {} words) to {}",
        a.task.name(),
        files.train.len(),
        files.dev.len(),
        files.vocabs.words.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs, exec: Execution) -> Result<()> {
    let dataset = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
    if let Some(task) = a.task {
        if task != dataset.task {
            bail!("--task {task} but {} holds a {} dataset", a.data.display(), dataset.task);
        }
    }
    let mut config = dataset.model_config();
    config.combiner = a.combiner;
    config.interaction = a.interaction;
    config.layers = a.layers;
    config.hidden_dim = a.hidden;
    config.embed_dim = a.embed;
    config.char_dim = a.embed;
    config.dropout = a.dropout;
    config.train_word_embeddings = !a.fixed_embeddings;
    config.embed_init = a.embed_init;
    config.seed = a.seed;
    let optimizer = if a.sgd {
        OptimizerConfig::Sgd { lr: a.lr }
    } else {
        OptimizerConfig::default().with_lr(a.lr)
    };
    let train_config = TrainConfig {
        optimizer,
        batch_size: a.batch_size,
        epochs: a.epochs,
        clip_norm: Some(a.clip),
        seed: a.seed,
        patience: a.patience,
    };
    let mut model = Model::new(config)?;
    println!(
        "{} task, {}+{} model, {} parameters, {} train / {} dev examples",
        dataset.task,
        a.combiner,
        a.interaction,
        model.num_parameters(),
        dataset.train.len(),
        dataset.dev.len()
    );
    let history = train(&mut model, &dataset.train, &dataset.dev, &train_config, exec, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  dev {:.4}  grad norm {:.3}",
            r.epoch, r.train_loss, r.dev_metric, r.max_grad_norm
        )
    })?;
    checkpoint::save(&a.out, &model, &dataset.encoder).with_context(|| format!("writing {}", a.out.display()))?;
    let history_path = sibling(&a.out, "history.csv");
    let mut w = csv::Writer::from_path(&history_path)?;
    for r in &history.epochs {
        w.serialize(r)?;
    }
    w.flush()?;
    println!(
        "best dev {:.4} at epoch {}; saved {}",
        history.best_dev_metric,
        history.best_epoch,
        a.out.display()
    );
    Ok(())
}

/// `dir/name.ext` -> `dir/name.<suffix>`
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_split(checkpoint_path: &Path, data: &Path, split: &str) -> Result<(Model, Encoder, Vec<Example>)> {
    let (model, encoder) =
        checkpoint::load(checkpoint_path).with_context(|| format!("loading {}", checkpoint_path.display()))?;
    let files = DatasetFiles::read(data).with_context(|| format!("loading {}", data.display()))?;
    if files.task.head() != model.config.head {
        bail!("checkpoint is a {:?} model but {} holds a {} dataset", model.config.head, data.display(), files.task);
    }
    let raw: &[RawExample] = match split {
        "train" => &files.train,
        "dev" => &files.dev,
        other => bail!("unknown split {other:?} (expected train or dev)"),
    };
    let examples = encoder.examples(raw)?;
    Ok((model, encoder, examples))
}

fn run_eval(a: EvalArgs, exec: Execution) -> Result<()> {
    let (model, _, examples) = load_split(&a.checkpoint, &a.data, &a.split)?;
    let metrics = evaluate(&model, &examples, exec)?;
    print!("{}", metrics.table());
    if let Some(path) = &a.metrics {
        metrics
            .write_csv(path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_gate_report(a: GateReportArgs, exec: Execution) -> Result<()> {
    let (model, encoder, examples) = load_split(&a.checkpoint, &a.data, &a.split)?;
    let report = gate_report(&model, &examples, &encoder.vocabs.words, exec)?;
    let tokens_path = sibling(&a.out, "tokens.csv");
    report.write_csv(&a.out, &tokens_path)?;
    println!("feature weights:");
    for f in &report.features {
        println!("  {:<16} {:+.4}", f.feature, f.mean_weight);
    }
    println!("highest gate (character side):");
    for t in report.top(a.top) {
        println!("  {:<16} {:.4}  ({})", t.token, t.mean_gate, t.count);
    }
    println!("lowest gate (word side):");
    for t in report.bottom(a.top) {
        println!("  {:<16} {:.4}  ({})", t.token, t.mean_gate, t.count);
    }
    println!("wrote {} and {}", a.out.display(), tokens_path.display());
    Ok(())
}
