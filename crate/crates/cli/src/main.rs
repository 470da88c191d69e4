use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use sbd::embeddings::{parse_vector_file, EmbeddingTable, NgramTable, DEFAULT_MAX_N, DEFAULT_MIN_N};
use sbd::models::{load_checkpoint, save_checkpoint, ModelId, ModelSpec, SbdModel};
use sbd::normalize::{normalize_bytes, normalize_stream, split_corpus, NormalizedCorpus, SplitCorpus};
use sbd::pipeline::{segment, ModelClassifier, OutputStyle};
use sbd::train::{
    carve_validation, eval_loss, evaluate, majority_baseline, TrainConfig, Trainer, DEFAULT_VALIDATION_FRACTION,
};
use sbd::window::{build_windows, label_tokens, WindowConfig};
use sbd::{ErrorKind, SbdError};

/// Sentence boundary detection for unpunctuated French text.
#[derive(Parser, Debug)]
#[command(name = "sbd", version)]
struct Cli {
    /// Log progress to standard error (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Normalize raw text into a `<SEG>`-marked token stream.
    Normalize {
        input: PathBuf,
        /// Output file (standard output when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a classifier on the first 80% of a corpus.
    Train(TrainArgs),
    /// Score a checkpoint on the last 20% of a corpus.
    Evaluate {
        corpus: PathBuf,
        #[command(flatten)]
        vectors: VectorArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Multiplier applied to the NO_SEG probability before the decision.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Insert predicted boundaries into raw text.
    Segment {
        input: PathBuf,
        #[command(flatten)]
        vectors: VectorArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print one predicted sentence per line instead of `<SEG>` markers.
        #[arg(long)]
        one_sentence_per_line: bool,
    },
}

#[derive(Args, Debug)]
struct VectorArgs {
    /// Word vectors in the `V D` text format.
    #[arg(long)]
    vectors: PathBuf,
    /// Optional binary n-gram bucket table for unknown words.
    #[arg(long)]
    ngrams: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    corpus: PathBuf,
    #[command(flatten)]
    vectors: VectorArgs,
    #[arg(long, default_value = "cnn-c")]
    model: ModelId,
    /// Words per context window (odd).
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    keep_prob: f64,
    /// Optimizer steps between two loss-log entries.
    #[arg(long, default_value_t = 10)]
    log_interval: u64,
    /// Where to write the trained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the `step<TAB>loss` curve.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SbdError>() {
            return match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Format => 3,
                ErrorKind::Io => 4,
                ErrorKind::Numeric => 5,
                ErrorKind::State => 6,
            };
        }
        if cause.downcast_ref::<io::Error>().is_some() {
            return 4;
        }
    }
    1
}

fn open(path: &Path) -> Result<BufReader<File>> {
    let file = File::open(path).map_err(|source| SbdError::Io {
        context: format!("opening {}", path.display()),
        source,
    })?;
    Ok(BufReader::new(file))
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|source| SbdError::Io {
            context: format!("reading {}", path.display()),
            source,
        })?;
    Ok(bytes)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|source| SbdError::Io {
        context: format!("creating {}", path.display()),
        source,
    })?;
    Ok(BufWriter::new(file))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    let mut w = sink(out)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|source| SbdError::Io {
            context: "writing output".into(),
            source,
        })?;
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(SbdError::Config(format!("--alpha must lie in (0, 1], got {alpha}")).into());
    }
    Ok(())
}

fn load_vectors(args: &VectorArgs) -> Result<EmbeddingTable> {
    let parsed = parse_vector_file(open(&args.vectors)?)
        .with_context(|| format!("loading vectors from {}", args.vectors.display()))?;
    if parsed.duplicates > 0 {
        warn!("{} duplicate words in {}; last occurrence kept", parsed.duplicates, args.vectors.display());
    }
    let mut table = parsed.table;
    if let Some(path) = &args.ngrams {
        let ngrams = NgramTable::read_from(open(path)?).with_context(|| format!("loading {}", path.display()))?;
        table = table.with_ngrams(ngrams, DEFAULT_MIN_N, DEFAULT_MAX_N)?;
    }
    info!("{} vectors of dimension {}", table.len(), table.dim());
    Ok(table)
}

fn load_model(path: &Path, table: &EmbeddingTable) -> Result<SbdModel> {
    let model = load_checkpoint(open(path)?).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let spec = model.spec();
    if spec.n != table.dim() {
        return Err(SbdError::Config(format!(
            "checkpoint expects {}-dimensional vectors, vectors file has {}",
            spec.n,
            table.dim()
        ))
        .into());
    }
    Ok(model)
}

fn load_split(path: &Path) -> Result<SplitCorpus> {
    let corpus: NormalizedCorpus =
        normalize_bytes(&read_all(path)?).with_context(|| format!("normalizing {}", path.display()))?;
    Ok(split_corpus(&corpus, 0.8)?)
}

fn cmd_normalize(input: &Path, out: Option<&Path>) -> Result<()> {
    let reader = open(input)?;
    let stats = match out {
        Some(path) => {
            let mut w = create(path)?;
            normalize_stream(reader, &mut w)
        }
        None => normalize_stream(reader, io::stdout().lock()),
    }
    .with_context(|| format!("normalizing {}", input.display()))?;
    let ratio = stats.marker_ratio().map_or("n/a".to_string(), |r| format!("{r:.4}"));
    eprintln!("tokens={} markers={} ratio={ratio}", stats.tokens, stats.markers);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        batch_size: args.batch,
        epochs: args.epochs,
        lr: args.lr,
        keep_prob: args.keep_prob,
        seed: args.seed,
        log_interval: args.log_interval,
    };
    cfg.validate()?;
    let window = WindowConfig::new(args.window)?;
    let table = load_vectors(&args.vectors)?;
    let spec = ModelSpec::build_with_keep_prob(args.model, window.width, table.dim(), args.keep_prob)?;
    let split = load_split(&args.corpus)?;

    let seq = label_tokens(&split.train);
    let samples = build_windows(&seq, &window);
    let (train_part, validation) = carve_validation(&samples, DEFAULT_VALIDATION_FRACTION)?;
    if train_part.is_empty() {
        return Err(SbdError::Config("training portion has no words".into()).into());
    }
    info!(
        "{}: {} training windows, {} validation windows, {} parameters",
        spec.id,
        train_part.len(),
        validation.len(),
        spec.param_count()
    );

    let mut model = SbdModel::new(spec, args.seed)?;
    let curve = {
        let mut trainer = Trainer::new(&mut model, cfg)?;
        for _ in 0..cfg.epochs {
            trainer.run_epoch(train_part, &table)?;
        }
        trainer.into_curve()
    };

    // outputs are written only once training has succeeded
    let mut w = create(&args.checkpoint)?;
    save_checkpoint(&model, &mut w)?;
    if let Some(path) = &args.loss_log {
        curve.write_to(create(path)?)?;
    }
    let (train_loss, train_acc) = eval_loss(&model, train_part, &table)?;
    println!("final_train_loss={train_loss:.5}");
    println!("final_train_accuracy={train_acc:.4}");
    if let Some(last) = curve.last() {
        println!("last_logged_loss={last:.5}");
    }
    if !validation.is_empty() {
        let (val_loss, _) = eval_loss(&model, validation, &table)?;
        println!("validation_loss={val_loss:.5}");
    }
    Ok(())
}

fn cmd_evaluate(corpus: &Path, vectors: &VectorArgs, checkpoint: &Path, alpha: f64, out: Option<&Path>) -> Result<()> {
    check_alpha(alpha)?;
    let table = load_vectors(vectors)?;
    let model = load_model(checkpoint, &table)?;
    let split = load_split(corpus)?;
    let seq = label_tokens(&split.test);
    if seq.is_empty() {
        return Err(SbdError::Config("test portion has no words".into()).into());
    }
    let samples = build_windows(&seq, &WindowConfig::new(model.spec().m)?);
    let report = evaluate(&model, &samples, &table, alpha)?;
    let baseline = majority_baseline(samples.iter().map(|s| s.label));
    info!("majority baseline accuracy {:.3}", baseline.accuracy);
    write_text(out, &report.to_string())
}

fn cmd_segment(
    input: &Path,
    vectors: &VectorArgs,
    checkpoint: &Path,
    alpha: f64,
    out: Option<&Path>,
    one_per_line: bool,
) -> Result<()> {
    check_alpha(alpha)?;
    let table = load_vectors(vectors)?;
    let model = load_model(checkpoint, &table)?;
    let bytes = read_all(input)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| SbdError::InvalidUtf8 {
        offset: e.valid_up_to(),
    })?;
    let style = if one_per_line {
        OutputStyle::SentencePerLine
    } else {
        OutputStyle::Markers
    };
    let classifier = ModelClassifier {
        model: &model,
        table: &table,
        alpha,
    };
    let segmented = segment(text, &classifier, style)?;
    write_text(out, &segmented)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Normalize { input, out } => cmd_normalize(input, out.as_deref()),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate {
            corpus,
            vectors,
            checkpoint,
            alpha,
            out,
        } => cmd_evaluate(corpus, vectors, checkpoint, *alpha, out.as_deref()),
        Command::Segment {
            input,
            vectors,
            checkpoint,
            alpha,
            out,
            one_sentence_per_line,
        } => cmd_segment(input, vectors, checkpoint, *alpha, out.as_deref(), *one_sentence_per_line),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
