//! `sest`: generate corpora, extract syntactic sequences, train, evaluate,
//! gradient-check, ensemble, and compare models from the command line.
//!
//! Exit codes: 0 success, 1 data/runtime error, 2 usage error. All
//! randomness flows from the seeds given on the command line or in the
//! configuration file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sest::data::{
    annotate, gen_toy_corpus, load_corpus, save_corpus, Corpus, ToyGrammarConfig,
};
use sest::eval::{
    config_digest, ensemble, evaluate, overlap_sets, EvalReport, EvalResult, Metric,
    QuestionResult,
};
use sest::extraction::{ExtractionConfig, LabelVocab, OrderMode, SynMode};
use sest::model::{
    gradcheck_report, ModelConfig, Prediction, SestModel, SynEncoderKind,
};

#[derive(Parser)]
#[command(name = "sest", version, about = "Span-extraction QA with structural embeddings of syntactic trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Pos,
    Sect,
    Sedt,
}

impl From<ModeArg> for SynMode {
    fn from(m: ModeArg) -> SynMode {
        match m {
            ModeArg::None => SynMode::None,
            ModeArg::Pos => SynMode::Pos,
            ModeArg::Sect => SynMode::Sect,
            ModeArg::Sedt => SynMode::Sedt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Original,
    RandomOrder,
    RandomNodes,
}

impl From<OrderArg> for OrderMode {
    fn from(o: OrderArg) -> OrderMode {
        match o {
            OrderArg::Original => OrderMode::Original,
            OrderArg::RandomOrder => OrderMode::RandomOrder,
            OrderArg::RandomNodes => OrderMode::RandomNodes,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Lstm,
    Cnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Char,
    Token,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Metric {
        match m {
            MetricArg::Char => Metric::Char,
            MetricArg::Token => Metric::Token,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    /// Paper-scale dimensions.
    Default,
    /// Small dimensions for desk-scale corpora.
    Toy,
    /// Minimal dimensions for smoke tests.
    Micro,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus whose answers are syntactically
    /// determined.
    GenToy(GenToyArgs),
    /// Extract per-token syntactic sequences from a corpus as JSONL.
    Extract(ExtractArgs),
    /// Train a model on a corpus and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus and write a report.
    Eval(EvalArgs),
    /// Verify model gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Combine checkpoints by summed span confidence and evaluate.
    Ensemble(EnsembleArgs),
    /// Venn-region counts of correct answers across evaluation reports.
    Overlap(OverlapArgs),
}

#[derive(Args)]
struct GenToyArgs {
    /// Output corpus path (JSON lines).
    #[arg(long)]
    out: PathBuf,
    /// Number of examples.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Nouns drawn from the base pool.
    #[arg(long, default_value_t = 20)]
    nouns: usize,
    /// Transitive verbs drawn from the base pool.
    #[arg(long, default_value_t = 8)]
    verbs: usize,
    /// Distractor sentences per context.
    #[arg(long, default_value_t = 2)]
    distractors: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Window size; defaults to 10 (SECT/POS) or 20 (SEDT).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum, default_value = "original")]
    order: OrderArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON configuration file of model keys; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Held-out corpus evaluated after every epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Dimension preset applied before config file and flags.
    #[arg(long, value_enum, default_value = "default")]
    preset: PresetArg,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum)]
    order: Option<OrderArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Drop the word/character embeddings and train on syntax alone.
    #[arg(long)]
    syntax_only: bool,
    /// Pretrained word vectors (one "word v1 .. vD" per line); loaded fixed.
    #[arg(long)]
    word_vectors: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "char")]
    metric: MetricArg,
    /// Report output path (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Worker threads for per-example evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// JSON configuration file of model keys; defaults to the micro preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Maximum acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Check every mode/encoder combination instead of one configuration.
    #[arg(long)]
    all_modes: bool,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Checkpoints to combine.
    #[arg(long, num_args = 1.., required = true)]
    models: Vec<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "char")]
    metric: MetricArg,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct OverlapArgs {
    /// Evaluation reports to intersect.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenToy(args) => cmd_gen_toy(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Ensemble(args) => cmd_ensemble(args),
        Command::Overlap(args) => cmd_overlap(args),
    }
}

/// Load a corpus, emitting one structured rejection record per invalid line
/// on stderr.
fn read_corpus(path: &Path) -> Result<Corpus> {
    let outcome = load_corpus(path).with_context(|| format!("loading {}", path.display()))?;
    for r in &outcome.rejected {
        eprintln!("{}", serde_json::to_string(r).expect("rejections serialize"));
    }
    Ok(outcome.corpus)
}

fn cmd_gen_toy(args: GenToyArgs) -> Result<()> {
    let cfg = ToyGrammarConfig {
        n_examples: args.n,
        seed: args.seed,
        n_nouns: args.nouns,
        n_verbs: args.verbs,
        distractors: args.distractors,
    };
    if cfg.n_examples == 0 {
        bail!("--n must be >= 1");
    }
    let corpus = gen_toy_corpus(&cfg);
    save_corpus(&corpus, &args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "wrote {} examples ({} context tokens, {} distinct words) to {}",
        corpus.len(),
        corpus.stats.n_context_tokens,
        corpus.stats.n_distinct_words,
        args.out.display()
    );
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let mode: SynMode = args.mode.into();
    if mode == SynMode::None {
        bail!("--mode none extracts nothing");
    }
    let corpus = read_corpus(&args.corpus)?;
    let window = args.window.unwrap_or(match mode {
        SynMode::Sedt => 20,
        _ => 10,
    });
    let ext = ExtractionConfig {
        window,
        order_mode: args.order.into(),
        seed: args.seed,
        ..ExtractionConfig::default()
    };
    let mut labels = LabelVocab::new();
    let mut words = LabelVocab::new();

    let file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut out = std::io::BufWriter::new(file);
    let mut n_records = 0usize;
    for example in &corpus.examples {
        let ann = annotate(example, &ext, mode, &mut labels, &mut words)?;
        let mut write_sentence = |sentence_id: String,
                                  start: usize,
                                  len: usize,
                                  seqs: &[sest::extraction::SyntacticSequence]|
         -> Result<()> {
            for (i, seq) in seqs[start..start + len].iter().enumerate() {
                let record = serde_json::json!({
                    "sentence_id": sentence_id,
                    "token_index": i,
                    "kind": seq.kind.name(),
                    "labels": seq.elements.iter().map(|e| labels.name_of(e.label_id)).collect::<Vec<_>>(),
                    "words": seq.elements.iter().filter_map(|e| e.word_id.map(|w| words.name_of(w))).collect::<Vec<_>>(),
                });
                use std::io::Write;
                writeln!(out, "{record}")?;
                n_records += 1;
            }
            Ok(())
        };
        let mut offset = 0;
        for (s, sentence) in example.context.iter().enumerate() {
            write_sentence(format!("{}:ctx:{s}", example.id), offset, sentence.tokens.len(), &ann.context)?;
            offset += sentence.tokens.len();
        }
        write_sentence(format!("{}:q", example.id), 0, example.question.tokens.len(), &ann.question)?;
    }
    println!("wrote {n_records} records to {}", args.out.display());
    Ok(())
}

/// Parse a flat JSON config document: path-like keys are split off, the rest
/// must deserialize as model keys (unknown keys rejected).
fn load_config_file(path: &Path) -> Result<(ModelConfig, serde_json::Map<String, serde_json::Value>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut doc: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    let mut paths = serde_json::Map::new();
    for key in ["corpus", "out", "eval", "model", "report", "word_vectors"] {
        if let Some(v) = doc.remove(key) {
            paths.insert(key.to_string(), v);
        }
    }
    let config: ModelConfig = serde_json::from_value(serde_json::Value::Object(doc))
        .with_context(|| format!("model keys in {}", path.display()))?;
    Ok((config, paths))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let preset = match args.preset {
        PresetArg::Default => ModelConfig::default(),
        PresetArg::Toy => ModelConfig::toy(),
        PresetArg::Micro => ModelConfig::micro(),
    };
    let (mut config, mut file_paths) = match &args.config {
        Some(path) => {
            let (file_config, paths) = load_config_file(path)?;
            (file_config, paths)
        }
        None => (preset, serde_json::Map::new()),
    };
    // flags win over the config file
    if let Some(mode) = args.mode {
        config.syn_mode = mode.into();
    }
    if let Some(encoder) = args.encoder {
        config.syn_encoder = match encoder {
            EncoderArg::Lstm => SynEncoderKind::Lstm,
            EncoderArg::Cnn => SynEncoderKind::Cnn,
        };
    }
    if args.window.is_some() {
        config.window = args.window;
    }
    if let Some(order) = args.order {
        config.order_mode = order.into();
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(lr) = args.lr {
        config.lr = lr;
    }
    if let Some(epochs) = args.epochs {
        config.epochs = epochs;
    }
    if args.syntax_only {
        config.lexical = false;
    }

    let corpus = read_corpus(&args.corpus)?;
    let eval_path = args.eval.clone().or_else(|| {
        file_paths
            .remove("eval")
            .and_then(|v| v.as_str().map(PathBuf::from))
    });
    let eval_corpus = eval_path.as_deref().map(read_corpus).transpose()?;

    let vocabs = sest::model::Vocabs::build(&corpus, &config)?;
    let fixed_words = match &args.word_vectors {
        Some(path) => {
            let vectors = sest::encoders::load_word_vectors(path, config.word_dim)
                .with_context(|| format!("reading {}", path.display()))?;
            Some(build_fixed_table(&vocabs, &config, &vectors))
        }
        None => None,
    };
    let mut model = SestModel::new(config, vocabs, fixed_words)?;
    let logs = model.train(&corpus, eval_corpus.as_ref())?;
    for log in &logs {
        println!("{}", log.render());
    }
    model.save(&args.out)?;
    println!("saved checkpoint to {}", args.out.display());
    Ok(())
}

/// Fixed word table: pretrained vectors where available, zeros elsewhere
/// (UNK included).
fn build_fixed_table(
    vocabs: &sest::model::Vocabs,
    config: &ModelConfig,
    vectors: &[(String, Vec<f64>)],
) -> sest::autodiff::Tensor {
    let rows = vocabs.words.len();
    let dim = config.word_dim;
    let mut values = vec![0.0; rows * dim];
    for (word, vector) in vectors {
        if let Some(id) = vocabs.words.get(word) {
            values[id * dim..(id + 1) * dim].copy_from_slice(vector);
        }
    }
    sest::autodiff::Tensor::matrix(rows, dim, values)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = SestModel::load(&args.model)?;
    let corpus = read_corpus(&args.corpus)?;
    let metric: Metric = args.metric.into();
    let result = evaluate(&model, &corpus, metric, args.threads.max(1))?;
    let report = EvalReport::from_result(result, config_digest(&model.config));
    write_report(&report, &args.report)?;
    println!(
        "em {:.4}  f1 {:.4}  ({} questions) -> {}",
        report.em,
        report.f1,
        report.per_question.len(),
        args.report.display()
    );
    Ok(())
}

fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string(report)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    if args.eps <= 0.0 {
        bail!("--eps must be positive");
    }
    let base = match &args.config {
        Some(path) => load_config_file(path)?.0,
        None => ModelConfig::micro(),
    };
    let configs: Vec<ModelConfig> = if args.all_modes {
        all_mode_configs(&base)
    } else {
        vec![base]
    };
    let mut worst = 0.0f64;
    for config in &configs {
        let report = gradcheck_report(config, args.eps)?;
        println!(
            "{}/{}: max relative error {:.3e} over {} components (worst {}[{}])",
            config.syn_mode,
            match config.syn_encoder {
                SynEncoderKind::Lstm => "lstm",
                SynEncoderKind::Cnn => "cnn",
            },
            report.max_rel_error,
            report.n_components,
            report.worst_param,
            report.worst_index,
        );
        worst = worst.max(report.max_rel_error);
    }
    if worst >= args.tol {
        bail!("max relative error {worst:.3e} exceeds tolerance {:.1e}", args.tol);
    }
    Ok(())
}

/// The six mode/encoder combinations, sharing the base dimensions.
fn all_mode_configs(base: &ModelConfig) -> Vec<ModelConfig> {
    [
        (SynMode::None, SynEncoderKind::Lstm),
        (SynMode::Pos, SynEncoderKind::Lstm),
        (SynMode::Sect, SynEncoderKind::Lstm),
        (SynMode::Sect, SynEncoderKind::Cnn),
        (SynMode::Sedt, SynEncoderKind::Lstm),
        (SynMode::Sedt, SynEncoderKind::Cnn),
    ]
    .into_iter()
    .map(|(mode, encoder)| ModelConfig {
        syn_mode: mode,
        syn_encoder: encoder,
        ..base.clone()
    })
    .collect()
}

fn cmd_ensemble(args: EnsembleArgs) -> Result<()> {
    let corpus = read_corpus(&args.corpus)?;
    let metric: Metric = args.metric.into();
    let mut per_model: Vec<Vec<(String, Prediction)>> = Vec::new();
    for path in &args.models {
        let model = SestModel::load(path)?;
        let items = model.prepare_corpus(&corpus)?;
        let mut predictions = Vec::with_capacity(items.len());
        for item in &items {
            predictions.push((item.example.id.clone(), model.predict(item)?));
        }
        per_model.push(predictions);
    }
    let choices = ensemble(&per_model)?;

    let per_question: Vec<QuestionResult> = corpus
        .examples
        .iter()
        .zip(&choices)
        .map(|(example, choice)| {
            let gold_text = example.answer_text();
            let em_hit = sest::eval::exact_match(&choice.answer_text, &gold_text) == 1;
            let f1 = match metric {
                Metric::Char => sest::eval::f1_char(&choice.answer_text, &gold_text),
                Metric::Token => sest::eval::f1_token(&choice.answer_text, &gold_text),
            };
            QuestionResult {
                id: choice.id.clone(),
                begin: choice.begin,
                end: choice.end,
                predicted_text: choice.answer_text.clone(),
                gold_text,
                em_hit,
                f1,
                confidence: choice.score,
            }
        })
        .collect();
    let n = per_question.len().max(1) as f64;
    let report = EvalReport {
        config_digest: format!("ensemble-of-{}", args.models.len()),
        metric,
        em: per_question.iter().filter(|q| q.em_hit).count() as f64 / n,
        f1: per_question.iter().map(|q| q.f1).sum::<f64>() / n,
        per_question,
    };
    write_report(&report, &args.report)?;
    println!(
        "ensemble of {}: em {:.4}  f1 {:.4} -> {}",
        args.models.len(),
        report.em,
        report.f1,
        args.report.display()
    );
    Ok(())
}

fn cmd_overlap(args: OverlapArgs) -> Result<()> {
    let mut results = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let report: EvalReport = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))?;
        results.push(EvalResult {
            metric: report.metric,
            em: report.em,
            f1: report.f1,
            per_question: report.per_question,
        });
    }
    let regions = overlap_sets(&results).map_err(|e| anyhow!("{e}"))?;
    let k = results.len();
    let entries: Vec<serde_json::Value> = regions
        .iter()
        .enumerate()
        .map(|(mask, count)| {
            let members: Vec<usize> = (0..k).filter(|m| mask & (1 << m) != 0).collect();
            serde_json::json!({ "models": members, "count": count })
        })
        .collect();
    let doc = serde_json::json!({
        "n_models": k,
        "n_questions": regions.iter().sum::<usize>(),
        "regions": entries,
    });
    println!("{doc}");
    Ok(())
}
