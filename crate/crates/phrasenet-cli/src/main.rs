//! Single executable tying the pipeline together: preprocessing, synthetic
//! corpus generation, training, translation, evaluation and gradient checks.
//! Logs go to standard error; data goes to files or standard output.

mod config;

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::{load_file_config, Preset};
use phrasenet::checkpoint::{load_checkpoint, save_checkpoint, RngState, TrainState};
use phrasenet::corpus::{build_vocab, make_batches, make_example, read_parallel, read_token_lines, Vocabulary};
use phrasenet::decoder::DecodeChoice;
use phrasenet::evaluator::{corpus_bleu, phrase_accuracy};
use phrasenet::model::{Model, ModelConfig, Variant};
use phrasenet::phrase::{annotate, load_table, PhraseTable};
use phrasenet::search::{decode_beam, decode_greedy, prepare_input};
use phrasenet::synth::{generate_synthetic, read_metadata, SynthConfig};
use phrasenet::trainer::{train_epoch, verify_gradients, Adam, AdamConfig};

#[derive(Parser)]
#[command(name = "phrasenet", version, about = "Attention translator with an external phrase memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Annotate a corpus against a phrase table and dump the results.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic parallel corpus with an embedded phrase table.
    Synth(SynthArgs),
    /// Train a model and write checkpoints plus a metrics CSV.
    Train(TrainArgs),
    /// Translate sentences with a trained model.
    Translate(TranslateArgs),
    /// Score candidate translations (BLEU, optionally phrase accuracy).
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Phrase table file (source TAB target per line).
    #[arg(long)]
    table: PathBuf,
    /// Source sentences, one per line.
    #[arg(long)]
    source: PathBuf,
    /// Optional reference translations for gold-segment annotation.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    n_slots: usize,
    /// Output JSON-lines file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML config with a [synth] section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    n_templates: Option<usize>,
    #[arg(long)]
    n_rules: Option<usize>,
    #[arg(long)]
    oov_fraction: Option<f64>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    dev_pairs: Option<usize>,
    #[arg(long)]
    test_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_src: Option<PathBuf>,
    #[arg(long)]
    train_tgt: Option<PathBuf>,
    /// Phrase table (ignored by the baseline variant).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long)]
    d_embed: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    n_slots: Option<usize>,
    /// Vocabulary size cap for both sides.
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Data-parallel gradient workers (1 = deterministic reference mode).
    #[arg(long)]
    workers: Option<usize>,
    /// Save a checkpoint every N epochs in addition to the final one.
    #[arg(long)]
    save_every: Option<usize>,
    /// Resume from a checkpoint (must match the configuration).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run a gradient verification first and abort on failure.
    #[arg(long)]
    grad_check: bool,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Phrase table; may be omitted for baseline checkpoints.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Input sentences, one per line; "-" reads standard input.
    #[arg(long)]
    input: PathBuf,
    /// Output file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Source vocabulary (defaults to vocab.src.txt next to the checkpoint).
    #[arg(long)]
    vocab_src: Option<PathBuf>,
    #[arg(long)]
    vocab_tgt: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 80)]
    max_len: usize,
    /// Print per-step mode decisions to standard error (beam 1 only).
    #[arg(long)]
    trace: bool,
    /// Write per-sentence attention matrices as JSON lines (beam 1 only).
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    /// Synthetic generator metadata for phrase accuracy.
    #[arg(long)]
    metadata: Option<PathBuf>,
    /// Emit the report as JSON instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    /// gate, softmax, or both.
    #[arg(long, default_value = "both")]
    variant: String,
    #[arg(long, default_value_t = 8)]
    d_embed: usize,
    #[arg(long, default_value_t = 12)]
    d_hidden: usize,
    #[arg(long, default_value_t = 3)]
    n_slots: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight scale of the checked model. The default keeps recurrent
    /// states well away from zero so every gradient is resolvable by
    /// central differences.
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<phrasenet::Error> for CliError {
    fn from(e: phrasenet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => cmd_grad_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        None => Ok(Box::new(std::io::stdout().lock())),
        Some(p) => {
            let f = std::fs::File::create(p)
                .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", p.display())))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        }
    }
}

fn cmd_preprocess(args: PreprocessArgs) -> CliResult<()> {
    require_file(&args.table, "phrase table")?;
    require_file(&args.source, "source corpus")?;
    if let Some(r) = &args.reference {
        require_file(r, "reference corpus")?;
    }
    let table = load_table(&args.table)?;
    let sources = read_token_lines(&args.source)?;
    let references = match &args.reference {
        Some(r) => {
            let lines = read_token_lines(r)?;
            if lines.len() != sources.len() {
                return Err(CliError::Usage(format!(
                    "{} source lines vs {} reference lines",
                    sources.len(),
                    lines.len()
                )));
            }
            Some(lines)
        }
        None => None,
    };

    let mut out = open_output(args.out.as_deref())?;
    let mut with_phrases = 0usize;
    let mut covered = 0usize;
    let mut tokens = 0usize;
    for (index, source) in sources.iter().enumerate() {
        let reference = references.as_ref().map(|r| r[index].as_slice());
        let ann = annotate(&table, source, reference, args.n_slots);
        if !ann.occurrences.is_empty() {
            with_phrases += 1;
        }
        covered += ann.occurrences.iter().map(|o| o.source_span.len()).sum::<usize>();
        tokens += source.len();
        let record = serde_json::json!({ "index": index, "annotation": ann });
        writeln!(out, "{record}").map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    out.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    eprintln!(
        "annotated {} sentences: {} with at least one phrase, mean coverage {:.4}",
        sources.len(),
        with_phrases,
        if tokens > 0 { covered as f64 / tokens as f64 } else { 0.0 }
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    if let Some(c) = &args.config {
        require_file(c, "config file")?;
    }
    let file = load_file_config(args.config.as_deref())?;
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        vocab_size: args.vocab_size.or(file.synth.vocab_size).unwrap_or(defaults.vocab_size),
        n_templates: args.n_templates.or(file.synth.n_templates).unwrap_or(defaults.n_templates),
        n_rules: args.n_rules.or(file.synth.n_rules).unwrap_or(defaults.n_rules),
        oov_fraction: args.oov_fraction.or(file.synth.oov_fraction).unwrap_or(defaults.oov_fraction),
        n_pairs: args.n_pairs.or(file.synth.n_pairs).unwrap_or(defaults.n_pairs),
        dev_pairs: args.dev_pairs.or(file.synth.dev_pairs).unwrap_or(defaults.dev_pairs),
        test_pairs: args.test_pairs.or(file.synth.test_pairs).unwrap_or(defaults.test_pairs),
        seed: args.seed.or(file.synth.seed).unwrap_or(defaults.seed),
    };
    let corpus = generate_synthetic(&cfg)?;
    corpus.write_to(&args.out)?;
    eprintln!(
        "wrote {} train / {} dev / {} test pairs and {} rules to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.table.len(),
        args.out.display()
    );
    Ok(())
}

struct TrainSetup {
    variant: Variant,
    model_cfg: ModelConfig,
    examples: Vec<phrasenet::corpus::ParallelExample>,
    source_vocab: Vocabulary,
    target_vocab: Vocabulary,
    adam: AdamConfig,
    batch_size: usize,
    epochs: usize,
    max_len: usize,
    max_steps: Option<u64>,
    seed: u64,
    workers: usize,
    save_every: usize,
    out_dir: PathBuf,
}

fn build_train_setup(args: &TrainArgs) -> CliResult<TrainSetup> {
    if let Some(c) = &args.config {
        require_file(c, "config file")?;
    }
    let file = load_file_config(args.config.as_deref())?;
    let preset = args.preset.map(|p| p.dims());

    let variant_name = args
        .variant
        .clone()
        .or(file.model.variant.clone())
        .unwrap_or_else(|| "gate".to_string());
    let variant =
        config::parse_variant(&variant_name).map_err(|e| CliError::Usage(e.to_string()))?;

    let train_src = args
        .train_src
        .clone()
        .ok_or_else(|| CliError::Usage("--train-src is required".into()))?;
    let train_tgt = args
        .train_tgt
        .clone()
        .ok_or_else(|| CliError::Usage("--train-tgt is required".into()))?;
    let out_dir = args
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
    require_file(&train_src, "training source corpus")?;
    require_file(&train_tgt, "training target corpus")?;

    let table = if variant == Variant::Baseline {
        PhraseTable::new()
    } else {
        let path = args
            .table
            .clone()
            .ok_or_else(|| CliError::Usage("--table is required for phrase variants".into()))?;
        require_file(&path, "phrase table")?;
        load_table(&path)?
    };

    let d_embed = args
        .d_embed
        .or(file.model.d_embed)
        .or(preset.as_ref().map(|p| p.d_embed))
        .unwrap_or(16);
    let d_hidden = args
        .d_hidden
        .or(file.model.d_hidden)
        .or(preset.as_ref().map(|p| p.d_hidden))
        .unwrap_or(32);
    let n_slots = args
        .n_slots
        .or(file.model.n_slots)
        .or(preset.as_ref().map(|p| p.n_slots))
        .unwrap_or(10);
    let vocab_cap = args
        .vocab_size
        .or(file.model.source_vocab)
        .or(preset.as_ref().map(|p| p.vocab_cap))
        .unwrap_or(120);
    let tgt_cap = args.vocab_size.or(file.model.target_vocab).or(Some(vocab_cap)).unwrap();

    let pairs = read_parallel(&train_src, &train_tgt)?;
    if pairs.is_empty() {
        return Err(CliError::Usage("training corpus is empty".into()));
    }
    let src_built = build_vocab(pairs.iter().map(|(s, _)| s.as_slice()), vocab_cap)?;
    let tgt_built = build_vocab(pairs.iter().map(|(_, t)| t.as_slice()), tgt_cap)?;
    eprintln!(
        "vocabularies: {} source entries ({:.2}% coverage), {} target entries ({:.2}% coverage)",
        src_built.vocab.len(),
        100.0 * src_built.coverage,
        tgt_built.vocab.len(),
        100.0 * tgt_built.coverage
    );

    let mut examples = Vec::with_capacity(pairs.len());
    for (s, t) in &pairs {
        examples.push(make_example(s, t, &table, &src_built.vocab, &tgt_built.vocab, n_slots)?);
    }

    let mut model_cfg = ModelConfig::new(
        variant,
        d_embed,
        d_hidden,
        n_slots,
        src_built.vocab.len(),
        tgt_built.vocab.len(),
    );
    if let Some(flag) = file.model.gate_factor_on_words {
        model_cfg.gate_factor_on_words = flag;
    }

    let adam = AdamConfig {
        lr: args.lr.or(file.train.lr).unwrap_or(1e-3),
        clip_norm: args.clip_norm.or(file.train.clip_norm).unwrap_or(5.0),
        ..AdamConfig::default()
    };
    Ok(TrainSetup {
        variant,
        model_cfg,
        examples,
        source_vocab: src_built.vocab,
        target_vocab: tgt_built.vocab,
        adam,
        batch_size: args.batch_size.or(file.train.batch_size).unwrap_or(16),
        epochs: args.epochs.or(file.train.epochs).unwrap_or(10),
        max_len: args.max_len.or(file.train.max_len).unwrap_or(50),
        max_steps: args.max_steps.or(file.train.max_steps).filter(|&s| s > 0),
        seed: args.seed.or(file.train.seed).unwrap_or(1),
        workers: args.workers.or(file.train.workers).unwrap_or(1),
        save_every: args.save_every.or(file.train.save_every).unwrap_or(0),
        out_dir,
    })
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let setup = build_train_setup(&args)?;
    std::fs::create_dir_all(&setup.out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;

    let (mut model, mut opt, start_epoch) = match &args.resume {
        None => {
            let model: Model<f64> = Model::new(setup.model_cfg.clone(), setup.seed)?;
            let opt = Adam::new(&model, setup.adam);
            (model, opt, 0usize)
        }
        Some(path) => {
            require_file(path, "checkpoint")?;
            let state: TrainState<f64> = load_checkpoint(path)?;
            state.ensure_config(&setup.model_cfg)?;
            let start = state.rng.map(|r| r.position as usize).unwrap_or(0);
            let opt = match state.optimizer {
                Some(o) => o,
                None => Adam::new(&state.model, setup.adam),
            };
            eprintln!("resumed from {} at step {}", path.display(), state.step);
            (state.model, opt, start)
        }
    };

    setup.source_vocab.write_to(&setup.out_dir.join("vocab.src.txt"))?;
    setup.target_vocab.write_to(&setup.out_dir.join("vocab.tgt.txt"))?;

    if args.grad_check {
        eprintln!("verifying gradients before training (reference-scaled model of the same shape)");
        run_grad_check(GradCheckArgs {
            variant: setup.variant.as_str().to_string(),
            d_embed: setup.model_cfg.d_embed.min(8),
            d_hidden: setup.model_cfg.d_hidden.min(12),
            n_slots: setup.model_cfg.n_slots.min(3),
            step: 1e-5,
            tol: 1e-4,
            seed: 0,
            init_scale: 1.0,
        })?;
    }

    let metrics_path = setup.out_dir.join("metrics.csv");
    let fresh = !metrics_path.exists();
    let metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut metrics = std::io::BufWriter::new(metrics_file);
    if fresh {
        writeln!(metrics, "step,loss,perplexity,gate_rate").map_err(|e| CliError::Runtime(e.to_string()))?;
    }

    let mut done = false;
    for epoch in start_epoch..setup.epochs {
        if done {
            break;
        }
        let batches = make_batches(
            &setup.examples,
            setup.batch_size,
            setup.max_len,
            setup.seed.wrapping_add(epoch as u64),
        )?;
        let limit = setup.max_steps;
        let mut rows: Vec<String> = Vec::new();
        let summary = {
            let rows = &mut rows;
            let before = opt.step;
            let batches: Vec<_> = match limit {
                None => batches,
                Some(max) => {
                    let remaining = max.saturating_sub(before) as usize;
                    batches.into_iter().take(remaining).collect()
                }
            };
            if batches.is_empty() {
                done = true;
            }
            train_epoch(&mut model, &batches, &mut opt, setup.workers, |m| {
                rows.push(format!("{},{},{},{}", m.step, m.loss, m.perplexity, m.gate_rate));
            })?
        };
        for row in rows {
            writeln!(metrics, "{row}").map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        metrics.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
        eprintln!(
            "epoch {epoch}: mean loss {:.4}, perplexity {:.3}, gate rate {:.4} ({} steps)",
            summary.mean_loss, summary.perplexity, summary.gate_rate, opt.step
        );
        if setup.save_every > 0 && (epoch + 1) % setup.save_every == 0 {
            let path = setup.out_dir.join(format!("epoch_{epoch}.pnmt"));
            save_checkpoint(
                &path,
                &model,
                Some(&opt),
                Some(RngState { seed: setup.seed, position: (epoch + 1) as u128 }),
                opt.step,
            )?;
        }
        if let Some(max) = setup.max_steps {
            if opt.step >= max {
                done = true;
            }
        }
    }
    let final_path = setup.out_dir.join("final.pnmt");
    save_checkpoint(
        &final_path,
        &model,
        Some(&opt),
        Some(RngState { seed: setup.seed, position: setup.epochs as u128 }),
        opt.step,
    )?;
    eprintln!("saved {}", final_path.display());
    Ok(())
}

fn read_input_lines(path: &Path) -> CliResult<Vec<Vec<String>>> {
    if path.as_os_str() == "-" {
        let mut text = String::new();
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(text
            .lines()
            .map(|l| l.split_whitespace().map(str::to_string).collect())
            .collect())
    } else {
        require_file(path, "input")?;
        Ok(read_token_lines(path)?)
    }
}

fn cmd_translate(args: TranslateArgs) -> CliResult<()> {
    require_file(&args.checkpoint, "checkpoint")?;
    if args.beam > 1 && (args.trace || args.dump_attention.is_some()) {
        return Err(CliError::Usage("--trace and --dump-attention require beam 1".into()));
    }
    let state: TrainState<f64> = load_checkpoint(&args.checkpoint)?;
    let model = state.model;

    let sibling = |name: &str| args.checkpoint.parent().unwrap_or(Path::new(".")).join(name);
    let vocab_src_path = args.vocab_src.clone().unwrap_or_else(|| sibling("vocab.src.txt"));
    let vocab_tgt_path = args.vocab_tgt.clone().unwrap_or_else(|| sibling("vocab.tgt.txt"));
    require_file(&vocab_src_path, "source vocabulary")?;
    require_file(&vocab_tgt_path, "target vocabulary")?;
    let source_vocab = Vocabulary::read_from(&vocab_src_path)?;
    let target_vocab = Vocabulary::read_from(&vocab_tgt_path)?;
    if source_vocab.len() != model.config.source_vocab || target_vocab.len() != model.config.target_vocab {
        return Err(CliError::Usage(format!(
            "vocabulary sizes ({}, {}) disagree with the checkpoint ({}, {})",
            source_vocab.len(),
            target_vocab.len(),
            model.config.source_vocab,
            model.config.target_vocab
        )));
    }

    let table = match (&args.table, model.config.variant) {
        (_, Variant::Baseline) => PhraseTable::new(),
        (Some(path), _) => {
            require_file(path, "phrase table")?;
            load_table(path)?
        }
        (None, _) => {
            return Err(CliError::Usage("--table is required for phrase variants".into()));
        }
    };

    let sentences = read_input_lines(&args.input)?;
    let mut out = open_output(args.output.as_deref())?;
    let mut attention_out = match &args.dump_attention {
        None => None,
        Some(p) => Some(open_output(Some(p))?),
    };
    for (index, sentence) in sentences.iter().enumerate() {
        if sentence.is_empty() {
            writeln!(out).map_err(|e| CliError::Runtime(e.to_string()))?;
            continue;
        }
        let input = prepare_input(&model.config, sentence, &table, &source_vocab, &target_vocab);
        let result = if args.beam > 1 {
            decode_beam(&model, &input, &target_vocab, args.beam, args.max_len)?
        } else {
            decode_greedy(&model, &input, &target_vocab, args.max_len)?
        };
        if args.trace {
            for t in &result.trace {
                let mode = match t.choice {
                    DecodeChoice::Word(id) => format!("word {} ({})", id, target_vocab.token(id)),
                    DecodeChoice::Phrase(ci) => {
                        format!("phrase {} ({})", ci, input.candidates[ci].target_tokens.join(" "))
                    }
                };
                let words: Vec<String> = t
                    .top_words
                    .iter()
                    .map(|(id, p)| format!("{}:{:.4}", target_vocab.token(*id), p))
                    .collect();
                let phrases: Vec<String> =
                    t.phrase_probs.iter().map(|(ci, p)| format!("{ci}:{p:.4}")).collect();
                eprintln!(
                    "sentence {index} position {}: mode={mode} gate={} top_words=[{}] phrases=[{}]",
                    t.position,
                    t.mode_prior.map(|g| format!("{g:.4}")).unwrap_or_else(|| "-".into()),
                    words.join(","),
                    phrases.join(",")
                );
            }
        }
        if let Some(w) = attention_out.as_mut() {
            let record = serde_json::json!({ "index": index, "alpha": result.attention });
            writeln!(w, "{record}").map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        writeln!(out, "{}", result.tokens.join(" ")).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    out.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    require_file(&args.candidates, "candidates")?;
    require_file(&args.references, "references")?;
    let candidates = read_token_lines(&args.candidates)?;
    let references = read_token_lines(&args.references)?;
    if candidates.len() != references.len() {
        return Err(CliError::Usage(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let report = corpus_bleu(&candidates, &references)?;

    let accuracy = match &args.metadata {
        None => None,
        Some(path) => {
            require_file(path, "metadata")?;
            let meta = read_metadata(path)?;
            if meta.len() != candidates.len() {
                return Err(CliError::Usage(format!(
                    "{} metadata records vs {} candidates",
                    meta.len(),
                    candidates.len()
                )));
            }
            let overall = phrase_accuracy(&candidates, &meta)?;
            let oov_meta: Vec<Vec<phrasenet::synth::Placement>> = meta
                .iter()
                .map(|ps| ps.iter().filter(|p| p.oov_rule).cloned().collect())
                .collect();
            let oov = phrase_accuracy(&candidates, &oov_meta)?;
            Some((overall, oov))
        }
    };

    if args.json {
        let mut value = serde_json::json!({ "bleu": report });
        if let Some((overall, oov)) = &accuracy {
            value["phrase_accuracy"] = serde_json::json!(overall);
            value["oov_phrase_accuracy"] = serde_json::json!(oov);
        }
        println!("{value}");
    } else {
        println!(
            "BLEU = {:.4}  (p1 {:.4} / p2 {:.4} / p3 {:.4} / p4 {:.4}, BP {:.4}, {} sentences)",
            report.bleu,
            report.precisions[0],
            report.precisions[1],
            report.precisions[2],
            report.precisions[3],
            report.brevity_penalty,
            report.sentences
        );
        println!("4-gram-only = {:.4}", report.four_gram);
        if let Some((overall, oov)) = &accuracy {
            println!(
                "phrase recall = {:.4}, position rate = {:.4} ({} expected)",
                overall.recall, overall.position_rate, overall.expected
            );
            println!(
                "OOV phrase recall = {:.4}, position rate = {:.4} ({} expected)",
                oov.recall, oov.position_rate, oov.expected
            );
        }
    }
    Ok(())
}

/// Built-in fixture for gradient verification: a tiny table plus two
/// examples, one with an in-vocabulary gold phrase and one whose gold
/// phrase contains an out-of-vocabulary token.
fn grad_check_fixture(
    variant: Variant,
    d_embed: usize,
    d_hidden: usize,
    n_slots: usize,
    seed: u64,
    init_scale: f64,
) -> CliResult<(Model<f64>, Vec<phrasenet::corpus::ParallelExample>)> {
    let toks = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let mut table = PhraseTable::new();
    table.insert(toks("s3 s4"), toks("t3 t4"))?;
    table.insert(toks("s7"), toks("qqq"))?;
    // decoy rules keep a second live candidate in each phrase softmax, so
    // the phrase scorer itself carries gradient
    table.insert(toks("s5"), toks("t8 t9"))?;
    table.insert(toks("s6"), toks("t7"))?;
    let src = [toks("s1 s2 s3 s4 s5 s6 s7 s8 s9 sa sb sc")];
    let tgt = [toks("t1 t2 t3 t4 t5 t6 t7 t8 t9 ta tb tc")];
    let sv = build_vocab(src.iter().map(|s| s.as_slice()), 20)?;
    let tv = build_vocab(tgt.iter().map(|s| s.as_slice()), 20)?;
    let examples = vec![
        make_example(&toks("s1 s3 s4 s5"), &toks("t1 t3 t4 t5"), &table, &sv.vocab, &tv.vocab, n_slots)?,
        make_example(&toks("s6 s7 s8"), &toks("t6 qqq t8"), &table, &sv.vocab, &tv.vocab, n_slots)?,
    ];
    let cfg = ModelConfig::new(variant, d_embed, d_hidden, n_slots, sv.vocab.len(), tv.vocab.len());
    let model = Model::with_init_scale(cfg, seed, init_scale)?;
    Ok((model, examples))
}

fn run_grad_check(args: GradCheckArgs) -> CliResult<()> {
    let variants: Vec<Variant> = match args.variant.as_str() {
        "both" => vec![Variant::Gate, Variant::Softmax],
        other => vec![config::parse_variant(other).map_err(|e| CliError::Usage(e.to_string()))?],
    };
    let mut all_pass = true;
    for variant in variants {
        let (model, examples) = grad_check_fixture(
            variant,
            args.d_embed,
            args.d_hidden,
            args.n_slots,
            args.seed,
            args.init_scale,
        )?;
        let report = verify_gradients(&model, &examples, args.step, args.tol)?;
        for check in &report.checks {
            println!(
                "{} {:24} max rel err {:.3e} (entry {})",
                if check.pass { "PASS" } else { "FAIL" },
                format!("{}/{}", variant.as_str(), check.name),
                check.max_rel_err,
                check.worst_index
            );
        }
        if !report.pass() {
            all_pass = false;
        }
    }
    if !all_pass {
        return Err(CliError::Runtime("gradient verification failed".into()));
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> CliResult<()> {
    run_grad_check(args)
}
