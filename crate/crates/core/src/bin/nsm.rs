//! Command-line driver: benchmark generation, training, evaluation, and
//! interactive inspection of decoded programs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use nsm::datagen::{Benchmark, BenchmarkSpec, Example};
use nsm::interpreter::{CurriculumConstraints, ExecCache, ProgramState, Token};
use nsm::kbstore::KnowledgeBase;
use nsm::learning::{
    build_vocab, prepare_examples, run_iml_reinforce, run_ml_phase, run_rl_phase,
    PreparedExample, TrainConfig, TrainMode, Trainer,
};
use nsm::metrics::evaluate;
use nsm::nn::{EncodedQuestion, Model, WordVocab};
use nsm::search::{beam_decode, PseudoGoldCache};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "nsm", about = "Train and run a neural program synthesizer over a symbolic knowledge base", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory
    GenData(GenDataArgs),
    /// Train from question-answer pairs only
    Train(TrainArgs),
    /// Evaluate a checkpoint on a benchmark split
    Eval(EvalArgs),
    /// Show decoded programs and per-step valid-token traces for a question
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 20)]
    properties: usize,
    #[arg(long, default_value_t = 5)]
    max_out_degree: usize,
    #[arg(long, default_value_t = 300)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    valid: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Benchmark directory (from gen-data)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints, cache, and the training log
    #[arg(long)]
    out: PathBuf,
    /// Optional flat key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// augmented | iml | plain
    #[arg(long, default_value = "augmented")]
    mode: TrainMode,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Optional `word v1 v2 ...` embedding file (otherwise frozen random)
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Continue from checkpoints already present in --out
    #[arg(long)]
    resume: bool,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_ml: Option<usize>,
    #[arg(long)]
    n_rl: Option<usize>,
    #[arg(long)]
    b_ml: Option<usize>,
    #[arg(long)]
    b_rl: Option<usize>,
    #[arg(long)]
    epochs_per_ml_round: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    g0: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    t_s: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    d_word: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    no_curriculum: bool,
    #[arg(long)]
    stage1_iterations: Option<usize>,
    #[arg(long)]
    max_expressions: Option<usize>,
    #[arg(long)]
    no_argminmax: bool,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    eval_beam: Option<usize>,
    #[arg(long)]
    rl_updates_per_iteration: Option<usize>,
    #[arg(long)]
    rl_warm_iterations: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    rl_g0: Option<f64>,
    #[arg(long)]
    rl_dropout: Option<f64>,
    #[arg(long)]
    rl_batch_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// train | valid | test
    #[arg(long, default_value = "test")]
    split: String,
    /// Report output path (json); defaults to stdout summary only
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 30)]
    max_tokens: usize,
    #[arg(long, default_value_t = 3)]
    max_expressions: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Question id from any split (e.g. q0012)
    #[arg(long)]
    id: Option<String>,
    /// Free-form question text (entities linked via the lexicon)
    #[arg(long)]
    question: Option<String>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 30)]
    max_tokens: usize,
    #[arg(long, default_value_t = 3)]
    max_expressions: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not usage errors
            use clap::error::ErrorKind::*;
            let _ = e.print();
            return match e.kind() {
                DisplayHelp | DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Inspect(args) => cmd_inspect(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = BenchmarkSpec {
        entities: args.entities,
        properties: args.properties,
        max_out_degree: args.max_out_degree,
        train: args.train,
        valid: args.valid,
        test: args.test,
        seed: args.seed,
    };
    let bench = nsm::datagen::generate_benchmark(&spec)?;
    bench.save(&args.out)?;
    println!(
        "wrote benchmark to {}: {} entities, {} properties, {} triples, {}/{}/{} questions",
        args.out.display(),
        bench.kb.entities().len(),
        bench.kb.properties().len(),
        bench.kb.num_triples(),
        bench.train.len(),
        bench.valid.len(),
        bench.test.len(),
    );
    Ok(())
}

/// Flat `key = value` file; `#` starts a comment.
fn load_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("config line {}: expected key=value", i + 1))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &args.config {
        let map = load_config_file(path)?;
        for (k, v) in &map {
            let bad = || format!("config key {k}: bad value {v:?}");
            match k.as_str() {
                "alpha" => cfg.alpha = v.parse().with_context(bad)?,
                "n_ml" => cfg.n_ml = v.parse().with_context(bad)?,
                "n_rl" => cfg.n_rl = v.parse().with_context(bad)?,
                "b_ml" => cfg.b_ml = v.parse().with_context(bad)?,
                "b_rl" => cfg.b_rl = v.parse().with_context(bad)?,
                "epochs_per_ml_round" => cfg.epochs_per_ml_round = v.parse().with_context(bad)?,
                "batch_size" => cfg.batch_size = v.parse().with_context(bad)?,
                "g0" => cfg.g0 = v.parse().with_context(bad)?,
                "beta" => cfg.beta = v.parse().with_context(bad)?,
                "m" => cfg.m = v.parse().with_context(bad)?,
                "t_s" => cfg.t_s = v.parse().with_context(bad)?,
                "rl_warm_iterations" => cfg.rl_warm_iterations = v.parse().with_context(bad)?,
                "rl_updates_per_iteration" => cfg.rl_updates_per_iteration = v.parse().with_context(bad)?,
                "dropout" => cfg.dropout = v.parse().with_context(bad)?,
                "d_word" => cfg.d_word = v.parse().with_context(bad)?,
                "d_hidden" => cfg.d_hidden = v.parse().with_context(bad)?,
                "seed" => cfg.seed = v.parse().with_context(bad)?,
                "curriculum" => cfg.curriculum = v.parse().with_context(bad)?,
                "stage1_iterations" => cfg.stage1_iterations = v.parse().with_context(bad)?,
                "max_expressions" => cfg.max_expressions = v.parse().with_context(bad)?,
                "enable_argminmax" => cfg.enable_argminmax = v.parse().with_context(bad)?,
                "max_tokens" => cfg.max_tokens = v.parse().with_context(bad)?,
                "eval_beam" => cfg.eval_beam = v.parse().with_context(bad)?,
                "eval_every" => cfg.eval_every = v.parse().with_context(bad)?,
                "rl_g0" => cfg.rl_g0 = Some(v.parse().with_context(bad)?),
                "rl_dropout" => cfg.rl_dropout = Some(v.parse().with_context(bad)?),
                "rl_batch_size" => cfg.rl_batch_size = Some(v.parse().with_context(bad)?),
                other => bail!("unknown config key {other:?}"),
            }
        }
    }
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        };
    }
    flag!(alpha);
    flag!(n_ml);
    flag!(n_rl);
    flag!(b_ml);
    flag!(b_rl);
    flag!(epochs_per_ml_round);
    flag!(batch_size);
    flag!(g0);
    flag!(beta);
    flag!(m);
    flag!(t_s);
    flag!(dropout);
    flag!(d_word);
    flag!(d_hidden);
    flag!(seed);
    flag!(stage1_iterations);
    flag!(max_expressions);
    flag!(max_tokens);
    flag!(eval_beam);
    flag!(rl_updates_per_iteration);
    flag!(rl_warm_iterations);
    flag!(eval_every);
    if let Some(v) = args.rl_g0 {
        cfg.rl_g0 = Some(v);
    }
    if let Some(v) = args.rl_dropout {
        cfg.rl_dropout = Some(v);
    }
    if let Some(v) = args.rl_batch_size {
        cfg.rl_batch_size = Some(v);
    }
    if args.no_curriculum {
        cfg.curriculum = false;
    }
    if args.no_argminmax {
        cfg.enable_argminmax = false;
    }
    Ok(cfg)
}

fn load_split(bench: &Benchmark, split: &str) -> Result<Vec<PreparedExample>> {
    let examples: &[Example] = match split {
        "train" => &bench.train,
        "valid" => &bench.valid,
        "test" => &bench.test,
        other => bail!("unknown split {other:?} (train|valid|test)"),
    };
    Ok(prepare_examples(examples, &bench.lexicon))
}

fn write_log(path: &Path, log: &[nsm::learning::LogEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in log {
        out.push_str(&serde_json::to_string(entry)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    if args.workers < 1 {
        bail!("--workers must be >= 1");
    }
    let bench = Benchmark::load(&args.data)
        .with_context(|| format!("loading benchmark {}", args.data.display()))?;
    let train = load_split(&bench, "train")?;
    let valid = load_split(&bench, "valid")?;
    let kb = &bench.kb;

    std::fs::create_dir_all(&args.out)?;
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "mode": args.mode,
            "workers": args.workers,
            "train": cfg,
        }))?,
    )?;

    let final_path = args.out.join("final.ckpt.json");
    let ml_path = args.out.join("ml.ckpt.json");
    let cache_path = args.out.join("cache.json");
    let log_path = args.out.join("log.jsonl");

    if args.resume && final_path.exists() {
        println!("{} already exists; nothing to do", final_path.display());
        return Ok(());
    }

    // phase-granular resume: a finished ML phase (checkpoint + cache) can
    // seed the policy-gradient phase directly
    let resume_rl = args.resume
        && args.mode == TrainMode::Augmented
        && ml_path.exists()
        && cache_path.exists();

    let outcome = if resume_rl {
        println!("resuming policy-gradient phase from {}", ml_path.display());
        let cache: PseudoGoldCache = serde_json::from_str(&std::fs::read_to_string(&cache_path)?)?;
        let mut log: Vec<nsm::learning::LogEntry> = std::fs::read_to_string(&log_path)
            .ok()
            .map(|text| {
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(serde_json::from_str)
                    .collect::<Result<_, _>>()
            })
            .transpose()?
            .unwrap_or_default();
        let vocab = load_vocab(&args, &train, &valid, &cfg)?;
        let rl_model = Model::new(
            cfg.rl_model_config(),
            vocab,
            kb.properties(),
            cfg.seed.wrapping_add(0x5eed),
        );
        let mut trainer = Trainer::new(rl_model, cfg.clone());
        trainer.set_cache(cache);
        run_rl_phase(&mut trainer, kb, &train, &valid, true, args.workers, &mut log)?;
        nsm::learning::TrainOutcome {
            model: trainer.model,
            cache: trainer.cache,
            log,
            ml_model: None,
        }
    } else if args.embeddings.is_some() {
        // mirror run_iml_reinforce but with the loaded vocabulary
        let vocab = load_vocab(&args, &train, &valid, &cfg)?;
        let model = Model::new(cfg.model_config(), vocab.clone(), kb.properties(), cfg.seed);
        let mut trainer = Trainer::new(model, cfg.clone());
        let mut log = Vec::new();
        let mut ml_model = None;
        if args.mode != TrainMode::PlainReinforce {
            run_ml_phase(&mut trainer, kb, &train, &valid, args.workers, &mut log)?;
            ml_model = Some(Model::from_checkpoint(trainer.model.to_checkpoint()));
            save_ml_artifacts(&args.out, ml_model.as_ref().unwrap(), &trainer.cache, &log)?;
        }
        if args.mode != TrainMode::IterativeMl {
            let rl_model = Model::new(
                cfg.rl_model_config(),
                vocab,
                kb.properties(),
                cfg.seed.wrapping_add(0x5eed),
            );
            trainer.reset_model(rl_model);
            let augment = args.mode == TrainMode::Augmented;
            run_rl_phase(&mut trainer, kb, &train, &valid, augment, args.workers, &mut log)?;
        }
        nsm::learning::TrainOutcome {
            model: trainer.model,
            cache: trainer.cache,
            log,
            ml_model,
        }
    } else {
        run_iml_reinforce(kb, &train, &valid, &cfg, args.mode, args.workers)?
    };

    if let Some(ml) = &outcome.ml_model {
        save_ml_artifacts(&args.out, ml, &outcome.cache, &outcome.log)?;
    }
    outcome.model.save(&final_path)?;
    std::fs::write(&cache_path, serde_json::to_string(&outcome.cache)?)?;
    write_log(&log_path, &outcome.log)?;

    if let Some(last) = outcome.log.last() {
        println!(
            "done: {} iterations, train F1 {:.3}, valid F1 {:.3}, cache coverage {:.3}",
            last.iteration, last.train_f1, last.valid_f1, last.cache_coverage
        );
    }
    println!("checkpoint: {}", final_path.display());
    Ok(())
}

fn save_ml_artifacts(
    out: &Path,
    ml_model: &Model,
    cache: &PseudoGoldCache,
    log: &[nsm::learning::LogEntry],
) -> Result<()> {
    ml_model.save(out.join("ml.ckpt.json"))?;
    std::fs::write(out.join("cache.json"), serde_json::to_string(cache)?)?;
    write_log(&out.join("log.jsonl"), log)?;
    Ok(())
}

fn load_vocab(
    args: &TrainArgs,
    train: &[PreparedExample],
    valid: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<WordVocab> {
    match &args.embeddings {
        Some(path) => Ok(WordVocab::from_embedding_file(path)
            .with_context(|| format!("loading embeddings {}", path.display()))?),
        None => Ok(build_vocab(train, valid, cfg)),
    }
}

fn eval_constraints(max_expressions: usize) -> CurriculumConstraints {
    CurriculumConstraints::unrestricted(max_expressions)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let bench = Benchmark::load(&args.data)?;
    let model = Model::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let data = load_split(&bench, &args.split)?;
    let constraints = eval_constraints(args.max_expressions);
    let report = evaluate(
        &model,
        &bench.kb,
        &data,
        &constraints,
        args.beam,
        args.max_tokens,
        args.workers.max(1),
    )?;
    println!(
        "{} split: {} questions, avg F1 {:.3}, precision {:.3}, recall {:.3}, accuracy {:.3}",
        args.split,
        data.len(),
        report.avg_f1,
        report.avg_precision,
        report.avg_recall,
        report.accuracy
    );
    for (bucket, stats) in &report.per_complexity {
        println!(
            "  {} expressions: {} questions, avg F1 {:.3}",
            bucket, stats.count, stats.avg_f1
        );
    }
    if let Some(out) = &args.out {
        if let Some(dir) = out.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
        println!("report: {}", out.display());
    }
    Ok(())
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let bench = Benchmark::load(&args.data)?;
    let model = Model::load(&args.checkpoint)?;
    let (words, gold): (Vec<String>, Option<String>) = match (&args.id, &args.question) {
        (Some(id), None) => {
            let ex = bench
                .train
                .iter()
                .chain(&bench.valid)
                .chain(&bench.test)
                .find(|e| &e.id == id)
                .with_context(|| format!("no question with id {id:?}"))?;
            (
                ex.question_words(),
                Some(format!("{:?}", ex.answer)),
            )
        }
        (None, Some(text)) => (
            text.split_whitespace().map(String::from).collect(),
            None,
        ),
        _ => bail!("pass exactly one of --id or --question"),
    };
    let (anon, spans) = nsm::datagen::anonymize_and_link(&words, &bench.lexicon);
    println!("question: {}", words.join(" "));
    println!("anonymized: {}", anon.join(" "));
    for (s, e, ent) in &spans {
        println!("  span {s}..={e} -> {ent}");
    }
    if let Some(gold) = gold {
        println!("gold answer: {gold}");
    }
    let question = EncodedQuestion {
        words: anon,
        spans,
    };
    let constraints = eval_constraints(args.max_expressions);
    let mut exec_cache = ExecCache::new();
    let decoded = beam_decode(
        &model,
        &bench.kb,
        &question,
        args.beam.max(1),
        &constraints,
        args.max_tokens,
        &mut exec_cache,
    )?;
    for (rank, d) in decoded.iter().enumerate() {
        println!();
        println!(
            "#{} log_prob {:.4}: {}",
            rank + 1,
            d.log_prob,
            d.program.text()
        );
        print_trace(&bench.kb, &question, &d.program, &constraints)?;
        let values: Vec<String> = d.denotation.iter().map(|v| v.to_string()).collect();
        println!("  denotation: {{{}}}", values.join(", "));
    }
    Ok(())
}

/// Replays a program showing, before each token, the exact valid-token set,
/// and after each `)`, the executed variable's value set in parentheses.
fn print_trace(
    kb: &KnowledgeBase,
    question: &EncodedQuestion,
    program: &nsm::interpreter::Program,
    constraints: &CurriculumConstraints,
) -> Result<()> {
    let mut state = ProgramState::new(question.linked_store());
    for (i, ent) in question.spans.iter().enumerate() {
        let store = state.store();
        let vals: Vec<String> = store
            .get(i)
            .map(|s| s.iter().map(|v| v.to_string()).collect())
            .unwrap_or_default();
        println!("  R{} = {} ({})", i + 1, ent.2, vals.join(", "));
    }
    for (step, token) in program.tokens.iter().enumerate() {
        let valid = state.valid_tokens(kb, constraints);
        let names: Vec<String> = valid.iter().map(|t| t.to_string()).collect();
        println!("  step {step}: valid {{{}}} -> {token}", names.join(", "));
        let executed = state
            .advance(kb, token, constraints, None)
            .with_context(|| format!("replaying token {token} at step {step}"))?;
        if let Some(result) = executed {
            let idx = state.store().len();
            let vals: Vec<String> = result.iter().map(|v| v.to_string()).collect();
            println!("    {} = ({})", Token::Var(idx - 1), vals.join(", "));
        }
    }
    Ok(())
}
