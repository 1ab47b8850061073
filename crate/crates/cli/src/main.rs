use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use collabonet::collab::{
    continue_collabonet, evaluate_split, predict_split, run_preparation_phase, CollaboState, MetricsRecord,
};
use collabonet::corpus::{
    bio_spans, bio_to_bioes, bioes_to_bio, bioes_to_spans, parse_conll, parse_tag, write_conll, BioMode, DatasetBundle,
    ParseOptions,
};
use collabonet::embedding::{load_word_embeddings, WordEmbeddingTable};
use collabonet::eval::{repaired_spans, EvalReport};
use collabonet::train::{load_checkpoint, save_checkpoint, RunConfig};
use collabonet::{Span, Tag};

#[derive(Parser)]
#[command(name = "collabonet", version, about = "Train and evaluate collaborating BiLSTM-CRF entity taggers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every model alone and save the best checkpoint of each.
    Prep(PrepArgs),
    /// Run collaboration phases starting from a checkpoint.
    Collab(CollabArgs),
    /// Score a checkpoint on a split, with and without tag repair.
    Eval(EvalArgs),
    /// Tag a CoNLL token file with one model of a checkpoint.
    Predict(PredictArgs),
    /// Compare a predicted tag file against a gold tag file.
    Score(ScoreArgs),
    /// Convert a tag file between BIO and BIOES.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides any config key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        require_file(&self.config)?;
        let mut cfg = RunConfig::from_file(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not key=value"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PrepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log to write; defaults to standard output.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct CollabArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the state with the best macro-average dev F1.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the state after the last phase.
    #[arg(long)]
    last: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Restrict to one dataset.
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Name of the model (dataset) to tag with.
    #[arg(long)]
    dataset: String,
    /// CoNLL file; the first column is the token.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    constrained: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scheme {
    Bio,
    Bioes,
}

#[derive(Args)]
struct ScoreArgs {
    /// Predicted tags in the last column.
    #[arg(long)]
    pred: PathBuf,
    /// Gold tags in the last column.
    #[arg(long)]
    gold: PathBuf,
    /// Spans of other entity types, for the error taxonomy.
    #[arg(long)]
    other: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bioes")]
    scheme: Scheme,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long, value_enum)]
    from: Scheme,
    #[arg(long, value_enum)]
    to: Scheme,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_state(path: &Path) -> Result<CollaboState> {
    require_file(path)?;
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn check_models(state: &CollaboState, datasets: &[DatasetBundle], cfg: &RunConfig) -> Result<()> {
    let names: Vec<&str> = state.models.iter().map(|m| m.name.as_str()).collect();
    let wanted: Vec<&str> = datasets.iter().map(|d| d.name.as_str()).collect();
    if names != wanted {
        bail!("checkpoint models {names:?} do not match configured datasets {wanted:?}");
    }
    if state.config_fingerprint != cfg.fingerprint() {
        log::warn!("config differs from the one the checkpoint was trained with");
    }
    Ok(())
}

fn load_embeddings(cfg: &RunConfig) -> Result<Option<WordEmbeddingTable>> {
    let Some(path) = &cfg.embeddings else { return Ok(None) };
    require_file(path)?;
    let file = File::open(path)?;
    Ok(Some(load_word_embeddings(BufReader::new(file), &path.display().to_string())?))
}

fn write_metrics(out: &mut dyn Write, records: &[MetricsRecord]) -> Result<()> {
    writeln!(out, "{}", MetricsRecord::HEADER)?;
    for r in records {
        writeln!(out, "{r}")?;
    }
    Ok(())
}

fn prep(args: &PrepArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let datasets = cfg.load_datasets()?;
    let embeddings = load_embeddings(&cfg)?;
    let outcome = run_preparation_phase(&datasets, &cfg, embeddings.as_ref())?;
    save_checkpoint(&outcome.state, &args.out)?;
    write_metrics(&mut *output(args.metrics.as_deref())?, &outcome.records)
}

fn collab(args: &CollabArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let state = load_state(&args.checkpoint)?;
    let datasets = cfg.load_datasets()?;
    check_models(&state, &datasets, &cfg)?;
    let mut log = output(args.metrics.as_deref())?;
    writeln!(log, "{}", MetricsRecord::HEADER)?;
    let mut failed = None;
    let outcome = continue_collabonet(state, &datasets, &cfg, &mut |r| {
        if let Err(e) = writeln!(log, "{r}").and_then(|_| log.flush()) {
            failed.get_or_insert(e);
        }
    })?;
    if let Some(e) = failed {
        return Err(e.into());
    }
    save_checkpoint(&outcome.best, &args.out)?;
    if let Some(p) = &args.last {
        save_checkpoint(&outcome.last, p)?;
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let state = load_state(&args.checkpoint)?;
    let datasets = cfg.load_datasets()?;
    check_models(&state, &datasets, &cfg)?;
    let mut found = false;
    for (d, ds) in datasets.iter().enumerate() {
        if args.dataset.as_ref().is_some_and(|n| *n != ds.name) {
            continue;
        }
        found = true;
        let sentences = match args.split {
            Split::Train => &ds.train,
            Split::Dev => &ds.dev,
            Split::Test => &ds.test,
        };
        if sentences.is_empty() {
            println!("{}: split is empty", ds.name);
            continue;
        }
        for repair in [true, false] {
            let report = evaluate_split(&state, d, sentences, None, repair, cfg.constrained_viterbi)?;
            let label = if repair { "repaired" } else { "raw" };
            println!("{} {label}: {report}", ds.name);
        }
    }
    if !found {
        bail!("no dataset named {:?}", args.dataset.as_deref().unwrap_or(""));
    }
    Ok(())
}

/// Lines of a CoNLL file grouped into sentences.
fn read_blocks(path: &Path) -> Result<Vec<Vec<String>>> {
    require_file(path)?;
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut blocks = vec![Vec::new()];
    for line in BufReader::new(file).lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !blocks.last().unwrap().is_empty() {
                blocks.push(Vec::new());
            }
        } else {
            blocks.last_mut().unwrap().push(line.to_string());
        }
    }
    if blocks.last().is_some_and(Vec::is_empty) {
        blocks.pop();
    }
    Ok(blocks)
}

fn predict(args: &PredictArgs) -> Result<()> {
    let blocks = read_blocks(&args.input)?;
    let state = load_state(&args.checkpoint)?;
    let d = state
        .model_index(&args.dataset)
        .with_context(|| format!("checkpoint has no model named {:?}", args.dataset))?;
    let tokens: Vec<Vec<String>> = blocks
        .iter()
        .map(|b| b.iter().map(|l| l.split('\t').next().unwrap_or("").to_string()).collect())
        .collect();
    let slices: Vec<&[String]> = tokens.iter().map(Vec::as_slice).collect();
    let tags = predict_split(&state, d, &slices, args.constrained)?;
    let suffix = state.models[d].entity_suffix.as_deref();
    let mut out = output(args.output.as_deref())?;
    for (block, tags) in blocks.iter().zip(&tags) {
        for (line, tag) in block.iter().zip(tags) {
            writeln!(out, "{line}\t{}", tag.render(suffix))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Tokens and tags read from the first and last columns.
fn read_tagged(path: &Path) -> Result<Vec<(Vec<String>, Vec<Tag>)>> {
    read_blocks(path)?
        .into_iter()
        .map(|block| {
            let mut tokens = Vec::with_capacity(block.len());
            let mut tags = Vec::with_capacity(block.len());
            for line in block {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() < 2 {
                    bail!("{}: expected token and tag columns in {line:?}", path.display());
                }
                let raw = fields[fields.len() - 1];
                let (tag, _) = parse_tag(raw).with_context(|| format!("{}: unknown tag {raw:?}", path.display()))?;
                tokens.push(fields[0].to_string());
                tags.push(tag);
            }
            Ok((tokens, tags))
        })
        .collect()
}

fn spans(tags: &[Tag], scheme: Scheme, lenient: bool) -> Result<Vec<Span>> {
    let bioes = match scheme {
        Scheme::Bioes => tags.to_vec(),
        Scheme::Bio if lenient => bio_to_bioes(tags, BioMode::Lenient)?,
        Scheme::Bio => return Ok(bio_spans(tags)?),
    };
    Ok(if lenient { repaired_spans(&bioes) } else { bioes_to_spans(&bioes)? })
}

fn score(args: &ScoreArgs) -> Result<()> {
    let pred = read_tagged(&args.pred)?;
    let gold = read_tagged(&args.gold)?;
    let other = args.other.as_deref().map(read_tagged).transpose()?;
    if pred.len() != gold.len() {
        bail!("{} has {} sentences but {} has {}", args.pred.display(), pred.len(), args.gold.display(), gold.len());
    }
    for (i, (p, g)) in pred.iter().zip(&gold).enumerate() {
        if p.0 != g.0 {
            bail!("sentence {} differs in tokens between prediction and gold", i + 1);
        }
    }
    let pred_spans = pred.iter().map(|(_, t)| spans(t, args.scheme, true)).collect::<Result<Vec<_>>>()?;
    let gold_spans = gold.iter().map(|(_, t)| spans(t, args.scheme, false)).collect::<Result<Vec<_>>>()?;
    let other_spans = match other {
        Some(o) => {
            if o.len() != gold.len() {
                bail!("{} has {} sentences, expected {}", args.other.as_ref().unwrap().display(), o.len(), gold.len());
            }
            o.iter().map(|(_, t)| spans(t, args.scheme, false)).collect::<Result<Vec<_>>>()?
        }
        None => vec![Vec::new(); gold.len()],
    };
    println!("{}", EvalReport::new(&pred_spans, &gold_spans, &other_spans));
    Ok(())
}

fn convert(args: &ConvertArgs) -> Result<()> {
    require_file(&args.input)?;
    let file = File::open(&args.input)?;
    let corpus = parse_conll(BufReader::new(file), &args.input.display().to_string(), &ParseOptions::default())?;
    let mut sentences = corpus.sentences;
    for s in &mut sentences {
        s.tags = match (args.from, args.to) {
            (Scheme::Bio, Scheme::Bioes) => bio_to_bioes(&s.tags, BioMode::Strict)?,
            (Scheme::Bioes, Scheme::Bio) => bioes_to_bio(&s.tags)?,
            (Scheme::Bio, Scheme::Bio) => {
                bio_spans(&s.tags)?;
                s.tags.clone()
            }
            (Scheme::Bioes, Scheme::Bioes) => {
                bioes_to_spans(&s.tags)?;
                s.tags.clone()
            }
        };
    }
    output(args.output.as_deref())?.write_all(write_conll(&sentences, corpus.entity_suffix.as_deref()).as_bytes())?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Prep(a) => prep(a),
        Command::Collab(a) => collab(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Score(a) => score(a),
        Command::Convert(a) => convert(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
