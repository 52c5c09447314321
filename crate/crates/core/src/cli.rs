//! Command-line front end: `generate`, `verify-lossless`, `bench`, `report`.
//!
//! Exit codes: `0` success, `2` configuration or input error, `3` runtime
//! failure (including a lossless check that finds a difference).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{self, BonusPolicy, EngineConfig, IterationRecord};
use crate::metrics::{self, CostModel, HardwareProfile, ModelProfile, RunMetrics};
use crate::model::io::{parse_field, parse_kv};
use crate::model::{
    DraftBehavior, Fallback, LanguageModel, ModelConfig, TableLm, TinyTransformer, TinyWeights,
};
use crate::sampling::Truncation;
use crate::tree::TreeConfig;
use crate::{Error, Result, TokenId};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "swiftdec",
    version,
    about = "Lossless self-drafting speculative decoding"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate tokens speculatively or autoregressively.
    Generate(GenerateArgs),
    /// Run both decoders with the same settings and compare their output.
    VerifyLossless(RunArgs),
    /// Sweep a grid of settings and write a CSV table.
    Bench(BenchArgs),
    /// Recompute metrics from a JSONL trace.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Swift,
    Ar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Ids,
    Text,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Model description (`key = value` lines); the default is the tiny
    /// transformer with vocabulary 256, 2 layers, hidden size 64, gamma 3.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Weight blob for the tiny transformer; seeded init when absent.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    /// File of whitespace-separated token ids.
    #[arg(long, conflicts_with = "random_prompt")]
    pub prompt: Option<PathBuf>,
    /// Synthesize a seeded prompt of this many tokens.
    #[arg(long)]
    pub random_prompt: Option<usize>,
}

/// Engine settings. Each flag overrides the value loaded with `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct EngineArgs {
    /// JSON file as printed by `--print-config`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Decoder to run; defaults to `swift`.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Number of tokens to generate.
    #[arg(long)]
    pub target: Option<usize>,
    /// Seed for sampling, tie-breaking and the random prompt.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Contextual penalty strength; 1.0 disables it.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Penalty window in tokens.
    #[arg(long)]
    pub window: Option<usize>,
    /// Nucleus truncation.
    #[arg(long, group = "truncation")]
    pub top_p: Option<f64>,
    /// Keep tokens with at least this fraction of the top probability.
    #[arg(long, group = "truncation")]
    pub min_p: Option<f64>,
    /// Entropy-adaptive truncation.
    #[arg(long, group = "truncation")]
    pub eta: Option<f64>,
    /// Comma-separated per-depth widths, e.g. `1,3,3,3`.
    #[arg(long)]
    pub tree: Option<TreeConfig>,
    /// N-grams retrieved per step.
    #[arg(long)]
    pub k: Option<usize>,
    /// Sink entries always kept in the partial cache.
    #[arg(long)]
    pub sink: Option<usize>,
    /// Partial cache size, sink included.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Emit only accepted draft tokens unless nothing was accepted.
    #[arg(long)]
    pub no_bonus: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Write the generated tokens here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Ids)]
    pub format: Format,
    /// JSONL trace, one iteration record per line.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Final partial cache as JSONL `{pos, layer, score}`.
    #[arg(long)]
    pub dump_cache: Option<PathBuf>,
    /// Final n-gram table as JSONL `{gram, freq}`.
    #[arg(long)]
    pub dump_ngrams: Option<PathBuf>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    /// Generation lengths to report, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "2048")]
    pub lengths: Vec<usize>,
    /// Values of `--k` to sweep.
    #[arg(long, value_delimiter = ',')]
    pub ks: Vec<usize>,
    /// Tree widths, separated by `;`.
    #[arg(long, value_delimiter = ';')]
    pub trees: Vec<TreeConfig>,
    /// Values of `--theta` to sweep.
    #[arg(long, value_delimiter = ',')]
    pub thetas: Vec<f64>,
    /// Values of `--window` to sweep.
    #[arg(long, value_delimiter = ',')]
    pub windows: Vec<usize>,
    /// Seeds per cell, counting up from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    /// Write the table here instead of standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Trace written by `generate --trace`.
    pub trace: PathBuf,
    /// Prompt length, for the autoregressive side of the cost model.
    #[arg(long, default_value_t = 1)]
    pub prompt_len: usize,
    /// Also write a `gen_len,alpha,speedup` CSV row here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Everything `--print-config` shows and `--config` reads back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub mode: Mode,
    pub engine: EngineConfig,
}

impl EngineArgs {
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let mut r = match &self.config {
            Some(path) => {
                let text = read_input(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ResolvedConfig {
                mode: Mode::Swift,
                engine: EngineConfig::default(),
            },
        };
        let e = &mut r.engine;
        if let Some(v) = self.mode {
            r.mode = v;
        }
        if let Some(v) = self.target {
            e.target_length = v;
        }
        if let Some(v) = self.seed {
            e.seed = v;
            e.sampler.seed = v;
        }
        if let Some(v) = self.temperature {
            e.sampler.temperature = v;
        }
        if let Some(v) = self.theta {
            e.sampler.theta = v;
        }
        if let Some(v) = self.window {
            e.sampler.window = v;
        }
        if let Some(v) = self.top_p {
            e.sampler.truncation = Truncation::TopP(v);
        }
        if let Some(v) = self.min_p {
            e.sampler.truncation = Truncation::MinP(v);
        }
        if let Some(v) = self.eta {
            e.sampler.truncation = Truncation::Eta(v);
        }
        if let Some(v) = &self.tree {
            e.tree = v.clone();
        }
        if let Some(v) = self.k {
            e.k = v;
        }
        if let Some(v) = self.sink {
            e.sink_size = v;
        }
        if let Some(v) = self.budget {
            e.budget = v;
        }
        if self.no_bonus {
            e.bonus = BonusPolicy::WhenStuck;
        }
        Ok(r)
    }
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses a model description. `backend = tiny` (the default) takes the
/// [`ModelConfig`] keys; `backend = table` takes `vocab_size`, `gamma`,
/// `order`, `fallback = successor|seeded`, `fallback_seed`,
/// `fallback_scale`, `draft = echo|disagree|blind` and `phrases`, a
/// `|`-separated list of token-id runs made deterministic.
pub fn load_model(args: &ModelArgs) -> Result<Box<dyn LanguageModel>> {
    let map = match &args.model {
        Some(path) => parse_kv(&read_input(path)?)?,
        None => Default::default(),
    };
    let backend = map.get("backend").map_or("tiny", String::as_str);
    match backend {
        "tiny" => {
            let config = ModelConfig::from_kv(&map)?;
            let model = match &args.weights {
                Some(path) => {
                    let file = File::open(path)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    let weights = TinyWeights::read_from(BufReader::new(file), &config)?;
                    TinyTransformer::from_weights(config, weights)?
                }
                None => TinyTransformer::new(config)?,
            };
            Ok(Box::new(model))
        }
        "table" => {
            let vocab = parse_field(&map, "vocab_size", 256usize)?;
            let gamma = parse_field(&map, "gamma", 3usize)?;
            let order = parse_field(&map, "order", 2usize)?;
            let fallback = match map.get("fallback").map_or("seeded", String::as_str) {
                "successor" => Fallback::Successor,
                "seeded" => Fallback::Seeded {
                    seed: parse_field(&map, "fallback_seed", 0u64)?,
                    scale: parse_field(&map, "fallback_scale", 2.0f32)?,
                },
                other => return Err(Error::Config(format!("unknown fallback `{other}`"))),
            };
            let draft = match map.get("draft").map_or("blind", String::as_str) {
                "echo" => DraftBehavior::Echo,
                "disagree" => DraftBehavior::Disagree,
                "blind" => DraftBehavior::Blind,
                other => return Err(Error::Config(format!("unknown draft behavior `{other}`"))),
            };
            let mut model = TableLm::new(vocab, gamma, order, fallback)?.with_draft(draft);
            if let Some(phrases) = map.get("phrases") {
                for phrase in phrases.split('|') {
                    model.insert_phrase(&parse_ids(phrase)?)?;
                }
            }
            Ok(Box::new(model))
        }
        other => Err(Error::Config(format!("unknown backend `{other}`"))),
    }
}

pub fn parse_ids(text: &str) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Parse(format!("`{t}` is not a token id")))
        })
        .collect()
}

/// Seeded uniform prompt over the vocabulary.
pub fn random_prompt(len: usize, vocab: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..len)
        .map(|_| rng.gen_range(0..vocab as TokenId))
        .collect()
}

fn load_prompt(args: &PromptArgs, vocab: usize, seed: u64) -> Result<Vec<TokenId>> {
    match (&args.prompt, args.random_prompt) {
        (Some(path), _) => parse_ids(&read_input(path)?),
        (None, Some(n)) => Ok(random_prompt(n, vocab, seed)),
        (None, None) => Ok(random_prompt(64, vocab, seed)),
    }
}

/// Byte-level rendering: each id becomes one byte, decoded lossily.
pub fn detokenize(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().map(|&t| (t % 256) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn render(tokens: &[TokenId], format: Format) -> String {
    match format {
        Format::Ids => {
            let mut s = tokens
                .iter()
                .map(TokenId::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            s.push('\n');
            s
        }
        Format::Text => detokenize(tokens),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::BudgetTooSmall { .. }
        | Error::WidthMismatch { .. }
        | Error::PromptTooShort { .. }
        | Error::Parse(_)
        | Error::Weights(_)
        | Error::GroupMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let resolved = args.run.engine.resolve()?;
    if args.print_config {
        println!("{}", serde_json::to_string_pretty(&resolved)?);
        return Ok(());
    }
    let model = load_model(&args.run.model)?;
    let config = resolved.engine;
    let prompt = load_prompt(&args.run.prompt, model.config().vocab_size, config.seed)?;

    let tokens = match resolved.mode {
        Mode::Ar => engine::generate_ar(&model, &prompt, &config)?,
        Mode::Swift => {
            let mut session = engine::prefill(&model, &prompt, config)?;
            session.run()?;
            if let Some(path) = &args.trace {
                let mut out = create(path)?;
                metrics::write_trace(session.records(), &mut out)?;
                out.flush()?;
            }
            if let Some(path) = &args.dump_cache {
                let mut out = create(path)?;
                session.partial_cache().dump_jsonl(&mut out)?;
                out.flush()?;
            }
            if let Some(path) = &args.dump_ngrams {
                let mut out = create(path)?;
                session.ngram_table().dump_jsonl(&mut out)?;
                out.flush()?;
            }
            let m = session.metrics()?;
            eprintln!(
                "iterations {} alpha {:.4} beta {:.4} tokens {}",
                m.iterations, m.alpha, m.beta, m.tokens
            );
            session.generated().to_vec()
        }
    };
    let text = render(&tokens, args.format);
    match &args.out {
        Some(path) => fs::write(path, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_verify(args: &RunArgs) -> Result<bool> {
    let resolved = args.engine.resolve()?;
    let model = load_model(&args.model)?;
    let config = resolved.engine;
    let prompt = load_prompt(&args.prompt, model.config().vocab_size, config.seed)?;
    let ar = engine::generate_ar(&model, &prompt, &config)?;
    let (swift, m) = engine::generate(&model, &prompt, config)?;
    let swift = &swift[..ar.len()];
    match ar.iter().zip(swift).position(|(a, b)| a != b) {
        None => {
            println!(
                "identical: {} tokens, {} iterations, alpha {:.4}",
                ar.len(),
                m.iterations,
                m.alpha
            );
            Ok(true)
        }
        Some(i) => {
            println!(
                "mismatch at token {i}: autoregressive {} speculative {}",
                ar[i], swift[i]
            );
            Ok(false)
        }
    }
}

/// Records up to the first iteration that reaches `len` tokens.
pub fn trace_prefix(records: &[IterationRecord], len: usize) -> &[IterationRecord] {
    let mut total = 0;
    for (i, r) in records.iter().enumerate() {
        total += r.accepted;
        if total >= len {
            return &records[..=i];
        }
    }
    records
}

fn mean_std(xs: &[f64]) -> String {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    format!("{mean:.4}±{:.4}", var.sqrt())
}

pub const BENCH_HEADER: &str = "gen_len,k,tree,theta,W,alpha,beta,simulated_speedup,distinct_avg";

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let base = args.engine.resolve()?.engine;
    let model = load_model(&args.model)?;
    let or_base = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let ks = or_base(&args.ks, base.k);
    let windows = or_base(&args.windows, base.sampler.window);
    let trees = if args.trees.is_empty() {
        vec![base.tree.clone()]
    } else {
        args.trees.clone()
    };
    let thetas = if args.thetas.is_empty() {
        vec![base.sampler.theta]
    } else {
        args.thetas.clone()
    };
    if args.lengths.is_empty() || args.repeats == 0 {
        return Err(Error::Config("bench grid is empty".into()));
    }
    let max_len = *args.lengths.iter().max().expect("non-empty");
    let cost = CostModel::new(HardwareProfile::a100(), ModelProfile::llama_8b());

    let mut table = String::new();
    writeln!(table, "{BENCH_HEADER}").expect("string write");
    for &k in &ks {
        for tree in &trees {
            for &theta in &thetas {
                for &window in &windows {
                    // rows[length] = per-seed (alpha, beta, speedup, distinct)
                    let mut rows = vec![Vec::new(); args.lengths.len()];
                    for rep in 0..args.repeats {
                        let mut config = base.clone();
                        config.k = k;
                        config.tree = tree.clone();
                        config.sampler.theta = theta;
                        config.sampler.window = window;
                        config.target_length = max_len;
                        config.seed = base.seed + rep;
                        config.sampler.seed = base.sampler.seed + rep;
                        let prompt =
                            load_prompt(&args.prompt, model.config().vocab_size, config.seed)?;
                        let mut session = engine::prefill(&model, &prompt, config)?;
                        session.run()?;
                        for (li, &len) in args.lengths.iter().enumerate() {
                            let recs = trace_prefix(session.records(), len);
                            let m = RunMetrics::from_trace(recs)?;
                            let gen = &session.generated()[..len.min(session.generated().len())];
                            let distinct =
                                RunMetrics::from_records(recs, m.gamma, gen, Default::default())?
                                    .distinct_avg();
                            let speed = cost.simulated_speedup(prompt.len(), recs);
                            rows[li].push((m.alpha, m.beta, speed, distinct));
                        }
                    }
                    for (li, &len) in args.lengths.iter().enumerate() {
                        let col = |f: fn(&(f64, f64, f64, f64)) -> f64| {
                            mean_std(&rows[li].iter().map(f).collect::<Vec<_>>())
                        };
                        writeln!(
                            table,
                            "{len},{k},\"{tree}\",{theta},{window},{},{},{},{}",
                            col(|r| r.0),
                            col(|r| r.1),
                            col(|r| r.2),
                            col(|r| r.3)
                        )
                        .expect("string write");
                    }
                }
            }
        }
    }
    match &args.csv {
        Some(path) => fs::write(path, table)?,
        None => io::stdout().write_all(table.as_bytes())?,
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<()> {
    let file = File::open(&args.trace)
        .map_err(|e| Error::Config(format!("{}: {e}", args.trace.display())))?;
    let records = metrics::read_trace(BufReader::new(file))?;
    if records.is_empty() {
        return Err(Error::Config("trace has no records".into()));
    }
    let m = RunMetrics::from_trace(&records)?;
    let speed = CostModel::new(HardwareProfile::a100(), ModelProfile::llama_8b())
        .simulated_speedup(args.prompt_len, &records);
    let mut json = serde_json::to_value(&m)?;
    json["simulated_speedup"] = serde_json::json!(speed);
    json["distinct_avg"] = serde_json::json!(m.distinct_avg());
    let mut stdout = io::stdout().lock();
    serde_json::to_writer(&mut stdout, &json)?;
    stdout.write_all(b"\n")?;
    if let Some(path) = &args.csv {
        fs::write(
            path,
            format!(
                "gen_len,alpha,speedup\n{},{:.4},{:.4}\n",
                m.tokens, m.alpha, speed
            ),
        )?;
    }
    Ok(())
}

/// Runs the CLI on `args` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|_| true),
        Command::VerifyLossless(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a).map(|_| true),
        Command::Report(a) => cmd_report(a).map(|_| true),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("swiftdec").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let Command::Generate(g) = parse(&[
            "generate", "--tree", "1,2,2,2", "--k", "5", "--theta", "1.5", "--window", "64",
            "--eta", "0.01", "--seed", "9", "--sink", "4", "--budget", "40", "--mode", "ar",
        ])
        .command
        else {
            panic!("wrong subcommand");
        };
        let r = g.run.engine.resolve().unwrap();
        assert_eq!(r.mode, Mode::Ar);
        assert_eq!(r.engine.tree.widths, vec![1, 2, 2, 2]);
        assert_eq!(r.engine.k, 5);
        assert_eq!(r.engine.sampler.theta, 1.5);
        assert_eq!(r.engine.sampler.window, 64);
        assert_eq!(r.engine.sampler.truncation, Truncation::Eta(0.01));
        assert_eq!((r.engine.seed, r.engine.sampler.seed), (9, 9));
        assert_eq!((r.engine.sink_size, r.engine.budget), (4, 40));
    }

    #[test]
    fn conflicting_truncations_are_rejected() {
        assert!(
            Cli::try_parse_from(["swiftdec", "generate", "--top-p", "0.9", "--min-p", "0.1"])
                .is_err()
        );
    }

    #[test]
    fn trace_prefix_stops_at_length() {
        let rec = |a| IterationRecord {
            step: 0,
            gamma: 3,
            accepted: a,
            ngram_accepted: 0,
            origin: crate::tree::BranchOrigin::Heads,
            forwards: 2,
            tokens: vec![0; a],
            partial_len: 0,
            full_len: 0,
            verify_tokens: 1,
            refreshed: false,
        };
        let recs = [rec(4), rec(1), rec(3), rec(2)];
        assert_eq!(trace_prefix(&recs, 5).len(), 2);
        assert_eq!(trace_prefix(&recs, 6).len(), 3);
        assert_eq!(trace_prefix(&recs, 100).len(), 4);
    }

    #[test]
    fn ids_parse_and_render() {
        assert_eq!(parse_ids(" 1 2\n3 ").unwrap(), vec![1, 2, 3]);
        assert!(parse_ids("1 x").is_err());
        assert_eq!(render(&[4, 5], Format::Ids), "4 5\n");
        assert_eq!(detokenize(&[72, 105]), "Hi");
    }
}
