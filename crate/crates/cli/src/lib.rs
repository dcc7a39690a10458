//! Command-line front end for adversarial NER domain adaptation.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training or output error. Diagnostics go to stderr only.

pub mod config;
pub mod failure;
pub mod pipeline;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use adner::corpus::{read_columns, serialize_conll, validate_iob2, CorpusError, Sentence, UnlabeledCorpus};
use adner::eval::score;
use adner::model::predict_batch;
use adner::synth::generate;
use adner::train::load_checkpoint;
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::RunConfig;
use crate::failure::{Classify, Failure};
use crate::pipeline::{read_text, write_file};

const PREDICT_BATCH: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "adner", version, about = "Adversarial domain adaptation for named-entity recognition")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Corpus utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a tagger and write checkpoint, history and resolved config.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled CoNLL file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; a text table is written next to it with a `.txt` extension.
        #[arg(long)]
        report: PathBuf,
    },
    /// Tag an unlabeled file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = InputFormat::Conll)]
        format: InputFormat,
    },
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    /// Rewrite a labeled file as canonical two-column IOB2 CoNLL.
    Convert {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tag scheme of the input.
        #[arg(long, value_enum, default_value_t = Scheme::Iob2)]
        from: Scheme,
    },
    /// Check a labeled file for IOB2 violations.
    Validate {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Print corpus statistics as JSON.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Generate paired synthetic corpora.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Override a config key (repeatable), e.g. `--set synth.shift=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train with the adversarial domain branch (overrides train.adapt).
    #[arg(long, conflicts_with = "no_adapt")]
    adapt: bool,
    /// Train the tagger alone (overrides train.adapt).
    #[arg(long)]
    no_adapt: bool,
    /// Overrides data.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set train.seed=3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Scheme {
    Iob1,
    Iob2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum InputFormat {
    /// One token per line (first column), blank line between sentences.
    Conll,
    /// One whitespace-tokenized sentence per line.
    Lines,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Data(d) => match d {
            DataCommand::Convert { input, out, from } => convert(&input, &out, from),
            DataCommand::Validate { input } => validate(&input),
            DataCommand::Stats { input } => stats(&input),
            DataCommand::Synth { config, out_dir, set } => synth(config.as_deref(), out_dir, &set),
        },
        Command::Train(args) => train(args),
        Command::Eval { checkpoint, data, report } => eval(&checkpoint, &data, &report),
        Command::Predict {
            checkpoint,
            input,
            out,
            format,
        } => predict(&checkpoint, &input, &out, format),
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p).usage()?,
        None => RunConfig::default(),
    };
    cfg.merge_overrides(overrides).usage()?;
    Ok(cfg)
}

fn convert(input: &Path, out: &Path, from: Scheme) -> Result<(), Failure> {
    let text = read_text(input)?;
    if from == Scheme::Iob2 {
        report_violations(input, &text)?;
    }
    let data = pipeline::read_labeled(input)?;
    write_file(out, data.to_conll())
}

/// Fails with a data error listing every IOB2 violation in `text`.
fn report_violations(path: &Path, text: &str) -> Result<(), Failure> {
    let raw = read_columns(text, true).with_context(|| format!("parsing {}", path.display())).data()?;
    if raw.is_empty() {
        return Err(CorpusError::EmptyInput).with_context(|| format!("parsing {}", path.display())).data();
    }
    let mut count = 0;
    for (i, s) in raw.iter().enumerate() {
        for v in validate_iob2(s.tags.as_deref().unwrap_or_default()) {
            eprintln!(
                "{}:{}: sentence {}, token {} ({}): {}",
                path.display(),
                s.line + v.index,
                i + 1,
                v.index + 1,
                s.tokens[v.index],
                v.reason
            );
            count += 1;
        }
    }
    if count > 0 {
        return Err(Failure::Data(anyhow!("{}: {count} IOB2 violation(s)", path.display())));
    }
    Ok(())
}

fn validate(input: &Path) -> Result<(), Failure> {
    let text = read_text(input)?;
    report_violations(input, &text)
}

fn stats(input: &Path) -> Result<(), Failure> {
    let text = read_text(input)?;
    let parsed = match adner::corpus::parse_labeled(&text) {
        Ok(d) => Ok((d.sentences().to_vec(), true)),
        // Single-column files are unlabeled corpora.
        Err(CorpusError::MalformedLine { .. }) => {
            adner::corpus::parse_unlabeled(&text).map(|c| (c.sentences().to_vec(), false))
        }
        Err(e) => Err(e),
    };
    let (sentences, labeled) = parsed.with_context(|| format!("parsing {}", input.display())).data()?;
    let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
    let mut entities: BTreeMap<String, usize> = BTreeMap::new();
    let mut tokens = 0;
    for s in &sentences {
        tokens += s.len();
        *lengths.entry(s.len()).or_default() += 1;
        if let Some(tags) = s.tags() {
            for span in adner::corpus::tags_to_spans(tags).data()? {
                *entities.entry(span.class).or_default() += 1;
            }
        }
    }
    let out = json!({
        "labeled": labeled,
        "sentences": sentences.len(),
        "tokens": tokens,
        "classes": entities.len(),
        "entities_per_class": entities,
        "length_histogram": lengths,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("stats serialize"));
    Ok(())
}

fn synth(config: Option<&Path>, out_dir: Option<PathBuf>, set: &[String]) -> Result<(), Failure> {
    let mut cfg = load_config(config, set)?;
    if let Some(d) = out_dir {
        cfg.data.out_dir = Some(d);
    }
    let dir = cfg
        .data
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Usage(anyhow!("no output directory (use --out-dir or data.out_dir)")))?;
    let corpora = generate(&cfg.synth).usage()?;
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
    write_file(&dir.join("source.conll"), corpora.source.to_conll())?;
    write_file(&dir.join("target.txt"), corpora.target.to_conll())?;
    write_file(&dir.join("test_in.conll"), corpora.test_in_domain.to_conll())?;
    write_file(&dir.join("test_shift.conll"), corpora.test_shifted.to_conll())?;
    write_file(&dir.join(pipeline::CONFIG_FILE), cfg.to_text(None))
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let mut cfg = load_config(args.config.as_deref(), &args.set)?;
    if args.adapt {
        cfg.train.adapt = true;
    }
    if args.no_adapt {
        cfg.train.adapt = false;
    }
    if let Some(d) = args.out_dir {
        cfg.data.out_dir = Some(d);
    }
    let dir = cfg
        .data
        .out_dir
        .clone()
        .ok_or_else(|| Failure::Usage(anyhow!("no output directory (use --out-dir or data.out_dir)")))?;
    let trained = pipeline::run_training(&cfg, &dir)?;
    let h = &trained.history;
    eprintln!(
        "trained {} epoch(s), best epoch {} with {} {:.4}",
        h.records.len(),
        h.best_epoch,
        cfg.train.early_stop_metric,
        h.best_metric().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, report_path: &Path) -> Result<(), Failure> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))
        .data()?;
    let gold = pipeline::read_labeled(data)?;
    let pred = predict_batch(&ckpt.params, gold.sentences(), &ckpt.vocab, &ckpt.tag_index, PREDICT_BATCH).runtime()?;
    let report = score(&gold, &pred).runtime()?;
    write_file(report_path, report.to_json() + "\n")?;
    let table = report.to_table();
    write_file(&table_path(report_path), &table)?;
    print!("{table}");
    Ok(())
}

/// Path of the text table written next to a JSON report.
pub fn table_path(report: &Path) -> PathBuf {
    let candidate = report.with_extension("txt");
    if candidate == report {
        report.with_extension("table.txt")
    } else {
        candidate
    }
}

fn predict(checkpoint: &Path, input: &Path, out: &Path, format: InputFormat) -> Result<(), Failure> {
    let ckpt = load_checkpoint(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))
        .data()?;
    let text = read_text(input)?;
    let sentences: Vec<Sentence> = match format {
        InputFormat::Conll => adner::corpus::parse_unlabeled(&text)
            .with_context(|| format!("parsing {}", input.display()))
            .data()?
            .sentences()
            .to_vec(),
        InputFormat::Lines => {
            let s: Result<Vec<Sentence>, CorpusError> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| Sentence::unlabeled(l.split_whitespace().map(str::to_string).collect()))
                .collect();
            let s = s.with_context(|| format!("parsing {}", input.display())).data()?;
            UnlabeledCorpus::new(s)
                .with_context(|| format!("parsing {}", input.display()))
                .data()?
                .sentences()
                .to_vec()
        }
    };
    let tags = predict_batch(&ckpt.params, &sentences, &ckpt.vocab, &ckpt.tag_index, PREDICT_BATCH).runtime()?;
    let tagged: Vec<Sentence> = sentences
        .iter()
        .zip(tags)
        .map(|(s, t)| Sentence::labeled(s.tokens().to_vec(), t))
        .collect::<Result<_, _>>()
        .runtime()?;
    write_file(out, serialize_conll(&tagged))
}
