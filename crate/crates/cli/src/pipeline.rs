//! Data preparation, training and run-directory output.

use std::fs;
use std::path::Path;

use adner::corpus::{parse_labeled, parse_unlabeled, split_dataset, LabeledDataset, Sentence, TagIndex, UnlabeledCorpus, Vocab};
use adner::model::ModelConfig;
use adner::train::{save_checkpoint, train, Checkpoint, TrainData, TrainError, Trained};
use anyhow::{anyhow, Context};

use crate::config::RunConfig;
use crate::failure::{Classify, Failure};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const TEST_SPLIT_FILE: &str = "test.conll";

/// Splits, vocabulary, tag index and resolved model config for one run.
pub struct Prepared {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
    pub target: Option<UnlabeledCorpus>,
    pub vocab: Vocab,
    pub tags: TagIndex,
    pub model: ModelConfig,
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).data()
}

pub fn read_labeled(path: &Path) -> Result<LabeledDataset, Failure> {
    parse_labeled(&read_text(path)?).with_context(|| format!("parsing {}", path.display())).data()
}

pub fn read_unlabeled(path: &Path) -> Result<UnlabeledCorpus, Failure> {
    parse_unlabeled(&read_text(path)?).with_context(|| format!("parsing {}", path.display())).data()
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display())).runtime()
}

/// Loads `data.source` and, when set, `data.target`.
pub fn load_inputs(cfg: &RunConfig) -> Result<(LabeledDataset, Option<UnlabeledCorpus>), Failure> {
    let source = cfg
        .data
        .source
        .as_deref()
        .ok_or_else(|| Failure::Usage(anyhow!("data.source is not set")))?;
    let source = read_labeled(source)?;
    let target = cfg.data.target.as_deref().map(read_unlabeled).transpose()?;
    Ok((source, target))
}

/// Splits the source by `train.seed` and builds the vocabulary from the
/// training split plus the target corpus, so both arms of a comparison share
/// the same embedding table.
pub fn prepare(cfg: &RunConfig, source: &LabeledDataset, target: Option<UnlabeledCorpus>) -> Result<Prepared, Failure> {
    let (train, val, test) = split_dataset(source, cfg.train.seed).context("splitting the source corpus").data()?;
    let target_sentences: &[Sentence] = target.as_ref().map(UnlabeledCorpus::sentences).unwrap_or(&[]);
    let vocab = Vocab::build(train.sentences().iter().chain(target_sentences), cfg.data.min_freq);
    let tags = TagIndex::from_classes(source.classes());
    let model = cfg.model_config(vocab.len(), tags.len()).usage()?;
    Ok(Prepared {
        train,
        val,
        test,
        target,
        vocab,
        tags,
        model,
    })
}

pub fn fit(cfg: &RunConfig, p: &Prepared) -> Result<Trained, Failure> {
    let data = TrainData {
        train: &p.train,
        val: &p.val,
        target: p.target.as_ref().map(UnlabeledCorpus::sentences),
        vocab: &p.vocab,
        tag_index: &p.tags,
    };
    train(&p.model, &cfg.train, &data).map_err(|e| match e {
        TrainError::InvalidConfig(_) => Failure::Usage(e.into()),
        e => Failure::Runtime(anyhow::Error::new(e).context("training failed")),
    })
}

/// Checkpoint carrying the run's `train.*` and `data.*` settings, minus the
/// output directory so that identical runs produce identical bytes.
pub fn checkpoint(cfg: &RunConfig, p: &Prepared, trained: &Trained) -> Checkpoint {
    let settings = cfg
        .entries(Some(&p.model))
        .into_iter()
        .filter(|(k, _)| (k.starts_with("train.") || k.starts_with("data.")) && k != "data.out_dir")
        .collect();
    Checkpoint {
        params: trained.params.clone(),
        vocab: p.vocab.clone(),
        tag_index: p.tags.clone(),
        settings,
    }
}

/// Writes checkpoint, history, resolved config and the held-out test split.
pub fn write_run(out_dir: &Path, cfg: &RunConfig, p: &Prepared, trained: &Trained) -> Result<(), Failure> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display())).runtime()?;
    let ckpt = checkpoint(cfg, p, trained);
    save_checkpoint(&ckpt, &out_dir.join(CHECKPOINT_FILE)).runtime()?;
    write_file(&out_dir.join(HISTORY_FILE), trained.history.to_json() + "\n")?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.to_text(Some(&p.model)))?;
    write_file(&out_dir.join(TEST_SPLIT_FILE), p.test.to_conll())
}

/// Full `train` command: load, prepare, fit, write.
pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<Trained, Failure> {
    if cfg.train.adapt && cfg.data.target.is_none() {
        return Err(Failure::Usage(anyhow!("train.adapt needs data.target")));
    }
    let (source, target) = load_inputs(cfg)?;
    let prepared = prepare(cfg, &source, target)?;
    let trained = fit(cfg, &prepared)?;
    write_run(out_dir, cfg, &prepared, &trained)?;
    Ok(trained)
}
