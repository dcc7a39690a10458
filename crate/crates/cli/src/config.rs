//! Flat `key = value` run configuration.
//!
//! Keys carry a section prefix: `train.`, `model.`, `synth.` or `data.`.
//! Blank lines and lines starting with `#` are ignored, as is anything after
//! a `#` that follows whitespace. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use adner::model::ModelConfig;
use adner::synth::SynthConfig;
use adner::train::TrainConfig;
use anyhow::{bail, Context, Result};

pub const DEFAULT_MIN_FREQ: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Minimum token count for the vocabulary.
    pub min_freq: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: None,
            target: None,
            out_dir: None,
            min_freq: DEFAULT_MIN_FREQ,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Architecture; `vocab_size` and `n_tags` are filled from the data.
    pub model: ModelConfig,
    /// Explicit `model.vocab_size` / `model.n_tags`, checked against the data.
    pub vocab_size: Option<usize>,
    pub n_tags: Option<usize>,
    pub synth: SynthConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            model: ModelConfig::desk(0, 0),
            vocab_size: None,
            n_tags: None,
            synth: SynthConfig::default(),
            data: DataConfig::default(),
        }
    }
}

/// Splits config text into `(line, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected `key = value`, got {raw:?}", i + 1);
        };
        let key = k.trim();
        if key.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        out.push((i + 1, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    if line.trim_start().starts_with('#') {
        return "";
    }
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && i > 0 && bytes[i - 1].is_ascii_whitespace() {
            return &line[..i];
        }
    }
    line
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.merge_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (line, key, value) in parse_lines(text)? {
            self.set(&key, &value).with_context(|| format!("line {line}"))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. from `--set`.
    pub fn merge_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let Some((k, v)) = pair.split_once('=') else {
                bail!("override {pair:?} is not of the form key=value");
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let Some((section, field)) = key.split_once('.') else {
            bail!("unknown config key {key:?} (keys need a train., model., synth. or data. prefix)");
        };
        let known = match section {
            "train" => self.train.set(field, value).map_err(anyhow::Error::msg)?,
            "synth" => self.synth.set(field, value).map_err(anyhow::Error::msg)?,
            "model" => match field {
                "vocab_size" => {
                    self.vocab_size = Some(value.parse().with_context(|| format!("{key} = {value:?}"))?);
                    true
                }
                "n_tags" => {
                    self.n_tags = Some(value.parse().with_context(|| format!("{key} = {value:?}"))?);
                    true
                }
                _ => self.model.set(field, value).map_err(anyhow::Error::msg)?,
            },
            "data" => {
                match field {
                    "source" => self.data.source = optional_path(value),
                    "target" => self.data.target = optional_path(value),
                    "out_dir" => self.data.out_dir = optional_path(value),
                    "min_freq" => self.data.min_freq = value.parse().with_context(|| format!("{key} = {value:?}"))?,
                    _ => bail!("unknown config key {key:?}"),
                }
                true
            }
            _ => false,
        };
        if !known {
            bail!("unknown config key {key:?}");
        }
        Ok(())
    }

    /// Model config for data with `vocab_size` tokens and `n_tags` tags.
    pub fn model_config(&self, vocab_size: usize, n_tags: usize) -> Result<ModelConfig> {
        for (name, explicit, actual) in [("vocab_size", self.vocab_size, vocab_size), ("n_tags", self.n_tags, n_tags)] {
            if let Some(v) = explicit {
                if v != actual {
                    bail!("model.{name} = {v} but the data gives {actual}");
                }
            }
        }
        let mut m = self.model.clone();
        m.vocab_size = vocab_size;
        m.n_tags = n_tags;
        m.validate()?;
        Ok(m)
    }

    /// Every key with its effective value, sorted by key. `model` supplies
    /// the data-derived sizes when known.
    pub fn entries(&self, model: Option<&ModelConfig>) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        out.extend(self.train.entries().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        out.extend(self.synth.entries().into_iter().map(|(k, v)| (format!("synth.{k}"), v)));
        let mut m = self.model.clone();
        if let Some(r) = model {
            m = r.clone();
        } else {
            m.vocab_size = self.vocab_size.unwrap_or(0);
            m.n_tags = self.n_tags.unwrap_or(0);
        }
        for (k, v) in m.entries() {
            let unresolved = model.is_none()
                && ((k == "vocab_size" && self.vocab_size.is_none()) || (k == "n_tags" && self.n_tags.is_none()));
            if !unresolved {
                out.push((format!("model.{k}"), v));
            }
        }
        out.push(("data.source".into(), path_text(&self.data.source)));
        out.push(("data.target".into(), path_text(&self.data.target)));
        out.push(("data.out_dir".into(), path_text(&self.data.out_dir)));
        out.push(("data.min_freq".into(), self.data.min_freq.to_string()));
        out.sort();
        out
    }

    pub fn to_text(&self, model: Option<&ModelConfig>) -> String {
        self.entries(model).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
