//! NER corpora: CoNLL column files, IOB tag schemes, splitting and encoding.
//!
//! IOB2 is the canonical in-memory scheme: every entity opens with `B-`.
//! Anything parsed from disk is normalized to it on the way in.

mod conll;
mod encode;
mod iob;
mod split;

pub use conll::{parse_conll, parse_labeled, parse_unlabeled, read_columns, serialize_conll, Corpus, RawSentence};
pub use encode::{encode_batch, EncodedBatch, TagIndex, Vocab, IGNORE_TAG, PAD_ID, UNK_ID};
pub use iob::{iob1_to_iob2, spans_to_tags, tags_to_spans, validate_iob2, EntitySpan, Tag, Violation};
pub use split::split_dataset;

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("input contains no sentences")]
    EmptyInput,
    #[error("line {line}: expected at least a token and a tag column")]
    MalformedLine { line: usize },
    #[error("{}invalid tag {tag:?}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    InvalidTag { line: Option<usize>, tag: String },
    #[error("{}invalid IOB2 sequence: {detail}", sentence.map(|s| format!("sentence {s}: ")).unwrap_or_default())]
    InvalidScheme { sentence: Option<usize>, detail: String },
    #[error("invalid token {0:?}")]
    InvalidToken(String),
    #[error("sentence has {tokens} tokens but {tags} tags")]
    LengthMismatch { tokens: usize, tags: usize },
    #[error("spans {0:?} and {1:?} overlap")]
    Overlap(EntitySpan, EntitySpan),
    #[error("span {span:?} outside sentence of length {len}")]
    OutOfRange { span: EntitySpan, len: usize },
    #[error("dataset of {n} sentences is too small to split (need at least 10)")]
    TooSmall { n: usize },
    #[error("tag {0:?} is not in the tag index")]
    UnknownTag(String),
    #[error("malformed tag index line {line}: {text:?}")]
    MalformedTagIndex { line: usize, text: String },
}

/// A tokenized sentence with optional per-token IOB2 tags.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sentence {
    tokens: Vec<String>,
    tags: Option<Vec<String>>,
}

fn check_token(token: &str) -> Result<(), CorpusError> {
    if token.is_empty() || token.chars().any(char::is_whitespace) {
        return Err(CorpusError::InvalidToken(token.to_string()));
    }
    Ok(())
}

impl Sentence {
    pub fn labeled(tokens: Vec<String>, tags: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.len() != tags.len() {
            return Err(CorpusError::LengthMismatch {
                tokens: tokens.len(),
                tags: tags.len(),
            });
        }
        let sentence = Self::unlabeled(tokens)?;
        if let Some(v) = validate_iob2(&tags).into_iter().next() {
            return Err(CorpusError::InvalidScheme {
                sentence: None,
                detail: format!("position {}: {}", v.index, v.reason),
            });
        }
        Ok(Self {
            tags: Some(tags),
            ..sentence
        })
    }

    pub fn unlabeled(tokens: Vec<String>) -> Result<Self, CorpusError> {
        if tokens.is_empty() {
            return Err(CorpusError::EmptyInput);
        }
        for t in &tokens {
            check_token(t)?;
        }
        Ok(Self { tokens, tags: None })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tags(&self) -> Option<&[String]> {
        self.tags.as_deref()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Same tokens with the tags dropped.
    pub fn without_tags(&self) -> Self {
        Self {
            tokens: self.tokens.clone(),
            tags: None,
        }
    }
}

/// Sentences that all carry tags, plus the set of entity classes they use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledDataset {
    sentences: Vec<Sentence>,
    classes: BTreeSet<String>,
}

impl LabeledDataset {
    pub fn new(sentences: Vec<Sentence>) -> Result<Self, CorpusError> {
        let classes = collect_classes(&sentences)?;
        Self::with_classes(sentences, classes)
    }

    /// Builds a dataset with an explicit (super)set of classes.
    pub fn with_classes(sentences: Vec<Sentence>, classes: BTreeSet<String>) -> Result<Self, CorpusError> {
        if sentences.is_empty() {
            return Err(CorpusError::EmptyInput);
        }
        let used = collect_classes(&sentences)?;
        if let Some(missing) = used.difference(&classes).next() {
            return Err(CorpusError::InvalidTag {
                line: None,
                tag: format!("class {missing} not in class set"),
            });
        }
        Ok(Self { sentences, classes })
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn classes(&self) -> &BTreeSet<String> {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Drops the labels, e.g. to reuse a labeled set as a target corpus.
    pub fn to_unlabeled(&self) -> UnlabeledCorpus {
        UnlabeledCorpus {
            sentences: self.sentences.iter().map(Sentence::without_tags).collect(),
        }
    }

    pub fn to_conll(&self) -> String {
        serialize_conll(&self.sentences)
    }
}

fn collect_classes(sentences: &[Sentence]) -> Result<BTreeSet<String>, CorpusError> {
    let mut classes = BTreeSet::new();
    for (i, s) in sentences.iter().enumerate() {
        let tags = s.tags().ok_or(CorpusError::InvalidScheme {
            sentence: Some(i),
            detail: "sentence has no tags".into(),
        })?;
        for t in tags {
            if let Some(c) = Tag::parse(t)?.class() {
                if !classes.contains(c) {
                    classes.insert(c.to_string());
                }
            }
        }
    }
    Ok(classes)
}

/// Untagged sentences used only for their domain label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledCorpus {
    sentences: Vec<Sentence>,
}

impl UnlabeledCorpus {
    pub fn new(sentences: Vec<Sentence>) -> Result<Self, CorpusError> {
        if sentences.is_empty() {
            return Err(CorpusError::EmptyInput);
        }
        Ok(Self {
            sentences: sentences.iter().map(Sentence::without_tags).collect(),
        })
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn to_conll(&self) -> String {
        serialize_conll(&self.sentences)
    }
}
