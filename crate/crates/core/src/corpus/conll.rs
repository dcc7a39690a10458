use super::{iob1_to_iob2, validate_iob2, CorpusError, LabeledDataset, Sentence, Tag, UnlabeledCorpus};

const DOCSTART: &str = "-DOCSTART-";

/// Result of [`parse_conll`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Corpus {
    Labeled(LabeledDataset),
    Unlabeled(UnlabeledCorpus),
}

/// One sentence as it appears on disk, before any tag normalization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSentence {
    /// 1-based line of the first token.
    pub line: usize,
    pub tokens: Vec<String>,
    /// Last-column tags exactly as written; `None` for unlabeled reads.
    pub tags: Option<Vec<String>>,
}

/// Splits CoNLL column text into sentences without interpreting the tags
/// beyond checking that each is a well-formed IOB label.
///
/// The first column is the token; with `labeled` the last column is the tag.
/// Blank lines delimit sentences and `-DOCSTART-` lines are skipped.
pub fn read_columns(text: &str, labeled: bool) -> Result<Vec<RawSentence>, CorpusError> {
    let mut out = Vec::new();
    let mut current: Option<RawSentence> = None;
    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        let mut cols = raw.split_whitespace();
        let Some(token) = cols.next() else {
            out.extend(current.take());
            continue;
        };
        if token == DOCSTART {
            continue;
        }
        let s = current.get_or_insert_with(|| RawSentence {
            line,
            tokens: Vec::new(),
            tags: labeled.then(Vec::new),
        });
        if let Some(tags) = s.tags.as_mut() {
            let tag = cols.last().ok_or(CorpusError::MalformedLine { line })?;
            Tag::parse(tag).map_err(|_| CorpusError::InvalidTag {
                line: Some(line),
                tag: tag.to_string(),
            })?;
            tags.push(tag.to_string());
        }
        s.tokens.push(token.to_string());
    }
    out.extend(current);
    Ok(out)
}

/// Parses CoNLL-2002 style column text (see [`read_columns`]).
///
/// Tags are read under IOB1 semantics and normalized to IOB2.
pub fn parse_conll(text: &str, labeled: bool) -> Result<Corpus, CorpusError> {
    let mut sentences = Vec::new();
    for (index, raw) in read_columns(text, labeled)?.into_iter().enumerate() {
        sentences.push(match raw.tags {
            Some(tags) => {
                let converted = iob1_to_iob2(&tags)?;
                if let Some(v) = validate_iob2(&converted).into_iter().next() {
                    return Err(CorpusError::InvalidScheme {
                        sentence: Some(index),
                        detail: format!("position {}: {}", v.index, v.reason),
                    });
                }
                Sentence::labeled(raw.tokens, converted)?
            }
            None => Sentence::unlabeled(raw.tokens)?,
        });
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    Ok(if labeled {
        Corpus::Labeled(LabeledDataset::new(sentences)?)
    } else {
        Corpus::Unlabeled(UnlabeledCorpus::new(sentences)?)
    })
}

pub fn parse_labeled(text: &str) -> Result<LabeledDataset, CorpusError> {
    match parse_conll(text, true)? {
        Corpus::Labeled(d) => Ok(d),
        Corpus::Unlabeled(_) => unreachable!("labeled parse returns a labeled dataset"),
    }
}

pub fn parse_unlabeled(text: &str) -> Result<UnlabeledCorpus, CorpusError> {
    match parse_conll(text, false)? {
        Corpus::Unlabeled(c) => Ok(c),
        Corpus::Labeled(_) => unreachable!("unlabeled parse returns an unlabeled corpus"),
    }
}

/// Writes `token tag` (or bare `token`) lines with a blank line after each sentence.
pub fn serialize_conll(sentences: &[Sentence]) -> String {
    let mut out = String::new();
    for s in sentences {
        match s.tags() {
            Some(tags) => {
                for (tok, tag) in s.tokens().iter().zip(tags) {
                    out.push_str(tok);
                    out.push(' ');
                    out.push_str(tag);
                    out.push('\n');
                }
            }
            None => {
                for tok in s.tokens() {
                    out.push_str(tok);
                    out.push('\n');
                }
            }
        }
        out.push('\n');
    }
    out
}
