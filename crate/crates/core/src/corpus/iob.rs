use std::fmt;

use super::CorpusError;

/// A parsed IOB tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(tag: &'a str) -> Result<Self, CorpusError> {
        let bad = || CorpusError::InvalidTag {
            line: None,
            tag: tag.to_string(),
        };
        if tag == "O" {
            return Ok(Tag::Outside);
        }
        let (prefix, class) = tag.split_at_checked(2).ok_or_else(bad)?;
        if class.is_empty() || class.chars().any(char::is_whitespace) {
            return Err(bad());
        }
        match prefix {
            "B-" => Ok(Tag::Begin(class)),
            "I-" => Ok(Tag::Inside(class)),
            _ => Err(bad()),
        }
    }

    pub fn class(&self) -> Option<&'a str> {
        match *self {
            Tag::Outside => None,
            Tag::Begin(c) | Tag::Inside(c) => Some(c),
        }
    }
}

/// Entity occupying tokens `start..end`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub class: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, class: impl Into<String>) -> Self {
        Self {
            start,
            end,
            class: class.into(),
        }
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.start, self.end, self.class)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub reason: &'static str,
}

pub const REASON_ORPHAN_INSIDE: &str = "I- without preceding B-/I- of same class";
pub const REASON_CLASS_MISMATCH: &str = "class mismatch";
pub const REASON_MALFORMED: &str = "malformed tag";

/// Lists every position breaking the IOB2 invariant; empty means valid.
pub fn validate_iob2<S: AsRef<str>>(tags: &[S]) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut prev: Option<Tag> = Some(Tag::Outside);
    for (index, t) in tags.iter().enumerate() {
        let cur = Tag::parse(t.as_ref()).ok();
        match cur {
            None => out.push(Violation {
                index,
                reason: REASON_MALFORMED,
            }),
            Some(Tag::Inside(c)) => match prev.and_then(|p| p.class().map(|pc| pc == c)) {
                Some(true) => {}
                Some(false) => out.push(Violation {
                    index,
                    reason: REASON_CLASS_MISMATCH,
                }),
                None => out.push(Violation {
                    index,
                    reason: REASON_ORPHAN_INSIDE,
                }),
            },
            Some(_) => {}
        }
        prev = cur;
    }
    out
}

/// Rewrites IOB1 tags as IOB2.
///
/// An `I-X` that does not continue an `X` entity opens a new one; `B-X`
/// (which IOB1 uses to split adjacent same-class entities) is kept. Valid IOB2
/// input is returned unchanged.
pub fn iob1_to_iob2<S: AsRef<str>>(tags: &[S]) -> Result<Vec<String>, CorpusError> {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev_class: Option<String> = None;
    for t in tags {
        let tag = Tag::parse(t.as_ref())?;
        let converted = match tag {
            Tag::Outside => "O".to_string(),
            Tag::Begin(c) => format!("B-{c}"),
            Tag::Inside(c) if prev_class.as_deref() == Some(c) => format!("I-{c}"),
            Tag::Inside(c) => format!("B-{c}"),
        };
        prev_class = tag.class().map(str::to_string);
        out.push(converted);
    }
    Ok(out)
}

/// Extracts entity spans from a valid IOB2 sequence.
pub fn tags_to_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<EntitySpan>, CorpusError> {
    if let Some(v) = validate_iob2(tags).into_iter().next() {
        return Err(CorpusError::InvalidScheme {
            sentence: None,
            detail: format!("position {}: {}", v.index, v.reason),
        });
    }
    let mut spans = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, t) in tags.iter().enumerate() {
        match Tag::parse(t.as_ref())? {
            Tag::Inside(_) => {
                if let Some(s) = open.as_mut() {
                    s.end = i + 1;
                }
            }
            tag => {
                spans.extend(open.take());
                if let Tag::Begin(c) = tag {
                    open = Some(EntitySpan::new(i, i + 1, c));
                }
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// Renders spans as an IOB2 sequence of length `len`.
pub fn spans_to_tags(spans: &[EntitySpan], len: usize) -> Result<Vec<String>, CorpusError> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort_by_key(|s| (s.start, s.end));
    for s in &sorted {
        if s.start >= s.end || s.end > len {
            return Err(CorpusError::OutOfRange {
                span: (*s).clone(),
                len,
            });
        }
        if Tag::parse(&format!("B-{}", s.class)).is_err() {
            return Err(CorpusError::InvalidTag {
                line: None,
                tag: s.class.clone(),
            });
        }
    }
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(CorpusError::Overlap(w[0].clone(), w[1].clone()));
        }
    }
    let mut tags = vec!["O".to_string(); len];
    for s in sorted {
        tags[s.start] = format!("B-{}", s.class);
        for t in &mut tags[s.start + 1..s.end] {
            *t = format!("I-{}", s.class);
        }
    }
    Ok(tags)
}
