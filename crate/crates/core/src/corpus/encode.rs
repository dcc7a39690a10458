use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{CorpusError, Sentence};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Tag id for positions that carry no supervision (padding, unlabeled text).
pub const IGNORE_TAG: i64 = -1;

/// Case-sensitive token vocabulary with reserved PAD and UNK ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    min_freq: usize,
}

impl Vocab {
    /// Counts tokens and keeps those seen at least `min_freq` times, ordered
    /// by descending frequency then lexicographically.
    pub fn build<'a, I>(sentences: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        let min_freq = min_freq.max(1);
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s.tokens() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()), min_freq)
    }

    /// Rebuilds a vocabulary whose non-special tokens get ids 2, 3, ... in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I, min_freq: usize) -> Self {
        let mut id_to_token = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut token_to_id = HashMap::new();
        for t in tokens {
            token_to_id.insert(t.clone(), id_to_token.len());
            id_to_token.push(t);
        }
        Self {
            token_to_id,
            id_to_token,
            min_freq,
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    /// Non-special tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.id_to_token[2..]
    }
}

/// Dense mapping between IOB2 tag strings and class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagIndex {
    tags: Vec<String>,
    ids: BTreeMap<String, usize>,
}

impl TagIndex {
    /// `O` first, then `B-c`, `I-c` for each class in sorted order.
    pub fn from_classes(classes: &BTreeSet<String>) -> Self {
        let mut tags = vec!["O".to_string()];
        for c in classes {
            tags.push(format!("B-{c}"));
            tags.push(format!("I-{c}"));
        }
        Self::from_tags(tags).expect("generated tags are unique")
    }

    pub fn from_tags(tags: Vec<String>) -> Result<Self, CorpusError> {
        let mut ids = BTreeMap::new();
        for (i, t) in tags.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(CorpusError::MalformedTagIndex {
                    line: i + 1,
                    text: format!("duplicate tag {t}"),
                });
            }
        }
        Ok(Self { tags, ids })
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.ids.get(tag).copied()
    }

    pub fn tag(&self, id: usize) -> Option<&str> {
        self.tags.get(id).map(String::as_str)
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// `tag<TAB>id` per line, sorted by id.
    pub fn to_tsv(&self) -> String {
        self.tags.iter().enumerate().map(|(i, t)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self, CorpusError> {
        let mut tags = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || CorpusError::MalformedTagIndex {
                line: i + 1,
                text: line.to_string(),
            };
            let (tag, id) = line.split_once('\t').ok_or_else(bad)?;
            let id: usize = id.trim().parse().map_err(|_| bad())?;
            if id != tags.len() || tag.is_empty() {
                return Err(bad());
            }
            tags.push(tag.to_string());
        }
        Self::from_tags(tags)
    }
}

/// Padded id/tag matrices for a batch of sentences, row-major `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub tags: Vec<i64>,
    /// Number of sentences cut to `max_len`.
    pub truncated: usize,
}

impl EncodedBatch {
    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Per-sentence lengths after truncation.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|b| self.mask[b * self.seq_len..(b + 1) * self.seq_len].iter().filter(|&&m| m).count())
            .collect()
    }
}

/// Encodes sentences, padding to the longest one (capped at `max_len`).
pub fn encode_batch(
    sentences: &[&Sentence],
    vocab: &Vocab,
    tag_index: &TagIndex,
    max_len: usize,
) -> Result<EncodedBatch, CorpusError> {
    if sentences.is_empty() {
        return Err(CorpusError::EmptyInput);
    }
    let max_len = max_len.max(1);
    let seq_len = sentences.iter().map(|s| s.len().min(max_len)).max().unwrap_or(1);
    let batch = sentences.len();
    let mut ids = vec![PAD_ID; batch * seq_len];
    let mut mask = vec![false; batch * seq_len];
    let mut tags = vec![IGNORE_TAG; batch * seq_len];
    let mut truncated = 0;
    for (b, s) in sentences.iter().enumerate() {
        if s.len() > max_len {
            truncated += 1;
        }
        let n = s.len().min(max_len);
        for t in 0..n {
            ids[b * seq_len + t] = vocab.id(&s.tokens()[t]);
            mask[b * seq_len + t] = true;
        }
        if let Some(gold) = s.tags() {
            for t in 0..n {
                let id = tag_index
                    .id(&gold[t])
                    .ok_or_else(|| CorpusError::UnknownTag(gold[t].clone()))?;
                tags[b * seq_len + t] = id as i64;
            }
        }
    }
    Ok(EncodedBatch {
        batch,
        seq_len,
        ids,
        mask,
        tags,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(text: &str) -> Sentence {
        Sentence::unlabeled(text.split(' ').map(String::from).collect()).unwrap()
    }

    #[test]
    fn vocab_ordering_and_min_freq() {
        let c = [sent("a a b")];
        let v = Vocab::build(&c, 1);
        assert_eq!((v.id("a"), v.id("b"), v.len()), (2, 3, 4));
        assert_eq!(v.token(PAD_ID), Some(PAD_TOKEN));
        let v = Vocab::build(&c, 2);
        assert_eq!((v.id("a"), v.id("b"), v.len()), (2, UNK_ID, 3));
        let v = Vocab::build(&[sent("b a")], 1);
        assert_eq!((v.id("a"), v.id("b")), (2, 3));
        let v = Vocab::build(&[sent("Paris paris paris")], 1);
        assert_eq!((v.id("paris"), v.id("Paris")), (2, 3));
    }

    #[test]
    fn tag_index_layout_and_tsv() {
        let classes: BTreeSet<String> = ["PER", "LOC", "ORG", "MISC"].iter().map(|s| s.to_string()).collect();
        let idx = TagIndex::from_classes(&classes);
        assert_eq!(idx.len(), 9);
        assert_eq!(idx.tag(0), Some("O"));
        assert_eq!(idx.id("B-LOC"), Some(1));
        let tsv = idx.to_tsv();
        assert!(tsv.starts_with("O\t0\nB-LOC\t1\nI-LOC\t2\n"));
        assert_eq!(TagIndex::from_tsv(&tsv).unwrap(), idx);
        assert!(TagIndex::from_tsv("O\t1\n").is_err());
        assert!(TagIndex::from_tsv("O 0\n").is_err());
    }

    #[test]
    fn encode_pads_and_masks() {
        let vocab = Vocab::from_tokens(["a".to_string(), "b".to_string()], 1);
        let tags = TagIndex::from_tags(vec!["O".into()]).unwrap();
        let (s1, s2) = (sent("a b"), sent("a"));
        let b = encode_batch(&[&s1, &s2], &vocab, &tags, 8).unwrap();
        assert_eq!(b.ids, vec![2, 3, 2, 0]);
        assert_eq!(b.mask, vec![true, true, true, false]);
        assert_eq!(b.tags, vec![IGNORE_TAG; 4]);
        assert_eq!(b.lengths(), vec![2, 1]);
    }

    #[test]
    fn encode_truncates_and_maps_tags() {
        let vocab = Vocab::from_tokens(["x".to_string()], 1);
        let idx = TagIndex::from_tags(vec!["O".into(), "B-PER".into()]).unwrap();
        let long = Sentence::labeled(vec!["x".into(); 300], vec!["O".into(); 300]).unwrap();
        let b = encode_batch(&[&long], &vocab, &idx, 256).unwrap();
        assert_eq!((b.seq_len, b.truncated), (256, 1));
        assert!(b.tags.iter().all(|&t| t == 0));

        let s = Sentence::labeled(vec!["y".into()], vec!["B-LOC".into()]).unwrap();
        assert_eq!(
            encode_batch(&[&s], &vocab, &idx, 4),
            Err(CorpusError::UnknownTag("B-LOC".into()))
        );
        let s = Sentence::labeled(vec!["y".into()], vec!["B-PER".into()]).unwrap();
        let b = encode_batch(&[&s], &vocab, &idx, 4).unwrap();
        assert_eq!((b.ids[0], b.tags[0]), (UNK_ID, 1));
    }
}
