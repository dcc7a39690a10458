//! Paired synthetic NER corpora with a controllable domain shift.
//!
//! Sentences come from templates of function words and entity slots. Domain
//! B rewrites a `shift` fraction of the function-word inventory with its own
//! words (one-to-one), swaps a `shift` fraction of the templates for
//! B-only templates, and draws entities from a lexicon that shares only
//! `shared_entity_frac` of its surface forms with domain A.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{LabeledDataset, Sentence, UnlabeledCorpus};

/// General-purpose function words in domain A.
const N_FILLERS: usize = 40;
/// Trigger words per class; they usually precede an entity of that class.
const TRIGGERS_PER_CLASS: usize = 3;
const TRIGGER_PROB: f64 = 0.75;
const MIN_LEN: usize = 5;
const MAX_LEN: usize = 25;
const MAX_ENTITY_TOKENS: usize = 3;
const MAX_ENTITIES: usize = 3;
/// Draws allowed per requested sentence before giving up on uniqueness.
const MAX_ATTEMPTS_PER_SENTENCE: usize = 200;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("could not draw {wanted} distinct sentences for {what}; enlarge the lexicon or templates")]
    Exhausted { what: &'static str, wanted: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_source_labeled: usize,
    pub n_target_unlabeled: usize,
    /// Size of each test set (in-domain and shifted).
    pub n_test_shifted: usize,
    pub shift: f64,
    pub classes: Vec<String>,
    pub entity_lexicon_size: usize,
    pub shared_entity_frac: f64,
    /// Templates per domain.
    pub n_templates: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_source_labeled: 2000,
            n_target_unlabeled: 4000,
            n_test_shifted: 500,
            shift: 0.7,
            classes: ["PER", "LOC", "ORG", "MISC"].iter().map(|s| s.to_string()).collect(),
            entity_lexicon_size: 50,
            shared_entity_frac: 0.5,
            n_templates: 20,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        for (name, v) in [
            ("n_source_labeled", self.n_source_labeled),
            ("n_target_unlabeled", self.n_target_unlabeled),
            ("n_test_shifted", self.n_test_shifted),
            ("entity_lexicon_size", self.entity_lexicon_size),
            ("n_templates", self.n_templates),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [("shift", self.shift), ("shared_entity_frac", self.shared_entity_frac)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} {v} outside [0, 1]"));
            }
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let unique: BTreeSet<&String> = self.classes.iter().collect();
        if unique.len() != self.classes.len() {
            return bad("duplicate class".into());
        }
        if let Some(c) = self
            .classes
            .iter()
            .find(|c| c.is_empty() || c.chars().any(|ch| ch.is_whitespace() || ch == ','))
        {
            return bad(format!("invalid class name {c:?}"));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_source_labeled", self.n_source_labeled.to_string()),
            ("n_target_unlabeled", self.n_target_unlabeled.to_string()),
            ("n_test_shifted", self.n_test_shifted.to_string()),
            ("shift", self.shift.to_string()),
            ("classes", self.classes.join(",")),
            ("entity_lexicon_size", self.entity_lexicon_size.to_string()),
            ("shared_entity_frac", self.shared_entity_frac.to_string()),
            ("n_templates", self.n_templates.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its textual value. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{key} = {v:?}: {e}"));
        let real = |v: &str| v.parse::<f64>().map_err(|e| format!("{key} = {v:?}: {e}"));
        match key {
            "n_source_labeled" => self.n_source_labeled = int(value)?,
            "n_target_unlabeled" => self.n_target_unlabeled = int(value)?,
            "n_test_shifted" => self.n_test_shifted = int(value)?,
            "shift" => self.shift = real(value)?,
            "classes" => self.classes = value.split(',').map(|c| c.trim().to_string()).collect(),
            "entity_lexicon_size" => self.entity_lexicon_size = int(value)?,
            "shared_entity_frac" => self.shared_entity_frac = real(value)?,
            "n_templates" => self.n_templates = int(value)?,
            "seed" => self.seed = value.parse().map_err(|e| format!("{key} = {value:?}: {e}"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// The four generated corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpora {
    pub source: LabeledDataset,
    pub target: UnlabeledCorpus,
    pub test_in_domain: LabeledDataset,
    pub test_shifted: LabeledDataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Elem {
    /// Index into the function-word inventory.
    Word(usize),
    /// Index into the class list.
    Slot(usize),
}

type Template = Vec<Elem>;
type EntityForm = Vec<String>;

/// Surface realization of one domain.
struct Domain {
    words: Vec<String>,
    templates: Vec<Template>,
    /// Entity forms per class.
    lexicon: Vec<Vec<EntityForm>>,
}

struct WordMaker {
    used: HashSet<String>,
}

impl WordMaker {
    fn make(&mut self, rng: &mut ChaCha8Rng, syllables: std::ops::RangeInclusive<usize>, capital: bool) -> String {
        loop {
            let n = rng.gen_range(syllables.clone());
            let mut w: String = (0..n)
                .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
                .collect();
            if capital {
                w = w[..1].to_uppercase() + &w[1..];
            }
            if self.used.insert(w.to_lowercase()) {
                return w;
            }
        }
    }
}

fn make_template(rng: &mut ChaCha8Rng, n_classes: usize, n_fillers: usize) -> Template {
    let k = rng.gen_range(1..=MAX_ENTITIES);
    let units: Vec<Vec<Elem>> = (0..k)
        .map(|_| {
            let class = rng.gen_range(0..n_classes);
            let mut unit = Vec::new();
            if rng.gen_bool(TRIGGER_PROB) {
                unit.push(Elem::Word(n_fillers + class * TRIGGERS_PER_CLASS + rng.gen_range(0..TRIGGERS_PER_CLASS)));
            }
            unit.push(Elem::Slot(class));
            unit
        })
        .collect();
    let triggers = units.iter().filter(|u| u.len() == 2).count();

    // Enough fillers to separate every pair of entities, and every
    // realization within [MIN_LEN, MAX_LEN].
    let f_min = MIN_LEN.saturating_sub(k).max(triggers + k - 1);
    let f_max = MAX_LEN - MAX_ENTITY_TOKENS * k;
    let n_plain = rng.gen_range(f_min..=f_max) - triggers;

    // Entities go into distinct gaps between plain function words.
    let mut gaps = rand::seq::index::sample(rng, n_plain + 1, k).into_vec();
    gaps.sort_unstable();
    let mut units = units.into_iter();
    let mut out = Vec::new();
    for gap in 0..=n_plain {
        if gaps.binary_search(&gap).is_ok() {
            out.extend(units.next().expect("one unit per chosen gap"));
        }
        if gap < n_plain {
            out.push(Elem::Word(rng.gen_range(0..n_fillers)));
        }
    }
    out
}

fn realize(
    rng: &mut ChaCha8Rng,
    domain: &Domain,
    classes: &[String],
) -> Sentence {
    let template = domain.templates.choose(rng).expect("templates are non-empty");
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for e in template {
        match *e {
            Elem::Word(i) => {
                tokens.push(domain.words[i].clone());
                tags.push("O".to_string());
            }
            Elem::Slot(c) => {
                let form = domain.lexicon[c].choose(rng).expect("lexicon is non-empty");
                for (j, t) in form.iter().enumerate() {
                    tokens.push(t.clone());
                    tags.push(format!("{}-{}", if j == 0 { "B" } else { "I" }, classes[c]));
                }
            }
        }
    }
    Sentence::labeled(tokens, tags).expect("generated tags are valid IOB2")
}

fn draw(
    rng: &mut ChaCha8Rng,
    domain: &Domain,
    classes: &[String],
    n: usize,
    seen: &mut HashSet<Vec<String>>,
    what: &'static str,
) -> Result<Vec<Sentence>, SynthError> {
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > n * MAX_ATTEMPTS_PER_SENTENCE {
            return Err(SynthError::Exhausted { what, wanted: n });
        }
        let s = realize(rng, domain, classes);
        if seen.insert(s.tokens().to_vec()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Generates source, target, in-domain test and shifted test corpora.
///
/// All four are pairwise disjoint at the sentence level. Each test set has
/// `n_test_shifted` sentences.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpora, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut maker = WordMaker { used: HashSet::new() };
    let n_classes = config.classes.len();
    let n_words = N_FILLERS + n_classes * TRIGGERS_PER_CLASS;

    let words_a: Vec<String> = (0..n_words).map(|_| maker.make(&mut rng, 1..=2, false)).collect();
    let mut words_b = words_a.clone();
    let n_replaced = (config.shift * n_words as f64).round() as usize;
    let mut replaced: Vec<usize> = (0..n_words).collect();
    replaced.shuffle(&mut rng);
    for &i in &replaced[..n_replaced] {
        words_b[i] = maker.make(&mut rng, 1..=2, false);
    }

    let templates_a: Vec<Template> = (0..config.n_templates)
        .map(|_| make_template(&mut rng, n_classes, N_FILLERS))
        .collect();
    let n_b_only = (config.shift * config.n_templates as f64).round() as usize;
    let mut templates_b: Vec<Template> = templates_a.choose_multiple(&mut rng, config.n_templates - n_b_only).cloned().collect();
    templates_b.extend((0..n_b_only).map(|_| make_template(&mut rng, n_classes, N_FILLERS)));

    let n_shared = (config.shared_entity_frac * config.entity_lexicon_size as f64).round() as usize;
    let n_own = config.entity_lexicon_size - n_shared;
    let mut entity = |rng: &mut ChaCha8Rng| -> EntityForm {
        let len = rng.gen_range(1..=MAX_ENTITY_TOKENS);
        (0..len).map(|_| maker.make(rng, 2..=3, true)).collect()
    };
    let mut lexicon_a = Vec::with_capacity(n_classes);
    let mut lexicon_b = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let shared: Vec<EntityForm> = (0..n_shared).map(|_| entity(&mut rng)).collect();
        let own_a: Vec<EntityForm> = (0..n_own).map(|_| entity(&mut rng)).collect();
        let own_b: Vec<EntityForm> = (0..n_own).map(|_| entity(&mut rng)).collect();
        lexicon_a.push([shared.clone(), own_a].concat());
        lexicon_b.push([shared, own_b].concat());
    }

    let a = Domain {
        words: words_a,
        templates: templates_a,
        lexicon: lexicon_a,
    };
    let b = Domain {
        words: words_b,
        templates: templates_b,
        lexicon: lexicon_b,
    };

    let classes = &config.class_set();
    let class_list = &config.classes;
    let mut seen = HashSet::new();
    let source = draw(&mut rng, &a, class_list, config.n_source_labeled, &mut seen, "source")?;
    let test_in = draw(&mut rng, &a, class_list, config.n_test_shifted, &mut seen, "test_in_domain")?;
    let target = draw(&mut rng, &b, class_list, config.n_target_unlabeled, &mut seen, "target")?;
    let test_shift = draw(&mut rng, &b, class_list, config.n_test_shifted, &mut seen, "test_shifted")?;

    let labeled = |s: Vec<Sentence>| LabeledDataset::with_classes(s, classes.clone()).expect("valid generated data");
    Ok(SynthCorpora {
        source: labeled(source),
        target: UnlabeledCorpus::new(target.iter().map(Sentence::without_tags).collect()).expect("non-empty"),
        test_in_domain: labeled(test_in),
        test_shifted: labeled(test_shift),
    })
}

impl SynthConfig {
    pub fn class_set(&self) -> BTreeSet<String> {
        self.classes.iter().cloned().collect()
    }
}
