//! Shared transformer feature extractor with an NER head and a domain
//! discriminator head coupled through gradient reversal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::compute::{ComputeError, Graph, Real, Tensor, Var};
use crate::corpus::{encode_batch, CorpusError, EncodedBatch, Sentence, Tag, TagIndex, Vocab};

/// Standard deviation of dense and embedding initializers.
pub const INIT_STD: f64 = 0.02;

/// Domain labels of the discriminator.
pub const SOURCE_DOMAIN: i64 = 0;
pub const TARGET_DOMAIN: i64 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("cannot tag an empty sentence")]
    EmptySentence,
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub n_tags: usize,
    pub dropout: f64,
    pub head_hidden: usize,
}

impl ModelConfig {
    /// Small defaults that train in minutes on a CPU.
    pub fn desk(vocab_size: usize, n_tags: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_encoder_layers: 2,
            n_heads: 4,
            d_ffn: 128,
            max_len: 256,
            n_tags,
            dropout: 0.1,
            head_hidden: 64,
        }
    }

    /// 768-wide embeddings with a 512-unit feed-forward encoder layer.
    pub fn full_scale(vocab_size: usize, n_tags: usize) -> Self {
        Self {
            vocab_size,
            d_model: 768,
            n_encoder_layers: 2,
            n_heads: 12,
            d_ffn: 512,
            max_len: 512,
            n_tags,
            dropout: 0.1,
            head_hidden: 768,
        }
    }

    /// `(key, value)` pairs in a fixed order; values round-trip through [`Self::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_encoder_layers", self.n_encoder_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ffn", self.d_ffn.to_string()),
            ("max_len", self.max_len.to_string()),
            ("n_tags", self.n_tags.to_string()),
            ("dropout", self.dropout.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
        ]
    }

    /// Sets one field from its textual value. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        let int = |v: &str| v.parse::<usize>().map_err(|e| format!("{key} = {v:?}: {e}"));
        match key {
            "vocab_size" => self.vocab_size = int(value)?,
            "d_model" => self.d_model = int(value)?,
            "n_encoder_layers" => self.n_encoder_layers = int(value)?,
            "n_heads" => self.n_heads = int(value)?,
            "d_ffn" => self.d_ffn = int(value)?,
            "max_len" => self.max_len = int(value)?,
            "n_tags" => self.n_tags = int(value)?,
            "head_hidden" => self.head_hidden = int(value)?,
            "dropout" => self.dropout = value.parse().map_err(|e| format!("{key} = {value:?}: {e}"))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size < 2 {
            return err(format!("vocab_size {} < 2", self.vocab_size));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_len", self.max_len),
            ("n_tags", self.n_tags),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_encoder_layers < 2 {
            return err(format!(
                "n_encoder_layers {} < 2; the discriminator reads the last two layers",
                self.n_encoder_layers
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    FeatureExtractor,
    NerHead,
    DomainHead,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Dense,
    Embedding { zero_row: Option<usize> },
    Zeros,
    Ones,
}

/// A named trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    /// Whether weight decay applies (false for biases and layer-norm).
    pub decay: bool,
    pub tensor: Tensor<T>,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    group: ParamGroup,
    decay: bool,
    init: Init,
}

#[derive(Clone, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    ln1: (usize, usize),
    ffn1: Dense,
    ffn2: Dense,
    ln2: (usize, usize),
}

/// Indices of each parameter in [`ModelParams`].
#[derive(Clone, Debug)]
struct Layout {
    token: usize,
    position: usize,
    embed_ln: (usize, usize),
    layers: Vec<EncoderLayer>,
    ner: (Dense, Dense),
    domain: (Dense, Dense),
}

struct Planner {
    specs: Vec<Spec>,
}

impl Planner {
    fn push(&mut self, name: String, shape: Vec<usize>, group: ParamGroup, init: Init) -> usize {
        let decay = matches!(init, Init::Dense | Init::Embedding { .. });
        self.specs.push(Spec {
            name,
            shape,
            group,
            decay,
            init,
        });
        self.specs.len() - 1
    }

    fn dense(&mut self, name: &str, inputs: usize, outputs: usize, group: ParamGroup) -> Dense {
        Dense {
            w: self.push(format!("{name}.w"), vec![inputs, outputs], group, Init::Dense),
            b: self.push(format!("{name}.b"), vec![outputs], group, Init::Zeros),
        }
    }

    fn layer_norm(&mut self, name: &str, width: usize) -> (usize, usize) {
        let fe = ParamGroup::FeatureExtractor;
        (
            self.push(format!("{name}.gamma"), vec![width], fe, Init::Ones),
            self.push(format!("{name}.beta"), vec![width], fe, Init::Zeros),
        )
    }
}

fn plan(config: &ModelConfig) -> (Vec<Spec>, Layout) {
    let mut p = Planner { specs: Vec::new() };
    let d = config.d_model;
    let fe = ParamGroup::FeatureExtractor;
    let token = p.push(
        "embed.token".into(),
        vec![config.vocab_size, d],
        fe,
        Init::Embedding {
            zero_row: Some(crate::corpus::PAD_ID),
        },
    );
    let position = p.push(
        "embed.position".into(),
        vec![config.max_len, d],
        fe,
        Init::Embedding { zero_row: None },
    );
    let embed_ln = p.layer_norm("embed.ln", d);
    let layers = (0..config.n_encoder_layers)
        .map(|l| {
            let n = format!("encoder.{l}");
            EncoderLayer {
                q: p.dense(&format!("{n}.attn.q"), d, d, fe),
                k: p.dense(&format!("{n}.attn.k"), d, d, fe),
                v: p.dense(&format!("{n}.attn.v"), d, d, fe),
                o: p.dense(&format!("{n}.attn.o"), d, d, fe),
                ln1: p.layer_norm(&format!("{n}.ln1"), d),
                ffn1: p.dense(&format!("{n}.ffn1"), d, config.d_ffn, fe),
                ffn2: p.dense(&format!("{n}.ffn2"), config.d_ffn, d, fe),
                ln2: p.layer_norm(&format!("{n}.ln2"), d),
            }
        })
        .collect();
    let h = config.head_hidden;
    let ner = (
        p.dense("ner.dense1", d, h, ParamGroup::NerHead),
        p.dense("ner.dense2", h, config.n_tags, ParamGroup::NerHead),
    );
    let domain = (
        p.dense("domain.dense1", 2 * d, h, ParamGroup::DomainHead),
        p.dense("domain.dense2", h, 2, ParamGroup::DomainHead),
    );
    let layout = Layout {
        token,
        position,
        embed_ln,
        layers,
        ner,
        domain,
    };
    (p.specs, layout)
}

fn truncated_normal(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}

/// All trainable tensors, in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

impl PartialEq for Layout {
    fn eq(&self, _: &Self) -> bool {
        // Derived from the config, which is compared separately.
        true
    }
}

/// Deterministic initialization from `(config, seed)`.
pub fn init_model<T: Real>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    config.validate()?;
    let (specs, layout) = plan(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let params = specs
        .into_iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data: Vec<f64> = match s.init {
                Init::Dense => (0..n).map(|_| truncated_normal(&mut rng, &normal)).collect(),
                Init::Embedding { zero_row } => {
                    let width = s.shape[1];
                    let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                    if let Some(r) = zero_row {
                        v[r * width..(r + 1) * width].iter_mut().for_each(|x| *x = 0.0);
                    }
                    v
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            Param {
                name: s.name,
                group: s.group,
                decay: s.decay,
                tensor: Tensor::new(s.shape, data).expect("planned shape").cast(),
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        params,
        layout,
    })
}

/// Parameters registered on a graph for one forward/backward pass.
pub struct BoundModel<'a, T> {
    params: &'a ModelParams<T>,
    vars: Vec<Var>,
}

impl<T: Real> ModelParams<T> {
    /// Reassembles parameters from named tensors, checking names and shapes.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, ModelError> {
        config.validate()?;
        let (specs, layout) = plan(config);
        if specs.len() != named.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for (s, (name, tensor)) in specs.into_iter().zip(named) {
            if s.name != name || s.shape != tensor.shape() {
                return Err(ModelError::InvalidConfig(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    tensor.shape(),
                    s.name,
                    s.shape
                )));
            }
            params.push(Param {
                name,
                group: s.group,
                decay: s.decay,
                tensor,
            });
        }
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    decay: p.decay,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundModel<'_, T> {
        BoundModel {
            params: self,
            vars: self.params.iter().map(|p| graph.leaf(p.tensor.clone())).collect(),
        }
    }

    /// Eval-mode outputs of the final two encoder layers: `(H_last, H_prev)`.
    pub fn extract_features(&self, batch: &EncodedBatch) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let (last, prev) = m.features(&mut g, batch, None)?;
        Ok((g.value(last).clone(), g.value(prev).clone()))
    }

    /// Per-token tag log-probabilities `[B, T, n_tags]` from `H_last`.
    pub fn ner_log_probs(&self, h_last: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let h = g.leaf(h_last.clone());
        let out = m.ner_log_probs(&mut g, h)?;
        Ok(g.value(out).clone())
    }

    /// Per-sentence domain log-probabilities `[B, 2]`.
    pub fn domain_log_probs(
        &self,
        h_last: &Tensor<T>,
        h_prev: &Tensor<T>,
        mask: &[bool],
        lambda: T,
    ) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let (a, b) = (g.leaf(h_last.clone()), g.leaf(h_prev.clone()));
        let out = m.domain_log_probs(&mut g, a, b, mask, Some(lambda))?;
        Ok(g.value(out).clone())
    }
}

impl<'a, T: Real> BoundModel<'a, T> {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, d: &Dense) -> Result<Var, ComputeError> {
        let y = g.matmul(x, self.vars[d.w])?;
        g.add(y, self.vars[d.b])
    }

    fn layer_norm(&self, g: &mut Graph<T>, x: Var, ln: (usize, usize)) -> Result<Var, ComputeError> {
        g.layer_norm(x, self.vars[ln.0], self.vars[ln.1])
    }

    fn drop(&self, g: &mut Graph<T>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var, ComputeError> {
        match rng {
            Some(r) => g.dropout(x, self.params.config.dropout, *r),
            None => Ok(x),
        }
    }

    /// Runs the encoder; returns the outputs of its last and second-to-last
    /// layers. Dropout is applied only when `rng` is given.
    pub fn features(
        &self,
        g: &mut Graph<T>,
        batch: &EncodedBatch,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var), ModelError> {
        let layout = &self.params.layout;
        let shape = [batch.batch, batch.seq_len];
        let tok = g.embedding(self.vars[layout.token], &batch.ids, &shape)?;
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
        let pos = g.embedding(self.vars[layout.position], &positions, &shape)?;
        let x = g.add(tok, pos)?;
        let x = self.layer_norm(g, x, layout.embed_ln)?;
        let mut x = self.drop(g, x, &mut rng)?;

        let heads = self.params.config.n_heads;
        let mut hidden = Vec::with_capacity(layout.layers.len());
        for layer in &layout.layers {
            let q = self.dense(g, x, &layer.q)?;
            let k = self.dense(g, x, &layer.k)?;
            let v = self.dense(g, x, &layer.v)?;
            let a = g.attention(q, k, v, &batch.mask, heads)?;
            let a = self.dense(g, a, &layer.o)?;
            let a = self.drop(g, a, &mut rng)?;
            let h = g.add(x, a)?;
            let h = self.layer_norm(g, h, layer.ln1)?;
            let f = self.dense(g, h, &layer.ffn1)?;
            let f = g.gelu(f)?;
            let f = self.dense(g, f, &layer.ffn2)?;
            let f = self.drop(g, f, &mut rng)?;
            let out = g.add(h, f)?;
            x = self.layer_norm(g, out, layer.ln2)?;
            hidden.push(x);
        }
        let n = hidden.len();
        Ok((hidden[n - 1], hidden[n - 2]))
    }

    /// Two dense layers with GELU between, then log-softmax over tags.
    pub fn ner_log_probs(&self, g: &mut Graph<T>, h_last: Var) -> Result<Var, ModelError> {
        let (d1, d2) = &self.params.layout.ner;
        let x = self.dense(g, h_last, d1)?;
        let x = g.gelu(x)?;
        let x = self.dense(g, x, d2)?;
        Ok(g.log_softmax(x)?)
    }

    /// Masked mean-pools both hidden layers, concatenates them, passes the
    /// result through gradient reversal and the two-layer discriminator.
    ///
    /// `lambda = None` skips the reversal (plain identity coupling).
    pub fn domain_log_probs(
        &self,
        g: &mut Graph<T>,
        h_last: Var,
        h_prev: Var,
        mask: &[bool],
        lambda: Option<T>,
    ) -> Result<Var, ModelError> {
        let a = g.masked_mean_pool(h_last, mask)?;
        let b = g.masked_mean_pool(h_prev, mask)?;
        let pooled = g.concat(&[a, b])?;
        let x = match lambda {
            Some(l) => g.gradient_reversal(pooled, l)?,
            None => pooled,
        };
        let (d1, d2) = &self.params.layout.domain;
        let x = self.dense(g, x, d1)?;
        let x = g.gelu(x)?;
        let x = self.dense(g, x, d2)?;
        Ok(g.log_softmax(x)?)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Promotes every `I-X` that does not continue an `X` entity to `B-X`.
pub fn repair_iob2(tags: &mut [String]) {
    let mut prev_class: Option<String> = None;
    for t in tags.iter_mut() {
        let parsed = Tag::parse(t).ok();
        let class = parsed.and_then(|p| p.class()).map(str::to_string);
        if let Some(Tag::Inside(c)) = parsed {
            if prev_class.as_deref() != Some(c) {
                *t = format!("B-{c}");
            }
        }
        prev_class = class;
    }
}

/// Tags one sentence (dropout off, lowest-id tie-breaking, IOB2 repair).
pub fn predict_tags<T: Real>(
    params: &ModelParams<T>,
    sentence: &Sentence,
    vocab: &Vocab,
    tag_index: &TagIndex,
) -> Result<Vec<String>, ModelError> {
    if sentence.is_empty() {
        return Err(ModelError::EmptySentence);
    }
    Ok(predict_batch(params, std::slice::from_ref(sentence), vocab, tag_index, 1)?.remove(0))
}

/// Tags many sentences, `batch_size` at a time. Positions beyond the model's
/// `max_len` are tagged `O`.
pub fn predict_batch<T: Real>(
    params: &ModelParams<T>,
    sentences: &[Sentence],
    vocab: &Vocab,
    tag_index: &TagIndex,
    batch_size: usize,
) -> Result<Vec<Vec<String>>, ModelError> {
    let mut out = Vec::with_capacity(sentences.len());
    let no_tags: Vec<Sentence> = sentences.iter().map(Sentence::without_tags).collect();
    for chunk in no_tags.chunks(batch_size.max(1)) {
        let refs: Vec<&Sentence> = chunk.iter().collect();
        let batch = encode_batch(&refs, vocab, tag_index, params.config.max_len)?;
        let mut g = Graph::new();
        let m = params.bind(&mut g);
        let (last, _) = m.features(&mut g, &batch, None)?;
        let lp = m.ner_log_probs(&mut g, last)?;
        let lp = g.value(lp).data();
        let n_tags = params.config.n_tags;
        for (b, s) in chunk.iter().enumerate() {
            let mut tags: Vec<String> = (0..s.len())
                .map(|t| {
                    if t >= batch.seq_len {
                        return "O".to_string();
                    }
                    let row = &lp[(b * batch.seq_len + t) * n_tags..(b * batch.seq_len + t + 1) * n_tags];
                    tag_index.tag(argmax(row)).unwrap_or("O").to_string()
                })
                .collect();
            repair_iob2(&mut tags);
            out.push(tags);
        }
    }
    Ok(out)
}

/// Independent dropout stream for `(seed, step, stream)`.
pub fn dropout_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&stream.to_le_bytes());
    key[24..].copy_from_slice(b"dropout\0");
    ChaCha8Rng::from_seed(key)
}
