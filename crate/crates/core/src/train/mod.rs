//! Joint training over labeled source and unlabeled target text.

mod batches;
mod checkpoint;
mod optim;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batches::{make_batches, steps_per_epoch, StepBatch};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, MAGIC};
pub use optim::{clip_grad_norm, lr_at, AdamW};

use crate::compute::{ComputeError, Graph, Real, Tensor};
use crate::corpus::{encode_batch, CorpusError, EncodedBatch, LabeledDataset, Sentence, TagIndex, Vocab};
use crate::eval::{score, EvalError};
use crate::model::{dropout_rng, init_model, predict_batch, ModelConfig, ModelError, ModelParams};
use crate::objective::{joint_objective, DropoutStreams, LossBreakdown, ObjectiveError, DEFAULT_ALPHA};

/// Global gradient-norm bound applied before every update.
pub const MAX_GRAD_NORM: f64 = 1.0;
/// Sentences per forward pass when tagging the validation split.
const EVAL_BATCH: usize = 64;
/// Dropout stream ids of the two branches.
const SOURCE_STREAM: u64 = 0;
const TARGET_STREAM: u64 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    Diverged { epoch: usize, step: usize },
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Validation metric that drives early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StopMetric {
    #[default]
    TokenAccuracy,
    SpanF1,
}

impl fmt::Display for StopMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TokenAccuracy => "token_accuracy",
            Self::SpanF1 => "span_f1",
        })
    }
}

impl FromStr for StopMetric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "token_accuracy" => Ok(Self::TokenAccuracy),
            "span_f1" => Ok(Self::SpanF1),
            _ => Err(format!("unknown early-stop metric {s:?} (token_accuracy | span_f1)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub alpha: f64,
    pub grl_lambda: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub early_stop_metric: StopMetric,
    pub patience: usize,
    pub adapt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 2e-5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 16,
            alpha: DEFAULT_ALPHA,
            grl_lambda: 1.0,
            warmup_frac: 0.1,
            seed: 1,
            early_stop_metric: StopMetric::TokenAccuracy,
            patience: 3,
            adapt: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.grl_lambda > 0.0 && self.grl_lambda.is_finite()) {
            return bad(format!("grl_lambda must be positive, got {}", self.grl_lambda));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) || self.weight_decay < 0.0 {
            return bad("adam_eps must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("alpha", self.alpha.to_string()),
            ("grl_lambda", self.grl_lambda.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("seed", self.seed.to_string()),
            ("early_stop_metric", self.early_stop_metric.to_string()),
            ("patience", self.patience.to_string()),
            ("adapt", self.adapt.to_string()),
        ]
    }

    /// Sets one field from its textual value. Returns `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, String> {
        fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, String>
        where
            V::Err: fmt::Display,
        {
            value.parse().map_err(|e| format!("{key} = {value:?}: {e}"))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "grl_lambda" => self.grl_lambda = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "early_stop_metric" => self.early_stop_metric = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "adapt" => self.adapt = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ner: f64,
    pub l_adv: f64,
    pub l_total: f64,
    pub val_metric: f64,
    pub lr_last: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub steps: usize,
}

impl History {
    /// JSON array of per-epoch records.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.records).expect("history serializes")
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.records.get(self.best_epoch.checked_sub(1)?).map(|r| r.val_metric)
    }
}

/// Encoded inputs for [`train`]. The vocabulary and tag index must cover the
/// training split.
pub struct TrainData<'a> {
    pub train: &'a LabeledDataset,
    pub val: &'a LabeledDataset,
    pub target: Option<&'a [Sentence]>,
    pub vocab: &'a Vocab,
    pub tag_index: &'a TagIndex,
}

pub struct Trained {
    pub params: ModelParams<f32>,
    pub history: History,
}

/// Forward, backward, clip and update on one step. Returns the loss values.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    params: &mut ModelParams<T>,
    optimizer: &mut AdamW<T>,
    source: &EncodedBatch,
    target: Option<&EncodedBatch>,
    config: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<LossBreakdown, TrainError> {
    let mut g = Graph::new();
    let model = params.bind(&mut g);
    let mut src_rng = dropout_rng(config.seed, step as u64, SOURCE_STREAM);
    let mut tgt_rng = dropout_rng(config.seed, step as u64, TARGET_STREAM);
    let loss = joint_objective(
        &model,
        &mut g,
        source,
        target,
        T::lit(config.alpha),
        Some(T::lit(config.grl_lambda)),
        Some(DropoutStreams {
            source: &mut src_rng,
            target: &mut tgt_rng,
        }),
    )?;
    let breakdown = loss.breakdown(&g);
    if !breakdown.l_total.is_finite() {
        return Err(ComputeError::NonFinite { op: "l_total" }.into());
    }
    let grads = g.backward(loss.l_total)?;
    let mut grads: Vec<Tensor<T>> = model.vars().iter().map(|&v| grads.get(v)).collect();
    drop(model);
    clip_grad_norm(&mut grads, MAX_GRAD_NORM);
    optimizer.step(params.params_mut(), &grads, T::lit(lr))?;
    Ok(breakdown)
}

/// Value of the early-stopping metric on `data`.
pub fn validation_metric(
    params: &ModelParams<f32>,
    data: &LabeledDataset,
    vocab: &Vocab,
    tag_index: &TagIndex,
    metric: StopMetric,
) -> Result<f64, TrainError> {
    let pred = predict_batch(params, data.sentences(), vocab, tag_index, EVAL_BATCH)?;
    let report = score(data, &pred)?;
    Ok(match metric {
        StopMetric::TokenAccuracy => report.token_accuracy,
        StopMetric::SpanF1 => report.f1,
    })
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Compute(ComputeError::NonFinite { .. })
            | TrainError::Objective(ObjectiveError::Compute(ComputeError::NonFinite { .. }))
            | TrainError::Objective(ObjectiveError::Model(ModelError::Compute(ComputeError::NonFinite { .. })))
            | TrainError::NonFiniteGradient { .. }
    )
}

/// Trains from a fresh initialization and returns the best validation snapshot.
///
/// With `adapt` the domain branch runs on one target batch per source batch;
/// without it the target corpus is ignored and the objective is the tagging
/// loss alone. Training stops after `patience` epochs without a strict
/// improvement of the validation metric, or at `max_epochs`.
pub fn train(model_config: &ModelConfig, config: &TrainConfig, data: &TrainData<'_>) -> Result<Trained, TrainError> {
    config.validate()?;
    model_config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::InvalidConfig("training split is empty".into()));
    }
    let target = match (config.adapt, data.target) {
        (true, Some(t)) if !t.is_empty() => Some(t),
        (true, _) => return Err(TrainError::InvalidConfig("adaptation needs a non-empty target corpus".into())),
        (false, _) => None,
    };
    if model_config.vocab_size != data.vocab.len() || model_config.n_tags != data.tag_index.len() {
        return Err(TrainError::InvalidConfig(format!(
            "model expects vocabulary {} and {} tags, data has {} and {}",
            model_config.vocab_size,
            model_config.n_tags,
            data.vocab.len(),
            data.tag_index.len()
        )));
    }

    let mut params = init_model::<f32>(model_config, config.seed)?;
    let mut optimizer = AdamW::new(params.params(), config);
    let n_src = data.train.len();
    let per_epoch = steps_per_epoch(n_src, config.batch_size);
    let total_steps = per_epoch * config.max_epochs;
    let encode = |sentences: &[&Sentence]| encode_batch(sentences, data.vocab, data.tag_index, model_config.max_len);

    let mut history = History::default();
    let mut best: Option<(f64, ModelParams<f32>)> = None;
    let mut since_best = 0;
    let mut step = 0;

    for epoch in 1..=config.max_epochs {
        let plan = make_batches(n_src, target.map(<[Sentence]>::len), config.batch_size, config.seed, epoch as u64);
        let mut sums = LossBreakdown::default();
        let mut lr = 0.0;
        for sb in &plan {
            let src: Vec<&Sentence> = sb.source.iter().map(|&i| &data.train.sentences()[i]).collect();
            let src = encode(&src)?;
            let tgt = match (&sb.target, target) {
                (Some(idx), Some(t)) => Some(encode(&idx.iter().map(|&i| &t[i]).collect::<Vec<_>>())?),
                _ => None,
            };
            lr = lr_at(step, total_steps, config);
            let b = train_step(&mut params, &mut optimizer, &src, tgt.as_ref(), config, lr, step).map_err(|e| {
                if is_divergence(&e) {
                    TrainError::Diverged { epoch, step }
                } else {
                    e
                }
            })?;
            sums.l_ner += b.l_ner;
            sums.l_adv += b.l_adv;
            sums.l_total += b.l_total;
            step += 1;
        }
        let n = plan.len() as f64;
        let val_metric = validation_metric(&params, data.val, data.vocab, data.tag_index, config.early_stop_metric)?;
        history.records.push(EpochRecord {
            epoch,
            l_ner: sums.l_ner / n,
            l_adv: sums.l_adv / n,
            l_total: sums.l_total / n,
            val_metric,
            lr_last: lr,
        });
        if best.as_ref().is_none_or(|(m, _)| val_metric > *m) {
            best = Some((val_metric, params.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    history.steps = step;
    let (_, params) = best.expect("at least one epoch ran");
    Ok(Trained { params, history })
}
