//! Supervised tagging loss, adversarial domain loss and their weighted sum.
//!
//! Both losses are per-batch means so their scale, and therefore the meaning
//! of `alpha`, does not depend on batch size. The min-max over the
//! discriminator and the feature extractor happens in one backward pass: the
//! gradient reversal inside the domain branch flips the sign of everything
//! that reaches the extractor from the adversarial term.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::{ComputeError, Graph, Real, Var};
use crate::corpus::{EncodedBatch, IGNORE_TAG};
use crate::model::{BoundModel, ModelError, SOURCE_DOMAIN, TARGET_DOMAIN};

/// Weight of the adversarial term in the total loss.
pub const DEFAULT_ALPHA: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("source batch has no labeled tokens")]
    AllIgnored,
    #[error("domain batch is empty")]
    EmptyBatch,
    #[error("alpha must be non-negative, got {0}")]
    NegativeAlpha(f64),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_ner: f64,
    pub l_ds: f64,
    pub l_dt: f64,
    pub l_adv: f64,
    pub alpha: f64,
    pub l_total: f64,
}

/// Mean token NLL over positions that are both masked-in and labeled.
pub fn ner_loss<T: Real>(
    g: &mut Graph<T>,
    log_probs: Var,
    tag_ids: &[i64],
    mask: &[bool],
) -> Result<Var, ObjectiveError> {
    let targets: Vec<i64> = tag_ids
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { t } else { IGNORE_TAG })
        .collect();
    let (loss, all_ignored) = g.nll_loss(log_probs, &targets, IGNORE_TAG)?;
    if all_ignored {
        return Err(ObjectiveError::AllIgnored);
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug)]
pub struct AdversarialTerms {
    pub l_ds: Var,
    pub l_dt: Var,
    pub l_adv: Var,
}

/// Source rows are labeled domain 0, target rows domain 1;
/// `l_adv = l_ds + l_dt`.
pub fn adversarial_loss<T: Real>(
    g: &mut Graph<T>,
    source_log_probs: Var,
    target_log_probs: Var,
) -> Result<AdversarialTerms, ObjectiveError> {
    let domain_nll = |g: &mut Graph<T>, lp: Var, label: i64| -> Result<Var, ObjectiveError> {
        let rows = g.value(lp).numel() / 2;
        if rows == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        Ok(g.nll_loss(lp, &vec![label; rows], IGNORE_TAG)?.0)
    };
    let l_ds = domain_nll(g, source_log_probs, SOURCE_DOMAIN)?;
    let l_dt = domain_nll(g, target_log_probs, TARGET_DOMAIN)?;
    let l_adv = g.add(l_ds, l_dt)?;
    Ok(AdversarialTerms { l_ds, l_dt, l_adv })
}

/// `l_ner + alpha * l_adv`; without an adversarial term this is `l_ner`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    l_ner: Var,
    l_adv: Option<Var>,
    alpha: T,
) -> Result<Var, ObjectiveError> {
    if alpha < T::zero() {
        return Err(ObjectiveError::NegativeAlpha(alpha.to_f64().unwrap_or(f64::NAN)));
    }
    match l_adv {
        Some(adv) => {
            let weighted = g.scale(adv, alpha)?;
            Ok(g.add(l_ner, weighted)?)
        }
        None => Ok(l_ner),
    }
}

/// Scalar form of [`total_loss`].
pub fn total_loss_value(l_ner: f64, l_adv: f64, alpha: f64) -> f64 {
    l_ner + alpha * l_adv
}

/// Graph handles for one joint forward pass.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub l_ner: Var,
    pub adversarial: Option<AdversarialTerms>,
    pub l_total: Var,
    pub alpha: f64,
}

impl JointLoss {
    pub fn breakdown<T: Real>(&self, g: &Graph<T>) -> LossBreakdown {
        let val = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        let (l_ds, l_dt, l_adv) = match self.adversarial {
            Some(a) => (val(a.l_ds), val(a.l_dt), val(a.l_adv)),
            None => (0.0, 0.0, 0.0),
        };
        LossBreakdown {
            l_ner: val(self.l_ner),
            l_ds,
            l_dt,
            l_adv,
            alpha: self.alpha,
            l_total: val(self.l_total),
        }
    }
}

/// Dropout streams for the source and target forward passes.
pub struct DropoutStreams<'a> {
    pub source: &'a mut ChaCha8Rng,
    pub target: &'a mut ChaCha8Rng,
}

/// Forward pass over a source batch and, when given, a target batch.
///
/// Without a target batch the domain branch is skipped entirely and the
/// objective is the plain tagging loss. `lambda = None` replaces the
/// gradient reversal with an identity coupling.
pub fn joint_objective<T: Real>(
    model: &BoundModel<'_, T>,
    g: &mut Graph<T>,
    source: &EncodedBatch,
    target: Option<&EncodedBatch>,
    alpha: T,
    lambda: Option<T>,
    dropout: Option<DropoutStreams<'_>>,
) -> Result<JointLoss, ObjectiveError> {
    let (src_rng, tgt_rng) = match dropout {
        Some(d) => (Some(d.source), Some(d.target)),
        None => (None, None),
    };
    let (h_last, h_prev) = model.features(g, source, src_rng)?;
    let ner_lp = model.ner_log_probs(g, h_last)?;
    let l_ner = ner_loss(g, ner_lp, &source.tags, &source.mask)?;

    let adversarial = match target {
        Some(tgt) => {
            let src_dom = model.domain_log_probs(g, h_last, h_prev, &source.mask, lambda)?;
            let (t_last, t_prev) = model.features(g, tgt, tgt_rng)?;
            let tgt_dom = model.domain_log_probs(g, t_last, t_prev, &tgt.mask, lambda)?;
            Some(adversarial_loss(g, src_dom, tgt_dom)?)
        }
        None => None,
    };
    let l_total = total_loss(g, l_ner, adversarial.map(|a| a.l_adv), alpha)?;
    Ok(JointLoss {
        l_ner,
        adversarial,
        l_total,
        alpha: alpha.to_f64().unwrap_or(f64::NAN),
    })
}
