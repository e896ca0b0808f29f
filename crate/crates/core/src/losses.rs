//! Training objectives.
//!
//! Four base losses over a classification batch and an outlier batch:
//!
//! - `ce_loss`: mean cross-entropy of in-distribution samples.
//! - `oe_loss`: outlier exposure, the cross-entropy between outlier outputs
//!   and the uniform label distribution; minimized (at ln C) exactly when
//!   the softmax output is uniform.
//! - `orth_loss`: mean absolute cosine similarity between outlier features
//!   and the class weight rows; driving it to zero confines outlier
//!   features to the orthogonal complement of the class-weight span.
//! - `nc_loss`: negative cosine between an in-distribution feature and its
//!   class weight row; minimized at -1 when features collapse onto their
//!   class weights.
//!
//! Plus `euclidean_ablation_loss`, a distance-based alternative to the two
//! cosine losses, and `composite_loss`, the stage-masked weighted sum used
//! by the trainer. Features and class weights are l2-normalized inside each
//! cosine-style loss, and gradients flow through the normalization of both
//! operands (no stop-gradient anywhere).

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorId};

/// Division guard in the euclidean ablation's reciprocal term.
pub const EUCLID_EPS: f64 = 1e-6;

/// Weights of the composite objective: `lambda` on outlier exposure,
/// `alpha` on class alignment, `beta` on orthogonality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got lambda={} alpha={} beta={}",
                self.lambda, self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Training stage. Stage one runs cross-entropy plus outlier exposure;
/// stage two adds the feature-separation losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Epoch split between the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub total_epochs: usize,
    pub switch_epoch: usize,
}

impl StagePlan {
    /// Default split: each stage occupies half of the total epochs.
    pub fn halved(total_epochs: usize) -> Self {
        StagePlan {
            total_epochs,
            switch_epoch: total_epochs / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.switch_epoch > self.total_epochs {
            return Err(Error::Config(format!(
                "switch_epoch {} exceeds total_epochs {}",
                self.switch_epoch, self.total_epochs
            )));
        }
        Ok(())
    }

    /// Stage in effect for `epoch`; the switch epoch itself is stage two.
    pub fn stage_for(&self, epoch: usize) -> Stage {
        if epoch < self.switch_epoch {
            Stage::One
        } else {
            Stage::Two
        }
    }
}

/// Which separation losses a run trains with. Cross-entropy is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    /// OE + NC + Orth (the full objective).
    Ours,
    /// Outlier exposure alone.
    OeOnly,
    /// NC + Orth without outlier exposure.
    V1,
    /// OE + NC.
    V2,
    /// OE + Orth.
    V3,
    /// OE + the euclidean-distance ablation in place of NC/Orth.
    Euclidean,
}

/// Per-batch activation mask derived from (variant, stage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActiveLosses {
    pub oe: bool,
    pub nc: bool,
    pub orth: bool,
    pub euclid: bool,
}

impl LossVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ours" => Ok(LossVariant::Ours),
            "oe-only" => Ok(LossVariant::OeOnly),
            "v1" => Ok(LossVariant::V1),
            "v2" => Ok(LossVariant::V2),
            "v3" => Ok(LossVariant::V3),
            "euclidean" => Ok(LossVariant::Euclidean),
            other => Err(Error::Config(format!(
                "unknown loss_variant '{other}' (expected ours|oe-only|v1|v2|v3|euclidean)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossVariant::Ours => "ours",
            LossVariant::OeOnly => "oe-only",
            LossVariant::V1 => "v1",
            LossVariant::V2 => "v2",
            LossVariant::V3 => "v3",
            LossVariant::Euclidean => "euclidean",
        }
    }

    /// Mask of the variant's stage-two losses.
    pub fn mask(&self) -> ActiveLosses {
        match self {
            LossVariant::Ours => ActiveLosses {
                oe: true,
                nc: true,
                orth: true,
                euclid: false,
            },
            LossVariant::OeOnly => ActiveLosses {
                oe: true,
                ..Default::default()
            },
            LossVariant::V1 => ActiveLosses {
                nc: true,
                orth: true,
                ..Default::default()
            },
            LossVariant::V2 => ActiveLosses {
                oe: true,
                nc: true,
                ..Default::default()
            },
            LossVariant::V3 => ActiveLosses {
                oe: true,
                orth: true,
                ..Default::default()
            },
            LossVariant::Euclidean => ActiveLosses {
                oe: true,
                euclid: true,
                ..Default::default()
            },
        }
    }

    /// Mask in effect at `stage`. Stage one keeps only outlier exposure;
    /// the separation losses join at stage two.
    pub fn active(&self, stage: Stage) -> ActiveLosses {
        let full = self.mask();
        match stage {
            Stage::One => ActiveLosses {
                oe: full.oe,
                ..Default::default()
            },
            Stage::Two => full,
        }
    }
}

/// Mean cross-entropy: `-(1/n) sum_i log_softmax(logits)[i, label_i]`.
pub fn ce_loss(tape: &mut Tape, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
    let n = tape.value(logits).rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "ce_loss: {} labels for {n} rows",
            labels.len()
        )));
    }
    let ls = tape.log_softmax(logits)?;
    let picked = tape.select_per_row(ls, labels)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Outlier exposure: mean over the batch of `-(1/C) sum_j log_softmax_j`.
/// Always at least `ln C`, with equality exactly at uniform softmax output.
pub fn oe_loss(tape: &mut Tape, ood_logits: TensorId) -> Result<TensorId> {
    let m = tape.value(ood_logits).rows();
    let c = tape.value(ood_logits).cols();
    let ls = tape.log_softmax(ood_logits)?;
    let s = tape.sum(ls);
    Ok(tape.scale(s, -1.0 / (m as f64 * c as f64)))
}

/// Orthogonality loss: both operands are row-normalized internally, then
/// the mean over the batch of `(1/C) sum_i |z . w_i|` is returned. Lives in
/// [0, 1]; zero exactly when every feature is orthogonal to every class
/// weight. Degenerate (zero-norm) rows contribute 0.
pub fn orth_loss(tape: &mut Tape, ood_features: TensorId, class_weights: TensorId) -> Result<TensorId> {
    let m = tape.value(ood_features).rows();
    let c = tape.value(class_weights).rows();
    let zn = tape.l2_normalize(ood_features);
    let wn = tape.l2_normalize(class_weights);
    let wt = tape.transpose(wn);
    let cos = tape.matmul(zn, wt)?;
    let a = tape.abs(cos);
    let s = tape.sum(a);
    Ok(tape.scale(s, 1.0 / (m as f64 * c as f64)))
}

/// Class-alignment loss: mean over the batch of `-(z . w_y)` on normalized
/// operands. Lives in [-1, 1]; -1 when every feature equals its class
/// weight direction.
pub fn nc_loss(
    tape: &mut Tape,
    id_features: TensorId,
    labels: &[usize],
    class_weights: TensorId,
) -> Result<TensorId> {
    let n = tape.value(id_features).rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "nc_loss: {} labels for {n} rows",
            labels.len()
        )));
    }
    let zn = tape.l2_normalize(id_features);
    let wn = tape.l2_normalize(class_weights);
    let wy = tape.gather_rows(wn, labels)?;
    let dots = tape.rows_dot(zn, wy)?;
    let s = tape.sum(dots);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Euclidean-distance alternative to the cosine losses: outlier features
/// pay `(1/C) sum_i 1/(|z - w_i| + eps)` and in-distribution features pay
/// `|z - w_y|`, all on normalized vectors; batch means of both are summed.
pub fn euclidean_ablation_loss(
    tape: &mut Tape,
    ood_features: TensorId,
    id_features: TensorId,
    labels: &[usize],
    class_weights: TensorId,
) -> Result<TensorId> {
    let m = tape.value(ood_features).rows();
    let n = tape.value(id_features).rows();
    let c = tape.value(class_weights).rows();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "euclidean_ablation_loss: {} labels for {n} rows",
            labels.len()
        )));
    }
    let zn_ood = tape.l2_normalize(ood_features);
    let zn_id = tape.l2_normalize(id_features);
    let wn = tape.l2_normalize(class_weights);

    let d_ood = tape.pairwise_distance(zn_ood, wn)?;
    let r = tape.recip(d_ood, EUCLID_EPS);
    let s_ood = tape.sum(r);
    let ood_term = tape.scale(s_ood, 1.0 / (m as f64 * c as f64));

    let d_id = tape.pairwise_distance(zn_id, wn)?;
    let sel = tape.select_per_row(d_id, labels)?;
    let s_id = tape.sum(sel);
    let id_term = tape.scale(s_id, 1.0 / n as f64);

    tape.add(ood_term, id_term)
}

/// Raw component values of one composite evaluation, for logging. Inactive
/// components report 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub oe: f64,
    pub nc: f64,
    pub orth: f64,
    pub euclid: f64,
    pub total: f64,
}

/// Composite result: the scalar node to backpropagate plus its breakdown.
#[derive(Debug, Clone, Copy)]
pub struct CompositeOutput {
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Stage-masked weighted objective:
/// stage one is `CE + lambda*OE`, stage two adds `alpha*NC + beta*Orth`
/// (or the euclidean ablation, unweighted, for that variant). Components
/// outside the variant's mask are neither computed nor charged.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss(
    tape: &mut Tape,
    stage: Stage,
    variant: LossVariant,
    id_logits: TensorId,
    id_features: TensorId,
    labels: &[usize],
    ood_logits: TensorId,
    ood_features: TensorId,
    class_weights: TensorId,
    weights: &LossWeights,
) -> Result<CompositeOutput> {
    weights.validate()?;
    let active = variant.active(stage);
    let mut breakdown = LossBreakdown::default();

    let ce = ce_loss(tape, id_logits, labels)?;
    breakdown.ce = tape.scalar(ce);
    let mut total = ce;

    if active.oe {
        let oe = oe_loss(tape, ood_logits)?;
        breakdown.oe = tape.scalar(oe);
        let w = tape.scale(oe, weights.lambda);
        total = tape.add(total, w)?;
    }
    if active.nc {
        let nc = nc_loss(tape, id_features, labels, class_weights)?;
        breakdown.nc = tape.scalar(nc);
        let w = tape.scale(nc, weights.alpha);
        total = tape.add(total, w)?;
    }
    if active.orth {
        let orth = orth_loss(tape, ood_features, class_weights)?;
        breakdown.orth = tape.scalar(orth);
        let w = tape.scale(orth, weights.beta);
        total = tape.add(total, w)?;
    }
    if active.euclid {
        let e = euclidean_ablation_loss(tape, ood_features, id_features, labels, class_weights)?;
        breakdown.euclid = tape.scalar(e);
        total = tape.add(total, e)?;
    }

    breakdown.total = tape.scalar(total);
    Ok(CompositeOutput { total, breakdown })
}

#[cfg(test)]
mod tests;
