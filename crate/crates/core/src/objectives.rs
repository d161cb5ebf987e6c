//! Prototypical contrastive, instance contrastive and cross-entropy losses,
//! and their OOD-masked batch combination.
//!
//! Prototypes and queued embeddings are constants here: gradients flow only
//! to the online embedding `z` and the classifier probabilities `p`.

use serde::{Deserialize, Serialize};

use crate::error::{MoproError, Result};
use crate::memory::{EmbeddingQueue, PrototypeBank};
use crate::noise::PseudoLabel;
use crate::numkit::{dot, Tensor};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn require_class(label: PseudoLabel, loss: &str) -> Result<usize> {
    label.class().ok_or_else(|| {
        MoproError::Contract(format!("{loss} called on an OOD sample; mask it first"))
    })
}

/// `−log softmax(z·c/τ)[ŷ]` and its gradient w.r.t. `z`.
pub fn loss_proto_with_grad(
    z: &[f64],
    bank: &PrototypeBank,
    label: PseudoLabel,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let k = require_class(label, "loss_proto")?;
    let logits = bank.similarity_logits(z, tau)?;
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[k];
    let mut grad = vec![0.0; z.len()];
    for (j, l) in logits.iter().enumerate() {
        let w = (l - lse).exp() - if j == k { 1.0 } else { 0.0 };
        for (g, c) in grad.iter_mut().zip(bank.prototype(j)) {
            *g += w * c / tau;
        }
    }
    Ok((loss, grad))
}

pub fn loss_proto(z: &[f64], bank: &PrototypeBank, label: PseudoLabel, tau: f64) -> Result<f64> {
    loss_proto_with_grad(z, bank, label, tau).map(|(l, _)| l)
}

/// InfoNCE over the positive momentum embedding plus every queued negative,
/// and its gradient w.r.t. `z`.
pub fn loss_inst_with_grad(
    z: &[f64],
    positive: &[f64],
    queue: &EmbeddingQueue,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(MoproError::config("tau", format!("{tau} must be > 0")));
    }
    if !queue.is_full() {
        return Err(MoproError::State(format!(
            "instance loss needs a full queue ({} of {} entries)",
            queue.len(),
            queue.capacity()
        )));
    }
    if z.len() != queue.dim() || positive.len() != queue.dim() {
        return Err(MoproError::Dimension {
            op: "loss_inst",
            left: vec![z.len(), positive.len()],
            right: vec![queue.dim()],
        });
    }
    let mut logits = Vec::with_capacity(queue.len() + 1);
    logits.push(dot(z, positive) / tau);
    logits.extend(queue.slots().map(|n| dot(z, n) / tau));
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];

    let mut grad: Vec<f64> = positive
        .iter()
        .map(|c| ((logits[0] - lse).exp() - 1.0) * c / tau)
        .collect();
    for (l, neg) in logits[1..].iter().zip(queue.slots()) {
        let w = (l - lse).exp() / tau;
        for (g, c) in grad.iter_mut().zip(neg) {
            *g += w * c;
        }
    }
    Ok((loss, grad))
}

pub fn loss_inst(z: &[f64], positive: &[f64], queue: &EmbeddingQueue, tau: f64) -> Result<f64> {
    loss_inst_with_grad(z, positive, queue, tau).map(|(l, _)| l)
}

/// Cross-entropy against a pseudo-label: value, gradient w.r.t. `p`, and
/// whether the probability had to be clamped.
pub fn loss_ce_with_grad(p: &[f64], label: PseudoLabel) -> Result<(f64, Vec<f64>, bool)> {
    let k = require_class(label, "loss_ce")?;
    if k >= p.len() {
        return Err(MoproError::Contract(format!(
            "label {k} out of range for {} classes",
            p.len()
        )));
    }
    let mut grad = vec![0.0; p.len()];
    if p[k] < PROB_FLOOR {
        log::warn!("clamping class probability {} to {PROB_FLOOR}", p[k]);
        return Ok((-PROB_FLOOR.ln(), grad, true));
    }
    grad[k] = -1.0 / p[k];
    Ok((-p[k].ln(), grad, false))
}

pub fn loss_ce(p: &[f64], label: PseudoLabel) -> Result<f64> {
    loss_ce_with_grad(p, label).map(|(l, _, _)| l)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub tau: f64,
    pub lambda_pro: f64,
    pub lambda_ins: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 0.1,
            lambda_pro: 1.0,
            lambda_ins: 1.0,
        }
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_pro: f64,
    pub l_ins: f64,
    pub lambda_pro: f64,
    pub lambda_ins: f64,
    pub total: f64,
    /// Samples that entered the class-specific terms.
    pub in_dist: usize,
    pub batch: usize,
    pub clamped: usize,
}

impl LossBreakdown {
    pub fn recompute_total(&self) -> f64 {
        self.l_ce + self.lambda_pro * self.l_pro + self.lambda_ins * self.l_ins
    }
}

/// Gradients of the total loss w.r.t. the embeddings and class
/// probabilities of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub d_embed: Tensor,
    pub d_probs: Tensor,
}

/// Per-batch inputs to [`loss_total`].
#[derive(Debug, Clone, Copy)]
pub struct BatchOutputs<'a> {
    /// Online embeddings, `b × d_p`, unit rows.
    pub embed: &'a Tensor,
    /// Momentum embeddings of the strong view, `b × d_p`.
    pub momentum_embed: &'a Tensor,
    /// Classifier probabilities, `b × K`.
    pub probs: &'a Tensor,
}

/// Combine the three terms. Cross-entropy and the prototypical term are
/// averaged over non-OOD samples only; the instance term over the whole
/// batch. Passing `None` for the bank or the queue switches that term off
/// (it is recorded as zero).
pub fn loss_total(
    batch: BatchOutputs<'_>,
    labels: &[PseudoLabel],
    bank: Option<&PrototypeBank>,
    queue: Option<&EmbeddingQueue>,
    weights: LossWeights,
) -> Result<(LossBreakdown, LossGrads)> {
    let b = batch.embed.rows();
    if labels.len() != b || batch.probs.rows() != b || batch.momentum_embed.rows() != b {
        return Err(MoproError::Dimension {
            op: "loss_total",
            left: vec![b, batch.probs.rows(), batch.momentum_embed.rows()],
            right: vec![labels.len()],
        });
    }
    let d = batch.embed.cols();
    let mut d_embed = vec![0.0; b * d];
    let mut d_probs = vec![0.0; batch.probs.len()];
    let in_dist = labels.iter().filter(|l| !l.is_ood()).count();

    let mut out = LossBreakdown {
        lambda_pro: weights.lambda_pro,
        lambda_ins: weights.lambda_ins,
        in_dist,
        batch: b,
        ..Default::default()
    };

    if in_dist > 0 {
        let scale = 1.0 / in_dist as f64;
        let kc = batch.probs.cols();
        for (i, &label) in labels.iter().enumerate() {
            if label.is_ood() {
                continue;
            }
            let (ce, g_ce, clamped) = loss_ce_with_grad(batch.probs.row(i), label)?;
            out.l_ce += ce * scale;
            out.clamped += clamped as usize;
            for (dp, g) in d_probs[i * kc..(i + 1) * kc].iter_mut().zip(g_ce) {
                *dp += g * scale;
            }
            if let Some(bank) = bank {
                let (pro, g_pro) =
                    loss_proto_with_grad(batch.embed.row(i), bank, label, weights.tau)?;
                out.l_pro += pro * scale;
                for (dz, g) in d_embed[i * d..(i + 1) * d].iter_mut().zip(g_pro) {
                    *dz += weights.lambda_pro * g * scale;
                }
            }
        }
    }

    if let Some(queue) = queue {
        let scale = 1.0 / b as f64;
        for i in 0..b {
            let (ins, g_ins) = loss_inst_with_grad(
                batch.embed.row(i),
                batch.momentum_embed.row(i),
                queue,
                weights.tau,
            )?;
            out.l_ins += ins * scale;
            for (dz, g) in d_embed[i * d..(i + 1) * d].iter_mut().zip(g_ins) {
                *dz += weights.lambda_ins * g * scale;
            }
        }
    }

    out.total = out.recompute_total();
    let grads = LossGrads {
        d_embed: Tensor::from_vec(b, d, d_embed),
        d_probs: Tensor::from_vec(b, batch.probs.cols(), d_probs),
    };
    Ok((out, grads))
}
