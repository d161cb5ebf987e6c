use serde::{Deserialize, Serialize};

use super::{predict, TrainState};
use crate::datagen::{NoisyDataset, SqrtSampler};
use crate::error::{MoproError, Result};
use crate::noise::{PseudoLabel, RuleCounts};
use crate::numkit::{Graph, Rng, Tensor};
use crate::objectives::loss_ce_with_grad;

const FINETUNE_STREAM: u64 = 13;

/// How finetune batches are drawn from the cleaned set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sampling {
    /// Class mass proportional to √(class size).
    Sqrt,
    /// Every cleaned sample equally likely.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub sampling: Sampling,
    pub rules: RuleCounts,
    pub cleaned: usize,
    pub class_counts: Vec<usize>,
    pub steps: usize,
    pub final_loss: f64,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
    pub classifier_hash_before: String,
    pub classifier_hash_after: String,
}

/// Decoupled re-balancing: a frozen correction pass cleans the labels and
/// drops OOD samples, then only the classifier head is retrained with
/// cross-entropy on square-root-sampled batches.
pub fn rebalance_finetune(state: &mut TrainState, ds: &NoisyDataset) -> Result<FinetuneReport> {
    rebalance_finetune_with(state, ds, Sampling::Sqrt)
}

pub fn rebalance_finetune_with(
    state: &mut TrainState,
    ds: &NoisyDataset,
    sampling: Sampling,
) -> Result<FinetuneReport> {
    let labels = state.correction_pass(ds)?;
    let rules = RuleCounts::from_labels(&labels);
    let (idx, cleaned): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.class().map(|k| (i, k)))
        .unzip();
    finetune_classifier(state, ds, &idx, &cleaned, sampling, rules)
}

/// Classifier-only finetune on explicit `(sample, label)` pairs.
pub fn finetune_classifier(
    state: &mut TrainState,
    ds: &NoisyDataset,
    idx: &[usize],
    labels: &[usize],
    sampling: Sampling,
    rules: RuleCounts,
) -> Result<FinetuneReport> {
    if idx.is_empty() {
        return Err(MoproError::Degenerate(
            "every sample was removed as out-of-distribution; nothing to finetune on".into(),
        ));
    }
    let backbone_hash_before = state.network.backbone_hash();
    let classifier_hash_before = state.network.classifier_hash();
    let bank_before = state.bank.clone();

    let repr = predict(&state.network, ds, idx)?.repr;
    let mut class_counts = vec![0usize; state.classes];
    labels.iter().for_each(|&k| class_counts[k] += 1);

    let cfg = state.config.clone();
    let mut rng = Rng::with_stream(cfg.seed, FINETUNE_STREAM);
    let mut sqrt = match sampling {
        Sampling::Sqrt => Some(SqrtSampler::new(labels, rng.next_u64())?),
        Sampling::Uniform => None,
    };
    let steps_per_epoch = idx.len().div_ceil(cfg.batch_size);
    let steps = cfg.finetune_epochs * steps_per_epoch;
    let head = &mut state.network.classifier.0;
    let mut vel_w = Tensor::zeros(head.weight.rows(), head.weight.cols());
    let mut vel_b = Tensor::zeros(1, head.bias.cols());
    let mut final_loss = f64::NAN;

    for _ in 0..steps {
        let picks: Vec<usize> = (0..cfg.batch_size)
            .map(|_| match &mut sqrt {
                Some(s) => s.next().expect("infinite stream"),
                None => rng.below(idx.len()),
            })
            .collect();
        let mut g = Graph::new();
        let x = g.constant(repr.gather_rows(&picks));
        let w = g.param(head.weight.clone());
        let b = g.param(head.bias.clone());
        let h = g.matmul(x, w)?;
        let logits = g.add_bias(h, b)?;
        let probs = g.softmax_rows(logits)?;
        let p = g.value(probs).clone();
        let scale = 1.0 / picks.len() as f64;
        let mut loss = 0.0;
        let mut d_probs = Vec::with_capacity(p.len());
        for (row, &j) in p.row_iter().zip(&picks) {
            let (l, grad, _) = loss_ce_with_grad(row, PseudoLabel::Kept(labels[j]))?;
            loss += l * scale;
            d_probs.extend(grad.into_iter().map(|v| v * scale));
        }
        if !loss.is_finite() {
            return Err(MoproError::Numeric(format!("non-finite finetune loss {loss}")));
        }
        let out = g.fused_scalar(loss, vec![(probs, d_probs)])?;
        g.backward(out)?;
        for (param, vel, var) in [(&mut head.weight, &mut vel_w, w), (&mut head.bias, &mut vel_b, b)] {
            let grad = g.grad(var).expect("trainable leaf").to_vec();
            for ((p, v), gr) in param.data_mut().iter_mut().zip(vel.data_mut()).zip(grad) {
                *v = cfg.sgd_momentum * *v + gr + cfg.weight_decay * *p;
                *p -= cfg.finetune_lr * *v;
            }
        }
        final_loss = loss;
    }

    let backbone_hash_after = state.network.backbone_hash();
    if backbone_hash_after != backbone_hash_before || state.bank != bank_before {
        return Err(MoproError::State("finetune modified the frozen backbone".into()));
    }
    Ok(FinetuneReport {
        sampling,
        rules,
        cleaned: idx.len(),
        class_counts,
        steps,
        final_loss,
        backbone_hash_before,
        backbone_hash_after,
        classifier_hash_before,
        classifier_hash_after: state.network.classifier_hash(),
    })
}
