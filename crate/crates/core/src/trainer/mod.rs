//! Warm-up, the momentum-prototype training loop, the decoupled classifier
//! re-balancing step, and checkpoints.

mod checkpoint;
mod config;
mod rebalance;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{Ablation, AblationFlags, TrainConfig};
pub use rebalance::{finetune_classifier, rebalance_finetune, rebalance_finetune_with, FinetuneReport, Sampling};

use crate::datagen::{augment_batch, NoisyDataset};
use crate::error::{MoproError, Result};
use crate::evalkit::{
    calibration_error, knn_probe_threads, linear_probe, score_corrections, CalibrationReport, CorrectionReport,
    LinearProbeConfig, MetricRecord, CALIBRATION_BINS,
};
use crate::memory::{EmbeddingQueue, PrototypeBank};
use crate::model::{ema_update_params, MomentumTwin, Network};
use crate::noise::{correct_batch, PseudoLabel, RuleCounts};
use crate::numkit::{Graph, Rng, Tensor};
use crate::objectives::{loss_total, BatchOutputs, LossWeights};

const INIT_STREAM: u64 = 10;
const SHUFFLE_STREAM: u64 = 11;
const AUGMENT_STREAM: u64 = 12;
const PROBE_STREAM: u64 = 14;
/// Rows per chunk for gradient-free passes over the whole dataset.
const EVAL_CHUNK: usize = 256;

/// One step of the per-batch sequence, as recorded in trace mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceOp {
    AugmentWeak,
    AugmentStrong,
    OnlineForward,
    MomentumForward,
    PrototypeScores,
    CorrectBatch,
    LossTotal,
    SgdStep,
    EmaUpdate,
    PrototypeUpdate,
    Enqueue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Warmup,
    Main,
}

/// Per-epoch training record. Losses are means over the epoch's batches;
/// correction statistics score the labels each sample received during the
/// epoch against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub l_ce: f64,
    pub l_pro: f64,
    pub l_ins: f64,
    pub total: f64,
    pub rules: RuleCounts,
    /// Accuracy of the pseudo-labels on corrupted in-distribution samples.
    pub pseudo_acc: f64,
    pub in_dist_acc: f64,
    pub ood_recall: f64,
    pub ood_precision: f64,
    pub knn_acc: f64,
    pub calib_err: f64,
    /// Probabilities clamped in the cross-entropy term.
    pub clamped: usize,
}

impl EpochMetrics {
    pub fn record(&self) -> MetricRecord {
        MetricRecord {
            epoch: self.epoch,
            l_ce: self.l_ce,
            l_pro: self.l_pro,
            l_ins: self.l_ins,
            total: self.total,
            pseudo_acc: self.pseudo_acc,
            ood_recall: self.ood_recall,
            ood_precision: self.ood_precision,
            knn_acc: self.knn_acc,
            calib_err: self.calib_err,
        }
    }

    /// Bitwise equality, NaN included.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.record().bit_eq(&other.record())
            && self.phase == other.phase
            && self.rules == other.rules
            && self.clamped == other.clamped
            && self.lr.to_bits() == other.lr.to_bits()
            && self.in_dist_acc.to_bits() == other.in_dist_acc.to_bits()
    }
}

/// Disjoint in-distribution subsets used for the per-epoch probes.
#[derive(Debug, Clone, PartialEq)]
struct ProbeSplit {
    reference: Vec<usize>,
    queries: Vec<usize>,
}

impl ProbeSplit {
    fn new(ds: &NoisyDataset, config: &TrainConfig) -> Self {
        let mut inside = ds.in_distribution();
        Rng::with_stream(config.seed, PROBE_STREAM).shuffle(&mut inside);
        let n_ref = config.probe_reference.min(inside.len() / 2);
        let n_query = config.probe_queries.min(inside.len() - n_ref);
        ProbeSplit {
            reference: inside[..n_ref].to_vec(),
            queries: inside[n_ref..n_ref + n_query].to_vec(),
        }
    }
}

/// Representation, embedding and class probabilities without gradients.
pub struct Outputs {
    pub repr: Tensor,
    pub embed: Tensor,
    pub probs: Tensor,
}

/// Gradient-free forward pass over selected samples, chunked.
pub fn predict(net: &Network, ds: &NoisyDataset, idx: &[usize]) -> Result<Outputs> {
    let mut repr = Vec::new();
    let mut embed = Vec::new();
    let mut probs = Vec::new();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = net.bind(&mut g);
        let x = g.constant(ds.features_tensor(chunk));
        let f = bound.forward(&mut g, x)?;
        repr.extend_from_slice(g.value(f.repr).data());
        embed.extend_from_slice(g.value(f.embed).data());
        probs.extend_from_slice(g.value(f.probs).data());
    }
    let n = idx.len();
    let shaped = |data: Vec<f64>, cols: usize| Tensor::new(vec![n, cols], data);
    Ok(Outputs {
        repr: shaped(repr, net.encoder.0.output_dim())?,
        embed: shaped(embed, net.embed_dim())?,
        probs: shaped(probs, net.classes())?,
    })
}

/// Post-training report over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Completed epochs of the evaluated model.
    pub epoch: usize,
    pub correction: CorrectionReport,
    pub knn_acc: f64,
    pub linear_acc: f64,
    pub calibration: CalibrationReport,
}

struct ProbeViews {
    reference: Outputs,
    reference_truth: Vec<usize>,
    queries: Outputs,
    query_truth: Vec<usize>,
}

/// Calibration of the classifier's top probability on the query side.
fn calibration_of(v: &ProbeViews) -> Result<CalibrationReport> {
    let mut conf = Vec::with_capacity(v.query_truth.len());
    let mut correct = Vec::with_capacity(v.query_truth.len());
    for (row, &y) in v.queries.probs.row_iter().zip(&v.query_truth) {
        let (best, c) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
        conf.push(c.clamp(0.0, 1.0));
        correct.push(best == y);
    }
    calibration_error(&conf, &correct, CALIBRATION_BINS)
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub classes: usize,
    pub input_dim: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub network: Network,
    pub twin: MomentumTwin,
    /// SGD momentum buffers, aligned with [`Network::params`].
    pub velocity: Vec<Tensor>,
    pub bank: PrototypeBank,
    pub queue: EmbeddingQueue,
    pub shuffle_rng: Rng,
    pub augment_rng: Rng,
    /// Label each sample received in the most recent epoch.
    pub last_labels: Vec<PseudoLabel>,
    pub history: Vec<EpochMetrics>,
    pub trace: Vec<TraceOp>,
}

impl TrainState {
    pub fn new(config: TrainConfig, ds: &NoisyDataset) -> Result<Self> {
        config.validate(ds.classes)?;
        if ds.is_empty() {
            return Err(MoproError::Degenerate("cannot train on an empty dataset".into()));
        }
        Self::blank(config, ds.classes, ds.input_dim)
    }

    /// Freshly initialised state for the given problem shape.
    fn blank(config: TrainConfig, classes: usize, input_dim: usize) -> Result<Self> {
        let model = config.model_config(input_dim, classes);
        let network = Network::init(&model, &mut Rng::with_stream(config.seed, INIT_STREAM));
        let twin = MomentumTwin::from_online(&network);
        let velocity = network
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        let mut bank = PrototypeBank::new(classes, config.embed_dim, config.momentum)?;
        if !config.renormalize_prototypes {
            bank = bank.without_renormalization();
        }
        Ok(TrainState {
            classes,
            input_dim,
            epoch: 0,
            step: 0,
            twin,
            velocity,
            bank,
            queue: EmbeddingQueue::new(config.queue_size, config.embed_dim)?,
            shuffle_rng: Rng::with_stream(config.seed, SHUFFLE_STREAM),
            augment_rng: Rng::with_stream(config.seed, AUGMENT_STREAM),
            last_labels: Vec::new(),
            history: Vec::new(),
            trace: Vec::new(),
            network,
            config,
        })
    }

    pub fn check_dataset(&self, ds: &NoisyDataset) -> Result<()> {
        if ds.classes != self.classes || ds.input_dim != self.input_dim {
            return Err(MoproError::Structural(format!(
                "model expects K={} classes and d_x={}, dataset has K={} and d_x={}",
                self.classes, self.input_dim, ds.classes, ds.input_dim
            )));
        }
        Ok(())
    }

    pub fn in_warmup(&self) -> bool {
        self.epoch < self.config.warmup_epochs
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        self.history.iter().map(EpochMetrics::record).collect()
    }

    fn trace(&mut self, op: TraceOp) {
        if self.config.trace {
            self.trace.push(op);
        }
    }

    /// Initialise every prototype from the class means of un-augmented
    /// embeddings under the given labels.
    pub fn init_prototypes(&mut self, ds: &NoisyDataset) -> Result<()> {
        let all: Vec<usize> = (0..ds.len()).collect();
        let (_, z) = self.network.forward_embed(&ds.features_tensor(&all))?;
        self.bank.init_prototypes(&z, &ds.noisy_label)
    }

    /// Train until `epochs` are complete (or the configured total, if lower).
    pub fn train_until(&mut self, ds: &NoisyDataset, epochs: usize) -> Result<()> {
        if self.epoch == 0 && self.config.warmup_epochs == 0 && !self.bank.all_initialized() {
            self.init_prototypes(ds)?;
        }
        while self.epoch < epochs.min(self.config.epochs) {
            self.run_epoch(ds)?;
        }
        Ok(())
    }

    pub fn train_to_end(&mut self, ds: &NoisyDataset) -> Result<()> {
        self.train_until(ds, self.config.epochs)
    }

    /// One pass over the shuffled dataset. Prototypes are initialised right
    /// after the last warm-up epoch.
    pub fn run_epoch(&mut self, ds: &NoisyDataset) -> Result<&EpochMetrics> {
        self.check_dataset(ds)?;
        let warmup = self.in_warmup();
        if !warmup && !self.bank.all_initialized() {
            self.init_prototypes(ds)?;
        }
        let lr = self.config.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..ds.len()).collect();
        self.shuffle_rng.shuffle(&mut order);

        let mut labels = vec![PseudoLabel::Ood; ds.len()];
        let mut rules = RuleCounts::default();
        let mut sums = [0.0f64; 4];
        let mut clamped = 0;
        let mut batches = 0usize;
        for idx in order.chunks(self.config.batch_size) {
            let (loss, batch_labels) = self.step(ds, idx, warmup, lr)?;
            for (&i, &l) in idx.iter().zip(&batch_labels) {
                labels[i] = l;
            }
            if !warmup {
                rules += RuleCounts::from_labels(&batch_labels);
            }
            for (s, v) in sums.iter_mut().zip([loss.l_ce, loss.l_pro, loss.l_ins, loss.total]) {
                *s += v;
            }
            clamped += loss.clamped;
            batches += 1;
        }
        let mean = |s: f64| s / batches as f64;
        let report = score_corrections(&labels, ds)?;
        let (knn_acc, calib_err) = self.probe(ds)?;
        self.epoch += 1;
        self.last_labels = labels;
        self.history.push(EpochMetrics {
            epoch: self.epoch,
            phase: if warmup { Phase::Warmup } else { Phase::Main },
            lr,
            l_ce: mean(sums[0]),
            l_pro: mean(sums[1]),
            l_ins: mean(sums[2]),
            total: mean(sums[3]),
            rules,
            pseudo_acc: report.pseudo_acc,
            in_dist_acc: report.in_dist_acc,
            ood_recall: report.ood_recall,
            ood_precision: report.ood_precision,
            knn_acc,
            calib_err,
            clamped,
        });
        if self.epoch == self.config.warmup_epochs {
            self.init_prototypes(ds)?;
        }
        let m = self.history.last().expect("just pushed");
        log::info!(
            "epoch {:>3} {:?} lr {:.4} total {:.4} (ce {:.4} pro {:.4} ins {:.4}) pseudo_acc {:.3} ood r/p {:.3}/{:.3} knn {:.3}",
            m.epoch, m.phase, m.lr, m.total, m.l_ce, m.l_pro, m.l_ins, m.pseudo_acc, m.ood_recall, m.ood_precision, m.knn_acc
        );
        Ok(m)
    }

    fn step(
        &mut self,
        ds: &NoisyDataset,
        idx: &[usize],
        warmup: bool,
        lr: f64,
    ) -> Result<(crate::objectives::LossBreakdown, Vec<PseudoLabel>)> {
        let cfg = self.config.clone();
        let x = ds.features_tensor(idx);
        let given: Vec<usize> = idx.iter().map(|&i| ds.noisy_label[i]).collect();

        let x_weak = augment_batch(&x, &cfg.weak, &mut self.augment_rng);
        self.trace(TraceOp::AugmentWeak);
        let x_strong = augment_batch(&x, &cfg.strong, &mut self.augment_rng);
        self.trace(TraceOp::AugmentStrong);

        let mut g = Graph::new();
        let bound = self.network.bind(&mut g);
        let input = g.constant(x_weak);
        let f = bound.forward(&mut g, input)?;
        let z = g.value(f.embed).clone();
        let p = g.value(f.probs).clone();
        self.trace(TraceOp::OnlineForward);
        let z_momentum = self.twin.forward_embed(&x_strong)?;
        self.trace(TraceOp::MomentumForward);

        let labels = if warmup || cfg.ablation.fixed_labels {
            given.iter().map(|&y| PseudoLabel::Kept(y)).collect()
        } else {
            let alpha = cfg.effective_alpha();
            let s = if alpha < 1.0 {
                let mut rows = Vec::with_capacity(z.len());
                for row in z.row_iter() {
                    rows.extend(self.bank.prototype_scores(row, cfg.tau)?);
                }
                Tensor::from_vec(z.rows(), self.classes, rows)
            } else {
                // scores carry zero weight in the blend
                p.clone()
            };
            self.trace(TraceOp::PrototypeScores);
            let (labels, _) = correct_batch(&p, &s, &given, alpha, cfg.threshold)?;
            self.trace(TraceOp::CorrectBatch);
            labels
        };

        let bank = (!warmup && !cfg.ablation.disable_pro).then_some(&self.bank);
        let queue = (!cfg.ablation.disable_ins && self.queue.is_full()).then_some(&self.queue);
        let weights = LossWeights {
            tau: cfg.tau,
            lambda_pro: cfg.lambda_pro,
            lambda_ins: cfg.lambda_ins,
        };
        let outputs = BatchOutputs {
            embed: &z,
            momentum_embed: &z_momentum,
            probs: &p,
        };
        let (loss, grads) = loss_total(outputs, &labels, bank, queue, weights)?;
        self.trace(TraceOp::LossTotal);
        if !loss.total.is_finite() {
            return Err(self.diagnostic(idx, &loss));
        }
        let out = g.fused_scalar(
            loss.total,
            vec![
                (f.embed, grads.d_embed.into_data()),
                (f.probs, grads.d_probs.into_data()),
            ],
        )?;
        g.backward(out)?;

        let vars = bound.param_vars();
        for ((param, buf), var) in self
            .network
            .params_mut()
            .into_iter()
            .zip(&mut self.velocity)
            .zip(vars)
        {
            let grad = g.grad(var);
            let data = param.data_mut();
            for (j, (w, v)) in data.iter_mut().zip(buf.data_mut()).enumerate() {
                let d = grad.map_or(0.0, |g| g[j]) + cfg.weight_decay * *w;
                *v = cfg.sgd_momentum * *v + d;
                *w -= lr * *v;
            }
        }
        self.trace(TraceOp::SgdStep);

        ema_update_params(&mut self.twin, &self.network, cfg.momentum)?;
        self.trace(TraceOp::EmaUpdate);

        if !warmup {
            for (i, l) in labels.iter().enumerate() {
                if let Some(k) = l.class() {
                    self.bank.update_prototype(k, z.row(i))?;
                }
            }
            self.trace(TraceOp::PrototypeUpdate);
        }

        self.queue.enqueue(&z_momentum)?;
        self.trace(TraceOp::Enqueue);
        self.step += 1;
        Ok((loss, labels))
    }

    fn diagnostic(&self, idx: &[usize], loss: &crate::objectives::LossBreakdown) -> MoproError {
        let max_param = self
            .network
            .params()
            .iter()
            .flat_map(|p| p.data().iter())
            .fold(0.0f64, |m, v| if v.is_nan() { f64::NAN } else { m.max(v.abs()) });
        MoproError::Numeric(format!(
            "non-finite loss at epoch {} step {}: l_ce={} l_pro={} l_ins={} total={}; \
             in-distribution {}/{}; max |param| = {max_param}; first samples {:?}",
            self.epoch + 1,
            self.step,
            loss.l_ce,
            loss.l_pro,
            loss.l_ins,
            loss.total,
            loss.in_dist,
            loss.batch,
            &idx[..idx.len().min(8)]
        ))
    }

    /// k-NN accuracy on frozen representations and calibration error of
    /// the classifier, both against true labels on a fixed probe split.
    fn probe(&self, ds: &NoisyDataset) -> Result<(f64, f64)> {
        match self.probe_views(ds)? {
            None => Ok((f64::NAN, f64::NAN)),
            Some(v) => Ok((self.knn_on(&v)?, calibration_of(&v)?.error)),
        }
    }

    fn probe_views(&self, ds: &NoisyDataset) -> Result<Option<ProbeViews>> {
        let split = ProbeSplit::new(ds, &self.config);
        if split.reference.is_empty() || split.queries.is_empty() {
            return Ok(None);
        }
        let truth = |idx: &[usize]| -> Vec<usize> {
            idx.iter().map(|&i| ds.true_label[i].expect("in-distribution")).collect()
        };
        Ok(Some(ProbeViews {
            reference: predict(&self.network, ds, &split.reference)?,
            reference_truth: truth(&split.reference),
            queries: predict(&self.network, ds, &split.queries)?,
            query_truth: truth(&split.queries),
        }))
    }

    fn knn_on(&self, v: &ProbeViews) -> Result<f64> {
        knn_probe_threads(
            &v.reference.repr,
            &v.reference_truth,
            &v.queries.repr,
            &v.query_truth,
            self.config.knn_k,
            self.config.threads,
        )
    }

    /// Frozen correction pass plus kNN, linear and calibration probes.
    /// Probe fields are NaN when the dataset has too few in-distribution
    /// samples to split.
    pub fn evaluate(&self, ds: &NoisyDataset) -> Result<EvalReport> {
        let correction = score_corrections(&self.correction_pass(ds)?, ds)?;
        let (knn_acc, linear_acc, calibration) = match self.probe_views(ds)? {
            None => (
                f64::NAN,
                f64::NAN,
                CalibrationReport { bins: Vec::new(), error: f64::NAN },
            ),
            Some(v) => {
                let probe = LinearProbeConfig { seed: self.config.seed, ..Default::default() };
                let linear = linear_probe(
                    &v.reference.repr,
                    &v.reference_truth,
                    &v.queries.repr,
                    &v.query_truth,
                    &probe,
                )?;
                (self.knn_on(&v)?, linear, calibration_of(&v)?)
            }
        };
        Ok(EvalReport {
            epoch: self.epoch,
            correction,
            knn_acc,
            linear_acc,
            calibration,
        })
    }

    /// Frozen-model correction over the whole training set with
    /// un-augmented inputs.
    pub fn correction_pass(&self, ds: &NoisyDataset) -> Result<Vec<PseudoLabel>> {
        self.check_dataset(ds)?;
        if self.config.ablation.fixed_labels {
            return Ok(ds.noisy_label.iter().map(|&y| PseudoLabel::Kept(y)).collect());
        }
        if !self.bank.all_initialized() {
            return Err(MoproError::State(
                "correction needs initialised prototypes; finish warm-up first".into(),
            ));
        }
        let all: Vec<usize> = (0..ds.len()).collect();
        let out = predict(&self.network, ds, &all)?;
        let mut scores = Vec::with_capacity(ds.len() * self.classes);
        for row in out.embed.row_iter() {
            scores.extend(self.bank.prototype_scores(row, self.config.tau)?);
        }
        let s = Tensor::from_vec(ds.len(), self.classes, scores);
        let (labels, _) = correct_batch(
            &out.probs,
            &s,
            &ds.noisy_label,
            self.config.effective_alpha(),
            self.config.threshold,
        )?;
        Ok(labels)
    }
}

/// kNN accuracy on a clean held-out set, using every in-distribution
/// training sample (with its true label) as the reference set.
pub fn holdout_knn(state: &TrainState, train: &NoisyDataset, holdout: &NoisyDataset) -> Result<f64> {
    state.check_dataset(train)?;
    state.check_dataset(holdout)?;
    let reference = train.in_distribution();
    let ref_labels: Vec<usize> = reference.iter().filter_map(|&i| train.true_label[i]).collect();
    let queries = holdout.in_distribution();
    let query_labels: Vec<usize> = queries.iter().filter_map(|&i| holdout.true_label[i]).collect();
    let r = predict(&state.network, train, &reference)?.repr;
    let q = predict(&state.network, holdout, &queries)?.repr;
    knn_probe_threads(&r, &ref_labels, &q, &query_labels, state.config.knn_k, state.config.threads)
}

/// Run warm-up only: the first `warmup_epochs` epochs, then prototype
/// initialisation.
pub fn warmup(state: &mut TrainState, ds: &NoisyDataset) -> Result<()> {
    if state.epoch != 0 {
        return Err(MoproError::State("warm-up needs a fresh state".into()));
    }
    let target = state.config.warmup_epochs;
    if target == 0 {
        return state.init_prototypes(ds);
    }
    while state.epoch < target {
        state.run_epoch(ds)?;
    }
    Ok(())
}

/// Fresh state, full schedule.
pub fn train(config: TrainConfig, ds: &NoisyDataset) -> Result<TrainState> {
    let mut state = TrainState::new(config, ds)?;
    state.train_to_end(ds)?;
    Ok(state)
}
