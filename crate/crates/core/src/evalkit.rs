//! Verification instruments: correction scoring against ground truth,
//! frozen-representation probes, calibration error and metric files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::NoisyDataset;
use crate::error::{MoproError, Result};
use crate::noise::{PseudoLabel, RuleCounts};
use crate::numkit::{dot, norm, Rng, Tensor};

/// Default number of equal-width confidence bins.
pub const CALIBRATION_BINS: usize = 15;

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

/// Noise-correction quality measured against the recorded ground truth.
/// Undefined rates (empty denominators) are NaN and listed in `undefined`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrectionReport {
    pub samples: usize,
    pub in_distribution: usize,
    pub corrupted: usize,
    /// Pseudo-label accuracy on corrupted in-distribution samples.
    pub pseudo_acc: f64,
    /// Pseudo-label accuracy on every in-distribution sample.
    pub in_dist_acc: f64,
    /// Relabelled samples (class differs from the given label) whose new
    /// class is the true one.
    pub correction_precision: f64,
    /// Corrupted samples whose pseudo-label is the true class.
    pub correction_recall: f64,
    pub ood_precision: f64,
    pub ood_recall: f64,
    pub rules: RuleCounts,
    pub undefined: Vec<&'static str>,
}

pub fn score_corrections(pseudo: &[PseudoLabel], ds: &NoisyDataset) -> Result<CorrectionReport> {
    if pseudo.len() != ds.len() {
        return Err(MoproError::Dimension {
            op: "score_corrections",
            left: vec![pseudo.len()],
            right: vec![ds.len()],
        });
    }
    let mut in_dist = 0;
    let mut in_dist_hit = 0;
    let mut corrupted = 0;
    let mut corrupted_hit = 0;
    let mut relabelled = 0;
    let mut relabelled_hit = 0;
    let mut flagged = 0;
    let mut flagged_hit = 0;
    let mut ood = 0;
    for (i, &label) in pseudo.iter().enumerate() {
        let truth = ds.true_label[i];
        let hit = label.class().is_some() && label.class() == truth;
        if truth.is_some() {
            in_dist += 1;
            in_dist_hit += hit as usize;
            if ds.is_corrupted(i) {
                corrupted += 1;
                corrupted_hit += hit as usize;
            }
        }
        if let Some(k) = label.class() {
            if k != ds.noisy_label[i] {
                relabelled += 1;
                relabelled_hit += hit as usize;
            }
        }
        if ds.is_ood[i] {
            ood += 1;
        }
        if label.is_ood() {
            flagged += 1;
            flagged_hit += ds.is_ood[i] as usize;
        }
    }
    let mut report = CorrectionReport {
        samples: pseudo.len(),
        in_distribution: in_dist,
        corrupted,
        pseudo_acc: ratio(corrupted_hit, corrupted),
        in_dist_acc: ratio(in_dist_hit, in_dist),
        correction_precision: ratio(relabelled_hit, relabelled),
        correction_recall: ratio(corrupted_hit, corrupted),
        ood_precision: ratio(flagged_hit, flagged),
        ood_recall: ratio(flagged_hit, ood),
        rules: RuleCounts::from_labels(pseudo),
        undefined: Vec::new(),
    };
    for (name, v) in [
        ("pseudo_acc", report.pseudo_acc),
        ("in_dist_acc", report.in_dist_acc),
        ("correction_precision", report.correction_precision),
        ("correction_recall", report.correction_recall),
        ("ood_precision", report.ood_precision),
        ("ood_recall", report.ood_recall),
    ] {
        if v.is_nan() {
            report.undefined.push(name);
        }
    }
    Ok(report)
}

fn unit_rows(x: &Tensor) -> Vec<f64> {
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(x.cols()) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn check_probe_inputs(
    op: &'static str,
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
) -> Result<()> {
    if train_labels.is_empty() {
        return Err(MoproError::Degenerate(format!("{op}: empty training set")));
    }
    if train.rows() != train_labels.len()
        || test.rows() != test_labels.len()
        || train.cols() != test.cols()
    {
        return Err(MoproError::Dimension {
            op,
            left: vec![train.rows(), train.cols(), train_labels.len()],
            right: vec![test.rows(), test.cols(), test_labels.len()],
        });
    }
    Ok(())
}

/// Majority vote over the `k` most cosine-similar training rows. Equal
/// similarities prefer the lower training index; equal votes the lower class.
fn knn_predict_one(train: &[f64], labels: &[usize], classes: usize, q: &[f64], k: usize) -> usize {
    let d = q.len();
    let mut sims: Vec<(f64, usize)> = train
        .chunks_exact(d)
        .enumerate()
        .map(|(i, row)| (dot(row, q), i))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    let k = k.min(sims.len());
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, order);
    }
    let mut votes = vec![0usize; classes];
    for &(_, i) in &sims[..k] {
        votes[labels[i]] += 1;
    }
    let mut best = 0;
    for c in 1..classes {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best
}

/// k-NN predictions for every test row, split across `threads` workers.
/// The result does not depend on the thread count.
pub fn knn_predict(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    k: usize,
    threads: usize,
) -> Result<Vec<usize>> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(MoproError::config("k", format!("{k} must be a positive odd number")));
    }
    if train_labels.is_empty() {
        return Err(MoproError::Degenerate("knn_probe: empty training set".into()));
    }
    let classes = train_labels.iter().max().map_or(0, |m| m + 1);
    let train_unit = unit_rows(train);
    let test_unit = unit_rows(test);
    let d = test.cols();
    let queries: Vec<&[f64]> = test_unit.chunks_exact(d).collect();
    let predict = |q: &[f64]| knn_predict_one(&train_unit, train_labels, classes, q, k);
    let threads = threads.max(1).min(queries.len().max(1));
    if threads == 1 {
        return Ok(queries.iter().map(|q| predict(q)).collect());
    }
    let chunk = queries.len().div_ceil(threads);
    let parts: Vec<Vec<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| s.spawn(move || qs.iter().map(|q| predict(q)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("knn worker panicked"))
            .collect()
    });
    Ok(parts.concat())
}

/// Cosine-similarity k-NN accuracy on `test`.
pub fn knn_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    knn_probe_threads(train, train_labels, test, test_labels, k, 1)
}

pub fn knn_probe_threads(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    k: usize,
    threads: usize,
) -> Result<f64> {
    check_probe_inputs("knn_probe", train, train_labels, test, test_labels)?;
    let pred = knn_predict(train, train_labels, test, k, threads)?;
    let hits = pred.iter().zip(test_labels).filter(|(a, b)| a == b).count();
    Ok(ratio(hits, test_labels.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            epochs: 50,
            lr: 0.5,
            batch_size: 64,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Multinomial logistic regression on frozen features, trained with
/// minibatch SGD. Features are standardised with training statistics.
/// Returns test accuracy.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    config: &LinearProbeConfig,
) -> Result<f64> {
    check_probe_inputs("linear_probe", train, train_labels, test, test_labels)?;
    let d = train.cols();
    let n = train.rows();
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |m| m + 1);

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for row in train.row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n as f64);
    }
    for row in train.row_iter() {
        for j in 0..d {
            sd[j] += (row[j] - mean[j]).powi(2) / n as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
    let standardise = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = train.row_iter().map(standardise).collect();

    let mut w = vec![0.0; classes * d];
    let mut b = vec![0.0; classes];
    let mut rng = Rng::new(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = config.batch_size.max(1);
    let mut logits = vec![0.0; classes];
    for _ in 0..config.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let mut gw = vec![0.0; classes * d];
            let mut gb = vec![0.0; classes];
            for &i in chunk {
                let x = &xs[i];
                for c in 0..classes {
                    logits[c] = b[c] + dot(&w[c * d..(c + 1) * d], x);
                }
                let p = crate::numkit::softmax(&logits)?;
                for c in 0..classes {
                    let g = p[c] - (c == train_labels[i]) as u8 as f64;
                    gb[c] += g;
                    for (gw, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *gw += g * xv;
                    }
                }
            }
            let scale = config.lr / chunk.len() as f64;
            for (wv, g) in w.iter_mut().zip(&gw) {
                *wv -= scale * g + config.lr * config.weight_decay * *wv;
            }
            for (bv, g) in b.iter_mut().zip(&gb) {
                *bv -= scale * g;
            }
        }
    }
    let hits = test
        .row_iter()
        .zip(test_labels)
        .filter(|(row, &y)| {
            let x = standardise(row);
            let score = |c: usize| b[c] + dot(&w[c * d..(c + 1) * d], &x);
            let mut best = 0;
            for c in 1..classes {
                if score(c) > score(best) {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(ratio(hits, test_labels.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// NaN for an empty bin.
    pub confidence: f64,
    /// NaN for an empty bin.
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub error: f64,
}

/// Bin `b` covers `(b/B, (b+1)/B]`; a confidence of exactly 0 goes to bin 0.
fn bin_index(c: f64, bins: usize) -> usize {
    (0..bins)
        .find(|&b| c <= (b + 1) as f64 / bins as f64)
        .unwrap_or(bins - 1)
}

/// ℓ₂ calibration error `√(Σ_b (n_b/N)·(conf̄_b − acc_b)²)` over `bins`
/// equal-width, right-inclusive bins.
pub fn calibration_error(confidence: &[f64], correct: &[bool], bins: usize) -> Result<CalibrationReport> {
    if confidence.len() != correct.len() {
        return Err(MoproError::Dimension {
            op: "calibration_error",
            left: vec![confidence.len()],
            right: vec![correct.len()],
        });
    }
    if confidence.is_empty() {
        return Err(MoproError::Degenerate("calibration_error: no samples".into()));
    }
    if bins == 0 {
        return Err(MoproError::config("bins", "need at least one bin"));
    }
    if let Some(c) = confidence.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(MoproError::Contract(format!("confidence {c} is outside [0, 1]")));
    }
    let mut sum_conf = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&c, &ok) in confidence.iter().zip(correct) {
        let b = bin_index(c, bins);
        sum_conf[b] += c;
        hits[b] += ok as usize;
        counts[b] += 1;
    }
    let n = confidence.len() as f64;
    let mut sq = 0.0;
    let bins_out = (0..bins)
        .map(|b| {
            let (conf, acc) = if counts[b] == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let m = counts[b] as f64;
                (sum_conf[b] / m, hits[b] as f64 / m)
            };
            if counts[b] > 0 {
                sq += counts[b] as f64 / n * (conf - acc).powi(2);
            }
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                confidence: conf,
                accuracy: acc,
                count: counts[b],
            }
        })
        .collect();
    Ok(CalibrationReport {
        bins: bins_out,
        error: sq.sqrt(),
    })
}

/// One row of the per-epoch metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub l_pro: f64,
    pub l_ins: f64,
    pub total: f64,
    pub pseudo_acc: f64,
    pub ood_recall: f64,
    pub ood_precision: f64,
    pub knn_acc: f64,
    pub calib_err: f64,
}

pub const METRIC_COLUMNS: [&str; 10] = [
    "epoch",
    "l_ce",
    "l_pro",
    "l_ins",
    "total",
    "pseudo_acc",
    "ood_recall",
    "ood_precision",
    "knn_acc",
    "calib_err",
];

impl MetricRecord {
    pub fn values(&self) -> [f64; 9] {
        [
            self.l_ce,
            self.l_pro,
            self.l_ins,
            self.total,
            self.pseudo_acc,
            self.ood_recall,
            self.ood_precision,
            self.knn_acc,
            self.calib_err,
        ]
    }

    fn from_values(epoch: usize, v: [f64; 9]) -> Self {
        MetricRecord {
            epoch,
            l_ce: v[0],
            l_pro: v[1],
            l_ins: v[2],
            total: v[3],
            pseudo_acc: v[4],
            ood_recall: v[5],
            ood_precision: v[6],
            knn_acc: v[7],
            calib_err: v[8],
        }
    }

    /// Bitwise comparison that treats NaN as equal to NaN.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricsFormat {
    Csv,
    Json,
}

/// 17 significant digits; NaN and infinities use Rust's spellings.
pub fn format_number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRIC_COLUMNS).expect("in-memory write");
    for r in records {
        let mut row = vec![r.epoch.to_string()];
        row.extend(r.values().iter().map(|&v| format_number(v)));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// JSON array of objects. Non-finite values are written as `null`.
pub fn metrics_json(records: &[MetricRecord]) -> String {
    let mut out = String::from("[");
    for (i, r) in records.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("\n  {{\"epoch\": {}", r.epoch));
        for (name, v) in METRIC_COLUMNS[1..].iter().zip(r.values()) {
            let text = if v.is_finite() {
                format_number(v)
            } else {
                "null".to_string()
            };
            out.push_str(&format!(", \"{name}\": {text}"));
        }
        out.push('}');
    }
    out.push_str(if records.is_empty() { "]\n" } else { "\n]\n" });
    out
}

pub fn emit_metrics(records: &[MetricRecord], path: impl AsRef<Path>, format: MetricsFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        MetricsFormat::Csv => metrics_csv(records),
        MetricsFormat::Json => metrics_json(records),
    };
    fs::write(path, text).map_err(|e| MoproError::file(path, e))
}

fn parse_error(line: u64, msg: impl Into<String>) -> MoproError {
    MoproError::Parse {
        offset: line,
        msg: msg.into(),
    }
}

/// Parse a metrics CSV. Parse error offsets are line numbers. A missing
/// column is reported by name.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_error(1, e.to_string()))?
        .clone();
    let mut positions = [0usize; 10];
    for (slot, name) in positions.iter_mut().zip(METRIC_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| parse_error(1, format!("missing column `{name}`")))?;
    }
    let mut records = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let rec = rec.map_err(|e| parse_error(line, e.to_string()))?;
        let field = |c: usize| rec.get(positions[c]).unwrap_or("").trim();
        let epoch = field(0)
            .parse::<usize>()
            .map_err(|_| parse_error(line, format!("bad epoch `{}`", field(0))))?;
        let mut v = [0.0; 9];
        for (c, slot) in v.iter_mut().enumerate() {
            let text = field(c + 1);
            *slot = text.parse::<f64>().map_err(|_| {
                parse_error(line, format!("bad {} value `{text}`", METRIC_COLUMNS[c + 1]))
            })?;
        }
        records.push(MetricRecord::from_values(epoch, v));
    }
    Ok(records)
}

pub fn parse_metrics_json(text: &str) -> Result<Vec<MetricRecord>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| parse_error(e.line() as u64, e.to_string()))?;
    let rows = value
        .as_array()
        .ok_or_else(|| parse_error(1, "metrics JSON must be an array"))?;
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let get = |name: &str| {
                row.get(name)
                    .ok_or_else(|| parse_error(i as u64, format!("record {i} lacks `{name}`")))
            };
            let epoch = get("epoch")?
                .as_u64()
                .ok_or_else(|| parse_error(i as u64, "epoch must be an integer"))?
                as usize;
            let mut v = [0.0; 9];
            for (c, slot) in v.iter_mut().enumerate() {
                let field = get(METRIC_COLUMNS[c + 1])?;
                *slot = if field.is_null() {
                    f64::NAN
                } else {
                    field.as_f64().ok_or_else(|| {
                        parse_error(i as u64, format!("`{}` is not a number", METRIC_COLUMNS[c + 1]))
                    })?
                };
            }
            Ok(MetricRecord::from_values(epoch, v))
        })
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MoproError::file(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        parse_metrics_json(&text)
    } else {
        parse_metrics_csv(&text)
    }
}
