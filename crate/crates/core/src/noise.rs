//! Online noise correction: blend classifier and prototype evidence into a
//! soft label, then harden it into a class or an out-of-distribution mark.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{MoproError, Result};
use crate::numkit::Tensor;

/// Which branch of the hardening rule produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorrectionRule {
    /// Confident blend: the arg-max class replaces the given label.
    Argmax,
    /// The given label is better than chance and is kept.
    KeepOriginal,
    /// Neither: the sample is treated as out-of-distribution.
    Ood,
}

/// Hard pseudo-label. The variant encodes which rule fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PseudoLabel {
    Argmax(usize),
    Kept(usize),
    Ood,
}

impl PseudoLabel {
    pub fn class(self) -> Option<usize> {
        match self {
            PseudoLabel::Argmax(k) | PseudoLabel::Kept(k) => Some(k),
            PseudoLabel::Ood => None,
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, PseudoLabel::Ood)
    }

    pub fn rule(self) -> CorrectionRule {
        match self {
            PseudoLabel::Argmax(_) => CorrectionRule::Argmax,
            PseudoLabel::Kept(_) => CorrectionRule::KeepOriginal,
            PseudoLabel::Ood => CorrectionRule::Ood,
        }
    }
}

/// Probability vector over the K classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(q: Vec<f64>) -> Result<Self> {
        let total: f64 = q.iter().sum();
        if q.is_empty() || q.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(MoproError::Contract(format!(
                "soft label must be a probability vector (sum {total})"
            )));
        }
        Ok(SoftLabel(q))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.len()
    }
}

/// `q = α·p + (1−α)·s`
pub fn soft_pseudo_label(p: &[f64], s: &[f64], alpha: f64) -> Result<SoftLabel> {
    if p.len() != s.len() {
        return Err(MoproError::Dimension {
            op: "soft_pseudo_label",
            left: vec![p.len()],
            right: vec![s.len()],
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MoproError::config("alpha", format!("{alpha} is outside [0, 1]")));
    }
    let q = p
        .iter()
        .zip(s)
        .map(|(p, s)| alpha * p + (1.0 - alpha) * s)
        .collect();
    SoftLabel::new(q)
}

/// Lowest index among the maxima.
fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// Harden a soft label. Both comparisons are strict, so `q[y] == 1/K`
/// yields [`PseudoLabel::Ood`].
pub fn hard_pseudo_label(q: &SoftLabel, original: usize, threshold: f64) -> Result<PseudoLabel> {
    let q = q.as_slice();
    let k = q.len();
    if original >= k {
        return Err(MoproError::Contract(format!(
            "label {original} out of range for {k} classes"
        )));
    }
    let best = argmax(q);
    Ok(if q[best] > threshold {
        PseudoLabel::Argmax(best)
    } else if q[original] > 1.0 / k as f64 {
        PseudoLabel::Kept(original)
    } else {
        PseudoLabel::Ood
    })
}

/// Firing counts for the three rules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCounts {
    pub argmax: usize,
    pub kept: usize,
    pub ood: usize,
}

impl RuleCounts {
    pub fn record(&mut self, label: PseudoLabel) {
        match label.rule() {
            CorrectionRule::Argmax => self.argmax += 1,
            CorrectionRule::KeepOriginal => self.kept += 1,
            CorrectionRule::Ood => self.ood += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.argmax + self.kept + self.ood
    }

    pub fn from_labels(labels: &[PseudoLabel]) -> Self {
        let mut c = RuleCounts::default();
        labels.iter().for_each(|&l| c.record(l));
        c
    }
}

impl AddAssign for RuleCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.argmax += rhs.argmax;
        self.kept += rhs.kept;
        self.ood += rhs.ood;
    }
}

/// Apply the soft blend and hardening rule row by row.
pub fn correct_batch(
    p: &Tensor,
    s: &Tensor,
    labels: &[usize],
    alpha: f64,
    threshold: f64,
) -> Result<(Vec<PseudoLabel>, RuleCounts)> {
    if !p.same_shape(s) || p.rows() != labels.len() {
        return Err(MoproError::Dimension {
            op: "correct_batch",
            left: p.shape().to_vec(),
            right: s.shape().to_vec(),
        });
    }
    let pseudo = p
        .row_iter()
        .zip(s.row_iter())
        .zip(labels)
        .map(|((p, s), &y)| hard_pseudo_label(&soft_pseudo_label(p, s, alpha)?, y, threshold))
        .collect::<Result<Vec<_>>>()?;
    let counts = RuleCounts::from_labels(&pseudo);
    Ok((pseudo, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Rng;
    use proptest::prelude::*;

    fn soft(q: &[f64]) -> SoftLabel {
        SoftLabel::new(q.to_vec()).unwrap()
    }

    #[test]
    fn blend_examples() {
        let q = soft_pseudo_label(&[0.8, 0.2], &[0.6, 0.4], 0.5).unwrap();
        assert!((q.as_slice()[0] - 0.7).abs() < 1e-15);
        assert!((q.as_slice()[1] - 0.3).abs() < 1e-15);
        let p = [0.1, 0.2, 0.7];
        let s = [0.3, 0.3, 0.4];
        assert_eq!(soft_pseudo_label(&p, &s, 1.0).unwrap().as_slice(), &p);
        assert_eq!(soft_pseudo_label(&p, &s, 0.0).unwrap().as_slice(), &s);
        assert!(matches!(
            soft_pseudo_label(&p, &s[..2], 0.5),
            Err(MoproError::Dimension { .. })
        ));
    }

    #[test]
    fn rule_examples() {
        // zero-based versions of the classes in the worked examples
        let q = soft(&[0.05, 0.85, 0.05, 0.05]);
        assert_eq!(hard_pseudo_label(&q, 2, 0.8).unwrap(), PseudoLabel::Argmax(1));
        let q = soft(&[0.4, 0.3, 0.2, 0.1]);
        assert_eq!(hard_pseudo_label(&q, 1, 0.8).unwrap(), PseudoLabel::Kept(1));
        let q = soft(&[0.25; 4]);
        for y in 0..4 {
            assert_eq!(hard_pseudo_label(&q, y, 0.8).unwrap(), PseudoLabel::Ood);
        }
    }

    #[test]
    fn threshold_is_strict() {
        let q = soft(&[0.8, 0.2]);
        assert_eq!(hard_pseudo_label(&q, 1, 0.8).unwrap(), PseudoLabel::Ood);
        assert_eq!(hard_pseudo_label(&q, 0, 0.8).unwrap(), PseudoLabel::Kept(0));
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let q = soft(&[0.45, 0.45, 0.1]);
        assert_eq!(hard_pseudo_label(&q, 2, 0.4).unwrap(), PseudoLabel::Argmax(0));
    }

    #[test]
    fn batch_examples() {
        let p = Tensor::from_rows(&[vec![0.9, 0.05, 0.05], vec![0.05, 0.9, 0.05]]).unwrap();
        let (labels, counts) = correct_batch(&p, &p, &[0, 1], 0.5, 0.8).unwrap();
        assert_eq!(labels, vec![PseudoLabel::Argmax(0), PseudoLabel::Argmax(1)]);
        assert_eq!(counts.ood, 0);

        let u = Tensor::full(3, 3, 1.0 / 3.0);
        let (labels, counts) = correct_batch(&u, &u, &[0, 1, 2], 0.5, 0.8).unwrap();
        assert!(labels.iter().all(|l| l.is_ood()));
        assert_eq!(counts, RuleCounts { argmax: 0, kept: 0, ood: 3 });
    }

    fn random_simplex(rng: &mut Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| -rng.uniform().max(1e-300).ln()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }

    proptest! {
        #[test]
        fn exactly_one_rule_and_deterministic(seed in any::<u64>(), k in 2usize..8, t in 0.0f64..1.2) {
            let mut rng = Rng::new(seed);
            let q = soft(&random_simplex(&mut rng, k));
            let y = rng.below(k);
            let a = hard_pseudo_label(&q, y, t).unwrap();
            let b = hard_pseudo_label(&q, y, t).unwrap();
            prop_assert_eq!(a, b);
            let counts = RuleCounts::from_labels(&[a]);
            prop_assert_eq!(counts.total(), 1);
        }

        #[test]
        fn threshold_monotonicity(seed in any::<u64>(), k in 2usize..8, t1 in 0.0f64..1.0, dt in 0.0f64..0.5) {
            let mut rng = Rng::new(seed);
            let q = soft(&random_simplex(&mut rng, k));
            let y = rng.below(k);
            let low = hard_pseudo_label(&q, y, t1).unwrap();
            let high = hard_pseudo_label(&q, y, t1 + dt).unwrap();
            // raising T never rescues an OOD sample
            if low.is_ood() { prop_assert!(high.is_ood()); }
            // lowering T never removes a sample from the arg-max set
            if high.rule() == CorrectionRule::Argmax { prop_assert_eq!(low.rule(), CorrectionRule::Argmax); }
        }

        #[test]
        fn threshold_extremes(seed in any::<u64>(), k in 2usize..8) {
            let mut rng = Rng::new(seed);
            let q = soft(&random_simplex(&mut rng, k));
            let y = rng.below(k);
            prop_assert_ne!(hard_pseudo_label(&q, y, 1.01).unwrap().rule(), CorrectionRule::Argmax);
            // max q ≥ 1/K always; ties at exactly 1/K only for the uniform vector
            let low = hard_pseudo_label(&q, y, 1.0 / k as f64 - 1e-12).unwrap();
            prop_assert_eq!(low.rule(), CorrectionRule::Argmax);
        }
    }
}
