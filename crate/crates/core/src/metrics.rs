//! Accuracy, ROC-AUC (Mann–Whitney form), SR@N, and evaluation reports.
//!
//! The detector convention throughout is "score ≥ τ ⇒ flag adv".

use std::fmt::Write as _;

use crate::attacks::AttackKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Benign,
    Adversarial,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredSample {
    /// Detector P(adv).
    pub score: f64,
    pub origin: Origin,
    /// Only meaningful for adversarial samples.
    pub classifier_fooled: bool,
}

impl ScoredSample {
    pub fn benign(score: f64) -> Self {
        ScoredSample {
            score,
            origin: Origin::Benign,
            classifier_fooled: false,
        }
    }

    pub fn adversarial(score: f64, classifier_fooled: bool) -> Self {
        ScoredSample {
            score,
            origin: Origin::Adversarial,
            classifier_fooled,
        }
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Metric("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Probability that a random adversarial sample outscores a random benign
/// one, ties counted ½. Computed from mid-ranks in `O(n log n)`.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<f64> {
    if samples.iter().any(|s| !s.score.is_finite()) {
        return Err(Error::Metric("non-finite detector score".into()));
    }
    let n_adv = samples.iter().filter(|s| s.origin == Origin::Adversarial).count();
    let n_ben = samples.len() - n_adv;
    if n_adv == 0 || n_ben == 0 {
        return Err(Error::Metric("ROC-AUC needs both benign and adversarial samples".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| samples[a].score.total_cmp(&samples[b].score));
    // Sum of 1-based mid-ranks of adversarial samples, doubled to stay integral.
    let mut rank_sum_x2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && samples[order[j + 1]].score == samples[order[i]].score {
            j += 1;
        }
        let mid_x2 = (i + 1 + j + 1) as u64;
        let adv_in_group = order[i..=j]
            .iter()
            .filter(|&&k| samples[k].origin == Origin::Adversarial)
            .count() as u64;
        rank_sum_x2 += mid_x2 * adv_in_group;
        i = j + 1;
    }
    let (na, nb) = (n_adv as u64, n_ben as u64);
    let u_x2 = rank_sum_x2 - na * (na + 1);
    Ok(u_x2 as f64 / (2 * na * nb) as f64)
}

pub fn roc_auc_scores(benign: &[f64], adversarial: &[f64]) -> Result<f64> {
    let samples: Vec<ScoredSample> = benign
        .iter()
        .map(|&s| ScoredSample::benign(s))
        .chain(adversarial.iter().map(|&s| ScoredSample::adversarial(s, true)))
        .collect();
    roc_auc(&samples)
}

fn check_percent(n_percent: f64) -> Result<()> {
    if !(n_percent > 0.0 && n_percent < 100.0) {
        return Err(Error::Metric(format!("N must lie in (0, 100), got {n_percent}")));
    }
    Ok(())
}

/// Smallest benign score `τ` with `#{benign ≥ τ} / n ≤ N%`, or `+∞` when no
/// benign score qualifies.
pub fn fpr_threshold(benign: &[f64], n_percent: f64) -> Result<f64> {
    check_percent(n_percent)?;
    if benign.is_empty() {
        return Err(Error::Metric("no benign scores to calibrate on".into()));
    }
    if benign.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite benign score".into()));
    }
    let mut sorted = benign.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut i = 0;
    while i < n {
        // count(score ≥ sorted[i]) = n − first index of sorted[i]
        let at_or_above = n - i;
        if at_or_above as f64 * 100.0 <= n_percent * n as f64 {
            return Ok(sorted[i]);
        }
        let v = sorted[i];
        while i < n && sorted[i] == v {
            i += 1;
        }
    }
    Ok(f64::INFINITY)
}

/// Fraction of attacks that fooled the classifier and scored below the
/// threshold calibrated to an N% benign false-positive rate.
pub fn sr_at_n(benign: &[f64], adversarial: &[(f64, bool)], n_percent: f64) -> Result<f64> {
    if adversarial.is_empty() {
        return Err(Error::Metric("no attacks to score".into()));
    }
    let tau = fpr_threshold(benign, n_percent)?;
    let wins = adversarial
        .iter()
        .filter(|&&(score, fooled)| fooled && score < tau)
        .count();
    Ok(wins as f64 / adversarial.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackMetrics {
    pub kind: AttackKind,
    pub auc: f64,
    /// `(N, SR@N)` pairs.
    pub sr: Vec<(f64, f64)>,
    /// Classifier accuracy on the attacked inputs.
    pub adversarial_accuracy: f64,
    /// Detector threshold the attacker had to get under.
    pub detector_threshold: f64,
    /// Median over images of the last attacker-side detector loss.
    pub median_final_bce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Which detector was evaluated (e.g. `pre-radar`).
    pub label: String,
    pub clean_accuracy: f64,
    pub attacks: Vec<AttackMetrics>,
    pub metadata: Vec<(String, String)>,
}

fn fmt_n(n: f64) -> String {
    if n.fract() == 0.0 {
        format!("{}", n as i64)
    } else {
        format!("{n}")
    }
}

impl EvalReport {
    pub fn attack(&self, kind: AttackKind) -> Option<&AttackMetrics> {
        self.attacks.iter().find(|a| a.kind == kind)
    }

    pub fn sr(&self, kind: AttackKind, n: f64) -> Option<f64> {
        self.attack(kind)?.sr.iter().find(|(m, _)| *m == n).map(|(_, v)| *v)
    }

    fn sr_levels(&self) -> Vec<f64> {
        self.attacks.first().map(|a| a.sr.iter().map(|(n, _)| *n).collect()).unwrap_or_default()
    }

    pub fn to_csv(&self) -> String {
        let levels = self.sr_levels();
        let mut out = String::from("detector,attack,auc");
        for n in &levels {
            let _ = write!(out, ",sr@{}", fmt_n(*n));
        }
        out.push_str(",clean_accuracy,adversarial_accuracy,detector_threshold,median_final_bce\n");
        for a in &self.attacks {
            let _ = write!(out, "{},{},{}", self.label, a.kind, a.auc);
            for (_, v) in &a.sr {
                let _ = write!(out, ",{v}");
            }
            let median = a.median_final_bce.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                ",{},{},{},{}",
                self.clean_accuracy, a.adversarial_accuracy, a.detector_threshold, median
            );
        }
        out
    }
}

/// Plain-text tables: classifier accuracy, detector ROC-AUC per attack and
/// SR@N per adaptive attack, one row per report.
pub fn render_tables(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let Some(first) = reports.first() else {
        return out;
    };
    for (k, v) in &first.metadata {
        let _ = writeln!(out, "# {k} = {v}");
    }
    if !first.metadata.is_empty() {
        out.push('\n');
    }

    let label_w = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(8);
    let kinds: Vec<AttackKind> = first.attacks.iter().map(|a| a.kind).collect();

    let _ = writeln!(out, "Classifier accuracy (ben / adv under each attack)");
    let _ = write!(out, "{:<label_w$}  {:>9}", "Detector", "Acc(ben)");
    for k in &kinds {
        let _ = write!(out, "  {:>9}", format!("Acc({k})"));
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<label_w$}  {:>9.4}", r.label, r.clean_accuracy);
        for a in &r.attacks {
            let _ = write!(out, "  {:>9.4}", a.adversarial_accuracy);
        }
        out.push('\n');
    }

    let _ = writeln!(out, "\nDetector ROC-AUC (higher is better)");
    let _ = write!(out, "{:<label_w$}  {:>8}", "Detector", "AUC_avg");
    for k in &kinds {
        let _ = write!(out, "  {:>9}", format!("AUC_{}", k.name().to_uppercase()));
    }
    out.push('\n');
    for r in reports {
        let avg = r.attacks.iter().map(|a| a.auc).sum::<f64>() / r.attacks.len().max(1) as f64;
        let _ = write!(out, "{:<label_w$}  {:>8.2}", r.label, avg);
        for a in &r.attacks {
            let _ = write!(out, "  {:>9.2}", a.auc);
        }
        out.push('\n');
    }

    let adaptive: Vec<AttackKind> = kinds.iter().copied().filter(|k| k.is_adaptive()).collect();
    if !adaptive.is_empty() {
        for n in first.sr_levels() {
            let tag = format!("SR@{}", fmt_n(n));
            let _ = writeln!(out, "\nAttack success rate {tag} (lower is better)");
            let _ = write!(out, "{:<label_w$}  {:>9}", "Detector", format!("{tag}_avg"));
            for k in &adaptive {
                let _ = write!(out, "  {:>10}", format!("{tag}_{}", k.name().to_uppercase()));
            }
            out.push('\n');
            for r in reports {
                let vals: Vec<f64> = adaptive.iter().filter_map(|k| r.sr(*k, n)).collect();
                let avg = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
                let _ = write!(out, "{:<label_w$}  {:>9.2}", r.label, avg);
                for v in vals {
                    let _ = write!(out, "  {:>10.2}", v);
                }
                out.push('\n');
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn auc_extremes() {
        assert_eq!(roc_auc_scores(&[0.1, 0.2], &[0.8, 0.9, 0.95]).unwrap(), 1.0);
        assert_eq!(roc_auc_scores(&[0.3; 4], &[0.3; 5]).unwrap(), 0.5);
        assert_eq!(roc_auc_scores(&[0.9], &[0.1]).unwrap(), 0.0);
        assert!(roc_auc_scores(&[], &[0.1]).is_err());
        assert!(roc_auc_scores(&[0.2], &[]).is_err());
    }

    #[test]
    fn sr_extremes() {
        // All benign scores tie, so no benign score keeps FPR at 5%.
        assert_eq!(fpr_threshold(&[1.0; 10], 5.0).unwrap(), f64::INFINITY);
        let adv = vec![(0.0, true); 7];
        assert_eq!(sr_at_n(&[1.0; 10], &adv, 5.0).unwrap(), 1.0);
        let unfooled = vec![(0.0, false); 7];
        assert_eq!(sr_at_n(&[1.0; 10], &unfooled, 5.0).unwrap(), 0.0);
        assert!(sr_at_n(&[], &adv, 5.0).is_err());
        assert!(sr_at_n(&[0.5], &[], 5.0).is_err());
        assert!(sr_at_n(&[0.5], &adv, 0.0).is_err());
    }

    #[test]
    fn threshold_hits_requested_rate() {
        let ben: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let tau = fpr_threshold(&ben, 5.0).unwrap();
        assert_eq!(tau, 0.95);
        assert_eq!(ben.iter().filter(|&&s| s >= tau).count(), 5);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_increasing_map(
            ben in prop::collection::vec(0.0f64..1.0, 1..40),
            adv in prop::collection::vec(0.0f64..1.0, 1..40),
        ) {
            let a = roc_auc_scores(&ben, &adv).unwrap();
            let f = |v: &f64| (3.0 * v).exp() - 7.0;
            let b = roc_auc_scores(
                &ben.iter().map(f).collect::<Vec<_>>(),
                &adv.iter().map(f).collect::<Vec<_>>(),
            ).unwrap();
            prop_assert_eq!(a, b);
            let flipped = roc_auc_scores(&adv, &ben).unwrap();
            prop_assert!((a + flipped - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn sr_non_increasing_in_n(
            ben in prop::collection::vec(0.0f64..1.0, 1..60),
            adv in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..60),
        ) {
            let mut prev = 1.0;
            for n in [1.0, 2.0, 5.0, 10.0, 25.0, 50.0, 75.0, 99.0] {
                let v = sr_at_n(&ben, &adv, n).unwrap();
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }

    #[test]
    fn report_renders() {
        let r = EvalReport {
            label: "pre-radar".into(),
            clean_accuracy: 0.99,
            attacks: vec![
                AttackMetrics {
                    kind: AttackKind::Pgd,
                    auc: 1.0,
                    sr: vec![(5.0, 0.0)],
                    adversarial_accuracy: 0.01,
                    detector_threshold: 0.4,
                    median_final_bce: None,
                },
                AttackMetrics {
                    kind: AttackKind::Opgd,
                    auc: 0.0,
                    sr: vec![(5.0, 0.98)],
                    adversarial_accuracy: 0.0,
                    detector_threshold: 0.4,
                    median_final_bce: Some(0.01),
                },
            ],
            metadata: vec![("seed".into(), "1".into())],
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("detector,attack,auc,sr@5,clean_accuracy"));
        assert_eq!(csv.lines().count(), 3);
        let table = render_tables(&[r]);
        assert!(table.contains("AUC_OPGD"));
        assert!(table.contains("SR@5_OPGD"));
        assert!(table.contains("# seed = 1"));
    }
}
