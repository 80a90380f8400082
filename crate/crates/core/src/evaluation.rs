//! Detection metrics (precision, recall, F1, ROC AUC) and diagnosis metrics
//! (HitRate@P%, NDCG@P%).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Confusion,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
}

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    Ok(())
}

pub fn confusion(pred: &[u8], truth: &[u8]) -> Result<Confusion> {
    same_len(pred.len(), truth.len())?;
    let mut c = Confusion::default();
    for (&p, &y) in pred.iter().zip(truth) {
        match (p != 0, y != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn prf1(pred: &[u8], truth: &[u8]) -> Result<Prf1> {
    let c = confusion(pred, truth)?;
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    Ok(Prf1 {
        precision,
        recall,
        f1: f1_score(precision, recall),
        counts: c,
        degenerate: c.tp + c.fp == 0 || c.tp + c.fn_ == 0,
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic with midranks.
pub fn roc_auc(scores: &[f64], truth: &[u8]) -> Result<f64> {
    same_len(scores.len(), truth.len())?;
    let n_pos = truth.iter().filter(|&&y| y != 0).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateTruth);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&o| truth[o] != 0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Expands any hit inside a ground-truth segment to the whole segment.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Result<Vec<u8>> {
    same_len(pred.len(), truth.len())?;
    let mut out = pred.to_vec();
    let mut t = 0;
    while t < truth.len() {
        if truth[t] == 0 {
            t += 1;
            continue;
        }
        let start = t;
        while t < truth.len() && truth[t] != 0 {
            t += 1;
        }
        if pred[start..t].iter().any(|&p| p != 0) {
            out[start..t].iter_mut().for_each(|p| *p = 1);
        }
    }
    Ok(out)
}

/// Number of top candidates for `g` true dimensions at `p_pct` percent.
pub fn candidate_count(g: usize, p_pct: u32) -> usize {
    g * p_pct as usize / 100
}

fn qualifying<'a>(
    rankings: &'a [Vec<usize>],
    truth: &'a [Vec<u8>],
) -> Result<impl Iterator<Item = (&'a [usize], &'a [u8], usize)>> {
    same_len(rankings.len(), truth.len())?;
    let any = truth.iter().any(|t| t.iter().any(|&y| y != 0));
    if !any {
        return Err(Error::NoAnomalousTimestamps);
    }
    Ok(rankings.iter().zip(truth).filter_map(|(r, t)| {
        let g = t.iter().filter(|&&y| y != 0).count();
        (g > 0).then_some((r.as_slice(), t.as_slice(), g))
    }))
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Fraction of true dimensions among the top ⌊G·P/100⌋ candidates,
/// averaged over timestamps with at least one true dimension.
pub fn hitrate_at(rankings: &[Vec<usize>], truth: &[Vec<u8>], p_pct: u32) -> Result<f64> {
    let rows = qualifying(rankings, truth)?;
    Ok(mean(rows.map(|(r, t, g)| {
        let top = candidate_count(g, p_pct).min(r.len());
        r[..top].iter().filter(|&&d| t[d] != 0).count() as f64 / g as f64
    })))
}

/// NDCG over the same top candidates with binary relevance.
pub fn ndcg_at(rankings: &[Vec<usize>], truth: &[Vec<u8>], p_pct: u32) -> Result<f64> {
    let rows = qualifying(rankings, truth)?;
    Ok(mean(rows.map(|(r, t, g)| {
        let top = candidate_count(g, p_pct).min(r.len());
        let discount = |k: usize| 1.0 / ((k + 2) as f64).log2();
        let dcg: f64 = (0..top).filter(|&k| t[r[k]] != 0).map(discount).sum();
        let idcg: f64 = (0..top.min(g)).map(discount).sum();
        if idcg > 0.0 {
            dcg / idcg
        } else {
            0.0
        }
    })))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub point_adjusted: bool,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub degenerate: bool,
}

impl DetectionMetrics {
    fn new(p: Prf1, point_adjusted: bool) -> Self {
        Self {
            point_adjusted,
            precision: p.precision,
            recall: p.recall,
            f1: p.f1,
            tp: p.counts.tp,
            fp: p.counts.fp,
            fn_: p.counts.fn_,
            tn: p.counts.tn,
            degenerate: p.degenerate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisMetrics {
    pub hitrate_100: f64,
    pub hitrate_150: f64,
    pub ndcg_100: f64,
    pub ndcg_150: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AUC of the aggregate score (mean over dimensions) against the labels.
    pub auc: Option<f64>,
    pub raw: DetectionMetrics,
    pub adjusted: DetectionMetrics,
    pub diagnosis: Option<DiagnosisMetrics>,
}

pub const CSV_COLUMNS: [&str; 22] = [
    "auc",
    "precision",
    "recall",
    "f1",
    "tp",
    "fp",
    "fn",
    "tn",
    "pa_precision",
    "pa_recall",
    "pa_f1",
    "pa_tp",
    "pa_fp",
    "pa_fn",
    "pa_tn",
    "hitrate_100",
    "hitrate_150",
    "ndcg_100",
    "ndcg_150",
    "degenerate",
    "pa_degenerate",
    "point_adjust_default",
];

impl EvalReport {
    /// One CSV row in [`CSV_COLUMNS`] order; absent values are empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let d = self.diagnosis.as_ref();
        let (r, a) = (&self.raw, &self.adjusted);
        [
            opt(self.auc),
            r.precision.to_string(),
            r.recall.to_string(),
            r.f1.to_string(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            r.tn.to_string(),
            a.precision.to_string(),
            a.recall.to_string(),
            a.f1.to_string(),
            a.tp.to_string(),
            a.fp.to_string(),
            a.fn_.to_string(),
            a.tn.to_string(),
            opt(d.map(|d| d.hitrate_100)),
            opt(d.map(|d| d.hitrate_150)),
            opt(d.map(|d| d.ndcg_100)),
            opt(d.map(|d| d.ndcg_150)),
            r.degenerate.to_string(),
            a.degenerate.to_string(),
            "false".into(),
        ]
        .join(",")
    }
}

/// Per-timestamp dimension rankings paired with per-dimension labels.
pub type DiagnosisInput<'a> = (&'a [Vec<usize>], &'a [Vec<u8>]);

/// Full evaluation of aggregate predictions and scores, with diagnosis
/// metrics when per-dimension truth and rankings are given.
pub fn evaluate(
    pred: &[u8],
    scores: &[f64],
    truth: &[u8],
    diagnosis: Option<DiagnosisInput<'_>>,
) -> Result<EvalReport> {
    same_len(scores.len(), truth.len())?;
    let raw = prf1(pred, truth)?;
    let adjusted = prf1(&point_adjust(pred, truth)?, truth)?;
    let auc = match roc_auc(scores, truth) {
        Ok(a) => Some(a),
        Err(Error::DegenerateTruth) => None,
        Err(e) => return Err(e),
    };
    let diagnosis = match diagnosis {
        Some((rankings, dim_truth)) => match hitrate_at(rankings, dim_truth, 100) {
            Err(Error::NoAnomalousTimestamps) => None,
            Err(e) => return Err(e),
            Ok(h100) => Some(DiagnosisMetrics {
                hitrate_100: h100,
                hitrate_150: hitrate_at(rankings, dim_truth, 150)?,
                ndcg_100: ndcg_at(rankings, dim_truth, 100)?,
                ndcg_150: ndcg_at(rankings, dim_truth, 150)?,
            }),
        },
        None => None,
    };
    Ok(EvalReport {
        auc,
        raw: DetectionMetrics::new(raw, false),
        adjusted: DetectionMetrics::new(adjusted, true),
        diagnosis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn prf1_cases() {
        let p = prf1(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = prf1(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
        let p = prf1(&[0, 0], &[0, 0]).unwrap();
        assert_eq!(
            (p.precision, p.recall, p.f1, p.degenerate),
            (0.0, 0.0, 0.0, true)
        );
        assert!(matches!(
            prf1(&[0], &[0, 1]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn auc_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(
            roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(),
            0.75
        );
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::DegenerateTruth)
        ));
    }

    #[test]
    fn point_adjust_cases() {
        let truth = [0, 0, 0, 1, 1, 1, 1, 0];
        assert_eq!(
            point_adjust(&[0, 0, 0, 0, 1, 0, 0, 0], &truth).unwrap(),
            vec![0, 0, 0, 1, 1, 1, 1, 0]
        );
        assert_eq!(
            point_adjust(&[1, 0, 0, 0, 0, 0, 0, 1], &truth).unwrap(),
            vec![1, 0, 0, 0, 0, 0, 0, 1]
        );
        assert_eq!(point_adjust(&[1; 8], &truth).unwrap(), vec![1; 8]);
    }

    #[test]
    fn worked_diagnosis_example() {
        // two true dimensions ranked first and third
        let rankings = vec![vec![0, 1, 2, 3]];
        let truth = vec![vec![1, 0, 1, 0]];
        assert_eq!(candidate_count(2, 100), 2);
        assert_eq!(candidate_count(2, 150), 3);
        assert_eq!(candidate_count(1, 150), 1);
        assert_eq!(hitrate_at(&rankings, &truth, 100).unwrap(), 0.5);
        assert_eq!(hitrate_at(&rankings, &truth, 150).unwrap(), 1.0);
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg_at(&rankings, &truth, 150).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.9198).abs() < 1e-4);
    }

    #[test]
    fn single_dimension_diagnosis() {
        let truth = vec![vec![0, 1, 0]];
        assert_eq!(ndcg_at(&[vec![0, 1, 2]], &truth, 150).unwrap(), 0.0);
        assert_eq!(ndcg_at(&[vec![1, 0, 2]], &truth, 100).unwrap(), 1.0);
        assert_eq!(hitrate_at(&[vec![2, 0, 1]], &truth, 100).unwrap(), 0.0);
        assert!(matches!(
            hitrate_at(&[vec![0, 1, 2]], &[vec![0, 0, 0]], 100),
            Err(Error::NoAnomalousTimestamps)
        ));
    }

    #[test]
    fn perfect_predictions_in_both_modes() {
        let truth = [0, 1, 1, 0, 1];
        let scores = [0.0, 1.0, 1.0, 0.0, 1.0];
        let r = evaluate(&truth, &scores, &truth, None).unwrap();
        assert_eq!(r.raw.f1, 1.0);
        assert_eq!(r.adjusted.f1, 1.0);
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.csv_row().split(',').count(), CSV_COLUMNS.len());
        let text = toml::to_string(&r).unwrap();
        assert_eq!(toml::from_str::<EvalReport>(&text).unwrap(), r);
    }

    proptest! {
        #[test]
        fn auc_is_invariant_under_monotone_maps(
            s in proptest::collection::vec(-5.0f64..5.0, 2..40),
            y in proptest::collection::vec(0u8..2, 2..40),
        ) {
            let n = s.len().min(y.len());
            let (s, mut y) = (&s[..n], y[..n].to_vec());
            y[0] = 0;
            y[1] = 1;
            let a = roc_auc(s, &y).unwrap();
            let mapped: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert!((a - roc_auc(&mapped, &y).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn f1_is_symmetric(p in 0.0f64..1.0, r in 0.0f64..1.0) {
            prop_assert_eq!(f1_score(p, r), f1_score(r, p));
        }

        #[test]
        fn point_adjust_only_adds(
            pred in proptest::collection::vec(0u8..2, 30),
            truth in proptest::collection::vec(0u8..2, 30),
        ) {
            let adj = point_adjust(&pred, &truth).unwrap();
            prop_assert!(pred.iter().zip(&adj).all(|(a, b)| b >= a));
            let before = confusion(&pred, &truth).unwrap().tp;
            let after = confusion(&adj, &truth).unwrap().tp;
            prop_assert!(after >= before);
        }

        #[test]
        fn ndcg_bounds(
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
            truth in proptest::collection::vec(0u8..2, 6),
        ) {
            prop_assume!(truth.contains(&1));
            let rankings = vec![perm.clone()];
            let dims = vec![truth.clone()];
            for p in [100, 150] {
                let v = ndcg_at(&rankings, &dims, p).unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            let g = truth.iter().filter(|&&t| t == 1).count();
            let on_top = perm[..g].iter().all(|&d| truth[d] == 1);
            let v = ndcg_at(&rankings, &dims, 100).unwrap();
            prop_assert_eq!(on_top, (v - 1.0).abs() < 1e-12);
        }
    }
}
