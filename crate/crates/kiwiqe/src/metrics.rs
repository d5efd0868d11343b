//! Shared-task evaluation metrics.
//!
//! Conventions: BAD is the positive class everywhere; ranks are averaged on
//! ties (Spearman, AUC); AP handles ties in descending-score groups with
//! group-level precision; explainability metrics aggregate as unweighted
//! means over qualifying sentences (macro) unless micro is requested.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Tag;
use crate::error::{KiwiError, Result};

/// Average ranks (1-based), ties averaged.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation. Constant input is undefined: returns NaN and warns.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson length mismatch");
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("pearson undefined for constant input; reporting NaN");
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation: Pearson of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman length mismatch");
    if x.len() < 2 {
        log::warn!("spearman undefined for fewer than 2 points; reporting NaN");
        return f64::NAN;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn mae(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "mae length mismatch");
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
}

pub fn rmse(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "rmse length mismatch");
    (x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_tags(pred: &[Tag], gold: &[Tag]) -> Result<Confusion> {
        if pred.len() != gold.len() {
            return Err(KiwiError::Contract(format!(
                "tag length mismatch: {} predictions vs {} gold",
                pred.len(),
                gold.len()
            )));
        }
        let mut c = Confusion::default();
        for (p, g) in pred.iter().zip(gold) {
            match (p.is_bad(), g.is_bad()) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Matthews correlation; 0 whenever a denominator factor is 0.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / denom.sqrt()
    }
}

/// Matthews correlation over OK/BAD tags, BAD positive.
pub fn mcc(pred: &[Tag], gold: &[Tag]) -> Result<f64> {
    Ok(Confusion::from_tags(pred, gold)?.mcc())
}

/// Per-class F1 as `(f1_ok, f1_bad)`; empty denominators give 0.
pub fn f1_ok_bad(pred: &[Tag], gold: &[Tag]) -> Result<(f64, f64)> {
    let c = Confusion::from_tags(pred, gold)?;
    let f1 = |tp: f64, fp: f64, fn_: f64| {
        let denom = 2.0 * tp + fp + fn_;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    };
    // For OK the confusion cells swap roles.
    let f1_bad = f1(c.tp as f64, c.fp as f64, c.fn_ as f64);
    let f1_ok = f1(c.tn as f64, c.fn_ as f64, c.fp as f64);
    Ok((f1_ok, f1_bad))
}

fn count_bad(gold: &[Tag]) -> usize {
    gold.iter().filter(|t| t.is_bad()).count()
}

/// AUC of scores against BAD-positive tags, tie-averaged ranks.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], gold: &[Tag]) -> Option<f64> {
    assert_eq!(scores.len(), gold.len(), "auc length mismatch");
    let p = count_bad(gold);
    let n = gold.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(gold)
        .filter(|(_, t)| t.is_bad())
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (p * (p + 1)) as f64 / 2.0;
    Some(u / (p * n) as f64)
}

/// Average precision with descending-score tie groups and group-level
/// precision. `None` when there is no BAD token.
pub fn ap(scores: &[f64], gold: &[Tag]) -> Option<f64> {
    assert_eq!(scores.len(), gold.len(), "ap length mismatch");
    let total_p = count_bad(gold);
    if total_p == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut sum = 0.0;
    let mut cum_tp = 0usize;
    let mut cum_n = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let group_tp = idx[i..=j].iter().filter(|&&k| gold[k].is_bad()).count();
        cum_tp += group_tp;
        cum_n += j - i + 1;
        if group_tp > 0 {
            sum += group_tp as f64 * (cum_tp as f64 / cum_n as f64);
        }
        i = j + 1;
    }
    Some(sum / total_p as f64)
}

/// Recall at top-K where K is the number of gold BAD tokens. Ties at the
/// cut are broken by position (earlier token kept). `None` without BADs.
pub fn recall_at_k(scores: &[f64], gold: &[Tag]) -> Option<f64> {
    assert_eq!(scores.len(), gold.len(), "recall_at_k length mismatch");
    let k = count_bad(gold);
    if k == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let hits = idx[..k].iter().filter(|&&i| gold[i].is_bad()).count();
    Some(hits as f64 / k as f64)
}

/// Sweeps the midpoints between sorted unique scores and returns the best
/// MCC with its threshold (lowest threshold on ties). Prediction rule:
/// positive iff `score >= threshold`.
pub fn mcc_best_threshold(scores: &[f64], gold: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != gold.len() {
        return Err(KiwiError::Contract("mcc_best_threshold length mismatch".into()));
    }
    let pos = gold.iter().filter(|&&g| g).count();
    if pos == 0 || pos == gold.len() {
        return Err(KiwiError::Contract(
            "mcc_best_threshold needs at least one example of each class".into(),
        ));
    }
    let mut unique: Vec<f64> = scores.to_vec();
    unique.sort_by(|a, b| a.partial_cmp(b).unwrap());
    unique.dedup();
    if unique.len() < 2 {
        return Err(KiwiError::Contract(
            "mcc_best_threshold needs at least two distinct scores".into(),
        ));
    }
    let mut best = f64::NEG_INFINITY;
    let mut best_t = f64::NAN;
    for w in unique.windows(2) {
        let t = (w[0] + w[1]) / 2.0;
        let mut c = Confusion::default();
        for (&s, &g) in scores.iter().zip(gold) {
            match (s >= t, g) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        let m = c.mcc();
        if m > best {
            best = m;
            best_t = t;
        }
    }
    Ok((best, best_t))
}

/// Micro vs macro aggregation for corpus-level explainability scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Unweighted mean over qualifying sentences.
    Macro,
    /// Pooled counts (R@K: total hits over total K).
    Micro,
}

/// Corpus explainability scores over (word_scores, gold tags) sentences.
/// Only sentences containing at least one BAD token qualify for AP and R@K;
/// AUC additionally needs an OK token.
pub fn corpus_explainability(
    sentences: &[(Vec<f64>, Vec<Tag>)],
    aggregation: Aggregation,
) -> ExplainabilityScores {
    let mut aucs = Vec::new();
    let mut aps = Vec::new();
    let mut raks = Vec::new();
    let mut micro_hits = 0.0;
    let mut micro_k = 0usize;
    for (scores, gold) in sentences {
        if let Some(a) = auc(scores, gold) {
            aucs.push(a);
        }
        if let Some(a) = ap(scores, gold) {
            aps.push(a);
        }
        if let Some(r) = recall_at_k(scores, gold) {
            raks.push(r);
            let k = count_bad(gold);
            micro_hits += r * k as f64;
            micro_k += k;
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let rak = match aggregation {
        Aggregation::Macro => mean(&raks),
        Aggregation::Micro => {
            if micro_k == 0 {
                None
            } else {
                Some(micro_hits / micro_k as f64)
            }
        }
    };
    ExplainabilityScores {
        auc: mean(&aucs),
        ap: mean(&aps),
        rak,
        sentences_used: raks.len(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplainabilityScores {
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub rak: Option<f64>,
    pub sentences_used: usize,
}

impl ExplainabilityScores {
    /// Mean of AUC/AP/R@K, the dev-selection objective for heads.
    pub fn combined(&self) -> Option<f64> {
        match (self.auc, self.ap, self.rak) {
            (Some(a), Some(b), Some(c)) => Some((a + b + c) / 3.0),
            _ => None,
        }
    }
}

/// Per-LP metric table plus the unweighted average row. Metrics that are
/// undefined for an LP are simply absent there and excluded from the mean.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_lp: BTreeMap<String, BTreeMap<String, f64>>,
    pub avg: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(per_lp: BTreeMap<String, BTreeMap<String, f64>>) -> EvalReport {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for block in per_lp.values() {
            for (name, value) in block {
                let e = sums.entry(name.clone()).or_insert((0.0, 0));
                e.0 += value;
                e.1 += 1;
            }
        }
        let avg = sums
            .into_iter()
            .map(|(name, (sum, n))| (name, sum / n as f64))
            .collect();
        EvalReport { per_lp, avg }
    }

    /// Flat TSV: `lp<TAB>metric<TAB>value`, average rows last.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("lp\tmetric\tvalue\n");
        for (lp, block) in &self.per_lp {
            for (name, value) in block {
                out.push_str(&format!("{lp}\t{name}\t{value}\n"));
            }
        }
        for (name, value) in &self.avg {
            out.push_str(&format!("avg\t{name}\t{value}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Tag::{Bad, Ok as TOk};

    fn close(a: f64, b: f64) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        close(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        close(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }

    #[test]
    fn spearman_worked_example() {
        // 1 - 6*2/(3*8) = 0.5
        close(spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]), 0.5);
    }

    #[test]
    fn spearman_constant_is_nan() {
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_nan());
    }

    #[test]
    fn pearson_mae_rmse_cases() {
        let x = [0.0, 1.0];
        close(pearson(&x, &x), 1.0);
        close(mae(&x, &x), 0.0);
        close(rmse(&x, &x), 0.0);
        let y = [0.0, 2.0];
        close(pearson(&x, &y), 1.0);
        close(mae(&x, &y), 0.5);
        close(rmse(&x, &y), 0.5f64.sqrt());
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        close(pearson(&x, &neg), -1.0);
    }

    #[test]
    fn mcc_cases() {
        let gold = [TOk, Bad, TOk, Bad];
        close(mcc(&gold, &gold).unwrap(), 1.0);
        let pred = [TOk, TOk, Bad, Bad];
        let gold = [TOk, Bad, TOk, Bad];
        close(mcc(&pred, &gold).unwrap(), 0.0);
        let inverted = [Bad, TOk, Bad, TOk];
        close(mcc(&inverted, &gold).unwrap(), -1.0);
    }

    #[test]
    fn f1_cases() {
        let gold = [Bad, TOk, TOk];
        let (ok, bad) = f1_ok_bad(&gold, &gold).unwrap();
        close(ok, 1.0);
        close(bad, 1.0);

        let pred = [TOk, TOk, TOk, TOk];
        let gold = [Bad, Bad, TOk, TOk];
        let (_, bad) = f1_ok_bad(&pred, &gold).unwrap();
        close(bad, 0.0);

        let pred = [Bad, Bad, TOk];
        let gold = [Bad, TOk, TOk];
        let (_, bad) = f1_ok_bad(&pred, &gold).unwrap();
        close(bad, 2.0 / 3.0);
    }

    #[test]
    fn auc_ap_rak_cases() {
        let scores = [0.9, 0.1];
        let gold = [Bad, TOk];
        close(auc(&scores, &gold).unwrap(), 1.0);
        close(ap(&scores, &gold).unwrap(), 1.0);
        close(recall_at_k(&scores, &gold).unwrap(), 1.0);

        let scores = [0.9, 0.8, 0.1];
        let gold = [Bad, TOk, Bad];
        close(ap(&scores, &gold).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);

        let scores = [0.1, 0.9, 0.2];
        let gold = [Bad, TOk, TOk];
        close(recall_at_k(&scores, &gold).unwrap(), 0.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let scores = [0.5, 0.5, 0.5, 0.5];
        let gold = [Bad, TOk, Bad, TOk];
        close(auc(&scores, &gold).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert!(auc(&[0.1, 0.2], &[Bad, Bad]).is_none());
        assert!(ap(&[0.1, 0.2], &[TOk, TOk]).is_none());
        assert!(recall_at_k(&[0.1, 0.2], &[TOk, TOk]).is_none());
    }

    #[test]
    fn mcc_threshold_sweep() {
        let (m, t) = mcc_best_threshold(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        close(m, 1.0);
        close(t, 0.5);

        let (m, _) = mcc_best_threshold(&[0.9, 0.1], &[true, false]).unwrap();
        close(m, 1.0);

        assert!(mcc_best_threshold(&[0.9, 0.1], &[true, true]).is_err());
    }

    #[test]
    fn rak_perfect_when_top_k_is_gold_set() {
        let scores = [0.9, 0.7, 0.3, 0.2];
        let gold = [Bad, Bad, TOk, TOk];
        close(recall_at_k(&scores, &gold).unwrap(), 1.0);
    }

    #[test]
    fn report_averages_present_metrics() {
        let mut per_lp = BTreeMap::new();
        per_lp.insert(
            "aa-bb".to_string(),
            BTreeMap::from([("spearman".to_string(), 0.5), ("mcc".to_string(), 0.4)]),
        );
        per_lp.insert("cc-dd".to_string(), BTreeMap::from([("spearman".to_string(), 0.7)]));
        let report = EvalReport::new(per_lp);
        close(report.avg["spearman"], 0.6);
        close(report.avg["mcc"], 0.4);
        let tsv = report.to_tsv();
        assert!(tsv.starts_with("lp\tmetric\tvalue\n"));
        assert!(tsv.contains("avg\tspearman\t0.6"));
    }
}
