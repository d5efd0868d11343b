//! Sentence-score, word-logit and word-tag ensembling with per-LP weight
//! search.
//!
//! Weighted combinations are normalized by the weight sum, so every strategy
//! is invariant to a global positive rescaling of the weight vector. The
//! search evaluates each single member alongside random samples and two
//! coordinate-descent sweeps; a language pair therefore never ends up below
//! its best single member.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QEExample, Tag};
use crate::error::{KiwiError, Result};
use crate::metrics;
use crate::qe_model::{Prediction, DEFAULT_TAG_THRESHOLD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Use the single best member per LP.
    BestOnly,
    /// Weighted mean of sentence scores.
    Scores,
    /// Weighted mean of word logits, then softmax + threshold.
    Logits,
    /// Weighted BAD vote with a BAD-class weight alpha.
    Tags,
}

/// Per-LP combination weights. `alpha` only matters for the tags strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpWeights {
    pub weights: Vec<f64>,
    pub alpha: f64,
    /// Dev objective achieved by these weights during search.
    pub dev_metric: Option<f64>,
}

impl LpWeights {
    fn uniform(n: usize) -> LpWeights {
        LpWeights {
            weights: vec![1.0; n],
            alpha: 1.0,
            dev_metric: None,
        }
    }
}

/// A searched ensemble: member ids, per-LP weights, strategy tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub strategy: Strategy,
    pub members: Vec<String>,
    pub per_lp: BTreeMap<String, LpWeights>,
    /// Used for LPs absent from `per_lp`.
    pub default: LpWeights,
}

impl EnsembleSpec {
    pub fn weights_for(&self, lp: &str) -> &LpWeights {
        self.per_lp.get(lp).unwrap_or(&self.default)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EnsembleSpec> {
        if !path.is_file() {
            return Err(KiwiError::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

fn check_weights(weights: &[f64], n: usize, op: &'static str) -> Result<f64> {
    if weights.len() != n {
        return Err(KiwiError::Contract(format!(
            "{op}: {} weights for {n} members",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(KiwiError::Contract(format!("{op}: weights must be nonnegative")));
    }
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(KiwiError::Contract(format!("{op}: weights must not all be zero")));
    }
    Ok(sum)
}

/// Normalized weighted mean of member sentence scores.
pub fn ensemble_scores(scores: &[f64], weights: &[f64]) -> Result<f64> {
    let sum = check_weights(weights, scores.len(), "ensemble_scores")?;
    Ok(scores.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / sum)
}

/// Weighted mean of member logit vectors for one sentence, then softmax and
/// the BAD-probability threshold.
pub fn ensemble_logits(
    members: &[&[[f64; 2]]],
    weights: &[f64],
    threshold: f64,
) -> Result<(Vec<[f64; 2]>, Vec<Tag>)> {
    let sum = check_weights(weights, members.len(), "ensemble_logits")?;
    let n = members
        .first()
        .ok_or_else(|| KiwiError::Contract("ensemble_logits: no members".into()))?
        .len();
    if members.iter().any(|m| m.len() != n) {
        return Err(KiwiError::Contract("ensemble_logits: member shapes differ".into()));
    }
    let mut combined = vec![[0.0f64; 2]; n];
    for (m, &w) in members.iter().zip(weights) {
        for (c, v) in combined.iter_mut().zip(m.iter()) {
            c[0] += w * v[0];
            c[1] += w * v[1];
        }
    }
    for c in &mut combined {
        c[0] /= sum;
        c[1] /= sum;
    }
    let tags = combined
        .iter()
        .map(|l| {
            // softmax over two logits
            let m = l[0].max(l[1]);
            let e0 = (l[0] - m).exp();
            let e1 = (l[1] - m).exp();
            if e1 / (e0 + e1) >= threshold {
                Tag::Bad
            } else {
                Tag::Ok
            }
        })
        .collect();
    Ok((combined, tags))
}

/// Weighted BAD vote: token j becomes BAD iff
/// `alpha * sum_i w_i [c_ij = BAD] / sum_i w_i >= 0.5`.
pub fn ensemble_tags(members: &[&[Tag]], weights: &[f64], alpha: f64) -> Result<Vec<Tag>> {
    let sum = check_weights(weights, members.len(), "ensemble_tags")?;
    if alpha <= 0.0 {
        return Err(KiwiError::Contract("ensemble_tags: alpha must be positive".into()));
    }
    let n = members
        .first()
        .ok_or_else(|| KiwiError::Contract("ensemble_tags: no members".into()))?
        .len();
    if members.iter().any(|m| m.len() != n) {
        return Err(KiwiError::Contract("ensemble_tags: member lengths differ".into()));
    }
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let vote: f64 = members
            .iter()
            .zip(weights)
            .filter(|(m, _)| m[j].is_bad())
            .map(|(_, &w)| w)
            .sum();
        let s = alpha * vote / sum;
        out.push(if s >= 0.5 { Tag::Bad } else { Tag::Ok });
    }
    Ok(out)
}

/// One member's dev predictions, aligned with the dev examples.
#[derive(Debug, Clone)]
pub struct MemberPredictions {
    pub id: String,
    pub preds: Vec<Prediction>,
}

fn lp_indices(dev: &[QEExample]) -> BTreeMap<String, Vec<usize>> {
    let mut by_lp: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in dev.iter().enumerate() {
        by_lp.entry(ex.lp.clone()).or_default().push(i);
    }
    by_lp
}

/// Dev objective of a candidate: Spearman for the scores strategy, micro
/// MCC for logits/tags. `None` when undefined.
fn eval_candidate(
    strategy: Strategy,
    members: &[MemberPredictions],
    dev: &[QEExample],
    idx: &[usize],
    weights: &[f64],
    alpha: f64,
) -> Result<Option<f64>> {
    match strategy {
        Strategy::Scores | Strategy::BestOnly => {
            let mut pred = Vec::with_capacity(idx.len());
            let mut gold = Vec::with_capacity(idx.len());
            for &i in idx {
                let scores: Vec<f64> = members.iter().map(|m| m.preds[i].sentence_score).collect();
                pred.push(ensemble_scores(&scores, weights)?);
                gold.push(dev[i].sentence_score);
            }
            if pred.len() < 2 {
                return Ok(None);
            }
            let s = metrics::spearman(&pred, &gold);
            Ok(s.is_finite().then_some(s))
        }
        Strategy::Logits => {
            let mut pred_tags = Vec::new();
            let mut gold_tags = Vec::new();
            for &i in idx {
                let gold = dev[i].word_tags.as_ref().ok_or_else(|| {
                    KiwiError::Contract("logit search needs gold tags on dev".into())
                })?;
                let rows: Vec<&[[f64; 2]]> =
                    members.iter().map(|m| m.preds[i].word_logits.as_slice()).collect();
                let (_, tags) = ensemble_logits(&rows, weights, DEFAULT_TAG_THRESHOLD)?;
                pred_tags.extend(tags);
                gold_tags.extend_from_slice(gold);
            }
            if gold_tags.is_empty() {
                return Ok(None);
            }
            let m = metrics::mcc(&pred_tags, &gold_tags)?;
            Ok(m.is_finite().then_some(m))
        }
        Strategy::Tags => {
            let mut pred_tags = Vec::new();
            let mut gold_tags = Vec::new();
            for &i in idx {
                let gold = dev[i].word_tags.as_ref().ok_or_else(|| {
                    KiwiError::Contract("tag search needs gold tags on dev".into())
                })?;
                let rows: Vec<&[Tag]> =
                    members.iter().map(|m| m.preds[i].word_tags.as_slice()).collect();
                pred_tags.extend(ensemble_tags(&rows, weights, alpha)?);
                gold_tags.extend_from_slice(gold);
            }
            if gold_tags.is_empty() {
                return Ok(None);
            }
            let m = metrics::mcc(&pred_tags, &gold_tags)?;
            Ok(m.is_finite().then_some(m))
        }
    }
}

const WEIGHT_GRID: [f64; 9] = [0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0];
const ALPHA_GRID: [f64; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
const COORDINATE_SWEEPS: usize = 2;

/// Searches per-LP weights (and alpha for the tags strategy) maximizing the
/// dev objective: every single member is evaluated first, then `budget`
/// random samples in `[0,1]^M`, then two coordinate-descent sweeps. With a
/// zero budget (or when nothing beats the singles) the result is the
/// best-only choice for that LP.
pub fn search_weights(
    members: &[MemberPredictions],
    dev: &[QEExample],
    strategy: Strategy,
    budget: usize,
    seed: u64,
) -> Result<EnsembleSpec> {
    if members.is_empty() {
        return Err(KiwiError::Contract("search_weights: no members".into()));
    }
    if dev.is_empty() {
        return Err(KiwiError::Contract("search_weights: empty dev set".into()));
    }
    for m in members {
        if m.preds.len() != dev.len() {
            return Err(KiwiError::Contract(format!(
                "member {} has {} predictions for {} dev examples",
                m.id,
                m.preds.len(),
                dev.len()
            )));
        }
    }
    let n = members.len();
    let mut per_lp = BTreeMap::new();
    for (lp, idx) in lp_indices(dev) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(&lp));
        let mut best: Option<(f64, Vec<f64>, f64)> = None;
        fn consider_into(
            best: &mut Option<(f64, Vec<f64>, f64)>,
            value: Option<f64>,
            weights: &[f64],
            alpha: f64,
        ) {
            if let Some(v) = value {
                if best.as_ref().is_none_or(|(bv, _, _)| v > *bv) {
                    *best = Some((v, weights.to_vec(), alpha));
                }
            }
        }

        // Single members; establishes the fallback guarantee.
        for i in 0..n {
            let mut w = vec![0.0; n];
            w[i] = 1.0;
            let v = eval_candidate(strategy, members, dev, &idx, &w, 1.0)?;
            consider_into(&mut best, v, &w, 1.0);
        }

        let searching = !matches!(strategy, Strategy::BestOnly) && budget > 0 && n > 1;
        if searching {
            let uniform = vec![1.0; n];
            let v = eval_candidate(strategy, members, dev, &idx, &uniform, 1.0)?;
            consider_into(&mut best, v, &uniform, 1.0);

            for _ in 0..budget {
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
                if w.iter().sum::<f64>() <= 0.0 {
                    continue;
                }
                let alpha = if matches!(strategy, Strategy::Tags) {
                    rng.random_range(0.5..4.0)
                } else {
                    1.0
                };
                let v = eval_candidate(strategy, members, dev, &idx, &w, alpha)?;
                consider_into(&mut best, v, &w, alpha);
            }

            for _ in 0..COORDINATE_SWEEPS {
                let (_, mut w, mut alpha) = best.clone().expect("singles were evaluated");
                for i in 0..n {
                    for &g in &WEIGHT_GRID {
                        let mut cand = w.clone();
                        cand[i] = g;
                        if cand.iter().sum::<f64>() <= 0.0 {
                            continue;
                        }
                        let v = eval_candidate(strategy, members, dev, &idx, &cand, alpha)?;
                        consider_into(&mut best, v, &cand, alpha);
                    }
                    w = best.as_ref().unwrap().1.clone();
                    alpha = best.as_ref().unwrap().2;
                }
                if matches!(strategy, Strategy::Tags) {
                    for &a in &ALPHA_GRID {
                        let v = eval_candidate(strategy, members, dev, &idx, &w, a)?;
                        consider_into(&mut best, v, &w, a);
                    }
                }
            }
        }

        let (value, weights, alpha) = best.ok_or_else(|| {
            KiwiError::Contract(format!("no defined dev objective for LP {lp}"))
        })?;
        per_lp.insert(
            lp,
            LpWeights {
                weights,
                alpha,
                dev_metric: Some(value),
            },
        );
    }

    Ok(EnsembleSpec {
        strategy,
        members: members.iter().map(|m| m.id.clone()).collect(),
        per_lp,
        default: LpWeights::uniform(n),
    })
}

fn fxhash(s: &str) -> u64 {
    // Small deterministic string hash for per-LP RNG streams.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Applies a spec to member predictions: combined sentence scores plus
/// combined word tags where the strategy produces them.
pub struct CombinedPredictions {
    pub scores: Vec<f64>,
    pub tags: Vec<Vec<Tag>>,
}

pub fn apply_ensemble(
    spec: &EnsembleSpec,
    members: &[MemberPredictions],
    examples: &[QEExample],
    threshold: f64,
) -> Result<CombinedPredictions> {
    if members.len() != spec.members.len() {
        return Err(KiwiError::Contract(format!(
            "spec lists {} members but {} given",
            spec.members.len(),
            members.len()
        )));
    }
    for m in members {
        if m.preds.len() != examples.len() {
            return Err(KiwiError::Contract(format!(
                "member {} has {} predictions for {} examples",
                m.id,
                m.preds.len(),
                examples.len()
            )));
        }
    }
    let mut scores = Vec::with_capacity(examples.len());
    let mut tags = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let lw = spec.weights_for(&ex.lp);
        let member_scores: Vec<f64> = members.iter().map(|m| m.preds[i].sentence_score).collect();
        scores.push(ensemble_scores(&member_scores, &lw.weights)?);
        match spec.strategy {
            Strategy::Logits => {
                let rows: Vec<&[[f64; 2]]> =
                    members.iter().map(|m| m.preds[i].word_logits.as_slice()).collect();
                let (_, t) = ensemble_logits(&rows, &lw.weights, threshold)?;
                tags.push(t);
            }
            Strategy::Tags => {
                let rows: Vec<&[Tag]> =
                    members.iter().map(|m| m.preds[i].word_tags.as_slice()).collect();
                tags.push(ensemble_tags(&rows, &lw.weights, lw.alpha)?);
            }
            Strategy::BestOnly | Strategy::Scores => {
                // Word tags from the highest-weighted member.
                let best = lw
                    .weights
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                tags.push(members[best].preds[i].word_tags.clone());
            }
        }
    }
    Ok(CombinedPredictions { scores, tags })
}

// ---------------------------------------------------------------------------
// Member prediction files
// ---------------------------------------------------------------------------

/// One sentence score per line.
pub fn write_scores_file(path: &Path, scores: &[f64]) -> Result<()> {
    let mut text = String::new();
    for s in scores {
        text.push_str(&crate::data::format_score(*s));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_scores_file(path: &Path) -> Result<Vec<f64>> {
    if !path.is_file() {
        return Err(KiwiError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        out.push(line.parse::<f64>().map_err(|_| KiwiError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("bad score {line:?}"),
        })?);
    }
    Ok(out)
}

/// Space-separated OK/BAD per line, one line per sentence.
pub fn write_tags_file(path: &Path, tags: &[Vec<Tag>]) -> Result<()> {
    let mut text = String::new();
    for row in tags {
        let parts: Vec<&str> = row.iter().map(Tag::as_str).collect();
        text.push_str(&parts.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_tags_file(path: &Path) -> Result<Vec<Vec<Tag>>> {
    if !path.is_file() {
        return Err(KiwiError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row: Result<Vec<Tag>> = line.split_whitespace().map(Tag::parse).collect();
        out.push(row.map_err(|e| KiwiError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Space-separated `ok,bad` logit pairs per line, one line per sentence.
pub fn write_logits_file(path: &Path, logits: &[Vec<[f64; 2]>]) -> Result<()> {
    let mut text = String::new();
    for row in logits {
        let parts: Vec<String> = row
            .iter()
            .map(|l| {
                format!(
                    "{},{}",
                    crate::data::format_score(l[0]),
                    crate::data::format_score(l[1])
                )
            })
            .collect();
        text.push_str(&parts.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_logits_file(path: &Path) -> Result<Vec<Vec<[f64; 2]>>> {
    if !path.is_file() {
        return Err(KiwiError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut row = Vec::new();
        for pair in line.split_whitespace() {
            let (a, b) = pair.split_once(',').ok_or_else(|| KiwiError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("bad logit pair {pair:?}"),
            })?;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| KiwiError::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("bad logit {s:?}"),
                })
            };
            row.push([parse(a)?, parse(b)?]);
        }
        out.push(row);
    }
    Ok(out)
}

/// Builds member predictions from prediction files next to each member id:
/// `<id>.scores.txt`, `<id>.tags.txt`, `<id>.logits.txt` (the latter two
/// only when present).
pub fn member_from_files(dir: &Path, id: &str, n_examples: usize) -> Result<MemberPredictions> {
    let scores = read_scores_file(&dir.join(format!("{id}.scores.txt")))?;
    if scores.len() != n_examples {
        return Err(KiwiError::Contract(format!(
            "member {id}: {} scores for {n_examples} examples",
            scores.len()
        )));
    }
    let tags_path = dir.join(format!("{id}.tags.txt"));
    let tags = if tags_path.is_file() {
        Some(read_tags_file(&tags_path)?)
    } else {
        None
    };
    let logits_path = dir.join(format!("{id}.logits.txt"));
    let logits = if logits_path.is_file() {
        Some(read_logits_file(&logits_path)?)
    } else {
        None
    };
    let mut preds = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let word_logits = logits.as_ref().map(|l| l[i].clone()).unwrap_or_default();
        let word_probs = word_logits
            .iter()
            .map(|l| {
                let m = l[0].max(l[1]);
                let e0 = (l[0] - m).exp();
                let e1 = (l[1] - m).exp();
                [e0 / (e0 + e1), e1 / (e0 + e1)]
            })
            .collect();
        let word_tags = match (&tags, &logits) {
            (Some(t), _) => t[i].clone(),
            (None, Some(l)) => l[i]
                .iter()
                .map(|x| if x[1] >= x[0] { Tag::Bad } else { Tag::Ok })
                .collect(),
            (None, None) => Vec::new(),
        };
        preds.push(Prediction {
            sentence_score: scores[i],
            word_logits,
            word_probs,
            word_tags,
        });
    }
    Ok(MemberPredictions {
        id: id.to_string(),
        preds,
    })
}
