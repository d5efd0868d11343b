//! Training loop with dev-metric early stopping, plus few-shot language
//! adaptation.
//!
//! Batches are shuffled per epoch with a seeded RNG and split into a fixed
//! number of shards; each shard records its own tape and the shard gradients
//! are summed in shard order, so results do not depend on thread count.
//! A single thread applies the Adam update; dev evaluation fans out
//! read-only.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::QEExample;
use crate::error::{KiwiError, Result};
use crate::metrics;
use crate::numerics::{GradTape, Tensor};
use crate::qe_model::QEModel;

/// Fixed shard count per batch; keeps gradient summation order independent
/// of the machine's parallelism.
const BATCH_SHARDS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EarlyStopMetric {
    /// Spearman for sentence-only, MCC for word-only, mean of both for
    /// multi-task.
    Auto,
    Spearman,
    Mcc,
    Combined,
}

/// Optional target-based stopping: training stops once every provided
/// target is met on dev.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopTargets {
    pub spearman: Option<f64>,
    pub mcc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub early_stop: EarlyStopMetric,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: Option<usize>,
    pub seed: u64,
    pub stop_at: Option<StopTargets>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            early_stop: EarlyStopMetric::Auto,
            patience: None,
            seed: 7,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(KiwiError::Config("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(KiwiError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(KiwiError::Config("Adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction; moment buffers follow the model's canonical
/// parameter order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Adam {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. `grads` aligns with `QEModel::for_each_param`;
    /// a `None` slot is a zero gradient.
    pub fn step(&mut self, model: &mut QEModel, grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut i = 0;
        model.for_each_param_mut(&mut |_name, param| {
            if self.m.len() <= i {
                self.m.push(vec![0.0; param.numel()]);
                self.v.push(vec![0.0; param.numel()]);
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match &grads[i] {
                Some(g) => {
                    for ((p, mj), (vj, gj)) in param
                        .data_mut()
                        .iter_mut()
                        .zip(m.iter_mut())
                        .zip(v.iter_mut().zip(g.data()))
                    {
                        *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                        *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                        *p -= self.lr * (*mj / bc1) / ((*vj / bc2).sqrt() + self.eps);
                    }
                }
                None => {
                    // Zero gradient still decays the moments.
                    for ((p, mj), vj) in param.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mj *= self.beta1;
                        *vj *= self.beta2;
                        *p -= self.lr * (*mj / bc1) / ((*vj / bc2).sqrt() + self.eps);
                    }
                }
            }
            i += 1;
        });
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_spearman: Option<f64>,
    pub dev_mcc: Option<f64>,
    /// The early-stopping objective value for this epoch.
    pub dev_metric: Option<f64>,
    pub per_lp_spearman: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub struct TrainOutcome {
    /// The checkpoint whose dev metric was maximal (the input model if no
    /// epoch improved on it, or if training ran zero epochs).
    pub model: QEModel,
    pub history: TrainHistory,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

/// Dev-set scores of a model.
#[derive(Debug, Clone)]
pub struct DevScores {
    pub spearman: Option<f64>,
    pub mcc: Option<f64>,
    pub per_lp_spearman: BTreeMap<String, f64>,
}

fn opt(x: f64) -> Option<f64> {
    if x.is_finite() {
        Some(x)
    } else {
        None
    }
}

/// Sentence Spearman, micro token MCC, and per-LP Spearman on a dev set.
pub fn evaluate_dev(model: &QEModel, dev: &[QEExample]) -> Result<DevScores> {
    let preds = model.predict_many(dev)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.sentence_score).collect();
    let gold: Vec<f64> = dev.iter().map(|e| e.sentence_score).collect();
    let sp = if dev.len() >= 2 {
        opt(metrics::spearman(&scores, &gold))
    } else {
        None
    };

    let mut pred_tags = Vec::new();
    let mut gold_tags = Vec::new();
    for (p, e) in preds.iter().zip(dev) {
        if let Some(tags) = &e.word_tags {
            pred_tags.extend_from_slice(&p.word_tags);
            gold_tags.extend_from_slice(tags);
        }
    }
    let mcc = if gold_tags.is_empty() {
        None
    } else {
        opt(metrics::mcc(&pred_tags, &gold_tags)?)
    };

    let mut by_lp: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (p, e) in preds.iter().zip(dev) {
        let entry = by_lp.entry(&e.lp).or_default();
        entry.0.push(p.sentence_score);
        entry.1.push(e.sentence_score);
    }
    let mut per_lp = BTreeMap::new();
    for (lp, (s, g)) in by_lp {
        if s.len() >= 2 {
            if let Some(v) = opt(metrics::spearman(&s, &g)) {
                per_lp.insert(lp.to_string(), v);
            }
        }
    }
    Ok(DevScores {
        spearman: sp,
        mcc,
        per_lp_spearman: per_lp,
    })
}

fn resolve_metric(metric: EarlyStopMetric, model: &QEModel) -> EarlyStopMetric {
    match metric {
        EarlyStopMetric::Auto => {
            let cfg = &model.loss_cfg;
            if cfg.lambda_sent > 0.0 && cfg.lambda_word > 0.0 {
                EarlyStopMetric::Combined
            } else if cfg.lambda_sent > 0.0 {
                EarlyStopMetric::Spearman
            } else {
                EarlyStopMetric::Mcc
            }
        }
        m => m,
    }
}

fn objective(metric: EarlyStopMetric, scores: &DevScores) -> Option<f64> {
    match metric {
        EarlyStopMetric::Spearman => scores.spearman,
        EarlyStopMetric::Mcc => scores.mcc,
        EarlyStopMetric::Combined => match (scores.spearman, scores.mcc) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        },
        EarlyStopMetric::Auto => unreachable!("resolved before use"),
    }
}

/// One gradient pass over a batch: shard the examples, record each shard on
/// its own tape, sum shard gradients in shard order. Returns the summed
/// (unscaled) loss and gradients.
fn batch_gradients(model: &QEModel, batch: &[&QEExample]) -> Result<(f64, Vec<Option<Tensor>>)> {
    let shard_size = batch.len().div_ceil(BATCH_SHARDS);
    let shards: Vec<&[&QEExample]> = batch.chunks(shard_size).collect();
    let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = shards
        .par_iter()
        .map(|shard| {
            let mut tape = GradTape::new();
            let vars = model.register(&mut tape);
            let mut total = None;
            for ex in shard.iter() {
                let tok = model.tokenize(ex)?;
                let fwd = model.forward_on_tape(&mut tape, &vars, tok)?;
                let loss = model.loss_on_tape(&mut tape, &fwd, ex)?;
                total = Some(match total {
                    Some(t) => tape.add(t, loss)?,
                    None => loss,
                });
            }
            let total = total.expect("non-empty shard");
            let loss_value = tape.value(total).as_scalar()?;
            let mut grads = tape.backward(total)?;
            let mut flat = Vec::new();
            QEModel::for_each_var(&vars, &mut |v| flat.push(grads.take(v)));
            Ok((loss_value, flat))
        })
        .collect();

    let mut loss_sum = 0.0;
    let mut acc: Option<Vec<Option<Tensor>>> = None;
    for r in results {
        let (l, flat) = r?;
        loss_sum += l;
        match &mut acc {
            None => acc = Some(flat),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(flat) {
                    match (a.as_mut(), b) {
                        (Some(x), Some(y)) => {
                            for (xi, yi) in x.data_mut().iter_mut().zip(y.data()) {
                                *xi += yi;
                            }
                        }
                        (None, Some(y)) => *a = Some(y),
                        _ => {}
                    }
                }
            }
        }
    }
    Ok((loss_sum, acc.expect("non-empty batch")))
}

/// Trains for up to `cfg.epochs` epochs and returns the best-dev checkpoint
/// with the per-epoch history. Deterministic given seed, data and config.
pub fn train(
    model: QEModel,
    train_set: &[QEExample],
    dev_set: &[QEExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            history: TrainHistory::default(),
            best_epoch: None,
            best_metric: None,
        });
    }
    if train_set.is_empty() {
        return Err(KiwiError::Contract("empty training set".into()));
    }
    if dev_set.is_empty() {
        return Err(KiwiError::Contract("empty dev set".into()));
    }
    if model.loss_cfg.lambda_word > 0.0 {
        if let Some(bad) = train_set.iter().position(|e| e.word_tags.is_none()) {
            return Err(KiwiError::Contract(format!(
                "lambda_word > 0 but training example {bad} has no tags"
            )));
        }
    }

    let metric = resolve_metric(cfg.early_stop, &model);
    let mut current = model;
    let mut best = current.clone();
    let mut best_metric = None;
    let mut best_epoch = None;
    let mut optimizer = Adam::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&QEExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss_sum, mut grads) = batch_gradients(&current, &batch)?;
            if !loss_sum.is_finite() {
                return Err(KiwiError::Divergence(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                for x in g.data_mut() {
                    *x *= inv;
                }
            }
            optimizer.step(&mut current, &grads);
            loss_total += loss_sum;
        }
        let train_loss = loss_total / train_set.len() as f64;

        let scores = evaluate_dev(&current, dev_set)?;
        let value = objective(metric, &scores);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_spearman: scores.spearman,
            dev_mcc: scores.mcc,
            dev_metric: value,
            per_lp_spearman: scores.per_lp_spearman.clone(),
        });

        let improved = match (value, best_metric) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = current.clone();
            best_metric = value;
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }

        if let Some(targets) = &cfg.stop_at {
            let sp_ok = targets
                .spearman
                .is_none_or(|t| scores.spearman.is_some_and(|v| v >= t));
            let mcc_ok = targets.mcc.is_none_or(|t| scores.mcc.is_some_and(|v| v >= t));
            if sp_ok && mcc_ok {
                break;
            }
        }
        if let Some(p) = cfg.patience {
            if stale > p {
                break;
            }
        }
    }

    Ok(TrainOutcome {
        model: best,
        history,
        best_epoch,
        best_metric,
    })
}

/// Few-shot adaptation report: per-LP sentence Spearman before and after,
/// with guard-band violations listed (reported, not failed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewshotReport {
    pub before: BTreeMap<String, f64>,
    pub after: BTreeMap<String, f64>,
    pub guard_band: f64,
    pub violations: Vec<String>,
    pub history: TrainHistory,
}

/// Continues training a checkpoint on a new language pair's adaptation set
/// (typically the fine-tuning half of `split_halves`), measuring the new LP
/// on its validation half and every other LP before and after. An empty
/// adaptation set returns the checkpoint unchanged.
pub fn finetune_fewshot(
    model: QEModel,
    adapt: &[QEExample],
    adapt_dev: &[QEExample],
    other_lps: &BTreeMap<String, Vec<QEExample>>,
    cfg: &TrainConfig,
    guard_band: f64,
) -> Result<(QEModel, FewshotReport)> {
    let mut eval_sets: BTreeMap<String, &[QEExample]> = BTreeMap::new();
    if !adapt_dev.is_empty() {
        let lp = adapt_dev[0].lp.clone();
        eval_sets.insert(lp, adapt_dev);
    }
    for (lp, set) in other_lps {
        eval_sets.insert(lp.clone(), set);
    }

    let measure = |m: &QEModel| -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        for (lp, set) in &eval_sets {
            let scores = evaluate_dev(m, set)?;
            if let Some(v) = scores.spearman {
                out.insert(lp.clone(), v);
            }
        }
        Ok(out)
    };

    let before = measure(&model)?;
    if adapt.is_empty() {
        let report = FewshotReport {
            before: before.clone(),
            after: before,
            guard_band,
            violations: Vec::new(),
            history: TrainHistory::default(),
        };
        return Ok((model, report));
    }

    let outcome = train(model, adapt, adapt_dev, cfg)?;
    let after = measure(&outcome.model)?;
    let mut violations = Vec::new();
    for lp in other_lps.keys() {
        if let (Some(&b), Some(&a)) = (before.get(lp), after.get(lp)) {
            if a < b - guard_band {
                violations.push(lp.clone());
            }
        }
    }
    let report = FewshotReport {
        before,
        after,
        guard_band,
        violations,
        history: outcome.history,
    };
    Ok((outcome.model, report))
}
