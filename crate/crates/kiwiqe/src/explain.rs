//! Unsupervised word-level explainers over encoder traces.
//!
//! A key token's relevance under head (l, h) is its attention mass scaled by
//! the l2-norm of its value vector (Attn x Norm) or of the value vector's
//! gradient with respect to the predicted sentence score (Attn x GradNorm).
//! Scores are restricted to the target span, summed over word pieces, and
//! can be combined across heads: ranked by dev performance, averaged after
//! per-sentence min-max normalization, or picked for zero-shot LPs by
//! cross-LP frequency.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{QEExample, Tag, TokenizedInput};
use crate::encoder::EncoderTrace;
use crate::error::{KiwiError, Result};
use crate::metrics::{self, Aggregation};
use crate::numerics::{GradTape, Tensor};
use crate::qe_model::QEModel;

// The head-mix forward lives with the other mix machinery; it is the same
// drop-in replacement for the scalar mix that explanation-oriented models
// train with.
pub use crate::qe_model::{head_mix as head_mix_forward, HeadMixParams, HeadMixVars};

/// 1-based (layer, head) address of an attention head; layer 0 is the
/// embedding layer and has no heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Provenance {
    Head(HeadId),
    Ensemble(Vec<HeadId>),
}

/// Relevance scores for one sentence: per target subword and aggregated per
/// target word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Explanation {
    pub token_scores: Vec<f64>,
    pub word_scores: Vec<f64>,
    /// Piece span of each target word, local to the target span.
    pub word_spans: Vec<(usize, usize)>,
    pub provenance: Provenance,
}

/// How attention columns are pooled over query rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryAggregation {
    /// Mean over all query rows.
    #[default]
    MeanRows,
    /// Only the `[cls]` query row.
    ClsRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainMethod {
    AttnNorm,
    AttnGradNorm,
}

/// One sentence's recorded forward pass, with the value-vector gradients of
/// the predicted sentence score when requested.
pub struct SentenceTrace {
    pub tape: GradTape,
    pub trace: EncoderTrace,
    pub tokenized: TokenizedInput,
    pub yhat: f64,
    /// `value_grads[l][h]`: gradient of yhat w.r.t. the value vectors of
    /// attention layer `l+1`, head `h+1`. Empty unless built with gradients.
    pub value_grads: Vec<Vec<Tensor>>,
}

impl SentenceTrace {
    /// Runs the model forward on one example; with `with_grads` the
    /// sentence score is differentiated and per-head value gradients are
    /// captured. A head the score does not depend on gets zero gradients.
    pub fn build(model: &QEModel, example: &QEExample, with_grads: bool) -> Result<SentenceTrace> {
        let tokenized = model.tokenize(example)?;
        let mut tape = GradTape::new();
        let vars = model.register(&mut tape);
        let fwd = model.forward_on_tape(&mut tape, &vars, tokenized)?;
        let yhat = tape.value(fwd.yhat).as_scalar()?;
        let mut value_grads = Vec::new();
        if with_grads {
            let mut grads = tape.backward(fwd.yhat)?;
            for layer in &fwd.trace.values {
                let mut row = Vec::with_capacity(layer.len());
                for &v in layer {
                    let shape = tape.value(v).shape().to_vec();
                    row.push(
                        grads
                            .take(v)
                            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1])),
                    );
                }
                value_grads.push(row);
            }
        }
        Ok(SentenceTrace {
            tape,
            trace: fwd.trace,
            tokenized: fwd.tokenized,
            yhat,
            value_grads,
        })
    }

    fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer == 0
            || head.layer > self.trace.num_layers()
            || head.head == 0
            || head.head > self.trace.num_heads()
        {
            return Err(KiwiError::Contract(format!(
                "head {head} out of range for {} layers x {} heads",
                self.trace.num_layers(),
                self.trace.num_heads()
            )));
        }
        Ok(())
    }
}

fn scores_from_attention(
    st: &SentenceTrace,
    head: HeadId,
    norms: &Tensor,
    agg: QueryAggregation,
) -> Explanation {
    let a = st.trace.attention(&st.tape, head.layer, head.head);
    let (start, end) = st.tokenized.target_span;
    let n_rows = a.rows();
    let mut token_scores = Vec::with_capacity(end - start);
    for j in start..end {
        let mass = match agg {
            QueryAggregation::MeanRows => {
                (0..n_rows).map(|i| a.at(i, j)).sum::<f64>() / n_rows as f64
            }
            QueryAggregation::ClsRow => a.at(st.tokenized.cls_index, j),
        };
        token_scores.push(mass * norms.data()[j]);
    }
    let word_spans = st.tokenized.local_word_spans();
    let first_piece: Vec<usize> = st
        .tokenized
        .first_piece_index
        .iter()
        .map(|&i| i - start)
        .collect();
    let word_scores =
        aggregate_subwords(&token_scores, &first_piece, &word_spans).expect("spans cover target");
    Explanation {
        token_scores,
        word_scores,
        word_spans,
        provenance: Provenance::Head(head),
    }
}

/// Attention mass scaled by value-vector norms, target span only.
pub fn attn_norm_explain(
    st: &SentenceTrace,
    head: HeadId,
    agg: QueryAggregation,
) -> Result<Explanation> {
    st.check_head(head)?;
    let v = st.trace.value_vectors(&st.tape, head.layer, head.head);
    let norms = crate::numerics::l2_norm_rows(v);
    Ok(scores_from_attention(st, head, &norms, agg))
}

/// Attention mass scaled by the norms of the value-vector gradients of the
/// predicted sentence score.
pub fn attn_gradnorm_explain(
    st: &SentenceTrace,
    head: HeadId,
    agg: QueryAggregation,
) -> Result<Explanation> {
    st.check_head(head)?;
    if st.value_grads.is_empty() {
        return Err(KiwiError::Contract(
            "sentence trace was built without gradients".into(),
        ));
    }
    let g = &st.value_grads[head.layer - 1][head.head - 1];
    let norms = crate::numerics::l2_norm_rows(g);
    Ok(scores_from_attention(st, head, &norms, agg))
}

pub fn explain_head(
    st: &SentenceTrace,
    head: HeadId,
    method: ExplainMethod,
    agg: QueryAggregation,
) -> Result<Explanation> {
    match method {
        ExplainMethod::AttnNorm => attn_norm_explain(st, head, agg),
        ExplainMethod::AttnGradNorm => attn_gradnorm_explain(st, head, agg),
    }
}

/// Word score = sum of its pieces' scores. The spans must tile the token
/// range exactly.
pub fn aggregate_subwords(
    token_scores: &[f64],
    first_piece: &[usize],
    word_spans: &[(usize, usize)],
) -> Result<Vec<f64>> {
    if first_piece.len() != word_spans.len() {
        return Err(KiwiError::Contract(format!(
            "{} first-piece indices vs {} word spans",
            first_piece.len(),
            word_spans.len()
        )));
    }
    let mut expect = 0usize;
    for (w, &(s, e)) in word_spans.iter().enumerate() {
        if s != expect || e <= s {
            return Err(KiwiError::Contract(format!(
                "word {w} span ({s},{e}) leaves token {expect} uncovered"
            )));
        }
        if first_piece[w] != s {
            return Err(KiwiError::Contract(format!(
                "word {w} first piece {} does not open its span ({s},{e})",
                first_piece[w]
            )));
        }
        expect = e;
    }
    if expect != token_scores.len() {
        return Err(KiwiError::Contract(format!(
            "spans cover {expect} tokens but {} scores given",
            token_scores.len()
        )));
    }
    Ok(word_spans
        .iter()
        .map(|&(s, e)| token_scores[s..e].iter().sum())
        .collect())
}

/// Min-max normalizes to [0,1]; a constant vector maps to zeros.
fn min_max(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max - min).is_normal() {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / (max - min)).collect()
}

/// Per-token arithmetic mean of min-max-normalized member scores. Members
/// must describe the same tokenization.
pub fn ensemble_explanations(members: &[Explanation]) -> Result<Explanation> {
    let first = members
        .first()
        .ok_or_else(|| KiwiError::Contract("empty explanation ensemble".into()))?;
    let n = first.token_scores.len();
    for m in members {
        if m.token_scores.len() != n || m.word_spans != first.word_spans {
            return Err(KiwiError::Contract(format!(
                "member token counts differ: {} vs {n}",
                m.token_scores.len()
            )));
        }
    }
    let mut token_scores = vec![0.0; n];
    for m in members {
        for (acc, s) in token_scores.iter_mut().zip(min_max(&m.token_scores)) {
            *acc += s;
        }
    }
    for s in &mut token_scores {
        *s /= members.len() as f64;
    }
    let first_piece: Vec<usize> = first.word_spans.iter().map(|&(s, _)| s).collect();
    let word_scores = aggregate_subwords(&token_scores, &first_piece, &first.word_spans)?;
    let mut heads = Vec::new();
    for m in members {
        match &m.provenance {
            Provenance::Head(h) => heads.push(*h),
            Provenance::Ensemble(hs) => heads.extend(hs.iter().copied()),
        }
    }
    Ok(Explanation {
        token_scores,
        word_scores,
        word_spans: first.word_spans.clone(),
        provenance: Provenance::Ensemble(heads),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadScore {
    pub head: HeadId,
    /// Mean of AUC/AP/R@K over error-containing dev sentences.
    pub score: f64,
}

/// Scores every (layer, head) explainer on a tagged dev set and returns all
/// of them, best first; ties break on (layer, head) order. Dev sentences
/// without errors are skipped by the metrics, so at least one sentence must
/// contain a BAD tag.
pub fn rank_heads(
    model: &QEModel,
    dev: &[QEExample],
    method: ExplainMethod,
    agg: QueryAggregation,
) -> Result<Vec<HeadScore>> {
    let tagged: Vec<&QEExample> = dev.iter().filter(|e| e.word_tags.is_some()).collect();
    if !tagged
        .iter()
        .any(|e| e.word_tags.as_ref().is_some_and(|t| t.iter().any(Tag::is_bad)))
    {
        return Err(KiwiError::Contract(
            "rank_heads needs at least one error-containing dev sentence".into(),
        ));
    }
    let with_grads = matches!(method, ExplainMethod::AttnGradNorm);
    // Per sentence, word scores for every head; one trace serves all heads.
    let per_sentence: Vec<Result<Vec<(Vec<f64>, Vec<Tag>)>>> = tagged
        .par_iter()
        .map(|ex| {
            let st = SentenceTrace::build(model, ex, with_grads)?;
            let tags = ex.word_tags.clone().expect("filtered to tagged");
            let mut rows = Vec::new();
            for layer in 1..=st.trace.num_layers() {
                for head in 1..=st.trace.num_heads() {
                    let e = explain_head(&st, HeadId { layer, head }, method, agg)?;
                    rows.push((e.word_scores, tags.clone()));
                }
            }
            Ok(rows)
        })
        .collect();

    let num_layers = model.encoder.config.num_layers;
    let num_heads = model.encoder.config.num_heads;
    let mut per_head: Vec<Vec<(Vec<f64>, Vec<Tag>)>> = vec![Vec::new(); num_layers * num_heads];
    for rows in per_sentence {
        for (i, row) in rows?.into_iter().enumerate() {
            per_head[i].push(row);
        }
    }

    let mut scored = Vec::with_capacity(per_head.len());
    for (i, sentences) in per_head.into_iter().enumerate() {
        let head = HeadId {
            layer: i / num_heads + 1,
            head: i % num_heads + 1,
        };
        let s = metrics::corpus_explainability(&sentences, Aggregation::Macro);
        let score = s.combined().ok_or_else(|| {
            KiwiError::Contract("dev set has no sentence usable for AUC/AP/R@K".into())
        })?;
        scored.push(HeadScore { head, score });
    }
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.head.cmp(&b.head))
    });
    Ok(scored)
}

/// Picks `k` heads for a zero-shot LP: the heads most frequent among the
/// given per-LP selections, ties broken by mean dev score then (layer,
/// head) order.
pub fn select_heads_zero_shot(
    per_lp: &BTreeMap<String, Vec<HeadScore>>,
    k: usize,
) -> Result<Vec<HeadId>> {
    if per_lp.is_empty() {
        return Err(KiwiError::Contract("no per-LP head selections given".into()));
    }
    let mut stats: BTreeMap<HeadId, (usize, f64)> = BTreeMap::new();
    for heads in per_lp.values() {
        for hs in heads {
            let e = stats.entry(hs.head).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += hs.score;
        }
    }
    let mut entries: Vec<(HeadId, usize, f64)> = stats
        .into_iter()
        .map(|(h, (count, sum))| (h, count, sum / count as f64))
        .collect();
    entries.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.2.partial_cmp(&a.2).unwrap())
            .then(a.0.cmp(&b.0))
    });
    Ok(entries.into_iter().take(k).map(|(h, _, _)| h).collect())
}

/// Shared-task style output: one line per sentence, space-separated word
/// scores.
pub fn write_scores_file(path: &Path, sentences: &[Vec<f64>]) -> Result<()> {
    let mut text = String::new();
    for scores in sentences {
        let parts: Vec<String> = scores.iter().map(|s| crate::data::format_score(*s)).collect();
        text.push_str(&parts.join(" "));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// JSON descriptor of an explanation ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDescriptor {
    pub method: ExplainMethod,
    pub aggregation: QueryAggregation,
    pub members: Vec<HeadId>,
}

impl EnsembleDescriptor {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EnsembleDescriptor> {
        if !path.is_file() {
            return Err(KiwiError::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::numerics::SimplexTransform;
    use crate::qe_model::{InputOptions, LossConfig, MixKind};
    use crate::synthetic::{SyntheticConfig, SyntheticTask};

    /// Hand-built one-head trace over two target tokens.
    fn fake_trace(attn: Tensor, values: Tensor) -> SentenceTrace {
        let mut tape = GradTape::new();
        let n = attn.rows();
        let a = tape.leaf(attn);
        let v = tape.leaf(values.clone());
        let p = tape.leaf(Tensor::zeros(n, 1));
        let h0 = tape.leaf(Tensor::zeros(n, 1));
        let h1 = tape.leaf(Tensor::zeros(n, 1));
        let trace = EncoderTrace {
            hidden: vec![h0, h1],
            attn: vec![vec![a]],
            values: vec![vec![v]],
            head_outputs: vec![vec![p]],
            n_tokens: n,
        };
        let tokenized = TokenizedInput {
            token_ids: vec![0; n],
            first_piece_index: (0..n).collect(),
            target_word_spans: (0..n).map(|i| (i, i + 1)).collect(),
            cls_index: 0,
            target_span: (0, n),
            source_span: (n, n),
            reference_span: None,
        };
        SentenceTrace {
            tape,
            trace,
            tokenized,
            yhat: 0.0,
            value_grads: Vec::new(),
        }
    }

    #[test]
    fn attn_norm_uniform_attention_unit_values_constant() {
        let attn = Tensor::matrix(2, 2, vec![0.5; 4]).unwrap();
        let values = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let st = fake_trace(attn, values);
        let e = attn_norm_explain(&st, HeadId { layer: 1, head: 1 }, QueryAggregation::MeanRows)
            .unwrap();
        assert_eq!(e.token_scores, vec![0.5, 0.5]);
    }

    #[test]
    fn attn_norm_hand_case() {
        // A = I, value norms [2, 3]; column means are [0.5, 0.5].
        let attn = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let values = Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        let st = fake_trace(attn, values);
        let e = attn_norm_explain(&st, HeadId { layer: 1, head: 1 }, QueryAggregation::MeanRows)
            .unwrap();
        assert_eq!(e.token_scores, vec![1.0, 1.5]);
        assert_eq!(e.word_scores, vec![1.0, 1.5]);
    }

    #[test]
    fn attn_norm_zero_values_zero_scores() {
        let attn = Tensor::matrix(2, 2, vec![0.5; 4]).unwrap();
        let st = fake_trace(attn, Tensor::zeros(2, 2));
        let e = attn_norm_explain(&st, HeadId { layer: 1, head: 1 }, QueryAggregation::MeanRows)
            .unwrap();
        assert_eq!(e.token_scores, vec![0.0, 0.0]);
    }

    #[test]
    fn cls_row_aggregation_uses_first_row_only() {
        let attn = Tensor::matrix(2, 2, vec![0.9, 0.1, 0.5, 0.5]).unwrap();
        let values = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let st = fake_trace(attn, values);
        let e = attn_norm_explain(&st, HeadId { layer: 1, head: 1 }, QueryAggregation::ClsRow)
            .unwrap();
        assert_eq!(e.token_scores, vec![0.9, 0.1]);
    }

    #[test]
    fn gradnorm_requires_gradients() {
        let attn = Tensor::matrix(2, 2, vec![0.5; 4]).unwrap();
        let st = fake_trace(attn, Tensor::zeros(2, 2));
        let err = attn_gradnorm_explain(&st, HeadId { layer: 1, head: 1 }, QueryAggregation::MeanRows);
        assert!(err.is_err());
    }

    fn trained_toy_model() -> (QEModel, Vec<QEExample>) {
        let task = SyntheticTask::new(SyntheticConfig {
            num_lps: 1,
            words_per_lp: 12,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let vocab = task.vocab();
        let config = EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            ffn_dim: 16,
            vocab_size: 0,
            max_positions: 64,
            seed: 13,
        };
        let model = QEModel::new(
            config,
            MixKind::Scalar,
            SimplexTransform::Softmax,
            LossConfig {
                lambda_sent: 1.0,
                lambda_word: 0.0,
                class_weights: (1.0, 1.0),
            },
            vocab,
            InputOptions::default(),
        )
        .unwrap();
        let dev = task.generate(0, 42, 12).unwrap();
        (model, dev)
    }

    #[test]
    fn dead_head_gets_zero_gradnorm_scores() {
        let (mut model, dev) = trained_toy_model();
        // Zero the whole sentence head: yhat is constant, every gradient dies.
        model.sent_head.w1 = Tensor::zeros(16, 16);
        model.sent_head.w2 = Tensor::zeros(16, 1);
        let st = SentenceTrace::build(&model, &dev[0], true).unwrap();
        let e = attn_gradnorm_explain(&st, HeadId { layer: 1, head: 1 }, QueryAggregation::MeanRows)
            .unwrap();
        assert!(e.token_scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn gradnorm_scales_homogeneously_with_final_weight() {
        let (model, dev) = trained_toy_model();
        let mut scaled = model.clone();
        let c = 3.0;
        for x in scaled.sent_head.w2.data_mut() {
            *x *= c;
        }
        for x in scaled.sent_head.b2.data_mut() {
            *x *= c;
        }
        let head = HeadId { layer: 2, head: 1 };
        let st1 = SentenceTrace::build(&model, &dev[0], true).unwrap();
        let st2 = SentenceTrace::build(&scaled, &dev[0], true).unwrap();
        let e1 = attn_gradnorm_explain(&st1, head, QueryAggregation::MeanRows).unwrap();
        let e2 = attn_gradnorm_explain(&st2, head, QueryAggregation::MeanRows).unwrap();
        for (a, b) in e1.token_scores.iter().zip(&e2.token_scores) {
            assert!((b - c * a).abs() < 1e-9, "{b} vs {}", c * a);
        }
        // Rankings unchanged.
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
            idx
        };
        assert_eq!(order(&e1.token_scores), order(&e2.token_scores));
    }

    #[test]
    fn gradnorm_matches_analytic_gradient_on_linear_graph() {
        // yhat = sum((A V) w): dyhat/dV = A^T 1 w^T, so row j of the gradient
        // is (sum_i A[i,j]) * w, with norm colsum_j * |w|.
        let mut tape = GradTape::new();
        let a = Tensor::matrix(2, 2, vec![0.7, 0.3, 0.2, 0.8]).unwrap();
        let va = tape.constant(a.clone());
        let v = tape.leaf(Tensor::matrix(2, 2, vec![0.1, -0.4, 0.5, 0.9]).unwrap());
        let w = vec![2.0, -1.0];
        let o = tape.matmul(va, v).unwrap();
        let yhat = tape.weighted_sum(o, vec![w[0], w[1], w[0], w[1]]).unwrap();
        let grads = tape.backward(yhat).unwrap();
        let g = grads.get(v).unwrap();
        let wnorm = (w[0] * w[0] + w[1] * w[1]).sqrt();
        for j in 0..2 {
            let colsum = a.at(0, j) + a.at(1, j);
            let grad_norm: f64 = g.row(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((grad_norm - colsum * wnorm).abs() < 1e-9);
        }
    }

    #[test]
    fn subword_aggregation_cases() {
        // One piece per word: identity.
        let scores = [0.1, 0.2, 0.3];
        let out = aggregate_subwords(&scores, &[0, 1, 2], &[(0, 1), (1, 2), (2, 3)]).unwrap();
        assert_eq!(out, vec![0.1, 0.2, 0.3]);

        // Two pieces summed.
        let out = aggregate_subwords(&[0.2, 0.3], &[0], &[(0, 2)]).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15);

        // Empty target.
        let out = aggregate_subwords(&[], &[], &[]).unwrap();
        assert!(out.is_empty());

        // Uncovered token.
        assert!(aggregate_subwords(&[0.1, 0.2], &[0], &[(0, 1)]).is_err());
    }

    #[test]
    fn ensemble_single_member_is_normalized_identity() {
        let e = Explanation {
            token_scores: vec![2.0, 4.0, 3.0],
            word_scores: vec![2.0, 4.0, 3.0],
            word_spans: vec![(0, 1), (1, 2), (2, 3)],
            provenance: Provenance::Head(HeadId { layer: 1, head: 1 }),
        };
        let out = ensemble_explanations(std::slice::from_ref(&e)).unwrap();
        assert_eq!(out.token_scores, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn ensemble_mean_and_rescale_invariance() {
        let mk = |scores: Vec<f64>| Explanation {
            token_scores: scores.clone(),
            word_scores: scores,
            word_spans: vec![(0, 1), (1, 2)],
            provenance: Provenance::Head(HeadId { layer: 1, head: 1 }),
        };
        let out = ensemble_explanations(&[mk(vec![0.0, 1.0]), mk(vec![1.0, 0.0])]).unwrap();
        assert_eq!(out.token_scores, vec![0.5, 0.5]);

        // Positive rescaling of one member leaves the ensemble unchanged.
        let a = ensemble_explanations(&[mk(vec![0.1, 0.9]), mk(vec![0.7, 0.2])]).unwrap();
        let b = ensemble_explanations(&[mk(vec![0.5, 4.5]), mk(vec![0.7, 0.2])]).unwrap();
        assert_eq!(a.token_scores, b.token_scores);
    }

    #[test]
    fn ensemble_is_permutation_invariant() {
        let mk = |scores: Vec<f64>, h: usize| Explanation {
            token_scores: scores.clone(),
            word_scores: scores,
            word_spans: vec![(0, 1), (1, 2), (2, 3)],
            provenance: Provenance::Head(HeadId { layer: 1, head: h }),
        };
        let m1 = mk(vec![0.3, 0.9, 0.1], 1);
        let m2 = mk(vec![0.5, 0.1, 0.8], 2);
        let m3 = mk(vec![0.2, 0.2, 0.7], 3);
        let a = ensemble_explanations(&[m1.clone(), m2.clone(), m3.clone()]).unwrap();
        let b = ensemble_explanations(&[m3, m1, m2]).unwrap();
        for (x, y) in a.token_scores.iter().zip(&b.token_scores) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn ensemble_token_count_mismatch_rejected() {
        let mk = |n: usize| Explanation {
            token_scores: vec![0.5; n],
            word_scores: vec![0.5; n],
            word_spans: (0..n).map(|i| (i, i + 1)).collect(),
            provenance: Provenance::Head(HeadId { layer: 1, head: 1 }),
        };
        assert!(ensemble_explanations(&[mk(2), mk(3)]).is_err());
    }

    #[test]
    fn rank_heads_returns_all_heads_sorted() {
        let (model, dev) = trained_toy_model();
        let ranked = rank_heads(&model, &dev, ExplainMethod::AttnNorm, QueryAggregation::MeanRows)
            .unwrap();
        assert_eq!(ranked.len(), 4);
        for w in ranked.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
        // Every head appears exactly once.
        let mut seen: Vec<HeadId> = ranked.iter().map(|h| h.head).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn rank_heads_requires_errors() {
        let (model, mut dev) = trained_toy_model();
        for ex in &mut dev {
            if let Some(tags) = &mut ex.word_tags {
                for t in tags.iter_mut() {
                    *t = Tag::Ok;
                }
            }
        }
        assert!(
            rank_heads(&model, &dev, ExplainMethod::AttnNorm, QueryAggregation::MeanRows).is_err()
        );
    }

    #[test]
    fn zero_shot_selection_by_frequency() {
        let h = |l: usize, hd: usize, s: f64| HeadScore {
            head: HeadId { layer: l, head: hd },
            score: s,
        };
        let mut per_lp = BTreeMap::new();
        per_lp.insert("a-b".to_string(), vec![h(3, 1, 0.9), h(1, 1, 0.8), h(2, 2, 0.7)]);
        per_lp.insert("c-d".to_string(), vec![h(3, 1, 0.8), h(1, 1, 0.7), h(1, 2, 0.6)]);
        per_lp.insert("e-f".to_string(), vec![h(3, 1, 0.7), h(2, 2, 0.6)]);
        let picked = select_heads_zero_shot(&per_lp, 2).unwrap();
        // (3,1) appears in all three; (1,1) and (2,2) appear twice, mean
        // scores 0.75 vs 0.65.
        assert_eq!(picked[0], HeadId { layer: 3, head: 1 });
        assert_eq!(picked[1], HeadId { layer: 1, head: 1 });

        // Frequencies {A:3, B:3, C:1} with k = 2 keeps A and B.
        let mut per_lp = BTreeMap::new();
        for lp in ["a-b", "c-d", "e-f"] {
            per_lp.insert(lp.to_string(), vec![h(1, 1, 0.5), h(2, 1, 0.5)]);
        }
        per_lp
            .get_mut("a-b")
            .unwrap()
            .push(h(4, 4, 0.9));
        let picked = select_heads_zero_shot(&per_lp, 2).unwrap();
        assert_eq!(picked, vec![HeadId { layer: 1, head: 1 }, HeadId { layer: 2, head: 1 }]);

        // Single LP: that LP's list, in order.
        let mut single = BTreeMap::new();
        single.insert("a-b".to_string(), vec![h(2, 2, 0.9), h(1, 1, 0.8)]);
        let picked = select_heads_zero_shot(&single, 5).unwrap();
        assert_eq!(picked, vec![HeadId { layer: 2, head: 2 }, HeadId { layer: 1, head: 1 }]);

        assert!(select_heads_zero_shot(&BTreeMap::new(), 5).is_err());
    }

    #[test]
    fn scores_restricted_to_target_span() {
        let (model, dev) = trained_toy_model();
        let st = SentenceTrace::build(&model, &dev[0], true).unwrap();
        let (start, end) = st.tokenized.target_span;
        let e = attn_gradnorm_explain(&st, HeadId { layer: 1, head: 2 }, QueryAggregation::MeanRows)
            .unwrap();
        assert_eq!(e.token_scores.len(), end - start);
        assert_eq!(e.word_scores.len(), dev[0].target.len());
        assert!(e.token_scores.iter().all(|&s| s >= 0.0));
    }
}
