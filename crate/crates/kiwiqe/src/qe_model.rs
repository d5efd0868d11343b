//! The QE head stack: a learned mix over encoder layers (scalar mix, or the
//! per-head variant used by explanation-oriented models), a two-layer
//! feed-forward sentence regressor on the `[cls]` row, a linear OK/BAD
//! tagger on the first piece of each target word, and the multi-task loss.
//!
//! One mix feeds both heads.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{QEExample, Tag, TokenizedInput, Vocab};
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, EncoderTrace, EncoderVars};
use crate::error::{KiwiError, Result};
use crate::numerics::{GradTape, SimplexTransform, Tensor, Var};

pub const DEFAULT_TAG_THRESHOLD: f64 = 0.5;

/// Learned convex combination over the `L+1` hidden-state layers:
/// `H_mix = lambda * sum_l beta_l H_l` with `beta = transform(phi)`.
#[derive(Debug, Clone)]
pub struct ScalarMixParams {
    pub lambda: Tensor,
    pub phi: Tensor,
    pub transform: SimplexTransform,
}

impl ScalarMixParams {
    pub fn new(num_layers: usize, transform: SimplexTransform) -> ScalarMixParams {
        ScalarMixParams {
            lambda: Tensor::scalar(1.0),
            phi: Tensor::zeros(1, num_layers + 1),
            transform,
        }
    }
}

/// Head-level refinement of the scalar mix: within each attention layer the
/// projected head outputs are combined with their own simplex weights
/// `gamma_l = transform(theta_l)`; the embedding layer keeps its plain
/// `beta_0 H_0` term.
#[derive(Debug, Clone)]
pub struct HeadMixParams {
    pub lambda: Tensor,
    pub phi: Tensor,
    /// `L x H` head-mix logits.
    pub theta: Tensor,
    pub transform: SimplexTransform,
}

impl HeadMixParams {
    pub fn new(num_layers: usize, num_heads: usize, transform: SimplexTransform) -> HeadMixParams {
        HeadMixParams {
            lambda: Tensor::scalar(1.0),
            phi: Tensor::zeros(1, num_layers + 1),
            theta: Tensor::zeros(num_layers, num_heads),
            transform,
        }
    }

    /// Current head-mix coefficients `gamma` (`L x H`, rows on the simplex).
    pub fn gamma(&self) -> Tensor {
        self.transform.apply_rows(&self.theta)
    }
}

#[derive(Debug, Clone)]
pub enum MixParams {
    Scalar(ScalarMixParams),
    Head(HeadMixParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixKind {
    Scalar,
    Head,
}

impl MixParams {
    pub fn kind(&self) -> MixKind {
        match self {
            MixParams::Scalar(_) => MixKind::Scalar,
            MixParams::Head(_) => MixKind::Head,
        }
    }

    pub fn transform(&self) -> SimplexTransform {
        match self {
            MixParams::Scalar(p) => p.transform,
            MixParams::Head(p) => p.transform,
        }
    }

    fn for_each(&self, f: &mut impl FnMut(String, &Tensor)) {
        match self {
            MixParams::Scalar(p) => {
                f("mix.lambda".into(), &p.lambda);
                f("mix.phi".into(), &p.phi);
            }
            MixParams::Head(p) => {
                f("mix.lambda".into(), &p.lambda);
                f("mix.phi".into(), &p.phi);
                f("mix.theta".into(), &p.theta);
            }
        }
    }

    fn for_each_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        match self {
            MixParams::Scalar(p) => {
                f("mix.lambda".into(), &mut p.lambda);
                f("mix.phi".into(), &mut p.phi);
            }
            MixParams::Head(p) => {
                f("mix.lambda".into(), &mut p.lambda);
                f("mix.phi".into(), &mut p.phi);
                f("mix.theta".into(), &mut p.theta);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SentHeadParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct WordHeadParams {
    /// `d x 2` projection; column 0 is the OK logit, column 1 the BAD logit.
    pub w: Tensor,
    pub b: Tensor,
}

/// Loss weights: `lambda_sent * L_sent + lambda_word * L_word`, with
/// per-class weights on the word NLL.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_sent: f64,
    pub lambda_word: f64,
    /// (OK, BAD) class weights, both positive.
    pub class_weights: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_sent: 1.0,
            lambda_word: 1.0,
            class_weights: (1.0, 1.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sent < 0.0 || self.lambda_word < 0.0 {
            return Err(KiwiError::Config("loss weights must be nonnegative".into()));
        }
        if self.lambda_sent + self.lambda_word <= 0.0 {
            return Err(KiwiError::Config("lambda_sent + lambda_word must be positive".into()));
        }
        if self.class_weights.0 <= 0.0 || self.class_weights.1 <= 0.0 {
            return Err(KiwiError::Config("class weights must be positive".into()));
        }
        Ok(())
    }
}

/// Model output for one example.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub sentence_score: f64,
    /// Per target word `[ok, bad]` logits.
    pub word_logits: Vec<[f64; 2]>,
    pub word_probs: Vec<[f64; 2]>,
    pub word_tags: Vec<Tag>,
}

/// `1/2 (y - yhat)^2`.
pub fn sentence_loss(y: f64, y_hat: f64) -> f64 {
    0.5 * (y - y_hat) * (y - y_hat)
}

/// Class-weighted mean negative log-likelihood of the gold tags.
pub fn word_loss(gold: &[Tag], word_probs: &[[f64; 2]], class_weights: (f64, f64)) -> Result<f64> {
    if gold.len() != word_probs.len() {
        return Err(KiwiError::Contract(format!(
            "word_loss: {} tags vs {} probability rows",
            gold.len(),
            word_probs.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (tag, probs) in gold.iter().zip(word_probs) {
        let (w, p) = match tag {
            Tag::Ok => (class_weights.0, probs[0]),
            Tag::Bad => (class_weights.1, probs[1]),
        };
        sum -= w * p.ln();
    }
    Ok(sum / gold.len() as f64)
}

/// `lambda_s * L_sent + lambda_w * L_word`. A zero weight skips its term
/// entirely, so the pure settings reduce bit-exactly to the single losses.
pub fn combined_loss(example: &QEExample, prediction: &Prediction, cfg: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    if cfg.lambda_sent > 0.0 {
        total += cfg.lambda_sent * sentence_loss(example.sentence_score, prediction.sentence_score);
    }
    if cfg.lambda_word > 0.0 {
        let tags = example.word_tags.as_ref().ok_or_else(|| {
            KiwiError::Contract("combined_loss: lambda_word > 0 but example has no tags".into())
        })?;
        total += cfg.lambda_word * word_loss(tags, &prediction.word_probs, cfg.class_weights)?;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Tape-side forward pieces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ScalarMixVars {
    pub lambda: Var,
    pub phi: Var,
    pub transform: SimplexTransform,
}

#[derive(Debug, Clone)]
pub struct HeadMixVars {
    pub lambda: Var,
    pub phi: Var,
    pub theta: Var,
    pub transform: SimplexTransform,
}

#[derive(Debug, Clone)]
pub enum MixVars {
    Scalar(ScalarMixVars),
    Head(HeadMixVars),
}

#[derive(Debug, Clone)]
pub struct SentHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct WordHeadVars {
    pub w: Var,
    pub b: Var,
}

fn simplex_op(tape: &mut GradTape, z: Var, transform: SimplexTransform) -> Var {
    match transform {
        SimplexTransform::Softmax => tape.softmax_rows(z),
        SimplexTransform::Sparsemax => tape.sparsemax_rows(z),
    }
}

/// Weighted sum of all hidden-state layers (embeddings included).
pub fn scalar_mix(tape: &mut GradTape, trace: &EncoderTrace, vars: &ScalarMixVars) -> Result<Var> {
    let n_layers = trace.hidden.len();
    if tape.value(vars.phi).numel() != n_layers {
        return Err(KiwiError::shape(
            "scalar_mix",
            format!(
                "phi has {} entries for {} layers",
                tape.value(vars.phi).numel(),
                n_layers
            ),
        ));
    }
    let beta = simplex_op(tape, vars.phi, vars.transform);
    let mixed = tape.lincomb(&trace.hidden, beta, 0)?;
    tape.mul_scalar_var(mixed, vars.lambda)
}

/// Double-weighted sum: layer weights over (embeddings, per-layer head
/// mixes), head weights within each attention layer.
pub fn head_mix(tape: &mut GradTape, trace: &EncoderTrace, vars: &HeadMixVars) -> Result<Var> {
    let n_layers = trace.hidden.len();
    if tape.value(vars.phi).numel() != n_layers {
        return Err(KiwiError::shape(
            "head_mix",
            format!(
                "phi has {} entries for {} layers",
                tape.value(vars.phi).numel(),
                n_layers
            ),
        ));
    }
    let n_heads = trace.num_heads();
    let theta_shape = tape.value(vars.theta).shape().to_vec();
    if theta_shape != [trace.num_layers(), n_heads] {
        return Err(KiwiError::shape(
            "head_mix",
            format!(
                "theta {:?} for {} layers x {} heads",
                theta_shape,
                trace.num_layers(),
                n_heads
            ),
        ));
    }
    let beta = simplex_op(tape, vars.phi, vars.transform);
    let gamma = simplex_op(tape, vars.theta, vars.transform);
    let mut terms = Vec::with_capacity(n_layers);
    terms.push(trace.hidden[0]);
    for (l, heads) in trace.head_outputs.iter().enumerate() {
        terms.push(tape.lincomb(heads, gamma, l * n_heads)?);
    }
    let mixed = tape.lincomb(&terms, beta, 0)?;
    tape.mul_scalar_var(mixed, vars.lambda)
}

pub fn mix_forward(tape: &mut GradTape, trace: &EncoderTrace, vars: &MixVars) -> Result<Var> {
    match vars {
        MixVars::Scalar(v) => scalar_mix(tape, trace, v),
        MixVars::Head(v) => head_mix(tape, trace, v),
    }
}

/// Two-layer feed-forward regressor on the `[cls]` row: tanh hidden layer,
/// scalar linear output.
pub fn sentence_head(
    tape: &mut GradTape,
    hmix: Var,
    cls_index: usize,
    vars: &SentHeadVars,
) -> Result<Var> {
    let cls = tape.gather_rows(hmix, vec![cls_index])?;
    let h = tape.matmul(cls, vars.w1)?;
    let h = tape.add_row_broadcast(h, vars.b1)?;
    let h = tape.tanh(h);
    let y = tape.matmul(h, vars.w2)?;
    tape.add_row_broadcast(y, vars.b2)
}

/// Linear projection of the first-piece rows to `n x 2` OK/BAD logits.
pub fn word_head(
    tape: &mut GradTape,
    hmix: Var,
    first_piece: &[usize],
    vars: &WordHeadVars,
) -> Result<Var> {
    let rows = tape.gather_rows(hmix, first_piece.to_vec())?;
    let logits = tape.matmul(rows, vars.w)?;
    tape.add_row_broadcast(logits, vars.b)
}

// ---------------------------------------------------------------------------
// The assembled model
// ---------------------------------------------------------------------------

/// How examples are turned into token sequences.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputOptions {
    pub use_lp_prefix: bool,
    pub use_reference: bool,
}

#[derive(Debug, Clone)]
pub struct QEModel {
    pub encoder: Encoder,
    pub mix: MixParams,
    pub sent_head: SentHeadParams,
    pub word_head: WordHeadParams,
    pub loss_cfg: LossConfig,
    pub tag_threshold: f64,
    pub vocab: Vocab,
    pub input: InputOptions,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub mix: MixVars,
    pub sent: SentHeadVars,
    pub word: WordHeadVars,
}

/// One recorded forward pass.
pub struct ForwardPass {
    pub trace: EncoderTrace,
    pub hmix: Var,
    pub yhat: Var,
    pub word_logits: Var,
    pub word_probs: Var,
    pub tokenized: TokenizedInput,
}

impl QEModel {
    /// Builds a fresh model. `config.vocab_size` is overwritten from the
    /// vocabulary.
    pub fn new(
        mut config: EncoderConfig,
        mix_kind: MixKind,
        transform: SimplexTransform,
        loss_cfg: LossConfig,
        vocab: Vocab,
        input: InputOptions,
    ) -> Result<QEModel> {
        config.vocab_size = vocab.len();
        config.validate()?;
        loss_cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = EncoderParams::init(&config, &mut rng);
        let d = config.model_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let mut uniform = |rows: usize, cols: usize| {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let sent_head = SentHeadParams {
            w1: uniform(d, d),
            b1: Tensor::zeros(1, d),
            w2: uniform(d, 1),
            b2: Tensor::zeros(1, 1),
        };
        let word_head = WordHeadParams {
            w: uniform(d, 2),
            b: Tensor::zeros(1, 2),
        };
        let mix = match mix_kind {
            MixKind::Scalar => MixParams::Scalar(ScalarMixParams::new(config.num_layers, transform)),
            MixKind::Head => MixParams::Head(HeadMixParams::new(
                config.num_layers,
                config.num_heads,
                transform,
            )),
        };
        Ok(QEModel {
            encoder: Encoder { config, params },
            mix,
            sent_head,
            word_head,
            loss_cfg,
            tag_threshold: DEFAULT_TAG_THRESHOLD,
            vocab,
            input,
        })
    }

    pub fn for_each_param(&self, f: &mut impl FnMut(String, &Tensor)) {
        self.encoder.params.for_each(f);
        self.mix.for_each(f);
        f("sent.w1".into(), &self.sent_head.w1);
        f("sent.b1".into(), &self.sent_head.b1);
        f("sent.w2".into(), &self.sent_head.w2);
        f("sent.b2".into(), &self.sent_head.b2);
        f("word.w".into(), &self.word_head.w);
        f("word.b".into(), &self.word_head.b);
    }

    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.encoder.params.for_each_mut(f);
        self.mix.for_each_mut(f);
        f("sent.w1".into(), &mut self.sent_head.w1);
        f("sent.b1".into(), &mut self.sent_head.b1);
        f("sent.w2".into(), &mut self.sent_head.w2);
        f("sent.b2".into(), &mut self.sent_head.b2);
        f("word.w".into(), &mut self.word_head.w);
        f("word.b".into(), &mut self.word_head.b);
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    pub fn register(&self, tape: &mut GradTape) -> ModelVars {
        let encoder = EncoderVars::register(tape, &self.encoder.params);
        let mix = match &self.mix {
            MixParams::Scalar(p) => MixVars::Scalar(ScalarMixVars {
                lambda: tape.leaf(p.lambda.clone()),
                phi: tape.leaf(p.phi.clone()),
                transform: p.transform,
            }),
            MixParams::Head(p) => MixVars::Head(HeadMixVars {
                lambda: tape.leaf(p.lambda.clone()),
                phi: tape.leaf(p.phi.clone()),
                theta: tape.leaf(p.theta.clone()),
                transform: p.transform,
            }),
        };
        let sent = SentHeadVars {
            w1: tape.leaf(self.sent_head.w1.clone()),
            b1: tape.leaf(self.sent_head.b1.clone()),
            w2: tape.leaf(self.sent_head.w2.clone()),
            b2: tape.leaf(self.sent_head.b2.clone()),
        };
        let word = WordHeadVars {
            w: tape.leaf(self.word_head.w.clone()),
            b: tape.leaf(self.word_head.b.clone()),
        };
        ModelVars {
            encoder,
            mix,
            sent,
            word,
        }
    }

    /// Same order as `for_each_param` / `for_each_param_mut`.
    pub fn for_each_var(vars: &ModelVars, f: &mut impl FnMut(Var)) {
        vars.encoder.for_each_var(f);
        match &vars.mix {
            MixVars::Scalar(v) => {
                f(v.lambda);
                f(v.phi);
            }
            MixVars::Head(v) => {
                f(v.lambda);
                f(v.phi);
                f(v.theta);
            }
        }
        f(vars.sent.w1);
        f(vars.sent.b1);
        f(vars.sent.w2);
        f(vars.sent.b2);
        f(vars.word.w);
        f(vars.word.b);
    }

    pub fn tokenize(&self, example: &QEExample) -> Result<TokenizedInput> {
        crate::data::tokenize_pair(example, &self.vocab, self.input.use_lp_prefix, self.input.use_reference)
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut GradTape,
        vars: &ModelVars,
        tokenized: TokenizedInput,
    ) -> Result<ForwardPass> {
        let trace = self
            .encoder
            .encode(tape, &vars.encoder, &tokenized.token_ids)?;
        let hmix = mix_forward(tape, &trace, &vars.mix)?;
        let yhat = sentence_head(tape, hmix, tokenized.cls_index, &vars.sent)?;
        let word_logits = word_head(tape, hmix, &tokenized.first_piece_index, &vars.word)?;
        let word_probs = tape.softmax_rows(word_logits);
        Ok(ForwardPass {
            trace,
            hmix,
            yhat,
            word_logits,
            word_probs,
            tokenized,
        })
    }

    /// Differentiable combined loss for one example's forward pass.
    pub fn loss_on_tape(&self, tape: &mut GradTape, fwd: &ForwardPass, example: &QEExample) -> Result<Var> {
        let cfg = &self.loss_cfg;
        let mut total: Option<Var> = None;
        if cfg.lambda_sent > 0.0 {
            let d = tape.add_scalar(fwd.yhat, -example.sentence_score);
            let sq = tape.mul(d, d)?;
            let ls = tape.scale(sq, 0.5 * cfg.lambda_sent);
            total = Some(ls);
        }
        if cfg.lambda_word > 0.0 {
            let tags = example.word_tags.as_ref().ok_or_else(|| {
                KiwiError::Contract("lambda_word > 0 but example has no tags".into())
            })?;
            if tags.len() != tape.value(fwd.word_probs).rows() {
                return Err(KiwiError::Contract(format!(
                    "{} tags vs {} predicted words",
                    tags.len(),
                    tape.value(fwd.word_probs).rows()
                )));
            }
            if !tags.is_empty() {
                let entries: Vec<(usize, usize)> = tags
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i, if t.is_bad() { 1 } else { 0 }))
                    .collect();
                let picked = tape.select_entries(fwd.word_probs, entries)?;
                let lg = tape.ln(picked);
                let n = tags.len() as f64;
                let coeffs: Vec<f64> = tags
                    .iter()
                    .map(|t| {
                        let w = if t.is_bad() {
                            self.loss_cfg.class_weights.1
                        } else {
                            self.loss_cfg.class_weights.0
                        };
                        -cfg.lambda_word * w / n
                    })
                    .collect();
                let lw = tape.weighted_sum(lg, coeffs)?;
                total = Some(match total {
                    Some(t) => tape.add(t, lw)?,
                    None => lw,
                });
            }
        }
        total.ok_or_else(|| KiwiError::Contract("both loss weights are zero".into()))
    }

    fn prediction_from(&self, tape: &GradTape, fwd: &ForwardPass) -> Result<Prediction> {
        let yhat = tape.value(fwd.yhat).as_scalar()?;
        let logits_t = tape.value(fwd.word_logits);
        let probs_t = tape.value(fwd.word_probs);
        let n = logits_t.rows();
        let mut word_logits = Vec::with_capacity(n);
        let mut word_probs = Vec::with_capacity(n);
        let mut word_tags = Vec::with_capacity(n);
        for i in 0..n {
            word_logits.push([logits_t.at(i, 0), logits_t.at(i, 1)]);
            let p = [probs_t.at(i, 0), probs_t.at(i, 1)];
            word_probs.push(p);
            word_tags.push(if p[1] >= self.tag_threshold { Tag::Bad } else { Tag::Ok });
        }
        Ok(Prediction {
            sentence_score: yhat,
            word_logits,
            word_probs,
            word_tags,
        })
    }

    pub fn predict(&self, example: &QEExample) -> Result<Prediction> {
        let tokenized = self.tokenize(example)?;
        let mut tape = GradTape::new();
        let vars = self.register(&mut tape);
        let fwd = self.forward_on_tape(&mut tape, &vars, tokenized)?;
        self.prediction_from(&tape, &fwd)
    }

    /// Batch prediction, parallel over examples, output order preserved.
    pub fn predict_many(&self, examples: &[QEExample]) -> Result<Vec<Prediction>> {
        use rayon::prelude::*;
        examples.par_iter().map(|ex| self.predict(ex)).collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model state: config header plus named parameter tensors, JSON.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub encoder_config: EncoderConfig,
    pub mix_kind: MixKind,
    pub transform: SimplexTransform,
    pub loss: LossConfig,
    pub tag_threshold: f64,
    pub input: InputOptions,
    pub vocab: Vec<String>,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &QEModel) -> Checkpoint {
        let mut tensors = Vec::new();
        model.for_each_param(&mut |name, t| {
            tensors.push(NamedTensor {
                name,
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        });
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            encoder_config: model.encoder.config.clone(),
            mix_kind: model.mix.kind(),
            transform: model.mix.transform(),
            loss: model.loss_cfg,
            tag_threshold: model.tag_threshold,
            input: model.input,
            vocab: model.vocab.pieces().to_vec(),
            tensors,
        }
    }

    pub fn into_model(self) -> Result<QEModel> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(KiwiError::Config(format!(
                "unsupported checkpoint version {}",
                self.format_version
            )));
        }
        let vocab = Vocab::from_pieces(self.vocab)?;
        let mut model = QEModel::new(
            self.encoder_config,
            self.mix_kind,
            self.transform,
            self.loss,
            vocab,
            self.input,
        )?;
        model.tag_threshold = self.tag_threshold;
        let mut by_name: std::collections::BTreeMap<String, NamedTensor> =
            self.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut err = None;
        model.for_each_param_mut(&mut |name, t| {
            if err.is_some() {
                return;
            }
            match by_name.remove(&name) {
                Some(saved) if saved.shape == t.shape() => {
                    *t = Tensor::from_parts(saved.shape, saved.data);
                }
                Some(saved) => {
                    err = Some(KiwiError::Config(format!(
                        "checkpoint tensor {name} has shape {:?}, expected {:?}",
                        saved.shape,
                        t.shape()
                    )));
                }
                None => {
                    err = Some(KiwiError::Config(format!("checkpoint missing tensor {name}")));
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(KiwiError::Config(format!("checkpoint has unknown tensor {extra}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.is_file() {
            return Err(KiwiError::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn save_model(model: &QEModel, path: &Path) -> Result<()> {
    Checkpoint::from_model(model).save(path)
}

pub fn load_model(path: &Path) -> Result<QEModel> {
    Checkpoint::load(path)?.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocab {
        let ex = sample_example();
        Vocab::build(std::slice::from_ref(&ex))
    }

    fn sample_example() -> QEExample {
        QEExample {
            lp: "aa-bb".into(),
            source: vec!["uno".into(), "dos".into()],
            target: vec!["one".into(), "two".into()],
            reference: None,
            sentence_score: 0.3,
            word_tags: Some(vec![Tag::Ok, Tag::Bad]),
        }
    }

    fn tiny_model(mix: MixKind) -> QEModel {
        let config = EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ffn_dim: 16,
            vocab_size: 0,
            max_positions: 32,
            seed: 3,
        };
        QEModel::new(
            config,
            mix,
            SimplexTransform::Sparsemax,
            LossConfig::default(),
            tiny_vocab(),
            InputOptions::default(),
        )
        .unwrap()
    }

    fn encode_example(
        model: &QEModel,
        tape: &mut GradTape,
    ) -> (ModelVars, EncoderTrace, TokenizedInput) {
        let vars = model.register(tape);
        let tok = model.tokenize(&sample_example()).unwrap();
        let trace = model
            .encoder
            .encode(tape, &vars.encoder, &tok.token_ids)
            .unwrap();
        (vars, trace, tok)
    }

    #[test]
    fn scalar_mix_one_hot_selects_layer() {
        let model = tiny_model(MixKind::Scalar);
        let mut tape = GradTape::new();
        let (_vars, trace, _) = encode_example(&model, &mut tape);
        // Sparsemax of [0, 2, 0] is one-hot on layer 1.
        let phi = tape.leaf(Tensor::row_vector(vec![0.0, 2.0, 0.0]));
        let lambda = tape.leaf(Tensor::scalar(1.0));
        let mv = ScalarMixVars {
            lambda,
            phi,
            transform: SimplexTransform::Sparsemax,
        };
        let hmix = scalar_mix(&mut tape, &trace, &mv).unwrap();
        assert_eq!(tape.value(hmix), tape.value(trace.hidden[1]));
    }

    #[test]
    fn scalar_mix_uniform_times_lambda() {
        // L=1: phi = [0,0] under sparsemax is [0.5, 0.5]; lambda = 2 sums the layers.
        let model = {
            let mut m = tiny_model(MixKind::Scalar);
            m.encoder.config.num_layers = 1;
            m.encoder.params.layers.truncate(1);
            m
        };
        let mut tape = GradTape::new();
        let (_vars, trace, _) = encode_example(&model, &mut tape);
        let phi = tape.leaf(Tensor::row_vector(vec![0.0, 0.0]));
        let lambda = tape.leaf(Tensor::scalar(2.0));
        let mv = ScalarMixVars {
            lambda,
            phi,
            transform: SimplexTransform::Sparsemax,
        };
        let hmix = scalar_mix(&mut tape, &trace, &mv).unwrap();
        let expect = crate::numerics::add(
            tape.value(trace.hidden[0]),
            tape.value(trace.hidden[1]),
        )
        .unwrap();
        let got = tape.value(hmix);
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scalar_mix_zero_lambda_zeroes_output() {
        let model = tiny_model(MixKind::Scalar);
        let mut tape = GradTape::new();
        let (_vars, trace, _) = encode_example(&model, &mut tape);
        let phi = tape.leaf(Tensor::zeros(1, 3));
        let lambda = tape.leaf(Tensor::scalar(0.0));
        let mv = ScalarMixVars {
            lambda,
            phi,
            transform: SimplexTransform::Softmax,
        };
        let hmix = scalar_mix(&mut tape, &trace, &mv).unwrap();
        assert!(tape.value(hmix).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scalar_mix_layer_count_checked() {
        let model = tiny_model(MixKind::Scalar);
        let mut tape = GradTape::new();
        let (_vars, trace, _) = encode_example(&model, &mut tape);
        let phi = tape.leaf(Tensor::zeros(1, 5));
        let lambda = tape.leaf(Tensor::scalar(1.0));
        let mv = ScalarMixVars {
            lambda,
            phi,
            transform: SimplexTransform::Softmax,
        };
        assert!(scalar_mix(&mut tape, &trace, &mv).is_err());
    }

    #[test]
    fn sentence_head_zero_weights_returns_bias() {
        let mut model = tiny_model(MixKind::Scalar);
        model.sent_head.w1 = Tensor::zeros(8, 8);
        model.sent_head.w2 = Tensor::zeros(8, 1);
        model.sent_head.b2 = Tensor::scalar(-1.25);
        let p = model.predict(&sample_example()).unwrap();
        assert_eq!(p.sentence_score, -1.25);
    }

    #[test]
    fn sentence_head_hand_computed() {
        // 1-dim configuration: h = tanh(x*2 + 0.5), y = 3h - 1, x = 0.25.
        let mut tape = GradTape::new();
        let hmix = tape.leaf(Tensor::matrix(1, 1, vec![0.25]).unwrap());
        let vars = SentHeadVars {
            w1: tape.leaf(Tensor::matrix(1, 1, vec![2.0]).unwrap()),
            b1: tape.leaf(Tensor::row_vector(vec![0.5])),
            w2: tape.leaf(Tensor::matrix(1, 1, vec![3.0]).unwrap()),
            b2: tape.leaf(Tensor::scalar(-1.0)),
        };
        let y = sentence_head(&mut tape, hmix, 0, &vars).unwrap();
        let expect = (0.25f64 * 2.0 + 0.5).tanh() * 3.0 - 1.0;
        assert!((tape.value(y).as_scalar().unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn sentence_gradient_only_through_cls_row() {
        let model = tiny_model(MixKind::Scalar);
        let mut tape = GradTape::new();
        let vars = model.register(&mut tape);
        let tok = model.tokenize(&sample_example()).unwrap();
        let fwd = model.forward_on_tape(&mut tape, &vars, tok).unwrap();
        let grads = tape.backward(fwd.yhat).unwrap();
        let g = grads.get(fwd.hmix).expect("hmix gradient");
        let cls = 0;
        let cls_norm: f64 = g.row(cls).iter().map(|x| x * x).sum();
        assert!(cls_norm > 0.0);
        for i in 1..g.rows() {
            // Rows not feeding the sentence head may still feed the word head,
            // but yhat alone must not touch them.
            let first_pieces = &fwd.tokenized.first_piece_index;
            let _ = first_pieces;
            assert!(g.row(i).iter().all(|&x| x == 0.0), "row {i} has gradient");
        }
    }

    #[test]
    fn word_head_zero_projection_uniform() {
        let mut model = tiny_model(MixKind::Scalar);
        model.word_head.w = Tensor::zeros(8, 2);
        model.word_head.b = Tensor::zeros(1, 2);
        let p = model.predict(&sample_example()).unwrap();
        for probs in &p.word_probs {
            assert!((probs[0] - 0.5).abs() < 1e-12);
            assert!((probs[1] - 0.5).abs() < 1e-12);
        }
        // p(BAD) = 0.5 >= threshold 0.5 tags BAD under the >= rule.
        assert!(p.word_tags.iter().all(|t| t.is_bad()));
    }

    #[test]
    fn word_head_empty_words_empty_logits() {
        let model = tiny_model(MixKind::Scalar);
        let mut tape = GradTape::new();
        let vars = model.register(&mut tape);
        let hmix = tape.leaf(Tensor::zeros(4, 8));
        let logits = word_head(&mut tape, hmix, &[], &vars.word).unwrap();
        assert_eq!(tape.value(logits).rows(), 0);
    }

    #[test]
    fn word_head_ignores_unselected_rows() {
        let model = tiny_model(MixKind::Scalar);
        let mut tape = GradTape::new();
        let vars = model.register(&mut tape);
        let h1 = tape.leaf(Tensor::matrix(3, 8, (0..24).map(|x| x as f64).collect()).unwrap());
        let l1 = word_head(&mut tape, h1, &[1], &vars.word).unwrap();
        let v1 = tape.value(l1).clone();
        // Permute the two unselected rows.
        let mut permuted = Vec::new();
        let t = tape.value(h1).clone();
        permuted.extend_from_slice(t.row(2));
        permuted.extend_from_slice(t.row(1));
        permuted.extend_from_slice(t.row(0));
        let h2 = tape.leaf(Tensor::matrix(3, 8, permuted).unwrap());
        let l2 = word_head(&mut tape, h2, &[1], &vars.word).unwrap();
        assert_eq!(tape.value(l2), &v1);
    }

    #[test]
    fn loss_plug_in_values() {
        assert_eq!(sentence_loss(1.0, 1.0), 0.0);
        assert_eq!(sentence_loss(1.0, 0.0), 0.5);
        assert_eq!(sentence_loss(-2.0, 2.0), 8.0);

        let gold = [Tag::Ok, Tag::Bad];
        let probs = [[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(word_loss(&gold, &probs, (1.0, 1.0)).unwrap(), 0.0);

        let probs = [[0.5, 0.5], [0.75, 0.25]];
        let l = word_loss(&gold, &probs, (1.0, 1.0)).unwrap();
        let expect = (2.0f64.ln() + 4.0f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12, "{l} vs {expect}");

        // Doubling the BAD weight doubles only the BAD token's contribution.
        let l1 = word_loss(&gold, &probs, (1.0, 1.0)).unwrap();
        let l2 = word_loss(&gold, &probs, (1.0, 2.0)).unwrap();
        let bad_contrib = -(0.25f64.ln()) / 2.0;
        assert!((l2 - l1 - bad_contrib).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_reduces_bit_exactly() {
        let ex = sample_example();
        let pred = Prediction {
            sentence_score: 0.1,
            word_logits: vec![[0.3, -0.3], [-0.2, 0.5]],
            word_probs: vec![[0.6, 0.4], [0.2, 0.8]],
            word_tags: vec![Tag::Ok, Tag::Bad],
        };
        let pure_sent = sentence_loss(ex.sentence_score, pred.sentence_score);
        let pure_word =
            word_loss(ex.word_tags.as_ref().unwrap(), &pred.word_probs, (1.0, 1.0)).unwrap();

        let only_sent = LossConfig {
            lambda_sent: 1.0,
            lambda_word: 0.0,
            class_weights: (1.0, 1.0),
        };
        assert_eq!(combined_loss(&ex, &pred, &only_sent).unwrap(), pure_sent);

        let only_word = LossConfig {
            lambda_sent: 0.0,
            lambda_word: 1.0,
            class_weights: (1.0, 1.0),
        };
        assert_eq!(combined_loss(&ex, &pred, &only_word).unwrap(), pure_word);

        let both = LossConfig {
            lambda_sent: 0.5,
            lambda_word: 0.5,
            class_weights: (1.0, 1.0),
        };
        let got = combined_loss(&ex, &pred, &both).unwrap();
        assert_eq!(got, 0.5 * pure_sent + 0.5 * pure_word);
    }

    #[test]
    fn combined_loss_needs_tags_when_weighted() {
        let mut ex = sample_example();
        ex.word_tags = None;
        let pred = Prediction {
            sentence_score: 0.0,
            word_logits: vec![],
            word_probs: vec![],
            word_tags: vec![],
        };
        assert!(combined_loss(&ex, &pred, &LossConfig::default()).is_err());
    }

    #[test]
    fn head_mix_selectors() {
        let model = tiny_model(MixKind::Head);
        let mut tape = GradTape::new();
        let (_vars, trace, _) = encode_example(&model, &mut tape);
        // beta one-hot on attention layer 1 (phi index 1), gamma one-hot on head 2.
        let phi = tape.leaf(Tensor::row_vector(vec![0.0, 2.0, 0.0]));
        let theta = tape.leaf(Tensor::matrix(2, 2, vec![0.0, 2.0, 2.0, 0.0]).unwrap());
        let lambda = tape.leaf(Tensor::scalar(1.0));
        let hv = HeadMixVars {
            lambda,
            phi,
            theta,
            transform: SimplexTransform::Sparsemax,
        };
        let hmix = head_mix(&mut tape, &trace, &hv).unwrap();
        assert_eq!(tape.value(hmix), tape.value(trace.head_outputs[0][1]));
    }

    #[test]
    fn head_mix_uniform_recovers_mean_block_output() {
        let model = tiny_model(MixKind::Head);
        let mut tape = GradTape::new();
        let (_vars, trace, _) = encode_example(&model, &mut tape);
        let phi = tape.leaf(Tensor::row_vector(vec![-50.0, 50.0, -50.0]));
        let theta = tape.leaf(Tensor::zeros(2, 2));
        let lambda = tape.leaf(Tensor::scalar(1.0));
        let hv = HeadMixVars {
            lambda,
            phi,
            theta,
            transform: SimplexTransform::Softmax,
        };
        let hmix = head_mix(&mut tape, &trace, &hv).unwrap();
        // Uniform gamma with softmax: (1/H) * sum_h headout_h.
        let sum = crate::numerics::add(
            tape.value(trace.head_outputs[0][0]),
            tape.value(trace.head_outputs[0][1]),
        )
        .unwrap();
        let expect = crate::numerics::scale(&sum, 0.5);
        for (a, b) in tape.value(hmix).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn sparsemax_theta_dominant_head_is_one_hot() {
        let p = HeadMixParams {
            lambda: Tensor::scalar(1.0),
            phi: Tensor::zeros(1, 3),
            theta: Tensor::matrix(2, 2, vec![1.5, 0.2, 0.0, 0.0]).unwrap(),
            transform: SimplexTransform::Sparsemax,
        };
        let gamma = p.gamma();
        assert_eq!(gamma.row(0), &[1.0, 0.0]);
        assert_eq!(gamma.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = tiny_model(MixKind::Scalar);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        let p1 = model.predict(&sample_example()).unwrap();
        let p2 = loaded.predict(&sample_example()).unwrap();
        assert_eq!(p1.sentence_score, p2.sentence_score);
        assert_eq!(p1.word_logits, p2.word_logits);

        // Byte-identical re-serialization.
        let a = serde_json::to_string(&Checkpoint::from_model(&model)).unwrap();
        let b = serde_json::to_string(&Checkpoint::from_model(&loaded)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn param_walkers_align_with_vars() {
        for kind in [MixKind::Scalar, MixKind::Head] {
            let model = tiny_model(kind);
            let mut names = Vec::new();
            model.for_each_param(&mut |n, t| names.push((n, t.shape().to_vec())));
            let mut tape = GradTape::new();
            let vars = model.register(&mut tape);
            let mut var_shapes = Vec::new();
            QEModel::for_each_var(&vars, &mut |v| {
                var_shapes.push(tape.value(v).shape().to_vec());
            });
            assert_eq!(names.len(), var_shapes.len());
            for ((n, s), vs) in names.iter().zip(&var_shapes) {
                assert_eq!(s, vs, "shape mismatch for {n}");
            }
        }
    }
}
