//! Synthetic QE corpora with planted signal.
//!
//! Each synthetic "language pair" is a vocabulary shard: a private inventory
//! of source words, their one-to-one translations, and a few reserved noise
//! pieces. Sentences are word-by-word translations; a sampled per-sentence
//! corruption rate flips words to BAD either by substituting a noise token
//! (detectable from the token alone) or by substituting the translation of a
//! different source word (detectable only against the source).
//!
//! The sentence score combines a planted linear projection of the observed
//! target pieces with the fraction of corrupted words, so sentence and word
//! supervision share structure. All pieces are exactly four characters, so
//! the tokenizer reproduces them bit-for-bit.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{compute_ter, word_pieces, QEExample, Tag, Vocab};
use crate::error::{KiwiError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Planted projection minus scaled bad fraction, optionally noised.
    Da,
    /// Translation edit rate against the clean translation, in [0,1].
    Hter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_lps: usize,
    /// Source-word inventory per shard (at most 90).
    pub words_per_lp: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Per-sentence corruption rate is uniform in [0, max_bad_rate].
    pub max_bad_rate: f64,
    /// Fraction of corruptions that are mistranslations instead of noise
    /// tokens.
    pub hard_frac: f64,
    pub proj_scale: f64,
    pub bad_scale: f64,
    pub score_noise: f64,
    pub score_mode: ScoreMode,
    pub with_reference: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_lps: 3,
            words_per_lp: 30,
            min_words: 4,
            max_words: 7,
            max_bad_rate: 0.45,
            hard_frac: 0.25,
            proj_scale: 0.5,
            bad_scale: 2.0,
            score_noise: 0.0,
            score_mode: ScoreMode::Da,
            with_reference: false,
            seed: 2022,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_lps == 0 || self.num_lps > 10 {
            return Err(KiwiError::Config("num_lps must be in 1..=10".into()));
        }
        if self.words_per_lp == 0 || self.words_per_lp > 90 {
            return Err(KiwiError::Config("words_per_lp must be in 1..=90".into()));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(KiwiError::Config("need 0 < min_words <= max_words".into()));
        }
        if !(0.0..=1.0).contains(&self.max_bad_rate) || !(0.0..=1.0).contains(&self.hard_frac) {
            return Err(KiwiError::Config("rates must lie in [0,1]".into()));
        }
        Ok(())
    }
}

const NOISE_PIECES_PER_SHARD: usize = 5;

#[derive(Debug, Clone)]
struct Shard {
    lp: String,
    /// Pieces of each source word.
    source_words: Vec<Vec<String>>,
    /// Pieces of the word-by-word translation of each source word.
    target_words: Vec<Vec<String>>,
    noise_pieces: Vec<String>,
    /// Planted projection weight per target-side piece.
    piece_weights: BTreeMap<String, f64>,
}

/// A fixed synthetic task: shards, vocabularies and planted weights are all
/// derived from the config seed; example sampling is salted per split so
/// splits are independent of generation order.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    cfg: SyntheticConfig,
    shards: Vec<Shard>,
}

impl SyntheticTask {
    pub fn new(cfg: SyntheticConfig) -> Result<SyntheticTask> {
        cfg.validate()?;
        let mut shards = Vec::with_capacity(cfg.num_lps);
        for k in 0..cfg.num_lps {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xA5A5_0000 + k as u64));
            let mut source_words = Vec::with_capacity(cfg.words_per_lp);
            let mut target_words = Vec::with_capacity(cfg.words_per_lp);
            for j in 0..cfg.words_per_lp {
                let mut src = vec![format!("s{k}{j:02}")];
                let mut tgt = vec![format!("t{k}{j:02}")];
                // A third of the words are two pieces long on each side.
                if j % 3 == 2 {
                    src.push(format!("v{k}{j:02}"));
                    tgt.push(format!("u{k}{j:02}"));
                }
                source_words.push(src);
                target_words.push(tgt);
            }
            let noise_pieces: Vec<String> = (0..NOISE_PIECES_PER_SHARD)
                .map(|i| format!("z{k}{i:02}"))
                .collect();
            let mut piece_weights = BTreeMap::new();
            for piece in target_words.iter().flatten().chain(&noise_pieces) {
                piece_weights.insert(piece.clone(), rng.random_range(-1.0..1.0));
            }
            shards.push(Shard {
                lp: format!("xx{k}-yy{k}"),
                source_words,
                target_words,
                noise_pieces,
                piece_weights,
            });
        }
        Ok(SyntheticTask { cfg, shards })
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.cfg
    }

    pub fn num_lps(&self) -> usize {
        self.shards.len()
    }

    pub fn lp(&self, lp_index: usize) -> &str {
        &self.shards[lp_index].lp
    }

    /// Planted projection weight of one target-side piece.
    pub fn piece_weight(&self, lp_index: usize, piece: &str) -> Option<f64> {
        self.shards[lp_index].piece_weights.get(piece).copied()
    }

    /// A vocabulary covering every shard (language prefixes included), so
    /// that held-out shards are in-vocabulary for few-shot adaptation.
    pub fn vocab(&self) -> Vocab {
        let mut coverage = Vec::new();
        for (k, shard) in self.shards.iter().enumerate() {
            let mut source = Vec::new();
            let mut target = Vec::new();
            for w in &shard.source_words {
                source.push(w.concat());
            }
            for w in &shard.target_words {
                target.push(w.concat());
            }
            for z in &shard.noise_pieces {
                target.push(z.clone());
            }
            coverage.push(QEExample {
                lp: shard.lp.clone(),
                source,
                target,
                reference: None,
                sentence_score: 0.0,
                word_tags: None,
            });
            let _ = k;
        }
        Vocab::build(&coverage)
    }

    /// Samples `n` examples for one shard. `salt` distinguishes splits
    /// (train/dev/test) deterministically.
    pub fn generate(&self, lp_index: usize, salt: u64, n: usize) -> Result<Vec<QEExample>> {
        let shard = self
            .shards
            .get(lp_index)
            .ok_or_else(|| KiwiError::Contract(format!("no shard {lp_index}")))?;
        let cfg = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(salt.wrapping_mul(0xD1B5_4A32_D192_ED03))
                .wrapping_add(lp_index as u64),
        );
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = rng.random_range(cfg.min_words..=cfg.max_words);
            let bad_rate = rng.random_range(0.0..cfg.max_bad_rate);
            let mut source = Vec::with_capacity(len);
            let mut target = Vec::with_capacity(len);
            let mut reference = Vec::with_capacity(len);
            let mut tags = Vec::with_capacity(len);
            let mut observed_pieces: Vec<&str> = Vec::new();
            let mut bad_count = 0usize;
            for _ in 0..len {
                let j = rng.random_range(0..shard.source_words.len());
                source.push(shard.source_words[j].concat());
                reference.push(shard.target_words[j].concat());
                let corrupt = rng.random_bool(bad_rate);
                if corrupt {
                    bad_count += 1;
                    tags.push(Tag::Bad);
                    if rng.random_bool(cfg.hard_frac) && shard.source_words.len() > 1 {
                        // Mistranslation: the translation of some other word.
                        let mut other = rng.random_range(0..shard.source_words.len());
                        if other == j {
                            other = (other + 1) % shard.source_words.len();
                        }
                        target.push(shard.target_words[other].concat());
                        for p in &shard.target_words[other] {
                            observed_pieces.push(p);
                        }
                    } else {
                        let z = &shard.noise_pieces[rng.random_range(0..shard.noise_pieces.len())];
                        target.push(z.clone());
                        observed_pieces.push(z);
                    }
                } else {
                    tags.push(Tag::Ok);
                    target.push(shard.target_words[j].concat());
                    for p in &shard.target_words[j] {
                        observed_pieces.push(p);
                    }
                }
            }
            let bad_frac = bad_count as f64 / len as f64;
            let score = match cfg.score_mode {
                ScoreMode::Da => {
                    let proj = observed_pieces
                        .iter()
                        .map(|p| shard.piece_weights[*p])
                        .sum::<f64>()
                        / observed_pieces.len() as f64;
                    let noise = if cfg.score_noise > 0.0 {
                        // Box-Muller from two uniforms.
                        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.random_range(0.0..1.0);
                        cfg.score_noise
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    } else {
                        0.0
                    };
                    cfg.proj_scale * proj - cfg.bad_scale * bad_frac + noise
                }
                ScoreMode::Hter => compute_ter(&target, &reference)?,
            };
            out.push(QEExample {
                lp: shard.lp.clone(),
                source,
                target,
                reference: cfg.with_reference.then(|| reference.clone()),
                sentence_score: score,
                word_tags: Some(tags),
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tokenize_pair;

    fn task() -> SyntheticTask {
        SyntheticTask::new(SyntheticConfig::default()).unwrap()
    }

    #[test]
    fn generation_is_deterministic_and_split_independent() {
        let t = task();
        let a = t.generate(0, 1, 20).unwrap();
        let b = t.generate(0, 1, 20).unwrap();
        assert_eq!(a, b);
        let c = t.generate(0, 2, 20).unwrap();
        assert_ne!(a, c);
        // A longer draw starts with the same examples.
        let d = t.generate(0, 1, 30).unwrap();
        assert_eq!(&d[..20], &a[..]);
    }

    #[test]
    fn tags_mark_exactly_the_corrupted_words() {
        let t = task();
        for ex in t.generate(1, 7, 50).unwrap() {
            let reference = ex.reference.clone();
            let tags = ex.word_tags.as_ref().unwrap();
            // Reference is absent by default; regenerate with references on.
            assert!(reference.is_none());
            for (w, tag) in ex.target.iter().zip(tags) {
                if w.starts_with('z') {
                    assert!(tag.is_bad(), "noise word {w} not tagged BAD");
                }
            }
        }
    }

    #[test]
    fn hter_mode_scores_match_ter_against_reference() {
        let cfg = SyntheticConfig {
            score_mode: ScoreMode::Hter,
            with_reference: true,
            ..SyntheticConfig::default()
        };
        let t = SyntheticTask::new(cfg).unwrap();
        for ex in t.generate(0, 3, 40).unwrap() {
            let reference = ex.reference.as_ref().unwrap();
            let ter = compute_ter(&ex.target, reference).unwrap();
            assert_eq!(ex.sentence_score, ter);
            assert!((0.0..=1.0).contains(&ex.sentence_score));
            // Substitution-only corruption: TER equals the BAD fraction.
            let bad = ex.word_tags.as_ref().unwrap().iter().filter(|t| t.is_bad()).count();
            let expect = bad as f64 / ex.target.len() as f64;
            assert!((ter - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn da_scores_follow_planted_formula() {
        let cfg = SyntheticConfig {
            score_noise: 0.0,
            ..SyntheticConfig::default()
        };
        let t = SyntheticTask::new(cfg.clone()).unwrap();
        for ex in t.generate(2, 9, 30).unwrap() {
            let tags = ex.word_tags.as_ref().unwrap();
            let bad_frac =
                tags.iter().filter(|t| t.is_bad()).count() as f64 / tags.len() as f64;
            let mut weights = Vec::new();
            for w in &ex.target {
                for piece in word_pieces(w) {
                    weights.push(t.piece_weight(2, &piece).expect("piece has a weight"));
                }
            }
            let proj = weights.iter().sum::<f64>() / weights.len() as f64;
            let expect = cfg.proj_scale * proj - cfg.bad_scale * bad_frac;
            assert!((ex.sentence_score - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn vocab_covers_all_shards() {
        let t = task();
        let vocab = t.vocab();
        for k in 0..t.num_lps() {
            for ex in t.generate(k, 11, 20).unwrap() {
                let tok = tokenize_pair(&ex, &vocab, false, false).unwrap();
                assert!(
                    tok.token_ids.iter().all(|&id| id != vocab.unk_id()),
                    "unk leaked into shard {k}"
                );
            }
        }
    }

    #[test]
    fn shards_use_disjoint_pieces() {
        let t = task();
        let a = t.generate(0, 5, 10).unwrap();
        let b = t.generate(1, 5, 10).unwrap();
        let pieces = |exs: &[QEExample]| -> std::collections::BTreeSet<String> {
            exs.iter()
                .flat_map(|e| e.target.iter().chain(e.source.iter()))
                .flat_map(|w| word_pieces(w))
                .collect()
        };
        assert!(pieces(&a).is_disjoint(&pieces(&b)));
    }
}
