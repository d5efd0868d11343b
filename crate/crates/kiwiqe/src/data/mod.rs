//! Corpus ingestion and input assembly: QE examples, the subword tokenizer,
//! TSV parsing, few-shot splits, translation edit rate, and tag statistics.

mod ter;
mod tokenizer;
mod tsv;

pub use ter::compute_ter;
pub use tokenizer::{
    detokenize_target, lp_prefix_token, tokenize_pair, word_pieces, TokenizedInput, Vocab,
    MAX_PIECE_CHARS,
};
pub use tsv::{format_score, parse_qe_tsv, write_qe_tsv, Schema};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KiwiError, Result};

/// Binary word-level quality label. BAD marks a translation error and is the
/// positive class in every metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tag {
    Ok,
    Bad,
}

impl Tag {
    pub fn parse(s: &str) -> Result<Tag> {
        match s {
            "OK" => Ok(Tag::Ok),
            "BAD" => Ok(Tag::Bad),
            other => Err(KiwiError::Value(format!("unknown tag {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tag::Ok => "OK",
            Tag::Bad => "BAD",
        }
    }

    pub fn is_bad(&self) -> bool {
        matches!(self, Tag::Bad)
    }
}

/// One source/translation pair with its quality annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QEExample {
    /// Language pair id, e.g. "en-de".
    pub lp: String,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub reference: Option<Vec<String>>,
    /// DA z-score, MQM score, or HTER in [0,1] depending on the schema.
    pub sentence_score: f64,
    /// OK/BAD per target word, when annotated.
    pub word_tags: Option<Vec<Tag>>,
}

impl QEExample {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() {
            return Err(KiwiError::Value("empty source".into()));
        }
        if self.target.is_empty() {
            return Err(KiwiError::Value("empty target".into()));
        }
        if let Some(tags) = &self.word_tags {
            if tags.len() != self.target.len() {
                return Err(KiwiError::Value(format!(
                    "{} tags for {} target words",
                    tags.len(),
                    self.target.len()
                )));
            }
        }
        Ok(())
    }
}

/// Fraction of (OK, BAD) tags over all tagged words in the dataset.
pub fn tag_distribution(examples: &[QEExample]) -> (f64, f64) {
    let mut ok = 0usize;
    let mut bad = 0usize;
    for ex in examples {
        if let Some(tags) = &ex.word_tags {
            for t in tags {
                match t {
                    Tag::Ok => ok += 1,
                    Tag::Bad => bad += 1,
                }
            }
        }
    }
    let total = (ok + bad) as f64;
    if total == 0.0 {
        return (0.0, 0.0);
    }
    (ok as f64 / total, bad as f64 / total)
}

/// Splits a dataset into a fine-tuning half and a validation half.
/// Disjoint, sizes differ by at most one (fine-tuning gets the extra
/// element), deterministic under the seed.
pub fn split_halves(dataset: &[QEExample], seed: u64) -> Result<(Vec<QEExample>, Vec<QEExample>)> {
    if dataset.len() < 2 {
        return Err(KiwiError::Contract(format!(
            "split_halves needs at least 2 examples, got {}",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = dataset.len().div_ceil(2);
    let finetune = idx[..cut].iter().map(|&i| dataset[i].clone()).collect();
    let validation = idx[cut..].iter().map(|&i| dataset[i].clone()).collect();
    Ok((finetune, validation))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy(i: usize) -> QEExample {
        QEExample {
            lp: "en-de".into(),
            source: vec![format!("s{i}")],
            target: vec![format!("t{i}")],
            reference: None,
            sentence_score: i as f64,
            word_tags: None,
        }
    }

    #[test]
    fn split_sizes() {
        let data: Vec<_> = (0..1000).map(dummy).collect();
        let (a, b) = split_halves(&data, 7).unwrap();
        assert_eq!(a.len(), 500);
        assert_eq!(b.len(), 500);

        let data: Vec<_> = (0..3).map(dummy).collect();
        let (a, b) = split_halves(&data, 7).unwrap();
        assert_eq!((a.len(), b.len()), (2, 1));
    }

    #[test]
    fn split_deterministic_and_disjoint() {
        let data: Vec<_> = (0..11).map(dummy).collect();
        let (a1, b1) = split_halves(&data, 42).unwrap();
        let (a2, b2) = split_halves(&data, 42).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        let mut all: Vec<f64> = a1.iter().chain(&b1).map(|e| e.sentence_score).collect();
        all.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let expect: Vec<f64> = (0..11).map(|i| i as f64).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn split_rejects_tiny_input() {
        let data = vec![dummy(0)];
        assert!(split_halves(&data, 1).is_err());
    }

    #[test]
    fn tag_distribution_counts() {
        let mut examples = Vec::new();
        let mut remaining_bad = 16;
        for i in 0..10 {
            let bad_here = if remaining_bad >= 2 { 2 } else { remaining_bad };
            remaining_bad -= bad_here;
            let tags: Vec<Tag> = (0..10)
                .map(|j| if j < bad_here { Tag::Bad } else { Tag::Ok })
                .collect();
            let mut ex = dummy(i);
            ex.target = (0..10).map(|j| format!("w{j}")).collect();
            ex.word_tags = Some(tags);
            examples.push(ex);
        }
        let (ok, bad) = tag_distribution(&examples);
        assert!((ok - 0.84).abs() < 1e-12);
        assert!((bad - 0.16).abs() < 1e-12);
    }
}
