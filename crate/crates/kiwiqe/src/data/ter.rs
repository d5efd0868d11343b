//! Translation edit rate between a machine translation and its post-edit.
//!
//! Plain word-level Levenshtein distance (insert/delete/substitute, no block
//! shifts) divided by the post-edit length, capped at 1.0 so it can serve as
//! an HTER-style sentence target.

use crate::error::{KiwiError, Result};

pub fn compute_ter<S: AsRef<str>>(target: &[S], postedit: &[S]) -> Result<f64> {
    if postedit.is_empty() {
        return Err(KiwiError::Contract("empty post-edit in compute_ter".into()));
    }
    let edits = levenshtein_words(target, postedit);
    Ok((edits as f64 / postedit.len() as f64).min(1.0))
}

fn levenshtein_words<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = if a[i - 1].as_ref() == b[j - 1].as_ref() { 0 } else { 1 };
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + sub);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}
