//! Whitespace words split into fixed-max-length character pieces against a
//! built vocabulary, assembled as `[cls] target [sep] source [eos]` (plus an
//! optional `[sep] reference [eos]` block and optional language prefix
//! tokens).

use std::collections::HashMap;

use crate::data::QEExample;
use crate::error::{KiwiError, Result};

/// Maximum characters per word piece.
pub const MAX_PIECE_CHARS: usize = 4;

pub const CLS: &str = "[cls]";
pub const SEP: &str = "[sep]";
pub const EOS: &str = "[eos]";
pub const UNK: &str = "[unk]";

/// Piece vocabulary. Ids are dense; specials occupy the first slots.
/// Serialized as its ordered piece list (see `from_pieces`).
#[derive(Debug, Clone)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    fn with_specials() -> Vocab {
        let mut v = Vocab {
            pieces: Vec::new(),
            index: HashMap::new(),
        };
        for s in [CLS, SEP, EOS, UNK] {
            v.insert(s);
        }
        v
    }

    fn insert(&mut self, piece: &str) -> u32 {
        if let Some(&id) = self.index.get(piece) {
            return id;
        }
        let id = self.pieces.len() as u32;
        self.pieces.push(piece.to_string());
        self.index.insert(piece.to_string(), id);
        id
    }

    /// Builds a vocabulary covering every piece of every word in the
    /// examples, plus the language-prefix token of each LP seen.
    pub fn build(examples: &[QEExample]) -> Vocab {
        let mut v = Vocab::with_specials();
        for ex in examples {
            v.insert(&lp_prefix_token(&ex.lp));
            for word in ex.source.iter().chain(&ex.target).chain(ex.reference.iter().flatten()) {
                for piece in word_pieces(word) {
                    v.insert(&piece);
                }
            }
        }
        v
    }

    /// Reconstructs a vocabulary from an ordered piece list (checkpoint or
    /// vocab file). The first four entries must be the specials.
    pub fn from_pieces(pieces: Vec<String>) -> Result<Vocab> {
        if pieces.len() < 4 || pieces[0] != CLS || pieces[1] != SEP || pieces[2] != EOS || pieces[3] != UNK
        {
            return Err(KiwiError::Value(
                "vocab must start with [cls] [sep] [eos] [unk]".into(),
            ));
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(KiwiError::Value(format!("duplicate vocab piece {p:?}")));
            }
        }
        Ok(Vocab { pieces, index })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn id_or_unk(&self, piece: &str) -> u32 {
        self.id(piece).unwrap_or(3)
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(|s| s.as_str())
    }

    pub fn cls_id(&self) -> u32 {
        0
    }
    pub fn sep_id(&self) -> u32 {
        1
    }
    pub fn eos_id(&self) -> u32 {
        2
    }
    pub fn unk_id(&self) -> u32 {
        3
    }
}

/// Language prefix token, e.g. `<en-de>`.
pub fn lp_prefix_token(lp: &str) -> String {
    format!("<{lp}>")
}

/// Splits one word into character chunks of at most `MAX_PIECE_CHARS`.
pub fn word_pieces(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .chunks(MAX_PIECE_CHARS)
        .map(|c| c.iter().collect())
        .collect()
}

/// Tokenized model input with the alignment bookkeeping the word head and
/// the explainers need.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedInput {
    pub token_ids: Vec<u32>,
    /// Position of the first piece of each target word (absolute).
    pub first_piece_index: Vec<usize>,
    /// `[start, end)` piece span of each target word (absolute).
    pub target_word_spans: Vec<(usize, usize)>,
    pub cls_index: usize,
    /// `[start, end)` of all target pieces (prefix token excluded).
    pub target_span: (usize, usize),
    /// `[start, end)` of all source pieces (prefix token excluded).
    pub source_span: (usize, usize),
    pub reference_span: Option<(usize, usize)>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Target-word piece spans in coordinates local to the target span.
    pub fn local_word_spans(&self) -> Vec<(usize, usize)> {
        let base = self.target_span.0;
        self.target_word_spans
            .iter()
            .map(|&(s, e)| (s - base, e - base))
            .collect()
    }
}

/// Tokenizes an example into the `[cls] target [sep] source [eos]` layout.
/// With `use_lp_prefix` a `<lp>` token precedes both segments; it is not a
/// target word, so it never appears among the first-piece indices. With
/// `use_reference` a `[sep] reference [eos]` block is appended.
pub fn tokenize_pair(
    example: &QEExample,
    vocab: &Vocab,
    use_lp_prefix: bool,
    use_reference: bool,
) -> Result<TokenizedInput> {
    example.validate()?;
    let mut ids: Vec<u32> = vec![vocab.cls_id()];
    let mut first_piece = Vec::with_capacity(example.target.len());
    let mut spans = Vec::with_capacity(example.target.len());

    let prefix_id = if use_lp_prefix {
        Some(vocab.id_or_unk(&lp_prefix_token(&example.lp)))
    } else {
        None
    };

    if let Some(p) = prefix_id {
        ids.push(p);
    }
    let target_start = ids.len();
    for word in &example.target {
        let start = ids.len();
        first_piece.push(start);
        for piece in word_pieces(word) {
            ids.push(vocab.id_or_unk(&piece));
        }
        spans.push((start, ids.len()));
    }
    let target_end = ids.len();

    ids.push(vocab.sep_id());
    if let Some(p) = prefix_id {
        ids.push(p);
    }
    let source_start = ids.len();
    for word in &example.source {
        for piece in word_pieces(word) {
            ids.push(vocab.id_or_unk(&piece));
        }
    }
    let source_end = ids.len();
    ids.push(vocab.eos_id());

    let reference_span = match (&example.reference, use_reference) {
        (Some(reference), true) => {
            ids.push(vocab.sep_id());
            let start = ids.len();
            for word in reference {
                for piece in word_pieces(word) {
                    ids.push(vocab.id_or_unk(&piece));
                }
            }
            let end = ids.len();
            ids.push(vocab.eos_id());
            Some((start, end))
        }
        (None, true) => {
            return Err(KiwiError::Contract(
                "reference mode requested but the example has no reference".into(),
            ))
        }
        _ => None,
    };

    Ok(TokenizedInput {
        token_ids: ids,
        first_piece_index: first_piece,
        target_word_spans: spans,
        cls_index: 0,
        target_span: (target_start, target_end),
        source_span: (source_start, source_end),
        reference_span,
    })
}

/// Rebuilds the target words from the tokenized pieces. Inverse of
/// tokenization whenever every piece is in-vocabulary.
pub fn detokenize_target(input: &TokenizedInput, vocab: &Vocab) -> Vec<String> {
    input
        .target_word_spans
        .iter()
        .map(|&(s, e)| {
            input.token_ids[s..e]
                .iter()
                .map(|&id| vocab.piece(id).unwrap_or(UNK))
                .collect::<String>()
        })
        .collect()
}
