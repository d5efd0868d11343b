//! QE corpus files: UTF-8 TSV with header
//! `lp<TAB>src<TAB>mt<TAB>score[<TAB>tags][<TAB>ref]`.
//! Tags are space-separated `OK`/`BAD` literals aligned to target words.

use std::fs;
use std::path::Path;

use crate::data::{QEExample, Tag};
use crate::error::{KiwiError, Result};

/// What the score column means and whether a tags column is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    /// Direct assessment scores, used as-is.
    Da,
    /// HTER in [0,1]; validated on parse.
    Hter,
    /// MQM scores, used as-is.
    Mqm,
    /// Word-level data: tags column required.
    Tags,
}

impl Schema {
    pub fn requires_tags(&self) -> bool {
        matches!(self, Schema::Tags)
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> KiwiError {
    KiwiError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses a QE TSV file. Errors carry 1-based line numbers.
pub fn parse_qe_tsv(path: &Path, schema: Schema) -> Result<Vec<QEExample>> {
    if !path.is_file() {
        return Err(KiwiError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 4 || cols[0] != "lp" || cols[1] != "src" || cols[2] != "mt" || cols[3] != "score" {
        return Err(parse_err(
            path,
            1,
            format!("header must start with lp\\tsrc\\tmt\\tscore, got {header:?}"),
        ));
    }
    let mut tags_col = None;
    let mut ref_col = None;
    for (i, c) in cols.iter().enumerate().skip(4) {
        match *c {
            "tags" if tags_col.is_none() && ref_col.is_none() => tags_col = Some(i),
            "ref" if ref_col.is_none() => ref_col = Some(i),
            other => return Err(parse_err(path, 1, format!("unexpected header column {other:?}"))),
        }
    }
    if schema.requires_tags() && tags_col.is_none() {
        return Err(parse_err(path, 1, "schema requires a tags column"));
    }

    let mut out = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} columns, got {}", cols.len(), fields.len()),
            ));
        }
        let lp = fields[0].to_string();
        let source: Vec<String> = fields[1].split_whitespace().map(String::from).collect();
        let target: Vec<String> = fields[2].split_whitespace().map(String::from).collect();
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| parse_err(path, lineno, format!("non-numeric score {:?}", fields[3])))?;
        if !score.is_finite() {
            return Err(parse_err(path, lineno, "non-finite score"));
        }
        if matches!(schema, Schema::Hter) && !(0.0..=1.0).contains(&score) {
            return Err(parse_err(path, lineno, format!("HTER score {score} outside [0,1]")));
        }

        let word_tags = match tags_col {
            Some(c) => {
                let tags: Result<Vec<Tag>> = fields[c].split_whitespace().map(Tag::parse).collect();
                let tags = tags.map_err(|e| parse_err(path, lineno, e.to_string()))?;
                if tags.len() != target.len() {
                    return Err(parse_err(
                        path,
                        lineno,
                        format!("{} tags for {} target words", tags.len(), target.len()),
                    ));
                }
                Some(tags)
            }
            None => None,
        };
        let reference = ref_col.map(|c| fields[c].split_whitespace().map(String::from).collect());

        let ex = QEExample {
            lp,
            source,
            target,
            reference,
            sentence_score: score,
            word_tags,
        };
        ex.validate().map_err(|e| parse_err(path, lineno, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes examples in the same TSV layout `parse_qe_tsv` reads. Column set
/// is taken from the first example (tags/ref present or not) and must be
/// consistent across the file.
pub fn write_qe_tsv(path: &Path, examples: &[QEExample]) -> Result<()> {
    let with_tags = examples.first().is_some_and(|e| e.word_tags.is_some());
    let with_ref = examples.first().is_some_and(|e| e.reference.is_some());
    let mut header = String::from("lp\tsrc\tmt\tscore");
    if with_tags {
        header.push_str("\ttags");
    }
    if with_ref {
        header.push_str("\tref");
    }
    let mut text = header;
    text.push('\n');
    for ex in examples {
        if ex.word_tags.is_some() != with_tags || ex.reference.is_some() != with_ref {
            return Err(KiwiError::Contract(
                "mixed tag/ref presence across examples in write_qe_tsv".into(),
            ));
        }
        text.push_str(&ex.lp);
        text.push('\t');
        text.push_str(&ex.source.join(" "));
        text.push('\t');
        text.push_str(&ex.target.join(" "));
        text.push('\t');
        text.push_str(&format_score(ex.sentence_score));
        if let Some(tags) = &ex.word_tags {
            text.push('\t');
            let strs: Vec<&str> = tags.iter().map(Tag::as_str).collect();
            text.push_str(&strs.join(" "));
        }
        if let Some(reference) = &ex.reference {
            text.push('\t');
            text.push_str(&reference.join(" "));
        }
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Shortest round-trip decimal form, stable across runs.
pub fn format_score(x: f64) -> String {
    let mut s = format!("{x}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}
