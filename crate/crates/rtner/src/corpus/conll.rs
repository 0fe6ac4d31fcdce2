//! CoNLL-style IO-tagged input: one `<token>\t<tag>` per line, blank line
//! between sentences.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::corpus::{io_to_mentions, Label, Sentence, Split, TagSequence};
use crate::error::{Error, Result};

pub(crate) fn parse_file(
    path: &Path,
    dataset: &str,
    split: Split,
    labels: &mut BTreeSet<Label>,
) -> Result<Vec<Sentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();

    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, tags: &mut Vec<String>, sentences: &mut Vec<Sentence>| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let id = format!("{}:{}:{}", dataset, split.as_str(), sentences.len());
        let seq = TagSequence {
            tags: std::mem::take(tags),
            lossy: false,
        };
        let toks = std::mem::take(tokens);
        let mentions = io_to_mentions(&seq, &toks, dataset)?;
        for m in &mentions {
            labels.insert(m.label.clone());
        }
        sentences.push(Sentence::new(id, toks, mentions)?);
        Ok(())
    };

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path_str, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut sentences)?;
            continue;
        }
        let (token, tag) = split_columns(trimmed).ok_or_else(|| Error::MalformedLine {
            path: path_str.clone(),
            line: lineno,
            reason: "expected <token>\\t<tag>".into(),
        })?;
        if token.is_empty() {
            return Err(Error::MalformedLine {
                path: path_str.clone(),
                line: lineno,
                reason: "empty token".into(),
            });
        }
        validate_tag(tag, &path_str, lineno)?;
        tokens.push(token.to_string());
        tags.push(tag.to_string());
    }
    flush(&mut tokens, &mut tags, &mut sentences)?;

    if sentences.is_empty() {
        return Err(Error::NoSentencesParsed { path: path_str });
    }
    Ok(sentences)
}

fn split_columns(line: &str) -> Option<(&str, &str)> {
    // Tab is the documented separator; tolerate runs of spaces.
    if let Some((tok, tag)) = line.split_once('\t') {
        return Some((tok.trim(), tag.trim()));
    }
    let mut it = line.split_whitespace();
    match (it.next(), it.next(), it.next()) {
        (Some(tok), Some(tag), None) => Some((tok, tag)),
        _ => None,
    }
}

fn validate_tag(tag: &str, path: &str, line: usize) -> Result<()> {
    if tag == "O" {
        return Ok(());
    }
    if let Some(name) = tag.strip_prefix("I-") {
        if !name.is_empty() && name.chars().all(|c| c.is_ascii_alphabetic()) {
            return Ok(());
        }
        return Err(Error::MalformedLine {
            path: path.into(),
            line,
            reason: format!("label name in {tag:?} must match [A-Za-z]+"),
        });
    }
    Err(Error::UnknownTagPrefix {
        path: path.into(),
        line,
        tag: tag.into(),
    })
}
