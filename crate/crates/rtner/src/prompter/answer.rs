//! The invertible answer grammar.
//!
//! rt styles, bit-exact per line: `</M>` + surface + `|` + (`True`|`False`)
//! + `|` + rationale + `<M>`, with literal `|` in a surface escaped as
//! `\|`. Parsing never aborts: exact matches are `ok`, recoverable
//! deviations (missing markers around an intact triple, symbol
//! normalizations such as `\"` -> `'`) are `recovered`, everything else is
//! `wrong_template` with the raw text preserved.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityMention, Label, Sentence};
use crate::error::{Error, Result};
use crate::prompter::{pos_rationale, PromptStyle};

/// Marker pairs for the symbol-tagged output style, assigned to labels in
/// sorted name order.
pub const MARKER_PAIRS: [(&str, &str); 6] = [
    ("@@", "##"),
    ("&&", "%%"),
    ("((", "))"),
    ("[[", "]]"),
    ("^^", "$$"),
    ("<<", ">>"),
];

const NO_ENTITIES: &str = "no entities";
// Internal sentinels; never occur in model output or corpus text.
const PIPE_SENTINEL: char = '\u{1}';
const ESC_OPEN: char = '\u{2}';
const ESC_CLOSE: char = '\u{3}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Ok,
    Recovered,
    WrongTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedLine {
    /// Surface text exactly as produced by the model.
    pub raw_surface: String,
    /// Surface after symbol normalization; used for grounding.
    pub surface: String,
    pub verdict: bool,
    pub label: Option<Label>,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub query_id: String,
    pub lines: Vec<ParsedLine>,
    /// Grounded spans; filled by [`ground_to_spans`], always empty for
    /// wrong-template responses.
    pub mentions: Vec<EntityMention>,
    pub parse_status: ParseStatus,
    pub normalizations: Vec<String>,
    /// Verdict-true lines whose rationale named an unknown label; they are
    /// downgraded to verdict-only.
    pub unknown_labels: usize,
    pub raw_text: Option<String>,
}

impl ParsedPrediction {
    fn wrong_template(text: &str) -> Self {
        ParsedPrediction {
            query_id: String::new(),
            lines: Vec::new(),
            mentions: Vec::new(),
            parse_status: ParseStatus::WrongTemplate,
            normalizations: Vec::new(),
            unknown_labels: 0,
            raw_text: Some(text.to_string()),
        }
    }
}

/// Inputs shared by the renderer: the experiment's label list (fixes the
/// marker assignment and branch order) and, for sentence re-emission
/// styles, the query tokens.
pub struct AnswerContext<'a> {
    pub labels: &'a [Label],
    pub sentence_tokens: Option<&'a [String]>,
}

/// Symbol normalization applied to parsed surfaces before matching:
/// `\"` -> `'`, `\\` -> `\`, Unicode quotes -> ASCII apostrophe, repeated
/// whitespace collapsed. Returns the fixed string and which rules fired.
pub fn normalize_symbols(s: &str) -> (String, Vec<&'static str>) {
    let mut fired = Vec::new();
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.peek() {
                Some('"') => {
                    chars.next();
                    out.push('\'');
                    if !fired.contains(&"escaped-quote") {
                        fired.push("escaped-quote");
                    }
                }
                Some('\\') => {
                    chars.next();
                    out.push('\\');
                    if !fired.contains(&"double-backslash") {
                        fired.push("double-backslash");
                    }
                }
                _ => out.push('\\'),
            },
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '`' => {
                out.push('\'');
                if !fired.contains(&"unicode-quote") {
                    fired.push("unicode-quote");
                }
            }
            _ => out.push(c),
        }
    }
    let collapsed: String = {
        let mut c = String::with_capacity(out.len());
        let mut last_space = false;
        for ch in out.chars() {
            if ch.is_whitespace() {
                if !last_space {
                    c.push(' ');
                }
                last_space = true;
            } else {
                c.push(ch);
                last_space = false;
            }
        }
        c
    };
    if collapsed != out {
        fired.push("whitespace-collapse");
    }
    (collapsed, fired)
}

fn escape_pipes(s: &str) -> String {
    s.replace('|', "\\|")
}

fn protect_pipes(s: &str) -> String {
    s.replace("\\|", &PIPE_SENTINEL.to_string())
}

fn restore_pipes(s: &str) -> String {
    s.replace(PIPE_SENTINEL, "|")
}

const MARKER_CHARS: &str = "@#&%()[]^$<>";

/// Every individual marker character is backslash-escaped so that literal
/// text can never pair up with an adjacent marker.
fn escape_markers(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if MARKER_CHARS.contains(c) {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

fn protect_marker_escapes(s: &str) -> String {
    let mut out = s.to_string();
    for (i, c) in MARKER_CHARS.chars().enumerate() {
        out = out.replace(&format!("\\{c}"), &format!("{ESC_OPEN}{i}{ESC_CLOSE}"));
    }
    out
}

fn restore_marker_escapes(s: &str) -> String {
    let mut out = s.to_string();
    for (i, c) in MARKER_CHARS.chars().enumerate() {
        out = out.replace(&format!("{ESC_OPEN}{i}{ESC_CLOSE}"), &c.to_string());
    }
    out
}

/// Marker assignment is canonical: sorted distinct label names.
fn marker_index(labels: &[Label]) -> Vec<String> {
    let mut names: Vec<String> = labels
        .iter()
        .map(|l| l.name.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    names.sort();
    names
}

/// Renders the answer block for a mention set in the given style. The
/// context carries the label list and, for sentence re-emission, tokens.
pub fn render_answer(
    mentions: &[EntityMention],
    style: PromptStyle,
    negatives: &[String],
    ctx: &AnswerContext<'_>,
) -> Result<String> {
    for m in mentions {
        if m.surface.is_empty() {
            return Err(Error::StyleInputMismatch {
                style: style.as_str().into(),
                what: "non-empty mention surfaces".into(),
            });
        }
    }
    match style {
        PromptStyle::RtChoice1 | PromptStyle::RtChoice2 | PromptStyle::P2LabelingOnly => {
            let mut lines = Vec::new();
            if mentions.is_empty() {
                lines.push(NO_ENTITIES.to_string());
            }
            for m in mentions {
                lines.push(format!(
                    "</M>{}|True|as it is {}<M>",
                    escape_pipes(&m.surface),
                    m.label.name
                ));
            }
            for token in negatives {
                lines.push(format!(
                    "</M>{}|False|{}<M>",
                    escape_pipes(token),
                    pos_rationale(token)
                ));
            }
            Ok(lines.join("\n"))
        }
        PromptStyle::Cot => {
            let mut lines = Vec::new();
            if mentions.is_empty() {
                lines.push(NO_ENTITIES.to_string());
            }
            for m in mentions {
                lines.push(format!(
                    "{} | True | as it is {}",
                    escape_pipes(&m.surface),
                    m.label.name
                ));
            }
            for token in negatives {
                lines.push(format!(
                    "{} | False | {}",
                    escape_pipes(token),
                    pos_rationale(token)
                ));
            }
            Ok(lines.join("\n"))
        }
        PromptStyle::Vanilla => {
            let mut parts = Vec::new();
            let order = if ctx.labels.is_empty() {
                mentions
                    .iter()
                    .map(|m| m.label.clone())
                    .collect::<Vec<_>>()
                    .into_iter()
                    .fold(Vec::new(), |mut acc, l| {
                        if !acc.contains(&l) {
                            acc.push(l);
                        }
                        acc
                    })
            } else {
                ctx.labels.to_vec()
            };
            for label in &order {
                let surfaces: Vec<&str> = mentions
                    .iter()
                    .filter(|m| &m.label == label)
                    .map(|m| m.surface.as_str())
                    .collect();
                if !surfaces.is_empty() {
                    parts.push(format!(
                        "{}: {}",
                        serde_json::to_string(&label.name)?,
                        serde_json::to_string(&surfaces)?
                    ));
                }
            }
            Ok(format!("{{{}}}", parts.join(", ")))
        }
        PromptStyle::GptnerMarkers => {
            let names = marker_index(ctx.labels);
            let pair_of = |label: &Label| -> Result<(&'static str, &'static str)> {
                let idx = names
                    .iter()
                    .position(|n| n == &label.name)
                    .ok_or_else(|| Error::StyleInputMismatch {
                        style: style.as_str().into(),
                        what: format!("label {} in the context label list", label.name),
                    })?;
                if idx >= MARKER_PAIRS.len() {
                    return Err(Error::TooManyLabelsForMarkers(MARKER_PAIRS.len(), names.len()));
                }
                Ok(MARKER_PAIRS[idx])
            };
            match ctx.sentence_tokens {
                Some(tokens) => {
                    let mut sorted: Vec<&EntityMention> = mentions.iter().collect();
                    sorted.sort_by_key(|m| (m.start, m.end));
                    let mut out: Vec<String> = Vec::with_capacity(tokens.len());
                    let mut i = 0;
                    while i < tokens.len() {
                        if let Some(m) = sorted.iter().find(|m| m.start == i) {
                            let (open, close) = pair_of(&m.label)?;
                            let body = tokens[m.start..m.end]
                                .iter()
                                .map(|t| escape_markers(t))
                                .collect::<Vec<_>>()
                                .join(" ");
                            out.push(format!("{open}{body}{close}"));
                            i = m.end;
                        } else {
                            out.push(escape_markers(&tokens[i]));
                            i += 1;
                        }
                    }
                    Ok(out.join(" "))
                }
                None => {
                    let mut out = Vec::with_capacity(mentions.len());
                    for m in mentions {
                        let (open, close) = pair_of(&m.label)?;
                        out.push(format!("{open}{}{close}", escape_markers(&m.surface)));
                    }
                    Ok(out.join(" "))
                }
            }
        }
        PromptStyle::TreeOfThought => {
            let order = if ctx.labels.is_empty() {
                mentions
                    .iter()
                    .map(|m| m.label.clone())
                    .fold(Vec::new(), |mut acc, l| {
                        if !acc.contains(&l) {
                            acc.push(l);
                        }
                        acc
                    })
            } else {
                ctx.labels.to_vec()
            };
            let mut lines = Vec::new();
            for label in &order {
                lines.push(format!("[{}]", label.name));
                let of_label: Vec<&EntityMention> =
                    mentions.iter().filter(|m| &m.label == label).collect();
                if of_label.is_empty() {
                    lines.push("none".to_string());
                }
                for m in of_label {
                    lines.push(format!(
                        "{} | True | as it is {}",
                        escape_pipes(&m.surface),
                        m.label.name
                    ));
                }
            }
            Ok(lines.join("\n"))
        }
    }
}

enum LineOutcome {
    Parsed(ParsedLine, Vec<&'static str>, bool), // line, normalizations, recovered
    NoEntities,
    Broken,
}

fn resolve_label(name: &str, labels: &BTreeSet<Label>) -> Option<Label> {
    labels
        .iter()
        .find(|l| l.name == name)
        .or_else(|| labels.iter().find(|l| l.name.eq_ignore_ascii_case(name)))
        .cloned()
}

fn label_from_rationale(rationale: &str, labels: &BTreeSet<Label>) -> Option<Label> {
    rationale
        .strip_prefix("as it is ")
        .and_then(|name| resolve_label(name.trim(), labels))
}

fn triple_to_line(
    surface_field: &str,
    verdict_field: &str,
    rationale_field: &str,
    labels: &BTreeSet<Label>,
) -> Option<(ParsedLine, Vec<&'static str>, bool)> {
    let mut recovered = false;
    let verdict = match verdict_field {
        "True" => true,
        "False" => false,
        other if other.trim().eq_ignore_ascii_case("true") => {
            recovered = true;
            true
        }
        other if other.trim().eq_ignore_ascii_case("false") => {
            recovered = true;
            false
        }
        _ => return None,
    };
    let raw_surface = restore_pipes(surface_field);
    let rationale = restore_pipes(rationale_field);
    let (surface, fired) = normalize_symbols(&raw_surface);
    let label = label_from_rationale(&rationale, labels);
    Some((
        ParsedLine {
            raw_surface,
            surface,
            verdict,
            label,
            rationale,
        },
        fired,
        recovered,
    ))
}

fn parse_rt_line(line: &str, labels: &BTreeSet<Label>) -> LineOutcome {
    if line == NO_ENTITIES {
        return LineOutcome::NoEntities;
    }
    let protected = protect_pipes(line);
    if let Some(inner) = protected
        .strip_prefix("</M>")
        .and_then(|r| r.strip_suffix("<M>"))
    {
        if inner.contains("</M>") || inner.contains("<M>") {
            return LineOutcome::Broken;
        }
        let parts: Vec<&str> = inner.splitn(3, '|').collect();
        if parts.len() != 3 {
            return LineOutcome::Broken;
        }
        match triple_to_line(parts[0], parts[1], parts[2], labels) {
            Some((line, fired, recovered)) => LineOutcome::Parsed(line, fired, recovered),
            None => LineOutcome::Broken,
        }
    } else if protected.contains("</M>") || protected.contains("<M>") {
        LineOutcome::Broken
    } else {
        // Missing markers but an intact triple is recoverable.
        let parts: Vec<&str> = protected.splitn(3, '|').map(str::trim).collect();
        if parts.len() != 3 {
            return LineOutcome::Broken;
        }
        match triple_to_line(parts[0], parts[1], parts[2], labels) {
            Some((line, fired, _)) => LineOutcome::Parsed(line, fired, true),
            None => LineOutcome::Broken,
        }
    }
}

fn parse_cot_line(line: &str, labels: &BTreeSet<Label>) -> LineOutcome {
    if line == NO_ENTITIES {
        return LineOutcome::NoEntities;
    }
    let protected = protect_pipes(line);
    let exact: Vec<&str> = protected.splitn(3, " | ").collect();
    if exact.len() == 3 && !exact[1].contains('|') {
        if let Some((line, fired, recovered)) = triple_to_line(exact[0], exact[1], exact[2], labels)
        {
            return LineOutcome::Parsed(line, fired, recovered);
        }
    }
    let loose: Vec<&str> = protected.splitn(3, '|').map(str::trim).collect();
    if loose.len() == 3 {
        if let Some((line, fired, _)) = triple_to_line(loose[0], loose[1], loose[2], labels) {
            return LineOutcome::Parsed(line, fired, true);
        }
    }
    LineOutcome::Broken
}

/// Parses arbitrary completion text against a style grammar. Never errors;
/// failures are encoded in `parse_status`.
pub fn parse_answer(text: &str, style: PromptStyle, labels: &BTreeSet<Label>) -> ParsedPrediction {
    match style {
        PromptStyle::RtChoice1 | PromptStyle::RtChoice2 | PromptStyle::P2LabelingOnly => {
            parse_line_grammar(text, labels, parse_rt_line)
        }
        PromptStyle::Cot => parse_line_grammar(text, labels, parse_cot_line),
        PromptStyle::Vanilla => parse_vanilla(text, labels),
        PromptStyle::GptnerMarkers => parse_markers(text, labels),
        PromptStyle::TreeOfThought => parse_tree(text, labels),
    }
}

fn parse_line_grammar(
    text: &str,
    labels: &BTreeSet<Label>,
    line_parser: fn(&str, &BTreeSet<Label>) -> LineOutcome,
) -> ParsedPrediction {
    let mut lines = Vec::new();
    let mut normalizations: Vec<String> = Vec::new();
    let mut unknown_labels = 0;
    let mut status = ParseStatus::Ok;

    for raw_line in text.lines() {
        let line = raw_line.trim();
        if line.is_empty() {
            continue;
        }
        match line_parser(line, labels) {
            LineOutcome::NoEntities => {}
            LineOutcome::Parsed(parsed, fired, recovered) => {
                if recovered || !fired.is_empty() {
                    status = ParseStatus::Recovered;
                }
                for f in fired {
                    normalizations.push(format!("{f}: {line}"));
                }
                if parsed.verdict && parsed.label.is_none() {
                    unknown_labels += 1;
                }
                lines.push(parsed);
            }
            LineOutcome::Broken => return ParsedPrediction::wrong_template(text),
        }
    }
    ParsedPrediction {
        query_id: String::new(),
        lines,
        mentions: Vec::new(),
        parse_status: status,
        normalizations,
        unknown_labels,
        raw_text: None,
    }
}

fn parse_vanilla(text: &str, labels: &BTreeSet<Label>) -> ParsedPrediction {
    let trimmed = text.trim();
    let (value, recovered) = match serde_json::from_str::<serde_json::Value>(trimmed) {
        Ok(v) => (v, false),
        Err(_) => {
            let Some(start) = trimmed.find('{') else {
                return ParsedPrediction::wrong_template(text);
            };
            let Some(end) = trimmed.rfind('}') else {
                return ParsedPrediction::wrong_template(text);
            };
            match serde_json::from_str::<serde_json::Value>(&trimmed[start..=end]) {
                Ok(v) => (v, true),
                Err(_) => return ParsedPrediction::wrong_template(text),
            }
        }
    };
    let Some(object) = value.as_object() else {
        return ParsedPrediction::wrong_template(text);
    };

    let mut lines = Vec::new();
    let mut normalizations = Vec::new();
    let mut unknown_labels = 0;
    let mut status = if recovered {
        ParseStatus::Recovered
    } else {
        ParseStatus::Ok
    };
    for (key, entry) in object {
        let Some(array) = entry.as_array() else {
            return ParsedPrediction::wrong_template(text);
        };
        let label = resolve_label(key, labels);
        if label.is_none() {
            unknown_labels += array.len();
        }
        for item in array {
            let Some(raw_surface) = item.as_str() else {
                return ParsedPrediction::wrong_template(text);
            };
            let (surface, fired) = normalize_symbols(raw_surface);
            if !fired.is_empty() {
                status = ParseStatus::Recovered;
                for f in fired {
                    normalizations.push(format!("{f}: {raw_surface}"));
                }
            }
            lines.push(ParsedLine {
                raw_surface: raw_surface.to_string(),
                surface,
                verdict: true,
                label: label.clone(),
                rationale: String::new(),
            });
        }
    }
    ParsedPrediction {
        query_id: String::new(),
        lines,
        mentions: Vec::new(),
        parse_status: status,
        normalizations,
        unknown_labels,
        raw_text: None,
    }
}

fn parse_markers(text: &str, labels: &BTreeSet<Label>) -> ParsedPrediction {
    let names: Vec<String> = labels.iter().map(|l| l.name.clone()).collect();
    let protected = protect_marker_escapes(text.trim());
    let mut lines = Vec::new();
    let mut normalizations = Vec::new();
    let mut status = ParseStatus::Ok;

    let mut rest = protected.as_str();
    while !rest.is_empty() {
        let next_open = MARKER_PAIRS
            .iter()
            .take(names.len())
            .enumerate()
            .filter_map(|(i, (open, _))| rest.find(open).map(|pos| (pos, i)))
            .min();
        let Some((pos, pair_idx)) = next_open else {
            // No further opens; stray closes are template errors.
            if MARKER_PAIRS
                .iter()
                .take(names.len())
                .any(|(_, close)| rest.contains(close))
            {
                return ParsedPrediction::wrong_template(text);
            }
            break;
        };
        let (open, close) = MARKER_PAIRS[pair_idx];
        let after_open = &rest[pos + open.len()..];
        let Some(close_pos) = after_open.find(close) else {
            return ParsedPrediction::wrong_template(text);
        };
        let inner = &after_open[..close_pos];
        if MARKER_PAIRS
            .iter()
            .take(names.len())
            .any(|(o, _)| inner.contains(o))
        {
            return ParsedPrediction::wrong_template(text);
        }
        let raw_surface = restore_marker_escapes(inner);
        let (surface, fired) = normalize_symbols(&raw_surface);
        if !fired.is_empty() {
            status = ParseStatus::Recovered;
            for f in fired {
                normalizations.push(format!("{f}: {raw_surface}"));
            }
        }
        let label_name = &names[pair_idx];
        lines.push(ParsedLine {
            raw_surface,
            surface,
            verdict: true,
            label: resolve_label(label_name, labels),
            rationale: String::new(),
        });
        rest = &after_open[close_pos + close.len()..];
    }

    ParsedPrediction {
        query_id: String::new(),
        lines,
        mentions: Vec::new(),
        parse_status: status,
        normalizations,
        unknown_labels: 0,
        raw_text: None,
    }
}

fn parse_tree(text: &str, labels: &BTreeSet<Label>) -> ParsedPrediction {
    let mut lines = Vec::new();
    let mut normalizations: Vec<String> = Vec::new();
    let mut unknown_labels = 0;
    let mut status = ParseStatus::Ok;
    let mut in_branch = false;

    for raw_line in text.lines() {
        let line = raw_line.trim();
        if line.is_empty() || line == "none" {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if resolve_label(name, labels).is_none() {
                return ParsedPrediction::wrong_template(text);
            }
            in_branch = true;
            continue;
        }
        if !in_branch {
            return ParsedPrediction::wrong_template(text);
        }
        match parse_cot_line(line, labels) {
            LineOutcome::NoEntities => {}
            LineOutcome::Parsed(parsed, fired, recovered) => {
                if recovered || !fired.is_empty() {
                    status = ParseStatus::Recovered;
                }
                for f in fired {
                    normalizations.push(format!("{f}: {line}"));
                }
                if parsed.verdict && parsed.label.is_none() {
                    unknown_labels += 1;
                }
                lines.push(parsed);
            }
            LineOutcome::Broken => return ParsedPrediction::wrong_template(text),
        }
    }
    ParsedPrediction {
        query_id: String::new(),
        lines,
        mentions: Vec::new(),
        parse_status: status,
        normalizations,
        unknown_labels,
        raw_text: None,
    }
}

#[derive(Clone, Copy)]
enum MatchMode {
    Exact,
    CaseInsensitive,
    PunctNormalized,
}

fn token_eq(a: &str, b: &str, mode: MatchMode) -> bool {
    match mode {
        MatchMode::Exact => a == b,
        MatchMode::CaseInsensitive => a.eq_ignore_ascii_case(b),
        MatchMode::PunctNormalized => {
            let strip = |s: &str| {
                s.trim_matches(|c: char| c.is_ascii_punctuation())
                    .to_ascii_lowercase()
            };
            strip(a) == strip(b)
        }
    }
}

fn find_spans(tokens: &[String], needle: &[&str], mode: MatchMode) -> Vec<(usize, usize)> {
    if needle.is_empty() || needle.len() > tokens.len() {
        return Vec::new();
    }
    (0..=tokens.len() - needle.len())
        .filter(|&i| {
            needle
                .iter()
                .enumerate()
                .all(|(j, n)| token_eq(&tokens[i + j], n, mode))
        })
        .map(|i| (i, i + needle.len()))
        .collect()
}

/// Grounds each verdict-true line with a known label onto token spans of
/// the query sentence: exact match first, then case-insensitive, then
/// punctuation-normalized; every matched span receives the label.
pub fn ground_to_spans(pred: &mut ParsedPrediction, sentence: &Sentence) {
    if pred.parse_status == ParseStatus::WrongTemplate {
        pred.mentions.clear();
        return;
    }
    let mut mentions: Vec<EntityMention> = Vec::new();
    for line in &pred.lines {
        let Some(label) = &line.label else { continue };
        if !line.verdict {
            continue;
        }
        let needle: Vec<&str> = line.surface.split_whitespace().collect();
        let spans = [
            MatchMode::Exact,
            MatchMode::CaseInsensitive,
            MatchMode::PunctNormalized,
        ]
        .into_iter()
        .map(|mode| find_spans(&sentence.tokens, &needle, mode))
        .find(|spans| !spans.is_empty())
        .unwrap_or_default();
        for (start, end) in spans {
            let mention = EntityMention::new(&sentence.tokens, start, end, label.clone());
            if !mentions.contains(&mention) {
                mentions.push(mention);
            }
        }
    }
    mentions.sort_by_key(|m| (m.start, m.end, m.label.name.clone()));
    pred.mentions = mentions;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn label(name: &str) -> Label {
        Label::new(name, "toy")
    }

    fn label_set(names: &[&str]) -> BTreeSet<Label> {
        names.iter().map(|n| label(n)).collect()
    }

    fn mention(tokens: &[String], start: usize, end: usize, l: &str) -> EntityMention {
        EntityMention::new(tokens, start, end, label(l))
    }

    #[test]
    fn renders_the_exact_rt_line() {
        let tokens: Vec<String> = vec!["WD".into(), "rest".into()];
        let m = mention(&tokens, 0, 1, "Modifier");
        let ctx = AnswerContext {
            labels: &[label("Modifier")],
            sentence_tokens: None,
        };
        let block = render_answer(&[m], PromptStyle::RtChoice2, &[], &ctx).unwrap();
        assert_eq!(block, "</M>WD|True|as it is Modifier<M>");
    }

    #[test]
    fn empty_mentions_render_no_entities_line() {
        let ctx = AnswerContext {
            labels: &[label("Modifier")],
            sentence_tokens: None,
        };
        let block = render_answer(&[], PromptStyle::RtChoice2, &[], &ctx).unwrap();
        assert_eq!(block, "no entities");
        let parsed = parse_answer(&block, PromptStyle::RtChoice2, &label_set(&["Modifier"]));
        assert_eq!(parsed.parse_status, ParseStatus::Ok);
        assert!(parsed.lines.is_empty());
    }

    #[test]
    fn exact_rt_line_parses_ok() {
        let parsed = parse_answer(
            "</M>WD|True|as it is Modifier<M>",
            PromptStyle::RtChoice2,
            &label_set(&["Modifier"]),
        );
        assert_eq!(parsed.parse_status, ParseStatus::Ok);
        assert_eq!(parsed.lines.len(), 1);
        assert_eq!(parsed.lines[0].surface, "WD");
        assert!(parsed.lines[0].verdict);
        assert_eq!(parsed.lines[0].label.as_ref().unwrap().name, "Modifier");
    }

    #[test]
    fn escaped_quote_surface_is_recovered_and_normalized() {
        let parsed = parse_answer(
            "</M>B-cell non-Hodgkin\\\"s lymphoma|True|as it is Disease<M>",
            PromptStyle::RtChoice2,
            &label_set(&["Disease"]),
        );
        assert_eq!(parsed.parse_status, ParseStatus::Recovered);
        assert_eq!(parsed.lines[0].surface, "B-cell non-Hodgkin's lymphoma");
        assert_eq!(parsed.lines[0].raw_surface, "B-cell non-Hodgkin\\\"s lymphoma");
        assert!(parsed
            .normalizations
            .iter()
            .any(|n| n.starts_with("escaped-quote")));
    }

    #[test]
    fn trailing_garbage_after_line_is_wrong_template() {
        let parsed = parse_answer(
            "</M>WD|True|as it is Modifier<M> cannot be homologous to </M>",
            PromptStyle::RtChoice2,
            &label_set(&["Modifier"]),
        );
        assert_eq!(parsed.parse_status, ParseStatus::WrongTemplate);
        assert!(parsed.mentions.is_empty());
        assert!(parsed.raw_text.is_some());
    }

    #[test]
    fn bare_triple_is_recovered() {
        let parsed = parse_answer(
            "WD|True|as it is Modifier",
            PromptStyle::RtChoice2,
            &label_set(&["Modifier"]),
        );
        assert_eq!(parsed.parse_status, ParseStatus::Recovered);
        assert_eq!(parsed.lines[0].surface, "WD");
    }

    #[test]
    fn unknown_label_downgrades_to_verdict_only() {
        let parsed = parse_answer(
            "</M>WD|True|as it is Frobnicator<M>",
            PromptStyle::RtChoice2,
            &label_set(&["Modifier"]),
        );
        assert_eq!(parsed.parse_status, ParseStatus::Ok);
        assert_eq!(parsed.unknown_labels, 1);
        assert!(parsed.lines[0].label.is_none());
    }

    #[test]
    fn negative_lines_never_produce_mentions() {
        let tokens: Vec<String> = vec!["impact".into(), "WD".into()];
        let sentence = Sentence::new("q", tokens, vec![]).unwrap();
        let mut parsed = parse_answer(
            "</M>impact|False|as it is a verb<M>\n</M>WD|True|as it is Modifier<M>",
            PromptStyle::RtChoice2,
            &label_set(&["Modifier"]),
        );
        ground_to_spans(&mut parsed, &sentence);
        assert_eq!(parsed.mentions.len(), 1);
        assert_eq!(parsed.mentions[0].surface, "WD");
    }

    #[test]
    fn grounding_matches_all_occurrences() {
        let tokens: Vec<String> = ["a", "WD", "b", "WD"].iter().map(|s| s.to_string()).collect();
        let sentence = Sentence::new("q", tokens, vec![]).unwrap();
        let mut parsed = parse_answer(
            "</M>WD|True|as it is Modifier<M>",
            PromptStyle::RtChoice2,
            &label_set(&["Modifier"]),
        );
        ground_to_spans(&mut parsed, &sentence);
        assert_eq!(parsed.mentions.len(), 2);
    }

    #[test]
    fn grounding_falls_back_to_case_insensitive() {
        let tokens: Vec<String> = ["Aspirin", "helps"].iter().map(|s| s.to_string()).collect();
        let sentence = Sentence::new("q", tokens, vec![]).unwrap();
        let mut parsed = parse_answer(
            "</M>aspirin|True|as it is Chemical<M>",
            PromptStyle::RtChoice2,
            &label_set(&["Chemical"]),
        );
        ground_to_spans(&mut parsed, &sentence);
        assert_eq!(parsed.mentions.len(), 1);
        assert_eq!(parsed.mentions[0].surface, "Aspirin");
    }

    #[test]
    fn markers_round_trip_with_sentence() {
        let tokens: Vec<String> = ["Aspirin", "caused", "renal", "failure"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let labels = [label("Chemical"), label("Disease")];
        let mentions = vec![
            mention(&tokens, 0, 1, "Chemical"),
            mention(&tokens, 2, 4, "Disease"),
        ];
        let ctx = AnswerContext {
            labels: &labels,
            sentence_tokens: Some(&tokens),
        };
        let block = render_answer(&mentions, PromptStyle::GptnerMarkers, &[], &ctx).unwrap();
        assert_eq!(block, "@@Aspirin## caused &&renal failure%%");
        let parsed = parse_answer(&block, PromptStyle::GptnerMarkers, &label_set(&["Chemical", "Disease"]));
        assert_eq!(parsed.parse_status, ParseStatus::Ok);
        let pairs: Vec<(String, String)> = parsed
            .lines
            .iter()
            .map(|l| (l.surface.clone(), l.label.as_ref().unwrap().name.clone()))
            .collect();
        assert_eq!(
            pairs,
            vec![
                ("Aspirin".to_string(), "Chemical".to_string()),
                ("renal failure".to_string(), "Disease".to_string())
            ]
        );
    }

    #[test]
    fn unclosed_marker_is_wrong_template() {
        let parsed = parse_answer(
            "@@Aspirin caused pain",
            PromptStyle::GptnerMarkers,
            &label_set(&["Chemical", "Disease"]),
        );
        assert_eq!(parsed.parse_status, ParseStatus::WrongTemplate);
    }

    #[test]
    fn vanilla_round_trip_and_recovery() {
        let parsed = parse_answer(
            r#"{"Chemical": ["Aspirin"], "Disease": ["renal failure"]}"#,
            PromptStyle::Vanilla,
            &label_set(&["Chemical", "Disease"]),
        );
        assert_eq!(parsed.parse_status, ParseStatus::Ok);
        assert_eq!(parsed.lines.len(), 2);

        let recovered = parse_answer(
            "Sure! {\"Chemical\": [\"Aspirin\"]} hope that helps",
            PromptStyle::Vanilla,
            &label_set(&["Chemical"]),
        );
        assert_eq!(recovered.parse_status, ParseStatus::Recovered);

        let broken = parse_answer(
            "\"Chemical\": [\"Aspirin\"",
            PromptStyle::Vanilla,
            &label_set(&["Chemical"]),
        );
        assert_eq!(broken.parse_status, ParseStatus::WrongTemplate);
    }

    #[test]
    fn tree_branches_parse() {
        let text = "[Chemical]\nAspirin | True | as it is Chemical\n[Disease]\nnone";
        let parsed = parse_answer(text, PromptStyle::TreeOfThought, &label_set(&["Chemical", "Disease"]));
        assert_eq!(parsed.parse_status, ParseStatus::Ok);
        assert_eq!(parsed.lines.len(), 1);
    }

    fn surface_strategy() -> impl Strategy<Value = String> {
        // Realistic mention surfaces: 1-3 tokens, internal punctuation
        // allowed, pipes included to stress escaping; no backslashes,
        // angle brackets, or unicode quotes (normalization targets).
        let token = proptest::string::string_regex("[a-zA-Z0-9'|@#&%()-]{1,8}").unwrap();
        prop::collection::vec(token, 1..=3).prop_map(|toks| toks.join(" "))
    }

    fn mentions_strategy() -> impl Strategy<Value = Vec<(String, usize)>> {
        prop::collection::vec((surface_strategy(), 0usize..3), 0..5)
    }

    proptest! {
        /// Grammar round trip across every style: the (surface, label)
        /// pairs of render_answer(x) parse back exactly.
        #[test]
        fn grammar_round_trip(specs in mentions_strategy()) {
            let names = ["Chemical", "Disease", "Modifier"];
            let labels: Vec<Label> = names.iter().map(|n| label(n)).collect();
            let set = label_set(&names);

            // Build a token stream realizing the mention list.
            let mut tokens: Vec<String> = Vec::new();
            let mut built: Vec<EntityMention> = Vec::new();
            for (i, (surface, label_idx)) in specs.iter().enumerate() {
                tokens.push(format!("f{i}"));
                let start = tokens.len();
                tokens.extend(surface.split(' ').map(str::to_string));
                built.push(EntityMention {
                    start,
                    end: tokens.len(),
                    label: labels[*label_idx].clone(),
                    surface: surface.clone(),
                });
            }
            tokens.push("tail".to_string());

            for style in PromptStyle::all() {
                let ctx = AnswerContext { labels: &labels, sentence_tokens: Some(&tokens) };
                let block = render_answer(&built, style, &[], &ctx).unwrap();
                let parsed = parse_answer(&block, style, &set);
                prop_assert_ne!(
                    parsed.parse_status,
                    ParseStatus::WrongTemplate,
                    "style {:?} failed on block:\n{}", style, block
                );
                let mut got: Vec<(String, String)> = parsed
                    .lines
                    .iter()
                    .filter(|l| l.verdict)
                    .map(|l| (l.surface.clone(), l.label.clone().unwrap().name))
                    .collect();
                let mut want: Vec<(String, String)> = built
                    .iter()
                    .map(|m| (m.surface.clone(), m.label.name.clone()))
                    .collect();
                got.sort();
                want.sort();
                prop_assert_eq!(got, want, "style {:?} block:\n{}", style, block);
            }
        }

        /// Symbol normalization is idempotent.
        #[test]
        fn normalization_is_idempotent(s in "[ -~]{0,40}") {
            let (once, _) = normalize_symbols(&s);
            let (twice, fired) = normalize_symbols(&once);
            prop_assert_eq!(&once, &twice);
            // A second pass may only fire if the first pass produced a
            // backslash sequence; with ASCII input it must not.
            if !once.contains('\\') {
                prop_assert!(fired.is_empty());
            }
        }
    }
}
