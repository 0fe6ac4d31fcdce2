//! PubTator abstract input: `PMID|t|title`, `PMID|a|abstract`, then one
//! mention line `PMID\tstart\tend\tsurface\ttype\tID` per annotation, with
//! character offsets into the title + " " + abstract concatenation.
//!
//! Abstracts are split into sentences on period-space boundaries behind a
//! conservative abbreviation guard, then tokenized on whitespace with edge
//! punctuation broken out; both choices are recorded in dataset metadata.
//! Concept IDs are parsed but unused.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::corpus::{
    AltLabelTable, DatasetMetadata, EntityMention, Label, MentionKey, Sentence, Split,
};
use crate::error::{Error, Result};

const ABBREVIATIONS: &[&str] = &[
    "al", "approx", "dr", "e.g", "etc", "fig", "figs", "i.e", "mr", "mrs", "ms", "no", "st", "vs",
];

struct RawMention {
    start: usize,
    end: usize,
    surface: String,
    type_name: String,
    line: usize,
}

struct Document {
    pmid: String,
    title: String,
    abstract_text: String,
    mentions: Vec<RawMention>,
    first_line: usize,
}

pub(crate) fn parse_file(
    path: &Path,
    dataset: &str,
    split: Split,
    labels: &mut BTreeSet<Label>,
    alt_labels: &mut AltLabelTable,
    metadata: &mut DatasetMetadata,
) -> Result<Vec<Sentence>> {
    let path_str = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(&path_str, e))?;
    let reader = BufReader::new(file);

    let mut docs: Vec<Document> = Vec::new();
    let mut seen_pmids: BTreeSet<String> = BTreeSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path_str, e))?;
        let lineno = idx + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        if let Some((pmid, rest)) = parse_text_line(trimmed, 't') {
            if !seen_pmids.insert(pmid.to_string()) {
                return Err(Error::DuplicateSentenceId {
                    id: pmid.to_string(),
                    split: split.as_str().into(),
                });
            }
            docs.push(Document {
                pmid: pmid.to_string(),
                title: rest.to_string(),
                abstract_text: String::new(),
                mentions: Vec::new(),
                first_line: lineno,
            });
            continue;
        }
        if let Some((pmid, rest)) = parse_text_line(trimmed, 'a') {
            let doc = docs.last_mut().filter(|d| d.pmid == pmid).ok_or_else(|| {
                Error::MalformedLine {
                    path: path_str.clone(),
                    line: lineno,
                    reason: format!("abstract line for {pmid} without matching title"),
                }
            })?;
            doc.abstract_text = rest.to_string();
            continue;
        }
        // Mention line: PMID \t start \t end \t surface \t type [\t concept-id]
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() < 5 {
            return Err(Error::MalformedLine {
                path: path_str.clone(),
                line: lineno,
                reason: format!("expected 5+ tab-separated fields, got {}", cols.len()),
            });
        }
        let doc = docs.last_mut().filter(|d| d.pmid == cols[0]).ok_or_else(|| {
            Error::MalformedLine {
                path: path_str.clone(),
                line: lineno,
                reason: format!("mention line for {} without matching title", cols[0]),
            }
        })?;
        let start: usize = cols[1].parse().map_err(|_| Error::MalformedLine {
            path: path_str.clone(),
            line: lineno,
            reason: format!("bad start offset {:?}", cols[1]),
        })?;
        let end: usize = cols[2].parse().map_err(|_| Error::MalformedLine {
            path: path_str.clone(),
            line: lineno,
            reason: format!("bad end offset {:?}", cols[2]),
        })?;
        if start >= end {
            return Err(Error::MalformedLine {
                path: path_str.clone(),
                line: lineno,
                reason: format!("empty mention span [{start}, {end})"),
            });
        }
        doc.mentions.push(RawMention {
            start,
            end,
            surface: cols[3].to_string(),
            type_name: cols[4].to_string(),
            line: lineno,
        });
    }

    let mut sentences = Vec::new();
    for doc in &docs {
        build_doc_sentences(doc, dataset, labels, alt_labels, metadata, &path_str, &mut sentences)?;
    }
    if sentences.is_empty() {
        return Err(Error::NoSentencesParsed { path: path_str });
    }
    Ok(sentences)
}

fn parse_text_line(line: &str, kind: char) -> Option<(&str, &str)> {
    let mut parts = line.splitn(3, '|');
    let pmid = parts.next()?;
    let k = parts.next()?;
    let rest = parts.next()?;
    if k.len() == 1 && k.starts_with(kind) && !pmid.is_empty() && pmid.chars().all(|c| c.is_ascii_digit()) {
        Some((pmid, rest))
    } else {
        None
    }
}

fn build_doc_sentences(
    doc: &Document,
    dataset: &str,
    labels: &mut BTreeSet<Label>,
    alt_labels: &mut AltLabelTable,
    metadata: &mut DatasetMetadata,
    path: &str,
    out: &mut Vec<Sentence>,
) -> Result<()> {
    let text = if doc.abstract_text.is_empty() {
        doc.title.clone()
    } else {
        format!("{} {}", doc.title, doc.abstract_text)
    };

    let sentence_ranges = split_sentences(&text);
    // (token, global char start, global char end) per sentence
    let mut token_rows: Vec<Vec<(String, usize, usize)>> = Vec::new();
    for &(s, e) in &sentence_ranges {
        token_rows.push(tokenize(&text[s..e], s));
    }

    // Group raw mentions by sentence, resolving duplicates and overlaps.
    let mut per_sentence: Vec<Vec<EntityMention>> = vec![Vec::new(); sentence_ranges.len()];
    let mut span_labels: BTreeMap<(usize, String, usize, usize), BTreeSet<String>> = BTreeMap::new();

    let mut raw: Vec<&RawMention> = doc.mentions.iter().collect();
    raw.sort_by_key(|m| (m.start, m.end, m.line));

    for m in raw {
        if m.end > text.len() {
            return Err(Error::SpanOutOfBounds {
                sentence_id: doc.pmid.clone(),
                start: m.start,
                end: m.end,
                len: text.len(),
            });
        }
        if text[m.start..m.end] != m.surface {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: m.line,
                reason: format!(
                    "surface {:?} does not match text at [{}, {}): {:?}",
                    m.surface,
                    m.start,
                    m.end,
                    &text[m.start..m.end]
                ),
            });
        }
        let Some(sent_idx) = sentence_ranges
            .iter()
            .position(|&(s, e)| m.start >= s && m.end <= e)
        else {
            // Mention straddles a sentence boundary; the splitter cannot
            // represent it, so drop and record.
            metadata.dropped_overlaps += 1;
            continue;
        };

        let tokens = &token_rows[sent_idx];
        let Some((tok_start, tok_end, snapped)) = char_span_to_tokens(tokens, m.start, m.end) else {
            metadata.dropped_overlaps += 1;
            continue;
        };
        if snapped {
            metadata.snapped_spans += 1;
        }

        let sentence_id = format!("{}:{}", doc.pmid, sent_idx);
        let label = Label::new(m.type_name.clone(), dataset);
        let key = (sent_idx, sentence_id.clone(), tok_start, tok_end);

        match span_labels.get_mut(&key) {
            Some(existing) => {
                // Same span seen before: extra types go to the side table.
                if existing.insert(m.type_name.clone()) {
                    labels.insert(label.clone());
                    alt_labels
                        .entry(MentionKey {
                            sentence_id,
                            start: tok_start,
                            end: tok_end,
                        })
                        .or_default()
                        .insert(label);
                }
            }
            None => {
                let overlapping = per_sentence[sent_idx]
                    .iter()
                    .any(|prev| prev.start < tok_end && tok_start < prev.end);
                if overlapping {
                    metadata.dropped_overlaps += 1;
                    continue;
                }
                span_labels.insert(key, BTreeSet::from([m.type_name.clone()]));
                labels.insert(label.clone());
                let token_strings: Vec<String> = tokens.iter().map(|t| t.0.clone()).collect();
                per_sentence[sent_idx].push(EntityMention::new(
                    &token_strings,
                    tok_start,
                    tok_end,
                    label,
                ));
            }
        }
    }

    for (idx, row) in token_rows.iter().enumerate() {
        if row.is_empty() {
            continue;
        }
        let id = format!("{}:{}", doc.pmid, idx);
        let tokens: Vec<String> = row.iter().map(|t| t.0.clone()).collect();
        let mentions = std::mem::take(&mut per_sentence[idx]);
        out.push(Sentence::new(id, tokens, mentions).map_err(|e| {
            Error::Dataset(format!(
                "{path}: document {} starting at line {}: {e}",
                doc.pmid, doc.first_line
            ))
        })?);
    }
    Ok(())
}

/// Byte ranges of sentences, split on ". " unless the word before the
/// period is a guarded abbreviation or a single initial.
fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut ranges = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i + 1 < bytes.len() {
        if bytes[i] == b'.' && bytes[i + 1] == b' ' && !guarded(&text[start..i]) {
            ranges.push((start, i + 1));
            start = i + 2;
            i += 2;
            continue;
        }
        i += 1;
    }
    if start < text.len() {
        ranges.push((start, text.len()));
    }
    ranges
}

fn guarded(prefix: &str) -> bool {
    let word = prefix
        .rsplit(|c: char| c.is_whitespace())
        .next()
        .unwrap_or("")
        .trim_start_matches(|c: char| c.is_ascii_punctuation() && c != '.');
    let word = word.trim_end_matches('.');
    if word.chars().count() == 1 && word.chars().all(|c| c.is_alphabetic()) {
        return true; // single initial, as in "J. Smith"
    }
    ABBREVIATIONS.contains(&word.to_ascii_lowercase().as_str())
}

/// Whitespace tokenization with leading/trailing punctuation split into
/// their own tokens; internal punctuation (hyphens, apostrophes) stays.
fn tokenize(sentence: &str, global_offset: usize) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut word_start = None;
    let bytes = sentence.as_bytes();
    let mut i = 0;
    while i <= bytes.len() {
        let is_space = i == bytes.len() || bytes[i].is_ascii_whitespace();
        match (word_start, is_space) {
            (None, false) => word_start = Some(i),
            (Some(ws), true) => {
                emit_word(&sentence[ws..i], global_offset + ws, &mut out);
                word_start = None;
            }
            _ => {}
        }
        i += 1;
    }
    out
}

fn emit_word(word: &str, offset: usize, out: &mut Vec<(String, usize, usize)>) {
    let chars: Vec<(usize, char)> = word.char_indices().collect();
    let mut lead = 0;
    while lead < chars.len() && chars[lead].1.is_ascii_punctuation() {
        lead += 1;
    }
    let mut trail = chars.len();
    while trail > lead && chars[trail - 1].1.is_ascii_punctuation() {
        trail -= 1;
    }
    if lead == chars.len() {
        // Pure punctuation word: each char is a token.
        for &(pos, c) in &chars {
            out.push((c.to_string(), offset + pos, offset + pos + c.len_utf8()));
        }
        return;
    }
    for &(pos, c) in &chars[..lead] {
        out.push((c.to_string(), offset + pos, offset + pos + c.len_utf8()));
    }
    let mid_start = chars[lead].0;
    let mid_end = if trail < chars.len() {
        chars[trail].0
    } else {
        word.len()
    };
    out.push((
        word[mid_start..mid_end].to_string(),
        offset + mid_start,
        offset + mid_end,
    ));
    for &(pos, c) in &chars[trail..] {
        out.push((c.to_string(), offset + pos, offset + pos + c.len_utf8()));
    }
}

/// Maps a character span to the covering token range; `snapped` reports
/// whether either boundary fell inside a token.
fn char_span_to_tokens(
    tokens: &[(String, usize, usize)],
    start: usize,
    end: usize,
) -> Option<(usize, usize, bool)> {
    let first = tokens.iter().position(|&(_, _, te)| te > start)?;
    let last = tokens.iter().rposition(|&(_, ts, _)| ts < end)?;
    if last < first {
        return None;
    }
    let snapped = tokens[first].1 != start || tokens[last].2 != end;
    Some((first, last + 1, snapped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn parse(content: &str) -> Result<(Vec<Sentence>, BTreeSet<Label>, AltLabelTable, DatasetMetadata)> {
        let f = write_tmp(content);
        let mut labels = BTreeSet::new();
        let mut alt = AltLabelTable::new();
        let mut meta = DatasetMetadata::default();
        let s = parse_file(f.path(), "toy", Split::Test, &mut labels, &mut alt, &mut meta)?;
        Ok((s, labels, alt, meta))
    }

    #[test]
    fn splits_title_and_abstract_sentences() {
        let text = "123|t|Aspirin in headache.\n123|a|We studied aspirin. It reduced headache severity.\n123\t0\t7\tAspirin\tChemical\tD001\n123\t32\t39\taspirin\tChemical\tD001\n123\t52\t60\theadache\tDisease\tD002\n";
        let (sentences, labels, _, meta) = parse(text).unwrap();
        assert_eq!(sentences.len(), 3);
        assert_eq!(labels.len(), 2);
        assert_eq!(meta.snapped_spans, 0);
        assert_eq!(sentences[0].mentions[0].surface, "Aspirin");
        assert_eq!(sentences[1].mentions[0].surface, "aspirin");
        assert_eq!(sentences[2].mentions[0].surface, "headache");
        assert_eq!(sentences[2].id, "123:2");
    }

    #[test]
    fn abbreviation_guard_prevents_split() {
        let text = "5|t|A title.\n5|a|Reported by Smith et al. in prior work.\n";
        let (sentences, ..) = parse(text).unwrap();
        // title + one abstract sentence: "et al." must not split.
        assert_eq!(sentences.len(), 2);
    }

    #[test]
    fn same_span_second_type_goes_to_alt_table() {
        let text = "7|t|DM study.\n7|a|DM was observed.\n7\t0\t2\tDM\tSpecificDisease\tD1\n7\t0\t2\tDM\tModifier\tD1\n";
        let (sentences, labels, alt, _) = parse(text).unwrap();
        assert_eq!(sentences[0].mentions.len(), 1);
        assert_eq!(sentences[0].mentions[0].label.name, "SpecificDisease");
        assert_eq!(labels.len(), 2);
        let key = MentionKey {
            sentence_id: "7:0".into(),
            start: 0,
            end: 1,
        };
        assert!(alt.get(&key).unwrap().iter().any(|l| l.name == "Modifier"));
    }

    #[test]
    fn surface_mismatch_is_reported_with_line() {
        let text = "9|t|Bad offsets.\n9|a|Nothing here.\n9\t0\t3\tXXX\tChemical\tD1\n";
        let err = parse(text).unwrap_err();
        match err {
            Error::MalformedLine { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_pmid_is_rejected() {
        let text = "4|t|One.\n4|a|Body here.\n4|t|Two.\n4|a|Body again.\n";
        assert!(matches!(
            parse(text),
            Err(Error::DuplicateSentenceId { .. })
        ));
    }

    #[test]
    fn tokenizer_keeps_internal_punctuation() {
        let toks = tokenize("B-cell non-Hodgkin's lymphoma (severe).", 0);
        let words: Vec<&str> = toks.iter().map(|t| t.0.as_str()).collect();
        assert_eq!(
            words,
            ["B-cell", "non-Hodgkin's", "lymphoma", "(", "severe", ")", "."]
        );
    }

    #[test]
    fn snapped_span_is_counted() {
        // Mention covers "Aspir" only: inside the token "Aspirin".
        let text = "11|t|Aspirin works.\n11|a|More text here.\n11\t0\t5\tAspir\tChemical\tD1\n";
        let (sentences, _, _, meta) = parse(text).unwrap();
        assert_eq!(meta.snapped_spans, 1);
        assert_eq!(sentences[0].mentions[0].surface, "Aspirin");
    }
}
