//! Scoring and error analysis: micro-F1 under the token-level IO view and
//! mention-level exact match, plus a classifier that buckets every
//! (gold, prediction) discrepancy into the error taxonomy.
//!
//! token_io is the primary reported metric; mention_exact is always
//! computed alongside.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{mentions_to_io, AltLabelTable, EntityMention, MentionKey, Sentence};
use crate::error::{Error, Result};
use crate::prompter::{ParseStatus, ParsedPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    TokenIo,
    MentionExact,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::TokenIo => "token_io",
            Scheme::MentionExact => "mention_exact",
        }
    }
}

/// Failure categories from the error taxonomy; `wrong_template` applies
/// per response, the others per mention discrepancy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCategory {
    UnableToExtract,
    Misidentification,
    ClassCollision,
    MultiLabelEntity,
    SymbolGeneration,
    WrongTemplate,
}

impl ErrorCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorCategory::UnableToExtract => "unable_to_extract",
            ErrorCategory::Misidentification => "misidentification",
            ErrorCategory::ClassCollision => "class_collision",
            ErrorCategory::MultiLabelEntity => "multi_label_entity",
            ErrorCategory::SymbolGeneration => "symbol_generation",
            ErrorCategory::WrongTemplate => "wrong_template",
        }
    }
}

/// Sentence id -> spans known to be true entities the gold annotation
/// missed; required to separate class collisions from plain mistakes.
pub type UnannotatedTable = BTreeMap<String, Vec<(usize, usize)>>;

#[derive(Debug, Clone, Default)]
pub struct ScoreOptions {
    /// Credit a prediction whose label matches any alternative gold label.
    pub credit_alt_labels: bool,
    pub alt_labels: AltLabelTable,
    pub unannotated: UnannotatedTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: Scheme,
    pub micro: MicroScores,
    pub per_label: BTreeMap<String, LabelScore>,
    pub error_histogram: BTreeMap<ErrorCategory, usize>,
    /// Discrepancies outside the taxonomy.
    pub n_other: usize,
    pub n_sentences: usize,
    pub n_wrong_template: usize,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

/// Per-token label assignment from a mention list; the earlier mention
/// wins when predicted spans conflict.
fn tags_from_mentions(len: usize, mentions: &[EntityMention]) -> Vec<Option<String>> {
    let mut tags: Vec<Option<String>> = vec![None; len];
    let mut sorted: Vec<&EntityMention> = mentions.iter().collect();
    sorted.sort_by_key(|m| (m.start, m.end));
    for m in sorted {
        for slot in tags.iter_mut().take(m.end.min(len)).skip(m.start) {
            if slot.is_none() {
                *slot = Some(m.label.name.clone());
            }
        }
    }
    tags
}

/// Scores predictions against gold. Predictions align to gold by query
/// id; a missing prediction counts as empty, a duplicate or unknown id is
/// an error.
pub fn score(
    gold: &[Sentence],
    predictions: &[ParsedPrediction],
    scheme: Scheme,
    options: &ScoreOptions,
) -> Result<EvalReport> {
    let gold_ids: BTreeSet<&str> = gold.iter().map(|s| s.id.as_str()).collect();
    let mut by_id: BTreeMap<&str, &ParsedPrediction> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(p.query_id.as_str(), p).is_some() {
            return Err(Error::DuplicateQueryId(p.query_id.clone()));
        }
        if !gold_ids.contains(p.query_id.as_str()) {
            return Err(Error::UnknownQueryId(p.query_id.clone()));
        }
    }

    let empty = ParsedPrediction {
        query_id: String::new(),
        lines: Vec::new(),
        mentions: Vec::new(),
        parse_status: ParseStatus::Ok,
        normalizations: Vec::new(),
        unknown_labels: 0,
        raw_text: None,
    };

    #[derive(Default)]
    struct Counts {
        tp: usize,
        fp: usize,
        fn_: usize,
        support: usize,
    }
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    let mut n_wrong_template = 0usize;
    let mut error_histogram: BTreeMap<ErrorCategory, usize> = BTreeMap::new();
    let mut n_other = 0usize;

    for sentence in gold {
        let prediction = by_id.get(sentence.id.as_str()).copied().unwrap_or(&empty);
        if prediction.parse_status == ParseStatus::WrongTemplate {
            n_wrong_template += 1;
        }
        for record in classify_errors(sentence, prediction, &options.alt_labels, &options.unannotated)
        {
            match record.category {
                Some(cat) => *error_histogram.entry(cat).or_insert(0) += 1,
                None => n_other += 1,
            }
        }

        match scheme {
            Scheme::TokenIo => {
                let gold_tags = mentions_to_io(sentence)?;
                let pred_tags = tags_from_mentions(sentence.tokens.len(), &prediction.mentions);
                let alt_at = |index: usize| -> BTreeSet<&str> {
                    sentence
                        .mentions
                        .iter()
                        .filter(|m| index >= m.start && index < m.end)
                        .flat_map(|m| {
                            options
                                .alt_labels
                                .get(&MentionKey {
                                    sentence_id: sentence.id.clone(),
                                    start: m.start,
                                    end: m.end,
                                })
                                .into_iter()
                                .flatten()
                                .map(|l| l.name.as_str())
                        })
                        .collect()
                };
                for (i, gold_tag) in gold_tags.tags.iter().enumerate() {
                    let g = gold_tag.strip_prefix("I-");
                    let p = pred_tags[i].as_deref();
                    match (g, p) {
                        (Some(g), Some(p)) if g == p => {
                            let c = per_label.entry(g.to_string()).or_default();
                            c.tp += 1;
                            c.support += 1;
                        }
                        (Some(g), Some(p)) => {
                            if options.credit_alt_labels && alt_at(i).contains(p) {
                                let c = per_label.entry(p.to_string()).or_default();
                                c.tp += 1;
                                per_label.entry(g.to_string()).or_default().support += 1;
                            } else {
                                per_label.entry(p.to_string()).or_default().fp += 1;
                                let c = per_label.entry(g.to_string()).or_default();
                                c.fn_ += 1;
                                c.support += 1;
                            }
                        }
                        (Some(g), None) => {
                            let c = per_label.entry(g.to_string()).or_default();
                            c.fn_ += 1;
                            c.support += 1;
                        }
                        (None, Some(p)) => {
                            per_label.entry(p.to_string()).or_default().fp += 1;
                        }
                        (None, None) => {}
                    }
                }
            }
            Scheme::MentionExact => {
                let gold_set: BTreeSet<(usize, usize, &str)> = sentence
                    .mentions
                    .iter()
                    .map(|m| (m.start, m.end, m.label.name.as_str()))
                    .collect();
                let gold_spans: BTreeSet<(usize, usize)> =
                    sentence.mentions.iter().map(|m| (m.start, m.end)).collect();
                for m in &sentence.mentions {
                    per_label.entry(m.label.name.clone()).or_default().support += 1;
                }
                let mut matched: BTreeSet<(usize, usize, &str)> = BTreeSet::new();
                let mut pred_set: Vec<(usize, usize, &str)> = prediction
                    .mentions
                    .iter()
                    .map(|m| (m.start, m.end, m.label.name.as_str()))
                    .collect();
                pred_set.sort_unstable();
                pred_set.dedup();
                for (start, end, label) in pred_set {
                    let exact = gold_set.contains(&(start, end, label));
                    let alt_ok = options.credit_alt_labels
                        && gold_spans.contains(&(start, end))
                        && options
                            .alt_labels
                            .get(&MentionKey {
                                sentence_id: sentence.id.clone(),
                                start,
                                end,
                            })
                            .map(|alts| alts.iter().any(|l| l.name == label))
                            .unwrap_or(false);
                    if exact || alt_ok {
                        matched.insert((start, end, label));
                        per_label.entry(label.to_string()).or_default().tp += 1;
                    } else {
                        per_label.entry(label.to_string()).or_default().fp += 1;
                    }
                }
                for (start, end, label) in gold_set {
                    let credited = matched.contains(&(start, end, label))
                        || (options.credit_alt_labels
                            && matched.iter().any(|&(s, e, _)| s == start && e == end));
                    if !credited {
                        per_label.entry(label.to_string()).or_default().fn_ += 1;
                    }
                }
            }
        }
    }

    let (tp, fp, fn_) = per_label
        .values()
        .fold((0, 0, 0), |(a, b, c), v| (a + v.tp, b + v.fp, c + v.fn_));
    let (precision, recall, f1) = prf(tp, fp, fn_);
    let per_label = per_label
        .into_iter()
        .map(|(name, c)| {
            let (p, r, f) = prf(c.tp, c.fp, c.fn_);
            (
                name,
                LabelScore {
                    precision: p,
                    recall: r,
                    f1: f,
                    support: c.support,
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                },
            )
        })
        .collect();

    Ok(EvalReport {
        scheme,
        micro: MicroScores {
            precision,
            recall,
            f1,
        },
        per_label,
        error_histogram,
        n_other,
        n_sentences: gold.len(),
        n_wrong_template,
    })
}

/// One classified discrepancy, ready for the error dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub query_id: String,
    /// `None` lands in the residual `other` bucket.
    pub category: Option<ErrorCategory>,
    pub gold_surface: String,
    pub predicted_surface: String,
    pub raw_response_excerpt: String,
}

fn overlaps(a: (usize, usize), b: (usize, usize)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Buckets every discrepancy between one gold sentence and its prediction.
///
/// Rules: a wrong-template response is one category hit by itself; a gold
/// mention with zero predicted-token overlap is unable_to_extract; a
/// predicted span overlapping a same-label gold span unequally is
/// misidentification; a predicted span matching no gold but listed in the
/// unannotated side table is class_collision; a label disagreement on a
/// gold span whose alternative labels include the prediction is
/// multi_label_entity; a surface that equals gold only after symbol
/// normalization is symbol_generation. Anything else is residual.
pub fn classify_errors(
    gold: &Sentence,
    prediction: &ParsedPrediction,
    alt_labels: &AltLabelTable,
    unannotated: &UnannotatedTable,
) -> Vec<ErrorRecord> {
    let mut records = Vec::new();
    let excerpt = || {
        prediction
            .raw_text
            .as_deref()
            .unwrap_or("")
            .chars()
            .take(120)
            .collect::<String>()
    };

    if prediction.parse_status == ParseStatus::WrongTemplate {
        records.push(ErrorRecord {
            query_id: gold.id.clone(),
            category: Some(ErrorCategory::WrongTemplate),
            gold_surface: String::new(),
            predicted_surface: String::new(),
            raw_response_excerpt: excerpt(),
        });
    }

    // Symbol generation is detected on parsed lines: the raw surface
    // differs from a gold surface that the normalized surface matches.
    let gold_surfaces: BTreeSet<&str> = gold.mentions.iter().map(|m| m.surface.as_str()).collect();
    for line in &prediction.lines {
        if line.verdict
            && line.raw_surface != line.surface
            && gold_surfaces.contains(line.surface.as_str())
            && !gold_surfaces.contains(line.raw_surface.as_str())
        {
            records.push(ErrorRecord {
                query_id: gold.id.clone(),
                category: Some(ErrorCategory::SymbolGeneration),
                gold_surface: line.surface.clone(),
                predicted_surface: line.raw_surface.clone(),
                raw_response_excerpt: String::new(),
            });
        }
    }

    for g in &gold.mentions {
        let overlap = prediction
            .mentions
            .iter()
            .any(|p| overlaps((g.start, g.end), (p.start, p.end)));
        if !overlap {
            records.push(ErrorRecord {
                query_id: gold.id.clone(),
                category: Some(ErrorCategory::UnableToExtract),
                gold_surface: g.surface.clone(),
                predicted_surface: String::new(),
                raw_response_excerpt: excerpt(),
            });
            continue;
        }
        // Same span, different label, listed among the alternatives.
        let key = MentionKey {
            sentence_id: gold.id.clone(),
            start: g.start,
            end: g.end,
        };
        for p in &prediction.mentions {
            if p.start == g.start && p.end == g.end && p.label != g.label {
                if let Some(alts) = alt_labels.get(&key) {
                    if alts.contains(&p.label) {
                        records.push(ErrorRecord {
                            query_id: gold.id.clone(),
                            category: Some(ErrorCategory::MultiLabelEntity),
                            gold_surface: g.surface.clone(),
                            predicted_surface: p.surface.clone(),
                            raw_response_excerpt: String::new(),
                        });
                    }
                }
            }
        }
    }

    for p in &prediction.mentions {
        let same_label_gold: Vec<&EntityMention> = gold
            .mentions
            .iter()
            .filter(|g| g.label == p.label && overlaps((g.start, g.end), (p.start, p.end)))
            .collect();
        let exact = same_label_gold
            .iter()
            .any(|g| g.start == p.start && g.end == p.end);
        if exact {
            continue;
        }
        if !same_label_gold.is_empty() {
            records.push(ErrorRecord {
                query_id: gold.id.clone(),
                category: Some(ErrorCategory::Misidentification),
                gold_surface: same_label_gold[0].surface.clone(),
                predicted_surface: p.surface.clone(),
                raw_response_excerpt: String::new(),
            });
            continue;
        }
        let any_overlap = gold
            .mentions
            .iter()
            .any(|g| overlaps((g.start, g.end), (p.start, p.end)));
        if !any_overlap {
            let known = unannotated
                .get(&gold.id)
                .map(|spans| spans.iter().any(|&(s, e)| s == p.start && e == p.end))
                .unwrap_or(false);
            records.push(ErrorRecord {
                query_id: gold.id.clone(),
                category: known.then_some(ErrorCategory::ClassCollision),
                gold_surface: String::new(),
                predicted_surface: p.surface.clone(),
                raw_response_excerpt: String::new(),
            });
        } else {
            // Overlapping span with a different label and no alternative
            // justification: residual unless already counted as
            // multi-label above.
            let counted = records.iter().any(|r| {
                r.category == Some(ErrorCategory::MultiLabelEntity)
                    && r.predicted_surface == p.surface
            });
            if !counted {
                records.push(ErrorRecord {
                    query_id: gold.id.clone(),
                    category: None,
                    gold_surface: String::new(),
                    predicted_surface: p.surface.clone(),
                    raw_response_excerpt: String::new(),
                });
            }
        }
    }

    records
}

/// Plain-text table of a report, one row per label under the micro row.
pub fn report_to_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("scheme: {}\n", report.scheme.as_str()));
    out.push_str(&format!(
        "{:<24} {:>9} {:>9} {:>9} {:>9}\n",
        "label", "P", "R", "F1", "support"
    ));
    out.push_str(&format!(
        "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
        "micro",
        report.micro.precision,
        report.micro.recall,
        report.micro.f1,
        report.per_label.values().map(|l| l.support).sum::<usize>()
    ));
    for (name, s) in &report.per_label {
        out.push_str(&format!(
            "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9}\n",
            name, s.precision, s.recall, s.f1, s.support
        ));
    }
    out.push_str(&format!(
        "sentences: {}  wrong_template: {}\n",
        report.n_sentences, report.n_wrong_template
    ));
    if !report.error_histogram.is_empty() || report.n_other > 0 {
        let mut parts: Vec<String> = report
            .error_histogram
            .iter()
            .map(|(cat, n)| format!("{}={}", cat.as_str(), n))
            .collect();
        if report.n_other > 0 {
            parts.push(format!("other={}", report.n_other));
        }
        out.push_str(&format!("errors: {}\n", parts.join(" ")));
    }
    out
}

/// JSONL error dump, one record per discrepancy.
pub fn write_error_dump(path: &Path, records: &[ErrorRecord]) -> Result<()> {
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r)?);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}
