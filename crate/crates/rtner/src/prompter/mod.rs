//! Prompt rendering and answer parsing for every studied output style.
//!
//! Instruction wording lives in versioned template files; reports cite the
//! sha256 of the template bytes. The answer grammar is invertible: for any
//! well-formed mention set, `parse_answer(render_answer(x))` reconstructs
//! the (surface, label) pairs exactly.

mod answer;

pub use answer::{
    ground_to_spans, normalize_symbols, parse_answer, render_answer, AnswerContext, ParseStatus,
    ParsedLine, ParsedPrediction, MARKER_PAIRS,
};

use sha2::{Digest, Sha256};

use crate::corpus::{Label, Sentence};
use crate::error::{Error, Result};

/// Output styles compared in the experiments. `RtChoice1` demonstrations
/// carry positive and negative judgment lines; `RtChoice2` positive only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Vanilla,
    Cot,
    RtChoice1,
    RtChoice2,
    GptnerMarkers,
    TreeOfThought,
    P2LabelingOnly,
}

impl PromptStyle {
    pub fn all() -> [PromptStyle; 7] {
        [
            PromptStyle::Vanilla,
            PromptStyle::Cot,
            PromptStyle::RtChoice1,
            PromptStyle::RtChoice2,
            PromptStyle::GptnerMarkers,
            PromptStyle::TreeOfThought,
            PromptStyle::P2LabelingOnly,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PromptStyle::Vanilla => "vanilla",
            PromptStyle::Cot => "cot",
            PromptStyle::RtChoice1 => "rt_choice1",
            PromptStyle::RtChoice2 => "rt_choice2",
            PromptStyle::GptnerMarkers => "gptner_markers",
            PromptStyle::TreeOfThought => "tree_of_thought",
            PromptStyle::P2LabelingOnly => "p2_labeling_only",
        }
    }

    fn template(&self) -> &'static str {
        match self {
            PromptStyle::Vanilla => include_str!("../../templates/vanilla.txt"),
            PromptStyle::Cot => include_str!("../../templates/cot.txt"),
            PromptStyle::RtChoice1 => include_str!("../../templates/rt_choice1.txt"),
            PromptStyle::RtChoice2 => include_str!("../../templates/rt_choice2.txt"),
            PromptStyle::GptnerMarkers => include_str!("../../templates/gptner_markers.txt"),
            PromptStyle::TreeOfThought => include_str!("../../templates/tree_of_thought.txt"),
            PromptStyle::P2LabelingOnly => include_str!("../../templates/p2_labeling_only.txt"),
        }
    }

    /// sha256 of the template bytes, embedded in run reports.
    pub fn template_hash(&self) -> String {
        sha256_hex(self.template().as_bytes())
    }
}

impl std::str::FromStr for PromptStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PromptStyle::all()
            .into_iter()
            .find(|style| style.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt style {s:?}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub const LABEL_IDENTIFY_TEMPLATE: &str = include_str!("../../templates/label_identify.txt");

pub fn label_identify_template_hash() -> String {
    sha256_hex(LABEL_IDENTIFY_TEMPLATE.as_bytes())
}

/// Renders the label pre-identification prompt for a query sentence.
pub fn render_label_identify(query: &Sentence, labels: &[Label]) -> Result<String> {
    if labels.is_empty() {
        return Err(Error::NoLabels);
    }
    let names: Vec<&str> = labels.iter().map(|l| l.name.as_str()).collect();
    Ok(LABEL_IDENTIFY_TEMPLATE
        .replace("{{labels}}", &names.join(", "))
        .replace("{{query}}", &query.text()))
}

/// Demonstrations are capped to keep the rendered prompt under this many
/// whitespace-delimited words; the query is never truncated.
pub const DEFAULT_PROMPT_WORD_BUDGET: usize = 3000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub instruction: String,
    pub demonstrations: Vec<(String, String)>,
    pub query: String,
    pub style: PromptStyle,
    pub label_names: Vec<String>,
    pub warnings: Vec<String>,
    text: String,
}

impl Prompt {
    /// The fully assembled prompt text sent to the model.
    pub fn text(&self) -> &str {
        &self.text
    }
}

pub fn render_prompt(
    style: PromptStyle,
    query: &Sentence,
    demos: &[Sentence],
    labels: &[Label],
) -> Result<Prompt> {
    render_prompt_budgeted(style, query, demos, labels, DEFAULT_PROMPT_WORD_BUDGET)
}

/// Renders a full prompt: instruction, per-demonstration answer blocks in
/// the style grammar, and the query. Demonstrations are dropped from the
/// end when the word budget would be exceeded, with a warning.
pub fn render_prompt_budgeted(
    style: PromptStyle,
    query: &Sentence,
    demos: &[Sentence],
    labels: &[Label],
    word_budget: usize,
) -> Result<Prompt> {
    if labels.is_empty() {
        return Err(Error::NoLabels);
    }
    if demos.is_empty() && style != PromptStyle::P2LabelingOnly {
        return Err(Error::StyleInputMismatch {
            style: style.as_str().into(),
            what: "at least one demonstration sentence".into(),
        });
    }
    if style == PromptStyle::GptnerMarkers && labels.len() > MARKER_PAIRS.len() {
        return Err(Error::TooManyLabelsForMarkers(MARKER_PAIRS.len(), labels.len()));
    }

    let label_names: Vec<String> = labels.iter().map(|l| l.name.clone()).collect();
    let negatives = if style == PromptStyle::RtChoice1 {
        select_negatives(demos)
    } else {
        Vec::new()
    };

    let mut demonstrations: Vec<(String, String)> = Vec::with_capacity(demos.len());
    let label_set: std::collections::BTreeSet<Label> = labels.iter().cloned().collect();
    for (i, demo) in demos.iter().enumerate() {
        let ctx = AnswerContext {
            labels,
            sentence_tokens: Some(&demo.tokens),
        };
        let demo_negatives: Vec<String> = negatives
            .get(i)
            .cloned()
            .map(|n| vec![n])
            .unwrap_or_default();
        let block = render_answer(&demo.mentions, style, &demo_negatives, &ctx)?;
        // Self-consistency: every demonstration answer block must parse.
        let parsed = parse_answer(&block, style, &label_set);
        if parsed.parse_status == ParseStatus::WrongTemplate {
            return Err(Error::Dataset(format!(
                "demonstration {} rendered an unparseable answer block",
                demo.id
            )));
        }
        demonstrations.push((demo.text(), block));
    }

    let mut warnings = Vec::new();
    let query_text = query.text();
    let instruction_words = count_words(style.template());
    let query_words = count_words(&query_text) + 4;
    let mut budget = word_budget
        .saturating_sub(instruction_words)
        .saturating_sub(query_words);
    let mut kept: Vec<(String, String)> = Vec::new();
    for (text, block) in &demonstrations {
        let cost = count_words(text) + count_words(block) + 3;
        if cost > budget {
            warnings.push(format!(
                "word budget {word_budget} reached: kept {} of {} demonstrations",
                kept.len(),
                demonstrations.len()
            ));
            break;
        }
        budget -= cost;
        kept.push((text.clone(), block.clone()));
    }

    let demo_blocks: Vec<String> = kept
        .iter()
        .map(|(text, block)| format!("Sentence: {text}\nAnswer:\n{block}"))
        .collect();

    let mut body = style
        .template()
        .replace("{{labels}}", &label_names.join(", "))
        .replace("{{query}}", &query_text);
    if style == PromptStyle::GptnerMarkers {
        // Marker assignment is canonical: sorted label names, as in the
        // answer grammar.
        let mut sorted_names = label_names.clone();
        sorted_names.sort();
        sorted_names.dedup();
        let legend: Vec<String> = sorted_names
            .iter()
            .enumerate()
            .map(|(i, name)| format!("{name}: {}span{}", MARKER_PAIRS[i].0, MARKER_PAIRS[i].1))
            .collect();
        body = body.replace("{{marker_legend}}", &legend.join("; "));
    }
    if style == PromptStyle::P2LabelingOnly {
        let surfaces: Vec<&str> = query.mentions.iter().map(|m| m.surface.as_str()).collect();
        body = body.replace("{{mentions}}", &surfaces.join("; "));
    }
    // Demonstrations substitute last so literal braces in answer blocks
    // cannot collide with placeholders.
    let text = body.replace("{{demonstrations}}", &demo_blocks.join("\n"));

    Ok(Prompt {
        instruction: style.template().to_string(),
        demonstrations: kept,
        query: query_text,
        style,
        label_names,
        warnings,
        text,
    })
}

fn count_words(s: &str) -> usize {
    s.split_whitespace().count()
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on",
    "or", "that", "the", "this", "to", "was", "were", "with",
];

/// One negative token per demonstration sentence: the highest-frequency
/// non-stopword token outside any mention (frequency over all demo
/// sentences, ties to the lexicographically smallest token).
fn select_negatives(demos: &[Sentence]) -> Vec<String> {
    let mut freq: std::collections::BTreeMap<&str, usize> = std::collections::BTreeMap::new();
    for demo in demos {
        for (i, tok) in demo.tokens.iter().enumerate() {
            if outside_mentions(demo, i) && is_candidate(tok) {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
    }
    demos
        .iter()
        .map(|demo| {
            demo.tokens
                .iter()
                .enumerate()
                .filter(|(i, tok)| outside_mentions(demo, *i) && is_candidate(tok))
                .map(|(_, tok)| (std::cmp::Reverse(freq[tok.as_str()]), tok.clone()))
                .min()
                .map(|(_, tok)| tok)
                .unwrap_or_else(|| "it".to_string())
        })
        .collect()
}

fn outside_mentions(sentence: &Sentence, index: usize) -> bool {
    sentence
        .mentions
        .iter()
        .all(|m| index < m.start || index >= m.end)
}

fn is_candidate(token: &str) -> bool {
    token.len() > 2
        && token.chars().all(|c| c.is_ascii_alphabetic())
        && !STOPWORDS.contains(&token.to_ascii_lowercase().as_str())
}

/// Part-of-speech-style rationale for negative lines. The lookup covers a
/// few seen words; everything else is a common word.
pub(crate) fn pos_rationale(token: &str) -> String {
    let tagged = [
        ("impact", "verb"),
        ("studied", "verb"),
        ("observed", "verb"),
        ("increased", "verb"),
        ("decreased", "verb"),
        ("severe", "adjective"),
        ("chronic", "adjective"),
        ("patients", "noun"),
        ("treatment", "noun"),
    ];
    let lower = token.to_ascii_lowercase();
    for (word, pos) in tagged {
        if lower == word {
            return format!("as it is a {pos}");
        }
    }
    if lower.ends_with("ing") || lower.ends_with("ed") {
        "as it is a verb".to_string()
    } else if lower.ends_with("ly") {
        "as it is an adverb".to_string()
    } else {
        "as it is a common word".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityMention;
    use std::collections::BTreeSet;

    fn label(name: &str) -> Label {
        Label::new(name, "toy")
    }

    fn sent(id: &str, words: &[&str], spans: &[(usize, usize, &str)]) -> Sentence {
        let tokens: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let mentions = spans
            .iter()
            .map(|&(s, e, l)| EntityMention::new(&tokens, s, e, label(l)))
            .collect();
        Sentence::new(id, tokens, mentions).unwrap()
    }

    #[test]
    fn cot_prompt_contains_paper_shaped_positive_line() {
        let demo = sent(
            "d0",
            &["Apomorphine", "reduced", "impact", "substantially"],
            &[(0, 1, "Chemical")],
        );
        let query = sent("q0", &["morphine", "given"], &[]);
        let labels = [label("Chemical"), label("Disease")];
        let prompt = render_prompt(PromptStyle::Cot, &query, &[demo], &labels).unwrap();
        assert!(prompt.text().contains("Apomorphine | True | as it is Chemical"));
    }

    #[test]
    fn rt_choice1_includes_negative_line() {
        let demo = sent(
            "d0",
            &["Apomorphine", "reduced", "impact", "substantially"],
            &[(0, 1, "Chemical")],
        );
        let query = sent("q0", &["morphine", "given"], &[]);
        let labels = [label("Chemical")];
        let prompt = render_prompt(PromptStyle::RtChoice1, &query, &[demo], &labels).unwrap();
        // One negative judgment line in the rt grammar, e.g.
        // </M>impact|False|as it is a verb<M>
        let has_negative = prompt
            .text()
            .lines()
            .any(|l| l.starts_with("</M>") && l.contains("|False|as it is a") && l.ends_with("<M>"));
        assert!(has_negative, "prompt lacks a negative line:\n{}", prompt.text());
        assert!(prompt.text().contains("</M>Apomorphine|True|as it is Chemical<M>"));
    }

    #[test]
    fn choice2_has_no_negative_lines() {
        let demo = sent(
            "d0",
            &["Apomorphine", "reduced", "impact", "substantially"],
            &[(0, 1, "Chemical")],
        );
        let query = sent("q0", &["morphine", "given"], &[]);
        let prompt =
            render_prompt(PromptStyle::RtChoice2, &query, &[demo], &[label("Chemical")]).unwrap();
        assert!(!prompt.text().contains("|False|"));
    }

    #[test]
    fn zero_labels_is_an_error() {
        let demo = sent("d0", &["a"], &[]);
        let query = sent("q0", &["b"], &[]);
        assert!(matches!(
            render_prompt(PromptStyle::Cot, &query, &[demo], &[]),
            Err(Error::NoLabels)
        ));
    }

    #[test]
    fn rendering_is_deterministic() {
        let demo = sent("d0", &["Apomorphine", "works"], &[(0, 1, "Chemical")]);
        let query = sent("q0", &["morphine", "given"], &[]);
        let labels = [label("Chemical")];
        let a = render_prompt(PromptStyle::RtChoice2, &query, &[demo.clone()], &labels).unwrap();
        let b = render_prompt(PromptStyle::RtChoice2, &query, &[demo], &labels).unwrap();
        assert_eq!(a.text(), b.text());
    }

    #[test]
    fn word_budget_drops_demonstrations_not_query() {
        let demos: Vec<Sentence> = (0..5)
            .map(|i| {
                sent(
                    &format!("d{i}"),
                    &["Apomorphine", "reduced", "tremor", "rates", "notably"],
                    &[(0, 1, "Chemical")],
                )
            })
            .collect();
        let query = sent("q0", &["morphine", "given", "daily"], &[]);
        let labels = [label("Chemical")];
        let prompt =
            render_prompt_budgeted(PromptStyle::Cot, &query, &demos, &labels, 120).unwrap();
        assert!(!prompt.warnings.is_empty());
        assert!(prompt.demonstrations.len() < demos.len());
        assert!(prompt.text().contains("morphine given daily"));
    }

    #[test]
    fn demo_answer_blocks_self_parse() {
        let demo = sent(
            "d0",
            &["Apomorphine", "and", "cisplatin", "caused", "seizures"],
            &[(0, 1, "Chemical"), (2, 3, "Chemical"), (4, 5, "Disease")],
        );
        let query = sent("q0", &["morphine"], &[]);
        let labels = [label("Chemical"), label("Disease")];
        let label_set: BTreeSet<Label> = labels.iter().cloned().collect();
        for style in PromptStyle::all() {
            let prompt = render_prompt(style, &query, &[demo.clone()], &labels).unwrap();
            for (_, block) in &prompt.demonstrations {
                let parsed = parse_answer(block, style, &label_set);
                assert_ne!(
                    parsed.parse_status,
                    ParseStatus::WrongTemplate,
                    "style {style:?} block failed to parse:\n{block}"
                );
            }
        }
    }

    #[test]
    fn p2_prompt_lists_gold_surfaces_without_labels() {
        let query = sent(
            "q0",
            &["cystic", "fibrosis", "was", "confirmed"],
            &[(0, 2, "SpecificDisease")],
        );
        let labels = [label("SpecificDisease"), label("Modifier")];
        let prompt = render_prompt(PromptStyle::P2LabelingOnly, &query, &[], &labels).unwrap();
        assert!(prompt.text().contains("Mentions: cystic fibrosis"));
    }

    #[test]
    fn template_hashes_are_stable_and_distinct() {
        let mut hashes: Vec<String> = PromptStyle::all()
            .into_iter()
            .map(|s| s.template_hash())
            .collect();
        assert_eq!(hashes.len(), 7);
        assert!(hashes.iter().all(|h| h.len() == 64));
        hashes.sort();
        hashes.dedup();
        assert_eq!(hashes.len(), 7, "template hashes collide");
    }
}
