//! Deterministic offline backends.
//!
//! The gold oracle closes the pipeline loop by construction: it looks up
//! the query sentence in its gold index and answers with
//! `render_answer` over the gold mentions, so a correct render/parse/score
//! path must produce micro-F1 = 1.0. The noisy oracle corrupts that output
//! line by line with seeded probability, one corruption kind per line,
//! each kind designed to land in one error-taxonomy category.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Label, Sentence};
use crate::error::{Error, Result};
use crate::prompter::{render_answer, AnswerContext, PromptStyle};

use super::{Backend, BackendResponse, ChatRequest};

/// Replays a fixed queue of responses.
pub struct ScriptedMock {
    queue: Mutex<VecDeque<String>>,
}

impl ScriptedMock {
    pub fn new(responses: Vec<String>) -> Self {
        ScriptedMock {
            queue: Mutex::new(responses.into()),
        }
    }
}

impl Backend for ScriptedMock {
    fn call(&self, _request: &ChatRequest) -> Result<BackendResponse> {
        let mut queue = self.queue.lock().unwrap();
        match queue.pop_front() {
            Some(text) => Ok(BackendResponse::mock(text)),
            None => Err(Error::MalformedResponse(
                "scripted mock queue exhausted".into(),
            )),
        }
    }

    fn describe(&self) -> String {
        "scripted_mock".into()
    }
}

/// Answers from gold annotations: label lists for label-identification
/// prompts, rendered answer blocks for extraction prompts.
pub struct GoldOracle {
    by_text: HashMap<String, Sentence>,
    style: PromptStyle,
    labels: Vec<Label>,
}

impl GoldOracle {
    pub fn new(gold: &[Sentence], style: PromptStyle, labels: Vec<Label>) -> Self {
        GoldOracle {
            by_text: gold.iter().map(|s| (s.text(), s.clone())).collect(),
            style,
            labels,
        }
    }

    fn answer(&self, request: &ChatRequest) -> Result<String> {
        let content = request
            .messages
            .last()
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        let query_text = content
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Sentence: "))
            .ok_or_else(|| {
                Error::MalformedResponse("gold oracle: prompt has no Sentence: line".into())
            })?;
        let sentence = self.by_text.get(query_text).ok_or_else(|| {
            Error::MalformedResponse(format!(
                "gold oracle: sentence not in gold index: {query_text:?}"
            ))
        })?;

        let is_label_identify = content
            .lines()
            .rev()
            .find(|l| !l.trim().is_empty())
            .map(|l| l.trim() == "Types:")
            .unwrap_or(false);
        if is_label_identify {
            let names: BTreeSet<&str> = sentence
                .mentions
                .iter()
                .map(|m| m.label.name.as_str())
                .collect();
            return Ok(names.into_iter().collect::<Vec<_>>().join(", "));
        }

        let ctx = AnswerContext {
            labels: &self.labels,
            sentence_tokens: Some(&sentence.tokens),
        };
        render_answer(&sentence.mentions, self.style, &[], &ctx)
    }
}

impl Backend for GoldOracle {
    fn call(&self, request: &ChatRequest) -> Result<BackendResponse> {
        self.answer(request).map(BackendResponse::mock)
    }

    fn describe(&self) -> String {
        format!("gold_oracle_mock[{}]", self.style.as_str())
    }
}

/// Corruption kinds drawn by the noisy oracle, one per affected line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Corruption {
    DropLine,
    TruncateSurface,
    BreakTemplate,
    EscapeQuote,
}

const CORRUPTIONS: [Corruption; 4] = [
    Corruption::DropLine,
    Corruption::TruncateSurface,
    Corruption::BreakTemplate,
    Corruption::EscapeQuote,
];

/// Wraps the gold oracle and injects seeded per-line corruptions with
/// probability `p`. Deterministic per request: the RNG is seeded from the
/// global seed and the request key.
pub struct NoisyOracle {
    inner: GoldOracle,
    p: f64,
    seed: u64,
}

impl NoisyOracle {
    pub fn new(inner: GoldOracle, p: f64, seed: u64) -> Self {
        NoisyOracle { inner, p, seed }
    }

    fn corrupt(&self, text: &str, request_key: &str) -> String {
        let key_bytes = request_key.as_bytes();
        let mut key_hash = 0u64;
        for (i, b) in key_bytes.iter().enumerate() {
            key_hash = key_hash.wrapping_mul(31).wrapping_add(*b as u64 + i as u64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ key_hash);

        let mut out = Vec::new();
        for line in text.lines() {
            if line == "no entities" || !rng.gen_bool(self.p) {
                out.push(line.to_string());
                continue;
            }
            let kind = CORRUPTIONS[rng.gen_range(0..CORRUPTIONS.len())];
            match apply_corruption(line, kind) {
                Some(corrupted) => out.push(corrupted),
                None => {} // line dropped
            }
        }
        out.join("\n")
    }
}

/// Applies one corruption to an rt-grammar line; `None` means the line is
/// dropped. Kinds that do not apply (single-token surface, no apostrophe)
/// fall back to dropping the line.
fn apply_corruption(line: &str, kind: Corruption) -> Option<String> {
    let fields = line
        .strip_prefix("</M>")
        .and_then(|r| r.strip_suffix("<M>"))
        .map(|inner| inner.splitn(3, '|').collect::<Vec<_>>());
    match kind {
        Corruption::DropLine => None,
        Corruption::BreakTemplate => Some(format!("{line} cannot be homologous to </M>")),
        Corruption::TruncateSurface => {
            let fields = fields?;
            if fields.len() != 3 {
                return None;
            }
            let tokens: Vec<&str> = fields[0].split(' ').collect();
            if tokens.len() < 2 {
                return None;
            }
            let truncated = tokens[..tokens.len() - 1].join(" ");
            Some(format!("</M>{truncated}|{}|{}<M>", fields[1], fields[2]))
        }
        Corruption::EscapeQuote => {
            let fields = fields?;
            if fields.len() != 3 || !fields[0].contains('\'') {
                return None;
            }
            let escaped = fields[0].replacen('\'', "\\\"", 1);
            Some(format!("</M>{escaped}|{}|{}<M>", fields[1], fields[2]))
        }
    }
}

impl Backend for NoisyOracle {
    fn call(&self, request: &ChatRequest) -> Result<BackendResponse> {
        let clean = self.inner.answer(request)?;
        if self.p <= 0.0 {
            return Ok(BackendResponse::mock(clean));
        }
        // Label-identification replies are left intact; only extraction
        // answer lines are corrupted.
        if !clean.contains('|') {
            return Ok(BackendResponse::mock(clean));
        }
        Ok(BackendResponse::mock(
            self.corrupt(&clean, &request.cache_key()),
        ))
    }

    fn describe(&self) -> String {
        format!("noisy_oracle_mock[p={}]", self.p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityMention;
    use crate::gateway::Message;

    fn label(name: &str) -> Label {
        Label::new(name, "toy")
    }

    fn gold_sentence() -> Sentence {
        let tokens: Vec<String> = ["WD", "was", "elevated"].iter().map(|s| s.to_string()).collect();
        let mentions = vec![EntityMention::new(&tokens, 0, 1, label("Modifier"))];
        Sentence::new("q1", tokens, mentions).unwrap()
    }

    fn request_for(text: &str, trailer: &str) -> ChatRequest {
        ChatRequest {
            model: "mock".into(),
            messages: vec![Message::user(format!("instructions\nSentence: {text}\n{trailer}"))],
            temperature: 0.0,
            max_tokens: 64,
            seed_hint: None,
        }
    }

    #[test]
    fn gold_oracle_renders_gold_answer() {
        let oracle = GoldOracle::new(&[gold_sentence()], PromptStyle::RtChoice2, vec![label("Modifier")]);
        let resp = oracle.call(&request_for("WD was elevated", "Answer:")).unwrap();
        assert_eq!(resp.text, "</M>WD|True|as it is Modifier<M>");
    }

    #[test]
    fn gold_oracle_answers_label_identification() {
        let oracle = GoldOracle::new(&[gold_sentence()], PromptStyle::RtChoice2, vec![label("Modifier")]);
        let resp = oracle.call(&request_for("WD was elevated", "Types:")).unwrap();
        assert_eq!(resp.text, "Modifier");
    }

    #[test]
    fn noisy_oracle_with_zero_p_equals_gold() {
        let gold = GoldOracle::new(&[gold_sentence()], PromptStyle::RtChoice2, vec![label("Modifier")]);
        let noisy = NoisyOracle::new(
            GoldOracle::new(&[gold_sentence()], PromptStyle::RtChoice2, vec![label("Modifier")]),
            0.0,
            7,
        );
        let req = request_for("WD was elevated", "Answer:");
        assert_eq!(gold.call(&req).unwrap().text, noisy.call(&req).unwrap().text);
    }

    #[test]
    fn corruptions_are_shaped_as_designed() {
        let line = "</M>renal failure|True|as it is Disease<M>";
        assert_eq!(apply_corruption(line, Corruption::DropLine), None);
        assert_eq!(
            apply_corruption(line, Corruption::TruncateSurface).unwrap(),
            "</M>renal|True|as it is Disease<M>"
        );
        assert!(apply_corruption(line, Corruption::BreakTemplate)
            .unwrap()
            .ends_with("cannot be homologous to </M>"));
        let quoted = "</M>parkinson's syndrome|True|as it is Disease<M>";
        assert_eq!(
            apply_corruption(quoted, Corruption::EscapeQuote).unwrap(),
            "</M>parkinson\\\"s syndrome|True|as it is Disease<M>"
        );
        // Inapplicable kinds degrade to a drop.
        assert_eq!(apply_corruption(line, Corruption::EscapeQuote), None);
        let single = "</M>WD|True|as it is Modifier<M>";
        assert_eq!(apply_corruption(single, Corruption::TruncateSurface), None);
    }

    #[test]
    fn noise_is_deterministic_per_request() {
        let mk = || {
            NoisyOracle::new(
                GoldOracle::new(&[gold_sentence()], PromptStyle::RtChoice2, vec![label("Modifier")]),
                1.0,
                7,
            )
        };
        let req = request_for("WD was elevated", "Answer:");
        assert_eq!(mk().call(&req).unwrap().text, mk().call(&req).unwrap().text);
    }
}
