//! Two-step demonstration retrieval: label pre-identification through the
//! gateway, per-label candidate pools over the dev split, KNN on sentence
//! embeddings, and greedy finalization of the retrieved set.

mod embed;
mod knn;

pub use embed::{EmbeddingCache, EmbeddingProvider, EmbeddingVector, HashEmbedder, RemoteEmbedder};
pub use knn::{cosine_similarity, knn_retrieve};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Sentence};
use crate::error::{Error, Result};
use crate::gateway::{ChatRequest, Gateway, Message};
use crate::prompter::render_label_identify;
use crate::sampler::{greedy_sample_with_targets, SupportSet};

/// Default top-k per predicted label. The paper overloads K for both the
/// shot count and retrieval depth; they are distinct knobs here.
pub const DEFAULT_K_NN: usize = 8;

/// All dev-split sentences containing at least one mention of the label.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub label: Label,
    pub sentences: Vec<Sentence>,
}

/// Builds one pool per label; a sentence may appear in several pools.
/// Labels with an empty pool produce a warning but still get a pool.
pub fn build_candidate_pools(
    dev_split: &[Sentence],
    labels: &BTreeSet<Label>,
) -> (BTreeMap<Label, CandidatePool>, Vec<String>) {
    let mut pools = BTreeMap::new();
    let mut warnings = Vec::new();
    for label in labels {
        let sentences: Vec<Sentence> = dev_split
            .iter()
            .filter(|s| s.mentions.iter().any(|m| &m.label == label))
            .cloned()
            .collect();
        if sentences.is_empty() {
            warnings.push(format!("label {} has an empty candidate pool", label.name));
        }
        pools.insert(
            label.clone(),
            CandidatePool {
                label: label.clone(),
                sentences,
            },
        );
    }
    (pools, warnings)
}

/// Decoding profile for gateway calls made by the retriever.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatProfile {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl Default for ChatProfile {
    fn default() -> Self {
        ChatProfile {
            model: "offline-mock".into(),
            temperature: crate::gateway::DEFAULT_TEMPERATURE,
            max_tokens: crate::gateway::DEFAULT_MAX_TOKENS,
        }
    }
}

/// Outcome of label pre-identification; `fell_back` records that the
/// model's output parsed to nothing usable and the full label set was
/// substituted, degrading retrieval to label-agnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedLabels {
    pub labels: BTreeSet<Label>,
    pub fell_back: bool,
}

/// Step one of retrieval: ask the model which entity types the sentence
/// contains. Unparseable or empty answers fall back to the full set.
pub fn predict_labels(
    sentence: &Sentence,
    gateway: &Gateway,
    labels: &BTreeSet<Label>,
    seed: u64,
    profile: &ChatProfile,
) -> Result<PredictedLabels> {
    if labels.is_empty() {
        return Err(Error::NoLabels);
    }
    let ordered: Vec<Label> = labels.iter().cloned().collect();
    let prompt = render_label_identify(sentence, &ordered)?;
    let request = ChatRequest {
        model: profile.model.clone(),
        messages: vec![Message::user(prompt)],
        temperature: profile.temperature,
        max_tokens: profile.max_tokens,
        seed_hint: Some(seed),
    };
    let response = gateway.chat(&request).map_err(|e| Error::GatewayFailure {
        query_id: sentence.id.clone(),
        reason: e.to_string(),
    })?;

    let mut predicted = BTreeSet::new();
    for piece in response.split(|c: char| c == ',' || c == ';' || c == '\n') {
        let name = piece.trim().trim_matches(|c: char| c.is_ascii_punctuation());
        if name.is_empty() {
            continue;
        }
        if let Some(label) = labels
            .iter()
            .find(|l| l.name == name || l.name.eq_ignore_ascii_case(name))
        {
            predicted.insert(label.clone());
        }
    }
    if predicted.is_empty() {
        return Ok(PredictedLabels {
            labels: labels.clone(),
            fell_back: true,
        });
    }
    Ok(PredictedLabels {
        labels: predicted,
        fell_back: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEntry {
    pub sentence_id: String,
    pub label: Label,
    pub score: f64,
}

/// The retrieved set for one query plus the greedy-finalized examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSet {
    pub query_id: String,
    pub predicted_labels: BTreeSet<Label>,
    pub retrieved: Vec<RetrievedEntry>,
    pub final_examples: SupportSet,
    pub warnings: Vec<String>,
}

impl ExampleSet {
    /// Construction-time invariants: no test leakage, finite scores sorted
    /// descending per label, final examples drawn from the retrieved ids,
    /// and (when no supply fallback fired) at most k_nn entries per label.
    fn validate(&self, k_nn: usize, test_ids: &BTreeSet<String>) -> Result<()> {
        let retrieved_ids: BTreeSet<&String> =
            self.retrieved.iter().map(|e| &e.sentence_id).collect();
        for id in &retrieved_ids {
            if test_ids.contains(*id) {
                return Err(Error::Dataset(format!(
                    "test sentence {id} leaked into the retrieved set of query {}",
                    self.query_id
                )));
            }
        }
        let mut per_label: BTreeMap<&Label, Vec<f64>> = BTreeMap::new();
        for entry in &self.retrieved {
            if !entry.score.is_finite() {
                return Err(Error::NonFiniteEmbedding);
            }
            per_label.entry(&entry.label).or_default().push(entry.score);
        }
        for (label, scores) in &per_label {
            if scores.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Dataset(format!(
                    "retrieved scores for label {label} are not sorted descending"
                )));
            }
            if self.warnings.is_empty() && scores.len() > k_nn {
                return Err(Error::Dataset(format!(
                    "label {label} contributes {} entries, cap is {k_nn}",
                    scores.len()
                )));
            }
        }
        for sentence in &self.final_examples.sentences {
            if !retrieved_ids.contains(&sentence.id) {
                return Err(Error::Dataset(format!(
                    "final example {} is not among retrieved ids",
                    sentence.id
                )));
            }
        }
        Ok(())
    }
}

/// Step two of retrieval: KNN per predicted label over the candidate
/// pools, then greedy sampling over the union to pick the final examples.
///
/// A predicted label whose pool cannot supply `shots` entities within the
/// top-k_nn falls back to deeper pool entries (and a reduced target when
/// the whole pool is short), recorded as a warning.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_examples(
    sentence: &Sentence,
    predicted: &BTreeSet<Label>,
    pools: &BTreeMap<Label, CandidatePool>,
    provider: &dyn EmbeddingProvider,
    cache: &EmbeddingCache,
    k_nn: usize,
    shots: usize,
    seed: u64,
    test_ids: &BTreeSet<String>,
) -> Result<ExampleSet> {
    let query_vec = cache
        .get_or_embed(provider, &[sentence.text()])?
        .pop()
        .expect("one vector per text");

    let mut warnings = Vec::new();
    let mut retrieved: Vec<RetrievedEntry> = Vec::new();
    let mut candidates: BTreeMap<String, Sentence> = BTreeMap::new();
    let mut targets: BTreeMap<&Label, usize> = BTreeMap::new();

    for label in predicted {
        let pool = match pools.get(label) {
            Some(pool) if !pool.sentences.is_empty() => pool,
            _ => {
                warnings.push(format!("label {} has no candidates", label.name));
                targets.insert(label, 0);
                continue;
            }
        };
        let texts: Vec<String> = pool.sentences.iter().map(|s| s.text()).collect();
        let vectors = cache.get_or_embed(provider, &texts)?;
        let indexed: Vec<(String, EmbeddingVector)> = pool
            .sentences
            .iter()
            .map(|s| s.id.clone())
            .zip(vectors)
            .collect();
        // Rank the whole pool once; the cap is applied below so a supply
        // deficit can fall back to deeper entries.
        let ranked = knn_retrieve(&query_vec, &indexed, pool.sentences.len())?;

        let count_in = |id: &str| -> usize {
            pool.sentences
                .iter()
                .find(|s| s.id == id)
                .map(|s| s.mentions.iter().filter(|m| &m.label == label).count())
                .unwrap_or(0)
        };
        let pool_supply: usize = pool
            .sentences
            .iter()
            .map(|s| s.mentions.iter().filter(|m| &m.label == label).count())
            .sum();
        let target = shots.min(pool_supply);
        if pool_supply < shots {
            warnings.push(format!(
                "label {} pool supplies {pool_supply} of {shots} entities",
                label.name
            ));
        }
        targets.insert(label, target);

        let mut taken = 0usize;
        let mut supply = 0usize;
        for (id, score) in &ranked {
            let within_cap = taken < k_nn;
            if !within_cap && supply >= target {
                break;
            }
            if !within_cap && taken == k_nn {
                warnings.push(format!(
                    "label {} top-{k_nn} supplies {supply} of {target} entities, extending",
                    label.name
                ));
            }
            retrieved.push(RetrievedEntry {
                sentence_id: id.clone(),
                label: label.clone(),
                score: *score,
            });
            if let Some(s) = pool.sentences.iter().find(|s| &s.id == id) {
                candidates.entry(id.clone()).or_insert_with(|| s.clone());
            }
            supply += count_in(id);
            taken += 1;
        }
    }

    let candidate_list: Vec<Sentence> = candidates.into_values().collect();
    let final_examples =
        greedy_sample_with_targets(&candidate_list, &targets, shots.max(1), seed, false)?;

    let example_set = ExampleSet {
        query_id: sentence.id.clone(),
        predicted_labels: predicted.clone(),
        retrieved,
        final_examples,
        warnings,
    };
    example_set.validate(k_nn, test_ids)?;
    Ok(example_set)
}
