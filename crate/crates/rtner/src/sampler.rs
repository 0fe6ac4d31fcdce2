//! K-shot support set construction: greedy sampling with a pruning pass,
//! the one-entity-per-label masking transform, and seeded test subsampling.
//!
//! All three operations are pure functions of their inputs and seed.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sentence_from_canonical_json, sentence_to_canonical_json, Label, Sentence};
use crate::error::{Error, Result};

/// A K-shot demonstration pool: after construction every dataset label is
/// covered by at least `shots` entities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    pub shots: usize,
    pub sentences: Vec<Sentence>,
    pub per_label_counts: BTreeMap<Label, usize>,
    pub seed: u64,
    pub masked: bool,
}

impl SupportSet {
    /// Recounts mentions and checks the coverage invariant.
    pub fn validate(&self, labels: &BTreeSet<Label>) -> Result<()> {
        let recount = count_labels(&self.sentences);
        if recount != self.per_label_counts {
            return Err(Error::Dataset(
                "support set per_label_counts do not match a recount".into(),
            ));
        }
        let required = if self.masked { 1 } else { self.shots };
        for label in labels {
            let have = recount.get(label).copied().unwrap_or(0);
            if have < required {
                return Err(Error::InsufficientEntities {
                    label: label.name.clone(),
                    available: have,
                    needed: required,
                });
            }
        }
        Ok(())
    }
}

pub fn count_labels(sentences: &[Sentence]) -> BTreeMap<Label, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for m in &s.mentions {
            *counts.entry(m.label.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Greedy K-shot sampling.
///
/// Labels are processed in ascending global frequency; while a label is
/// under K, the sentence that contributes to it with the least overshoot
/// on already-satisfied labels is added (ties to the lowest id). A final
/// pruning pass drops sentences whose removal keeps every label covered,
/// scanning in descending redundancy, which leaves a 1-minimal set.
pub fn greedy_sample(
    split: &[Sentence],
    labels: &BTreeSet<Label>,
    shots: usize,
    seed: u64,
) -> Result<SupportSet> {
    let targets: BTreeMap<&Label, usize> = labels.iter().map(|l| (l, shots)).collect();
    greedy_sample_with_targets(split, &targets, shots, seed, true)
}

/// Same algorithm with per-label targets; the retriever uses this to relax
/// requirements for labels whose candidate supply is short.
pub(crate) fn greedy_sample_with_targets(
    split: &[Sentence],
    targets: &BTreeMap<&Label, usize>,
    shots: usize,
    seed: u64,
    strict: bool,
) -> Result<SupportSet> {
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let totals = count_labels(split);
    for (label, &needed) in targets {
        let available = totals.get(label).copied().unwrap_or(0);
        if strict && available < needed {
            return Err(Error::InsufficientEntities {
                label: label.name.clone(),
                available,
                needed,
            });
        }
    }

    // Effective targets are capped by availability when lenient.
    let goals: BTreeMap<&Label, usize> = targets
        .iter()
        .map(|(l, &needed)| {
            let available = totals.get(*l).copied().unwrap_or(0);
            (*l, needed.min(available))
        })
        .collect();

    // Ascending global frequency; ties by label name via BTreeMap ordering.
    let mut order: Vec<&Label> = goals.keys().copied().collect();
    order.sort_by_key(|l| (totals.get(*l).copied().unwrap_or(0), &l.name));

    let mut chosen: BTreeSet<usize> = BTreeSet::new();
    let mut counts: BTreeMap<&Label, usize> = goals.keys().map(|l| (*l, 0usize)).collect();

    let count_in = |s: &Sentence, label: &Label| s.mentions.iter().filter(|m| &m.label == label).count();

    for label in &order {
        while counts[label] < goals[label] {
            // Overshoot: mentions this sentence would add to labels that
            // are already at goal.
            let candidate = split
                .iter()
                .enumerate()
                .filter(|(i, s)| !chosen.contains(i) && count_in(s, label) > 0)
                .map(|(i, s)| {
                    let overshoot: usize = goals
                        .iter()
                        .filter(|(l, goal)| counts[*l] >= **goal && **l != *label)
                        .map(|(l, _)| count_in(s, l))
                        .sum();
                    (overshoot, &s.id, i)
                })
                .min();
            let Some((_, _, idx)) = candidate else {
                break; // supply exhausted; the goal cap makes this lenient-only
            };
            chosen.insert(idx);
            for (l, c) in counts.iter_mut() {
                *c += count_in(&split[idx], l);
            }
        }
    }

    // Pruning pass: most redundant first, remove while coverage holds.
    let redundancy = |idx: usize| -> usize { split[idx].mentions.len() };
    let mut by_redundancy: Vec<usize> = chosen.iter().copied().collect();
    by_redundancy.sort_by_key(|&i| (std::cmp::Reverse(redundancy(i)), split[i].id.clone()));
    for idx in by_redundancy {
        let removable = goals.iter().all(|(l, goal)| {
            counts[*l].saturating_sub(count_in(&split[idx], l)) >= *goal
        });
        if removable {
            chosen.remove(&idx);
            for (l, c) in counts.iter_mut() {
                *c -= count_in(&split[idx], l);
            }
        }
    }

    let sentences: Vec<Sentence> = chosen.iter().map(|&i| split[i].clone()).collect();
    let per_label_counts = count_labels(&sentences);
    Ok(SupportSet {
        shots,
        sentences,
        per_label_counts,
        seed,
        masked: false,
    })
}

/// Deletes annotations until each label keeps exactly one mention, chosen
/// by a seeded uniform draw. Token text is untouched; only annotations
/// change.
pub fn mask_to_one_per_label(support: &SupportSet, seed: u64) -> Result<SupportSet> {
    let counts = count_labels(&support.sentences);
    for (label, &count) in &counts {
        if count == 0 {
            return Err(Error::InsufficientEntities {
                label: label.name.clone(),
                available: 0,
                needed: 1,
            });
        }
    }

    // Enumerate each label's mentions in (sentence position, span) order,
    // then keep one per label.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: BTreeMap<&Label, usize> = BTreeMap::new();
    for (label, &count) in &counts {
        keep.insert(label, rng.gen_range(0..count));
    }

    let mut seen: BTreeMap<&Label, usize> = BTreeMap::new();
    let mut sentences = Vec::with_capacity(support.sentences.len());
    for s in &support.sentences {
        let mut kept_mentions = Vec::new();
        for m in &s.mentions {
            let ordinal = seen.entry(&m.label).or_insert(0);
            if counts.get(&m.label).is_some() && keep[&m.label] == *ordinal {
                kept_mentions.push(m.clone());
            }
            *ordinal += 1;
        }
        sentences.push(Sentence {
            id: s.id.clone(),
            tokens: s.tokens.clone(),
            mentions: kept_mentions,
        });
    }

    let per_label_counts = count_labels(&sentences);
    debug_assert!(per_label_counts.values().all(|&c| c == 1));
    Ok(SupportSet {
        shots: support.shots,
        sentences,
        per_label_counts,
        seed,
        masked: true,
    })
}

/// Seeded uniform sample without replacement, keeping original split order.
pub fn subsample_test(split: &[Sentence], n: usize, seed: u64) -> Result<Vec<Sentence>> {
    if n > split.len() {
        return Err(Error::SubsampleTooLarge {
            requested: n,
            available: split.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = index_sample(&mut rng, split.len(), n).into_vec();
    indices.sort_unstable();
    Ok(indices.into_iter().map(|i| split[i].clone()).collect())
}

/// Sidecar header stored next to the JSONL sentences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupportSetHeader {
    pub shots: usize,
    pub seed: u64,
    pub masked: bool,
    pub per_label_counts: BTreeMap<String, usize>,
}

/// Writes `<stem>.jsonl` plus `<stem>.meta.json`.
pub fn write_support_set(support: &SupportSet, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let jsonl: String = support
        .sentences
        .iter()
        .map(|s| sentence_to_canonical_json(s) + "\n")
        .collect();
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    std::fs::write(&jsonl_path, jsonl).map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;

    let header = SupportSetHeader {
        shots: support.shots,
        seed: support.seed,
        masked: support.masked,
        per_label_counts: support
            .per_label_counts
            .iter()
            .map(|(l, c)| (l.name.clone(), *c))
            .collect(),
    };
    let meta_path = dir.join(format!("{stem}.meta.json"));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&header)?)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    Ok(())
}

pub fn read_support_set(dir: &Path, stem: &str, dataset: &str) -> Result<SupportSet> {
    let meta_path = dir.join(format!("{stem}.meta.json"));
    let header: SupportSetHeader = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?,
    )?;
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    let body = std::fs::read_to_string(&jsonl_path)
        .map_err(|e| Error::io(jsonl_path.display().to_string(), e))?;
    let sentences: Vec<Sentence> = body
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| sentence_from_canonical_json(l, dataset))
        .collect::<Result<_>>()?;
    let per_label_counts = count_labels(&sentences);
    Ok(SupportSet {
        shots: header.shots,
        sentences,
        per_label_counts,
        seed: header.seed,
        masked: header.masked,
    })
}
