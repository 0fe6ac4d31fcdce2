//! Deterministic synthetic corpora in PubTator format.
//!
//! The public biomedical releases cannot be redistributed here, so this
//! module generates offline stand-ins that mirror their shape: same file
//! format, same label sets, and the same published sentence/entity totals
//! (BC5CDR: 2 classes, 13,938 sentences, 28,545 entities; NCBI-disease:
//! 4 classes, 7,287 sentences, 7,025 entities). Text is pseudo-biomedical
//! filler; generation is a pure function of the plan, so repeated runs
//! produce byte-identical files.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

use crate::corpus::Split;
use crate::error::{Error, Result};

pub struct LabelNames {
    pub label: &'static str,
    pub names: &'static [&'static str],
}

pub struct CorpusPlan {
    pub name: &'static str,
    pub docs: [usize; 3],
    pub sentences: [usize; 3],
    pub entities: [usize; 3],
    pub labels: Vec<LabelNames>,
    /// Index into `labels`, cycled over mentions to fix the class mix.
    pub label_cycle: Vec<usize>,
    pub pmid_base: u64,
    /// Every n-th single-mention span gets a second annotation with the
    /// next label, exercising the alternative-label side table. 0 = never.
    pub alt_label_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanStats {
    pub classes: usize,
    pub sentences: usize,
    pub entities: usize,
}

impl CorpusPlan {
    pub fn stats(&self) -> PlanStats {
        PlanStats {
            classes: self.labels.len(),
            sentences: self.sentences.iter().sum(),
            entities: self.entities.iter().sum(),
        }
    }
}

const FILLER: &[&str] = &[
    "patients", "treatment", "study", "observed", "increased", "decreased", "response", "therapy",
    "clinical", "results", "analysis", "evidence", "exposure", "dosage", "daily", "weekly",
    "reported", "severe", "moderate", "mild", "acute", "chronic", "onset", "outcome", "baseline",
    "cohort", "trial", "controls", "group", "effect", "adverse", "incidence", "admitted",
    "hospital", "period", "months", "weeks", "days", "evaluated", "measured", "serum", "plasma",
    "levels", "concentration", "received", "following", "during", "after", "before", "between",
    "within", "significant", "associated", "developed", "presented", "showed", "underwent",
    "administered", "discontinued", "improved", "worsened", "persisted", "resolved",
];

const BC5CDR_CHEMICALS: &[&str] = &[
    "apomorphine", "cisplatin", "dexamethasone", "lidocaine", "morphine", "naloxone", "tamoxifen",
    "verapamil", "warfarin", "zidovudine", "carbamazepine", "clonidine", "doxorubicin",
    "enalapril", "fluoxetine", "gentamicin", "haloperidol", "ibuprofen", "ketamine", "phenytoin",
    "prednisone", "propranolol", "ranitidine", "simvastatin", "lithium carbonate",
    "sodium valproate", "calcium gluconate", "magnesium sulfate", "potassium chloride",
];

const BC5CDR_DISEASES: &[&str] = &[
    "hypertension", "seizures", "nephrotoxicity", "hepatitis", "bradycardia", "tachycardia",
    "hypotension", "neutropenia", "thrombocytopenia", "dyskinesia", "akathisia", "nephropathy",
    "hypokalemia", "hyponatremia", "renal failure", "cardiac arrest", "myocardial infarction",
    "hemolytic anemia", "parkinson's syndrome", "crohn's colitis", "hodgkin's lymphoma",
    "b-cell non-hodgkin's lymphoma", "scleroderma renal crisis", "torsade de pointes",
];

const NCBI_SPECIFIC: &[&str] = &[
    "cystic fibrosis", "myotonic dystrophy", "ataxia telangiectasia", "duchenne muscular dystrophy",
    "alzheimer's dementia", "huntington's chorea", "marfan syndrome", "fragile x syndrome",
    "wilson's hepatopathy", "tay-sachs deficiency",
];

const NCBI_CLASS: &[&str] = &[
    "carcinoma", "leukemia", "lymphoma", "aneurysm", "dementia", "neuropathy", "myopathy",
    "retinopathy", "cardiomyopathy", "nephritis",
];

const NCBI_MODIFIER: &[&str] = &[
    "hereditary", "familial", "autosomal", "recessive", "dominant", "congenital", "sporadic",
];

const NCBI_COMPOSITE: &[&str] = &[
    "breast and ovarian tumours", "colorectal and endometrial tumours",
    "gastric and pancreatic malignancies",
];

/// Plan matching the published BC5CDR headline statistics.
pub fn bc5cdr_plan() -> CorpusPlan {
    CorpusPlan {
        name: "bc5cdr",
        docs: [500, 500, 500],
        sentences: [4646, 4646, 4646],
        entities: [9515, 9515, 9515],
        labels: vec![
            LabelNames { label: "Chemical", names: BC5CDR_CHEMICALS },
            LabelNames { label: "Disease", names: BC5CDR_DISEASES },
        ],
        label_cycle: vec![0, 1, 0, 1, 0, 0, 1, 1],
        pmid_base: 20_000_000,
        alt_label_every: 0,
    }
}

/// Plan matching the published NCBI-disease headline statistics.
pub fn ncbi_plan() -> CorpusPlan {
    CorpusPlan {
        name: "ncbi",
        docs: [593, 100, 105],
        sentences: [5424, 923, 940],
        entities: [5224, 900, 901],
        labels: vec![
            LabelNames { label: "SpecificDisease", names: NCBI_SPECIFIC },
            LabelNames { label: "DiseaseClass", names: NCBI_CLASS },
            LabelNames { label: "Modifier", names: NCBI_MODIFIER },
            LabelNames { label: "CompositeMention", names: NCBI_COMPOSITE },
        ],
        label_cycle: vec![0, 0, 1, 0, 2, 0, 1, 0, 2, 3],
        pmid_base: 30_000_000,
        alt_label_every: 400,
    }
}

struct SentencePlan {
    tokens: Vec<String>,
    /// (token start, token end, label index)
    mentions: Vec<(usize, usize, usize)>,
}

/// Writes `train.txt`, `dev.txt`, and `test.txt` under `dir` and returns
/// the planned totals.
pub fn write_corpus(plan: &CorpusPlan, dir: &Path) -> Result<PlanStats> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut seen_texts: HashSet<String> = HashSet::new();
    let mut mention_counter = 0usize;
    let mut doc_counter = 0u64;

    for (split_idx, split) in Split::all().into_iter().enumerate() {
        let n_sent = plan.sentences[split_idx];
        let n_ent = plan.entities[split_idx];
        let counts = mention_counts(n_sent, n_ent);
        debug_assert_eq!(counts.iter().sum::<usize>(), n_ent);

        let mut sentences = Vec::with_capacity(n_sent);
        for (i, &count) in counts.iter().enumerate() {
            let labels: Vec<usize> = (0..count)
                .map(|k| plan.label_cycle[(mention_counter + k) % plan.label_cycle.len()])
                .collect();
            mention_counter += count;
            sentences.push(build_sentence(plan, split, i, &labels, &mut seen_texts));
        }

        let text = render_split(plan, &sentences, plan.docs[split_idx], &mut doc_counter);
        let path = dir.join(format!("{}.txt", split.as_str()));
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(plan.stats())
}

/// Per-sentence mention counts summing exactly to `target`, with a mix of
/// empty and dense sentences.
fn mention_counts(n_sent: usize, target: usize) -> Vec<usize> {
    assert!(target <= 4 * n_sent, "entity target exceeds capacity");
    let base = ((target as f64 / n_sent as f64).round() as usize).clamp(1, 4);
    let mut counts = vec![base; n_sent];
    for i in (0..n_sent).step_by(29) {
        counts[i] = 0;
    }
    for i in (3..n_sent).step_by(7) {
        counts[i] = counts[i].saturating_sub(1);
    }
    let mut sum: usize = counts.iter().sum();
    let mut i = 0;
    while sum < target {
        if counts[i % n_sent] < 4 {
            counts[i % n_sent] += 1;
            sum += 1;
        }
        i += 1;
    }
    let mut i = 0;
    while sum > target {
        if counts[i % n_sent] > 0 {
            counts[i % n_sent] -= 1;
            sum -= 1;
        }
        i += 1;
    }
    counts
}

fn seed_for(plan_name: &str, split: Split, index: usize, attempt: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(plan_name.as_bytes());
    hasher.update([b'/']);
    hasher.update(split.as_str().as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.update(attempt.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn build_sentence(
    plan: &CorpusPlan,
    split: Split,
    index: usize,
    labels: &[usize],
    seen_texts: &mut HashSet<String>,
) -> SentencePlan {
    for attempt in 0..1000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(plan.name, split, index, attempt));
        let mut tokens: Vec<String> = Vec::new();
        let mut mentions = Vec::new();
        let push_filler = |tokens: &mut Vec<String>, rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
            for _ in 0..rng.gen_range(lo..=hi) {
                tokens.push(FILLER[rng.gen_range(0..FILLER.len())].to_string());
            }
        };

        if labels.is_empty() {
            push_filler(&mut tokens, &mut rng, 6, 10);
        } else {
            for &label_idx in labels {
                push_filler(&mut tokens, &mut rng, 2, 3);
                let names = plan.labels[label_idx].names;
                let name = names[rng.gen_range(0..names.len())];
                let start = tokens.len();
                tokens.extend(name.split(' ').map(str::to_string));
                mentions.push((start, tokens.len(), label_idx));
            }
            push_filler(&mut tokens, &mut rng, 2, 4);
        }

        if !mentions_unambiguous(&tokens, &mentions) {
            continue;
        }
        let text = tokens.join(" ");
        if !seen_texts.insert(text) {
            continue;
        }
        return SentencePlan { tokens, mentions };
    }
    panic!("could not build a unique sentence after 1000 attempts");
}

/// Every mention's token sequence must occur exactly once in the sentence,
/// so surface-to-span grounding is unambiguous.
fn mentions_unambiguous(tokens: &[String], mentions: &[(usize, usize, usize)]) -> bool {
    for &(start, end, _) in mentions {
        let needle = &tokens[start..end];
        let occurrences = (0..=tokens.len().saturating_sub(needle.len()))
            .filter(|&i| &tokens[i..i + needle.len()] == needle)
            .count();
        if occurrences != 1 {
            return false;
        }
    }
    true
}

fn render_split(
    plan: &CorpusPlan,
    sentences: &[SentencePlan],
    n_docs: usize,
    doc_counter: &mut u64,
) -> String {
    let base = sentences.len() / n_docs;
    let extra = sentences.len() % n_docs;
    let mut out = String::new();
    let mut cursor = 0usize;
    let mut mention_serial = 0usize;

    for d in 0..n_docs {
        let size = base + usize::from(d < extra);
        let doc_sentences = &sentences[cursor..cursor + size];
        cursor += size;
        let pmid = plan.pmid_base + *doc_counter;
        *doc_counter += 1;

        // Document text is title + " " + abstract; offsets index into it.
        let mut texts: Vec<String> = Vec::with_capacity(size);
        let mut offsets: Vec<Vec<(usize, usize)>> = Vec::with_capacity(size);
        let mut doc_pos = 0usize;
        for s in doc_sentences {
            let mut token_spans = Vec::with_capacity(s.tokens.len());
            let mut pos = doc_pos;
            for (i, tok) in s.tokens.iter().enumerate() {
                if i > 0 {
                    pos += 1;
                }
                token_spans.push((pos, pos + tok.len()));
                pos += tok.len();
            }
            let text = format!("{}.", s.tokens.join(" "));
            doc_pos += text.len() + 1;
            texts.push(text);
            offsets.push(token_spans);
        }

        writeln!(out, "{pmid}|t|{}", texts[0]).unwrap();
        if texts.len() > 1 {
            writeln!(out, "{pmid}|a|{}", texts[1..].join(" ")).unwrap();
        }
        for (s, spans) in doc_sentences.iter().zip(&offsets) {
            for &(start, end, label_idx) in &s.mentions {
                let char_start = spans[start].0;
                let char_end = spans[end - 1].1;
                let surface = s.tokens[start..end].join(" ");
                let label = plan.labels[label_idx].label;
                writeln!(
                    out,
                    "{pmid}\t{char_start}\t{char_end}\t{surface}\t{label}\tC{mention_serial:06}"
                )
                .unwrap();
                if plan.alt_label_every > 0
                    && mention_serial % plan.alt_label_every == 0
                    && plan.labels.len() > 1
                {
                    let alt = plan.labels[(label_idx + 1) % plan.labels.len()].label;
                    writeln!(
                        out,
                        "{pmid}\t{char_start}\t{char_end}\t{surface}\t{alt}\tC{mention_serial:06}"
                    )
                    .unwrap();
                }
                mention_serial += 1;
            }
        }
        out.push('\n');
    }
    debug_assert_eq!(cursor, sentences.len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_dataset, CorpusFormat};

    #[test]
    fn generation_is_deterministic() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut small = ncbi_plan();
        small.docs = [4, 2, 2];
        small.sentences = [40, 20, 20];
        small.entities = [38, 19, 18];
        write_corpus(&small, dir_a.path()).unwrap();
        write_corpus(&small, dir_b.path()).unwrap();
        for split in ["train.txt", "dev.txt", "test.txt"] {
            let a = std::fs::read(dir_a.path().join(split)).unwrap();
            let b = std::fs::read(dir_b.path().join(split)).unwrap();
            assert_eq!(a, b, "{split} differs between runs");
        }
    }

    #[test]
    fn small_plan_round_trips_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        let mut small = bc5cdr_plan();
        small.docs = [5, 3, 3];
        small.sentences = [50, 30, 30];
        small.entities = [100, 61, 59];
        let stats = write_corpus(&small, dir.path()).unwrap();
        let dataset = load_dataset(dir.path(), CorpusFormat::Pubtator).unwrap();
        assert_eq!(dataset.labels.len(), stats.classes);
        assert_eq!(dataset.total_sentences(), stats.sentences);
        assert_eq!(dataset.total_entities(), stats.entities);
        assert_eq!(dataset.metadata.snapped_spans, 0);
        assert_eq!(dataset.metadata.dropped_overlaps, 0);
    }

    #[test]
    fn alt_labels_are_populated_for_ncbi_plan() {
        let dir = tempfile::tempdir().unwrap();
        let mut small = ncbi_plan();
        small.docs = [10, 2, 2];
        small.sentences = [100, 20, 20];
        small.entities = [90, 18, 18];
        small.alt_label_every = 10;
        write_corpus(&small, dir.path()).unwrap();
        let dataset = load_dataset(dir.path(), CorpusFormat::Pubtator).unwrap();
        assert!(!dataset.alt_labels.is_empty());
        assert_eq!(dataset.total_entities(), 126);
    }

    #[test]
    fn mention_counts_hit_target_exactly() {
        for (n, target) in [(100, 205), (940, 901), (4646, 9515), (10, 0)] {
            let counts = mention_counts(n, target);
            assert_eq!(counts.len(), n);
            assert_eq!(counts.iter().sum::<usize>(), target);
            assert!(counts.iter().all(|&c| c <= 4));
        }
    }
}
