//! Corpus loading, validation, and IO tag conversion.
//!
//! Mentions are the ground truth; IO tag sequences are a derived view.
//! The IO scheme cannot represent adjacent same-label mentions, so the
//! derived view carries a `lossy` flag instead of silently merging.

mod conll;
mod pubtator;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An entity class, qualified by the dataset that declares it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub name: String,
    pub dataset: String,
}

impl Label {
    pub fn new(name: impl Into<String>, dataset: impl Into<String>) -> Self {
        Label {
            name: name.into(),
            dataset: dataset.into(),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// A labeled token span. `start` is inclusive, `end` exclusive, and the
/// surface always equals the space-joined tokens of the span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub start: usize,
    pub end: usize,
    pub label: Label,
    pub surface: String,
}

impl EntityMention {
    pub fn new(tokens: &[String], start: usize, end: usize, label: Label) -> Self {
        EntityMention {
            start,
            end,
            label,
            surface: tokens[start..end].join(" "),
        }
    }

    pub fn overlaps(&self, other: &EntityMention) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// A tokenized sentence with its gold mentions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub mentions: Vec<EntityMention>,
}

impl Sentence {
    /// Validates the sentence invariants: non-empty tokens, in-bounds
    /// non-overlapping mentions, surfaces matching their spans.
    pub fn new(id: impl Into<String>, tokens: Vec<String>, mentions: Vec<EntityMention>) -> Result<Self> {
        let id = id.into();
        if tokens.is_empty() || tokens.iter().any(|t| t.is_empty()) {
            return Err(Error::Dataset(format!(
                "sentence {id}: tokens must be non-empty"
            )));
        }
        let mut sorted = mentions;
        sorted.sort_by_key(|m| (m.start, m.end));
        for m in &sorted {
            if m.start >= m.end || m.end > tokens.len() {
                return Err(Error::SpanOutOfBounds {
                    sentence_id: id,
                    start: m.start,
                    end: m.end,
                    len: tokens.len(),
                });
            }
            let expect = tokens[m.start..m.end].join(" ");
            if m.surface != expect {
                return Err(Error::Dataset(format!(
                    "sentence {id}: mention surface {:?} does not match span text {:?}",
                    m.surface, expect
                )));
            }
        }
        for pair in sorted.windows(2) {
            if pair[0].overlaps(&pair[1]) {
                return Err(Error::OverlappingMentions {
                    sentence_id: id,
                    a: pair[0].surface.clone(),
                    b: pair[1].surface.clone(),
                });
            }
        }
        Ok(Sentence {
            id,
            tokens: tokens.to_vec(),
            mentions: sorted,
        })
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Per-token IO tags derived from a sentence's mentions.
///
/// `lossy` is set when the encoding merged adjacent (or overlapping)
/// same-label mentions that a round-trip cannot separate again.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagSequence {
    pub tags: Vec<String>,
    pub lossy: bool,
}

impl TagSequence {
    /// Validates each tag against the IO grammar (`O` or `I-<label>`).
    pub fn new(tags: Vec<String>) -> Result<Self> {
        for tag in &tags {
            parse_io_tag(tag)?;
        }
        Ok(TagSequence { tags, lossy: false })
    }
}

fn parse_io_tag(tag: &str) -> Result<Option<&str>> {
    if tag == "O" {
        return Ok(None);
    }
    match tag.strip_prefix("I-") {
        Some(name) if !name.is_empty() => Ok(Some(name)),
        _ => Err(Error::InvalidTag {
            tag: tag.to_string(),
            reason: "expected O or I-<label>".into(),
        }),
    }
}

/// Dataset split roles. Support sets come from train, retrieval
/// candidates from dev, evaluation from test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn all() -> [Split; 3] {
        [Split::Train, Split::Dev, Split::Test]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" | "devel" | "development" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Key for the alternative-label side table: multi-label gold spans are
/// stored here instead of as overlapping mentions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MentionKey {
    pub sentence_id: String,
    pub start: usize,
    pub end: usize,
}

pub type AltLabelTable = BTreeMap<MentionKey, BTreeSet<Label>>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub format: String,
    pub sentence_splitter: String,
    pub tokenizer: String,
    /// Mention spans snapped outward to token boundaries during ingestion.
    pub snapped_spans: usize,
    /// Overlapping different-label annotations dropped during ingestion.
    pub dropped_overlaps: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub labels: BTreeSet<Label>,
    pub splits: BTreeMap<Split, Vec<Sentence>>,
    pub alt_labels: AltLabelTable,
    pub metadata: DatasetMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub sentences: usize,
    pub entities: usize,
}

impl Dataset {
    /// Checks the dataset invariants: unique ids per split, every mention
    /// label declared.
    pub fn validate(&self) -> Result<()> {
        for (split, sentences) in &self.splits {
            let mut seen = BTreeSet::new();
            for s in sentences {
                if !seen.insert(&s.id) {
                    return Err(Error::DuplicateSentenceId {
                        id: s.id.clone(),
                        split: split.as_str().into(),
                    });
                }
                for m in &s.mentions {
                    if !self.labels.contains(&m.label) {
                        return Err(Error::Dataset(format!(
                            "sentence {}: mention label {} not in declared label set",
                            s.id, m.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[Sentence] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn split_stats(&self) -> BTreeMap<Split, SplitStats> {
        self.splits
            .iter()
            .map(|(split, sentences)| {
                (
                    *split,
                    SplitStats {
                        sentences: sentences.len(),
                        entities: sentences.iter().map(|s| s.mentions.len()).sum(),
                    },
                )
            })
            .collect()
    }

    pub fn total_sentences(&self) -> usize {
        self.splits.values().map(Vec::len).sum()
    }

    pub fn total_entities(&self) -> usize {
        self.splits
            .values()
            .flat_map(|v| v.iter())
            .map(|s| s.mentions.len())
            .sum()
    }

    /// Canonical JSONL serialization of one split: one sentence object per
    /// line with fields {id, tokens, mentions:[{start,end,label,surface}]}.
    pub fn to_canonical_jsonl(&self, split: Split) -> String {
        let mut out = String::new();
        for s in self.split(split) {
            out.push_str(&sentence_to_canonical_json(s));
            out.push('\n');
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct MentionRecord {
    start: usize,
    end: usize,
    label: String,
    surface: String,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    id: String,
    tokens: Vec<String>,
    mentions: Vec<MentionRecord>,
}

pub fn sentence_to_canonical_json(s: &Sentence) -> String {
    let rec = SentenceRecord {
        id: s.id.clone(),
        tokens: s.tokens.clone(),
        mentions: s
            .mentions
            .iter()
            .map(|m| MentionRecord {
                start: m.start,
                end: m.end,
                label: m.label.name.clone(),
                surface: m.surface.clone(),
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("sentence record serializes")
}

pub fn sentence_from_canonical_json(line: &str, dataset: &str) -> Result<Sentence> {
    let rec: SentenceRecord = serde_json::from_str(line)?;
    let mentions = rec
        .mentions
        .into_iter()
        .map(|m| EntityMention {
            start: m.start,
            end: m.end,
            label: Label::new(m.label, dataset),
            surface: m.surface,
        })
        .collect();
    Sentence::new(rec.id, rec.tokens, mentions)
}

/// Input serialization formats accepted by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    ConllIo,
    Pubtator,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conll-io" | "conll" => Ok(CorpusFormat::ConllIo),
            "pubtator" => Ok(CorpusFormat::Pubtator),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Loads a dataset from `path`, which is either a directory containing
/// per-split files (stems `train`, `dev`/`devel`, `test`) or a single
/// file loaded as the test split.
pub fn load_dataset(path: &Path, format: CorpusFormat) -> Result<Dataset> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());

    let mut splits: BTreeMap<Split, Vec<Sentence>> = BTreeMap::new();
    let mut labels: BTreeSet<Label> = BTreeSet::new();
    let mut alt_labels = AltLabelTable::new();
    let mut metadata = DatasetMetadata {
        format: match format {
            CorpusFormat::ConllIo => "conll-io".into(),
            CorpusFormat::Pubtator => "pubtator".into(),
        },
        sentence_splitter: "period-space with abbreviation guard".into(),
        tokenizer: "whitespace + edge punctuation".into(),
        snapped_spans: 0,
        dropped_overlaps: 0,
    };

    let files = split_files(path)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!(
            "no corpus files found under {}",
            path.display()
        )));
    }
    for (split, file) in files {
        let sentences = match format {
            CorpusFormat::ConllIo => conll::parse_file(&file, &name, split, &mut labels)?,
            CorpusFormat::Pubtator => {
                pubtator::parse_file(&file, &name, split, &mut labels, &mut alt_labels, &mut metadata)?
            }
        };
        if sentences.is_empty() {
            return Err(Error::NoSentencesParsed {
                path: file.display().to_string(),
            });
        }
        splits.insert(split, sentences);
    }

    let dataset = Dataset {
        name,
        labels,
        splits,
        alt_labels,
        metadata,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn split_files(path: &Path) -> Result<Vec<(Split, std::path::PathBuf)>> {
    if path.is_file() {
        return Ok(vec![(Split::Test, path.to_path_buf())]);
    }
    if !path.is_dir() {
        return Err(Error::Dataset(format!("{} does not exist", path.display())));
    }
    let mut out = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .collect();
    entries.sort();
    for entry in entries {
        if !entry.is_file() {
            continue;
        }
        let stem = entry
            .file_stem()
            .map(|s| s.to_string_lossy().to_lowercase())
            .unwrap_or_default();
        if let Ok(split) = stem.parse::<Split>() {
            out.push((split, entry));
        }
    }
    Ok(out)
}

/// Derives the IO tag view of a sentence: tokens inside any mention get
/// `I-<label>`, all others `O`.
///
/// Overlapping mentions with different labels cannot be expressed and
/// are an error; adjacent or overlapping same-label mentions merge into
/// one run and set `lossy`.
pub fn mentions_to_io(sentence: &Sentence) -> Result<TagSequence> {
    let mut tags = vec!["O".to_string(); sentence.tokens.len()];
    let mut lossy = false;
    let mut sorted: Vec<&EntityMention> = sentence.mentions.iter().collect();
    sorted.sort_by_key(|m| (m.start, m.end));

    for pair in sorted.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if a.overlaps(b) {
            if a.label != b.label {
                return Err(Error::OverlappingMentions {
                    sentence_id: sentence.id.clone(),
                    a: a.surface.clone(),
                    b: b.surface.clone(),
                });
            }
            lossy = true;
        }
        // Adjacent same-label runs fuse under IO.
        if a.end == b.start && a.label == b.label {
            lossy = true;
        }
    }

    for m in &sorted {
        if m.end > tags.len() {
            return Err(Error::SpanOutOfBounds {
                sentence_id: sentence.id.clone(),
                start: m.start,
                end: m.end,
                len: tags.len(),
            });
        }
        for tag in &mut tags[m.start..m.end] {
            *tag = format!("I-{}", m.label.name);
        }
    }
    Ok(TagSequence { tags, lossy })
}

/// Inverse of the IO encoding: maximal runs of one `I-<label>` tag become
/// one mention.
pub fn io_to_mentions(tags: &TagSequence, tokens: &[String], dataset: &str) -> Result<Vec<EntityMention>> {
    if tags.tags.len() != tokens.len() {
        return Err(Error::TagLengthMismatch {
            tags: tags.tags.len(),
            tokens: tokens.len(),
        });
    }
    let mut mentions = Vec::new();
    let mut run: Option<(usize, &str)> = None;
    for (i, tag) in tags.tags.iter().enumerate() {
        let name = parse_io_tag(tag)?;
        match (&run, name) {
            (Some((start, current)), Some(name)) if *current != name => {
                mentions.push(EntityMention::new(tokens, *start, i, Label::new(*current, dataset)));
                run = Some((i, name));
            }
            (Some((start, current)), None) => {
                mentions.push(EntityMention::new(tokens, *start, i, Label::new(*current, dataset)));
                run = None;
            }
            (None, Some(name)) => run = Some((i, name)),
            _ => {}
        }
    }
    if let Some((start, current)) = run {
        mentions.push(EntityMention::new(
            tokens,
            start,
            tokens.len(),
            Label::new(current, dataset),
        ));
    }
    Ok(mentions)
}
