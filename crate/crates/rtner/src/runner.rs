//! End-to-end experiment orchestration from a declarative JSON config:
//! load -> sample/mask -> (retrieve per query) -> render -> chat -> parse
//! -> score, with every intermediate artifact persisted under the output
//! directory and all LLM traffic flowing through the cached gateway so
//! interrupted runs resume without re-spending.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{load_dataset, CorpusFormat, Dataset, Label, Sentence, Split};
use crate::error::{Error, Result};
use crate::eval::{
    score, report_to_text, write_error_dump, ErrorRecord, EvalReport, Scheme, ScoreOptions,
};
use crate::gateway::{
    BackendKind, ChatRequest, Gateway, GatewayBuilder, Message, RemoteParams,
    DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};
use crate::prompter::{
    ground_to_spans, parse_answer, render_prompt, sha256_hex, label_identify_template_hash,
    ParsedPrediction, PromptStyle,
};
use crate::retriever::{
    build_candidate_pools, predict_labels, retrieve_examples, CandidatePool, ChatProfile,
    EmbeddingCache, EmbeddingProvider, ExampleSet, HashEmbedder, RemoteEmbedder, DEFAULT_K_NN,
};
use crate::sampler::{greedy_sample, mask_to_one_per_label, subsample_test, write_support_set, SupportSet};

/// Failure budget: a run aborts once more than this share of queries error.
pub const QUERY_FAILURE_THRESHOLD_PCT: u8 = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub path: PathBuf,
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hash { dim: usize },
    Remote { endpoint: String, model: String },
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash { dim: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub enabled: bool,
    #[serde(default = "default_k_nn")]
    pub k_nn: usize,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
}

fn default_k_nn() -> usize {
    DEFAULT_K_NN
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            enabled: false,
            k_nn: DEFAULT_K_NN,
            embedding: EmbeddingConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_temperature() -> f32 {
    DEFAULT_TEMPERATURE
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    Remote {
        endpoint: Option<String>,
    },
    ScriptedMock {
        responses: Vec<String>,
    },
    GoldOracleMock,
    NoisyOracleMock {
        p: f64,
    },
}

impl BackendChoice {
    pub fn is_remote(&self) -> bool {
        matches!(self, BackendChoice::Remote { .. })
    }

    pub fn describe(&self) -> &'static str {
        match self {
            BackendChoice::Remote { .. } => "remote",
            BackendChoice::ScriptedMock { .. } => "scripted_mock",
            BackendChoice::GoldOracleMock => "gold_oracle_mock",
            BackendChoice::NoisyOracleMock { .. } => "noisy_oracle_mock",
        }
    }
}

impl Default for BackendChoice {
    fn default() -> Self {
        BackendChoice::GoldOracleMock
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub shots: usize,
    pub style: PromptStyle,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub masking: bool,
    #[serde(default)]
    pub p2_mode: bool,
    #[serde(default)]
    pub test_subsample: Option<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub model: String,
    #[serde(default)]
    pub decode: DecodeConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub backend: BackendChoice,
    #[serde(default)]
    pub credit_alt_labels: bool,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    4
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut config: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.normalize()?;
        Ok(config)
    }

    /// Applies the documented defaults: p2_mode forces the labeling-only
    /// style; remote backends subsample 100 test sentences (seed 0
    /// protocol) and run one seed, mocks run the full test and three seeds.
    pub fn normalize(&mut self) -> Result<()> {
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        if self.p2_mode {
            self.style = PromptStyle::P2LabelingOnly;
        } else if self.style == PromptStyle::P2LabelingOnly {
            return Err(Error::Config(
                "style p2_labeling_only requires p2_mode: true".into(),
            ));
        }
        if self.seeds.is_empty() {
            self.seeds = if self.backend.is_remote() {
                vec![0]
            } else {
                vec![0, 1, 2]
            };
        }
        if self.test_subsample.is_none() && self.backend.is_remote() {
            self.test_subsample = Some(100);
        }
        if self.workers == 0 {
            self.workers = 1;
        }
        Ok(())
    }

    /// sha256 of the canonical JSON form; embedded in every report.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        sha256_hex(canonical.as_bytes())
    }
}

/// Everything persisted about one (config, seed) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub template_hash: String,
    pub label_template_hash: String,
    pub dataset: String,
    pub style: PromptStyle,
    pub shots: usize,
    pub seed: u64,
    pub model: String,
    pub backend: String,
    pub provider_id: Option<String>,
    pub masked: bool,
    pub p2_mode: bool,
    pub retrieval_enabled: bool,
    pub k_nn: Option<usize>,
    /// sha256 over the sorted test query ids; comparisons refuse to mix
    /// different test subsets.
    pub test_set_sha256: String,
    pub n_queries: usize,
    pub n_query_errors: usize,
    pub n_label_fallbacks: usize,
    pub token_spend: (u64, u64),
    pub wall_time_secs: f64,
    pub reports: BTreeMap<String, EvalReport>,
}

/// Per-query persisted artifact: the retrieval outcome, rendered prompt,
/// raw completion, and parsed prediction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryArtifact {
    pub query_id: String,
    pub example_set: Option<ExampleSet>,
    pub label_fallback: Option<bool>,
    pub prompt_text: String,
    pub raw_response: String,
    pub parsed: ParsedPrediction,
    pub warnings: Vec<String>,
}

fn test_set_hash(queries: &[Sentence]) -> String {
    let mut ids: Vec<&str> = queries.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    sha256_hex(ids.join("\n").as_bytes())
}

fn build_gateway(config: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<Gateway> {
    let all_sentences: Vec<Sentence> = Split::all()
        .into_iter()
        .flat_map(|split| dataset.split(split).to_vec())
        .collect();
    let labels: Vec<Label> = dataset.labels.iter().cloned().collect();
    let kind = match &config.backend {
        BackendChoice::Remote { endpoint } => BackendKind::Remote(RemoteParams {
            endpoint: endpoint.clone(),
            api_key: None,
            timeout_secs: None,
        }),
        BackendChoice::ScriptedMock { responses } => BackendKind::ScriptedMock(responses.clone()),
        BackendChoice::GoldOracleMock => BackendKind::GoldOracleMock {
            gold: all_sentences,
            style: config.style,
            labels,
        },
        BackendChoice::NoisyOracleMock { p } => BackendKind::NoisyOracleMock {
            gold: all_sentences,
            style: config.style,
            labels,
            p: *p,
            seed,
        },
    };
    GatewayBuilder::new(kind)
        .cache_path(config.output_dir.join("cache.jsonl"))
        .build()
}

fn build_embedder(config: &EmbeddingConfig) -> Result<Box<dyn EmbeddingProvider>> {
    match config {
        EmbeddingConfig::Hash { dim } => Ok(Box::new(HashEmbedder::new(*dim))),
        EmbeddingConfig::Remote { endpoint, model } => {
            let api_key = std::env::var(crate::gateway::API_KEY_VAR).map_err(|_| {
                Error::BackendConfig(format!(
                    "remote embeddings need {}",
                    crate::gateway::API_KEY_VAR
                ))
            })?;
            Ok(Box::new(RemoteEmbedder::new(
                endpoint.clone(),
                api_key,
                model.clone(),
            )?))
        }
    }
}

/// Runs every seed of the config; one record per seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    let mut config = config.clone();
    config.normalize()?;
    let dataset = load_dataset(&config.dataset.path, config.dataset.format)?;
    config
        .seeds
        .clone()
        .iter()
        .map(|&seed| run_seed(&config, &dataset, seed))
        .collect()
}

fn run_seed(config: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<RunRecord> {
    let started = Instant::now();
    let seed_dir = config.output_dir.join(format!("seed{seed}"));
    std::fs::create_dir_all(&seed_dir).map_err(|e| Error::io(seed_dir.display().to_string(), e))?;

    let labels_ordered: Vec<Label> = dataset.labels.iter().cloned().collect();
    let label_set: BTreeSet<Label> = dataset.labels.clone();

    // Support from train, candidates from dev, evaluation on test.
    let mut support = greedy_sample(dataset.split(Split::Train), &label_set, config.shots, seed)?;
    if config.masking {
        support = mask_to_one_per_label(&support, seed)?;
    }
    write_support_set(&support, &seed_dir, "support")?;

    let test_split = dataset.split(Split::Test);
    let queries: Vec<Sentence> = match config.test_subsample {
        Some(n) => subsample_test(test_split, n.min(test_split.len()), seed)?,
        None => test_split.to_vec(),
    };
    let test_ids: BTreeSet<String> = queries.iter().map(|s| s.id.clone()).collect();

    let pools: Option<BTreeMap<Label, CandidatePool>> = if config.retrieval.enabled {
        let (pools, warnings) = build_candidate_pools(dataset.split(Split::Dev), &label_set);
        if !warnings.is_empty() {
            let path = seed_dir.join("pool_warnings.json");
            std::fs::write(&path, serde_json::to_string_pretty(&warnings)?)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
        Some(pools)
    } else {
        None
    };

    let gateway = build_gateway(config, dataset, seed)?;
    let provider = build_embedder(&config.retrieval.embedding)?;
    let embedding_cache = if config.retrieval.enabled {
        EmbeddingCache::open(&config.output_dir.join("embeddings.jsonl"))?
    } else {
        EmbeddingCache::ephemeral()
    };
    let profile = ChatProfile {
        model: config.model.clone(),
        temperature: config.decode.temperature,
        max_tokens: config.decode.max_tokens,
    };

    // Per-query pipeline over a worker pool; results keep query order.
    let next: AtomicUsize = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<std::result::Result<QueryArtifact, String>>>> =
        Mutex::new(vec![None; queries.len()]);
    let worker = || {
        loop {
            let index = next.fetch_add(1, Ordering::SeqCst);
            if index >= queries.len() {
                break;
            }
            let outcome = run_query(
                &queries[index],
                config,
                &support,
                pools.as_ref(),
                provider.as_ref(),
                &embedding_cache,
                &gateway,
                &profile,
                &labels_ordered,
                &label_set,
                &test_ids,
                seed,
            )
            .map_err(|e| e.to_string());
            results.lock().unwrap()[index] = Some(outcome);
        }
    };
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(queries.len()).max(1) {
            scope.spawn(worker);
        }
    });

    let results = results.into_inner().unwrap();
    let mut artifacts: Vec<QueryArtifact> = Vec::with_capacity(queries.len());
    let mut errors: Vec<(String, String)> = Vec::new();
    for (sentence, outcome) in queries.iter().zip(results) {
        match outcome.expect("worker filled every slot") {
            Ok(artifact) => artifacts.push(artifact),
            Err(reason) => errors.push((sentence.id.clone(), reason)),
        }
    }
    if !errors.is_empty() {
        let path = seed_dir.join("query_errors.json");
        std::fs::write(&path, serde_json::to_string_pretty(&errors)?)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    if errors.len() * 100 > queries.len() * QUERY_FAILURE_THRESHOLD_PCT as usize {
        return Err(Error::TooManyQueryFailures {
            failed: errors.len(),
            total: queries.len(),
            threshold_pct: QUERY_FAILURE_THRESHOLD_PCT,
        });
    }

    let mut artifact_lines = String::new();
    for artifact in &artifacts {
        artifact_lines.push_str(&serde_json::to_string(artifact)?);
        artifact_lines.push('\n');
    }
    let artifacts_path = seed_dir.join("queries.jsonl");
    std::fs::write(&artifacts_path, artifact_lines)
        .map_err(|e| Error::io(artifacts_path.display().to_string(), e))?;

    // Score both schemes; token-level IO is the primary metric.
    let options = ScoreOptions {
        credit_alt_labels: config.credit_alt_labels,
        alt_labels: dataset.alt_labels.clone(),
        unannotated: Default::default(),
    };
    let predictions: Vec<ParsedPrediction> =
        artifacts.iter().map(|a| a.parsed.clone()).collect();
    let mut reports = BTreeMap::new();
    let mut dump: Vec<ErrorRecord> = Vec::new();
    for scheme in [Scheme::TokenIo, Scheme::MentionExact] {
        let report = score(&queries, &predictions, scheme, &options)?;
        let json_path = seed_dir.join(format!("eval_report.{}.json", scheme.as_str()));
        std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(json_path.display().to_string(), e))?;
        let text_path = seed_dir.join(format!("eval_report.{}.txt", scheme.as_str()));
        std::fs::write(&text_path, report_to_text(&report))
            .map_err(|e| Error::io(text_path.display().to_string(), e))?;
        reports.insert(scheme.as_str().to_string(), report);
    }
    {
        let by_id: BTreeMap<&str, &ParsedPrediction> = predictions
            .iter()
            .map(|p| (p.query_id.as_str(), p))
            .collect();
        for sentence in &queries {
            if let Some(pred) = by_id.get(sentence.id.as_str()) {
                dump.extend(crate::eval::classify_errors(
                    sentence,
                    pred,
                    &options.alt_labels,
                    &options.unannotated,
                ));
            }
        }
        write_error_dump(&seed_dir.join("errors.jsonl"), &dump)?;
    }

    let stats = gateway.stats();
    let record = RunRecord {
        config_hash: config.hash(),
        template_hash: config.style.template_hash(),
        label_template_hash: label_identify_template_hash(),
        dataset: config.dataset.name.clone(),
        style: config.style,
        shots: config.shots,
        seed,
        model: config.model.clone(),
        backend: config.backend.describe().to_string(),
        provider_id: config
            .retrieval
            .enabled
            .then(|| provider.provider_id().to_string()),
        masked: config.masking,
        p2_mode: config.p2_mode,
        retrieval_enabled: config.retrieval.enabled,
        k_nn: config.retrieval.enabled.then_some(config.retrieval.k_nn),
        test_set_sha256: test_set_hash(&queries),
        n_queries: queries.len(),
        n_query_errors: errors.len(),
        n_label_fallbacks: artifacts
            .iter()
            .filter(|a| a.label_fallback == Some(true))
            .count(),
        token_spend: (stats.cache.prompt_tokens, stats.cache.completion_tokens),
        wall_time_secs: started.elapsed().as_secs_f64(),
        reports,
    };
    let record_path = seed_dir.join("run_record.json");
    std::fs::write(&record_path, serde_json::to_string_pretty(&record)?)
        .map_err(|e| Error::io(record_path.display().to_string(), e))?;
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn run_query(
    query: &Sentence,
    config: &ExperimentConfig,
    support: &SupportSet,
    pools: Option<&BTreeMap<Label, CandidatePool>>,
    provider: &dyn EmbeddingProvider,
    embedding_cache: &EmbeddingCache,
    gateway: &Gateway,
    profile: &ChatProfile,
    labels_ordered: &[Label],
    label_set: &BTreeSet<Label>,
    test_ids: &BTreeSet<String>,
    seed: u64,
) -> Result<QueryArtifact> {
    let mut warnings = Vec::new();
    let (example_set, label_fallback, demos) = match pools {
        Some(pools) => {
            let predicted = predict_labels(query, gateway, label_set, seed, profile)?;
            let example_set = retrieve_examples(
                query,
                &predicted.labels,
                pools,
                provider,
                embedding_cache,
                config.retrieval.k_nn,
                config.shots,
                seed,
                test_ids,
            )?;
            warnings.extend(example_set.warnings.clone());
            let demos = example_set.final_examples.sentences.clone();
            (Some(example_set), Some(predicted.fell_back), demos)
        }
        None => (None, None, support.sentences.clone()),
    };

    let prompt = render_prompt(config.style, query, &demos, labels_ordered)?;
    warnings.extend(prompt.warnings.clone());
    let request = ChatRequest {
        model: profile.model.clone(),
        messages: vec![Message::user(prompt.text())],
        temperature: profile.temperature,
        max_tokens: profile.max_tokens,
        seed_hint: Some(seed),
    };
    let raw_response = gateway.chat(&request).map_err(|e| Error::GatewayFailure {
        query_id: query.id.clone(),
        reason: e.to_string(),
    })?;

    let mut parsed = parse_answer(&raw_response, config.style, label_set);
    parsed.query_id = query.id.clone();
    ground_to_spans(&mut parsed, query);

    Ok(QueryArtifact {
        query_id: query.id.clone(),
        example_set,
        label_fallback,
        prompt_text: prompt.text().to_string(),
        raw_response,
        parsed,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub dataset: String,
    pub style: String,
    pub shots: usize,
    pub seed: u64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonGroup {
    pub style: String,
    pub shots: usize,
    pub mean_f1: f64,
    pub min_f1: f64,
    pub max_f1: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub dataset: String,
    pub scheme: String,
    pub rows: Vec<ComparisonRow>,
    pub groups: Vec<ComparisonGroup>,
}

/// Aligns runs over the identical test subset into a per-(style, shots,
/// seed) table with mean and min-max spread across seeds.
pub fn compare_runs(records: &[RunRecord]) -> Result<ComparisonTable> {
    if records.len() < 2 {
        return Err(Error::IncomparableRuns(
            "need at least two run records".into(),
        ));
    }
    let first = &records[0];
    for r in records {
        if r.dataset != first.dataset {
            return Err(Error::IncomparableRuns(format!(
                "datasets differ: {} vs {}",
                first.dataset, r.dataset
            )));
        }
        if r.test_set_sha256 != first.test_set_sha256 {
            let short = |h: &str| h.chars().take(12).collect::<String>();
            return Err(Error::IncomparableRuns(format!(
                "test subsets differ between runs (hash {} vs {}); rerun with the same subsample and seed",
                short(&first.test_set_sha256),
                short(&r.test_set_sha256)
            )));
        }
    }

    let scheme = Scheme::TokenIo.as_str();
    let mut rows: Vec<ComparisonRow> = records
        .iter()
        .map(|r| {
            let f1 = r
                .reports
                .get(scheme)
                .map(|rep| rep.micro.f1)
                .ok_or_else(|| Error::IncomparableRuns(format!("run lacks a {scheme} report")))?;
            Ok(ComparisonRow {
                dataset: r.dataset.clone(),
                style: r.style.as_str().to_string(),
                shots: r.shots,
                seed: r.seed,
                f1,
            })
        })
        .collect::<Result<_>>()?;
    rows.sort_by(|a, b| {
        (&a.style, a.shots, a.seed)
            .cmp(&(&b.style, b.shots, b.seed))
    });

    let mut groups: Vec<ComparisonGroup> = Vec::new();
    for row in &rows {
        match groups
            .iter_mut()
            .find(|g| g.style == row.style && g.shots == row.shots)
        {
            Some(group) => {
                group.n_seeds += 1;
                group.min_f1 = group.min_f1.min(row.f1);
                group.max_f1 = group.max_f1.max(row.f1);
                group.mean_f1 += row.f1;
            }
            None => groups.push(ComparisonGroup {
                style: row.style.clone(),
                shots: row.shots,
                mean_f1: row.f1,
                min_f1: row.f1,
                max_f1: row.f1,
                n_seeds: 1,
            }),
        }
    }
    for group in &mut groups {
        group.mean_f1 /= group.n_seeds as f64;
    }

    Ok(ComparisonTable {
        dataset: first.dataset.clone(),
        scheme: scheme.to_string(),
        rows,
        groups,
    })
}

impl ComparisonTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "dataset: {}  metric: micro-F1 ({})\n",
            self.dataset, self.scheme
        ));
        out.push_str(&format!(
            "{:<20} {:>6} {:>6} {:>9}\n",
            "style", "shots", "seed", "F1"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<20} {:>6} {:>6} {:>9.4}\n",
                row.style, row.shots, row.seed, row.f1
            ));
        }
        out.push_str(&format!(
            "\n{:<20} {:>6} {:>9} {:>19} {:>6}\n",
            "style", "shots", "mean F1", "spread (min..max)", "seeds"
        ));
        for g in &self.groups {
            out.push_str(&format!(
                "{:<20} {:>6} {:>9.4} {:>9.4}..{:<8.4} {:>6}\n",
                g.style, g.shots, g.mean_f1, g.min_f1, g.max_f1, g.n_seeds
            ));
        }
        out
    }
}

/// Loads a persisted run record.
pub fn read_run_record(path: &Path) -> Result<RunRecord> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(serde_json::from_str(&body)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_are_applied() {
        let json = r#"{
            "dataset": {"name": "toy", "path": "/tmp/toy", "format": "pubtator"},
            "shots": 1,
            "style": "rt_choice2",
            "model": "offline",
            "output_dir": "/tmp/out"
        }"#;
        let config = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(config.seeds, vec![0, 1, 2]);
        assert_eq!(config.test_subsample, None);
        assert_eq!(config.retrieval.k_nn, DEFAULT_K_NN);
        assert_eq!(config.workers, 4);
        assert!(!config.retrieval.enabled);
    }

    #[test]
    fn remote_backend_defaults_to_cost_protocol() {
        let json = r#"{
            "dataset": {"name": "toy", "path": "/tmp/toy", "format": "pubtator"},
            "shots": 5,
            "style": "rt_choice1",
            "model": "big-model",
            "output_dir": "/tmp/out",
            "backend": {"kind": "remote", "endpoint": null}
        }"#;
        let config = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(config.seeds, vec![0]);
        assert_eq!(config.test_subsample, Some(100));
    }

    #[test]
    fn p2_mode_forces_its_style() {
        let json = r#"{
            "dataset": {"name": "toy", "path": "/tmp/toy", "format": "pubtator"},
            "shots": 1,
            "style": "cot",
            "p2_mode": true,
            "model": "offline",
            "output_dir": "/tmp/out"
        }"#;
        let config = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(config.style, PromptStyle::P2LabelingOnly);
    }

    #[test]
    fn config_hash_is_stable() {
        let json = r#"{
            "dataset": {"name": "toy", "path": "/tmp/toy", "format": "pubtator"},
            "shots": 1,
            "style": "rt_choice2",
            "model": "offline",
            "output_dir": "/tmp/out"
        }"#;
        let a = ExperimentConfig::from_json(json).unwrap();
        let b = ExperimentConfig::from_json(json).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    fn record(style: &str, shots: usize, seed: u64, f1: f64) -> RunRecord {
        let report = EvalReport {
            scheme: Scheme::TokenIo,
            micro: crate::eval::MicroScores {
                precision: f1,
                recall: f1,
                f1,
            },
            per_label: BTreeMap::new(),
            error_histogram: BTreeMap::new(),
            n_other: 0,
            n_sentences: 10,
            n_wrong_template: 0,
        };
        RunRecord {
            config_hash: "c".into(),
            template_hash: "t".into(),
            label_template_hash: "l".into(),
            dataset: "toy".into(),
            style: style.parse().unwrap(),
            shots,
            seed,
            model: "m".into(),
            backend: "gold_oracle_mock".into(),
            provider_id: None,
            masked: false,
            p2_mode: false,
            retrieval_enabled: false,
            k_nn: None,
            test_set_sha256: "same".into(),
            n_queries: 10,
            n_query_errors: 0,
            n_label_fallbacks: 0,
            token_spend: (0, 0),
            wall_time_secs: 0.0,
            reports: BTreeMap::from([("token_io".to_string(), report)]),
        }
    }

    #[test]
    fn identical_runs_give_identical_rows() {
        let a = record("rt_choice2", 1, 0, 0.9);
        let b = record("rt_choice2", 1, 0, 0.9);
        let table = compare_runs(&[a, b]).unwrap();
        assert_eq!(table.rows[0], table.rows[1]);
    }

    #[test]
    fn choice_ablation_yields_two_groups() {
        let a = record("rt_choice1", 1, 0, 0.91);
        let b = record("rt_choice2", 1, 0, 0.88);
        let table = compare_runs(&[a, b]).unwrap();
        assert_eq!(table.groups.len(), 2);
        let text = table.to_text();
        assert!(text.contains("rt_choice1"));
        assert!(text.contains("rt_choice2"));
    }

    #[test]
    fn three_seeds_aggregate_matches_hand_computation() {
        let rs = vec![
            record("rt_choice2", 5, 0, 0.90),
            record("rt_choice2", 5, 1, 0.80),
            record("rt_choice2", 5, 2, 0.85),
        ];
        let table = compare_runs(&rs).unwrap();
        let g = &table.groups[0];
        // Hand aggregation: mean of 0.90, 0.80, 0.85.
        assert!((g.mean_f1 - 0.85).abs() < 1e-12);
        assert_eq!(g.min_f1, 0.80);
        assert_eq!(g.max_f1, 0.90);
        assert_eq!(g.n_seeds, 3);
    }

    #[test]
    fn mismatched_test_subsets_are_refused() {
        let a = record("rt_choice2", 1, 0, 0.9);
        let mut b = record("rt_choice2", 1, 1, 0.9);
        b.test_set_sha256 = "different".into();
        match compare_runs(&[a, b]) {
            Err(Error::IncomparableRuns(reason)) => assert!(reason.contains("subsets differ")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_record_is_refused() {
        let a = record("rt_choice2", 1, 0, 0.9);
        assert!(matches!(
            compare_runs(&[a]),
            Err(Error::IncomparableRuns(_))
        ));
    }
}
