//! Stage orchestration: configuration, persisted intermediates and the run
//! manifest.
//!
//! Every stage reads its inputs from the output directory, writes its
//! artifacts there and records their SHA-256 digests in `manifest.json`.
//! A stage whose upstream artifact is missing fails with an error naming
//! the stage to run first.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assignment::{
    assign_entities, eligible_categories, write_audit_tsv, AssignmentError, ContingencyIndex,
    EligibleCategory, DEFAULT_MIN_ENTITIES,
};
use crate::clustering::{
    agglomerative, grid, sweep_agglomerative, sweep_ap, sweep_kmeans, Algorithm, ApParams,
    ClusterRun, ClusteringError, RecordFilter, SweepAttempt, SweepContext,
};
use crate::corpus::{
    ingest, parse_lexicon_tsv, Corpus, CorpusError, Document, EntityLexicon, IngestConfig,
    IngestReport, Normalizer, Vocabulary,
};
use crate::embedding::{
    read_text, similarity_from_vectors, train, write_text, EmbeddingConfig, EmbeddingError,
    TrainReport,
};
use crate::evaluation::{
    compare_algorithms, pairwise_dissimilarity, select_best, write_runs_csv, BestRunSummary,
    CategoryBests, ComparisonReport, Dissimilarity, EvaluationError, Separation,
};
use crate::taxonomy::{
    assemble, bundled_base, export_html, export_json, load_json, parse_json, CategorySelection,
    TagOverrides, TaxonomyError, TaxonomyNode, DEFAULT_TOP_K,
};
use crate::{EmbeddingModel, Real};

pub const TOOL_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// File names inside the output directory.
pub mod artifacts {
    pub const TOKENS: &str = "tokens.jsonl";
    pub const LEXICON: &str = "lexicon.tsv";
    pub const VOCABULARY: &str = "vocab.tsv";
    pub const INGEST_REPORT: &str = "ingest_report.json";
    pub const EMBEDDINGS: &str = "embeddings.txt";
    pub const TRAIN_REPORT: &str = "train_report.json";
    pub const ASSIGNMENTS: &str = "assignments.tsv";
    pub const ELIGIBLE: &str = "eligible.json";
    pub const ATTEMPTS: &str = "sweep_attempts.jsonl";
    pub const RUNS: &str = "runs.jsonl";
    pub const COMPARISON: &str = "comparison.json";
    pub const COMPARISON_CSV: &str = "comparison.csv";
    pub const SILHOUETTES_CSV: &str = "silhouettes.csv";
    pub const SELECTION: &str = "selection.json";
    pub const TAXONOMY_JSON: &str = "taxonomy.json";
    pub const TAXONOMY_HTML: &str = "taxonomy.html";
    pub const MANIFEST: &str = "manifest.json";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("{what} not found; run `{stage}` first (expected {})", path.display())]
    MissingArtifact {
        what: &'static str,
        stage: Stage,
        path: PathBuf,
    },
    #[error("{}: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error("category `{category}`: {source}")]
    Clustering {
        category: String,
        #[source]
        source: ClusteringError,
    },
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    /// 1 usage or configuration, 2 data, 3 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config { .. } | PipelineError::MissingArtifact { .. } => 1,
            PipelineError::Embedding(EmbeddingError::Config(_)) => 1,
            PipelineError::Io { .. } | PipelineError::Internal(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn config_err(field: &str, message: impl Into<String>) -> PipelineError {
    PipelineError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub lexicon: PathBuf,
    /// Falls back to the bundled 21-category base.
    pub base_taxonomy: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub tag_overrides: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        let d = EmbeddingConfig::default();
        Self {
            dim: d.dim,
            window: d.window,
            negatives: d.negatives,
            epochs: d.epochs,
            learning_rate: d.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignmentSection {
    pub min_entities: usize,
}

impl Default for AssignmentSection {
    fn default() -> Self {
        Self {
            min_entities: DEFAULT_MIN_ENTITIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApSection {
    pub preference_start: f64,
    pub preference_stop: f64,
    pub preference_step: f64,
    pub damping: f64,
    pub max_iter: usize,
    pub stable_iters: usize,
}

impl Default for ApSection {
    fn default() -> Self {
        let p = ApParams::<f64>::default();
        Self {
            preference_start: 0.0,
            preference_stop: 1.0,
            preference_step: 0.05,
            damping: p.damping,
            max_iter: p.max_iter,
            stable_iters: p.stable_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgglomerativeSection {
    pub level_start: f64,
    pub level_stop: f64,
    pub level_step: f64,
}

impl Default for AgglomerativeSection {
    fn default() -> Self {
        Self {
            level_start: 0.0,
            level_stop: 1.0,
            level_step: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansSection {
    pub k_start: usize,
    pub k_stop: usize,
    pub k_step: usize,
    pub restarts: usize,
    pub max_rounds: usize,
}

impl Default for KMeansSection {
    fn default() -> Self {
        Self {
            k_start: 10,
            k_stop: 120,
            k_step: 10,
            restarts: 5,
            max_rounds: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepsSection {
    pub min_clusters: usize,
    pub ap: ApSection,
    pub agglomerative: AgglomerativeSection,
    pub kmeans: KMeansSection,
}

impl Default for SweepsSection {
    fn default() -> Self {
        Self {
            min_clusters: RecordFilter::default().min_clusters,
            ap: ApSection::default(),
            agglomerative: AgglomerativeSection::default(),
            kmeans: KMeansSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub dissimilarity: Dissimilarity,
    pub separation: Separation,
}

/// Which algorithm's best run feeds the taxonomy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmChoice {
    /// The overall winner of the comparison.
    #[default]
    Auto,
    Ap,
    Agglomerative,
    Kmeans,
}

impl AlgorithmChoice {
    fn fixed(self) -> Option<Algorithm> {
        match self {
            AlgorithmChoice::Auto => None,
            AlgorithmChoice::Ap => Some(Algorithm::Ap),
            AlgorithmChoice::Agglomerative => Some(Algorithm::Agglomerative),
            AlgorithmChoice::Kmeans => Some(Algorithm::Kmeans),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxonomySection {
    pub top_k: usize,
    pub algorithm: AlgorithmChoice,
}

impl Default for TaxonomySection {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            algorithm: AlgorithmChoice::Auto,
        }
    }
}

/// The whole pipeline configuration, one TOML document. Every key has a
/// default except the corpus and lexicon paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Sequential embedding training with a single RNG stream.
    pub deterministic: bool,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub paths: PathsConfig,
    pub preprocessing: IngestConfig,
    pub embedding: EmbeddingSection,
    pub assignment: AssignmentSection,
    pub sweeps: SweepsSection,
    pub evaluation: EvaluationSection,
    pub taxonomy: TaxonomySection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            jobs: 0,
            paths: PathsConfig::default(),
            preprocessing: IngestConfig::default(),
            embedding: EmbeddingSection::default(),
            assignment: AssignmentSection::default(),
            sweeps: SweepsSection::default(),
            evaluation: EvaluationSection::default(),
            taxonomy: TaxonomySection::default(),
        }
    }
}

/// Sets `dotted.key` in a TOML table, creating intermediate tables. The
/// value is parsed as a TOML literal and taken as a plain string when that
/// fails.
pub fn set_key(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(key, "malformed key"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(key, format!("`{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    /// Relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, overrides: &[(String, String)], base_dir: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err("<file>", e.message()))?;
        for (k, v) in overrides {
            set_key(&mut table, k, v)?;
        }
        let mut config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err("<file>", e.message()))?;
        config.resolve_paths(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("--config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.corpus);
        fix(&mut paths.lexicon);
        for p in [&mut paths.base_taxonomy, &mut paths.output_dir, &mut paths.tag_overrides]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths.corpus.as_os_str().is_empty() {
            return Err(config_err("paths.corpus", "required"));
        }
        if self.paths.lexicon.as_os_str().is_empty() {
            return Err(config_err("paths.lexicon", "required"));
        }
        let pre = &self.preprocessing;
        if pre.delimiters.is_empty() || pre.delimiters.iter().any(String::is_empty) {
            return Err(config_err("preprocessing.delimiters", "must be a non-empty list of non-empty strings"));
        }
        let emb = &self.embedding;
        for (field, value) in [
            ("embedding.dim", emb.dim),
            ("embedding.window", emb.window),
            ("embedding.negatives", emb.negatives),
            ("embedding.epochs", emb.epochs),
        ] {
            if value == 0 {
                return Err(config_err(field, "must be at least 1"));
            }
        }
        if !(emb.learning_rate.is_finite() && emb.learning_rate > 0.0) {
            return Err(config_err("embedding.learning_rate", "must be positive"));
        }
        if self.assignment.min_entities < 2 {
            return Err(config_err("assignment.min_entities", "must be at least 2"));
        }
        let sw = &self.sweeps;
        if sw.min_clusters < 2 {
            return Err(config_err("sweeps.min_clusters", "must be at least 2"));
        }
        check_range("sweeps.ap.preference", sw.ap.preference_start, sw.ap.preference_stop, sw.ap.preference_step)?;
        if !(sw.ap.damping >= 0.5 && sw.ap.damping < 1.0) {
            return Err(config_err("sweeps.ap.damping", "must lie in [0.5, 1)"));
        }
        if sw.ap.max_iter == 0 {
            return Err(config_err("sweeps.ap.max_iter", "must be at least 1"));
        }
        if sw.ap.stable_iters == 0 {
            return Err(config_err("sweeps.ap.stable_iters", "must be at least 1"));
        }
        let ag = &sw.agglomerative;
        check_range("sweeps.agglomerative.level", ag.level_start, ag.level_stop, ag.level_step)?;
        let km = &sw.kmeans;
        if km.k_start == 0 {
            return Err(config_err("sweeps.kmeans.k_start", "must be at least 1"));
        }
        if km.k_step == 0 {
            return Err(config_err("sweeps.kmeans.k_step", "must be positive"));
        }
        if km.k_stop < km.k_start {
            return Err(config_err("sweeps.kmeans.k_stop", "must not be below k_start"));
        }
        if km.restarts == 0 {
            return Err(config_err("sweeps.kmeans.restarts", "must be at least 1"));
        }
        if km.max_rounds == 0 {
            return Err(config_err("sweeps.kmeans.max_rounds", "must be at least 1"));
        }
        if self.evaluation.dissimilarity == Dissimilarity::Precomputed {
            return Err(config_err(
                "evaluation.dissimilarity",
                "must be `cosine` or `euclidean_normalized`",
            ));
        }
        if self.taxonomy.top_k == 0 {
            return Err(config_err("taxonomy.top_k", "must be at least 1"));
        }
        Ok(())
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        let e = &self.embedding;
        EmbeddingConfig {
            dim: e.dim,
            window: e.window,
            negatives: e.negatives,
            epochs: e.epochs,
            learning_rate: e.learning_rate,
            seed: self.seed,
            deterministic: self.deterministic,
            jobs: effective_jobs(self.jobs),
        }
    }

    pub fn preferences(&self) -> Vec<Real> {
        let ap = &self.sweeps.ap;
        grid(ap.preference_start, ap.preference_stop, ap.preference_step)
    }

    pub fn levels(&self) -> Vec<Real> {
        let ag = &self.sweeps.agglomerative;
        grid(ag.level_start, ag.level_stop, ag.level_step)
    }

    pub fn ks(&self) -> Vec<usize> {
        let km = &self.sweeps.kmeans;
        (km.k_start..=km.k_stop).step_by(km.k_step).collect()
    }

    pub fn ap_params(&self) -> ApParams<Real> {
        ApParams {
            damping: self.sweeps.ap.damping,
            max_iter: self.sweeps.ap.max_iter,
            stable_iters: self.sweeps.ap.stable_iters,
        }
    }
}

fn check_range(field: &str, start: f64, stop: f64, step: f64) -> Result<()> {
    if !(step.is_finite() && step > 0.0) {
        return Err(config_err(&format!("{field}_step"), "must be positive"));
    }
    if !(start.is_finite() && stop.is_finite() && start <= stop) {
        return Err(config_err(&format!("{field}_stop"), "must be finite and not below the start"));
    }
    Ok(())
}

pub fn effective_jobs(jobs: usize) -> usize {
    if jobs == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        jobs
    }
}

/// Runs `f` inside a rayon pool with `jobs` workers (0 = every core).
pub fn with_thread_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_jobs(jobs))
        .build()
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
    Ok(pool.install(f))
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Train,
    Assign,
    Cluster,
    Evaluate,
    Build,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Train,
        Stage::Assign,
        Stage::Cluster,
        Stage::Evaluate,
        Stage::Build,
        Stage::Export,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Train => "train",
            Stage::Assign => "assign",
            Stage::Cluster => "cluster",
            Stage::Evaluate => "evaluate",
            Stage::Build => "build",
            Stage::Export => "export",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Digests of the artifacts and input files the stage read.
    pub consumed: BTreeMap<String, String>,
    /// Digests of the artifacts the stage wrote.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: PipelineConfig,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    fn new(config: &PipelineConfig) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            config: config.clone(),
            stages: BTreeMap::new(),
        }
    }

    /// Output digests of every stage, keyed by artifact name. Timestamps are
    /// excluded so deterministic reruns compare equal.
    pub fn output_digests(&self) -> BTreeMap<String, String> {
        self.stages
            .values()
            .flat_map(|s| s.outputs.iter().map(|(k, v)| (k.clone(), v.clone())))
            .collect()
    }

    /// The stage and digest that last produced `artifact`.
    fn producer(&self, artifact: &str) -> Option<(Stage, &str)> {
        self.stages
            .iter()
            .find_map(|(stage, rec)| rec.outputs.get(artifact).map(|d| (*stage, d.as_str())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut hasher = Sha256::new();
    loop {
        let buf = file.fill_buf().map_err(io_err(path))?;
        if buf.is_empty() {
            break;
        }
        hasher.update(buf);
        let n = buf.len();
        file.consume(n);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

// ---------------------------------------------------------------------------
// Stage outputs

/// One line of the sweep-attempt ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerAttempt {
    pub category: String,
    #[serde(flatten)]
    pub attempt: SweepAttempt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignSummary {
    pub entities: usize,
    pub assigned: usize,
    pub ties: usize,
    pub eligible: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub categories: usize,
    pub attempts: usize,
    pub recorded: usize,
}

/// Written to `comparison.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub categories: Vec<CategoryBests>,
    pub report: ComparisonReport,
    /// Algorithm whose runs feed the taxonomy.
    pub selected_algorithm: Option<Algorithm>,
}

// ---------------------------------------------------------------------------
// Pipeline

struct StageScope<'a> {
    pipeline: &'a Pipeline,
    stage: Stage,
    record: StageRecord,
}

impl StageScope<'_> {
    /// Records the digest of an artifact about to be read and warns when it
    /// differs from the digest its producer recorded.
    fn consume(&mut self, manifest: &RunManifest, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        let name = self.pipeline.artifact_key(path);
        if let Some((stage, recorded)) = manifest.producer(&name) {
            if recorded != digest {
                log::warn!("{name} changed since `{stage}` wrote it (digest mismatch)");
            }
        }
        self.record.consumed.insert(name, digest);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.record.outputs.insert(self.pipeline.artifact_key(path), digest);
        Ok(())
    }

    fn finish(mut self, mut manifest: RunManifest) -> Result<()> {
        self.record.finished_unix = now_unix();
        manifest.config = self.pipeline.config.clone();
        manifest.stages.insert(self.stage, self.record);
        self.pipeline.write_manifest(&manifest)
    }
}

/// A configured pipeline bound to an output directory.
#[derive(Debug, Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, output_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&output_dir).map_err(io_err(&output_dir))?;
        Ok(Self {
            config,
            out: output_dir,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, artifact: &str) -> PathBuf {
        self.out.join(artifact)
    }

    fn artifact_key(&self, path: &Path) -> String {
        match path.strip_prefix(&self.out) {
            Ok(rel) => rel.display().to_string(),
            Err(_) => path.display().to_string(),
        }
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let path = self.path(artifacts::MANIFEST);
        if !path.exists() {
            return Ok(RunManifest::new(&self.config));
        }
        read_json(&path)
    }

    fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        write_json(&self.path(artifacts::MANIFEST), manifest)
    }

    fn begin(&self, stage: Stage) -> Result<(StageScope<'_>, RunManifest)> {
        log::info!("stage `{stage}` starting");
        let scope = StageScope {
            pipeline: self,
            stage,
            record: StageRecord {
                started_unix: now_unix(),
                ..StageRecord::default()
            },
        };
        Ok((scope, self.manifest()?))
    }

    fn require(&self, artifact: &str, what: &'static str, stage: Stage) -> Result<PathBuf> {
        let path = self.path(artifact);
        if path.is_file() {
            Ok(path)
        } else {
            Err(PipelineError::MissingArtifact { what, stage, path })
        }
    }

    fn base_taxonomy(&self, scope: &mut StageScope<'_>, manifest: &RunManifest) -> Result<TaxonomyNode> {
        let base = match &self.config.paths.base_taxonomy {
            Some(path) => {
                scope.consume(manifest, path)?;
                load_json(path)?
            }
            None => bundled_base(),
        };
        base.validate_base()?;
        Ok(base)
    }

    fn tag_overrides(&self, scope: &mut StageScope<'_>, manifest: &RunManifest) -> Result<TagOverrides> {
        match &self.config.paths.tag_overrides {
            Some(path) => {
                scope.consume(manifest, path)?;
                Ok(TagOverrides::load(path)?)
            }
            None => Ok(TagOverrides::default()),
        }
    }

    /// Segments and tokenizes the corpus and writes token streams, the
    /// normalized lexicon and the vocabulary.
    pub fn ingest(&self) -> Result<IngestReport> {
        let (mut scope, manifest) = self.begin(Stage::Ingest)?;
        let paths = &self.config.paths;
        scope.consume(&manifest, &paths.corpus)?;
        scope.consume(&manifest, &paths.lexicon)?;
        let base = self.base_taxonomy(&mut scope, &manifest)?;
        let known = base.category_ids().into_iter().collect();
        let ingested = ingest(&paths.corpus, &paths.lexicon, Some(&known), &self.config.preprocessing)?;
        if !ingested.report.entities_absent_from_corpus.is_empty() {
            log::warn!(
                "{} lexicon entities never occur in the corpus and are excluded",
                ingested.report.entities_absent_from_corpus.len()
            );
        }

        let tokens = self.path(artifacts::TOKENS);
        write_jsonl(&tokens, &ingested.corpus.documents)?;
        scope.output(&tokens)?;

        let lexicon = self.path(artifacts::LEXICON);
        write_lines(&lexicon, ingested.lexicon.entries().iter().map(|e| format!("{}\t{}", e.surface, e.frequency)))?;
        scope.output(&lexicon)?;

        let vocab = self.path(artifacts::VOCABULARY);
        let v = &ingested.vocabulary;
        write_lines(&vocab, v.tokens().iter().zip(v.counts()).map(|(t, c)| format!("{t}\t{c}")))?;
        scope.output(&vocab)?;

        let report = self.path(artifacts::INGEST_REPORT);
        write_json(&report, &ingested.report)?;
        scope.output(&report)?;
        scope.finish(manifest)?;
        Ok(ingested.report)
    }

    fn read_corpus(&self, scope: &mut StageScope<'_>, manifest: &RunManifest) -> Result<Corpus> {
        let path = self.require(artifacts::TOKENS, "token streams", Stage::Ingest)?;
        scope.consume(manifest, &path)?;
        Ok(Corpus {
            documents: read_jsonl::<Document>(&path)?,
        })
    }

    fn read_lexicon(&self, scope: &mut StageScope<'_>, manifest: &RunManifest) -> Result<EntityLexicon> {
        let path = self.require(artifacts::LEXICON, "normalized lexicon", Stage::Ingest)?;
        scope.consume(manifest, &path)?;
        let file = File::open(&path).map_err(io_err(&path))?;
        let entries = parse_lexicon_tsv(BufReader::new(file), &path.display().to_string())?;
        // Surfaces are already normalized and filtered.
        let identity = Normalizer {
            fold_case: false,
            fold_width: false,
        };
        Ok(EntityLexicon::from_entries(entries, identity, 0).0)
    }

    fn read_vocabulary(&self, scope: &mut StageScope<'_>, manifest: &RunManifest) -> Result<Vocabulary> {
        let path = self.require(artifacts::VOCABULARY, "vocabulary", Stage::Ingest)?;
        scope.consume(manifest, &path)?;
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (token, count) = line
                .rsplit_once('\t')
                .and_then(|(t, c)| c.parse::<u64>().ok().map(|c| (t.to_string(), c)))
                .ok_or_else(|| PipelineError::Artifact {
                    path: path.clone(),
                    message: format!("line {}: expected `token<TAB>count`", i + 1),
                })?;
            pairs.push((token, count));
        }
        Ok(Vocabulary::from_counts(pairs))
    }

    /// Trains entity and word embeddings over the token streams.
    pub fn train(&self) -> Result<TrainReport> {
        let (mut scope, manifest) = self.begin(Stage::Train)?;
        let corpus = self.read_corpus(&mut scope, &manifest)?;
        let vocab = self.read_vocabulary(&mut scope, &manifest)?;
        let sentences: Vec<Vec<usize>> = corpus
            .sentences()
            .map(|s| vocab.encode(&s.tokens))
            .filter(|s| s.len() > 1)
            .collect();
        let (model, report) = train::<Real>(&sentences, &vocab, &self.config.embedding_config())?;
        log::info!(
            "trained {} vectors; loss {:.4} -> {:.4}",
            model.len(),
            report.initial_loss(),
            report.final_loss()
        );
        let emb = self.path(artifacts::EMBEDDINGS);
        write_with(&emb, |w| write_text(&model, w))?;
        scope.output(&emb)?;
        let rep = self.path(artifacts::TRAIN_REPORT);
        write_json(&rep, &report)?;
        scope.output(&rep)?;
        scope.finish(manifest)?;
        Ok(report)
    }

    /// Assigns every lexicon entity to its highest chi-square category and
    /// writes the audit table and the eligible rosters.
    pub fn assign(&self) -> Result<AssignSummary> {
        let (mut scope, manifest) = self.begin(Stage::Assign)?;
        let corpus = self.read_corpus(&mut scope, &manifest)?;
        let lexicon = self.read_lexicon(&mut scope, &manifest)?;
        let base = self.base_taxonomy(&mut scope, &manifest)?;
        let categories = base.category_ids();
        let index = ContingencyIndex::new(&corpus, &categories)?;
        let entities: Vec<&str> = lexicon.entries().iter().map(|e| e.surface.as_str()).collect();
        let assignments = assign_entities(&entities, &index);
        let eligible = eligible_categories(&assignments, &categories, &lexicon, self.config.assignment.min_entities);
        if eligible.is_empty() {
            log::warn!("no category reaches {} entities", self.config.assignment.min_entities);
        }

        let audit = self.path(artifacts::ASSIGNMENTS);
        write_with(&audit, |w| write_audit_tsv(&assignments, w))?;
        scope.output(&audit)?;
        let elig = self.path(artifacts::ELIGIBLE);
        write_json(&elig, &eligible)?;
        scope.output(&elig)?;
        scope.finish(manifest)?;
        Ok(AssignSummary {
            entities: assignments.len(),
            assigned: assignments.iter().filter(|a| a.category.is_some()).count(),
            ties: assignments.iter().filter(|a| a.tie).count(),
            eligible: eligible.into_iter().map(|e| e.category).collect(),
        })
    }

    fn read_eligible(&self, scope: &mut StageScope<'_>, manifest: &RunManifest) -> Result<Vec<EligibleCategory>> {
        let path = self.require(artifacts::ELIGIBLE, "eligible categories", Stage::Assign)?;
        scope.consume(manifest, &path)?;
        read_json(&path)
    }

    /// Sweeps all three algorithms over every eligible category.
    pub fn cluster(&self) -> Result<ClusterSummary> {
        let (mut scope, manifest) = self.begin(Stage::Cluster)?;
        let emb = self.require(artifacts::EMBEDDINGS, "embedding model", Stage::Train)?;
        let eligible = self.read_eligible(&mut scope, &manifest)?;
        scope.consume(&manifest, &emb)?;
        let file = File::open(&emb).map_err(io_err(&emb))?;
        let model: EmbeddingModel = read_text(BufReader::new(file))?;

        let cfg = &self.config;
        let filter = RecordFilter {
            min_clusters: cfg.sweeps.min_clusters,
        };
        let (preferences, levels, ks) = (cfg.preferences(), cfg.levels(), cfg.ks());
        let mut attempts = Vec::new();
        let mut runs = Vec::new();
        for cat in &eligible {
            let surfaces: Vec<&str> = cat.roster.iter().map(|e| e.surface.as_str()).collect();
            let vectors = model.matrix_for(&surfaces)?;
            let wrap = |source| PipelineError::Clustering {
                category: cat.category.clone(),
                source,
            };
            let similarity = similarity_from_vectors(&vectors)?;
            let dissimilarity = pairwise_dissimilarity(&vectors, cfg.evaluation.dissimilarity)?;
            let ctx = SweepContext {
                category: &cat.category,
                dissimilarity: &dissimilarity,
                separation: cfg.evaluation.separation,
                filter,
            };
            let ap = sweep_ap(&ctx, &similarity, &preferences, &cfg.ap_params()).map_err(wrap)?;
            let dendrogram = agglomerative(&vectors).map_err(wrap)?;
            let ag = sweep_agglomerative(&ctx, &dendrogram, &levels).map_err(wrap)?;
            let km = sweep_kmeans(&ctx, &vectors, &ks, cfg.seed, cfg.sweeps.kmeans.restarts, cfg.sweeps.kmeans.max_rounds)
                .map_err(wrap)?;
            for sweep in [ap, ag, km] {
                attempts.extend(sweep.attempts.into_iter().map(|attempt| LedgerAttempt {
                    category: cat.category.clone(),
                    attempt,
                }));
                runs.extend(sweep.runs);
            }
            log::info!("clustered `{}` ({} entities)", cat.category, cat.roster.len());
        }

        let att = self.path(artifacts::ATTEMPTS);
        write_jsonl(&att, &attempts)?;
        scope.output(&att)?;
        let runs_path = self.path(artifacts::RUNS);
        write_jsonl(&runs_path, &runs)?;
        scope.output(&runs_path)?;
        scope.finish(manifest)?;
        Ok(ClusterSummary {
            categories: eligible.len(),
            attempts: attempts.len(),
            recorded: runs.len(),
        })
    }

    /// Picks the best run per category and algorithm, compares the
    /// algorithms and fixes the runs that feed the taxonomy.
    pub fn evaluate(&self) -> Result<Comparison> {
        let (mut scope, manifest) = self.begin(Stage::Evaluate)?;
        let runs_path = self.require(artifacts::RUNS, "cluster run ledger", Stage::Cluster)?;
        let eligible = self.read_eligible(&mut scope, &manifest)?;
        scope.consume(&manifest, &runs_path)?;
        let runs: Vec<ClusterRun<Real>> = read_jsonl(&runs_path)?;

        let mut categories = Vec::new();
        let mut best_runs: BTreeMap<(String, Algorithm), &ClusterRun<Real>> = BTreeMap::new();
        for cat in &eligible {
            let mut best = BTreeMap::new();
            for alg in Algorithm::ALL {
                let pool: Vec<ClusterRun<Real>> = runs
                    .iter()
                    .filter(|r| r.category == cat.category && r.algorithm == alg)
                    .cloned()
                    .collect();
                if let Ok(run) = select_best(&pool) {
                    best.insert(alg, BestRunSummary::of(run));
                    let original = runs
                        .iter()
                        .find(|r| *r == run)
                        .expect("selected run comes from the ledger");
                    best_runs.insert((cat.category.clone(), alg), original);
                }
            }
            categories.push(CategoryBests {
                category: cat.category.clone(),
                best,
            });
        }
        let report = compare_algorithms(&categories);
        let chosen = self.config.taxonomy.algorithm.fixed().or(report.winner);

        let mut selection = Vec::new();
        for cat in &eligible {
            let preferred = chosen.and_then(|a| best_runs.get(&(cat.category.clone(), a)));
            let run = match preferred {
                Some(run) => Some(*run),
                None => {
                    let all: Vec<ClusterRun<Real>> = runs.iter().filter(|r| r.category == cat.category).cloned().collect();
                    let fallback = select_best(&all).ok().cloned();
                    match &fallback {
                        Some(r) => log::warn!(
                            "`{}` has no admissible {} run; using its best {} run",
                            cat.category,
                            chosen.map_or("selected".to_string(), |a| a.to_string()),
                            r.algorithm
                        ),
                        None => log::warn!("`{}` has no admissible run and gets no clusters", cat.category),
                    }
                    fallback.and_then(|f| runs.iter().find(|r| **r == f))
                }
            };
            if let Some(run) = run {
                selection.push(run.clone());
            }
        }

        let comparison = Comparison {
            categories,
            report,
            selected_algorithm: chosen,
        };
        let cmp = self.path(artifacts::COMPARISON);
        write_json(&cmp, &comparison)?;
        scope.output(&cmp)?;
        let cmp_csv = self.path(artifacts::COMPARISON_CSV);
        write_with(&cmp_csv, |w| write_comparison_csv(&comparison.report, w))?;
        scope.output(&cmp_csv)?;
        let sil = self.path(artifacts::SILHOUETTES_CSV);
        write_with(&sil, |w| write_runs_csv(&runs, w))?;
        scope.output(&sil)?;
        let sel = self.path(artifacts::SELECTION);
        write_json(&sel, &selection)?;
        scope.output(&sel)?;
        scope.finish(manifest)?;
        Ok(comparison)
    }

    /// Assembles the five-level taxonomy from the selected runs.
    pub fn build(&self) -> Result<TaxonomyNode> {
        let (mut scope, manifest) = self.begin(Stage::Build)?;
        let sel_path = self.require(artifacts::SELECTION, "selected runs", Stage::Evaluate)?;
        let eligible = self.read_eligible(&mut scope, &manifest)?;
        scope.consume(&manifest, &sel_path)?;
        let selection: Vec<ClusterRun<Real>> = read_json(&sel_path)?;
        let base = self.base_taxonomy(&mut scope, &manifest)?;
        let overrides = self.tag_overrides(&mut scope, &manifest)?;

        let selections = selection
            .into_iter()
            .map(|run| {
                let roster = eligible
                    .iter()
                    .find(|e| e.category == run.category)
                    .map(|e| e.roster.clone())
                    .ok_or_else(|| PipelineError::Artifact {
                        path: sel_path.clone(),
                        message: format!("selected category `{}` is not eligible", run.category),
                    })?;
                Ok(CategorySelection {
                    category: run.category,
                    roster,
                    partition: run.partition,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tree = assemble(&base, &selections, self.config.taxonomy.top_k, &overrides)?;
        let out = self.path(artifacts::TAXONOMY_JSON);
        write_string(&out, &export_json(&tree))?;
        scope.output(&out)?;
        scope.finish(manifest)?;
        Ok(tree)
    }

    /// Renders the built taxonomy as a static HTML page.
    pub fn export(&self) -> Result<PathBuf> {
        let (mut scope, manifest) = self.begin(Stage::Export)?;
        let json = self.require(artifacts::TAXONOMY_JSON, "taxonomy", Stage::Build)?;
        scope.consume(&manifest, &json)?;
        let text = std::fs::read_to_string(&json).map_err(io_err(&json))?;
        let tree = parse_json(&text)?;
        if export_json(&tree) != text {
            log::warn!("{} is not in canonical form", json.display());
        }
        let html = self.path(artifacts::TAXONOMY_HTML);
        write_string(&html, &export_html(&tree))?;
        scope.output(&html)?;
        scope.finish(manifest)?;
        Ok(html)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<TaxonomyNode> {
        self.ingest()?;
        self.train()?;
        self.assign()?;
        self.cluster()?;
        self.evaluate()?;
        let tree = self.build()?;
        self.export()?;
        Ok(tree)
    }
}

fn write_comparison_csv<W: Write>(report: &ComparisonReport, mut w: W) -> std::io::Result<()> {
    let names: Vec<&str> = Algorithm::ALL.iter().map(|a| a.as_str()).collect();
    writeln!(w, "category,{},winner", names.join(","))?;
    for row in &report.rows {
        let cells: Vec<String> = Algorithm::ALL
            .iter()
            .map(|a| row.cells.get(a).copied().flatten().map_or(String::new(), |v| v.to_string()))
            .collect();
        writeln!(
            w,
            "{},{},{}",
            csv_field(&row.category),
            cells.join(","),
            row.winner.map_or("", |a| a.as_str())
        )?;
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

// ---------------------------------------------------------------------------
// File helpers

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn write_lines<I: IntoIterator<Item = String>>(path: &Path, lines: I) -> Result<()> {
    write_with(path, |w| {
        for line in lines {
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Internal(e.to_string()))?;
    text.push('\n');
    write_string(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_with(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Artifact {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[paths]\ncorpus = \"c.jsonl\"\nlexicon = \"l.tsv\"\n";

    #[test]
    fn defaults_follow_the_protocol() {
        let c = PipelineConfig::from_toml(MINIMAL, &[], Path::new("/data")).unwrap();
        assert_eq!(c.paths.corpus, PathBuf::from("/data/c.jsonl"));
        assert_eq!(c.preferences().len(), 21);
        assert_eq!(c.levels().len(), 51);
        assert_eq!(c.ks(), (1..=12).map(|i| i * 10).collect::<Vec<_>>());
        assert_eq!(c.embedding.dim, 200);
        assert_eq!(c.embedding.window, 5);
        assert_eq!(c.preprocessing.min_frequency, 4);
        assert_eq!(c.assignment.min_entities, 100);
        assert_eq!(c.sweeps.min_clusters, 10);
        assert_eq!(c.taxonomy.top_k, 5);
    }

    #[test]
    fn overrides_apply_before_validation() {
        let sets = vec![
            ("embedding.dim".to_string(), "16".to_string()),
            ("taxonomy.algorithm".to_string(), "kmeans".to_string()),
            ("paths.output_dir".to_string(), "out dir".to_string()),
        ];
        let c = PipelineConfig::from_toml(MINIMAL, &sets, Path::new("/x")).unwrap();
        assert_eq!(c.embedding.dim, 16);
        assert_eq!(c.taxonomy.algorithm, AlgorithmChoice::Kmeans);
        assert_eq!(c.paths.output_dir, Some(PathBuf::from("/x/out dir")));
    }

    #[test]
    fn validation_names_the_field() {
        let bad = [
            ("sweeps.ap.preference_step", "0", "sweeps.ap.preference_step"),
            ("sweeps.ap.damping", "1.0", "sweeps.ap.damping"),
            ("sweeps.kmeans.k_stop", "5", "sweeps.kmeans.k_stop"),
            ("embedding.window", "0", "embedding.window"),
            ("evaluation.dissimilarity", "\"precomputed\"", "evaluation.dissimilarity"),
        ];
        for (key, value, field) in bad {
            let err = PipelineConfig::from_toml(MINIMAL, &[(key.into(), value.into())], Path::new(".")).unwrap_err();
            match err {
                PipelineError::Config { field: f, .. } => assert_eq!(f, field),
                other => panic!("{other}"),
            }
        }
        let err = PipelineConfig::from_toml("[paths]\ncorpus = \"c\"\n", &[], Path::new(".")).unwrap_err();
        assert!(matches!(err, PipelineError::Config { field, .. } if field == "paths.lexicon"));
        let err = PipelineConfig::from_toml("[embedding]\ndimm = 3\n", &[], Path::new(".")).unwrap_err();
        assert!(err.to_string().contains("dimm"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn set_key_parses_literals() {
        let mut t = toml::Table::new();
        set_key(&mut t, "a.b", "3").unwrap();
        set_key(&mut t, "a.c", "hello").unwrap();
        set_key(&mut t, "d", "[\"x\", \"y\"]").unwrap();
        assert_eq!(t["a"]["b"].as_integer(), Some(3));
        assert_eq!(t["a"]["c"].as_str(), Some("hello"));
        assert_eq!(t["d"].as_array().unwrap().len(), 2);
        assert!(set_key(&mut t, "a..b", "1").is_err());
        assert!(set_key(&mut t, "a.b.c", "1").is_err());
    }

    #[test]
    fn missing_upstream_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = PipelineConfig::from_toml(MINIMAL, &[], dir.path()).unwrap();
        config.deterministic = true;
        let p = Pipeline::new(config, dir.path().join("out")).unwrap();
        let err = p.cluster().unwrap_err();
        assert!(err.to_string().starts_with("embedding model not found; run `train`"), "{err}");
        assert_eq!(err.exit_code(), 1);
        let err = p.build().unwrap_err();
        assert!(err.to_string().contains("run `evaluate`"), "{err}");
    }

    #[test]
    fn digests_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("x");
        std::fs::write(&f, b"abc").unwrap();
        assert_eq!(
            sha256_file(&f).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
