//! Run configuration, stage orchestration and run manifests.
//!
//! Configuration is layered: command-line flags override environment
//! variables, which override the JSON config file, which overrides defaults.
//! The only seed is [`RunConfig::seed`]; it is copied into the evaluation and
//! mock-encoder settings before anything runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Dataset, DatasetFormat, LoadOptions, PairMode, ValidationReport};
use crate::embedding::{Embedder, EmbeddingVector, EncoderConfig, EncoderProvider, LabelRenderer, PairTexts, ProviderKind};
use crate::scoring::{predict_relation, ScoreBreakdown, ScoringMode};
use crate::sideinfo::{self, BuildSummary, ChatClient, GenerationConfig, OfflineChatClient, SideInfoStore};
use crate::zseval::{self, AblationReport, EvalConfig, EvalReport, PredictionRecord};

pub const ENCODER_URL_ENV: &str = "ZSRE_ENCODER_URL";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage '{stage}' failed: {cause}")]
    Stage { stage: Stage, cause: String },
    #[error("unknown document '{0}'")]
    UnknownDocument(String),
    #[error("missing embeddings for {} text(s), first: '{}'", .0.len(), .0.first().map(String::as_str).unwrap_or(""))]
    MissingEmbedding(Vec<String>),
}

impl PipelineError {
    /// 2 for configuration problems, 3 for everything that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }

    fn stage(stage: Stage, cause: impl ToString) -> Self {
        PipelineError::Stage {
            stage,
            cause: cause.to_string(),
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Validate,
    Sideinfo,
    Embed,
    Score,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Validate, Stage::Sideinfo, Stage::Embed, Stage::Score, Stage::Eval];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Validate => "validate",
            Stage::Sideinfo => "sideinfo",
            Stage::Embed => "embed",
            Stage::Score => "score",
            Stage::Eval => "eval",
        }
    }

    fn needs_sideinfo(self) -> bool {
        matches!(self, Stage::Embed | Stage::Score | Stage::Eval)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage '{s}' (expected one of validate, sideinfo, embed, score, eval)"))
    }
}

/// Parses `"validate,score"` style lists.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let stages: BTreeSet<Stage> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(Stage::from_str)
        .collect::<Result<_, _>>()
        .map_err(PipelineError::Config)?;
    if stages.is_empty() {
        return Err(PipelineError::Config("no stages given".into()));
    }
    Ok(stages.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub dataset_format: DatasetFormat,
    pub check_surface: bool,
    pub sideinfo_cache: PathBuf,
    pub embedding_cache: PathBuf,
    /// Candidate labels: a JSON object `{id: name}` or one label per line.
    pub labels_file: Option<PathBuf>,
    /// Pairs written by the score stage. Evaluation always uses gold pairs.
    pub pair_mode: PairMode,
    pub encoder: EncoderConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
    /// Also run every scoring mode during the eval stage.
    pub ablation: bool,
    pub output_dir: PathBuf,
    pub validation_out: Option<PathBuf>,
    pub breakdowns_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
    pub seed: u64,
    pub offline: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            dataset_format: DatasetFormat::DocredJson,
            check_surface: true,
            sideinfo_cache: PathBuf::from("sideinfo.jsonl"),
            embedding_cache: PathBuf::from("embeddings.jsonl"),
            labels_file: None,
            pair_mode: PairMode::GoldPairs,
            encoder: EncoderConfig::default(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
            ablation: false,
            output_dir: PathBuf::from("zsre-out"),
            validation_out: None,
            breakdowns_out: None,
            report_out: None,
            seed: 0,
            offline: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&raw).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `ZSRE_ENCODER_URL`. The chat API key is read when the client is built.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(url) = get(ENCODER_URL_ENV).filter(|u| !u.trim().is_empty()) {
            self.encoder.base_url = Some(url);
        }
    }

    /// Copies the run seed into every seeded component.
    pub fn propagate_seed(&mut self) {
        self.eval.master_seed = self.seed;
        self.encoder.mock_seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: &dyn std::fmt::Display| PipelineError::Config(e.to_string());
        self.encoder.validate().map_err(|e| cfg_err(&e))?;
        self.generation.validate().map_err(|e| cfg_err(&e))?;
        if self.encoder.provider == ProviderKind::RemoteHttp && self.encoder.base_url.is_none() {
            return Err(PipelineError::Config(format!(
                "remote_http encoder needs encoder.base_url or {ENCODER_URL_ENV}"
            )));
        }
        if self.eval.samples_per_size == 0 || self.eval.sizes.is_empty() || self.eval.sizes.contains(&0) {
            return Err(PipelineError::Config("eval.sizes and eval.samples_per_size must be positive".into()));
        }
        let dataset = self
            .dataset
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no dataset given".into()))?;
        if !dataset.is_file() {
            return Err(PipelineError::Config(format!("dataset '{}' not found", dataset.display())));
        }
        if let Some(labels) = &self.labels_file {
            if !labels.is_file() {
                return Err(PipelineError::Config(format!("labels file '{}' not found", labels.display())));
            }
        }
        Ok(())
    }

    pub fn validation_path(&self) -> PathBuf {
        self.validation_out.clone().unwrap_or_else(|| self.output_dir.join("validation.json"))
    }

    pub fn breakdowns_path(&self) -> PathBuf {
        self.breakdowns_out.clone().unwrap_or_else(|| self.output_dir.join("breakdowns.jsonl"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.report_out.clone().unwrap_or_else(|| self.output_dir.join("report.json"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir.join("manifest.json")
    }
}

/// Candidate label ids plus the id → name table from a labels file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSpec {
    pub ids: Vec<String>,
    pub names: BTreeMap<String, String>,
}

pub fn load_label_file(path: &Path) -> Result<LabelSpec> {
    let raw = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    if raw.trim_start().starts_with('{') {
        let names: BTreeMap<String, String> =
            serde_json::from_str(&raw).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        return Ok(LabelSpec {
            ids: names.keys().cloned().collect(),
            names,
        });
    }
    let mut seen = BTreeSet::new();
    let ids: Vec<String> = raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter(|l| seen.insert(l.to_string()))
        .map(str::to_string)
        .collect();
    if ids.is_empty() {
        return Err(PipelineError::Config(format!("{}: no labels", path.display())));
    }
    Ok(LabelSpec {
        ids,
        names: BTreeMap::new(),
    })
}

/// External services a run may call.
#[derive(Clone)]
pub struct Services {
    pub chat: Arc<dyn ChatClient>,
    pub encoder: Arc<dyn EncoderProvider>,
}

impl Services {
    /// HTTP chat client (or a refusing one when offline) and the configured encoder.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let chat: Arc<dyn ChatClient> = if cfg.offline {
            Arc::new(OfflineChatClient)
        } else {
            Arc::new(cfg.generation.http_client())
        };
        let encoder = cfg
            .encoder
            .build_provider()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(Self { chat, encoder })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed,
    Planned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVersions {
    pub description: String,
    pub hypernym: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub started_at: DateTime<Utc>,
    pub config: RunConfig,
    pub stages: Vec<Stage>,
    pub prompt_versions: PromptVersions,
    /// SHA-256 of every input artifact present when the run started.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every artifact present when the run ended.
    pub artifacts: BTreeMap<String, String>,
    pub timings: Vec<StageTiming>,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRecord {
    pub doc_id: String,
    pub head_index: usize,
    pub tail_index: usize,
    pub mode: ScoringMode,
    pub predicted_label: String,
    pub winner: bool,
    #[serde(flatten)]
    pub breakdown: ScoreBreakdown,
}

#[derive(Debug, Default)]
pub struct PipelineOutcome {
    pub manifest: Option<RunManifest>,
    /// Human-readable plan, filled for dry runs.
    pub plan: Vec<String>,
    pub validation: Option<ValidationReport>,
    pub sideinfo: Option<BuildSummary>,
    pub embedded_texts: Option<usize>,
    pub breakdowns: Option<usize>,
    pub eval: Option<EvalReport>,
    pub predictions: Vec<PredictionRecord>,
    pub ablation: Option<AblationReport>,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn hash_artifacts(paths: &[&Path]) -> BTreeMap<String, String> {
    paths
        .iter()
        .filter(|p| p.is_file())
        .filter_map(|p| sha256_file(p).ok().map(|h| (p.display().to_string(), h)))
        .collect()
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir),
        _ => Ok(()),
    }
}

/// Writes through a `.partial` sibling that is renamed on success, so an
/// interrupted write leaves a clearly marked file behind.
pub fn write_output(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    ensure_parent(path)?;
    let mut partial = path.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    fs::write(&partial, contents)?;
    fs::rename(&partial, path)
}

fn jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Lazily loaded state shared by the stages of one run.
struct Context<'a> {
    cfg: &'a RunConfig,
    services: &'a Services,
    dataset: Option<Dataset>,
    store: Option<SideInfoStore>,
    embedder: Option<Embedder>,
    labels: Option<LabelSpec>,
    saved_cache_len: usize,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a RunConfig, services: &'a Services) -> Self {
        Self {
            cfg,
            services,
            dataset: None,
            store: None,
            embedder: None,
            labels: None,
            saved_cache_len: 0,
        }
    }

    fn dataset(&mut self, stage: Stage) -> Result<&Dataset> {
        if self.dataset.is_none() {
            let path = self.cfg.dataset.as_ref().expect("validated");
            let opts = LoadOptions {
                lenient: false,
                check_surface: self.cfg.check_surface,
            };
            let outcome = corpus::load_dataset_with(path, self.cfg.dataset_format, opts)
                .map_err(|e| PipelineError::stage(stage, e))?;
            self.dataset = Some(outcome.dataset);
        }
        Ok(self.dataset.as_ref().expect("loaded"))
    }

    fn store(&mut self, stage: Stage) -> Result<&mut SideInfoStore> {
        if self.store.is_none() {
            let path = &self.cfg.sideinfo_cache;
            if stage != Stage::Sideinfo && !path.is_file() {
                return Err(PipelineError::stage(
                    stage,
                    format!("missing sideinfo cache '{}'", path.display()),
                ));
            }
            ensure_parent(path).map_err(|e| PipelineError::stage(stage, e))?;
            self.store = Some(SideInfoStore::open(path).map_err(|e| PipelineError::stage(stage, e))?);
        }
        Ok(self.store.as_mut().expect("opened"))
    }

    fn embedder(&mut self, stage: Stage) -> Result<&Embedder> {
        if self.embedder.is_none() {
            let embedder = Embedder::new(self.services.encoder.clone(), self.cfg.encoder.batch_size).offline(self.cfg.offline);
            let loaded = embedder
                .load_cache(&self.cfg.embedding_cache)
                .map_err(|e| PipelineError::stage(stage, e))?;
            self.saved_cache_len = loaded;
            self.embedder = Some(embedder);
        }
        Ok(self.embedder.as_ref().expect("built"))
    }

    fn labels(&mut self, stage: Stage) -> Result<LabelSpec> {
        if self.labels.is_none() {
            let spec = match &self.cfg.labels_file {
                Some(path) => load_label_file(path)?,
                None => LabelSpec {
                    ids: self.dataset(stage)?.labels(),
                    names: BTreeMap::new(),
                },
            };
            self.labels = Some(spec);
        }
        Ok(self.labels.clone().expect("loaded"))
    }

    fn renderer(&mut self, stage: Stage) -> Result<LabelRenderer> {
        let mut renderer = self.cfg.eval.labels.clone();
        for (id, name) in self.labels(stage)?.names {
            renderer.names.entry(id).or_insert(name);
        }
        Ok(renderer)
    }

    /// Persists newly computed embeddings, never under offline mode.
    fn save_embeddings(&mut self, stage: Stage) -> Result<()> {
        let Some(embedder) = &self.embedder else {
            return Ok(());
        };
        if self.cfg.offline || embedder.cached_len() == self.saved_cache_len {
            return Ok(());
        }
        ensure_parent(&self.cfg.embedding_cache).map_err(|e| PipelineError::stage(stage, e))?;
        embedder
            .save_cache(&self.cfg.embedding_cache)
            .map_err(|e| PipelineError::stage(stage, e))?;
        self.saved_cache_len = embedder.cached_len();
        Ok(())
    }

    fn pairs(&mut self, stage: Stage, mode: PairMode) -> Result<Vec<(usize, usize, usize)>> {
        let dataset = self.dataset(stage)?;
        Ok(dataset
            .documents
            .iter()
            .enumerate()
            .flat_map(|(d, doc)| {
                corpus::enumerate_entity_pairs(doc, mode)
                    .into_iter()
                    .map(move |(h, t)| (d, h, t))
            })
            .collect())
    }

    fn pair_texts(&mut self, stage: Stage, pairs: &[(usize, usize, usize)]) -> Result<Vec<PairTexts>> {
        self.dataset(stage)?;
        self.store(stage)?;
        let (dataset, store) = (self.dataset.as_ref().expect("loaded"), self.store.as_ref().expect("opened"));
        let mut missing = BTreeSet::new();
        let mut out = Vec::with_capacity(pairs.len());
        for &(d, h, t) in pairs {
            let doc = &dataset.documents[d];
            match (store.get(&doc.doc_id, h), store.get(&doc.doc_id, t)) {
                (Some(head), Some(tail)) => out.push(
                    PairTexts::render(head.side(), tail.side(), self.cfg.eval.prompt_style)
                        .map_err(|e| PipelineError::stage(stage, e))?,
                ),
                (head, tail) => {
                    if head.is_none() {
                        missing.insert(format!("{}#{h}", doc.doc_id));
                    }
                    if tail.is_none() {
                        missing.insert(format!("{}#{t}", doc.doc_id));
                    }
                }
            }
        }
        if !missing.is_empty() {
            let list: Vec<_> = missing.into_iter().collect();
            return Err(PipelineError::stage(
                stage,
                format!("missing sideinfo for {} entities: {}", list.len(), list.join(", ")),
            ));
        }
        Ok(out)
    }

    /// Embeds `texts`, failing with a list of misses under offline mode.
    fn ensure_embedded(&mut self, stage: Stage, texts: &[&str]) -> Result<()> {
        let embedder = self.embedder(stage)?;
        if embedder.is_offline() {
            let missing = embedder.missing(texts);
            if !missing.is_empty() {
                return Err(PipelineError::stage(
                    stage,
                    format!("offline: {} texts missing from the embedding cache, first: '{}'", missing.len(), missing[0]),
                ));
            }
        }
        embedder.embed_texts(texts).map_err(|e| PipelineError::stage(stage, e))?;
        Ok(())
    }

    fn label_embeddings(&mut self, stage: Stage, ids: &[String]) -> Result<HashMap<String, EmbeddingVector>> {
        let renderer = self.renderer(stage)?;
        let texts = ids
            .iter()
            .map(|id| renderer.render(id).map_err(|e| PipelineError::stage(stage, e)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        self.ensure_embedded(stage, &refs)?;
        let embedder = self.embedder.as_ref().expect("built");
        ids.iter()
            .zip(&texts)
            .map(|(id, text)| {
                embedder
                    .embed_text(text)
                    .map(|v| (id.clone(), v))
                    .map_err(|e| PipelineError::stage(stage, e))
            })
            .collect()
    }
}

fn run_validate(ctx: &mut Context<'_>, out: &mut PipelineOutcome) -> Result<()> {
    let cfg = ctx.cfg;
    let report = corpus::validate_file(cfg.dataset.as_ref().expect("validated"), cfg.dataset_format, cfg.check_surface);
    let json = serde_json::to_vec_pretty(&report).expect("report serializes");
    write_output(&cfg.validation_path(), &json).map_err(|e| PipelineError::stage(Stage::Validate, e))?;
    let failure = (!report.valid).then(|| {
        report
            .error
            .clone()
            .or_else(|| report.skipped.first().map(|s| format!("{}: {}", s.doc_id, s.reason)))
            .unwrap_or_else(|| "invalid dataset".into())
    });
    out.validation = Some(report);
    match failure {
        Some(cause) => Err(PipelineError::stage(Stage::Validate, cause)),
        None => Ok(()),
    }
}

fn run_sideinfo(ctx: &mut Context<'_>, out: &mut PipelineOutcome) -> Result<()> {
    let stage = Stage::Sideinfo;
    let cfg = ctx.cfg;
    let prompts = cfg.generation.prompts().map_err(|e| PipelineError::Config(e.to_string()))?;
    ctx.dataset(stage)?;
    ctx.store(stage)?;
    let dataset = ctx.dataset.as_ref().expect("loaded");
    let store = ctx.store.as_mut().expect("opened");
    if cfg.offline {
        let missing = store.missing(dataset);
        if !missing.is_empty() {
            let (doc, idx) = &missing[0];
            return Err(PipelineError::stage(
                stage,
                format!("offline: {} entities missing from the sideinfo cache, first: {doc}#{idx}", missing.len()),
            ));
        }
    }
    let summary = sideinfo::build_side_info(dataset, ctx.services.chat.as_ref(), &cfg.generation, &prompts, store)
        .map_err(|e| PipelineError::stage(stage, e))?;
    out.sideinfo = Some(summary);
    Ok(())
}

fn run_embed(ctx: &mut Context<'_>, out: &mut PipelineOutcome) -> Result<()> {
    let stage = Stage::Embed;
    let mut pairs = ctx.pairs(stage, ctx.cfg.pair_mode)?;
    if ctx.cfg.pair_mode != PairMode::GoldPairs {
        let gold = ctx.pairs(stage, PairMode::GoldPairs)?;
        let known: BTreeSet<_> = pairs.iter().copied().collect();
        pairs.extend(gold.into_iter().filter(|p| !known.contains(p)));
    }
    let texts = ctx.pair_texts(stage, &pairs)?;
    let ids = {
        let mut ids = ctx.labels(stage)?.ids;
        let inventory = ctx.dataset(stage)?.labels();
        let known: BTreeSet<String> = ids.iter().cloned().collect();
        ids.extend(inventory.into_iter().filter(|l| !known.contains(l)));
        ids
    };
    ctx.label_embeddings(stage, &ids)?;
    let slots: Vec<&str> = texts.iter().flat_map(|t| t.as_slots()).collect();
    ctx.ensure_embedded(stage, &slots)?;
    ctx.save_embeddings(stage)?;
    out.embedded_texts = Some(ctx.embedder.as_ref().expect("built").cached_len());
    Ok(())
}

fn run_score(ctx: &mut Context<'_>, out: &mut PipelineOutcome) -> Result<()> {
    let stage = Stage::Score;
    let cfg = ctx.cfg;
    let pairs = ctx.pairs(stage, cfg.pair_mode)?;
    let texts = ctx.pair_texts(stage, &pairs)?;
    let ids = ctx.labels(stage)?.ids;
    let label_vectors = ctx.label_embeddings(stage, &ids)?;
    let slots: Vec<&str> = texts.iter().flat_map(|t| t.as_slots()).collect();
    ctx.ensure_embedded(stage, &slots)?;
    let embedder = ctx.embedder.as_ref().expect("built");
    let dataset = ctx.dataset.as_ref().expect("loaded");

    let pair_vectors = texts
        .iter()
        .map(|t| embedder.embed_pair(t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::stage(stage, e))?;
    let predictions = pair_vectors
        .par_iter()
        .map(|p| predict_relation(p, &ids, &label_vectors, &cfg.eval.scoring))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| PipelineError::stage(stage, e))?;

    let mut records = Vec::with_capacity(predictions.len() * ids.len());
    for (&(d, h, t), prediction) in pairs.iter().zip(predictions) {
        for breakdown in prediction.breakdowns {
            records.push(BreakdownRecord {
                doc_id: dataset.documents[d].doc_id.clone(),
                head_index: h,
                tail_index: t,
                mode: cfg.eval.scoring.mode,
                predicted_label: prediction.label.clone(),
                winner: breakdown.label == prediction.label,
                breakdown,
            });
        }
    }
    write_output(&cfg.breakdowns_path(), &jsonl(&records)).map_err(|e| PipelineError::stage(stage, e))?;
    ctx.save_embeddings(stage)?;
    out.breakdowns = Some(records.len());
    Ok(())
}

fn run_eval(ctx: &mut Context<'_>, out: &mut PipelineOutcome) -> Result<()> {
    let stage = Stage::Eval;
    let cfg = ctx.cfg;
    let mut eval_cfg = cfg.eval.clone();
    eval_cfg.labels = ctx.renderer(stage)?;
    // Surfaces coverage problems with the same messages as the other stages.
    let gold = ctx.pairs(stage, PairMode::GoldPairs)?;
    let inventory = ctx.dataset.as_ref().expect("loaded").label_inventory.len();
    eval_cfg.validate(inventory).map_err(|e| PipelineError::Config(e.to_string()))?;
    ctx.pair_texts(stage, &gold)?;
    ctx.embedder(stage)?;
    let (dataset, store, embedder) = (
        ctx.dataset.as_ref().expect("loaded"),
        ctx.store.as_ref().expect("opened"),
        ctx.embedder.as_ref().expect("built"),
    );
    let outcome = zseval::run_zeroshot_eval(dataset, store, embedder, &eval_cfg).map_err(|e| PipelineError::stage(stage, e))?;
    let ablation = if cfg.ablation {
        Some(
            zseval::run_ablation(dataset, store, embedder, &eval_cfg, &ScoringMode::ALL)
                .map_err(|e| PipelineError::stage(stage, e))?,
        )
    } else {
        None
    };

    let report_path = cfg.report_path();
    let io = |e: std::io::Error| PipelineError::stage(stage, e);
    write_output(&report_path, &serde_json::to_vec_pretty(&outcome.report).expect("report serializes")).map_err(io)?;
    write_output(&report_path.with_extension("txt"), outcome.report.render_text().as_bytes()).map_err(io)?;
    write_output(&cfg.output_dir.join("predictions.jsonl"), &jsonl(&outcome.predictions)).map_err(io)?;
    if let Some(ablation) = &ablation {
        write_output(&cfg.output_dir.join("ablation.json"), &serde_json::to_vec_pretty(ablation).expect("serializes"))
            .map_err(io)?;
        write_output(&cfg.output_dir.join("ablation.txt"), ablation.render_text().as_bytes()).map_err(io)?;
    }
    ctx.save_embeddings(stage)?;
    out.eval = Some(outcome.report);
    out.predictions = outcome.predictions;
    out.ablation = ablation;
    Ok(())
}

fn check_dependencies(cfg: &RunConfig, stages: &[Stage]) -> Result<()> {
    let builds_sideinfo = stages.contains(&Stage::Sideinfo);
    for &stage in stages {
        if stage.needs_sideinfo() && !builds_sideinfo && !cfg.sideinfo_cache.is_file() {
            return Err(PipelineError::stage(
                stage,
                format!("missing sideinfo cache '{}'", cfg.sideinfo_cache.display()),
            ));
        }
    }
    Ok(())
}

fn plan(cfg: &RunConfig, stages: &[Stage]) -> Vec<String> {
    let exists = |p: &Path| if p.is_file() { "present" } else { "absent" };
    let mut lines = vec![format!(
        "dataset {} ({:?}), seed {}, offline {}",
        cfg.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        cfg.dataset_format,
        cfg.seed,
        cfg.offline
    )];
    for stage in stages {
        let line = match stage {
            Stage::Validate => format!("validate -> {}", cfg.validation_path().display()),
            Stage::Sideinfo => format!(
                "sideinfo -> {} ({}), model {}",
                cfg.sideinfo_cache.display(),
                exists(&cfg.sideinfo_cache),
                cfg.generation.model_id
            ),
            Stage::Embed => format!(
                "embed -> {} ({}), encoder {:?} {}",
                cfg.embedding_cache.display(),
                exists(&cfg.embedding_cache),
                cfg.encoder.provider,
                cfg.encoder.model_id
            ),
            Stage::Score => format!("score [{}] -> {}", cfg.eval.scoring.mode, cfg.breakdowns_path().display()),
            Stage::Eval => format!(
                "eval sizes {:?} x {} runs [{}] -> {}",
                cfg.eval.sizes,
                cfg.eval.samples_per_size,
                cfg.eval.scoring.mode,
                cfg.report_path().display()
            ),
        };
        lines.push(line);
    }
    lines.push(format!("manifest -> {}", cfg.manifest_path().display()));
    lines
}

/// Runs `stages` in dependency order and writes a manifest.
///
/// With `dry_run`, configuration and stage dependencies are checked and the
/// plan is returned; nothing is written and no service is called.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage], services: &Services, dry_run: bool) -> Result<PipelineOutcome> {
    let stages: Vec<Stage> = stages.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if stages.is_empty() {
        return Err(PipelineError::Config("no stages given".into()));
    }
    cfg.validate()?;
    let prompts = cfg.generation.prompts().map_err(|e| PipelineError::Config(e.to_string()))?;
    check_dependencies(cfg, &stages)?;

    let mut outcome = PipelineOutcome::default();
    if dry_run {
        outcome.plan = plan(cfg, &stages);
        return Ok(outcome);
    }

    let input_paths = |cfg: &RunConfig| -> Vec<PathBuf> {
        let mut v = vec![cfg.dataset.clone().expect("validated"), cfg.sideinfo_cache.clone(), cfg.embedding_cache.clone()];
        v.extend(cfg.labels_file.clone());
        v
    };
    let inputs = input_paths(cfg);
    let mut manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        started_at: Utc::now(),
        config: cfg.clone(),
        stages: stages.clone(),
        prompt_versions: PromptVersions {
            description: prompts.description.version.clone(),
            hypernym: prompts.hypernym.version.clone(),
        },
        inputs: hash_artifacts(&inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>()),
        artifacts: BTreeMap::new(),
        timings: Vec::new(),
        completed: false,
    };

    let mut ctx = Context::new(cfg, services);
    let mut failure = None;
    for &stage in &stages {
        let started = Instant::now();
        let result = match stage {
            Stage::Validate => run_validate(&mut ctx, &mut outcome),
            Stage::Sideinfo => run_sideinfo(&mut ctx, &mut outcome),
            Stage::Embed => run_embed(&mut ctx, &mut outcome),
            Stage::Score => run_score(&mut ctx, &mut outcome),
            Stage::Eval => run_eval(&mut ctx, &mut outcome),
        };
        let seconds = started.elapsed().as_secs_f64();
        log::info!("stage {stage} finished in {seconds:.3}s");
        match result {
            Ok(()) => manifest.timings.push(StageTiming {
                stage,
                status: StageStatus::Completed,
                seconds,
                detail: None,
            }),
            Err(err) => {
                manifest.timings.push(StageTiming {
                    stage,
                    status: StageStatus::Failed,
                    seconds,
                    detail: Some(err.to_string()),
                });
                failure = Some(err);
                break;
            }
        }
    }

    let mut artifacts = input_paths(cfg);
    artifacts.extend([cfg.validation_path(), cfg.breakdowns_path(), cfg.report_path(), cfg.output_dir.join("predictions.jsonl")]);
    manifest.artifacts = hash_artifacts(&artifacts.iter().map(PathBuf::as_path).collect::<Vec<_>>());
    manifest.completed = failure.is_none();
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    let written = write_output(&cfg.manifest_path(), &json);
    if let Some(err) = failure {
        return Err(err);
    }
    written.map_err(|e| PipelineError::Config(format!("cannot write manifest: {e}")))?;
    outcome.manifest = Some(manifest);
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainRow {
    pub winner: bool,
    #[serde(flatten)]
    pub breakdown: ScoreBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    pub doc_id: String,
    pub head_index: usize,
    pub tail_index: usize,
    pub head_surface: String,
    pub tail_surface: String,
    pub mode: ScoringMode,
    pub predicted_label: String,
    /// Sorted by descending mode score.
    pub rows: Vec<ExplainRow>,
}

impl Explanation {
    /// Numbers are printed in shortest round-trip form, so they compare equal
    /// to the values in `breakdowns.jsonl`.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} ({} #{} -> {} #{}) mode {}",
            self.doc_id, self.head_surface, self.head_index, self.tail_surface, self.tail_index, self.mode
        );
        for row in &self.rows {
            let b = &row.breakdown;
            let c = &b.components;
            let _ = writeln!(
                out,
                "{} {}\n    final {}  mode_score {}  weighted_sum {}  confidence {}\n    desc {}  head_hyp {}  tail_hyp {}  head_type {}  tail_type {}  role {}  context {}",
                if row.winner { "*" } else { " " },
                b.label,
                b.final_score,
                b.mode_score,
                b.weighted_sum,
                b.confidence,
                c.desc,
                c.head_hyp,
                c.tail_hyp,
                c.head_type,
                c.tail_type,
                c.role,
                c.context
            );
        }
        out
    }
}

/// Scores one pair against `labels` (or the configured candidates) and ranks them.
pub fn explain_pair(
    cfg: &RunConfig,
    services: &Services,
    doc_id: &str,
    head_index: usize,
    tail_index: usize,
    labels: Option<&[String]>,
) -> Result<Explanation> {
    cfg.validate()?;
    let stage = Stage::Score;
    let mut ctx = Context::new(cfg, services);
    let dataset = ctx.dataset(stage)?;
    let d = dataset
        .documents
        .iter()
        .position(|doc| doc.doc_id == doc_id)
        .ok_or_else(|| PipelineError::UnknownDocument(doc_id.to_string()))?;
    let doc = &dataset.documents[d];
    let surface = |i: usize| {
        doc.entity(i)
            .map(|e| e.canonical_surface().to_string())
            .map_err(|e| PipelineError::stage(stage, e))
    };
    let (head_surface, tail_surface) = (surface(head_index)?, surface(tail_index)?);
    let ids = match labels {
        Some(l) if !l.is_empty() => l.to_vec(),
        _ => ctx.labels(stage)?.ids,
    };
    let texts = ctx.pair_texts(stage, &[(d, head_index, tail_index)])?.remove(0);
    ctx.embedder(stage)?;
    let renderer = ctx.renderer(stage)?;
    if cfg.offline {
        let mut wanted: Vec<String> = texts.as_slots().iter().map(|s| s.to_string()).collect();
        for id in &ids {
            wanted.push(renderer.render(id).map_err(|e| PipelineError::stage(stage, e))?);
        }
        let missing = ctx.embedder.as_ref().expect("built").missing(&wanted);
        if !missing.is_empty() {
            return Err(PipelineError::MissingEmbedding(missing));
        }
    }
    let label_vectors = ctx.label_embeddings(stage, &ids)?;
    let embedder = ctx.embedder.as_ref().expect("built");
    let pair = embedder.embed_pair(&texts).map_err(|e| PipelineError::stage(stage, e))?;
    let prediction =
        predict_relation(&pair, &ids, &label_vectors, &cfg.eval.scoring).map_err(|e| PipelineError::stage(stage, e))?;
    ctx.save_embeddings(stage)?;

    let mut rows: Vec<ExplainRow> = prediction
        .breakdowns
        .into_iter()
        .map(|b| ExplainRow {
            winner: b.label == prediction.label,
            breakdown: b,
        })
        .collect();
    rows.sort_by(|a, b| b.breakdown.mode_score.total_cmp(&a.breakdown.mode_score));
    let doc_id = ctx.dataset.as_ref().expect("loaded").documents[d].doc_id.clone();
    Ok(Explanation {
        doc_id,
        head_index,
        tail_index,
        head_surface,
        tail_surface,
        mode: cfg.eval.scoring.mode,
        predicted_label: prediction.label,
        rows,
    })
}
