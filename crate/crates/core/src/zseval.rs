//! Zero-shot evaluation protocol.
//!
//! For each unseen-set size `n` and each run `k`, a label set is sampled from
//! the dataset inventory with seed [`run_seed`]`(master_seed, n, k)`. Every gold
//! relation whose label is in the set becomes one [`PredictionRecord`]; its
//! pair is classified among the sampled labels only. Each run is scored with
//! macro F1 and the runs of one size are summarized by mean and population
//! variance.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{self, Dataset, PairMode};
use crate::embedding::{Embedder, EmbeddingError, EmbeddingVector, LabelRenderer, PairEmbeddings, PairTexts, PromptStyle};
use crate::scoring::{predict_relation, ScoringConfig, ScoringError, ScoringMode};
use crate::sideinfo::SideInfoStore;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot sample {n} labels from an inventory of {available}")]
    SizeError { n: usize, available: usize },
    #[error("label '{0}' is not in the evaluated label set")]
    LabelOutOfSet(String),
    #[error("missing coverage for {} key(s): {}", .missing.len(), preview(.missing))]
    CoverageError { missing: Vec<String> },
    #[error("invalid eval config: {0}")]
    Config(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
}

fn preview(keys: &[String]) -> String {
    let mut s = keys.iter().take(5).cloned().collect::<Vec<_>>().join(", ");
    if keys.len() > 5 {
        s.push_str(", ...");
    }
    s
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSupport {
    /// Labels with no gold and no predicted instance contribute F1 = 0.
    #[default]
    CountAsZero,
    /// Such labels are left out of the macro average.
    Exclude,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sizes: Vec<usize>,
    pub samples_per_size: usize,
    pub master_seed: u64,
    pub scoring: ScoringConfig,
    pub prompt_style: PromptStyle,
    pub labels: LabelRenderer,
    pub zero_support: ZeroSupport,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sizes: vec![5, 10, 15],
            samples_per_size: 3,
            master_seed: 0,
            scoring: ScoringConfig::default(),
            prompt_style: PromptStyle::Default,
            labels: LabelRenderer::default(),
            zero_support: ZeroSupport::CountAsZero,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, inventory_len: usize) -> Result<()> {
        if self.samples_per_size == 0 {
            return Err(EvalError::Config("samples_per_size must be >= 1".into()));
        }
        if self.sizes.is_empty() {
            return Err(EvalError::Config("sizes must not be empty".into()));
        }
        for &n in &self.sizes {
            if n == 0 {
                return Err(EvalError::Config("sizes must be >= 1".into()));
            }
            if n > inventory_len {
                return Err(EvalError::SizeError {
                    n,
                    available: inventory_len,
                });
            }
        }
        Ok(())
    }
}

/// Seed of run `k` for size `n`: `master_seed` wrapping-plus the first eight
/// bytes (little-endian) of SHA-256 over `"zsre-run:{n}:{k}"`.
pub fn run_seed(master_seed: u64, n: usize, k: usize) -> u64 {
    let digest = Sha256::digest(format!("zsre-run:{n}:{k}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    master_seed.wrapping_add(u64::from_le_bytes(bytes))
}

/// Uniform sample of `n` labels without replacement, returned in inventory order.
pub fn sample_unseen_labels(inventory: &[String], n: usize, seed: u64) -> Result<Vec<String>> {
    if n > inventory.len() {
        return Err(EvalError::SizeError {
            n,
            available: inventory.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, inventory.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| inventory[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub unseen_size: usize,
    pub run_index: usize,
    pub doc_id: String,
    pub head_index: usize,
    pub tail_index: usize,
    pub gold_label: String,
    pub predicted_label: String,
    pub final_score: f64,
    pub mode_score: f64,
    pub sentence_gap: usize,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> bool {
        self.gold_label == self.predicted_label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub support: usize,
    pub predicted: usize,
    pub true_positives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn dedup_labels(labelset: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    labelset.iter().filter(|l| seen.insert(*l)).cloned().collect()
}

/// Precision, recall and F1 per label, in `labelset` order.
pub fn per_label_metrics(records: &[PredictionRecord], labelset: &[String]) -> Result<Vec<LabelMetrics>> {
    let labels = dedup_labels(labelset);
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut tp = vec![0usize; labels.len()];
    let mut gold = vec![0usize; labels.len()];
    let mut pred = vec![0usize; labels.len()];
    for r in records {
        let g = *index
            .get(r.gold_label.as_str())
            .ok_or_else(|| EvalError::LabelOutOfSet(r.gold_label.clone()))?;
        let p = *index
            .get(r.predicted_label.as_str())
            .ok_or_else(|| EvalError::LabelOutOfSet(r.predicted_label.clone()))?;
        gold[g] += 1;
        pred[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let precision = ratio(tp[i], pred[i]);
            let recall = ratio(tp[i], gold[i]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            LabelMetrics {
                label,
                support: gold[i],
                predicted: pred[i],
                true_positives: tp[i],
                precision,
                recall,
                f1,
            }
        })
        .collect())
}

pub fn macro_f1(records: &[PredictionRecord], labelset: &[String]) -> Result<f64> {
    macro_f1_with(records, labelset, ZeroSupport::CountAsZero)
}

pub fn macro_f1_with(records: &[PredictionRecord], labelset: &[String], policy: ZeroSupport) -> Result<f64> {
    let metrics = per_label_metrics(records, labelset)?;
    Ok(macro_from_metrics(&metrics, policy))
}

fn macro_from_metrics(metrics: &[LabelMetrics], policy: ZeroSupport) -> f64 {
    let counted: Vec<f64> = metrics
        .iter()
        .filter(|m| policy == ZeroSupport::CountAsZero || m.support + m.predicted > 0)
        .map(|m| m.f1)
        .collect();
    if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    }
}

pub fn mean_and_population_variance(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, variance)
}

pub const GAP_BUCKETS: [&str; 6] = ["0", "1", "2", "3", "4", ">=5"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub bucket: String,
    pub total: usize,
    pub correct: usize,
    /// `None` for empty buckets.
    pub correct_pct: Option<f64>,
    pub incorrect_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTable {
    pub rows: Vec<GapRow>,
}

impl GapTable {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.total).sum()
    }

    /// Plain-text table: bucket, total instances, correct %, incorrect %.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>14} {:>12} {:>14}", "Sentence Gap", "Total Instance", "Correct (%)", "Incorrect (%)");
        for r in &self.rows {
            let pct = |p: Option<f64>| p.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(
                out,
                "{:<16} {:>14} {:>12} {:>14}",
                r.bucket,
                r.total,
                pct(r.correct_pct),
                pct(r.incorrect_pct)
            );
        }
        out
    }
}

pub fn gap_bucket(gap: usize) -> usize {
    gap.min(5)
}

pub fn gap_analysis(records: &[PredictionRecord]) -> GapTable {
    let mut totals = [0usize; 6];
    let mut correct = [0usize; 6];
    for r in records {
        let b = gap_bucket(r.sentence_gap);
        totals[b] += 1;
        if r.is_correct() {
            correct[b] += 1;
        }
    }
    let rows = GAP_BUCKETS
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let (correct_pct, incorrect_pct) = if totals[i] == 0 {
                (None, None)
            } else {
                let c = 100.0 * correct[i] as f64 / totals[i] as f64;
                (Some(c), Some(100.0 - c))
            };
            GapRow {
                bucket: name.to_string(),
                total: totals[i],
                correct: correct[i],
                correct_pct,
                incorrect_pct,
            }
        })
        .collect();
    GapTable { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_index: usize,
    pub seed: u64,
    pub labels: Vec<String>,
    pub instances: usize,
    pub macro_f1: f64,
    pub per_label: Vec<LabelMetrics>,
    /// Fraction of sampled labels with at least one correct prediction.
    pub label_hit_rate: f64,
    pub gap_table: GapTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReport {
    pub size: usize,
    pub runs: Vec<RunReport>,
    pub mean_f1: f64,
    /// Population variance of the per-run macro F1 values.
    pub variance: f64,
    pub std_dev: f64,
    /// Gap table pooled over all runs of this size.
    pub gap_table: GapTable,
}

impl SizeReport {
    pub fn run_f1s(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.macro_f1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub dataset: String,
    pub config: EvalConfig,
    pub sizes: Vec<SizeReport>,
}

impl EvalReport {
    pub fn size(&self, n: usize) -> Option<&SizeReport> {
        self.sizes.iter().find(|s| s.size == n)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mode = self.config.scoring.mode;
        let _ = writeln!(out, "dataset: {}  mode: {}  master_seed: {}", self.dataset, mode, self.config.master_seed);
        let _ = writeln!(out, "{:<4} {:>14} {:>12} {:>10}  runs", "n", "Macro F1 (%)", "Variance", "Std");
        for s in &self.sizes {
            let runs: Vec<String> = s.runs.iter().map(|r| format!("{:.2}", 100.0 * r.macro_f1)).collect();
            let (_, var_pct) = mean_and_population_variance(&s.run_f1s().iter().map(|f| 100.0 * f).collect::<Vec<_>>());
            let _ = writeln!(
                out,
                "{:<4} {:>14.2} {:>12.2} {:>10.2}  [{}]",
                s.size,
                100.0 * s.mean_f1,
                var_pct,
                var_pct.sqrt(),
                runs.join(", ")
            );
        }
        for s in &self.sizes {
            let _ = writeln!(out, "\nsentence gaps, n = {}", s.size);
            out.push_str(&s.gap_table.render_text());
        }
        out
    }
}

/// Report plus every prediction made, in (size, run, document, gold) order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
}

/// Embeddings for every gold pair and every label, computed once per eval.
struct Prepared {
    pairs: HashMap<(usize, usize, usize), PairEmbeddings>,
    labels: HashMap<String, EmbeddingVector>,
}

fn prepare(dataset: &Dataset, store: &SideInfoStore, embedder: &Embedder, cfg: &EvalConfig) -> Result<Prepared> {
    let mut missing = Vec::new();
    let mut pair_texts = Vec::new();
    for (d, doc) in dataset.documents.iter().enumerate() {
        for (h, t) in corpus::enumerate_entity_pairs(doc, PairMode::GoldPairs) {
            let head = store.get(&doc.doc_id, h);
            let tail = store.get(&doc.doc_id, t);
            match (head, tail) {
                (Some(head), Some(tail)) => {
                    let texts = PairTexts::render(head.side(), tail.side(), cfg.prompt_style)?;
                    pair_texts.push(((d, h, t), texts));
                }
                _ => {
                    for (idx, rec) in [(h, head), (t, tail)] {
                        let key = format!("sideinfo:{}#{idx}", doc.doc_id);
                        if rec.is_none() && !missing.contains(&key) {
                            missing.push(key);
                        }
                    }
                }
            }
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::CoverageError { missing });
    }

    let label_ids = dataset.labels();
    let label_texts = label_ids
        .iter()
        .map(|l| cfg.labels.render(l))
        .collect::<Result<Vec<_>, _>>()?;
    let mut all_texts: Vec<&str> = label_texts.iter().map(String::as_str).collect();
    for (_, texts) in &pair_texts {
        all_texts.extend(texts.as_slots());
    }
    if embedder.is_offline() {
        let missing = embedder.missing(&all_texts);
        if !missing.is_empty() {
            return Err(EvalError::CoverageError {
                missing: missing.into_iter().map(|t| format!("embedding:{t}")).collect(),
            });
        }
    }
    embedder.embed_texts(&all_texts)?;

    let labels = label_ids
        .into_iter()
        .zip(&label_texts)
        .map(|(id, text)| Ok((id, embedder.embed_text(text)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let pairs = pair_texts
        .into_iter()
        .map(|(key, texts)| Ok((key, embedder.embed_pair(&texts)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    Ok(Prepared { pairs, labels })
}

fn evaluate_run(
    dataset: &Dataset,
    prepared: &Prepared,
    cfg: &EvalConfig,
    size: usize,
    run_index: usize,
    seed: u64,
) -> Result<(RunReport, Vec<PredictionRecord>)> {
    let inventory = dataset.labels();
    let sampled = sample_unseen_labels(&inventory, size, seed)?;
    let in_set: BTreeSet<&str> = sampled.iter().map(String::as_str).collect();

    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (d, doc) in dataset.documents.iter().enumerate() {
        for rel in &doc.gold_relations {
            let key = (d, rel.head_index, rel.tail_index);
            if in_set.contains(rel.relation_label.as_str()) && !pairs.contains(&key) {
                pairs.push(key);
            }
        }
    }
    let predictions: Vec<_> = pairs
        .par_iter()
        .map(|key| {
            let pair = &prepared.pairs[key];
            predict_relation(pair, &sampled, &prepared.labels, &cfg.scoring).map(|p| (*key, p))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let predictions: HashMap<_, _> = predictions.into_iter().collect();

    let mut records = Vec::new();
    for (d, doc) in dataset.documents.iter().enumerate() {
        for rel in &doc.gold_relations {
            if !in_set.contains(rel.relation_label.as_str()) {
                continue;
            }
            let prediction = &predictions[&(d, rel.head_index, rel.tail_index)];
            let winner = prediction.winner();
            records.push(PredictionRecord {
                unseen_size: size,
                run_index,
                doc_id: doc.doc_id.clone(),
                head_index: rel.head_index,
                tail_index: rel.tail_index,
                gold_label: rel.relation_label.clone(),
                predicted_label: prediction.label.clone(),
                final_score: winner.final_score,
                mode_score: winner.mode_score,
                sentence_gap: corpus::sentence_gap(doc, rel.head_index, rel.tail_index)?,
            });
        }
    }

    let per_label = per_label_metrics(&records, &sampled)?;
    let macro_f1 = macro_from_metrics(&per_label, cfg.zero_support);
    let label_hit_rate = per_label.iter().filter(|m| m.true_positives > 0).count() as f64 / per_label.len() as f64;
    let report = RunReport {
        run_index,
        seed,
        labels: sampled,
        instances: records.len(),
        macro_f1,
        per_label,
        label_hit_rate,
        gap_table: gap_analysis(&records),
    };
    Ok((report, records))
}

pub fn run_zeroshot_eval(
    dataset: &Dataset,
    store: &SideInfoStore,
    embedder: &Embedder,
    cfg: &EvalConfig,
) -> Result<EvalOutcome> {
    cfg.validate(dataset.label_inventory.len())?;
    let prepared = prepare(dataset, store, embedder, cfg)?;
    let mut sizes = Vec::with_capacity(cfg.sizes.len());
    let mut all_predictions = Vec::new();
    for &size in &cfg.sizes {
        let mut runs = Vec::with_capacity(cfg.samples_per_size);
        let mut size_records = Vec::new();
        for k in 0..cfg.samples_per_size {
            let seed = run_seed(cfg.master_seed, size, k);
            let (run, records) = evaluate_run(dataset, &prepared, cfg, size, k, seed)?;
            log::info!("n={size} run={k} seed={seed} macro_f1={:.4} instances={}", run.macro_f1, run.instances);
            runs.push(run);
            size_records.extend(records);
        }
        let f1s: Vec<f64> = runs.iter().map(|r| r.macro_f1).collect();
        let (mean_f1, variance) = mean_and_population_variance(&f1s);
        sizes.push(SizeReport {
            size,
            runs,
            mean_f1,
            variance,
            std_dev: variance.sqrt(),
            gap_table: gap_analysis(&size_records),
        });
        all_predictions.extend(size_records);
    }
    Ok(EvalOutcome {
        report: EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            dataset: dataset.name.clone(),
            config: cfg.clone(),
            sizes,
        },
        predictions: all_predictions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub rows: BTreeMap<ScoringMode, EvalReport>,
}

/// Runs the same protocol (same seeds, same label samples) once per mode.
pub fn run_ablation(
    dataset: &Dataset,
    store: &SideInfoStore,
    embedder: &Embedder,
    cfg: &EvalConfig,
    modes: &[ScoringMode],
) -> Result<AblationReport> {
    let mut rows = BTreeMap::new();
    for &mode in modes {
        let mut mode_cfg = cfg.clone();
        mode_cfg.scoring.mode = mode;
        rows.insert(mode, run_zeroshot_eval(dataset, store, embedder, &mode_cfg)?.report);
    }
    Ok(AblationReport {
        dataset: dataset.name.clone(),
        rows,
    })
}

impl AblationReport {
    /// One line per (n, mode): macro F1 (%) ± population variance (%²).
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<4} {:<58} {}", "n", "Approach", self.dataset);
        let sizes: BTreeSet<usize> = self
            .rows
            .values()
            .flat_map(|r| r.sizes.iter().map(|s| s.size))
            .collect();
        for n in sizes {
            for (mode, report) in &self.rows {
                if let Some(s) = report.size(n) {
                    let pct: Vec<f64> = s.run_f1s().iter().map(|f| 100.0 * f).collect();
                    let (mean, var) = mean_and_population_variance(&pct);
                    let _ = writeln!(out, "{:<4} {:<58} {:.2} ± {:.2}", n, mode.caption(), mean, var);
                }
            }
        }
        out
    }
}
