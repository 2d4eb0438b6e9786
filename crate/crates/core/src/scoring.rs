//! Similarity components, consistency-based confidence and the dynamic
//! weighted score used to rank candidate relation labels for a pair.
//!
//! For a pair and a label embedding `r` seven cosine similarities are taken:
//! the combined description, both hypernyms, both types, the role-based score
//! (mean of the head and tail role-prompt similarities) and the context prompt.
//! The dynamic weighted score is the weighted sum of those seven values times
//! a confidence factor `clamp01((mean + (1 - pstdev)) / 2)` computed over the
//! same values.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingVector, PairEmbeddings};

/// Absolute tolerance for weight sums and score ties.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoringError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine of an all-zero vector is undefined")]
    ZeroVector,
    #[error("{name} = {value} lies outside [-1, 1]")]
    RangeError { name: &'static str, value: f64 },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("missing embedding for {0}")]
    MissingEmbedding(String),
    #[error("no candidate labels")]
    NoCandidates,
}

pub type Result<T, E = ScoringError> = std::result::Result<T, E>;

/// Cosine similarity clamped into [-1, 1].
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    cosine_slices(u.values(), v.values())
}

fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ScoringError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(ScoringError::ZeroVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

fn check_unit_range(name: &'static str, value: f64) -> Result<f64> {
    if (-1.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ScoringError::RangeError { name, value })
    }
}

/// Mean of the head and tail role-prompt similarities.
pub fn role_based_score(head_role_sim: f64, tail_role_sim: f64) -> Result<f64> {
    let h = check_unit_range("head_role_sim", head_role_sim)?;
    let t = check_unit_range("tail_role_sim", tail_role_sim)?;
    Ok((h + t) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub desc: f64,
    pub head_hyp: f64,
    pub tail_hyp: f64,
    pub head_type: f64,
    pub tail_type: f64,
    pub role: f64,
    pub context: f64,
}

impl ScoreComponents {
    pub const NAMES: [&'static str; 7] = ["desc", "head_hyp", "tail_hyp", "head_type", "tail_type", "role", "context"];

    pub fn uniform(value: f64) -> Self {
        Self::from_array([value; 7])
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            desc: v[0],
            head_hyp: v[1],
            tail_hyp: v[2],
            head_type: v[3],
            tail_type: v[4],
            role: v[5],
            context: v[6],
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.desc,
            self.head_hyp,
            self.tail_hyp,
            self.head_type,
            self.tail_type,
            self.role,
            self.context,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in Self::NAMES.iter().zip(self.to_array()) {
            check_unit_range(name, value)?;
        }
        Ok(())
    }
}

/// Which components feed the confidence factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceScope {
    #[default]
    AllSeven,
    /// Drops the context similarity, leaving six values.
    ExcludeContext,
}

pub fn confidence(components: &ScoreComponents) -> f64 {
    confidence_with(components, ConfidenceScope::AllSeven)
}

pub fn confidence_with(components: &ScoreComponents, scope: ConfidenceScope) -> f64 {
    let all = components.to_array();
    let values = match scope {
        ConfidenceScope::AllSeven => &all[..],
        ConfidenceScope::ExcludeContext => &all[..6],
    };
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ((mean + (1.0 - variance.sqrt())) / 2.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct Weights {
    desc: f64,
    head_hyp: f64,
    tail_hyp: f64,
    head_type: f64,
    tail_type: f64,
    role: f64,
    context: f64,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    desc: f64,
    head_hyp: f64,
    tail_hyp: f64,
    head_type: f64,
    tail_type: f64,
    role: f64,
    context: f64,
}

impl TryFrom<RawWeights> for Weights {
    type Error = ScoringError;

    fn try_from(r: RawWeights) -> Result<Self> {
        Weights::from_array([r.desc, r.head_hyp, r.tail_hyp, r.head_type, r.tail_type, r.role, r.context])
    }
}

impl From<Weights> for RawWeights {
    fn from(w: Weights) -> Self {
        let [desc, head_hyp, tail_hyp, head_type, tail_type, role, context] = w.to_array();
        RawWeights {
            desc,
            head_hyp,
            tail_hyp,
            head_type,
            tail_type,
            role,
            context,
        }
    }
}

impl Default for Weights {
    /// 0.4 on the description, 0.1 on everything else.
    fn default() -> Self {
        Self {
            desc: 0.4,
            head_hyp: 0.1,
            tail_hyp: 0.1,
            head_type: 0.1,
            tail_type: 0.1,
            role: 0.1,
            context: 0.1,
        }
    }
}

impl Weights {
    /// Order: desc, head_hyp, tail_hyp, head_type, tail_type, role, context.
    pub fn from_array(w: [f64; 7]) -> Result<Self> {
        if let Some(bad) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(ScoringError::InvalidWeights(format!("weight {bad} is negative or not finite")));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > TOLERANCE {
            return Err(ScoringError::InvalidWeights(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self {
            desc: w[0],
            head_hyp: w[1],
            tail_hyp: w[2],
            head_type: w[3],
            tail_type: w[4],
            role: w[5],
            context: w[6],
        })
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.desc,
            self.head_hyp,
            self.tail_hyp,
            self.head_type,
            self.tail_type,
            self.role,
            self.context,
        ]
    }

    pub fn weighted_sum(&self, components: &ScoreComponents) -> f64 {
        self.to_array()
            .iter()
            .zip(components.to_array())
            .map(|(w, c)| w * c)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub label: String,
    pub components: ScoreComponents,
    pub weighted_sum: f64,
    pub confidence: f64,
    /// `weighted_sum × confidence`.
    pub final_score: f64,
    /// Score under the active ablation mode; equals `final_score` for `full_weighted`.
    pub mode_score: f64,
}

pub fn dynamic_weighted_score(components: &ScoreComponents, weights: &Weights) -> Result<ScoreBreakdown> {
    dynamic_weighted_score_with(components, weights, ConfidenceScope::AllSeven)
}

pub fn dynamic_weighted_score_with(
    components: &ScoreComponents,
    weights: &Weights,
    scope: ConfidenceScope,
) -> Result<ScoreBreakdown> {
    components.validate()?;
    let weighted_sum = weights.weighted_sum(components);
    let confidence = confidence_with(components, scope);
    let final_score = weighted_sum * confidence;
    Ok(ScoreBreakdown {
        label: String::new(),
        components: *components,
        weighted_sum,
        confidence,
        final_score,
        mode_score: final_score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    DescOnly,
    DescHypernym,
    DescType,
    DescHypType,
    #[default]
    FullWeighted,
}

impl ScoringMode {
    pub const ALL: [ScoringMode; 5] = [
        ScoringMode::DescOnly,
        ScoringMode::DescHypernym,
        ScoringMode::DescType,
        ScoringMode::DescHypType,
        ScoringMode::FullWeighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoringMode::DescOnly => "desc_only",
            ScoringMode::DescHypernym => "desc_hypernym",
            ScoringMode::DescType => "desc_type",
            ScoringMode::DescHypType => "desc_hyp_type",
            ScoringMode::FullWeighted => "full_weighted",
        }
    }

    /// Row caption used in ablation tables.
    pub fn caption(self) -> &'static str {
        match self {
            ScoringMode::DescOnly => "Description only (baseline)",
            ScoringMode::DescHypernym => "Description + Hypernym",
            ScoringMode::DescType => "Description + Type",
            ScoringMode::DescHypType => "Description + Hypernym + Type",
            ScoringMode::FullWeighted => "Description + Hypernym + Type + Dynamic Weighted Score",
        }
    }
}

impl std::fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScoringMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown scoring mode '{s}'"))
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Ablation rows use an unweighted mean of their components without confidence.
pub fn score_mode(components: &ScoreComponents, mode: ScoringMode, weights: &Weights) -> Result<f64> {
    score_mode_with(components, mode, weights, ConfidenceScope::AllSeven)
}

pub fn score_mode_with(
    components: &ScoreComponents,
    mode: ScoringMode,
    weights: &Weights,
    scope: ConfidenceScope,
) -> Result<f64> {
    let c = components;
    Ok(match mode {
        ScoringMode::DescOnly => c.desc,
        ScoringMode::DescHypernym => mean(&[c.desc, c.head_hyp, c.tail_hyp]),
        ScoringMode::DescType => mean(&[c.desc, c.head_type, c.tail_type]),
        ScoringMode::DescHypType => mean(&[c.desc, c.head_hyp, c.tail_hyp, c.head_type, c.tail_type]),
        ScoringMode::FullWeighted => dynamic_weighted_score_with(c, weights, scope)?.final_score,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleAggregation {
    /// Average the two role similarities.
    #[default]
    ScoreMean,
    /// Average the two role vectors, then take one cosine.
    VectorMeanThenCosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoringConfig {
    pub mode: ScoringMode,
    pub weights: Weights,
    pub role_agg: RoleAggregation,
    pub confidence_scope: ConfidenceScope,
}

impl ScoringConfig {
    pub fn with_mode(mode: ScoringMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

pub fn compute_components(
    pair: &PairEmbeddings,
    relation: &EmbeddingVector,
    role_agg: RoleAggregation,
) -> Result<ScoreComponents> {
    let role = match role_agg {
        RoleAggregation::ScoreMean => {
            role_based_score(cosine(&pair.head_role, relation)?, cosine(&pair.tail_role, relation)?)?
        }
        RoleAggregation::VectorMeanThenCosine => {
            let (f, g) = (pair.head_role.values(), pair.tail_role.values());
            if f.len() != g.len() {
                return Err(ScoringError::DimensionMismatch {
                    left: f.len(),
                    right: g.len(),
                });
            }
            let avg: Vec<f64> = f.iter().zip(g).map(|(a, b)| (a + b) / 2.0).collect();
            cosine_slices(&avg, relation.values())?
        }
    };
    Ok(ScoreComponents {
        desc: cosine(&pair.combined_description, relation)?,
        head_hyp: cosine(&pair.head_hypernym, relation)?,
        tail_hyp: cosine(&pair.tail_hypernym, relation)?,
        head_type: cosine(&pair.head_type, relation)?,
        tail_type: cosine(&pair.tail_type, relation)?,
        role,
        context: cosine(&pair.context, relation)?,
    })
}

pub fn breakdown(label: &str, components: ScoreComponents, cfg: &ScoringConfig) -> Result<ScoreBreakdown> {
    let mut b = dynamic_weighted_score_with(&components, &cfg.weights, cfg.confidence_scope)?;
    b.label = label.to_string();
    b.mode_score = score_mode_with(&components, cfg.mode, &cfg.weights, cfg.confidence_scope)?;
    Ok(b)
}

/// Index of the highest score. A later entry wins only if it beats the
/// current best by more than [`TOLERANCE`], so near-ties go to the earliest.
pub fn argmax_earliest(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if s <= scores[b] + TOLERANCE => {}
            _ => best = Some(i),
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    /// One entry per candidate, in candidate order.
    pub breakdowns: Vec<ScoreBreakdown>,
}

impl Prediction {
    pub fn winner(&self) -> &ScoreBreakdown {
        self.breakdowns
            .iter()
            .find(|b| b.label == self.label)
            .expect("winner is one of the candidates")
    }
}

pub fn predict_relation(
    pair: &PairEmbeddings,
    candidate_labels: &[String],
    label_embeddings: &HashMap<String, EmbeddingVector>,
    cfg: &ScoringConfig,
) -> Result<Prediction> {
    if candidate_labels.is_empty() {
        return Err(ScoringError::NoCandidates);
    }
    let breakdowns = candidate_labels
        .iter()
        .map(|label| {
            let r = label_embeddings
                .get(label)
                .ok_or_else(|| ScoringError::MissingEmbedding(label.clone()))?;
            breakdown(label, compute_components(pair, r, cfg.role_agg)?, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores: Vec<f64> = breakdowns.iter().map(|b| b.mode_score).collect();
    let best = argmax_earliest(&scores).expect("non-empty candidates");
    Ok(Prediction {
        label: candidate_labels[best].clone(),
        breakdowns,
    })
}
