//! Offline, deterministic encoder used by tests and the synthetic corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EncoderProvider, Pooling, Result};

/// How a text is turned into Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockStyle {
    /// One Gaussian draw seeded by the whole text. Texts are pairwise
    /// near-orthogonal regardless of shared words.
    WholeText,
    /// Sum of per-word Gaussian vectors plus a smaller whole-text term, so
    /// texts sharing words have positive cosine.
    #[default]
    BagOfWords,
}

const WHOLE_TEXT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
    style: MockStyle,
    name: String,
    /// `name` plus style, dimension and seed, so cache keys never mix vectors
    /// from differently configured mocks.
    model_id: String,
    pooling: Pooling,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            style: MockStyle::BagOfWords,
            name: "mock-encoder".into(),
            model_id: String::new(),
            pooling: Pooling::ClsToken,
        }
        .identified()
    }

    fn identified(mut self) -> Self {
        let style = match self.style {
            MockStyle::WholeText => "whole-text",
            MockStyle::BagOfWords => "bag-of-words",
        };
        self.model_id = format!("{}#mock:{style}:d{}:s{}", self.name, self.dim, self.seed);
        self
    }

    pub fn with_style(mut self, style: MockStyle) -> Self {
        self.style = style;
        self.identified()
    }

    pub fn with_model_id(mut self, model_id: &str) -> Self {
        self.name = model_id.to_string();
        self.identified()
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    fn gaussian(&self, domain: &[u8], text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update((self.dim as u64).to_le_bytes());
        hasher.update(domain);
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Unit-norm vector for `text`; a pure function of (text, dim, seed, style).
    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = self.gaussian(b"text\0", text);
        if self.style == MockStyle::BagOfWords {
            let words = words(text);
            if !words.is_empty() {
                v.iter_mut().for_each(|x| *x *= WHOLE_TEXT_WEIGHT);
                for word in words {
                    for (acc, w) in v.iter_mut().zip(self.gaussian(b"word\0", &word)) {
                        *acc += w;
                    }
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

/// Lowercased alphanumeric runs.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl EncoderProvider for MockEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}
