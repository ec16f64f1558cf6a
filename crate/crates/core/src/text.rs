//! Text encoders producing per-token features for the condition transformer.
//!
//! [`StubEncoder`] is a deterministic hashed-codebook embedding that needs no
//! pretrained weights; [`SidecarEncoder`] serves precomputed token features
//! (for example from a CLIP text tower) keyed by triplet id.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CODEBOOK_SIZE: usize = 4096;

/// Encoded instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    /// One row per token, padding rows (if any) last.
    pub tokens: Array2<f64>,
    /// `true` for padding rows, which attention must ignore.
    pub padding: Vec<bool>,
    /// Mean of the non-padding rows.
    pub pooled: Array1<f64>,
    /// Number of non-padding tokens (at least 1).
    pub token_count: usize,
}

impl TextFeatures {
    pub fn from_tokens(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::Input("text features need at least one token".into()));
        }
        let pooled = tokens.mean_axis(Axis(0)).expect("non-empty");
        Ok(TextFeatures {
            padding: vec![false; tokens.nrows()],
            token_count: tokens.nrows(),
            tokens,
            pooled,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.ncols()
    }

    /// Pads with zero rows up to `len` tokens, flagging them as padding.
    pub fn padded_to(&self, len: usize) -> TextFeatures {
        if len <= self.tokens.nrows() {
            return self.clone();
        }
        let mut tokens = Array2::zeros((len, self.embed_dim()));
        tokens
            .slice_mut(ndarray::s![..self.tokens.nrows(), ..])
            .assign(&self.tokens);
        let mut padding = self.padding.clone();
        padding.resize(len, true);
        TextFeatures {
            tokens,
            padding,
            pooled: self.pooled.clone(),
            token_count: self.token_count,
        }
    }
}

/// Selects the text encoder implementation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Stub,
    External,
}

pub trait TextEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;

    /// Encodes the instruction of the triplet `id`.
    fn encode(&self, id: &str, instruction: &str) -> Result<TextFeatures>;
}

/// Lowercased whitespace tokens, each embedded by hashing into a fixed
/// Gaussian codebook of `CODEBOOK_SIZE` rows.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    codebook: Array2<f64>,
    null_token: Array1<f64>,
    max_tokens: usize,
}

impl StubEncoder {
    pub fn new(embed_dim: usize, max_tokens: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || max_tokens == 0 {
            return Err(Error::Config("embed_dim and max_tokens must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codebook = Array2::from_shape_simple_fn((CODEBOOK_SIZE, embed_dim), || StandardNormal.sample(&mut rng));
        let null_token = Array1::from_shape_simple_fn(embed_dim, || StandardNormal.sample(&mut rng));
        Ok(StubEncoder {
            codebook,
            null_token,
            max_tokens,
        })
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn null_token(&self) -> &Array1<f64> {
        &self.null_token
    }

    fn token_row(token: &str) -> usize {
        let digest = Sha256::digest(token.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(bytes) % CODEBOOK_SIZE as u64) as usize
    }

    pub fn encode_text(&self, instruction: &str) -> TextFeatures {
        let lowered = instruction.to_lowercase();
        let words: Vec<&str> = lowered.split_whitespace().take(self.max_tokens).collect();
        let tokens = if words.is_empty() {
            self.null_token.clone().insert_axis(Axis(0))
        } else {
            let mut m = Array2::zeros((words.len(), self.codebook.ncols()));
            for (row, word) in m.rows_mut().into_iter().zip(&words) {
                let mut row = row;
                row.assign(&self.codebook.row(Self::token_row(word)));
            }
            m
        };
        TextFeatures::from_tokens(tokens).expect("at least one token")
    }
}

impl TextEncoder for StubEncoder {
    fn embed_dim(&self) -> usize {
        self.codebook.ncols()
    }

    fn encode(&self, _id: &str, instruction: &str) -> Result<TextFeatures> {
        Ok(self.encode_text(instruction))
    }
}

/// One-off encoding with the default stub codebook (seed 0).
pub fn encode(instruction: &str, embed_dim: usize, max_tokens: usize) -> Result<TextFeatures> {
    Ok(StubEncoder::new(embed_dim, max_tokens, 0)?.encode_text(instruction))
}

/// Precomputed token features read from a JSON sidecar
/// `{ "<triplet id>": [[f64; E]; L] }`.
#[derive(Debug, Clone)]
pub struct SidecarEncoder {
    features: HashMap<String, Array2<f64>>,
    embed_dim: usize,
    max_tokens: usize,
}

impl SidecarEncoder {
    pub fn from_json(text: &str, max_tokens: usize) -> Result<Self> {
        let raw: HashMap<String, Vec<Vec<f64>>> =
            serde_json::from_str(text).map_err(|e| Error::format("sidecar", e.to_string()))?;
        let mut embed_dim = None;
        let mut features = HashMap::with_capacity(raw.len());
        for (id, rows) in raw {
            let dim = rows.first().map(Vec::len).unwrap_or(0);
            if dim == 0 || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::format(format!("sidecar[{id}]"), "ragged or empty token matrix"));
            }
            if *embed_dim.get_or_insert(dim) != dim {
                return Err(Error::format(format!("sidecar[{id}]"), "embedding width differs from other entries"));
            }
            let n = rows.len();
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            let m = Array2::from_shape_vec((n, dim), flat).map_err(|e| Error::format("sidecar", e.to_string()))?;
            features.insert(id, m);
        }
        let embed_dim = embed_dim.ok_or_else(|| Error::format("sidecar", "no entries"))?;
        Ok(SidecarEncoder {
            features,
            embed_dim,
            max_tokens,
        })
    }

    pub fn load(path: impl AsRef<Path>, max_tokens: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, max_tokens)
    }
}

impl TextEncoder for SidecarEncoder {
    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn encode(&self, id: &str, _instruction: &str) -> Result<TextFeatures> {
        let m = self
            .features
            .get(id)
            .ok_or_else(|| Error::Consistency(format!("no precomputed text features for {id}")))?;
        let n = m.nrows().min(self.max_tokens);
        TextFeatures::from_tokens(m.slice(ndarray::s![..n, ..]).to_owned())
    }
}
