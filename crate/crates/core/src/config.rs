//! Run configuration shared by every pipeline stage.
//!
//! Every field has a default, so an empty file is a valid configuration.
//! A few model fields are derived from other sections by
//! [`RunConfig::resolve`]: the feature width from the data layout, the
//! text width and token limit from the text encoder, the class count from
//! the similarity settings and the step count from the diffusion settings.
//! The generator seed always follows the run seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::GuidanceConfig;
use crate::error::{Error, Result};
use crate::eval::Scope;
use crate::model::ModelConfig;
use crate::motion::write_file;
use crate::similarity::SimilarityConfig;
use crate::synth::SynthSpec;
use crate::text::EncoderKind;
use crate::train::{LrSchedule, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Train/val/test fractions used when generating a dataset.
    pub splits: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            splits: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    pub encoder: EncoderKind,
    pub embed_dim: usize,
    pub max_tokens: usize,
    /// Seed of the stub encoder's codebook.
    pub codebook_seed: u64,
    /// Precomputed token features for the external encoder.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            encoder: EncoderKind::Stub,
            embed_dim: 512,
            max_tokens: 32,
            codebook_seed: 0,
            sidecar: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub guidance: GuidanceConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            timesteps: 300,
            guidance: GuidanceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scope: Scope,
    pub batch_size: usize,
    /// Compare unequal lengths over their common prefix instead of failing.
    pub truncate: bool,
    pub fid: bool,
    /// Evaluate at most this many triplets (in manifest order).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_items: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scope: Scope::Batch,
            batch_size: 32,
            truncate: true,
            fid: true,
            max_items: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 lets the runtime decide.
    pub workers: usize,
    pub data: DataConfig,
    pub synth: SynthSpec,
    pub similarity: SimilarityConfig,
    pub text: TextConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            workers: 0,
            data: DataConfig::default(),
            synth: SynthSpec::default(),
            similarity: SimilarityConfig::default(),
            text: TextConfig::default(),
            model: ModelConfig::default(),
            diffusion: DiffusionConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn short_hash(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fills the derived model fields and validates every section.
    pub fn resolve(mut self) -> Result<Self> {
        self.model.feature_dim = self.synth.layout.dim();
        self.model.text_dim = self.text.embed_dim;
        self.model.max_tokens = self.text.max_tokens;
        self.model.classes = self.similarity.classes;
        self.model.timesteps = self.diffusion.timesteps;
        self.synth.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.similarity.validate()?;
        self.model.validate()?;
        self.diffusion.guidance.validate()?;
        self.train.validate()?;
        if self.synth.frames > self.model.max_frames {
            return Err(Error::Config(format!(
                "synth.frames {} exceeds model.max_frames {}",
                self.synth.frames, self.model.max_frames
            )));
        }
        if self.text.encoder == EncoderKind::External && self.text.sidecar.is_none() {
            return Err(Error::Config("external text encoder needs text.sidecar".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects results; output location and worker
    /// count are excluded.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.workers = 0;
        short_hash(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    /// Hash of the settings that determine a generated dataset and its SNR
    /// values.
    pub fn data_hash(&self) -> String {
        let mut similarity = self.similarity.clone();
        similarity.snr_threshold = 0.0;
        let doc = serde_json::json!({
            "seed": self.seed,
            "synth": self.synth,
            "data": self.data,
            "similarity": similarity,
        });
        short_hash(doc.to_string().as_bytes())
    }

    /// Writes `config.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.toml");
        let mut text = format!("# config_hash = \"{}\"\n", self.config_hash());
        text.push_str(&self.to_toml()?);
        write_file(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Small settings that train in minutes on one core.
    pub fn desk_scale() -> Self {
        let mut cfg = RunConfig::default();
        cfg.text.embed_dim = 32;
        cfg.text.max_tokens = 16;
        cfg.model = ModelConfig {
            latent_dim: 64,
            cond_layers: 2,
            diff_layers: 3,
            heads: 4,
            max_frames: 64,
            ffn_mult: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        };
        cfg.train.batch_size = 32;
        cfg.train.lr = 4e-3;
        cfg.train.lr_schedule = LrSchedule::Cosine;
        cfg.train.warmup_steps = 100;
        cfg.diffusion.guidance.s_text = 1.0;
        cfg.diffusion.guidance.s_motion = 1.0;
        cfg
    }
}
