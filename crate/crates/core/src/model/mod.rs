//! Motion Diffusion Transformer.
//!
//! A condition transformer encodes the source motion together with the
//! instruction tokens. Its motion rows feed a linear head that classifies
//! per-frame similarity and, as "enhanced" motion features, are concatenated
//! along the sequence axis with the embedded noisy target inside the
//! diffusion transformer. The pooled enhanced text plus the timestep
//! embedding drive AdaLN-Zero modulation of every diffusion block. The
//! network predicts the clean target motion.

mod checkpoint;
pub(crate) mod layers;

pub use checkpoint::{bundle_from_json, bundle_to_json, load_bundle, load_bundle_for, save_bundle, CHECKPOINT_VERSION};

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::rng::{self, Rng};
use crate::tape::{Graph, Mat, ParamSet, Var};
use crate::text::TextFeatures;
use layers::{modulate, timestep_embedding, AdaLnZeroBlock, Builder, Dropout, EncoderLayer, Linear, Norm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub cond_layers: usize,
    pub diff_layers: usize,
    pub heads: usize,
    /// Number of similarity classes predicted per source frame.
    pub classes: usize,
    /// Pose feature width D.
    pub feature_dim: usize,
    /// Width of the text encoder's token features.
    pub text_dim: usize,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    /// Number of diffusion steps the timestep embedding accepts.
    pub timesteps: usize,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 512,
            cond_layers: 4,
            diff_layers: 8,
            heads: 8,
            classes: 3,
            feature_dim: 207,
            text_dim: 512,
            max_frames: 300,
            max_tokens: 32,
            ffn_mult: 4,
            dropout: 0.1,
            timesteps: 300,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    /// Two-layer, 16-wide configuration used for gradient checks.
    pub fn tiny(feature_dim: usize, text_dim: usize) -> Self {
        ModelConfig {
            latent_dim: 16,
            cond_layers: 2,
            diff_layers: 2,
            heads: 2,
            feature_dim,
            text_dim,
            max_frames: 64,
            max_tokens: 16,
            ffn_mult: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} must be a positive multiple of heads {}",
                self.latent_dim, self.heads
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 similarity classes".into()));
        }
        if self.feature_dim == 0 || self.text_dim == 0 || self.max_frames == 0 || self.max_tokens == 0 {
            return Err(Error::Config("feature_dim, text_dim, max_frames, max_tokens must be positive".into()));
        }
        if self.timesteps == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("timesteps and ffn_mult must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Which transformer a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Condition,
    Diffusion,
}

#[derive(Debug, Clone)]
struct ConditionNet {
    motion_in: Linear,
    text_in: Linear,
    motion_pos: usize,
    text_pos: usize,
    stream_type: usize,
    null_source: usize,
    null_text: usize,
    layers: Vec<EncoderLayer>,
    final_norm: Norm,
    sim_head: Linear,
}

#[derive(Debug, Clone)]
struct DiffusionNet {
    target_in: Linear,
    target_pos: usize,
    segment: usize,
    time_fc1: Linear,
    time_fc2: Linear,
    text_proj: Linear,
    blocks: Vec<AdaLnZeroBlock>,
    final_modulation: Linear,
    out: Linear,
}

/// Parameters of both transformers plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    params: ParamSet,
    cond: ConditionNet,
    diff: DiffusionNet,
}

impl PartialEq for ModelBundle {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Tape handles for the condition transformer's outputs.
#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub enhanced_motion: Var,
    pub enhanced_text: Var,
    pub pooled_text: Var,
    pub logits: Var,
}

/// Materialized condition transformer outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionOutput {
    /// Source rows (or the single null-source row), `F x latent_dim`.
    pub enhanced_motion: Mat,
    /// Text rows, `L x latent_dim`.
    pub enhanced_text: Mat,
    /// Mean of the non-padding text rows, `1 x latent_dim`.
    pub pooled_text: Mat,
    /// Per-frame similarity logits, `F x K`.
    pub similarity_logits: Mat,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut init_rng = rng::substream(seed, "model-init");
        let mut b = Builder {
            params: &mut params,
            rng: &mut init_rng,
        };
        let h = config.latent_dim;
        let hidden = h * config.ffn_mult;
        let cond = ConditionNet {
            motion_in: Linear::new(&mut b, "cond.motion_in", config.feature_dim, h),
            text_in: Linear::new(&mut b, "cond.text_in", config.text_dim, h),
            motion_pos: b.sinusoidal("cond.motion_pos", config.max_frames, h),
            text_pos: b.sinusoidal("cond.text_pos", config.max_tokens, h),
            stream_type: b.normal("cond.stream_type", 2, h, 0.02),
            null_source: b.normal("cond.null_source", 1, h, 0.02),
            null_text: b.normal("cond.null_text", 1, h, 0.02),
            layers: (0..config.cond_layers)
                .map(|i| EncoderLayer::new(&mut b, &format!("cond.layer{i}"), h, config.heads, hidden))
                .collect(),
            final_norm: Norm::new(&mut b, "cond.final_norm", h),
            sim_head: Linear::new(&mut b, "cond.sim_head", h, config.classes),
        };
        let diff = DiffusionNet {
            target_in: Linear::new(&mut b, "diff.target_in", config.feature_dim, h),
            target_pos: b.sinusoidal("diff.target_pos", config.max_frames, h),
            segment: b.normal("diff.segment", 2, h, 0.02),
            time_fc1: Linear::new(&mut b, "diff.time_fc1", h, h),
            time_fc2: Linear::new(&mut b, "diff.time_fc2", h, h),
            text_proj: Linear::new(&mut b, "diff.text_proj", h, h),
            blocks: (0..config.diff_layers)
                .map(|i| AdaLnZeroBlock::new(&mut b, &format!("diff.block{i}"), h, config.heads, hidden))
                .collect(),
            final_modulation: Linear::zeroed(&mut b, "diff.final_adaln", h, 2 * h),
            out: Linear::new(&mut b, "diff.out", h, config.feature_dim),
        };
        Ok(ModelBundle {
            config,
            params,
            cond,
            diff,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn owner(&self, id: usize) -> Owner {
        if self.params.name(id).starts_with("diff.") {
            Owner::Diffusion
        } else {
            Owner::Condition
        }
    }

    /// Ids of every AdaLN-Zero modulation parameter (block gates and the
    /// final modulation), all zero at construction.
    pub fn modulation_param_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .diff
            .blocks
            .iter()
            .flat_map(|b| [b.modulation.w, b.modulation.b])
            .collect();
        ids.extend([self.diff.final_modulation.w, self.diff.final_modulation.b]);
        ids
    }

    /// Adds Gaussian noise of standard deviation `std` to every parameter.
    pub fn perturb(&mut self, std: f64, rng: &mut Rng) {
        let dist = Normal::new(0.0, std).expect("valid std");
        for m in self.params.values_mut() {
            m.mapv_inplace(|v| v + dist.sample(rng));
        }
    }

    fn check_frames(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if rows == 0 {
            return Err(Error::Input(format!("{what} has no frames")));
        }
        if rows > self.config.max_frames {
            return Err(Error::Capacity(format!(
                "{what} has {rows} frames, model supports at most {}",
                self.config.max_frames
            )));
        }
        if cols != self.config.feature_dim {
            return Err(Error::Layout(format!(
                "{what} has {cols} features, model expects {}",
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    fn stream_row(&self, g: &mut Graph, table: usize, row: usize) -> Var {
        let t = g.param(table);
        g.slice_rows(t, row, 1)
    }

    pub(crate) fn condition_graph(
        &self,
        g: &mut Graph,
        source: Option<&Mat>,
        text: Option<&TextFeatures>,
        drop: &mut Dropout,
    ) -> Result<ConditionVars> {
        let net = &self.cond;
        let cfg = &self.config;
        let motion = match source {
            Some(src) => {
                self.check_frames(src.nrows(), src.ncols(), "source")?;
                let x = g.constant(src.clone());
                let m = net.motion_in.forward(g, x);
                if cfg.positional_encoding {
                    let table = g.param(net.motion_pos);
                    let pos = g.slice_rows(table, 0, src.nrows());
                    g.add(m, pos)
                } else {
                    m
                }
            }
            None => g.param(net.null_source),
        };
        let motion_type = self.stream_row(g, net.stream_type, 0);
        let motion = g.add_row(motion, motion_type);
        let motion_rows = g.shape(motion).0;

        let (tokens, valid, padding) = match text {
            Some(t) => {
                let rows = t.tokens.nrows();
                if rows > cfg.max_tokens {
                    return Err(Error::Capacity(format!(
                        "{rows} text tokens, model supports at most {}",
                        cfg.max_tokens
                    )));
                }
                if t.tokens.ncols() != cfg.text_dim {
                    return Err(Error::Input(format!(
                        "text features have width {}, model expects {}",
                        t.tokens.ncols(),
                        cfg.text_dim
                    )));
                }
                if t.token_count == 0 || t.padding[..t.token_count].iter().any(|&p| p) {
                    return Err(Error::Input("padding tokens must follow all real tokens".into()));
                }
                let x = g.constant(t.tokens.clone());
                let mut tt = net.text_in.forward(g, x);
                if cfg.positional_encoding {
                    let table = g.param(net.text_pos);
                    let pos = g.slice_rows(table, 0, rows);
                    tt = g.add(tt, pos);
                }
                let padding = t.padding.iter().any(|&p| p).then(|| t.padding.clone());
                (tt, t.token_count, padding)
            }
            None => (g.param(net.null_text), 1, None),
        };
        let text_type = self.stream_row(g, net.stream_type, 1);
        let tokens = g.add_row(tokens, text_type);
        let text_rows = g.shape(tokens).0;

        let key_mask = padding.map(|p| {
            let mut mask = vec![false; motion_rows];
            mask.extend(p);
            mask
        });
        let mut x = g.concat_rows(&[motion, tokens]);
        for layer in &net.layers {
            x = layer.forward(g, x, key_mask.as_deref(), drop);
        }
        let x = net.final_norm.forward(g, x);
        let enhanced_motion = g.slice_rows(x, 0, motion_rows);
        let enhanced_text = g.slice_rows(x, motion_rows, text_rows);
        let real_text = g.slice_rows(x, motion_rows, valid);
        let pooled_text = g.mean_rows(real_text);
        let logits = net.sim_head.forward(g, enhanced_motion);
        Ok(ConditionVars {
            enhanced_motion,
            enhanced_text,
            pooled_text,
            logits,
        })
    }

    pub(crate) fn diffusion_graph(
        &self,
        g: &mut Graph,
        noised: &Mat,
        t: usize,
        enhanced_motion: Var,
        pooled_text: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let net = &self.diff;
        let cfg = &self.config;
        if t >= cfg.timesteps {
            return Err(Error::Input(format!("timestep {t} outside [0, {})", cfg.timesteps)));
        }
        self.check_frames(noised.nrows(), noised.ncols(), "noised target")?;
        let target_rows = noised.nrows();
        let x = g.constant(noised.clone());
        let mut y = net.target_in.forward(g, x);
        if cfg.positional_encoding {
            let table = g.param(net.target_pos);
            let pos = g.slice_rows(table, 0, target_rows);
            y = g.add(y, pos);
        }
        let target_seg = self.stream_row(g, net.segment, 1);
        let y = g.add_row(y, target_seg);
        let source_seg = self.stream_row(g, net.segment, 0);
        let s = g.add_row(enhanced_motion, source_seg);
        let source_rows = g.shape(s).0;
        let mut x = g.concat_rows(&[s, y]);

        let temb = g.constant(timestep_embedding(t, cfg.latent_dim));
        let c = net.time_fc1.forward(g, temb);
        let c = g.silu(c);
        let c = net.time_fc2.forward(g, c);
        let text = net.text_proj.forward(g, pooled_text);
        let c = g.add(c, text);
        let c = g.silu(c);

        for block in &net.blocks {
            x = block.forward(g, x, c, drop);
        }
        let m = net.final_modulation.forward(g, c);
        let h = cfg.latent_dim;
        let shift = g.slice_cols(m, 0, h);
        let scale = g.slice_cols(m, h, h);
        let x = modulate(g, x, shift, scale);
        let rows = g.slice_rows(x, source_rows, target_rows);
        Ok(net.out.forward(g, rows))
    }

    /// Runs the condition transformer. `None` inputs use the learned null
    /// source frame / null text token.
    pub fn condition_forward_opt(&self, source: Option<&Mat>, text: Option<&TextFeatures>) -> Result<ConditionOutput> {
        let mut g = Graph::new(&self.params);
        let vars = self.condition_graph(&mut g, source, text, &mut Dropout::off())?;
        Ok(ConditionOutput {
            enhanced_motion: g.value(vars.enhanced_motion).clone(),
            enhanced_text: g.value(vars.enhanced_text).clone(),
            pooled_text: g.value(vars.pooled_text).clone(),
            similarity_logits: g.value(vars.logits).clone(),
        })
    }

    pub fn condition_forward(&self, source: &MotionSequence, text: &TextFeatures) -> Result<ConditionOutput> {
        self.condition_forward_opt(Some(source.frames()), Some(text))
    }

    /// Predicts the clean target `M_0` from a noisy target at step `t`.
    pub fn diffusion_forward(&self, noised: &Mat, t: usize, cond: &ConditionOutput) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let em = g.constant(cond.enhanced_motion.clone());
        let pt = g.constant(cond.pooled_text.clone());
        let out = self.diffusion_graph(&mut g, noised, t, em, pt, &mut Dropout::off())?;
        Ok(g.value(out).clone())
    }

    /// Checks that the bundle matches a feature width.
    pub fn expect_feature_dim(&self, d: usize) -> Result<()> {
        if self.config.feature_dim != d {
            return Err(Error::Checkpoint(format!(
                "checkpoint has feature_dim {}, expected {d}",
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    pub(crate) fn from_parts(config: ModelConfig, named: Vec<(String, Mat)>) -> Result<Self> {
        let mut bundle = ModelBundle::new(config, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if named.len() != bundle.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config implies {}",
                named.len(),
                bundle.params.len()
            )));
        }
        for (name, value) in named {
            let id = bundle
                .params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
            let slot = bundle.params.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            *slot = value;
        }
        Ok(bundle)
    }
}

/// Null-condition output with no source and no text, for tests and tools.
pub fn zero_condition(latent_dim: usize, classes: usize) -> ConditionOutput {
    ConditionOutput {
        enhanced_motion: Array2::zeros((1, latent_dim)),
        enhanced_text: Array2::zeros((1, latent_dim)),
        pooled_text: Array2::zeros((1, latent_dim)),
        similarity_logits: Array2::zeros((1, classes)),
    }
}
