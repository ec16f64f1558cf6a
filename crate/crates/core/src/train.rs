//! Joint training on the editing loss and the auxiliary similarity
//! classification loss.

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, standard_normal, Dropped, GuidanceConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::layers::Dropout;
use crate::model::ModelBundle;
use crate::motion::EditTriplet;
use crate::rng::{self, Rng};
use crate::similarity::SimilarityCurve;
use crate::tape::{Gradients, Graph, Mat};
use crate::text::{TextEncoder, TextFeatures};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient norm limit; 0 disables clipping.
    pub grad_clip: f64,
    /// Multiplier on the auxiliary loss; 0 trains on the editing loss only.
    pub aux_weight: f64,
    /// Adds `wall_ms` to metric records (makes logs non-reproducible).
    pub log_wall_ms: bool,
    pub lr_schedule: LrSchedule,
    /// Linear ramp from `lr / warmup_steps` to `lr` over the first steps.
    pub warmup_steps: usize,
}

/// Learning-rate shape over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero at the last step.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            aux_weight: 1.0,
            log_wall_ms: false,
            lr_schedule: LrSchedule::Constant,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.aux_weight >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("lr, weight_decay, aux_weight and grad_clip must be nonnegative".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("invalid AdamW moments".into()));
        }
        Ok(())
    }

    /// Learning rate of update `step` (zero-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = if step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let shape = match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let done = step.saturating_sub(self.warmup_steps) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * (done / span).min(1.0)).cos())
            }
        };
        self.lr * warm * shape
    }
}

/// One triplet ready for training: frames, encoded text and class labels.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub source: Mat,
    pub target: Mat,
    pub text: TextFeatures,
    pub labels: Vec<usize>,
}

/// Pairs every triplet with its similarity labels and encoded instruction.
pub fn prepare_examples(
    triplets: &[EditTriplet],
    curves: &HashMap<String, SimilarityCurve>,
    encoder: &dyn TextEncoder,
) -> Result<Vec<TrainingExample>> {
    triplets
        .iter()
        .map(|t| {
            let curve = curves
                .get(&t.id)
                .ok_or_else(|| Error::Consistency(format!("no similarity curve for {}", t.id)))?;
            if curve.labels.len() != t.source.len() {
                return Err(Error::Consistency(format!(
                    "curve for {} has {} labels but source has {} frames",
                    t.id,
                    curve.labels.len(),
                    t.source.len()
                )));
            }
            Ok(TrainingExample {
                id: t.id.clone(),
                source: t.source.frames().clone(),
                target: t.target.frames().clone(),
                text: encoder.encode(&t.id, &t.instruction)?,
                labels: curve.labels.clone(),
            })
        })
        .collect()
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Mat>,
    v: Vec<Mat>,
    step: u64,
}

impl AdamW {
    pub fn new(bundle: &ModelBundle) -> Self {
        let zeros: Vec<Mat> = bundle.params().iter().map(|(_, p)| Mat::zeros(p.dim())).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, bundle: &mut ModelBundle, grads: &Gradients, cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let params = bundle.params_mut();
        for id in 0..params.len() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            match grads.get(id) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    });
                }
                None => {
                    m.mapv_inplace(|x| cfg.beta1 * x);
                    v.mapv_inplace(|x| cfg.beta2 * x);
                }
            }
            let p = params.get_mut(id);
            let decay = if p.nrows() > 1 { cfg.weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    #[serde(rename = "L_e")]
    pub editing: f64,
    /// Mean over items whose source was not dropped.
    #[serde(rename = "L_aux")]
    pub auxiliary: f64,
    #[serde(rename = "L")]
    pub total: f64,
    pub lr: f64,
}

/// Per-item randomness drawn up front so items can run in any order.
struct ItemPlan {
    t: usize,
    dropped: Dropped,
    eps: Mat,
    dropout_seed: u64,
}

struct ItemResult {
    grads: Gradients,
    editing: f64,
    auxiliary: Option<f64>,
}

/// Forward and backward pass for a single example.
fn item_gradients(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    example: &TrainingExample,
    plan: &ItemPlan,
    aux_weight: f64,
) -> Result<ItemResult> {
    let mut dropout_rng = Rng::seed_from_u64(plan.dropout_seed);
    let mut drop = Dropout {
        p: bundle.config().dropout,
        rng: Some(&mut dropout_rng),
    };
    forward_backward(bundle, sched, example, plan.t, plan.dropped, &plan.eps, aux_weight, &mut drop)
}

#[allow(clippy::too_many_arguments)]
fn forward_backward(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    example: &TrainingExample,
    t: usize,
    dropped: Dropped,
    eps: &Mat,
    aux_weight: f64,
    drop: &mut Dropout,
) -> Result<ItemResult> {
    let mut g = Graph::new(bundle.params());
    let (source, text) = match dropped {
        Dropped::Nothing => (Some(&example.source), Some(&example.text)),
        Dropped::Text => (Some(&example.source), None),
        Dropped::Both => (None, None),
    };
    let cond = bundle.condition_graph(&mut g, source, text, drop)?;
    let noised = forward_noise(&example.target, t, eps, sched)?;
    let pred = bundle.diffusion_graph(&mut g, &noised, t, cond.enhanced_motion, cond.pooled_text, drop)?;
    let editing = g.mse(pred, example.target.clone());
    let editing_value = g.scalar(editing);
    let (loss, auxiliary) = if source.is_some() && aux_weight > 0.0 {
        let aux = g.cross_entropy(cond.logits, &example.labels);
        let aux_value = g.scalar(aux);
        let weighted = g.scale(aux, aux_weight);
        (g.add(editing, weighted), Some(aux_value))
    } else {
        (editing, None)
    };
    Ok(ItemResult {
        grads: g.backward(loss),
        editing: editing_value,
        auxiliary,
    })
}

/// Loss `L_e + aux_weight * L_aux` and its gradients for one example at a
/// fixed timestep, noise draw and condition dropout. Dropout layers are off.
pub fn example_gradients(
    bundle: &ModelBundle,
    sched: &NoiseSchedule,
    example: &TrainingExample,
    t: usize,
    dropped: Dropped,
    eps: &Mat,
    aux_weight: f64,
) -> Result<(f64, Gradients)> {
    let r = forward_backward(bundle, sched, example, t, dropped, eps, aux_weight, &mut Dropout::off())?;
    Ok((r.editing + aux_weight * r.auxiliary.unwrap_or(0.0), r.grads))
}

/// Gradients of the auxiliary loss alone.
pub fn auxiliary_gradients(bundle: &ModelBundle, example: &TrainingExample) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(bundle.params());
    let cond = bundle.condition_graph(&mut g, Some(&example.source), Some(&example.text), &mut Dropout::off())?;
    let aux = g.cross_entropy(cond.logits, &example.labels);
    Ok((g.scalar(aux), g.backward(aux)))
}

/// Owns the model, optimizer state and training randomness.
pub struct Trainer {
    pub bundle: ModelBundle,
    optimizer: AdamW,
    sched: NoiseSchedule,
    guidance: GuidanceConfig,
    config: TrainConfig,
    rng: Rng,
    step: usize,
    exec: Execution,
}

impl Trainer {
    pub fn new(
        bundle: ModelBundle,
        sched: NoiseSchedule,
        guidance: GuidanceConfig,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        guidance.validate()?;
        if sched.steps() != bundle.config().timesteps {
            return Err(Error::Config(format!(
                "schedule has {} steps but model embeds {}",
                sched.steps(),
                bundle.config().timesteps
            )));
        }
        Ok(Trainer {
            optimizer: AdamW::new(&bundle),
            bundle,
            sched,
            guidance,
            config,
            rng: rng::substream(seed, "train"),
            step: 0,
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Averaged gradients and loss values for `batch` without updating.
    pub fn batch_gradients(&mut self, batch: &[&TrainingExample]) -> Result<(Gradients, LossReport)> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let steps = self.sched.steps();
        let plans: Vec<ItemPlan> = batch
            .iter()
            .map(|ex| ItemPlan {
                t: self.rng.random_range(0..steps),
                dropped: self.guidance.draw_dropout(&mut self.rng),
                eps: standard_normal(ex.target.nrows(), ex.target.ncols(), &mut self.rng),
                dropout_seed: self.rng.random(),
            })
            .collect();
        let work: Vec<(&TrainingExample, &ItemPlan)> = batch.iter().copied().zip(&plans).collect();
        let (bundle, sched, aux_weight) = (&self.bundle, &self.sched, self.config.aux_weight);
        let results = self
            .exec
            .try_map(&work, |(ex, plan)| item_gradients(bundle, sched, ex, plan, aux_weight))?;

        let mut grads = Gradients::zeros(self.bundle.params().len());
        let (mut editing, mut aux_sum, mut aux_count) = (0.0, 0.0, 0usize);
        for r in &results {
            grads.add_assign(&r.grads);
            editing += r.editing;
            if let Some(a) = r.auxiliary {
                aux_sum += a;
                aux_count += 1;
            }
        }
        let n = batch.len() as f64;
        grads.scale(1.0 / n);
        let editing = editing / n;
        let auxiliary = if aux_count > 0 { aux_sum / aux_count as f64 } else { 0.0 };
        let report = LossReport {
            step: self.step + 1,
            editing,
            auxiliary,
            total: editing + self.config.aux_weight * auxiliary,
            lr: self.config.lr_at(self.step),
        };
        Ok((grads, report))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&TrainingExample]) -> Result<LossReport> {
        let (mut grads, report) = self.batch_gradients(batch)?;
        if self.config.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > self.config.grad_clip {
                grads.scale(self.config.grad_clip / norm);
            }
        }
        self.optimizer.step(&mut self.bundle, &grads, &self.config, report.lr);
        self.step += 1;
        Ok(report)
    }

    /// Draws a batch of indices into `examples`.
    pub fn sample_batch<'e>(&mut self, examples: &'e [TrainingExample]) -> Vec<&'e TrainingExample> {
        let n = examples.len();
        let b = self.config.batch_size;
        if b <= n {
            index::sample(&mut self.rng, n, b).into_iter().map(|i| &examples[i]).collect()
        } else {
            (0..b).map(|_| &examples[self.rng.random_range(0..n)]).collect()
        }
    }

    /// Runs `config.steps` updates, calling `on_step` after each.
    pub fn fit<F>(&mut self, examples: &[TrainingExample], mut on_step: F) -> Result<Vec<LossReport>>
    where
        F: FnMut(&LossReport) -> Result<()>,
    {
        if examples.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        let mut reports = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let batch = self.sample_batch(examples);
            let report = self.train_step(&batch)?;
            on_step(&report)?;
            reports.push(report);
        }
        Ok(reports)
    }
}

/// Writes one JSON record per step.
pub struct MetricsLog<W: Write> {
    out: W,
    config_hash: Option<String>,
    wall: Option<Instant>,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W, config_hash: Option<String>, log_wall_ms: bool) -> Self {
        MetricsLog {
            out,
            config_hash,
            wall: log_wall_ms.then(Instant::now),
        }
    }

    pub fn record(&mut self, report: &LossReport) -> Result<()> {
        let mut value = serde_json::to_value(report).map_err(|e| Error::format("metrics", e.to_string()))?;
        if let Some(start) = self.wall {
            value["wall_ms"] = serde_json::json!(start.elapsed().as_millis() as u64);
        }
        if let Some(hash) = &self.config_hash {
            value["config_hash"] = serde_json::json!(hash);
        }
        writeln!(self.out, "{value}").map_err(|e| Error::io("metrics log", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
